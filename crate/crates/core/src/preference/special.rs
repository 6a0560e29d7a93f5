use crate::error::{Error, Result};

const ASYMPTOTIC_FROM: f64 = 6.0;

/// Digamma function ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("digamma of {x}")));
    }
    Ok(digamma_positive(x))
}

pub(crate) fn digamma_positive(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series in 1/x², truncated after the x^-14 term
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 * inv - series
}

#[cfg(test)]
mod tests {
    use super::*;

    // mpmath, 30 digits
    #[allow(clippy::excessive_precision)]
    const TABLE: [(f64, f64); 11] = [
        (0.1, -10.423754940411076232),
        (0.25, -4.2274535333762654081),
        (0.5, -1.9635100260214234794),
        (1.0, -0.57721566490153286061),
        (1.5, 0.036489973978576520559),
        (2.0, 0.42278433509846713939),
        (3.7, 1.1671535393615114409),
        (6.0, 1.7061176684318004727),
        (10.0, 2.2517525890667211076),
        (37.5, 3.610948344596338412),
        (100.0, 4.6001618527380874002),
    ];

    #[test]
    fn matches_reference_table() {
        for (x, want) in TABLE {
            let got = digamma(x).unwrap();
            assert!((got - want).abs() <= 1e-10, "psi({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn recurrence() {
        for i in 0..200 {
            let x = 0.1 + i as f64 * 0.5;
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((d - 1.0 / x).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_positive() {
        assert!(matches!(digamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(digamma(-1.5), Err(Error::Domain(_))));
        assert!(digamma(f64::NAN).is_err());
    }
}
