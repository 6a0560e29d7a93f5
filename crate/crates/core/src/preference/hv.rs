use super::ReferencePoint;

/// Exact area dominated by `points` inside the box `[0, r]`.
///
/// Coordinates below zero are clipped to zero; a point at or beyond the
/// reference point in either coordinate contributes nothing.
pub fn hv_2d(points: &[[f64; 2]], r: ReferencePoint) -> f64 {
    let [rx, ry] = r.coords();
    let mut inside: Vec<[f64; 2]> = points
        .iter()
        .filter(|p| p[0] < rx && p[1] < ry)
        .map(|p| [p[0].max(0.0), p[1].max(0.0)])
        .collect();
    inside.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut ceiling = ry;
    for p in inside {
        if p[1] < ceiling {
            area += (rx - p[0]) * (ceiling - p[1]);
            ceiling = p[1];
        }
    }
    area
}

/// Hypervolume lost by removing point `i` from `points`.
pub fn hvc(i: usize, points: &[[f64; 2]], r: ReferencePoint) -> f64 {
    let rest: Vec<[f64; 2]> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, p)| *p)
        .collect();
    (hv_2d(points, r) - hv_2d(&rest, r)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    const R: ReferencePoint = ReferencePoint::unit();

    #[test]
    fn worked_values() {
        assert!((hv_2d(&[[0.5, 0.5]], R) - 0.25).abs() < 1e-15);
        let two = [[0.2, 0.4], [0.4, 0.2]];
        assert!((hv_2d(&two, R) - 0.60).abs() < 1e-12);
        assert!((hvc(0, &two, R) - 0.12).abs() < 1e-12);
        assert!((hvc(1, &two, R) - 0.12).abs() < 1e-12);
        assert_eq!(hv_2d(&[[1.2, 0.3]], R), 0.0);
        assert_eq!(hv_2d(&[[1.0, 0.3]], R), 0.0);
        assert_eq!(hv_2d(&[], R), 0.0);
        assert_eq!(hvc(1, &[[0.2, 0.2], [0.5, 0.5]], R), 0.0);
        assert!((hvc(0, &[[0.5, 0.5]], R) - 0.25).abs() < 1e-15);
        assert_eq!(hvc(0, &[[0.3, 0.6], [0.3, 0.6], [0.6, 0.1]], R), 0.0);
    }

    #[test]
    fn negative_coordinates_clip() {
        assert!((hv_2d(&[[-0.5, 0.5]], R) - 0.5).abs() < 1e-15);
    }

    /// Monte Carlo membership oracle; returns (estimate, standard error).
    fn monte_carlo(points: &[[f64; 2]], samples: usize, seed: u64) -> (f64, f64) {
        let mut rng = SmallRng::seed_from_u64(seed);
        let hits = (0..samples)
            .filter(|_| {
                let q = [rng.random::<f64>(), rng.random::<f64>()];
                points.iter().any(|p| p[0] <= q[0] && p[1] <= q[1])
            })
            .count();
        let p = hits as f64 / samples as f64;
        (p, (p * (1.0 - p) / samples as f64).sqrt())
    }

    #[test]
    fn agrees_with_monte_carlo() {
        let mut rng = SmallRng::seed_from_u64(5);
        for set in 0..40 {
            let n = rng.random_range(1..=30);
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)])
                .collect();
            let exact = hv_2d(&pts, R);
            let (est, se) = monte_carlo(&pts, 200_000, set);
            // family-wise 99% over the 40 sets
            assert!((exact - est).abs() <= 3.66 * se + 1e-12, "set {set}: {exact} vs {est}±{se}");
        }
    }

    fn point() -> impl Strategy<Value = [f64; 2]> {
        (-0.2f64..1.2, -0.2f64..1.2).prop_map(|(a, b)| [a, b])
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(pts in proptest::collection::vec(point(), 1..30), extra in point()) {
            let base = hv_2d(&pts, R);
            let mut more = pts.clone();
            more.push(extra);
            prop_assert!(hv_2d(&more, R) >= base - 1e-15);
            prop_assert!((0.0..=1.0).contains(&base));
            let total: f64 = (0..pts.len()).map(|i| hvc(i, &pts, R)).sum();
            prop_assert!(total <= base + 1e-12);
            for i in 0..pts.len() {
                prop_assert!(hvc(i, &pts, R) <= base + 1e-15);
            }
        }

        #[test]
        fn non_dominated_subset_has_same_volume(pts in proptest::collection::vec(point(), 1..30)) {
            let nd: Vec<[f64; 2]> = pts
                .iter()
                .filter(|p| !pts.iter().any(|q| q[0] <= p[0] && q[1] <= p[1] && (q[0] < p[0] || q[1] < p[1])))
                .copied()
                .collect();
            prop_assert!((hv_2d(&pts, R) - hv_2d(&nd, R)).abs() < 1e-12);
        }
    }
}
