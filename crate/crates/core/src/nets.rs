//! Encoder, hypernet and fusion networks.
//!
//! Parameters live in plain [`Tensor`]s owned by an [`Mlp`]. Differentiable
//! forward passes take the parameters as tape [`Var`]s so that gradients can
//! be requested for any subset (encoder only, hypernet only, fusion only).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::PreferenceVector;
use crate::rng::Rng;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 4;
pub const HIDDEN_DIM: usize = 4;
/// Head weights (one per latent dimension) followed by a bias.
pub const HEAD_LEN: usize = LATENT_DIM + 1;
pub const PREF_DIM: usize = 2;

/// Fully connected stack; parameters are stored as `[w0, b0, w1, b1, ...]`
/// with weights shaped `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            params.push(Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape"));
            params.push(Tensor::vector(draw(fan_out)));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let params = sizes
            .windows(2)
            .flat_map(|p| [Tensor::zeros(&[p[0], p[1]]), Tensor::zeros(&[p[1]])])
            .collect();
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<Tensor>) -> Result<Self> {
        let expected = Mlp::zeros(sizes);
        if params.len() != expected.params.len()
            || params.iter().zip(&expected.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Dimension {
                op: "mlp parameters",
                left: sizes.to_vec(),
                right: params.iter().map(Tensor::len).collect(),
            });
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Differentiable forward pass. ReLU follows every layer except the last,
    /// which gets one only when `relu_output` is set.
    pub fn forward<'t>(params: &[Var<'t>], x: Var<'t>, relu_output: bool) -> Result<Var<'t>> {
        let layers = params.len() / 2;
        let mut h = x;
        for (l, wb) in params.chunks(2).enumerate() {
            h = h.matmul(wb[0])?.add_row(wb[1])?;
            if l + 1 < layers || relu_output {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass matching [`Mlp::forward`].
    pub fn forward_values(&self, x: &Tensor, relu_output: bool) -> Result<Tensor> {
        let layers = self.params.len() / 2;
        let mut h = x.clone();
        for (l, wb) in self.params.chunks(2).enumerate() {
            h = h.matmul(&wb[0])?;
            let cols = wb[1].len();
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += wb[1].data()[j % cols];
            }
            if l + 1 < layers || relu_output {
                h = h.map(crate::tensor::relu);
            }
        }
        Ok(h)
    }
}

fn pref_tensor(lambda: &PreferenceVector) -> Tensor {
    Tensor::matrix(1, PREF_DIM, vec![lambda.first(), lambda.second()]).expect("shape")
}

/// Shared encoder: `x -> Linear(d_in, 4) -> ReLU -> Linear(4, 4) -> ReLU`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommModel(pub Mlp);

impl CommModel {
    pub fn sizes(input_dim: usize) -> [usize; 3] {
        [input_dim, HIDDEN_DIM, LATENT_DIM]
    }

    pub fn init(input_dim: usize, rng: &mut Rng) -> Self {
        CommModel(Mlp::init(&Self::sizes(input_dim), rng))
    }

    pub fn zeros(input_dim: usize) -> Self {
        CommModel(Mlp::zeros(&Self::sizes(input_dim)))
    }

    pub fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        let (_, cols) = x.dims2();
        if x.shape().len() != 2 || cols != self.input_dim() {
            return Err(Error::Dimension {
                op: "comm_forward",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Latent features without recording a tape.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        self.0.forward_values(x, true)
    }
}

/// Differentiable encoder pass for `x: [b, d_in]`.
pub fn comm_forward<'t>(params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let w0 = params[0].value();
    let xv = x.value();
    if xv.shape().len() != 2 || xv.dims2().1 != w0.dims2().0 {
        return Err(Error::Dimension {
            op: "comm_forward",
            left: xv.shape().to_vec(),
            right: vec![w0.dims2().0],
        });
    }
    Mlp::forward(params, x, true)
}

/// Maps a preference vector to head parameters:
/// `λ -> Linear(2, 4) -> ReLU -> Linear(4, 4) -> ReLU -> Linear(4, 5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperNet(pub Mlp);

impl HyperNet {
    pub const SIZES: [usize; 4] = [PREF_DIM, HIDDEN_DIM, HIDDEN_DIM, HEAD_LEN];

    pub fn init(rng: &mut Rng) -> Self {
        HyperNet(Mlp::init(&Self::SIZES, rng))
    }

    pub fn zeros() -> Self {
        HyperNet(Mlp::zeros(&Self::SIZES))
    }

    /// Head parameters for `lambda` without recording a tape.
    pub fn head(&self, lambda: &PreferenceVector) -> HeadParams {
        let out = self
            .0
            .forward_values(&pref_tensor(lambda), false)
            .expect("fixed hypernet shapes");
        HeadParams::from_slice(out.data()).expect("head length")
    }
}

/// Differentiable hypernet pass; the result has shape `[1, HEAD_LEN]`.
pub fn hyper_forward<'t>(params: &[Var<'t>], lambda: &PreferenceVector) -> Result<Var<'t>> {
    let tape = params[0].tape();
    let l = tape.leaf(pref_tensor(lambda));
    Mlp::forward(params, l, false)
}

/// Linear prediction head over the latent features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams(Vec<f64>);

impl HeadParams {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != HEAD_LEN {
            return Err(Error::Dimension {
                op: "head",
                left: vec![HEAD_LEN],
                right: vec![values.len()],
            });
        }
        Ok(HeadParams(values.to_vec()))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0[..LATENT_DIM]
    }

    pub fn bias(&self) -> f64 {
        self.0[LATENT_DIM]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Probabilities for each latent row.
    pub fn predict(&self, latents: &Tensor) -> Vec<f64> {
        let (rows, _) = latents.dims2();
        (0..rows)
            .map(|i| {
                let z: f64 = latents
                    .row(i)
                    .iter()
                    .zip(self.weights())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.bias();
                sigmoid(z)
            })
            .collect()
    }
}

/// Differentiable head: `sigmoid(latents · w + b)` for `latents: [b, 4]` and
/// `theta: [1, 5]`; returns shape `[b]`.
pub fn head_forward<'t>(latents: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
    let rows = latents.value().dims2().0;
    let w = theta.slice(0, &[LATENT_DIM, 1])?;
    let b = theta.slice(LATENT_DIM, &[1])?;
    Ok(latents.matmul(w)?.add_row(b)?.reshape(&[rows])?.sigmoid())
}

/// Probabilities of the composed model `(encoder, hypernet(λ))` on `x`.
pub fn predict(
    comm: &CommModel,
    hyper: &HyperNet,
    lambda: &PreferenceVector,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let latents = comm.encode(x)?;
    Ok(hyper.head(lambda).predict(&latents))
}

/// Maps a preference to positive client weights that sum to one:
/// `λ -> Linear(2, 4) -> ReLU -> Linear(4, 4) -> ReLU -> Linear(4, K) -> softmax`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNet(pub Mlp);

impl FusionNet {
    pub fn sizes(clients: usize) -> [usize; 4] {
        [PREF_DIM, HIDDEN_DIM, HIDDEN_DIM, clients]
    }

    pub fn init(clients: usize, rng: &mut Rng) -> Self {
        FusionNet(Mlp::init(&Self::sizes(clients), rng))
    }

    pub fn zeros(clients: usize) -> Self {
        FusionNet(Mlp::zeros(&Self::sizes(clients)))
    }

    pub fn clients(&self) -> usize {
        self.0.output_dim()
    }

    pub fn weights(&self, lambda: &PreferenceVector) -> Vec<f64> {
        let tape = Tape::new();
        let params = self.0.bind(&tape);
        fusion_weights(&params, lambda)
            .expect("fixed fusion shapes")
            .value()
            .data()
            .to_vec()
    }
}

/// Differentiable fusion weights, shape `[K]`.
pub fn fusion_weights<'t>(params: &[Var<'t>], lambda: &PreferenceVector) -> Result<Var<'t>> {
    let tape = params[0].tape();
    let l = tape.leaf(pref_tensor(lambda));
    let logits = Mlp::forward(params, l, false)?;
    let k = logits.value().len();
    Ok(logits.reshape(&[k])?.softmax())
}

/// Parameter-wise combination `Σ_k ω_k β_k`, differentiable in `omega`.
pub fn fuse<'t>(omega: Var<'t>, hypernets: &[Vec<Var<'t>>]) -> Result<Vec<Var<'t>>> {
    let k = omega.value().len();
    if hypernets.len() != k || k == 0 {
        return Err(Error::Dimension {
            op: "fuse",
            left: vec![k],
            right: vec![hypernets.len()],
        });
    }
    let reference: Vec<Vec<usize>> = hypernets[0].iter().map(Var::shape).collect();
    for h in &hypernets[1..] {
        let shapes: Vec<Vec<usize>> = h.iter().map(Var::shape).collect();
        if shapes != reference {
            return Err(Error::Dimension {
                op: "fuse",
                left: reference.iter().map(|s| s.iter().product()).collect(),
                right: shapes.iter().map(|s| s.iter().product()).collect(),
            });
        }
    }
    let weights: Vec<Var<'t>> = (0..k).map(|i| omega.slice(i, &[1])).collect::<Result<_>>()?;
    (0..reference.len())
        .map(|j| {
            let mut acc = hypernets[0][j].scale(weights[0])?;
            for (h, w) in hypernets.iter().zip(&weights).skip(1) {
                acc = acc.add(h[j].scale(*w)?)?;
            }
            Ok(acc)
        })
        .collect()
}

/// Tape-free [`fuse`].
pub fn fuse_values(omega: &[f64], hypernets: &[HyperNet]) -> Result<HyperNet> {
    if hypernets.len() != omega.len() || omega.is_empty() {
        return Err(Error::Dimension {
            op: "fuse",
            left: vec![omega.len()],
            right: vec![hypernets.len()],
        });
    }
    let first = &hypernets[0].0;
    let mut params: Vec<Tensor> = first.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (h, &w) in hypernets.iter().zip(omega) {
        if h.0.sizes() != first.sizes() {
            return Err(Error::Dimension {
                op: "fuse",
                left: first.sizes().to_vec(),
                right: h.0.sizes().to_vec(),
            });
        }
        for (acc, p) in params.iter_mut().zip(h.0.params()) {
            acc.add_assign(&p.scaled(w));
        }
    }
    Ok(HyperNet(Mlp::from_params(first.sizes(), params)?))
}

/// How the server turns client hypernets into a global hypernet for a
/// given preference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    /// Preference-dependent weights from a trained [`FusionNet`].
    Fusion(FusionNet),
    /// Equal weight on every client.
    Average { clients: usize },
}

impl Aggregator {
    pub fn clients(&self) -> usize {
        match self {
            Aggregator::Fusion(f) => f.clients(),
            Aggregator::Average { clients } => *clients,
        }
    }

    pub fn weights(&self, lambda: &PreferenceVector) -> Vec<f64> {
        match self {
            Aggregator::Fusion(f) => f.weights(lambda),
            Aggregator::Average { clients } => vec![1.0 / *clients as f64; *clients],
        }
    }

    pub fn global_hypernet(&self, lambda: &PreferenceVector, hypernets: &[HyperNet]) -> Result<HyperNet> {
        fuse_values(&self.weights(lambda), hypernets)
    }
}
