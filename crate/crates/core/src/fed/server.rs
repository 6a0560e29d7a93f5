use super::client::{batch_losses, minibatches};
use super::{ClientState, RoundConfig};
use crate::adam::{adam_step, AdamState};
use crate::data::LatentDataset;
use crate::error::{Error, Result};
use crate::nets::{fuse, fusion_weights, head_forward, hyper_forward, Aggregator, CommModel, FusionNet, HyperNet};
use crate::objectives::tch_loss;
use crate::preference::{sample_dirichlet, DirichletParams};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Server side of both phases.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub comm: CommModel,
    pub clients: usize,
    pub hypernets: Vec<HyperNet>,
    pub latents: Vec<LatentDataset>,
    pub fusion: FusionNet,
    pub fusion_adam: AdamState,
}

impl ServerState {
    pub fn new(comm: CommModel, fusion: FusionNet) -> Self {
        ServerState {
            comm,
            clients: fusion.clients(),
            hypernets: Vec::new(),
            latents: Vec::new(),
            fusion_adam: AdamState::new(fusion.0.params()),
            fusion,
        }
    }

    pub fn collected(&self) -> bool {
        self.hypernets.len() == self.clients && self.latents.len() == self.clients
    }

    fn require_collection(&self) -> Result<()> {
        if !self.collected() {
            return Err(Error::Protocol(format!(
                "collected {} of {} client payloads",
                self.hypernets.len(),
                self.clients
            )));
        }
        Ok(())
    }
}

/// Unweighted parameter-wise mean of the client encoders.
///
/// Accumulates offsets from the first encoder, so identical inputs average
/// to themselves exactly.
pub fn server_aggregate_psi(comms: &[&CommModel]) -> Result<CommModel> {
    let first = comms
        .first()
        .ok_or_else(|| Error::Protocol("no encoders to aggregate".into()))?;
    let mut offsets: Vec<Tensor> = first.0.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for c in comms {
        if c.0.sizes() != first.0.sizes() {
            return Err(Error::Dimension {
                op: "server_aggregate_psi",
                left: first.0.sizes().to_vec(),
                right: c.0.sizes().to_vec(),
            });
        }
        for ((acc, p), base) in offsets.iter_mut().zip(c.0.params()).zip(first.0.params()) {
            acc.add_assign(&p.zip_map(base, |x, b| x - b));
        }
    }
    let scale = 1.0 / comms.len() as f64;
    let params = offsets
        .iter()
        .zip(first.0.params())
        .map(|(d, base)| base.zip_map(d, |b, d| b + d * scale))
        .collect();
    Ok(CommModel(crate::nets::Mlp::from_params(first.0.sizes(), params)?))
}

/// Copies every client's hypernet and encodes its training rows with the
/// global encoder.
pub fn phase2_collect(server: &mut ServerState, clients: &[ClientState]) -> Result<()> {
    for (k, c) in clients.iter().enumerate() {
        if c.id != k {
            return Err(Error::Protocol(format!("client {k} missing (found id {})", c.id)));
        }
    }
    if clients.len() != server.clients {
        return Err(Error::Protocol(format!(
            "expected {} clients, got {}",
            server.clients,
            clients.len()
        )));
    }
    server.hypernets = clients.iter().map(|c| c.hyper.clone()).collect();
    server.latents = clients
        .iter()
        .map(|c| {
            let t = &c.data.train;
            LatentDataset::new(server.comm.encode(t.features())?, t.labels().to_vec(), t.sensitive().to_vec())
        })
        .collect::<Result<_>>()?;
    Ok(())
}

/// Trains the fusion network on the collected payloads; client hypernets
/// stay fixed. Each epoch walks the largest client's batches once, cycling
/// smaller clients. Returns the mean loss of every epoch.
pub fn phase2_train_fusion(server: &mut ServerState, cfg: &RoundConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    server.require_collection()?;
    let k = server.clients;
    let scale = 1.0 / (cfg.prefs_per_step * k) as f64;
    let mut history = Vec::with_capacity(cfg.fusion_epochs);
    for epoch in 0..cfg.fusion_epochs {
        let plans: Vec<Vec<Vec<usize>>> = server
            .latents
            .iter()
            .map(|q| minibatches(q.len(), cfg.batch_size, rng))
            .collect();
        let steps = plans.iter().map(Vec::len).max().unwrap_or(0);
        let mut total = 0.0;
        for s in 0..steps {
            let prefs = sample_dirichlet(DirichletParams::uniform(), cfg.prefs_per_step, rng);
            let tape = Tape::new();
            let fparams = server.fusion.0.bind(&tape);
            let hparams: Vec<Vec<Var<'_>>> = server.hypernets.iter().map(|h| h.0.bind(&tape)).collect();
            let batches: Vec<(Var<'_>, Vec<u8>, Vec<u8>)> = server
                .latents
                .iter()
                .zip(&plans)
                .map(|(q, plan)| {
                    let rows = &plan[s % plan.len()];
                    (
                        tape.leaf(q.latents().select_rows(rows)),
                        rows.iter().map(|&i| q.labels()[i]).collect(),
                        rows.iter().map(|&i| q.sensitive()[i]).collect(),
                    )
                })
                .collect();
            let mut acc = tape.scalar(0.0);
            for lambda in &prefs {
                let omega = fusion_weights(&fparams, lambda)?;
                let global = fuse(omega, &hparams)?;
                let theta = hyper_forward(&global, lambda)?;
                for (q, y, a) in &batches {
                    let (ce, fair) = batch_losses(head_forward(*q, theta)?, y, a)?;
                    acc = acc.add(tch_loss(ce, fair, lambda)?)?;
                }
            }
            let loss = acc.mul_const(scale);
            let value = loss.item();
            let fail = |msg: String| Error::Training {
                round: epoch,
                client: k,
                batch: s,
                msg,
            };
            if !value.is_finite() {
                return Err(fail("fusion loss is not finite".into()));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = fparams.iter().map(|p| grads.get(*p)).collect();
            adam_step(server.fusion.0.params_mut(), &g, &mut server.fusion_adam, cfg.lr_fusion(), "fusion")
                .map_err(|e| fail(e.to_string()))?;
            total += value;
        }
        history.push(total / steps.max(1) as f64);
    }
    Ok(history)
}

impl ServerState {
    /// Aggregator used at inference for the given mode.
    pub fn aggregator(&self, learned: bool) -> Aggregator {
        if learned {
            Aggregator::Fusion(self.fusion.clone())
        } else {
            Aggregator::Average { clients: self.clients }
        }
    }
}
