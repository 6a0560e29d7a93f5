use rand::seq::{index, SliceRandom};

use super::{AlphaOptimizerKind, Mode, RoundConfig};
use crate::adam::{adam_step, AdamState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{comm_forward, head_forward, hyper_forward, CommModel, HyperNet, HEAD_LEN};
use crate::objectives::{ce_loss, fair_loss, loss_vector, tch_loss, LossVector};
use crate::preference::{
    nes_gradient, sample_dirichlet, update_alpha, AlphaOptimizer, DirichletParams, PrefBatch, PreferenceVector,
};
use crate::rng::{purpose, stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const EVAL_BATCH_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Everything one client owns during Phase I.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub comm: CommModel,
    pub hyper: HyperNet,
    pub alpha: DirichletParams,
    pub comm_adam: AdamState,
    pub hyper_adam: AdamState,
    pub alpha_opt: AlphaOptimizer,
    pub data: ClientData,
}

impl ClientState {
    pub fn new(id: usize, comm: CommModel, hyper: HyperNet, data: ClientData) -> Self {
        ClientState {
            id,
            comm_adam: AdamState::new(comm.0.params()),
            hyper_adam: AdamState::new(hyper.0.params()),
            comm,
            hyper,
            alpha: DirichletParams::uniform(),
            alpha_opt: AlphaOptimizer::default(),
            data,
        }
    }

    /// Local part of a Phase I round. Returns the mean cross-entropy of the
    /// last encoder epoch and the mean scalarized loss of the last hypernet
    /// epoch.
    pub(crate) fn run_round(
        &mut self,
        cfg: &RoundConfig,
        mode: Mode,
        round: usize,
        seed: u64,
    ) -> Result<(Option<f64>, Option<f64>)> {
        let mut rng = stream(seed, &[purpose::CLIENT_ROUND, self.id as u64, round as u64]);
        let ce = local_comm_update(self, cfg, round, &mut rng)?;
        let eval_rows = eval_rows(&self.data.train, cfg.eval_batch, &mut rng);
        let mut tch = None;
        for _ in 0..cfg.tau_p {
            let prefs = sample_dirichlet(self.alpha, cfg.prefs_per_step, &mut rng);
            let (loss, entries) = local_hyper_update(self, &prefs, &eval_rows, cfg, round, &mut rng)?;
            tch = Some(loss);
            if mode.adapts_sampling() {
                let batch = PrefBatch::new(self.alpha, entries)?;
                local_alpha_update(self, &batch, cfg)?;
            }
        }
        Ok((ce, tch))
    }
}

/// Shuffled row indices cut into batches of at most `size`.
pub(crate) fn minibatches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Rows used to score sampled preferences; both sensitive groups are
/// required so the fairness loss is informative.
fn eval_rows(train: &Dataset, size: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let n = train.len();
    if let Some(size) = size.filter(|&s| s < n) {
        for _ in 0..EVAL_BATCH_ATTEMPTS {
            let mut rows = index::sample(rng, n, size).into_vec();
            rows.sort_unstable();
            let groups = rows.iter().map(|&i| train.sensitive()[i]);
            if groups.clone().any(|a| a == 0) && groups.clone().any(|a| a == 1) {
                return rows;
            }
        }
    }
    (0..n).collect()
}

/// Cross-entropy and fairness terms for one batch. A batch holding a single
/// sensitive group has zero covariance, so its fairness term is a constant.
pub(crate) fn batch_losses<'t>(
    preds: Var<'t>,
    labels: &[u8],
    sensitive: &[u8],
) -> Result<(Var<'t>, Var<'t>)> {
    let ce = ce_loss(preds, labels)?;
    let fair = if sensitive.contains(&0) && sensitive.contains(&1) {
        fair_loss(preds, sensitive)?
    } else {
        preds.tape().scalar(0.0)
    };
    Ok((ce, fair))
}

fn pick<T: Copy>(values: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| values[i]).collect()
}

fn diverged(round: usize, client: usize, batch: usize, msg: impl Into<String>) -> Error {
    Error::Training {
        round,
        client,
        batch,
        msg: msg.into(),
    }
}

/// `tau_c` epochs of cross-entropy steps on the encoder at the fixed
/// preference, hypernet frozen. Returns the last epoch's mean loss.
pub fn local_comm_update(
    client: &mut ClientState,
    cfg: &RoundConfig,
    round: usize,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let theta = client.hyper.head(&cfg.comm_preference);
    let theta = Tensor::matrix(1, HEAD_LEN, theta.as_slice().to_vec())?;
    let train = &client.data.train;
    let mut last = None;
    let mut batch_no = 0;
    for _ in 0..cfg.tau_c {
        let batches = minibatches(train.len(), cfg.batch_size, rng);
        let mut total = 0.0;
        for rows in &batches {
            let tape = Tape::new();
            let params = client.comm.0.bind(&tape);
            let x = tape.leaf(train.features().select_rows(rows));
            let preds = head_forward(comm_forward(&params, x)?, tape.leaf(theta.clone()))?;
            let loss = ce_loss(preds, &pick(train.labels(), rows))?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(diverged(round, client.id, batch_no, "encoder loss is not finite"));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = params.iter().map(|p| grads.get(*p)).collect();
            adam_step(client.comm.0.params_mut(), &g, &mut client.comm_adam, cfg.lr_comm(), "encoder")
                .map_err(|e| diverged(round, client.id, batch_no, e.to_string()))?;
            total += value;
            batch_no += 1;
        }
        last = Some(total / batches.len() as f64);
    }
    Ok(last)
}

/// One epoch of hypernet steps minimizing the mean scalarized loss over
/// `prefs`, encoder frozen. Returns the epoch's mean loss and each
/// preference paired with the loss vector its model reaches on `eval_rows`.
pub fn local_hyper_update(
    client: &mut ClientState,
    prefs: &[PreferenceVector],
    eval_rows: &[usize],
    cfg: &RoundConfig,
    round: usize,
    rng: &mut Rng,
) -> Result<(f64, Vec<(PreferenceVector, LossVector)>)> {
    if prefs.is_empty() {
        return Err(Error::contract("hypernet step needs at least one preference"));
    }
    let train = &client.data.train;
    let latents = client.comm.encode(train.features())?;
    let batches = minibatches(train.len(), cfg.batch_size, rng);
    let scale = 1.0 / prefs.len() as f64;
    let mut total = 0.0;
    for (b, rows) in batches.iter().enumerate() {
        let tape = Tape::new();
        let params = client.hyper.0.bind(&tape);
        let q = tape.leaf(latents.select_rows(rows));
        let labels = pick(train.labels(), rows);
        let sensitive = pick(train.sensitive(), rows);
        let mut acc: Option<Var<'_>> = None;
        for lambda in prefs {
            let preds = head_forward(q, hyper_forward(&params, lambda)?)?;
            let (ce, fair) = batch_losses(preds, &labels, &sensitive)?;
            let t = tch_loss(ce, fair, lambda)?;
            acc = Some(match acc {
                Some(a) => a.add(t)?,
                None => t,
            });
        }
        let loss = acc.expect("non-empty preferences").mul_const(scale);
        let value = loss.item();
        if !value.is_finite() {
            return Err(diverged(round, client.id, b, "hypernet loss is not finite"));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params.iter().map(|p| grads.get(*p)).collect();
        adam_step(client.hyper.0.params_mut(), &g, &mut client.hyper_adam, cfg.lr_hyper(), "hypernet")
            .map_err(|e| diverged(round, client.id, b, e.to_string()))?;
        total += value;
    }
    let eval_latents = latents.select_rows(eval_rows);
    let labels = pick(train.labels(), eval_rows);
    let sensitive = pick(train.sensitive(), eval_rows);
    let entries = prefs
        .iter()
        .map(|lambda| {
            let preds = client.hyper.head(lambda).predict(&eval_latents);
            (*lambda, loss_vector(&preds, &labels, &sensitive))
        })
        .collect();
    Ok((total / batches.len() as f64, entries))
}

/// One step of the sampling distribution along the NES estimate of the
/// expected negative hypervolume contribution.
pub fn local_alpha_update(client: &mut ClientState, batch: &PrefBatch, cfg: &RoundConfig) -> Result<()> {
    if batch.alpha != client.alpha {
        return Err(Error::Protocol(format!(
            "preference batch drawn from {:?} but client {} samples from {:?}",
            batch.alpha.alpha(),
            client.id,
            client.alpha.alpha()
        )));
    }
    let g = nes_gradient(batch, cfg.reference)?;
    client.alpha = match cfg.alpha_optimizer {
        AlphaOptimizerKind::Adam => client.alpha_opt.step(client.alpha, g, cfg.alpha_lr)?,
        AlphaOptimizerKind::Sgd => update_alpha(client.alpha, g, cfg.alpha_lr)?,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pool, split, SplitSpec};
    use crate::objectives::ce_value;

    fn client(seed: u64) -> ClientState {
        let pool = generate_pool(600, seed).unwrap();
        let s = split(&pool, &SplitSpec::standard(seed)).unwrap();
        let mut rng = stream(seed, &[purpose::INIT]);
        let comm = CommModel::init(3, &mut rng);
        let hyper = HyperNet::init(&mut rng);
        ClientState::new(
            0,
            comm,
            hyper,
            ClientData {
                train: s.train,
                validation: s.validation,
                test: s.test,
            },
        )
    }

    fn train_ce(c: &ClientState, lambda: &PreferenceVector) -> f64 {
        let preds = crate::nets::predict(&c.comm, &c.hyper, lambda, c.data.train.features()).unwrap();
        ce_value(&preds, c.data.train.labels())
    }

    #[test]
    fn zero_epochs_leave_encoder_unchanged() {
        let mut c = client(1);
        let before = c.comm.clone();
        let cfg = RoundConfig { tau_c: 0, ..RoundConfig::default() };
        assert_eq!(local_comm_update(&mut c, &cfg, 0, &mut stream(0, &[0])).unwrap(), None);
        assert_eq!(c.comm, before);
    }

    #[test]
    fn encoder_steps_reduce_cross_entropy() {
        let mut c = client(2);
        let lambda = PreferenceVector::balanced();
        let before = train_ce(&c, &lambda);
        // 30 steps: 10 epochs of 3 batches
        let cfg = RoundConfig { tau_c: 10, batch_size: 128, ..RoundConfig::default() };
        assert_eq!(minibatches(c.data.train.len(), 128, &mut stream(0, &[0])).len(), 3);
        local_comm_update(&mut c, &cfg, 0, &mut stream(0, &[1])).unwrap();
        assert!(train_ce(&c, &lambda) < before);
    }

    #[test]
    fn encoder_update_is_deterministic() {
        let cfg = RoundConfig { tau_c: 2, ..RoundConfig::default() };
        let mut a = client(3);
        let mut b = client(3);
        local_comm_update(&mut a, &cfg, 0, &mut stream(5, &[1])).unwrap();
        local_comm_update(&mut b, &cfg, 0, &mut stream(5, &[1])).unwrap();
        assert_eq!(a.comm, b.comm);
    }

    #[test]
    fn single_fixed_preference_reduces_loss() {
        let mut c = client(4);
        let lambda = PreferenceVector::balanced();
        let cfg = RoundConfig::default();
        let rows: Vec<usize> = (0..c.data.train.len()).collect();
        let (first, _) = local_hyper_update(&mut c, &[lambda], &rows, &cfg, 0, &mut stream(1, &[0])).unwrap();
        let mut last = first;
        for e in 1..20 {
            last = local_hyper_update(&mut c, &[lambda], &rows, &cfg, 0, &mut stream(1, &[e])).unwrap().0;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn hypernet_step_returns_one_entry_per_preference() {
        let mut c = client(5);
        let cfg = RoundConfig::default();
        let mut rng = stream(2, &[0]);
        let rows = eval_rows(&c.data.train, Some(128), &mut rng);
        assert_eq!(rows.len(), 128);
        let prefs = sample_dirichlet(c.alpha, 4, &mut rng);
        let (_, entries) = local_hyper_update(&mut c, &prefs, &rows, &cfg, 0, &mut rng).unwrap();
        assert_eq!(entries.len(), 4);
        assert!(entries.iter().all(|(_, l)| l.is_finite()));
        assert!(PrefBatch::new(c.alpha, Vec::new()).is_err());
    }

    #[test]
    fn equal_contributions_leave_alpha_unchanged() {
        let mut c = client(6);
        let p = PreferenceVector::balanced();
        let q = PreferenceVector::from_first(0.3).unwrap();
        let l = LossVector::new(0.4, 0.1);
        let batch = PrefBatch::new(c.alpha, vec![(p, l), (q, l)]).unwrap();
        local_alpha_update(&mut c, &batch, &RoundConfig::default()).unwrap();
        assert_eq!(c.alpha, DirichletParams::uniform());
    }

    #[test]
    fn stale_batch_is_rejected() {
        let mut c = client(7);
        let l = LossVector::new(0.4, 0.1);
        let other = DirichletParams::new(2.0, 1.0).unwrap();
        let batch = PrefBatch::new(other, vec![(PreferenceVector::balanced(), l); 2]).unwrap();
        assert!(matches!(
            local_alpha_update(&mut c, &batch, &RoundConfig::default()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn non_finite_parameters_report_location() {
        let mut c = client(8);
        c.comm.0.params_mut()[0].data_mut().fill(f64::NAN);
        let cfg = RoundConfig { tau_c: 1, ..RoundConfig::default() };
        let err = local_comm_update(&mut c, &cfg, 4, &mut stream(0, &[0])).unwrap_err();
        assert!(matches!(err, Error::Training { round: 4, client: 0, .. }), "{err}");
    }
}
