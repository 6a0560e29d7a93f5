//! Experiment configuration, end-to-end runs and the run directory layout.
//!
//! A run directory holds `config.json`, one `seed-<s>/` directory per seed
//! (telemetry, checkpoint, front CSVs, report) and a cross-seed
//! `summary.json`. Every file carries the config hash and, where it applies,
//! the seed.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_pool, generate_synthetic, load_csv, partition_dirichlet, split, Dataset, LoadWarning, Schema,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{global_hv_report, local_hv_report, mean_hv, FrontReport, FrontSummary, Provenance};
use crate::fed::{
    phase1_round, phase2_collect, phase2_train_fusion, ClientData, ClientState, Mode, RoundConfig, RoundRecord,
    ServerState,
};
use crate::nets::{Aggregator, CommModel, FusionNet, HyperNet};
use crate::rng::{derive_seed, purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Four-cluster Gaussian generator.
    Synthetic { n: usize },
    /// Tabular file plus a schema describing its columns.
    Csv { path: PathBuf, schema: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic { n: 5000 }
    }
}

fn default_clients() -> usize {
    3
}

fn default_heterogeneity() -> f64 {
    0.5
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_grid() -> usize {
    crate::eval::DEFAULT_GRID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Dirichlet concentration of the label-wise client partition.
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub training: RoundConfig,
    /// Preference grid size for front reports.
    #[serde(default = "default_grid")]
    pub eval_grid: usize,
    /// Silences the warning for a local epoch budget other than 30.
    #[serde(default)]
    pub allow_nonstandard_epochs: bool,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            clients: default_clients(),
            heterogeneity: default_heterogeneity(),
            mode: Mode::Hetpfl,
            seeds: default_seeds(),
            training: RoundConfig::default(),
            eval_grid: default_grid(),
            allow_nonstandard_epochs: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative dataset paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DatasetConfig::Csv { path: data, schema } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [data, schema] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if !(self.heterogeneity > 0.0 && self.heterogeneity.is_finite()) {
            return Err(Error::Config(format!("heterogeneity must be positive, got {}", self.heterogeneity)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.eval_grid == 0 {
            return Err(Error::Config("eval_grid must be at least 1".into()));
        }
        if self.mode.adapts_sampling() && self.training.tau_p > 0 && self.training.prefs_per_step < 2 {
            return Err(Error::Config(format!(
                "mode {} adapts sampling and needs prefs_per_step >= 2",
                self.mode
            )));
        }
        if let DatasetConfig::Synthetic { n } = self.dataset {
            if n < 100 * self.clients {
                return Err(Error::Config(format!(
                    "synthetic n={n} is below 100 samples per client for {} clients",
                    self.clients
                )));
            }
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.training.nonstandard_local_epochs() && !self.allow_nonstandard_epochs {
            out.push(format!(
                "tau_c + tau_p = {} differs from the reference {} local epochs",
                self.training.tau_c + self.training.tau_p,
                crate::fed::LOCAL_EPOCHS
            ));
        }
        out
    }

    /// SHA-256 of the canonical JSON form, excluding the output location.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Per-client train/validation/test splits for one seed.
pub fn prepare_clients(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<ClientData>, Vec<LoadWarning>)> {
    let (parts, warnings) = match &cfg.dataset {
        DatasetConfig::Synthetic { n } => {
            let parts = if cfg.clients == 1 {
                vec![generate_pool(*n, seed)?]
            } else {
                generate_synthetic(*n, cfg.clients, cfg.heterogeneity, seed)?
            };
            (parts, Vec::new())
        }
        DatasetConfig::Csv { path, schema } => {
            let schema = Schema::from_json_file(schema)?;
            let (ds, warnings) = load_csv(path, &schema)?;
            let parts = if cfg.clients == 1 {
                vec![ds]
            } else {
                partition_dirichlet(&ds, cfg.clients, cfg.heterogeneity, seed)?
            };
            (parts, warnings)
        }
    };
    let data = parts
        .iter()
        .enumerate()
        .map(|(k, ds)| {
            let s = split(ds, &SplitSpec::standard(derive_seed(seed, &[purpose::SPLIT, k as u64])))?;
            Ok(ClientData {
                train: s.train,
                validation: s.validation,
                test: s.test,
            })
        })
        .collect::<Result<_>>()?;
    Ok((data, warnings))
}

/// Everything one seed of an experiment produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub telemetry: Vec<RoundRecord>,
    /// Mean fusion loss per epoch; empty when fusion is not learned.
    pub fusion_history: Vec<f64>,
    pub checkpoint: Checkpoint,
    pub local_reports: Vec<FrontReport>,
    pub global_report: FrontReport,
}

impl RunArtifacts {
    pub fn local_hv_mean(&self) -> f64 {
        mean_hv(&self.local_reports)
    }

    pub fn global_hv(&self) -> f64 {
        self.global_report.hv
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }
}

/// Local fronts on each client's test split and the global front on their
/// union, all from checkpointed state.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &[ClientData], m: usize) -> Result<(Vec<FrontReport>, FrontReport)> {
    if ckpt.hypernets.len() != data.len() || ckpt.local_comms.len() != data.len() {
        return Err(Error::Protocol(format!(
            "checkpoint holds {} hypernets for {} clients",
            ckpt.hypernets.len(),
            data.len()
        )));
    }
    let locals = ckpt
        .hypernets
        .iter()
        .zip(data)
        .enumerate()
        .map(|(k, (h, d))| local_hv_report(k, &ckpt.local_comms[k], h, &d.test, m))
        .collect::<Result<Vec<_>>>()?;
    let tests: Vec<&Dataset> = data.iter().map(|d| &d.test).collect();
    let global = global_hv_report(&ckpt.comm, &ckpt.hypernets, &ckpt.aggregator, &tests, m)?;
    Ok((locals, global))
}

/// Runs both phases for one seed under `mode` (overriding `cfg.mode`).
pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let (data, _) = prepare_clients(cfg, seed)?;
    let k = data.len();
    let input_dim = data[0].train.dim();
    let comm = CommModel::init(input_dim, &mut stream(seed, &[purpose::INIT, 0]));
    let mut clients: Vec<ClientState> = data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let hyper = HyperNet::init(&mut stream(seed, &[purpose::INIT, 1, i as u64]));
            ClientState::new(i, comm.clone(), hyper, d.clone())
        })
        .collect();
    let fusion = FusionNet::init(k, &mut stream(seed, &[purpose::INIT, 2]));
    let mut server = ServerState::new(comm, fusion);

    let tcfg = &cfg.training;
    let mut telemetry = Vec::with_capacity(tcfg.rounds * k);
    for round in 0..tcfg.rounds {
        telemetry.extend(phase1_round(&mut clients, &mut server, tcfg, mode, round, seed)?);
        log::debug!("seed {seed} round {round} done");
    }
    let local_comms: Vec<CommModel> = clients.iter().map(|c| c.comm.clone()).collect();
    phase2_collect(&mut server, &clients)?;
    let fusion_history = if mode.learns_fusion() {
        phase2_train_fusion(&mut server, tcfg, &mut stream(seed, &[purpose::FUSION]))?
    } else {
        Vec::new()
    };
    let aggregator: Aggregator = server.aggregator(mode.learns_fusion());
    let checkpoint = Checkpoint {
        config_hash: config_hash.clone(),
        seed,
        mode,
        rounds: tcfg.rounds,
        comm: server.comm.clone(),
        local_comms,
        hypernets: server.hypernets.clone(),
        alphas: clients.iter().map(|c| c.alpha).collect(),
        aggregator,
    };
    let (local_reports, global_report) = evaluate_checkpoint(&checkpoint, &data, cfg.eval_grid)?;
    Ok(RunArtifacts {
        seed,
        mode,
        config_hash,
        telemetry,
        fusion_history,
        checkpoint,
        local_reports,
        global_report,
    })
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Protocol(format!("{} is locked by another writer", dir.display()))
            } else {
                Error::Io(e)
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Serialize)]
struct TelemetryLine<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub m: usize,
    pub local: Vec<FrontSummary>,
    pub local_hv_mean: f64,
    pub global: FrontSummary,
    pub fusion_history: Vec<f64>,
}

pub fn seed_report(art: &RunArtifacts) -> SeedReport {
    let prov = art.provenance();
    SeedReport {
        config_hash: art.config_hash.clone(),
        seed: art.seed,
        mode: art.mode,
        m: art.global_report.points.len(),
        local: art.local_reports.iter().map(|r| r.summary(&prov)).collect(),
        local_hv_mean: art.local_hv_mean(),
        global: art.global_report.summary(&prov),
        fusion_history: art.fusion_history.clone(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes front CSVs and a report for one seed into `dir`.
pub fn write_fronts(dir: &Path, prov: &Provenance, locals: &[FrontReport], global: &FrontReport, report: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in locals {
        r.write_csv(&dir.join(format!("front-{}.csv", r.scope)), prov)?;
    }
    global.write_csv(&dir.join("front-global.csv"), prov)?;
    write_json(&dir.join("report.json"), report)
}

/// Writes every per-seed output of `art` under `run_dir`.
pub fn write_seed(run_dir: &Path, art: &RunArtifacts) -> Result<()> {
    let dir = seed_dir(run_dir, art.seed);
    fs::create_dir_all(&dir)?;
    let mut telemetry = std::io::BufWriter::new(File::create(dir.join("telemetry.jsonl"))?);
    for record in &art.telemetry {
        let line = TelemetryLine {
            config_hash: &art.config_hash,
            seed: art.seed,
            record,
        };
        serde_json::to_writer(&mut telemetry, &line)?;
        telemetry.write_all(b"\n")?;
    }
    telemetry.flush()?;
    art.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    write_fronts(&dir, &art.provenance(), &art.local_reports, &art.global_report, &seed_report(art))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub local_hv: Vec<f64>,
    pub local_hv_mean: f64,
    pub global_hv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedSummary>,
    /// Mean over seeds of the per-seed mean local hypervolume.
    pub local_hv: MeanStd,
    pub global_hv: MeanStd,
    pub warnings: Vec<String>,
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[RunArtifacts]) -> RunSummary {
    let per_seed: Vec<SeedSummary> = runs
        .iter()
        .map(|a| SeedSummary {
            seed: a.seed,
            local_hv: a.local_reports.iter().map(|r| r.hv).collect(),
            local_hv_mean: a.local_hv_mean(),
            global_hv: a.global_hv(),
        })
        .collect();
    RunSummary {
        config_hash: cfg.hash(),
        mode: runs.first().map_or(cfg.mode, |a| a.mode),
        seeds: runs.iter().map(|a| a.seed).collect(),
        local_hv: MeanStd::of(&per_seed.iter().map(|s| s.local_hv_mean).collect::<Vec<_>>()),
        global_hv: MeanStd::of(&per_seed.iter().map(|s| s.global_hv).collect::<Vec<_>>()),
        per_seed,
        warnings: cfg.warnings(),
    }
}

/// Runs every configured seed and writes the complete run directory.
pub fn execute(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let _lock = RunLock::acquire(run_dir)?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = None;
    write_json(
        &run_dir.join("config.json"),
        &serde_json::json!({ "config_hash": cfg.hash(), "config": snapshot }),
    )?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("running seed {seed} in mode {}", cfg.mode);
        let art = run_experiment(cfg, cfg.mode, seed)?;
        write_seed(run_dir, &art)?;
        runs.push(art);
    }
    let summary = summarize(cfg, &runs);
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reads back the config snapshot of a run directory.
pub fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig> {
    #[derive(Deserialize)]
    struct Snapshot {
        config_hash: String,
        config: ExperimentConfig,
    }
    let path = run_dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if snap.config.hash() != snap.config_hash {
        return Err(Error::Config(format!("{} does not match its recorded hash", path.display())));
    }
    Ok(snap.config)
}
