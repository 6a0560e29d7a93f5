//! `hetpfl` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use hetpfl_core::checkpoint::Checkpoint;
use hetpfl_core::data::generate_pool;
use hetpfl_core::eval::{mean_hv, FrontSummary};
use hetpfl_core::experiment::{
    evaluate_checkpoint, execute, load_run_config, prepare_clients, seed_dir, write_fronts, DatasetConfig,
    ExperimentConfig, CHECKPOINT_FILE,
};
use hetpfl_core::fed::{AlphaOptimizerKind, Mode};
use hetpfl_core::gradcheck::run_suite;
use hetpfl_core::preference::{hv_2d, hvc};
use hetpfl_core::{Error, ReferencePoint};

/// Default output root when neither `--out` nor `output_dir` is given.
const OUT_ENV: &str = "HETPFL_OUT";

#[derive(Parser)]
#[command(name = "hetpfl", version, about = "Federated performance-fairness Pareto fronts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write a run directory.
    Run(Box<RunArgs>),
    /// Recompute front reports from the checkpoints of a run directory.
    Eval(EvalArgs),
    /// Finite-difference gradient suite and NES estimator checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact 2-D hypervolume and per-point contributions of a CSV of points.
    Hv {
        /// Two-column CSV without a header.
        points: PathBuf,
        /// Reference point as `x,y`.
        #[arg(long, default_value = "1,1")]
        r: String,
    },
    /// Write the synthetic dataset as CSV with a matching schema.
    GenData {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving `data.csv` and `schema.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; defaults apply when omitted.
    config: Option<PathBuf>,
    /// Run directory (overrides `output_dir` and the environment default).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    heterogeneity: Option<f64>,
    /// Size of the generated synthetic pool.
    #[arg(long)]
    synthetic_n: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    tau_c: Option<usize>,
    #[arg(long)]
    tau_p: Option<usize>,
    #[arg(long)]
    prefs_per_step: Option<usize>,
    #[arg(long)]
    fusion_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_lr: Option<f64>,
    #[arg(long, value_parser = parse_alpha_optimizer)]
    alpha_optimizer: Option<AlphaOptimizerKind>,
    #[arg(long)]
    eval_grid: Option<usize>,
    #[arg(long)]
    allow_nonstandard_epochs: bool,
}

#[derive(Args)]
struct EvalArgs {
    run_dir: PathBuf,
    /// Preference grid size.
    #[arg(long, default_value_t = 1000)]
    m: usize,
    /// Where to write the recomputed reports; defaults to `<run_dir>/eval-m<m>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_alpha_optimizer(s: &str) -> Result<AlphaOptimizerKind, String> {
    match s {
        "adam" => Ok(AlphaOptimizerKind::Adam),
        "sgd" => Ok(AlphaOptimizerKind::Sgd),
        _ => Err(format!("expected adam or sgd, got {s:?}")),
    }
}

/// A failure tagged with its exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Config-shaped errors are usage errors, everything else is a runtime failure.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Schema(_) => usage(e),
        _ => runtime(e),
    }
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), Failure> {
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set!(
            seeds => cfg.seeds,
            mode => cfg.mode,
            clients => cfg.clients,
            heterogeneity => cfg.heterogeneity,
            rounds => cfg.training.rounds,
            tau_c => cfg.training.tau_c,
            tau_p => cfg.training.tau_p,
            prefs_per_step => cfg.training.prefs_per_step,
            fusion_epochs => cfg.training.fusion_epochs,
            batch_size => cfg.training.batch_size,
            lr => cfg.training.lr,
            alpha_lr => cfg.training.alpha_lr,
            alpha_optimizer => cfg.training.alpha_optimizer,
            eval_grid => cfg.eval_grid,
        );
        if let Some(n) = self.synthetic_n {
            match &mut cfg.dataset {
                DatasetConfig::Synthetic { n: current } => *current = n,
                DatasetConfig::Csv { .. } => {
                    return Err(usage(anyhow!("--synthetic-n conflicts with a CSV dataset")));
                }
            }
        }
        if self.allow_nonstandard_epochs {
            cfg.allow_nonstandard_epochs = true;
        }
        Ok(())
    }
}

fn run_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = args.out.clone().or_else(|| cfg.output_dir.clone()) {
        return out;
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&cfg.hash()[..12])
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(classify)?,
        None => ExperimentConfig::default(),
    };
    args.apply(&mut cfg)?;
    cfg.validate().map_err(classify)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let dir = run_dir(&args, &cfg);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    let summary = execute(&cfg, &dir).map_err(classify)?;
    println!("run directory: {}", dir.display());
    println!("config hash: {}", summary.config_hash);
    for s in &summary.per_seed {
        println!("seed {}: local HV {:.4}, global HV {:.4}", s.seed, s.local_hv_mean, s.global_hv);
    }
    println!(
        "local HV (mean over clients) {:.4} ± {:.4}; global HV {:.4} ± {:.4}",
        summary.local_hv.mean, summary.local_hv.std, summary.global_hv.mean, summary.global_hv.std
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    if args.m == 0 {
        return Err(usage(anyhow!("--m must be at least 1")));
    }
    let cfg = load_run_config(&args.run_dir).map_err(classify)?;
    let out_root = args.out.clone().unwrap_or_else(|| args.run_dir.join(format!("eval-m{}", args.m)));
    for &seed in &cfg.seeds {
        let path = seed_dir(&args.run_dir, seed).join(CHECKPOINT_FILE);
        let ckpt = Checkpoint::load(&path).map_err(runtime)?;
        if ckpt.config_hash != cfg.hash() || ckpt.seed != seed {
            return Err(runtime(anyhow!("{} belongs to a different run", path.display())));
        }
        let (data, _) = prepare_clients(&cfg, seed).map_err(runtime)?;
        let (locals, global) = evaluate_checkpoint(&ckpt, &data, args.m).map_err(runtime)?;
        let prov = hetpfl_core::eval::Provenance {
            config_hash: ckpt.config_hash.clone(),
            seed,
        };
        let local: Vec<FrontSummary> = locals.iter().map(|r| r.summary(&prov)).collect();
        let local_hv_mean = mean_hv(&locals);
        let report = serde_json::json!({
            "config_hash": ckpt.config_hash,
            "seed": seed,
            "m": args.m,
            "local": local,
            "local_hv_mean": local_hv_mean,
            "global": global.summary(&prov),
        });
        write_fronts(&seed_dir(&out_root, seed), &prov, &locals, &global, &report).map_err(runtime)?;
        println!(
            "seed {seed}: local HV {:.4}, global HV {:.4} (m = {})",
            local_hv_mean, global.hv, args.m
        );
    }
    println!("reports written to {}", out_root.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), Failure> {
    let report = run_suite(seed, None).map_err(runtime)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(runtime(anyhow!("failing checks: {:?}", report.failures())))
    }
}

fn parse_reference(s: &str) -> Result<ReferencePoint, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let coords = match parts.as_slice() {
        [x, y] => x.parse::<f64>().ok().zip(y.parse::<f64>().ok()),
        _ => None,
    };
    let (x, y) = coords.ok_or_else(|| usage(anyhow!("reference point must be `x,y`, got {s:?}")))?;
    ReferencePoint::new(x, y).map_err(usage)
}

fn read_points(path: &Path) -> Result<Vec<[f64; 2]>, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(usage)?;
        let row = i + 1;
        if record.len() != 2 {
            return Err(usage(anyhow!("row {row}: expected 2 columns, got {}", record.len())));
        }
        let mut p = [0.0; 2];
        for (j, cell) in record.iter().enumerate() {
            p[j] = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| usage(anyhow!("row {row}: {cell:?} is not a finite number")))?;
        }
        points.push(p);
    }
    Ok(points)
}

fn cmd_hv(points: &Path, r: &str) -> Result<(), Failure> {
    let r = parse_reference(r)?;
    let pts = read_points(points)?;
    println!("hv {}", hv_2d(&pts, r));
    for (i, p) in pts.iter().enumerate() {
        println!("hvc {i} {} {} {}", p[0], p[1], hvc(i, &pts, r));
    }
    Ok(())
}

const SCHEMA: &str = r#"{
  "label": {"column": "label", "positive": "1"},
  "sensitive": {"column": "group", "positive": "1"},
  "features": ["x1", "x2", "group"]
}
"#;

fn cmd_gen_data(n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    if n == 0 {
        return Err(usage(anyhow!("--n must be at least 1")));
    }
    let ds = generate_pool(n, seed).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let mut w = csv::Writer::from_path(out.join("data.csv")).map_err(runtime)?;
    w.write_record(["x1", "x2", "group", "label"]).map_err(runtime)?;
    let x = ds.features().data();
    for i in 0..ds.len() {
        let row = &x[i * ds.dim()..(i + 1) * ds.dim()];
        w.write_record([
            row[0].to_string(),
            row[1].to_string(),
            ds.sensitive()[i].to_string(),
            ds.labels()[i].to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    std::fs::write(out.join("schema.json"), SCHEMA).map_err(runtime)?;
    println!("wrote {n} rows to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Hv { points, r } => cmd_hv(&points, &r),
        Command::GenData { n, seed, out } => cmd_gen_data(n, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            log::debug!("exit code {}", f.code());
            ExitCode::from(f.code())
        }
    }
}
