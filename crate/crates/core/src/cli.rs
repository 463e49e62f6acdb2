//! Command-line front end: config loading, subcommands and artifact files.
//!
//! Every artifact carries the run seed and the config hash. Files are only
//! written inside the output directory; timings go to stderr.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::hmm::dataset::Dataset;
use crate::hmm::experiment::{dataset_for, evaluate, fit_vbem, train, truth_params, ExperimentReport};
use crate::hmm::HmmParams;
use crate::selfcheck::{self, SelfcheckOptions};

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const WAKE_SLEEP_FILE: &str = "wake_sleep_params.json";
pub const VBEM_FILE: &str = "vbem_params.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "pcomb", version, about = "Combinator-based SMC and wake-sleep training for HMMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Generate the bouncing-ball dataset.
    Simulate,
    /// Train the HMM by wake-sleep SMC.
    Train,
    /// Fit the VBEM baseline.
    Vbem,
    /// Score saved parameters against the generating process.
    Evaluate,
    /// Run the built-in verification suites.
    Selfcheck {
        /// Run only this suite.
        #[arg(long)]
        suite: Option<String>,
        /// Monte Carlo replicates per check.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or input files: exit code 1.
    Validation(String),
    /// Failure while running: exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Seed and config hash stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    fn of(cfg: &RunConfig) -> Self {
        Provenance {
            seed: cfg.seed,
            config_hash: cfg.hash(),
        }
    }

    fn csv_comment(&self) -> String {
        format!("# seed={} config_hash={}\n", self.seed, self.config_hash)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WakeSleepArtifact {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub learned_params: HmmParams,
    /// Divisor applied to displacements before training.
    pub input_scale: f64,
    pub parameters: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbemArtifact {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub learned_params: HmmParams,
    pub initial_conc: Vec<f64>,
    pub transition_conc: Vec<Vec<f64>>,
    pub mean_precision: Vec<f64>,
    pub elbo_trace: Vec<f64>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    #[serde(flatten)]
    metrics: &'a crate::estimators::EpochMetrics,
}

/// Loads the config, applies flag overrides and validates the result.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(cfg)
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(cfg: &RunConfig) -> Result<Output, CliError> {
        let dir = PathBuf::from(&cfg.output.directory);
        std::fs::create_dir_all(&dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Output { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn read(&self, name: &str) -> Result<Option<String>, CliError> {
        let path = self.path(name);
        match std::fs::read_to_string(&path) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::Validation(format!("cannot read {}: {e}", path.display()))),
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be >= 1".into()));
        }
        // A pool built earlier in this process keeps its size; results are
        // identical either way.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let started = Instant::now();
    let result = match &cli.command {
        Command::Selfcheck { suite, samples } => run_selfcheck(cli, suite.as_deref(), *samples),
        command => {
            let cfg = load_config(cli)?;
            let out = Output::create(&cfg)?;
            match command {
                Command::Simulate => simulate(&cfg, &out),
                Command::Train => run_train(&cfg, &out),
                Command::Vbem => run_vbem(&cfg, &out),
                Command::Evaluate => run_evaluate(&cfg, &out),
                Command::Selfcheck { .. } => unreachable!(),
            }
        }
    };
    eprintln!("elapsed {:.1} s", started.elapsed().as_secs_f64());
    result
}

fn simulate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let data = dataset_for(cfg).map_err(runtime)?;
    let text = Provenance::of(cfg).csv_comment() + &data.to_csv();
    out.write(DATASET_FILE, &text)
}

/// The dataset in the output directory if one was simulated, otherwise a
/// fresh one from the config.
fn dataset(cfg: &RunConfig, out: &Output) -> Result<Dataset, CliError> {
    match out.read(DATASET_FILE)? {
        Some(text) => Dataset::from_csv(&text, Some(cfg.data.n_sequences))
            .map_err(|e| CliError::Validation(format!("{DATASET_FILE}: {e}"))),
        None => dataset_for(cfg).map_err(runtime),
    }
}

fn run_train(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let data = dataset(cfg, out)?;
    let provenance = Provenance::of(cfg);
    let mut log = String::new();
    let mut curves = provenance.csv_comment() + "epoch,mean_log_evidence\n";
    let outcome = train(cfg, &data, |m| {
        eprintln!(
            "epoch {:5}  mean log Z {:12.3}  |g_theta| {:9.3}  |g_phi| {:9.3}  {} ms",
            m.epoch, m.mean_log_evidence, m.theta_grad_norm, m.phi_grad_norm, m.wall_ms
        );
        let line = LogLine {
            provenance: &provenance,
            metrics: m,
        };
        log.push_str(&serde_json::to_string(&line).expect("metrics serialize"));
        log.push('\n');
        writeln!(curves, "{},{:?}", m.epoch, m.mean_log_evidence).expect("write to string");
    })
    .map_err(runtime)?;
    out.write(TRAIN_LOG_FILE, &log)?;
    out.write(CURVES_FILE, &curves)?;
    out.write_json(
        WAKE_SLEEP_FILE,
        &WakeSleepArtifact {
            provenance,
            learned_params: outcome.learned,
            input_scale: outcome.scale,
            parameters: outcome.store.to_json(),
        },
    )
}

fn run_vbem(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let data = dataset(cfg, out)?;
    let fit = fit_vbem(cfg, &data).map_err(runtime)?;
    eprintln!("vbem: {} iterations, final ELBO {:.3}", fit.elbo_trace.len(), fit.elbo_trace.last().copied().unwrap_or(f64::NAN));
    out.write_json(
        VBEM_FILE,
        &VbemArtifact {
            provenance: Provenance::of(cfg),
            learned_params: fit.point_estimate(),
            initial_conc: fit.initial_conc,
            transition_conc: fit.transition_conc,
            mean_precision: fit.mean_precision,
            elbo_trace: fit.elbo_trace,
        },
    )
}

fn read_params<T: for<'de> Deserialize<'de>>(out: &Output, name: &str) -> Result<Option<T>, CliError> {
    out.read(name)?
        .map(|text| serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{name}: {e}"))))
        .transpose()
}

fn run_evaluate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    if cfg.model.states != cfg.data.n_headings {
        return Err(CliError::Validation("evaluation needs model.S equal to data.n_headings".into()));
    }
    let data = dataset(cfg, out)?;
    let ws: Option<WakeSleepArtifact> = read_params(out, WAKE_SLEEP_FILE)?;
    let vb: Option<VbemArtifact> = read_params(out, VBEM_FILE)?;
    if ws.is_none() && vb.is_none() {
        return Err(CliError::Validation(format!(
            "no {WAKE_SLEEP_FILE} or {VBEM_FILE} in {}",
            out.dir.display()
        )));
    }
    let hash = cfg.hash();
    for (name, p) in [
        (WAKE_SLEEP_FILE, ws.as_ref().map(|a| &a.provenance)),
        (VBEM_FILE, vb.as_ref().map(|a| &a.provenance)),
    ] {
        if let Some(p) = p.filter(|p| p.config_hash != hash) {
            eprintln!("warning: {name} was produced under config {}", p.config_hash);
        }
    }
    let truth = truth_params(cfg, &data);
    let mut report = ExperimentReport::new(cfg, truth.clone());
    let score = |learned: &HmmParams| evaluate(learned, &truth, &data).map_err(runtime);
    report.wake_sleep = ws.map(|a| score(&a.learned_params)).transpose()?;
    report.vbem = vb.map(|a| score(&a.learned_params)).transpose()?;
    for (name, r) in [("wake-sleep", &report.wake_sleep), ("vbem", &report.vbem)] {
        if let Some(r) = r {
            eprintln!(
                "{name}: transition_error {:.4}  state_accuracy {:.4}",
                r.transition_error, r.state_accuracy
            );
        }
    }
    out.write_json(REPORT_FILE, &report)
}

fn run_selfcheck(cli: &Cli, suite: Option<&str>, samples: usize) -> Result<(), CliError> {
    if samples < 2 {
        return Err(CliError::Validation("--samples must be >= 2".into()));
    }
    let opts = SelfcheckOptions {
        samples,
        seed: cli.seed.unwrap_or(0),
        ..SelfcheckOptions::default()
    };
    let names: Vec<&str> = match suite {
        Some(s) if selfcheck::SUITES.contains(&s) => vec![s],
        Some(s) => {
            return Err(CliError::Validation(format!(
                "unknown suite {s:?}; expected one of {}",
                selfcheck::SUITES.join(", ")
            )))
        }
        None => selfcheck::SUITES.to_vec(),
    };
    let mut failed = 0;
    for name in names {
        for c in selfcheck::run_suite(name, &opts).expect("known suite") {
            println!(
                "{} [{}] {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.detail
            );
            failed += (!c.passed) as usize;
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} self-checks failed")));
    }
    Ok(())
}
