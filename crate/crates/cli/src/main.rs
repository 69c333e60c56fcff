//! `qlse`: Monte-Carlo experiments, single-file estimation and CRB tables.

mod config;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use qlse_core::crb::{frequency_crb, FisherParams, FrequencyCrb};
use qlse_core::ep::{run_mvalse_ep, EpOptions};
use qlse_core::harness::{run_monte_carlo, trial_data, with_threads, BitDepth, ExperimentConfig, GroupSummary};
use qlse_core::model::{doa_to_freq, freq_to_doa, RowPolicy, RowSet};
use qlse_core::nalgebra::DMatrix;
use qlse_core::quantizer::{Measurements, QuantizerSpec};
use qlse_core::QlseError;

use config::{experiment_from_map, read_object, Fields};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Parse(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Parse(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error:\n{m}"),
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<QlseError> for CliError {
    fn from(e: QlseError) -> Self {
        match e {
            QlseError::InvalidConfig(_) | QlseError::Dimension(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "qlse", version, about = "Line spectral estimation from quantized multi-snapshot samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Single bit depth (integer or "analog"), overriding the config.
    #[arg(long)]
    bits: Option<BitDepth>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo experiment: writes manifest.json, trials.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Estimate a line spectrum from a measurement CSV.
    Estimate {
        /// CSV with header `m,l,re,im` or `m,l,re_idx,im_idx`.
        #[arg(long)]
        input: PathBuf,
        /// Quantizer JSON for cell indices; defaults to `<input>.quantizer.json`.
        #[arg(long)]
        quantizer: Option<PathBuf>,
        /// Complex noise variance.
        #[arg(long)]
        sigma2: f64,
        /// Full array length; defaults to one past the largest row offset.
        #[arg(long)]
        n: Option<usize>,
        /// Optional JSON with estimator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Frequency CRB for each configured bit depth plus the unquantized bound.
    Crb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QLSE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, trials, overrides } => cmd_run(&config, &out, trials, &overrides),
        Command::Estimate { input, quantizer, sigma2, n, config, out, overrides } => {
            cmd_estimate(&input, quantizer.as_deref(), sigma2, n, config.as_deref(), &out, &overrides)
        }
        Command::Crb { config, out, overrides } => cmd_crb(&config, &out, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn timestamp() -> String {
    humantime::format_rfc3339_millis(SystemTime::now()).to_string()
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    base_seed: u64,
    config: &'a ExperimentConfig,
    started_at: String,
    finished_at: Option<String>,
    outputs: Outputs,
}

#[derive(Serialize)]
struct Outputs {
    manifest: String,
    trials: String,
    summary: String,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    groups: &'a [GroupSummary],
    failures: usize,
}

fn cmd_run(config: &Path, out: &Path, trials: Option<usize>, ov: &Overrides) -> Result<(), CliError> {
    let mut map = read_object(config)?;
    if let Some(t) = trials {
        map.insert("trials".into(), Value::from(t));
    }
    if let Some(s) = ov.seed {
        map.insert("seed".into(), Value::from(s));
    }
    if let Some(b) = ov.bits {
        map.insert("bits".into(), serde_json::to_value(b).expect("bit depth serializes"));
    }
    let cfg = experiment_from_map(&map)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let paths = Outputs {
        manifest: out.join("manifest.json").display().to_string(),
        trials: out.join("trials.csv").display().to_string(),
        summary: out.join("summary.json").display().to_string(),
    };
    let mut manifest = Manifest {
        tool: "qlse",
        version: env!("CARGO_PKG_VERSION"),
        command: "run",
        base_seed: cfg.seed,
        config: &cfg,
        started_at: timestamp(),
        finished_at: None,
        outputs: paths,
    };
    let manifest_path = out.join("manifest.json");
    io::write_json(&manifest_path, &manifest)?;

    log::info!("running {} trials x {} SNRs x {} bit depths", cfg.trials, cfg.snr_db.len(), cfg.bits.len());
    let result = with_threads(ov.threads, || run_monte_carlo(&cfg))??;
    let failures = result.records.iter().filter(|r| r.error.is_some()).count();
    for r in result.records.iter().filter(|r| r.error.is_some()) {
        log::warn!("trial {} (snr {}, bits {}): {}", r.trial, r.snr_db, r.bits, r.error.as_deref().unwrap_or(""));
    }
    io::write_trials(&out.join("trials.csv"), &result.records)?;
    io::write_json(&out.join("summary.json"), &Summary { config: &cfg, groups: &result.summaries, failures })?;
    manifest.finished_at = Some(timestamp());
    io::write_json(&manifest_path, &manifest)
}

const ESTIMATOR_KEYS: &[&str] = &["t_outer", "inner_iters", "var_floor", "var_cap", "convergence_tol", "inner_tol", "damping", "initial_ext_var"];

fn estimator_from_map(map: &Map<String, Value>) -> Result<EpOptions, CliError> {
    let mut f = Fields::new(map, ESTIMATOR_KEYS);
    let d = EpOptions::default();
    let opts = EpOptions {
        t_outer: f.usize("t_outer", false).unwrap_or(d.t_outer),
        inner_iters: f.usize("inner_iters", false).unwrap_or(d.inner_iters),
        var_floor: f.f64("var_floor", false).unwrap_or(d.var_floor),
        var_cap: f.f64("var_cap", false).unwrap_or(d.var_cap),
        convergence_tol: f.f64("convergence_tol", false).unwrap_or(d.convergence_tol),
        inner_tol: f.f64("inner_tol", false).unwrap_or(d.inner_tol),
        damping: f.f64("damping", false).unwrap_or(d.damping),
        initial_ext_var: f.f64("initial_ext_var", false).unwrap_or(d.initial_ext_var),
        ..d
    };
    f.finish()?;
    opts.validate()?;
    Ok(opts)
}

#[derive(Serialize)]
struct Posterior {
    mu: f64,
    kappa: f64,
}

#[derive(Serialize)]
struct EstimateOutput {
    k_hat: usize,
    frequencies: Vec<f64>,
    doa_deg: Vec<f64>,
    /// `K_hat x L`, row-major.
    weights_re: Vec<Vec<f64>>,
    weights_im: Vec<Vec<f64>>,
    /// `N x L`, row-major.
    z_re: Vec<Vec<f64>>,
    z_im: Vec<Vec<f64>>,
    posteriors: Vec<Posterior>,
    outer_iters: usize,
    converged: bool,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_estimate(
    input: &Path,
    quantizer: Option<&Path>,
    sigma2: f64,
    n: Option<usize>,
    config: Option<&Path>,
    out: &Path,
    ov: &Overrides,
) -> Result<(), CliError> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(CliError::Config(format!("--sigma2 must be positive, got {sigma2}")));
    }
    let opts = match config {
        Some(p) => estimator_from_map(&read_object(p)?)?,
        None => EpOptions::default(),
    };
    let sidecar = quantizer.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = input.as_os_str().to_owned();
        p.push(".quantizer.json");
        PathBuf::from(p)
    });
    let spec = if quantizer.is_some() || sidecar.exists() { Some(io::read_quantizer(&sidecar)?) } else { None };
    if let (Some(BitDepth::Bits(b)), Some(s)) = (ov.bits, spec.as_ref()) {
        if s.bits() != b {
            return Err(CliError::Config(format!("--bits {b} does not match the {}-bit quantizer in {}", s.bits(), sidecar.display())));
        }
    }
    let file = io::read_measurements(input, spec.as_ref(), n)?;
    if ov.bits == Some(BitDepth::Analog) && matches!(file.data, Measurements::Quantized(_)) {
        return Err(CliError::Config("--bits analog given for cell-index input".into()));
    }
    let est = with_threads(ov.threads, || run_mvalse_ep(&file.data, sigma2, &file.rows, &opts))??;
    let doa_deg = est.frequencies.iter().map(|&t| freq_to_doa(t)).collect::<Result<Vec<_>, _>>()?;
    let output = EstimateOutput {
        k_hat: est.k_hat,
        frequencies: est.frequencies.clone(),
        doa_deg,
        weights_re: rows_of(&est.weights.map(|w| w.re)),
        weights_im: rows_of(&est.weights.map(|w| w.im)),
        z_re: rows_of(&est.z_full.map(|z| z.re)),
        z_im: rows_of(&est.z_full.map(|z| z.im)),
        posteriors: est.posteriors.iter().map(|p| Posterior { mu: p.mu, kappa: p.kappa }).collect(),
        outer_iters: est.outer_iters,
        converged: est.converged,
    };
    io::write_json(out, &output)
}

#[derive(Serialize)]
struct CrbRow {
    bits: BitDepth,
    crb_trace_db: Option<f64>,
    condition: Option<f64>,
    ill_conditioned: Option<bool>,
    bound: Option<Vec<Vec<f64>>>,
    error: Option<String>,
}

impl CrbRow {
    fn new(bits: BitDepth, res: qlse_core::Result<FrequencyCrb>) -> Self {
        match res {
            Ok(c) => CrbRow {
                bits,
                crb_trace_db: Some(c.trace_db()),
                condition: Some(c.condition),
                ill_conditioned: Some(c.ill_conditioned),
                bound: Some(rows_of(&c.bound)),
                error: None,
            },
            Err(e) => CrbRow { bits, crb_trace_db: None, condition: None, ill_conditioned: None, bound: None, error: Some(e.to_string()) },
        }
    }
}

#[derive(Serialize)]
struct CrbOutput {
    frequencies: Vec<f64>,
    sigma2: f64,
    rows: Vec<CrbRow>,
}

/// Instance for `crb`: either spelled out or drawn like a harness trial.
fn crb_instance(map: &Map<String, Value>, ov: &Overrides) -> Result<(FisherParams, RowSet, f64, Vec<BitDepth>, ExperimentConfig), CliError> {
    let mut f = Fields::new(map, config::CRB_KEYS);
    let bits = match ov.bits {
        Some(b) => Some(vec![b]),
        None => f.bits("bits", true),
    };
    let half_range = f.f64("half_range", false);
    if f.has("theta") {
        let theta = f.f64_list("theta", true);
        let g = f.f64_table("g");
        let phi = f.f64_table("phi");
        let rows = f.usize_list("rows");
        let sigma2 = f.f64("sigma2", true);
        let n = f.usize("n", false);
        for key in ["g", "phi", "rows"] {
            if !f.has(key) {
                f.problems.push(format!("missing required key \"{key}\" for an explicit instance"));
            }
        }
        f.finish()?;
        let (theta, g, phi, rows, sigma2, bits) = (theta.unwrap(), g.unwrap(), phi.unwrap(), rows.unwrap(), sigma2.unwrap(), bits.unwrap());
        let table = |t: &[Vec<f64>]| DMatrix::from_fn(t.len(), t.first().map_or(0, Vec::len), |i, j| t[i][j]);
        let params = FisherParams::new(theta.clone(), table(&g), table(&phi))?;
        let n_full = n.unwrap_or(rows.iter().max().map_or(1, |m| m + 1));
        let rows = RowSet::new(rows, n_full)?;
        if sigma2.is_nan() || sigma2 <= 0.0 {
            return Err(CliError::Config("sigma2 must be positive".into()));
        }
        let cfg = ExperimentConfig { k: theta.len(), half_range, bits: bits.clone(), ..ExperimentConfig::default() };
        return Ok((params, rows, sigma2, bits, cfg));
    }
    let cfg = ExperimentConfig {
        n: f.usize("n", true).unwrap_or(0),
        m: f.usize("m", true).unwrap_or(0),
        k: f.usize("k", true).unwrap_or(0),
        l: f.usize("l", true).unwrap_or(0),
        snr_db: f.f64_list("snr_db", true).unwrap_or_default(),
        bits: bits.clone().unwrap_or_default(),
        trials: 1,
        seed: ov.seed.or(f.u64("seed")).unwrap_or(0),
        row_policy: f.row_policy("row_policy").unwrap_or(RowPolicy::Random),
        half_range,
        doa_angles: f.f64_list("doa_angles", false),
        ..ExperimentConfig::default()
    };
    let trial = f.usize("trial", false).unwrap_or(0);
    f.finish()?;
    if cfg.snr_db.len() != 1 {
        return Err(CliError::Config("crb takes a single snr_db value".into()));
    }
    cfg.validate()?;
    if let Some(a) = &cfg.doa_angles {
        a.iter().try_for_each(|&d| doa_to_freq(d).map(drop))?;
    }
    let data = trial_data(&cfg, trial, cfg.snr_db[0])?;
    let params = FisherParams::from_truth(&data.truth)?;
    Ok((params, data.truth.rows.clone(), data.truth.noise_var, cfg.bits.clone(), cfg))
}

fn cmd_crb(config: &Path, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let map = read_object(config)?;
    let (params, rows, sigma2, mut bits, cfg) = crb_instance(&map, ov)?;
    if !bits.contains(&BitDepth::Analog) {
        bits.push(BitDepth::Analog);
    }
    let mut out_rows = Vec::new();
    for b in bits {
        let spec: Option<QuantizerSpec> = cfg.quantizer(b)?;
        let res = frequency_crb(&params, &rows, sigma2, spec.as_ref());
        if let Err(e) = &res {
            log::warn!("bits {b}: {e}");
        }
        out_rows.push(CrbRow::new(b, res));
    }
    io::write_json(out, &CrbOutput { frequencies: params.theta.clone(), sigma2, rows: out_rows })
}
