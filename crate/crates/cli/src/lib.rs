//! Argument and config-file handling plus command dispatch for `loco`.
//!
//! Precedence is flags, then the `key = value` config file, then defaults.
//! Exit codes: 0 success, 1 invariant failure, 2 usage or I/O error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, ValueEnum};
use loco_core::edit::{apply_edit_with, discover, disentanglement_score, EditOptions, Mask};
use loco_core::harness::{
    cell_seed, default_t_grid, epsilon_rank_relation, gpm_check, linearity_curve,
    rank_ratio_curve, subspace_convergence_curve, symmetry_curve, theorem1_report, CurveTable,
    HarnessConfig, Status,
};
use loco_core::pmp::JacobianMode;
use loco_core::sampler::{AnalyticPredictor, Ddim, GridKind, InversionMode};
use loco_core::spectral::GpmOptions;
use loco_core::{LocoError, NoiseSchedule, ScheduleKind, SubspaceModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    RankCurve,
    LinearityCurve,
    SymmetryCurve,
    SubspaceCurve,
    EpsrankCurve,
    Theorem1,
    Edit,
    Roundtrip,
    GpmCheck,
}

impl Command {
    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// How a generated model places its subspaces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Layout {
    /// Jointly random orthonormal bases.
    #[default]
    Random,
    /// Component `k` supported on the `k`-th contiguous coordinate block.
    Blocks,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Random => "random",
            Layout::Blocks => "blocks",
        })
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "random" => Ok(Layout::Random),
            "blocks" => Ok(Layout::Blocks),
            other => Err(format!("unknown layout `{other}` (expected random or blocks)")),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flag, key or value; exit 2.
    Usage(String),
    /// File system or model-file problem; exit 2.
    Io(String),
    /// An experiment failed or reported a violated invariant; exit 1.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Failure(m) => write!(f, "failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn usage(key: &str, msg: impl fmt::Display) -> CliError {
    CliError::Usage(format!("`{key}`: {msg}"))
}

/// Runtime errors: I/O and parsing stay exit 2, everything else is exit 1.
fn runtime(err: LocoError) -> CliError {
    match err {
        LocoError::Io(e) => CliError::Io(e.to_string()),
        e @ LocoError::Parse { .. } => CliError::Io(e.to_string()),
        e => CliError::Failure(e.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleKind,
    pub dim: usize,
    pub ranks: Vec<usize>,
    pub layout: Layout,
    pub model_file: Option<PathBuf>,
    pub seed: u64,
    pub t_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub eta: f64,
    pub r: usize,
    pub r_null: usize,
    pub pick: usize,
    pub t: f64,
    pub t_mid: f64,
    pub steps: usize,
    pub lambda: f64,
    /// Edit region; `None` means the first half of the coordinates.
    pub mask: Option<String>,
    pub inversion: InversionMode,
    pub grid: GridKind,
    pub mode: JacobianMode,
    pub n_samples: usize,
    /// Output directory for tables; for `edit`, the direction file.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Cosine,
            dim: 32,
            ranks: vec![2, 2],
            layout: Layout::Random,
            model_file: None,
            seed: 0,
            t_grid: default_t_grid(),
            lambda_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0, 40.0],
            eta: 0.99,
            r: 5,
            r_null: 5,
            pick: 1,
            t: 0.6,
            t_mid: 0.6,
            steps: 100,
            lambda: 1.0,
            mask: None,
            inversion: InversionMode::Explicit,
            grid: GridKind::Uniform,
            mode: JacobianMode::Analytic,
            n_samples: 15,
            out: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "schedule", "dim", "ranks", "layout", "model_file", "seed", "t_grid", "lambda_grid", "eta",
    "r", "r_null", "pick", "t", "t_mid", "steps", "lambda", "mask", "inversion", "grid", "mode",
    "n_samples", "out",
];

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| usage(key, format!("cannot parse `{}`", value.trim())))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|v| scalar(key, v)).collect()
}

fn parse_mode(key: &str, value: &str) -> Result<JacobianMode, CliError> {
    match value.trim() {
        "analytic" => Ok(JacobianMode::Analytic),
        "fd" | "finite-difference" => Ok(JacobianMode::FiniteDifference),
        other => Err(usage(key, format!("unknown mode `{other}` (expected analytic or fd)"))),
    }
}

impl RunConfig {
    /// Sets one key; dashes and underscores in `key` are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "schedule" => self.schedule = v.parse().map_err(|e| usage(k, e))?,
            "dim" => self.dim = scalar(k, v)?,
            "ranks" => self.ranks = list(k, v)?,
            "layout" => self.layout = v.parse().map_err(|e| usage(k, e))?,
            "model_file" => self.model_file = Some(PathBuf::from(v)),
            "seed" => self.seed = scalar(k, v)?,
            "t_grid" => self.t_grid = list(k, v)?,
            "lambda_grid" => self.lambda_grid = list(k, v)?,
            "eta" => self.eta = scalar(k, v)?,
            "r" => self.r = scalar(k, v)?,
            "r_null" => self.r_null = scalar(k, v)?,
            "pick" => self.pick = scalar(k, v)?,
            "t" => self.t = scalar(k, v)?,
            "t_mid" => self.t_mid = scalar(k, v)?,
            "steps" => self.steps = scalar(k, v)?,
            "lambda" => self.lambda = scalar(k, v)?,
            "mask" => self.mask = Some(v.to_string()),
            "inversion" => self.inversion = v.parse().map_err(|e| usage(k, e))?,
            "grid" => self.grid = v.parse().map_err(|e| usage(k, e))?,
            "mode" => self.mode = parse_mode(k, v)?,
            "n_samples" => self.n_samples = scalar(k, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(usage(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    n + 1
                )));
            };
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Checks every value against the preconditions of the modules it feeds.
    pub fn validate(&self) -> Result<(), CliError> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.eta) {
            return Err(usage("eta", format!("{} is outside (0, 1)", self.eta)));
        }
        if self.dim == 0 {
            return Err(usage("dim", "must be positive"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(usage("ranks", "need at least one positive rank"));
        }
        if self.model_file.is_none() && self.ranks.iter().sum::<usize>() > self.dim {
            return Err(usage("ranks", format!("sum exceeds dim = {}", self.dim)));
        }
        if self.t_grid.is_empty() || !self.t_grid.iter().all(|t| open_unit(*t)) {
            return Err(usage("t_grid", "values must lie in (0, 1)"));
        }
        if self.lambda_grid.is_empty() || !self.lambda_grid.iter().all(|l| l.is_finite()) {
            return Err(usage("lambda_grid", "values must be finite"));
        }
        if !open_unit(self.t) {
            return Err(usage("t", format!("{} is outside (0, 1)", self.t)));
        }
        if !open_unit(self.t_mid) {
            return Err(usage("t_mid", format!("{} is outside (0, 1)", self.t_mid)));
        }
        if !self.lambda.is_finite() {
            return Err(usage("lambda", "must be finite"));
        }
        if self.r == 0 {
            return Err(usage("r", "must be positive"));
        }
        if self.pick == 0 || self.pick > self.r {
            return Err(usage("pick", format!("must lie in 1..={}", self.r)));
        }
        if self.steps == 0 {
            return Err(usage("steps", "must be positive"));
        }
        if self.n_samples == 0 {
            return Err(usage("n_samples", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.schedule)
    }

    /// The model file if one is given, otherwise a seeded model of the configured layout.
    pub fn model(&self) -> Result<SubspaceModel, CliError> {
        let model = match &self.model_file {
            Some(path) => SubspaceModel::load(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
            None => match self.layout {
                Layout::Random => SubspaceModel::random(self.dim, &self.ranks, self.seed),
                Layout::Blocks => SubspaceModel::random_blocks(self.dim, &self.ranks, self.seed),
            }
            .map_err(|e| usage("ranks", e))?,
        };
        Ok(model.with_schedule(self.schedule()))
    }

    fn mask_for(&self, dim: usize) -> Result<Mask, CliError> {
        match &self.mask {
            Some(text) => Mask::parse(dim, text).map_err(|e| usage("mask", e)),
            None => Mask::range(dim, 0, dim / 2).map_err(|e| usage("mask", e)),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "loco", about = "Posterior-mean Jacobian experiments on a mixture of low-rank Gaussians")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    /// Comma-separated component ranks.
    #[arg(long)]
    pub ranks: Option<String>,
    /// `random` or `blocks`.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long)]
    pub model_file: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub t_grid: Option<String>,
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub r_null: Option<String>,
    #[arg(long)]
    pub pick: Option<String>,
    #[arg(long)]
    pub t: Option<String>,
    #[arg(long)]
    pub t_mid: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<String>,
    /// Comma-separated coordinate indices.
    #[arg(long)]
    pub mask: Option<String>,
    /// `explicit` or `fixed-point`.
    #[arg(long)]
    pub inversion: Option<String>,
    /// `uniform` or `quadratic`.
    #[arg(long)]
    pub grid: Option<String>,
    /// `analytic` or `fd`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub n_samples: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let pairs: [(&'static str, &Option<String>); 22] = [
            ("schedule", &self.schedule),
            ("dim", &self.dim),
            ("ranks", &self.ranks),
            ("layout", &self.layout),
            ("model_file", &self.model_file),
            ("seed", &self.seed),
            ("t_grid", &self.t_grid),
            ("lambda_grid", &self.lambda_grid),
            ("eta", &self.eta),
            ("r", &self.r),
            ("r_null", &self.r_null),
            ("pick", &self.pick),
            ("t", &self.t),
            ("t_mid", &self.t_mid),
            ("steps", &self.steps),
            ("lambda", &self.lambda),
            ("mask", &self.mask),
            ("inversion", &self.inversion),
            ("grid", &self.grid),
            ("mode", &self.mode),
            ("n_samples", &self.n_samples),
            ("out", &self.out),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
            .collect()
    }
}

/// Defaults, then the file at `file`, then the `flags`; validated.
pub fn parse_config(flags: &[(&str, &str)], file: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    for (key, value) in flags {
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

/// Parses a full argument list, program name first.
pub fn parse_args<I, T>(args: I) -> Result<(Command, RunConfig), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
        _ => CliError::Usage(e.to_string()),
    })?;
    let flags: Vec<(&str, &str)> = cli
        .overrides()
        .into_iter()
        .map(|(k, v)| (k, v.as_str()))
        .collect();
    let config = parse_config(&flags, cli.config.as_deref())?;
    Ok((cli.command, config))
}

fn harness_config(config: &RunConfig) -> HarnessConfig {
    HarnessConfig {
        t_grid: config.t_grid.clone(),
        lambda_grid: config.lambda_grid.clone(),
        eta: config.eta,
        n_samples: config.n_samples,
        ..HarnessConfig::default()
    }
}

fn annotate(table: &mut CurveTable, command: Command, config: &RunConfig) {
    table.set_meta("seed", config.seed);
    table.set_meta(
        "model_file",
        config
            .model_file
            .as_ref()
            .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
    );
    if config.model_file.is_none() {
        table.set_meta("layout", config.layout);
    }
    table.set_meta("command", format!("{command:?}"));
}

fn write_table(table: &CurveTable, config: &RunConfig) -> Result<String, CliError> {
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let path = table
        .write_to(&dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(format!(
        "{}: {} rows, status {}",
        path.display(),
        table.rows.len(),
        table.worst_status()
    ))
}

/// One row per step count `N, 2N, 4N`, each averaged over `n_samples` clean draws.
fn roundtrip_table(
    model: &SubspaceModel,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CurveTable, LocoError> {
    let ddim = Ddim::new(model.schedule())
        .with_grid(config.grid)
        .with_inversion(config.inversion);
    let draws: Vec<_> = (0..config.n_samples).map(|_| model.sample_x0(rng).x0).collect();
    let mut table = CurveTable::new("roundtrip", &["n_steps", "mean_rel_error", "max_rel_error"]);
    for n in [config.steps, 2 * config.steps, 4 * config.steps] {
        let errs = draws
            .iter()
            .map(|x0| ddim.roundtrip_error(model, x0, config.t_mid, n))
            .collect::<Result<Vec<f64>, _>>()?;
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let max = errs.iter().copied().fold(0.0, f64::max);
        table.push(vec![n as f64, mean, max], Status::Ok);
    }
    table.set_meta("t_mid", config.t_mid);
    table.set_meta("inversion", config.inversion);
    table.set_meta("grid", config.grid);
    table.set_meta("n_samples", config.n_samples);
    Ok(table)
}

fn run_edit(
    model: &SubspaceModel,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, CliError> {
    let mask = config.mask_for(model.dim())?;
    let ddim = Ddim::new(model.schedule())
        .with_grid(config.grid)
        .with_inversion(config.inversion);
    let x0 = model.sample_x0(rng).x0;
    let x_t = ddim
        .integrate(&x0, 0.0, config.t, config.steps, &AnalyticPredictor::new(model))
        .map_err(runtime)?;
    let opts = EditOptions {
        r: config.r,
        r_null: config.r_null,
        pick: config.pick,
        mode: config.mode,
        seed: cell_seed(config.seed, Command::Edit.tag(), 1),
        ..EditOptions::default()
    };
    let found = discover(model, &x_t, config.t, &mask, &opts).map_err(runtime)?;
    let dir = found.direction;
    let (inside, outside) =
        disentanglement_score(model, &x_t, config.t, &dir, config.lambda).map_err(runtime)?;
    let edited =
        apply_edit_with(&ddim, model, &x0, config.t, &dir, config.lambda, config.steps).map_err(runtime)?;
    let path = config.out.clone().unwrap_or_else(|| PathBuf::from("direction.txt"));
    dir.save(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(vec![format!(
        "{}: sigma {:.6e}, inside {:.6e}, outside {:.6e}, edit displacement {:.6e}",
        path.display(),
        dir.sigma,
        inside,
        outside,
        (edited - x0).norm()
    )])
}

/// Runs `command` and returns one summary line per written file.
pub fn dispatch(command: Command, config: &RunConfig) -> Result<Vec<String>, CliError> {
    config.validate()?;
    let model = config.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(config.seed, command.tag(), 0));
    let table = match command {
        Command::Edit => return run_edit(&model, config, &mut rng),
        Command::RankCurve => {
            rank_ratio_curve(&model, &config.t_grid, config.eta, config.n_samples, &mut rng)
        }
        Command::LinearityCurve => {
            linearity_curve(&model, config.t, &config.lambda_grid, config.n_samples, &mut rng)
        }
        Command::SymmetryCurve => {
            symmetry_curve(&model, &config.t_grid, config.n_samples, config.mode, &mut rng)
        }
        Command::SubspaceCurve => {
            subspace_convergence_curve(&model, &config.t_grid, config.n_samples, config.eta, &mut rng)
        }
        Command::EpsrankCurve => {
            epsilon_rank_relation(&model, &config.t_grid, config.eta, config.n_samples, &mut rng)
        }
        Command::Theorem1 => theorem1_report(&model, &harness_config(config), &mut rng),
        Command::Roundtrip => roundtrip_table(&model, config, &mut rng),
        Command::GpmCheck => {
            if config.r >= config.dim {
                return Err(usage("r", format!("must be below dim = {}", config.dim)));
            }
            gpm_check(config.dim, config.r, config.n_samples, 1.1, &GpmOptions::default(), &mut rng)
        }
    };
    let mut table = table.map_err(runtime)?;
    annotate(&mut table, command, config);
    let line = write_table(&table, config)?;
    if table.has_violations() {
        return Err(CliError::Failure(format!("{line} (invariant violated)")));
    }
    Ok(vec![line])
}

/// Reads `LOCO_THREADS` (0 or unset means automatic).
pub fn thread_count(value: Option<&str>) -> Result<usize, CliError> {
    match value {
        None => Ok(0),
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| usage("LOCO_THREADS", format!("cannot parse `{v}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Result<(Command, RunConfig), CliError> {
        parse_args(std::iter::once("loco").chain(list.iter().copied()))
    }

    #[test]
    fn empty_args_give_defaults() {
        let (cmd, config) = args(&["theorem1"]).unwrap();
        assert_eq!(cmd, Command::Theorem1);
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.eta, 0.99);
        assert_eq!((config.r, config.r_null, config.steps), (5, 5, 100));
        assert_eq!(config.t, 0.6);
        assert_eq!(config.schedule, ScheduleKind::Cosine);
    }

    #[test]
    fn eta_out_of_range_names_the_key() {
        let err = args(&["rank-curve", "--eta", "1.5"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("eta"), "{err}");
    }

    #[test]
    fn parsing_is_deterministic() {
        let a = args(&["rank-curve", "--ranks", "1,1", "--dim", "4", "--seed", "7"]).unwrap();
        let b = args(&["rank-curve", "--ranks", "1,1", "--dim", "4", "--seed", "7"]).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.ranks, vec![1, 1]);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut c = RunConfig::default();
        let err = c.apply_text("temperature = 3").unwrap_err();
        assert!(err.to_string().contains("temperature"));
        let err = c.apply_text("steps = many").unwrap_err();
        assert!(err.to_string().contains("steps"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flags_override_file() {
        let dir = std::env::temp_dir().join(format!("loco-cli-unit-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# comment\neta = 0.9\nsteps = 7  # trailing\nt-mid = 0.3\n").unwrap();
        let config = parse_config(&[("steps", "9")], Some(&path)).unwrap();
        assert_eq!(config.eta, 0.9);
        assert_eq!(config.steps, 9);
        assert_eq!(config.t_mid, 0.3);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_command_is_usage() {
        assert_eq!(args(&["dance"]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn every_key_is_settable() {
        for key in KEYS {
            let mut c = RunConfig::default();
            let value = match *key {
                "schedule" => "linear",
                "layout" => "blocks",
                "inversion" => "fixed-point",
                "grid" => "quadratic",
                "mode" => "fd",
                "ranks" | "t_grid" | "lambda_grid" | "mask" => "1,2",
                "eta" | "t" | "t_mid" | "lambda" => "0.5",
                _ => "3",
            };
            c.set(key, value).unwrap();
        }
    }
}
