//! Command-line harness: validated run configurations, subcommands and CSV
//! output.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 solver
//! failure, 1 I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cglmp::StateKind;
use crate::guessing::{
    bob1_decomposition, guess_cglmp, guess_curve, mixture_scenario, theorem_battery, GuessError,
    GuessScope, ThetaBasis,
};
use crate::npa::{build_problem, mixture_guess_bound, NpaError, WordProfile};
use crate::sdp::{to_sdpa_string, SdpError, SolverConfig};
use crate::seqsim::{
    cglmp_scenario, closed_i1, closed_i2, double_violation_window, mes_i2_printed,
    round_violations, sequential_distribution, violation_curves, window_from, EpsilonGrid,
    InstrumentMode, SeqError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid {field}: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("{0}")]
    Solver(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Guess(#[from] GuessError),
    #[error(transparent)]
    Npa(NpaError),
}

impl From<NpaError> for CliError {
    fn from(e: NpaError) -> Self {
        match e {
            NpaError::SolverFailure { .. } | NpaError::Infeasible(_) | NpaError::Sdp(_) => {
                CliError::Solver(e.to_string())
            }
            other => CliError::Npa(other),
        }
    }
}

impl From<SdpError> for CliError {
    fn from(e: SdpError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(_) => 3,
            CliError::Io(_) => 1,
            _ => 2,
        }
    }
}

fn config_err(field: &'static str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field,
        message: message.into(),
    }
}

/// Subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Table1,
    Curves,
    GuessDecomp,
    NpaBound,
    TheoremCheck,
    ExportSdp,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Table1 => "table1",
            Command::Curves => "curves",
            Command::GuessDecomp => "guess-decomp",
            Command::NpaBound => "npa-bound",
            Command::TheoremCheck => "theorem-check",
            Command::ExportSdp => "export-sdp",
        }
    }
}

/// Unvalidated options, shared by flags and the JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// mes or mvs
    #[arg(long)]
    pub state: Option<StateKind>,
    /// Bob¹ instrument: sqrt or mixture
    #[arg(long)]
    pub mode: Option<InstrumentMode>,
    /// Sharpness grid lo:hi:step
    #[arg(long)]
    pub grid: Option<String>,
    /// Target setting x,y1,y2
    #[arg(long)]
    pub setting: Option<String>,
    /// local or global
    #[arg(long)]
    pub scope: Option<GuessScope>,
    /// NPA word profile: default or extended
    #[arg(long)]
    pub profile: Option<WordProfile>,
    /// Auxiliary decomposition basis: eigen or computational
    #[arg(long)]
    pub theta: Option<ThetaBasis>,
    /// Output path; standard output when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the random-instance battery
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of random instances
    #[arg(long)]
    pub instances: Option<usize>,
    /// Relative duality-gap tolerance of the SDP solver
    #[arg(long)]
    pub tol: Option<f64>,
}

impl RunOptions {
    /// Fields set in `over` replace those of `self`.
    pub fn merged(self, over: RunOptions) -> RunOptions {
        RunOptions {
            state: over.state.or(self.state),
            mode: over.mode.or(self.mode),
            grid: over.grid.or(self.grid),
            setting: over.setting.or(self.setting),
            scope: over.scope.or(self.scope),
            profile: over.profile.or(self.profile),
            theta: over.theta.or(self.theta),
            out: over.out.or(self.out),
            seed: over.seed.or(self.seed),
            instances: over.instances.or(self.instances),
            tol: over.tol.or(self.tol),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommandArgs {
    /// JSON file with option fields; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, Subcommand)]
pub enum CliCommand {
    /// Reference maxima and double-violation window per state kind, with closed forms and simulation
    Table1(CommandArgs),
    /// First- and second-round CGLMP values along a grid
    Curves(CommandArgs),
    /// Trusted-scheme guessing probability of the decomposition attack
    GuessDecomp(CommandArgs),
    /// Sequential NPA bound on the local guessing probability
    NpaBound(CommandArgs),
    /// Random-instance battery for the quantum/classical guess equality
    TheoremCheck(CommandArgs),
    /// SDPA sparse export of the NPA problem at the first grid point
    ExportSdp(CommandArgs),
}

#[derive(Debug, Parser)]
#[command(
    name = "seqrand",
    version,
    about = "Intrinsic randomness of sequential CGLMP measurements"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

impl CliCommand {
    fn parts(&self) -> (Command, &CommandArgs) {
        match self {
            CliCommand::Table1(a) => (Command::Table1, a),
            CliCommand::Curves(a) => (Command::Curves, a),
            CliCommand::GuessDecomp(a) => (Command::GuessDecomp, a),
            CliCommand::NpaBound(a) => (Command::NpaBound, a),
            CliCommand::TheoremCheck(a) => (Command::TheoremCheck, a),
            CliCommand::ExportSdp(a) => (Command::ExportSdp, a),
        }
    }
}

/// Validated configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    /// `None` runs both state kinds where that makes sense.
    pub state: Option<StateKind>,
    pub mode: InstrumentMode,
    pub grid: EpsilonGrid,
    pub setting: (usize, usize, usize),
    pub scope: GuessScope,
    pub profile: WordProfile,
    pub theta: ThetaBasis,
    pub solver: SolverConfig,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub instances: usize,
}

fn parse_setting(text: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(config_err("setting", format!("'{text}' is not x,y1,y2")));
    }
    let mut v = [0usize; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| config_err("setting", format!("'{p}' is not an index")))?;
        if *slot > 1 {
            return Err(config_err("setting", format!("index {slot} outside 0..=1")));
        }
    }
    Ok((v[0], v[1], v[2]))
}

/// Default grid for randomness runs: the double-violation window at the
/// given step, rounded inward to two decimals.
fn window_grid(kind: StateKind, step: f64) -> Result<EpsilonGrid, CliError> {
    let (lo, hi) = double_violation_window(kind)?;
    Ok(EpsilonGrid::new(
        (lo * 100.0).ceil() / 100.0,
        (hi * 100.0).floor() / 100.0,
        step,
    )?)
}

impl RunConfig {
    /// Validates options for `command`, applying per-command defaults.
    pub fn resolve(command: Command, o: RunOptions) -> Result<RunConfig, CliError> {
        let randomness = matches!(
            command,
            Command::GuessDecomp | Command::NpaBound | Command::ExportSdp
        );
        let state = match (command, o.state) {
            (Command::Table1, s) => s,
            (_, Some(s)) => Some(s),
            (_, None) => Some(StateKind::Mes),
        };
        let mode = o.mode.unwrap_or(if randomness {
            InstrumentMode::Mixture
        } else {
            InstrumentMode::Sqrt
        });
        let grid = match &o.grid {
            Some(text) => EpsilonGrid::parse(text).map_err(|e| match e {
                SeqError::BadGrid(m) => config_err("grid", m),
                other => config_err("grid", other.to_string()),
            })?,
            None => match command {
                Command::GuessDecomp => window_grid(state.unwrap_or(StateKind::Mes), 0.01)?,
                Command::NpaBound => window_grid(state.unwrap_or(StateKind::Mes), 0.04)?,
                Command::ExportSdp => EpsilonGrid::new(0.8, 0.8, 1.0)?,
                _ => EpsilonGrid::new(0.0, 1.0, 0.01)?,
            },
        };
        let setting = match &o.setting {
            Some(text) => parse_setting(text)?,
            None => (0, 0, 1),
        };
        let mut solver = SolverConfig::default();
        if let Some(t) = o.tol {
            if !(t > 0.0 && t < 1.0) {
                return Err(config_err("tol", format!("{t} outside (0, 1)")));
            }
            solver.gap_tol = t;
        }
        let instances = o.instances.unwrap_or(100);
        if command == Command::TheoremCheck && instances == 0 {
            return Err(config_err("instances", "must be positive"));
        }
        Ok(RunConfig {
            command,
            state,
            mode,
            grid,
            setting,
            scope: o.scope.unwrap_or(GuessScope::Local),
            profile: o.profile.unwrap_or(WordProfile::Default),
            theta: o.theta.unwrap_or(ThetaBasis::Eigen),
            solver,
            out: o.out,
            seed: o.seed.unwrap_or(7),
            instances,
        })
    }
}

/// Number with 12 significant digits.
pub fn fmt12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        format!("{:.*}", (11 - exp).max(0) as usize, v)
    } else {
        format!("{v:.11e}")
    }
}

fn csv_row(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

fn states(cfg: &RunConfig) -> Vec<StateKind> {
    match cfg.state {
        Some(s) => vec![s],
        None => vec![StateKind::Mes, StateKind::Mvs],
    }
}

/// Published reference values: Bob¹ max, Bob² max, window ends.
fn table1_reference(kind: StateKind) -> [f64; 4] {
    match kind {
        StateKind::Mes => [2.8729, 2.4086, 0.696, 0.904],
        StateKind::Mvs => [2.915, 2.440, 0.686, 0.902],
    }
}

fn table1(cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = csv_row(&[
        "state".into(),
        "quantity".into(),
        "table_value [1]".into(),
        "closed_form [1]".into(),
        "simulated [1]".into(),
    ]);
    for kind in states(cfg) {
        let reference = table1_reference(kind);
        let (lo, hi) = double_violation_window(kind)?;
        let first = round_violations(&cglmp_scenario(kind, &[1.0, 1.0], cfg.mode, None)?, 3)?[0];
        let at_lo = round_violations(&cglmp_scenario(kind, &[lo, 1.0], cfg.mode, None)?, 3)?[1];
        let sim_window = window_from(
            kind,
            |e| closed_i1(kind, e),
            |e| {
                cglmp_scenario(kind, &[e, 1.0], cfg.mode, None)
                    .and_then(|s| round_violations(&s, 3))
                    .map(|v| v[1])
                    .unwrap_or(f64::NAN)
            },
        )?;
        let rows = [
            ("bob1_max", reference[0], closed_i1(kind, 1.0), first),
            ("bob2_max", reference[1], closed_i2(kind, lo), at_lo),
            ("window_lower", reference[2], lo, sim_window.0),
            ("window_upper", reference[3], hi, sim_window.1),
        ];
        for (name, table, closed, sim) in rows {
            out.push_str(&csv_row(&[
                kind.name().into(),
                name.into(),
                fmt12(table),
                fmt12(closed),
                fmt12(sim),
            ]));
        }
        if kind == StateKind::Mes {
            let printed = window_from(kind, |e| closed_i1(kind, e), mes_i2_printed)
                .map(|w| w.1)
                .unwrap_or(f64::NAN);
            out.push_str(&csv_row(&[
                kind.name().into(),
                "window_upper_printed_formula".into(),
                fmt12(reference[3]),
                fmt12(printed),
                fmt12(sim_window.1),
            ]));
        }
    }
    Ok(out)
}

fn curves(cfg: &RunConfig) -> Result<String, CliError> {
    let kind = cfg.state.unwrap_or(StateKind::Mes);
    let points = violation_curves(kind, cfg.mode, &cfg.grid.points())?;
    let mut out = csv_row(&[
        "epsilon [1]".into(),
        "I1_simulated [1]".into(),
        "I2_simulated [1]".into(),
        "I1_closed [1]".into(),
        "I2_closed [1]".into(),
    ]);
    for p in points {
        out.push_str(&csv_row(&[
            fmt12(p.epsilon),
            fmt12(p.i1),
            fmt12(p.i2),
            fmt12(p.i1_closed),
            fmt12(p.i2_closed),
        ]));
    }
    Ok(out)
}

fn require_mixture(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.mode != InstrumentMode::Mixture {
        return Err(config_err(
            "mode",
            "randomness runs need the mixture instrument, whose statistics the decomposition realizes",
        ));
    }
    Ok(())
}

fn guess_decomp(cfg: &RunConfig) -> Result<String, CliError> {
    require_mixture(cfg)?;
    let kind = cfg.state.unwrap_or(StateKind::Mes);
    let points = guess_curve(kind, &cfg.grid.points(), cfg.setting, cfg.scope, cfg.theta)?;
    let mut out = csv_row(&[
        "epsilon [1]".into(),
        "G [probability]".into(),
        "H_min [bits]".into(),
        "modal_probability [probability]".into(),
    ]);
    for p in points {
        out.push_str(&csv_row(&[
            fmt12(p.epsilon),
            fmt12(p.guess),
            fmt12(p.min_entropy),
            fmt12(p.modal_probability),
        ]));
    }
    Ok(out)
}

fn npa_bound(cfg: &RunConfig) -> Result<String, CliError> {
    require_mixture(cfg)?;
    let kind = cfg.state.unwrap_or(StateKind::Mes);
    let target = (cfg.setting.1, cfg.setting.2);
    let rows: Vec<Vec<String>> = cfg
        .grid
        .points()
        .par_iter()
        .map(|&eps| -> Result<Vec<String>, CliError> {
            let bound =
                mixture_guess_bound(kind, eps, target, cfg.theta, cfg.profile, &cfg.solver)?;
            let scenario = mixture_scenario(kind, eps, cfg.theta)?;
            let dec = bob1_decomposition(eps, target.0, cfg.theta)?;
            let attack = guess_cglmp(&scenario, &dec, cfg.setting, GuessScope::Local)?;
            Ok(vec![
                fmt12(eps),
                fmt12(bound.report.guess_probability),
                fmt12(bound.report.min_entropy),
                fmt12(attack.guess_probability),
                fmt12(attack.min_entropy),
                format!("{:?}", bound.status),
                fmt12(bound.gap),
                bound.face_steps.to_string(),
            ])
        })
        .collect::<Result<_, _>>()?;
    let mut out = csv_row(&[
        "epsilon [1]".into(),
        "G_npa [probability]".into(),
        "H_min_npa [bits]".into(),
        "G_decomposition [probability]".into(),
        "H_min_decomposition [bits]".into(),
        "status".into(),
        "duality_gap [1]".into(),
        "face_steps [count]".into(),
    ]);
    for r in rows {
        out.push_str(&csv_row(&r));
    }
    Ok(out)
}

fn theorem_check(cfg: &RunConfig) -> Result<String, CliError> {
    let r = theorem_battery(cfg.seed, cfg.instances)?;
    let mut out = csv_row(&[
        "instances [count]".into(),
        "max_projective_residual [probability]".into(),
        "max_dilation_residual [probability]".into(),
        "max_recovery_residual [1]".into(),
    ]);
    out.push_str(&csv_row(&[
        r.instances.to_string(),
        fmt12(r.max_projective_residual),
        fmt12(r.max_dilation_residual),
        fmt12(r.max_recovery_residual),
    ]));
    Ok(out)
}

/// Reduced NPA problem at the first grid point. The bound is
/// `G = offset − optimum`; the offset is recorded in a comment line.
fn export_sdp(cfg: &RunConfig) -> Result<String, CliError> {
    require_mixture(cfg)?;
    let kind = cfg.state.unwrap_or(StateKind::Mes);
    let eps = cfg.grid.lo;
    let target = (cfg.setting.1, cfg.setting.2);
    let p_obs = sequential_distribution(&mixture_scenario(kind, eps, cfg.theta)?)?;
    let problem = build_problem(Some(&p_obs), target, cfg.profile)?;
    let red = problem.reduce()?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "* seqrand npa state={} epsilon={} target={},{} profile={} offset={:.17e}",
        kind.name(),
        eps,
        target.0,
        target.1,
        cfg.profile.name(),
        red.offset
    );
    text.push_str(&to_sdpa_string(&red.problem));
    Ok(text)
}

/// Runs the command and returns its output text.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    match cfg.command {
        Command::Table1 => table1(cfg),
        Command::Curves => curves(cfg),
        Command::GuessDecomp => guess_decomp(cfg),
        Command::NpaBound => npa_bound(cfg),
        Command::TheoremCheck => theorem_check(cfg),
        Command::ExportSdp => export_sdp(cfg),
    }
}

/// Writes `text` to a temporary file next to `path` and renames it.
pub fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn load_options(path: &Path) -> Result<RunOptions, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| config_err("config", format!("{}: {e}", path.display())))
}

/// Parallel pool sized by `SEQRAND_THREADS` when set.
fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SEQRAND_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            config_err(
                "SEQRAND_THREADS",
                format!("'{v}' is not a positive integer"),
            )
        })?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Io(e.to_string()))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (command, args) = cli.command.parts();
    let file = match &args.config {
        Some(p) => load_options(p)?,
        None => RunOptions::default(),
    };
    let cfg = RunConfig::resolve(command, file.merged(args.options.clone()))?;
    let text = thread_pool()?.install(|| run(&cfg))?;
    match &cfg.out {
        Some(path) => write_atomic(path, &text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> RunOptions {
        RunOptions::default()
    }

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt12(2.872934), "2.87293400000");
        assert_eq!(fmt12(0.69615242), "0.696152420000");
        assert_eq!(fmt12(1e-12), "1.00000000000e-12");
        assert_eq!(fmt12(0.0), "0");
    }

    #[test]
    fn validation_reports_fields() {
        let bad = RunOptions {
            setting: Some("0,2,1".into()),
            ..opts()
        };
        match RunConfig::resolve(Command::GuessDecomp, bad) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "setting"),
            other => panic!("{other:?}"),
        }
        let bad = RunOptions {
            grid: Some("0.5:1.2:0.1".into()),
            ..opts()
        };
        assert!(matches!(
            RunConfig::resolve(Command::Curves, bad),
            Err(CliError::Config { field: "grid", .. })
        ));
        let bad = RunOptions {
            tol: Some(-1.0),
            ..opts()
        };
        let e = RunConfig::resolve(Command::NpaBound, bad).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn flags_override_file() {
        let file: RunOptions =
            serde_json::from_str(r#"{"state": "mvs", "grid": "0.1:0.2:0.1", "seed": 3}"#).unwrap();
        let flags = RunOptions {
            seed: Some(9),
            ..opts()
        };
        let m = file.merged(flags);
        assert_eq!(m.state, Some(StateKind::Mvs));
        assert_eq!(m.seed, Some(9));
        assert!(serde_json::from_str::<RunOptions>(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn curves_grid_arithmetic() {
        let o = RunOptions {
            state: Some(StateKind::Mvs),
            grid: Some("0:1:0.001".into()),
            ..opts()
        };
        let cfg = RunConfig::resolve(Command::Curves, o).unwrap();
        assert_eq!(cfg.grid.points().len(), 1001);
        let small = RunConfig {
            grid: EpsilonGrid::new(0.7, 0.72, 0.01).unwrap(),
            ..cfg
        };
        let text = run(&small).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("epsilon [1],"));
    }

    #[test]
    fn table1_contains_reference_values() {
        let o = RunOptions {
            state: Some(StateKind::Mes),
            ..opts()
        };
        let text = run(&RunConfig::resolve(Command::Table1, o).unwrap()).unwrap();
        let row = text.lines().find(|l| l.contains("bob1_max")).unwrap();
        assert!(row.contains("2.87290000000"));
        let closed: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!((closed - 2.8729).abs() < 1e-4);
        let lower = text.lines().find(|l| l.contains("window_lower")).unwrap();
        let lo: f64 = lower.split(',').nth(3).unwrap().parse().unwrap();
        assert!((lo - 0.69616).abs() < 1e-4);
    }

    #[test]
    fn randomness_runs_reject_sqrt_mode() {
        let o = RunOptions {
            mode: Some(InstrumentMode::Sqrt),
            grid: Some("0.8:0.8:0.1".into()),
            ..opts()
        };
        let cfg = RunConfig::resolve(Command::GuessDecomp, o).unwrap();
        assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn atomic_write_leaves_no_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, "a,b\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n");
        let code = main_with_args([
            "seqrand",
            "curves",
            "--grid",
            "0.5:2:0.1",
            "--out",
            dir.path().join("bad.csv").to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
        assert!(!dir.path().join("bad.csv").exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn theorem_check_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let code = main_with_args([
            "seqrand",
            "theorem-check",
            "--seed",
            "7",
            "--instances",
            "5",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&path).unwrap();
        let row: Vec<f64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(|c| c.parse().unwrap())
            .collect();
        assert_eq!(row[0], 5.0);
        assert!(row[1] < 1e-8 && row[2] < 1e-8);
    }

    #[test]
    fn guess_decomp_is_deterministic() {
        let o = RunOptions {
            grid: Some("0.75:0.8:0.05".into()),
            ..opts()
        };
        let cfg = RunConfig::resolve(Command::GuessDecomp, o).unwrap();
        let a = run(&cfg).unwrap();
        let b = thread_pool().unwrap().install(|| run(&cfg)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 3);
    }
}
