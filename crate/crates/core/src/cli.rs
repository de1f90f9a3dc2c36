//! Command-line front end: `gen-data`, `train`, `simulate`, `continue`, `inspect`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::continuation::{continue_branch, decode_branch, Branch, ContinuationConfig, Mode, Stability};
use crate::dataset::{load_snapshots, save_snapshots, sidecar_path, write_sidecar, SnapshotSet};
use crate::error::Error;
use crate::integrator::{decode_trajectory, encode_state, integrate_latent, Params};
use crate::oracles::{gen_duffing, gen_stuart_landau, DuffingConfig, LiftSpec, StuartLandauConfig};
use crate::sindy::{write_xi_csv, ParamTransform};
use crate::trainer::{latent_dimension_sweep, train, Phase, TrainConfig, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "aesindy", version, about = "Autoencoder + parametric SINDy reduced-order models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic snapshot set from an oracle system.
    GenData(GenDataArgs),
    /// Train a model on a snapshot set.
    Train(TrainArgs),
    /// Time-march a trained model and write the trajectory as CSV.
    Simulate(SimulateArgs),
    /// Continue periodic orbits of a trained model in one parameter.
    Continue(ContinueArgs),
    /// Print the identified equations and training log, or run a latent-dimension sweep.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum System {
    Duffing,
    StuartLandau,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub system: System,
    /// JSON document with generator options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Also write Ξ as CSV.
    #[arg(long)]
    pub xi_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Initial state: a snapshot file (`path` or `path:row`), or a row index into `--data`.
    #[arg(long)]
    pub x0: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated raw parameter values.
    #[arg(long, allow_hyphen_values = true, default_value = "")]
    pub beta: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub t0: f64,
    #[arg(long)]
    pub t_end: f64,
    #[arg(long)]
    pub dt: f64,
    /// Append the decoded full-order state.
    #[arg(long)]
    pub decode: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Forced,
    Autonomous,
}

#[derive(Debug, Args)]
pub struct ContinueArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Name of the continuation parameter.
    #[arg(long)]
    pub param: String,
    /// Starting value of the continuation parameter.
    #[arg(long, allow_hyphen_values = true)]
    pub from: f64,
    /// `a:b`; the sweep runs towards `b`.
    #[arg(long, allow_hyphen_values = true)]
    pub range: String,
    /// Values of all parameters, comma-separated; the continued one is replaced by `--from`.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<String>,
    #[arg(long)]
    pub ds: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Full-order state component whose amplitude is reported; latent amplitude when absent.
    #[arg(long)]
    pub output_node: Option<usize>,
    /// JSON continuation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, required_unless_present = "sweep")]
    pub model: Option<PathBuf>,
    /// Train at n = 1..=K and report the autoencoder error of each.
    #[arg(long, value_name = "K", requires = "data")]
    pub sweep: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training configuration for the sweep.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Run(Error::InvalidArgument(msg.into()))
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("ERROR: usage: {msg}");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("ERROR: {e}");
            if e.is_numerical() {
                3
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Continue(a) => continue_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("no such file: {}", path.display())))
    }
}

fn require_output(path: &Path, inputs: &[&Path]) -> CliResult<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            return Err(invalid(format!("output directory does not exist: {}", dir.display())));
        }
    }
    let target = std::fs::canonicalize(path).ok();
    for input in inputs {
        if target.is_some() && std::fs::canonicalize(input).ok() == target {
            return Err(invalid(format!("output would overwrite input {}", input.display())));
        }
    }
    Ok(())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            require_file(p)?;
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            serde_json::from_str(&text)
                .map_err(|e| invalid(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| usage(format!("not a number: {t:?}"))))
        .collect()
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("range must look like a:b, got {s:?}")))?;
    let a: f64 = a.trim().parse().map_err(|_| usage(format!("bad range start {a:?}")))?;
    let b: f64 = b.trim().parse().map_err(|_| usage(format!("bad range end {b:?}")))?;
    if !a.is_finite() || !b.is_finite() || a == b {
        return Err(invalid(format!("degenerate range {s}")));
    }
    Ok((a, b))
}

fn check_positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive, got {v}")))
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    require_output(&a.out, &[])?;
    if let Some(n) = a.noise {
        if !(n >= 0.0) {
            return Err(invalid(format!("noise must be ≥ 0, got {n}")));
        }
    }
    let (set, meta) = match a.system {
        System::Duffing => {
            let mut cfg: DuffingConfig = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.noise {
                cfg.noise = n;
            }
            let lift = LiftSpec::random(cfg.ambient_dim, 2, cfg.quadratic_scale, cfg.noise, cfg.seed)?;
            let set = gen_duffing(&lift, &cfg.grid(), &cfg)?;
            let meta = json!({ "system": "duffing", "param_names": ["F", "omega"], "config": cfg });
            (set, meta)
        }
        System::StuartLandau => {
            let mut cfg: StuartLandauConfig = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.noise {
                cfg.noise = n;
            }
            let lift = LiftSpec::random(cfg.ambient_dim, 2, cfg.quadratic_scale, cfg.noise, cfg.seed)?;
            let set = gen_stuart_landau(&lift, &cfg.grid(), &cfg)?;
            let meta = json!({ "system": "stuart-landau", "param_names": ["mu"], "config": cfg });
            (set, meta)
        }
    };
    save_snapshots(&set, &a.out)?;
    write_sidecar(&a.out, &meta)?;
    log::info!("wrote {} snapshots of dimension {} to {}", set.rows(), set.state_dim(), a.out.display());
    Ok(())
}

/// Parameter names recorded next to a snapshot file, if any.
fn sidecar_param_names(data: &Path) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(sidecar_path(data)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("param_names")?
        .as_array()?
        .iter()
        .map(|s| s.as_str().map(String::from))
        .collect()
}

fn load_training_config(path: Option<&Path>, data_path: &Path, data: &SnapshotSet) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = read_config(path)?;
    if cfg.param_transform.is_none() {
        if let Some(names) = sidecar_param_names(data_path).filter(|n| n.len() == data.param_dim()) {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            cfg.param_transform = Some(ParamTransform::identity(&refs));
        }
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    require_file(&a.data)?;
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    require_output(&a.out, &inputs)?;
    if let Some(p) = &a.xi_csv {
        require_output(p, &inputs)?;
    }
    let data = load_snapshots(&a.data)?;
    let mut cfg = load_training_config(a.config.as_deref(), &a.data, &data)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = a.latent_dim {
        cfg.latent_dim = n;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let model = train(&data, &cfg)?;
    model.save(&a.out)?;
    if let Some(p) = &a.xi_csv {
        write_xi_csv(&model.latent.library, &model.latent.xi, p)?;
    }
    if let Some(last) = model.train_log.last() {
        log::info!("final loss {:?}", last.loss);
    }
    Ok(())
}

fn snapshot_row(set: &SnapshotSet, row: usize) -> CliResult<DVector<f64>> {
    if row >= set.rows() {
        return Err(invalid(format!("row {row} out of range (file has {} rows)", set.rows())));
    }
    Ok(set.states.row(row).transpose())
}

fn initial_state(a: &SimulateArgs) -> CliResult<DVector<f64>> {
    if let Ok(row) = a.x0.parse::<usize>() {
        let data = a
            .data
            .as_ref()
            .ok_or_else(|| usage("--x0 given as a row index needs --data"))?;
        require_file(data)?;
        return snapshot_row(&load_snapshots(data)?, row);
    }
    let (path, row) = match a.x0.rsplit_once(':') {
        Some((p, r)) if r.parse::<usize>().is_ok() => (PathBuf::from(p), r.parse().unwrap()),
        _ => (PathBuf::from(&a.x0), 0),
    };
    require_file(&path)?;
    snapshot_row(&load_snapshots(&path)?, row)
}

fn simulate_cmd(a: SimulateArgs) -> CliResult<()> {
    require_file(&a.model)?;
    require_output(&a.out, &[a.model.as_path()])?;
    check_positive("dt", a.dt)?;
    if !(a.t_end >= a.t0) {
        return Err(invalid(format!("t_end ({}) precedes t0 ({})", a.t_end, a.t0)));
    }
    let beta = parse_list(&a.beta)?;
    let model = TrainedModel::load(&a.model)?;
    if beta.len() != model.latent.param_dim() {
        return Err(invalid(format!(
            "model expects {} parameter values ({}), got {}",
            model.latent.param_dim(),
            model.latent.transform.names.join(", "),
            beta.len()
        )));
    }
    let x0 = initial_state(&a)?;
    let z0 = encode_state(&model, &x0)?;
    let mut traj = integrate_latent(&model.latent, &z0, Params::Constant(&beta), a.t0, a.t_end, a.dt)?;
    if a.decode {
        traj = decode_trajectory(&model, traj)?;
    }
    let n = traj.latent.ncols();
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",z_{i}");
    }
    if let Some(d) = &traj.decoded {
        for i in 1..=d.ncols() {
            let _ = write!(out, ",x_{i}");
        }
    }
    out.push('\n');
    for (k, t) in traj.times.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in traj.latent.row(k).iter() {
            let _ = write!(out, ",{v}");
        }
        if let Some(d) = &traj.decoded {
            for v in d.row(k).iter() {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    std::fs::write(&a.out, out).map_err(Error::from)?;
    Ok(())
}

fn branch_csv(branch: &Branch, rows: &[(f64, f64, f64, Stability, f64)]) -> String {
    let mut out = String::from("index,beta,period,amplitude,stability,multiplier_max_abs\n");
    for (i, (beta, period, amp, st, m)) in rows.iter().enumerate() {
        let _ = writeln!(out, "{i},{beta},{period},{amp},{st},{m}");
    }
    let _ = writeln!(out, "# termination: {}", branch.termination);
    out
}

fn continue_cmd(a: ContinueArgs) -> CliResult<()> {
    require_file(&a.model)?;
    let mut inputs = vec![a.model.as_path()];
    inputs.extend(a.config.as_deref());
    require_output(&a.out, &inputs)?;
    let range = parse_range(&a.range)?;
    let mut cfg: ContinuationConfig = read_config(a.config.as_deref())?;
    if let Some(ds) = a.ds {
        check_positive("ds", ds)?;
        cfg.ds = ds;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Forced => Mode::Forced,
            ModeArg::Autonomous => Mode::Autonomous,
        };
    }
    let model = TrainedModel::load(&a.model)?;
    let names = &model.latent.transform.names;
    let active = model.latent.transform.index_of(&a.param).ok_or_else(|| {
        invalid(format!(
            "unknown parameter {:?}; the model has [{}]",
            a.param,
            names.join(", ")
        ))
    })?;
    let mut params = match &a.beta {
        Some(s) => parse_list(s)?,
        None if names.len() == 1 => vec![a.from],
        None => return Err(usage("--beta is required for models with more than one parameter")),
    };
    if params.len() != names.len() {
        return Err(invalid(format!(
            "model expects {} parameter values ({}), got {}",
            names.len(),
            names.join(", "),
            params.len()
        )));
    }
    params[active] = a.from;
    if let Some(node) = a.output_node {
        if node >= model.pod.basis.nrows() {
            return Err(invalid(format!(
                "output node {node} out of range (state dimension {})",
                model.pod.basis.nrows()
            )));
        }
    }
    let branch = continue_branch(&model.latent, &params, active, range, &cfg)?;
    let rows: Vec<_> = match a.output_node {
        Some(node) => decode_branch(&model, &branch, node)?
            .into_iter()
            .map(|p| (p.beta, p.period, p.amplitude, p.stability, p.multiplier_max_abs))
            .collect(),
        None => branch
            .points
            .iter()
            .map(|p| (p.beta, p.orbit.period, p.amplitude, p.stability, p.multiplier_max_abs()))
            .collect(),
    };
    std::fs::write(&a.out, branch_csv(&branch, &rows)).map_err(Error::from)?;
    log::info!(
        "{} points, {} folds, terminated by {}",
        branch.points.len(),
        branch.folds.len(),
        branch.termination
    );
    Ok(())
}

/// Equations followed by the per-epoch loss table.
pub fn model_report(model: &TrainedModel) -> String {
    let mut out = String::new();
    let names = &model.latent.transform.names;
    let _ = writeln!(
        out,
        "latent dimension {}, parameters [{}], {} library features",
        model.latent_dim(),
        names.join(", "),
        model.latent.library.len()
    );
    for eq in model.latent.equations() {
        let _ = writeln!(out, "{eq}");
    }
    let joint = model.train_log.iter().filter(|l| l.phase == Phase::Joint).count();
    let fine = model.train_log.len() - joint;
    let _ = writeln!(out, "\ntraining log: {joint} joint epochs, {fine} fine-tune entries");
    let _ = writeln!(out, "phase,epoch,total,ae,sindy,l1,consistency");
    for l in &model.train_log {
        let phase = match l.phase {
            Phase::Joint => "joint",
            Phase::FineTune => "fine-tune",
        };
        let t = &l.loss;
        let _ = writeln!(
            out,
            "{phase},{},{:e},{:e},{:e},{:e},{:e}",
            l.epoch, t.total, t.ae, t.sindy, t.l1, t.consistency
        );
    }
    out
}

fn inspect_cmd(a: InspectArgs) -> CliResult<()> {
    if let Some(k) = a.sweep {
        if k == 0 {
            return Err(invalid("sweep needs K ≥ 1"));
        }
        let data_path = a.data.as_ref().ok_or_else(|| usage("--sweep needs --data"))?;
        require_file(data_path)?;
        let data = load_snapshots(data_path)?;
        let cfg = load_training_config(a.config.as_deref(), data_path, &data)?;
        cfg.validate()?;
        println!("n,ae_term");
        for (n, ae) in latent_dimension_sweep(&data, &cfg, &(1..=k).collect::<Vec<_>>())? {
            println!("{n},{ae:e}");
        }
        return Ok(());
    }
    let path = a.model.as_ref().ok_or_else(|| usage("inspect needs --model or --sweep"))?;
    require_file(path)?;
    let model = TrainedModel::load(path)?;
    print!("{}", model_report(&model));
    Ok(())
}
