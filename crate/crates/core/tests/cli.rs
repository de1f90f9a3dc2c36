mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aesindy::cli::model_report;
use aesindy::dataset::load_snapshots;
use aesindy::sindy::{CoefficientMatrix, LatentModel};
use aesindy::trainer::TrainedModel;

fn aesindy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesindy")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    /// Small Stuart–Landau data set and a briefly trained model.
    fn trained(&self) -> (PathBuf, PathBuf) {
        let g = self.write("g.json", r#"{"mu_count": 4, "t_end": 8, "ambient_dim": 40}"#);
        let data = self.path("d.aesd");
        let out = aesindy(&["gen-data", "--system", "stuart-landau", "--config", s(&g), "--out", s(&data)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let t = self.write("t.json", r#"{"epochs": 5, "pod": {"n_pod": 4}, "library": {"poly_params": 1}}"#);
        let model = self.path("m.json");
        let out = aesindy(&["train", "--config", s(&t), "--data", s(&data), "--out", s(&model), "--seed", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (data, model)
    }

    /// The trained model with its latent system replaced.
    fn with_latent(&self, model: &Path, latent: LatentModel, name: &str) -> PathBuf {
        let mut m = TrainedModel::load(model).unwrap();
        m.latent = latent;
        let p = self.path(name);
        m.save(&p).unwrap();
        p
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_creates_loadable_dataset() {
    let f = Fixture::new();
    let g = f.write("c.json", r#"{"mu_count": 3, "t_end": 2}"#);
    let out_path = f.path("d.aesd");
    let out = aesindy(&["gen-data", "--system", "stuart-landau", "--config", s(&g), "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let set = load_snapshots(&out_path).unwrap();
    assert_eq!(set.instance_count(), 3);
    assert_eq!(set.state_dim(), 200);
    assert!(set.has_derivatives());
    assert!(f.path("d.meta.json").exists());

    let duff = f.write("duff.json", r#"{"omega_count": 2, "forcing": [0.1], "t_end": 5}"#);
    let out = aesindy(&["gen-data", "--system", "duffing", "--config", s(&duff), "--out", s(&f.path("f.aesd"))]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(load_snapshots(f.path("f.aesd")).unwrap().param_dim(), 2);
}

#[test]
fn usage_errors_exit_one() {
    let out = aesindy(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(aesindy(&[]).status.code(), Some(1));
    assert_eq!(aesindy(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_two() {
    let f = Fixture::new();
    let out = aesindy(&["inspect", "--model", s(&f.path("missing.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("ERROR:"));

    let bad = f.write("bad.json", r#"{"no_such_key": 1}"#);
    let out = aesindy(&["gen-data", "--system", "duffing", "--config", s(&bad), "--out", s(&f.path("x.aesd"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn train_inspect_simulate_continue() {
    let f = Fixture::new();
    let (data, model) = f.trained();
    let data_bytes = std::fs::read(&data).unwrap();
    let model_bytes = std::fs::read(&model).unwrap();

    let out = aesindy(&["inspect", "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(0));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.lines().any(|l| l.starts_with("dz1/dt = ")));
    assert!(report.lines().any(|l| l.starts_with("dz2/dt = ")));
    let m = TrainedModel::load(&model).unwrap();
    let rows = report.lines().filter(|l| l.starts_with("joint,") || l.starts_with("fine-tune,")).count();
    assert_eq!(rows, m.train_log.len());
    assert_eq!(m.config.seed, 1);
    assert_eq!(m.latent.transform.names, vec!["mu".to_string()]);

    let csv = f.path("sim.csv");
    let out = aesindy(&[
        "simulate", "--model", s(&model), "--x0", "2", "--data", s(&data), "--beta", "0.1", "--t-end", "1",
        "--dt", "0.25", "--out", s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,z_1,z_2");
    assert_eq!(lines.count(), 5);

    let out = aesindy(&[
        "simulate", "--model", s(&model), "--x0", &format!("{}:3", s(&data)), "--beta", "-0.1", "--t-end", "0.5",
        "--dt", "0.25", "--decode", "--out", s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("t,z_1,z_2,x_1,"));
    assert!(header.ends_with(",x_40"));

    let out = aesindy(&[
        "continue", "--model", s(&model), "--param", "Re", "--from", "0.2", "--range", "0.2:0", "--out",
        s(&f.path("b.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown parameter"));

    assert_eq!(std::fs::read(&data).unwrap(), data_bytes);
    assert_eq!(std::fs::read(&model).unwrap(), model_bytes);
}

#[test]
fn continue_writes_branch_table() {
    let f = Fixture::new();
    let (_, model) = f.trained();
    let sl = f.with_latent(&model, common::stuart_landau_model(), "sl.json");
    let csv = f.path("branch.csv");
    let out = aesindy(&[
        "continue", "--model", s(&sl), "--param", "mu", "--from", "0.25", "--range", "0.25:-0.1", "--ds", "0.02",
        "--out", s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,beta,period,amplitude,stability,multiplier_max_abs");
    assert_eq!(*lines.last().unwrap(), "# termination: collapse");
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[0], "0");
    assert!((first[1].parse::<f64>().unwrap() - 0.25).abs() < 1e-12);
    assert!((first[3].parse::<f64>().unwrap() - 0.5).abs() < 1e-6);
    assert_eq!(first[4], "stable");

    let out = aesindy(&[
        "continue", "--model", s(&sl), "--param", "mu", "--from", "0.25", "--range", "0.25:0.2", "--output-node", "3",
        "--out", s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(std::fs::read_to_string(&csv).unwrap().ends_with("# termination: range-end\n"));
}

#[test]
fn numerical_failure_exits_three() {
    let f = Fixture::new();
    let (_, model) = f.trained();
    let sl = f.with_latent(&model, common::stuart_landau_model(), "sl.json");
    let out = aesindy(&[
        "continue", "--model", s(&sl), "--param", "mu", "--from", "-0.1", "--range", "-0.1:-0.2", "--out",
        s(&f.path("b.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("ERROR:"));
}

#[test]
fn identical_invocations_identical_files() {
    let f = Fixture::new();
    let (data, model) = f.trained();
    let t = f.path("t.json");
    let again = f.path("again.json");
    let out = aesindy(&["train", "--config", s(&t), "--data", s(&data), "--out", s(&again), "--seed", "1"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn report_formats_equations() {
    let f = Fixture::new();
    let (_, model) = f.trained();
    let mut m = TrainedModel::load(&model).unwrap();
    m.latent = common::beam_model();
    let report = model_report(&m);
    assert!(report.contains("dz1/dt = 1*z2\n"), "{report}");
    assert!(
        report.contains(
            "dz2/dt = -0.3*z1 - 0.011*z2 + 0.003*z1^2 - 0.012*z2^2 - 0.113*z1^3 + 0.036*z1^2*z2 + 0.719*z1*z2^2 - 0.051*z2^3 - 0.009*b1*cos(b2*t)"
        ),
        "{report}"
    );
    let lib = m.latent.library.clone();
    let zeros = CoefficientMatrix::zeros(lib.len(), 2);
    m.latent = LatentModel::new(lib, zeros, m.latent.transform.clone()).unwrap();
    let report = model_report(&m);
    assert!(report.contains("dz1/dt = 0\ndz2/dt = 0\n"), "{report}");
}
