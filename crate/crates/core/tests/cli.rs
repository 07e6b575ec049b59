use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmfc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmfc"))
        .current_dir(dir)
        .env_remove("GMFC_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SIM: &str = r#"
seed = 7
[model]
id = "example1"
phi = "tanh"
[sim]
n = 12
T = 0.2
dt = 0.05
reps = 3
store_stride = 2
[init]
family = "gaussian"
params = [0.0, 1.0]
"#;

#[test]
fn simulate_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), SIM).unwrap();
    let o = gmfc(tmp.path(), &["--config", "c.toml", "--out", "run", "simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("J_mean="));
    let run = tmp.path().join("run");
    for f in [
        "trajectories.csv",
        "costs.csv",
        "cost_summary.csv",
        "config_resolved.toml",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let traj = fs::read_to_string(run.join("trajectories.csv")).unwrap();
    // header + 3 reps x 12 agents x 3 stored times (0, 0.1, 0.2)
    assert_eq!(traj.lines().count(), 1 + 3 * 12 * 3);
    let costs = fs::read_to_string(run.join("costs.csv")).unwrap();
    assert_eq!(costs.lines().next(), Some("rep,running,terminal,total"));

    // the resolved config reproduces the run
    let again = gmfc(
        tmp.path(),
        &["--config", "run/config_resolved.toml", "--out", "run2", "simulate"],
    );
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert_eq!(
        fs::read(run.join("costs.csv")).unwrap(),
        fs::read(tmp.path().join("run2/costs.csv")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), SIM).unwrap();
    let a = gmfc(tmp.path(), &["--config", "c.toml", "--out", "a", "simulate"]);
    let b = gmfc(
        tmp.path(),
        &["--config", "c.toml", "--out", "b", "--seed", "8", "simulate"],
    );
    assert_eq!((a.status.code(), b.status.code()), (Some(0), Some(0)));
    assert_ne!(stdout(&a), stdout(&b));
    let resolved = fs::read_to_string(tmp.path().join("b/config_resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 8"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("no_n.toml"), "[sim]\nT = 1.0\n").unwrap();
    let o = gmfc(tmp.path(), &["--config", "no_n.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sim.n"));

    fs::write(tmp.path().join("typo.toml"), "[sim]\nn = 4\nsteps = 3\n").unwrap();
    let o = gmfc(tmp.path(), &["--config", "typo.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("steps"));

    let o = gmfc(tmp.path(), &["experiment", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonsense"));

    fs::write(
        tmp.path().join("phi.toml"),
        "[model]\nid = \"example1\"\nphi = \"wobble\"\n[sim]\nn = 4\n",
    )
    .unwrap();
    let o = gmfc(tmp.path(), &["--config", "phi.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.phi"));
}

#[test]
fn convex_cost_is_refused_by_the_projection_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("c.toml"),
        "[model]\nid = \"example2\"\nquadratic = -1.0\n[sim]\nn = 4\nreps = 2\n",
    )
    .unwrap();
    let o = gmfc(tmp.path(), &["--config", "c.toml", "experiment", "example2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn cutnorm_modes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("m.csv"), "1,-1\n-1,1\n").unwrap();
    let o = gmfc(tmp.path(), &["cutnorm", "--matrix", "m.csv"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "cutnorm=0.25 method=exact");

    let o = gmfc(tmp.path(), &["cutnorm", "--matrix", "m.csv", "--heuristic"]);
    assert_eq!(stdout(&o).trim(), "cutnorm=0.25 method=lower-bound");

    let o = gmfc(tmp.path(), &["cutnorm", "--graphon", "product", "--n", "40", "--exact"]);
    assert_eq!(o.status.code(), Some(4));

    // above the cap a sign-changing kernel falls back to the heuristic
    let rows: Vec<String> = (0..30)
        .map(|i| {
            (0..30)
                .map(|j| if (i + j) % 3 == 0 { "1" } else { "-0.5" })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    fs::write(tmp.path().join("big.csv"), rows.join("\n")).unwrap();
    let o = gmfc(tmp.path(), &["cutnorm", "--matrix", "big.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).trim().ends_with("method=lower-bound"));
}

#[test]
fn experiments_write_reports_and_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("k.toml"),
        "[kernelconv]\ngraphon_id = \"product\"\nns = [4, 8, 16]\n",
    )
    .unwrap();
    let o = gmfc(
        tmp.path(),
        &["--config", "k.toml", "--out", "o", "experiment", "kernelconv"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict=pass"));
    let dir = tmp.path().join("o/kernelconv");
    for f in ["report.csv", "summary.csv", "config_resolved.toml"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("kind,name,value,detail"));

    fs::write(tmp.path().join("e1.toml"), SIM).unwrap();
    let o = gmfc(
        tmp.path(),
        &["--config", "e1.toml", "--out", "o", "experiment", "example1"],
    );
    let code = o.status.code().unwrap();
    assert!([0, 1, 5].contains(&code), "{}", stderr(&o));
    assert!(tmp.path().join("o/example1/report.csv").exists());
    assert!(fs::read_dir(tmp.path().join("o/example1"))
        .unwrap()
        .flatten()
        .any(|e| e.path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn missing_experiment_section_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gmfc(tmp.path(), &["experiment", "converge"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep"));
}
