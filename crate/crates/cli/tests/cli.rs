use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", &format!("{name}.toml")].iter().collect()
}

fn jbsde(args: &[&str], out: &Path, threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_jbsde"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(t) = threads {
        cmd.env("RAYON_NUM_THREADS", t.to_string());
    }
    cmd.output().unwrap()
}

fn body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# jbsde "), "{text}");
    text.split_once('\n').unwrap().1.to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_assumptions_passes_on_linear() {
    let dir = tempfile::tempdir().unwrap();
    let o = jbsde(&["verify-assumptions", "--config", scenario("linear").to_str().unwrap()], dir.path(), None);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).contains("0 failed"));
    let csv = body(&dir.path().join("assumptions.csv"));
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,")), "{csv}");
}

#[test]
fn solve_then_residual_stays_below_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("linear");
    let args = ["--config", cfg.to_str().unwrap(), "--paths", "4000", "--steps", "10"];
    let o = jbsde(&[&["solve"], &args[..]].concat(), dir.path(), None);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(dir.path().join("solution.json").exists());
    let o = jbsde(&[&["residual"], &args[..]].concat(), dir.path(), None);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = body(&dir.path().join("residual.csv"));
    let all: f64 = csv
        .lines()
        .find(|l| l.starts_with("all,"))
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!(all < 0.05, "{all}");
}

#[test]
fn ladder_reports_decreasing_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("additive");
    let o = jbsde(
        &["ladder", "--config", cfg.to_str().unwrap(), "--ladder", "2,4,8,16", "--paths", "4000"],
        dir.path(),
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = body(&dir.path().join("ladder.csv"));
    assert_eq!(csv.lines().count(), 5);
    let solution: Vec<f64> = csv.lines().skip(2).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(solution.windows(2).all(|w| w[1] < w[0]), "{solution:?}");
}

#[test]
fn invalid_ladder_exits_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("additive");
    let o = jbsde(&["ladder", "--config", cfg.to_str().unwrap(), "--ladder", "4,4,8"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ladder not strictly increasing"));
    let o = jbsde(&["solve", "--config", "/nonexistent.toml"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn assumption_gate_blocks_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    // Drop the declared moduli so x² falls back to a unit Lipschitz modulus.
    let text = std::fs::read_to_string(scenario("quadratic")).unwrap();
    let cut = text.find("# g(x) = x^2 is only").unwrap();
    let end = text.find("[start]").unwrap();
    let path = dir.path().join("strict.toml");
    std::fs::write(&path, format!("{}{}", &text[..cut], &text[end..])).unwrap();
    let args = ["--config", path.to_str().unwrap(), "--paths", "2000", "--steps", "5"];
    let o = jbsde(&[&["solve"], &args[..]].concat(), dir.path(), None);
    assert_eq!(o.status.code(), Some(1), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = jbsde(&[&["solve", "--force"], &args[..]].concat(), dir.path(), None);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
}

#[test]
fn reports_are_byte_identical_across_thread_counts() {
    let cfg = scenario("linear-driver");
    let args = ["--config", cfg.to_str().unwrap(), "--paths", "3000", "--steps", "10", "--quiet"];
    let mut bodies = Vec::new();
    for threads in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        for cmd in ["solve", "residual", "verify-viscosity", "simulate-forward"] {
            let o = jbsde(&[&[cmd], &args[..]].concat(), dir.path(), Some(threads));
            assert!(o.status.code().is_some_and(|c| c <= 1), "{cmd}: {o:?}");
            assert!(stdout(&o).is_empty());
        }
        let files = ["solution.csv", "residual.csv", "viscosity.csv", "forward.csv", "moments.csv"];
        bodies.push(files.map(|f| body(&dir.path().join(f))));
    }
    assert_eq!(bodies[0], bodies[1]);
}
