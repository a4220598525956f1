use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nefem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nefem")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const TINY_EX1: &str = "nx = 4\ndims = [2, 4, 4, 1]\nscales = [10, 2]\nepochs = 3\ncond_every = 1\nerror_every = 1\nreference_nx = 16\n";
const TINY_EX2: &str = "nx = 4\ndims = [2, 4, 4, 1]\nscales = [10, 2]\nepochs = 6\nh1 = 2\nh2 = 2\nestimate_every = 1\ncond_every = 0\n";
const TINY_EX3: &str = "nx = 4\ndims = [3, 4, 4, 1]\n";

#[test]
fn quadcheck_passes_and_catches_a_bad_weight() {
    let ok = nefem(&["quadcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let text = stdout(&ok);
    assert!(text.contains("degree 20") && !text.contains("FAIL"), "{text}");

    let bad = nefem(&["quadcheck", "--perturb-weight", "1e-6"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn gradcheck_reports_every_seed() {
    let o = nefem(&["gradcheck", "--seeds", "0,1", "--hidden", "4,4"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("seed 0:") && text.contains("seed 1:"), "{text}");
    assert!(text.contains("max relative gradient deviation"));

    // A coarse step leaves a visible truncation error.
    let o = nefem(&["gradcheck", "--seeds", "0", "--hidden", "4,4", "--step", "0.02"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ex1_writes_seed_artifacts_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.toml", TINY_EX1);
    let out = dir.path().join("run");
    let o = nefem(&["ex1", "--config", &cfg, "--seeds", "0,1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in [0, 1] {
        let seed = out.join(format!("seed-{s}"));
        let hist = fs::read_to_string(seed.join("history.csv")).unwrap();
        assert!(hist.starts_with("# nefem-history v1"), "{hist}");
        // Header, three training epochs and the final solve.
        assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 5, "{hist}");
        assert!(seed.join("summary.json").exists());
        assert!(seed.join("checkpoint.json").exists());
    }
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], serde_json::json!([0, 1]));
    assert!(agg["e_h1"]["mean"].as_f64().unwrap() > 0.0);
    assert!(agg["p1_baseline"]["h1"].as_f64().unwrap() > 0.0);
    assert!(out.join("config.toml").exists());
    assert!(!dir.path().join(".run.partial").exists());
}

#[test]
fn existing_output_is_kept_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex3.toml", TINY_EX3);
    let out = dir.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = nefem(&["ex3", "--config", &cfg, "--seeds", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(out.join("keep.txt").exists());

    let o = nefem(&["ex3", "--config", &cfg, "--seeds", "0", "--out", out.to_str().unwrap(), "--overwrite"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("keep.txt").exists());
    assert!(out.join("seed-0/history.csv").exists());
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "lr = -1.0\n");
    let o = nefem(&["ex1", "--config", &bad, "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));

    let unknown = write_config(dir.path(), "unknown.toml", "learning_rate = 0.1\n");
    assert_eq!(code(&nefem(&["ex2", "--config", &unknown, "--out", out])), 1);
    assert_eq!(code(&nefem(&["ex3", "--seeds", "4..2", "--out", out])), 1);
    assert_eq!(code(&nefem(&["ex3", "--no-such-flag"])), 1);
    assert!(!Path::new(out).exists());
}

#[test]
fn print_config_shows_the_merged_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex2.toml", "epochs = 7\n");
    let o = nefem(&["ex2", "--config", &cfg, "--seeds", "3", "--print-config", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let t: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(t["epochs"].as_integer(), Some(7));
    assert_eq!(t["alpha1"].as_float(), Some(0.6));
    assert_eq!(t["seeds"].as_array().unwrap().len(), 1);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex2.toml", TINY_EX2);
    let mut hist = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = nefem(&["ex2", "--config", &cfg, "--seeds", "0", "--out", out.to_str().unwrap(), "--dump-estimator"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        hist.push(fs::read(out.join("seed-0/history.csv")).unwrap());
        assert!(out.join("seed-0/estimator.csv").exists());
    }
    assert_eq!(hist[0], hist[1]);
    let a = dir.path().join("a/seed-0");
    let b = dir.path().join("b/seed-0");
    assert_eq!(fs::read(a.join("estimator.csv")).unwrap(), fs::read(b.join("estimator.csv")).unwrap());
}

#[test]
fn ex2_history_has_effectivity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex2.toml", TINY_EX2);
    let out = dir.path().join("run");
    let o = nefem(&["ex2", "--config", &cfg, "--seeds", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("seed-0/history.csv")).unwrap();
    let mut rows = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "effectivity").expect("effectivity column");
    let wall = headers.iter().position(|h| h == "wall_ms").expect("wall_ms column");
    let mut n = 0;
    for r in rows.records() {
        let r = r.unwrap();
        let eff: f64 = r[col].parse().expect("effectivity every epoch");
        assert!(eff.is_finite() && eff > 0.0);
        assert!(r[wall].is_empty(), "timing is off by default");
        n += 1;
    }
    assert_eq!(n, 7);
}
