use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sysid::dataset::read_dataset;

fn sysid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sysid")).args(args).output().expect("binary runs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    sysid(&args)
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn csv_value(text: &str, row: usize, col: &str) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == col).unwrap();
    lines.nth(row).unwrap().split(',').nth(i).unwrap().to_string()
}

#[test]
fn gen_with_the_m1_training_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.toml", "p = 500\nm = 50\nseed = 1\n[model]\nkind = \"m1\"\nn = 200\n");
    let out = dir.path().join("out");
    let summary = ok(&run("gen", &cfg, &out, &[]));
    assert!(summary.starts_with("gen: 25000 records"));
    let z = read_dataset(&out.join("dataset.ndjson")).unwrap();
    assert_eq!((z.header.p, z.header.m, z.header.model.n()), (500, 50, 200));
    assert_eq!(z.len(), 25_000);
    assert!(out.join("gen.config.toml").exists());
}

#[test]
fn outputs_are_reproducible_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.toml", "p = 3\nm = 2\nseed = 9\n[model]\nkind = \"m2\"\nn = 20\n");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&run("gen", &cfg, &a, &["--threads", "1"]));
    ok(&run("gen", &cfg, &b, &[]));
    ok(&run("gen", &cfg, &c, &["--seed", "10"]));
    let read = |d: &Path| fs::read(d.join("dataset.ndjson")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let archived = fs::read_to_string(c.join("gen.config.toml")).unwrap();
    assert!(archived.contains("seed = 10"));
}

#[test]
fn invalid_key_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.toml", "p = 3\nm = 2\nbatchsize = 4\n[model]\nkind = \"m1\"\nn = 20\n");
    let out = dir.path().join("out");
    let o = run("gen", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("batchsize"), "{err}");
    assert!(!out.exists());
}

#[test]
fn schema_violation_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "split.toml", "input = \"d.ndjson\"\nratio = 1.5\n");
    let o = run("split", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]: ratio:"));
}

#[test]
fn missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("gen", &dir.path().join("absent.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[missing-file]:"));
    let cfg = write(dir.path(), "split.toml", "input = \"nothing.ndjson\"\nratio = 0.5\n");
    let o = run("split", &cfg, &dir.path().join("o"), &[]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[missing-file]:") && err.contains("nothing.ndjson"), "{err}");
}

#[test]
fn eval_with_a_perfect_estimator_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "eval.toml",
        "k_test = 5\nprior_baseline = true\nconstant = [1.0, 0.1]\n[model]\nkind = \"m1\"\nn = 30\n",
    );
    let out = dir.path().join("out");
    ok(&run("eval", &cfg, &out, &[]));
    let report = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv_value(&report, 1, "method"), "constant");
    assert_eq!(csv_value(&report, 1, "test_mse"), "0");
    // prior mean [0.8, 0.5005] against [1, 0.1]
    let base: f64 = csv_value(&report, 0, "test_mse").parse().unwrap();
    assert!((base - (0.04 + 0.4005f64 * 0.4005)).abs() < 1e-12);
    assert_eq!(csv_value(&report, 0, "fingerprint"), csv_value(&report, 1, "fingerprint"));
    let est = fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), 1 + 2 * 5);
}

#[test]
fn gen_split_train_tune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run("gen", &write(d, "gen.toml", "p = 12\nm = 4\nseed = 2\n[model]\nkind = \"m1\"\nn = 25\n"), d, &[]));
    let s = ok(&run("split", &write(d, "split.toml", "input = \"dataset.ndjson\"\nratio = 0.75\nseed = 3\n"), d, &[]));
    assert_eq!(s.trim(), "split: 36 training / 12 validation records");
    let tr = read_dataset(&d.join("train.ndjson")).unwrap();
    assert!(tr.header.subset.is_some());

    let train_cfg = "train = \"train.ndjson\"\nval = \"val.ndjson\"\nseed = 5\n\
        [rnn]\ncell = \"gru\"\nlayers = 1\nhidden = 4\ndense = 4\n\
        [training]\nepochs = 3\nbatch_size = 8\neta0 = 0.01\n";
    let t = ok(&run("train", &write(d, "train.toml", train_cfg), d, &[]));
    assert!(t.starts_with("train: 3 epochs"), "{t}");
    let hist = fs::read_to_string(d.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 4);
    assert!(hist.starts_with("epoch,train_loss,val_loss,eta"));
    assert!(d.join("model.timing.json").exists());

    let tune_cfg = "train = \"train.ndjson\"\nval = \"val.ndjson\"\ncell = \"lstm\"\n\
        layers = [1]\nhidden = [2, 3]\ndense = [3]\n[training]\nepochs = 2\nbatch_size = 8\n";
    ok(&run("tune", &write(d, "tune.toml", tune_cfg), d, &[]));
    let grid = fs::read_to_string(d.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);
    let v0: f64 = csv_value(&grid, 0, "val_mse").parse().unwrap();
    let v1: f64 = csv_value(&grid, 1, "val_mse").parse().unwrap();
    assert!(v0 <= v1);
    assert!(d.join("best.json").exists());

    let eval_cfg = "k_test = 4\ncheckpoints = [\"model.json\", \"best.json\"]\n[model]\nkind = \"m1\"\nn = 25\n";
    let e = ok(&run("eval", &write(d, "eval.toml", eval_cfg), &d.join("eval"), &[]));
    assert!(e.contains("rnn-gru-1x4-4"), "{e}");
    let report = fs::read_to_string(d.join("eval/eval.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    let train_secs: f64 = csv_value(&report, 1, "train_seconds").parse().unwrap();
    assert!(train_secs > 0.0);
}

#[test]
fn dataset_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run("gen", &write(d, "a.toml", "p = 4\nm = 2\noutput = \"a.ndjson\"\n[model]\nkind = \"m1\"\nn = 10\n"), d, &[]));
    ok(&run("gen", &write(d, "b.toml", "p = 4\nm = 2\noutput = \"b.ndjson\"\n[model]\nkind = \"m2\"\nn = 10\n"), d, &[]));
    let cfg = "train = \"a.ndjson\"\nval = \"b.ndjson\"\n[rnn]\ncell = \"gru\"\nlayers = 1\nhidden = 2\ndense = 2\n";
    let o = run("train", &write(d, "t.toml", cfg), &d.join("o"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("o").exists());
}

#[test]
fn linear_lab_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "ll.toml",
        "p_values = [40, 200]\nm_values = [5, 20]\nseeds = [1, 2]\nn = 30\ntest_signals = 10\n",
    );
    let out = dir.path().join("o");
    ok(&run("linear-lab", &cfg, &out, &[]));
    let text = fs::read_to_string(out.join("linear_lab.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("p,m,mean_gap_mse,seed_1,seed_2"));
    let small: f64 = csv_value(&text, 0, "mean_gap_mse").parse().unwrap();
    let large: f64 = csv_value(&text, 3, "mean_gap_mse").parse().unwrap();
    assert!(large < small);
}

#[test]
fn drives_fit_recovers_synthetic_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "d.toml",
        "dt = 0.02\nstarts = 8\nseed = 4\nsearch = [[1.0, 6.0], [0.5, 5.0], [5.0, 30.0], [0.05, 0.9]]\n\
         [synthetic]\nk = 3.0\nalpha = 2.0\nomega0 = 12.0\nxi = 0.3\nn = 300\n",
    );
    let out = dir.path().join("o");
    ok(&run("drives-fit", &cfg, &out, &[]));
    let text = fs::read_to_string(out.join("drives_fit.csv")).unwrap();
    let get = |k: &str| -> f64 {
        text.lines().find(|l| l.starts_with(&format!("{k},"))).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    for (k, v) in [("k", 3.0), ("alpha", 2.0), ("omega0", 12.0), ("xi", 0.3)] {
        assert!((get(k) - v).abs() < 0.01 * v, "{k} = {}", get(k));
    }
    assert!(out.join("drives_prior.json").exists());

    let both = write(
        dir.path(),
        "both.toml",
        "dt = 0.02\ndata = \"x.csv\"\nsearch = [[1.0, 6.0], [0.5, 5.0], [5.0, 30.0], [0.05, 0.9]]\n\
         [synthetic]\nk = 3.0\nalpha = 2.0\nomega0 = 12.0\nxi = 0.3\nn = 50\n",
    );
    assert_eq!(run("drives-fit", &both, &dir.path().join("x"), &[]).status.code(), Some(2));
}

#[test]
fn drives_fit_reads_csv_signals() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("u,y\n");
    for k in 0..5 {
        text.push_str(&format!("{},{}\n", k as f64, 0.0));
    }
    text.push_str("1.0,abc\n");
    write(dir.path(), "sig.csv", &text);
    let cfg = write(
        dir.path(),
        "d.toml",
        "dt = 0.02\ndata = \"sig.csv\"\nsearch = [[1.0, 6.0], [0.5, 5.0], [5.0, 30.0], [0.05, 0.9]]\n",
    );
    let o = run("drives-fit", &cfg, &dir.path().join("o"), &[]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[parse]:") && err.contains("line 7"), "{err}");
}

#[test]
fn mh_on_a_simulated_signal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "mh.toml",
        "seed = 3\n[model]\nkind = \"m1\"\nn = 30\n[mh]\nburn_in = 50\nn_required = 150\nn_particles = 50\nn_chains = 2\n",
    );
    let out = dir.path().join("o");
    let s = ok(&run("mh", &cfg, &out, &[]));
    assert!(s.starts_with("mh: estimate"));
    let chains = fs::read_to_string(out.join("chain.csv")).unwrap();
    assert!(chains.starts_with("chain,t,"));
    assert_eq!(chains.lines().count(), 1 + 2 * 200);
    let summary = fs::read_to_string(out.join("mh.csv")).unwrap();
    let th: Vec<f64> = summary
        .lines()
        .filter(|l| l.starts_with("theta_"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(th.len(), 2);
    assert!((0.1..=1.5).contains(&th[0]) && (0.001..=1.0).contains(&th[1]));
}
