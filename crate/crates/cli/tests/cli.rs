use std::path::Path;
use std::process::{Command, Output};

fn reconvset(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reconvset")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = reconvset(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Data rows of a CSV with `#` comment lines, header dropped.
fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn count_params_matches_closed_form() {
    // ReConvSet, M = C = 16, k = 3: 3MCk weights + 3M*M compression, M biases.
    assert_eq!(ok(&["count-params", "--extractor", "reconvset", "--channels", "16", "--k", "3"]).trim(), "3072 weights + 16 biases = 3088");
    let all = ok(&["count-params", "--all", "--channels", "16"]);
    assert_eq!(all.lines().count(), 5);
    assert!(all.contains("conv3d: 6912 weights + 16 biases = 6928"));
}

#[test]
fn rank_report_meets_every_bound() {
    let csv = ok(&["rank-report", "--all", "--M", "16", "--C", "16", "--k", "3", "--seeds", "20"]);
    assert!(csv.contains("scheme,M,C,k,predicted_bound,measured_rank,stable_rank"));
    let rows = rows(&csv);
    assert_eq!(rows.len(), 100);
    for r in rows {
        assert_eq!(r[4], r[5], "row {r:?}");
        assert!(r[6].parse::<f64>().unwrap() >= 1.0);
    }
}

#[test]
fn spectrum_report_is_normalized_and_descending() {
    let csv = ok(&["spectrum-report", "--extractor", "reconvset", "--M", "4", "--C", "4"]);
    let sig: Vec<f64> = rows(&csv).iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(sig.len(), 12);
    assert_eq!(sig[0], 1.0);
    assert!(sig.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn eval_on_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "1", "--dims", "8x16x16", "--seed", "3", "--out", p(dir.path())]);
    let cube = dir.path().join("phantom_0000.hsc");
    let csv_path = dir.path().join("eval.csv");
    ok(&["eval", "--ref", p(&cube), "--test", p(&cube), "--out", p(&csv_path)]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("# command=eval"));
    let get = |m: &str| rows(&csv).into_iter().find(|r| r[0] == m).unwrap()[2].parse::<f64>().unwrap();
    assert_eq!(get("mpsnr"), 100.0);
    assert_eq!(get("mssim"), 1.0);
    assert_eq!(get("sam"), 0.0);
}

#[test]
fn full_workflow_is_reproducible_from_emitted_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&["gen-data", "--count", "2", "--dims", "8x24x24", "--seed", "1", "--out", p(&d("clean"))]);
    assert!(std::fs::read_to_string(d("clean/gen-data.cfg")).unwrap().contains("dims=8x24x24"));

    let train = |out: &str, extra: &[&str]| {
        let mut args = vec!["train", "--out", out, "--threads", "2"];
        args.extend_from_slice(extra);
        ok(&args);
    };
    let run_a = d("run_a");
    #[rustfmt::skip]
    train(p(&run_a), &["--data", p(&d("clean")), "--extractor", "seq1d2d", "--epochs", "2", "--seed", "5", "--levels", "2",
                       "--base-channels", "4", "--blocks-per-level", "1", "--patch", "8", "--patches-per-cube", "2", "--batch", "2"]);
    for f in ["model.rckp", "loss.csv", "experiment.cfg", "checkpoints/epoch_002.rckp"] {
        assert!(run_a.join(f).exists(), "{f} missing");
    }
    let cfg = std::fs::read_to_string(run_a.join("experiment.cfg")).unwrap();
    assert!(cfg.contains("extractor=seq1d2d") && cfg.contains("seed=5"));
    assert_eq!(rows(&std::fs::read_to_string(run_a.join("loss.csv")).unwrap()).len(), 2);

    // Replaying the emitted config, single-threaded, reproduces every byte.
    let run_b = d("run_b");
    ok(&["train", "--config", p(&run_a.join("experiment.cfg")), "--out", p(&run_b)]);
    assert_eq!(std::fs::read(run_a.join("model.rckp")).unwrap(), std::fs::read(run_b.join("model.rckp")).unwrap());

    ok(&["add-noise", "--case", "c5", "--seed", "9", "--in", p(&d("clean")), "--out", p(&d("noisy"))]);
    ok(&["add-noise", "--case", "c5", "--seed", "9", "--in", p(&d("clean")), "--out", p(&d("noisy2"))]);
    let noisy = d("noisy/phantom_0001.hsc");
    assert_eq!(std::fs::read(&noisy).unwrap(), std::fs::read(d("noisy2/phantom_0001.hsc")).unwrap());
    assert!(std::fs::read_to_string(d("noisy/run.cfg")).unwrap().contains("noise=c5"));

    let den = d("den.hsc");
    ok(&["denoise", "--checkpoint", p(&run_a.join("model.rckp")), "--in", p(&noisy), "--out", p(&den)]);
    assert!(std::fs::read_to_string(d("den.hsc.cfg")).unwrap().contains("extractor=seq1d2d"));
    let csv = ok(&["eval", "--ref", p(&d("clean/phantom_0001.hsc")), "--test", p(&den)]);
    assert_eq!(rows(&csv).iter().filter(|r| r[0] == "psnr").count(), 8);
}

#[test]
fn errors_exit_nonzero_with_context() {
    let missing = reconvset(&["eval", "--ref", "/nonexistent/a.hsc", "--test", "/nonexistent/b.hsc"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/a.hsc"));

    let unknown = reconvset(&["count-params", "--extractor", "reconvset", "--channels", "4", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));

    let bad_case = reconvset(&["add-noise", "--case", "c9", "--in", "x", "--out", "y"]);
    assert!(!bad_case.status.success());
}

#[test]
fn help_lists_subcommands_and_flags() {
    let help = ok(&["--help"]);
    for cmd in ["gen-data", "add-noise", "train", "denoise", "eval", "rank-report", "spectrum-report", "count-params", "ablation", "--threads"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--config", "--data", "--extractor", "--epochs", "--seed", "--patch", "--patches-per-cube"] {
        assert!(train.contains(flag), "{flag} missing from train help");
    }
}
