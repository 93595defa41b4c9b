use std::path::Path;

use ttso_core::cli::run_command;
use ttso_core::config::{Method, RunConfig};

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::example();
    cfg.sla.iterations = 30;
    cfg.eval.probe_epochs = 40;
    cfg.eval.methods = vec![Method::Erm, Method::Ttso];
    cfg.output_dir = dir.join("out");
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(run_command(["ttso", "bogus"]), 1);
    assert_eq!(run_command(["ttso"]), 1);
    assert_eq!(
        run_command(["ttso", "train", "--config", "x.toml", "--method", "sgd"]),
        1
    );
    assert_eq!(run_command(["ttso", "--help"]), 0);
}

#[test]
fn selftest_passes() {
    assert_eq!(run_command(["ttso", "selftest", "--seed", "4"]), 0);
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_command(["ttso", "lodo", "--config", s(&dir.path().join("missing.toml"))]),
        2
    );
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[nonsense]\n").unwrap();
    assert_eq!(run_command(["ttso", "lodo", "--config", s(&bad)]), 1);
    let cfg = small_config(dir.path());
    assert_eq!(
        run_command([
            "ttso",
            "train",
            "--config",
            s(&cfg),
            "--method",
            "erm",
            "--holdout",
            "Z"
        ]),
        1
    );
    assert_eq!(run_command(["ttso", "toy-quadratic", "--eps", "0"]), 1);
}

#[test]
fn lodo_writes_the_report_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    assert_eq!(run_command(["ttso", "lodo", "--config", s(&cfg_path)]), 0);
    let out = dir.path().join("out");

    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,seed,A,B,C,D,AVG\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for r in json["reports"].as_array().unwrap() {
        for k in ["A", "B", "C", "D", "AVG"] {
            assert!(r["accuracy"][k].is_number(), "{k}");
        }
        assert!(r["mean"].is_number());
    }

    // one row per recorded iteration of each of the four folds
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4 * 30);
    assert!(trace.lines().skip(1).all(|l| l.starts_with("ttso/seed_0/fold_")));

    let echo = RunConfig::load(&out.join("config.echo.toml")).unwrap();
    assert_eq!(echo, RunConfig::load(&cfg_path).unwrap());
    assert!(!std::fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn train_then_eval_agree_on_the_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(
        run_command([
            "ttso",
            "train",
            "--config",
            s(&cfg),
            "--method",
            "ttso",
            "--holdout",
            "C"
        ]),
        0
    );
    let ckpt = dir.path().join("out/train/ttso");
    let train: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ckpt.join("train.json")).unwrap()).unwrap();
    assert!(ckpt.join("trace.csv").is_file());
    assert_eq!(
        run_command([
            "ttso",
            "eval",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ckpt),
            "--target",
            "C"
        ]),
        0
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/eval_C.json")).unwrap()).unwrap();
    assert_eq!(train["accuracy"], eval["accuracy"]);
}

#[test]
fn generated_csv_data_drives_the_same_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    assert_eq!(run_command(["ttso", "gen-data", "--config", s(&cfg_path)]), 0);
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    let synth_ds = cfg.dataset().unwrap();
    cfg.data.synthetic = None;
    cfg.data.manifest = Some("out/data/manifest.toml".into());
    let csv_cfg = dir.path().join("csv.toml");
    std::fs::write(&csv_cfg, cfg.to_toml().unwrap()).unwrap();
    let loaded = RunConfig::load(&csv_cfg).unwrap().dataset().unwrap();
    assert_eq!(loaded.domains.len(), synth_ds.domains.len());
    for (a, b) in loaded.domains.iter().zip(&synth_ds.domains) {
        assert_eq!(a.labels, b.labels);
        // re-standardizing already standardized series moves values only by rounding
        let worst = a
            .windows
            .iter()
            .flatten()
            .zip(b.windows.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }
}

#[test]
fn toy_quadratic_reports_monotone_optima() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_command([
            "ttso",
            "--out",
            s(dir.path()),
            "toy-quadratic",
            "--seed",
            "2",
            "--epochs",
            "8"
        ]),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["monotone"], true);
    let f: Vec<f64> = report["f_opt"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(f.windows(2).all(|w| w[1] >= w[0] - 1e-7));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + f.len());
}
