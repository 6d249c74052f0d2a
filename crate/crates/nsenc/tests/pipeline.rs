//! End-to-end CLI pipeline at a small scale: gen-data, run, eval,
//! show-program, export-latents, plus rerun determinism.

use std::path::{Path, PathBuf};

use nsenc::cli::{
    cmd_eval, cmd_export_latents, cmd_gen_data, cmd_run, cmd_show_program, RunOverrides,
};

fn small_config(dir: &Path, out_dir: &Path, seeds: &str) -> PathBuf {
    let path = dir.join("config.toml");
    let text = format!(
        r#"
[dataset]
kind = "synthetic"
n_train = 96
n_val = 32
n_test = 32
trajectory_length = 6
seed = 5

[[features.derived]]
op = "final"
name = "final_x"
source = "x"

[[features.derived]]
op = "final"
name = "final_y"
source = "y"

[train]
epochs = 2
z_dim = 2
h_dim = 4
rnn_dim = 4
adv_dim = 4
batch_size = 16

[synthesis]
neural_epochs = 1
symbolic_epochs = 4
learning_rate = 0.02
batch_size = 16

[synthesis.standin]
rnn_dim = 4
hidden_dim = 4

[run]
k = 2
seeds = {seeds}
out_dir = "{out}"
"#,
        seeds = seeds,
        out = out_dir.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_writes_three_splits_with_manifest_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &dir.path().join("unused"), "[1]");
    let out = dir.path().join("data");
    cmd_gen_data(&cfg, &out).unwrap();
    for f in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "schema.json",
        "labels.json",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    let splits = manifest["splits"].as_array().unwrap();
    assert_eq!(splits.len(), 3);
    assert_eq!(splits[0]["count"], 96);
    assert_eq!(splits[1]["count"], 32);
    // Regenerating produces byte-identical files.
    let out2 = dir.path().join("data2");
    cmd_gen_data(&cfg, &out2).unwrap();
    assert_eq!(
        std::fs::read(out.join("train.jsonl")).unwrap(),
        std::fs::read(out2.join("train.jsonl")).unwrap()
    );
}

#[test]
fn run_eval_show_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = small_config(dir.path(), &out_dir, "[3]");
    let out = cmd_run(&cfg, &RunOverrides::default()).unwrap();

    let seed_dir = out.join("seed_3");
    for f in [
        "program_1.txt",
        "program_2.txt",
        "synthesis_log.jsonl",
        "metrics.json",
        "checkpoint.json",
    ] {
        assert!(seed_dir.join(f).exists(), "{f} missing");
    }
    assert!(out.join("config.toml").exists());
    assert!(out.join("run_manifest.json").exists());
    assert!(out.join("summary.json").exists());
    assert!(out.join("normalizer.json").exists());

    // Histories: three VAE trainings per round, two rounds.
    for round in 1..=2 {
        for t in 1..=3 {
            assert!(
                seed_dir.join(format!("history_r{round}_t{t}.csv")).exists(),
                "history_r{round}_t{t}.csv missing"
            );
        }
    }

    // Summary median equals the single seed's metrics.
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["seeds"][0]["status"], "ok");
    let m = &summary["seeds"][0]["metrics"];
    assert_eq!(summary["median"]["purity"], m["purity"]);

    // Evaluating the saved programs reproduces the run metrics.
    let eval_metrics = cmd_eval(&cfg, &seed_dir, Some(&dir.path().join("eval.json"))).unwrap();
    let run_metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seed_dir.join("metrics.json")).unwrap())
            .unwrap();
    // Program files round at two decimals, so cluster boundaries can move a
    // hair; purity must stay within a couple of items.
    assert!((eval_metrics.purity - run_metrics["purity"].as_f64().unwrap()).abs() < 0.1);

    // show-program renders with a feature glossary.
    let shown = cmd_show_program(&cfg, &seed_dir.join("program_1.txt")).unwrap();
    assert!(shown.contains("features:"));
    assert!(shown.contains("channel"));

    // export-latents writes one row per test trajectory plus a header.
    let csv_path = dir.path().join("latents.csv");
    cmd_export_latents(&cfg, &seed_dir.join("checkpoint.json"), &seed_dir, &csv_path).unwrap();
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 32);
    assert!(lines[0].starts_with("index,z0,z1,pc1,pc2,bit0,bit1,cluster,label"));
}

#[test]
fn rerun_with_same_seed_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg_a = {
        let p = small_config(dir.path(), &out_a, "[9]");
        let renamed = dir.path().join("config_a.toml");
        std::fs::rename(p, &renamed).unwrap();
        renamed
    };
    let cfg_b = {
        let p = small_config(dir.path(), &out_b, "[9]");
        let renamed = dir.path().join("config_b.toml");
        std::fs::rename(p, &renamed).unwrap();
        renamed
    };
    cmd_run(&cfg_a, &RunOverrides::default()).unwrap();
    cmd_run(&cfg_b, &RunOverrides::default()).unwrap();
    for f in [
        "seed_9/metrics.json",
        "seed_9/synthesis_log.jsonl",
        "seed_9/program_1.txt",
        "seed_9/program_2.txt",
    ] {
        assert_eq!(
            std::fs::read(out_a.join(f)).unwrap(),
            std::fs::read(out_b.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn failed_seed_is_recorded_and_run_continues() {
    // A diverging learning rate makes synthesis fail for every seed; the
    // summary records the failures and cmd_run reports a training error.
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let path = dir.path().join("config.toml");
    let text = format!(
        r#"
[dataset]
kind = "synthetic"
n_train = 48
n_val = 16
n_test = 16
trajectory_length = 5
seed = 5

[train]
epochs = 30
z_dim = 2
h_dim = 4
rnn_dim = 4
adv_dim = 4
batch_size = 8
learning_rate = 5000.0

[synthesis]
neural_epochs = 1
symbolic_epochs = 1

[run]
k = 1
seeds = [1, 2]
out_dir = "{}"
"#,
        out_dir.display()
    );
    std::fs::write(&path, text).unwrap();
    let err = cmd_run(&path, &RunOverrides::default());
    assert!(err.is_err());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    let seeds = summary["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 2);
    for s in seeds {
        assert!(s["status"].as_str().unwrap().starts_with("failed"));
    }
}

#[test]
fn cli_overrides_take_effect() {
    let dir = tempfile::tempdir().unwrap();
    let ignored = dir.path().join("ignored");
    let cfg = small_config(dir.path(), &ignored, "[1, 2]");
    let out = dir.path().join("overridden");
    let run_out = cmd_run(
        &cfg,
        &RunOverrides {
            seed: Some(4),
            out: Some(out.clone()),
            k: Some(1),
            max_depth: None,
            parallel_seeds: false,
        },
    )
    .unwrap();
    assert_eq!(run_out, out);
    assert!(out.join("seed_4").exists());
    assert!(out.join("seed_4/program_1.txt").exists());
    assert!(!out.join("seed_4/program_2.txt").exists());
    assert!(!ignored.exists());
}
