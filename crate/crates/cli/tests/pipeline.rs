//! End-to-end pipeline tests driving the compiled binary the way an
//! operator would, on a deliberately tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

fn corpus_path() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/corpus.txt").display().to_string()
}

/// Small-but-alive settings so the full pipeline stays under a few seconds.
fn tiny_args(out_dir: &Path) -> Vec<String> {
    vec![
        "--out-dir".to_string(),
        out_dir.display().to_string(),
        format!("--corpus.path={}", corpus_path()),
        "--trainer.steps=40".to_string(),
        "--calibration.n=32".to_string(),
        "--search.population=16".to_string(),
        "--search.elites=3".to_string(),
        "--search.mutation_offspring=8".to_string(),
        "--search.crossover_offspring=4".to_string(),
        "--search.generations=3".to_string(),
        "--reform.sample_counts=[16, 32]".to_string(),
        "--reform.rhos=[0.3, 1.0]".to_string(),
    ]
}

fn whittle(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whittle")).args(args).output().expect("binary runs")
}

fn run_stage(out_dir: &Path, stage: &[&str]) -> Output {
    let mut args: Vec<String> = stage.iter().map(|s| s.to_string()).collect();
    args.extend(tiny_args(out_dir));
    whittle(&args)
}

fn assert_ok(output: &Output, what: &str) {
    assert!(
        output.status.success(),
        "{what} failed with {:?}:\n{}\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

fn read_dir_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                let bytes = std::fs::read(&path).unwrap();
                entries.push((rel, whittle_core::util::sha256_hex(&bytes)));
            }
        }
    }
    entries.sort();
    entries
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    assert_ok(&run_stage(&out, &["train"]), "train");
    assert_ok(&run_stage(&out, &["calibrate"]), "calibrate");
    assert_ok(&run_stage(&out, &["init"]), "init");
    assert_ok(&run_stage(&out, &["search", "--ablate-no-init"]), "search");
    assert_ok(&run_stage(&out, &["reform", "--ablate-samples", "--ablate-rho"]), "reform");
    assert_ok(&run_stage(&out, &["extract"]), "extract");
    let eval = run_stage(&out, &["eval", "--sweep-sensitivity"]);
    assert_ok(&eval, "eval");
    assert_ok(&run_stage(&out, &["plot"]), "plot");
    assert_ok(&run_stage(&out, &["--verify"]), "verify");

    let table = stdout(&eval);
    let ppl = |name: &str| -> f64 {
        let line = table
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("{name} row missing in:\n{table}"));
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(
        ppl("searched-subnet") <= ppl("init-subnet") + 1e-9,
        "search did not improve on the initialization:\n{table}"
    );
    let reformed = ppl("reformed-subnet");
    let extracted = ppl("extracted-dense");
    assert!(
        (reformed - extracted).abs() <= 1e-9,
        "extracted dense model diverged from the reformed masked model:\n{table}"
    );
    for name in [
        "model.sdm",
        "grams.sdm",
        "genome_init.txt",
        "genome_best.txt",
        "search_log.jsonl",
        "search_log_noinit.jsonl",
        "model_reformed.sdm",
        "reform_samples.json",
        "reform_rho.json",
        "subnet.sdm",
        "equivalence.json",
        "eval_report.json",
        "sensitivity.json",
        "plots/convergence.svg",
        "provenance/train.json",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }

    let first = read_dir_hashes(&out);
    for stage in [&["train"][..], &["calibrate"], &["init"], &["search", "--ablate-no-init"]] {
        assert_ok(&run_stage(&out, stage), "re-run");
    }
    let second = read_dir_hashes(&out);
    for ((name_a, hash_a), (name_b, hash_b)) in first.iter().zip(&second) {
        assert_eq!(name_a, name_b);
        assert_eq!(hash_a, hash_b, "{name_a} changed across identical re-runs");
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    let two = tmp.path().join("two");
    for (dir, workers) in [(&one, "1"), (&two, "2")] {
        for stage in [&["train"][..], &["calibrate"], &["init"], &["search"]] {
            let mut args: Vec<String> = stage.iter().map(|s| s.to_string()).collect();
            args.push("--workers".to_string());
            args.push(workers.to_string());
            args.extend(tiny_args(dir));
            assert_ok(&whittle(&args), "stage under --workers");
        }
    }
    let hashes_one = read_dir_hashes(&one);
    let hashes_two = read_dir_hashes(&two);
    assert_eq!(hashes_one, hashes_two, "--workers changed artifact bytes");
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train".to_string()];
    args.extend(tiny_args(tmp.path()));
    args.push("--trainer.lr=-1".to_string());
    let output = whittle(&args);
    assert_eq!(output.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("trainer.lr"),
        "diagnostic does not name the field: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let mut args = vec!["train".to_string()];
    args.extend(tiny_args(tmp.path()));
    args.push("--corpus.path=/nonexistent/corpus.txt".to_string());
    let output = whittle(&args);
    assert_eq!(output.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("corpus.path"),
        "diagnostic does not name the field: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let mut args = vec!["train".to_string()];
    args.extend(tiny_args(tmp.path()));
    args.push("--trainer.stpes=40".to_string());
    let output = whittle(&args);
    assert_eq!(output.status.code(), Some(2), "typo in key must be rejected");
}

#[test]
fn missing_and_stale_artifacts_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let output = run_stage(&out, &["search"]);
    assert_eq!(output.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("model.sdm"),
        "diagnostic does not name the missing artifact"
    );

    assert_ok(&run_stage(&out, &["train"]), "train");
    assert_ok(&run_stage(&out, &["calibrate"]), "calibrate");
    assert_ok(&run_stage(&out, &["init"]), "init");
    let genome = out.join("genome_init.txt");
    let mut text = std::fs::read_to_string(&genome).unwrap();
    text.push('\n');
    std::fs::write(&genome, text).unwrap();
    let output = run_stage(&out, &["search"]);
    assert_eq!(output.status.code(), Some(3), "stale input must be refused");
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("stale"),
        "diagnostic does not mention staleness"
    );
    let output = run_stage(&out, &["--verify"]);
    assert_eq!(output.status.code(), Some(3), "verify must catch the tamper");
}

#[test]
fn trainer_override_changes_training_length() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["train".to_string()];
    args.extend(tiny_args(&out));
    args.push("--trainer.steps=7".to_string());
    let output = whittle(&args);
    assert_ok(&output, "train with override");
    assert!(stdout(&output).contains("trained 7 steps"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 7);
    assert_eq!(report["settings"]["steps"], 7);
}

#[test]
fn extract_skip_reform_works_without_reform_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_ok(&run_stage(&out, &["train"]), "train");
    assert_ok(&run_stage(&out, &["calibrate"]), "calibrate");
    assert_ok(&run_stage(&out, &["init"]), "init");
    assert_ok(&run_stage(&out, &["search"]), "search");

    let refused = run_stage(&out, &["extract"]);
    assert_eq!(
        refused.status.code(),
        Some(3),
        "extract must refuse to run without a reform record"
    );
    let output = run_stage(&out, &["extract", "--skip-reform"]);
    assert_ok(&output, "extract --skip-reform");
    let equivalence: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("equivalence.json")).unwrap()).unwrap();
    assert_eq!(equivalence["source"], "model.sdm");
    assert!(equivalence["max_abs_logit_diff_f64"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn config_file_and_env_out_dir_are_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let config_path = tmp.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!("[corpus]\npath = \"{}\"\n\n[trainer]\nsteps = 5\n", corpus_path()),
    )
    .unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_whittle"))
        .args(["train", "--config", &config_path.display().to_string()])
        .env("WHITTLE_OUT", out.display().to_string())
        .output()
        .expect("binary runs");
    assert_ok(&output, "train from config file");
    assert!(stdout(&output).contains("trained 5 steps"));
    assert!(out.join("model.sdm").exists(), "env out dir was ignored");
}
