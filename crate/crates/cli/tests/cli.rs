//! Black-box tests driving the installed binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hotbias"))
}

fn data_dir() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "data"].iter().collect()
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn hotbias");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn index_build_and_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.tsv");
    write(&vocab, "h1\tzalbex\tmedia\nh2\tmorvane\tmedical\nh3\tquentic\t\n");
    let index = dir.path().join("index.bin");
    let out = run_ok(bin().args([
        "index",
        "build",
        "--vocab",
        vocab.to_str().unwrap(),
        "--out",
        index.to_str().unwrap(),
    ]));
    let meta: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["entries"], 3);
    assert_eq!(meta["dim"], 256);

    let out = run_ok(bin().args([
        "index",
        "query",
        "--index",
        index.to_str().unwrap(),
        "--text",
        "please play zalbex",
        "--k",
        "2",
    ]));
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let candidates = result["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 2);
    assert_eq!(candidates[0]["hotword"]["surface"], "zalbex");
}

#[test]
fn rada_variants_are_deterministic_and_contain_the_word() {
    let out1 = run_ok(bin().args(["rada", "variants", "--word", "Tongyi", "--count", "4", "--seed", "9"]));
    let out2 = run_ok(bin().args(["rada", "variants", "--word", "Tongyi", "--count", "4", "--seed", "9"]));
    assert_eq!(out1.stdout, out2.stdout);
    let variants: Vec<String> = serde_json::from_slice(&out1.stdout).unwrap();
    assert_eq!(variants.len(), 4);
    assert!(variants[0].starts_with("Tongyi "));
}

#[test]
fn rada_filter_echo_oracle_removes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.tsv");
    write(&vocab, "h1\tzalbex\t\nh2\tmorvane\t\n");
    let specs = dir.path().join("specs.jsonl");
    write(
        &specs,
        concat!(
            "{\"hotword_id\":\"h1\",\"carriers\":[\"say zalbex now\"],\"seed\":1}\n",
            "{\"hotword_id\":\"h2\",\"carriers\":[\"say morvane now\"],\"seed\":1}\n",
        ),
    );
    let kept = dir.path().join("kept.tsv");
    let out = run_ok(bin().args([
        "rada",
        "filter",
        "--vocab",
        vocab.to_str().unwrap(),
        "--specs",
        specs.to_str().unwrap(),
        "--oracle",
        "echo",
        "--kept-out",
        kept.to_str().unwrap(),
    ]));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["total"], 2);
    assert_eq!(stats["kept"], 0);
    assert_eq!(stats["removed"], 2);
    assert_eq!(stats["removal_rate"], 1.0);
    assert_eq!(std::fs::read_to_string(&kept).unwrap(), "");
}

#[test]
fn grpo_score_reads_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rows.jsonl");
    write(
        &input,
        concat!(
            "{\"reference\":\"play zalbex now\",\"output\":\"play zalbex now\",\"candidates\":[\"zalbex\"]}\n",
            "{\"reference\":\"play zalbex now\",\"output\":\"play zalbeu now\",\"candidates\":[\"zalbex\"]}\n",
        ),
    );
    let out = run_ok(bin().args(["grpo", "score", "--input", input.to_str().unwrap()]));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["match_reward"], 1.0);
    assert_eq!(lines[0]["wer_reward"], 1.0);
    assert_eq!(lines[0]["total"], 2.0);
    assert_eq!(lines[1]["match_reward"], 0.0);
    assert!(lines[1]["total"].as_f64().unwrap() < 2.0);
}

#[test]
fn grpo_check_grad_passes() {
    let out = run_ok(bin().args(["grpo", "check-grad", "--steps", "20"]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn decode_emits_one_json_row_per_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.tsv");
    write(&vocab, "h1\tzalbex\t\nh2\tmorvane\t\n");
    let manifest = dir.path().join("m.jsonl");
    write(
        &manifest,
        concat!(
            "{\"id\":\"u0\",\"text\":\"play zalbex now\",\"keywords\":[\"zalbex\"],\"audio_seed\":1,\"noise_level\":0.0}\n",
            "{\"id\":\"u1\",\"text\":\"nothing special here\",\"keywords\":[],\"audio_seed\":2,\"noise_level\":0.0}\n",
        ),
    );
    let out = run_ok(bin().args([
        "decode",
        "--manifest",
        manifest.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--joint",
        "--k",
        "2",
    ]));
    let rows: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["utterance_id"], "u0");
    assert!(rows[0]["hypothesis"].as_str().unwrap().contains("zalbex"));
    assert!(rows[0]["score"].as_f64().is_some());
    assert!(["context_free", "biased"].contains(&rows[0]["source"].as_str().unwrap()));
}

#[test]
fn eval_retrieval_reports_monotone_recall() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.tsv");
    write(&vocab, "h1\tzalbexor\t\nh2\tmorvanith\t\nh3\tquenticol\t\n");
    let manifest = dir.path().join("m.jsonl");
    write(
        &manifest,
        concat!(
            "{\"id\":\"u0\",\"text\":\"play zalbexor now\",\"keywords\":[\"zalbexor\"],\"audio_seed\":1,\"noise_level\":0.1}\n",
            "{\"id\":\"u1\",\"text\":\"take morvanith daily\",\"keywords\":[\"morvanith\"],\"audio_seed\":2,\"noise_level\":0.1}\n",
        ),
    );
    let out = run_ok(bin().args([
        "eval",
        "retrieval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--k",
        "1,2,3",
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let recall = &report["recall"];
    let r1 = recall["1"].as_f64().unwrap();
    let r2 = recall["2"].as_f64().unwrap();
    let r3 = recall["3"].as_f64().unwrap();
    assert!(r1 <= r2 && r2 <= r3);
    assert_eq!(r3, 100.0);
}

#[test]
fn run_is_deterministic_and_reports_files() {
    let config = data_dir().join("run_config.toml");
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for target in [&a, &b] {
        let out = run_ok(bin().args([
            "run",
            config.to_str().unwrap(),
            "--report-dir",
            target.to_str().unwrap(),
        ]));
        let listed = String::from_utf8_lossy(&out.stdout);
        assert!(listed.contains("retrieval_report.json"));
        assert!(listed.contains("provenance.json"));
    }
    for name in [
        "index.bin",
        "retrieval_report.json",
        "asr_report_media.json",
        "asr_report_medical.json",
        "asr_report_general.json",
        "provenance.json",
    ] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs");
    }
}

#[test]
fn failures_exit_nonzero_with_stage_tagged_stderr() {
    let out = bin()
        .args(["run", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[run]"), "stderr: {stderr}");

    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.tsv");
    write(&vocab, "h1\tzalbex\t\nh1\tmorvane\t\n");
    let out = bin()
        .args([
            "index",
            "build",
            "--vocab",
            vocab.to_str().unwrap(),
            "--out",
            dir.path().join("i.bin").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[index-build]"), "stderr: {stderr}");
    assert!(stderr.contains("duplicate"), "stderr: {stderr}");
}

#[test]
fn mixture_respects_ratios_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let biased = dir.path().join("biased.jsonl");
    write(
        &biased,
        "{\"utterance_id\":\"b0\",\"target\":\"zalbex\"}\n{\"utterance_id\":\"b1\",\"target\":\"morvane\"}\n",
    );
    let general = dir.path().join("general.txt");
    write(&general, "g0\ng1\ng2\ng3\n");
    let out = run_ok(bin().args([
        "rada",
        "mixture",
        "--biased-pool",
        biased.to_str().unwrap(),
        "--general-pool",
        general.to_str().unwrap(),
        "--count",
        "1800",
        "--seed",
        "3",
    ]));
    let rows: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 1800);
    let biased_n = rows.iter().filter(|r| r["is_biased"] == true).count();
    assert_eq!(biased_n, 200, "16:1:1 blocks over 1800 samples");
    let positive = rows
        .iter()
        .filter(|r| r["is_biased"] == true && r["contains_target"] == true)
        .count();
    assert_eq!(positive, 100);
}
