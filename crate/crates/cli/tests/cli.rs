mod common;

use std::fs;

use common::{dspa, hand_fixture, random_fixture, s, stdout_json};
use dspa_core::{read_trace, DiffMap, Manifest};
use serde_json::Value;

fn build(fx: &common::Fixture, out: &std::path::Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "build-map",
        "--manifest",
        s(&fx.manifest),
        "--input-sae",
        s(&fx.input_sae),
        "--output-sae",
        s(&fx.output_sae),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    stdout_json(&dspa(&args))
}

#[test]
fn envelope_records_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let fx = hand_fixture(dir.path());
    let v = build(&fx, &dir.path().join("m.dspm"), &[]);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "build-map");
    assert_eq!(v["config"]["percentile"], 75.0);
    assert_eq!(v["config"]["support_floor"], 5);
    assert_eq!(v["result"]["n_triples"], 2);
    assert_eq!(v["result"]["d_sae"], 2);
    assert_eq!(v["result"]["nnz"], 3);
    assert!(v["threads"].as_u64().unwrap() >= 1);
}

#[test]
fn empty_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = hand_fixture(dir.path());
    Manifest::from_entries(dir.path(), vec![]).write(&fx.manifest).unwrap();
    let out = dspa(&[
        "build-map",
        "--manifest",
        s(&fx.manifest),
        "--input-sae",
        s(&fx.input_sae),
        "--output-sae",
        s(&fx.output_sae),
        "--out",
        s(&dir.path().join("m.dspm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("m.dspm").exists());
}

#[test]
fn missing_flags_and_bad_flags_exit_two() {
    assert_eq!(dspa(&["build-map"]).status.code(), Some(2));
    assert_eq!(dspa(&["flops", "--bogus"]).status.code(), Some(2));
    assert_eq!(dspa(&["flops", "--params", "-1"]).status.code(), Some(2));
    assert_eq!(dspa(&["flops", "--sweep", "L1"]).status.code(), Some(2));
}

fn steer_args<'a>(fx: &'a common::Fixture, map: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "steer",
        "--map",
        map,
        "--input-sae",
        s(&fx.input_sae),
        "--output-sae",
        s(&fx.output_sae),
        "--prompt-trace",
        s(&fx.prompts[0]),
        "--stream",
        s(&fx.chosen[0]),
        "--out",
        out,
    ]
}

#[test]
fn zero_alpha_leaves_the_stream_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let fx = random_fixture(dir.path(), 20, 3);
    let map = dir.path().join("m.dspm");
    build(&fx, &map, &[]);
    let out = dir.path().join("edited.dspa");
    let mut args = steer_args(&fx, s(&map), s(&out));
    args.extend(["--alpha", "0", "--k-diff", "4", "--k-prompt", "4"]);
    let v = stdout_json(&dspa(&args));
    assert_eq!(v["result"]["edited_tokens"], 0);
    let before = read_trace(&fx.chosen[0]).unwrap();
    let after = read_trace(&out).unwrap();
    let bits = |t: &dspa_core::ActivationTrace| t.hidden().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));
    assert_eq!(before.prompt_len(), after.prompt_len());
    assert_eq!(before.layer_tag(), after.layer_tag());
}

#[test]
fn response_only_keeps_prompt_rows() {
    let dir = tempfile::tempdir().unwrap();
    let fx = random_fixture(dir.path(), 20, 4);
    let map = dir.path().join("m.dspm");
    build(&fx, &map, &[]);
    let out = dir.path().join("edited.dspa");
    let report = dir.path().join("report.jsonl");
    let mut args = steer_args(&fx, s(&map), s(&out));
    args.extend(["--alpha", "1", "--k-diff", "4", "--k-prompt", "4", "--mode", "both", "--response-only", "--report", s(&report)]);
    stdout_json(&dspa(&args));
    let before = read_trace(&fx.chosen[0]).unwrap();
    let after = read_trace(&out).unwrap();
    for t in 0..before.prompt_len() {
        assert_eq!(before.row(t), after.row(t));
    }
    let lines: Vec<Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), before.response_len());
    assert_eq!(lines[0]["token"], before.prompt_len());
}

#[test]
fn zero_map_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let fx = hand_fixture(dir.path());
    let map = dir.path().join("zero.dspm");
    DiffMap::from_dense(&[vec![0.0f32; 2], vec![0.0; 2]]).unwrap().write(&map).unwrap();
    let out = dir.path().join("edited.dspa");
    let mut args = steer_args(&fx, s(&map), s(&out));
    args.extend(["--k-diff", "1", "--k-prompt", "2"]);
    let res = dspa(&args);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).to_lowercase().contains("degenerate"));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let fx = hand_fixture(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"build_map": {"percentile": 50, "support_floor": 1}}"#).unwrap();
    let map = dir.path().join("m.dspm");
    let v = build(&fx, &map, &["--config", s(&cfg)]);
    assert_eq!(v["config"]["percentile"], 50.0);
    assert_eq!(v["config"]["support_floor"], 1);
    let v = build(&fx, &map, &["--config", s(&cfg), "--percentile", "90"]);
    assert_eq!(v["config"]["percentile"], 90.0);
    assert_eq!(v["config"]["support_floor"], 1);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fx = hand_fixture(dir.path());
    let map = dir.path().join("m.dspm");
    for body in [r#"{"build_map": {"percentil": 50}}"#, r#"{"bulid_map": {}}"#] {
        let cfg = dir.path().join("cfg.json");
        fs::write(&cfg, body).unwrap();
        let out = dspa(&[
            "build-map",
            "--config",
            s(&cfg),
            "--manifest",
            s(&fx.manifest),
            "--input-sae",
            s(&fx.input_sae),
            "--output-sae",
            s(&fx.output_sae),
            "--out",
            s(&map),
        ]);
        assert_eq!(out.status.code(), Some(2), "{body}");
    }
}

#[test]
fn sparsify_reports_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("m.dspm");
    DiffMap::from_dense(&[vec![0.5f32, 0.1, -0.4], vec![0.2, -0.3, 0.05], vec![0.0; 3]])
        .unwrap()
        .write(&map)
        .unwrap();
    let out = dir.path().join("s.dspm");
    let v = stdout_json(&dspa(&["sparsify", "--map", s(&map), "--k-diff", "1", "--out", s(&out)]));
    assert_eq!(v["result"]["nnz_before"], 6);
    assert_eq!(v["result"]["nnz_after"], 4);
    assert!((v["result"]["tau"].as_f64().unwrap() - 0.2).abs() < 1e-7);
}

#[test]
fn flops_text_and_json_agree_and_ratio_ignores_n() {
    let json = stdout_json(&dspa(&["flops"]));
    let ratio = json["result"]["ratio"].as_f64().unwrap();
    assert!((ratio - 4.4728).abs() < 1e-4);
    let big = stdout_json(&dspa(&["flops", "--n-triples", "50000"]));
    assert_eq!(big["result"]["ratio"].as_f64().unwrap(), ratio);
    assert_eq!(big["result"]["totals"]["dspa"].as_f64().unwrap(), 8e13 * 50000.0);

    let text = dspa(&["flops", "--format", "text"]);
    assert!(text.status.success());
    let text = String::from_utf8(text.stdout).unwrap();
    assert!(text.starts_with("# config: "));
    assert!(text.contains(&format!("{ratio:.4}")));
}

#[test]
fn flops_accepts_bare_cost_file_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cost.json");
    fs::write(&cfg, r#"{"P": 8e9, "p": 400, "c": 300, "r": 300, "L1": 768, "L2": 512, "B": 64, "sweep": {"L1": [384]}}"#)
        .unwrap();
    let v = stdout_json(&dspa(&["flops", "--config", s(&cfg), "--sweep", "B=32,128"]));
    let sweep = v["result"]["sweep"].as_array().unwrap();
    assert_eq!(sweep.len(), 3);
    let params: Vec<&str> = sweep.iter().map(|p| p["parameter"].as_str().unwrap()).collect();
    assert_eq!(params, ["B", "B", "L1"]);
}

#[test]
fn theory_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.json");
    fs::write(
        &world,
        r#"{"d": 8, "sigma": {"random": {"seed": 1}}, "b": {"random": {"seed": 2}},
            "gate_law": {"bernoulli_uniform": 0.3}, "noise_scale": 0.5}"#,
    )
    .unwrap();
    let base = ["theory", "--world", s(&world), "--check", "factorization", "--n", "2000"];
    let ok = stdout_json(&dspa(&[&base[..], &["--bound", "10"]].concat()));
    assert_eq!(ok["result"]["passed"], true);
    let strict = dspa(&[&base[..], &["--bound", "1e-9"]].concat());
    assert_eq!(strict.status.code(), Some(3));
    let v: Value = serde_json::from_slice(&strict.stdout).unwrap();
    assert_eq!(v["result"]["passed"], false);

    assert_eq!(dspa(&["theory", "--check", "demix", "--world", s(&world)]).status.code(), Some(2));
    assert_eq!(dspa(&["theory", "--check", "factorization"]).status.code(), Some(2));
    let topk = stdout_json(&dspa(&["theory", "--check", "topk", "--topk-cases", "50"]));
    assert_eq!(topk["result"]["topk"]["agreements"], 50);
}

#[test]
fn audit_and_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let fx = random_fixture(dir.path(), 30, 5);
    let map = dir.path().join("m.dspm");
    build(&fx, &map, &[]);
    let plans = dir.path().join("plans.jsonl");
    let mut all = String::new();
    for k in 0..3 {
        let plan = dir.path().join(format!("plan{k}.json"));
        let out = dir.path().join(format!("e{k}.dspa"));
        let mut args = steer_args(&fx, s(&map), s(&out));
        args[8] = s(&fx.prompts[k]);
        args[10] = s(&fx.chosen[k]);
        args.extend(["--k-diff", "3", "--k-prompt", "4", "--plan-out", s(&plan)]);
        stdout_json(&dspa(&args));
        all += &fs::read_to_string(&plan).unwrap();
    }
    fs::write(&plans, all).unwrap();

    let v = stdout_json(&dspa(&["audit", "--map", s(&map), "--set-size", "4", "--compare", s(&map), "--plans", s(&plans)]));
    let r = &v["result"];
    assert_eq!(r["sets"]["augment"].as_array().unwrap().len(), 4);
    assert_eq!(r["overlap"]["augment"], 4);
    assert_eq!(r["overlap"]["ablate"], 4);
    assert_eq!(r["coverage"]["plans"].as_array().unwrap().len(), 3);
    assert_eq!(dspa(&["audit", "--map", s(&map), "--set-size", "9"]).status.code(), Some(2));

    let traces: Vec<&str> = fx.chosen.iter().take(5).map(|p| s(p)).collect();
    let mut args = vec!["evidence", "--map", s(&map), "--output-sae", s(&fx.output_sae), "--feature", "2", "--top-n", "7", "--traces"];
    args.extend(&traces);
    let v = stdout_json(&dspa(&args));
    let ev = v["result"]["evidence"].as_array().unwrap();
    assert!(ev.len() <= 7);
    let acts: Vec<f64> = ev.iter().map(|e| e["activation"].as_f64().unwrap()).collect();
    assert!(acts.windows(2).all(|w| w[0] >= w[1]));
    assert!(acts.iter().all(|&a| a > 0.0));
}

#[test]
fn threads_flag_and_env_are_reported() {
    let v = stdout_json(&dspa(&["--threads", "3", "flops"]));
    assert_eq!(v["threads"], 3);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_dspa"))
        .arg("flops")
        .env("DSPA_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["threads"], 2);
}
