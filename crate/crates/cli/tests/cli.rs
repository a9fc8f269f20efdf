use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn neuroscrub(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroscrub"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = neuroscrub(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> Value {
    let out = neuroscrub(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

#[test]
fn extract_after_embed_decodes_the_signature() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--arch", "plain_cnn", "--seed", "3", "--out", "m.nwm"]);
    ok(d, &["keygen", "--scheme", "scale_sign", "--model", "m.nwm", "--seed", "1", "--out", "k.json"]);
    let embed: Value = serde_json::from_str(&ok(d, &["embed", "--model", "m.nwm", "--key", "k.json", "--out", "w.nwm"])).unwrap();
    assert_eq!(embed["ber"], 0.0);
    let text = ok(d, &["extract", "--model", "w.nwm", "--key", "k.json"]);
    assert!(text.contains("decoded: this is my signature"), "{text}");
    let json: Value = serde_json::from_str(&ok(d, &["extract", "--model", "w.nwm", "--key", "k.json", "--format", "json"])).unwrap();
    assert_eq!(json["decoded"], "this is my signature");
    assert_eq!(json["ber"], 0.0);
}

#[test]
fn zero_alpha_attack_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--arch", "resnet_mini", "--out", "m.nwm"]);
    ok(d, &["attack", "--model", "m.nwm", "--alpha", "0", "--seed", "5", "--out", "a.nwm"]);
    assert_eq!(std::fs::read(d.join("m.nwm")).unwrap(), std::fs::read(d.join("a.nwm")).unwrap());
}

#[test]
fn attack_then_invert_round_trips_and_certifies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--arch", "groupnorm_cnn", "--seed", "2", "--out", "m.nwm"]);
    ok(d, &["attack", "--model", "m.nwm", "--scales", "continuous", "--out", "a.nwm", "--plan", "p.json"]);
    let rep: Value = serde_json::from_str(&ok(d, &["equiv", "m.nwm", "a.nwm", "--inputs", "8", "--tol-rel", "1e-9"])).unwrap();
    assert_eq!(rep["top1_agreement"], 1.0);
    ok(d, &["invert", "--model", "a.nwm", "--plan", "p.json", "--out", "b.nwm"]);
    ok(d, &["equiv", "m.nwm", "b.nwm", "--inputs", "8", "--tol-rel", "1e-9"]);
    // Power-of-two scales undo exactly.
    ok(d, &["attack", "--model", "m.nwm", "--seed", "4", "--out", "a2.nwm", "--plan", "p2.json"]);
    ok(d, &["invert", "--model", "a2.nwm", "--plan", "p2.json", "--out", "b2.nwm"]);
    assert_eq!(std::fs::read(d.join("m.nwm")).unwrap(), std::fs::read(d.join("b2.nwm")).unwrap());
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.nwm"), b"not a model").unwrap();
    ok(d, &["gen-model", "--arch", "tanh_rnn", "--out", "m.nwm"]);
    ok(d, &["keygen", "--scheme", "ipr_ic", "--model", "m.nwm", "--out", "k.json"]);

    assert_eq!(failure(d, &["extract", "--model", "junk.nwm", "--key", "k.json"])["error"], "bad_magic");
    assert_eq!(failure(d, &["extract", "--model", "missing.nwm", "--key", "k.json"])["error"], "io");
    assert_eq!(failure(d, &["keygen", "--scheme", "uchida", "--model", "m.nwm", "--out", "u.json"])["error"], "incompatible");
    ok(d, &["gen-model", "--arch", "resnet_mini", "--seed", "2", "--out", "r.nwm"]);
    ok(d, &["keygen", "--scheme", "uchida", "--model", "r.nwm", "--seed", "9", "--out", "u.json"]);
    assert_eq!(
        failure(d, &["embed", "--model", "r.nwm", "--key", "u.json", "--max-steps", "1", "--out", "w.nwm"])["error"],
        "non_convergent"
    );

    ok(d, &["gen-model", "--arch", "plain_cnn", "--out", "p.nwm"]);
    assert_eq!(failure(d, &["extract", "--model", "p.nwm", "--key", "k.json"])["error"], "carrier_out_of_range");
    ok(d, &["gen-model", "--arch", "tanh_rnn", "--seed", "9", "--out", "m9.nwm"]);
    let e = failure(d, &["equiv", "m.nwm", "m9.nwm", "--inputs", "2"]);
    assert_eq!(e["error"], "not_equivalent");
    assert_eq!(e["report"]["passed"], false);
}

#[test]
fn bench_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.toml"),
        r#"
seeds = 2
alphas = [0.5, 1.0]
transforms = ["ns", "sf"]
cells = [{ scheme = "lottery_mask", arch = "resnet_mini" }]
"#,
    )
    .unwrap();
    let a = ok(d, &["bench", "--config", "cfg.toml", "--format", "csv"]);
    let b = ok(d, &["bench", "--config", "cfg.toml", "--format", "csv"]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("scheme,arch,alpha,ber_without,ber_ns,"));
    // The mask survives scaling and flips untouched.
    assert!(lines[1].starts_with("lottery_mask,resnet_mini,0.500000,0.000000,0.000000,"), "{}", lines[1]);

    std::fs::write(d.join("bad.toml"), "seeds = 0").unwrap();
    assert_eq!(failure(d, &["bench", "--config", "bad.toml"])["error"], "config");
}

#[test]
fn default_bench_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["bench", "--format", "json"]);
    let report: Value = serde_json::from_str(&out).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    for r in rows {
        assert!(r["error"].is_null(), "{r}");
        assert_eq!(r["ber_without"], 0.0, "{}", r["scheme"]);
        assert_eq!(r["equivalent"], true);
        let cols = r["columns"].as_array().unwrap();
        assert_eq!(cols.len(), 4);
        let unified = cols.iter().find(|c| c["transforms"] == "unified").unwrap();
        let mean = unified["mean"].as_f64().unwrap();
        assert!((0.35..=0.65).contains(&mean), "{}: {mean}", r["scheme"]);
    }
}
