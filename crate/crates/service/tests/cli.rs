use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/golden")
        .join(name)
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Fresh data dir with the golden script plus a reasoning-sample rule.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut script: Value = serde_json::from_str(&fs::read_to_string(golden("mock.json")).unwrap()).unwrap();
        let finals = [
            "9 pairs of pants bought within 3 days across 4 sizes, suggesting resale rather than personal use",
            "The delivery address of Order A matches the merchant's registered address, indicating possible self-transaction fraud",
            "Buyer u_88231 and merchant_m5521 share one address, matching the self-transaction pattern",
        ];
        let body: String = finals.iter().map(|t| format!("- {t}\n")).collect();
        script["rules"].as_array_mut().unwrap().push(json!({
            "template": "suspect_then_rule_out",
            "key": "golden-001",
            "text": format!("Hoarding looked likely until the promotion rules were checked.\n---\n{body}"),
        }));
        fs::write(dir.path().join("mock.json"), script.to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskscope"));
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RISKSCOPE_")) {
            cmd.env_remove(k);
        }
        cmd.env("RISKSCOPE_KB_PATH", self.path("kb"))
            .env("RISKSCOPE_CASE_STORE_PATH", self.path("store"))
            .env("RISKSCOPE_MOCK_SCRIPT", self.path("mock.json"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} should fail");
        let line = String::from_utf8(out.stderr).unwrap();
        serde_json::from_str(line.lines().last().unwrap())
            .unwrap_or_else(|_| panic!("stderr is not a JSON error: {line}"))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn investigate_review_annotate_export_across_processes() {
    let ws = Workspace::new();
    let built: Value = serde_json::from_str(&ws.ok(&["build-kb", "--candidates", s(&golden("kb.jsonl"))])).unwrap();
    assert_eq!(built["committed"], 5);

    let report: Value = serde_json::from_str(&ws.ok(&["investigate", "--case", s(&golden("case.json"))])).unwrap();
    assert_eq!(report["report_id"], "golden-001.r1");
    // a second investigate of the stored case by id gives the next revision
    let again: Value = serde_json::from_str(&ws.ok(&["investigate", "--case", "golden-001"])).unwrap();
    assert_eq!(again["report_id"], "golden-001.r2");
    assert_eq!(again["final_claims"], report["final_claims"]);

    let out: Value =
        serde_json::from_str(&ws.ok(&["review", "--report", "golden-001.r2", "--decision", "rejected"])).unwrap();
    assert_eq!(out["outcome"], "queued_for_annotation");

    let claim = |id: &str, text: &str, origin: &str| json!({ "claim_id": id, "text": text, "origin": origin });
    let draft: Vec<String> = report["fact_verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["claim"].as_str().unwrap().to_string())
        .collect();
    let record = json!({
        "case_id": "golden-001",
        "accepted_risks": [
            claim("c1", &draft[0], "model_initial"),
            claim("c2", &draft[1], "model_initial"),
            claim("r1", report["final_claims"][2]["text"].as_str().unwrap(), "rnr_added"),
        ],
        "rejected_risks": [claim("c3", &draft[2], "model_initial"), claim("c4", &draft[3], "model_initial")],
    });
    fs::write(ws.path("record.json"), record.to_string()).unwrap();
    let stored: Value = serde_json::from_str(&ws.ok(&[
        "annotate",
        "--record",
        s(&ws.path("record.json")),
        "--actor",
        "expert_lin",
    ]))
    .unwrap();
    assert_eq!(stored["annotator_id"], "expert_lin");

    let cot: Value = serde_json::from_str(&ws.ok(&["cot", "--case", "golden-001"])).unwrap();
    assert_eq!(cot["valid"], true);
    assert_eq!(ws.ok(&["export-dataset", "--kind", "sft"]).trim(), "1");
    assert_eq!(
        ws.ok(&["export-dataset", "--kind", "dpo", "--out", s(&ws.path("dpo.jsonl"))])
            .trim(),
        "1"
    );
    assert!(ws.path("store/exports/sft.jsonl").is_file());
    let dpo: Value = serde_json::from_str(fs::read_to_string(ws.path("dpo.jsonl")).unwrap().trim()).unwrap();
    assert!(dpo["rejected"].as_str().unwrap().contains("Treasure Island"));
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let ws = Workspace::new();
    let e = ws.fails(&["investigate", "--case", "missing-case"]);
    assert_eq!(e["error"], "CaseNotFound");
    let e = ws.fails(&["review", "--report", "x.r1", "--decision", "accepted"]);
    assert!(e["message"].is_string());
    let e = ws.fails(&["build-kb", "--candidates", s(&ws.path("nope.jsonl"))]);
    assert_eq!(e["error"], "IoError");

    fs::write(ws.path("bad.toml"), "alpha = 3.0\n").unwrap();
    let e = ws.fails(&["--config", s(&ws.path("bad.toml")), "export-dataset", "--kind", "sft"]);
    assert_eq!(e["error"], "ConfigError");
    let e = ws.fails(&["mint-token", "--role", "expert", "--as", "ana"]);
    assert!(e["message"].as_str().unwrap().contains("RISKSCOPE_AUTH_SECRET"));
}

#[test]
fn minted_token_verifies() {
    let out = Command::new(env!("CARGO_BIN_EXE_riskscope"))
        .env("RISKSCOPE_AUTH_SECRET", "shh")
        .args(["mint-token", "--role", "viewer", "--as", "vic"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let token = String::from_utf8(out.stdout).unwrap();
    let actor = riskscope::auth::verify(b"shh", token.trim()).unwrap();
    assert_eq!(actor, riskscope_core::rnr::Actor::viewer("vic"));
}
