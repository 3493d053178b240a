use std::path::Path;
use std::process::{Command, Output};

fn tad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tad"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn simulated_campaign_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&tad(d, &["init", "--config", "c.json"])), 0);
    let capped = tad(
        d,
        &[
            "run",
            "--config",
            "c.json",
            "--state",
            "capped.json",
            "--max-iters",
            "1",
        ],
    );
    assert_eq!(
        code(&capped),
        11,
        "{}",
        String::from_utf8_lossy(&capped.stderr)
    );

    let run = tad(
        d,
        &[
            "run", "--config", "c.json", "--state", "s.json", "--out", "csv",
        ],
    );
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("Success"));
    assert!(d.join("csv/iterations.csv").exists() && d.join("csv/samples.csv").exists());

    let status = tad(d, &["status", "--state", "s.json"]);
    assert_eq!(code(&status), 0);
    let snap: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(snap["outcome"], "success");
    assert_eq!(
        code(&tad(d, &["export", "--state", "s.json", "--out", "again"])),
        0
    );

    assert_eq!(code(&tad(d, &["step", "--state", "s.json"])), 64);
    assert_eq!(
        code(&tad(d, &["run", "--config", "c.json", "--state", "s.json"])),
        64
    );
}

#[test]
fn interactive_round_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&tad(d, &["init", "--config", "c.json", "--seed", "3"])),
        0
    );
    let mut cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("c.json")).unwrap()).unwrap();
    cfg["oracle"] = "interactive".into();
    std::fs::write(d.join("i.json"), cfg.to_string()).unwrap();

    let out = tad(d, &["propose", "--config", "i.json", "--state", "s.json"]);
    assert_eq!(code(&out), 0);
    let rows = String::from_utf8(out.stdout).unwrap();
    assert_eq!(rows.lines().count(), 3);
    std::fs::write(d.join("short.csv"), "0.1,0.2\n").unwrap();
    assert_eq!(
        code(&tad(d, &["ingest", "--state", "s.json", "short.csv"])),
        64
    );
    std::fs::write(d.join("obs.csv"), "0.1,0.2\n0.3,0.4\n0.5,0.6\n").unwrap();
    assert_eq!(
        code(&tad(d, &["ingest", "--state", "s.json", "obs.csv"])),
        0
    );
    assert_eq!(
        code(&tad(d, &["ingest", "--state", "s.json", "obs.csv"])),
        64
    );
    let step = tad(d, &["step", "--state", "s.json"]);
    assert_eq!(code(&step), 0);
    assert_eq!(String::from_utf8(step.stdout).unwrap().lines().count(), 3);
}

#[test]
fn bad_inputs_map_to_stable_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&tad(d, &["frobnicate"])), 64);
    assert_eq!(code(&tad(d, &["status", "--state", "missing.json"])), 64);
    assert_eq!(code(&tad(d, &["run", "--config", "missing.json"])), 66);
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(code(&tad(d, &["run", "--config", "bad.json"])), 65);

    assert_eq!(code(&tad(d, &["init", "--config", "c.json"])), 0);
    assert_eq!(
        code(&tad(
            d,
            &["step", "--config", "c.json", "--state", "s.json"]
        )),
        0
    );
    let text = std::fs::read_to_string(d.join("s.json")).unwrap();
    std::fs::write(
        d.join("s.json"),
        text.replacen("\"format_version\": 1", "\"format_version\": 999", 1),
    )
    .unwrap();
    assert_eq!(code(&tad(d, &["status", "--state", "s.json"])), 65);

    let mut cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("c.json")).unwrap()).unwrap();
    cfg["problem"]["tolerance"] = serde_json::json!([-1.0, 0.01]);
    std::fs::write(d.join("neg.json"), cfg.to_string()).unwrap();
    let neg = tad(d, &["run", "--config", "neg.json"]);
    assert!(code(&neg) >= 64, "{}", code(&neg));
}
