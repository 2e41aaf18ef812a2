mod common;

use std::process::Command;

use common::{write, TINY};

fn weidetect() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_weidetect"));
    cmd.env("WEIDETECT_WORKERS", "1");
    cmd
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", TINY);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let status = weidetect()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        for f in ["rounds.csv", "manifest.json", "summary.json", "partition.json"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        bytes.push(std::fs::read(out.join("rounds.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", TINY);
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let st = weidetect()
            .args(["run", "--seed-override", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read_to_string(out.join("partition.json")).unwrap()
    };
    assert_ne!(run("s1", "1"), run("s2", "2"));
}

#[test]
fn invalid_config_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = TINY.replace("lr = 0.05", "lr = -1.0").replace("eta = 1.0", "eta = 0.0");
    let cfg = write(tmp.path(), "bad.toml", &bad);
    let out = weidetect()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("training.lr"), "{err}");
    assert!(err.contains("data.eta"), "{err}");
    assert!(!tmp.path().join("o").join("rounds.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &TINY.replace("[training]", "[training]\nlearnig_rate = 1"));
    let out = weidetect()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));
}

#[test]
fn sweep_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", TINY);
    let grid = write(
        tmp.path(),
        "grid.toml",
        "poison_ratio = [0.1, 0.5]\ndefense_kind = [\"fedavg\", \"median\"]\n",
    );
    let out = tmp.path().join("sweep");
    let st = weidetect()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let sweep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep.as_array().unwrap().len(), 4);
    let table = std::fs::read_to_string(out.join("table_f1.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "attack,targets,aux_volume,poison_ratio,fedavg,median");
    assert_eq!(table.lines().count(), 3);

    let rep = weidetect().arg("report").arg("--out").arg(&out).output().unwrap();
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    let stdout = String::from_utf8_lossy(&rep.stdout);
    assert!(stdout.contains("cell-003"), "{stdout}");
    let long = std::fs::read_to_string(out.join("long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 4 * 3);
}

#[test]
fn sweep_rejects_invalid_cells_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", TINY);
    let grid = write(tmp.path(), "grid.toml", "target_labels = [[1], [7]]\n");
    let out = tmp.path().join("sweep");
    let st = weidetect()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("cell-001"));
    assert!(!out.join("cell-000_t1").exists());
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let st = weidetect().arg("report").arg("--out").arg(tmp.path()).output().unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("no completed runs"));
}

#[test]
fn report_on_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", TINY);
    let out = tmp.path().join("run");
    let st = weidetect().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let rep = weidetect().arg("report").arg("--out").arg(&out).output().unwrap();
    assert!(rep.status.success());
    let stdout = String::from_utf8_lossy(&rep.stdout);
    let data_rows = stdout.lines().filter(|l| l.starts_with("run ")).count();
    assert_eq!(data_rows, 1, "{stdout}");
    let long = std::fs::read_to_string(out.join("long.csv")).unwrap();
    assert_eq!(long.lines().count(), 4);
}
