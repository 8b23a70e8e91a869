use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_switchleak"))
}

#[test]
fn missing_data_dir_fails_without_writing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["full", "--data-dir"])
        .arg(dir.path().join("nowhere"))
        .arg("--out-dir")
        .arg(&out)
        .env_remove("SWITCHLEAK_DATA_DIR")
        .output()
        .unwrap();
    assert!(!status.status.success());
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("train-images-idx3-ubyte"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn help_lists_every_stage() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train-oracle", "extract", "attack", "full", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "subset_sizez = 10\n").unwrap();
    let out = bin()
        .args(["report", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("subset_sizez"));
}
