// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::Command;

fn run_with(config: &str, sub: &str) -> (Option<i32>, String) {
    let dir = std::env::temp_dir().join(format!("editleak-cli-{}-{sub}-{}", std::process::id(), config.len()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("exp.toml");
    std::fs::write(&path, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_editleak"))
        .args([sub, "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    (out.status.code(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn config_errors_exit_two() {
    let (code, err) = run_with("method = \"rome\"\nn_edits = 2\n", "run");
    assert_eq!(code, Some(2), "{err}");
    assert!(err.contains("line 2"), "{err}");
    let (code, err) = run_with("trials = 1\nbogus = 3\n", "run");
    assert_eq!(code, Some(2), "{err}");
}

#[test]
fn small_run_succeeds() {
    let cfg = "n_edits = 2\n[world]\nd_in = 16\nd_out = 12\nvocab = 32\nn_subjects = 32\nn_templates = 2\nn_preserved = 8\n";
    let (code, err) = run_with(cfg, "run");
    assert_eq!(code, Some(0), "{err}");
}
