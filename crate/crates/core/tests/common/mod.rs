#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ocreid::train::TrainConfig;

pub fn ocreid() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ocreid"))
}

pub fn occforge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_occforge"))
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "{cmd:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Clean synthetic data under `dir/clean` and its occluded copy under
/// `dir/occ`, both made through the command-line tools.
pub fn smoke_data(dir: &Path, ids: usize, clothes: usize, images: usize) -> PathBuf {
    let clean = dir.join("clean");
    let occ = dir.join("occ");
    run_ok(ocreid().args(["synth-data", "--ids", &ids.to_string(), "--clothes", &clothes.to_string()])
        .args(["--images", &images.to_string(), "--seed", "1", "--out"])
        .arg(&clean));
    run_ok(occforge().arg("--src").arg(&clean).arg("--dst").arg(&occ).args(["--seed", "42"]));
    occ
}

/// The repository's toy config pointed at `data`, writing runs under `runs`.
pub fn toy_config(data: &Path, runs: &Path) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let mut cfg = TrainConfig::from_json_file(&path).expect("configs/toy.json");
    cfg.dataset_root = data.to_path_buf();
    cfg.output_dir = runs.to_path_buf();
    cfg
}

pub fn write_config(cfg: &TrainConfig, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}
