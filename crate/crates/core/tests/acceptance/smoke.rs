//! The fixed-seed training run shared by the post-training criteria. The
//! run lives under the cargo target directory keyed by a hash of its
//! configuration, so repeated test runs reuse it. An interrupted run resumes
//! from its last checkpoint; `LAYERGAN_SMOKE_RETRAIN=1` starts over.

use std::path::{Path, PathBuf};

use layergan::checkpoint::{load_checkpoint, read_checkpoint_manifest};
use layergan::manifest::{generate_dataset, read_dataset, DatasetManifest, MANIFEST_FILE};
use layergan::nets::Model;
use layergan::scene::SceneConfig;
use layergan::train::{train, TrainConfig, CHECKPOINT_DIR, LOSS_LOG};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Bumped whenever training code changes in a way that invalidates old runs.
const RUN_VERSION: u32 = 2;

pub const N_TRAIN: usize = 2000;
pub const N_TEST: usize = 200;
const TRAIN_SEED: u64 = 11;
const TEST_SEED: u64 = 12;

#[derive(Serialize)]
struct SmokeKey<'a> {
    version: u32,
    scene: &'a SceneConfig,
    train: &'a TrainConfig,
    n_train: usize,
    n_test: usize,
    train_seed: u64,
    test_seed: u64,
}

pub fn scene_config() -> SceneConfig {
    SceneConfig::desk(4)
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        checkpoint_every: 1,
        ..TrainConfig::default()
    }
}

pub struct SmokeRun {
    pub dir: PathBuf,
    pub data: DatasetManifest,
    pub model: Model<f32>,
}

impl SmokeRun {
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("run").join(LOSS_LOG)
    }

    pub fn test_split(&self) -> DatasetManifest {
        self.data.split("test")
    }
}

fn run_dir(scene: &SceneConfig, train: &TrainConfig) -> PathBuf {
    let key = SmokeKey {
        version: RUN_VERSION,
        scene,
        train,
        n_train: N_TRAIN,
        n_test: N_TEST,
        train_seed: TRAIN_SEED,
        test_seed: TEST_SEED,
    };
    let digest = Sha256::digest(serde_json::to_vec(&key).expect("serializable key"));
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("smoke-{hex}"))
}

fn dataset_complete(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file()
        && read_dataset(dir)
            .is_ok_and(|m| m.split("train").len() == N_TRAIN && m.split("test").len() == N_TEST && m.validate().is_ok())
}

fn run_complete(run: &Path, cfg: &TrainConfig) -> bool {
    read_checkpoint_manifest(&run.join(CHECKPOINT_DIR)).is_ok_and(|m| m.epoch == cfg.total_epochs())
}

/// Returns the finished smoke run, generating and training it first if
/// needed.
pub fn smoke_run() -> Result<SmokeRun, String> {
    let scene = scene_config();
    let cfg = train_config();
    let dir = run_dir(&scene, &cfg);
    if std::env::var("LAYERGAN_SMOKE_RETRAIN").is_ok_and(|v| v == "1") && dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    }
    let data_dir = dir.join("data");
    if !dataset_complete(&data_dir) {
        eprintln!("generating smoke dataset in {}", data_dir.display());
        generate_dataset(&scene, N_TRAIN, TRAIN_SEED, &data_dir, "train").map_err(|e| e.to_string())?;
        generate_dataset(&scene, N_TEST, TEST_SEED, &data_dir, "test").map_err(|e| e.to_string())?;
    }
    let data = read_dataset(&data_dir).map_err(|e| e.to_string())?;
    let run = dir.join("run");
    if !run_complete(&run, &cfg) {
        eprintln!(
            "training smoke model in {} ({} epochs; this takes hours on one core)",
            run.display(),
            cfg.total_epochs()
        );
        train(&cfg, &data, &run).map_err(|e| e.to_string())?;
    }
    let mut model = load_checkpoint(&run.join(CHECKPOINT_DIR))
        .map_err(|e| e.to_string())?
        .model;
    model.freeze();
    Ok(SmokeRun { dir, data, model })
}
