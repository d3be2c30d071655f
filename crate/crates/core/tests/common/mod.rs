// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::sync::OnceLock;

use cloom_core::transcoder::{load_bank, save_bank, train_bank, TcTrainConfig, TranscoderBank};
use cloom_core::vlm::data::make_splits;
use cloom_core::vlm::{load_checkpoint, save_checkpoint, train_model, ModelCheckpoint, ModelConfig, SyntheticSample, Task, TrainConfig};

/// A briefly trained model and bank plus the data they saw.
pub struct Fixture {
    pub ck: ModelCheckpoint,
    pub bank: TranscoderBank,
    pub train: Vec<SyntheticSample>,
    pub heldout: Vec<SyntheticSample>,
}

const TAG: &str = "fixture-v1";

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(TAG)
}

fn build() -> Fixture {
    let (train, heldout) = make_splits(&Task::ALL, 400, 40, (12, 12), 21).unwrap();
    let dir = cache_dir();
    let (mp, bp) = (dir.join("m.clm1"), dir.join("b.clm1"));
    if let (Ok(ck), Ok(bank)) = (load_checkpoint(&mp), load_bank(&bp)) {
        if bank.check_matches(&ck.model).is_ok() {
            return Fixture { ck, bank, train, heldout };
        }
    }
    let ck = train_model(
        ModelConfig::default(),
        &train,
        &heldout,
        &TrainConfig {
            steps: 120,
            batch_size: 16,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let bank = train_bank(
        &ck,
        &train,
        &heldout,
        &TcTrainConfig {
            steps: 60,
            max_samples: 200,
            ..TcTrainConfig::default()
        },
    )
    .unwrap();
    std::fs::create_dir_all(&dir).unwrap();
    let tmp = tempfile::tempdir_in(&dir).unwrap();
    save_checkpoint(&ck, &tmp.path().join("m.clm1")).unwrap();
    save_bank(&bank, &tmp.path().join("b.clm1")).unwrap();
    std::fs::rename(tmp.path().join("m.clm1"), &mp).unwrap();
    std::fs::rename(tmp.path().join("b.clm1"), &bp).unwrap();
    Fixture { ck, bank, train, heldout }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(build)
}
