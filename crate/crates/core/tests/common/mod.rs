#![allow(dead_code)]

use std::path::PathBuf;

use cimsim::adcmodel::AdcKind;
use cimsim::attack::{AttackConfig, Norm};
use cimsim::harness::{ChipSpec, DatasetConfig, DatasetKind, ExperimentConfig, FinetuneSettings, SampleCounts};
use cimsim::nnquant::TrainConfig;

/// MNIST IDX directory: `$MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    assert!(
        dir.join("t10k-images-idx3-ubyte").exists(),
        "MNIST IDX files not found in {}; set MNIST_DIR",
        dir.display()
    );
    dir
}

pub fn chip(config: &str, adc_kind: AdcKind, wl_param: f64, seed: u64) -> ChipSpec {
    ChipSpec {
        config: config.into(),
        adc_kind,
        wl_param,
        seed,
    }
}

/// A protocol small enough to run in seconds: 3000 training images, one
/// chip pair, ten attacked images with a short L2 search.
pub fn tiny_config(out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            kind: DatasetKind::Mnist,
            dir: mnist_dir(),
        },
        train: TrainConfig {
            warmup_epochs: 1,
            epochs: 1,
            max_train_samples: Some(3000),
            calibration_samples: 300,
            ..TrainConfig::default()
        },
        chips: vec![chip("A", AdcKind::Sar, 1.0, 11), chip("A", AdcKind::Sar, 1.0, 12)],
        finetune: FinetuneSettings {
            max_train_samples: Some(1000),
            eval_interval: 2,
            ..FinetuneSettings::default()
        },
        attacks: vec![AttackConfig {
            binary_search_steps: 2,
            max_iterations: 30,
            step_size: 0.05,
            initial_c: 1.0,
            ..AttackConfig::with_norm(Norm::L2)
        }],
        samples: SampleCounts {
            eval: 300,
            curve: 100,
            attack: 10,
            attack_offset: 0,
            quick_eval: 100,
            quick_attack: 5,
        },
        out_dir: out,
        ..ExperimentConfig::default()
    }
}
