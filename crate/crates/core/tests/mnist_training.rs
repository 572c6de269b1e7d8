use std::path::PathBuf;

use mhvae_core::data::{load_idx_pool, normalize_and_split};
use mhvae_core::model::ModelConfig;
use mhvae_core::objective::WarmupSchedule;
use mhvae_core::trainer::{fit, FitOptions, TrainConfig};

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn one_thousand_records_twenty_epochs() {
    let (images, labels) = load_idx_pool(&mnist_dir()).unwrap();
    assert_eq!(images.len(), 70_000);
    let ds = normalize_and_split(&images, &labels, 10, Some(1000), 7).unwrap();
    assert_eq!(
        (ds.split.train.len(), ds.split.val.len(), ds.split.test.len()),
        (765, 85, 150)
    );
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        epochs: 20,
        seed: 7,
        warmup: WarmupSchedule {
            modality_epochs: 4,
            core_epochs: 8,
        },
        checkpoint_every: 0,
        dataset: "mnist".into(),
        model: ModelConfig::mnist(),
    };
    let t = std::time::Instant::now();
    let out = fit(&cfg, &ds.data, &ds.split, FitOptions::default()).unwrap();
    eprintln!("20 epochs in {:?}", t.elapsed());
    let val: Vec<f64> = out
        .history
        .iter()
        .map(|m| m.val.as_ref().unwrap().weighted_total)
        .collect();
    eprintln!("{val:?}");
    assert!(val[19] < val[0], "{val:?}");
}
