use stpl::data::{generate_dataset, read_dataset, render_digit_pool, DigitPool, MovingSpec};
use stpl::loss::LossConfig;
use stpl::model::{ModelConfig, TauModel};
use stpl::train::{evaluate, split_indices, Checkpoint, TrainConfig, Trainer};

#[test]
fn file_to_checkpoint_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MovingSpec {
        num_digits: 1,
        canvas: 16,
        digit_size: 8,
        seq_len: 6,
        seed: 2,
        ..MovingSpec::default()
    };
    let pool = DigitPool::new(8, render_digit_pool(10, 8, 0)).unwrap();
    let path = dir.path().join("train.stpl");
    let header = generate_dataset(&spec, &pool, 12, &path).unwrap();
    assert_eq!(header.shape, [12, 6, 1, 16, 16]);
    let data = read_dataset(&path).unwrap();

    let model = TauModel::new(ModelConfig {
        frames_in: 3,
        frames_out: 3,
        hidden_spatial: 4,
        hidden_temporal: 4,
        num_tau_blocks: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&model, cfg.clone(), LossConfig::default()).unwrap();
    let records = trainer.run(&data, Some(dir.path())).unwrap();
    assert_eq!(records.len(), 2);

    let best = Checkpoint::load(dir.path().join("checkpoints/best.ckpt")).unwrap();
    let val = split_indices(data.len(), cfg.val_fraction, cfg.seed).unwrap().val;
    let report = evaluate(&model, &best.params, &data, &val, 4, 3).unwrap();
    let best_logged = records.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(report.mean.mse, best_logged);
    assert_eq!(best.best_val_mse, best_logged);
}
