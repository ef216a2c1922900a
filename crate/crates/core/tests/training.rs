use eened::checkpoint::encode;
use eened::data::toy::toy_dataset;
use eened::data::{Dataset, SplitPlan, SplitTag};
use eened::train::{evaluate, train, TrainConfig, Trainer};
use eened::{EenedModel, Execution, ModelConfig};

fn toy_split(rows: usize, t_in: usize, seed: u64) -> Dataset {
    let mut ds = toy_dataset(rows, t_in, seed).unwrap();
    let pos = ds.positives();
    ds.split(SplitPlan::proportional(pos, rows - pos, 0.25), seed).unwrap();
    ds
}

/// Two well separated waveform classes: flat vs. one tall spike.
fn separable(rows: usize, t_in: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..rows {
        let label = (i % 2) as u8;
        let row: Vec<f64> = (0..t_in)
            .map(|t| {
                let base = ((i * 7 + t * 3) % 5) as f64 * 0.05;
                if label == 1 && t == (i % t_in) {
                    base + 3.0
                } else {
                    base
                }
            })
            .collect();
        x.push(row);
        y.push(label);
    }
    (x, y)
}

#[test]
fn loss_decreases_across_one_epoch_on_separable_data() {
    let t_in = 8;
    let (x, y) = separable(32, t_in);
    let model = EenedModel::init(ModelConfig::toy(t_in)).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let full_loss = |m: &EenedModel| -> f64 {
        x.iter().zip(&y).map(|(r, &l)| m.loss(r, l as f64).unwrap()).sum::<f64>() / x.len() as f64
    };
    let mut prev = full_loss(&trainer.model);
    for start in (0..32).step_by(4) {
        let rows: Vec<&[f64]> = x[start..start + 4].iter().map(Vec::as_slice).collect();
        let ids: Vec<usize> = (start..start + 4).collect();
        trainer.step(&rows, &y[start..start + 4], &ids).unwrap();
        let now = full_loss(&trainer.model);
        assert!(now < prev, "loss went from {prev} to {now} after batch at {start}");
        prev = now;
    }
}

#[test]
fn sixteen_row_subset_overfits() {
    let ds = toy_split(64, 16, 9);
    let train_rows: Vec<usize> = ds.indices(SplitTag::Train)[..16].to_vec();
    let mut small = ds.subset(&train_rows).unwrap();
    let pos = small.positives();
    small.split(SplitPlan::proportional(pos, 16 - pos, 0.0), 0).unwrap();
    assert_eq!(small.indices(SplitTag::Train).len(), 16);

    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 16,
        lr: 1e-3,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let out = train(EenedModel::init(ModelConfig::toy(16)).unwrap(), &small, &cfg).unwrap();
    let m = evaluate(&out.model, &small, SplitTag::Train, 0.5).unwrap();
    assert_eq!(m.accuracy, 1.0, "{m:?}");
}

#[test]
fn training_is_bitwise_reproducible_across_policies() {
    let ds = toy_split(48, 16, 4);
    let base = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        seed: 21,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig {
        dropout_p: 0.1,
        ..ModelConfig::toy(16)
    };
    let run = |execution| {
        let cfg = TrainConfig {
            execution,
            ..base.clone()
        };
        let out = train(EenedModel::init(mcfg.clone()).unwrap(), &ds, &cfg).unwrap();
        (encode(&out.model), out.log)
    };
    let (a, log_a) = run(Execution::Sequential);
    let (b, log_b) = run(Execution::Sequential);
    let (c, log_c) = run(Execution::Parallel);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a, log_c);
}

#[test]
fn best_epoch_metrics_match_reevaluation() {
    let ds = toy_split(64, 16, 2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let out = train(EenedModel::init(ModelConfig::toy(16)).unwrap(), &ds, &cfg).unwrap();
    assert_eq!(out.log.len(), 3);
    let again = evaluate(&out.model, &ds, SplitTag::Test, 0.5).unwrap();
    assert_eq!(again, out.best.metrics);
    assert!(out.log.iter().all(|e| e.metrics.accuracy <= out.best.metrics.accuracy));
    let line = out.log[0].to_string();
    let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["epoch", "loss", "acc", "f1_pos", "f1_neg"]);
}
