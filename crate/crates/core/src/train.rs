//! Mini-batch BCE training with Adam, and evaluation.
//!
//! Per-sample gradients are computed independently (optionally in
//! parallel) and summed in batch order, so a run is bitwise reproducible
//! from `(seed, config, data)` under either execution policy.

use std::fmt;

use crate::autodiff::Var;
use crate::data::{Dataset, NormStats, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::EenedModel;
use crate::parallel::{worker_count, Execution};
use crate::params::{round_f32, GradBuffer, ParamStore};
use crate::rng::{tag, Rng, SeedTree};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Linear learning-rate ramp over the first `warmup_steps` updates.
    pub warmup_steps: usize,
    pub threshold: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            eval_every: 1,
            warmup_steps: 0,
            threshold: 0.5,
            execution: Execution::default(),
        }
    }
}

const TRAIN_KEYS: [&str; 12] = [
    "epochs",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "seed",
    "eval_every",
    "warmup_steps",
    "threshold",
    "execution",
];

impl TrainConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        // lr = 0 is allowed and freezes the parameters.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            bad.push(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.eval_every == 0 {
            bad.push("eval_every must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bad.push(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn is_key(key: &str) -> bool {
        TRAIN_KEYS.contains(&key)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "threshold" => format!("{:?}", self.threshold),
            "execution" => self.execution.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "execution" => self.execution = value.parse().map_err(Error::Config)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Learning rate for the 1-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps as u64 {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Mean binary cross-entropy of predicted probabilities against labels.
pub fn bce_loss<'t>(p: Var<'t>, y: &[f64]) -> Result<Var<'t>> {
    p.bce(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParamStore, grads: &GradBuffer, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters but {} gradient slots and {} moment slots",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let n = store.get(id).len();
        if grads.get(id).len() != n || state.m[id.index()].len() != n {
            return Err(Error::Contract(format!(
                "adam_step: gradient for `{}` missing or mis-sized",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.lr_at(state.step);
    for id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Metrics of one evaluation pass, tagged with the epoch it followed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    pub metrics: Metrics,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} acc={:.6} f1_pos={:.6} f1_neg={:.6}",
            self.epoch, self.loss, self.metrics.accuracy, self.metrics.f1_positive, self.metrics.f1_negative
        )
    }
}

pub struct TrainOutcome {
    /// Parameters from the evaluation with the highest accuracy.
    pub model: EenedModel,
    pub best: EpochLog,
    pub log: Vec<EpochLog>,
}

/// Stateful optimizer loop over one model.
pub struct Trainer {
    pub model: EenedModel,
    pub adam: AdamState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: EenedModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer { model, adam, cfg })
    }

    /// Gradient step on the given (already standardized) rows; returns the
    /// mean loss before the update.
    pub fn step(&mut self, rows: &[&[f64]], labels: &[u8], sample_ids: &[usize]) -> Result<f64> {
        let n = rows.len();
        if n == 0 || labels.len() != n || sample_ids.len() != n {
            return Err(Error::Contract("step needs one label and id per row".into()));
        }
        let step = self.adam.step + 1;
        let dropout_root = SeedTree::new(self.cfg.seed).path(&[tag::DROPOUT, step]);
        let model = &self.model;
        let mut acc = GradBuffer::zeros_like(&model.store);
        let mut loss_sum = 0.0;
        let scale = 1.0 / n as f64;
        // Chunking bounds peak memory to a few full gradient buffers.
        let chunk = worker_count().max(1);
        for start in (0..n).step_by(chunk) {
            let len = chunk.min(n - start);
            let results = self.cfg.execution.map(len, |j| {
                let i = start + j;
                let rng = dropout_root.child(sample_ids[i] as u64).rng();
                model.loss_and_grads(rows[i], labels[i] as f64, true, rng)
            });
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                acc.add_scaled(&g, scale);
            }
        }
        adam_step(&mut self.model.store, &acc, &mut self.adam, &self.cfg)?;
        // Parameters stay exactly representable in the f32 checkpoint.
        let ids: Vec<_> = self.model.store.ids().collect();
        for id in ids {
            for v in self.model.store.get_mut(id).data_mut() {
                *v = round_f32(*v);
            }
        }
        Ok(loss_sum * scale)
    }
}

/// Global mean/std of the train rows of a raw (unnormalized) dataset.
fn train_stats(ds: &Dataset) -> Result<NormStats> {
    if let Some(stats) = ds.norm_stats() {
        return Ok(stats);
    }
    let mut copy = ds.clone();
    copy.normalize()
}

/// Rows standardized with the model's stored statistics, whatever state
/// the dataset is in.
fn standardized_row(model: &EenedModel, ds: &Dataset, i: usize) -> Vec<f64> {
    match ds.norm_stats() {
        None => model.normalize_input(ds.row(i)),
        Some(s) if s.mean == model.config.input_mean && s.std == model.config.input_std => ds.row(i).to_vec(),
        Some(s) => {
            let raw: Vec<f64> = ds.row(i).iter().map(|v| v * s.std + s.mean).collect();
            model.normalize_input(&raw)
        }
    }
}

/// Eval-mode probabilities for every row of `tag`, in ascending row order.
pub fn predict_split(model: &EenedModel, ds: &Dataset, tag: SplitTag, execution: Execution) -> Result<(Vec<usize>, Vec<f64>)> {
    let rows = ds.indices(tag);
    if rows.is_empty() {
        return Err(Error::Data(format!("split {tag:?} is empty")));
    }
    if ds.t_in() != model.config.t_in {
        return Err(Error::Data(format!(
            "dataset rows have {} samples, model expects {}",
            ds.t_in(),
            model.config.t_in
        )));
    }
    let probs = execution
        .map(rows.len(), |j| model.predict(&standardized_row(model, ds, rows[j])))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, probs))
}

pub fn evaluate(model: &EenedModel, ds: &Dataset, tag: SplitTag, threshold: f64) -> Result<Metrics> {
    evaluate_with(model, ds, tag, threshold, Execution::default())
}

pub fn evaluate_with(model: &EenedModel, ds: &Dataset, tag: SplitTag, threshold: f64, execution: Execution) -> Result<Metrics> {
    let (rows, probs) = predict_split(model, ds, tag, execution)?;
    let labels: Vec<u8> = rows.iter().map(|&i| ds.label(i)).collect();
    Ok(Metrics::from_probabilities(&probs, &labels, threshold))
}

/// Split evaluated during training: test when present, otherwise train.
pub fn eval_split(ds: &Dataset) -> SplitTag {
    if ds.indices(SplitTag::Test).is_empty() {
        SplitTag::Train
    } else {
        SplitTag::Test
    }
}

pub fn train(model: EenedModel, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, ds, cfg, |_| {})
}

/// Trains for `cfg.epochs` epochs, calling `on_eval` after every
/// evaluation. The input statistics of the train split are written into
/// the model config first.
pub fn train_with(
    mut model: EenedModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.indices(SplitTag::Train).is_empty() {
        return Err(Error::Data("training needs an assigned train split".into()));
    }
    if ds.t_in() != model.config.t_in {
        return Err(Error::Data(format!(
            "dataset rows have {} samples, model t_in is {}",
            ds.t_in(),
            model.config.t_in
        )));
    }
    let stats = train_stats(ds)?;
    model.config.input_mean = stats.mean;
    model.config.input_std = stats.std;
    let eval_tag = eval_split(ds);

    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut log = Vec::new();
    let mut best: Option<(EpochLog, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let shuffle_seed = SeedTree::new(cfg.seed).path(&[tag::SHUFFLE, epoch as u64]).rng().gen();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in ds.batches(SplitTag::Train, cfg.batch_size, Some(shuffle_seed))? {
            let rows: Vec<Vec<f64>> = batch
                .indices
                .iter()
                .map(|&i| standardized_row(&trainer.model, ds, i))
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let loss = trainer.step(&refs, &batch.y, &batch.indices)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("training loss became {loss} at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let metrics = evaluate_with(&trainer.model, ds, eval_tag, cfg.threshold, cfg.execution)?;
            let entry = EpochLog {
                epoch,
                loss: loss_sum / seen as f64,
                metrics,
            };
            on_eval(&entry);
            log.push(entry);
            if best.as_ref().is_none_or(|(b, _)| metrics.accuracy > b.metrics.accuracy) {
                best = Some((entry, trainer.model.store.clone()));
            }
        }
    }
    let (best, store) = best.expect("final epoch is always evaluated");
    let mut model = trainer.model;
    model.store = store;
    Ok(TrainOutcome { model, best, log })
}
