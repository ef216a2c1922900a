//! The full network: scalar-per-timestep embedding, a stack of encoder
//! blocks, mean pooling over time and a two-layer sigmoid head.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::encoder::{encoder_block_forward, BlockDims, EncoderBlockParams, ForwardCtx};
use crate::error::{Error, Result};
use crate::params::{Bound, GradBuffer, Init, ParamId, ParamStore};
use crate::rng::{tag, SeedTree, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub conv_kernel: usize,
    pub conv_pad: usize,
    pub d_pwff: usize,
    pub dropout_p: f64,
    pub t_in: usize,
    pub classifier_hidden: usize,
    pub seed: u64,
    /// Train-split statistics used to standardize raw segments.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            n_blocks: 3,
            n_heads: 8,
            head_dim: 64,
            conv_kernel: 15,
            conv_pad: 7,
            d_pwff: 2048,
            dropout_p: 0.1,
            t_in: 178,
            classifier_hidden: 128,
            seed: 0,
            input_mean: 0.0,
            input_std: 1.0,
        }
    }
}

/// Canonical key order of the text encoding.
const CONFIG_KEYS: [&str; 13] = [
    "d_model",
    "n_blocks",
    "n_heads",
    "head_dim",
    "conv_kernel",
    "conv_pad",
    "d_pwff",
    "dropout_p",
    "t_in",
    "classifier_hidden",
    "seed",
    "input_mean",
    "input_std",
];

impl ModelConfig {
    /// Reduced configuration for laptop-scale training runs.
    pub fn desk_scale() -> Self {
        ModelConfig {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            head_dim: 16,
            d_pwff: 256,
            classifier_hidden: 32,
            ..Self::default()
        }
    }

    /// Tiny configuration used by gradient checks and smoke tests.
    pub fn toy(t_in: usize) -> Self {
        ModelConfig {
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            head_dim: 4,
            conv_kernel: 3,
            conv_pad: 1,
            d_pwff: 16,
            dropout_p: 0.0,
            t_in,
            classifier_hidden: 8,
            ..Self::default()
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_pwff: self.d_pwff,
            conv_kernel: self.conv_kernel,
        }
    }

    /// Checks every invariant and lists all that fail.
    pub fn validate(&self) -> Result<()> {
        let mut failed = Vec::new();
        let extents = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("conv_kernel", self.conv_kernel),
            ("d_pwff", self.d_pwff),
            ("t_in", self.t_in),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in extents {
            if v == 0 {
                failed.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            failed.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_heads * self.head_dim != self.d_model {
            failed.push(format!(
                "n_heads * head_dim must equal d_model ({} * {} != {})",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            failed.push(format!("conv_kernel ({}) must be odd", self.conv_kernel));
        }
        if self.conv_pad != self.conv_kernel.saturating_sub(1) / 2 {
            failed.push(format!(
                "conv_pad ({}) must equal (conv_kernel - 1) / 2",
                self.conv_pad
            ));
        }
        if self.d_pwff < self.d_model {
            failed.push(format!(
                "d_pwff ({}) must be >= d_model ({})",
                self.d_pwff, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            failed.push(format!("dropout_p ({}) must be in [0, 1)", self.dropout_p));
        }
        if !self.input_mean.is_finite() || !(self.input_std.is_finite() && self.input_std > 0.0) {
            failed.push("input normalization stats must be finite with std > 0".into());
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(failed.join("; ")))
        }
    }

    /// Canonical `key = value` text, one line per field in fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("known key")).unwrap();
        }
        out
    }

    /// Parses the canonical encoding; every key must appear exactly once.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value.trim())?;
            seen.push(key);
        }
        if let Some(missing) = CONFIG_KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("missing key `{missing}`")));
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_model" => self.d_model.to_string(),
            "n_blocks" => self.n_blocks.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "head_dim" => self.head_dim.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "conv_pad" => self.conv_pad.to_string(),
            "d_pwff" => self.d_pwff.to_string(),
            "dropout_p" => format!("{:?}", self.dropout_p),
            "t_in" => self.t_in.to_string(),
            "classifier_hidden" => self.classifier_hidden.to_string(),
            "seed" => self.seed.to_string(),
            "input_mean" => format!("{:?}", self.input_mean),
            "input_std" => format!("{:?}", self.input_std),
            _ => return None,
        })
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{v}`")))
        }
        fn real(key: &str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        }
        match key {
            "d_model" => self.d_model = int(key, value)?,
            "n_blocks" => self.n_blocks = int(key, value)?,
            "n_heads" => self.n_heads = int(key, value)?,
            "head_dim" => self.head_dim = int(key, value)?,
            "conv_kernel" => self.conv_kernel = int(key, value)?,
            "conv_pad" => self.conv_pad = int(key, value)?,
            "d_pwff" => self.d_pwff = int(key, value)?,
            "dropout_p" => self.dropout_p = real(key, value)?,
            "t_in" => self.t_in = int(key, value)?,
            "classifier_hidden" => self.classifier_hidden = int(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed` expects a u64, got `{value}`")))?
            }
            "input_mean" => self.input_mean = real(key, value)?,
            "input_std" => self.input_std = real(key, value)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key)
    }
}

#[derive(Clone, Debug)]
pub struct EenedModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub blocks: Vec<EncoderBlockParams>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
}

impl EenedModel {
    /// Fresh model with parameters drawn from the config seed.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedTree::new(config.seed).child(tag::INIT).rng();
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_w = store.add("embed.w", &[1, d], Init::FanIn(1), &mut rng);
        let embed_b = store.add("embed.b", &[d], Init::Zeros, &mut rng);
        let dims = config.block_dims();
        let blocks = (0..config.n_blocks)
            .map(|i| EncoderBlockParams::init(&mut store, &format!("block{i}"), dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let hidden = config.classifier_hidden;
        let head_w1 = store.add("head.w1", &[d, hidden], Init::FanIn(d), &mut rng);
        let head_b1 = store.add("head.b1", &[hidden], Init::Zeros, &mut rng);
        let head_w2 = store.add("head.w2", &[hidden, 1], Init::FanIn(hidden), &mut rng);
        let head_b2 = store.add("head.b2", &[1], Init::Zeros, &mut rng);
        Ok(EenedModel {
            config,
            store,
            embed_w,
            embed_b,
            blocks,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Standardizes a raw segment with the stored train statistics.
    pub fn normalize_input(&self, raw: &[f64]) -> Vec<f64> {
        let (mean, std) = (self.config.input_mean, self.config.input_std);
        raw.iter().map(|v| (v - mean) / std).collect()
    }

    /// Builds the forward graph for one (already standardized) segment and
    /// returns the `1×1` probability node.
    pub fn forward_on<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: &[f64], ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        if x.len() != self.config.t_in {
            return Err(Error::dim("model_forward", &[self.config.t_in], &[x.len()]));
        }
        let input = tape.leaf(Tensor::new(&[x.len(), 1], x.to_vec())?);
        let mut h = input.conv1d_pointwise(bound.var(self.embed_w), bound.var(self.embed_b))?;
        for block in &self.blocks {
            h = encoder_block_forward(h, block, bound, ctx)?;
        }
        let pooled = h.mean_rows()?;
        let hidden = pooled
            .linear(bound.var(self.head_w1), bound.var(self.head_b1))?
            .swish();
        let logit = hidden.linear(bound.var(self.head_w2), bound.var(self.head_b2))?;
        Ok(logit.sigmoid())
    }

    /// Seizure probability for one standardized segment.
    pub fn forward(&self, x: &[f64], training: bool, rng: StreamRng) -> Result<f64> {
        let tape = Tape::inference();
        let bound = self.store.bind(&tape);
        let mut ctx = self.ctx(training, rng);
        Ok(self.forward_on(&tape, &bound, x, &mut ctx)?.value().item())
    }

    /// Eval-mode probability.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.forward(x, false, SeedTree::new(0).rng())
    }

    pub fn ctx(&self, training: bool, rng: StreamRng) -> ForwardCtx {
        ForwardCtx {
            training,
            dropout_p: self.config.dropout_p,
            rng,
        }
    }

    /// BCE loss of one sample and the gradient of every parameter.
    pub fn loss_and_grads(&self, x: &[f64], label: f64, training: bool, rng: StreamRng) -> Result<(f64, GradBuffer)> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let mut ctx = self.ctx(training, rng);
        let p = self.forward_on(&tape, &bound, x, &mut ctx)?;
        let loss = p.bce(&[label])?;
        let grads = tape.backward(loss)?;
        Ok((loss.value().item(), bound.collect_grads(&grads)))
    }

    /// BCE loss of one sample without building backward state.
    pub fn loss(&self, x: &[f64], label: f64) -> Result<f64> {
        let tape = Tape::inference();
        let bound = self.store.bind(&tape);
        let mut ctx = self.ctx(false, SeedTree::new(0).rng());
        let p = self.forward_on(&tape, &bound, x, &mut ctx)?;
        Ok(p.bce(&[label])?.value().item())
    }
}
