//! Merging presets, the optional config file and command-line flags.

use std::fmt;
use std::fs;
use std::path::Path;

use clap::Args;
use eened::train::TrainConfig;
use eened::{Error, Execution, ModelConfig};

use crate::Preset;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: msg.to_string(),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_DATA,
            message: msg.to_string(),
        }
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: msg.to_string(),
        }
    }
}

/// Library errors raised while reading inputs.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Data(_) | Error::Parse { .. } | Error::Format(_) | Error::Io(_) => EXIT_DATA,
            Error::Dimension { .. } | Error::Contract(_) => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Args, Clone, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Default: d_model / n_heads.
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub conv_kernel: Option<usize>,
    /// Default: (conv_kernel - 1) / 2.
    #[arg(long)]
    pub conv_pad: Option<usize>,
    #[arg(long)]
    pub d_pwff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub classifier_hidden: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `sequential` or `parallel`.
    #[arg(long)]
    pub execution: Option<Execution>,
}

/// Reads a flat `key = value` file; `#` starts a comment.
pub fn read_config_file(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::config(format!("{}:{}: expected `key = value`", path.display(), n + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn preset_configs(preset: Preset) -> (ModelConfig, TrainConfig) {
    match preset {
        Preset::Full => (ModelConfig::default(), TrainConfig::default()),
        Preset::Desk => (
            ModelConfig::desk_scale(),
            TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
        ),
        Preset::Toy => (
            ModelConfig::toy(eened::data::toy::TOY_T_IN),
            TrainConfig {
                epochs: 15,
                batch_size: 16,
                lr: 3e-3,
                ..TrainConfig::default()
            },
        ),
    }
}

/// Builds validated model and training configs: preset, then file, then
/// flags, each overriding the previous layer.
pub fn merge(
    preset: Preset,
    file: &[(String, String)],
    seed: Option<u64>,
    model_flags: &ModelFlags,
    train_flags: &TrainFlags,
) -> CliResult<(ModelConfig, TrainConfig, bool)> {
    let (mut m, mut t) = preset_configs(preset);
    let mut explicit_head_dim = false;
    let mut explicit_pad = false;
    let mut explicit_t_in = false;
    for (k, v) in file {
        let known_model = ModelConfig::is_key(k);
        let known_train = TrainConfig::is_key(k);
        if !known_model && !known_train {
            return Err(CliError::config(format!("unknown config key `{k}`")));
        }
        if known_model {
            m.set(k, v)?;
        }
        if known_train {
            t.set(k, v)?;
        }
        explicit_head_dim |= k == "head_dim";
        explicit_pad |= k == "conv_pad";
        explicit_t_in |= k == "t_in";
    }

    let f = model_flags;
    macro_rules! apply {
        ($cfg:ident . $field:ident = $flag:expr) => {
            if let Some(v) = $flag {
                $cfg.$field = v;
            }
        };
    }
    apply!(m.d_model = f.d_model);
    apply!(m.n_blocks = f.n_blocks);
    apply!(m.n_heads = f.n_heads);
    apply!(m.conv_kernel = f.conv_kernel);
    apply!(m.d_pwff = f.d_pwff);
    apply!(m.dropout_p = f.dropout);
    apply!(m.classifier_hidden = f.classifier_hidden);
    if let Some(h) = f.head_dim {
        m.head_dim = h;
    } else if !explicit_head_dim && m.n_heads > 0 && m.d_model % m.n_heads == 0 {
        m.head_dim = m.d_model / m.n_heads;
    }
    if let Some(p) = f.conv_pad {
        m.conv_pad = p;
    } else if !explicit_pad {
        m.conv_pad = m.conv_kernel.saturating_sub(1) / 2;
    }

    let g = train_flags;
    apply!(t.epochs = g.epochs);
    apply!(t.batch_size = g.batch_size);
    apply!(t.lr = g.lr);
    apply!(t.weight_decay = g.weight_decay);
    apply!(t.warmup_steps = g.warmup_steps);
    apply!(t.eval_every = g.eval_every);
    apply!(t.threshold = g.threshold);
    apply!(t.execution = g.execution);
    if let Some(s) = seed {
        m.seed = s;
        t.seed = s;
    }

    let mut problems = Vec::new();
    if let Err(e) = m.validate() {
        problems.push(e.to_string());
    }
    if let Err(e) = t.validate() {
        problems.push(e.to_string());
    }
    if !problems.is_empty() {
        return Err(CliError::config(problems.join("; ")));
    }
    Ok((m, t, explicit_t_in))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_derive_head_dim() {
        let file = vec![
            ("d_model".to_string(), "16".to_string()),
            ("lr".to_string(), "0.5".to_string()),
            ("seed".to_string(), "3".to_string()),
        ];
        let flags = ModelFlags {
            n_heads: Some(4),
            ..Default::default()
        };
        let tflags = TrainFlags {
            lr: Some(0.25),
            ..Default::default()
        };
        let (m, t, _) = merge(Preset::Toy, &file, None, &flags, &tflags).unwrap();
        assert_eq!((m.d_model, m.n_heads, m.head_dim), (16, 4, 4));
        assert_eq!(t.lr, 0.25);
        assert_eq!((m.seed, t.seed), (3, 3));
    }

    #[test]
    fn divisibility_is_a_config_error() {
        let flags = ModelFlags {
            n_heads: Some(3),
            d_model: Some(512),
            ..Default::default()
        };
        let err = merge(Preset::Full, &[], None, &flags, &TrainFlags::default()).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains("divisible by n_heads"), "{}", err.message);
    }

    #[test]
    fn unknown_key_rejected() {
        let file = vec![("nonsense".to_string(), "1".to_string())];
        let err = merge(Preset::Toy, &file, None, &ModelFlags::default(), &TrainFlags::default()).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
    }
}
