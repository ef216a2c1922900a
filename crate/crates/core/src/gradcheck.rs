//! Central finite-difference checks of reverse-mode gradients.
//!
//! The relative error of a coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`; the floor
//! keeps coordinates whose true gradient is ~0 from dividing noise by noise.

use std::fmt;

use rand::Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::encoder::{
    conv_module_forward, encoder_block_forward, mhsa_forward, pwff_forward, BlockDims,
    ConvModuleParams, EncoderBlockParams, ForwardCtx, MhsaParams, PwffParams,
};
use crate::error::{Error, Result};
use crate::model::{EenedModel, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::{tag, SeedTree};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Negates the backward pass of one op kind (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: Some(64),
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub label: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn coords_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.coords_checked).sum()
    }

    /// Tensors whose error exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &TensorReport> {
        self.tensors.iter().filter(move |t| t.max_rel_err >= self.tolerance)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {} max_rel_err={:.3e} coords={} tol={:.0e}",
            self.label,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.coords_checked(),
            self.tolerance
        )?;
        for t in self.failures() {
            write!(
                f,
                "\n    {}[{}]: analytic={:.6e} numeric={:.6e} rel_err={:.3e}",
                t.name, t.worst_coord, t.analytic, t.numeric, t.max_rel_err
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the tape gradient of a scalar built by `build` against central
/// differences over every tensor in `store`.
pub fn check<F>(label: &str, store: &ParamStore, build: F, opts: &GradcheckOptions) -> Result<Report>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    tape.inject_fault(opts.fault);
    let bound = store.bind(&tape);
    let loss = build(&tape, &bound)?;
    let grads = bound.collect_grads(&tape.backward(loss)?);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let bound = s.bind(&tape);
        let out = build(&tape, &bound)?;
        if out.value().len() != 1 {
            return Err(Error::Contract("gradcheck objective must be scalar".into()));
        }
        Ok(out.value().item())
    };

    let mut rng = SeedTree::new(opts.seed).child(tag::GRADCHECK).rng();
    let mut work = store.clone();
    let mut tensors = Vec::with_capacity(store.len());
    for (id, name, value) in store.iter() {
        let n = value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(max) if max < n => (0..max).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut report = TensorReport {
            name: name.to_string(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let original = value.data()[c];
            work.get_mut(id).data_mut()[c] = original + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = original - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(id)[c];
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_coord = c;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        tensors.push(report);
    }
    Ok(Report {
        label: label.to_string(),
        tolerance: opts.tolerance,
        tensors,
    })
}

/// Named checks of the built-in suite.
pub const SUITE: [&str; 6] = ["primitives", "pwff", "mhsa", "conv", "block", "model"];

/// Toy sizes used by the suite.
pub const TOY_D: usize = 8;
pub const TOY_HEADS: usize = 2;
pub const TOY_T: usize = 5;
pub const TOY_MODEL_T: usize = 16;

fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn eval_ctx() -> ForwardCtx {
    ForwardCtx::eval(SeedTree::new(0).rng())
}

/// Runs the suite (or the single check named by `only`).
pub fn run_suite(only: Option<&str>, opts: &GradcheckOptions) -> Result<Vec<Report>> {
    if let Some(name) = only {
        if !SUITE.contains(&name) {
            return Err(Error::Config(format!(
                "unknown gradcheck module `{name}` (expected one of {})",
                SUITE.join(", ")
            )));
        }
    }
    let wanted = |name: &str| only.is_none_or(|o| o == name);
    let mut reports = Vec::new();
    if wanted("primitives") {
        reports.extend(primitive_checks(opts)?);
    }
    if wanted("pwff") {
        reports.push(pwff_check(opts)?);
    }
    if wanted("mhsa") {
        reports.push(mhsa_check(opts)?);
    }
    if wanted("conv") {
        reports.push(conv_check(opts)?);
    }
    if wanted("block") {
        reports.push(block_check(opts)?);
    }
    if wanted("model") {
        reports.push(model_check(opts)?);
    }
    Ok(reports)
}

/// One check per differentiable primitive, each labelled with its op name.
pub fn primitive_checks(opts: &GradcheckOptions) -> Result<Vec<Report>> {
    let mut rng = SeedTree::new(opts.seed).path(&[tag::GRADCHECK, 1]).rng();
    let mut store = ParamStore::new();
    let a = store.push("a".into(), random_tensor(&[3, 4], &mut rng, -1.0, 1.0));
    let b = store.push("b".into(), random_tensor(&[4, 2], &mut rng, -1.0, 1.0));
    let bt = store.push("bt".into(), random_tensor(&[2, 4], &mut rng, -1.0, 1.0));
    let sq = store.push("sq".into(), random_tensor(&[3, 4], &mut rng, -3.0, 3.0));
    let g4 = store.push("gamma".into(), random_tensor(&[4], &mut rng, 0.5, 1.5));
    let b4 = store.push("beta".into(), random_tensor(&[4], &mut rng, -0.5, 0.5));
    let b2 = store.push("bias2".into(), random_tensor(&[2], &mut rng, -0.5, 0.5));
    let seq = store.push("seq".into(), random_tensor(&[9, 3], &mut rng, -1.0, 1.0));
    let k3 = store.push("k3".into(), random_tensor(&[3, 3], &mut rng, -1.0, 1.0));
    let k15 = store.push("k15".into(), random_tensor(&[3, 15], &mut rng, -1.0, 1.0));
    let c3 = store.push("bias3".into(), random_tensor(&[3], &mut rng, -0.5, 0.5));
    let probs = store.push("p".into(), random_tensor(&[6], &mut rng, 0.1, 0.9));
    let r32 = random_tensor(&[3, 2], &mut rng, -1.0, 1.0);
    let r34 = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let r93 = random_tensor(&[9, 3], &mut rng, -1.0, 1.0);
    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();

    // Each objective is a randomly weighted sum so no gradient is uniform.
    type Build = Box<dyn for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>>;
    let checks: Vec<(OpKind, Build)> = vec![
        (OpKind::MatMul, {
            let r = r32.clone();
            Box::new(move |tape, bd| bd.var(a).matmul(bd.var(b))?.mul(tape.leaf(r.clone())).map(Var::sum))
        }),
        (OpKind::MatMulNt, {
            let r = r32.clone();
            Box::new(move |tape, bd| bd.var(a).matmul_nt(bd.var(bt))?.mul(tape.leaf(r.clone())).map(Var::sum))
        }),
        (OpKind::SoftmaxRows, {
            let r = r34.clone();
            Box::new(move |tape, bd| bd.var(sq).softmax_rows()?.mul(tape.leaf(r.clone())).map(Var::sum))
        }),
        (OpKind::LayerNorm, {
            let r = r34.clone();
            Box::new(move |tape, bd| {
                bd.var(sq)
                    .layer_norm(bd.var(g4), bd.var(b4), 1e-5)?
                    .mul(tape.leaf(r.clone()))
                    .map(Var::sum)
            })
        }),
        (OpKind::Swish, {
            let r = r34.clone();
            Box::new(move |tape, bd| bd.var(sq).swish().mul(tape.leaf(r.clone())).map(Var::sum))
        }),
        (OpKind::Sigmoid, {
            let r = r34.clone();
            Box::new(move |tape, bd| bd.var(sq).sigmoid().mul(tape.leaf(r.clone())).map(Var::sum))
        }),
        (OpKind::ConvPointwise, {
            let r = r32.clone();
            Box::new(move |tape, bd| {
                bd.var(a)
                    .conv1d_pointwise(bd.var(b), bd.var(b2))?
                    .mul(tape.leaf(r.clone()))
                    .map(Var::sum)
            })
        }),
        (OpKind::ConvDepthwise, {
            let r = r93.clone();
            Box::new(move |tape, bd| {
                let short = bd.var(seq).conv1d_depthwise(bd.var(k3), bd.var(c3), 1)?;
                let long = bd.var(seq).conv1d_depthwise(bd.var(k15), bd.var(c3), 7)?;
                short.add(long)?.mul(tape.leaf(r.clone())).map(Var::sum)
            })
        }),
        (OpKind::AddRow, {
            let r = r32.clone();
            Box::new(move |tape, bd| {
                bd.var(a)
                    .matmul(bd.var(b))?
                    .add_row(bd.var(b2))?
                    .mul(tape.leaf(r.clone()))
                    .map(Var::sum)
            })
        }),
        (OpKind::ConcatCols, {
            let r = r34.clone();
            Box::new(move |tape, bd| {
                let left = bd.var(sq).slice_cols(0, 1)?;
                let right = bd.var(sq).slice_cols(1, 3)?.scale(-2.0);
                let joined = tape.concat_cols(&[right, left])?;
                joined.mul(tape.leaf(r.clone())).map(Var::sum)
            })
        }),
        (OpKind::MeanRows, {
            let r = random_tensor(&[1, 3], &mut SeedTree::new(5).rng(), -1.0, 1.0);
            Box::new(move |tape, bd| bd.var(seq).mean_rows()?.mul(tape.leaf(r.clone())).map(Var::sum))
        }),
        (OpKind::Bce, {
            let y = targets.clone();
            Box::new(move |_, bd| bd.var(probs).bce(&y))
        }),
    ];

    checks
        .into_iter()
        .map(|(kind, build)| check(kind.name(), &store, build, opts))
        .collect()
}

fn seq_input(t: usize, d: usize, seed: u64) -> Tensor {
    random_tensor(&[t, d], &mut SeedTree::new(seed).child(tag::GRADCHECK).rng(), -1.5, 1.5)
}

/// Nonzero biases and non-unit LN affines so every parameter carries signal.
fn perturb_all(store: &mut ParamStore, seed: u64) {
    let mut rng = SeedTree::new(seed).path(&[tag::GRADCHECK, 2]).rng();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn toy_dims() -> BlockDims {
    BlockDims {
        d_model: TOY_D,
        n_heads: TOY_HEADS,
        d_pwff: 2 * TOY_D,
        conv_kernel: 3,
    }
}

pub fn pwff_check(opts: &GradcheckOptions) -> Result<Report> {
    let mut rng = SeedTree::new(opts.seed).child(tag::INIT).rng();
    let mut store = ParamStore::new();
    let p = PwffParams::init(&mut store, "pwff", TOY_D, 2 * TOY_D, &mut rng);
    perturb_all(&mut store, opts.seed);
    let x = seq_input(TOY_T, TOY_D, opts.seed);
    let r = seq_input(TOY_T, TOY_D, opts.seed + 1);
    check("pwff", &store, |tape, bd| {
        let y = pwff_forward(tape.leaf(x.clone()), &p, bd, &mut eval_ctx())?;
        Ok(y.mul(tape.leaf(r.clone()))?.sum())
    }, opts)
}

pub fn mhsa_check(opts: &GradcheckOptions) -> Result<Report> {
    let mut rng = SeedTree::new(opts.seed).child(tag::INIT).rng();
    let mut store = ParamStore::new();
    let p = MhsaParams::init(&mut store, "mhsa", TOY_D, TOY_HEADS, &mut rng)?;
    perturb_all(&mut store, opts.seed);
    let x = seq_input(TOY_T, TOY_D, opts.seed);
    let r = seq_input(TOY_T, TOY_D, opts.seed + 1);
    check("mhsa", &store, |tape, bd| {
        let y = mhsa_forward(tape.leaf(x.clone()), &p, bd, &mut eval_ctx())?;
        Ok(y.mul(tape.leaf(r.clone()))?.sum())
    }, opts)
}

pub fn conv_check(opts: &GradcheckOptions) -> Result<Report> {
    let mut rng = SeedTree::new(opts.seed).child(tag::INIT).rng();
    let mut store = ParamStore::new();
    let p = ConvModuleParams::init(&mut store, "conv", TOY_D, 3, &mut rng)?;
    perturb_all(&mut store, opts.seed);
    let x = seq_input(TOY_T, TOY_D, opts.seed);
    let r = seq_input(TOY_T, TOY_D, opts.seed + 1);
    check("conv", &store, |tape, bd| {
        let y = conv_module_forward(tape.leaf(x.clone()), &p, bd, &mut eval_ctx())?;
        Ok(y.mul(tape.leaf(r.clone()))?.sum())
    }, opts)
}

pub fn block_check(opts: &GradcheckOptions) -> Result<Report> {
    let mut rng = SeedTree::new(opts.seed).child(tag::INIT).rng();
    let mut store = ParamStore::new();
    let p = EncoderBlockParams::init(&mut store, "block", toy_dims(), &mut rng)?;
    perturb_all(&mut store, opts.seed);
    let x = seq_input(TOY_T, TOY_D, opts.seed);
    let r = seq_input(TOY_T, TOY_D, opts.seed + 1);
    check("block", &store, |tape, bd| {
        let y = encoder_block_forward(tape.leaf(x.clone()), &p, bd, &mut eval_ctx())?;
        Ok(y.mul(tape.leaf(r.clone()))?.sum())
    }, opts)
}

/// End-to-end BCE loss of the toy model (2 blocks, D=8, H=2, T=16).
pub fn model_check(opts: &GradcheckOptions) -> Result<Report> {
    let config = ModelConfig {
        seed: opts.seed,
        ..ModelConfig::toy(TOY_MODEL_T)
    };
    let mut model = EenedModel::init(config)?;
    perturb_all(&mut model.store, opts.seed);
    let x = seq_input(TOY_MODEL_T, 1, opts.seed).into_vec();
    let store = model.store.clone();
    check("model", &store, |tape, bd| {
        let p = model.forward_on(tape, bd, &x, &mut eval_ctx())?;
        p.bce(&[1.0])
    }, opts)
}
