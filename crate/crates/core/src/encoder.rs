//! Encoder block: macaron feed-forward halves around self-attention and a
//! convolution module, closed by a layer norm.
//!
//! All sub-modules map a `T×D` sequence to a `T×D` sequence. No positional
//! encoding is applied anywhere, so attention is permutation-equivariant
//! over timesteps while the convolution module is not.

use crate::autodiff::{check_depthwise_geometry, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rng::StreamRng;

pub const LN_EPS: f64 = 1e-5;

/// Per-call settings shared by every sub-module of a forward pass.
pub struct ForwardCtx {
    pub training: bool,
    pub dropout_p: f64,
    pub rng: StreamRng,
}

impl ForwardCtx {
    pub fn eval(rng: StreamRng) -> Self {
        ForwardCtx {
            training: false,
            dropout_p: 0.0,
            rng,
        }
    }

    fn dropout<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        x.dropout(self.dropout_p, self.training, &mut self.rng)
    }
}

/// Extents shared by all sub-modules of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_pwff: usize,
    pub conv_kernel: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_pwff == 0 || self.conv_kernel == 0 {
            return Err(Error::Config("block extents must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.d_pwff < self.d_model {
            return Err(Error::Config(format!(
                "d_pwff ({}) must be >= d_model ({})",
                self.d_pwff, self.d_model
            )));
        }
        check_depthwise_geometry(self.conv_kernel, self.conv_pad())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn conv_pad(&self) -> usize {
        self.conv_kernel.saturating_sub(1) / 2
    }
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut StreamRng) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.ln_gamma"), &[d], Init::Ones, rng),
        store.add(format!("{prefix}.ln_beta"), &[d], Init::Zeros, rng),
    )
}

#[derive(Clone, Debug)]
pub struct PwffParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl PwffParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, d_pwff: usize, rng: &mut StreamRng) -> Self {
        let (ln_gamma, ln_beta) = layer_norm_params(store, prefix, d_model, rng);
        PwffParams {
            w1: store.add(format!("{prefix}.w1"), &[d_model, d_pwff], Init::FanIn(d_model), rng),
            b1: store.add(format!("{prefix}.b1"), &[d_pwff], Init::Zeros, rng),
            w2: store.add(format!("{prefix}.w2"), &[d_pwff, d_model], Init::FanIn(d_pwff), rng),
            b2: store.add(format!("{prefix}.b2"), &[d_model], Init::Zeros, rng),
            ln_gamma,
            ln_beta,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub o: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl MhsaParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, n_heads: usize, rng: &mut StreamRng) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({n_heads}) must divide d_model ({d_model})"
            )));
        }
        let d = d_model / n_heads;
        let (ln_gamma, ln_beta) = layer_norm_params(store, prefix, d_model, rng);
        let mut head = |role: &str| -> Vec<ParamId> {
            (0..n_heads)
                .map(|h| store.add(format!("{prefix}.{role}{h}"), &[d_model, d], Init::FanIn(d_model), rng))
                .collect()
        };
        let q = head("q");
        let k = head("k");
        let v = head("v");
        Ok(MhsaParams {
            q,
            k,
            v,
            o: store.add(format!("{prefix}.o"), &[d_model, d_model], Init::FanIn(d_model), rng),
            ln_gamma,
            ln_beta,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.q.len()
    }
}

#[derive(Clone, Debug)]
pub struct ConvModuleParams {
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    pub glu_w1: ParamId,
    pub glu_b1: ParamId,
    pub glu_w2: ParamId,
    pub glu_b2: ParamId,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub pad: usize,
}

impl ConvModuleParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, kernel: usize, rng: &mut StreamRng) -> Result<Self> {
        let pad = kernel.saturating_sub(1) / 2;
        check_depthwise_geometry(kernel, pad)?;
        let d = d_model;
        let (ln_gamma, ln_beta) = layer_norm_params(store, prefix, d, rng);
        Ok(ConvModuleParams {
            pw1_w: store.add(format!("{prefix}.pw1_w"), &[d, 2 * d], Init::FanIn(d), rng),
            pw1_b: store.add(format!("{prefix}.pw1_b"), &[2 * d], Init::Zeros, rng),
            glu_w1: store.add(format!("{prefix}.glu_w1"), &[d, d], Init::FanIn(d), rng),
            glu_b1: store.add(format!("{prefix}.glu_b1"), &[d], Init::Zeros, rng),
            glu_w2: store.add(format!("{prefix}.glu_w2"), &[d, d], Init::FanIn(d), rng),
            glu_b2: store.add(format!("{prefix}.glu_b2"), &[d], Init::Zeros, rng),
            dw_kernel: store.add(format!("{prefix}.dw_kernel"), &[d, kernel], Init::FanIn(kernel), rng),
            dw_bias: store.add(format!("{prefix}.dw_bias"), &[d], Init::Zeros, rng),
            proj_w: store.add(format!("{prefix}.proj_w"), &[d, d], Init::FanIn(d), rng),
            proj_b: store.add(format!("{prefix}.proj_b"), &[d], Init::Zeros, rng),
            ln_gamma,
            ln_beta,
            pad,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub pwff_a: PwffParams,
    pub mhsa: MhsaParams,
    pub conv: ConvModuleParams,
    pub pwff_b: PwffParams,
    pub final_ln_gamma: ParamId,
    pub final_ln_beta: ParamId,
}

impl EncoderBlockParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut StreamRng) -> Result<Self> {
        dims.validate()?;
        let pwff_a = PwffParams::init(store, &format!("{prefix}.pwff_a"), dims.d_model, dims.d_pwff, rng);
        let mhsa = MhsaParams::init(store, &format!("{prefix}.mhsa"), dims.d_model, dims.n_heads, rng)?;
        let conv = ConvModuleParams::init(store, &format!("{prefix}.conv"), dims.d_model, dims.conv_kernel, rng)?;
        let pwff_b = PwffParams::init(store, &format!("{prefix}.pwff_b"), dims.d_model, dims.d_pwff, rng);
        let (final_ln_gamma, final_ln_beta) = layer_norm_params(store, &format!("{prefix}.final"), dims.d_model, rng);
        Ok(EncoderBlockParams {
            pwff_a,
            mhsa,
            conv,
            pwff_b,
            final_ln_gamma,
            final_ln_beta,
        })
    }
}

/// Half-step feed-forward: `x + ½·Dropout(Swish(LN(x)·W₁+b₁)·W₂+b₂)`.
pub fn pwff_forward<'t>(x: Var<'t>, p: &PwffParams, bound: &Bound<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    let normed = x.layer_norm(bound.var(p.ln_gamma), bound.var(p.ln_beta), LN_EPS)?;
    let hidden = normed.linear(bound.var(p.w1), bound.var(p.b1))?.swish();
    let branch = hidden.linear(bound.var(p.w2), bound.var(p.b2))?;
    let branch = ctx.dropout(branch)?;
    x.add(branch.scale(0.5))
}

/// Self-attention branch (no residual): layer norm, per-head scaled
/// dot-product attention, head concatenation, output projection, dropout.
pub fn mhsa_forward<'t>(x: Var<'t>, p: &MhsaParams, bound: &Bound<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
    mhsa_with_attention(x, p, bound, ctx, None)
}

/// As [`mhsa_forward`], also returning each head's `T×T` attention matrix.
pub fn mhsa_forward_traced<'t>(
    x: Var<'t>,
    p: &MhsaParams,
    bound: &Bound<'t>,
    ctx: &mut ForwardCtx,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let mut heads = Vec::with_capacity(p.n_heads());
    let out = mhsa_with_attention(x, p, bound, ctx, Some(&mut heads))?;
    Ok((out, heads))
}

fn mhsa_with_attention<'t>(
    x: Var<'t>,
    p: &MhsaParams,
    bound: &Bound<'t>,
    ctx: &mut ForwardCtx,
    mut trace: Option<&mut Vec<Var<'t>>>,
) -> Result<Var<'t>> {
    let d_model = x.shape().last().copied().unwrap_or(0);
    let n_heads = p.n_heads();
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!(
            "n_heads ({n_heads}) must divide d_model ({d_model})"
        )));
    }
    let scale = 1.0 / ((d_model / n_heads) as f64).sqrt();
    let normed = x.layer_norm(bound.var(p.ln_gamma), bound.var(p.ln_beta), LN_EPS)?;
    let mut contexts = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = normed.matmul(bound.var(p.q[h]))?;
        let k = normed.matmul(bound.var(p.k[h]))?;
        let v = normed.matmul(bound.var(p.v[h]))?;
        let attn = q.matmul_nt(k)?.scale(scale).softmax_rows()?;
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(attn);
        }
        contexts.push(attn.matmul(v)?);
    }
    let concat = x.tape().concat_cols(&contexts)?;
    let out = concat.matmul(bound.var(p.o))?;
    ctx.dropout(out)
}

/// Convolution module with its residual:
/// `x + Dropout(Swish(DWConv(GLU(PWConv(LN(x))))) · W + b)`.
pub fn conv_module_forward<'t>(
    x: Var<'t>,
    p: &ConvModuleParams,
    bound: &Bound<'t>,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t>> {
    let d = bound.var(p.glu_b1).value().len();
    let normed = x.layer_norm(bound.var(p.ln_gamma), bound.var(p.ln_beta), LN_EPS)?;
    let widened = normed.conv1d_pointwise(bound.var(p.pw1_w), bound.var(p.pw1_b))?;
    let first = widened.slice_cols(0, d)?;
    let second = widened.slice_cols(d, d)?;
    let value = first.linear(bound.var(p.glu_w1), bound.var(p.glu_b1))?;
    let gate = second.linear(bound.var(p.glu_w2), bound.var(p.glu_b2))?.sigmoid();
    let glu = value.mul(gate)?;
    let local = glu
        .conv1d_depthwise(bound.var(p.dw_kernel), bound.var(p.dw_bias), p.pad)?
        .swish();
    let projected = local.linear(bound.var(p.proj_w), bound.var(p.proj_b))?;
    x.add(ctx.dropout(projected)?)
}

/// One encoder block.
pub fn encoder_block_forward<'t>(
    x: Var<'t>,
    p: &EncoderBlockParams,
    bound: &Bound<'t>,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t>> {
    let ff1 = pwff_forward(x, &p.pwff_a, bound, ctx)?;
    let attended = ff1.add(mhsa_forward(ff1, &p.mhsa, bound, ctx)?)?;
    let convolved = conv_module_forward(attended, &p.conv, bound, ctx)?;
    let ff2 = pwff_forward(convolved, &p.pwff_b, bound, ctx)?;
    ff2.layer_norm(bound.var(p.final_ln_gamma), bound.var(p.final_ln_beta), LN_EPS)
}
