//! Straightforward dense reference implementations used as test oracles.
//!
//! Everything here works on `Vec<Vec<f64>>` with explicit loops and shares
//! no code with the library's kernels or autodiff graph.

#![allow(dead_code)]

use eened::encoder::{conv_module_forward, mhsa_forward, ConvModuleParams, ForwardCtx, MhsaParams};
use eened::rng::SeedTree;
use eened::{ParamId, ParamStore, Tape, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn param(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.get(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        mat(t)
    }
}

pub fn vector(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let rows: Vec<&[f64]> = m.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Zero-padded per-channel cross-correlation, written as the textbook
/// triple loop over channel, output time and tap.
pub fn depthwise(x: &Mat, kernel: &Mat, bias: &[f64], pad: usize) -> Mat {
    let t = x.len();
    let c = x[0].len();
    let k = kernel[0].len();
    let mut padded = vec![vec![0.0; c]; t + 2 * pad];
    padded[pad..pad + t].clone_from_slice(x);
    let mut out = vec![vec![0.0; c]; t];
    for ch in 0..c {
        for ti in 0..t {
            let mut acc = bias[ch];
            for j in 0..k {
                acc += kernel[ch][j] * padded[ti + j][ch];
            }
            out[ti][ch] = acc;
        }
    }
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Self-attention branch without residual: normalize, attend per head,
/// concatenate heads, project.
pub fn mhsa(x: &Mat, store: &ParamStore, p: &MhsaParams) -> Mat {
    let xn = layer_norm(x, &vector(store, p.ln_gamma), &vector(store, p.ln_beta), LN_EPS);
    let d_model = x[0].len();
    let h = p.q.len();
    let d = d_model / h;
    let t = x.len();
    let mut concat = vec![Vec::with_capacity(d_model); t];
    for head in 0..h {
        let q = matmul(&xn, &param(store, p.q[head]));
        let k = matmul(&xn, &param(store, p.k[head]));
        let v = matmul(&xn, &param(store, p.v[head]));
        let scores = map(&matmul(&q, &transpose(&k)), |s| s / (d as f64).sqrt());
        let a = softmax_rows(&scores);
        let ctx = matmul(&a, &v);
        for (row, c) in concat.iter_mut().zip(ctx) {
            row.extend(c);
        }
    }
    matmul(&concat, &param(store, p.o))
}

/// Convolution module including its residual connection.
pub fn conv_module(x: &Mat, store: &ParamStore, p: &ConvModuleParams) -> Mat {
    let d = x[0].len();
    let xn = layer_norm(x, &vector(store, p.ln_gamma), &vector(store, p.ln_beta), LN_EPS);
    let wide = add_bias(&matmul(&xn, &param(store, p.pw1_w)), &vector(store, p.pw1_b));
    let first: Mat = wide.iter().map(|r| r[..d].to_vec()).collect();
    let second: Mat = wide.iter().map(|r| r[d..].to_vec()).collect();
    let value = add_bias(&matmul(&first, &param(store, p.glu_w1)), &vector(store, p.glu_b1));
    let gate = map(
        &add_bias(&matmul(&second, &param(store, p.glu_w2)), &vector(store, p.glu_b2)),
        sigmoid,
    );
    let glu: Mat = value
        .iter()
        .zip(&gate)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();
    let local = map(
        &depthwise(&glu, &param(store, p.dw_kernel), &vector(store, p.dw_bias), p.pad),
        swish,
    );
    let proj = add_bias(&matmul(&local, &param(store, p.proj_w)), &vector(store, p.proj_b));
    x.iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

/// Random matrix with entries in `[-scale, scale)`.
pub fn random_mat(rows: usize, cols: usize, scale: f64, seed: u64) -> Mat {
    use eened::rng::{Rng, SeedTree};
    let mut rng = SeedTree::new(seed).child(0xface).rng();
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

/// Overwrites every parameter with random values, including layer-norm
/// gains and biases, so no oracle check passes by accident of init.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    use eened::rng::{Rng, SeedTree};
    let mut rng = SeedTree::new(seed).child(0xbeef).rng();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

pub fn permute_rows(x: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&i| x[i].clone()).collect()
}

/// Writes a file in the public dataset's layout: header, id column, 178
/// samples per row, label 1..=5 with 2300 rows per label.
pub fn write_replica_csv(path: &std::path::Path, seed: u64) {
    use eened::rng::{Rng, SeedTree};
    use std::fmt::Write as _;
    let mut rng = SeedTree::new(seed).child(0xc5f).rng();
    let mut text = String::from("\"\"");
    for i in 1..=178 {
        write!(text, ",X{i}").unwrap();
    }
    text.push_str(",y\n");
    let mut labels: Vec<u8> = (0..11_500).map(|i| 1 + (i % 5) as u8).collect();
    eened::rng::shuffle(&mut labels, &mut rng);
    for (row, &label) in labels.iter().enumerate() {
        write!(text, "X{}.V1.{row}", 1 + row % 23).unwrap();
        let amp: f64 = if label == 1 { 400.0 } else { 60.0 };
        for _ in 0..178 {
            write!(text, ",{}", rng.gen_range(-amp..amp).round() as i64).unwrap();
        }
        writeln!(text, ",{label}").unwrap();
    }
    std::fs::write(path, text).unwrap();
}

/// Library MHSA branch in eval mode.
pub fn lib_mhsa(store: &ParamStore, p: &MhsaParams, x: &Mat) -> Mat {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut ctx = ForwardCtx::eval(SeedTree::new(0).rng());
    let out = mhsa_forward(tape.leaf(to_tensor(x)), p, &bound, &mut ctx).unwrap();
    mat(&out.value())
}

/// Library convolution module in eval mode.
pub fn lib_conv(store: &ParamStore, p: &ConvModuleParams, x: &Mat) -> Mat {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut ctx = ForwardCtx::eval(SeedTree::new(0).rng());
    let out = conv_module_forward(tape.leaf(to_tensor(x)), p, &bound, &mut ctx).unwrap();
    mat(&out.value())
}

pub fn mhsa_setup(d: usize, h: usize, seed: u64) -> (ParamStore, MhsaParams) {
    let mut store = ParamStore::new();
    let p = MhsaParams::init(&mut store, "m", d, h, &mut SeedTree::new(seed).rng()).unwrap();
    randomize(&mut store, seed);
    (store, p)
}

pub fn conv_setup(d: usize, k: usize, seed: u64) -> (ParamStore, ConvModuleParams) {
    let mut store = ParamStore::new();
    let p = ConvModuleParams::init(&mut store, "c", d, k, &mut SeedTree::new(seed).rng()).unwrap();
    randomize(&mut store, seed);
    (store, p)
}
