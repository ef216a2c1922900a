//! Built-in synthetic dataset: two classes of Gaussian-bump waveforms.
//!
//! Non-epileptic rows are a couple of broad, low bumps plus noise.
//! Epileptic rows add several narrow, tall spikes of random sign. Values
//! are on a microvolt-like scale so normalization has work to do.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::Result;
use crate::rng::{tag, SeedTree};

pub const TOY_ROWS: usize = 256;
pub const TOY_T_IN: usize = 32;

fn bump(t: usize, center: f64, width: f64, height: f64, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate().take(t) {
        let z = (i as f64 - center) / width;
        *v += height * (-0.5 * z * z).exp();
    }
}

/// `rows` segments of length `t_in`; about a third are positive.
pub fn toy_dataset(rows: usize, t_in: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SeedTree::new(seed).child(tag::TOY_DATA).rng();
    let noise = Normal::new(0.0, 8.0).expect("valid sigma");
    let mut x = Vec::with_capacity(rows * t_in);
    let mut y = Vec::with_capacity(rows);
    let t = t_in as f64;
    for _ in 0..rows {
        let label = u8::from(rng.gen_bool(1.0 / 3.0));
        let mut row: Vec<f64> = (0..t_in).map(|_| noise.sample(&mut rng)).collect();
        for _ in 0..rng.gen_range(1..=2) {
            let center = rng.gen_range(0.0..t);
            let height = rng.gen_range(-40.0..40.0);
            bump(t_in, center, t / 6.0, height, &mut row);
        }
        if label == 1 {
            for _ in 0..rng.gen_range(2..=4) {
                let center = rng.gen_range(0.0..t);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                bump(t_in, center, 1.2, sign * rng.gen_range(120.0..220.0), &mut row);
            }
        }
        x.extend(row);
        y.push(label);
    }
    Dataset::new(t_in, x, y)
}
