//! Low-level f32 building blocks shared by the conditioning encoder and the
//! sequence model: RMS normalization, softmax, SiLU, rotary position tables
//! and seeded initializers.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f32 = 1e-5;

/// Row-wise RMS normalization with learned per-column gain.
/// Returns the output and the per-row inverse RMS (needed for backprop).
pub fn rms_norm(x: &Array2<f32>, gain: &Array1<f32>) -> (Array2<f32>, Vec<f32>) {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    let mut inv_rms = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        inv_rms.push(inv);
        for j in 0..d {
            out[(i, j)] = row[j] * inv * gain[j];
        }
    }
    (out, inv_rms)
}

/// In-place numerically stable softmax over each row's first `valid` entries;
/// entries past `valid` are forced to zero probability.
pub fn softmax_row(row: &mut [f32], valid: usize) {
    let m = row[..valid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row[..valid].iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row[..valid].iter_mut() {
        *v *= inv;
    }
    for v in row[valid..].iter_mut() {
        *v = 0.0;
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// d silu(x) / dx.
pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Precomputed rotary tables for positions up to `max_len`, rotate-half
/// pairing (dimension i pairs with i + head_dim/2).
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub cos: Array2<f32>,
    pub sin: Array2<f32>,
    pub head_dim: usize,
}

impl RopeTable {
    pub fn new(max_len: usize, head_dim: usize, base: f32) -> Self {
        assert!(head_dim.is_multiple_of(2));
        let half = head_dim / 2;
        let mut cos = Array2::zeros((max_len, half));
        let mut sin = Array2::zeros((max_len, half));
        for p in 0..max_len {
            for i in 0..half {
                let theta = (p as f32) * base.powf(-2.0 * i as f32 / head_dim as f32);
                cos[(p, i)] = theta.cos();
                sin[(p, i)] = theta.sin();
            }
        }
        RopeTable {
            cos,
            sin,
            head_dim,
        }
    }

    /// Rotate one head's row vector in place for absolute position `pos`.
    pub fn rotate(&self, head: &mut [f32], pos: usize) {
        let half = self.head_dim / 2;
        for i in 0..half {
            let (c, s) = (self.cos[(pos, i)], self.sin[(pos, i)]);
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * c - b * s;
            head[i + half] = a * s + b * c;
        }
    }

    /// Inverse rotation (transpose), used in backprop.
    pub fn rotate_back(&self, head: &mut [f32], pos: usize) {
        let half = self.head_dim / 2;
        for i in 0..half {
            let (c, s) = (self.cos[(pos, i)], self.sin[(pos, i)]);
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * c + b * s;
            head[i + half] = -a * s + b * c;
        }
    }
}

/// Gaussian init scaled by 1/sqrt(fan_in).
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f32> {
    let dist = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Apply rotary embedding to every head of a (T, heads*head_dim) matrix.
pub fn rope_all(table: &RopeTable, x: &mut Array2<f32>, n_heads: usize, pos_offset: usize) {
    let t = x.nrows();
    let hd = table.head_dim;
    for i in 0..t {
        let mut row = x.row_mut(i);
        let row = row.as_slice_mut().expect("contiguous row");
        for h in 0..n_heads {
            table.rotate(&mut row[h * hd..(h + 1) * hd], pos_offset + i);
        }
    }
}
