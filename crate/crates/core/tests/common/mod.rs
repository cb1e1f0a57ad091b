#![allow(dead_code)]

use kvss_core::synth::{synth_exchangeable, SynthShape};
use kvss_core::AttentionCapture;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn capture(t: usize, layers: usize, heads: usize, seed: u64) -> AttentionCapture {
    synth_exchangeable(SynthShape::new(t).layers(layers).heads(heads).head_dim(4), seed)
        .unwrap()
        .0
}

/// Flat-Dirichlet draw on `n` points.
pub fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Brute-force top-k: `i` is kept iff fewer than `k` tokens beat it.
pub fn top_k_oracle(values: &[f64], reserved_tail: usize, k: usize) -> Vec<usize> {
    let t = values.len();
    let reserved = |i: usize| i + reserved_tail >= t;
    let beats = |j: usize, i: usize| {
        if reserved(j) != reserved(i) {
            return reserved(j);
        }
        values[j] > values[i] || (values[j] == values[i] && j < i)
    };
    (0..t)
        .filter(|&i| (0..t).filter(|&j| j != i && beats(j, i)).count() < k)
        .collect()
}

pub fn binom(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for j in 0..k {
        r = r * (n - j) as u128 / (j + 1) as u128;
    }
    r
}

/// Exact hypergeometric tail by integer enumeration.
pub fn fisher_oracle(table: [[u64; 2]; 2], less: bool) -> f64 {
    let [[a, b], [c, d]] = table;
    let (row, col, n) = (a + b, a + c, a + b + c + d);
    let total = binom(n, row);
    let mut hit: u128 = 0;
    for x in 0..=row.min(col) {
        if row - x > n - col {
            continue;
        }
        if (less && x <= a) || (!less && x >= a) {
            hit += binom(col, x) * binom(n - col, row - x);
        }
    }
    hit as f64 / total as f64
}
