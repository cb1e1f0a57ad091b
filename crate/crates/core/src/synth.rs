//! Synthetic attention captures with known ground truth.
//!
//! Every generator draws from a `ChaCha8Rng` seeded with the caller's seed,
//! so a capture is a pure function of its arguments on every platform. Rows
//! are built and normalized in f64, then stored as f32.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::capture::{AttentionCapture, CaptureDims};
use crate::error::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthShape {
    pub t: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl SynthShape {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            layers: 1,
            heads: 1,
            kv_heads: 1,
            head_dim: 16,
        }
    }

    pub fn layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    /// Sets the query-head count and, with it, a one-to-one KV map.
    pub fn heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self.kv_heads = heads;
        self
    }

    pub fn kv_heads(mut self, kv_heads: usize) -> Self {
        self.kv_heads = kv_heads;
        self
    }

    pub fn head_dim(mut self, head_dim: usize) -> Self {
        self.head_dim = head_dim;
        self
    }

    fn check(&self) -> Result<(), SynthError> {
        if self.t < 2 {
            return Err(SynthError::PromptTooShort(self.t));
        }
        if self.layers == 0 || self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(SynthError::Argument("layers, heads, kv_heads and head_dim must be positive".into()));
        }
        if self.kv_heads > self.heads || self.heads % self.kv_heads != 0 {
            return Err(SynthError::Argument(format!(
                "{} query heads cannot be grouped onto {} kv heads",
                self.heads, self.kv_heads
            )));
        }
        Ok(())
    }

    fn dims(&self) -> CaptureDims {
        CaptureDims {
            t: self.t,
            layers: self.layers,
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
        }
    }
}

/// Ground truth planted by a generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub planted_targets: BTreeSet<usize>,
    pub slot_of_target: Option<BTreeMap<usize, usize>>,
    pub decode_law: Option<Vec<f64>>,
    /// Per-mode conditional laws `nu_m` (multi-target generator only).
    pub modes: Vec<Vec<f64>>,
    /// Key-index basins `R_m` (multi-target generator only).
    pub basins: Vec<Vec<usize>>,
    /// Query positions that attend to each mode (multi-target generator only).
    pub anchor_positions: Vec<usize>,
}

struct Builder {
    shape: SynthShape,
    attention: Vec<Vec<f32>>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(shape: SynthShape, seed: u64) -> Self {
        let t = shape.t;
        Self {
            shape,
            attention: vec![vec![0f32; shape.heads * t * t]; shape.layers],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Flat-Dirichlet weights over `[0, u]`.
    fn exchangeable(&mut self, u: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..=u).map(|_| self.rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    }

    fn set_row(&mut self, layer: usize, head: usize, u: usize, row: &[f64]) {
        let t = self.shape.t;
        let s: f64 = row.iter().sum();
        let start = (head * t + u) * t;
        for (i, w) in row.iter().enumerate() {
            self.attention[layer][start + i] = (w / s) as f32;
        }
    }

    fn finish(mut self, meta: BTreeMap<String, String>) -> AttentionCapture {
        let s = self.shape;
        let n = s.kv_heads * s.t * s.head_dim;
        let values: Vec<Vec<f32>> = (0..s.layers)
            .map(|_| {
                (0..n)
                    .map(|_| self.rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect()
            })
            .collect();
        let group = s.heads / s.kv_heads;
        let kv_map = (0..s.heads).map(|h| h / group).collect();
        AttentionCapture::new(s.dims(), self.attention, values, kv_map, meta)
            .expect("synthetic capture satisfies the capture invariants")
    }
}

fn meta(kind: &str, seed: u64) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("generator".to_string(), kind.to_string());
    m.insert("seed".to_string(), seed.to_string());
    m
}

/// Every row is an independent flat-Dirichlet draw over its causal prefix.
pub fn synth_exchangeable(shape: SynthShape, seed: u64) -> Result<(AttentionCapture, SyntheticTruth), SynthError> {
    shape.check()?;
    let mut b = Builder::new(shape, seed);
    for l in 0..shape.layers {
        for h in 0..shape.heads {
            for u in 0..shape.t {
                let row = b.exchangeable(u);
                b.set_row(l, h, u, &row);
            }
        }
    }
    Ok((b.finish(meta("exchangeable", seed)), SyntheticTruth::default()))
}

/// Background shared by the non-target keys of a planted-needle capture.
#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    /// Flat-Dirichlet background only.
    Exchangeable,
    /// Every head adds mass `tau` to each distractor key on top of the
    /// exchangeable background.
    Structured { distractors: Vec<usize>, tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSpec {
    pub targets: Vec<usize>,
    /// Mass each active head adds to each visible target.
    pub contrast: f64,
    pub active_heads: usize,
    pub background: Background,
}

/// Sparse retrieval-head model: heads `0..r` add `contrast` to every target
/// they can see; the other heads carry background only.
pub fn synth_planted_needle(
    shape: SynthShape,
    spec: &NeedleSpec,
    seed: u64,
) -> Result<(AttentionCapture, SyntheticTruth), SynthError> {
    shape.check()?;
    let t = shape.t;
    if spec.active_heads == 0 || spec.active_heads > shape.heads {
        return Err(SynthError::Argument(format!(
            "active heads r={} must lie in [1, {}]",
            spec.active_heads, shape.heads
        )));
    }
    if !(spec.contrast >= 0.0 && spec.contrast.is_finite()) {
        return Err(SynthError::Argument(format!("contrast must be finite and nonnegative, got {}", spec.contrast)));
    }
    if let Some(&bad) = spec.targets.iter().find(|&&i| i >= t) {
        return Err(SynthError::Argument(format!("target {bad} outside [0, {t})")));
    }
    let targets: BTreeSet<usize> = spec.targets.iter().copied().collect();
    let (distractors, tau): (BTreeSet<usize>, f64) = match &spec.background {
        Background::Exchangeable => (BTreeSet::new(), 0.0),
        Background::Structured { distractors, tau } => {
            if let Some(&bad) = distractors.iter().find(|&&i| i >= t || targets.contains(&i)) {
                return Err(SynthError::Argument(format!(
                    "distractor {bad} is outside [0, {t}) or collides with a target"
                )));
            }
            if !(*tau >= 0.0 && tau.is_finite()) {
                return Err(SynthError::Argument(format!("tau must be finite and nonnegative, got {tau}")));
            }
            (distractors.iter().copied().collect(), *tau)
        }
    };
    let planted = spec.contrast * targets.len() as f64 + tau * distractors.len() as f64;
    if planted > 1.0 {
        return Err(SynthError::Argument(format!(
            "planted mass {planted} exceeds one row; background scale would be negative"
        )));
    }

    let mut b = Builder::new(shape, seed);
    for l in 0..shape.layers {
        for h in 0..shape.heads {
            let delta = if h < spec.active_heads { spec.contrast } else { 0.0 };
            for u in 0..t {
                let mut row = b.exchangeable(u);
                let seen_targets = targets.range(..=u).count() as f64;
                let seen_distractors = distractors.range(..=u).count() as f64;
                let scale = 1.0 - delta * seen_targets - tau * seen_distractors;
                row.iter_mut().for_each(|w| *w *= scale);
                for &i in targets.range(..=u) {
                    row[i] += delta;
                }
                for &i in distractors.range(..=u) {
                    row[i] += tau;
                }
                b.set_row(l, h, u, &row);
            }
        }
    }
    let mut m = meta("planted_needle", seed);
    m.insert("contrast".into(), spec.contrast.to_string());
    m.insert("active_heads".into(), spec.active_heads.to_string());
    let truth = SyntheticTruth {
        planted_targets: targets,
        ..SyntheticTruth::default()
    };
    Ok((b.finish(m), truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitargetSpec {
    pub weights: Vec<f64>,
    /// Mass each mode law leaks outside its basin.
    pub eps: f64,
    /// Basin width in tokens; defaults to a quarter of each mode's share of the prefix.
    pub basin_width: Option<usize>,
}

/// Layout of a multi-target prompt: basins in the prefix, one question anchor
/// per mode just before the tail, and a tail that leans on the heaviest mode.
pub fn synth_multitarget(
    shape: SynthShape,
    spec: &MultitargetSpec,
    seed: u64,
) -> Result<(AttentionCapture, SyntheticTruth), SynthError> {
    shape.check()?;
    let t = shape.t;
    let n = spec.weights.len();
    if n == 0 {
        return Err(SynthError::Argument("at least one mode is required".into()));
    }
    if spec.weights.iter().any(|w| !(*w >= 0.0)) || (spec.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Argument("mode weights must be nonnegative and sum to 1".into()));
    }
    if !(0.0..1.0).contains(&spec.eps) {
        return Err(SynthError::Argument(format!("separation eps must lie in [0, 1), got {}", spec.eps)));
    }
    let tail = (t / 8).max(1);
    if t < tail + n + n {
        return Err(SynthError::Argument(format!("T={t} is too short for {n} modes")));
    }
    let prefix = t - tail - n;
    let share = prefix / n;
    let width = spec.basin_width.unwrap_or((share / 4).max(1));
    if width == 0 || width > share {
        return Err(SynthError::Argument(format!(
            "basin width {width} does not fit {n} basins in a {prefix}-token prefix"
        )));
    }
    let basins: Vec<Vec<usize>> = (0..n)
        .map(|m| {
            let start = m * share + (share - width) / 2;
            (start..start + width).collect()
        })
        .collect();
    let in_basin: BTreeSet<usize> = basins.iter().flatten().copied().collect();
    let outside: Vec<usize> = (0..prefix).filter(|i| !in_basin.contains(i)).collect();
    if spec.eps > 0.0 && outside.is_empty() {
        return Err(SynthError::Argument("eps > 0 needs prefix tokens outside every basin".into()));
    }
    let modes: Vec<Vec<f64>> = basins
        .iter()
        .map(|basin| {
            let mut nu = vec![0.0; t];
            for &i in basin {
                nu[i] = (1.0 - spec.eps) / width as f64;
            }
            if spec.eps > 0.0 {
                for &i in &outside {
                    nu[i] = spec.eps / outside.len() as f64;
                }
            }
            nu
        })
        .collect();
    let mut decode_law = vec![0.0; t];
    for (w, nu) in spec.weights.iter().zip(&modes) {
        for (d, x) in decode_law.iter_mut().zip(nu) {
            *d += w * x;
        }
    }
    let anchors: Vec<usize> = (prefix..prefix + n).collect();
    let dominant = spec
        .weights
        .iter()
        .enumerate()
        .fold(0, |best, (m, &w)| if w > spec.weights[best] { m } else { best });

    let mut b = Builder::new(shape, seed);
    for l in 0..shape.layers {
        for h in 0..shape.heads {
            for u in 0..t {
                let mut row = b.exchangeable(u);
                let planted = if u >= prefix + n {
                    Some((0.7, dominant))
                } else if u >= prefix {
                    Some((0.9, u - prefix))
                } else {
                    None
                };
                if let Some((mix, m)) = planted {
                    for (i, w) in row.iter_mut().enumerate() {
                        *w = (1.0 - mix) * *w + mix * modes[m][i];
                    }
                }
                b.set_row(l, h, u, &row);
            }
        }
    }
    let mut slot_of_target = BTreeMap::new();
    for (m, basin) in basins.iter().enumerate() {
        for &i in basin {
            slot_of_target.insert(i, m);
        }
    }
    let mut m = meta("multitarget", seed);
    m.insert("modes".into(), n.to_string());
    m.insert("eps".into(), spec.eps.to_string());
    let truth = SyntheticTruth {
        planted_targets: in_basin,
        slot_of_target: Some(slot_of_target),
        decode_law: Some(decode_law),
        modes,
        basins,
        anchor_positions: anchors,
    };
    Ok((b.finish(m), truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_below_two_is_rejected() {
        assert_eq!(
            synth_exchangeable(SynthShape::new(1), 0).unwrap_err(),
            SynthError::PromptTooShort(1)
        );
    }

    #[test]
    fn same_seed_same_capture() {
        let shape = SynthShape::new(16).layers(2).heads(2);
        let (a, _) = synth_exchangeable(shape, 9).unwrap();
        let (b, _) = synth_exchangeable(shape, 9).unwrap();
        let (c, _) = synth_exchangeable(shape, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn two_token_rows_are_symmetric_on_average() {
        let mut sum = [0.0f64; 2];
        let n = 4000;
        for seed in 0..n {
            let (cap, _) = synth_exchangeable(SynthShape::new(2), seed).unwrap();
            sum[0] += cap.attn(0, 0, 1, 0);
            sum[1] += cap.attn(0, 0, 1, 1);
        }
        // Var of a flat Dirichlet(1,1) coordinate is 1/12
        let se = (1.0f64 / 12.0 / n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64 - 0.5).abs() < 4.0 * se);
        }
    }

    #[test]
    fn too_many_active_heads() {
        let spec = NeedleSpec {
            targets: vec![3],
            contrast: 0.2,
            active_heads: 3,
            background: Background::Exchangeable,
        };
        assert!(matches!(
            synth_planted_needle(SynthShape::new(8).heads(2), &spec, 0),
            Err(SynthError::Argument(_))
        ));
    }

    #[test]
    fn planted_mass_over_one_is_rejected() {
        let spec = NeedleSpec {
            targets: vec![1, 2, 3],
            contrast: 0.4,
            active_heads: 1,
            background: Background::Exchangeable,
        };
        assert!(synth_planted_needle(SynthShape::new(8), &spec, 0).is_err());
    }

    #[test]
    fn multitarget_weights_must_sum_to_one() {
        let spec = MultitargetSpec {
            weights: vec![0.5, 0.4],
            eps: 0.0,
            basin_width: None,
        };
        assert!(matches!(
            synth_multitarget(SynthShape::new(64), &spec, 0),
            Err(SynthError::Argument(_))
        ));
    }

    #[test]
    fn two_disjoint_basins_hold_full_mass() {
        let spec = MultitargetSpec {
            weights: vec![0.5, 0.5],
            eps: 0.0,
            basin_width: None,
        };
        let (_, truth) = synth_multitarget(SynthShape::new(64), &spec, 3).unwrap();
        assert_eq!(truth.basins.len(), 2);
        let a: BTreeSet<_> = truth.basins[0].iter().collect();
        assert!(truth.basins[1].iter().all(|i| !a.contains(i)));
        for (nu, basin) in truth.modes.iter().zip(&truth.basins) {
            let mass: f64 = basin.iter().map(|&i| nu[i]).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
        let total: f64 = truth.decode_law.as_ref().unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn four_modes_with_leakage_keep_ninety_percent_in_basin() {
        let spec = MultitargetSpec {
            weights: vec![0.25; 4],
            eps: 0.1,
            basin_width: None,
        };
        let (_, truth) = synth_multitarget(SynthShape::new(128), &spec, 1).unwrap();
        for (nu, basin) in truth.modes.iter().zip(&truth.basins) {
            let mass: f64 = basin.iter().map(|&i| nu[i]).sum();
            assert!(mass >= 0.9 - 1e-12);
            assert!((nu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_mode_is_a_single_basin() {
        let spec = MultitargetSpec {
            weights: vec![1.0],
            eps: 0.0,
            basin_width: Some(1),
        };
        let (_, truth) = synth_multitarget(SynthShape::new(32), &spec, 0).unwrap();
        assert_eq!(truth.planted_targets.len(), 1);
        let law = truth.decode_law.unwrap();
        let target = *truth.planted_targets.iter().next().unwrap();
        assert_eq!(law[target], 1.0);
    }
}
