//! Stage I: access-support scorers, the proxy bank, the ordered-substitution
//! error decomposition, TV utilities, and closed-form exposure calculators.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::capture::AttentionCapture;
use crate::contract::{contract_fingerprint, KeptSet, ScoreVector, SelectorContract, StageTag};
use crate::error::{ContractError, DiagnosticError};

/// Runs `f` for every (layer, head) in the contract's layer set, in parallel,
/// and sums `beta_l * f(l, h)` in a fixed order.
fn pooled<F>(capture: &AttentionCapture, contract: &SelectorContract, f: F) -> Vec<f64>
where
    F: Fn(usize, usize) -> Vec<f64> + Sync,
{
    let cells: Vec<(usize, usize, f64)> = contract
        .layer_weights
        .iter()
        .flat_map(|(&l, &beta)| (0..capture.heads()).map(move |h| (l, h, beta)))
        .collect();
    let partials: Vec<Vec<f64>> = cells.par_iter().map(|&(l, h, _)| f(l, h)).collect();
    let mut out = vec![0.0; capture.t()];
    for ((_, _, beta), part) in cells.iter().zip(&partials) {
        for (o, x) in out.iter_mut().zip(part) {
            *o += beta * x;
        }
    }
    out
}

/// Column sums of `A_{l,h}` over the query rows in `rows`.
fn column_sums(capture: &AttentionCapture, l: usize, h: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; capture.t()];
    for u in rows {
        for (o, &w) in out.iter_mut().zip(&capture.attn_row(l, h, u)[..=u]) {
            *o += w as f64;
        }
    }
    out
}

fn finish(values: Vec<f64>, contract: &SelectorContract) -> Result<ScoreVector, ContractError> {
    ScoreVector::new(
        values,
        StageTag::Stage1,
        contract.reserved_tail,
        contract_fingerprint(contract),
    )
}

/// Cumulative attention received by each key over every causal query.
pub fn score_cumulative(capture: &AttentionCapture, contract: &SelectorContract) -> Result<ScoreVector, ContractError> {
    contract.check_capture(capture.t(), capture.layers())?;
    let t = capture.t();
    finish(pooled(capture, contract, |l, h| column_sums(capture, l, h, 0..t)), contract)
}

/// Cumulative score divided by the observer count `N_i = T - i`.
pub fn score_count_debiased(capture: &AttentionCapture, contract: &SelectorContract) -> Result<ScoreVector, ContractError> {
    let mut s = score_cumulative(capture, contract)?;
    let t = s.len();
    for (i, v) in s.values.iter_mut().enumerate() {
        *v /= (t - i) as f64;
    }
    Ok(s)
}

/// Mean pooling along the key axis with replicate padding at the edges.
pub fn pool_scores(scores: &[f64], kernel: usize) -> Vec<f64> {
    if kernel <= 1 || scores.is_empty() {
        return scores.to_vec();
    }
    let r = (kernel / 2) as isize;
    let last = scores.len() as isize - 1;
    (0..scores.len() as isize)
        .map(|i| (i - r..=i + r).map(|j| scores[j.clamp(0, last) as usize]).sum::<f64>() / kernel as f64)
        .collect()
}

/// Attention from the last `W` queries, pooled with the contract kernel.
pub fn score_obs_window(capture: &AttentionCapture, contract: &SelectorContract) -> Result<ScoreVector, ContractError> {
    contract.check_capture(capture.t(), capture.layers())?;
    let (t, w) = (capture.t(), contract.observation_window);
    if w == 0 {
        return Err(ContractError::Invalid("observation-window scoring needs W >= 1".into()));
    }
    let raw = pooled(capture, contract, |l, h| column_sums(capture, l, h, t - w..t));
    finish(pool_scores(&raw, contract.pooling_kernel), contract)
}

/// Decode-proximal query bank: recency-weighted tail queries plus anchors,
/// optionally partitioned into groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    pub t: usize,
    pub tail: Vec<usize>,
    pub anchors: Vec<usize>,
    pub tau_q: f64,
    /// Distinct query positions, ascending.
    pub queries: Vec<usize>,
    /// Normalized weight `r_u` for each entry of `queries`.
    pub weights: Vec<f64>,
    /// Partition of `queries` into groups of query positions.
    pub groups: Vec<Vec<usize>>,
}

impl ProxyBank {
    pub fn weight_of(&self, u: usize) -> Option<f64> {
        self.queries.binary_search(&u).ok().map(|p| self.weights[p])
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Assembles a bank from explicit weights and groups and checks every
    /// invariant.
    pub fn from_parts(
        t: usize,
        tail: Vec<usize>,
        anchors: Vec<usize>,
        tau_q: f64,
        weighted: BTreeMap<usize, f64>,
        groups: Vec<Vec<usize>>,
    ) -> Result<Self, DiagnosticError> {
        let bank = Self {
            t,
            tail,
            anchors,
            tau_q,
            queries: weighted.keys().copied().collect(),
            weights: weighted.values().copied().collect(),
            groups,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), DiagnosticError> {
        if self.queries.is_empty() {
            return Err(DiagnosticError::Argument("proxy bank is empty".into()));
        }
        if let Some(&u) = self.queries.iter().find(|&&u| u >= self.t) {
            return Err(DiagnosticError::Argument(format!("proxy query {u} outside [0, {})", self.t)));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DiagnosticError::Argument("proxy weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DiagnosticError::Argument(format!("proxy weights sum to {total}")));
        }
        let mut seen: Vec<usize> = self.groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen != self.queries || self.groups.iter().any(|g| g.is_empty()) {
            return Err(DiagnosticError::Argument("groups must partition the proxy queries".into()));
        }
        Ok(())
    }
}

/// Builds the bank over `[T-w, T)` plus `anchors`. Tail weights decay as
/// `exp(-(T-1-u)/tau_q)`, so the last prefill query has weight one like an
/// anchor; `tau_q = inf` gives uniform weights. Anchors inside the tail keep
/// their tail weight.
pub fn build_proxy_bank(
    t: usize,
    tail_width: usize,
    anchors: &[usize],
    tau_q: f64,
    groups: Option<Vec<Vec<usize>>>,
) -> Result<ProxyBank, DiagnosticError> {
    if tail_width == 0 || tail_width > t {
        return Err(DiagnosticError::Argument(format!("tail width {tail_width} must lie in [1, {t}]")));
    }
    if !(tau_q > 0.0) {
        return Err(DiagnosticError::Argument(format!("tau_q must be positive, got {tau_q}")));
    }
    if let Some(&a) = anchors.iter().find(|&&a| a >= t) {
        return Err(DiagnosticError::Argument(format!("anchor {a} outside [0, {t})")));
    }
    let tail: Vec<usize> = (t - tail_width..t).collect();
    let mut raw = BTreeMap::new();
    for &a in anchors {
        raw.insert(a, 1.0);
    }
    for &u in &tail {
        let w = if tau_q.is_infinite() {
            1.0
        } else {
            (-((t - 1 - u) as f64) / tau_q).exp()
        };
        raw.insert(u, w);
    }
    let total: f64 = raw.values().sum();
    raw.values_mut().for_each(|w| *w /= total);
    let mut anchor_list: Vec<usize> = anchors.to_vec();
    anchor_list.sort_unstable();
    anchor_list.dedup();
    let groups = groups.unwrap_or_else(|| vec![raw.keys().copied().collect()]);
    ProxyBank::from_parts(t, tail, anchor_list, tau_q, raw, groups)
}

/// Bank-weighted pooled attention: `s_i = sum_u r_u sum_l beta_l sum_h A[u,i]`.
pub fn score_decode_proximal(
    capture: &AttentionCapture,
    contract: &SelectorContract,
    bank: &ProxyBank,
) -> Result<ScoreVector, DiagnosticError> {
    contract.check_capture(capture.t(), capture.layers())?;
    if bank.t != capture.t() {
        return Err(DiagnosticError::Domain(bank.t, capture.t()));
    }
    let values = pooled(capture, contract, |l, h| {
        let mut out = vec![0.0; capture.t()];
        for (&u, &r) in bank.queries.iter().zip(&bank.weights) {
            for (o, &w) in out.iter_mut().zip(&capture.attn_row(l, h, u)[..=u]) {
                *o += r * w as f64;
            }
        }
        out
    });
    Ok(finish(values, contract)?)
}

/// Per-head attention the window queries send to keys outside the window,
/// keyed by layer. Feeds `head_adaptive` allocation.
pub fn window_prefix_mass(capture: &AttentionCapture, contract: &SelectorContract) -> BTreeMap<usize, Vec<f64>> {
    let t = capture.t();
    let w = contract.observation_window.min(t);
    let rows = if w == 0 { 0..t } else { t - w..t };
    let cutoff = if w == 0 { t } else { t - w };
    contract
        .layers()
        .into_iter()
        .map(|l| {
            let masses = (0..capture.heads())
                .map(|h| {
                    rows.clone()
                        .map(|u| capture.attn_row(l, h, u)[..cutoff.min(u + 1)].iter().map(|&x| x as f64).sum::<f64>())
                        .sum()
                })
                .collect();
            (l, masses)
        })
        .collect()
}

/// Exposure correction `d(i, u)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ExposureCorrection {
    Unit,
    /// `1 / (T - i)`.
    InverseObserverCount,
    /// Explicit table indexed `[i * T + u]`.
    Table(Vec<f64>),
}

/// Layer/head pooling weights `beta_{l,h}(u)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolingWeights {
    /// `beta_l` for every head and query.
    Layers(BTreeMap<usize, f64>),
    /// Explicit weights indexed `[(l * H + h) * T + u]` over all capture layers.
    PerQuery(Vec<f64>),
}

/// One access-support estimator on the zero-extended query domain `[0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessEstimatorSpec {
    pub query_law: Vec<f64>,
    pub exposure: ExposureCorrection,
    pub pooling: PoolingWeights,
}

impl AccessEstimatorSpec {
    fn check(&self, capture: &AttentionCapture) -> Result<(), DiagnosticError> {
        let t = capture.t();
        if self.query_law.len() != t {
            return Err(DiagnosticError::Domain(self.query_law.len(), t));
        }
        let total: f64 = self.query_law.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.query_law.iter().any(|q| *q < 0.0) {
            return Err(DiagnosticError::Argument(format!("query law sums to {total}")));
        }
        if let ExposureCorrection::Table(d) = &self.exposure {
            if d.len() != t * t {
                return Err(DiagnosticError::Length(d.len(), t * t));
            }
        }
        match &self.pooling {
            PoolingWeights::Layers(b) => {
                if let Some(&l) = b.keys().find(|&&l| l >= capture.layers()) {
                    return Err(ContractError::UnknownLayer {
                        layer: l,
                        layers: capture.layers(),
                    }
                    .into());
                }
            }
            PoolingWeights::PerQuery(b) => {
                let n = capture.layers() * capture.heads() * t;
                if b.len() != n {
                    return Err(DiagnosticError::Length(b.len(), n));
                }
            }
        }
        Ok(())
    }

    pub fn exposure_at(&self, t: usize, i: usize, u: usize) -> f64 {
        match &self.exposure {
            ExposureCorrection::Unit => 1.0,
            ExposureCorrection::InverseObserverCount => 1.0 / (t - i) as f64,
            ExposureCorrection::Table(d) => d[i * t + u],
        }
    }

    /// Pooling kernel `f(u, i) = sum_{l,h} beta_{l,h}(u) A_{l,h}[u, i]`.
    pub fn kernel_at(&self, capture: &AttentionCapture, u: usize, i: usize) -> f64 {
        match &self.pooling {
            PoolingWeights::Layers(b) => b
                .iter()
                .map(|(&l, &beta)| beta * (0..capture.heads()).map(|h| capture.attn(l, h, u, i)).sum::<f64>())
                .sum(),
            PoolingWeights::PerQuery(b) => {
                let (t, hh) = (capture.t(), capture.heads());
                let mut s = 0.0;
                for l in 0..capture.layers() {
                    for h in 0..hh {
                        s += b[(l * hh + h) * t + u] * capture.attn(l, h, u, i);
                    }
                }
                s
            }
        }
    }

    /// `u_acc(i) = sum_u q(u) d(i, u) f(u, i)`.
    pub fn access(&self, capture: &AttentionCapture, i: usize) -> Result<f64, DiagnosticError> {
        self.check(capture)?;
        let t = capture.t();
        Ok((0..t)
            .map(|u| self.query_law[u] * self.exposure_at(t, i, u) * self.kernel_at(capture, u, i))
            .sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccessDecomposition {
    pub phase: f64,
    pub exposure: f64,
    pub aggregation: f64,
    pub estimate: f64,
    pub reference: f64,
}

impl AccessDecomposition {
    pub fn sum(&self) -> f64 {
        self.phase + self.exposure + self.aggregation
    }

    pub fn direct(&self) -> f64 {
        self.estimate - self.reference
    }

    /// `|sum - direct|` relative to the scale of the quantities involved.
    pub fn relative_error(&self) -> f64 {
        let scale = self
            .direct()
            .abs()
            .max(self.estimate.abs() + self.reference.abs())
            .max(f64::MIN_POSITIVE);
        (self.sum() - self.direct()).abs() / scale
    }
}

/// Ordered substitution: query law first, then exposure, then pooling.
pub fn decompose_access_error(
    est: &AccessEstimatorSpec,
    reference: &AccessEstimatorSpec,
    capture: &AttentionCapture,
    i: usize,
) -> Result<AccessDecomposition, DiagnosticError> {
    est.check(capture)?;
    reference.check(capture)?;
    let t = capture.t();
    if i >= t {
        return Err(DiagnosticError::Argument(format!("token {i} outside [0, {t})")));
    }
    let mut out = AccessDecomposition {
        phase: 0.0,
        exposure: 0.0,
        aggregation: 0.0,
        estimate: 0.0,
        reference: 0.0,
    };
    for u in 0..t {
        let (qh, qs) = (est.query_law[u], reference.query_law[u]);
        let (dh, ds) = (est.exposure_at(t, i, u), reference.exposure_at(t, i, u));
        let (fh, fs) = (est.kernel_at(capture, u, i), reference.kernel_at(capture, u, i));
        out.phase += (qh - qs) * ds * fs;
        out.exposure += qh * (dh - ds) * fs;
        out.aggregation += qh * dh * (fh - fs);
        out.estimate += qh * dh * fh;
        out.reference += qs * ds * fs;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Expansion {
    /// `u_val * (delta_phase + delta_exp + xi_acc)`.
    pub access_term: f64,
    /// `u_acc * xi_val`.
    pub value_term: f64,
    pub r2: f64,
    /// `Delta_hat(i) - Delta(i)` evaluated directly.
    pub direct: f64,
}

impl Stage2Expansion {
    pub fn sum(&self) -> f64 {
        self.access_term + self.value_term + self.r2
    }
}

/// Splits `u_acc_hat * u_val_hat - u_acc * u_val` into linear terms and the
/// second-order remainder.
pub fn stage2_error_expansion(
    est: &AccessEstimatorSpec,
    reference: &AccessEstimatorSpec,
    value_est: f64,
    value_ref: f64,
    capture: &AttentionCapture,
    i: usize,
) -> Result<Stage2Expansion, DiagnosticError> {
    let d = decompose_access_error(est, reference, capture, i)?;
    let xi_val = value_est - value_ref;
    let access_err = d.sum();
    Ok(Stage2Expansion {
        access_term: value_ref * access_err,
        value_term: d.reference * xi_val,
        r2: access_err * xi_val,
        direct: d.estimate * value_est - d.reference * value_ref,
    })
}

fn check_distribution(p: &[f64], name: &str) -> Result<(), DiagnosticError> {
    if p.iter().any(|x| !(x.is_finite() && *x >= -1e-12)) {
        return Err(DiagnosticError::Argument(format!("{name} has negative or non-finite mass")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DiagnosticError::Argument(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// Total variation `0.5 * sum |p - q|`.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64, DiagnosticError> {
    if p.len() != q.len() {
        return Err(DiagnosticError::Length(p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(tv_unchecked(p, q))
}

pub(crate) fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    (0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyGapReport {
    pub tv_last_proxy: f64,
    pub tv_star_last: Option<f64>,
    pub tv_star_proxy: Option<f64>,
    pub triangle_holds: Option<bool>,
}

/// Measurable proxy gap `TV(p_T, proxy)`, plus the shared term and triangle
/// check when a reference law is supplied.
pub fn tail_k_proxy_gap(p_last: &[f64], proxy: &[f64], p_star: Option<&[f64]>) -> Result<ProxyGapReport, DiagnosticError> {
    let gap = tv(p_last, proxy)?;
    let (shared, star_proxy, holds) = match p_star {
        Some(star) => {
            let a = tv(star, p_last)?;
            let b = tv(star, proxy)?;
            (Some(a), Some(b), Some(b <= a + gap + 1e-12))
        }
        None => (None, None, None),
    };
    Ok(ProxyGapReport {
        tv_last_proxy: gap,
        tv_star_last: shared,
        tv_star_proxy: star_proxy,
        triangle_holds: holds,
    })
}

/// `1 - p_T(K)`; one when the kept set carries no mass.
pub fn projection_residual(kept: &KeptSet, p_last: &[f64]) -> Result<f64, DiagnosticError> {
    if let Some(&i) = kept.indices.iter().find(|&&i| i >= p_last.len()) {
        return Err(DiagnosticError::Argument(format!("kept index {i} outside the law's support")));
    }
    let mass: f64 = kept.indices.iter().map(|&i| p_last[i]).sum();
    Ok((1.0 - mass).clamp(0.0, 1.0))
}

/// Expected cumulative score of 1-indexed position `i` under exchangeable
/// rows: `H_T - H_{i-1}`.
pub fn harmonic_cumulative_expectation(t: usize, i: usize) -> Result<f64, DiagnosticError> {
    if i == 0 || i > t {
        return Err(DiagnosticError::Argument(format!("position {i} outside [1, {t}]")));
    }
    Ok((i..=t).rev().map(|n| 1.0 / n as f64).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveCount {
    pub n_eff: f64,
    /// `r(N) = N_eff / N`.
    pub ratio: f64,
    /// Deterministic tail-high residual `beta_pos * r(N)` left by naive division.
    pub residual: f64,
}

/// Effective observer count under the exponential locality kernel.
pub fn effective_count(n: usize, lambda: f64, beta_pos: f64) -> Result<EffectiveCount, DiagnosticError> {
    if n == 0 || !(lambda > 0.0) {
        return Err(DiagnosticError::Argument(format!("need N >= 1 and lambda > 0, got N={n}, lambda={lambda}")));
    }
    let nf = n as f64;
    let n_eff = (-(lambda * nf)).exp_m1() / (-lambda).exp_m1();
    let ratio = n_eff / nf;
    Ok(EffectiveCount {
        n_eff,
        ratio,
        residual: beta_pos * ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MseOptimum {
    Finite { continuous: f64, integer: u64 },
    Infinite,
}

/// `MSE(N) = (1 - 1/N)^2 S^2 + c sigma^2 / N`.
pub fn mse_at(n: f64, s: f64, sigma: f64, c: f64) -> f64 {
    let bias = 1.0 - 1.0 / n;
    bias * bias * s * s + c * sigma * sigma / n
}

/// Observation count minimizing the debiased estimator's MSE.
///
/// The integer optimum is the first `N` at which `MSE(N+1) - MSE(N)` stops
/// being negative. That difference has the sign of
/// `(2S^2 - c sigma^2) N^2 - c sigma^2 N - S^2`, which stays well conditioned
/// where the MSE curve itself is too flat to compare in floating point.
/// Exact ties go to the smaller count.
pub fn mse_optimal_count(s: f64, sigma: f64, c: Option<f64>) -> Result<MseOptimum, DiagnosticError> {
    let c = c.unwrap_or(1.0);
    if !(sigma > 0.0) || !s.is_finite() || !(c > 0.0) {
        return Err(DiagnosticError::Argument("need sigma > 0, finite S and c > 0".into()));
    }
    let s2 = s * s;
    let noise = c * sigma * sigma;
    let a = 2.0 * s2 - noise;
    if a <= 0.0 {
        return Ok(MseOptimum::Infinite);
    }
    let continuous = 2.0 * s2 / a;
    let step_sign = |n: f64| a * n * n - noise * n - s2;
    // the sign change lies in (continuous - 1, continuous)
    let mut n = (continuous.floor() - 1.0).max(1.0);
    while step_sign(n) < 0.0 {
        n += 1.0;
    }
    Ok(MseOptimum::Finite {
        continuous,
        integer: n as u64,
    })
}

/// `Gamma(N) = 1 + 2 sum_{k=1}^{N-1} (1 - k/N) rho_k`; `rho[0]` is lag one and
/// missing lags are zero.
pub fn correlated_variance_factor(rho: &[f64], n: usize) -> Result<f64, DiagnosticError> {
    if n == 0 {
        return Err(DiagnosticError::Argument("N must be at least 1".into()));
    }
    if rho.iter().any(|r| !(r.abs() <= 1.0)) {
        return Err(DiagnosticError::Argument("lag correlations must lie in [-1, 1]".into()));
    }
    let nf = n as f64;
    Ok(1.0
        + 2.0
            * rho
                .iter()
                .take(n.saturating_sub(1))
                .enumerate()
                .map(|(j, r)| (1.0 - (j + 1) as f64 / nf) * r)
                .sum::<f64>())
}

/// Effective active-head count `(sum m)^2 / sum m^2`, computed on masses
/// scaled by their maximum.
pub fn participation_ratio(mass: &[f64]) -> Result<f64, DiagnosticError> {
    if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(DiagnosticError::Argument("head masses must be finite and nonnegative".into()));
    }
    let max = mass.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(DiagnosticError::Undefined("participation ratio of all-zero mass".into()));
    }
    let s: f64 = mass.iter().map(|m| m / max).sum();
    let s2: f64 = mass.iter().map(|m| (m / max) * (m / max)).sum();
    Ok(s * s / s2)
}

/// Angular gap at which a target gets half the mass among `n` candidates.
pub fn angular_threshold(n: usize, head_dim: usize) -> Result<f64, DiagnosticError> {
    if n < 2 || head_dim == 0 {
        return Err(DiagnosticError::Argument(format!("need n >= 2 and d_h >= 1, got n={n}, d_h={head_dim}")));
    }
    Ok(((n - 1) as f64).ln() / (head_dim as f64).sqrt())
}

/// RoPE frequency `omega_j = theta^(-2(j-1)/d_h)` for 1-indexed `j`.
pub fn rope_frequency(j: usize, theta: f64, head_dim: usize) -> f64 {
    theta.powf(-2.0 * (j as f64 - 1.0) / head_dim as f64)
}

/// `lambda_eff^2 = sum a_j omega_j^2 / sum a_j`, with `weights[0]` on `j = 1`.
pub fn rope_lambda_eff(weights: &[f64], theta: f64, head_dim: usize) -> Result<f64, DiagnosticError> {
    if weights.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || !(theta > 1.0) || head_dim == 0 {
        return Err(DiagnosticError::Argument("need nonnegative weights, theta > 1 and d_h >= 1".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(DiagnosticError::Undefined("frequency weights sum to zero".into()));
    }
    Ok(weights
        .iter()
        .enumerate()
        .map(|(k, a)| a * rope_frequency(k + 1, theta, head_dim).powi(2))
        .sum::<f64>()
        / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::CaptureDims;

    fn uniform_capture(t: usize, heads: usize) -> AttentionCapture {
        let mut layer = vec![0f32; heads * t * t];
        for h in 0..heads {
            for u in 0..t {
                for i in 0..=u {
                    layer[(h * t + u) * t + i] = 1.0 / (u + 1) as f32;
                }
            }
        }
        AttentionCapture::new(
            CaptureDims {
                t,
                layers: 1,
                heads,
                kv_heads: heads,
                head_dim: 1,
            },
            vec![layer],
            vec![vec![0.0; heads * t]],
            (0..heads).collect(),
            Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn cumulative_on_uniform_rows() {
        let cap = uniform_capture(4, 1);
        let c = SelectorContract::uniform(0.5, 1, 1);
        let s = score_cumulative(&cap, &c).unwrap();
        let h4 = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((s.values[0] - h4).abs() < 1e-6);
        assert!((s.values[3] - 0.25).abs() < 1e-6);
        let d = score_count_debiased(&cap, &c).unwrap();
        assert!((d.values[0] - h4 / 4.0).abs() < 1e-6);
        assert!((d.values[3] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn pooling_example() {
        assert_eq!(pool_scores(&[0.0, 3.0, 0.0, 0.0], 3), vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(pool_scores(&[1.0, 2.0], 1), vec![1.0, 2.0]);
    }

    #[test]
    fn full_window_matches_cumulative() {
        let cap = uniform_capture(6, 2);
        let c = SelectorContract::uniform(0.5, 1, 1).with_window(6);
        let a = score_obs_window(&cap, &c).unwrap();
        let b = score_cumulative(&cap, &c).unwrap();
        assert_eq!(a.values, b.values);
        let too_long = SelectorContract::uniform(0.5, 1, 1).with_window(7);
        assert_eq!(
            score_obs_window(&cap, &too_long).unwrap_err(),
            ContractError::WindowTooLong { window: 7, t: 6 }
        );
    }

    #[test]
    fn proxy_bank_weights() {
        let bank = build_proxy_bank(10, 2, &[], 1.0, None).unwrap();
        let e = (-1.0f64).exp();
        assert!((bank.weight_of(8).unwrap() - e / (1.0 + e)).abs() < 1e-15);
        assert!((bank.weight_of(9).unwrap() - 1.0 / (1.0 + e)).abs() < 1e-15);
        let flat = build_proxy_bank(10, 3, &[2], f64::INFINITY, None).unwrap();
        assert!(flat.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        let single = build_proxy_bank(10, 1, &[], 5.0, None).unwrap();
        assert_eq!(single.weights, vec![1.0]);
        assert!(build_proxy_bank(10, 1, &[10], 1.0, None).is_err());
    }

    #[test]
    fn last_query_bank_equals_last_row() {
        let cap = uniform_capture(5, 1);
        let c = SelectorContract::uniform(0.5, 1, 1);
        let bank = build_proxy_bank(5, 1, &[], 1.0, None).unwrap();
        let s = score_decode_proximal(&cap, &c, &bank).unwrap();
        for i in 0..5 {
            assert!((s.values[i] - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv(&[0.5, 0.5], &[0.9, 0.1]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(tv(&[1.0], &[0.5, 0.5]).unwrap_err(), DiagnosticError::Length(1, 2));
    }

    #[test]
    fn residual_examples() {
        let p = vec![0.1; 10];
        let kept = KeptSet::from_entries((0..4).map(|i| (i, crate::contract::Provenance::Token)), "");
        assert!((projection_residual(&kept, &p).unwrap() - 0.6).abs() < 1e-12);
        let all = KeptSet::from_entries((0..10).map(|i| (i, crate::contract::Provenance::Token)), "");
        assert!(projection_residual(&all, &p).unwrap().abs() < 1e-12);
        let mut point = vec![0.0; 10];
        point[9] = 1.0;
        assert_eq!(projection_residual(&kept, &point).unwrap(), 1.0);
    }

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic_cumulative_expectation(2, 1).unwrap(), 1.5);
        assert_eq!(harmonic_cumulative_expectation(7, 7).unwrap(), 1.0 / 7.0);
        let v = harmonic_cumulative_expectation(5, 3).unwrap();
        assert!((v - (1.0 / 3.0 + 0.25 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn effective_count_examples() {
        let one = effective_count(1, 0.5, 1.0).unwrap();
        assert!((one.n_eff - 1.0).abs() < 1e-12 && (one.ratio - 1.0).abs() < 1e-12);
        assert!((effective_count(50, 1e-8, 1.0).unwrap().n_eff - 50.0).abs() < 1e-4);
        assert!(effective_count(10, 1.0, 1.0).unwrap().ratio < effective_count(5, 1.0, 1.0).unwrap().ratio);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_optimal_count(1.0, 2.0, None).unwrap(), MseOptimum::Infinite);
        assert_eq!(
            mse_optimal_count(1.0, 1.0, Some(1.0)).unwrap(),
            MseOptimum::Finite {
                continuous: 2.0,
                integer: 2
            }
        );
        match mse_optimal_count(1e4, 1.0, None).unwrap() {
            MseOptimum::Finite { continuous, integer } => {
                assert!((continuous - 1.0).abs() < 1e-8);
                assert_eq!(integer, 1);
            }
            MseOptimum::Infinite => panic!("strong signal must be finite"),
        }
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(correlated_variance_factor(&[0.0; 5], 6).unwrap(), 1.0);
        assert!((correlated_variance_factor(&[0.5], 2).unwrap() - 1.5).abs() < 1e-15);
        let rho: Vec<f64> = (1..200).map(|k| 0.5f64.powi(k)).collect();
        let limit = 1.0 + 2.0 * rho.iter().sum::<f64>();
        let g = correlated_variance_factor(&rho, 100_000).unwrap();
        assert!((g - limit).abs() < 1e-3);
    }

    #[test]
    fn participation_examples() {
        assert!((participation_ratio(&[3.0, 1.0]).unwrap() - 1.6).abs() < 1e-15);
        assert_eq!(participation_ratio(&[2.0, 2.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(participation_ratio(&[0.0, 0.0]), Err(DiagnosticError::Undefined(_))));
    }

    #[test]
    fn angular_and_rope() {
        assert_eq!(angular_threshold(2, 64).unwrap(), 0.0);
        assert!((angular_threshold(65, 64).unwrap() - 64f64.ln() / 8.0).abs() < 1e-15);
        let a = angular_threshold(10, 32).unwrap();
        let b = angular_threshold(10, 64).unwrap();
        assert!((b / a - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(rope_lambda_eff(&[1.0], 10000.0, 64).unwrap(), 1.0);
        let w2 = rope_lambda_eff(&[0.0, 1.0], 10000.0, 64).unwrap();
        assert!((w2 - 10000f64.powf(-4.0 / 64.0)).abs() < 1e-15);
    }
}
