//! Stage II: value-consequence block scores.
//!
//! For each selected layer, proxy query and head, a block's deletion cost is
//! its leverage-scaled attention mass times the squared distance between the
//! block's value centroid and the full attention output.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::access::ProxyBank;
use crate::capture::AttentionCapture;
use crate::contract::{contract_fingerprint, BlockPartition, ScoreVector, SelectorContract, StageTag};
use crate::error::DiagnosticError;

/// How the leverage denominator is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Leverage {
    /// `max(1 - a, eps_a)`.
    #[default]
    MaxClip,
    /// `1 - a + eps_a`.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Params {
    pub eps_a: f64,
    pub eps_mu: f64,
    pub leverage: Leverage,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Self {
            eps_a: 1e-2,
            eps_mu: 1e-8,
            leverage: Leverage::MaxClip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "param")]
pub enum Variant {
    Full,
    NoLev,
    NoValue,
    SupportOnly,
    /// Full per-group costs pooled by log-sum-exp at temperature `tau_g`.
    SoftRobust(f64),
    /// Leverage exponent interpolation: `a^2 gamma^(-2 alpha) ||mu - o||^2`.
    AlphaBlend(f64),
    /// Host token scores averaged per block.
    HostBlockMean,
    /// Host block mean plus `alpha` times the full value-consequence score.
    AdditiveAdapter(f64),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoLev => "nolev".into(),
            Variant::NoValue => "novalue".into(),
            Variant::SupportOnly => "support_only".into(),
            Variant::SoftRobust(t) => format!("soft_robust({t})"),
            Variant::AlphaBlend(a) => format!("alpha_blend({a})"),
            Variant::HostBlockMean => "host_block_mean".into(),
            Variant::AdditiveAdapter(a) => format!("additive_adapter({a})"),
        }
    }
}

/// Block mass, value centroid, and full output for one (layer, head, query).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub a: f64,
    pub mu: Vec<f64>,
    pub o: Vec<f64>,
}

impl BlockStats {
    pub fn distance2(&self) -> f64 {
        self.mu.iter().zip(&self.o).map(|(m, o)| (m - o) * (m - o)).sum()
    }
}

/// `o = sum_i A[u, i] V[kappa(h), i]`.
pub fn attention_output(capture: &AttentionCapture, l: usize, h: usize, u: usize) -> Vec<f64> {
    let kv = capture.kv_head_of(h);
    let mut o = vec![0.0; capture.head_dim()];
    for (i, &w) in capture.attn_row(l, h, u)[..=u].iter().enumerate() {
        if w != 0.0 {
            for (acc, &v) in o.iter_mut().zip(capture.value(l, kv, i)) {
                *acc += w as f64 * v as f64;
            }
        }
    }
    o
}

pub fn block_stats(
    capture: &AttentionCapture,
    l: usize,
    h: usize,
    u: usize,
    block: Range<usize>,
    eps_mu: f64,
) -> BlockStats {
    let o = attention_output(capture, l, h, u);
    block_stats_with_output(capture, l, h, u, block, eps_mu, o)
}

fn block_stats_with_output(
    capture: &AttentionCapture,
    l: usize,
    h: usize,
    u: usize,
    block: Range<usize>,
    eps_mu: f64,
    o: Vec<f64>,
) -> BlockStats {
    let kv = capture.kv_head_of(h);
    let row = capture.attn_row(l, h, u);
    let mut a = 0.0;
    let mut mu = vec![0.0; capture.head_dim()];
    for i in block {
        let w = row[i] as f64;
        if w != 0.0 {
            a += w;
            for (acc, &v) in mu.iter_mut().zip(capture.value(l, kv, i)) {
                *acc += w * v as f64;
            }
        }
    }
    let denom = a.max(eps_mu);
    mu.iter_mut().for_each(|m| *m /= denom);
    BlockStats { a, mu, o }
}

fn gamma(a: f64, params: &Stage2Params) -> f64 {
    match params.leverage {
        Leverage::MaxClip => (1.0 - a).max(params.eps_a),
        Leverage::Additive => 1.0 - a + params.eps_a,
    }
}

/// Per-(layer, head, query) deletion cost under `variant`. Pooling-level
/// variants use the full cost.
pub fn deletion_cost(stats: &BlockStats, params: &Stage2Params, variant: Variant) -> f64 {
    let a = stats.a;
    let g = gamma(a, params);
    match variant {
        Variant::Full | Variant::SoftRobust(_) | Variant::AdditiveAdapter(_) | Variant::HostBlockMean => {
            (a / g).powi(2) * stats.distance2()
        }
        Variant::NoLev => a * a * stats.distance2(),
        Variant::NoValue => (a / g).powi(2),
        Variant::SupportOnly => a,
        Variant::AlphaBlend(alpha) => a * a * g.powf(-2.0 * alpha) * stats.distance2(),
    }
}

/// Block-level score `S(c)` with its per-group components `D_m(c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScoreVector {
    pub blocks: Vec<Range<usize>>,
    pub scores: Vec<f64>,
    /// `M x N_b` group scores, when the score came from a proxy bank.
    pub per_group: Option<Vec<Vec<f64>>>,
    pub variant: Variant,
    pub eps_a: f64,
    pub eps_mu: f64,
    pub contract_fingerprint: String,
}

impl BlockScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn check(&self) -> Result<(), DiagnosticError> {
        if self.scores.len() != self.blocks.len() {
            return Err(DiagnosticError::Length(self.scores.len(), self.blocks.len()));
        }
        if let Some(c) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(DiagnosticError::Undefined(format!("block {c} score is not finite")));
        }
        Ok(())
    }
}

/// Pools the proxy bank's deletion costs into `D_m(c)` and `S(c)`.
///
/// `group_weights` defaults to `w_m = 1` for every group; when given it must
/// lie on the simplex.
pub fn group_block_scores(
    capture: &AttentionCapture,
    contract: &SelectorContract,
    bank: &ProxyBank,
    blocks: &BlockPartition,
    variant: Variant,
    params: &Stage2Params,
    group_weights: Option<&[f64]>,
) -> Result<BlockScoreVector, DiagnosticError> {
    contract.check_capture(capture.t(), capture.layers())?;
    bank.validate()?;
    if bank.t != capture.t() {
        return Err(DiagnosticError::Domain(bank.t, capture.t()));
    }
    if blocks.t != capture.t() {
        return Err(DiagnosticError::Partition(format!(
            "partition covers {} tokens, capture has {}",
            blocks.t,
            capture.t()
        )));
    }
    if matches!(variant, Variant::HostBlockMean | Variant::AdditiveAdapter(_)) {
        return Err(DiagnosticError::Argument(format!(
            "{} needs host scores; use host_block_means or additive_adapter",
            variant.label()
        )));
    }
    let m = bank.groups.len();
    let weights: Vec<f64> = match group_weights {
        None => vec![1.0; m],
        Some(w) => {
            if w.len() != m || w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(DiagnosticError::Argument(format!(
                    "group weights must be {m} nonnegative values summing to 1"
                )));
            }
            w.to_vec()
        }
    };
    let group_of: Vec<(usize, usize, f64)> = bank
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, qs)| qs.iter().map(move |&u| (g, u)))
        .map(|(g, u)| (g, u, bank.weight_of(u).expect("group member is a bank query")))
        .collect();
    let nb = blocks.len();
    let cells: Vec<(usize, usize, f64)> = contract
        .layer_weights
        .iter()
        .flat_map(|(&l, &beta)| (0..capture.heads()).map(move |h| (l, h, beta)))
        .collect();
    let partials: Vec<Vec<Vec<f64>>> = cells
        .par_iter()
        .map(|&(l, h, _)| {
            let mut d = vec![vec![0.0; nb]; m];
            for &(g, u, r) in &group_of {
                let o = attention_output(capture, l, h, u);
                for (c, block) in blocks.blocks.iter().enumerate() {
                    let stats = block_stats_with_output(capture, l, h, u, block.clone(), params.eps_mu, o.clone());
                    d[g][c] += r * deletion_cost(&stats, params, variant);
                }
            }
            d
        })
        .collect();
    let mut per_group = vec![vec![0.0; nb]; m];
    for ((_, _, beta), part) in cells.iter().zip(&partials) {
        for (acc, p) in per_group.iter_mut().zip(part) {
            for (a, x) in acc.iter_mut().zip(p) {
                *a += beta * x;
            }
        }
    }
    let scores = match variant {
        Variant::SoftRobust(tau) => soft_robust_pool(&per_group, tau)?,
        _ => (0..nb)
            .map(|c| per_group.iter().zip(&weights).map(|(d, w)| w * d[c]).sum())
            .collect(),
    };
    let out = BlockScoreVector {
        blocks: blocks.blocks.clone(),
        scores,
        per_group: Some(per_group),
        variant,
        eps_a: params.eps_a,
        eps_mu: params.eps_mu,
        contract_fingerprint: contract_fingerprint(contract),
    };
    out.check()?;
    Ok(out)
}

/// `S_rob(c) = tau log sum_m exp(D_m(c) / tau)`, evaluated stably.
pub fn soft_robust_pool(per_group: &[Vec<f64>], tau_g: f64) -> Result<Vec<f64>, DiagnosticError> {
    if !(tau_g > 0.0 && tau_g.is_finite()) {
        return Err(DiagnosticError::Argument(format!("tau_g must be positive, got {tau_g}")));
    }
    let first = per_group
        .first()
        .ok_or_else(|| DiagnosticError::Argument("no groups to pool".into()))?;
    if per_group.iter().any(|d| d.len() != first.len()) {
        return Err(DiagnosticError::Argument("groups cover different block counts".into()));
    }
    Ok((0..first.len())
        .map(|c| {
            let max = per_group.iter().map(|d| d[c]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = per_group.iter().map(|d| ((d[c] - max) / tau_g).exp()).sum();
            max + tau_g * s.ln()
        })
        .collect())
}

/// The `r` blocks with the largest worst-group cost, lower index first on ties.
pub fn reserve_blocks(per_group: &[Vec<f64>], r: usize) -> Result<Vec<usize>, DiagnosticError> {
    let nb = per_group.first().map_or(0, |d| d.len());
    if r > nb {
        return Err(DiagnosticError::Argument(format!("reserve of {r} blocks exceeds {nb}")));
    }
    let worst: Vec<f64> = (0..nb)
        .map(|c| per_group.iter().map(|d| d[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&a, &b| worst[b].total_cmp(&worst[a]).then(a.cmp(&b)));
    let mut out = order[..r].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Mean host token score per block.
pub fn host_block_means(host: &ScoreVector, blocks: &BlockPartition) -> Result<BlockScoreVector, DiagnosticError> {
    if host.len() != blocks.t {
        return Err(DiagnosticError::Partition(format!(
            "host scores cover {} tokens, partition covers {}",
            host.len(),
            blocks.t
        )));
    }
    let defaults = Stage2Params::default();
    Ok(BlockScoreVector {
        blocks: blocks.blocks.clone(),
        scores: blocks
            .blocks
            .iter()
            .map(|b| host.values[b.clone()].iter().sum::<f64>() / b.len() as f64)
            .collect(),
        per_group: None,
        variant: Variant::HostBlockMean,
        eps_a: defaults.eps_a,
        eps_mu: defaults.eps_mu,
        contract_fingerprint: host.contract_fingerprint.clone(),
    })
}

/// `S(c) = host_mean(c) + alpha * S_value(c)`. At `alpha = 0` the scores are
/// exactly the host block means.
pub fn additive_adapter(
    host_means: &BlockScoreVector,
    value: &BlockScoreVector,
    alpha: f64,
) -> Result<BlockScoreVector, DiagnosticError> {
    if host_means.blocks != value.blocks {
        return Err(DiagnosticError::Partition("host and value scores use different blocks".into()));
    }
    if !alpha.is_finite() {
        return Err(DiagnosticError::Argument(format!("alpha must be finite, got {alpha}")));
    }
    let scores = if alpha == 0.0 {
        host_means.scores.clone()
    } else {
        host_means.scores.iter().zip(&value.scores).map(|(h, v)| h + alpha * v).collect()
    };
    let out = BlockScoreVector {
        scores,
        per_group: value.per_group.clone(),
        variant: Variant::AdditiveAdapter(alpha),
        eps_a: value.eps_a,
        eps_mu: value.eps_mu,
        contract_fingerprint: host_means.contract_fingerprint.clone(),
        blocks: host_means.blocks.clone(),
    };
    out.check()?;
    Ok(out)
}

/// Broadcasts block scores to their tokens, keeping the host's reserved tail
/// and fingerprint so only the ranking slot changes.
pub fn stage2_substitute(
    host: &ScoreVector,
    block_scores: &BlockScoreVector,
    blocks: &BlockPartition,
) -> Result<ScoreVector, DiagnosticError> {
    if block_scores.blocks != blocks.blocks {
        return Err(DiagnosticError::Partition("block scores and partition disagree".into()));
    }
    if host.len() != blocks.t {
        return Err(DiagnosticError::Partition(format!(
            "host scores cover {} tokens, partition covers {}",
            host.len(),
            blocks.t
        )));
    }
    let mut values = vec![0.0; blocks.t];
    for (block, &s) in blocks.blocks.iter().zip(&block_scores.scores) {
        values[block.clone()].iter_mut().for_each(|v| *v = s);
    }
    Ok(ScoreVector::new(
        values,
        StageTag::Stage2BlockBroadcast,
        host.reserved_tail,
        host.contract_fingerprint.clone(),
    )?)
}
