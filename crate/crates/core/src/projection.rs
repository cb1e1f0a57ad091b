//! Stage III: strict block TopK, token-fill, factorized multi-slot retention,
//! and question-routed proxy banks.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::access::{projection_residual, ProxyBank};
use crate::contract::{budget_tokens, BlockPartition, KeptSet, Provenance, ScoreVector, SelectorContract};
use crate::error::{ContractError, DiagnosticError};
use crate::value::BlockScoreVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub kept: KeptSet,
    pub k: usize,
    pub k_b: usize,
    /// Lattice residual `k - p k_b`.
    pub eps_lat: usize,
    /// Tokens missing from `p k_b` because a partial last block was selected.
    pub shortfall: usize,
    /// Budget left unspent, `k - |kept|`.
    pub slack: usize,
    pub eta_proj: Option<f64>,
    pub kept_blocks: Vec<usize>,
    pub fill_tokens: Vec<usize>,
}

impl ProjectionReport {
    /// Records `eta_proj = 1 - p_T(K)`.
    pub fn with_residual(mut self, p_last: &[f64]) -> Result<Self, DiagnosticError> {
        self.eta_proj = Some(projection_residual(&self.kept, p_last)?);
        Ok(self)
    }
}

fn check_partition(scores: &BlockScoreVector, blocks: &BlockPartition) -> Result<(), DiagnosticError> {
    if scores.blocks != blocks.blocks {
        return Err(DiagnosticError::Partition("block scores and partition disagree".into()));
    }
    Ok(())
}

/// Blocks touched by the last `reserved` tokens.
fn reserved_blocks(blocks: &BlockPartition, reserved: usize) -> BTreeSet<usize> {
    (blocks.t - reserved.min(blocks.t)..blocks.t).map(|i| blocks.block_of(i)).collect()
}

fn block_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn assemble(
    chosen: &BTreeSet<usize>,
    blocks: &BlockPartition,
    reserved: usize,
    k: usize,
    fingerprint: &str,
) -> ProjectionReport {
    let p = blocks.p;
    let k_b = k / p;
    let first_reserved = blocks.t - reserved.min(blocks.t);
    let kept = KeptSet::from_entries(
        chosen.iter().flat_map(|&c| blocks.blocks[c].clone()).map(|i| {
            let tag = if i >= first_reserved {
                Provenance::ReservedTail
            } else {
                Provenance::Block
            };
            (i, tag)
        }),
        fingerprint,
    );
    let size = kept.len();
    ProjectionReport {
        k,
        k_b,
        eps_lat: k - p * k_b,
        shortfall: (p * k_b).saturating_sub(size),
        slack: k.saturating_sub(size),
        eta_proj: None,
        kept_blocks: chosen.iter().copied().collect(),
        fill_tokens: Vec::new(),
        kept,
    }
}

/// Keeps the top `floor(k/p)` blocks by score. Blocks holding reserved-tail
/// tokens are taken first and count toward the block budget.
pub fn block_project(
    block_scores: &BlockScoreVector,
    blocks: &BlockPartition,
    k: usize,
    contract: &SelectorContract,
) -> Result<ProjectionReport, DiagnosticError> {
    check_partition(block_scores, blocks)?;
    if k > blocks.t {
        return Err(ContractError::KTooLarge { k, len: blocks.t }.into());
    }
    let k_b = k / blocks.p;
    let mut chosen = reserved_blocks(blocks, contract.reserved_tail);
    if chosen.len() > k_b {
        return Err(ContractError::ReserveExceedsBudget {
            needed: chosen.len(),
            available: k_b,
        }
        .into());
    }
    for c in block_order(&block_scores.scores) {
        if chosen.len() == k_b {
            break;
        }
        chosen.insert(c);
    }
    Ok(assemble(&chosen, blocks, contract.reserved_tail, k, &block_scores.contract_fingerprint))
}

/// Token-level top-k under the same report format; no lattice slack arises.
pub fn token_project(token_scores: &ScoreVector, k: usize, blocks: &BlockPartition) -> Result<ProjectionReport, DiagnosticError> {
    let kept = crate::contract::top_k(token_scores, k, Default::default())?;
    let k_b = k / blocks.p;
    Ok(ProjectionReport {
        k,
        k_b,
        eps_lat: k - blocks.p * k_b,
        shortfall: 0,
        slack: k - kept.len(),
        eta_proj: None,
        kept_blocks: Vec::new(),
        fill_tokens: Vec::new(),
        kept,
    })
}

/// Spends the remaining budget on the best tokens outside the kept blocks.
/// Block selection is untouched; if too few outside tokens exist the report
/// keeps the leftover slack.
pub fn token_fill(report: &ProjectionReport, token_scores: &ScoreVector) -> Result<ProjectionReport, DiagnosticError> {
    if let Some(&last) = report.kept.indices.last() {
        if last >= token_scores.len() {
            return Err(DiagnosticError::Length(token_scores.len(), last + 1));
        }
    }
    let fill: Vec<usize> = token_scores
        .ranking()
        .into_iter()
        .filter(|&i| !report.kept.contains(i))
        .take(report.slack)
        .collect();
    let mut out = report.clone();
    out.kept = KeptSet::from_entries(
        report
            .kept
            .entries()
            .chain(fill.iter().map(|&i| (i, Provenance::TokenFill))),
        report.kept.contract_fingerprint.clone(),
    );
    out.slack = report.slack - fill.len();
    out.fill_tokens = {
        let mut f = report.fill_tokens.clone();
        f.extend(&fill);
        f.sort_unstable();
        f
    };
    out.eta_proj = None;
    Ok(out)
}

/// Per-slot block selection. Slots pick in round-robin slot order, one block
/// per turn, each taking its best block not already kept, until every slot
/// has spent its budget or run out of blocks.
pub fn factorized_project(
    per_slot: &[BlockScoreVector],
    slot_budgets: &[usize],
    blocks: &BlockPartition,
    k: usize,
    contract: &SelectorContract,
) -> Result<ProjectionReport, DiagnosticError> {
    if per_slot.is_empty() || per_slot.len() != slot_budgets.len() {
        return Err(DiagnosticError::Argument(format!(
            "{} slot score vectors for {} budgets",
            per_slot.len(),
            slot_budgets.len()
        )));
    }
    for s in per_slot {
        check_partition(s, blocks)?;
    }
    if k > blocks.t {
        return Err(ContractError::KTooLarge { k, len: blocks.t }.into());
    }
    let k_b = k / blocks.p;
    let mut chosen = reserved_blocks(blocks, contract.reserved_tail);
    let requested: usize = slot_budgets.iter().sum();
    if requested + chosen.len() > k_b {
        return Err(DiagnosticError::Argument(format!(
            "slot budgets {requested} plus {} reserved blocks exceed k_b = {k_b}",
            chosen.len()
        )));
    }
    let orders: Vec<Vec<usize>> = per_slot.iter().map(|s| block_order(&s.scores)).collect();
    let mut cursor = vec![0usize; per_slot.len()];
    let mut spent = vec![0usize; per_slot.len()];
    loop {
        let mut progressed = false;
        for s in 0..per_slot.len() {
            if spent[s] == slot_budgets[s] {
                continue;
            }
            while cursor[s] < orders[s].len() && chosen.contains(&orders[s][cursor[s]]) {
                cursor[s] += 1;
            }
            if let Some(&c) = orders[s].get(cursor[s]) {
                chosen.insert(c);
                spent[s] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(assemble(&chosen, blocks, contract.reserved_tail, k, &per_slot[0].contract_fingerprint))
}

/// Locates decoded-question positions in a token-tag sequence.
pub trait QuestionDetector {
    fn detect(&self, tags: &[String]) -> Vec<Range<usize>>;
}

/// Reference detector: every maximal run of a marker tag is one question span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerDetector {
    pub marker: String,
}

impl MarkerDetector {
    pub fn new(marker: impl Into<String>) -> Self {
        Self { marker: marker.into() }
    }
}

impl QuestionDetector for MarkerDetector {
    fn detect(&self, tags: &[String]) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, tag) in tags.iter().enumerate() {
            match (tag == &self.marker, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..tags.len());
        }
        spans
    }
}

/// Groups proxies by detected question span, one group per span with total
/// weight `1/M`. The first span that overlaps the fallback tail absorbs the
/// tail queries. With no detection the fallback bank is returned unchanged.
pub fn route_question_groups(
    detector: &dyn QuestionDetector,
    tags: &[String],
    fallback: &ProxyBank,
) -> Result<ProxyBank, DiagnosticError> {
    if tags.len() != fallback.t {
        return Err(DiagnosticError::Length(tags.len(), fallback.t));
    }
    let spans: Vec<Range<usize>> = detector
        .detect(tags)
        .into_iter()
        .map(|r| r.start.min(fallback.t)..r.end.min(fallback.t))
        .filter(|r| !r.is_empty())
        .collect();
    if spans.is_empty() {
        return Ok(fallback.clone());
    }
    let tail: BTreeSet<usize> = fallback.tail.iter().copied().collect();
    let mut taken = BTreeSet::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut tail_used = false;
    for span in &spans {
        let mut g: BTreeSet<usize> = span.clone().filter(|u| !taken.contains(u)).collect();
        if !tail_used && span.clone().any(|u| tail.contains(&u)) {
            g.extend(tail.iter().filter(|u| !taken.contains(*u)));
            tail_used = true;
        }
        if !g.is_empty() {
            taken.extend(g.iter().copied());
            groups.push(g.into_iter().collect());
        }
    }
    let t = fallback.t;
    let raw = |u: usize| -> f64 {
        if tail_used && tail.contains(&u) && fallback.tau_q.is_finite() {
            (-((t - 1 - u) as f64) / fallback.tau_q).exp()
        } else {
            1.0
        }
    };
    let m = groups.len() as f64;
    let mut weights = BTreeMap::new();
    for g in &groups {
        let total: f64 = g.iter().map(|&u| raw(u)).sum();
        for &u in g {
            weights.insert(u, raw(u) / (total * m));
        }
    }
    let anchors: Vec<usize> = spans.iter().flat_map(|s| s.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let tail_list = if tail_used { fallback.tail.clone() } else { Vec::new() };
    ProxyBank::from_parts(t, tail_list, anchors, fallback.tau_q, weights, groups)
}

/// Token budget `k` for a contract over a prompt of length `t`.
pub fn contract_budget(contract: &SelectorContract, t: usize) -> usize {
    budget_tokens(t, contract.budget_ratio)
}
