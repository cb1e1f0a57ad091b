//! The selector contract and the selection machinery shared by every stage.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ContractError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    UniformPerHead,
    PyramidalByLayer,
    HeadAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowerIndexFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryDomain {
    AllPrefill,
    TailWindow,
    ProxyBank,
}

/// Frozen tuple under which stage-local comparisons are valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorContract {
    pub budget_ratio: f64,
    pub block_size: usize,
    /// Observation window in queries; 0 means none.
    pub observation_window: usize,
    /// Tokens hard-kept at the prompt end and charged against the budget.
    pub reserved_tail: usize,
    pub layer_weights: BTreeMap<usize, f64>,
    pub pooling_kernel: usize,
    pub allocation: AllocationRule,
    pub tie_break: TieBreak,
    pub query_domain: QueryDomain,
}

impl SelectorContract {
    /// Contract with uniform layer weights over `0..layers` and every optional
    /// feature switched off.
    pub fn uniform(budget_ratio: f64, block_size: usize, layers: usize) -> Self {
        let w = 1.0 / layers.max(1) as f64;
        Self {
            budget_ratio,
            block_size,
            observation_window: 0,
            reserved_tail: 0,
            layer_weights: (0..layers).map(|l| (l, w)).collect(),
            pooling_kernel: 1,
            allocation: AllocationRule::UniformPerHead,
            tie_break: TieBreak::LowerIndexFirst,
            query_domain: QueryDomain::AllPrefill,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.observation_window = window;
        self
    }

    pub fn with_reserved_tail(mut self, reserved: usize) -> Self {
        self.reserved_tail = reserved;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.pooling_kernel = kernel;
        self
    }

    pub fn with_allocation(mut self, rule: AllocationRule) -> Self {
        self.allocation = rule;
        self
    }

    pub fn with_query_domain(mut self, domain: QueryDomain) -> Self {
        self.query_domain = domain;
        self
    }

    pub fn validate(&self) -> Result<(), ContractError> {
        if !(self.budget_ratio > 0.0 && self.budget_ratio < 1.0) {
            return Err(ContractError::Invalid(format!(
                "budget_ratio must lie in (0, 1), got {}",
                self.budget_ratio
            )));
        }
        if self.block_size == 0 {
            return Err(ContractError::Invalid("block_size must be at least 1".into()));
        }
        if self.pooling_kernel % 2 == 0 {
            return Err(ContractError::Invalid(format!(
                "pooling_kernel must be odd, got {}",
                self.pooling_kernel
            )));
        }
        if self.layer_weights.is_empty() {
            return Err(ContractError::Invalid("layer set is empty".into()));
        }
        if self.layer_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ContractError::Invalid("layer weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.layer_weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ContractError::Invalid(format!("layer weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Checks the contract against a prompt of length `t` with `layers` layers.
    pub fn check_capture(&self, t: usize, layers: usize) -> Result<(), ContractError> {
        self.validate()?;
        if let Some((&layer, _)) = self.layer_weights.iter().find(|(&l, _)| l >= layers) {
            return Err(ContractError::UnknownLayer { layer, layers });
        }
        if self.observation_window > t {
            return Err(ContractError::WindowTooLong {
                window: self.observation_window,
                t,
            });
        }
        let k = budget_tokens(t, self.budget_ratio);
        if self.reserved_tail > k {
            return Err(ContractError::ReserveExceedsBudget {
                needed: self.reserved_tail,
                available: k,
            });
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layer_weights.keys().copied().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("contract serializes")
    }

    /// Parses and validates a contract document.
    pub fn from_json(text: &str) -> Result<Self, ContractError> {
        let contract: Self = serde_json::from_str(text).map_err(|e| ContractError::Parse(e.to_string()))?;
        contract.validate()?;
        Ok(contract)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// FNV-1a 64 over the compact canonical JSON, as 16 lowercase hex digits.
pub fn contract_fingerprint(contract: &SelectorContract) -> String {
    let canonical = serde_json::to_string(contract).expect("contract serializes");
    format!("{:016x}", fnv1a64(canonical.as_bytes()))
}

/// `floor(b * T)`, robust to the last-ulp error of the product.
pub fn budget_tokens(t: usize, b: f64) -> usize {
    let exact = b * t as f64;
    let nudged = exact + exact.abs() * 1e-12;
    (nudged.floor() as usize).min(t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub t: usize,
    pub p: usize,
    pub blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_of(&self, token: usize) -> usize {
        token / self.p
    }
}

pub fn make_blocks(t: usize, p: usize) -> BlockPartition {
    assert!(p >= 1, "block size must be positive");
    let blocks = (0..t.div_ceil(p)).map(|j| j * p..((j + 1) * p).min(t)).collect();
    BlockPartition { t, p, blocks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Stage2BlockBroadcast,
    Combined,
}

/// Scalar score per token. The last `reserved_tail` indices outrank every
/// finite score regardless of their stored value.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub stage_tag: StageTag,
    pub reserved_tail: usize,
    pub contract_fingerprint: String,
}

impl ScoreVector {
    pub fn new(
        values: Vec<f64>,
        stage_tag: StageTag,
        reserved_tail: usize,
        contract_fingerprint: impl Into<String>,
    ) -> Result<Self, ContractError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ContractError::Invalid(format!("score at index {i} is not finite")));
        }
        if reserved_tail > values.len() {
            return Err(ContractError::Invalid(format!(
                "reserved tail {reserved_tail} exceeds {} scores",
                values.len()
            )));
        }
        Ok(Self {
            values,
            stage_tag,
            reserved_tail,
            contract_fingerprint: contract_fingerprint.into(),
        })
    }

    /// Plain scores with no reserve and no fingerprint.
    pub fn raw(values: Vec<f64>) -> Result<Self, ContractError> {
        Self::new(values, StageTag::Stage1, 0, "")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_reserved(&self, i: usize) -> bool {
        i >= self.values.len() - self.reserved_tail
    }

    /// Indices from best to worst: reserved first, then score descending,
    /// then lower index first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.compare(a, b));
        order
    }

    /// `Less` when `a` ranks ahead of `b`.
    pub fn compare(&self, a: usize, b: usize) -> Ordering {
        self.is_reserved(b)
            .cmp(&self.is_reserved(a))
            .then_with(|| self.values[b].total_cmp(&self.values[a]))
            .then_with(|| a.cmp(&b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Block,
    Token,
    TokenFill,
    ReservedTail,
}

/// Retained token indices, strictly increasing, each with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSet {
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub contract_fingerprint: String,
}

impl KeptSet {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (usize, Provenance)>,
        contract_fingerprint: impl Into<String>,
    ) -> Self {
        let map: BTreeMap<usize, Provenance> = entries.into_iter().collect();
        Self {
            indices: map.keys().copied().collect(),
            provenance: map.values().copied().collect(),
            contract_fingerprint: contract_fingerprint.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn provenance_of(&self, i: usize) -> Option<Provenance> {
        self.indices.binary_search(&i).ok().map(|p| self.provenance[p])
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, Provenance)> + '_ {
        self.indices.iter().copied().zip(self.provenance.iter().copied())
    }
}

/// Keeps exactly `k` indices under the contract tie break.
pub fn top_k(scores: &ScoreVector, k: usize, tie_break: TieBreak) -> Result<KeptSet, ContractError> {
    let TieBreak::LowerIndexFirst = tie_break;
    if k > scores.len() {
        return Err(ContractError::KTooLarge { k, len: scores.len() });
    }
    if scores.reserved_tail > k {
        return Err(ContractError::ReserveExceedsBudget {
            needed: scores.reserved_tail,
            available: k,
        });
    }
    let order = scores.ranking();
    Ok(KeptSet::from_entries(
        order[..k].iter().map(|&i| {
            let tag = if scores.is_reserved(i) {
                Provenance::ReservedTail
            } else {
                Provenance::Token
            };
            (i, tag)
        }),
        scores.contract_fingerprint.clone(),
    ))
}

/// Splits `total` across `weights` proportionally with per-entry caps, using
/// largest remainders (ties to the lower index) so the total is exact.
pub fn apportion(total: usize, weights: &[f64], caps: &[usize]) -> Result<Vec<usize>, ContractError> {
    let capacity: usize = caps.iter().sum();
    if total > capacity {
        return Err(ContractError::Allocation {
            expected: total,
            got: capacity,
        });
    }
    let n = weights.len();
    let mut out = vec![0usize; n];
    let mut open: Vec<usize> = (0..n).filter(|&i| caps[i] > 0).collect();
    let mut remaining = total;
    while remaining > 0 {
        let mass: f64 = open.iter().map(|&i| weights[i].max(0.0)).sum();
        let share = |i: usize| -> f64 {
            if mass > 0.0 {
                remaining as f64 * weights[i].max(0.0) / mass
            } else {
                remaining as f64 / open.len() as f64
            }
        };
        // Fill any entry whose ideal share would exceed its cap, then re-split.
        let saturated: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&i| share(i) >= (caps[i] - out[i]) as f64)
            .collect();
        if !saturated.is_empty() {
            for &i in &saturated {
                remaining -= caps[i] - out[i];
                out[i] = caps[i];
            }
            open.retain(|i| !saturated.contains(i));
            continue;
        }
        let ideal: Vec<f64> = open.iter().map(|&i| share(i)).collect();
        let mut given = 0;
        for (&i, x) in open.iter().zip(&ideal) {
            let f = x.floor() as usize;
            out[i] += f;
            given += f;
        }
        let mut rest: Vec<(usize, f64)> = open.iter().zip(&ideal).map(|(&i, x)| (i, x - x.floor())).collect();
        rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, _) in rest.iter().take(remaining - given) {
            out[i] += 1;
        }
        remaining = 0;
    }
    Ok(out)
}

pub type AllocationMap = BTreeMap<(usize, usize), usize>;

/// Per-(layer, head) token budgets over the contract's layer set.
///
/// `head_mass[l][h]` is required for `head_adaptive`; a `schedule`, when
/// given, replaces the rule and must conserve `L·H·k` exactly.
pub fn apply_allocation(
    contract: &SelectorContract,
    t: usize,
    heads: usize,
    head_mass: Option<&BTreeMap<usize, Vec<f64>>>,
    schedule: Option<&AllocationMap>,
) -> Result<AllocationMap, ContractError> {
    contract.validate()?;
    let layers = contract.layers();
    let k = budget_tokens(t, contract.budget_ratio);
    let total = layers.len() * heads * k;
    if let Some(s) = schedule {
        let expected_keys = layers.iter().flat_map(|&l| (0..heads).map(move |h| (l, h)));
        if !expected_keys.eq(s.keys().copied()) {
            return Err(ContractError::Invalid("schedule must cover every (layer, head) exactly once".into()));
        }
        if s.values().any(|&b| b > t) {
            return Err(ContractError::Invalid(format!("schedule entry exceeds T={t}")));
        }
        let got: usize = s.values().sum();
        if got != total {
            return Err(ContractError::Allocation { expected: total, got });
        }
        return Ok(s.clone());
    }
    let mut out = AllocationMap::new();
    match contract.allocation {
        AllocationRule::UniformPerHead => {
            for &l in &layers {
                for h in 0..heads {
                    out.insert((l, h), k);
                }
            }
        }
        AllocationRule::PyramidalByLayer => {
            let n = layers.len();
            let weights: Vec<f64> = (0..n)
                .map(|j| if n == 1 { 1.0 } else { 1.5 - j as f64 / (n - 1) as f64 })
                .collect();
            let per_layer = apportion(total, &weights, &vec![heads * t; n])?;
            for (&l, &budget) in layers.iter().zip(&per_layer) {
                let split = apportion(budget, &vec![1.0; heads], &vec![t; heads])?;
                for (h, b) in split.into_iter().enumerate() {
                    out.insert((l, h), b);
                }
            }
        }
        AllocationRule::HeadAdaptive => {
            let masses = head_mass
                .ok_or_else(|| ContractError::Invalid("head_adaptive allocation needs per-head window mass".into()))?;
            for &l in &layers {
                let m = masses
                    .get(&l)
                    .filter(|m| m.len() == heads)
                    .ok_or_else(|| ContractError::Invalid(format!("missing per-head mass for layer {l}")))?;
                let split = apportion(heads * k, m, &vec![t; heads])?;
                for (h, b) in split.into_iter().enumerate() {
                    out.insert((l, h), b);
                }
            }
        }
    }
    let got: usize = out.values().sum();
    if got != total {
        return Err(ContractError::Allocation { expected: total, got });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(budget_tokens(8192, 0.05), 409);
        assert_eq!(budget_tokens(10, 0.10), 1);
        assert_eq!(budget_tokens(7, 0.5), 3);
        assert_eq!(budget_tokens(100, 0.29), 29);
    }

    #[test]
    fn blocks_tile_the_prompt() {
        let b = make_blocks(10, 4);
        assert_eq!(b.blocks, vec![0..4, 4..8, 8..10]);
        assert_eq!(make_blocks(8, 4).blocks, vec![0..4, 4..8]);
        assert_eq!(make_blocks(5, 1).len(), 5);
    }

    #[test]
    fn top_k_examples() {
        let s = ScoreVector::raw(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(top_k(&s, 2, TieBreak::LowerIndexFirst).unwrap().indices, vec![0, 2]);
        let s = ScoreVector::raw(vec![1.0; 4]).unwrap();
        assert_eq!(top_k(&s, 2, TieBreak::LowerIndexFirst).unwrap().indices, vec![0, 1]);
        assert_eq!(
            top_k(&s, 5, TieBreak::LowerIndexFirst).unwrap_err(),
            ContractError::KTooLarge { k: 5, len: 4 }
        );
    }

    #[test]
    fn reserved_tail_is_kept_and_charged() {
        let s = ScoreVector::new(vec![9.0, 8.0, 7.0, 0.0, 0.0], StageTag::Stage1, 2, "x").unwrap();
        let kept = top_k(&s, 3, TieBreak::LowerIndexFirst).unwrap();
        assert_eq!(kept.indices, vec![0, 3, 4]);
        assert_eq!(kept.provenance_of(4), Some(Provenance::ReservedTail));
        assert!(top_k(&s, 1, TieBreak::LowerIndexFirst).is_err());
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = SelectorContract::uniform(0.05, 4, 2);
        let b = SelectorContract::uniform(0.10, 4, 2);
        assert_eq!(contract_fingerprint(&a), contract_fingerprint(&a.clone()));
        assert_ne!(contract_fingerprint(&a), contract_fingerprint(&b));
        assert_eq!(contract_fingerprint(&a).len(), 16);
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn json_round_trip_and_parse_errors() {
        let c = SelectorContract::uniform(0.1, 8, 3).with_window(16).with_kernel(7);
        assert_eq!(SelectorContract::from_json(&c.to_json()).unwrap(), c);
        let err = SelectorContract::from_json("{\"budget_ratio\": 0.1,\n \"block_size\": }").unwrap_err();
        match err {
            ContractError::Parse(msg) => assert!(msg.contains("line 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_contracts() {
        assert!(SelectorContract::uniform(1.0, 4, 1).validate().is_err());
        assert!(SelectorContract::uniform(0.1, 0, 1).validate().is_err());
        assert!(SelectorContract::uniform(0.1, 4, 1).with_kernel(4).validate().is_err());
        let mut c = SelectorContract::uniform(0.1, 4, 2);
        c.layer_weights.insert(0, 0.9);
        assert!(c.validate().is_err());
    }

    #[test]
    fn uniform_allocation() {
        let c = SelectorContract::uniform(0.1, 4, 2);
        let a = apply_allocation(&c, 100, 2, None, None).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.values().all(|&v| v == 10));
    }

    #[test]
    fn pyramidal_conserves_and_decays() {
        let c = SelectorContract::uniform(0.1, 4, 4).with_allocation(AllocationRule::PyramidalByLayer);
        let a = apply_allocation(&c, 100, 1, None, None).unwrap();
        let per: Vec<usize> = (0..4).map(|l| a[&(l, 0)]).collect();
        assert_eq!(per.iter().sum::<usize>(), 40);
        assert!(per.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(per[0], 15);
        assert_eq!(per[3], 5);
    }

    #[test]
    fn head_adaptive_owner_takes_all() {
        let c = SelectorContract::uniform(0.1, 4, 1).with_allocation(AllocationRule::HeadAdaptive);
        let mass = BTreeMap::from([(0, vec![0.0, 5.0, 0.0])]);
        let a = apply_allocation(&c, 100, 3, Some(&mass), None).unwrap();
        assert_eq!(a[&(0, 1)], 30);
        assert_eq!(a[&(0, 0)] + a[&(0, 2)], 0);
    }

    #[test]
    fn head_adaptive_respects_caps() {
        let c = SelectorContract::uniform(0.9, 4, 1).with_allocation(AllocationRule::HeadAdaptive);
        let mass = BTreeMap::from([(0, vec![1.0, 0.0])]);
        let a = apply_allocation(&c, 10, 2, Some(&mass), None).unwrap();
        assert_eq!(a[&(0, 0)], 10);
        assert_eq!(a[&(0, 1)], 8);
    }

    #[test]
    fn schedule_must_conserve() {
        let c = SelectorContract::uniform(0.1, 4, 1);
        let bad = AllocationMap::from([((0, 0), 12), ((0, 1), 9)]);
        assert_eq!(
            apply_allocation(&c, 100, 2, None, Some(&bad)).unwrap_err(),
            ContractError::Allocation { expected: 20, got: 21 }
        );
        let good = AllocationMap::from([((0, 0), 12), ((0, 1), 8)]);
        assert_eq!(apply_allocation(&c, 100, 2, None, Some(&good)).unwrap(), good);
    }
}
