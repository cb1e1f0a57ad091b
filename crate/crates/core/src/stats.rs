//! Sign-evaluation statistics over cell grids, plus rank and alignment
//! metrics.
//!
//! Resampling procedures draw replicate `r` from a ChaCha stream keyed by
//! `(seed, r)`, so the result does not depend on the thread count.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::diagnostics::{assemble_cell, CellId, CellOutcome};
use crate::error::StatsError;

/// Statistic evaluated on a cell grid.
pub type Statistic<'a> = &'a (dyn Fn(&[CellOutcome]) -> f64 + Sync);

fn arg(msg: impl Into<String>) -> StatsError {
    StatsError::Argument(msg.into())
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub bucket: String,
    pub count: usize,
    /// Percent of cells with a strictly positive shift; `None` for an empty bucket.
    pub rate: Option<f64>,
    pub mean_delta: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
}

/// `"positive"` when `H_c > 0`, otherwise `"nonpositive"`.
pub fn margin_side(c: &CellOutcome) -> String {
    if c.h_c > 0 { "positive" } else { "nonpositive" }.to_string()
}

pub fn phi_side(c: &CellOutcome) -> String {
    c.phi_bucket.as_str().to_string()
}

/// Joint bucket `phi/H_c`, keeping ties apart.
pub fn phi_margin_bucket(c: &CellOutcome) -> String {
    let side = match c.h_c {
        1 => "pos",
        0 => "tie",
        _ => "neg",
    };
    format!("{}/{}", c.phi_bucket.as_str(), side)
}

/// Per-bucket counts, positive-shift rates and mean shifts. Declared buckets
/// come first and are reported even when empty; other buckets follow in
/// order of first appearance.
pub fn split_rates<F>(cells: &[CellOutcome], declared: &[&str], bucket: F) -> Result<Vec<SplitReport>, StatsError>
where
    F: Fn(&CellOutcome) -> String,
{
    if cells.is_empty() {
        return Err(arg("split needs at least one cell"));
    }
    let mut order: Vec<String> = declared.iter().map(|s| s.to_string()).collect();
    let mut members: BTreeMap<String, Vec<f64>> = order.iter().map(|b| (b.clone(), Vec::new())).collect();
    for c in cells {
        let b = bucket(c);
        if !members.contains_key(&b) {
            order.push(b.clone());
        }
        members.entry(b).or_default().push(c.delta);
    }
    Ok(order
        .into_iter()
        .map(|b| {
            let deltas = &members[&b];
            let n = deltas.len();
            let (rate, mean_delta) = if n == 0 {
                (None, None)
            } else {
                let pos = deltas.iter().filter(|d| **d > 0.0).count();
                (Some(100.0 * pos as f64 / n as f64), Some(deltas.iter().sum::<f64>() / n as f64))
            };
            SplitReport {
                bucket: b,
                count: n,
                rate,
                mean_delta,
                ci: None,
                p_value: None,
            }
        })
        .collect())
}

fn side_stats(cells: &[CellOutcome], positive: bool) -> (usize, usize, f64) {
    cells
        .iter()
        .filter(|c| (c.h_c > 0) == positive)
        .fold((0, 0, 0.0), |(n, p, s), c| (n + 1, p + usize::from(c.delta > 0.0), s + c.delta))
}

/// Positive-shift rate of `H_c > 0` cells minus that of `H_c <= 0` cells, in
/// percentage points. NaN when either side is empty.
pub fn positive_rate_gap(cells: &[CellOutcome]) -> f64 {
    let (n1, p1, _) = side_stats(cells, true);
    let (n0, p0, _) = side_stats(cells, false);
    if n1 == 0 || n0 == 0 {
        return f64::NAN;
    }
    100.0 * (p1 as f64 / n1 as f64 - p0 as f64 / n0 as f64)
}

/// Mean shift of `H_c > 0` cells minus that of `H_c <= 0` cells.
pub fn mean_delta_gap(cells: &[CellOutcome]) -> f64 {
    let (n1, _, s1) = side_stats(cells, true);
    let (n0, _, s0) = side_stats(cells, false);
    if n1 == 0 || n0 == 0 {
        return f64::NAN;
    }
    s1 / n1 as f64 - s0 / n0 as f64
}

/// Fraction of cells whose shift sign agrees with `H_c` (ties count as nonpositive).
pub fn direction_match(cells: &[CellOutcome]) -> f64 {
    if cells.is_empty() {
        return f64::NAN;
    }
    let hits = cells.iter().filter(|c| (c.h_c > 0) == (c.delta > 0.0)).count();
    100.0 * hits as f64 / cells.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub null_mean: f64,
    pub null_interval: (f64, f64),
    pub p_value: f64,
    pub n_perm: usize,
    pub seed: u64,
}

/// Shuffle the margin labels across cells with shifts held fixed.
pub fn permutation_null(
    cells: &[CellOutcome],
    statistic: Statistic,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult, StatsError> {
    if n_perm < 100 {
        return Err(arg(format!("n_perm must be at least 100, got {n_perm}")));
    }
    if cells.len() < 2 {
        return Err(arg("permutation needs at least two cells"));
    }
    let observed = statistic(cells);
    if !observed.is_finite() {
        return Err(arg("statistic is undefined on the observed grid"));
    }
    let labels: Vec<(f64, i8)> = cells.iter().map(|c| (c.m_c, c.h_c)).collect();
    let null: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut rng);
            let grid: Vec<CellOutcome> = cells
                .iter()
                .zip(&shuffled)
                .map(|(c, &(m, h))| CellOutcome { m_c: m, h_c: h, ..c.clone() })
                .collect();
            statistic(&grid)
        })
        .collect();
    let exceed = null.iter().filter(|x| **x >= observed).count();
    let mut sorted: Vec<f64> = null.iter().copied().filter(|x| x.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Err(arg("statistic is undefined on every permutation"));
    }
    Ok(PermutationResult {
        observed,
        null_mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        null_interval: (quantile(&sorted, 0.025), quantile(&sorted, 0.975)),
        p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
        n_perm,
        seed,
    })
}

fn clusters<F: Fn(&CellOutcome) -> String>(cells: &[CellOutcome], key: F) -> Vec<(String, Vec<CellOutcome>)> {
    let mut out: Vec<(String, Vec<CellOutcome>)> = Vec::new();
    for c in cells {
        let k = key(c);
        match out.iter_mut().find(|(name, _)| *name == k) {
            Some((_, v)) => v.push(c.clone()),
            None => out.push((k, vec![c.clone()])),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub ci: (f64, f64),
    pub n_boot: usize,
    pub clusters: usize,
    /// Replicates on which the statistic was undefined and was skipped.
    pub undefined_replicates: usize,
    pub seed: u64,
}

/// Percentile interval from resampling whole clusters with replacement.
pub fn cluster_bootstrap<F>(
    cells: &[CellOutcome],
    key: F,
    statistic: Statistic,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapResult, StatsError>
where
    F: Fn(&CellOutcome) -> String,
{
    let groups = clusters(cells, key);
    if groups.len() < 2 {
        return Err(arg(format!("bootstrap needs at least two clusters, got {}", groups.len())));
    }
    if n_boot == 0 {
        return Err(arg("n_boot must be positive"));
    }
    let estimate = statistic(cells);
    let reps: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let mut grid = Vec::with_capacity(cells.len());
            for _ in 0..groups.len() {
                grid.extend_from_slice(&groups[rng.gen_range(0..groups.len())].1);
            }
            statistic(&grid)
        })
        .collect();
    let mut sorted: Vec<f64> = reps.iter().copied().filter(|x| x.is_finite()).collect();
    if sorted.is_empty() {
        return Err(arg("statistic is undefined on every bootstrap replicate"));
    }
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        estimate,
        ci: (quantile(&sorted, 0.025), quantile(&sorted, 0.975)),
        n_boot,
        clusters: groups.len(),
        undefined_replicates: n_boot - sorted.len(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaveOneOut {
    pub rows: Vec<(String, f64)>,
    pub min: (String, f64),
    pub max: (String, f64),
}

/// Recompute the statistic with each cluster dropped in turn.
pub fn leave_one_out<F>(cells: &[CellOutcome], key: F, statistic: Statistic) -> Result<LeaveOneOut, StatsError>
where
    F: Fn(&CellOutcome) -> String,
{
    let groups = clusters(cells, key);
    if groups.len() < 2 {
        return Err(arg(format!("leave-one-out needs at least two clusters, got {}", groups.len())));
    }
    let rows: Vec<(String, f64)> = groups
        .iter()
        .map(|(name, _)| {
            let kept: Vec<CellOutcome> = groups
                .iter()
                .filter(|(other, _)| other != name)
                .flat_map(|(_, v)| v.iter().cloned())
                .collect();
            (name.clone(), statistic(&kept))
        })
        .collect();
    let defined = rows.iter().filter(|r| r.1.is_finite());
    let min = defined.clone().min_by(|a, b| a.1.total_cmp(&b.1)).cloned();
    let max = defined.max_by(|a, b| a.1.total_cmp(&b.1)).cloned();
    match (min, max) {
        (Some(min), Some(max)) => Ok(LeaveOneOut { rows, min, max }),
        _ => Err(arg("statistic is undefined after every deletion")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Top-left cell small relative to independence.
    Less,
    Greater,
}

/// One-sided Fisher exact test on `[[a, b], [c, d]]`.
pub fn fisher_one_sided(table: [[u64; 2]; 2], alternative: Alternative) -> f64 {
    let [[a, b], [c, d]] = table;
    let row = a + b;
    let col = a + c;
    let n = a + b + c + d;
    let lo = col.saturating_sub(n - row);
    let hi = row.min(col);
    let ln_total = ln_binomial(n, row);
    let pmf = |x: u64| (ln_binomial(col, x) + ln_binomial(n - col, row - x) - ln_total).exp();
    let p: f64 = match alternative {
        Alternative::Less => (lo..=a).map(pmf).sum(),
        Alternative::Greater => (a..=hi).map(pmf).sum(),
    };
    p.min(1.0)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(arg("correlation undefined for a constant input"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of average-tied ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(arg(format!("spearman needs equal lengths >= 2, got {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(arg("spearman inputs must be finite"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `P(score_pos > score_neg) + P(equal) / 2` via the rank-sum identity.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    if scores.len() != labels.len() {
        return Err(arg("scores and labels differ in length"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(arg("scores must be finite"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(arg("AUC needs both classes"));
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// `ceil(frac * len)` with a small guard against representation error.
pub fn top_count(len: usize, frac: f64) -> Result<usize, StatsError> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(arg(format!("frac must lie in (0, 1], got {frac}")));
    }
    let x = frac * len as f64;
    Ok(((x - 1e-9 * x.max(1.0)).ceil() as usize).clamp(1, len))
}

fn top_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// NDCG over the top `ceil(frac * T)` positions with linear gain.
pub fn ndcg_at_frac(scores: &[f64], relevance: &[f64], frac: f64) -> Result<f64, StatsError> {
    if scores.len() != relevance.len() || scores.is_empty() {
        return Err(arg("scores and relevance must be nonempty and of equal length"));
    }
    if relevance.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || scores.iter().any(|s| !s.is_finite()) {
        return Err(arg("relevance must be finite and nonnegative; scores finite"));
    }
    let n = top_count(scores.len(), frac)?;
    let dcg = |idx: &[usize]| -> f64 {
        idx.iter()
            .enumerate()
            .map(|(r, &i)| relevance[i] / ((r + 2) as f64).log2())
            .sum()
    };
    let ideal = dcg(&top_indices(relevance, n));
    if ideal == 0.0 {
        return Err(arg("NDCG undefined when all relevance is zero"));
    }
    Ok(dcg(&top_indices(scores, n)) / ideal)
}

/// Jaccard overlap of the top `ceil(frac * T)` sets.
pub fn jaccard_at_frac(scores: &[f64], reference: &[f64], frac: f64) -> Result<f64, StatsError> {
    if scores.len() != reference.len() || scores.is_empty() {
        return Err(arg("score vectors must be nonempty and of equal length"));
    }
    let n = top_count(scores.len(), frac)?;
    let a: std::collections::BTreeSet<usize> = top_indices(scores, n).into_iter().collect();
    let b: std::collections::BTreeSet<usize> = top_indices(reference, n).into_iter().collect();
    Ok(a.intersection(&b).count() as f64 / a.union(&b).count() as f64)
}

#[derive(Debug, Deserialize)]
struct CellRow {
    model: String,
    task: String,
    budget: String,
    host: f64,
    variant: f64,
    reference: f64,
    phi: f64,
}

/// Read `model,task,budget,host,variant,reference,phi`. Extra columns and
/// `#` comment lines are ignored, and derived fields are recomputed.
pub fn read_cells<R: Read>(reader: R) -> Result<Vec<CellOutcome>, StatsError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut cells = Vec::new();
    for row in rdr.deserialize() {
        let row: CellRow = row?;
        let cell = assemble_cell(CellId::new(row.model, row.task, row.budget), row.host, row.variant, row.reference, row.phi)
            .map_err(|e| arg(e.to_string()))?;
        cells.push(cell);
    }
    if cells.is_empty() {
        return Err(arg("cell grid is empty"));
    }
    Ok(cells)
}

pub fn load_cells(path: &std::path::Path) -> Result<Vec<CellOutcome>, StatsError> {
    read_cells(std::fs::File::open(path)?)
}

/// Write cells with derived columns appended.
pub fn write_enriched<W: Write>(writer: W, cells: &[CellOutcome]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "task", "budget", "host", "variant", "reference", "phi", "m_c", "h_c", "delta", "phi_bucket"])?;
    for c in cells {
        w.write_record([
            c.id.model.clone(),
            c.id.task.clone(),
            c.id.budget.clone(),
            c.host.to_string(),
            c.variant.to_string(),
            c.reference.to_string(),
            c.phi.to_string(),
            c.m_c.to_string(),
            c.h_c.to_string(),
            c.delta.to_string(),
            c.phi_bucket.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
