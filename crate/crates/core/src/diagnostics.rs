//! Fixed-contract diagnostics: boundary units, signed margins, support
//! coupling and per-cell outcome assembly.

use std::cmp::Ordering;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::contract::{top_k, KeptSet, ScoreVector, TieBreak};
use crate::error::DiagnosticError;

/// A kept token `out_token` and an evicted token `in_token` near the budget
/// threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryUnit {
    pub in_token: usize,
    pub out_token: usize,
    /// `s_out - s_in` under the base score.
    pub base_margin: f64,
    pub delta_in: f64,
    pub delta_out: f64,
    pub crossed: bool,
}

impl BoundaryUnit {
    /// The unit that undoes this swap.
    pub fn reversed(&self) -> Self {
        Self {
            in_token: self.out_token,
            out_token: self.in_token,
            base_margin: -self.base_margin,
            delta_in: self.delta_out,
            delta_out: self.delta_in,
            crossed: self.crossed,
        }
    }
}

fn perturbed(s: &ScoreVector, delta: &[f64]) -> Result<ScoreVector, DiagnosticError> {
    if delta.len() != s.len() {
        return Err(DiagnosticError::Length(delta.len(), s.len()));
    }
    let values = s.values.iter().zip(delta).map(|(a, b)| a + b).collect();
    Ok(ScoreVector::new(values, s.stage_tag, s.reserved_tail, s.contract_fingerprint.clone())?)
}

/// Decide whether the perturbation `delta` lifts evicted `i` above kept `j`.
///
/// The comparison uses the same ordering as `top_k`, so exact ties go to
/// the lower index and reserved positions never lose their place.
pub fn boundary_margin_check(
    s: &ScoreVector,
    delta: &[f64],
    i: usize,
    j: usize,
    k: usize,
    tie_break: TieBreak,
) -> Result<BoundaryUnit, DiagnosticError> {
    let kept = top_k(s, k, tie_break)?;
    if i >= s.len() || j >= s.len() {
        return Err(DiagnosticError::Argument(format!("tokens ({i}, {j}) out of range for T={}", s.len())));
    }
    if kept.contains(i) || !kept.contains(j) {
        return Err(DiagnosticError::Argument(format!(
            "boundary unit needs {j} kept and {i} evicted under the base score"
        )));
    }
    let moved = perturbed(s, delta)?;
    Ok(BoundaryUnit {
        in_token: i,
        out_token: j,
        base_margin: s.values[j] - s.values[i],
        delta_in: delta[i],
        delta_out: delta[j],
        crossed: moved.compare(i, j) == Ordering::Less,
    })
}

/// Pair the tokens only `a` keeps with the tokens only `b` keeps.
///
/// A-only tokens are taken weakest first under `scores_a` and matched with
/// B-only tokens strongest first, and the resulting units are sorted by
/// base margin. The perturbation is `scores_b - scores_a`.
pub fn disagreement_boundary(
    kept_a: &KeptSet,
    kept_b: &KeptSet,
    scores_a: &ScoreVector,
    scores_b: &ScoreVector,
) -> Result<Vec<BoundaryUnit>, DiagnosticError> {
    if scores_a.len() != scores_b.len() {
        return Err(DiagnosticError::Length(scores_a.len(), scores_b.len()));
    }
    if kept_a.len() != kept_b.len() {
        return Err(DiagnosticError::Argument(format!(
            "kept sets differ in size ({} vs {})",
            kept_a.len(),
            kept_b.len()
        )));
    }
    if let Some(&x) = kept_a.indices.iter().chain(&kept_b.indices).find(|&&x| x >= scores_a.len()) {
        return Err(DiagnosticError::Argument(format!("kept index {x} out of range")));
    }
    let mut only_a: Vec<usize> = kept_a.indices.iter().copied().filter(|&x| !kept_b.contains(x)).collect();
    let mut only_b: Vec<usize> = kept_b.indices.iter().copied().filter(|&x| !kept_a.contains(x)).collect();
    only_a.sort_by(|&x, &y| scores_a.compare(y, x));
    only_b.sort_by(|&x, &y| scores_a.compare(x, y));
    let delta: Vec<f64> = scores_b.values.iter().zip(&scores_a.values).map(|(b, a)| b - a).collect();
    let mut units: Vec<BoundaryUnit> = only_a
        .iter()
        .zip(&only_b)
        .map(|(&j, &i)| BoundaryUnit {
            in_token: i,
            out_token: j,
            base_margin: scores_a.values[j] - scores_a.values[i],
            delta_in: delta[i],
            delta_out: delta[j],
            crossed: scores_b.compare(i, j) == Ordering::Less,
        })
        .collect();
    units.sort_by(|u, v| {
        u.base_margin
            .total_cmp(&v.base_margin)
            .then(u.in_token.cmp(&v.in_token))
            .then(u.out_token.cmp(&v.out_token))
    });
    Ok(units)
}

/// `(K \ {j}) ∪ {i}`; the incoming token inherits the provenance of the
/// outgoing one.
pub fn boundary_swap(kept: &KeptSet, unit: &BoundaryUnit) -> Result<KeptSet, DiagnosticError> {
    let Some(tag) = kept.provenance_of(unit.out_token) else {
        return Err(DiagnosticError::Argument(format!("token {} is not kept", unit.out_token)));
    };
    if kept.contains(unit.in_token) {
        return Err(DiagnosticError::Argument(format!("token {} is already kept", unit.in_token)));
    }
    let entries = kept
        .entries()
        .filter(|(x, _)| *x != unit.out_token)
        .chain(std::iter::once((unit.in_token, tag)));
    Ok(KeptSet::from_entries(entries, kept.contract_fingerprint.clone()))
}

/// `(reference - host, sign)` with zero kept as its own side.
pub fn signed_margin(host: f64, reference: f64) -> (f64, i8) {
    let m = reference - host;
    let h = if m > 0.0 {
        1
    } else if m < 0.0 {
        -1
    } else {
        0
    };
    (m, h)
}

pub const PHI_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiBucket {
    Low,
    High,
}

impl PhiBucket {
    pub fn of(phi: f64) -> Self {
        if phi >= PHI_THRESHOLD {
            PhiBucket::High
        } else {
            PhiBucket::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhiBucket::Low => "low",
            PhiBucket::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TextFeatures {
    pub code_lines: usize,
    pub label_markers: usize,
    pub delimiter_records: usize,
    pub total_lines: usize,
}

impl TextFeatures {
    pub fn structural(&self) -> usize {
        self.code_lines + self.label_markers + self.delimiter_records
    }
}

/// Line classifier for structured evidence. Each line lands in at most one
/// class, checked in the order delimiter, code, label.
#[derive(Debug, Clone)]
pub struct PhiGrammar {
    pub version: String,
    code: Regex,
    label: Regex,
    delimiter_chars: String,
    min_run: usize,
}

impl PhiGrammar {
    pub fn new(
        version: impl Into<String>,
        code_pattern: &str,
        label_pattern: &str,
        delimiter_chars: impl Into<String>,
        min_run: usize,
    ) -> Result<Self, DiagnosticError> {
        let compile = |p: &str| Regex::new(p).map_err(|e| DiagnosticError::Argument(e.to_string()));
        Ok(Self {
            version: version.into(),
            code: compile(code_pattern)?,
            label: compile(label_pattern)?,
            delimiter_chars: delimiter_chars.into(),
            min_run: min_run.max(1),
        })
    }

    /// Braces, trailing semicolons, or an indented block line count as code;
    /// a leading `FIELD:` is a label; a run of three or more identical
    /// delimiter characters is a record separator.
    pub fn v1() -> Self {
        Self::new(
            "phi-v1",
            r"[{};]\s*$|^\s*[}\]]|^(\t| {4,})\S",
            r"^\s*[A-Za-z][A-Za-z0-9_\-]*:(\s|$)",
            "-=*_#~+|",
            3,
        )
        .expect("built-in grammar compiles")
    }

    fn is_delimiter(&self, line: &str) -> bool {
        let trimmed = line.trim();
        let mut chars = trimmed.chars();
        match chars.next() {
            Some(c) if self.delimiter_chars.contains(c) => {
                trimmed.chars().count() >= self.min_run && chars.all(|x| x == c)
            }
            _ => false,
        }
    }

    pub fn features(&self, text: &str) -> TextFeatures {
        let mut f = TextFeatures::default();
        for line in text.lines() {
            f.total_lines += 1;
            if self.is_delimiter(line) {
                f.delimiter_records += 1;
            } else if self.code.is_match(line) {
                f.code_lines += 1;
            } else if self.label.is_match(line) {
                f.label_markers += 1;
            }
        }
        f
    }
}

impl Default for PhiGrammar {
    fn default() -> Self {
        Self::v1()
    }
}

/// Structured-line density and its bucket.
pub fn support_coupling(f: &TextFeatures) -> Result<(f64, PhiBucket), DiagnosticError> {
    if f.total_lines == 0 {
        return Err(DiagnosticError::Undefined("support coupling needs at least one line".into()));
    }
    if f.structural() > f.total_lines {
        return Err(DiagnosticError::Argument(format!(
            "{} structural lines exceed {} total lines",
            f.structural(),
            f.total_lines
        )));
    }
    let phi = f.structural() as f64 / f.total_lines as f64;
    Ok((phi, PhiBucket::of(phi)))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub model: String,
    pub task: String,
    pub budget: String,
}

impl CellId {
    pub fn new(model: impl Into<String>, task: impl Into<String>, budget: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            task: task.into(),
            budget: budget.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    #[serde(flatten)]
    pub id: CellId,
    pub host: f64,
    pub variant: f64,
    pub reference: f64,
    pub m_c: f64,
    pub h_c: i8,
    pub delta: f64,
    pub phi: f64,
    pub phi_bucket: PhiBucket,
}

/// Build a cell from raw scores; every derived field is recomputed here.
pub fn assemble_cell(id: CellId, host: f64, variant: f64, reference: f64, phi: f64) -> Result<CellOutcome, DiagnosticError> {
    if ![host, variant, reference].iter().all(|x| x.is_finite()) {
        return Err(DiagnosticError::Argument(format!("cell {}/{}/{} has a non-finite score", id.model, id.task, id.budget)));
    }
    if !(phi.is_finite() && phi >= 0.0) {
        return Err(DiagnosticError::Argument(format!("phi must be finite and nonnegative, got {phi}")));
    }
    let (m_c, h_c) = signed_margin(host, reference);
    Ok(CellOutcome {
        id,
        host,
        variant,
        reference,
        m_c,
        h_c,
        delta: variant - host,
        phi,
        phi_bucket: PhiBucket::of(phi),
    })
}
