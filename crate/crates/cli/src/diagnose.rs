use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand};
use serde::Serialize;

use kvss_core::diagnostics::{disagreement_boundary, BoundaryUnit};
use kvss_core::io::read_scores_csv;
use kvss_core::projection::ProjectionReport;
use kvss_core::stats::{jaccard_at_frac, ndcg_at_frac, spearman};
use kvss_core::synth::SyntheticTruth;
use kvss_core::ScoreVector;

use crate::output::{csv_stamp, emit, fmt_f, fmt_opt, json, md_pairs, md_table, usage, write_text, ReportFormat};
use crate::select::{summary, ProjectionSummary, FINAL_FILE, REPORT_FILE, RUN_FILE, STAGE1_FILE};

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Output directory of the first `select` run.
    #[arg(long)]
    pub a: PathBuf,
    /// Output directory of the second `select` run.
    #[arg(long)]
    pub b: PathBuf,
    /// Compare runs whose contracts differ; results are labeled transfer/sensitivity.
    #[arg(long)]
    pub allow_contract_drift: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DiagnoseCmd {
    /// Rank agreement of the Stage I access scores.
    Stage1 {
        #[command(flatten)]
        pair: PairArgs,
        /// Head fraction for NDCG and Jaccard.
        #[arg(long, default_value_t = 0.2)]
        frac: f64,
    },
    /// Agreement of the final ranking scores and kept blocks.
    Stage2 {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 0.2)]
        frac: f64,
    },
    /// Projection residual, lattice slack and token-fill effect.
    Stage3 {
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Disagreement boundary units with margin checks.
    Boundary {
        #[command(flatten)]
        pair: PairArgs,
        /// truth.json from a synthetic capture, for planted-target enrichment.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also write the units as CSV.
        #[arg(long)]
        units_csv: Option<PathBuf>,
    },
}

struct Run {
    fingerprint: String,
    report: ProjectionReport,
    stage1: ScoreVector,
    final_scores: ScoreVector,
}

fn load_run(dir: &Path) -> Result<Run> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let manifest: serde_json::Value = serde_json::from_str(&read(RUN_FILE)?)?;
    let fingerprint = manifest["contract_fingerprint"]
        .as_str()
        .ok_or_else(|| anyhow!("{} has no contract fingerprint", dir.join(RUN_FILE).display()))?
        .to_string();
    let report: ProjectionReport = serde_json::from_str(&read(REPORT_FILE)?)
        .with_context(|| format!("parsing {}", dir.join(REPORT_FILE).display()))?;
    let scores = |name: &str| -> Result<ScoreVector> {
        let p = dir.join(name);
        let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
        read_scores_csv(f).with_context(|| format!("parsing {}", p.display()))
    };
    Ok(Run {
        fingerprint,
        report,
        stage1: scores(STAGE1_FILE)?,
        final_scores: scores(FINAL_FILE)?,
    })
}

#[derive(Debug, Serialize)]
struct Header {
    mode: &'static str,
    fingerprint_a: String,
    fingerprint_b: String,
}

/// Loads both runs and enforces the shared-contract rule.
fn load_pair(pair: &PairArgs) -> Result<(Run, Run, Header)> {
    let a = load_run(&pair.a)?;
    let b = load_run(&pair.b)?;
    let mode = if a.fingerprint == b.fingerprint {
        "same-contract"
    } else if pair.allow_contract_drift {
        "transfer/sensitivity"
    } else {
        bail!(
            "runs use different contracts ({} vs {}); pass --allow-contract-drift for a transfer/sensitivity comparison",
            a.fingerprint,
            b.fingerprint
        );
    };
    if a.stage1.len() != b.stage1.len() {
        bail!("runs cover different prompt lengths ({} vs {})", a.stage1.len(), b.stage1.len());
    }
    let header = Header {
        mode,
        fingerprint_a: a.fingerprint.clone(),
        fingerprint_b: b.fingerprint.clone(),
    };
    Ok((a, b, header))
}

/// Fingerprint stamped on a pair report: the shared one, or both joined.
fn pair_fingerprint(h: &Header) -> String {
    if h.fingerprint_a == h.fingerprint_b {
        h.fingerprint_a.clone()
    } else {
        format!("{}+{}", h.fingerprint_a, h.fingerprint_b)
    }
}

#[derive(Debug, Serialize)]
struct Agreement {
    #[serde(flatten)]
    header: Header,
    frac: f64,
    spearman: f64,
    ndcg_a_vs_b: f64,
    jaccard: f64,
}

fn agreement(header: Header, a: &[f64], b: &[f64], frac: f64) -> Result<Agreement> {
    let stats = || -> Result<(f64, f64, f64), kvss_core::StatsError> {
        let relevance: Vec<f64> = b.iter().map(|x| x.max(0.0)).collect();
        Ok((spearman(a, b)?, ndcg_at_frac(a, &relevance, frac)?, jaccard_at_frac(a, b, frac)?))
    };
    let (spearman, ndcg_a_vs_b, jaccard) = stats().map_err(|e| usage(e.to_string()))?;
    Ok(Agreement {
        header,
        frac,
        spearman,
        ndcg_a_vs_b,
        jaccard,
    })
}

fn agreement_md(a: &Agreement, title: &str) -> String {
    md_pairs(&[
        ("comparison", title.to_string()),
        ("mode", a.header.mode.to_string()),
        ("frac", fmt_f(a.frac)),
        ("spearman", fmt_f(a.spearman)),
        ("ndcg_a_vs_b", fmt_f(a.ndcg_a_vs_b)),
        ("jaccard", fmt_f(a.jaccard)),
    ])
}

#[derive(Debug, Serialize)]
struct Stage2Body {
    #[serde(flatten)]
    agreement: Agreement,
    kept_blocks_only_a: Vec<usize>,
    kept_blocks_only_b: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct FillDelta {
    eta_proj: Option<f64>,
    slack: i64,
    fill_tokens: i64,
}

#[derive(Debug, Serialize)]
struct Stage3Body {
    #[serde(flatten)]
    header: Header,
    a: ProjectionSummary,
    b: ProjectionSummary,
    /// `a - b` for each field.
    token_fill_delta: FillDelta,
}

#[derive(Debug, Serialize)]
struct Enrichment {
    planted: usize,
    t: usize,
    base_rate: f64,
    boundary_tokens: usize,
    planted_in_boundary: usize,
    boundary_rate: f64,
    /// Planted tokens among those only run B keeps.
    planted_in_b_only: usize,
    planted_in_a_only: usize,
}

#[derive(Debug, Serialize)]
struct BoundaryBody {
    #[serde(flatten)]
    header: Header,
    units: Vec<BoundaryUnit>,
    crossed: usize,
    /// Units whose crossing matches the margin rule `delta_in - delta_out > base_margin`.
    margin_rule_agrees: usize,
    margin_rule_ties: usize,
    enrichment: Option<Enrichment>,
}

pub fn run_diagnose(cmd: &DiagnoseCmd, report: ReportFormat) -> Result<()> {
    match cmd {
        DiagnoseCmd::Stage1 { pair, frac } => {
            let (a, b, header) = load_pair(pair)?;
            let fp = pair_fingerprint(&header);
            let body = agreement(header, &a.stage1.values, &b.stage1.values, *frac)?;
            let text = match report {
                ReportFormat::Json => json(&fp, &body)?,
                ReportFormat::Md => agreement_md(&body, "stage1 scores"),
            };
            emit(pair.out.as_deref(), &text)
        }
        DiagnoseCmd::Stage2 { pair, frac } => {
            let (a, b, header) = load_pair(pair)?;
            let fp = pair_fingerprint(&header);
            let blocks_a: BTreeSet<usize> = a.report.kept_blocks.iter().copied().collect();
            let blocks_b: BTreeSet<usize> = b.report.kept_blocks.iter().copied().collect();
            let body = Stage2Body {
                agreement: agreement(header, &a.final_scores.values, &b.final_scores.values, *frac)?,
                kept_blocks_only_a: blocks_a.difference(&blocks_b).copied().collect(),
                kept_blocks_only_b: blocks_b.difference(&blocks_a).copied().collect(),
            };
            let text = match report {
                ReportFormat::Json => json(&fp, &body)?,
                ReportFormat::Md => {
                    let mut s = agreement_md(&body.agreement, "final scores");
                    s.push('\n');
                    s.push_str(&md_pairs(&[
                        ("kept_blocks_only_a", format!("{:?}", body.kept_blocks_only_a)),
                        ("kept_blocks_only_b", format!("{:?}", body.kept_blocks_only_b)),
                    ]));
                    s
                }
            };
            emit(pair.out.as_deref(), &text)
        }
        DiagnoseCmd::Stage3 { pair } => {
            let (a, b, header) = load_pair(pair)?;
            let fp = pair_fingerprint(&header);
            let (sa, sb) = (summary(&a.report), summary(&b.report));
            let delta = FillDelta {
                eta_proj: sa.eta_proj.zip(sb.eta_proj).map(|(x, y)| x - y),
                slack: sa.slack as i64 - sb.slack as i64,
                fill_tokens: sa.fill_tokens as i64 - sb.fill_tokens as i64,
            };
            let body = Stage3Body {
                header,
                a: sa,
                b: sb,
                token_fill_delta: delta,
            };
            let text = match report {
                ReportFormat::Json => json(&fp, &body)?,
                ReportFormat::Md => {
                    let row = |name: &str, s: &ProjectionSummary| {
                        vec![
                            name.to_string(),
                            s.k.to_string(),
                            s.kept.to_string(),
                            s.eps_lat.to_string(),
                            s.slack.to_string(),
                            s.fill_tokens.to_string(),
                            fmt_opt(s.eta_proj),
                        ]
                    };
                    md_table(
                        &["run", "k", "kept", "eps_lat", "slack", "fill_tokens", "eta_proj"],
                        &[row("a", &body.a), row("b", &body.b)],
                    )
                }
            };
            emit(pair.out.as_deref(), &text)
        }
        DiagnoseCmd::Boundary { pair, truth, units_csv } => {
            let (a, b, header) = load_pair(pair)?;
            let fp = pair_fingerprint(&header);
            let units = disagreement_boundary(&a.report.kept, &b.report.kept, &a.final_scores, &b.final_scores)
                .context("boundary")?;
            let crossed = units.iter().filter(|u| u.crossed).count();
            let mut agrees = 0;
            let mut ties = 0;
            for u in &units {
                let lift = u.delta_in - u.delta_out;
                if lift == u.base_margin {
                    ties += 1;
                } else if (lift > u.base_margin) == u.crossed {
                    agrees += 1;
                }
            }
            let enrichment = match truth {
                Some(path) => Some(enrichment(path, &units, a.stage1.len())?),
                None => None,
            };
            if let Some(path) = units_csv {
                write_text(path, &units_to_csv(&fp, &units))?;
            }
            let body = BoundaryBody {
                header,
                units,
                crossed,
                margin_rule_agrees: agrees,
                margin_rule_ties: ties,
                enrichment,
            };
            let text = match report {
                ReportFormat::Json => json(&fp, &body)?,
                ReportFormat::Md => {
                    let rows: Vec<Vec<String>> = body
                        .units
                        .iter()
                        .map(|u| {
                            vec![
                                u.in_token.to_string(),
                                u.out_token.to_string(),
                                fmt_f(u.base_margin),
                                fmt_f(u.delta_in),
                                fmt_f(u.delta_out),
                                u.crossed.to_string(),
                            ]
                        })
                        .collect();
                    let mut s = md_pairs(&[
                        ("mode", body.header.mode.to_string()),
                        ("units", body.units.len().to_string()),
                        ("crossed", body.crossed.to_string()),
                        ("margin_rule_agrees", body.margin_rule_agrees.to_string()),
                    ]);
                    s.push('\n');
                    s.push_str(&md_table(
                        &["in_token", "out_token", "base_margin", "delta_in", "delta_out", "crossed"],
                        &rows,
                    ));
                    s
                }
            };
            emit(pair.out.as_deref(), &text)
        }
    }
}

fn units_to_csv(fp: &str, units: &[BoundaryUnit]) -> String {
    let mut s = csv_stamp(fp);
    s.push_str("in_token,out_token,base_margin,delta_in,delta_out,crossed\n");
    for u in units {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            u.in_token, u.out_token, u.base_margin, u.delta_in, u.delta_out, u.crossed
        ));
    }
    s
}

fn enrichment(path: &Path, units: &[BoundaryUnit], t: usize) -> Result<Enrichment> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let truth: SyntheticTruth = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let planted = &truth.planted_targets;
    let in_b: BTreeSet<usize> = units.iter().map(|u| u.in_token).collect();
    let in_a: BTreeSet<usize> = units.iter().map(|u| u.out_token).collect();
    let boundary: BTreeSet<usize> = in_a.union(&in_b).copied().collect();
    let hits = boundary.intersection(planted).count();
    Ok(Enrichment {
        planted: planted.len(),
        t,
        base_rate: planted.len() as f64 / t as f64,
        boundary_tokens: boundary.len(),
        planted_in_boundary: hits,
        boundary_rate: if boundary.is_empty() {
            0.0
        } else {
            hits as f64 / boundary.len() as f64
        },
        planted_in_b_only: in_b.intersection(planted).count(),
        planted_in_a_only: in_a.intersection(planted).count(),
    })
}
