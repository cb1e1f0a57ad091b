use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;

use kvss_core::diagnostics::CellOutcome;
use kvss_core::rchannel::{sweep_laws, SweepRow};
use kvss_core::stats::{
    cluster_bootstrap, direction_match, fisher_one_sided, leave_one_out, load_cells, margin_side, mean_delta_gap,
    permutation_null, phi_margin_bucket, phi_side, positive_rate_gap, split_rates, write_enriched, Alternative,
    SplitReport, Statistic,
};

use crate::output::{csv_stamp, emit, fmt_f, fmt_opt, json, md_pairs, md_table, usage, ReportFormat, NO_CONTRACT};

#[derive(Debug, Subcommand)]
pub enum RchannelCmd {
    /// Analytic floor next to the exact best r-channel proxy on random laws.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Mode counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub n: Vec<usize>,
    /// Channel counts; defaults to every r in 1..=n.
    #[arg(long, value_delimiter = ',')]
    pub r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub eps: Vec<f64>,
    /// Mode weights for a single n; equal weights otherwise.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Query-space size; defaults to min(2n+1, 16).
    #[arg(long)]
    pub q: Option<usize>,
    /// Random laws per configuration.
    #[arg(long, default_value_t = 4)]
    pub laws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid step for the cross-check on query spaces of size at most 4.
    #[arg(long, default_value_t = 0.05)]
    pub grid: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_rchannel(cmd: &RchannelCmd, report: ReportFormat) -> Result<()> {
    let RchannelCmd::Sweep(args) = cmd;
    if !args.weights.is_empty() && args.n.len() > 1 {
        return Err(usage("--weights needs a single --n"));
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    for &n in &args.n {
        if n == 0 {
            return Err(usage("--n must be positive"));
        }
        let weights = if args.weights.is_empty() {
            vec![1.0 / n as f64; n]
        } else if args.weights.len() == n {
            args.weights.clone()
        } else {
            return Err(usage(format!("--weights has {} entries but n={n}", args.weights.len())));
        };
        let q = args.q.unwrap_or((2 * n + 1).min(16));
        let rs: Vec<usize> = if args.r.is_empty() { (1..=n).collect() } else { args.r.clone() };
        for &eps in &args.eps {
            for &r in &rs {
                let batch = sweep_laws(&weights, eps, r, q, args.laws, args.seed, args.grid)
                    .map_err(|e| usage(format!("rchannel n={n} r={r} eps={eps}: {e}")))?;
                rows.extend(batch);
            }
        }
    }
    let text = match report {
        ReportFormat::Json => sweep_csv(&rows),
        ReportFormat::Md => {
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        join(&r.weights),
                        r.eps.to_string(),
                        r.r.to_string(),
                        r.law.to_string(),
                        fmt_f(r.floor),
                        fmt_f(r.min_tv),
                        fmt_opt(r.grid_min_tv),
                    ]
                })
                .collect();
            md_table(&["n", "w", "eps", "r", "law", "floor", "min_tv", "grid_min_tv"], &table)
        }
    };
    emit(args.out.as_deref(), &text)
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = csv_stamp(NO_CONTRACT);
    s.push_str("n,w,eps,q,r,law,floor,min_tv,grid_min_tv\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n,
            join(&r.weights),
            r.eps,
            r.q,
            r.r,
            r.law,
            r.floor,
            r.min_tv,
            r.grid_min_tv.map_or_else(String::new, |g| g.to_string())
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitBy {
    Margin,
    Phi,
    PhiMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatChoice {
    /// Positive-shift rate gap between margin sides, in points.
    RateGap,
    /// Mean shift gap between margin sides.
    MeanGap,
    /// Percent of cells whose shift sign follows the margin sign.
    Direction,
}

impl StatChoice {
    fn function(self) -> Statistic<'static> {
        match self {
            StatChoice::RateGap => &positive_rate_gap,
            StatChoice::MeanGap => &mean_delta_gap,
            StatChoice::Direction => &direction_match,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKey {
    Task,
    Model,
    Budget,
}

impl ClusterKey {
    fn key(self) -> impl Fn(&CellOutcome) -> String {
        move |c: &CellOutcome| match self {
            ClusterKey::Task => c.id.task.clone(),
            ClusterKey::Model => c.id.model.clone(),
            ClusterKey::Budget => c.id.budget.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AltArg {
    Less,
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CellsArg {
    /// Cell grid CSV with columns model,task,budget,host,variant,reference,phi.
    #[arg(long)]
    pub cells: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StatsCmd {
    /// Positive-shift rates and mean shifts per bucket.
    Split {
        #[command(flatten)]
        io: CellsArg,
        #[arg(long, value_enum, default_value_t = SplitBy::Margin)]
        by: SplitBy,
        /// Cluster-bootstrap replicates for per-bucket rate intervals; 0 skips them.
        #[arg(long, default_value_t = 0)]
        n_boot: usize,
        #[arg(long, value_enum, default_value_t = ClusterKey::Task)]
        cluster: ClusterKey,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = TableFormat::Json)]
        format: TableFormat,
    },
    /// Label-permutation null for a split statistic.
    Permutation {
        #[command(flatten)]
        io: CellsArg,
        #[arg(long, value_enum, default_value_t = StatChoice::RateGap)]
        statistic: StatChoice,
        #[arg(long, default_value_t = 1000)]
        n_perm: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster bootstrap percentile interval.
    Bootstrap {
        #[command(flatten)]
        io: CellsArg,
        #[arg(long, value_enum, default_value_t = StatChoice::RateGap)]
        statistic: StatChoice,
        #[arg(long, value_enum, default_value_t = ClusterKey::Task)]
        cluster: ClusterKey,
        #[arg(long, default_value_t = 2000)]
        n_boot: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Statistic with each cluster left out in turn.
    Loo {
        #[command(flatten)]
        io: CellsArg,
        #[arg(long, value_enum, default_value_t = StatChoice::RateGap)]
        statistic: StatChoice,
        #[arg(long, value_enum, default_value_t = ClusterKey::Task)]
        cluster: ClusterKey,
    },
    /// One-sided Fisher exact test on a 2x2 table given as a,b,c,d.
    Fisher {
        #[arg(long, value_delimiter = ',', required = true)]
        table: Vec<u64>,
        #[arg(long, value_enum, default_value_t = AltArg::Greater)]
        alternative: AltArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cells with derived columns, plus a long-format heatmap table.
    Enrich {
        #[command(flatten)]
        io: CellsArg,
        /// Heatmap rows: cell id, phi/margin bucket, shift.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
}

fn cells(path: &Path) -> Result<Vec<CellOutcome>> {
    load_cells(path).with_context(|| format!("cell grid {}", path.display()))
}

#[derive(Debug, Serialize)]
struct Tagged<'a, T: Serialize> {
    statistic: StatChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster: Option<ClusterKey>,
    #[serde(flatten)]
    result: &'a T,
}

#[derive(Debug, Serialize)]
struct SplitBody<'a> {
    by: &'static str,
    buckets: &'a [SplitReport],
}

#[derive(Debug, Serialize)]
struct FisherBody {
    table: [[u64; 2]; 2],
    alternative: &'static str,
    p_value: f64,
}

fn positive_rate(cells: &[CellOutcome]) -> f64 {
    if cells.is_empty() {
        return f64::NAN;
    }
    100.0 * cells.iter().filter(|c| c.delta > 0.0).count() as f64 / cells.len() as f64
}

pub fn run_stats(cmd: &StatsCmd, report: ReportFormat) -> Result<()> {
    match cmd {
        StatsCmd::Split {
            io,
            by,
            n_boot,
            cluster,
            seed,
            format,
        } => {
            let grid = cells(&io.cells)?;
            let (name, declared, bucket): (&str, &[&str], fn(&CellOutcome) -> String) = match by {
                SplitBy::Margin => ("margin", &["positive", "nonpositive"], margin_side),
                SplitBy::Phi => ("phi", &["low", "high"], phi_side),
                SplitBy::PhiMargin => (
                    "phi-margin",
                    &["low/pos", "low/tie", "low/neg", "high/pos", "high/tie", "high/neg"],
                    phi_margin_bucket,
                ),
            };
            let mut rows = split_rates(&grid, declared, bucket).map_err(|e| usage(e.to_string()))?;
            if *n_boot > 0 {
                for row in rows.iter_mut() {
                    let members: Vec<CellOutcome> = grid.iter().filter(|c| bucket(c) == row.bucket).cloned().collect();
                    if let Ok(b) = cluster_bootstrap(&members, cluster.key(), &positive_rate, *n_boot, *seed) {
                        row.ci = Some(b.ci);
                    }
                }
            }
            let text = match (report, format) {
                (ReportFormat::Md, _) => {
                    let table: Vec<Vec<String>> = rows
                        .iter()
                        .map(|r| {
                            vec![
                                r.bucket.clone(),
                                r.count.to_string(),
                                fmt_opt(r.rate),
                                fmt_opt(r.mean_delta),
                                r.ci.map_or_else(|| "-".into(), |(lo, hi)| format!("[{}, {}]", fmt_f(lo), fmt_f(hi))),
                            ]
                        })
                        .collect();
                    md_table(&["bucket", "n", "rate_%", "mean_delta", "ci"], &table)
                }
                (ReportFormat::Json, TableFormat::Json) => json(NO_CONTRACT, &SplitBody { by: name, buckets: &rows })?,
                (ReportFormat::Json, TableFormat::Csv) => {
                    let mut s = csv_stamp(NO_CONTRACT);
                    s.push_str("bucket,count,rate,mean_delta,ci_low,ci_high\n");
                    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
                    for r in &rows {
                        s.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            r.bucket,
                            r.count,
                            opt(r.rate),
                            opt(r.mean_delta),
                            opt(r.ci.map(|c| c.0)),
                            opt(r.ci.map(|c| c.1))
                        ));
                    }
                    s
                }
            };
            emit(io.out.as_deref(), &text)
        }
        StatsCmd::Permutation {
            io,
            statistic,
            n_perm,
            seed,
        } => {
            let grid = cells(&io.cells)?;
            let result =
                permutation_null(&grid, statistic.function(), *n_perm, *seed).map_err(|e| usage(e.to_string()))?;
            let text = match report {
                ReportFormat::Json => json(
                    NO_CONTRACT,
                    &Tagged {
                        statistic: *statistic,
                        cluster: None,
                        result: &result,
                    },
                )?,
                ReportFormat::Md => md_pairs(&[
                    ("observed", fmt_f(result.observed)),
                    ("null_mean", fmt_f(result.null_mean)),
                    (
                        "null_interval",
                        format!("[{}, {}]", fmt_f(result.null_interval.0), fmt_f(result.null_interval.1)),
                    ),
                    ("p_value", fmt_f(result.p_value)),
                    ("n_perm", result.n_perm.to_string()),
                ]),
            };
            emit(io.out.as_deref(), &text)
        }
        StatsCmd::Bootstrap {
            io,
            statistic,
            cluster,
            n_boot,
            seed,
        } => {
            let grid = cells(&io.cells)?;
            let result = cluster_bootstrap(&grid, cluster.key(), statistic.function(), *n_boot, *seed)
                .map_err(|e| usage(e.to_string()))?;
            let text = match report {
                ReportFormat::Json => json(
                    NO_CONTRACT,
                    &Tagged {
                        statistic: *statistic,
                        cluster: Some(*cluster),
                        result: &result,
                    },
                )?,
                ReportFormat::Md => md_pairs(&[
                    ("estimate", fmt_f(result.estimate)),
                    ("ci", format!("[{}, {}]", fmt_f(result.ci.0), fmt_f(result.ci.1))),
                    ("clusters", result.clusters.to_string()),
                    ("n_boot", result.n_boot.to_string()),
                    ("undefined_replicates", result.undefined_replicates.to_string()),
                ]),
            };
            emit(io.out.as_deref(), &text)
        }
        StatsCmd::Loo { io, statistic, cluster } => {
            let grid = cells(&io.cells)?;
            let result = leave_one_out(&grid, cluster.key(), statistic.function()).map_err(|e| usage(e.to_string()))?;
            let text = match report {
                ReportFormat::Json => json(
                    NO_CONTRACT,
                    &Tagged {
                        statistic: *statistic,
                        cluster: Some(*cluster),
                        result: &result,
                    },
                )?,
                ReportFormat::Md => {
                    let rows: Vec<Vec<String>> = result.rows.iter().map(|(k, v)| vec![k.clone(), fmt_f(*v)]).collect();
                    md_table(&["left_out", "statistic"], &rows)
                }
            };
            emit(io.out.as_deref(), &text)
        }
        StatsCmd::Fisher { table, alternative, out } => {
            let &[a, b, c, d] = table.as_slice() else {
                return Err(usage(format!("--table needs 4 counts, got {}", table.len())));
            };
            let t = [[a, b], [c, d]];
            let (alt, name) = match alternative {
                AltArg::Less => (Alternative::Less, "less"),
                AltArg::Greater => (Alternative::Greater, "greater"),
            };
            let body = FisherBody {
                table: t,
                alternative: name,
                p_value: fisher_one_sided(t, alt),
            };
            let text = match report {
                ReportFormat::Json => json(NO_CONTRACT, &body)?,
                ReportFormat::Md => md_pairs(&[
                    ("table", format!("{:?}", body.table)),
                    ("alternative", name.to_string()),
                    ("p_value", format!("{:.6}", body.p_value)),
                ]),
            };
            emit(out.as_deref(), &text)
        }
        StatsCmd::Enrich { io, heatmap } => {
            let grid = cells(&io.cells)?;
            let mut buf = csv_stamp(NO_CONTRACT).into_bytes();
            write_enriched(&mut buf, &grid).context("writing enriched cells")?;
            emit(io.out.as_deref(), &String::from_utf8(buf)?)?;
            if let Some(path) = heatmap {
                let mut s = csv_stamp(NO_CONTRACT);
                s.push_str("cell_id,bucket,value\n");
                for c in &grid {
                    s.push_str(&format!(
                        "{}|{}|{},{},{}\n",
                        c.id.model,
                        c.id.task,
                        c.id.budget,
                        phi_margin_bucket(c),
                        c.delta
                    ));
                }
                crate::output::write_text(path, &s)?;
            }
            Ok(())
        }
    }
}
