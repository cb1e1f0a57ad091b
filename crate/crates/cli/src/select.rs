use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use kvss_core::access::{
    build_proxy_bank, score_count_debiased, score_cumulative, score_decode_proximal, score_obs_window,
    window_prefix_mass, ProxyBank,
};
use kvss_core::contract::{apply_allocation, AllocationRule};
use kvss_core::io::{kept_json, report_json, write_block_scores_csv, write_scores_csv};
use kvss_core::projection::{block_project, contract_budget, token_fill, token_project, ProjectionReport};
use kvss_core::value::{
    additive_adapter, group_block_scores, host_block_means, stage2_substitute, BlockScoreVector, Leverage, Stage2Params,
    Variant,
};
use kvss_core::{contract_fingerprint, load_capture, make_blocks, AttentionCapture, ScoreVector, SelectorContract};

use crate::output::{fmt_opt, json, md_pairs, usage, write_text, ReportFormat};

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const KEPT_FILE: &str = "kept.json";
pub const STAGE1_FILE: &str = "scores_stage1.csv";
pub const FINAL_FILE: &str = "scores_final.csv";
pub const BLOCK_FILE: &str = "block_scores.csv";
pub const CONTRACT_FILE: &str = "contract.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Scorer {
    #[value(name = "cumulative")]
    #[serde(rename = "cumulative")]
    Cumulative,
    #[value(name = "debiased")]
    #[serde(rename = "debiased")]
    Debiased,
    #[value(name = "obs_window", alias = "obs-window")]
    #[serde(rename = "obs_window")]
    ObsWindow,
    #[value(name = "decode_proximal", alias = "decode-proximal")]
    #[serde(rename = "decode_proximal")]
    DecodeProximal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Block,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LeverageArg {
    MaxClip,
    Additive,
}

/// Stage II choice: `none`, a value variant, or the additive adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage2Choice {
    None,
    Value(Variant),
    Adapter(f64),
}

impl Stage2Choice {
    pub fn label(&self) -> String {
        match self {
            Stage2Choice::None => "none".into(),
            Stage2Choice::Value(v) => v.label(),
            Stage2Choice::Adapter(a) => Variant::AdditiveAdapter(*a).label(),
        }
    }
}

impl FromStr for Stage2Choice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let param = |p: &str| {
            p.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("bad numeric parameter {p:?} in {s:?}"))
        };
        Ok(match s.split_once(':') {
            None => match s {
                "none" => Stage2Choice::None,
                "full" => Stage2Choice::Value(Variant::Full),
                "nolev" => Stage2Choice::Value(Variant::NoLev),
                "novalue" => Stage2Choice::Value(Variant::NoValue),
                "support" | "support_only" => Stage2Choice::Value(Variant::SupportOnly),
                _ => return Err(format!("unknown stage2 variant {s:?}")),
            },
            Some(("soft", p)) => Stage2Choice::Value(Variant::SoftRobust(param(p)?)),
            Some(("lev", p)) => Stage2Choice::Value(Variant::AlphaBlend(param(p)?)),
            Some(("alpha", p)) => Stage2Choice::Adapter(param(p)?),
            Some(_) => return Err(format!("unknown stage2 variant {s:?}")),
        })
    }
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Capture directory.
    #[arg(long)]
    pub capture: PathBuf,
    /// Contract JSON; when absent one is built from the flags below.
    #[arg(long)]
    pub contract: Option<PathBuf>,
    /// Budget ratio b; k = floor(b T).
    #[arg(long, default_value_t = 0.25, conflicts_with = "contract")]
    pub budget: f64,
    #[arg(long, default_value_t = 4, conflicts_with = "contract")]
    pub block_size: usize,
    /// Observation window in queries, capped at T.
    #[arg(long, default_value_t = 8, conflicts_with = "contract")]
    pub window: usize,
    /// Odd pooling kernel width.
    #[arg(long, default_value_t = 1, conflicts_with = "contract")]
    pub kernel: usize,
    #[arg(long, default_value_t = 0, conflicts_with = "contract")]
    pub reserved_tail: usize,
    #[arg(long, value_enum, default_value_t = Scorer::ObsWindow)]
    pub scorer: Scorer,
    /// none | full | nolev | novalue | support | soft:TAU | lev:ALPHA | alpha:ALPHA
    #[arg(long, default_value = "none")]
    pub stage2: Stage2Choice,
    #[arg(long, value_enum, default_value_t = Projection::Block)]
    pub projection: Projection,
    /// Spend lattice slack on decode-proximal tokens outside the kept blocks.
    #[arg(long)]
    pub token_fill: bool,
    /// Recency decay of the proxy bank tail, in tokens.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub tau_q: f64,
    /// Proxy bank tail width; defaults to the observation window, or 1.
    #[arg(long)]
    pub proxy_tail: Option<usize>,
    /// Extra proxy query positions with weight one.
    #[arg(long, value_delimiter = ',')]
    pub anchors: Vec<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub eps_a: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps_mu: f64,
    #[arg(long, value_enum, default_value_t = LeverageArg::MaxClip)]
    pub leverage: LeverageArg,
    /// Run directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Reads a contract, mapping parse and validation failures to usage errors.
/// Stamped copies written by `select` are accepted; the stamp is dropped and
/// the fingerprint recomputed.
pub fn read_contract(path: &Path) -> Result<SelectorContract> {
    let text = fs::read_to_string(path).with_context(|| format!("reading contract {}", path.display()))?;
    let parse = |t: &str| SelectorContract::from_json(t).map_err(|e| usage(format!("{}: {e}", path.display())));
    match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(serde_json::Value::Object(mut doc)) if doc.contains_key(STAMP_VERSION) => {
            doc.remove(STAMP_VERSION);
            doc.remove(STAMP_FINGERPRINT);
            parse(&serde_json::Value::Object(doc).to_string())
        }
        _ => parse(&text),
    }
}

const STAMP_VERSION: &str = "tool_version";
const STAMP_FINGERPRINT: &str = "contract_fingerprint";

#[derive(Debug, Serialize)]
struct AllocationRow {
    layer: usize,
    head: usize,
    k: usize,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    capture: String,
    t: usize,
    scorer: Scorer,
    stage2: String,
    projection: Projection,
    token_fill: bool,
    tau_q: String,
    proxy_tail: usize,
    anchors: Vec<usize>,
    eps_a: f64,
    eps_mu: f64,
    leverage: &'static str,
    k: usize,
    kept: usize,
    allocation: Vec<AllocationRow>,
    files: Vec<&'static str>,
}

fn stage1(capture: &AttentionCapture, contract: &SelectorContract, scorer: Scorer, bank: &ProxyBank) -> Result<ScoreVector> {
    let s = match scorer {
        Scorer::Cumulative => score_cumulative(capture, contract)?,
        Scorer::Debiased => score_count_debiased(capture, contract)?,
        Scorer::ObsWindow => score_obs_window(capture, contract)?,
        Scorer::DecodeProximal => score_decode_proximal(capture, contract, bank)?,
    };
    Ok(s)
}

pub fn run_select(args: &SelectArgs, report: ReportFormat) -> Result<()> {
    let capture = load_capture(&args.capture).with_context(|| format!("capture {}", args.capture.display()))?;
    let contract = match &args.contract {
        Some(path) => read_contract(path)?,
        None => {
            let c = SelectorContract::uniform(args.budget, args.block_size, capture.layers())
                .with_window(args.window.min(capture.t()))
                .with_kernel(args.kernel)
                .with_reserved_tail(args.reserved_tail);
            c.validate().map_err(|e| usage(e.to_string()))?;
            c
        }
    };
    contract.check_capture(capture.t(), capture.layers()).context("contract")?;
    if args.token_fill && args.projection == Projection::Token {
        return Err(usage("--token-fill applies only to block projection"));
    }
    let fp = contract_fingerprint(&contract);
    let t = capture.t();

    let proxy_tail = args.proxy_tail.unwrap_or(contract.observation_window.max(1));
    let bank = build_proxy_bank(t, proxy_tail, &args.anchors, args.tau_q, None)
        .map_err(|e| usage(format!("proxy bank: {e}")))?;
    let params = Stage2Params {
        eps_a: args.eps_a,
        eps_mu: args.eps_mu,
        leverage: match args.leverage {
            LeverageArg::MaxClip => Leverage::MaxClip,
            LeverageArg::Additive => Leverage::Additive,
        },
    };

    let host = stage1(&capture, &contract, args.scorer, &bank).context("stage1")?;
    let blocks = make_blocks(t, contract.block_size);
    let k = contract_budget(&contract, t);

    let value_scores = |variant| group_block_scores(&capture, &contract, &bank, &blocks, variant, &params, None);
    let block_scores: Option<BlockScoreVector> = match (args.stage2, args.projection) {
        (Stage2Choice::None, Projection::Token) => None,
        (Stage2Choice::None, Projection::Block) => Some(host_block_means(&host, &blocks)?),
        (Stage2Choice::Value(v), _) => Some(value_scores(v).context("stage2")?),
        (Stage2Choice::Adapter(alpha), _) => {
            let means = host_block_means(&host, &blocks)?;
            let value = value_scores(Variant::Full).context("stage2")?;
            Some(additive_adapter(&means, &value, alpha).context("stage2")?)
        }
    };
    let final_scores = match &block_scores {
        Some(b) => stage2_substitute(&host, b, &blocks).context("stage2")?,
        None => host.clone(),
    };

    let mut projected: ProjectionReport = match args.projection {
        Projection::Block => block_project(
            block_scores.as_ref().expect("block projection has block scores"),
            &blocks,
            k,
            &contract,
        ),
        Projection::Token => token_project(&final_scores, k, &blocks),
    }
    .context("stage3")?;
    if args.token_fill {
        let fill_scores = score_decode_proximal(&capture, &contract, &bank).context("token fill")?;
        projected = token_fill(&projected, &fill_scores).context("token fill")?;
    }
    let p_last = last_row_law(&capture, &contract)?;
    let projected = projected.with_residual(&p_last).context("stage3")?;

    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = vec![KEPT_FILE, REPORT_FILE, STAGE1_FILE, FINAL_FILE, CONTRACT_FILE];
    write_text(&out.join(KEPT_FILE), &kept_json(&projected.kept, k)?)?;
    write_text(&out.join(REPORT_FILE), &report_json(&projected)?)?;
    write_scores(&out.join(STAGE1_FILE), &host)?;
    write_scores(&out.join(FINAL_FILE), &final_scores)?;
    write_text(&out.join(CONTRACT_FILE), &json(&fp, &contract)?)?;
    if let Some(b) = &block_scores {
        let mut buf = Vec::new();
        write_block_scores_csv(&mut buf, b)?;
        write_text(&out.join(BLOCK_FILE), &String::from_utf8(buf)?)?;
        files.push(BLOCK_FILE);
    }

    let head_mass = (contract.allocation == AllocationRule::HeadAdaptive).then(|| window_prefix_mass(&capture, &contract));
    let allocation = apply_allocation(&contract, t, capture.heads(), head_mass.as_ref(), None)
        .context("allocation")?
        .into_iter()
        .map(|((layer, head), k)| AllocationRow { layer, head, k })
        .collect();
    let manifest = RunManifest {
        command: "select",
        capture: args.capture.display().to_string(),
        t,
        scorer: args.scorer,
        stage2: args.stage2.label(),
        projection: args.projection,
        token_fill: args.token_fill,
        tau_q: args.tau_q.to_string(),
        proxy_tail,
        anchors: bank.anchors.clone(),
        eps_a: args.eps_a,
        eps_mu: args.eps_mu,
        leverage: match args.leverage {
            LeverageArg::MaxClip => "max_clip",
            LeverageArg::Additive => "additive",
        },
        k,
        kept: projected.kept.len(),
        allocation,
        files,
    };
    write_text(&out.join(RUN_FILE), &json(&fp, &manifest)?)?;

    match report {
        ReportFormat::Json => print!("{}", json(&fp, &summary(&projected))?),
        ReportFormat::Md => {
            let s = summary(&projected);
            print!(
                "{}",
                md_pairs(&[
                    ("contract_fingerprint", fp.clone()),
                    ("k", s.k.to_string()),
                    ("kept", s.kept.to_string()),
                    ("k_b", s.k_b.to_string()),
                    ("eps_lat", s.eps_lat.to_string()),
                    ("shortfall", s.shortfall.to_string()),
                    ("slack", s.slack.to_string()),
                    ("fill_tokens", s.fill_tokens.to_string()),
                    ("eta_proj", fmt_opt(s.eta_proj)),
                ])
            )
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ProjectionSummary {
    pub k: usize,
    pub kept: usize,
    pub k_b: usize,
    pub eps_lat: usize,
    pub shortfall: usize,
    pub slack: usize,
    pub fill_tokens: usize,
    pub eta_proj: Option<f64>,
}

pub fn summary(r: &ProjectionReport) -> ProjectionSummary {
    ProjectionSummary {
        k: r.k,
        kept: r.kept.len(),
        k_b: r.k_b,
        eps_lat: r.eps_lat,
        shortfall: r.shortfall,
        slack: r.slack,
        fill_tokens: r.fill_tokens.len(),
        eta_proj: r.eta_proj,
    }
}

fn write_scores(path: &Path, s: &ScoreVector) -> Result<()> {
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, s)?;
    write_text(path, &String::from_utf8(buf)?)
}

/// Contract-pooled attention of the last prefill query, normalized.
fn last_row_law(capture: &AttentionCapture, contract: &SelectorContract) -> Result<Vec<f64>> {
    let bank = build_proxy_bank(capture.t(), 1, &[], f64::INFINITY, None)?;
    let pooled = score_decode_proximal(capture, contract, &bank)?;
    let total: f64 = pooled.values.iter().sum();
    Ok(pooled.values.iter().map(|v| v / total).collect())
}
