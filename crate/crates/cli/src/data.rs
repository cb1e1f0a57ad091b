use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use serde::Serialize;

use kvss_core::capture::capture_info;
use kvss_core::synth::{
    synth_exchangeable, synth_multitarget, synth_planted_needle, Background, MultitargetSpec, NeedleSpec, SynthShape,
    SyntheticTruth,
};
use kvss_core::{load_capture, save_capture, CaptureDims};

use crate::output::{json, md_pairs, usage, write_text, ReportFormat, NO_CONTRACT};

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Subcommand)]
pub enum CaptureCmd {
    /// Check a capture directory against the tensor-store schema.
    Validate { dir: PathBuf },
    /// Print shapes, head map, metadata and the worst row-sum error.
    Info { dir: PathBuf },
}

#[derive(Debug, Serialize)]
struct Validated {
    dir: String,
    valid: bool,
    dims: CaptureDims,
}

pub fn run_capture(cmd: &CaptureCmd, report: ReportFormat) -> Result<()> {
    match cmd {
        CaptureCmd::Validate { dir } => {
            let capture = load_capture(dir).with_context(|| format!("capture {}", dir.display()))?;
            let body = Validated {
                dir: dir.display().to_string(),
                valid: true,
                dims: capture.dims(),
            };
            match report {
                ReportFormat::Json => print!("{}", json(NO_CONTRACT, &body)?),
                ReportFormat::Md => print!("{}", dims_table(&body.dims, &[("valid", "true".into())])),
            }
        }
        CaptureCmd::Info { dir } => {
            let capture = load_capture(dir).with_context(|| format!("capture {}", dir.display()))?;
            let info = capture_info(&capture);
            match report {
                ReportFormat::Json => print!("{}", json(NO_CONTRACT, &info)?),
                ReportFormat::Md => print!(
                    "{}",
                    dims_table(&info.dims, &[("max_row_sum_error", format!("{:.3e}", info.max_row_sum_error))])
                ),
            }
        }
    }
    Ok(())
}

fn dims_table(d: &CaptureDims, extra: &[(&str, String)]) -> String {
    let mut pairs = vec![
        ("T", d.t.to_string()),
        ("layers", d.layers.to_string()),
        ("heads", d.heads.to_string()),
        ("kv_heads", d.kv_heads.to_string()),
        ("head_dim", d.head_dim.to_string()),
    ];
    pairs.extend(extra.iter().cloned());
    md_pairs(&pairs)
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    /// Prompt length.
    #[arg(long = "T", visible_alias = "t", default_value_t = 64)]
    pub t: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// KV heads; defaults to one per query head.
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Capture directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

impl ShapeArgs {
    fn shape(&self) -> SynthShape {
        let s = SynthShape::new(self.t).layers(self.layers).heads(self.heads).head_dim(self.head_dim);
        match self.kv_heads {
            Some(kv) => s.kv_heads(kv),
            None => s,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    /// Independent flat-Dirichlet rows.
    Exchangeable(#[command(flatten)] ShapeArgs),
    /// Sparse retrieval heads that add mass to planted target keys.
    Needle {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<usize>,
        #[arg(long, default_value_t = 0.3)]
        contrast: f64,
        #[arg(long, default_value_t = 1)]
        active_heads: usize,
        /// Keys that every head boosts by `--tau`.
        #[arg(long, value_delimiter = ',')]
        distractors: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
    },
    /// Separated modes with question anchors and a biased tail.
    Multitarget {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long)]
        basin_width: Option<usize>,
    },
}

#[derive(Debug, Serialize)]
struct SynthSummary<'a> {
    kind: &'a str,
    out: String,
    seed: u64,
    dims: CaptureDims,
    truth: &'a SyntheticTruth,
}

pub fn run_synth(cmd: &SynthCmd, report: ReportFormat) -> Result<()> {
    let (kind, args, result) = match cmd {
        SynthCmd::Exchangeable(a) => ("exchangeable", a, synth_exchangeable(a.shape(), a.seed)),
        SynthCmd::Needle {
            shape,
            targets,
            contrast,
            active_heads,
            distractors,
            tau,
        } => {
            let background = if distractors.is_empty() {
                Background::Exchangeable
            } else {
                Background::Structured {
                    distractors: distractors.clone(),
                    tau: *tau,
                }
            };
            let spec = NeedleSpec {
                targets: targets.clone(),
                contrast: *contrast,
                active_heads: *active_heads,
                background,
            };
            ("needle", shape, synth_planted_needle(shape.shape(), &spec, shape.seed))
        }
        SynthCmd::Multitarget {
            shape,
            weights,
            eps,
            basin_width,
        } => {
            let spec = MultitargetSpec {
                weights: weights.clone(),
                eps: *eps,
                basin_width: *basin_width,
            };
            ("multitarget", shape, synth_multitarget(shape.shape(), &spec, shape.seed))
        }
    };
    let (capture, truth) = result.map_err(|e| usage(format!("synth {kind}: {e}")))?;
    save_capture(&capture, &args.out).with_context(|| format!("writing capture {}", args.out.display()))?;
    write_text(&args.out.join(TRUTH_FILE), &json(NO_CONTRACT, &truth)?)?;
    let summary = SynthSummary {
        kind,
        out: args.out.display().to_string(),
        seed: args.seed,
        dims: capture.dims(),
        truth: &truth,
    };
    match report {
        ReportFormat::Json => print!("{}", json(NO_CONTRACT, &summary)?),
        ReportFormat::Md => print!(
            "{}",
            dims_table(
                &summary.dims,
                &[
                    ("kind", kind.to_string()),
                    ("planted_targets", truth.planted_targets.len().to_string())
                ]
            )
        ),
    }
    Ok(())
}
