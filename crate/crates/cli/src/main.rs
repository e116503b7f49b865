//! `poseseg`: command-line driver tying keypoint-to-prompt selection, the
//! refinement simulation harness, and mask evaluation into reproducible runs.
//!
//! Options may come from a JSON config file (`--config`) with individual
//! flags taking precedence. Every output directory receives a
//! `config.json` snapshot of the resolved options, and two runs with the
//! same resolved config produce byte-identical outputs.
//!
//! Exit codes: 2 = configuration error, 3 = data error, 4 = wire-protocol
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use poseseg_core::coco::{evaluate, load_dets, load_gt, write_results, DetInstance, EvalError,
    EvalParams, GtDataset};
use poseseg_core::mask::{crop_to_bbox, inflate_bbox, rle_compress, rle_encode, BBox, MaskDims};
use poseseg_core::pose::{Pose, ScoreField};
use poseseg_core::prompt::{max_spread, max_vis, PointSource, PromptLabel, PromptSet};
use poseseg_core::refine::{SamplerConfig, SamplerKind};
use poseseg_core::sim::{
    ablation_box, run_refine_loop_with, traces_to_csv, BboxMode, OracleConfig, OracleSegmenter,
    SimError,
};
use poseseg_core::wire::ExternalSegmenter;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum CliError {
    Config(String),
    Data(String),
    Protocol(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Protocol(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Protocol(m) => m,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Wire(w) => CliError::Protocol(w.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Flag-level enums (mirrors of library enums that clap can parse)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StrategyArg {
    MaxVis,
    MaxSpread,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ScoreFieldArg {
    Visibility,
    PresenceProb,
    ExpectedOks,
    GtFlag,
}

impl From<ScoreFieldArg> for ScoreField {
    fn from(a: ScoreFieldArg) -> Self {
        match a {
            ScoreFieldArg::Visibility => ScoreField::Visibility,
            ScoreFieldArg::PresenceProb => ScoreField::PresenceProb,
            ScoreFieldArg::ExpectedOks => ScoreField::ExpectedOks,
            ScoreFieldArg::GtFlag => ScoreField::GtFlag,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SamplerArg {
    MaskRefine,
    Pose1MaskRefine,
    PoseMaskRefine,
}

impl From<SamplerArg> for SamplerKind {
    fn from(a: SamplerArg) -> Self {
        match a {
            SamplerArg::MaskRefine => SamplerKind::MaskRefine,
            SamplerArg::Pose1MaskRefine => SamplerKind::Pose1MaskRefine,
            SamplerArg::PoseMaskRefine => SamplerKind::PoseMaskRefine,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BboxModeArg {
    None,
    GtBox,
    InflatedGtBox,
}

// ---------------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "poseseg", version, about = "Pose-guided segmentation prompting toolkit")]
struct Cli {
    /// JSON config file; individual flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build keypoint prompt sets from a COCO annotation file with keypoints.
    Select(SelectArgs),
    /// Run the iterative refinement loop against the oracle or an external
    /// segmenter and write per-step IoU traces.
    Simulate(SimulateArgs),
    /// Score detection masks against ground truth (COCO mask AP protocol).
    Evaluate(EvaluateArgs),
    /// Inflate a box about its center and print the result.
    InflateBbox(InflateArgs),
    /// Crop each GT mask to a scaled window around its box.
    Crop(CropArgs),
}

#[derive(Args)]
struct SelectArgs {
    /// COCO ground-truth JSON (pose source).
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Keypoints per prompt; a comma-separated list sweeps several counts.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_enum)]
    score_field: Option<ScoreFieldArg>,
    /// Minimum keypoint score for spread-based selection.
    #[arg(long)]
    min_score: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Probability a correction point is drawn from the GT mask.
    #[arg(long)]
    p_gt: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    bbox_mode: Option<BboxModeArg>,
    /// Per-side growth for inflated_gt_box mode.
    #[arg(long)]
    inflate_factor: Option<f64>,
    /// host:port of an external segmenter; omit to use the in-process oracle.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: Option<PathBuf>,
    /// COCO results JSON with compressed-RLE segmentations.
    #[arg(long)]
    dets: Option<PathBuf>,
    /// Ignore objects smaller than 32x32 pixels (the COCO* slice).
    #[arg(long)]
    exclude_small: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InflateArgs {
    /// Box as x,y,w,h.
    #[arg(long, value_delimiter = ',', num_args = 1..=4)]
    bbox: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    inflate_factor: f64,
    /// Image height the box is clamped to.
    #[arg(long)]
    height: u32,
    /// Image width the box is clamped to.
    #[arg(long)]
    width: u32,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Window size as a multiple of the tight box (1.5 = 50% larger).
    #[arg(long)]
    crop_factor: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    gt: Option<PathBuf>,
    dets: Option<PathBuf>,
    out: Option<PathBuf>,
    strategy: Option<StrategyArg>,
    n: Option<Vec<usize>>,
    score_field: Option<ScoreFieldArg>,
    min_score: Option<f64>,
    sampler: Option<SamplerArg>,
    p_gt: Option<f64>,
    seed: Option<u64>,
    bbox_mode: Option<BboxModeArg>,
    inflate_factor: Option<f64>,
    crop_factor: Option<f64>,
    exclude_small: Option<bool>,
    endpoint: Option<String>,
    oracle: Option<OracleConfig>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn require_path(flag: Option<PathBuf>, cfg: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = flag
        .or(cfg)
        .ok_or_else(|| CliError::Config(format!("--{name} is required")))?;
    if !p.exists() {
        return Err(CliError::Data(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or(cfg)
        .ok_or_else(|| CliError::Config("--out is required".to_string()))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_snapshot<T: Serialize>(dir: &Path, resolved: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(resolved)
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PromptPointOut {
    x: f64,
    y: f64,
    label: &'static str,
    keypoint: usize,
}

#[derive(Serialize)]
struct PromptSetOut {
    image_id: u64,
    instance_id: u64,
    points: Vec<PromptPointOut>,
}

fn prompt_out(image_id: u64, instance_id: u64, ps: &PromptSet) -> PromptSetOut {
    PromptSetOut {
        image_id,
        instance_id,
        points: ps
            .points
            .iter()
            .map(|p| PromptPointOut {
                x: p.x,
                y: p.y,
                label: match p.label {
                    PromptLabel::Positive => "positive",
                    PromptLabel::Negative => "negative",
                },
                keypoint: match p.source {
                    PointSource::PoseKeypoint(i) => i,
                    _ => unreachable!("selection only emits keypoint points"),
                },
            })
            .collect(),
    }
}

fn cmd_select(args: SelectArgs, cfg: FileConfig) -> Result<(), CliError> {
    let gt_path = require_path(args.gt, cfg.gt, "gt")?;
    let strategy = args.strategy.or(cfg.strategy).unwrap_or(StrategyArg::MaxVis);
    let ns: Vec<usize> = if !args.n.is_empty() {
        args.n
    } else {
        cfg.n.unwrap_or_else(|| vec![3])
    };
    if ns.is_empty() || ns.iter().any(|&n| n == 0 || n > 8) {
        return Err(CliError::Config("--n values must be in 1..=8".to_string()));
    }
    let field: ScoreField = args
        .score_field
        .or(cfg.score_field)
        .unwrap_or(ScoreFieldArg::Visibility)
        .into();
    let min_score = args.min_score.or(cfg.min_score).unwrap_or(0.3);
    if !(0.0..=1.0).contains(&min_score) {
        return Err(CliError::Config("--min-score must be in [0, 1]".to_string()));
    }
    let dir = out_dir(args.out, cfg.out)?;

    let dataset = load_gt(&gt_path)?;
    write_snapshot(
        &dir,
        &serde_json::json!({
            "command": "select",
            "gt": gt_path,
            "strategy": strategy,
            "n": ns,
            "score_field": ScoreFieldArg::from_field(field),
            "min_score": min_score,
        }),
    )?;

    let mut skipped = 0usize;
    for &n in &ns {
        let mut out = Vec::new();
        for inst in &dataset.instances {
            let Some(pose) = &inst.pose else {
                skipped += 1;
                continue;
            };
            let selected = match strategy {
                StrategyArg::MaxVis => max_vis(pose, n, field),
                StrategyArg::MaxSpread => max_spread(pose, n, field, min_score),
            };
            match selected {
                Ok(ps) => out.push(prompt_out(inst.image_id, inst.instance_id, &ps)),
                Err(_) => skipped += 1,
            }
        }
        let text = serde_json::to_string_pretty(&out).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(dir.join(format!("prompts_n{n}.json")), text + "\n")?;
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} instances without usable keypoints");
    }
    Ok(())
}

impl ScoreFieldArg {
    fn from_field(f: ScoreField) -> Self {
        match f {
            ScoreField::Visibility => ScoreFieldArg::Visibility,
            ScoreField::PresenceProb => ScoreFieldArg::PresenceProb,
            ScoreField::ExpectedOks => ScoreFieldArg::ExpectedOks,
            ScoreField::GtFlag => ScoreFieldArg::GtFlag,
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn resolve_bbox_mode(
    mode: Option<BboxModeArg>,
    inflate_factor: Option<f64>,
) -> Result<BboxMode, CliError> {
    Ok(match mode.unwrap_or(BboxModeArg::None) {
        BboxModeArg::None => BboxMode::None,
        BboxModeArg::GtBox => BboxMode::GtBox,
        BboxModeArg::InflatedGtBox => {
            let f = inflate_factor.unwrap_or(0.5);
            if f < 0.0 {
                return Err(CliError::Config("--inflate-factor must be >= 0".to_string()));
            }
            BboxMode::InflatedGtBox(f)
        }
    })
}

fn cmd_simulate(args: SimulateArgs, cfg: FileConfig) -> Result<(), CliError> {
    let gt_path = require_path(args.gt, cfg.gt, "gt")?;
    let kind: SamplerKind = args
        .sampler
        .or(cfg.sampler)
        .unwrap_or(SamplerArg::PoseMaskRefine)
        .into();
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let mut sampler = SamplerConfig::new(kind, seed);
    if let Some(p) = args.p_gt.or(cfg.p_gt) {
        sampler.p_gt_sample = p;
    }
    if !sampler.validate() {
        return Err(CliError::Config("--p-gt must be in [0, 1]".to_string()));
    }
    let bbox_mode = resolve_bbox_mode(
        args.bbox_mode.or(cfg.bbox_mode),
        args.inflate_factor.or(cfg.inflate_factor),
    )?;
    let oracle = cfg.oracle.clone().unwrap_or_default();
    let endpoint = args.endpoint.or(cfg.endpoint);
    let dir = out_dir(args.out, cfg.out)?;

    let dataset = load_gt(&gt_path)?;
    write_snapshot(
        &dir,
        &serde_json::json!({
            "command": "simulate",
            "gt": gt_path,
            "sampler": sampler,
            "oracle": oracle,
            "bbox_mode": bbox_mode,
            "endpoint": endpoint,
        }),
    )?;

    struct Instance {
        image_id: u64,
        gt: poseseg_core::mask::BinaryMask,
        pose: Pose,
        bbox: Option<BBox>,
    }
    let instances: Vec<Instance> = dataset
        .instances
        .iter()
        .map(|inst| {
            let dims = dataset.images[&inst.image_id];
            let gt = inst.segmentation.mask(dims).map_err(|e| {
                CliError::Data(format!("annotation {}: {e}", inst.instance_id))
            })?;
            let pose = inst
                .pose
                .clone()
                .unwrap_or_else(|| Pose::empty(inst.image_id, inst.instance_id));
            let bbox = ablation_box(bbox_mode, &gt)?;
            Ok(Instance {
                image_id: inst.image_id,
                gt,
                pose,
                bbox,
            })
        })
        .collect::<Result<_, CliError>>()?;

    let outcomes: Vec<(u64, poseseg_core::sim::RefineOutcome)> = match endpoint {
        Some(addr) => {
            // One connection, strictly sequential requests.
            let mut seg = ExternalSegmenter::connect(&addr, Some(Duration::from_secs(30)))
                .map_err(|e| CliError::Protocol(e.to_string()))?;
            instances
                .iter()
                .map(|inst| {
                    run_refine_loop_with(&sampler, &mut seg, &inst.gt, &inst.pose, inst.bbox)
                        .map(|o| (inst.image_id, o))
                        .map_err(CliError::from)
                })
                .collect::<Result<_, _>>()?
        }
        None => instances
            .par_iter()
            .map(|inst| {
                let mut seg = OracleSegmenter {
                    cfg: oracle.clone(),
                    gt: inst.gt.clone(),
                };
                run_refine_loop_with(&sampler, &mut seg, &inst.gt, &inst.pose, inst.bbox)
                    .map(|o| (inst.image_id, o))
                    .map_err(CliError::from)
            })
            .collect::<Result<_, _>>()?,
    };

    let traces: Vec<_> = outcomes.iter().map(|(_, o)| o.trace.clone()).collect();
    std::fs::write(dir.join("traces.csv"), traces_to_csv(&traces))?;
    let dets: Vec<DetInstance> = outcomes
        .iter()
        .map(|(image_id, o)| DetInstance {
            image_id: *image_id,
            mask: o.final_mask.clone(),
            score: o.final_confidence.clamp(0.0, 1.0),
        })
        .collect();
    write_results(&dets, &dir.join("results.json"))?;
    println!("simulated {} instances -> {}", traces.len(), dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(args: EvaluateArgs, cfg: FileConfig) -> Result<(), CliError> {
    let gt_path = require_path(args.gt, cfg.gt, "gt")?;
    let dets_path = require_path(args.dets, cfg.dets, "dets")?;
    let exclude_small = args.exclude_small || cfg.exclude_small.unwrap_or(false);
    let dir = out_dir(args.out, cfg.out)?;

    let gt: GtDataset = load_gt(&gt_path)?;
    let dets = load_dets(&dets_path)?;
    if dets.is_empty() {
        eprintln!("warning: no detections loaded; AP will be 0");
    }
    let params = EvalParams {
        exclude_small,
        ..EvalParams::default()
    };
    let result = evaluate(&gt, &dets, &params)?;

    write_snapshot(
        &dir,
        &serde_json::json!({
            "command": "evaluate",
            "gt": gt_path,
            "dets": dets_path,
            "params": params,
        }),
    )?;
    let text = serde_json::to_string_pretty(&result).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(dir.join("report.json"), text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// inflate-bbox / crop
// ---------------------------------------------------------------------------

fn cmd_inflate(args: InflateArgs) -> Result<(), CliError> {
    let [x, y, w, h]: [f64; 4] = args
        .bbox
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Config("--bbox needs exactly x,y,w,h".to_string()))?;
    let b = BBox::new(x, y, w, h).map_err(|e| CliError::Config(e.to_string()))?;
    if args.inflate_factor < 0.0 {
        return Err(CliError::Config("--inflate-factor must be >= 0".to_string()));
    }
    let dims = MaskDims::new(args.height, args.width)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let inflated = inflate_bbox(&b, args.inflate_factor, dims)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "{}",
        serde_json::json!({
            "x": inflated.x, "y": inflated.y, "w": inflated.w, "h": inflated.h,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct CropOut {
    image_id: u64,
    instance_id: u64,
    size: [u32; 2],
    counts: String,
}

fn cmd_crop(args: CropArgs, cfg: FileConfig) -> Result<(), CliError> {
    let gt_path = require_path(args.gt, cfg.gt, "gt")?;
    let factor = args.crop_factor.or(cfg.crop_factor).unwrap_or(1.5);
    if factor < 1.0 {
        return Err(CliError::Config("--crop-factor must be >= 1".to_string()));
    }
    let dir = out_dir(args.out, cfg.out)?;
    let dataset = load_gt(&gt_path)?;
    write_snapshot(
        &dir,
        &serde_json::json!({
            "command": "crop",
            "gt": gt_path,
            "crop_factor": factor,
        }),
    )?;

    let crops: Vec<CropOut> = dataset
        .instances
        .iter()
        .map(|inst| {
            let dims = dataset.images[&inst.image_id];
            let mask = inst.segmentation.mask(dims).map_err(|e| {
                CliError::Data(format!("annotation {}: {e}", inst.instance_id))
            })?;
            let window = inflate_bbox(&inst.bbox, (factor - 1.0) / 2.0, dims)
                .map_err(|e| CliError::Data(format!("annotation {}: {e}", inst.instance_id)))?;
            let cropped = crop_to_bbox(&mask, &window)
                .map_err(|e| CliError::Data(format!("annotation {}: {e}", inst.instance_id)))?;
            let rle = rle_encode(&cropped);
            Ok(CropOut {
                image_id: inst.image_id,
                instance_id: inst.instance_id,
                size: [cropped.dims().height, cropped.dims().width],
                counts: rle_compress(&rle),
            })
        })
        .collect::<Result<_, CliError>>()?;
    let text = serde_json::to_string_pretty(&crops).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(dir.join("crops.json"), text + "\n")?;
    println!("cropped {} instances -> {}", crops.len(), dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::Select(args) => cmd_select(args, cfg),
        Cmd::Simulate(args) => cmd_simulate(args, cfg),
        Cmd::Evaluate(args) => cmd_evaluate(args, cfg),
        Cmd::InflateBbox(args) => cmd_inflate(args),
        Cmd::Crop(args) => cmd_crop(args, cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
