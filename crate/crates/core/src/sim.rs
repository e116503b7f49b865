//! Pluggable segmenter interface, a ground-truth-backed oracle segmenter, and
//! the iterative refinement loop driver used to study correction-point
//! sampling without a real model.
//!
//! The oracle corrupts the GT mask morphologically on the first call and then
//! click-repairs it: every repair moves pixels toward their GT values, so the
//! per-step IoU trace is non-decreasing by construction.

use rayon::prelude::*;
use thiserror::Error;

use crate::mask::{
    bbox_of_mask, inflate_bbox, iou, rle_decode, rle_encode, BBox, BinaryMask,
    MaskDims, MaskError, Rle,
};
use crate::pose::{Keypoint, Pose};
use crate::prompt::{PromptError, PromptLabel, PromptSet};
use crate::refine::{first_point, next_point, RefineState, SampleError, SamplerConfig};
use crate::rng::{hash_bytes, SplitMix64};
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("ground-truth mask is empty")]
    EmptyGtMask,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// One request to a segmenter: prompts plus the previous prediction, which
/// stands in for the previous logits of a real model.
#[derive(Debug, Clone)]
pub struct SegmenterRequest {
    pub image_id: String,
    pub dims: MaskDims,
    pub prompts: PromptSet,
    pub prior: Option<Rle>,
}

#[derive(Debug, Clone)]
pub struct SegmenterResponse {
    pub mask: Rle,
    pub confidence: f64,
}

/// Anything that can answer segmentation requests: the in-process oracle or a
/// wire-connected external process.
pub trait Segmenter {
    fn segment(&mut self, req: &SegmenterRequest) -> Result<SegmenterResponse, SimError>;
}

/// How the oracle corrupts the GT mask on the first call and how far a click
/// repairs. Radii in pixels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OracleConfig {
    pub corruption_erode: u32,
    pub corruption_dilate: u32,
    pub drop_component_prob: f64,
    pub repair_radius: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        // Tuned so baseline traces start well below 1.0 yet converge within
        // eight points. Config values, not contract.
        Self {
            corruption_erode: 2,
            corruption_dilate: 0,
            drop_component_prob: 0.3,
            repair_radius: 12.0,
            seed: 0,
        }
    }
}

fn morph(mask: &BinaryMask, radius: u32, erode: bool) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let dims = mask.dims();
    let r = radius as i64;
    BinaryMask::from_fn(dims, |row, col| {
        let mut acc = erode;
        'outer: for dr in -r..=r {
            for dc in -r..=r {
                let nr = row as i64 + dr;
                let nc = col as i64 + dc;
                let v = if nr < 0 || nc < 0 || nr >= dims.height as i64 || nc >= dims.width as i64 {
                    false
                } else {
                    mask.get(nr as u32, nc as u32)
                };
                if erode && !v {
                    acc = false;
                    break 'outer;
                }
                if !erode && v {
                    acc = true;
                    break 'outer;
                }
            }
        }
        acc
    })
}

/// 4-connected components in scan order.
fn connected_components(mask: &BinaryMask) -> Vec<Vec<(u32, u32)>> {
    let dims = mask.dims();
    let mut seen = vec![false; dims.pixel_count()];
    let idx = |r: u32, c: u32| r as usize * dims.width as usize + c as usize;
    let mut components = Vec::new();
    for r in 0..dims.height {
        for c in 0..dims.width {
            if !mask.get(r, c) || seen[idx(r, c)] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            seen[idx(r, c)] = true;
            while let Some((cr, cc)) = stack.pop() {
                comp.push((cr, cc));
                let neighbors = [
                    (cr.wrapping_sub(1), cc),
                    (cr + 1, cc),
                    (cr, cc.wrapping_sub(1)),
                    (cr, cc + 1),
                ];
                for (nr, nc) in neighbors {
                    if nr < dims.height && nc < dims.width && mask.get(nr, nc) && !seen[idx(nr, nc)]
                    {
                        seen[idx(nr, nc)] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            components.push(comp);
        }
    }
    components
}

/// Answer one request against a known GT mask.
///
/// Without a prior the response is a corrupted copy of the GT (seeded erode /
/// dilate / component dropping). With a prior, each prompt point flips the
/// pixels within `repair_radius` toward their GT values: positive points only
/// set pixels that GT sets, negative points only clear pixels that GT clears.
/// Confidence is the IoU of the response against GT.
pub fn oracle_segment(
    cfg: &OracleConfig,
    gt: &BinaryMask,
    req: &SegmenterRequest,
) -> Result<SegmenterResponse, SimError> {
    if gt.is_empty() {
        return Err(SimError::EmptyGtMask);
    }
    let result = match &req.prior {
        None => {
            let mut m = morph(gt, cfg.corruption_erode, true);
            m = morph(&m, cfg.corruption_dilate, false);
            let mut rng = SplitMix64::from_keys(cfg.seed, &[hash_bytes(req.image_id.as_bytes())]);
            for comp in connected_components(&m) {
                if rng.next_f64() < cfg.drop_component_prob {
                    for (r, c) in comp {
                        m.set(r, c, false);
                    }
                }
            }
            m
        }
        Some(prior) => {
            let mut m = rle_decode(prior)?;
            let dims = m.dims();
            let r2 = cfg.repair_radius * cfg.repair_radius;
            for p in &req.prompts.points {
                let r_lo = ((p.y - cfg.repair_radius).floor().max(0.0)) as u32;
                let r_hi = ((p.y + cfg.repair_radius).ceil().min(dims.height as f64 - 1.0)) as u32;
                let c_lo = ((p.x - cfg.repair_radius).floor().max(0.0)) as u32;
                let c_hi = ((p.x + cfg.repair_radius).ceil().min(dims.width as f64 - 1.0)) as u32;
                for row in r_lo..=r_hi {
                    for col in c_lo..=c_hi {
                        let d2 = (row as f64 - p.y).powi(2) + (col as f64 - p.x).powi(2);
                        if d2 > r2 {
                            continue;
                        }
                        let gt_v = gt.get(row, col);
                        match p.label {
                            PromptLabel::Positive if gt_v => m.set(row, col, true),
                            PromptLabel::Negative if !gt_v => m.set(row, col, false),
                            _ => {}
                        }
                    }
                }
            }
            m
        }
    };
    let confidence = iou(&result, gt)?;
    Ok(SegmenterResponse {
        mask: rle_encode(&result),
        confidence,
    })
}

/// In-process oracle bound to one instance's GT mask.
pub struct OracleSegmenter {
    pub cfg: OracleConfig,
    pub gt: BinaryMask,
}

impl Segmenter for OracleSegmenter {
    fn segment(&mut self, req: &SegmenterRequest) -> Result<SegmenterResponse, SimError> {
        oracle_segment(&self.cfg, &self.gt, req)
    }
}

/// Per-step IoU record for one instance's refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub instance_id: u64,
    pub ious: Vec<f64>,
}

/// Whether requests carry no box, the tight GT box, or an inflated GT box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BboxMode {
    None,
    GtBox,
    InflatedGtBox(f64),
}

/// Resolve the prompt box for a GT mask under the given mode.
pub fn ablation_box(mode: BboxMode, gt: &BinaryMask) -> Result<Option<BBox>, SimError> {
    match mode {
        BboxMode::None => Ok(None),
        BboxMode::GtBox => Ok(Some(bbox_of_mask(gt)?)),
        BboxMode::InflatedGtBox(factor) => {
            let tight = bbox_of_mask(gt)?;
            Ok(Some(inflate_bbox(&tight, factor, gt.dims())?))
        }
    }
}

/// Emit one request per instance with the box resolved per `mode`.
pub fn run_bbox_ablation(
    mode: BboxMode,
    instances: &[(String, BinaryMask, PromptSet)],
) -> Result<Vec<SegmenterRequest>, SimError> {
    instances
        .iter()
        .map(|(id, gt, prompts)| {
            let mut prompts = prompts.clone();
            prompts.bbox = ablation_box(mode, gt)?;
            Ok(SegmenterRequest {
                image_id: id.clone(),
                dims: gt.dims(),
                prompts,
                prior: None,
            })
        })
        .collect()
}

/// Result of one instance's refinement run: the IoU trace plus the last
/// prediction and its reported confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub trace: IterationTrace,
    pub final_mask: Rle,
    pub final_confidence: f64,
}

/// Alternate sampler and segmenter for one instance: point 1 -> mask 1 ->
/// point 2 (against mask 1's error region) -> mask 2 -> ... recording
/// `iou(mask_k, gt)` per step. When the error region empties and the GT
/// branch is not taken, no further point is added but the segmenter keeps
/// being called so the trace always has `total_points` entries.
pub fn run_refine_loop_with(
    sampler_cfg: &SamplerConfig,
    segmenter: &mut dyn Segmenter,
    gt: &BinaryMask,
    pose: &Pose,
    bbox: Option<BBox>,
) -> Result<RefineOutcome, SimError> {
    if gt.is_empty() {
        return Err(SimError::EmptyGtMask);
    }
    let first = first_point(sampler_cfg, gt, pose)?;
    let mut state = RefineState::new(gt.clone(), pose.clone(), first);
    let image_id = format!("{}_{}", pose.image_id, pose.instance_id);
    let mut prior: Option<Rle> = None;
    let mut confidence = 0.0;
    let mut ious = Vec::with_capacity(sampler_cfg.total_points);

    for step in 0..sampler_cfg.total_points {
        let req = SegmenterRequest {
            image_id: image_id.clone(),
            dims: gt.dims(),
            prompts: PromptSet::new(state.sampled().to_vec(), bbox)?,
            prior: prior.clone(),
        };
        let resp = segmenter.segment(&req)?;
        let pred = rle_decode(&resp.mask)?;
        ious.push(iou(&pred, gt)?);
        confidence = resp.confidence;
        prior = Some(resp.mask);
        state.set_prediction(pred);
        if step + 1 < sampler_cfg.total_points {
            match next_point(sampler_cfg, &mut state) {
                Ok(_) => {}
                Err(SampleError::NothingToSample) => {} // converged; keep tracing
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(RefineOutcome {
        trace: IterationTrace {
            instance_id: pose.instance_id,
            ious,
        },
        final_mask: prior.expect("total_points >= 1"),
        final_confidence: confidence,
    })
}

/// Oracle-backed refinement run for one instance.
pub fn run_refine_loop(
    sampler_cfg: &SamplerConfig,
    oracle_cfg: &OracleConfig,
    gt: &BinaryMask,
    pose: &Pose,
) -> Result<IterationTrace, SimError> {
    let mut oracle = OracleSegmenter {
        cfg: oracle_cfg.clone(),
        gt: gt.clone(),
    };
    Ok(run_refine_loop_with(sampler_cfg, &mut oracle, gt, pose, None)?.trace)
}

/// Run the refinement loop over many instances in parallel. Determinism comes
/// from per-instance seeding, not ordering; results keep input order.
pub fn run_suite(
    sampler_cfg: &SamplerConfig,
    oracle_cfg: &OracleConfig,
    instances: &[(BinaryMask, Pose)],
) -> Result<Vec<IterationTrace>, SimError> {
    instances
        .par_iter()
        .map(|(gt, pose)| run_refine_loop(sampler_cfg, oracle_cfg, gt, pose))
        .collect()
}

/// CSV trace report with columns `instance_id,step,iou`. Steps are 1-based
/// model calls.
pub fn traces_to_csv(traces: &[IterationTrace]) -> String {
    let mut out = String::from("instance_id,step,iou\n");
    for t in traces {
        for (i, v) in t.ious.iter().enumerate() {
            out.push_str(&format!("{},{},{:.6}\n", t.instance_id, i + 1, v));
        }
    }
    out
}

/// Deterministic synthetic instance suite: elliptical blobs with partially
/// overlapping distractor lobes, plus poses whose keypoints sit inside the
/// blob with varied visibility.
pub fn synthetic_suite(count: usize, seed: u64) -> Vec<(BinaryMask, Pose)> {
    let dims = MaskDims::new(64, 64).unwrap();
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::from_keys(seed, &[0xb10b, i as u64]);
            let cx = 16.0 + rng.next_f64() * 32.0;
            let cy = 16.0 + rng.next_f64() * 32.0;
            let rx = 8.0 + rng.next_f64() * 10.0;
            let ry = 8.0 + rng.next_f64() * 10.0;
            // Secondary lobe keeps the shape non-convex so erosion can split it.
            let lx = cx + (rng.next_f64() - 0.5) * 2.0 * rx;
            let ly = cy + (rng.next_f64() - 0.5) * 2.0 * ry;
            let lr = 4.0 + rng.next_f64() * 5.0;
            let gt = BinaryMask::from_fn(dims, |r, c| {
                let x = c as f64;
                let y = r as f64;
                let in_main = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0;
                let in_lobe = (x - lx).powi(2) + (y - ly).powi(2) <= lr * lr;
                in_main || in_lobe
            });

            let mut pose = Pose::empty(1000 + i as u64, i as u64);
            let inside = gt.set_pixels_column_major();
            for slot in [0usize, 5, 6, 11, 12, 15] {
                if inside.is_empty() {
                    break;
                }
                let (r, c) = inside[rng.next_index(inside.len())];
                pose.keypoints[slot] = Some(Keypoint {
                    x: c as f64,
                    y: r as f64,
                    visibility: Some(0.3 + rng.next_f64() * 0.7),
                    presence_prob: None,
                    expected_oks: None,
                    gt_flag: None,
                });
            }
            (gt, pose)
        })
        .collect()
}

/// Mean IoU per step across traces.
pub fn mean_trace(traces: &[IterationTrace]) -> Vec<f64> {
    if traces.is_empty() {
        return Vec::new();
    }
    let steps = traces.iter().map(|t| t.ious.len()).max().unwrap_or(0);
    (0..steps)
        .map(|s| {
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.ious.get(s).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::SamplerKind;

    fn dims(h: u32, w: u32) -> MaskDims {
        MaskDims::new(h, w).unwrap()
    }

    fn blob(d: MaskDims) -> BinaryMask {
        BinaryMask::from_fn(d, |r, c| {
            let x = c as f64 - 16.0;
            let y = r as f64 - 16.0;
            x * x + y * y <= 100.0
        })
    }

    fn req(dims: MaskDims, prompts: PromptSet, prior: Option<Rle>) -> SegmenterRequest {
        SegmenterRequest {
            image_id: "t".to_string(),
            dims,
            prompts,
            prior,
        }
    }

    fn positive_at(x: f64, y: f64) -> PromptSet {
        PromptSet::new(
            vec![crate::prompt::PromptPoint {
                x,
                y,
                label: PromptLabel::Positive,
                source: crate::prompt::PointSource::MaskSample,
            }],
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_corruption_returns_gt() {
        let d = dims(32, 32);
        let gt = blob(d);
        let cfg = OracleConfig {
            corruption_erode: 0,
            corruption_dilate: 0,
            drop_component_prob: 0.0,
            repair_radius: 5.0,
            seed: 1,
        };
        let resp = oracle_segment(&cfg, &gt, &req(d, positive_at(16.0, 16.0), None)).unwrap();
        assert_eq!(rle_decode(&resp.mask).unwrap(), gt);
        assert_eq!(resp.confidence, 1.0);
    }

    #[test]
    fn negative_click_removes_extra_pixel() {
        let d = dims(32, 32);
        let gt = blob(d);
        let mut prior = gt.clone();
        prior.set(0, 0, true); // stray false positive
        let cfg = OracleConfig {
            corruption_erode: 0,
            corruption_dilate: 0,
            drop_component_prob: 0.0,
            repair_radius: 1.0,
            seed: 1,
        };
        let mut prompts = positive_at(16.0, 16.0);
        prompts.points.push(crate::prompt::PromptPoint {
            x: 0.0,
            y: 0.0,
            label: PromptLabel::Negative,
            source: crate::prompt::PointSource::ErrorSample,
        });
        let resp =
            oracle_segment(&cfg, &gt, &req(d, prompts, Some(rle_encode(&prior)))).unwrap();
        assert_eq!(rle_decode(&resp.mask).unwrap(), gt);
    }

    #[test]
    fn repair_never_moves_away_from_gt() {
        let d = dims(48, 48);
        let gt = blob(d);
        let cfg = OracleConfig::default();
        let sampler = SamplerConfig::new(SamplerKind::MaskRefine, 7);
        let trace = run_refine_loop(&sampler, &cfg, &gt, &Pose::empty(9, 9)).unwrap();
        assert_eq!(trace.ious.len(), 8);
        for w in trace.ious.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "trace not monotone: {:?}", trace.ious);
        }
    }

    #[test]
    fn full_repair_radius_reaches_one_by_step_two() {
        let d = dims(32, 32);
        let gt = blob(d);
        let cfg = OracleConfig {
            repair_radius: 100.0,
            ..OracleConfig::default()
        };
        let sampler = SamplerConfig::new(SamplerKind::MaskRefine, 3);
        let trace = run_refine_loop(&sampler, &cfg, &gt, &Pose::empty(2, 2)).unwrap();
        assert!(trace.ious[1] >= 1.0 - 1e-12, "{:?}", trace.ious);
        assert!(trace.ious.iter().skip(1).all(|&v| v >= 1.0 - 1e-12));
    }

    #[test]
    fn zero_corruption_trace_all_ones() {
        let d = dims(32, 32);
        let gt = blob(d);
        let cfg = OracleConfig {
            corruption_erode: 0,
            corruption_dilate: 0,
            drop_component_prob: 0.0,
            repair_radius: 5.0,
            seed: 3,
        };
        let sampler = SamplerConfig::new(SamplerKind::PoseMaskRefine, 11);
        let trace = run_refine_loop(&sampler, &cfg, &gt, &Pose::empty(4, 4)).unwrap();
        assert!(trace.ious.iter().all(|&v| v == 1.0), "{:?}", trace.ious);
    }

    #[test]
    fn traces_are_replayable() {
        let instances = synthetic_suite(5, 99);
        let sampler = SamplerConfig::new(SamplerKind::PoseMaskRefine, 42);
        let oracle = OracleConfig::default();
        let a = run_suite(&sampler, &oracle, &instances).unwrap();
        let b = run_suite(&sampler, &oracle, &instances).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bbox_ablation_modes() {
        let d = dims(16, 16);
        let mut gt = BinaryMask::zeros(d);
        gt.set(2, 3, true);
        let items = vec![("a".to_string(), gt, positive_at(3.0, 2.0))];

        let none = run_bbox_ablation(BboxMode::None, &items).unwrap();
        assert!(none[0].prompts.bbox.is_none());

        let tight = run_bbox_ablation(BboxMode::GtBox, &items).unwrap();
        let b = tight[0].prompts.bbox.unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (3.0, 2.0, 1.0, 1.0));

        let inflated = run_bbox_ablation(BboxMode::InflatedGtBox(0.5), &items).unwrap();
        let b = inflated[0].prompts.bbox.unwrap();
        assert_eq!((b.w, b.h), (2.0, 2.0));
    }

    #[test]
    fn csv_shape() {
        let traces = vec![IterationTrace {
            instance_id: 7,
            ious: vec![0.5, 1.0],
        }];
        let csv = traces_to_csv(&traces);
        assert_eq!(csv, "instance_id,step,iou\n7,1,0.500000\n7,2,1.000000\n");
    }
}
