//! COCO-format dataset ingestion, results serialization and the
//! COCO-protocol mask-AP evaluator (greedy IoU matching, crowd handling,
//! area-range slices, 101-point interpolated precision).

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{
    rasterize, rle_decode, rle_decompress, BBox, BinaryMask, MaskDims, MaskError, Polygon, Rle,
};
use crate::pose::{Keypoint, Pose, KEYPOINT_COUNT};
use crate::sim::{traces_to_csv, IterationTrace};

pub const AREA_SMALL_MAX: f64 = 32.0 * 32.0;
pub const AREA_MEDIUM_MAX: f64 = 96.0 * 96.0;
const AREA_MAX: f64 = 1e10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("image {0} not present in the dataset")]
    UnknownImage(u64),
    #[error("mask dims mismatch on image {0}")]
    DimsMismatch(u64),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn classify_json_error(e: serde_json::Error) -> EvalError {
    if e.is_data() {
        EvalError::Schema(e.to_string())
    } else {
        EvalError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Ground-truth segmentation in either COCO storage form.
#[derive(Debug, Clone)]
pub enum Segmentation {
    Polygons(Vec<Polygon>),
    Rle(Rle),
}

impl Segmentation {
    /// Decode / rasterize into a dense mask of the image dims.
    pub fn mask(&self, dims: MaskDims) -> Result<BinaryMask, MaskError> {
        match self {
            Segmentation::Polygons(polys) => rasterize(polys, dims),
            Segmentation::Rle(rle) => rle_decode(rle),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub image_id: u64,
    pub instance_id: u64,
    pub segmentation: Segmentation,
    pub bbox: BBox,
    pub pose: Option<Pose>,
    pub iscrowd: bool,
    pub area: f64,
}

#[derive(Debug, Clone)]
pub struct GtDataset {
    /// Image id -> dims, ordered by id.
    pub images: BTreeMap<u64, MaskDims>,
    pub instances: Vec<GtInstance>,
}

#[derive(Debug, Clone)]
pub struct DetInstance {
    pub image_id: u64,
    pub mask: Rle,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalParams {
    /// Mask-IoU matching thresholds, strictly increasing in (0, 1].
    pub iou_thresholds: Vec<f64>,
    /// Number of uniform recall points for precision interpolation.
    pub recall_points: usize,
    pub max_dets: usize,
    /// Ignore ground truth (and detections matched only to it) in the small
    /// area range; used for person sets without poses on small instances.
    pub exclude_small: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            max_dets: 100,
            exclude_small: false,
        }
    }
}

/// Matched / unmatched tallies at IoU 0.5 over the unrestricted area range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub gt_total: usize,
    pub det_total: usize,
    pub matched: usize,
    pub unmatched_dets: usize,
}

/// AP is −1 when a slice contains no ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap_per_threshold: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_small: Option<f64>,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar: f64,
    pub counts: MatchCounts,
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CocoJson {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnn>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    height: u32,
    width: u32,
}

#[derive(Deserialize)]
struct CocoAnn {
    id: u64,
    image_id: u64,
    segmentation: CocoSeg,
    bbox: [f64; 4],
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default)]
    keypoints: Option<Vec<f64>>,
    #[serde(default)]
    keypoint_visibilities: Option<Vec<f64>>,
    #[serde(default)]
    keypoint_presence_probs: Option<Vec<f64>>,
    #[serde(default)]
    keypoint_expected_oks: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CocoSeg {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: CocoCounts },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CocoCounts {
    Compressed(String),
    Uncompressed(Vec<u32>),
}

fn pose_from_ann(ann: &CocoAnn) -> Result<Option<Pose>, EvalError> {
    let Some(triplets) = &ann.keypoints else {
        return Ok(None);
    };
    if triplets.len() != 3 * KEYPOINT_COUNT {
        return Err(EvalError::Schema(format!(
            "annotation {}: keypoints has {} values, expected {}",
            ann.id,
            triplets.len(),
            3 * KEYPOINT_COUNT
        )));
    }
    let check17 = |name: &str, arr: &Option<Vec<f64>>| -> Result<(), EvalError> {
        if let Some(a) = arr {
            if a.len() != KEYPOINT_COUNT {
                return Err(EvalError::Schema(format!(
                    "annotation {}: {name} has {} values, expected {KEYPOINT_COUNT}",
                    ann.id,
                    a.len()
                )));
            }
        }
        Ok(())
    };
    check17("keypoint_visibilities", &ann.keypoint_visibilities)?;
    check17("keypoint_presence_probs", &ann.keypoint_presence_probs)?;
    check17("keypoint_expected_oks", &ann.keypoint_expected_oks)?;

    let has_scores = ann.keypoint_visibilities.is_some()
        || ann.keypoint_presence_probs.is_some()
        || ann.keypoint_expected_oks.is_some();

    let mut pose = Pose::empty(ann.image_id, ann.id);
    for i in 0..KEYPOINT_COUNT {
        let (x, y, code) = (triplets[3 * i], triplets[3 * i + 1], triplets[3 * i + 2]);
        // GT-only poses mark unlabeled keypoints with code 0; detected-pose
        // files carry score arrays and emit all 17 slots.
        if code == 0.0 && !has_scores {
            continue;
        }
        pose.keypoints[i] = Some(Keypoint {
            x,
            y,
            visibility: ann.keypoint_visibilities.as_ref().map(|a| a[i]),
            presence_prob: ann.keypoint_presence_probs.as_ref().map(|a| a[i]),
            expected_oks: ann.keypoint_expected_oks.as_ref().map(|a| a[i]),
            gt_flag: Some(code as u8),
        });
    }
    Ok(Some(pose))
}

fn segmentation_from(seg: CocoSeg, ann_id: u64) -> Result<Segmentation, EvalError> {
    match seg {
        CocoSeg::Polygons(polys) => {
            let polys = polys
                .iter()
                .map(|p| Polygon::from_flat(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EvalError::Schema(format!("annotation {ann_id}: {e}")))?;
            Ok(Segmentation::Polygons(polys))
        }
        CocoSeg::Rle { size, counts } => {
            let dims = MaskDims::new(size[0], size[1])
                .map_err(|e| EvalError::Schema(format!("annotation {ann_id}: {e}")))?;
            let rle = match counts {
                CocoCounts::Compressed(s) => rle_decompress(&s, dims)
                    .map_err(|e| EvalError::Schema(format!("annotation {ann_id}: {e}")))?,
                CocoCounts::Uncompressed(counts) => Rle { dims, counts },
            };
            Ok(Segmentation::Rle(rle))
        }
    }
}

/// Load a COCO annotation file into ground-truth instances. Polygons stay in
/// polygon form (rasterized on demand); keypoint triplets become poses with
/// GT flags, and extended per-keypoint score arrays, when present, populate
/// the visibility / presence / expected-OKS fields.
pub fn load_gt(path: &Path) -> Result<GtDataset, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let raw: CocoJson = serde_json::from_str(&text).map_err(classify_json_error)?;
    let images: BTreeMap<u64, MaskDims> = raw
        .images
        .iter()
        .map(|im| {
            MaskDims::new(im.height, im.width)
                .map(|d| (im.id, d))
                .map_err(|e| EvalError::Schema(format!("image {}: {e}", im.id)))
        })
        .collect::<Result<_, _>>()?;
    let mut instances = Vec::with_capacity(raw.annotations.len());
    for ann in raw.annotations {
        if !images.contains_key(&ann.image_id) {
            return Err(EvalError::UnknownImage(ann.image_id));
        }
        if ann.area <= 0.0 {
            return Err(EvalError::Schema(format!(
                "annotation {}: area must be positive",
                ann.id
            )));
        }
        let pose = pose_from_ann(&ann)?;
        let [bx, by, bw, bh] = ann.bbox;
        let bbox = BBox::new(bx, by, bw, bh)
            .map_err(|e| EvalError::Schema(format!("annotation {}: {e}", ann.id)))?;
        let segmentation = segmentation_from(ann.segmentation, ann.id)?;
        instances.push(GtInstance {
            image_id: ann.image_id,
            instance_id: ann.id,
            segmentation,
            bbox,
            pose,
            iscrowd: ann.iscrowd != 0,
            area: ann.area,
        });
    }
    Ok(GtDataset { images, instances })
}

#[derive(Deserialize)]
struct CocoDetJson {
    image_id: u64,
    segmentation: CocoDetSeg,
    score: f64,
}

#[derive(Deserialize)]
struct CocoDetSeg {
    size: [u32; 2],
    counts: String,
}

/// Load a COCO results file (compressed-RLE segmentations).
pub fn load_dets(path: &Path) -> Result<Vec<DetInstance>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let raw: Vec<CocoDetJson> = serde_json::from_str(&text).map_err(classify_json_error)?;
    raw.into_iter()
        .map(|d| {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(EvalError::Schema(format!(
                    "detection score {} outside [0, 1]",
                    d.score
                )));
            }
            let dims = MaskDims::new(d.segmentation.size[0], d.segmentation.size[1])
                .map_err(|e| EvalError::Schema(e.to_string()))?;
            let mask = rle_decompress(&d.segmentation.counts, dims)
                .map_err(|e| EvalError::Schema(e.to_string()))?;
            Ok(DetInstance {
                image_id: d.image_id,
                mask,
                score: d.score,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-(image, area-range) match state in sorted detection order.
struct ImgEval {
    dt_scores: Vec<f64>,
    /// [threshold][det] — detection matched some GT.
    dt_matched: Vec<Vec<bool>>,
    /// [threshold][det] — detection ignored (matched an ignored GT, or
    /// unmatched with area outside the range).
    dt_ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

struct ImageData {
    gt_indices: Vec<usize>,
    gt_areas: Vec<f64>,
    gt_crowd: Vec<bool>,
    det_scores: Vec<f64>,
    det_areas: Vec<f64>,
    /// IoU matrix [det][gt] with crowd semantics, detections already in
    /// descending-score order truncated to `max_dets`.
    ious: Vec<Vec<f64>>,
}

fn mask_pixels(m: &BinaryMask) -> Vec<bool> {
    let dims = m.dims();
    let mut v = Vec::with_capacity(dims.pixel_count());
    for r in 0..dims.height {
        for c in 0..dims.width {
            v.push(m.get(r, c));
        }
    }
    v
}

fn crowd_aware_iou(det: &[bool], gt: &[bool], gt_is_crowd: bool) -> f64 {
    let mut inter = 0u64;
    let mut det_area = 0u64;
    let mut gt_area = 0u64;
    for (&d, &g) in det.iter().zip(gt) {
        if d {
            det_area += 1;
        }
        if g {
            gt_area += 1;
        }
        if d && g {
            inter += 1;
        }
    }
    // Crowd GT may cover many detections: the denominator is the detection
    // area instead of the union.
    let denom = if gt_is_crowd {
        det_area as f64
    } else {
        (det_area + gt_area - inter) as f64
    };
    if denom == 0.0 {
        0.0
    } else {
        inter as f64 / denom
    }
}

fn evaluate_img(
    data: &ImageData,
    range: (f64, f64),
    thresholds: &[f64],
) -> ImgEval {
    let num_gt = data.gt_indices.len();
    let num_dt = data.det_scores.len();
    let gt_ignore: Vec<bool> = (0..num_gt)
        .map(|g| data.gt_crowd[g] || data.gt_areas[g] < range.0 || data.gt_areas[g] > range.1)
        .collect();
    // Non-ignored GT first, stable.
    let mut gt_order: Vec<usize> = (0..num_gt).collect();
    gt_order.sort_by_key(|&g| gt_ignore[g]);

    let t_count = thresholds.len();
    let mut dt_matched = vec![vec![false; num_dt]; t_count];
    let mut dt_ignored = vec![vec![false; num_dt]; t_count];

    for (ti, &t) in thresholds.iter().enumerate() {
        let mut gt_matched = vec![false; num_gt];
        for d in 0..num_dt {
            let mut best_iou = t.min(1.0 - 1e-10);
            let mut best_g: Option<usize> = None;
            for &g in &gt_order {
                // Each non-crowd GT matches at most one detection.
                if gt_matched[g] && !data.gt_crowd[g] {
                    continue;
                }
                // Once a non-ignored match exists, stop at the ignored tail.
                if let Some(bg) = best_g {
                    if !gt_ignore[bg] && gt_ignore[g] {
                        break;
                    }
                }
                if data.ious[d][g] < best_iou {
                    continue;
                }
                best_iou = data.ious[d][g];
                best_g = Some(g);
            }
            if let Some(g) = best_g {
                dt_ignored[ti][d] = gt_ignore[g];
                dt_matched[ti][d] = true;
                gt_matched[g] = true;
            }
        }
        for d in 0..num_dt {
            let outside = data.det_areas[d] < range.0 || data.det_areas[d] > range.1;
            if !dt_matched[ti][d] && outside {
                dt_ignored[ti][d] = true;
            }
        }
    }

    ImgEval {
        dt_scores: data.det_scores.clone(),
        dt_matched,
        dt_ignored,
        num_gt: gt_ignore.iter().filter(|&&ig| !ig).count(),
    }
}

struct SliceResult {
    ap_per_threshold: Vec<f64>,
    ap: f64,
    recall_per_threshold: Vec<f64>,
}

fn accumulate(evals: &[ImgEval], thresholds: &[f64], recall_points: usize) -> SliceResult {
    let t_count = thresholds.len();
    let npig: usize = evals.iter().map(|e| e.num_gt).sum();
    if npig == 0 {
        return SliceResult {
            ap_per_threshold: vec![-1.0; t_count],
            ap: -1.0,
            recall_per_threshold: vec![-1.0; t_count],
        };
    }
    let mut order: Vec<(usize, usize)> = Vec::new(); // (eval idx, det idx)
    for (ei, e) in evals.iter().enumerate() {
        for di in 0..e.dt_scores.len() {
            order.push((ei, di));
        }
    }
    order.sort_by(|a, b| {
        let sa = evals[a.0].dt_scores[a.1];
        let sb = evals[b.0].dt_scores[b.1];
        sb.partial_cmp(&sa).unwrap()
    });

    let eps = f64::EPSILON; // np.spacing(1)
    let rec_thrs: Vec<f64> = (0..recall_points)
        .map(|i| i as f64 / (recall_points - 1) as f64)
        .collect();

    let mut ap_per_threshold = Vec::with_capacity(t_count);
    let mut recall_per_threshold = Vec::with_capacity(t_count);
    for ti in 0..t_count {
        let mut tp_cum: Vec<f64> = Vec::new();
        let mut fp_cum: Vec<f64> = Vec::new();
        let mut tp = 0.0;
        let mut fp = 0.0;
        for &(ei, di) in &order {
            let e = &evals[ei];
            if e.dt_ignored[ti][di] {
                continue;
            }
            if e.dt_matched[ti][di] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            tp_cum.push(tp);
            fp_cum.push(fp);
        }
        let n = tp_cum.len();
        let rc: Vec<f64> = tp_cum.iter().map(|&t| t / npig as f64).collect();
        let mut pr: Vec<f64> = tp_cum
            .iter()
            .zip(&fp_cum)
            .map(|(&t, &f)| t / (t + f + eps))
            .collect();
        // Precision envelope: non-increasing from the right.
        for i in (1..n).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let mut q = vec![0.0; recall_points];
        for (ri, &thr) in rec_thrs.iter().enumerate() {
            // searchsorted left
            let pi = rc.partition_point(|&v| v < thr);
            if pi < n {
                q[ri] = pr[pi];
            }
        }
        ap_per_threshold.push(q.iter().sum::<f64>() / recall_points as f64);
        recall_per_threshold.push(if n > 0 { rc[n - 1] } else { 0.0 });
    }
    let ap = ap_per_threshold.iter().sum::<f64>() / t_count as f64;
    SliceResult {
        ap_per_threshold,
        ap,
        recall_per_threshold,
    }
}

/// COCO-protocol mask evaluation: per image and threshold, detections in
/// descending-score order greedily claim the unmatched GT with the highest
/// IoU at or above the threshold; crowd GT may absorb many detections and is
/// never a false negative; precision is interpolated at uniform recall
/// points and averaged over thresholds. AP is −1 for slices with no GT.
pub fn evaluate(
    gt: &GtDataset,
    dets: &[DetInstance],
    params: &EvalParams,
) -> Result<EvalResult, EvalError> {
    let mut gt_by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, inst) in gt.instances.iter().enumerate() {
        gt_by_image.entry(inst.image_id).or_default().push(i);
    }
    let mut det_by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if !gt.images.contains_key(&d.image_id) {
            return Err(EvalError::UnknownImage(d.image_id));
        }
        det_by_image.entry(d.image_id).or_default().push(i);
    }

    // Per image: decode masks, sort detections by descending score (stable,
    // so input order breaks ties), truncate, compute the IoU matrix.
    let mut per_image: Vec<ImageData> = Vec::new();
    for (&image_id, &dims) in &gt.images {
        let gt_indices = gt_by_image.get(&image_id).cloned().unwrap_or_default();
        let det_indices = det_by_image.get(&image_id).cloned().unwrap_or_default();
        if gt_indices.is_empty() && det_indices.is_empty() {
            continue;
        }
        let gt_masks: Vec<Vec<bool>> = gt_indices
            .iter()
            .map(|&i| {
                let m = gt.instances[i].segmentation.mask(dims)?;
                Ok(mask_pixels(&m))
            })
            .collect::<Result<_, MaskError>>()?;
        let mut det_order = det_indices.clone();
        det_order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
        det_order.truncate(params.max_dets);
        let det_masks: Vec<Vec<bool>> = det_order
            .iter()
            .map(|&i| {
                if dets[i].mask.dims != dims {
                    return Err(EvalError::DimsMismatch(image_id));
                }
                Ok(mask_pixels(&rle_decode(&dets[i].mask)?))
            })
            .collect::<Result<_, EvalError>>()?;
        let gt_crowd: Vec<bool> = gt_indices.iter().map(|&i| gt.instances[i].iscrowd).collect();
        let ious: Vec<Vec<f64>> = det_masks
            .iter()
            .map(|dm| {
                gt_masks
                    .iter()
                    .zip(&gt_crowd)
                    .map(|(gm, &crowd)| crowd_aware_iou(dm, gm, crowd))
                    .collect()
            })
            .collect();
        per_image.push(ImageData {
            gt_areas: gt_indices.iter().map(|&i| gt.instances[i].area).collect(),
            gt_crowd,
            det_scores: det_order.iter().map(|&i| dets[i].score).collect(),
            det_areas: det_masks
                .iter()
                .map(|m| m.iter().filter(|&&p| p).count() as f64)
                .collect(),
            ious,
            gt_indices,
        });
    }

    let all_lo = if params.exclude_small { AREA_SMALL_MAX } else { 0.0 };
    let range_all = (all_lo, AREA_MAX);
    let range_small = (0.0, AREA_SMALL_MAX);
    let range_medium = (AREA_SMALL_MAX, AREA_MEDIUM_MAX);
    let range_large = (AREA_MEDIUM_MAX, AREA_MAX);

    let run_slice = |range: (f64, f64)| -> SliceResult {
        let evals: Vec<ImgEval> = per_image
            .iter()
            .map(|d| evaluate_img(d, range, &params.iou_thresholds))
            .collect();
        accumulate(&evals, &params.iou_thresholds, params.recall_points)
    };

    let all = run_slice(range_all);
    let small = if params.exclude_small {
        None
    } else {
        Some(run_slice(range_small))
    };
    let medium = run_slice(range_medium);
    let large = run_slice(range_large);

    // Tallies at the first threshold over the unrestricted range.
    let counts = {
        let evals: Vec<ImgEval> = per_image
            .iter()
            .map(|d| evaluate_img(d, range_all, &params.iou_thresholds))
            .collect();
        let matched: usize = evals
            .iter()
            .map(|e| {
                (0..e.dt_scores.len())
                    .filter(|&d| e.dt_matched[0][d] && !e.dt_ignored[0][d])
                    .count()
            })
            .sum();
        let unmatched: usize = evals
            .iter()
            .map(|e| {
                (0..e.dt_scores.len())
                    .filter(|&d| !e.dt_matched[0][d] && !e.dt_ignored[0][d])
                    .count()
            })
            .sum();
        MatchCounts {
            gt_total: gt.instances.len(),
            det_total: dets.len(),
            matched,
            unmatched_dets: unmatched,
        }
    };

    let valid_recalls: Vec<f64> = all
        .recall_per_threshold
        .iter()
        .copied()
        .filter(|&r| r > -1.0)
        .collect();
    let ar = if valid_recalls.is_empty() {
        -1.0
    } else {
        valid_recalls.iter().sum::<f64>() / valid_recalls.len() as f64
    };

    Ok(EvalResult {
        ap: all.ap,
        ap50: all.ap_per_threshold.first().copied().unwrap_or(-1.0),
        ap75: all.ap_per_threshold.get(5).copied().unwrap_or(-1.0),
        ap_per_threshold: all.ap_per_threshold,
        ap_small: small.map(|s| s.ap),
        ap_medium: medium.ap,
        ap_large: large.ap,
        ar,
        counts,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CocoDetOut<'a> {
    image_id: u64,
    category_id: u32,
    segmentation: CocoDetSegOut,
    score: f64,
    #[serde(skip)]
    _marker: std::marker::PhantomData<&'a ()>,
}

#[derive(Serialize)]
struct CocoDetSegOut {
    size: [u32; 2],
    counts: String,
}

/// Write detections as COCO results JSON with compressed-RLE segmentations.
/// Key order is fixed so output is byte-stable.
pub fn write_results(dets: &[DetInstance], path: &Path) -> Result<(), EvalError> {
    let out: Vec<CocoDetOut> = dets
        .iter()
        .map(|d| CocoDetOut {
            image_id: d.image_id,
            category_id: 1,
            segmentation: CocoDetSegOut {
                size: [d.mask.dims.height, d.mask.dims.width],
                counts: crate::mask::rle_compress(&d.mask),
            },
            score: d.score,
            _marker: std::marker::PhantomData,
        })
        .collect();
    let text = serde_json::to_string(&out).map_err(classify_json_error)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Write the per-step IoU traces as `instance_id,step,iou` CSV.
pub fn write_trace_report(traces: &[IterationTrace], path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, traces_to_csv(traces))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::rle_encode;

    fn dims(h: u32, w: u32) -> MaskDims {
        MaskDims::new(h, w).unwrap()
    }

    fn rect_mask(d: MaskDims, r0: u32, c0: u32, r1: u32, c1: u32) -> BinaryMask {
        BinaryMask::from_fn(d, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
    }

    fn gt_dataset(instances: Vec<GtInstance>, images: &[(u64, MaskDims)]) -> GtDataset {
        GtDataset {
            images: images.iter().copied().collect(),
            instances,
        }
    }

    fn gt_from_mask(image_id: u64, instance_id: u64, m: &BinaryMask, iscrowd: bool) -> GtInstance {
        GtInstance {
            image_id,
            instance_id,
            segmentation: Segmentation::Rle(rle_encode(m)),
            bbox: crate::mask::bbox_of_mask(m).unwrap(),
            pose: None,
            iscrowd,
            area: m.area() as f64,
        }
    }

    #[test]
    fn perfect_detection_ap_one() {
        let d = dims(64, 64);
        let m = rect_mask(d, 8, 8, 48, 48); // 1600 px, medium
        let gt = gt_dataset(vec![gt_from_mask(1, 1, &m, false)], &[(1, d)]);
        let dets = vec![DetInstance {
            image_id: 1,
            mask: rle_encode(&m),
            score: 0.9,
        }];
        let res = evaluate(&gt, &dets, &EvalParams::default()).unwrap();
        assert!((res.ap - 1.0).abs() < 1e-12);
        assert!((res.ar - 1.0).abs() < 1e-12);
        assert_eq!(res.counts.matched, 1);
    }

    #[test]
    fn no_detections_ap_zero() {
        let d = dims(64, 64);
        let m = rect_mask(d, 8, 8, 48, 48);
        let gt = gt_dataset(vec![gt_from_mask(1, 1, &m, false)], &[(1, d)]);
        let res = evaluate(&gt, &[], &EvalParams::default()).unwrap();
        assert_eq!(res.ap, 0.0);
        assert_eq!(res.ar, 0.0);
    }

    #[test]
    fn iou_055_matches_two_thresholds() {
        // det is an 11-pixel subset of a 20-pixel GT: IoU = 11/20 = 0.55,
        // which matches at thresholds 0.50 and 0.55 only -> AP = 0.2.
        let d = dims(64, 64);
        let gt_mask = rect_mask(d, 0, 0, 40, 50); // 2000 px, medium range
        let det_mask = BinaryMask::from_fn(d, |r, c| r < 40 && c < 50 && (r * 50 + c) < 1100);
        let gt = gt_dataset(vec![gt_from_mask(1, 1, &gt_mask, false)], &[(1, d)]);
        let dets = vec![DetInstance {
            image_id: 1,
            mask: rle_encode(&det_mask),
            score: 0.9,
        }];
        let res = evaluate(&gt, &dets, &EvalParams::default()).unwrap();
        assert!((res.ap - 0.2).abs() < 1e-9, "ap = {}", res.ap);
        assert!((res.ap50 - 1.0).abs() < 1e-12);
        assert_eq!(res.ap75, 0.0);
    }

    #[test]
    fn empty_slice_is_sentinel() {
        let d = dims(64, 64);
        let m = rect_mask(d, 8, 8, 48, 48); // medium-sized GT only
        let gt = gt_dataset(vec![gt_from_mask(1, 1, &m, false)], &[(1, d)]);
        let res = evaluate(&gt, &[], &EvalParams::default()).unwrap();
        assert_eq!(res.ap_small, Some(-1.0));
        assert_eq!(res.ap_large, -1.0);
    }

    #[test]
    fn exclude_small_ignores_small_gt() {
        let d = dims(64, 64);
        let small = rect_mask(d, 0, 0, 10, 10); // 100 px < 32^2
        let medium = rect_mask(d, 20, 20, 60, 60); // 1600 px
        let gt = gt_dataset(
            vec![
                gt_from_mask(1, 1, &small, false),
                gt_from_mask(1, 2, &medium, false),
            ],
            &[(1, d)],
        );
        // Only the medium instance is detected.
        let dets = vec![DetInstance {
            image_id: 1,
            mask: rle_encode(&medium),
            score: 0.9,
        }];
        let base = evaluate(&gt, &dets, &EvalParams::default()).unwrap();
        assert!(base.ap < 1.0); // the missed small GT costs recall
        let excl = evaluate(
            &gt,
            &dets,
            &EvalParams {
                exclude_small: true,
                ..EvalParams::default()
            },
        )
        .unwrap();
        assert!((excl.ap - 1.0).abs() < 1e-12);
        assert_eq!(excl.ap_small, None);
    }

    #[test]
    fn crowd_gt_never_false_negative() {
        let d = dims(64, 64);
        let crowd = rect_mask(d, 0, 0, 40, 40);
        let gt = gt_dataset(vec![gt_from_mask(1, 1, &crowd, true)], &[(1, d)]);
        // Crowd-only GT: npig = 0 -> sentinel, not 0.
        let res = evaluate(&gt, &[], &EvalParams::default()).unwrap();
        assert_eq!(res.ap, -1.0);
    }

    #[test]
    fn gt_box_improvement_never_lowers_ap() {
        let d = dims(64, 64);
        let m1 = rect_mask(d, 0, 0, 30, 30);
        let m2 = rect_mask(d, 34, 34, 63, 63);
        let gt = gt_dataset(
            vec![
                gt_from_mask(1, 1, &m1, false),
                gt_from_mask(1, 2, &m2, false),
            ],
            &[(1, d)],
        );
        let sloppy = BinaryMask::from_fn(d, |r, c| r < 30 && c < 30 && (r + c) % 3 != 0);
        let dets_before = vec![
            DetInstance {
                image_id: 1,
                mask: rle_encode(&sloppy),
                score: 0.8,
            },
            DetInstance {
                image_id: 1,
                mask: rle_encode(&m2),
                score: 0.7,
            },
        ];
        let mut dets_after = dets_before.clone();
        dets_after[0].mask = rle_encode(&m1); // replace with exact GT, same score
        let before = evaluate(&gt, &dets_before, &EvalParams::default()).unwrap();
        let after = evaluate(&gt, &dets_after, &EvalParams::default()).unwrap();
        assert!(after.ap >= before.ap - 1e-12);
    }

    #[test]
    fn load_gt_minimal() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("gt.json");
        std::fs::write(
            &path,
            r#"{"images":[{"id":1,"height":8,"width":8}],
                "annotations":[{"id":10,"image_id":1,
                  "segmentation":[[1.0,1.0,5.0,1.0,5.0,5.0,1.0,5.0]],
                  "bbox":[1.0,1.0,4.0,4.0],"area":16.0,"iscrowd":0,
                  "keypoints":[10,20,2, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0]}],
                "categories":[{"id":1,"name":"person"}]}"#,
        )
        .unwrap();
        let ds = load_gt(&path).unwrap();
        assert_eq!(ds.instances.len(), 1);
        let pose = ds.instances[0].pose.as_ref().unwrap();
        assert_eq!(pose.keypoints[0].unwrap().gt_flag, Some(2));
        assert!(pose.keypoints[1].is_none());
    }

    #[test]
    fn load_gt_schema_error_names_field() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.json");
        std::fs::write(&path, r#"{"images":[{"id":1,"height":8}],"annotations":[]}"#).unwrap();
        let err = load_gt(&path).unwrap_err();
        assert!(matches!(err, EvalError::Schema(_)), "{err:?}");
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn load_gt_parse_error_has_position() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("trunc.json");
        std::fs::write(&path, "{\"images\": [").unwrap();
        let err = load_gt(&path).unwrap_err();
        assert!(matches!(err, EvalError::Parse { .. }), "{err:?}");
    }

    #[test]
    fn results_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("dets.json");
        let d = dims(16, 16);
        let m = rect_mask(d, 2, 3, 10, 12);
        let dets = vec![DetInstance {
            image_id: 7,
            mask: rle_encode(&m),
            score: 0.625,
        }];
        write_results(&dets, &path).unwrap();
        let loaded = load_dets(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].image_id, 7);
        assert_eq!(loaded[0].score, 0.625);
        assert_eq!(loaded[0].mask, dets[0].mask);
    }

    #[test]
    fn empty_results_serialize_as_empty_array() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("empty.json");
        write_results(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "[]");
    }
}
