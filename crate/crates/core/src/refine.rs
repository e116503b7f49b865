//! Training-time correction-point sampling over (GT mask, current prediction,
//! pose): the default mask-driven strategy, the pose-first variant, and the
//! fully pose-preferential variant.
//!
//! All randomness comes from per-step counter-based streams derived from
//! `(seed, image_id, instance_id, step)`. Because each step owns its stream,
//! the pose-first variant and the default strategy produce identical draws
//! from step 2 onward, and per-instance work is order-independent under
//! parallelism.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{error_region, BinaryMask, MaskError};
use crate::pose::{available_keypoints, score_of, Pose, ScoreField, KEYPOINT_COUNT};
use crate::prompt::{PointSource, PromptLabel, PromptPoint};
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("ground-truth mask is empty")]
    EmptyGtMask,
    #[error("error region is empty and the GT branch was not taken")]
    NothingToSample,
    #[error("prediction trace has {got} masks, expected {expected}")]
    PredTraceLength { expected: usize, got: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// The three correction-point sampling strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Uniform first point from the GT mask, corrections from the error region.
    MaskRefine,
    /// Pose-derived first point only; corrections as in `MaskRefine`.
    Pose1MaskRefine,
    /// Pose-derived first point and pose-preferential corrections.
    PoseMaskRefine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Total points per sequence, at most 8 (the per-iteration budget).
    pub total_points: usize,
    /// Probability that a correction step samples from the GT mask instead of
    /// the error region. The source text says only "a small probability".
    pub p_gt_sample: f64,
    pub score_field: ScoreField,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, seed: u64) -> Self {
        Self {
            kind,
            total_points: 8,
            p_gt_sample: 0.1,
            score_field: ScoreField::Visibility,
            seed,
        }
    }

    pub fn validate(&self) -> bool {
        (1..=8).contains(&self.total_points) && (0.0..=1.0).contains(&self.p_gt_sample)
    }

    fn step_rng(&self, pose: &Pose, step: usize) -> SplitMix64 {
        SplitMix64::from_keys(self.seed, &[pose.image_id, pose.instance_id, step as u64])
    }
}

/// One step of the iterative correction loop.
#[derive(Debug, Clone)]
pub struct RefineState {
    gt: BinaryMask,
    pred: BinaryMask,
    pose: Pose,
    sampled: Vec<PromptPoint>,
    used_keypoints: [bool; KEYPOINT_COUNT],
}

impl RefineState {
    /// Start a sequence from an already-drawn first point.
    pub fn new(gt: BinaryMask, pose: Pose, first: PromptPoint) -> Self {
        let pred = BinaryMask::zeros(gt.dims());
        let mut used = [false; KEYPOINT_COUNT];
        if let PointSource::PoseKeypoint(i) = first.source {
            used[i] = true;
        }
        Self {
            gt,
            pred,
            pose,
            sampled: vec![first],
            used_keypoints: used,
        }
    }

    /// Install the segmenter's latest prediction; the next correction point is
    /// drawn against this mask's error region.
    pub fn set_prediction(&mut self, pred: BinaryMask) {
        self.pred = pred;
    }

    pub fn sampled(&self) -> &[PromptPoint] {
        &self.sampled
    }

    pub fn gt(&self) -> &BinaryMask {
        &self.gt
    }
}

/// Map a real-valued keypoint position to its pixel, or `None` when it falls
/// outside the image.
fn keypoint_pixel(mask: &BinaryMask, x: f64, y: f64) -> Option<(u32, u32)> {
    let col = (x + 0.5).floor();
    let row = (y + 0.5).floor();
    let dims = mask.dims();
    if col < 0.0 || row < 0.0 || col >= dims.width as f64 || row >= dims.height as f64 {
        return None;
    }
    Some((row as u32, col as u32))
}

fn uniform_pixel(mask: &BinaryMask, rng: &mut SplitMix64) -> Option<(u32, u32)> {
    // Indexing the k-th set pixel in column-major order with k uniform keeps
    // the draw exact and replayable with no rejection loop.
    let pixels = mask.set_pixels_column_major();
    if pixels.is_empty() {
        return None;
    }
    Some(pixels[rng.next_index(pixels.len())])
}

/// Draw the first point of a sequence. The default strategy samples uniformly
/// from the GT mask; the pose-driven strategies take the available keypoint
/// with the highest score, falling back to the uniform rule when no keypoint
/// is available.
pub fn first_point(
    cfg: &SamplerConfig,
    gt: &BinaryMask,
    pose: &Pose,
) -> Result<PromptPoint, SampleError> {
    if gt.is_empty() {
        return Err(SampleError::EmptyGtMask);
    }
    if matches!(
        cfg.kind,
        SamplerKind::Pose1MaskRefine | SamplerKind::PoseMaskRefine
    ) {
        let best = available_keypoints(pose, cfg.score_field, 0.0)
            .into_iter()
            .map(|(i, kp)| (i, score_of(&kp, cfg.score_field).expect("present"), kp))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
        if let Some((i, _, kp)) = best {
            return Ok(PromptPoint {
                x: kp.x,
                y: kp.y,
                label: PromptLabel::Positive,
                source: PointSource::PoseKeypoint(i),
            });
        }
    }
    let mut rng = cfg.step_rng(pose, 0);
    let (row, col) = uniform_pixel(gt, &mut rng).expect("gt non-empty");
    Ok(PromptPoint {
        x: col as f64,
        y: row as f64,
        label: PromptLabel::Positive,
        source: PointSource::MaskSample,
    })
}

/// Draw one correction point and append it to the state.
///
/// With probability `p_gt_sample` the point is uniform over the GT mask
/// (positive). Otherwise it comes from the current error region: the
/// pose-preferential strategy first looks for unused keypoints lying on set
/// error pixels and takes the highest-scoring one; all strategies otherwise
/// sample uniformly over the error region. Error-region points are positive
/// exactly when the GT mask is set at that pixel.
pub fn next_point(cfg: &SamplerConfig, state: &mut RefineState) -> Result<PromptPoint, SampleError> {
    assert!(!state.sampled.is_empty(), "first_point must come first");
    let step = state.sampled.len();
    let mut rng = cfg.step_rng(&state.pose, step);
    let u = rng.next_f64();

    let point = if u < cfg.p_gt_sample {
        let (row, col) = uniform_pixel(&state.gt, &mut rng).ok_or(SampleError::EmptyGtMask)?;
        PromptPoint {
            x: col as f64,
            y: row as f64,
            label: PromptLabel::Positive,
            source: PointSource::MaskSample,
        }
    } else {
        let err = error_region(&state.gt, &state.pred)?;
        let pose_pick = if cfg.kind == SamplerKind::PoseMaskRefine {
            available_keypoints(&state.pose, cfg.score_field, 0.0)
                .into_iter()
                .filter(|(i, _)| !state.used_keypoints[*i])
                .filter_map(|(i, kp)| {
                    let (r, c) = keypoint_pixel(&err, kp.x, kp.y)?;
                    err.get(r, c).then_some((
                        i,
                        score_of(&kp, cfg.score_field).expect("present"),
                        kp,
                        (r, c),
                    ))
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        } else {
            None
        };
        match pose_pick {
            Some((i, _, kp, (r, c))) => PromptPoint {
                x: kp.x,
                y: kp.y,
                label: if state.gt.get(r, c) {
                    PromptLabel::Positive
                } else {
                    PromptLabel::Negative
                },
                source: PointSource::PoseKeypoint(i),
            },
            None => {
                let (row, col) =
                    uniform_pixel(&err, &mut rng).ok_or(SampleError::NothingToSample)?;
                PromptPoint {
                    x: col as f64,
                    y: row as f64,
                    label: if state.gt.get(row, col) {
                        PromptLabel::Positive
                    } else {
                        PromptLabel::Negative
                    },
                    source: PointSource::ErrorSample,
                }
            }
        }
    };

    if let PointSource::PoseKeypoint(i) = point.source {
        state.used_keypoints[i] = true;
    }
    state.sampled.push(point);
    Ok(point)
}

/// Run a full sequence offline: the first point followed by one correction
/// point per prediction in `pred_trace`. Fully deterministic given the seed.
pub fn sample_sequence(
    cfg: &SamplerConfig,
    gt: &BinaryMask,
    pred_trace: &[BinaryMask],
    pose: &Pose,
) -> Result<Vec<PromptPoint>, SampleError> {
    if pred_trace.len() != cfg.total_points - 1 {
        return Err(SampleError::PredTraceLength {
            expected: cfg.total_points - 1,
            got: pred_trace.len(),
        });
    }
    let first = first_point(cfg, gt, pose)?;
    let mut state = RefineState::new(gt.clone(), pose.clone(), first);
    for pred in pred_trace {
        state.set_prediction(pred.clone());
        next_point(cfg, &mut state)?;
    }
    Ok(state.sampled)
}

/// Serialize a sampled sequence as JSON lines
/// `{step, x, y, label, source, branch}`. `branch` distinguishes the first
/// draw, GT-mask draws, uniform error-region draws and pose-derived
/// error-region picks.
pub fn sequence_to_jsonl(points: &[PromptPoint]) -> String {
    let mut out = String::new();
    for (step, p) in points.iter().enumerate() {
        let (source, branch) = match (step, p.source) {
            (0, PointSource::MaskSample) => ("mask_sample".to_string(), "first"),
            (0, PointSource::PoseKeypoint(i)) => (format!("pose_keypoint:{i}"), "first"),
            (_, PointSource::MaskSample) => ("mask_sample".to_string(), "gt"),
            (_, PointSource::ErrorSample) => ("error_sample".to_string(), "error"),
            (_, PointSource::PoseKeypoint(i)) => (format!("pose_keypoint:{i}"), "pose"),
        };
        let label = match p.label {
            PromptLabel::Positive => "positive",
            PromptLabel::Negative => "negative",
        };
        out.push_str(&format!(
            "{{\"step\":{step},\"x\":{},\"y\":{},\"label\":\"{label}\",\"source\":\"{source}\",\"branch\":\"{branch}\"}}\n",
            p.x, p.y
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskDims;
    use crate::pose::Keypoint;

    fn dims(h: u32, w: u32) -> MaskDims {
        MaskDims::new(h, w).unwrap()
    }

    fn kp(x: f64, y: f64, vis: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            visibility: Some(vis),
            presence_prob: None,
            expected_oks: None,
            gt_flag: None,
        }
    }

    fn pose_with(entries: &[(usize, Keypoint)]) -> Pose {
        let mut pose = Pose::empty(3, 7);
        for &(i, k) in entries {
            pose.keypoints[i] = Some(k);
        }
        pose
    }

    fn cfg(kind: SamplerKind) -> SamplerConfig {
        SamplerConfig::new(kind, 1234)
    }

    #[test]
    fn first_point_pose_takes_highest_visibility() {
        let gt = BinaryMask::from_fn(dims(10, 10), |r, c| r < 8 && c < 8);
        let pose = pose_with(&[(5, kp(3.0, 3.0, 0.9)), (6, kp(7.0, 7.0, 0.5))]);
        let p = first_point(&cfg(SamplerKind::PoseMaskRefine), &gt, &pose).unwrap();
        assert_eq!((p.x, p.y), (3.0, 3.0));
        assert_eq!(p.label, PromptLabel::Positive);
        assert_eq!(p.source, PointSource::PoseKeypoint(5));
    }

    #[test]
    fn first_point_falls_back_to_gt_sample() {
        let mut gt = BinaryMask::zeros(dims(10, 10));
        gt.set(5, 5, true);
        let pose = Pose::empty(1, 1);
        let p = first_point(&cfg(SamplerKind::PoseMaskRefine), &gt, &pose).unwrap();
        assert_eq!((p.x, p.y), (5.0, 5.0));
        assert_eq!(p.source, PointSource::MaskSample);
    }

    #[test]
    fn first_point_empty_gt_errors() {
        let gt = BinaryMask::zeros(dims(4, 4));
        let pose = Pose::empty(1, 1);
        assert_eq!(
            first_point(&cfg(SamplerKind::MaskRefine), &gt, &pose),
            Err(SampleError::EmptyGtMask)
        );
    }

    #[test]
    fn mask_refine_first_point_roughly_uniform() {
        let mut gt = BinaryMask::zeros(dims(2, 2));
        gt.set(0, 0, true);
        gt.set(1, 1, true);
        let n = 10_000;
        let mut hits = 0usize;
        for seed in 0..n {
            let mut c = cfg(SamplerKind::MaskRefine);
            c.seed = seed as u64;
            let p = first_point(&c, &gt, &Pose::empty(1, 1)).unwrap();
            if (p.x, p.y) == (0.0, 0.0) {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn next_point_single_pixel_error_forced() {
        let gt = BinaryMask::from_fn(dims(10, 10), |r, c| r < 5 && c < 5);
        let mut pred = gt.clone();
        pred.set(5, 5, true); // false positive at (5,5)
        let pose = pose_with(&[(5, kp(7.0, 7.0, 0.9))]); // outside error region
        let mut c = cfg(SamplerKind::PoseMaskRefine);
        c.p_gt_sample = 0.0;
        let first = first_point(&c, &gt, &pose).unwrap();
        let mut state = RefineState::new(gt.clone(), pose, first);
        state.set_prediction(pred);
        let p = next_point(&c, &mut state).unwrap();
        assert_eq!((p.x, p.y), (5.0, 5.0));
        assert_eq!(p.label, PromptLabel::Negative); // gt clear there
        assert_eq!(p.source, PointSource::ErrorSample);
    }

    #[test]
    fn next_point_prefers_highest_score_keypoint_in_region() {
        let gt = BinaryMask::from_fn(dims(10, 10), |r, c| r < 6 && c < 6);
        let pred = BinaryMask::zeros(dims(10, 10)); // whole gt is the error region
        let pose = pose_with(&[(5, kp(2.0, 2.0, 0.9)), (6, kp(4.0, 4.0, 0.6))]);
        let mut c = cfg(SamplerKind::PoseMaskRefine);
        c.p_gt_sample = 0.0;
        let first = first_point(&c, &gt, &pose).unwrap(); // uses keypoint 5
        let mut state = RefineState::new(gt.clone(), pose, first);
        state.set_prediction(pred);
        // Keypoint 5 is already used, so 6 is picked even though 5 scores higher.
        let p = next_point(&c, &mut state).unwrap();
        assert_eq!(p.source, PointSource::PoseKeypoint(6));
        assert_eq!(p.label, PromptLabel::Positive);
    }

    #[test]
    fn gt_branch_always_positive_inside_gt() {
        let gt = BinaryMask::from_fn(dims(8, 8), |r, c| (r + c) % 2 == 0);
        let pose = Pose::empty(2, 9);
        let mut c = cfg(SamplerKind::MaskRefine);
        c.p_gt_sample = 1.0;
        c.total_points = 8;
        let preds = vec![gt.clone(); 7];
        let seq = sample_sequence(&c, &gt, &preds, &pose).unwrap();
        assert_eq!(seq.len(), 8);
        for p in &seq {
            assert_eq!(p.label, PromptLabel::Positive);
            assert!(gt.get(p.y as u32, p.x as u32));
        }
    }

    #[test]
    fn sequence_of_one_is_just_first_point() {
        let gt = BinaryMask::from_fn(dims(4, 4), |_, _| true);
        let mut c = cfg(SamplerKind::MaskRefine);
        c.total_points = 1;
        let seq = sample_sequence(&c, &gt, &[], &Pose::empty(1, 1)).unwrap();
        assert_eq!(seq.len(), 1);
    }

    #[test]
    fn pred_trace_length_checked() {
        let gt = BinaryMask::from_fn(dims(4, 4), |_, _| true);
        let c = cfg(SamplerKind::MaskRefine);
        assert_eq!(
            sample_sequence(&c, &gt, &[], &Pose::empty(1, 1)),
            Err(SampleError::PredTraceLength {
                expected: 7,
                got: 0
            })
        );
    }

    #[test]
    fn pose1_equals_mask_refine_after_first_point() {
        let gt = BinaryMask::from_fn(dims(16, 16), |r, c| (r * 3 + c) % 5 != 0);
        let pose = pose_with(&[(5, kp(8.0, 8.0, 0.9))]);
        let preds: Vec<BinaryMask> = (0..7)
            .map(|k| BinaryMask::from_fn(dims(16, 16), |r, c| (r + c + k) % 4 == 0))
            .collect();
        let a = sample_sequence(&cfg(SamplerKind::MaskRefine), &gt, &preds, &pose).unwrap();
        let b = sample_sequence(&cfg(SamplerKind::Pose1MaskRefine), &gt, &preds, &pose).unwrap();
        assert_eq!(a[1..], b[1..]);
        assert_ne!(a[0].source, b[0].source);
    }

    #[test]
    fn replay_is_bit_identical() {
        let gt = BinaryMask::from_fn(dims(12, 12), |r, c| r * c % 3 == 0);
        let pose = pose_with(&[(0, kp(5.0, 5.0, 0.8))]);
        let preds: Vec<BinaryMask> = (0..7)
            .map(|k| BinaryMask::from_fn(dims(12, 12), |r, c| (r * 2 + c + k) % 3 == 0))
            .collect();
        let c = cfg(SamplerKind::PoseMaskRefine);
        let a = sample_sequence(&c, &gt, &preds, &pose).unwrap();
        let b = sample_sequence(&c, &gt, &preds, &pose).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_shape() {
        let gt = BinaryMask::from_fn(dims(4, 4), |_, _| true);
        let mut c = cfg(SamplerKind::MaskRefine);
        c.total_points = 1;
        let seq = sample_sequence(&c, &gt, &[], &Pose::empty(1, 1)).unwrap();
        let jsonl = sequence_to_jsonl(&seq);
        assert!(jsonl.starts_with("{\"step\":0,"));
        assert!(jsonl.contains("\"branch\":\"first\""));
    }
}
