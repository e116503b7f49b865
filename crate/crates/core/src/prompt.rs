//! Keypoint-to-prompt selection: top-score selection (`max_vis`), the
//! score-then-farthest-point diversification (`max_spread`), and the two
//! negative-keypoint strategies. All selectors are deterministic; ties break
//! by canonical keypoint index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BBox;
use crate::pose::{available_keypoints, score_of, KeypointName, Pose, ScoreField};

/// Hard cap on points per prompt: the refinement budget is eight points per
/// iteration.
pub const MAX_PROMPT_POINTS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no keypoints available for selection")]
    NoKeypointsAvailable,
    #[error("no candidate keypoints among other poses")]
    NoCandidates,
    #[error("prompt set needs at least one positive point or a box")]
    EmptyPrompt,
    #[error("prompt set exceeds the {MAX_PROMPT_POINTS}-point budget ({0} points)")]
    TooManyPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLabel {
    Positive,
    Negative,
}

/// Where a prompt point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    PoseKeypoint(usize),
    MaskSample,
    ErrorSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub label: PromptLabel,
    pub source: PointSource,
}

impl PromptPoint {
    pub fn positive_keypoint(index: usize, x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            label: PromptLabel::Positive,
            source: PointSource::PoseKeypoint(index),
        }
    }
}

/// Ordered point prompts plus an optional box, as fed to a segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
    pub bbox: Option<BBox>,
}

impl PromptSet {
    pub fn new(points: Vec<PromptPoint>, bbox: Option<BBox>) -> Result<Self, PromptError> {
        if points.len() > MAX_PROMPT_POINTS {
            return Err(PromptError::TooManyPoints(points.len()));
        }
        let has_positive = points.iter().any(|p| p.label == PromptLabel::Positive);
        if !has_positive && bbox.is_none() {
            return Err(PromptError::EmptyPrompt);
        }
        Ok(Self { points, bbox })
    }

    pub fn positive_points(&self) -> impl Iterator<Item = &PromptPoint> {
        self.points
            .iter()
            .filter(|p| p.label == PromptLabel::Positive)
    }
}

fn dist(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Select the `n` available keypoints with the highest score, all positive,
/// ordered by descending score (ties by canonical index). Returns fewer than
/// `n` points when fewer keypoints are available.
pub fn max_vis(pose: &Pose, n: usize, field: ScoreField) -> Result<PromptSet, PromptError> {
    assert!(n >= 1, "n must be at least 1");
    let mut scored: Vec<(usize, f64, f64, f64)> = available_keypoints(pose, field, 0.0)
        .into_iter()
        .map(|(i, kp)| (i, score_of(&kp, field).expect("field present"), kp.x, kp.y))
        .collect();
    if scored.is_empty() {
        return Err(PromptError::NoKeypointsAvailable);
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let points = scored
        .iter()
        .take(n.min(MAX_PROMPT_POINTS))
        .map(|&(i, _, x, y)| PromptPoint::positive_keypoint(i, x, y))
        .collect();
    PromptSet::new(points, None)
}

/// Spread-based selection: the first point is the highest-score available
/// keypoint; each subsequent point maximizes the minimum Euclidean distance
/// to all already-selected points. Keypoints below `min_score` are excluded
/// throughout, and at most one of {nose, left eye, right eye} may appear.
pub fn max_spread(
    pose: &Pose,
    n: usize,
    field: ScoreField,
    min_score: f64,
) -> Result<PromptSet, PromptError> {
    assert!(n >= 1, "n must be at least 1");
    let candidates = available_keypoints(pose, field, min_score);
    if candidates.is_empty() {
        return Err(PromptError::NoKeypointsAvailable);
    }

    let scored: Vec<(usize, f64, f64, f64)> = candidates
        .iter()
        .map(|&(i, kp)| (i, score_of(&kp, field).expect("field present"), kp.x, kp.y))
        .collect();

    // First pick: highest score, ties by index.
    let first = scored
        .iter()
        .copied()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .expect("non-empty");

    let mut selected: Vec<(usize, f64, f64)> = vec![(first.0, first.2, first.3)];
    let mut face_used = KeypointName::ALL[first.0].is_face();

    while selected.len() < n.min(MAX_PROMPT_POINTS) {
        let best = scored
            .iter()
            .filter(|(i, ..)| !selected.iter().any(|(si, ..)| si == i))
            .filter(|(i, ..)| !(face_used && KeypointName::ALL[*i].is_face()))
            .map(|&(i, _, x, y)| {
                let d = selected
                    .iter()
                    .map(|&(_, sx, sy)| dist(x, y, sx, sy))
                    .fold(f64::INFINITY, f64::min);
                (i, x, y, d)
            })
            .max_by(|a, b| a.3.partial_cmp(&b.3).unwrap().then(b.0.cmp(&a.0)));
        match best {
            Some((i, x, y, _)) => {
                face_used |= KeypointName::ALL[i].is_face();
                selected.push((i, x, y));
            }
            None => break, // candidates exhausted
        }
    }

    let points = selected
        .into_iter()
        .map(|(i, x, y)| PromptPoint::positive_keypoint(i, x, y))
        .collect();
    PromptSet::new(points, None)
}

/// The available keypoint across all other poses closest (Euclidean) to the
/// centroid of the positive prompt points, labeled negative. Ties break by
/// pose order, then keypoint index.
pub fn negative_closest(
    _target: &Pose,
    others: &[Pose],
    prompt: &PromptSet,
) -> Result<PromptPoint, PromptError> {
    let positives: Vec<&PromptPoint> = prompt.positive_points().collect();
    if positives.is_empty() {
        return Err(PromptError::EmptyPrompt);
    }
    let cx = positives.iter().map(|p| p.x).sum::<f64>() / positives.len() as f64;
    let cy = positives.iter().map(|p| p.y).sum::<f64>() / positives.len() as f64;

    let mut best: Option<(f64, usize, usize, f64, f64)> = None;
    for (pi, pose) in others.iter().enumerate() {
        for (ki, kp) in pose.keypoints.iter().enumerate() {
            let Some(kp) = kp else { continue };
            let d = dist(kp.x, kp.y, cx, cy);
            let key = (d, pi, ki);
            let better = match &best {
                None => true,
                Some((bd, bpi, bki, ..)) => key < (*bd, *bpi, *bki),
            };
            if better {
                best = Some((d, pi, ki, kp.x, kp.y));
            }
        }
    }
    let (_, _, ki, x, y) = best.ok_or(PromptError::NoCandidates)?;
    Ok(PromptPoint {
        x,
        y,
        label: PromptLabel::Negative,
        source: PointSource::PoseKeypoint(ki),
    })
}

/// The target pose's available keypoint with the minimum score, labeled
/// negative. Ties break by keypoint index.
pub fn negative_least_visible(target: &Pose, field: ScoreField) -> Result<PromptPoint, PromptError> {
    let candidates = available_keypoints(target, field, 0.0);
    let best = candidates
        .iter()
        .map(|&(i, kp)| (i, score_of(&kp, field).expect("field present"), kp.x, kp.y))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .ok_or(PromptError::NoKeypointsAvailable)?;
    Ok(PromptPoint {
        x: best.2,
        y: best.3,
        label: PromptLabel::Negative,
        source: PointSource::PoseKeypoint(best.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Keypoint;

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
        let mut pose = Pose::empty(1, 1);
        for &(i, k) in entries {
            pose.keypoints[i] = Some(k);
        }
        pose
    }

    fn indices(ps: &PromptSet) -> Vec<usize> {
        ps.points
            .iter()
            .map(|p| match p.source {
                PointSource::PoseKeypoint(i) => i,
                _ => panic!("expected keypoint source"),
            })
            .collect()
    }

    #[test]
    fn max_vis_top3() {
        let pose = pose_with(&[
            (0, kp(0.0, 0.0, 0.9)),
            (5, kp(1.0, 1.0, 0.8)),
            (6, kp(2.0, 2.0, 0.7)),
            (11, kp(3.0, 3.0, 0.4)),
        ]);
        let ps = max_vis(&pose, 3, ScoreField::Visibility).unwrap();
        assert_eq!(indices(&ps), [0, 5, 6]);
        assert!(ps.points.iter().all(|p| p.label == PromptLabel::Positive));
    }

    #[test]
    fn max_vis_single_available() {
        let pose = pose_with(&[(7, kp(4.0, 5.0, 0.6))]);
        let ps = max_vis(&pose, 1, ScoreField::Visibility).unwrap();
        assert_eq!(indices(&ps), [7]);
    }

    #[test]
    fn max_vis_no_keypoints_errors() {
        let pose = Pose::empty(1, 1);
        assert_eq!(
            max_vis(&pose, 3, ScoreField::Visibility),
            Err(PromptError::NoKeypointsAvailable)
        );
    }

    #[test]
    fn max_vis_score_tie_breaks_by_index() {
        let pose = pose_with(&[(9, kp(0.0, 0.0, 0.5)), (3, kp(1.0, 1.0, 0.5))]);
        let ps = max_vis(&pose, 2, ScoreField::Visibility).unwrap();
        assert_eq!(indices(&ps), [3, 9]);
    }

    #[test]
    fn max_spread_picks_farthest_second() {
        // A(0,0,.9) first; B(10,0,.8) is farther from A than C(1,0,.85);
        // D(5,5,.2) is below the threshold.
        let pose = pose_with(&[
            (5, kp(0.0, 0.0, 0.9)),  // A
            (6, kp(10.0, 0.0, 0.8)), // B
            (7, kp(1.0, 0.0, 0.85)), // C
            (8, kp(5.0, 5.0, 0.2)),  // D
        ]);
        let ps = max_spread(&pose, 2, ScoreField::Visibility, 0.3).unwrap();
        assert_eq!(indices(&ps), [5, 6]);
    }

    #[test]
    fn max_spread_n1_equals_max_vis_n1() {
        let pose = pose_with(&[
            (4, kp(0.0, 0.0, 0.6)),
            (9, kp(3.0, 3.0, 0.8)),
            (12, kp(5.0, 1.0, 0.7)),
        ]);
        let a = max_spread(&pose, 1, ScoreField::Visibility, 0.0).unwrap();
        let b = max_vis(&pose, 1, ScoreField::Visibility).unwrap();
        assert_eq!(indices(&a), indices(&b));
    }

    #[test]
    fn max_spread_limits_face_keypoints_to_one() {
        let pose = pose_with(&[
            (0, kp(5.0, 5.0, 0.95)),  // nose
            (1, kp(4.0, 5.0, 0.9)),   // left eye
            (2, kp(6.0, 5.0, 0.9)),   // right eye
            (5, kp(0.0, 20.0, 0.8)),  // left shoulder
        ]);
        let ps = max_spread(&pose, 4, ScoreField::Visibility, 0.0).unwrap();
        let face = indices(&ps)
            .iter()
            .filter(|&&i| KeypointName::ALL[i].is_face())
            .count();
        assert_eq!(face, 1);
        // Only two points are eligible once the face budget is spent.
        assert_eq!(ps.points.len(), 2);
    }

    #[test]
    fn max_spread_ears_not_in_face_set() {
        let pose = pose_with(&[
            (3, kp(0.0, 0.0, 0.9)),
            (4, kp(10.0, 0.0, 0.9)),
            (0, kp(5.0, 5.0, 0.95)),
        ]);
        let ps = max_spread(&pose, 3, ScoreField::Visibility, 0.0).unwrap();
        assert_eq!(ps.points.len(), 3);
    }

    #[test]
    fn negative_closest_single_candidate() {
        let target = pose_with(&[(5, kp(0.0, 0.0, 0.9))]);
        let other = pose_with(&[(6, kp(3.0, 4.0, 0.5))]);
        let prompt = max_vis(&target, 1, ScoreField::Visibility).unwrap();
        let neg = negative_closest(&target, &[other], &prompt).unwrap();
        assert_eq!(neg.label, PromptLabel::Negative);
        assert_eq!((neg.x, neg.y), (3.0, 4.0));
    }

    #[test]
    fn negative_closest_picks_nearer() {
        let target = pose_with(&[(5, kp(0.0, 0.0, 0.9))]);
        let other = pose_with(&[(6, kp(0.0, 3.0, 0.5)), (7, kp(7.2, 0.0, 0.5))]);
        let prompt = max_vis(&target, 1, ScoreField::Visibility).unwrap();
        let neg = negative_closest(&target, &[other], &prompt).unwrap();
        assert_eq!((neg.x, neg.y), (0.0, 3.0));
    }

    #[test]
    fn negative_closest_no_candidates() {
        let target = pose_with(&[(5, kp(0.0, 0.0, 0.9))]);
        let prompt = max_vis(&target, 1, ScoreField::Visibility).unwrap();
        assert_eq!(
            negative_closest(&target, &[Pose::empty(1, 2)], &prompt),
            Err(PromptError::NoCandidates)
        );
    }

    #[test]
    fn negative_least_visible_argmin() {
        let pose = pose_with(&[
            (0, kp(0.0, 0.0, 0.9)),
            (7, kp(1.0, 1.0, 0.1)),
            (12, kp(2.0, 2.0, 0.8)),
        ]);
        let neg = negative_least_visible(&pose, ScoreField::Visibility).unwrap();
        assert_eq!(neg.source, PointSource::PoseKeypoint(7));
        assert_eq!(neg.label, PromptLabel::Negative);
    }

    #[test]
    fn prompt_set_rejects_negative_only() {
        let p = PromptPoint {
            x: 0.0,
            y: 0.0,
            label: PromptLabel::Negative,
            source: PointSource::MaskSample,
        };
        assert_eq!(PromptSet::new(vec![p], None), Err(PromptError::EmptyPrompt));
    }

    #[test]
    fn prompt_set_enforces_budget() {
        let p = PromptPoint {
            x: 0.0,
            y: 0.0,
            label: PromptLabel::Positive,
            source: PointSource::MaskSample,
        };
        assert_eq!(
            PromptSet::new(vec![p; 9], None),
            Err(PromptError::TooManyPoints(9))
        );
    }
}
