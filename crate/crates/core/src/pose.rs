//! Keypoint and pose data model: the COCO 17-keypoint scheme plus the three
//! per-keypoint confidence fields (visibility, presence probability, expected
//! OKS) used for prompt selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("score field {0:?} is absent on this keypoint")]
    FieldAbsent(ScoreField),
    #[error("keypoint must carry at least one of visibility or gt_flag")]
    MissingScore,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

/// The 17 COCO keypoints in canonical order. The enumeration ordinal equals
/// the index into pose keypoint arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(usize)]
pub enum KeypointName {
    Nose = 0,
    LeftEye = 1,
    RightEye = 2,
    LeftEar = 3,
    RightEar = 4,
    LeftShoulder = 5,
    RightShoulder = 6,
    LeftElbow = 7,
    RightElbow = 8,
    LeftWrist = 9,
    RightWrist = 10,
    LeftHip = 11,
    RightHip = 12,
    LeftKnee = 13,
    RightKnee = 14,
    LeftAnkle = 15,
    RightAnkle = 16,
}

pub const KEYPOINT_COUNT: usize = 17;

impl KeypointName {
    pub const ALL: [KeypointName; KEYPOINT_COUNT] = [
        KeypointName::Nose,
        KeypointName::LeftEye,
        KeypointName::RightEye,
        KeypointName::LeftEar,
        KeypointName::RightEar,
        KeypointName::LeftShoulder,
        KeypointName::RightShoulder,
        KeypointName::LeftElbow,
        KeypointName::RightElbow,
        KeypointName::LeftWrist,
        KeypointName::RightWrist,
        KeypointName::LeftHip,
        KeypointName::RightHip,
        KeypointName::LeftKnee,
        KeypointName::RightKnee,
        KeypointName::LeftAnkle,
        KeypointName::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Face keypoints subject to the one-per-selection limit in spread-based
    /// selection. The ears are deliberately not part of this set.
    pub fn is_face(self) -> bool {
        matches!(
            self,
            KeypointName::Nose | KeypointName::LeftEye | KeypointName::RightEye
        )
    }
}

/// Which per-keypoint confidence scalar drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    Visibility,
    PresenceProb,
    ExpectedOks,
    GtFlag,
}

/// One keypoint with real-valued position and whichever confidence fields the
/// source provided. `gt_flag` is the COCO ground-truth visibility code
/// (0 = unlabeled, 1 = labeled occluded, 2 = labeled visible).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub visibility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub presence_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expected_oks: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_flag: Option<u8>,
}

impl Keypoint {
    pub fn validate(&self) -> Result<(), PoseError> {
        if self.visibility.is_none() && self.gt_flag.is_none() {
            return Err(PoseError::MissingScore);
        }
        for s in [self.visibility, self.presence_prob, self.expected_oks]
            .into_iter()
            .flatten()
        {
            if !(0.0..=1.0).contains(&s) {
                return Err(PoseError::ScoreOutOfRange(s));
            }
        }
        Ok(())
    }
}

/// One person's pose: exactly 17 keypoint slots, unavailable slots `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [Option<Keypoint>; KEYPOINT_COUNT],
    pub instance_id: u64,
    pub image_id: u64,
}

impl Pose {
    pub fn empty(image_id: u64, instance_id: u64) -> Self {
        Self {
            keypoints: [None; KEYPOINT_COUNT],
            instance_id,
            image_id,
        }
    }
}

/// Project the selected confidence scalar out of a keypoint. The GT flag is
/// binarized: only flag 0 (unlabeled) counts as zero, both labeled codes map
/// to 1.0.
pub fn score_of(kp: &Keypoint, field: ScoreField) -> Result<f64, PoseError> {
    let v = match field {
        ScoreField::Visibility => kp.visibility,
        ScoreField::PresenceProb => kp.presence_prob,
        ScoreField::ExpectedOks => kp.expected_oks,
        ScoreField::GtFlag => kp.gt_flag.map(|f| if f == 0 { 0.0 } else { 1.0 }),
    };
    v.ok_or(PoseError::FieldAbsent(field))
}

/// Keypoints whose selected score is present and at least `min_score`, in
/// canonical index order. A keypoint missing the field is simply unavailable.
pub fn available_keypoints(
    pose: &Pose,
    field: ScoreField,
    min_score: f64,
) -> Vec<(usize, Keypoint)> {
    pose.keypoints
        .iter()
        .enumerate()
        .filter_map(|(i, kp)| {
            let kp = kp.as_ref()?;
            let s = score_of(kp, field).ok()?;
            (s >= min_score).then_some((i, *kp))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn score_of_projects_visibility() {
        let k = kp(1.0, 2.0, 0.73);
        assert_eq!(score_of(&k, ScoreField::Visibility).unwrap(), 0.73);
    }

    #[test]
    fn gt_flag_is_binary() {
        for (flag, expect) in [(0u8, 0.0), (1, 1.0), (2, 1.0)] {
            let k = Keypoint {
                x: 0.0,
                y: 0.0,
                visibility: None,
                presence_prob: None,
                expected_oks: None,
                gt_flag: Some(flag),
            };
            assert_eq!(score_of(&k, ScoreField::GtFlag).unwrap(), expect);
        }
    }

    #[test]
    fn absent_field_errors() {
        let k = kp(0.0, 0.0, 0.5);
        assert_eq!(
            score_of(&k, ScoreField::ExpectedOks),
            Err(PoseError::FieldAbsent(ScoreField::ExpectedOks))
        );
    }

    #[test]
    fn available_keypoints_thresholding() {
        let mut pose = Pose::empty(1, 1);
        pose.keypoints[0] = Some(kp(0.0, 0.0, 0.2));
        pose.keypoints[5] = Some(kp(1.0, 1.0, 0.5));
        pose.keypoints[11] = Some(kp(2.0, 2.0, 0.9));

        let all = available_keypoints(&pose, ScoreField::Visibility, 0.0);
        assert_eq!(all.iter().map(|(i, _)| *i).collect::<Vec<_>>(), [0, 5, 11]);

        let filtered = available_keypoints(&pose, ScoreField::Visibility, 0.3);
        assert_eq!(
            filtered.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            [5, 11]
        );
    }

    #[test]
    fn all_zero_scores_filtered_out() {
        let mut pose = Pose::empty(1, 1);
        for slot in pose.keypoints.iter_mut() {
            *slot = Some(kp(0.0, 0.0, 0.0));
        }
        assert!(available_keypoints(&pose, ScoreField::Visibility, 0.3).is_empty());
    }

    #[test]
    fn monotone_in_min_score() {
        let mut pose = Pose::empty(1, 1);
        for (i, slot) in pose.keypoints.iter_mut().enumerate() {
            *slot = Some(kp(i as f64, 0.0, i as f64 / 16.0));
        }
        let mut prev = KEYPOINT_COUNT + 1;
        for t in 0..=10 {
            let n = available_keypoints(&pose, ScoreField::Visibility, t as f64 / 10.0).len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn keypoint_requires_some_score() {
        let k = Keypoint {
            x: 0.0,
            y: 0.0,
            visibility: None,
            presence_prob: Some(0.5),
            expected_oks: None,
            gt_flag: None,
        };
        assert_eq!(k.validate(), Err(PoseError::MissingScore));
    }
}
