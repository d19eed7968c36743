//! Joint table and limb definition for the 15-joint body model.
//!
//! Index 0 is the pelvis (root joint). The remaining order follows the
//! COCO-style 15-joint layout used by multi-view capture datasets.

use serde::{Deserialize, Serialize};

pub const NUM_JOINTS: usize = 15;
pub const PELVIS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Pelvis = 0,
    Neck = 1,
    Nose = 2,
    LeftShoulder = 3,
    LeftElbow = 4,
    LeftWrist = 5,
    LeftHip = 6,
    LeftKnee = 7,
    LeftAnkle = 8,
    RightShoulder = 9,
    RightElbow = 10,
    RightWrist = 11,
    RightHip = 12,
    RightKnee = 13,
    RightAnkle = 14,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Pelvis,
        Joint::Neck,
        Joint::Nose,
        Joint::LeftShoulder,
        Joint::LeftElbow,
        Joint::LeftWrist,
        Joint::LeftHip,
        Joint::LeftKnee,
        Joint::LeftAnkle,
        Joint::RightShoulder,
        Joint::RightElbow,
        Joint::RightWrist,
        Joint::RightHip,
        Joint::RightKnee,
        Joint::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::Pelvis => "pelvis",
            Joint::Neck => "neck",
            Joint::Nose => "nose",
            Joint::LeftShoulder => "left_shoulder",
            Joint::LeftElbow => "left_elbow",
            Joint::LeftWrist => "left_wrist",
            Joint::LeftHip => "left_hip",
            Joint::LeftKnee => "left_knee",
            Joint::LeftAnkle => "left_ankle",
            Joint::RightShoulder => "right_shoulder",
            Joint::RightElbow => "right_elbow",
            Joint::RightWrist => "right_wrist",
            Joint::RightHip => "right_hip",
            Joint::RightKnee => "right_knee",
            Joint::RightAnkle => "right_ankle",
        }
    }
}

/// Default limb table: 14 bones over the 15 joints.
pub const LIMBS: [(usize, usize); 14] = [
    (0, 1),   // pelvis - neck
    (1, 2),   // neck - nose
    (1, 3),   // neck - left shoulder
    (3, 4),   // left upper arm
    (4, 5),   // left forearm
    (1, 9),   // neck - right shoulder
    (9, 10),  // right upper arm
    (10, 11), // right forearm
    (0, 6),   // pelvis - left hip
    (6, 7),   // left thigh
    (7, 8),   // left shin
    (0, 12),  // pelvis - right hip
    (12, 13), // right thigh
    (13, 14), // right shin
];

pub fn default_limbs() -> Vec<(usize, usize)> {
    LIMBS.to_vec()
}
