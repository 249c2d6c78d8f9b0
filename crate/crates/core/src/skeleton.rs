use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint vocabulary plus per-joint OKS falloff constants.
///
/// `edges` lists limb segments as joint-index pairs; they drive stick-figure
/// rendering and pose overlays but play no role in the math.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub oks_sigmas: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    pub fn new(
        joint_names: Vec<String>,
        oks_sigmas: Vec<f64>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let m = joint_names.len();
        if m == 0 {
            return Err(Error::InvalidSkeleton("joint list is empty".into()));
        }
        if oks_sigmas.len() != m {
            return Err(Error::InvalidSkeleton(format!(
                "{} joints but {} sigmas",
                m,
                oks_sigmas.len()
            )));
        }
        for name in &joint_names {
            if name.trim().is_empty() {
                return Err(Error::InvalidSkeleton("empty joint name".into()));
            }
        }
        let mut sorted = joint_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != m {
            return Err(Error::InvalidSkeleton("duplicate joint names".into()));
        }
        if oks_sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidSkeleton(
                "all oks_sigmas must be strictly positive".into(),
            ));
        }
        for &(a, b) in &edges {
            if a >= m || b >= m {
                return Err(Error::InvalidSkeleton(format!(
                    "edge ({a},{b}) out of range for {m} joints"
                )));
            }
        }
        Ok(Self {
            joint_names,
            oks_sigmas,
            edges,
        })
    }

    /// Number of joints.
    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Compact articulated figure used by the synthetic scene generator.
    pub fn synthetic_humanoid() -> Self {
        let names = [
            "head",
            "neck",
            "left elbow",
            "right elbow",
            "left hand",
            "right hand",
            "hip",
            "left knee",
            "right knee",
            "left foot",
            "right foot",
        ];
        let sigmas = [
            0.08, 0.08, 0.07, 0.07, 0.07, 0.07, 0.10, 0.09, 0.09, 0.09, 0.09,
        ];
        let edges = vec![
            (0, 1),
            (1, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (1, 6),
            (6, 7),
            (6, 8),
            (7, 9),
            (8, 10),
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            sigmas.to_vec(),
            edges,
        )
        .expect("builtin skeleton is valid")
    }

    /// The 17-joint COCO person skeleton with its standard sigmas.
    pub fn coco17() -> Self {
        let names = [
            "nose",
            "left eye",
            "right eye",
            "left ear",
            "right ear",
            "left shoulder",
            "right shoulder",
            "left elbow",
            "right elbow",
            "left wrist",
            "right wrist",
            "left hip",
            "right hip",
            "left knee",
            "right knee",
            "left ankle",
            "right ankle",
        ];
        let sigmas = [
            0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
            0.107, 0.087, 0.087, 0.089, 0.089,
        ];
        let edges = vec![
            (15, 13),
            (13, 11),
            (16, 14),
            (14, 12),
            (11, 12),
            (5, 11),
            (6, 12),
            (5, 6),
            (5, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (1, 2),
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (4, 6),
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            sigmas.to_vec(),
            edges,
        )
        .expect("builtin skeleton is valid")
    }

    /// The 14-joint CrowdPose skeleton.
    pub fn crowdpose14() -> Self {
        let names = [
            "left shoulder",
            "right shoulder",
            "left elbow",
            "right elbow",
            "left wrist",
            "right wrist",
            "left hip",
            "right hip",
            "left knee",
            "right knee",
            "left ankle",
            "right ankle",
            "top of head",
            "neck",
        ];
        let sigmas = [
            0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
            0.079, 0.079,
        ];
        let edges = vec![
            (12, 13),
            (13, 0),
            (13, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (13, 6),
            (13, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (9, 11),
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            sigmas.to_vec(),
            edges,
        )
        .expect("builtin skeleton is valid")
    }
}
