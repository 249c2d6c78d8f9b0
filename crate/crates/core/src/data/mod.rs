//! Dataset construction: synthetic crowded scenes, COCO-format ingestion,
//! and training-time augmentation.

pub mod augment;
pub mod coco;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonSpec;
use crate::types::SceneSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    CocoJson,
}

/// Samples sharing one skeleton.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub skeleton: SkeletonSpec,
    pub source: DatasetSource,
}

impl Dataset {
    pub fn new(
        samples: Vec<SceneSample>,
        skeleton: SkeletonSpec,
        source: DatasetSource,
    ) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for sample in &samples {
            if !ids.insert(sample.sample_id.clone()) {
                return Err(Error::Dataset(format!(
                    "duplicate sample_id {}",
                    sample.sample_id
                )));
            }
            for inst in &sample.instances {
                if inst.keypoints.len() != skeleton.num_joints() {
                    return Err(Error::Dataset(format!(
                        "sample {} has {}-joint instances but the skeleton has {}",
                        sample.sample_id,
                        inst.keypoints.len(),
                        skeleton.num_joints()
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            skeleton,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
