use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonSpec;

/// COCO-style visibility flag.
pub const V_UNLABELED: u8 = 0;
pub const V_INVISIBLE: u8 = 1;
pub const V_VISIBLE: u8 = 2;

/// One keypoint in image pixels with its visibility flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn unlabeled() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            v: V_UNLABELED,
        }
    }
}

/// Axis-aligned box in pixels, xywh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Per-person ground truth: keypoints, box, and center point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub keypoints: Vec<Keypoint>,
    pub bbox: BBox,
    pub center: (f64, f64),
}

impl InstanceAnnotation {
    pub fn validate(&self, skeleton: &SkeletonSpec, image_size: (usize, usize)) -> Result<()> {
        let (h, w) = image_size;
        if self.keypoints.len() != skeleton.num_joints() {
            return Err(Error::ShapeMismatch {
                context: "InstanceAnnotation.keypoints".into(),
                expected: format!("{}", skeleton.num_joints()),
                actual: format!("{}", self.keypoints.len()),
            });
        }
        if !(self.bbox.w > 0.0 && self.bbox.h > 0.0) {
            return Err(Error::Dataset("bbox with non-positive extent".into()));
        }
        if !self.bbox.contains(self.center.0, self.center.1) {
            return Err(Error::Dataset("center outside bbox".into()));
        }
        for kp in &self.keypoints {
            if kp.v > 0 && !(kp.x.is_finite() && kp.y.is_finite()) {
                return Err(Error::Dataset("labeled keypoint with non-finite coords".into()));
            }
            if kp.v > 0 && !(kp.x >= 0.0 && kp.x <= w as f64 && kp.y >= 0.0 && kp.y <= h as f64) {
                return Err(Error::Dataset(format!(
                    "keypoint ({}, {}) outside {}x{} image",
                    kp.x, kp.y, w, h
                )));
            }
        }
        Ok(())
    }

    /// Count of keypoints with v == 2.
    pub fn num_visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k.v == V_VISIBLE).count()
    }

    /// Count of keypoints with v > 0.
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.v > 0).count()
    }
}

/// One image plus its per-person annotations; the unit of training and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSample {
    /// 3xHxW, values in [0,1].
    pub image: Array3<f64>,
    pub instances: Vec<InstanceAnnotation>,
    /// (H, W) in pixels.
    pub image_size: (usize, usize),
    pub sample_id: String,
}

impl SceneSample {
    pub fn validate(&self, skeleton: &SkeletonSpec, stride: usize) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Dataset("empty image extent".into()));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Dataset(format!(
                "image size {h}x{w} not divisible by stride {stride}"
            )));
        }
        if self.image.shape() != [3, h, w] {
            return Err(Error::ShapeMismatch {
                context: format!("SceneSample {}", self.sample_id),
                expected: format!("3x{h}x{w}"),
                actual: format!("{:?}", self.image.shape()),
            });
        }
        for inst in &self.instances {
            inst.validate(skeleton, self.image_size)?;
        }
        Ok(())
    }
}

/// Per-joint spatial probability maps at `1/stride` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// m x H' x W', values in [0,1].
    pub values: Array3<f64>,
    pub stride: usize,
}

/// Image pixel -> heatmap coordinate under the center-of-pixel convention.
///
/// Inverse of `heatmap_to_image_coord`; decoding maps back with
/// `(hm + 0.5) * stride`.
pub fn image_to_heatmap_coord(p: f64, stride: usize) -> f64 {
    p / stride as f64 - 0.5
}

/// Heatmap coordinate -> image pixel (center-of-pixel convention).
pub fn heatmap_to_image_coord(p: f64, stride: usize) -> f64 {
    (p + 0.5) * stride as f64
}

/// Render ground-truth heatmaps for one instance.
///
/// Each joint with v > 0 becomes an unnormalized Gaussian with peak exactly
/// 1.0 at its rounded heatmap location; joints with v == 0 render an all-zero
/// channel. Keypoint coordinates must already be in heatmap scale. Joints
/// whose rounded location falls outside the extent render zero and set the
/// `clipped` flag on the result.
pub fn render_gt_heatmaps(
    instance_hm_keypoints: &[(f64, f64, u8)],
    out_size: (usize, usize),
    sigma: f64,
    stride: usize,
) -> (Heatmap, bool) {
    assert!(sigma > 0.0, "sigma must be positive");
    let (hh, ww) = out_size;
    assert!(hh > 0 && ww > 0, "output size must be positive");
    let m = instance_hm_keypoints.len();
    let mut values = Array3::<f64>::zeros((m, hh, ww));
    let mut clipped = false;
    let denom = 2.0 * sigma * sigma;
    for (j, &(x, y, v)) in instance_hm_keypoints.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let cx = x.round();
        let cy = y.round();
        if cx < 0.0 || cy < 0.0 || cx >= ww as f64 || cy >= hh as f64 {
            clipped = true;
            log::warn!("joint {j} at ({x:.1},{y:.1}) outside {hh}x{ww} heatmap; channel left zero");
            continue;
        }
        // Gaussian support truncated at 3 sigma; the peak cell is exact 1.0.
        let radius = (3.0 * sigma).ceil() as i64;
        let (icx, icy) = (cx as i64, cy as i64);
        let mut channel = values.index_axis_mut(Axis(0), j);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (px, py) = (icx + dx, icy + dy);
                if px < 0 || py < 0 || px >= ww as i64 || py >= hh as i64 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                let val = (-d2 / denom).exp();
                let cell = &mut channel[(py as usize, px as usize)];
                if val > *cell {
                    *cell = val;
                }
            }
        }
    }
    (Heatmap { values, stride }, clipped)
}

/// Merge per-instance heatmaps into one shared map by element-wise maximum.
pub fn merge_heatmaps_max(maps: &[Heatmap]) -> Option<Heatmap> {
    let first = maps.first()?;
    let mut values = first.values.clone();
    for hm in &maps[1..] {
        ndarray::Zip::from(&mut values).and(&hm.values).for_each(|a, &b| {
            if b > *a {
                *a = b;
            }
        });
    }
    Some(Heatmap {
        values,
        stride: first.stride,
    })
}
