//! Deterministic crowded-scene generator: articulated stick figures with
//! exact annotations and occlusion labels from a pixel-ownership raster.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonSpec;
use crate::types::{BBox, InstanceAnnotation, Keypoint, SceneSample, V_INVISIBLE, V_VISIBLE};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub num_instances_min: usize,
    pub num_instances_max: usize,
    pub overlap_probability: f64,
    pub occlusion_fraction_min: f64,
    pub occlusion_fraction_max: f64,
    /// (H, W) in pixels.
    pub image_size: (usize, usize),
    /// Figure height range as a fraction of the shorter image side.
    pub figure_scale_min: f64,
    pub figure_scale_max: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            num_instances_min: 2,
            num_instances_max: 3,
            overlap_probability: 0.8,
            occlusion_fraction_min: 0.2,
            occlusion_fraction_max: 0.5,
            image_size: (64, 64),
            figure_scale_min: 0.45,
            figure_scale_max: 0.7,
            num_samples: 8,
            seed: 7,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_instances_min > self.num_instances_max {
            return Err(Error::InvalidConfig("num_instances_min > max".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return Err(Error::InvalidConfig("overlap_probability outside [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction_min)
            || !(0.0..=1.0).contains(&self.occlusion_fraction_max)
            || self.occlusion_fraction_min > self.occlusion_fraction_max
        {
            return Err(Error::InvalidConfig("bad occlusion_fraction range".into()));
        }
        if !(self.figure_scale_min > 0.0 && self.figure_scale_min <= self.figure_scale_max) {
            return Err(Error::InvalidConfig("bad figure_scale range".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidConfig("empty image size".into()));
        }
        Ok(())
    }
}

/// Geometry of one rendered figure; joint order follows the synthetic
/// humanoid skeleton.
#[derive(Debug, Clone)]
pub struct Figure {
    pub joints: Vec<(f64, f64)>,
    pub head_radius: f64,
    pub limb_thickness: f64,
    pub marker_radius: f64,
    pub body_color: [f64; 3],
}

const HEAD: usize = 0;
const NECK: usize = 1;
const L_ELBOW: usize = 2;
const R_ELBOW: usize = 3;
const L_HAND: usize = 4;
const R_HAND: usize = 5;
const HIP: usize = 6;
const L_KNEE: usize = 7;
const R_KNEE: usize = 8;
const L_FOOT: usize = 9;
const R_FOOT: usize = 10;

/// Fixed per-joint marker colors, shared across instances so joints stay
/// visually identifiable.
const JOINT_COLORS: [[f64; 3]; 11] = [
    [0.95, 0.25, 0.25],
    [0.95, 0.60, 0.20],
    [0.90, 0.90, 0.25],
    [0.55, 0.85, 0.25],
    [0.25, 0.85, 0.45],
    [0.25, 0.85, 0.85],
    [0.25, 0.55, 0.95],
    [0.45, 0.30, 0.90],
    [0.75, 0.30, 0.90],
    [0.95, 0.35, 0.70],
    [0.60, 0.60, 0.60],
];

const BODY_COLORS: [[f64; 3]; 6] = [
    [0.20, 0.35, 0.60],
    [0.60, 0.25, 0.25],
    [0.25, 0.55, 0.30],
    [0.55, 0.45, 0.20],
    [0.45, 0.25, 0.55],
    [0.20, 0.50, 0.55],
];

impl Figure {
    /// Sample an articulated pose with the hip at `hip`, total height
    /// `height` pixels, and the given torso lean (radians off vertical).
    fn sample(hip: (f64, f64), height: f64, lean: f64, rng: &mut ChaCha8Rng) -> Self {
        let torso = 0.30 * height;
        let upper_arm = 0.16 * height;
        let forearm = 0.15 * height;
        let upper_leg = 0.20 * height;
        let lower_leg = 0.20 * height;
        let head_off = 0.14 * height;

        let up = (lean.sin(), -lean.cos());
        let neck = (hip.0 + torso * up.0, hip.1 + torso * up.1);
        let head = (neck.0 + head_off * up.0, neck.1 + head_off * up.1);

        // Angles measured from straight-down.
        let limb = |origin: (f64, f64), len: f64, angle: f64| {
            (origin.0 + len * angle.sin(), origin.1 + len * angle.cos())
        };
        let la1: f64 = rng.gen_range(0.3..1.3);
        let la2: f64 = la1 + rng.gen_range(-0.5..0.5);
        let ra1: f64 = rng.gen_range(-1.3..-0.3);
        let ra2: f64 = ra1 + rng.gen_range(-0.5..0.5);
        let l_elbow = limb(neck, upper_arm, la1);
        let l_hand = limb(l_elbow, forearm, la2);
        let r_elbow = limb(neck, upper_arm, ra1);
        let r_hand = limb(r_elbow, forearm, ra2);

        let ll1: f64 = rng.gen_range(0.05..0.55);
        let ll2: f64 = ll1 + rng.gen_range(-0.35..0.2);
        let rl1: f64 = rng.gen_range(-0.55..-0.05);
        let rl2: f64 = rl1 + rng.gen_range(-0.2..0.35);
        let l_knee = limb(hip, upper_leg, ll1);
        let l_foot = limb(l_knee, lower_leg, ll2);
        let r_knee = limb(hip, upper_leg, rl1);
        let r_foot = limb(r_knee, lower_leg, rl2);

        let mut joints = vec![(0.0, 0.0); 11];
        joints[HEAD] = head;
        joints[NECK] = neck;
        joints[L_ELBOW] = l_elbow;
        joints[R_ELBOW] = r_elbow;
        joints[L_HAND] = l_hand;
        joints[R_HAND] = r_hand;
        joints[HIP] = hip;
        joints[L_KNEE] = l_knee;
        joints[R_KNEE] = r_knee;
        joints[L_FOOT] = l_foot;
        joints[R_FOOT] = r_foot;

        Figure {
            joints,
            head_radius: 0.10 * height,
            limb_thickness: (0.045 * height).max(1.6),
            marker_radius: (0.028 * height).max(1.2),
            body_color: BODY_COLORS[rng.gen_range(0..BODY_COLORS.len())],
        }
    }

    /// Analytic extent of all primitives, before rasterization.
    fn analytic_bounds(&self, skeleton: &SkeletonSpec) -> (f64, f64, f64, f64) {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut grow = |x: f64, y: f64, r: f64| {
            min_x = min_x.min(x - r);
            min_y = min_y.min(y - r);
            max_x = max_x.max(x + r);
            max_y = max_y.max(y + r);
        };
        for &(a, b) in &skeleton.edges {
            for &j in &[a, b] {
                let (x, y) = self.joints[j];
                grow(x, y, self.limb_thickness / 2.0 + self.marker_radius);
            }
        }
        let (hx, hy) = self.joints[HEAD];
        grow(hx, hy, self.head_radius);
        (min_x, min_y, max_x, max_y)
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Rasterize `figure` into the image and ownership raster. Returns the
/// painted-pixel bbox (exact extent of this figure's own pixels).
fn paint_figure(
    figure: &Figure,
    index: usize,
    skeleton: &SkeletonSpec,
    image: &mut Array3<f64>,
    owner: &mut [Vec<Option<usize>>],
) -> Option<BBox> {
    let (_, h, w) = image.dim();
    let (bx0, by0, bx1, by1) = figure.analytic_bounds(skeleton);
    let x_lo = (bx0.floor().max(0.0)) as usize;
    let y_lo = (by0.floor().max(0.0)) as usize;
    let x_hi = (bx1.ceil().min(w as f64)) as usize;
    let y_hi = (by1.ceil().min(h as f64)) as usize;

    let mut painted: Option<(usize, usize, usize, usize)> = None;
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            let center = (px as f64 + 0.5, py as f64 + 0.5);
            let mut color: Option<[f64; 3]> = None;
            // Limbs.
            let half = figure.limb_thickness / 2.0;
            for &(a, b) in &skeleton.edges {
                if dist_to_segment(center, figure.joints[a], figure.joints[b]) <= half {
                    color = Some(figure.body_color);
                    break;
                }
            }
            // Head disk.
            let (hx, hy) = figure.joints[HEAD];
            if ((center.0 - hx).powi(2) + (center.1 - hy).powi(2)).sqrt() <= figure.head_radius {
                color = Some(figure.body_color);
            }
            // Joint markers on top.
            for (j, &(jx, jy)) in figure.joints.iter().enumerate() {
                if ((center.0 - jx).powi(2) + (center.1 - jy).powi(2)).sqrt()
                    <= figure.marker_radius
                {
                    color = Some(JOINT_COLORS[j]);
                }
            }
            if let Some(c) = color {
                for ch in 0..3 {
                    image[(ch, py, px)] = c[ch];
                }
                owner[py][px] = Some(index);
                painted = Some(match painted {
                    None => (px, py, px, py),
                    Some((x0, y0, x1, y1)) => (x0.min(px), y0.min(py), x1.max(px), y1.max(py)),
                });
            }
        }
    }
    painted.map(|(x0, y0, x1, y1)| BBox {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0 + 1) as f64,
        h: (y1 - y0 + 1) as f64,
    })
}

fn pixel_of(p: (f64, f64), h: usize, w: usize) -> (usize, usize) {
    let x = (p.0.floor() as isize).clamp(0, w as isize - 1) as usize;
    let y = (p.1.floor() as isize).clamp(0, h as isize - 1) as usize;
    (x, y)
}

/// Per-index derived seed; keeps samples independent and reproducible.
fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add((index as u64).wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const PLACEMENT_RETRIES: usize = 60;

/// Joints an occluder may stamp over. Torso-adjacent joints (neck, hip) sit
/// near the keypoint centroid; covering one would collapse the two figures'
/// center points into the same heatmap cell.
const OCCLUSION_TARGETS: [usize; 9] = [
    HEAD, L_ELBOW, R_ELBOW, L_HAND, R_HAND, L_KNEE, R_KNEE, L_FOOT, R_FOOT,
];

/// Minimum distance between keypoint centroids, as a fraction of the short
/// image side. Keeps center-map peaks at least two heatmap cells apart.
const MIN_CENTER_SEPARATION: f64 = 0.16;

/// Generate one scene, returning the figures for diagnostics.
pub fn generate_synthetic_scene_detailed(
    config: &SyntheticSceneConfig,
    index: usize,
) -> Result<(SceneSample, Vec<Figure>)> {
    config.validate()?;
    let skeleton = SkeletonSpec::synthetic_humanoid();
    let (h, w) = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index));

    // Soft background gradient.
    let base: f64 = rng.gen_range(0.82..0.92);
    let tilt: f64 = rng.gen_range(-0.06..0.06);
    let mut image = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = base + tilt * (y as f64 / h as f64 - 0.5);
            for c in 0..3 {
                image[(c, y, x)] = v;
            }
        }
    }
    let mut owner: Vec<Vec<Option<usize>>> = vec![vec![None; w]; h];

    let n = rng.gen_range(config.num_instances_min..=config.num_instances_max);
    let short_side = h.min(w) as f64;
    let mut figures: Vec<Figure> = Vec::with_capacity(n);
    let mut bboxes: Vec<BBox> = Vec::with_capacity(n);

    for i in 0..n {
        let force_overlap = i > 0 && rng.gen_range(0.0..1.0) < config.overlap_probability;

        let mut placed = false;
        for attempt in 0..PLACEMENT_RETRIES {
            let shrink = 1.0 - 0.5 * attempt as f64 / PLACEMENT_RETRIES as f64;
            let height =
                rng.gen_range(config.figure_scale_min..=config.figure_scale_max) * short_side * shrink;
            // Forced overlap stamps the new torso over a chosen keypoint of
            // an earlier figure (re-chosen per attempt so edge keypoints do
            // not dead-end the placement), guaranteeing coverage below.
            let target: Option<(f64, f64)> = if force_overlap {
                let victim = rng.gen_range(0..i);
                let joint = OCCLUSION_TARGETS[rng.gen_range(0..OCCLUSION_TARGETS.len())];
                Some(figures[victim].joints[joint])
            } else {
                None
            };
            let figure = match &target {
                Some(kp) => {
                    // Occluder grows with the requested severity; the torso
                    // segment passes through the victim keypoint.
                    let severity = rng
                        .gen_range(config.occlusion_fraction_min..=config.occlusion_fraction_max);
                    let height = height * (0.9 + 0.6 * severity);
                    let lean: f64 = rng.gen_range(-0.2..0.2);
                    let torso = 0.30 * height;
                    let t: f64 = rng.gen_range(0.15..0.85);
                    let hip = (
                        kp.0 - t * torso * lean.sin(),
                        kp.1 + t * torso * lean.cos(),
                    );
                    Figure::sample(hip, height, lean, &mut rng)
                }
                None => {
                    let margin = 0.18 * height;
                    let hip = (
                        rng.gen_range(margin.min(w as f64 / 2.0)..(w as f64 - margin).max(w as f64 / 2.0 + 1.0)),
                        rng.gen_range((0.45 * h as f64)..(h as f64 - 0.45 * height).max(0.46 * h as f64)),
                    );
                    let lean: f64 = rng.gen_range(-0.25..0.25);
                    Figure::sample(hip, height, lean, &mut rng)
                }
            };

            let (bx0, by0, bx1, by1) = figure.analytic_bounds(&skeleton);
            if bx0 < 0.0 || by0 < 0.0 || bx1 > w as f64 || by1 > h as f64 {
                continue;
            }
            // Keep keypoint centroids separable on the center heatmap.
            let centroid = {
                let (mut cx, mut cy) = (0.0, 0.0);
                for &(jx, jy) in &figure.joints {
                    cx += jx;
                    cy += jy;
                }
                let k = figure.joints.len() as f64;
                (cx / k, cy / k)
            };
            let min_sep = MIN_CENTER_SEPARATION * short_side;
            let too_close = figures.iter().any(|f| {
                let (mut cx, mut cy) = (0.0, 0.0);
                for &(jx, jy) in &f.joints {
                    cx += jx;
                    cy += jy;
                }
                let k = f.joints.len() as f64;
                let d = ((centroid.0 - cx / k).powi(2) + (centroid.1 - cy / k).powi(2)).sqrt();
                d < min_sep
            });
            if too_close {
                continue;
            }
            // Free placement avoids bbox intersections when possible.
            if target.is_none() && attempt < PLACEMENT_RETRIES / 2 {
                let candidate = BBox {
                    x: bx0,
                    y: by0,
                    w: bx1 - bx0,
                    h: by1 - by0,
                };
                if bboxes.iter().any(|b| b.intersects(&candidate)) {
                    continue;
                }
            }
            if let Some(kp) = &target {
                // Verify coverage on a scratch raster before committing.
                let mut probe_image = image.clone();
                let mut probe_owner = owner.clone();
                let Some(bbox) = paint_figure(&figure, i, &skeleton, &mut probe_image, &mut probe_owner)
                else {
                    continue;
                };
                let (px, py) = pixel_of(*kp, h, w);
                if probe_owner[py][px] != Some(i) {
                    continue;
                }
                image = probe_image;
                owner = probe_owner;
                figures.push(figure);
                bboxes.push(bbox);
            } else {
                let Some(bbox) = paint_figure(&figure, i, &skeleton, &mut image, &mut owner) else {
                    continue;
                };
                figures.push(figure);
                bboxes.push(bbox);
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::FigurePlacement {
                index: i,
                retries: PLACEMENT_RETRIES,
            });
        }
    }

    // Visibility from the ownership raster: a keypoint is visible iff its
    // pixel still belongs to its own figure after all painting.
    let mut instances = Vec::with_capacity(n);
    for (i, figure) in figures.iter().enumerate() {
        let keypoints: Vec<Keypoint> = figure
            .joints
            .iter()
            .map(|&(x, y)| {
                let (px, py) = pixel_of((x, y), h, w);
                let v = if owner[py][px] == Some(i) {
                    V_VISIBLE
                } else {
                    V_INVISIBLE
                };
                Keypoint { x, y, v }
            })
            .collect();
        let cx = keypoints.iter().map(|k| k.x).sum::<f64>() / keypoints.len() as f64;
        let cy = keypoints.iter().map(|k| k.y).sum::<f64>() / keypoints.len() as f64;
        let bbox = bboxes[i];
        instances.push(InstanceAnnotation {
            keypoints,
            bbox,
            center: (
                cx.clamp(bbox.x, bbox.x + bbox.w),
                cy.clamp(bbox.y, bbox.y + bbox.h),
            ),
        });
    }

    let sample = SceneSample {
        image,
        instances,
        image_size: (h, w),
        sample_id: format!("synthetic-{index:05}"),
    };
    Ok((sample, figures))
}

/// Deterministic scene for (config.seed, index).
pub fn generate_synthetic_scene(config: &SyntheticSceneConfig, index: usize) -> Result<SceneSample> {
    generate_synthetic_scene_detailed(config, index).map(|(sample, _)| sample)
}

/// Generate `config.num_samples` scenes as a dataset.
pub fn generate_synthetic_dataset(config: &SyntheticSceneConfig) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(config.num_samples);
    for index in 0..config.num_samples {
        samples.push(generate_synthetic_scene(config, index)?);
    }
    Dataset::new(samples, SkeletonSpec::synthetic_humanoid(), DatasetSource::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config() -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            num_instances_min: 2,
            num_instances_max: 3,
            overlap_probability: 0.7,
            image_size: (64, 64),
            num_samples: 4,
            seed: 11,
            ..SyntheticSceneConfig::default()
        }
    }

    #[test]
    fn single_unoccluded_figure_is_fully_visible() {
        let config = SyntheticSceneConfig {
            num_instances_min: 1,
            num_instances_max: 1,
            overlap_probability: 0.0,
            ..test_config()
        };
        let sample = generate_synthetic_scene(&config, 0).unwrap();
        assert_eq!(sample.instances.len(), 1);
        assert!(sample.instances[0].keypoints.iter().all(|k| k.v == V_VISIBLE));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = test_config();
        let a = generate_synthetic_scene(&config, 3).unwrap();
        let b = generate_synthetic_scene(&config, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.instances, b.instances);
        let c = generate_synthetic_scene(&config, 4).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn forced_overlap_occludes_a_keypoint_when_bboxes_intersect() {
        let config = SyntheticSceneConfig {
            num_instances_min: 2,
            num_instances_max: 2,
            overlap_probability: 1.0,
            ..test_config()
        };
        for index in 0..12 {
            let sample = generate_synthetic_scene(&config, index).unwrap();
            let [a, b] = &sample.instances[..] else {
                panic!("expected two instances")
            };
            // Geometric intersection oracle.
            if a.bbox.intersects(&b.bbox) {
                let occluded = a.keypoints.iter().filter(|k| k.v == V_INVISIBLE).count();
                assert!(occluded >= 1, "index {index}: intersecting but no occlusion");
            }
        }
    }

    #[test]
    fn stored_bbox_matches_rerendered_extent() {
        let config = test_config();
        let skeleton = SkeletonSpec::synthetic_humanoid();
        for index in 0..4 {
            let (sample, figures) = generate_synthetic_scene_detailed(&config, index).unwrap();
            let (h, w) = sample.image_size;
            for (i, figure) in figures.iter().enumerate() {
                // Re-render the figure alone and measure its extent.
                let mut image = Array3::<f64>::zeros((3, h, w));
                let mut owner = vec![vec![None; w]; h];
                let bbox = paint_figure(figure, 0, &skeleton, &mut image, &mut owner).unwrap();
                let stored = sample.instances[i].bbox;
                assert!((bbox.x - stored.x).abs() <= 1.0, "instance {i}");
                assert!((bbox.y - stored.y).abs() <= 1.0);
                assert!((bbox.w - stored.w).abs() <= 1.0);
                assert!((bbox.h - stored.h).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn annotations_validate_against_scene() {
        let config = test_config();
        let skeleton = SkeletonSpec::synthetic_humanoid();
        for index in 0..4 {
            let sample = generate_synthetic_scene(&config, index).unwrap();
            sample.validate(&skeleton, 4).unwrap();
            for inst in &sample.instances {
                assert!(inst.bbox.contains(inst.center.0, inst.center.1));
            }
        }
    }

    #[test]
    fn dataset_has_unique_ids_and_shared_skeleton() {
        let dataset = generate_synthetic_dataset(&test_config()).unwrap();
        assert_eq!(dataset.len(), 4);
        assert_eq!(dataset.skeleton.num_joints(), 11);
    }

    #[test]
    fn rejects_invalid_config() {
        let mut config = test_config();
        config.num_instances_min = 5;
        config.num_instances_max = 2;
        assert!(generate_synthetic_scene(&config, 0).is_err());
    }
}
