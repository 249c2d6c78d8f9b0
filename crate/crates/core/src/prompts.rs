//! Instance attributes (location / depth / occlusion) and prompt rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SkeletonSpec;
use crate::types::{BBox, Keypoint, V_VISIBLE};

pub const LOCATION_LABELS: [[&str; 3]; 3] = [
    ["top left", "top center", "top right"],
    ["middle left", "center", "middle right"],
    ["bottom left", "bottom center", "bottom right"],
];

pub const DEPTH_LABELS: [&str; 3] = ["far", "close", "giant"];
pub const OCCLUSION_LABELS: [&str; 2] = ["occluded", "fully visible"];

/// Closed-vocabulary attribute triple for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptAttributes {
    pub location_label: &'static str,
    pub depth_label: &'static str,
    pub occlusion_label: &'static str,
}

/// Template plus attribute thresholds; all config-exposed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplateConfig {
    pub template: String,
    pub depth_far_threshold: f64,
    pub depth_giant_threshold: f64,
    pub occlusion_visible_fraction: f64,
}

impl Default for PromptTemplateConfig {
    fn default() -> Self {
        Self {
            template: "A {occlusion} person at the {location} of the image, {depth} from the camera."
                .into(),
            depth_far_threshold: 0.3,
            depth_giant_threshold: 0.7,
            occlusion_visible_fraction: 0.7,
        }
    }
}

impl PromptTemplateConfig {
    /// Validated at startup, not at render time.
    pub fn validate(&self) -> Result<()> {
        for ph in ["{occlusion}", "{location}", "{depth}"] {
            if self.template.matches(ph).count() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "prompt template must contain {ph} exactly once"
                )));
            }
        }
        if !(self.depth_far_threshold > 0.0
            && self.depth_far_threshold < self.depth_giant_threshold)
        {
            return Err(Error::InvalidConfig(
                "depth thresholds must satisfy 0 < far < giant".into(),
            ));
        }
        if !(self.occlusion_visible_fraction > 0.0 && self.occlusion_visible_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "occlusion_visible_fraction must be in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// 3x3 grid cell of the instance center. Boundary points belong to the
/// higher-index cell; centers outside the image are clamped first.
pub fn compute_location_label(center: (f64, f64), image_size: (usize, usize)) -> &'static str {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let x = center.0.clamp(0.0, w);
    let y = center.1.clamp(0.0, h);
    let col = ((3.0 * x / w).floor() as usize).min(2);
    let row = ((3.0 * y / h).floor() as usize).min(2);
    LOCATION_LABELS[row][col]
}

/// Pseudo-depth from the bbox-to-image size ratio r = max(w/W, h/H).
pub fn compute_depth_label(
    bbox: &BBox,
    image_size: (usize, usize),
    thresholds: (f64, f64),
) -> &'static str {
    let (t_far, t_giant) = thresholds;
    let r = (bbox.w / image_size.1 as f64).max(bbox.h / image_size.0 as f64);
    if r < t_far {
        DEPTH_LABELS[0]
    } else if r < t_giant {
        DEPTH_LABELS[1]
    } else {
        DEPTH_LABELS[2]
    }
}

/// Occlusion from the visible fraction among labeled keypoints.
pub fn compute_occlusion_label(keypoints: &[Keypoint], visible_fraction_threshold: f64) -> &'static str {
    let labeled = keypoints.iter().filter(|k| k.v > 0).count();
    if labeled == 0 {
        return OCCLUSION_LABELS[0];
    }
    let visible = keypoints.iter().filter(|k| k.v == V_VISIBLE).count();
    if (visible as f64) / (labeled as f64) < visible_fraction_threshold {
        OCCLUSION_LABELS[0]
    } else {
        OCCLUSION_LABELS[1]
    }
}

/// All three attributes for one instance.
pub fn compute_attributes(
    center: (f64, f64),
    bbox: &BBox,
    keypoints: &[Keypoint],
    image_size: (usize, usize),
    config: &PromptTemplateConfig,
) -> PromptAttributes {
    PromptAttributes {
        location_label: compute_location_label(center, image_size),
        depth_label: compute_depth_label(
            bbox,
            image_size,
            (config.depth_far_threshold, config.depth_giant_threshold),
        ),
        occlusion_label: compute_occlusion_label(keypoints, config.occlusion_visible_fraction),
    }
}

/// Deterministic template substitution.
pub fn render_instance_prompt(attrs: &PromptAttributes, config: &PromptTemplateConfig) -> String {
    config
        .template
        .replace("{occlusion}", attrs.occlusion_label)
        .replace("{location}", attrs.location_label)
        .replace("{depth}", attrs.depth_label)
}

/// One prompt text per joint: the joint names verbatim, order preserved.
pub fn joint_prompt_vocabulary(skeleton: &SkeletonSpec) -> Vec<String> {
    skeleton.joint_names.clone()
}

/// Every attribute combination, rendered. 9 x 3 x 2 = 54 strings.
pub fn all_instance_prompts(config: &PromptTemplateConfig) -> Vec<String> {
    let mut prompts = Vec::with_capacity(54);
    for row in &LOCATION_LABELS {
        for loc in row {
            for depth in &DEPTH_LABELS {
                for occ in &OCCLUSION_LABELS {
                    prompts.push(render_instance_prompt(
                        &PromptAttributes {
                            location_label: loc,
                            depth_label: depth,
                            occlusion_label: occ,
                        },
                        config,
                    ));
                }
            }
        }
    }
    prompts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(v: u8) -> Keypoint {
        Keypoint { x: 1.0, y: 1.0, v }
    }

    #[test]
    fn location_center_and_corners() {
        let size = (90, 120);
        assert_eq!(compute_location_label((60.0, 45.0), size), "center");
        assert_eq!(compute_location_label((12.0, 9.0), size), "top left");
        assert_eq!(compute_location_label((119.0, 89.0), size), "bottom right");
    }

    #[test]
    fn location_boundary_goes_to_higher_cell() {
        // x exactly on W/3 belongs to the middle column.
        let size = (90, 120);
        assert_eq!(compute_location_label((40.0, 45.0), size), "center");
        assert_eq!(compute_location_label((80.0, 45.0), size), "middle right");
        assert_eq!(compute_location_label((40.0, 30.0), size), "center");
    }

    #[test]
    fn location_clamps_outside_points() {
        let size = (90, 120);
        assert_eq!(compute_location_label((-5.0, -5.0), size), "top left");
        assert_eq!(compute_location_label((500.0, 500.0), size), "bottom right");
    }

    #[test]
    fn depth_hand_cases() {
        let size = (100, 100);
        let full = BBox { x: 0.0, y: 0.0, w: 100.0, h: 100.0 };
        assert_eq!(compute_depth_label(&full, size, (0.3, 0.7)), "giant");
        let small = BBox { x: 0.0, y: 0.0, w: 10.0, h: 20.0 };
        assert_eq!(compute_depth_label(&small, size, (0.3, 0.7)), "far");
        let mid = BBox { x: 0.0, y: 0.0, w: 50.0, h: 30.0 };
        assert_eq!(compute_depth_label(&mid, size, (0.3, 0.7)), "close");
    }

    #[test]
    fn occlusion_hand_cases() {
        let all_visible: Vec<Keypoint> = (0..5).map(|_| kp(2)).collect();
        assert_eq!(compute_occlusion_label(&all_visible, 0.7), "fully visible");
        let all_hidden: Vec<Keypoint> = (0..5).map(|_| kp(1)).collect();
        assert_eq!(compute_occlusion_label(&all_hidden, 0.7), "occluded");
        // 10 labeled, 6 visible: 0.6 < 0.7.
        let mut mixed: Vec<Keypoint> = (0..6).map(|_| kp(2)).collect();
        mixed.extend((0..4).map(|_| kp(1)));
        assert_eq!(compute_occlusion_label(&mixed, 0.7), "occluded");
        let none: Vec<Keypoint> = (0..5).map(|_| kp(0)).collect();
        assert_eq!(compute_occlusion_label(&none, 0.7), "occluded");
    }

    #[test]
    fn prompt_rendering_matches_template() {
        let config = PromptTemplateConfig::default();
        let attrs = PromptAttributes {
            location_label: "center",
            depth_label: "close",
            occlusion_label: "fully visible",
        };
        assert_eq!(
            render_instance_prompt(&attrs, &config),
            "A fully visible person at the center of the image, close from the camera."
        );
        let attrs = PromptAttributes {
            location_label: "top left",
            depth_label: "far",
            occlusion_label: "occluded",
        };
        assert_eq!(
            render_instance_prompt(&attrs, &config),
            "A occluded person at the top left of the image, far from the camera."
        );
    }

    #[test]
    fn template_validation_rejects_missing_placeholder() {
        let mut config = PromptTemplateConfig::default();
        config.template = "A person at the {location}, {depth}.".into();
        assert!(config.validate().is_err());
        let mut config = PromptTemplateConfig::default();
        config.template = "{occlusion} {occlusion} {location} {depth}".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn joint_vocabulary_is_names_verbatim() {
        let sk = SkeletonSpec::new(vec!["nose".into()], vec![0.1], vec![]).unwrap();
        assert_eq!(joint_prompt_vocabulary(&sk), vec!["nose".to_string()]);
        let coco = SkeletonSpec::coco17();
        let vocab = joint_prompt_vocabulary(&coco);
        assert_eq!(vocab.len(), 17);
        assert_eq!(vocab[0], "nose");
        assert_eq!(joint_prompt_vocabulary(&SkeletonSpec::crowdpose14()).len(), 14);
    }

    #[test]
    fn all_54_prompts_are_distinct() {
        let prompts = all_instance_prompts(&PromptTemplateConfig::default());
        assert_eq!(prompts.len(), 54);
        let unique: std::collections::HashSet<_> = prompts.iter().collect();
        assert_eq!(unique.len(), 54);
    }

    proptest! {
        #[test]
        fn location_partitions_the_image(x in 0.0f64..200.0, y in 0.0f64..100.0) {
            let label = compute_location_label((x, y), (100, 200));
            let found = LOCATION_LABELS.iter().flatten().filter(|&&l| l == label).count();
            prop_assert_eq!(found, 1);
        }

        #[test]
        fn depth_is_monotone_in_ratio(w1 in 1.0f64..200.0, w2 in 1.0f64..200.0) {
            let size = (200, 200);
            let rank = |label: &str| DEPTH_LABELS.iter().position(|&d| d == label).unwrap();
            let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
            let a = compute_depth_label(&BBox { x: 0.0, y: 0.0, w: lo, h: 1.0 }, size, (0.3, 0.7));
            let b = compute_depth_label(&BBox { x: 0.0, y: 0.0, w: hi, h: 1.0 }, size, (0.3, 0.7));
            prop_assert!(rank(b) >= rank(a));
        }
    }
}
