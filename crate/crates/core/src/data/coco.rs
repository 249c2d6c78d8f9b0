//! COCO keypoint JSON ingestion and export.
//!
//! Reads the standard fields ("images", "annotations" with flat keypoint
//! triples, xywh "bbox", "num_keypoints", "categories") and writes the same
//! schema plus PNG images, so synthetic data round-trips through the loader.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonSpec;
use crate::types::{BBox, InstanceAnnotation, Keypoint, SceneSample, V_VISIBLE};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default = "default_category")]
    category_id: u64,
    keypoints: Vec<f64>,
    num_keypoints: usize,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

fn default_category() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    keypoints: Vec<String>,
    #[serde(default)]
    skeleton: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoJson {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn load_image_pixels(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Parse one annotation into an instance. `num_keypoints == 0` annotations
/// are dropped by the caller before this point.
fn parse_instance(
    ann: &CocoAnnotation,
    skeleton: &SkeletonSpec,
    image: &CocoImage,
) -> Result<InstanceAnnotation> {
    let m = skeleton.num_joints();
    let record = format!("annotation {}", ann.id);
    if ann.keypoints.len() != 3 * m {
        return Err(Error::AnnotationParse {
            record,
            reason: format!(
                "keypoint array has {} values, skeleton wants {}",
                ann.keypoints.len(),
                3 * m
            ),
        });
    }
    let mut keypoints = Vec::with_capacity(m);
    for j in 0..m {
        let (x, y, v) = (
            ann.keypoints[3 * j],
            ann.keypoints[3 * j + 1],
            ann.keypoints[3 * j + 2],
        );
        if !(x.is_finite() && y.is_finite() && v.is_finite()) {
            return Err(Error::AnnotationParse {
                record,
                reason: format!("non-finite keypoint {j}"),
            });
        }
        let v = (v as u8).min(2);
        let x = if v > 0 { x.clamp(0.0, image.width as f64) } else { x };
        let y = if v > 0 { y.clamp(0.0, image.height as f64) } else { y };
        keypoints.push(Keypoint { x, y, v });
    }
    let [bx, by, bw, bh] = ann.bbox;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::AnnotationParse {
            record,
            reason: format!("bbox {:?} has non-positive extent", ann.bbox),
        });
    }
    // Clamp the box to the image extent.
    let x0 = bx.clamp(0.0, image.width as f64);
    let y0 = by.clamp(0.0, image.height as f64);
    let x1 = (bx + bw).clamp(0.0, image.width as f64);
    let y1 = (by + bh).clamp(0.0, image.height as f64);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::AnnotationParse {
            record,
            reason: "bbox entirely outside the image".into(),
        });
    }
    let bbox = BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    };

    // Center: centroid of visible keypoints, bbox center as the fallback.
    let visible: Vec<&Keypoint> = keypoints.iter().filter(|k| k.v == V_VISIBLE).collect();
    let center = if visible.is_empty() {
        (bbox.x + bbox.w / 2.0, bbox.y + bbox.h / 2.0)
    } else {
        let cx = visible.iter().map(|k| k.x).sum::<f64>() / visible.len() as f64;
        let cy = visible.iter().map(|k| k.y).sum::<f64>() / visible.len() as f64;
        (
            cx.clamp(bbox.x, bbox.x + bbox.w),
            cy.clamp(bbox.y, bbox.y + bbox.h),
        )
    };
    Ok(InstanceAnnotation {
        keypoints,
        bbox,
        center,
    })
}

/// Load a COCO keypoint dataset. One SceneSample per image, in file order;
/// annotations with `num_keypoints == 0` are dropped.
pub fn load_coco_keypoints(
    annotation_path: &Path,
    image_root: &Path,
    skeleton: &SkeletonSpec,
) -> Result<Dataset> {
    let raw = std::fs::read_to_string(annotation_path).map_err(|e| {
        Error::Dataset(format!("reading {}: {e}", annotation_path.display()))
    })?;
    let json: CocoJson = serde_json::from_str(&raw).map_err(|e| Error::AnnotationParse {
        record: annotation_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let mut samples = Vec::with_capacity(json.images.len());
    for img in &json.images {
        let pixels = load_image_pixels(&image_root.join(&img.file_name))?;
        if pixels.shape() != [3, img.height, img.width] {
            return Err(Error::AnnotationParse {
                record: format!("image {}", img.id),
                reason: format!(
                    "file is {}x{} but the record says {}x{}",
                    pixels.shape()[1],
                    pixels.shape()[2],
                    img.height,
                    img.width
                ),
            });
        }
        let mut instances = Vec::new();
        for ann in json.annotations.iter().filter(|a| a.image_id == img.id) {
            if ann.num_keypoints == 0 {
                continue;
            }
            instances.push(parse_instance(ann, skeleton, img)?);
        }
        samples.push(SceneSample {
            image: pixels,
            instances,
            image_size: (img.height, img.width),
            sample_id: format!("coco-{}", img.id),
        });
    }
    Dataset::new(samples, skeleton.clone(), DatasetSource::CocoJson)
}

/// Write a dataset as COCO JSON plus PNG images under `dir`.
pub fn export_coco(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann_id = 1u64;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let (h, w) = sample.image_size;
        let file_name = format!("images/{}.png", sample.sample_id);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, pixel) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                pixel.0[c] =
                    (sample.image[(c, y as usize, x as usize)] * 255.0).round().clamp(0.0, 255.0)
                        as u8;
            }
        }
        buf.save(dir.join(&file_name))?;
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name,
            width: w,
            height: h,
        });
        for inst in &sample.instances {
            let mut keypoints = Vec::with_capacity(3 * inst.keypoints.len());
            for kp in &inst.keypoints {
                keypoints.extend([kp.x, kp.y, kp.v as f64]);
            }
            annotations.push(CocoAnnotation {
                id: next_ann_id,
                image_id,
                category_id: 1,
                keypoints,
                num_keypoints: inst.num_labeled(),
                bbox: [inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h],
                area: inst.bbox.area(),
                iscrowd: 0,
            });
            next_ann_id += 1;
        }
    }
    let json = CocoJson {
        images,
        annotations,
        categories: vec![CocoCategory {
            id: 1,
            name: "person".into(),
            keypoints: dataset.skeleton.joint_names.clone(),
            skeleton: dataset
                .skeleton
                .edges
                .iter()
                .map(|&(a, b)| [a, b])
                .collect(),
        }],
    };
    std::fs::write(
        dir.join("annotations.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic_dataset, SyntheticSceneConfig};

    #[test]
    fn synthetic_round_trips_through_coco_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = SyntheticSceneConfig {
            num_samples: 2,
            seed: 9,
            ..SyntheticSceneConfig::default()
        };
        let dataset = generate_synthetic_dataset(&config).unwrap();
        export_coco(&dataset, dir.path()).unwrap();
        let loaded = load_coco_keypoints(
            &dir.path().join("annotations.json"),
            dir.path(),
            &dataset.skeleton,
        )
        .unwrap();
        assert_eq!(loaded.len(), dataset.len());
        for (a, b) in loaded.samples.iter().zip(&dataset.samples) {
            assert_eq!(a.image_size, b.image_size);
            assert_eq!(a.instances.len(), b.instances.len());
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                for (ka, kb) in ia.keypoints.iter().zip(&ib.keypoints) {
                    assert!((ka.x - kb.x).abs() < 1e-9);
                    assert!((ka.y - kb.y).abs() < 1e-9);
                    assert_eq!(ka.v, kb.v);
                }
                assert!((ia.bbox.x - ib.bbox.x).abs() < 1e-9);
            }
            // PNG is 8-bit; pixels agree within quantization.
            let diff = (&a.image - &b.image).mapv(f64::abs);
            assert!(diff.iter().cloned().fold(0.0, f64::max) <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn drops_empty_annotations_and_clamps_bbox_center_fallback() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        image::RgbImage::new(32, 32)
            .save(dir.path().join("images/img.png"))
            .unwrap();
        let skeleton = SkeletonSpec::new(
            vec!["a".into(), "b".into()],
            vec![0.1, 0.1],
            vec![(0, 1)],
        )
        .unwrap();
        let json = serde_json::json!({
            "images": [{"id": 1, "file_name": "images/img.png", "width": 32, "height": 32}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "keypoints": [0.0,0.0,0.0, 0.0,0.0,0.0], "num_keypoints": 0,
                 "bbox": [1.0,1.0,5.0,5.0]},
                {"id": 2, "image_id": 1, "category_id": 1,
                 "keypoints": [3.0,4.0,1.0, 0.0,0.0,0.0], "num_keypoints": 1,
                 "bbox": [10.0,20.0,30.0,40.0]}
            ],
            "categories": [{"id": 1, "name": "person"}]
        });
        std::fs::write(
            dir.path().join("ann.json"),
            serde_json::to_string(&json).unwrap(),
        )
        .unwrap();
        let dataset =
            load_coco_keypoints(&dir.path().join("ann.json"), dir.path(), &skeleton).unwrap();
        assert_eq!(dataset.samples[0].instances.len(), 1);
        // No v=2 keypoints: center falls back to the center of the clamped
        // bbox; (10,20,30,40) clipped to the 32x32 image is (10,20,22,12).
        let inst = &dataset.samples[0].instances[0];
        assert!((inst.center.0 - 21.0).abs() < 1e-9);
        assert!((inst.center.1 - 26.0).abs() < 1e-9);
    }

    #[test]
    fn bbox_center_fallback_matches_hand_value() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        image::RgbImage::new(64, 64)
            .save(dir.path().join("images/img.png"))
            .unwrap();
        let skeleton = SkeletonSpec::new(vec!["a".into()], vec![0.1], vec![]).unwrap();
        let json = serde_json::json!({
            "images": [{"id": 7, "file_name": "images/img.png", "width": 64, "height": 64}],
            "annotations": [
                {"id": 1, "image_id": 7, "category_id": 1,
                 "keypoints": [3.0,4.0,1.0], "num_keypoints": 1,
                 "bbox": [10.0,20.0,30.0,40.0]}
            ],
            "categories": [{"id": 1, "name": "person"}]
        });
        std::fs::write(
            dir.path().join("ann.json"),
            serde_json::to_string(&json).unwrap(),
        )
        .unwrap();
        let dataset =
            load_coco_keypoints(&dir.path().join("ann.json"), dir.path(), &skeleton).unwrap();
        let inst = &dataset.samples[0].instances[0];
        assert_eq!(inst.center, (25.0, 40.0));
    }

    #[test]
    fn arity_mismatch_is_fatal_and_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        image::RgbImage::new(16, 16)
            .save(dir.path().join("images/img.png"))
            .unwrap();
        let skeleton = SkeletonSpec::new(
            vec!["a".into(), "b".into()],
            vec![0.1, 0.1],
            vec![],
        )
        .unwrap();
        let json = serde_json::json!({
            "images": [{"id": 1, "file_name": "images/img.png", "width": 16, "height": 16}],
            "annotations": [
                {"id": 42, "image_id": 1, "category_id": 1,
                 "keypoints": [3.0,4.0,2.0], "num_keypoints": 1,
                 "bbox": [1.0,1.0,5.0,5.0]}
            ],
            "categories": [{"id": 1, "name": "person"}]
        });
        std::fs::write(
            dir.path().join("ann.json"),
            serde_json::to_string(&json).unwrap(),
        )
        .unwrap();
        let err =
            load_coco_keypoints(&dir.path().join("ann.json"), dir.path(), &skeleton).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("annotation 42"), "{msg}");
    }

    #[test]
    fn malformed_json_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
        let skeleton = SkeletonSpec::coco17();
        assert!(
            load_coco_keypoints(&dir.path().join("bad.json"), dir.path(), &skeleton).is_err()
        );
    }

    #[test]
    fn seventeen_triple_annotation_parses_against_coco17() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        image::RgbImage::new(100, 100)
            .save(dir.path().join("images/img.png"))
            .unwrap();
        let skeleton = SkeletonSpec::coco17();
        let mut keypoints = Vec::new();
        for j in 0..17 {
            keypoints.extend([10.0 + j as f64, 20.0 + j as f64, 2.0]);
        }
        let json = serde_json::json!({
            "images": [{"id": 1, "file_name": "images/img.png", "width": 100, "height": 100}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "keypoints": keypoints, "num_keypoints": 17,
                 "bbox": [5.0,15.0,40.0,40.0]}
            ],
            "categories": [{"id": 1, "name": "person"}]
        });
        std::fs::write(
            dir.path().join("ann.json"),
            serde_json::to_string(&json).unwrap(),
        )
        .unwrap();
        let dataset =
            load_coco_keypoints(&dir.path().join("ann.json"), dir.path(), &skeleton).unwrap();
        assert_eq!(dataset.samples[0].instances[0].keypoints.len(), 17);
    }
}
