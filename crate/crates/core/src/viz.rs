//! Pose overlays: decoded skeletons drawn over the input image, with an
//! optional joint-text similarity heat layer.

use std::path::Path;

use ndarray::Array3;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::eval::PredictedPose;
use crate::losses::pixel_similarity;
use crate::nn::{ParamStore, TapeParams};
use crate::train::Harness;
use crate::types::SceneSample;

const INSTANCE_COLORS: [[u8; 3]; 8] = [
    [230, 60, 60],
    [60, 160, 230],
    [60, 200, 90],
    [240, 180, 40],
    [180, 80, 220],
    [40, 210, 210],
    [240, 110, 40],
    [150, 150, 240],
];

fn put_pixel(buf: &mut image::RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < buf.width() && (y as u32) < buf.height() {
        buf.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

fn draw_segment(buf: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        put_pixel(buf, x.floor() as i64, y.floor() as i64, color);
    }
}

fn draw_dot(buf: &mut image::RgbImage, p: (f64, f64), radius: i64, color: [u8; 3]) {
    let (cx, cy) = (p.0.floor() as i64, p.1.floor() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put_pixel(buf, cx + dx, cy + dy, color);
            }
        }
    }
}

fn to_rgb_image(image: &Array3<f64>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            pixel.0[c] =
                (image[(c, y as usize, x as usize)] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf
}

/// Run inference on the sample, draw the decoded skeletons (per-instance
/// colors, limb segments from the skeleton edge list), optionally blend the
/// joint-text similarity map of `heat_joint` for the first instance, and
/// write a PNG. Returns the decoded poses.
pub fn visualize(
    harness: &Harness,
    store: &ParamStore,
    sample: &SceneSample,
    out_path: &Path,
    heat_joint: Option<usize>,
) -> Result<Vec<PredictedPose>> {
    let poses = harness.predict_sample(store, sample);
    let mut buf = to_rgb_image(&sample.image);

    if let Some(joint) = heat_joint {
        if let Some(heat) = joint_similarity_heat(harness, store, sample, joint)? {
            let (hh, ww) = (heat.nrows(), heat.ncols());
            let (h, w) = sample.image_size;
            for y in 0..h {
                for x in 0..w {
                    let hy = (y * hh / h).min(hh - 1);
                    let hx = (x * ww / w).min(ww - 1);
                    let v = heat[(hy, hx)].clamp(0.0, 1.0);
                    let pixel = buf.get_pixel_mut(x as u32, y as u32);
                    // Blend toward red proportionally to the score.
                    pixel.0[0] = (pixel.0[0] as f64 * (1.0 - v) + 255.0 * v) as u8;
                    pixel.0[1] = (pixel.0[1] as f64 * (1.0 - v)) as u8;
                    pixel.0[2] = (pixel.0[2] as f64 * (1.0 - v)) as u8;
                }
            }
        }
    }

    for (i, pose) in poses.iter().enumerate() {
        let color = INSTANCE_COLORS[i % INSTANCE_COLORS.len()];
        for &(a, b) in &harness.skeleton.edges {
            let pa = pose.keypoints[a];
            let pb = pose.keypoints[b];
            draw_segment(&mut buf, (pa.0, pa.1), (pb.0, pb.1), color);
        }
        for kp in &pose.keypoints {
            draw_dot(&mut buf, (kp.0, kp.1), 1, color);
        }
    }

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    buf.save(out_path)?;
    Ok(poses)
}

/// Joint-text similarity map (Eq. 8 style) of the strongest detected
/// instance, in heatmap resolution. None when nothing is detected.
fn joint_similarity_heat(
    harness: &Harness,
    store: &ParamStore,
    sample: &SceneSample,
    joint: usize,
) -> Result<Option<ndarray::Array2<f64>>> {
    let poses = harness.predict_sample(store, sample);
    if poses.is_empty() || joint >= harness.skeleton.num_joints() {
        return Ok(None);
    }
    let stride = harness.config.model.heatmap_stride;
    let tape = Tape::new();
    let params = TapeParams::from_store(&tape, store);
    let image = tape.leaf(sample.image.clone().into_dyn());
    let global = harness.model.extract_global_features(&params, image);
    // Center of the strongest pose, mapped to heatmap scale.
    let best = &poses[0];
    let (mut cx, mut cy) = (0.0, 0.0);
    for kp in &best.keypoints {
        cx += kp.0;
        cy += kp.1;
    }
    let m = best.keypoints.len() as f64;
    let center = (
        (cx / m / stride as f64 - 0.5).max(0.0),
        (cy / m / stride as f64 - 0.5).max(0.0),
    );
    let decoupled = harness.model.decouple_instances(&params, global, &[center]);
    let f_ins = harness
        .model
        .project_instance_features(&params, decoupled.fused[0]);
    let joint_texts = crate::prompts::joint_prompt_vocabulary(&harness.skeleton);
    let j_keypoint = tape.leaf2(harness.encoder.encode_matrix(&joint_texts)?);
    let s_pixel = pixel_similarity(f_ins, j_keypoint);
    let values = s_pixel.value();
    let shape = values.shape().to_vec();
    let mut heat = ndarray::Array2::<f64>::zeros((shape[1], shape[2]));
    for y in 0..shape[1] {
        for x in 0..shape[2] {
            heat[(y, x)] = values[[joint, y, x]];
        }
    }
    Ok(Some(heat))
}
