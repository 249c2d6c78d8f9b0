//! Keypoint decoding and OKS-based AP/AR evaluation.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::types::{heatmap_to_image_coord, InstanceAnnotation};

/// One decoded pose in image pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictedPose {
    /// Per joint: (x, y, score).
    pub keypoints: Vec<(f64, f64, f64)>,
    /// Mean of the per-joint scores at the decoded peaks.
    pub instance_score: f64,
}

impl PredictedPose {
    /// Tight bbox area of the decoded keypoints; the detection-side area used
    /// for size bucketing (predictions carry no boxes).
    pub fn keypoint_extent_area(&self) -> f64 {
        let xs: Vec<f64> = self.keypoints.iter().map(|k| k.0).collect();
        let ys: Vec<f64> = self.keypoints.iter().map(|k| k.1).collect();
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if xs.is_empty() {
            return 0.0;
        }
        (max(&xs) - min(&xs)).max(0.0) * (max(&ys) - min(&ys)).max(0.0)
    }
}

/// COCO size buckets: medium is [32^2, 96^2), large is [96^2, inf).
pub const AREA_MEDIUM: (f64, f64) = (1024.0, 9216.0);
pub const AREA_LARGE: (f64, f64) = (9216.0, f64::INFINITY);

/// Precision-recall data for one OKS threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionRecallCurve {
    pub threshold: f64,
    /// Interpolated precision at the 101 standard recall points.
    pub precision: Vec<f64>,
    /// Final recall at this threshold.
    pub recall: f64,
}

/// AP/AR summary plus per-threshold curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar: f64,
    pub ar_medium: f64,
    pub ar_large: f64,
    pub curves: Vec<PrecisionRecallCurve>,
    pub num_ground_truth: usize,
    pub num_predictions: usize,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Flat key-value text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
            ("AR", self.ar),
            ("AR_M", self.ar_medium),
            ("AR_L", self.ar_large),
        ] {
            out.push_str(&format!("{k} = {v:.4}\n"));
        }
        out.push_str(&format!(
            "gts = {}\npreds = {}\n",
            self.num_ground_truth, self.num_predictions
        ));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Decode one instance's keypoints from its m x H' x W' probability maps.
///
/// Per joint: argmax cell (scan-order first on ties), a quarter-pixel shift
/// toward the larger axis neighbor, then the center-of-pixel mapping to image
/// coordinates.
pub fn decode_keypoints(maps: &Array3<f64>, stride: usize) -> PredictedPose {
    let (m, h, w) = maps.dim();
    let mut keypoints = Vec::with_capacity(m);
    let mut score_sum = 0.0;
    for j in 0..m {
        let channel = maps.index_axis(ndarray::Axis(0), j);
        let (mut best_y, mut best_x, mut best) = (0usize, 0usize, f64::NEG_INFINITY);
        for y in 0..h {
            for x in 0..w {
                let v = channel[(y, x)];
                if v > best {
                    best = v;
                    best_y = y;
                    best_x = x;
                }
            }
        }
        let mut fx = best_x as f64;
        let mut fy = best_y as f64;
        if best_x > 0 && best_x + 1 < w {
            let (l, r) = (channel[(best_y, best_x - 1)], channel[(best_y, best_x + 1)]);
            if r > l {
                fx += 0.25;
            } else if l > r {
                fx -= 0.25;
            }
        }
        if best_y > 0 && best_y + 1 < h {
            let (u, d) = (channel[(best_y - 1, best_x)], channel[(best_y + 1, best_x)]);
            if d > u {
                fy += 0.25;
            } else if u > d {
                fy -= 0.25;
            }
        }
        keypoints.push((
            heatmap_to_image_coord(fx, stride),
            heatmap_to_image_coord(fy, stride),
            best,
        ));
        score_sum += best;
    }
    PredictedPose {
        keypoints,
        instance_score: if m > 0 { score_sum / m as f64 } else { 0.0 },
    }
}

/// Object keypoint similarity between one prediction and one annotation.
///
/// OKS = mean over labeled joints of exp(-d^2 / (2 * area * k^2)), k = 2 sigma.
/// Returns None when the annotation has no labeled joints.
pub fn compute_oks(
    pred: &PredictedPose,
    gt: &InstanceAnnotation,
    sigmas: &[f64],
    area: f64,
) -> Option<f64> {
    assert!(area > 0.0, "area must be positive");
    assert_eq!(pred.keypoints.len(), gt.keypoints.len(), "joint count mismatch");
    assert_eq!(sigmas.len(), gt.keypoints.len(), "sigma count mismatch");
    let mut total = 0.0;
    let mut count = 0usize;
    for ((pk, gk), &sigma) in pred.keypoints.iter().zip(&gt.keypoints).zip(sigmas) {
        if gk.v == 0 {
            continue;
        }
        let d2 = (pk.0 - gk.x).powi(2) + (pk.1 - gk.y).powi(2);
        let k = 2.0 * sigma;
        total += (-d2 / (2.0 * area * k * k)).exp();
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}

/// The standard OKS thresholds 0.50 to 0.95 in steps of 0.05.
pub fn default_oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
enum AreaBucket {
    All,
    Range(f64, f64),
}

impl AreaBucket {
    fn contains(&self, area: f64) -> bool {
        match self {
            AreaBucket::All => true,
            AreaBucket::Range(lo, hi) => area >= *lo && area < *hi,
        }
    }
}

struct ImageEval {
    /// Matched gt index per prediction (score order), or None.
    dt_matches: Vec<Option<usize>>,
    /// Prediction ignored (matched to an ignored gt, or unmatched + outside bucket).
    dt_ignore: Vec<bool>,
    dt_scores: Vec<f64>,
    /// Count of unignored ground truths.
    num_gt: usize,
}

/// Greedy COCO-style matching for one image at one threshold and bucket.
///
/// Predictions in descending score order each take the not-yet-matched gt
/// with the highest OKS >= threshold, preferring unignored gts.
fn match_image(
    oks: &[Vec<Option<f64>>],
    pred_order: &[usize],
    pred_scores: &[f64],
    pred_areas: &[f64],
    gt_ignore: &[bool],
    threshold: f64,
    bucket: AreaBucket,
) -> ImageEval {
    let num_gts = gt_ignore.len();
    // Unignored gts first, preserving order inside each group.
    let mut gt_order: Vec<usize> = (0..num_gts).collect();
    gt_order.sort_by_key(|&g| gt_ignore[g]);

    let mut gt_taken = vec![false; num_gts];
    let mut dt_matches = Vec::with_capacity(pred_order.len());
    let mut dt_ignore = Vec::with_capacity(pred_order.len());
    let mut dt_scores = Vec::with_capacity(pred_order.len());
    for &d in pred_order {
        let mut best_oks = threshold;
        let mut best_gt: Option<usize> = None;
        for &g in &gt_order {
            if gt_taken[g] {
                continue;
            }
            // Once matched to an unignored gt, ignored gts cannot improve it.
            if let Some(m) = best_gt {
                if !gt_ignore[m] && gt_ignore[g] {
                    break;
                }
            }
            let Some(score) = oks[d][g] else { continue };
            if score < best_oks {
                continue;
            }
            best_oks = score;
            best_gt = Some(g);
        }
        if let Some(g) = best_gt {
            gt_taken[g] = true;
        }
        dt_matches.push(best_gt);
        let ignored = match best_gt {
            Some(g) => gt_ignore[g],
            None => !bucket.contains(pred_areas[d]),
        };
        dt_ignore.push(ignored);
        dt_scores.push(pred_scores[d]);
    }
    ImageEval {
        dt_matches,
        dt_ignore,
        dt_scores,
        num_gt: gt_ignore.iter().filter(|&&ig| !ig).count(),
    }
}

struct BucketSummary {
    ap: f64,
    ar: f64,
    ap_per_threshold: Vec<f64>,
    curves: Vec<PrecisionRecallCurve>,
    num_gt: usize,
}

fn evaluate_bucket(
    oks_matrices: &[Vec<Vec<Option<f64>>>],
    predictions: &[Vec<PredictedPose>],
    ground_truth: &[Vec<InstanceAnnotation>],
    thresholds: &[f64],
    bucket: AreaBucket,
) -> BucketSummary {
    let num_images = predictions.len();
    // Deterministic score ordering: descending score, then original index.
    let pred_orders: Vec<Vec<usize>> = predictions
        .iter()
        .map(|preds| {
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.sort_by(|&a, &b| {
                preds[b]
                    .instance_score
                    .partial_cmp(&preds[a].instance_score)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();
    let pred_areas: Vec<Vec<f64>> = predictions
        .iter()
        .map(|preds| preds.iter().map(|p| p.keypoint_extent_area()).collect())
        .collect();
    let gt_ignores: Vec<Vec<bool>> = ground_truth
        .iter()
        .map(|gts| {
            gts.iter()
                .map(|gt| gt.num_labeled() == 0 || !bucket.contains(gt.bbox.area()))
                .collect()
        })
        .collect();

    let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
    let mut ar_per_threshold = Vec::with_capacity(thresholds.len());
    let mut curves = Vec::with_capacity(thresholds.len());
    let mut bucket_gts = 0usize;

    for &threshold in thresholds {
        let mut evals = Vec::with_capacity(num_images);
        for img in 0..num_images {
            evals.push(match_image(
                &oks_matrices[img],
                &pred_orders[img],
                &predictions[img]
                    .iter()
                    .map(|p| p.instance_score)
                    .collect::<Vec<_>>(),
                &pred_areas[img],
                &gt_ignores[img],
                threshold,
                bucket,
            ));
        }
        let total_gt: usize = evals.iter().map(|e| e.num_gt).sum();
        bucket_gts = total_gt;

        // Global ranking across images; ties broken by (image, rank) for
        // determinism.
        let mut flat: Vec<(f64, usize, usize)> = Vec::new();
        for (img, eval) in evals.iter().enumerate() {
            for (rank, &score) in eval.dt_scores.iter().enumerate() {
                flat.push((score, img, rank));
            }
        }
        flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut precisions = Vec::with_capacity(flat.len());
        let mut recalls = Vec::with_capacity(flat.len());
        for &(_score, img, rank) in &flat {
            let eval = &evals[img];
            if eval.dt_ignore[rank] {
                continue;
            }
            if eval.dt_matches[rank].is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
            precisions.push(tp as f64 / (tp + fp) as f64);
            recalls.push(if total_gt > 0 {
                tp as f64 / total_gt as f64
            } else {
                0.0
            });
        }

        // 101-point interpolation: precision envelope from the right.
        let mut envelope = precisions.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut interp = vec![0.0; RECALL_POINTS];
        for (ri, slot) in interp.iter_mut().enumerate() {
            let r = ri as f64 / (RECALL_POINTS - 1) as f64;
            // First index with recall >= r.
            let pos = recalls.partition_point(|&rec| rec < r);
            if pos < envelope.len() {
                *slot = envelope[pos];
            }
        }
        let ap_t = if total_gt == 0 {
            0.0
        } else {
            interp.iter().sum::<f64>() / RECALL_POINTS as f64
        };
        let recall_t = if total_gt == 0 {
            0.0
        } else {
            recalls.last().copied().unwrap_or(0.0)
        };
        ap_per_threshold.push(ap_t);
        ar_per_threshold.push(recall_t);
        curves.push(PrecisionRecallCurve {
            threshold,
            precision: interp,
            recall: recall_t,
        });
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    BucketSummary {
        ap: mean(&ap_per_threshold),
        ar: mean(&ar_per_threshold),
        ap_per_threshold,
        curves,
        num_gt: bucket_gts,
    }
}

/// OKS-threshold AP/AR over per-image prediction and ground-truth lists.
pub fn compute_ap_ar(
    predictions: &[Vec<PredictedPose>],
    ground_truth: &[Vec<InstanceAnnotation>],
    sigmas: &[f64],
    thresholds: &[f64],
) -> EvalReport {
    assert_eq!(
        predictions.len(),
        ground_truth.len(),
        "prediction/ground-truth image counts differ"
    );
    let mut warnings = Vec::new();
    let num_predictions: usize = predictions.iter().map(|p| p.len()).sum();
    let num_ground_truth: usize = ground_truth.iter().map(|g| g.len()).sum();
    if num_predictions == 0 {
        warnings.push("no predictions; AP and AR are zero".into());
    }
    if num_ground_truth == 0 {
        warnings.push("no ground-truth instances".into());
    }

    // OKS matrices are threshold- and bucket-independent; compute once.
    let oks_matrices: Vec<Vec<Vec<Option<f64>>>> = predictions
        .iter()
        .zip(ground_truth)
        .map(|(preds, gts)| {
            preds
                .iter()
                .map(|pred| {
                    gts.iter()
                        .map(|gt| {
                            let area = gt.bbox.area().max(f64::EPSILON);
                            compute_oks(pred, gt, sigmas, area)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let all = evaluate_bucket(
        &oks_matrices,
        predictions,
        ground_truth,
        thresholds,
        AreaBucket::All,
    );
    let medium = evaluate_bucket(
        &oks_matrices,
        predictions,
        ground_truth,
        thresholds,
        AreaBucket::Range(AREA_MEDIUM.0, AREA_MEDIUM.1),
    );
    let large = evaluate_bucket(
        &oks_matrices,
        predictions,
        ground_truth,
        thresholds,
        AreaBucket::Range(AREA_LARGE.0, AREA_LARGE.1),
    );
    if medium.num_gt == 0 {
        warnings.push("no medium-size ground truths; AP_M/AR_M reported as 0".into());
    }
    if large.num_gt == 0 {
        warnings.push("no large-size ground truths; AP_L/AR_L reported as 0".into());
    }

    let threshold_index = |t: f64| thresholds.iter().position(|&x| (x - t).abs() < 1e-9);
    let ap_at = |summary: &BucketSummary, t: f64| {
        threshold_index(t)
            .map(|i| summary.ap_per_threshold[i])
            .unwrap_or(0.0)
    };

    EvalReport {
        ap: all.ap,
        ap50: ap_at(&all, 0.50),
        ap75: ap_at(&all, 0.75),
        ap_medium: medium.ap,
        ap_large: large.ap,
        ar: all.ar,
        ar_medium: medium.ar,
        ar_large: large.ar,
        curves: all.curves,
        num_ground_truth,
        num_predictions,
        warnings,
    }
}
