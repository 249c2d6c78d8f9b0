//! Similarity maps and all five training loss terms, each independently
//! togglable through its weight.

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Weights for the five loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub contrastive: f64,
    pub heatmap: f64,
    pub instance_prompt: f64,
    pub keypoint_prompt: f64,
    pub pixel_prompt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            heatmap: 1.0,
            instance_prompt: 1.0,
            keypoint_prompt: 1.0,
            pixel_prompt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.contrastive,
            self.heatmap,
            self.instance_prompt,
            self.keypoint_prompt,
            self.pixel_prompt,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    /// The image-only baseline: alignment losses off.
    pub fn image_only() -> Self {
        Self {
            contrastive: 1.0,
            heatmap: 1.0,
            instance_prompt: 0.0,
            keypoint_prompt: 0.0,
            pixel_prompt: 0.0,
        }
    }
}

/// Focal loss exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig("focal exponents must be positive".into()));
        }
        Ok(())
    }
}

/// Similarity maps for one image (values, not tape nodes).
#[derive(Debug, Clone)]
pub struct SimilarityMaps {
    /// N x H' x W' instance-text score maps.
    pub instance: ArrayD<f64>,
    /// N x m x m joint similarity matrices.
    pub keypoint: ArrayD<f64>,
    /// N x m x H' x W' joint-text score maps.
    pub pixel: ArrayD<f64>,
}

/// Eq. 6: per-pixel inner product between F^img pixels and one instance text
/// feature. f_img: C_emb x H' x W'; j_ins_i: C_emb -> H' x W'.
pub fn instance_similarity_map<'t>(f_img: Var<'t>, j_ins_i: Var<'t>) -> Var<'t> {
    let shape = f_img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let pixels = f_img.reshape(&[c, h * w]).transpose(); // (H'W') x C
    let col = j_ins_i.reshape(&[c, 1]);
    pixels.matmul(col).reshape(&[h, w])
}

/// Sample per-joint features from F^ins at ground-truth joint locations
/// (heatmap scale) and renormalize. Joints with v = 0 yield zero rows and a
/// `false` validity flag.
pub fn sample_keypoint_features<'t>(
    f_ins: Var<'t>,
    joints_hm: &[(f64, f64, u8)],
) -> (Var<'t>, Vec<bool>) {
    let c = f_ins.shape()[0];
    let valid: Vec<bool> = joints_hm.iter().map(|&(_, _, v)| v > 0).collect();
    let points: Vec<(f64, f64)> = joints_hm
        .iter()
        .map(|&(x, y, v)| if v > 0 { (x, y) } else { (0.0, 0.0) })
        .collect();
    let sampled = f_ins.bilinear_sample(&points).l2_normalize_rows(1e-8);
    // Zero out invalid rows so they cannot leak into downstream products.
    let mut mask = Array2::<f64>::zeros((joints_hm.len(), c));
    for (j, &ok) in valid.iter().enumerate() {
        if ok {
            mask.row_mut(j).fill(1.0);
        }
    }
    let masked = sampled.mul(sampled.tape_of().leaf2(mask));
    (masked, valid)
}

/// Eq. 7: S = F^keypoint . (J^keypoint)^T, both unit-normalized -> m x m.
pub fn keypoint_similarity<'t>(f_keypoint: Var<'t>, j_keypoint: Var<'t>) -> Var<'t> {
    f_keypoint.matmul(j_keypoint.transpose())
}

/// Eq. 8: per-joint score maps logistic(<F^ins pixel, J^keypoint_j>),
/// commensurable with [0,1] heatmaps. -> m x H' x W'.
pub fn pixel_similarity<'t>(f_ins: Var<'t>, j_keypoint: Var<'t>) -> Var<'t> {
    let shape = f_ins.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let m = j_keypoint.shape()[0];
    let pixels = f_ins.reshape(&[c, h * w]); // C x (H'W')
    j_keypoint.matmul(pixels).reshape(&[m, h, w]).sigmoid()
}

/// Eq. 9 with the cosine reading: rows are unit-normalized, and each
/// instance's logit against itself is 1/tau.
///
/// `literal_norms` switches to the printed form, where the pairwise logits
/// use the product of row norms instead of inner products of normalized
/// rows; it is kept for comparison only.
pub fn contrastive_instance_loss<'t>(
    features: Var<'t>,
    temperature: f64,
    literal_norms: bool,
) -> Var<'t> {
    assert!(temperature > 0.0, "temperature must be positive");
    let tape = features.tape_of();
    let n = features.shape()[0];
    // Exclude zero-norm rows (warned) before the math.
    let values = features.value();
    let keep: Vec<usize> = (0..n)
        .filter(|&i| {
            let norm: f64 = (0..values.shape()[1])
                .map(|c| values[[i, c]] * values[[i, c]])
                .sum();
            if norm == 0.0 {
                log::warn!("instance {i} has a zero-norm feature row; excluded from Eq. 9");
                false
            } else {
                true
            }
        })
        .collect();
    if keep.is_empty() {
        return tape.scalar(0.0);
    }
    let rows: Vec<Var<'t>> = keep.iter().map(|&i| features.narrow(0, i, 1)).collect();
    let kept = if rows.len() == 1 {
        rows[0]
    } else {
        Var::concat(0, &rows)
    };
    let logits = if literal_norms {
        // ||f_i|| ||f_j|| / tau as printed; direction-free.
        let d = kept.shape()[1];
        let ones = tape.leaf2(Array2::from_elem((d, 1), 1.0));
        let norms = kept.square().matmul(ones).sqrt(); // k x 1
        norms
            .matmul(norms.transpose())
            .mul_scalar(1.0 / temperature)
    } else {
        let normalized = kept.l2_normalize_rows(1e-12);
        normalized
            .matmul(normalized.transpose())
            .mul_scalar(1.0 / temperature)
    };
    // L_i = -log softmax(logits_i)_i; mean over kept rows.
    let log_probs = logits.log_softmax_rows();
    let k = keep.len();
    let mut eye = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        eye[(i, i)] = 1.0;
    }
    let picked = log_probs.mul(tape.leaf2(eye));
    picked.sum_all().mul_scalar(-1.0 / k as f64)
}

/// Eq. 10-11 focal heatmap loss. `p` strictly inside (0,1); ground truth in
/// [0,1] with exact 1.0 at peaks.
pub fn focal_heatmap_loss<'t>(
    predicted: Var<'t>,
    ground_truth: &ArrayD<f64>,
    params: FocalParams,
) -> Var<'t> {
    predicted.focal_loss(ground_truth, params.alpha, params.beta)
}

/// Eq. 12: MSE between the instance score maps and the reduced fused
/// features, mean over all N*H'*W' entries.
pub fn instance_prompt_loss<'t>(s_ins: Var<'t>, f_sc_reduced: Var<'t>) -> Var<'t> {
    if s_ins.shape()[0] == 0 {
        return s_ins.tape_of().scalar(0.0);
    }
    s_ins.sub(f_sc_reduced).square().mean_all()
}

/// Eq. 13: symmetric cross-entropy between the joint similarity matrix and
/// the diagonal matching target, restricted to valid joints.
pub fn keypoint_prompt_loss<'t>(
    s_keypoint: Var<'t>,
    valid: &[bool],
    temperature: f64,
) -> Var<'t> {
    assert!(temperature > 0.0, "temperature must be positive");
    let tape = s_keypoint.tape_of();
    let m = s_keypoint.shape()[0];
    assert_eq!(valid.len(), m, "validity mask length");
    let keep: Vec<usize> = (0..m).filter(|&j| valid[j]).collect();
    let k = keep.len();
    if k == 0 {
        return tape.scalar(0.0);
    }
    // Select the valid submatrix rows/columns.
    let rows: Vec<Var<'t>> = keep.iter().map(|&j| s_keypoint.narrow(0, j, 1)).collect();
    let sub_rows = if k == 1 { rows[0] } else { Var::concat(0, &rows) };
    let cols: Vec<Var<'t>> = keep.iter().map(|&j| sub_rows.narrow(1, j, 1)).collect();
    let sub = if k == 1 { cols[0] } else { Var::concat(1, &cols) };

    let mut eye = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        eye[(i, i)] = 1.0;
    }
    let eye_rows = tape.leaf2(eye.clone());
    let eye_cols = tape.leaf2(eye);

    let scaled = sub.mul_scalar(1.0 / temperature);
    let ce_rows = scaled
        .log_softmax_rows()
        .mul(eye_rows)
        .sum_all()
        .mul_scalar(-1.0 / k as f64);
    let ce_cols = scaled
        .transpose()
        .log_softmax_rows()
        .mul(eye_cols)
        .sum_all()
        .mul_scalar(-1.0 / k as f64);
    ce_rows.add(ce_cols).mul_scalar(0.5)
}

/// Eq. 14: MSE between pixel score maps and ground-truth heatmaps.
pub fn pixel_prompt_loss<'t>(s_pixel: Var<'t>, h_gt: &ArrayD<f64>) -> Var<'t> {
    if s_pixel.shape()[0] == 0 {
        return s_pixel.tape_of().scalar(0.0);
    }
    let target = s_pixel.tape_of().leaf(h_gt.clone());
    s_pixel.sub(target).square().mean_all()
}

/// Named loss components of one forward pass.
pub struct LossComponents<'t> {
    pub contrastive: Var<'t>,
    pub heatmap: Var<'t>,
    pub instance_prompt: Var<'t>,
    pub keypoint_prompt: Var<'t>,
    pub pixel_prompt: Var<'t>,
}

impl<'t> LossComponents<'t> {
    pub fn named(&self) -> [(&'static str, Var<'t>); 5] {
        [
            ("contrastive", self.contrastive),
            ("heatmap", self.heatmap),
            ("instance_prompt", self.instance_prompt),
            ("keypoint_prompt", self.keypoint_prompt),
            ("pixel_prompt", self.pixel_prompt),
        ]
    }
}

/// Eq. 15: weighted sum. Non-finite components are fatal, named.
pub fn total_loss<'t>(components: &LossComponents<'t>, weights: &LossWeights) -> Result<Var<'t>> {
    for (name, var) in components.named() {
        if !var.scalar_value().is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
    }
    Ok(components
        .contrastive
        .mul_scalar(weights.contrastive)
        .add(components.heatmap.mul_scalar(weights.heatmap))
        .add(
            components
                .instance_prompt
                .mul_scalar(weights.instance_prompt),
        )
        .add(
            components
                .keypoint_prompt
                .mul_scalar(weights.keypoint_prompt),
        )
        .add(components.pixel_prompt.mul_scalar(weights.pixel_prompt)))
}
