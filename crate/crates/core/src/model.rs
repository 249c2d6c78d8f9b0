//! Trainable image pathway: backbone, instance decoupling with spatial and
//! channel attention, multimodal projection heads, and the heatmap heads.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, ParamStore, TapeParams, TransformerBlock, TransformerDecoderLayer};

/// Positional information added to attention tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    /// None: attention blocks stay permutation-equivariant.
    #[default]
    None,
    /// Size-agnostic sinusoidal encoding of (x, y).
    Sinusoidal,
}

/// How Eq. 2's element-wise manipulation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelGate {
    /// Logistic gate on the instance feature (squeeze-and-excitation style).
    #[default]
    Sigmoid,
    /// Raw multiplication without the gate.
    Raw,
}

/// How the instance-aware mask is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// logistic(gamma * cosine(F(x,y), f_i)) with learnable gamma.
    #[default]
    Cosine,
    /// Fixed Gaussian around the instance center (ablation alternative).
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the backbone stem and the two branch convolutions.
    pub backbone_channels: Vec<usize>,
    /// C_ori: global feature channels.
    pub feature_dim: usize,
    /// C: fused instance-aware feature channels.
    pub fused_dim: usize,
    /// C_emb: multimodal embedding width (must match the text encoder).
    pub embed_dim: usize,
    /// Heatmap stride relative to the input image.
    pub heatmap_stride: usize,
    /// m: joint count (taken from the skeleton).
    pub num_joints: usize,
    pub attention_heads: usize,
    pub positional_encoding: PositionalEncoding,
    pub channel_gate: ChannelGate,
    pub mask_kind: MaskKind,
    /// Gaussian sigma (heatmap pixels) for ground-truth joint heatmaps.
    pub gt_sigma: f64,
    /// Sigma for the center heatmap; sharper than the joints so close
    /// instances keep separate peaks.
    pub center_gt_sigma: f64,
    /// Project F_img from per-instance features instead of the global map.
    pub instance_level_img_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 32],
            feature_dim: 32,
            fused_dim: 32,
            embed_dim: 32,
            heatmap_stride: 4,
            num_joints: 17,
            attention_heads: 4,
            positional_encoding: PositionalEncoding::None,
            channel_gate: ChannelGate::Sigmoid,
            mask_kind: MaskKind::Cosine,
            gt_sigma: 2.0,
            center_gt_sigma: 1.5,
            instance_level_img_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.len() != 3 {
            return Err(Error::InvalidConfig(
                "backbone_channels needs [stem, stride4, stride8] widths".into(),
            ));
        }
        let all_dims = [
            self.feature_dim,
            self.fused_dim,
            self.embed_dim,
            self.heatmap_stride,
            self.num_joints,
            self.attention_heads,
        ];
        if all_dims.iter().any(|&d| d == 0) || self.backbone_channels.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.heatmap_stride != 4 {
            return Err(Error::InvalidConfig(
                "the two-branch backbone produces stride-4 features; heatmap_stride must be 4"
                    .into(),
            ));
        }
        if self.embed_dim % self.attention_heads != 0
            || self.feature_dim % self.attention_heads != 0
            || self.fused_dim % self.attention_heads != 0
        {
            return Err(Error::InvalidConfig(
                "attention_heads must divide feature_dim, fused_dim and embed_dim".into(),
            ));
        }
        if !(self.gt_sigma > 0.0) || !(self.center_gt_sigma > 0.0) {
            return Err(Error::InvalidConfig("gt sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Everything produced by instance decoupling for one image.
pub struct DecoupledFeatures<'t> {
    /// C_ori x H' x W' global map.
    pub global: Var<'t>,
    /// N x C_ori instance center features.
    pub instance_features: Var<'t>,
    /// Per-instance masks, each H' x W' in (0,1).
    pub masks: Vec<Var<'t>>,
    /// Per-instance spatial recalibrations, each C_ori x H' x W'.
    pub spatial: Vec<Var<'t>>,
    /// Per-instance channel recalibrations, each C_ori x H' x W'.
    pub channel: Vec<Var<'t>>,
    /// Per-instance fused features, each C x H' x W'.
    pub fused: Vec<Var<'t>>,
}

/// A token-mixing projection head: one self-attention + FFN block over the
/// flattened spatial tokens, then a linear map to C_emb and per-pixel unit
/// normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub block: TransformerBlock,
    pub proj: Dense,
    positional: PositionalEncoding,
}

impl ProjectionHead {
    fn new(name: &str, in_dim: usize, embed_dim: usize, heads: usize, pe: PositionalEncoding) -> Self {
        Self {
            block: TransformerBlock::new(&format!("{name}.block"), in_dim, heads, 2 * in_dim),
            proj: Dense::new(&format!("{name}.proj"), in_dim, embed_dim),
            positional: pe,
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.block.register(store, rng);
        self.proj.register(store, rng);
    }

    /// features: C x H' x W' -> C_emb x H' x W' with unit-norm pixel vectors.
    pub fn forward<'t>(&self, p: &TapeParams<'t>, features: Var<'t>) -> Var<'t> {
        let shape = features.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        // C x H x W -> (H*W) x C token rows.
        let tokens = features.reshape(&[c, h * w]).transpose();
        let tokens = match self.positional {
            PositionalEncoding::None => tokens,
            PositionalEncoding::Sinusoidal => {
                let pe = sinusoidal_grid(h, w, c);
                tokens.add(tokens.tape_of().leaf2(pe))
            }
        };
        let mixed = self.block.forward(p, tokens);
        let projected = self.proj.forward(p, mixed);
        let normalized = projected.l2_normalize_rows(1e-12);
        normalized.transpose().reshape(&[self.proj.out_dim, h, w])
    }
}

fn sinusoidal_grid(h: usize, w: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for d in 0..dim {
                let pair = d / 2;
                let freq = 1.0 / 10_000f64.powf(2.0 * (pair / 2) as f64 / dim as f64);
                let pos = if pair % 2 == 0 { x as f64 } else { y as f64 };
                pe[(row, d)] = if d % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
            }
        }
    }
    pe
}

/// Per-joint and center probability heads plus the shared trunk geometry.
#[derive(Debug, Clone)]
struct ConvHead {
    conv1: Conv2d,
    conv2: Conv2d,
    out: Conv2d,
}

impl ConvHead {
    fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, in_ch, 3, 1),
            conv2: Conv2d::new(&format!("{name}.conv2"), in_ch, in_ch, 3, 1),
            out: Conv2d::new(&format!("{name}.out"), in_ch, out_ch, 1, 1),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv1.register(store, rng);
        self.conv2.register(store, rng);
        self.out.register(store, rng);
    }

    fn forward<'t>(&self, p: &TapeParams<'t>, x: Var<'t>) -> Var<'t> {
        let x = self.conv1.forward(p, x).relu();
        let x = self.conv2.forward(p, x).relu();
        self.out.forward(p, x).sigmoid()
    }
}

/// The full trainable image pathway.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub config: ModelConfig,
    stem: Conv2d,
    down1: Conv2d,
    branch4: Conv2d,
    branch8: Conv2d,
    merge: Conv2d,
    fuse: Conv2d,
    reduce_sc: Conv2d,
    img_head: ProjectionHead,
    ins_head: ProjectionHead,
    joint_head: ConvHead,
    center_head: ConvHead,
    pub decoder: TransformerDecoderLayer,
}

pub const MASK_GAMMA: &str = "mask.gamma";

impl PoseModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [stem_ch, ch4, ch8] = [
            config.backbone_channels[0],
            config.backbone_channels[1],
            config.backbone_channels[2],
        ];
        let c_ori = config.feature_dim;
        let c = config.fused_dim;
        let c_emb = config.embed_dim;
        Ok(Self {
            stem: Conv2d::new("backbone.stem", 3, stem_ch, 3, 1),
            down1: Conv2d::new("backbone.down1", stem_ch, ch4, 3, 2),
            branch4: Conv2d::new("backbone.branch4", ch4, ch4, 3, 2),
            branch8: Conv2d::new("backbone.branch8", ch4, ch8, 3, 2),
            merge: Conv2d::new("backbone.merge", ch4 + ch8, c_ori, 1, 1),
            fuse: Conv2d::new("fuse", 2 * c_ori, c, 1, 1),
            reduce_sc: Conv2d::new("reduce_sc", c, 1, 1, 1),
            img_head: ProjectionHead::new(
                "img_head",
                c_ori,
                c_emb,
                config.attention_heads,
                config.positional_encoding,
            ),
            ins_head: ProjectionHead::new(
                "ins_head",
                c,
                c_emb,
                config.attention_heads,
                config.positional_encoding,
            ),
            joint_head: ConvHead::new("joint_head", c, config.num_joints),
            center_head: ConvHead::new("center_head", c_ori, 1),
            decoder: TransformerDecoderLayer::new(
                "decoder",
                c_emb,
                config.attention_heads,
                2 * c_emb,
                true,
            ),
            config,
        })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for conv in [
            &self.stem,
            &self.down1,
            &self.branch4,
            &self.branch8,
            &self.merge,
            &self.fuse,
            &self.reduce_sc,
        ] {
            conv.register(&mut store, rng);
        }
        store.insert(MASK_GAMMA, ArrayD::from_elem(IxDyn(&[1]), 5.0));
        self.img_head.register(&mut store, rng);
        self.ins_head.register(&mut store, rng);
        self.joint_head.register(&mut store, rng);
        self.center_head.register(&mut store, rng);
        self.decoder.register(&mut store, rng);
        store
    }

    /// Backbone: stride-4 and stride-8 branches, the coarse branch upsampled
    /// and concatenated, then a 1x1 merge to C_ori. image: 3 x H x W with H, W
    /// divisible by 4; output C_ori x H/4 x W/4.
    pub fn extract_global_features<'t>(&self, p: &TapeParams<'t>, image: Var<'t>) -> Var<'t> {
        let shape = image.shape();
        assert_eq!(shape[0], 3, "expected a 3-channel image");
        assert!(
            shape[1] % 4 == 0 && shape[2] % 4 == 0,
            "image extent must be divisible by the stride"
        );
        let x = self.stem.forward(p, image).relu();
        let x = self.down1.forward(p, x).relu();
        let s4 = self.branch4.forward(p, x).relu();
        let s8 = self.branch8.forward(p, s4).relu();
        let s8_up = s8.upsample_nearest_2x();
        let cat = Var::concat(0, &[s4, s8_up]);
        self.merge.forward(p, cat)
    }

    /// Bilinear sampling of the global map at heatmap-scale centers -> N x C_ori.
    pub fn sample_instance_features<'t>(
        &self,
        global: Var<'t>,
        centers: &[(f64, f64)],
    ) -> Var<'t> {
        global.bilinear_sample(centers)
    }

    /// Instance-aware mask M_i in (0,1).
    pub fn compute_instance_mask<'t>(
        &self,
        p: &TapeParams<'t>,
        global: Var<'t>,
        instance_feature: Var<'t>,
        center_hm: (f64, f64),
    ) -> Var<'t> {
        match self.config.mask_kind {
            MaskKind::Cosine => {
                let gamma = p.get(MASK_GAMMA);
                let cos = global.cosine_map(instance_feature);
                cos.mul_scalar_var(gamma).sigmoid()
            }
            MaskKind::Gaussian => {
                let shape = global.shape();
                let (h, w) = (shape[1], shape[2]);
                let sigma = self.config.gt_sigma.max(1.0) * 2.0;
                let mut mask = Array2::<f64>::zeros((h, w));
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (x as f64 - center_hm.0).powi(2)
                            + (y as f64 - center_hm.1).powi(2);
                        mask[(y, x)] = (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                global.tape_of().leaf2(mask)
            }
        }
    }

    /// Eq. 1: spatial recalibration F^s_i = F . M_i.
    pub fn spatial_recalibration<'t>(&self, global: Var<'t>, mask: Var<'t>) -> Var<'t> {
        global.scale_spatial(mask)
    }

    /// Eq. 2: channel recalibration F^c_i = F (x) f_i, with the gate read
    /// configured by `channel_gate`.
    pub fn channel_recalibration<'t>(&self, global: Var<'t>, instance_feature: Var<'t>) -> Var<'t> {
        let gates = match self.config.channel_gate {
            ChannelGate::Sigmoid => instance_feature.sigmoid(),
            ChannelGate::Raw => instance_feature,
        };
        global.scale_channels(gates)
    }

    /// Eq. 3: F^{sc} = Relu(Conv([F^s; F^c])).
    pub fn fuse_recalibrations<'t>(
        &self,
        p: &TapeParams<'t>,
        spatial: Var<'t>,
        channel: Var<'t>,
    ) -> Var<'t> {
        let cat = Var::concat(0, &[spatial, channel]);
        self.fuse.forward(p, cat).relu()
    }

    /// Full instance decoupling for one image given heatmap-scale centers.
    pub fn decouple_instances<'t>(
        &self,
        p: &TapeParams<'t>,
        global: Var<'t>,
        centers: &[(f64, f64)],
    ) -> DecoupledFeatures<'t> {
        let instance_features = self.sample_instance_features(global, centers);
        let mut masks = Vec::with_capacity(centers.len());
        let mut spatial = Vec::with_capacity(centers.len());
        let mut channel = Vec::with_capacity(centers.len());
        let mut fused = Vec::with_capacity(centers.len());
        let c_ori = self.config.feature_dim;
        for (i, &center) in centers.iter().enumerate() {
            let f_i = instance_features.narrow(0, i, 1).reshape(&[c_ori]);
            let mask = self.compute_instance_mask(p, global, f_i, center);
            let f_s = self.spatial_recalibration(global, mask);
            let f_c = self.channel_recalibration(global, f_i);
            let f_sc = self.fuse_recalibrations(p, f_s, f_c);
            masks.push(mask);
            spatial.push(f_s);
            channel.push(f_c);
            fused.push(f_sc);
        }
        DecoupledFeatures {
            global,
            instance_features,
            masks,
            spatial,
            channel,
            fused,
        }
    }

    /// F^img (from the global map) in R^{C_emb x H' x W'}, unit pixel vectors.
    pub fn project_image_features<'t>(&self, p: &TapeParams<'t>, global: Var<'t>) -> Var<'t> {
        self.img_head.forward(p, global)
    }

    /// F^ins_i (from fused instance features), unit pixel vectors.
    pub fn project_instance_features<'t>(&self, p: &TapeParams<'t>, fused: Var<'t>) -> Var<'t> {
        self.ins_head.forward(p, fused)
    }

    /// Learned 1x1 reduction of F^{sc} to one channel for Eq. 12.
    pub fn reduce_fused<'t>(&self, p: &TapeParams<'t>, fused: Var<'t>) -> Var<'t> {
        let shape = fused.shape();
        self.reduce_sc
            .forward(p, fused)
            .reshape(&[shape[1], shape[2]])
    }

    /// Per-joint probability maps for one instance: m x H' x W' in (0,1).
    pub fn heatmap_head<'t>(&self, p: &TapeParams<'t>, fused: Var<'t>) -> Var<'t> {
        self.joint_head.forward(p, fused)
    }

    /// Center probability map from the global features: H' x W' in (0,1).
    pub fn center_heatmap<'t>(&self, p: &TapeParams<'t>, global: Var<'t>) -> Var<'t> {
        let shape = global.shape();
        self.center_head
            .forward(p, global)
            .reshape(&[shape[1], shape[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::central_diff_check;
    use crate::nn::randomize_zero_params;
    use ndarray::{Array1, Array3};
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone_channels: vec![4, 6, 6],
            feature_dim: 8,
            fused_dim: 8,
            embed_dim: 8,
            heatmap_stride: 4,
            num_joints: 4,
            attention_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_model() -> (PoseModel, ParamStore, ChaCha8Rng) {
        let model = PoseModel::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = model.init_params(&mut rng);
        randomize_zero_params(&mut store, &mut rng, 0.2);
        (model, store, rng)
    }

    #[test]
    fn backbone_shape_contract() {
        let (model, store, mut rng) = tiny_model();
        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let image = tape.leaf(
            ArrayD::from_shape_fn(IxDyn(&[3, 32, 32]), |_| rng.gen_range(0.0..1.0)),
        );
        let f = model.extract_global_features(&p, image);
        assert_eq!(f.shape(), vec![8, 8, 8]);
    }

    #[test]
    fn backbone_zero_input_zero_bias_gives_zero() {
        let (model, mut store, _rng) = tiny_model();
        for (name, value) in store.iter_mut() {
            if name.contains("bias") {
                value.fill(0.0);
            }
        }
        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let image = tape.leaf(ArrayD::zeros(IxDyn(&[3, 32, 32])));
        let f = model.extract_global_features(&p, image);
        assert!(f.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_sampling_matches_bilinear_hand_values() {
        let (model, store, _rng) = tiny_model();
        let tape = Tape::new();
        let _p = TapeParams::from_store(&tape, &store);
        let global = tape.leaf(
            Array3::from_shape_fn((8, 8, 8), |(c, y, x)| (c * 100 + y * 10 + x) as f64).into_dyn(),
        );
        // On-grid point returns the column; halfway point averages neighbors.
        let f = model.sample_instance_features(global, &[(3.0, 2.0), (3.5, 2.0)]);
        let fv = f.value();
        let gv = global.value();
        for c in 0..8 {
            assert_eq!(fv[[0, c]], gv[[c, 2, 3]]);
            assert_eq!(fv[[1, c]], 0.5 * (gv[[c, 2, 3]] + gv[[c, 2, 4]]));
        }
        // Empty center list yields an empty result.
        let empty = model.sample_instance_features(global, &[]);
        assert_eq!(empty.shape(), vec![0, 8]);
    }

    #[test]
    fn mask_hand_values() {
        // Parallel, orthogonal, anti-parallel pixel features at gamma = 5.
        let (model, store, _rng) = tiny_model();
        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let mut g = Array3::<f64>::zeros((8, 1, 3));
        g[(0, 0, 0)] = 2.0;
        g[(1, 0, 1)] = 1.0;
        g[(0, 0, 2)] = -3.0;
        let global = tape.leaf(g.into_dyn());
        let mut f_i = Array1::<f64>::zeros(8);
        f_i[0] = 1.0;
        let f_var = tape.leaf1(f_i);
        let mask = model.compute_instance_mask(&p, global, f_var, (0.0, 0.0));
        let mv = mask.value();
        let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((mv[[0, 0]] - logistic(5.0)).abs() < 1e-9);
        assert!((logistic(5.0) - 0.9933071490757153).abs() < 1e-12);
        assert!((mv[[0, 1]] - 0.5).abs() < 1e-12);
        assert!((mv[[0, 2]] - logistic(-5.0)).abs() < 1e-9);
        assert!((logistic(-5.0) - 0.006692850924284856).abs() < 1e-12);
    }

    #[test]
    fn recalibration_hand_values() {
        let (model, store, _rng) = tiny_model();
        let tape = Tape::new();
        let _p = TapeParams::from_store(&tape, &store);
        let global = tape.leaf(Array3::from_elem((8, 2, 2), 4.0).into_dyn());

        // Identity and null masks.
        let ones = tape.leaf2(Array2::from_elem((2, 2), 1.0));
        let spatial = model.spatial_recalibration(global, ones);
        assert_eq!(*spatial.value(), *global.value());
        let zeros = tape.leaf2(Array2::zeros((2, 2)));
        let nulled = model.spatial_recalibration(global, zeros);
        assert!(nulled.value().iter().all(|&v| v == 0.0));
        let quarter = tape.leaf2(Array2::from_elem((2, 2), 0.25));
        let scaled = model.spatial_recalibration(global, quarter);
        assert!(scaled.value().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // Channel gate: zero feature halves the map; saturated gate passes it.
        let f_zero = tape.leaf1(Array1::zeros(8));
        let halved = model.channel_recalibration(global, f_zero);
        assert!(halved.value().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let f_large = tape.leaf1(Array1::from_elem(8, 50.0));
        let passed = model.channel_recalibration(global, f_large);
        assert!(passed.value().iter().all(|&v| (v - 4.0).abs() < 1e-9));
        assert_eq!(passed.shape(), vec![8, 2, 2]);
    }

    #[test]
    fn fuse_zero_paths() {
        let (model, mut store, _rng) = tiny_model();
        store.get_mut("fuse.bias").fill(0.0);
        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let zero = tape.leaf(ArrayD::zeros(IxDyn(&[8, 2, 2])));
        let fused = model.fuse_recalibrations(&p, zero, zero);
        assert!(fused.value().iter().all(|&v| v == 0.0));

        // Strongly negative bias floors the rectifier.
        store.get_mut("fuse.bias").fill(-100.0);
        let tape2 = Tape::new();
        let p2 = TapeParams::from_store(&tape2, &store);
        let x = tape2.leaf(ArrayD::from_elem(IxDyn(&[8, 2, 2]), 0.5));
        let fused2 = model.fuse_recalibrations(&p2, x, x);
        assert!(fused2.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_head_normalizes_pixels_and_keeps_shape() {
        let (model, store, mut rng) = tiny_model();
        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let global = tape.leaf(
            ArrayD::from_shape_fn(IxDyn(&[8, 3, 4]), |_| rng.gen_range(-1.0..1.0)),
        );
        let img = model.project_image_features(&p, global);
        assert_eq!(img.shape(), vec![8, 3, 4]);
        let v = img.value();
        for y in 0..3 {
            for x in 0..4 {
                let norm: f64 = (0..8).map(|c| v[[c, y, x]] * v[[c, y, x]]).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "pixel ({y},{x}) norm {norm}");
            }
        }
    }

    #[test]
    fn projection_head_is_token_permutation_equivariant() {
        // With no positional encoding, permuting spatial tokens before the
        // head and unpermuting after is a no-op.
        let (model, store, mut rng) = tiny_model();
        let input = Array3::from_shape_fn((8, 2, 3), |_| rng.gen_range(-1.0..1.0));

        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let out = model.project_image_features(&p, tape.leaf(input.clone().into_dyn()));
        let out_v = out.value();

        // Permute the 6 spatial positions.
        let perm = [4usize, 2, 0, 5, 1, 3];
        let mut permuted = Array3::<f64>::zeros((8, 2, 3));
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / 3, dst % 3);
            let (sy, sx) = (src / 3, src % 3);
            for c in 0..8 {
                permuted[(c, dy, dx)] = input[(c, sy, sx)];
            }
        }
        let tape2 = Tape::new();
        let p2 = TapeParams::from_store(&tape2, &store);
        let out_p = model.project_image_features(&p2, tape2.leaf(permuted.into_dyn()));
        let out_pv = out_p.value();
        for (dst, &src) in perm.iter().enumerate() {
            let (dy, dx) = (dst / 3, dst % 3);
            let (sy, sx) = (src / 3, src % 3);
            for c in 0..8 {
                assert!((out_pv[[c, dy, dx]] - out_v[[c, sy, sx]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn heatmap_head_range_and_shape() {
        let (model, store, mut rng) = tiny_model();
        let tape = Tape::new();
        let p = TapeParams::from_store(&tape, &store);
        let fused = tape.leaf(
            ArrayD::from_shape_fn(IxDyn(&[8, 5, 6]), |_| rng.gen_range(-2.0..2.0)),
        );
        let maps = model.heatmap_head(&p, fused);
        assert_eq!(maps.shape(), vec![4, 5, 6]);
        assert!(maps.value().iter().all(|&v| v > 0.0 && v < 1.0));
        let center = model.center_heatmap(&p, fused);
        assert_eq!(center.shape(), vec![5, 6]);
    }

    #[test]
    fn instance_permutation_permutes_outputs() {
        let (model, store, mut rng) = tiny_model();
        let global_arr = ArrayD::from_shape_fn(IxDyn(&[8, 6, 6]), |_| rng.gen_range(-1.0..1.0));
        let centers = [(1.0, 2.0), (4.0, 3.0), (2.5, 4.5)];
        let perm = [2usize, 0, 1];

        let run = |order: &[usize]| {
            let tape = Tape::new();
            let p = TapeParams::from_store(&tape, &store);
            let global = tape.leaf(global_arr.clone());
            let cs: Vec<(f64, f64)> = order.iter().map(|&i| centers[i]).collect();
            let dec = model.decouple_instances(&p, global, &cs);
            dec.fused
                .iter()
                .map(|f| f.value().as_ref().clone())
                .collect::<Vec<_>>()
        };
        let base = run(&[0, 1, 2]);
        let permuted = run(&perm);
        for (dst, &src) in perm.iter().enumerate() {
            let diff = (&permuted[dst] - &base[src]).mapv(f64::abs).sum();
            assert!(diff < 1e-10, "instance {dst} differs by {diff}");
        }
    }

    #[test]
    fn backbone_gradient_matches_fd() {
        let (model, store, mut rng) = tiny_model();
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("backbone"))
            .cloned()
            .collect();
        let image = ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let mut leaves: Vec<ArrayD<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        leaves.push(image);
        let probe = |ls: &[ArrayD<f64>], wants_grad: bool| {
            let mut tmp = store.clone();
            for (n, v) in names.iter().zip(ls.iter()) {
                *tmp.get_mut(n) = v.clone();
            }
            let tape = Tape::new();
            let p = TapeParams::from_store(&tape, &tmp);
            let image = tape.leaf(ls[names.len()].clone());
            let f = model.extract_global_features(&p, image);
            let root = f.square().sum_all();
            let loss = root.scalar_value();
            let grads = if wants_grad {
                let g = tape.backward(root);
                let mut all: Vec<ArrayD<f64>> = names.iter().map(|n| g.wrt(p.get(n))).collect();
                all.push(g.wrt(image));
                all
            } else {
                vec![]
            };
            (loss, grads)
        };
        let report = central_diff_check(&leaves, &probe, 1e-5, 40);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
