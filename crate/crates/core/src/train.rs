//! Training loop, inference, checkpoints, and the finite-difference report.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{DataKind, RunConfig, TextEncoderKind};
use crate::data::augment::augment;
use crate::data::coco::load_coco_keypoints;
use crate::data::synthetic::generate_synthetic_dataset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    compute_ap_ar, decode_keypoints, default_oks_thresholds, EvalReport, PredictedPose,
};
use crate::losses::{
    contrastive_instance_loss, focal_heatmap_loss, instance_prompt_loss, keypoint_prompt_loss,
    pixel_prompt_loss, pixel_similarity, sample_keypoint_features, total_loss,
    instance_similarity_map, keypoint_similarity, LossComponents, LossWeights,
};
use crate::model::{ModelConfig, PoseModel};
use crate::nn::{Adam, ParamStore, TapeParams};
use crate::prompts::{compute_attributes, joint_prompt_vocabulary, render_instance_prompt};
use crate::skeleton::SkeletonSpec;
use crate::text::{project_text_features, TextEncoderHandle};
use crate::types::{image_to_heatmap_coord, render_gt_heatmaps, InstanceAnnotation, SceneSample};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model: ModelConfig,
    skeleton: SkeletonSpec,
    params: IndexMap<String, ParamArray>,
}

/// Write a versioned checkpoint of named parameter arrays.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    skeleton: &SkeletonSpec,
    store: &ParamStore,
) -> Result<()> {
    let mut params = IndexMap::new();
    for (name, value) in store.iter() {
        params.insert(
            name.clone(),
            ParamArray {
                shape: value.shape().to_vec(),
                data: value.iter().cloned().collect(),
            },
        );
    }
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        skeleton: skeleton.clone(),
        params,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Load and validate a checkpoint: version, then shape compatibility against
/// a fresh parameter registration of the stored model config.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, SkeletonSpec, ParamStore)> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let file: CheckpointFile =
        serde_json::from_str(&raw).map_err(|e| Error::Checkpoint(format!("parse: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let model = PoseModel::new(file.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference = model.init_params(&mut rng);
    let mut store = ParamStore::new();
    for (name, expected) in reference.iter() {
        let Some(saved) = file.params.get(name) else {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        };
        if saved.shape != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                saved.shape,
                expected.shape()
            )));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&saved.shape), saved.data.clone())
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        store.insert(name, value);
    }
    if file.params.len() != reference.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint carries {} parameters, model wants {}",
            file.params.len(),
            reference.len()
        )));
    }
    Ok((file.model, file.skeleton, store))
}

/// One structured loss record for the training log.
#[derive(Debug, Serialize)]
struct LossRecord<'a> {
    step: usize,
    component: &'a str,
    value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps_run: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub encoder_hash_before: u64,
    pub encoder_hash_after: u64,
}

/// Everything needed to run training and inference for one config.
pub struct Harness {
    pub config: RunConfig,
    pub skeleton: SkeletonSpec,
    pub model: PoseModel,
    pub encoder: TextEncoderHandle,
}

impl Harness {
    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let skeleton = config.data.skeleton.build();
        let model = PoseModel::new(config.model.clone())?;
        let encoder = match config.text_encoder.kind {
            TextEncoderKind::Stub => TextEncoderHandle::stub(config.model.embed_dim),
            TextEncoderKind::Pretrained => TextEncoderHandle::pretrained(
                config
                    .text_encoder
                    .weights_path
                    .as_ref()
                    .expect("validated"),
                config.model.embed_dim,
            )?,
        };
        Ok(Self {
            config,
            skeleton,
            model,
            encoder,
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.config.data.kind {
            DataKind::Synthetic => generate_synthetic_dataset(&self.config.data.synthetic),
            DataKind::Coco => load_coco_keypoints(
                self.config.data.coco_annotations.as_ref().expect("validated"),
                self.config.data.coco_image_root.as_ref().expect("validated"),
                &self.skeleton,
            ),
        }
    }

    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.model.init_params(&mut rng)
    }

    fn stride(&self) -> usize {
        self.config.model.heatmap_stride
    }

    /// Keypoints of one instance in heatmap coordinates, clamped into the map.
    fn joints_hm(&self, inst: &InstanceAnnotation, hm_size: (usize, usize)) -> Vec<(f64, f64, u8)> {
        let (hh, ww) = hm_size;
        inst.keypoints
            .iter()
            .map(|kp| {
                (
                    image_to_heatmap_coord(kp.x, self.stride()).clamp(0.0, ww as f64 - 1.0),
                    image_to_heatmap_coord(kp.y, self.stride()).clamp(0.0, hh as f64 - 1.0),
                    kp.v,
                )
            })
            .collect()
    }

    fn center_hm(&self, inst: &InstanceAnnotation, hm_size: (usize, usize)) -> (f64, f64) {
        let (hh, ww) = hm_size;
        (
            image_to_heatmap_coord(inst.center.0, self.stride()).clamp(0.0, ww as f64 - 1.0),
            image_to_heatmap_coord(inst.center.1, self.stride()).clamp(0.0, hh as f64 - 1.0),
        )
    }

    /// Full forward pass for one (already resized) sample, yielding the five
    /// loss components. Branches whose weight is zero are skipped entirely,
    /// so their gradient contribution is exactly absent.
    pub fn forward_sample<'t>(
        &self,
        tape: &'t Tape,
        params: &TapeParams<'t>,
        sample: &SceneSample,
        weights: &LossWeights,
    ) -> Result<LossComponents<'t>> {
        let losses_cfg = &self.config.losses;
        let image = tape.leaf(sample.image.clone().into_dyn());
        let global = self.model.extract_global_features(params, image);
        let shape = global.shape();
        let hm_size = (shape[1], shape[2]);
        let n = sample.instances.len();

        // Ground-truth heatmaps (constant inputs).
        let joints_hm: Vec<Vec<(f64, f64, u8)>> = sample
            .instances
            .iter()
            .map(|inst| self.joints_hm(inst, hm_size))
            .collect();
        let gt_maps: Vec<Array3<f64>> = joints_hm
            .iter()
            .map(|joints| {
                render_gt_heatmaps(joints, hm_size, self.config.model.gt_sigma, self.stride())
                    .0
                    .values
            })
            .collect();

        // Center ground truth: per-instance peaks merged by maximum.
        let centers_hm: Vec<(f64, f64)> = sample
            .instances
            .iter()
            .map(|inst| self.center_hm(inst, hm_size))
            .collect();
        let center_points: Vec<(f64, f64, u8)> =
            centers_hm.iter().map(|&(x, y)| (x, y, 2u8)).collect();
        let center_gt = if center_points.is_empty() {
            Array3::<f64>::zeros((1, hm_size.0, hm_size.1))
        } else {
            // One map with every center: render as m=1 channels and merge.
            let mut merged = Array3::<f64>::zeros((1, hm_size.0, hm_size.1));
            for &point in &center_points {
                let (hm, _) = render_gt_heatmaps(
                    &[point],
                    hm_size,
                    self.config.model.center_gt_sigma,
                    self.stride(),
                );
                ndarray::Zip::from(&mut merged)
                    .and(&hm.values)
                    .for_each(|a, &b| {
                        if b > *a {
                            *a = b;
                        }
                    });
            }
            merged
        };

        // Center heatmap trains inside the heatmap component.
        let center_pred = self
            .model
            .center_heatmap(params, global)
            .reshape(&[1, hm_size.0, hm_size.1]);
        let center_focal =
            focal_heatmap_loss(center_pred, &center_gt.into_dyn(), losses_cfg.focal);

        if n == 0 {
            let zero = tape.scalar(0.0);
            return Ok(LossComponents {
                contrastive: zero,
                heatmap: center_focal,
                instance_prompt: zero,
                keypoint_prompt: zero,
                pixel_prompt: zero,
            });
        }

        let decoupled = self.model.decouple_instances(params, global, &centers_hm);

        let contrastive = if weights.contrastive != 0.0 {
            contrastive_instance_loss(
                decoupled.instance_features,
                losses_cfg.tau,
                losses_cfg.literal_norms_contrastive,
            )
        } else {
            tape.scalar(0.0)
        };

        // Per-instance joint heatmaps under the focal loss.
        let heatmap = if weights.heatmap != 0.0 {
            let mut acc = center_focal;
            for (fused, gt) in decoupled.fused.iter().zip(&gt_maps) {
                let predicted = self.model.heatmap_head(params, *fused);
                let fl = focal_heatmap_loss(predicted, &gt.clone().into_dyn(), losses_cfg.focal);
                acc = acc.add(fl.mul_scalar(1.0 / n as f64));
            }
            acc
        } else {
            tape.scalar(0.0)
        };

        // Instance-level alignment.
        let instance_prompt = if weights.instance_prompt != 0.0 {
            let prompt_texts: Vec<String> = sample
                .instances
                .iter()
                .map(|inst| {
                    let attrs = compute_attributes(
                        inst.center,
                        &inst.bbox,
                        &inst.keypoints,
                        sample.image_size,
                        &self.config.prompts,
                    );
                    render_instance_prompt(&attrs, &self.config.prompts)
                })
                .collect();
            let p_ins = self.encoder.encode_matrix(&prompt_texts)?;
            let f_img = self.model.project_image_features(params, global);
            let c_emb = self.config.model.embed_dim;
            let tokens = f_img
                .reshape(&[c_emb, hm_size.0 * hm_size.1])
                .transpose();
            let j_ins = project_text_features(tape, params, &self.model.decoder, p_ins, tokens);
            let mut sim_maps = Vec::with_capacity(n);
            let mut reduced_maps = Vec::with_capacity(n);
            for (i, fused) in decoupled.fused.iter().enumerate() {
                let j_row = j_ins.narrow(0, i, 1).reshape(&[c_emb]);
                sim_maps.push(instance_similarity_map(f_img, j_row));
                let reduced = if losses_cfg.mean_reduce_instance_maps {
                    channel_mean_map(*fused)
                } else {
                    self.model.reduce_fused(params, *fused)
                };
                reduced_maps.push(reduced);
            }
            let s_ins = crate::autodiff::stack_new_axis(&sim_maps);
            let reduced = crate::autodiff::stack_new_axis(&reduced_maps);
            instance_prompt_loss(s_ins, reduced)
        } else {
            tape.scalar(0.0)
        };

        // Joint-level alignment shares the projected instance features.
        let needs_f_ins = weights.keypoint_prompt != 0.0 || weights.pixel_prompt != 0.0;
        let (keypoint_prompt, pixel_prompt) = if needs_f_ins {
            let joint_texts = joint_prompt_vocabulary(&self.skeleton);
            let j_keypoint = tape.leaf2(self.encoder.encode_matrix(&joint_texts)?);
            let mut kp_acc = tape.scalar(0.0);
            let mut pixel_maps = Vec::with_capacity(n);
            for (i, fused) in decoupled.fused.iter().enumerate() {
                let f_ins = self.model.project_instance_features(params, *fused);
                if weights.keypoint_prompt != 0.0 {
                    let (f_kp, valid) = sample_keypoint_features(f_ins, &joints_hm[i]);
                    let sim = keypoint_similarity(f_kp, j_keypoint);
                    let ce = keypoint_prompt_loss(sim, &valid, losses_cfg.tau_keypoint);
                    kp_acc = kp_acc.add(ce.mul_scalar(1.0 / n as f64));
                }
                if weights.pixel_prompt != 0.0 {
                    pixel_maps.push(pixel_similarity(f_ins, j_keypoint));
                }
            }
            let pixel = if weights.pixel_prompt != 0.0 {
                let s_pixel = crate::autodiff::stack_new_axis(&pixel_maps);
                let mut h_gt = ArrayD::<f64>::zeros(IxDyn(&[
                    n,
                    self.skeleton.num_joints(),
                    hm_size.0,
                    hm_size.1,
                ]));
                for (i, gt) in gt_maps.iter().enumerate() {
                    h_gt.index_axis_mut(ndarray::Axis(0), i).assign(gt);
                }
                pixel_prompt_loss(s_pixel, &h_gt)
            } else {
                tape.scalar(0.0)
            };
            (kp_acc, pixel)
        } else {
            (tape.scalar(0.0), tape.scalar(0.0))
        };

        Ok(LossComponents {
            contrastive,
            heatmap,
            instance_prompt,
            keypoint_prompt,
            pixel_prompt,
        })
    }

    /// Gradients of the weighted total over the given samples (no
    /// augmentation), averaged, keyed by parameter name.
    pub fn component_gradients(
        &self,
        store: &ParamStore,
        samples: &[SceneSample],
        weights: &LossWeights,
    ) -> Result<IndexMap<String, ArrayD<f64>>> {
        let mut acc: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        for sample in samples {
            let tape = Tape::new();
            let params = TapeParams::from_store(&tape, store);
            let components = self.forward_sample(&tape, &params, sample, weights)?;
            let total = total_loss(&components, weights)?;
            let grads = tape.backward(total);
            for (name, var) in params.iter() {
                let g = grads.wrt(*var);
                match acc.get_mut(name) {
                    Some(slot) => *slot += &g,
                    None => {
                        acc.insert(name.clone(), g);
                    }
                }
            }
        }
        let scale = 1.0 / samples.len().max(1) as f64;
        for (_, g) in acc.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        Ok(acc)
    }

    /// Run the training loop: forward, backward, adaptive-moment updates,
    /// structured loss records, best and final checkpoints.
    pub fn train(&self) -> Result<TrainOutcome> {
        let dataset = self.load_dataset()?;
        if dataset.is_empty() {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        let out_dir = &self.config.output_dir;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), self.config.to_toml_string())?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
        let best_path = out_dir.join("checkpoint_best.json");
        let final_path = out_dir.join("checkpoint_final.json");

        let encoder_hash_before = self.encoder.state_hash();
        let mut store = self.init_params();
        let mut adam = Adam::new(self.config.optimizer.learning_rate);
        let weights = self.config.losses.weights;

        let mut data_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut data_rng);
        let mut cursor = 0usize;

        let mut initial_loss = f64::NAN;
        let mut best_loss = f64::INFINITY;
        let mut best_store = store.clone();
        let mut final_loss = f64::NAN;
        let mut steps_run = 0usize;

        for step in 1..=self.config.optimizer.steps {
            if let Some(factor) = self.config.optimizer.decay_factor {
                if step > 1 && (step - 1) % self.config.optimizer.decay_every == 0 {
                    adam.learning_rate *= factor;
                }
            }
            let mut batch = Vec::with_capacity(self.config.optimizer.batch_size);
            for _ in 0..self.config.optimizer.batch_size {
                if cursor >= order.len() {
                    order.shuffle(&mut data_rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            let mut grad_acc: IndexMap<String, ArrayD<f64>> = IndexMap::new();
            let mut component_sums = [0.0f64; 5];
            let mut total_sum = 0.0f64;
            let batch_len = batch.len() as f64;
            for &idx in &batch {
                let (sample, _) = augment(
                    &dataset.samples[idx],
                    &self.config.augment,
                    &mut data_rng,
                );
                let tape = Tape::new();
                let params = TapeParams::from_store(&tape, &store);
                let components = self.forward_sample(&tape, &params, &sample, &weights)?;
                let total = match total_loss(&components, &weights) {
                    Ok(t) => t,
                    Err(e) => {
                        // Abort with the last good checkpoint retained.
                        save_checkpoint(&final_path, &self.config.model, &self.skeleton, &store)?;
                        save_checkpoint(
                            &best_path,
                            &self.config.model,
                            &self.skeleton,
                            &best_store,
                        )?;
                        return Err(e);
                    }
                };
                for (i, (_, var)) in components.named().iter().enumerate() {
                    component_sums[i] += var.scalar_value() / batch_len;
                }
                let total_value = total.scalar_value();
                total_sum += total_value / batch_len;
                let grads = tape.backward(total);
                for (name, var) in params.iter() {
                    let mut g = grads.wrt(*var);
                    g.mapv_inplace(|v| v / batch_len);
                    match grad_acc.get_mut(name) {
                        Some(slot) => *slot += &g,
                        None => {
                            grad_acc.insert(name.clone(), g);
                        }
                    }
                }
            }
            if !total_sum.is_finite() {
                save_checkpoint(&final_path, &self.config.model, &self.skeleton, &store)?;
                save_checkpoint(&best_path, &self.config.model, &self.skeleton, &best_store)?;
                return Err(Error::NonFiniteLoss("total".into()));
            }

            adam.step(&mut store, &grad_acc);
            steps_run = step;
            final_loss = total_sum;
            if step == 1 {
                initial_loss = total_sum;
            }
            if total_sum < best_loss {
                best_loss = total_sum;
                best_store = store.clone();
            }

            for (i, (name, _)) in LossComponents::component_names().iter().enumerate() {
                serde_json::to_writer(
                    &mut log,
                    &LossRecord {
                        step,
                        component: name,
                        value: component_sums[i],
                    },
                )?;
                log.write_all(b"\n")?;
            }
            serde_json::to_writer(
                &mut log,
                &LossRecord {
                    step,
                    component: "total",
                    value: total_sum,
                },
            )?;
            log.write_all(b"\n")?;
            if step % self.config.optimizer.log_every == 0 || step == 1 {
                log::info!(
                    "step {step}: total {total_sum:.5} (con {:.4} hm {:.4} ins {:.4} kp {:.4} px {:.4})",
                    component_sums[0],
                    component_sums[1],
                    component_sums[2],
                    component_sums[3],
                    component_sums[4]
                );
            }
        }
        log.flush()?;

        save_checkpoint(&final_path, &self.config.model, &self.skeleton, &store)?;
        save_checkpoint(&best_path, &self.config.model, &self.skeleton, &best_store)?;
        Ok(TrainOutcome {
            initial_loss,
            final_loss,
            best_loss,
            steps_run,
            final_checkpoint: final_path,
            best_checkpoint: best_path,
            log_path,
            encoder_hash_before,
            encoder_hash_after: self.encoder.state_hash(),
        })
    }

    /// Inference on one sample: center-map instance discovery, per-instance
    /// decoupling, heatmap decoding. Returns poses in the sample's native
    /// pixel coordinates.
    pub fn predict_sample(&self, store: &ParamStore, sample: &SceneSample) -> Vec<PredictedPose> {
        let stride = self.stride();
        let (image, sx, sy) = prepare_for_inference(
            sample,
            stride,
            self.config.inference.test_short_side,
        );
        let tape = Tape::new();
        let params = TapeParams::from_store(&tape, store);
        let image_var = tape.leaf(image.into_dyn());
        let global = self.model.extract_global_features(&params, image_var);
        let center = self.model.center_heatmap(&params, global);
        let center_values = center
            .value()
            .as_ref()
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let peaks = local_maxima(
            &center_values,
            self.config.inference.center_threshold,
            self.config.inference.max_instances,
        );
        if peaks.is_empty() {
            return Vec::new();
        }
        let centers: Vec<(f64, f64)> = peaks.iter().map(|&(x, y, _)| (x, y)).collect();
        let decoupled = self.model.decouple_instances(&params, global, &centers);
        let mut poses = Vec::with_capacity(centers.len());
        for fused in &decoupled.fused {
            let maps = self
                .model
                .heatmap_head(&params, *fused)
                .value()
                .as_ref()
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let mut pose = decode_keypoints(&maps, stride);
            for kp in pose.keypoints.iter_mut() {
                kp.0 /= sx;
                kp.1 /= sy;
            }
            poses.push(pose);
        }
        poses
    }

    /// Deterministic evaluation over a dataset.
    pub fn evaluate_with(&self, store: &ParamStore, dataset: &Dataset) -> Result<EvalReport> {
        if dataset.is_empty() {
            return Err(Error::Dataset("evaluation dataset is empty".into()));
        }
        if dataset.skeleton.num_joints() != self.skeleton.num_joints() {
            return Err(Error::Dataset(format!(
                "dataset skeleton has {} joints, model expects {}",
                dataset.skeleton.num_joints(),
                self.skeleton.num_joints()
            )));
        }
        let mut predictions = Vec::with_capacity(dataset.len());
        let mut ground_truth = Vec::with_capacity(dataset.len());
        for sample in &dataset.samples {
            predictions.push(self.predict_sample(store, sample));
            ground_truth.push(sample.instances.clone());
        }
        Ok(compute_ap_ar(
            &predictions,
            &ground_truth,
            &self.skeleton.oks_sigmas,
            &default_oks_thresholds(),
        ))
    }
}

impl LossComponents<'_> {
    pub fn component_names() -> [(&'static str, ()); 5] {
        [
            ("contrastive", ()),
            ("heatmap", ()),
            ("instance_prompt", ()),
            ("keypoint_prompt", ()),
            ("pixel_prompt", ()),
        ]
    }
}

/// Channel mean of a CxHxW map as an HxW map.
fn channel_mean_map<'t>(x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let ones = x
        .tape_of()
        .leaf2(Array2::from_elem((c, 1), 1.0 / c as f64));
    x.reshape(&[c, h * w])
        .transpose()
        .matmul(ones)
        .reshape(&[h, w])
}

/// Resize for inference so dims are stride-divisible (and optionally the
/// short side hits `short_side`). Returns (image, sx, sy) with predictions
/// mapped back by dividing by the scale factors.
fn prepare_for_inference(
    sample: &SceneSample,
    stride: usize,
    short_side: Option<usize>,
) -> (Array3<f64>, f64, f64) {
    let (h, w) = sample.image_size;
    let (th, tw) = match short_side {
        Some(s) => {
            let scale = s as f64 / h.min(w) as f64;
            let th = ((h as f64 * scale / stride as f64).round() as usize).max(1) * stride;
            let tw = ((w as f64 * scale / stride as f64).round() as usize).max(1) * stride;
            (th, tw)
        }
        None => {
            if h % stride == 0 && w % stride == 0 {
                return (sample.image.clone(), 1.0, 1.0);
            }
            (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride)
        }
    };
    let (sx, sy) = (tw as f64 / w as f64, th as f64 / h as f64);
    let mut out = Array3::<f64>::zeros((3, th, tw));
    for y in 0..th {
        for x in 0..tw {
            let src_x = (x as f64 + 0.5) / sx - 0.5;
            let src_y = (y as f64 + 0.5) / sy - 0.5;
            let x0 = src_x.floor();
            let y0 = src_y.floor();
            let dx = src_x - x0;
            let dy = src_y - y0;
            for c in 0..3 {
                let sample_at = |xi: f64, yi: f64| -> f64 {
                    let xi = (xi.max(0.0) as usize).min(w - 1);
                    let yi = (yi.max(0.0) as usize).min(h - 1);
                    sample.image[(c, yi, xi)]
                };
                out[(c, y, x)] = (1.0 - dx) * (1.0 - dy) * sample_at(x0, y0)
                    + dx * (1.0 - dy) * sample_at(x0 + 1.0, y0)
                    + (1.0 - dx) * dy * sample_at(x0, y0 + 1.0)
                    + dx * dy * sample_at(x0 + 1.0, y0 + 1.0);
            }
        }
    }
    (out, sx, sy)
}

/// Local maxima of a heatmap above a threshold: cells not smaller than any
/// 8-neighbor, deduplicated greedily within a 2-cell Chebyshev radius,
/// strongest first. Returns (x, y, value) in heatmap coordinates.
fn local_maxima(map: &Array2<f64>, threshold: f64, max_count: usize) -> Vec<(f64, f64, f64)> {
    let (h, w) = map.dim();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map[(y, x)];
            if v < threshold {
                continue;
            }
            let mut is_peak = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if map[(ny as usize, nx as usize)] > v {
                        is_peak = false;
                    }
                }
            }
            if is_peak {
                candidates.push((v, y, x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut kept: Vec<(f64, f64, f64)> = Vec::new();
    for (v, y, x) in candidates {
        if kept.len() >= max_count {
            break;
        }
        let close = kept.iter().any(|&(kx, ky, _)| {
            (kx - x as f64).abs() <= 1.0 && (ky - y as f64).abs() <= 1.0
        });
        if !close {
            kept.push((x as f64, y as f64, v));
        }
    }
    kept
}

/// Project an op output to a scalar through fixed random weights. A plain
/// sum of squares would read as constant on unit-normalized outputs.
fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Var<'t> {
    use rand::Rng;
    let shape = out.shape();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = ArrayD::from_shape_fn(IxDyn(&shape), |_| r.gen_range(-1.0..1.0));
    out.mul(out.tape_of().leaf(w)).sum_all()
}

/// One entry of the finite-difference report.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Base step plus refinement steps for coordinates that straddle a kink.
const GRADCHECK_STEPS: [f64; 3] = [1e-5, 1e-6, 2e-7];
const GRADCHECK_COORDS: usize = 48;

/// Finite-difference checks over every parameterized operation and loss on
/// tiny shapes (heatmap 8x8, m = 4, N = 2, C_emb = 16).
pub fn gradcheck_suite(seed: u64) -> Vec<GradcheckEntry> {
    use crate::gradcheck::central_diff_check_refined;
    use crate::nn::randomize_zero_params;
    use rand::Rng;

    let config = ModelConfig {
        backbone_channels: vec![8, 12, 12],
        feature_dim: 16,
        fused_dim: 16,
        embed_dim: 16,
        heatmap_stride: 4,
        num_joints: 4,
        attention_heads: 2,
        ..ModelConfig::default()
    };
    let model = PoseModel::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = model.init_params(&mut rng);
    randomize_zero_params(&mut store, &mut rng, 0.2);

    let mut entries = Vec::new();
    let mut rand_arr = |shape: &[usize], lo: f64, hi: f64| {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    };


    // Probe template: parameters with a prefix plus extra input leaves feed a
    // builder returning the scalar loss on a fresh tape each call.
    struct OpProbe<'m> {
        model: &'m PoseModel,
        store: &'m ParamStore,
        names: Vec<String>,
        build: Box<
            dyn for<'t> Fn(&'m PoseModel, &'t Tape, &TapeParams<'t>, &[Var<'t>]) -> Var<'t> + 'm,
        >,
    }

    impl crate::gradcheck::FdProbe for OpProbe<'_> {
        fn eval(&self, leaves: &[ArrayD<f64>], wants_grad: bool) -> (f64, Vec<ArrayD<f64>>) {
            let tape = Tape::new();
            let mut tmp = self.store.clone();
            for (name, value) in self.names.iter().zip(leaves.iter()) {
                *tmp.get_mut(name) = value.clone();
            }
            let params = TapeParams::from_store(&tape, &tmp);
            let inputs: Vec<Var<'_>> = leaves[self.names.len()..]
                .iter()
                .map(|v| tape.leaf(v.clone()))
                .collect();
            let root = (self.build)(self.model, &tape, &params, &inputs);
            let loss = root.scalar_value();
            let grads = if wants_grad {
                let g = tape.backward(root);
                let mut all: Vec<ArrayD<f64>> =
                    self.names.iter().map(|n| g.wrt(params.get(n))).collect();
                all.extend(inputs.iter().map(|v| g.wrt(*v)));
                all
            } else {
                vec![]
            };
            (loss, grads)
        }
    }

    let mut run = |name: &str,
                   param_prefixes: &[&str],
                   inputs: Vec<ArrayD<f64>>,
                   build: Box<
        dyn for<'t> Fn(&PoseModel, &'t Tape, &TapeParams<'t>, &[Var<'t>]) -> Var<'t> + '_,
    >| {
        let names: Vec<String> = store
            .names()
            .filter(|n| param_prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        let mut leaves: Vec<ArrayD<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        leaves.extend(inputs);
        let probe = OpProbe {
            model: &model,
            store: &store,
            names,
            build,
        };
        let report = central_diff_check_refined(
            &leaves,
            &probe,
            &GRADCHECK_STEPS,
            GRADCHECK_TOLERANCE,
            GRADCHECK_COORDS,
        );
        entries.push(GradcheckEntry {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            coords_checked: report.coords_checked,
            pass: report.max_rel_err < GRADCHECK_TOLERANCE,
        });
    };

    // Probe weights projecting op outputs to scalars.
    let image = rand_arr(&[3, 32, 32], 0.0, 1.0);
    run(
        "backbone",
        &["backbone."],
        vec![image.clone()],
        Box::new(|m, _, p, inputs| {
            weighted_sum(m.extract_global_features(p, inputs[0]), 100)
        }),
    );

    let global = rand_arr(&[16, 8, 8], -1.0, 1.0);
    let feat = rand_arr(&[16], -1.0, 1.0);
    run(
        "instance_mask",
        &["mask."],
        vec![global.clone(), feat.clone()],
        Box::new(|m, _, p, inputs| {
            weighted_sum(
                m.compute_instance_mask(p, inputs[0], inputs[1], (2.0, 2.0)),
                101,
            )
        }),
    );

    let mask = rand_arr(&[8, 8], 0.0, 1.0);
    run(
        "spatial_recalibration",
        &[],
        vec![global.clone(), mask],
        Box::new(|m, _, _, inputs| {
            weighted_sum(m.spatial_recalibration(inputs[0], inputs[1]), 102)
        }),
    );
    run(
        "channel_recalibration",
        &[],
        vec![global.clone(), feat.clone()],
        Box::new(|m, _, _, inputs| {
            weighted_sum(m.channel_recalibration(inputs[0], inputs[1]), 103)
        }),
    );
    run(
        "fuse_recalibrations",
        &["fuse."],
        vec![global.clone(), global.clone()],
        Box::new(|m, _, p, inputs| {
            weighted_sum(m.fuse_recalibrations(p, inputs[0], inputs[1]), 104)
        }),
    );
    run(
        "image_projection_head",
        &["img_head."],
        vec![global.clone()],
        Box::new(|m, _, p, inputs| weighted_sum(m.project_image_features(p, inputs[0]), 105)),
    );
    run(
        "instance_projection_head",
        &["ins_head."],
        vec![global.clone()],
        Box::new(|m, _, p, inputs| {
            weighted_sum(m.project_instance_features(p, inputs[0]), 106)
        }),
    );
    run(
        "fused_reduction",
        &["reduce_sc."],
        vec![global.clone()],
        Box::new(|m, _, p, inputs| weighted_sum(m.reduce_fused(p, inputs[0]), 107)),
    );
    run(
        "heatmap_head",
        &["joint_head."],
        vec![global.clone()],
        Box::new(|m, _, p, inputs| weighted_sum(m.heatmap_head(p, inputs[0]), 108)),
    );
    run(
        "center_head",
        &["center_head."],
        vec![global.clone()],
        Box::new(|m, _, p, inputs| weighted_sum(m.center_heatmap(p, inputs[0]), 109)),
    );

    let queries = rand_arr(&[2, 16], -1.0, 1.0);
    let context = rand_arr(&[12, 16], -1.0, 1.0);
    run(
        "decoder_layer",
        &["decoder."],
        vec![queries, context],
        Box::new(|m, _, p, inputs| {
            weighted_sum(m.decoder.forward(p, inputs[0], inputs[1]), 110)
        }),
    );

    // The five losses.
    let features = rand_arr(&[2, 16], -1.0, 1.0);
    run(
        "contrastive_instance_loss",
        &[],
        vec![features],
        Box::new(|_, _, _, inputs| contrastive_instance_loss(inputs[0], 0.5, false)),
    );

    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut p_maps = ArrayD::from_shape_fn(IxDyn(&[4, 8, 8]), |_| rng2.gen_range(0.15..0.85));
    let mut h_gt = ArrayD::<f64>::zeros(IxDyn(&[4, 8, 8]));
    h_gt[[0, 2, 3]] = 1.0;
    h_gt[[1, 5, 5]] = 1.0;
    h_gt[[0, 2, 4]] = 0.6;
    p_maps[[2, 0, 0]] = 0.5;
    run(
        "focal_heatmap_loss",
        &[],
        vec![p_maps],
        Box::new(move |_, _, _, inputs| {
            inputs[0].focal_loss(&h_gt, 2.0, 4.0)
        }),
    );

    let s_ins = rand_arr(&[2, 8, 8], -1.0, 1.0);
    let reduced = rand_arr(&[2, 8, 8], -1.0, 1.0);
    run(
        "instance_prompt_loss",
        &[],
        vec![s_ins, reduced],
        Box::new(|_, _, _, inputs| instance_prompt_loss(inputs[0], inputs[1])),
    );

    let sim = rand_arr(&[4, 4], -1.0, 1.0);
    run(
        "keypoint_prompt_loss",
        &[],
        vec![sim],
        Box::new(|_, _, _, inputs| {
            keypoint_prompt_loss(inputs[0], &[true, true, false, true], 0.07)
        }),
    );

    let s_pixel = rand_arr(&[2, 4, 8, 8], 0.1, 0.9);
    let h_pixel = ArrayD::from_shape_fn(IxDyn(&[2, 4, 8, 8]), |_| rng2.gen_range(0.0..1.0));
    run(
        "pixel_prompt_loss",
        &[],
        vec![s_pixel],
        Box::new(move |_, _, _, inputs| pixel_prompt_loss(inputs[0], &h_pixel)),
    );

    entries
}

/// Render the gradcheck report as aligned text lines.
pub fn gradcheck_report_text(entries: &[GradcheckEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{:28} max_rel_err {:.3e} over {:4} coords  {}\n",
            e.name,
            e.max_rel_err,
            e.coords_checked,
            if e.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            backbone_channels: vec![4, 6, 6],
            feature_dim: 8,
            fused_dim: 8,
            embed_dim: 8,
            num_joints: 4,
            attention_heads: 2,
            ..ModelConfig::default()
        };
        let model = PoseModel::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = model.init_params(&mut rng);
        let skeleton = SkeletonSpec::synthetic_humanoid();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &config, &skeleton, &store).unwrap();
        let (loaded_config, loaded_skeleton, loaded_store) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded_skeleton, skeleton);
        for (name, value) in store.iter() {
            assert_eq!(loaded_store.get(name), value);
        }

        // Corrupt a shape: load must fail.
        let mut raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["params"]["fuse.bias"]["shape"] = serde_json::json!([3]);
        std::fs::write(&path, raw.to_string()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn local_maxima_finds_separated_peaks() {
        let mut map = Array2::<f64>::zeros((12, 12));
        map[(2, 2)] = 0.9;
        map[(2, 3)] = 0.5;
        map[(8, 9)] = 0.7;
        map[(3, 9)] = 0.1; // below threshold
        let peaks = local_maxima(&map, 0.3, 10);
        assert_eq!(peaks.len(), 2);
        assert_eq!(peaks[0], (2.0, 2.0, 0.9));
        assert_eq!(peaks[1], (9.0, 8.0, 0.7));
    }

    #[test]
    fn local_maxima_deduplicates_plateaus() {
        let mut map = Array2::<f64>::zeros((8, 8));
        map[(4, 4)] = 0.8;
        map[(4, 5)] = 0.8;
        let peaks = local_maxima(&map, 0.3, 10);
        assert_eq!(peaks.len(), 1);
    }

    #[test]
    fn prepare_for_inference_keeps_divisible_images() {
        let sample = SceneSample {
            image: Array3::from_elem((3, 16, 16), 0.5),
            instances: vec![],
            image_size: (16, 16),
            sample_id: "s".into(),
        };
        let (img, sx, sy) = prepare_for_inference(&sample, 4, None);
        assert_eq!(img.dim(), (3, 16, 16));
        assert_eq!((sx, sy), (1.0, 1.0));

        let odd = SceneSample {
            image: Array3::from_elem((3, 18, 21), 0.5),
            instances: vec![],
            image_size: (18, 21),
            sample_id: "s".into(),
        };
        let (img, sx, sy) = prepare_for_inference(&odd, 4, None);
        assert_eq!(img.dim(), (3, 20, 24));
        assert!((sx - 24.0 / 21.0).abs() < 1e-12);
        assert!((sy - 20.0 / 18.0).abs() < 1e-12);

        let (img, _, _) = prepare_for_inference(&odd, 4, Some(36));
        // Short side 18 -> 36: width 21 doubles to 42, rounded to 44.
        assert_eq!(img.dim(), (3, 36, 44));
    }
}
