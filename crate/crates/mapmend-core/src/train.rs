//! Loss definitions and the self-supervised training loop.
//!
//! The alignment loss closes the chain: the dense field is pooled per noisy
//! instance, each instance is warped by its pooled transform, the warps are
//! composed into one soft map, and MSE + MAE against the clean mask flow
//! back through composition, warping and pooling into the raw field.
//!
//! Two gating rules connect corruption bookkeeping to the loss: injected
//! (obsolete) instances are excluded from the composition — there is nothing
//! in the image to align them to — and the footprints of removed instances
//! are excluded from the alignment target, since no surviving instance can
//! produce them. Both remain fully visible to the segmentation heads.

use crate::geometry::{
    pool_backward, pool_instance_transform, warp_patch_gradients, warp_to_patch, FieldCalibration,
    GeometryError, SimilarityTransform, TransformField, WarpedPatch,
};
use crate::infer::{repair_scene, InferError, Thresholds};
use crate::model::{Generator, GeneratorConfig, Model, ModelError};
use crate::noise::{corrupt, derive_seed, CorruptionSpec, NoiseError, TrainingSample};
use crate::raster::{
    iou, label_instances, BinaryMask, InstanceRegion, IntensityImage, ProbabilityMask, RasterError,
};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {field}: {msg}")]
    BadConfig { field: &'static str, msg: String },
    #[error("loss component {component} became non-finite at epoch {epoch}")]
    NonFinite { component: &'static str, epoch: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

/// Linear-combination weights for the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_mae: f64,
    pub w_missing: f64,
    pub w_obsolete: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_mse: 1.0, w_mae: 1.0, w_missing: 1.0, w_obsolete: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.w_mse, self.w_mae, self.w_missing, self.w_obsolete];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(TrainError::BadConfig {
                field: "weights",
                msg: "loss weights must be finite and >= 0".into(),
            });
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(TrainError::BadConfig {
                field: "weights",
                msg: "at least one loss weight must be positive".into(),
            });
        }
        Ok(())
    }
}

fn check_dims(h_a: usize, w_a: usize, h_b: usize, w_b: usize) -> Result<(), TrainError> {
    if h_a != h_b || w_a != w_b {
        return Err(TrainError::DimensionMismatch(h_a, w_a, h_b, w_b));
    }
    Ok(())
}

/// `w_mse * mean((p-g)^2) + w_mae * mean(|p-g|)`.
pub fn alignment_loss(
    pred: &ProbabilityMask,
    gt: &BinaryMask,
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    let (mse, mae) = alignment_components(pred, gt)?;
    Ok(weights.w_mse * mse + weights.w_mae * mae)
}

fn alignment_components(
    pred: &ProbabilityMask,
    gt: &BinaryMask,
) -> Result<(f64, f64), TrainError> {
    check_dims(pred.height(), pred.width(), gt.height(), gt.width())?;
    let n = (pred.height() * pred.width()) as f64;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        let d = p - g as f64;
        sq += d * d;
        ab += d.abs();
    }
    Ok((sq / n, ab / n))
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1-eps]`.
pub fn segmentation_loss(prob: &ProbabilityMask, gt: &BinaryMask) -> Result<f64, TrainError> {
    check_dims(prob.height(), prob.width(), gt.height(), gt.width())?;
    let n = (prob.height() * prob.width()) as f64;
    let mut acc = 0.0;
    for (&p, &g) in prob.data().iter().zip(gt.data().iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= if g == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(acc / n)
}

/// Unweighted loss components; `total` applies the linear combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub mae: f64,
    pub missing: f64,
    pub obsolete: f64,
}

impl LossBreakdown {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        weights.w_mse * self.mse
            + weights.w_mae * self.mae
            + weights.w_missing * self.missing
            + weights.w_obsolete * self.obsolete
    }
}

/// The differentiable alignment chain for one training sample: noisy
/// instances (with injected ones gated out) plus the alignment target.
pub struct AlignmentChain {
    height: usize,
    width: usize,
    calibration: FieldCalibration,
    instances: Vec<ChainInstance>,
    /// Ground truth minus removed footprints: what the warped composition
    /// can actually reproduce.
    pub align_target: BinaryMask,
}

struct ChainInstance {
    region: InstanceRegion,
    mask: Array2<f64>,
}

/// Per-forward state kept for the backward pass.
pub struct ChainState {
    pub pred: ProbabilityMask,
    sum: Array2<f64>,
    parts: Vec<(SimilarityTransform, WarpedPatch)>,
}

impl AlignmentChain {
    pub fn build(
        sample: &TrainingSample,
        calibration: &FieldCalibration,
    ) -> Result<Self, TrainError> {
        let (h, w) = (sample.noisy_mask.height(), sample.noisy_mask.width());
        let imap = label_instances(&sample.noisy_mask);
        let mut instances = Vec::new();
        for region in imap.regions() {
            // An instance counts as injected (obsolete) when most of its
            // pixels carry obsolete ground truth.
            let overlap = region
                .pixels
                .iter()
                .filter(|&&(r, c)| sample.obsolete_gt.get(r, c) == 1)
                .count();
            if overlap * 2 > region.pixel_count() {
                continue;
            }
            let mask = region.to_mask(h, w).data().clone();
            instances.push(ChainInstance { region, mask });
        }
        let mut align_target = sample.gt_mask.clone();
        align_target.subtract(&sample.missing_gt)?;
        Ok(AlignmentChain {
            height: h,
            width: w,
            calibration: *calibration,
            instances,
            align_target,
        })
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Pool, warp and compose: `pred = min(sum_i warp(y_i, t_i), 1)`.
    pub fn forward(&self, field: &TransformField) -> Result<ChainState, TrainError> {
        check_dims(field.height(), field.width(), self.height, self.width)?;
        let mut sum = Array2::<f64>::zeros((self.height, self.width));
        let mut parts = Vec::with_capacity(self.instances.len());
        for inst in &self.instances {
            let t = pool_instance_transform(field, &inst.region, &self.calibration)?;
            let patch = warp_to_patch(&inst.mask, &t, inst.region.barycenter);
            let (ph, pw) = patch.values.dim();
            for pr in 0..ph {
                for pc in 0..pw {
                    sum[[patch.row0 + pr, patch.col0 + pc]] += patch.values[[pr, pc]];
                }
            }
            parts.push((t, patch));
        }
        let pred =
            ProbabilityMask::new(sum.mapv(|v| v.clamp(0.0, 1.0))).expect("clamped composition");
        Ok(ChainState { pred, sum, parts })
    }

    /// Gradient of the alignment loss with respect to the raw field. The
    /// clamp at 1 passes gradient where the sum is at or below the cap.
    pub fn backward(&self, state: &ChainState, weights: &LossWeights) -> Array3<f64> {
        let n = (self.height * self.width) as f64;
        let mut d_sum = Array2::<f64>::zeros((self.height, self.width));
        for ((r, c), d) in d_sum.indexed_iter_mut() {
            if state.sum[[r, c]] > 1.0 {
                continue;
            }
            let p = state.pred.get(r, c);
            let g = self.align_target.get(r, c) as f64;
            let diff = p - g;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = (weights.w_mse * 2.0 * diff + weights.w_mae * sign) / n;
        }
        let mut d_field = Array3::<f64>::zeros((4, self.height, self.width));
        for (inst, (t, patch)) in self.instances.iter().zip(&state.parts) {
            let (ph, pw) = patch.values.dim();
            if ph == 0 || pw == 0 {
                continue;
            }
            let d_patch = d_sum
                .slice(ndarray::s![patch.row0..patch.row0 + ph, patch.col0..patch.col0 + pw])
                .to_owned();
            let d_t =
                warp_patch_gradients(&inst.mask, t, inst.region.barycenter, patch, &d_patch);
            pool_backward(&inst.region, &self.calibration, t, d_t, &mut d_field);
        }
        d_field
    }
}

/// All four loss components for one sample/output pair. The alignment term
/// composes the sample's surviving noisy instances through the model field.
pub fn total_loss(
    sample: &TrainingSample,
    output: &crate::model::ModelOutput,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    weights.validate()?;
    let chain = AlignmentChain::build(sample, &FieldCalibration::default())?;
    let state = chain.forward(&output.field)?;
    let (mse, mae) = alignment_components(&state.pred, &chain.align_target)?;
    let missing = segmentation_loss(&output.missing, &sample.missing_gt)?;
    let obsolete = segmentation_loss(&output.obsolete, &sample.obsolete_gt)?;
    Ok(LossBreakdown { mse, mae, missing, obsolete })
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub corruption: CorruptionSpec,
    pub weights: LossWeights,
    pub model: GeneratorConfig,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Stop once validation corrected IoU reaches this value.
    pub stop_at_val_iou: Option<f64>,
    /// Wall-clock training budget in seconds.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            patch_size: 448,
            corruption: CorruptionSpec::default(),
            weights: LossWeights::default(),
            model: GeneratorConfig::default(),
            seed: 0,
            checkpoint_dir: PathBuf::from("runs"),
            stop_at_val_iou: None,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::BadConfig { field: "epochs", msg: "must be >= 1".into() });
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig { field: "batch_size", msg: "must be >= 1".into() });
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig { field: "learning_rate", msg: "must be > 0".into() });
        }
        let div = 1usize << self.model.depth;
        if self.patch_size % div != 0 {
            return Err(TrainError::BadConfig {
                field: "patch_size",
                msg: format!("{} not divisible by 2^depth = {div}", self.patch_size),
            });
        }
        self.weights.validate()?;
        self.corruption.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_mae: f64,
    pub loss_missing: f64,
    pub loss_obsolete: f64,
    pub val_iou_corrupted: f64,
    pub val_iou_corrected: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs: Vec<EpochMetrics>,
    pub best_val_iou: f64,
}

pub type SamplePair = (IntensityImage, BinaryMask);

/// The corruption spec used for training sample `index` in `epoch`: fresh
/// noise each epoch, reproducible from the base seed.
pub fn epoch_sample_spec(config: &TrainConfig, epoch: usize, index: usize) -> CorruptionSpec {
    CorruptionSpec {
        seed: derive_seed(config.seed, 3 + epoch as u64, index as u64),
        ..config.corruption
    }
}

/// Validation corruption: fixed per sample across epochs so the selection
/// metric is stable.
pub fn val_sample_spec(config: &TrainConfig, index: usize) -> CorruptionSpec {
    CorruptionSpec { seed: derive_seed(config.seed, 1, index as u64), ..config.corruption }
}

/// Adam over the generator's flat parameter list.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Generator,
    v: Generator,
}

impl Adam {
    pub fn new(template: &Generator, lr: f64) -> Self {
        Adam {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Generator, grads: &Generator) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let g_slices = grads.params();
        let mut p_slices = params.params_mut();
        let mut m_slices = self.m.params_mut();
        let mut v_slices = self.v.params_mut();
        for i in 0..g_slices.len() {
            let g = g_slices[i];
            let p = &mut p_slices[i];
            let m = &mut m_slices[i];
            let v = &mut v_slices[i];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

struct SampleResult {
    grads: Generator,
    loss: LossBreakdown,
}

/// One training sample: corrupt, forward, all losses, full backward.
fn sample_pass(
    gen: &Generator,
    pair: &SamplePair,
    spec: &CorruptionSpec,
    weights: &LossWeights,
    patch_size: usize,
) -> Result<SampleResult, TrainError> {
    let (image, gt) = crop_pair(pair, patch_size, spec.seed);
    let sample = corrupt(&image, &gt, spec)?;
    let input = Model::assemble_input(&sample.image, &sample.noisy_mask)?;
    let fwd = gen.forward_train(&input)?;

    // Diverged weights surface as non-finite head outputs; report them as
    // non-finite loss components rather than a validation error so the
    // training loop can name what blew up.
    let field_ok = fwd.field_raw.iter().all(|v| v.is_finite());
    let missing_ok = fwd.missing.iter().all(|v| v.is_finite());
    let obsolete_ok = fwd.obsolete.iter().all(|v| v.is_finite());
    if !(field_ok && missing_ok && obsolete_ok) {
        let flag = |ok: bool| if ok { 0.0 } else { f64::NAN };
        return Ok(SampleResult {
            grads: gen.zeros_like(),
            loss: LossBreakdown {
                mse: flag(field_ok),
                mae: flag(field_ok),
                missing: flag(missing_ok),
                obsolete: flag(obsolete_ok),
            },
        });
    }

    let field = TransformField::new(fwd.field_raw.mapv(|v| (v as f64).clamp(-1.0, 1.0)))?;
    let chain = AlignmentChain::build(&sample, &FieldCalibration::default())?;
    let state = chain.forward(&field)?;
    let (mse, mae) = alignment_components(&state.pred, &chain.align_target)?;
    let d_field = chain.backward(&state, weights);
    let d_field_raw = d_field.mapv(|v| v as f32);

    let (h, w) = (image.height(), image.width());
    let n = (h * w) as f32;
    let missing_loss = bce_f32(&fwd.missing, &sample.missing_gt);
    let obsolete_loss = bce_f32(&fwd.obsolete, &sample.obsolete_gt);
    let mut dz_missing = Array2::<f32>::zeros((h, w));
    for ((r, c), dz) in dz_missing.indexed_iter_mut() {
        *dz = (fwd.missing[[r, c]] - sample.missing_gt.get(r, c) as f32)
            * weights.w_missing as f32
            / n;
    }
    let mut dz_obsolete = Array2::<f32>::zeros((h, w));
    for ((r, c), dz) in dz_obsolete.indexed_iter_mut() {
        *dz = (fwd.obsolete[[r, c]] - sample.obsolete_gt.get(r, c) as f32)
            * weights.w_obsolete as f32
            / n;
    }

    let mut grads = gen.zeros_like();
    gen.backward(&fwd, &d_field_raw, &dz_missing, &dz_obsolete, &mut grads);
    Ok(SampleResult {
        grads,
        loss: LossBreakdown { mse, mae, missing: missing_loss, obsolete: obsolete_loss },
    })
}

fn bce_f32(prob: &Array2<f32>, gt: &BinaryMask) -> f64 {
    let n = prob.len() as f64;
    let mut acc = 0.0f64;
    for (&p, &g) in prob.iter().zip(gt.data().iter()) {
        let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= if g == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    acc / n
}

/// Seeded crop when the sample exceeds the training patch size.
fn crop_pair(pair: &SamplePair, patch_size: usize, seed: u64) -> (IntensityImage, BinaryMask) {
    let (image, gt) = pair;
    let (h, w) = (image.height(), image.width());
    if h <= patch_size && w <= patch_size {
        return (image.clone(), gt.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7, 0));
    let r0 = if h > patch_size { rng.gen_range(0..=h - patch_size) } else { 0 };
    let c0 = if w > patch_size { rng.gen_range(0..=w - patch_size) } else { 0 };
    let ph = patch_size.min(h);
    let pw = patch_size.min(w);
    let img = IntensityImage::new(
        image.data().slice(ndarray::s![.., r0..r0 + ph, c0..c0 + pw]).to_owned(),
    )
    .expect("crop of valid image");
    let mask =
        BinaryMask::new(gt.data().slice(ndarray::s![r0..r0 + ph, c0..c0 + pw]).to_owned())
            .expect("crop of valid mask");
    (img, mask)
}

/// Train the generator on `train_set`, validating on `val_set` with a fixed
/// corruption per validation sample. Writes JSON-lines metrics and saves the
/// checkpoint with the best corrected validation IoU.
pub fn fit(
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    config: &TrainConfig,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::BadConfig { field: "dataset", msg: "empty training set".into() });
    }
    std::fs::create_dir_all(&config.checkpoint_dir)?;
    let metrics_path = config.checkpoint_dir.join("metrics.jsonl");
    let checkpoint_path = config.checkpoint_dir.join("best.ckpt");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;

    let mut gen = Generator::new(config.model.clone())?;
    let mut adam = Adam::new(&gen, config.learning_rate);
    let mut best_val = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let started = std::time::Instant::now();

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sums = LossBreakdown { mse: 0.0, mae: 0.0, missing: 0.0, obsolete: 0.0 };
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let results: Result<Vec<SampleResult>, TrainError> = chunk
                .par_iter()
                .map(|&idx| {
                    sample_pass(
                        &gen,
                        &train_set[idx],
                        &epoch_sample_spec(config, epoch, idx),
                        &config.weights,
                        config.patch_size,
                    )
                })
                .collect();
            let results = results?;
            let scale = 1.0 / results.len() as f32;
            let mut grads = gen.zeros_like();
            {
                let mut acc = grads.params_mut();
                for r in &results {
                    for (a, g) in acc.iter_mut().zip(r.grads.params()) {
                        for (av, gv) in a.iter_mut().zip(g.iter()) {
                            *av += gv * scale;
                        }
                    }
                }
            }
            for r in &results {
                sums.mse += r.loss.mse;
                sums.mae += r.loss.mae;
                sums.missing += r.loss.missing;
                sums.obsolete += r.loss.obsolete;
            }
            seen += results.len();
            for (name, v) in [
                ("mse", sums.mse),
                ("mae", sums.mae),
                ("missing", sums.missing),
                ("obsolete", sums.obsolete),
            ] {
                if !v.is_finite() {
                    return Err(TrainError::NonFinite { component: name, epoch });
                }
            }
            adam.step(&mut gen, &grads);
        }
        let inv = 1.0 / seen.max(1) as f64;
        let mean = LossBreakdown {
            mse: sums.mse * inv,
            mae: sums.mae * inv,
            missing: sums.missing * inv,
            obsolete: sums.obsolete * inv,
        };

        let (val_corrupted, val_corrected) = validate(&gen, val_set, config, epoch)?;
        let metrics = EpochMetrics {
            epoch,
            loss_total: mean.total(&config.weights),
            loss_mse: mean.mse,
            loss_mae: mean.mae,
            loss_missing: mean.missing,
            loss_obsolete: mean.obsolete,
            val_iou_corrupted: val_corrupted,
            val_iou_corrected: val_corrected,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&metrics).expect("metrics serialize"))?;
        metrics_file.flush()?;
        let first = history.is_empty();
        history.push(metrics);

        if val_corrected > best_val || first {
            best_val = val_corrected;
            crate::model::save_checkpoint(
                &Model::Generator(Box::new(gen.clone())),
                &checkpoint_path,
            )?;
        }
        if let Some(target) = config.stop_at_val_iou {
            if val_corrected >= target {
                break 'epochs;
            }
        }
        if let Some(budget) = config.max_seconds {
            if started.elapsed().as_secs_f64() >= budget {
                break 'epochs;
            }
        }
    }
    Ok(FitReport { checkpoint_path, metrics_path, epochs: history, best_val_iou: best_val })
}

/// Mean corrupted/corrected IoU over the validation set.
fn validate(
    gen: &Generator,
    val_set: &[SamplePair],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    if val_set.is_empty() {
        return Ok((0.0, 0.0));
    }
    let model = Model::Generator(Box::new(gen.clone()));
    let results: Result<Vec<(f64, f64)>, TrainError> = val_set
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let spec = val_sample_spec(config, i);
            let (image, gt) = crop_pair(pair, config.patch_size, spec.seed);
            let sample = corrupt(&image, &gt, &spec)?;
            let corrupted = iou(&sample.noisy_mask, &gt)?;
            let patch = config.patch_size.min(image.height()).min(image.width());
            let border = if patch > 160 { 64 } else { patch / 4 };
            let repaired = repair_scene(
                &model,
                &image,
                &sample.noisy_mask,
                patch,
                border,
                &Thresholds::default(),
            )
            .map_err(|e| match e {
                // Diverged weights show up here as non-finite head outputs;
                // report them as the loss component that blew up.
                InferError::Model(ModelError::NonFiniteOutput { head }) => {
                    TrainError::NonFinite {
                        component: match head {
                            "missing" => "missing",
                            "obsolete" => "obsolete",
                            _ => "mse",
                        },
                        epoch,
                    }
                }
                other => other.into(),
            })?;
            let corrected = iou(&repaired.final_map, &gt)?;
            Ok((corrupted, corrected))
        })
        .collect();
    let results = results?;
    let n = results.len() as f64;
    let (sc, sr) = results.iter().fold((0.0, 0.0), |(a, b), &(c, r)| (a + c, b + r));
    Ok((sc / n, sr / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_to_point, invert};
    use crate::model::ModelOutput;
    use crate::noise::global_anchor;
    use crate::raster::Point;
    use ndarray::Array3;

    fn two_square_gt(h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for (r0, c0, side) in [(4usize, 5usize, 7usize), (18, 18, 8)] {
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    m.set(r, c, 1);
                }
            }
        }
        m
    }

    #[test]
    fn alignment_loss_closed_forms() {
        let gt = two_square_gt(32, 32);
        let weights = LossWeights::default();
        assert_eq!(alignment_loss(&gt.to_probability(), &gt, &weights).unwrap(), 0.0);

        let mut ones = BinaryMask::zeros(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                ones.set(r, c, 1);
            }
        }
        let half = ProbabilityMask::new(Array2::from_elem((8, 8), 0.5)).unwrap();
        let loss = alignment_loss(&half, &ones, &weights).unwrap();
        assert!((loss - 0.75).abs() < 1e-12);

        let zeros = BinaryMask::zeros(8, 8);
        assert_eq!(
            alignment_loss(&ProbabilityMask::zeros(8, 8), &zeros, &weights).unwrap(),
            0.0
        );
    }

    #[test]
    fn alignment_loss_is_monotone_in_weights() {
        let gt = two_square_gt(32, 32);
        let pred = ProbabilityMask::new(Array2::from_elem((32, 32), 0.25)).unwrap();
        let base = LossWeights { w_mae: 1.0, w_mse: 0.0, ..Default::default() };
        let doubled = LossWeights { w_mae: 2.0, w_mse: 0.0, ..Default::default() };
        let a = alignment_loss(&pred, &gt, &base).unwrap();
        let b = alignment_loss(&pred, &gt, &doubled).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn segmentation_loss_closed_forms() {
        let mut gt = BinaryMask::zeros(4, 4);
        for c in 0..4 {
            gt.set(0, c, 1);
        }
        // Perfect prediction (exact 0/1): only the clamp residual remains.
        let exact = gt.to_probability();
        assert!(segmentation_loss(&exact, &gt).unwrap() <= 1e-6);

        // p = 0.5 everywhere: ln 2 per pixel regardless of gt.
        let half = ProbabilityMask::new(Array2::from_elem((4, 4), 0.5)).unwrap();
        let loss = segmentation_loss(&half, &gt).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);

        // p = 1 - eps against all-zero gt: -ln(eps).
        let wrong = ProbabilityMask::new(Array2::from_elem((4, 4), 1.0 - 1e-7)).unwrap();
        let zeros = BinaryMask::zeros(4, 4);
        let loss = segmentation_loss(&wrong, &zeros).unwrap();
        assert!((loss - (-(1e-7f64).ln())).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn segmentation_loss_rejects_dim_mismatch() {
        let prob = ProbabilityMask::zeros(4, 4);
        let gt = BinaryMask::zeros(4, 5);
        assert!(segmentation_loss(&prob, &gt).is_err());
    }

    fn corrupted_sample(seed: u64) -> TrainingSample {
        let gt = two_square_gt(32, 32);
        let image = IntensityImage::zeros(32, 32);
        let spec = CorruptionSpec {
            max_disp: 3.0,
            max_rot: 0.15,
            scale_range: (0.95, 1.05),
            p_remove: 0.0,
            p_inject: 0.0,
            global_max_disp: 1.0,
            global_max_rot: 0.02,
            seed,
        };
        corrupt(&image, &gt, &spec).unwrap()
    }

    /// Build the field whose pooled transforms undo the recorded corruption
    /// exactly (instance-then-global inverted, re-anchored at each noisy
    /// instance's own barycenter).
    fn correcting_output(sample: &TrainingSample) -> ModelOutput {
        let (h, w) = (sample.noisy_mask.height(), sample.noisy_mask.width());
        let cal = FieldCalibration::default();
        let g = sample.record.global_transform;
        let anchor = global_anchor(h, w);
        let gt_regions = label_instances(&sample.gt_mask).regions();
        let noisy_regions = label_instances(&sample.noisy_mask).regions();
        let mut field = Array3::<f64>::zeros((4, h, w));
        for noisy in &noisy_regions {
            // Match the noisy instance back to its source by undoing the
            // global transform and picking the best overlap.
            let (inv_g, inv_g_anchor) = invert(&g, anchor).unwrap();
            let back =
                crate::geometry::warp_instance(&noisy.to_mask(h, w), &inv_g, inv_g_anchor)
                    .unwrap()
                    .threshold(0.5);
            let src = gt_regions
                .iter()
                .max_by_key(|gr| gr.pixels.iter().filter(|&&(r, c)| back.get(r, c) == 1).count())
                .unwrap();
            let t_i = sample.record.per_instance[&src.label];
            let forward = g.to_affine(anchor).compose(&t_i.to_affine(src.barycenter));
            let correction =
                SimilarityTransform::from_affine(&forward.invert().unwrap(), noisy.barycenter)
                    .unwrap();
            let raw = [
                correction.tx / cal.max_translation,
                correction.ty / cal.max_translation,
                correction.theta / cal.max_rotation,
                correction.scale.ln() / cal.max_log_scale,
            ];
            for &(r, c) in &noisy.pixels {
                for (ch, &v) in raw.iter().enumerate() {
                    field[[ch, r, c]] = v;
                }
            }
        }
        let missing = sample.missing_gt.to_probability();
        let obsolete = sample.obsolete_gt.to_probability();
        ModelOutput { field: TransformField::new(field).unwrap(), missing, obsolete }
    }

    #[test]
    fn perfect_output_drives_total_loss_to_resampling_floor() {
        let sample = corrupted_sample(11);
        let output = correcting_output(&sample);
        let loss = total_loss(&sample, &output, &LossWeights::default()).unwrap();
        let total = loss.total(&LossWeights::default());
        assert!(total < 0.05, "total {total}: {loss:?}");
        assert!(loss.missing <= 1e-6 && loss.obsolete <= 1e-6);
    }

    #[test]
    fn zero_segmentation_weights_leave_alignment_only() {
        let sample = corrupted_sample(12);
        let output = correcting_output(&sample);
        let weights = LossWeights { w_missing: 0.0, w_obsolete: 0.0, ..LossWeights::default() };
        let loss = total_loss(&sample, &output, &weights).unwrap();
        let chain = AlignmentChain::build(&sample, &FieldCalibration::default()).unwrap();
        let state = chain.forward(&output.field).unwrap();
        let align = alignment_loss(&state.pred, &chain.align_target, &weights).unwrap();
        assert!((loss.total(&weights) - align).abs() < 1e-12);
    }

    #[test]
    fn empty_sample_has_zero_alignment_term() {
        let image = IntensityImage::zeros(32, 32);
        let gt = BinaryMask::zeros(32, 32);
        let sample = corrupt(&image, &gt, &CorruptionSpec::none(1)).unwrap();
        let output = ModelOutput {
            field: TransformField::zeros(32, 32),
            missing: ProbabilityMask::zeros(32, 32),
            obsolete: ProbabilityMask::zeros(32, 32),
        };
        let loss = total_loss(&sample, &output, &LossWeights::default()).unwrap();
        assert_eq!(loss.mse, 0.0);
        assert_eq!(loss.mae, 0.0);
        assert!(loss.missing <= 1e-6);
    }

    #[test]
    fn injected_instances_are_gated_out_of_composition() {
        let gt = two_square_gt(128, 128);
        let image = IntensityImage::zeros(128, 128);
        let spec = CorruptionSpec { p_inject: 1.0, ..CorruptionSpec::none(5) };
        let sample = corrupt(&image, &gt, &spec).unwrap();
        assert!(!sample.record.injected_shapes.is_empty());
        let chain = AlignmentChain::build(&sample, &FieldCalibration::default()).unwrap();
        let total_instances = label_instances(&sample.noisy_mask).instance_count();
        assert_eq!(
            chain.instance_count(),
            total_instances - sample.record.injected_shapes.len()
        );
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        let sample = corrupted_sample(21);
        let chain = AlignmentChain::build(&sample, &FieldCalibration::default()).unwrap();
        let weights = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut raw = Array3::<f64>::zeros((4, 32, 32));
        for v in raw.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let field = TransformField::new(raw.clone()).unwrap();
        let state = chain.forward(&field).unwrap();
        let analytic = chain.backward(&state, &weights);

        let loss_of = |data: &Array3<f64>| -> f64 {
            let f = TransformField::new(data.clone()).unwrap();
            let st = chain.forward(&f).unwrap();
            alignment_loss(&st.pred, &chain.align_target, &weights).unwrap()
        };

        let h = 1e-3;
        let mut probes = Vec::new();
        for region in label_instances(&sample.noisy_mask).regions() {
            for &(r, c) in region.pixels.iter().step_by(7) {
                for ch in 0..4 {
                    probes.push((ch, r, c));
                }
            }
        }
        // Entries outside every instance must have exactly zero gradient.
        assert_eq!(analytic[[0, 0, 0]], 0.0);
        assert_eq!(analytic[[3, 31, 31]], 0.0);

        let mut num = Vec::with_capacity(probes.len());
        let mut ana = Vec::with_capacity(probes.len());
        for &(ch, r, c) in &probes {
            let mut plus = raw.clone();
            plus[[ch, r, c]] += h;
            let mut minus = raw.clone();
            minus[[ch, r, c]] -= h;
            num.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
            ana.push(analytic[[ch, r, c]]);
        }
        let diff: f64 =
            num.iter().zip(&ana).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm_num: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_ana: f64 = ana.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / norm_num.max(norm_ana).max(1e-12);
        assert!(rel < 1e-2, "gradient relative error {rel} over {} probes", probes.len());
        assert!(norm_ana > 0.0, "gradient should not vanish");
    }

    #[test]
    fn fresh_corruption_every_epoch_with_stable_ground_truth() {
        let config = TrainConfig { seed: 9, ..Default::default() };
        let gt = two_square_gt(32, 32);
        let image = IntensityImage::zeros(32, 32);
        let a = corrupt(&image, &gt, &epoch_sample_spec(&config, 0, 0)).unwrap();
        let b = corrupt(&image, &gt, &epoch_sample_spec(&config, 1, 0)).unwrap();
        assert_ne!(a.record, b.record);
        assert_eq!(a.gt_mask, b.gt_mask);
        // Validation corruption stays fixed.
        let v1 = corrupt(&image, &gt, &val_sample_spec(&config, 0)).unwrap();
        let v2 = corrupt(&image, &gt, &val_sample_spec(&config, 0)).unwrap();
        assert_eq!(v1, v2);
    }

    fn tiny_dataset(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
        crate::shapes::generate_shapes_dataset(n, size, seed).unwrap()
    }

    fn tiny_config(dir: &std::path::Path) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            patch_size: 32,
            corruption: CorruptionSpec {
                max_disp: 3.0,
                p_remove: 0.0,
                p_inject: 0.0,
                global_max_disp: 1.0,
                ..CorruptionSpec::default()
            },
            weights: LossWeights::default(),
            model: GeneratorConfig {
                depth: 2,
                base_channels: 4,
                recurrence_steps: 1,
                ..GeneratorConfig::default()
            },
            seed: 5,
            checkpoint_dir: dir.to_path_buf(),
            stop_at_val_iou: None,
            max_seconds: None,
        }
    }

    #[test]
    fn fit_smoke_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(4, 32, 3);
        let report = fit(&data[..3], &data[3..], &tiny_config(dir.path())).unwrap();
        assert_eq!(report.epochs.len(), 1);
        let m = &report.epochs[0];
        for v in [m.loss_total, m.loss_mse, m.loss_mae, m.loss_missing, m.loss_obsolete] {
            assert!(v.is_finite());
        }
        assert!(report.checkpoint_path.exists());
        let text = std::fs::read_to_string(&report.metrics_path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let parsed: EpochMetrics = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.epoch, 0);
    }

    #[test]
    fn fit_is_deterministic_for_a_fixed_seed() {
        let data = tiny_dataset(4, 32, 4);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let report_a = fit(&data[..3], &data[3..], &tiny_config(dir_a.path())).unwrap();
        let report_b = fit(&data[..3], &data[3..], &tiny_config(dir_b.path())).unwrap();
        let text_a = std::fs::read_to_string(&report_a.metrics_path).unwrap();
        let text_b = std::fs::read_to_string(&report_b.metrics_path).unwrap();
        assert_eq!(text_a, text_b);
    }

    #[test]
    fn non_finite_loss_aborts_with_component_name() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(2, 32, 5);
        let mut config = tiny_config(dir.path());
        // An absurd learning rate reliably explodes within a few steps.
        config.learning_rate = 1e18;
        config.epochs = 4;
        let result = fit(&data[..1], &data[1..], &config);
        match result {
            Err(TrainError::NonFinite { component, .. }) => {
                assert!(["mse", "mae", "missing", "obsolete"].contains(&component));
            }
            Err(other) => panic!("expected NonFinite, got {other}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn pure_translation_correction_round_trips_points() {
        let t = SimilarityTransform::new(3.0, 0.0, 0.0, 1.0).unwrap();
        let c = Point::new(10.0, 10.0);
        let (inv, anchor) = invert(&t, c).unwrap();
        let p = Point::new(12.0, 7.0);
        let q = apply_to_point(&t, p, c);
        let back = apply_to_point(&inv, q, anchor);
        assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12);
    }
}
