//! The generator model: configuration, the recurrent-residual U-Net, stub
//! models for pipeline tests, and the checkpoint format.

mod checkpoint;
mod generator;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use generator::{Generator, TrainForward};

use crate::geometry::{GeometryError, TransformField};
use crate::raster::{BinaryMask, IntensityImage, ProbabilityMask};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("input {height}x{width} not divisible by {divisor}; {hint}")]
    BadDimensions { height: usize, width: usize, divisor: usize, hint: String },
    #[error("expected {want} input channels, got {got}")]
    BadChannels { got: usize, want: usize },
    #[error("image and mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("model output head {head} is non-finite; weights have diverged")]
    NonFiniteOutput { head: &'static str },
    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Architecture hyper-parameters. The defaults are the CPU-trainable
/// configuration; `base_channels = 64` is the full-size setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub recurrence_steps: usize,
    pub input_channels: usize,
    pub parameter_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 4,
            base_channels: 16,
            recurrence_steps: 2,
            input_channels: 4,
            parameter_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 2 {
            return Err(ModelError::BadConfig(format!("depth {} < 2", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(ModelError::BadConfig(format!(
                "base_channels {} < 4",
                self.base_channels
            )));
        }
        if self.recurrence_steps < 1 {
            return Err(ModelError::BadConfig("recurrence_steps must be >= 1".into()));
        }
        if self.input_channels != 4 {
            return Err(ModelError::BadConfig(format!(
                "input_channels is fixed at 4, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }
}

/// The three generator outputs in physical form.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub field: TransformField,
    pub missing: ProbabilityMask,
    pub obsolete: ProbabilityMask,
}

/// A constant-output stand-in for the generator, used to exercise the
/// repair pipeline independently of training. Values are post-activation:
/// `field_raw` in `[-1, 1]`, head probabilities in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubModel {
    pub field_raw: [f64; 4],
    pub missing: f64,
    pub obsolete: f64,
}

impl StubModel {
    /// Zero field, zero missing, zero obsolete: the repair pipeline becomes
    /// the identity on its input mask.
    pub fn identity() -> Self {
        StubModel { field_raw: [0.0; 4], missing: 0.0, obsolete: 0.0 }
    }
}

/// A runnable model: the trained generator or a stub.
#[derive(Debug, Clone)]
pub enum Model {
    Generator(Box<Generator>),
    Stub(StubModel),
}

impl Model {
    pub fn new_generator(config: GeneratorConfig) -> Result<Self, ModelError> {
        Ok(Model::Generator(Box::new(Generator::new(config)?)))
    }

    /// Stack image channels and the noisy mask into the 4-channel input.
    pub fn assemble_input(
        image: &IntensityImage,
        noisy_mask: &BinaryMask,
    ) -> Result<Array3<f32>, ModelError> {
        let (h, w) = (image.height(), image.width());
        if noisy_mask.height() != h || noisy_mask.width() != w {
            return Err(ModelError::DimensionMismatch(
                h,
                w,
                noisy_mask.height(),
                noisy_mask.width(),
            ));
        }
        let mut input = Array3::<f32>::zeros((4, h, w));
        input.slice_mut(ndarray::s![..3, .., ..]).assign(image.data());
        let mut mask_ch = input.index_axis_mut(Axis(0), 3);
        for ((r, c), v) in mask_ch.indexed_iter_mut() {
            *v = noisy_mask.get(r, c) as f32;
        }
        Ok(input)
    }

    /// Run the model on an image/mask pair. Deterministic given the weights.
    pub fn forward(
        &self,
        image: &IntensityImage,
        noisy_mask: &BinaryMask,
    ) -> Result<ModelOutput, ModelError> {
        let (h, w) = (image.height(), image.width());
        match self {
            Model::Stub(stub) => {
                if noisy_mask.height() != h || noisy_mask.width() != w {
                    return Err(ModelError::DimensionMismatch(
                        h,
                        w,
                        noisy_mask.height(),
                        noisy_mask.width(),
                    ));
                }
                let field = TransformField::constant(stub.field_raw, h, w)?;
                let missing =
                    ProbabilityMask::new(Array2::from_elem((h, w), stub.missing))
                        .map_err(|e| ModelError::BadConfig(e.to_string()))?;
                let obsolete =
                    ProbabilityMask::new(Array2::from_elem((h, w), stub.obsolete))
                        .map_err(|e| ModelError::BadConfig(e.to_string()))?;
                Ok(ModelOutput { field, missing, obsolete })
            }
            Model::Generator(gen) => {
                let input = Model::assemble_input(image, noisy_mask)?;
                let (field_raw, missing, obsolete) = gen.forward_heads(&input)?;
                if !field_raw.iter().all(|v| v.is_finite()) {
                    return Err(ModelError::NonFiniteOutput { head: "field" });
                }
                if !missing.iter().all(|v| v.is_finite()) {
                    return Err(ModelError::NonFiniteOutput { head: "missing" });
                }
                if !obsolete.iter().all(|v| v.is_finite()) {
                    return Err(ModelError::NonFiniteOutput { head: "obsolete" });
                }
                Ok(ModelOutput {
                    field: TransformField::new(field_raw.mapv(|v| (v as f64).clamp(-1.0, 1.0)))?,
                    missing: ProbabilityMask::new(
                        missing.mapv(|v| (v as f64).clamp(0.0, 1.0)),
                    )
                    .expect("sigmoid output"),
                    obsolete: ProbabilityMask::new(
                        obsolete.mapv(|v| (v as f64).clamp(0.0, 1.0)),
                    )
                    .expect("sigmoid output"),
                })
            }
        }
    }
}
