//! Minimal deterministic neural-network engine: dense, convolutional, and
//! frozen random-feature layers, trained with one-hot, distillation, mixed,
//! or mid-run-switched objectives.
//!
//! Scope is desk-scale experiments. Everything is f64, single-threaded, and
//! bitwise reproducible for a fixed seed and plan.

mod checkpoint;
mod forward;
mod loss;
mod params;
#[cfg(test)]
mod tests;
mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_dir, save_checkpoint, save_checkpoint_json, spec_digest,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{forward, forward_trace, ForwardTrace};
pub use loss::{
    loss_and_grad, mode_uses_teacher, resolve_loss_mode, softmax, softmax_rows, BatchTargets,
    BlendWeights, LossMode, ProbSource, ProbTable,
};
pub use params::{init_params, LayerParams, NetworkParams};
pub use train::{
    accuracy, distill_pipeline, probtable_from_model, train, Checkpoint, CheckpointCadence,
    DistillOutcome, Optimizer, TrainDuration, TrainPlan,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch example {index} has no teacher probability row")]
    MissingTeacherRow { index: usize },
    #[error("loss diverged at step {step}: {loss}")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("invalid plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Shape of one example as the network sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    /// Flat feature vector of the given length.
    Flat(usize),
    /// Row-major image, channel-last: index (y, x, ch) lives at
    /// `(y * w + x) * c + ch`.
    Image { h: usize, w: usize, c: usize },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match self {
            InputShape::Flat(n) => *n,
            InputShape::Image { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Dense { input: usize, output: usize },
    Relu,
    Conv2d { kernel: (usize, usize), in_channels: usize, out_channels: usize },
    MaxPool { h: usize, w: usize },
    Flatten,
    /// Frozen random projection drawn once from its own seed; never updated.
    RandomFeatures { count: usize, seed: u64 },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::RandomFeatures { .. }
        )
    }
}

/// Architecture description: input shape, ordered layers, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Validates layer composition and returns the shape after each layer.
    pub fn shape_chain(&self) -> Result<Vec<InputShape>, NnError> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input;
        shapes.push(cur);
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Dense { input, output } => match cur {
                    InputShape::Flat(n) if n == *input => InputShape::Flat(*output),
                    other => {
                        return Err(NnError::ShapeMismatch(format!(
                            "layer {idx}: dense expects flat {input}, found {other:?}"
                        )))
                    }
                },
                Layer::Relu => cur,
                Layer::Conv2d { kernel, in_channels, out_channels } => match cur {
                    InputShape::Image { h, w, c }
                        if c == *in_channels && kernel.0 <= h && kernel.1 <= w
                            && kernel.0 > 0 && kernel.1 > 0 =>
                    {
                        InputShape::Image {
                            h: h - kernel.0 + 1,
                            w: w - kernel.1 + 1,
                            c: *out_channels,
                        }
                    }
                    other => {
                        return Err(NnError::ShapeMismatch(format!(
                            "layer {idx}: conv {kernel:?} on {in_channels} channels cannot apply to {other:?}"
                        )))
                    }
                },
                Layer::MaxPool { h: ph, w: pw } => match cur {
                    InputShape::Image { h, w, c } if *ph > 0 && *pw > 0 && *ph <= h && *pw <= w => {
                        InputShape::Image { h: h / ph, w: w / pw, c }
                    }
                    other => {
                        return Err(NnError::ShapeMismatch(format!(
                            "layer {idx}: pool {ph}x{pw} cannot apply to {other:?}"
                        )))
                    }
                },
                Layer::Flatten => InputShape::Flat(cur.len()),
                Layer::RandomFeatures { count, .. } => {
                    if idx != 0 {
                        return Err(NnError::ShapeMismatch(format!(
                            "layer {idx}: random features must be the first layer"
                        )));
                    }
                    match cur {
                        InputShape::Flat(_) => InputShape::Flat(*count),
                        other => {
                            return Err(NnError::ShapeMismatch(format!(
                                "random features need a flat input, found {other:?}"
                            )))
                        }
                    }
                }
            };
            shapes.push(cur);
        }
        match cur {
            InputShape::Flat(n) if n == self.num_classes => Ok(shapes),
            other => Err(NnError::ShapeMismatch(format!(
                "network ends in {other:?}, expected flat {} for the class logits",
                self.num_classes
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_classes < 2 {
            return Err(NnError::ShapeMismatch(
                "need at least 2 classes".to_string(),
            ));
        }
        self.shape_chain().map(|_| ())
    }

    /// Spec-layer indices of the layers that carry parameters, in order.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }
}
