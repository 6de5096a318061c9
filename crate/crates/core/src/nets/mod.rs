//! Model families: surrogate classifier, joint image-text encoder and perturbation generator.

pub(crate) mod checkpoint;
mod encoder;
mod fit;
mod generator;
mod surrogate;

pub use checkpoint::{
    load_checkpoint, peek_checkpoint, save_checkpoint, CheckpointMeta, TrainingMeta,
};
pub use encoder::{
    class_prompt, label_prompt, pretrain_joint_encoder, retrieval_mean_rank, EncoderConfig,
    EncoderTrainConfig, JointEncoder, PREFIX, PROMPT_WORDS,
};
pub use fit::TrainingCurve;
pub use generator::{GeneratorConfig, PerturbationGenerator};
pub use surrogate::{
    bce_loss, predict_labels, train_surrogate, SurrogateArch, SurrogateClassifier, SurrogateConfig,
    SurrogateTrainConfig, Task,
};

use gama_tensor::{Rng, Tape, Tensor, Var};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GamaError, Result};

/// Feature width shared by the surrogate mid-layer and the joint encoder.
pub const EMBED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Surrogate = 0,
    Encoder = 1,
    Generator = 2,
}

impl ModelKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ModelKind::Surrogate),
            1 => Ok(ModelKind::Encoder),
            2 => Ok(ModelKind::Generator),
            other => Err(GamaError::Data(format!("unknown model kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Surrogate => "surrogate",
            ModelKind::Encoder => "encoder",
            ModelKind::Generator => "generator",
        }
    }
}

/// Ordered named parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Put every parameter on the tape; trainable ones become gradient leaves.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| Ok(tape.input(t.shape(), t.data().to_vec(), trainable)?))
            .collect()
    }

    /// Gradients of the bound parameters, zeros where none reached a leaf.
    pub fn grads(&self, tape: &Tape<f32>, vars: &[Var]) -> Vec<Vec<f32>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace values from a loaded table, requiring identical names and shapes.
    pub fn load_from(&mut self, named: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(GamaError::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(GamaError::Data(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(GamaError::Data(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// 2-D convolution with per-channel bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// He-initialised `k×k` convolution; `gain` scales the initial weights.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
        gain: f64,
    ) -> Result<Self> {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(vec![cout, cin, k, k], std, rng)?,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout])?);
        Ok(Self {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], self.stride, self.pad)?;
        Ok(tape.add_channel_bias(y, p[self.b])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (1.0 / input as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(vec![output, input], std, rng)?,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![output])?);
        Ok(Self { w, b })
    }

    pub(crate) fn forward(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matvec(p[self.w], x)?;
        Ok(tape.add(y, p[self.b])?)
    }
}

/// Common surface for checkpointing.
pub trait Model: Sized {
    const KIND: ModelKind;
    type Config: Clone + Serialize + DeserializeOwned;

    fn config(&self) -> &Self::Config;
    fn architecture_id(&self) -> u16;
    /// Fresh randomly initialised model.
    fn build(config: &Self::Config, rng: &mut Rng) -> Result<Self>;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn fingerprint(&self) -> String {
        self.params().fingerprint()
    }
}

pub(crate) fn check_image(expected: crate::scenegen::ImageDims, image: &[f32]) -> Result<()> {
    if image.len() != expected.numel() {
        return Err(GamaError::Tensor(gama_tensor::TensorError::ShapeMismatch {
            op: "model input",
            detail: format!("{} values for a {:?} image", image.len(), expected.shape()),
        }));
    }
    Ok(())
}
