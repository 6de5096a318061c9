use gama_tensor::{Activation, Adam, AdamConfig, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use super::fit::{batch_gradients, ensure_finite, epoch_batches, mean_loss, TrainingCurve};
use super::{check_image, Conv, Linear, Model, ModelKind, ParamStore, EMBED_DIM};
use crate::error::{GamaError, Result};
use crate::eval::{pgd_attack, PgdConfig};
use crate::scenegen::{ImageDims, Sample, SceneDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MultiLabel,
    SingleLabel,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::MultiLabel => "multi_label",
            Task::SingleLabel => "single_label",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateArch {
    /// Two wide strided convolutions.
    ShallowWide = 0,
    /// Four narrow convolutions.
    DeepNarrow = 1,
    /// Strided stem followed by one residual block.
    CustomBlock = 2,
}

impl SurrogateArch {
    pub const ALL: [SurrogateArch; 3] = [
        SurrogateArch::ShallowWide,
        SurrogateArch::DeepNarrow,
        SurrogateArch::CustomBlock,
    ];

    pub fn from_id(id: u16) -> Result<Self> {
        Self::ALL.get(id as usize).copied().ok_or_else(|| {
            GamaError::config(
                "arch",
                format!("unknown architecture id {id}; expected 0, 1 or 2"),
            )
        })
    }

    pub fn id(self) -> u16 {
        self as u16
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub arch: SurrogateArch,
    pub classes: usize,
    pub embed_dim: usize,
    pub dims: ImageDims,
    pub task: Task,
    /// Scene distribution the model is trained on.
    pub distribution_id: String,
}

#[derive(Debug, Clone)]
pub struct SurrogateClassifier {
    config: SurrogateConfig,
    params: ParamStore,
    stem: Vec<Conv>,
    block: Option<[Conv; 2]>,
    feature: Linear,
    head: Linear,
}

impl Model for SurrogateClassifier {
    const KIND: ModelKind = ModelKind::Surrogate;
    type Config = SurrogateConfig;

    fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    fn architecture_id(&self) -> u16 {
        self.config.arch.id()
    }

    fn build(config: &SurrogateConfig, rng: &mut Rng) -> Result<Self> {
        if config.classes < 2 || config.embed_dim == 0 {
            return Err(GamaError::config(
                "surrogate",
                "needs at least 2 classes and a positive embedding size",
            ));
        }
        let mut p = ParamStore::default();
        let cin = config.dims.channels;
        let (stem, block, width) = match config.arch {
            SurrogateArch::ShallowWide => (
                vec![
                    Conv::new(&mut p, "conv1", cin, 16, 3, 2, rng, 1.0)?,
                    Conv::new(&mut p, "conv2", 16, 32, 3, 2, rng, 1.0)?,
                ],
                None,
                32,
            ),
            SurrogateArch::DeepNarrow => (
                vec![
                    Conv::new(&mut p, "conv1", cin, 8, 3, 2, rng, 1.0)?,
                    Conv::new(&mut p, "conv2", 8, 16, 3, 1, rng, 1.0)?,
                    Conv::new(&mut p, "conv3", 16, 16, 3, 2, rng, 1.0)?,
                    Conv::new(&mut p, "conv4", 16, 32, 3, 1, rng, 1.0)?,
                ],
                None,
                32,
            ),
            SurrogateArch::CustomBlock => (
                vec![
                    Conv::new(&mut p, "stem1", cin, 16, 3, 2, rng, 1.0)?,
                    Conv::new(&mut p, "stem2", 16, 16, 3, 2, rng, 1.0)?,
                ],
                Some([
                    Conv::new(&mut p, "block.a", 16, 16, 3, 1, rng, 1.0)?,
                    Conv::new(&mut p, "block.b", 16, 16, 3, 1, rng, 0.5)?,
                ]),
                16,
            ),
        };
        let feature = Linear::new(&mut p, "feature", width, config.embed_dim, rng)?;
        let head = Linear::new(&mut p, "head", config.embed_dim, config.classes, rng)?;
        Ok(Self {
            config: config.clone(),
            params: p,
            stem,
            block,
            feature,
            head,
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl SurrogateClassifier {
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn dims(&self) -> ImageDims {
        self.config.dims
    }

    pub fn distribution_id(&self) -> &str {
        &self.config.distribution_id
    }

    /// `(logits[C], feature[K])`; the feature is the unnormalised mid-layer output.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for conv in &self.stem {
            h = conv.forward(tape, p, h)?;
            h = tape.activation(h, Activation::Relu)?;
        }
        if let Some([a, b]) = &self.block {
            let r = a.forward(tape, p, h)?;
            let r = tape.activation(r, Activation::Relu)?;
            let r = b.forward(tape, p, r)?;
            let sum = tape.add(h, r)?;
            h = tape.activation(sum, Activation::Relu)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let feature = self.feature.forward(tape, p, pooled)?;
        let act = tape.activation(feature, Activation::Relu)?;
        let logits = self.head.forward(tape, p, act)?;
        Ok((logits, feature))
    }

    /// Forward pass of one image with frozen weights.
    pub fn infer(&self, image: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        check_image(self.config.dims, image)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(&self.config.dims.shape(), image.to_vec())?;
        let (logits, feature) = self.forward(&mut tape, &p, x)?;
        Ok((tape.value(logits).to_vec(), tape.value(feature).to_vec()))
    }

    /// Task loss of one sample on the tape.
    pub fn loss(&self, tape: &mut Tape<f32>, logits: Var, labels: &[bool]) -> Result<Var> {
        match self.config.task {
            Task::MultiLabel => bce_loss(tape, logits, labels),
            Task::SingleLabel => {
                let target = single_label(labels)?;
                let c = self.config.classes;
                let row = tape.reshape(logits, &[1, c])?;
                let logp = tape.log_softmax_rows(row)?;
                let mut onehot = vec![0.0; c];
                onehot[target] = -1.0;
                let sel = tape.constant(&[1, c], onehot)?;
                let picked = tape.mul(logp, sel)?;
                Ok(tape.sum(picked)?)
            }
        }
    }
}

fn single_label(labels: &[bool]) -> Result<usize> {
    let on: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    match on.as_slice() {
        [c] => Ok(*c),
        _ => Err(GamaError::Data(format!(
            "single-label model needs exactly one label per sample, found {}",
            on.len()
        ))),
    }
}

/// Mean binary cross-entropy with logits: `mean(softplus(l) − y·l)`.
pub fn bce_loss(tape: &mut Tape<f32>, logits: Var, labels: &[bool]) -> Result<Var> {
    if tape.value(logits).len() != labels.len() {
        return Err(GamaError::Tensor(gama_tensor::TensorError::ShapeMismatch {
            op: "bce_loss",
            detail: format!(
                "{} logits for {} labels",
                tape.value(logits).len(),
                labels.len()
            ),
        }));
    }
    let sp = tape.activation(logits, Activation::Softplus)?;
    let y = tape.constant(
        &[labels.len()],
        labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let yl = tape.mul(y, logits)?;
    let diff = tape.sub(sp, yl)?;
    Ok(tape.mean(diff)?)
}

/// Predicted label set: multi-label thresholds sigmoid at 0.5, single-label takes the argmax.
pub fn predict_labels(model: &SurrogateClassifier, image: &[f32]) -> Result<Vec<bool>> {
    let (logits, _) = model.infer(image)?;
    Ok(match model.task() {
        Task::MultiLabel => logits.iter().map(|&l| l >= 0.0).collect(),
        Task::SingleLabel => {
            let best = crate::eval::argmax(&logits);
            (0..logits.len()).map(|i| i == best).collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateTrainConfig {
    pub arch: SurrogateArch,
    pub embed_dim: usize,
    pub task: Task,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Adversarial training: half of each batch replaced by PGD examples.
    pub pgd: Option<PgdConfig>,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            arch: SurrogateArch::ShallowWide,
            embed_dim: EMBED_DIM,
            task: Task::MultiLabel,
            epochs: 30,
            batch: 32,
            lr: 3e-3,
            seed: 1,
            pgd: None,
        }
    }
}

const STREAM_INIT: u64 = 10;
const STREAM_ORDER: u64 = 11;

fn sample_loss_and_grads(
    model: &SurrogateClassifier,
    image: &[f32],
    labels: &[bool],
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true)?;
    let x = tape.constant(&model.config.dims.shape(), image.to_vec())?;
    let (logits, _) = model.forward(&mut tape, &p, x)?;
    let loss = model.loss(&mut tape, logits, labels)?;
    tape.backward(loss)?;
    Ok((tape.item(loss) as f64, model.params.grads(&tape, &p)))
}

fn sample_loss(model: &SurrogateClassifier, s: &Sample) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false)?;
    let x = tape.constant(&model.config.dims.shape(), s.image.data().to_vec())?;
    let (logits, _) = model.forward(&mut tape, &p, x)?;
    let loss = model.loss(&mut tape, logits, &s.labels)?;
    Ok(tape.item(loss) as f64)
}

/// Train a classifier on the dataset's training split.
pub fn train_surrogate(
    dataset: &SceneDataset,
    cfg: &SurrogateTrainConfig,
) -> Result<(SurrogateClassifier, TrainingCurve)> {
    if dataset.split.train.is_empty() {
        return Err(GamaError::Data("training split is empty".into()));
    }
    if cfg.batch == 0 || cfg.lr <= 0.0 {
        return Err(GamaError::config(
            "surrogate",
            "batch and lr must be positive",
        ));
    }
    if cfg.task == Task::SingleLabel {
        for s in dataset.train() {
            single_label(&s.labels)?;
        }
    }
    let config = SurrogateConfig {
        arch: cfg.arch,
        classes: dataset.classes(),
        embed_dim: cfg.embed_dim,
        dims: dataset.dims,
        task: cfg.task,
        distribution_id: dataset.distribution_id.clone(),
    };
    let mut model =
        SurrogateClassifier::build(&config, &mut Rng::substream(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let train = &dataset.split.train;
    let initial_loss = mean_loss(train, |i| sample_loss(&model, &dataset.samples[i]))?;
    ensure_finite(initial_loss, "surrogate")?;
    let mut order_rng = Rng::substream(cfg.seed, STREAM_ORDER);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train, cfg.batch, &mut order_rng);
        for batch in &batches {
            let positions: Vec<usize> = (0..batch.len()).collect();
            let half = batch.len() / 2;
            let (loss, grads) = batch_gradients(&model.params, &positions, |pos| {
                let s = &dataset.samples[batch[pos]];
                match &cfg.pgd {
                    Some(pgd) if pos < half => {
                        let adv = pgd_attack(&model, s.image.data(), &s.labels, pgd)?;
                        sample_loss_and_grads(&model, &adv, &s.labels)
                    }
                    _ => sample_loss_and_grads(&model, s.image.data(), &s.labels),
                }
            })?;
            ensure_finite(loss, "surrogate")?;
            adam.step(model.params.tensors_mut(), &grads)?;
            sum += loss;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    let final_loss = mean_loss(train, |i| sample_loss(&model, &dataset.samples[i]))?;
    ensure_finite(final_loss, "surrogate")?;
    Ok((
        model,
        TrainingCurve {
            initial_loss,
            epoch_losses,
            final_loss,
        },
    ))
}
