use std::collections::HashMap;

use gama_tensor::{par, Activation, Adam, AdamConfig, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::fit::{ensure_finite, epoch_batches, TrainingCurve};
use super::{check_image, Conv, Linear, Model, ModelKind, ParamStore, EMBED_DIM};
use crate::error::{GamaError, Result};
use crate::scenegen::{ImageDims, SceneDataset};

pub const PREFIX: &str = "a photo depicts";
/// Non-class words every vocabulary carries.
pub const PROMPT_WORDS: [&str; 4] = ["a", "photo", "depicts", "and"];

const INIT_TEMPERATURE: f64 = 0.07;
const MIN_TEMPERATURE: f64 = 1e-3;
const MAX_TEMPERATURE: f64 = 100.0;

/// Prompt naming every set class, e.g. `a photo depicts disk and ring`.
pub fn label_prompt(class_names: &[String], labels: &[bool]) -> String {
    let names: Vec<&str> = labels
        .iter()
        .zip(class_names)
        .filter(|(&b, _)| b)
        .map(|(_, n)| n.as_str())
        .collect();
    format!("{PREFIX} {}", names.join(" and "))
}

pub fn class_prompt(name: &str) -> String {
    format!("{PREFIX} {name}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub vocab: Vec<String>,
    pub token_dim: usize,
    pub hidden: usize,
    pub dims: ImageDims,
}

impl EncoderConfig {
    pub fn for_classes(class_names: &[String], dims: ImageDims) -> Self {
        let mut vocab: Vec<String> = PROMPT_WORDS.iter().map(|w| w.to_string()).collect();
        vocab.extend(class_names.iter().cloned());
        Self {
            embed_dim: EMBED_DIM,
            vocab,
            token_dim: 32,
            hidden: 64,
            dims,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointEncoder {
    config: EncoderConfig,
    params: ParamStore,
    convs: [Conv; 2],
    img_fc: Linear,
    img_out: Linear,
    table: usize,
    txt_fc: Linear,
    txt_out: Linear,
    log_scale: usize,
    index: HashMap<String, usize>,
}

impl Model for JointEncoder {
    const KIND: ModelKind = ModelKind::Encoder;
    type Config = EncoderConfig;

    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn architecture_id(&self) -> u16 {
        0
    }

    fn build(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.embed_dim == 0 || config.vocab.is_empty() {
            return Err(GamaError::config(
                "encoder",
                "needs a positive embedding size and a vocabulary",
            ));
        }
        let mut index = HashMap::new();
        for (i, w) in config.vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(GamaError::config(
                    "encoder.vocab",
                    format!("duplicate word {w:?}"),
                ));
            }
        }
        let mut p = ParamStore::default();
        let convs = [
            Conv::new(
                &mut p,
                "image.conv1",
                config.dims.channels,
                16,
                3,
                2,
                rng,
                1.0,
            )?,
            Conv::new(&mut p, "image.conv2", 16, 32, 3, 2, rng, 1.0)?,
        ];
        let img_fc = Linear::new(&mut p, "image.fc", 32, config.hidden, rng)?;
        let img_out = Linear::new(&mut p, "image.out", config.hidden, config.embed_dim, rng)?;
        let table = p.add(
            "text.embedding",
            Tensor::randn(vec![config.vocab.len(), config.token_dim], 1.0, rng)?,
        );
        let txt_fc = Linear::new(&mut p, "text.fc", config.token_dim, config.hidden, rng)?;
        let txt_out = Linear::new(&mut p, "text.out", config.hidden, config.embed_dim, rng)?;
        let log_scale = p.add(
            "logit_scale",
            Tensor::from_slice(&[(1.0 / INIT_TEMPERATURE).ln() as f32])?,
        );
        Ok(Self {
            config: config.clone(),
            params: p,
            convs,
            img_fc,
            img_out,
            table,
            txt_fc,
            txt_out,
            log_scale,
            index,
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl JointEncoder {
    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn dims(&self) -> ImageDims {
        self.config.dims
    }

    pub fn temperature(&self) -> f64 {
        (-(self.params.tensors()[self.log_scale].data()[0] as f64)).exp()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let tokens: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                self.index.get(w).copied().ok_or_else(|| {
                    GamaError::Data(format!("word {w:?} is not in the encoder vocabulary"))
                })
            })
            .collect::<Result<_>>()?;
        if tokens.is_empty() {
            return Err(GamaError::Data("empty prompt".into()));
        }
        Ok(tokens)
    }

    /// Unnormalised image-tower output.
    pub fn image_forward(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, p, h)?;
            h = tape.activation(h, Activation::Relu)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let h = self.img_fc.forward(tape, p, pooled)?;
        let h = tape.activation(h, Activation::Relu)?;
        self.img_out.forward(tape, p, h)
    }

    /// Unnormalised text-tower output for a token sequence.
    pub fn text_forward(&self, tape: &mut Tape<f32>, p: &[Var], tokens: &[usize]) -> Result<Var> {
        let v = self.config.vocab.len();
        let mut weights = vec![0.0f32; v];
        let w = 1.0 / tokens.len() as f32;
        for &t in tokens {
            weights[t] += w;
        }
        let weights = tape.constant(&[v], weights)?;
        let table_t = tape.transpose(p[self.table])?;
        let pooled = tape.matvec(table_t, weights)?;
        let h = self.txt_fc.forward(tape, p, pooled)?;
        let h = tape.activation(h, Activation::Relu)?;
        self.txt_out.forward(tape, p, h)
    }

    /// Unit-norm image embedding.
    pub fn encode_image(&self, image: &[f32]) -> Result<Vec<f32>> {
        check_image(self.config.dims, image)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(&self.config.dims.shape(), image.to_vec())?;
        let e = self.image_forward(&mut tape, &p, x)?;
        let n = tape.normalize_l2(e)?;
        Ok(tape.value(n).to_vec())
    }

    /// Unit-norm text embedding.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = self.tokenize(text)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let e = self.text_forward(&mut tape, &p, &tokens)?;
        let n = tape.normalize_l2(e)?;
        Ok(tape.value(n).to_vec())
    }
}

/// Symmetric InfoNCE over `sim = exp(log_scale)·U·Vᵀ`.
///
/// `u` holds B image rows, `v` holds P distinct prompt rows and `targets[i]`
/// is the prompt of image i. The image→text term is ordinary cross-entropy;
/// the text→image term spreads each prompt's target uniformly over the images
/// that carry it.
pub fn info_nce_loss(
    tape: &mut Tape<f32>,
    u: Var,
    v: Var,
    log_scale: Var,
    targets: &[usize],
) -> Result<Var> {
    let (b, p) = (tape.shape(u)[0], tape.shape(v)[0]);
    if targets.len() != b || targets.iter().any(|&t| t >= p) {
        return Err(GamaError::Data(
            "InfoNCE targets do not match the batch".into(),
        ));
    }
    let vt = tape.transpose(v)?;
    let raw = tape.matmul(u, vt)?;
    let scale = tape.exp(log_scale)?;
    let sim = tape.mul_scalar(raw, scale)?;

    let mut row_t = vec![0.0f32; b * p];
    for (i, &t) in targets.iter().enumerate() {
        row_t[i * p + t] = -1.0 / b as f32;
    }
    let mut counts = vec![0usize; p];
    for &t in targets {
        counts[t] += 1;
    }
    let mut col_t = vec![0.0f32; p * b];
    for (i, &t) in targets.iter().enumerate() {
        col_t[t * b + i] = -1.0 / (counts[t] as f32 * p as f32);
    }

    let row_lp = tape.log_softmax_rows(sim)?;
    let row_w = tape.constant(&[b, p], row_t)?;
    let row = tape.mul(row_lp, row_w)?;
    let row = tape.sum(row)?;
    let sim_t = tape.transpose(sim)?;
    let col_lp = tape.log_softmax_rows(sim_t)?;
    let col_w = tape.constant(&[p, b], col_t)?;
    let col = tape.mul(col_lp, col_w)?;
    let col = tape.sum(col)?;
    let both = tape.add(row, col)?;
    Ok(tape.scale(both, 0.5)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub embed_dim: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 32,
            lr: 2e-3,
            seed: 1,
            embed_dim: EMBED_DIM,
        }
    }
}

const STREAM_INIT: u64 = 20;
const STREAM_ORDER: u64 = 21;

struct ImageTape {
    tape: Tape<f32>,
    params: Vec<Var>,
    out: Var,
}

fn add_into(acc: &mut [Vec<f32>], grads: Vec<Vec<f32>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += y;
        }
    }
}

/// One contrastive step over a batch; returns the loss and parameter gradients.
fn contrastive_step(
    enc: &JointEncoder,
    dataset: &SceneDataset,
    batch: &[usize],
    names: &[String],
) -> Result<(f64, Vec<Vec<f32>>)> {
    let k = enc.config.embed_dim;
    let shape = enc.config.dims.shape();
    let mut images: Vec<ImageTape> = par::map(batch, |&i| -> Result<ImageTape> {
        let mut tape = Tape::new();
        let params = enc.params.bind(&mut tape, true)?;
        let x = tape.constant(&shape, dataset.samples[i].image.data().to_vec())?;
        let e = enc.image_forward(&mut tape, &params, x)?;
        let out = tape.normalize_l2(e)?;
        Ok(ImageTape { tape, params, out })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut prompts: Vec<String> = Vec::new();
    let mut targets = Vec::with_capacity(batch.len());
    for &i in batch {
        let text = label_prompt(names, &dataset.samples[i].labels);
        let t = match prompts.iter().position(|p| *p == text) {
            Some(t) => t,
            None => {
                prompts.push(text);
                prompts.len() - 1
            }
        };
        targets.push(t);
    }
    let mut text_tape = Tape::new();
    let text_params = enc.params.bind(&mut text_tape, true)?;
    let mut text_outs = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let e = enc.text_forward(&mut text_tape, &text_params, &enc.tokenize(p)?)?;
        text_outs.push(text_tape.normalize_l2(e)?);
    }

    let mut lt = Tape::new();
    let u_data: Vec<f32> = images
        .iter()
        .flat_map(|it| it.tape.value(it.out).to_vec())
        .collect();
    let v_data: Vec<f32> = text_outs
        .iter()
        .flat_map(|&o| text_tape.value(o).to_vec())
        .collect();
    let u = lt.input(&[batch.len(), k], u_data, true)?;
    let v = lt.input(&[prompts.len(), k], v_data, true)?;
    let ls = lt.leaf(
        &enc.params.tensors()[enc.log_scale]
            .clone()
            .with_requires_grad(true),
    );
    let loss = info_nce_loss(&mut lt, u, v, ls, &targets)?;
    lt.backward(loss)?;
    let gu = lt
        .grad(u)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; batch.len() * k]);
    let gv = lt
        .grad(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; prompts.len() * k]);
    let gls = lt.grad(ls).map(|g| g[0]).unwrap_or(0.0);

    let seeds: Vec<&[f32]> = gu.chunks(k).collect();
    par::try_for_each_mut(&mut images, |i, it| {
        it.tape.backward_with_seed(it.out, seeds[i])
    })?;
    for (j, &o) in text_outs.iter().enumerate() {
        text_tape.backward_with_seed(o, &gv[j * k..(j + 1) * k])?;
    }

    let mut grads: Vec<Vec<f32>> = enc
        .params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.numel()])
        .collect();
    for it in &images {
        add_into(&mut grads, enc.params.grads(&it.tape, &it.params));
    }
    add_into(&mut grads, enc.params.grads(&text_tape, &text_params));
    grads[enc.log_scale][0] += gls;
    Ok((lt.item(loss) as f64, grads))
}

/// Contrastive pretraining of both towers on ground-truth label prompts.
pub fn pretrain_joint_encoder(
    dataset: &SceneDataset,
    cfg: &EncoderTrainConfig,
) -> Result<(JointEncoder, TrainingCurve)> {
    if dataset.split.train.len() < 2 {
        return Err(GamaError::Data(
            "contrastive pretraining needs at least two training samples".into(),
        ));
    }
    if cfg.batch < 2 || cfg.lr <= 0.0 {
        return Err(GamaError::config(
            "encoder",
            "batch must be at least 2 and lr positive",
        ));
    }
    let names = dataset.class_names();
    let mut config = EncoderConfig::for_classes(&names, dataset.dims);
    config.embed_dim = cfg.embed_dim;
    let mut enc = JointEncoder::build(&config, &mut Rng::substream(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
        enc.params.tensors(),
    );
    let train = &dataset.split.train;
    let eval_batches: Vec<Vec<usize>> = train
        .chunks(cfg.batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect();
    let eval = |enc: &JointEncoder| -> Result<f64> {
        let mut total = 0.0;
        for b in &eval_batches {
            total += contrastive_step(enc, dataset, b, &names)?.0;
        }
        Ok(total / eval_batches.len() as f64)
    };
    let initial_loss = eval(&enc)?;
    ensure_finite(initial_loss, "encoder")?;

    let (lo, hi) = (
        (1.0 / MAX_TEMPERATURE).ln() as f32,
        (1.0 / MIN_TEMPERATURE).ln() as f32,
    );
    let mut order_rng = Rng::substream(cfg.seed, STREAM_ORDER);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = epoch_batches(train, cfg.batch, &mut order_rng)
            .into_iter()
            .filter(|b| b.len() >= 2)
            .collect();
        let mut sum = 0.0;
        for batch in &batches {
            let (loss, grads) = contrastive_step(&enc, dataset, batch, &names)?;
            ensure_finite(loss, "encoder")?;
            adam.step(enc.params.tensors_mut(), &grads)?;
            let ls = &mut enc.params.tensors_mut()[enc.log_scale].data_mut()[0];
            *ls = ls.clamp(lo, hi);
            sum += loss;
        }
        epoch_losses.push(sum / batches.len().max(1) as f64);
    }
    let final_loss = eval(&enc)?;
    Ok((
        enc,
        TrainingCurve {
            initial_loss,
            epoch_losses,
            final_loss,
        },
    ))
}

/// Mean rank (1 = best) of each test image's true prompt among `distractors`
/// random label-set prompts of one to three classes.
pub fn retrieval_mean_rank(
    enc: &JointEncoder,
    dataset: &SceneDataset,
    distractors: usize,
    seed: u64,
) -> Result<f64> {
    let test = dataset.test();
    if test.is_empty() {
        return Err(GamaError::Data("test split is empty".into()));
    }
    let names = dataset.class_names();
    let c = names.len();
    let mut rng = Rng::substream(seed, 22);
    let jobs: Vec<(usize, Vec<Vec<bool>>)> = test
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut sets = Vec::with_capacity(distractors);
            while sets.len() < distractors {
                let size = 1 + rng.below(3.min(c));
                let mut ids: Vec<usize> = (0..c).collect();
                rng.shuffle(&mut ids);
                let mut set = vec![false; c];
                for &i in &ids[..size] {
                    set[i] = true;
                }
                if set != s.labels {
                    sets.push(set);
                }
            }
            (t, sets)
        })
        .collect();
    let ranks = par::map(&jobs, |(t, sets)| -> Result<f64> {
        let s = test[*t];
        let img = enc.encode_image(s.image.data())?;
        let sim = |labels: &[bool]| -> Result<f32> {
            let e = enc.encode_text(&label_prompt(&names, labels))?;
            Ok(img.iter().zip(&e).map(|(a, b)| a * b).sum())
        };
        let truth = sim(&s.labels)?;
        let mut rank = 1.0;
        for set in sets {
            if sim(set)? > truth {
                rank += 1.0;
            }
        }
        Ok(rank)
    });
    let mut total = 0.0;
    for r in ranks {
        total += r?;
    }
    Ok(total / test.len() as f64)
}
