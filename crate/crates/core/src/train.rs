//! Generator losses and the generator training loop.

use std::fmt;
use std::str::FromStr;

use gama_tensor::{par, Activation, Adam, AdamConfig, Real, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::nets::{
    GeneratorConfig, JointEncoder, Model, PerturbationGenerator, SurrogateClassifier,
};
use crate::promptbank::{least_similar, sample_candidates, PromptBank};
use crate::scenegen::SceneDataset;

/// Probability floor used by the BCE baselines.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Gama,
    LsOnly,
    GapBce,
    CdaRelBce,
    AblateImgOnly,
    AblateImgTxt,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] = [
        AttackMethod::Gama,
        AttackMethod::LsOnly,
        AttackMethod::GapBce,
        AttackMethod::CdaRelBce,
        AttackMethod::AblateImgOnly,
        AttackMethod::AblateImgTxt,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AttackMethod::Gama => "gama",
            AttackMethod::LsOnly => "ls_only",
            AttackMethod::GapBce => "gap_bce",
            AttackMethod::CdaRelBce => "cda_rel_bce",
            AttackMethod::AblateImgOnly => "ablate_img_only",
            AttackMethod::AblateImgTxt => "ablate_img_txt",
        }
    }

    pub fn uses_s(self) -> bool {
        matches!(self, AttackMethod::Gama | AttackMethod::LsOnly)
    }

    pub fn uses_img(self) -> bool {
        matches!(
            self,
            AttackMethod::Gama | AttackMethod::AblateImgOnly | AttackMethod::AblateImgTxt
        )
    }

    pub fn uses_txt(self) -> bool {
        matches!(self, AttackMethod::Gama | AttackMethod::AblateImgTxt)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, AttackMethod::GapBce | AttackMethod::CdaRelBce)
    }

    /// Whether the joint encoder is needed at all.
    pub fn needs_encoder(self) -> bool {
        self.uses_img() || self.uses_txt()
    }

    pub fn needs_bank(self) -> bool {
        self.uses_txt()
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AttackMethod {
    type Err = GamaError;

    fn from_str(s: &str) -> Result<Self> {
        AttackMethod::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| GamaError::config("method", format!("unknown method {s:?}")))
    }
}

fn check_len<T: Real>(tape: &Tape<T>, what: &str, a: Var, b: Var) -> Result<usize> {
    let (la, lb) = (tape.value(a).len(), tape.value(b).len());
    if la != lb || la == 0 {
        return Err(GamaError::Compat(format!(
            "{what}: vectors of length {la} and {lb}"
        )));
    }
    Ok(la)
}

/// `cs(z, z̃)`.
pub fn loss_s<T: Real>(tape: &mut Tape<T>, z: Var, z_adv: Var) -> Result<Var> {
    check_len(tape, "loss_s", z, z_adv)?;
    Ok(tape.cosine_similarity(z, z_adv)?)
}

/// `(1/K)(‖z̃ − ρ_txt‖² + max(0, α − ‖z̃ − z‖))`.
pub fn loss_txt<T: Real>(
    tape: &mut Tape<T>,
    z_adv: Var,
    z: Var,
    rho_txt: Var,
    alpha: T,
) -> Result<Var> {
    let k = check_len(tape, "loss_txt", z_adv, z)?;
    check_len(tape, "loss_txt", z_adv, rho_txt)?;
    let pull = tape.sub(z_adv, rho_txt)?;
    let pull = tape.sum_squares(pull)?;
    let gap = tape.sub(z_adv, z)?;
    let gap = tape.norm(gap)?;
    let slack = tape.scale(gap, -T::one())?;
    let slack = tape.add_scalar(slack, alpha)?;
    let hinge = tape.activation(slack, Activation::Relu)?;
    let sum = tape.add(pull, hinge)?;
    Ok(tape.scale(sum, T::one() / T::lit(k as f64))?)
}

/// `−(1/K)‖ρ_img − z̃‖²`.
pub fn loss_img<T: Real>(tape: &mut Tape<T>, rho_img: Var, z_adv: Var) -> Result<Var> {
    let k = check_len(tape, "loss_img", rho_img, z_adv)?;
    let d = tape.sub(rho_img, z_adv)?;
    let d = tape.sum_squares(d)?;
    Ok(tape.scale(d, -T::one() / T::lit(k as f64))?)
}

/// Negated mean binary cross-entropy of `σ(logits)` against `labels`.
fn neg_bce<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[bool]) -> Result<Var> {
    let c = labels.len();
    let y: Vec<T> = labels
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let p = tape.activation(logits, Activation::Sigmoid)?;
    let p = tape.clamp(p, T::lit(PROB_FLOOR), T::lit(1.0 - PROB_FLOOR))?;
    let ln_p = tape.log(p)?;
    let q = tape.scale(p, -T::one())?;
    let q = tape.add_scalar(q, T::one())?;
    let ln_q = tape.log(q)?;
    let yv = tape.constant(&[c], y)?;
    let nyv = tape.constant(&[c], not_y)?;
    let a = tape.mul(ln_p, yv)?;
    let b = tape.mul(ln_q, nyv)?;
    let ll = tape.add(a, b)?;
    // −BCE = mean(y ln p + (1−y) ln(1−p)).
    Ok(tape.mean(ll)?)
}

/// Loss-level adaptations of the GAP and CDA objectives for multi-label
/// surrogates; minimising them maximises the surrogate's BCE.
pub fn baseline_loss<T: Real>(
    tape: &mut Tape<T>,
    method: AttackMethod,
    logits_clean: Var,
    logits_pert: Var,
    labels: &[bool],
) -> Result<Var> {
    let c = check_len(tape, "baseline_loss", logits_clean, logits_pert)?;
    if labels.len() != c {
        return Err(GamaError::Compat(format!(
            "baseline_loss: {c} logits for {} labels",
            labels.len()
        )));
    }
    match method {
        AttackMethod::GapBce => neg_bce(tape, logits_pert, labels),
        AttackMethod::CdaRelBce => {
            let rel = tape.sub(logits_pert, logits_clean)?;
            neg_bce(tape, rel, labels)
        }
        other => Err(GamaError::config(
            "method",
            format!("{other} is not a baseline"),
        )),
    }
}

/// Loss term values of one step (or one sample).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_s: Option<f64>,
    pub l_img: Option<f64>,
    pub l_txt: Option<f64>,
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: Option<f64>,
    pub l_img: Option<f64>,
    pub l_txt: Option<f64>,
    pub total: f64,
}

fn required<V: Copy>(v: Option<V>, method: AttackMethod, term: &str) -> Result<V> {
    v.ok_or_else(|| GamaError::config("loss", format!("{method} needs {term}")))
}

/// Combine the active terms of `method`; inactive terms are dropped.
pub fn total_loss(method: AttackMethod, parts: &LossParts) -> Result<LossBreakdown> {
    let l_s = method
        .uses_s()
        .then(|| required(parts.l_s, method, "l_s"))
        .transpose()?;
    let l_img = method
        .uses_img()
        .then(|| required(parts.l_img, method, "l_img"))
        .transpose()?;
    let l_txt = method
        .uses_txt()
        .then(|| required(parts.l_txt, method, "l_txt"))
        .transpose()?;
    let total = if method.is_baseline() {
        required(parts.baseline, method, "the baseline loss")?
    } else {
        l_s.unwrap_or(0.0) + l_img.unwrap_or(0.0) + l_txt.unwrap_or(0.0)
    };
    Ok(LossBreakdown {
        l_s,
        l_img,
        l_txt,
        total,
    })
}

/// Tape nodes for the loss terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub l_s: Option<Var>,
    pub l_img: Option<Var>,
    pub l_txt: Option<Var>,
    pub baseline: Option<Var>,
}

/// Differentiable counterpart of [`total_loss`].
pub fn total_loss_var<T: Real>(
    tape: &mut Tape<T>,
    method: AttackMethod,
    parts: &LossVars,
) -> Result<Var> {
    if method.is_baseline() {
        return required(parts.baseline, method, "the baseline loss");
    }
    let mut active = Vec::new();
    if method.uses_s() {
        active.push(required(parts.l_s, method, "l_s")?);
    }
    if method.uses_img() {
        active.push(required(parts.l_img, method, "l_img")?);
    }
    if method.uses_txt() {
        active.push(required(parts.l_txt, method, "l_txt")?);
    }
    let mut total = active[0];
    for &v in &active[1..] {
        total = tape.add(total, v)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    PerIteration,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub eps: f32,
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Prompt candidates per draw; `None` uses the batch size.
    pub candidates: Option<usize>,
    pub resample: Resample,
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            eps: 10.0 / 255.0,
            alpha: 1.0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            batch: 16,
            epochs: 10,
            seed: 1,
            candidates: None,
            resample: Resample::PerIteration,
            generator: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(GamaError::config(
                "eps",
                format!("must be in (0, 1], got {}", self.eps),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(GamaError::config(
                "alpha",
                format!("must be positive, got {}", self.alpha),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(GamaError::config("lr", "must be positive"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GamaError::config(
                    field,
                    format!("must be in [0, 1), got {b}"),
                ));
            }
        }
        if self.batch == 0 {
            return Err(GamaError::config("batch", "must be at least 1"));
        }
        if self.candidates == Some(0) {
            return Err(GamaError::config("candidates", "must be at least 1"));
        }
        Ok(())
    }
}

/// Frozen models feeding the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub surrogates: &'a [SurrogateClassifier],
    pub encoder: Option<&'a JointEncoder>,
    pub bank: Option<&'a PromptBank>,
}

/// One NDJSON record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_s: Option<f64>,
    pub l_img: Option<f64>,
    pub l_txt: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorRun {
    pub generator: PerturbationGenerator,
    pub method: AttackMethod,
    pub ensemble: bool,
    pub log: Vec<StepRecord>,
}

impl GeneratorRun {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[StepRecord]) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in log {
        sums[r.epoch].0 += r.total;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

pub fn log_ndjson(log: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

const STREAM_INIT: u64 = 30;
const STREAM_ORDER: u64 = 31;
const STREAM_CANDIDATES: u64 = 32;

fn normalized(v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return Err(gama_tensor::TensorError::DegenerateEmbedding {
            norm: n,
            eps: 1e-12,
        }
        .into());
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Clean-image quantities computed once before training.
struct CleanCache {
    /// `[surrogate][sample]` unit feature.
    z: Vec<Vec<Vec<f32>>>,
    /// `[surrogate][sample]` clean logits.
    logits: Vec<Vec<Vec<f32>>>,
    /// `[sample]` unit image embedding.
    rho_img: Vec<Vec<f32>>,
}

fn check_inputs(
    method: AttackMethod,
    inputs: &TrainInputs,
    dataset: &SceneDataset,
) -> Result<usize> {
    let first = inputs
        .surrogates
        .first()
        .ok_or_else(|| GamaError::config("surrogate", "at least one surrogate is required"))?;
    let k = first.embed_dim();
    for s in inputs.surrogates {
        if s.embed_dim() != k {
            return Err(GamaError::Compat(format!(
                "surrogates disagree on K: {} vs {k}",
                s.embed_dim()
            )));
        }
        if s.distribution_id() != dataset.distribution_id {
            return Err(GamaError::Compat(format!(
                "surrogate trained on {} but dataset is {}",
                s.distribution_id(),
                dataset.distribution_id
            )));
        }
        if s.dims() != dataset.dims || s.classes() != dataset.classes() {
            return Err(GamaError::Compat(
                "surrogate input size or class count differs from the dataset".into(),
            ));
        }
    }
    if method.needs_encoder() {
        let enc = inputs.encoder.ok_or_else(|| {
            GamaError::config("encoder", format!("{method} needs the joint encoder"))
        })?;
        if enc.embed_dim() != k {
            return Err(GamaError::Compat(format!(
                "encoder K={} but surrogate K={k}",
                enc.embed_dim()
            )));
        }
        if enc.dims() != dataset.dims {
            return Err(GamaError::Compat(
                "encoder input size differs from the dataset".into(),
            ));
        }
    }
    if method.needs_bank() {
        let bank = inputs
            .bank
            .ok_or_else(|| GamaError::config("bank", format!("{method} needs a prompt bank")))?;
        if bank.embed_dim() != k {
            return Err(GamaError::Compat(format!(
                "bank K={} but surrogate K={k}",
                bank.embed_dim()
            )));
        }
        let enc = inputs.encoder.expect("checked above");
        if bank.encoder_fingerprint != enc.fingerprint() {
            return Err(GamaError::Compat(
                "prompt bank was embedded with a different encoder".into(),
            ));
        }
    }
    Ok(k)
}

struct StepCtx<'a> {
    method: AttackMethod,
    inputs: TrainInputs<'a>,
    dataset: &'a SceneDataset,
    cache: &'a CleanCache,
    eps: f32,
    alpha: f32,
    k: usize,
}

/// Loss parts and generator gradients for one training sample.
fn sample_step(
    ctx: &StepCtx,
    gen: &PerturbationGenerator,
    i: usize,
    rho_txt: Option<&[f32]>,
) -> Result<(LossParts, Vec<Vec<f32>>)> {
    let k = ctx.k;
    let sample = &ctx.dataset.samples[i];
    let mut tape = Tape::<f32>::new();
    let gp = gen.params().bind(&mut tape, true)?;
    let x_adv = gen.forward(&mut tape, &gp, sample.image.data(), ctx.eps)?;
    let n = ctx.inputs.surrogates.len();
    let mut acc: [Vec<Var>; 4] = Default::default();
    for (si, s) in ctx.inputs.surrogates.iter().enumerate() {
        let sp = s.params().bind(&mut tape, false)?;
        let (logits, feature) = s.forward(&mut tape, &sp, x_adv)?;
        let z_adv = tape.normalize_l2(feature)?;
        let z = tape.constant(&[k], ctx.cache.z[si][i].clone())?;
        if ctx.method.uses_s() {
            acc[0].push(loss_s(&mut tape, z, z_adv)?);
        }
        if ctx.method.uses_img() {
            let r = tape.constant(&[k], ctx.cache.rho_img[i].clone())?;
            acc[1].push(loss_img(&mut tape, r, z_adv)?);
        }
        if let (true, Some(rt)) = (ctx.method.uses_txt(), rho_txt) {
            let r = tape.constant(&[k], rt.to_vec())?;
            acc[2].push(loss_txt(&mut tape, z_adv, z, r, ctx.alpha)?);
        }
        if ctx.method.is_baseline() {
            let c = tape.constant(&[s.classes()], ctx.cache.logits[si][i].clone())?;
            acc[3].push(baseline_loss(
                &mut tape,
                ctx.method,
                c,
                logits,
                &sample.labels,
            )?);
        }
    }
    let mut means = [None; 4];
    for (m, terms) in means.iter_mut().zip(&acc) {
        if terms.is_empty() {
            continue;
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t)?;
        }
        *m = Some(if n > 1 {
            tape.scale(sum, 1.0 / n as f32)?
        } else {
            sum
        });
    }
    let vars = LossVars {
        l_s: means[0],
        l_img: means[1],
        l_txt: means[2],
        baseline: means[3],
    };
    let total = total_loss_var(&mut tape, ctx.method, &vars)?;
    tape.backward(total)?;
    let value = |v: Option<Var>| v.map(|v| tape.item(v) as f64);
    let parts = LossParts {
        l_s: value(vars.l_s),
        l_img: value(vars.l_img),
        l_txt: value(vars.l_txt),
        baseline: value(vars.baseline),
    };
    Ok((parts, gen.params().grads(&tape, &gp)))
}

fn frozen_fingerprints(inputs: &TrainInputs) -> Vec<String> {
    let mut f: Vec<String> = inputs.surrogates.iter().map(|s| s.fingerprint()).collect();
    if let Some(e) = inputs.encoder {
        f.push(e.fingerprint());
    }
    if let Some(b) = inputs.bank {
        f.push(crate::formats::sha256_hex(
            &b.embeddings
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>(),
        ));
    }
    f
}

/// Train a perturbation generator against frozen surrogate(s).
pub fn train_generator(
    cfg: &TrainConfig,
    method: AttackMethod,
    inputs: TrainInputs,
    dataset: &SceneDataset,
) -> Result<GeneratorRun> {
    cfg.validate()?;
    let k = check_inputs(method, &inputs, dataset)?;
    if cfg.generator.dims != dataset.dims {
        return Err(GamaError::Compat(
            "generator input size differs from the dataset".into(),
        ));
    }
    let train = &dataset.split.train;
    if train.is_empty() {
        return Err(GamaError::Data("training split is empty".into()));
    }
    let before = frozen_fingerprints(&inputs);

    let idx: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut z = Vec::new();
    let mut logits = Vec::new();
    for s in inputs.surrogates {
        let out = par::map(&idx, |&i| -> Result<(Vec<f32>, Vec<f32>)> {
            let (l, f) = s.infer(dataset.samples[i].image.data())?;
            Ok((normalized(&f)?, l))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (zs, ls): (Vec<_>, Vec<_>) = out.into_iter().unzip();
        z.push(zs);
        logits.push(ls);
    }
    let rho_img = match (method.needs_encoder(), inputs.encoder) {
        (true, Some(enc)) => par::map(&idx, |&i| enc.encode_image(dataset.samples[i].image.data()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };
    let cache = CleanCache { z, logits, rho_img };
    let ctx = StepCtx {
        method,
        inputs,
        dataset,
        cache: &cache,
        eps: cfg.eps,
        alpha: cfg.alpha as f32,
        k,
    };

    let mut gen =
        PerturbationGenerator::build(&cfg.generator, &mut Rng::substream(cfg.seed, STREAM_INIT))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        },
        gen.params().tensors(),
    );
    let mut order_rng = Rng::substream(cfg.seed, STREAM_ORDER);
    let mut cand_rng = Rng::substream(cfg.seed, STREAM_CANDIDATES);
    let b = cfg.candidates.unwrap_or(cfg.batch);
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order_rng.shuffle(&mut order);
        let mut candidates = Vec::new();
        for (it, batch) in order.chunks(cfg.batch).enumerate() {
            if let (true, Some(bank)) = (method.needs_bank(), inputs.bank) {
                if it == 0 || cfg.resample == Resample::PerIteration {
                    candidates = sample_candidates(bank, b, &mut cand_rng)?;
                }
            }
            let rho_txt: Vec<Option<&[f32]>> = batch
                .iter()
                .map(|&i| match (method.needs_bank(), inputs.bank) {
                    (true, Some(bank)) => {
                        least_similar(&cache.rho_img[i], bank, &candidates).map(|(_, r)| Some(r))
                    }
                    _ => Ok(None),
                })
                .collect::<Result<_>>()?;
            let positions: Vec<usize> = (0..batch.len()).collect();
            let results = par::map(&positions, |&p| {
                sample_step(&ctx, &gen, batch[p], rho_txt[p])
            });

            let mut grads: Vec<Vec<f32>> = gen
                .params()
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect();
            let mut sums = [0.0f64; 4];
            for r in results {
                let (parts, g) = r?;
                for (s, v) in
                    sums.iter_mut()
                        .zip([parts.l_s, parts.l_img, parts.l_txt, parts.baseline])
                {
                    *s += v.unwrap_or(0.0);
                }
                for (a, gi) in grads.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(gi) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().flatten().for_each(|x| *x *= inv);
            let mean = |i: usize, on: bool| on.then(|| sums[i] / batch.len() as f64);
            let parts = LossParts {
                l_s: mean(0, method.uses_s()),
                l_img: mean(1, method.uses_img()),
                l_txt: mean(2, method.uses_txt()),
                baseline: mean(3, method.is_baseline()),
            };
            let bd = total_loss(method, &parts)?;
            if !bd.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(GamaError::Diverged(format!(
                    "generator loss became {} at step {step}",
                    bd.total
                )));
            }
            adam.step(gen.params_mut().tensors_mut(), &grads)?;
            log.push(StepRecord {
                step,
                epoch,
                l_s: bd.l_s,
                l_img: bd.l_img,
                l_txt: bd.l_txt,
                total: bd.total,
                lr: cfg.lr,
            });
            step += 1;
        }
    }

    if frozen_fingerprints(&inputs) != before {
        return Err(GamaError::FrozenMutation(
            "surrogate, encoder or bank weights changed during generator training".into(),
        ));
    }
    Ok(GeneratorRun {
        generator: gen,
        method,
        ensemble: inputs.surrogates.len() > 1,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{
        pretrain_joint_encoder, train_surrogate, EncoderTrainConfig, SurrogateTrainConfig, PREFIX,
    };
    use crate::promptbank::{build_prompts, embed_bank};
    use crate::scenegen::{compute_cooccurrence, generate_dataset, ImageDims, SceneConfig};

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.item(v)
    }

    fn c(t: &mut Tape<f64>, v: &[f64]) -> Var {
        t.constant(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn method_tags_round_trip() {
        for m in AttackMethod::ALL {
            assert_eq!(m.tag().parse::<AttackMethod>().unwrap(), m);
        }
        assert!(matches!(
            "gap".parse::<AttackMethod>(),
            Err(GamaError::Config { .. })
        ));
    }

    #[test]
    fn loss_s_examples() {
        let z = [0.6, 0.8];
        assert!(
            (eval(|t| {
                let (a, b) = (c(t, &z), c(t, &z));
                loss_s(t, a, b)
            }) - 1.0)
                .abs()
                < 1e-12
        );
        assert!(
            eval(|t| {
                let (a, b) = (c(t, &z), c(t, &[-0.8, 0.6]));
                loss_s(t, a, b)
            })
            .abs()
                < 1e-12
        );
        assert!(
            (eval(|t| {
                let (a, b) = (c(t, &z), c(t, &[-0.6, -0.8]));
                loss_s(t, a, b)
            }) + 1.0)
                .abs()
                < 1e-12
        );
        let mut t = Tape::<f64>::new();
        let (a, b) = (c(&mut t, &z), c(&mut t, &[0.0, 0.0]));
        assert!(loss_s(&mut t, a, b).is_err());
    }

    #[test]
    fn loss_txt_examples() {
        let v = eval(|t| {
            let (a, b, r) = (c(t, &[1.0, 0.0]), c(t, &[1.0, 0.0]), c(t, &[1.0, 0.0]));
            loss_txt(t, a, b, r, 1.0)
        });
        assert!((v - 0.5).abs() < 1e-12);
        let v = eval(|t| {
            let (a, b, r) = (c(t, &[0.0, 1.0]), c(t, &[1.0, 0.0]), c(t, &[0.0, 1.0]));
            loss_txt(t, a, b, r, 1.0)
        });
        assert!(v.abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let (a, b, r) = (
            c(&mut t, &[1.0, 0.0]),
            c(&mut t, &[1.0, 0.0]),
            c(&mut t, &[1.0, 0.0, 0.0]),
        );
        assert!(matches!(
            loss_txt(&mut t, a, b, r, 1.0),
            Err(GamaError::Compat(_))
        ));
    }

    #[test]
    fn loss_img_examples() {
        let v = eval(|t| {
            let (a, b) = (c(t, &[0.6, 0.8]), c(t, &[0.6, 0.8]));
            loss_img(t, a, b)
        });
        assert_eq!(v, 0.0);
        let v = eval(|t| {
            let (a, b) = (c(t, &[1.0, 0.0]), c(t, &[0.0, 1.0]));
            loss_img(t, a, b)
        });
        assert!((v + 1.0).abs() < 1e-12);
        let v = eval(|t| {
            let (a, b) = (c(t, &[1.0, 0.0]), c(t, &[-1.0, 0.0]));
            loss_img(t, a, b)
        });
        assert!((v + 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_follows_method() {
        let parts = LossParts {
            l_s: Some(0.5),
            l_img: Some(-1.0),
            l_txt: Some(0.5),
            baseline: None,
        };
        assert_eq!(total_loss(AttackMethod::Gama, &parts).unwrap().total, 0.0);
        let ls = total_loss(AttackMethod::LsOnly, &parts).unwrap();
        assert_eq!((ls.total, ls.l_img, ls.l_txt), (0.5, None, None));
        assert_eq!(
            total_loss(AttackMethod::AblateImgOnly, &parts)
                .unwrap()
                .total,
            -1.0
        );
        assert_eq!(
            total_loss(AttackMethod::AblateImgTxt, &parts)
                .unwrap()
                .total,
            -0.5
        );
        assert!(total_loss(AttackMethod::GapBce, &parts).is_err());
        let missing = LossParts {
            l_txt: None,
            ..parts
        };
        assert!(total_loss(AttackMethod::Gama, &missing).is_err());
        assert!(total_loss(AttackMethod::AblateImgOnly, &missing).is_ok());
    }

    #[test]
    fn total_loss_var_matches_scalar_combination() {
        for m in [
            AttackMethod::Gama,
            AttackMethod::LsOnly,
            AttackMethod::AblateImgOnly,
            AttackMethod::AblateImgTxt,
        ] {
            let mut t = Tape::<f64>::new();
            let vars = LossVars {
                l_s: Some(t.scalar_constant(0.25)),
                l_img: Some(t.scalar_constant(-0.75)),
                l_txt: Some(t.scalar_constant(0.125)),
                baseline: None,
            };
            let v = total_loss_var(&mut t, m, &vars).unwrap();
            let parts = LossParts {
                l_s: Some(0.25),
                l_img: Some(-0.75),
                l_txt: Some(0.125),
                baseline: None,
            };
            assert_eq!(t.item(v), total_loss(m, &parts).unwrap().total);
        }
    }

    #[test]
    fn baseline_closed_forms() {
        let y = [true, false, true];
        let v = eval(|t| {
            let (a, b) = (c(t, &[0.3, -1.2, 2.0]), c(t, &[0.3, -1.2, 2.0]));
            baseline_loss(t, AttackMethod::CdaRelBce, a, b, &y)
        });
        assert!((v + 2f64.ln()).abs() < 1e-12);

        let fit = eval(|t| {
            let (a, b) = (c(t, &[10.0, -10.0, 10.0]), c(t, &[10.0, -10.0, 10.0]));
            baseline_loss(t, AttackMethod::GapBce, a, b, &y)
        });
        assert!((fit + (1.0 + (-10f64).exp()).ln()).abs() < 1e-12);
        let wrong = eval(|t| {
            let (a, b) = (c(t, &[0.0; 3]), c(t, &[-10.0, 10.0, -10.0]));
            baseline_loss(t, AttackMethod::GapBce, a, b, &y)
        });
        assert!((wrong + (1.0 + 10f64.exp()).ln()).abs() < 1e-9);

        let floor = eval(|t| {
            let (a, b) = (c(t, &[0.0; 2]), c(t, &[100.0, 100.0]));
            baseline_loss(t, AttackMethod::GapBce, a, b, &[false, false])
        });
        assert!((floor - PROB_FLOOR.ln()).abs() < 1e-6);

        let mut t = Tape::<f64>::new();
        let (a, b) = (c(&mut t, &[0.0; 3]), c(&mut t, &[0.0; 2]));
        assert!(baseline_loss(&mut t, AttackMethod::GapBce, a, b, &y).is_err());
        let (a, b) = (c(&mut t, &[0.0; 3]), c(&mut t, &[0.0; 3]));
        assert!(baseline_loss(&mut t, AttackMethod::Gama, a, b, &y).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                eps: 0.0,
                ..Default::default()
            },
            TrainConfig {
                alpha: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch: 0,
                ..Default::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..Default::default()
            },
            TrainConfig {
                candidates: Some(0),
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(GamaError::Config { .. })));
        }
        let d = TrainConfig::default();
        assert_eq!(
            (d.lr, d.beta1, d.beta2, d.batch, d.epochs, d.alpha),
            (1e-4, 0.5, 0.999, 16, 10, 1.0)
        );
        assert!((d.eps - 10.0 / 255.0).abs() < 1e-9);
    }

    struct Tiny {
        dataset: SceneDataset,
        surrogate: SurrogateClassifier,
        encoder: JointEncoder,
        bank: PromptBank,
    }

    fn tiny() -> Tiny {
        let dims = ImageDims {
            channels: 3,
            height: 16,
            width: 16,
        };
        let dataset = generate_dataset(&SceneConfig {
            samples: 40,
            dims,
            ..Default::default()
        })
        .unwrap();
        let (surrogate, _) = train_surrogate(
            &dataset,
            &SurrogateTrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let (encoder, _) = pretrain_joint_encoder(
            &dataset,
            &EncoderTrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let o = compute_cooccurrence(&dataset).unwrap();
        let bank = embed_bank(
            &build_prompts(&dataset.class_names(), &o, PREFIX).unwrap(),
            &encoder,
            PREFIX,
        )
        .unwrap();
        Tiny {
            dataset,
            surrogate,
            encoder,
            bank,
        }
    }

    fn tiny_cfg(t: &Tiny) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            generator: GeneratorConfig {
                dims: t.dataset.dims,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn training_keeps_frozen_models_and_logs_every_step() {
        let t = tiny();
        let before = (t.surrogate.fingerprint(), t.encoder.fingerprint());
        let surrogates = [t.surrogate.clone()];
        let inputs = TrainInputs {
            surrogates: &surrogates,
            encoder: Some(&t.encoder),
            bank: Some(&t.bank),
        };
        let cfg = tiny_cfg(&t);
        let run = train_generator(&cfg, AttackMethod::Gama, inputs, &t.dataset).unwrap();
        assert_eq!(
            (surrogates[0].fingerprint(), t.encoder.fingerprint()),
            before
        );
        let steps = t.dataset.split.train.len().div_ceil(cfg.batch);
        assert_eq!(run.log.len(), steps);
        assert!(!run.ensemble);
        for r in &run.log {
            let sum = r.l_s.unwrap() + r.l_img.unwrap() + r.l_txt.unwrap();
            assert!((r.total - sum).abs() < 1e-12);
            assert_eq!(r.lr, 1e-4);
        }
        let text = log_ndjson(&run.log).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["step", "epoch", "l_s", "l_img", "l_txt", "total", "lr"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        let again = train_generator(&cfg, AttackMethod::Gama, inputs, &t.dataset).unwrap();
        assert_eq!(again.generator.fingerprint(), run.generator.fingerprint());

        let ls = train_generator(
            &cfg,
            AttackMethod::LsOnly,
            TrainInputs {
                encoder: None,
                bank: None,
                ..inputs
            },
            &t.dataset,
        )
        .unwrap();
        let line: serde_json::Value =
            serde_json::from_str(log_ndjson(&ls.log).unwrap().lines().next().unwrap()).unwrap();
        assert!(line["l_img"].is_null() && line["l_txt"].is_null());

        let pair = [t.surrogate.clone(), t.surrogate.clone()];
        let ens = train_generator(
            &cfg,
            AttackMethod::GapBce,
            TrainInputs {
                surrogates: &pair,
                ..inputs
            },
            &t.dataset,
        )
        .unwrap();
        assert!(ens.ensemble);
    }

    #[test]
    fn surrogate_parameters_receive_no_gradient() {
        let t = tiny();
        let gen = PerturbationGenerator::build(&tiny_cfg(&t).generator, &mut Rng::seed(1)).unwrap();
        let mut tape = Tape::<f32>::new();
        let gp = gen.params().bind(&mut tape, true).unwrap();
        let sp = t.surrogate.params().bind(&mut tape, false).unwrap();
        let x = t.dataset.samples[0].image.data();
        let adv = gen.forward(&mut tape, &gp, x, 10.0 / 255.0).unwrap();
        let (_, f) = t.surrogate.forward(&mut tape, &sp, adv).unwrap();
        let (_, f0) = t.surrogate.infer(x).unwrap();
        let z = tape.constant(&[f0.len()], f0).unwrap();
        let loss = loss_s(&mut tape, z, f).unwrap();
        tape.backward(loss).unwrap();
        assert!(sp.iter().all(|&v| tape.grad(v).is_none()));
        assert!(gp
            .iter()
            .any(|&v| tape.grad(v).is_some_and(|g| g.iter().any(|&x| x != 0.0))));
    }

    #[test]
    fn incompatible_inputs_are_rejected() {
        let t = tiny();
        let surrogates = [t.surrogate.clone()];
        let cfg = tiny_cfg(&t);
        let ok = TrainInputs {
            surrogates: &surrogates,
            encoder: Some(&t.encoder),
            bank: Some(&t.bank),
        };
        let missing_bank = TrainInputs { bank: None, ..ok };
        assert!(matches!(
            train_generator(&cfg, AttackMethod::Gama, missing_bank, &t.dataset),
            Err(GamaError::Config { .. })
        ));
        assert!(train_generator(
            &TrainConfig {
                epochs: 0,
                ..cfg.clone()
            },
            AttackMethod::AblateImgOnly,
            missing_bank,
            &t.dataset
        )
        .is_ok());
        assert!(matches!(
            train_generator(
                &cfg,
                AttackMethod::Gama,
                TrainInputs {
                    surrogates: &[],
                    ..ok
                },
                &t.dataset
            ),
            Err(GamaError::Config { .. })
        ));

        let mut narrow_bank = t.bank.clone();
        narrow_bank.embeddings = gama_tensor::Tensor::zeros(vec![t.bank.len(), 8]).unwrap();
        assert!(matches!(
            train_generator(
                &cfg,
                AttackMethod::Gama,
                TrainInputs {
                    bank: Some(&narrow_bank),
                    ..ok
                },
                &t.dataset
            ),
            Err(GamaError::Compat(_))
        ));
        let mut foreign = t.bank.clone();
        foreign.encoder_fingerprint = "0".repeat(64);
        assert!(matches!(
            train_generator(
                &cfg,
                AttackMethod::Gama,
                TrainInputs {
                    bank: Some(&foreign),
                    ..ok
                },
                &t.dataset
            ),
            Err(GamaError::Compat(_))
        ));
        let mut other = t.dataset.clone();
        other.distribution_id = crate::scenegen::DISTRIBUTION_B.into();
        assert!(matches!(
            train_generator(&cfg, AttackMethod::Gama, ok, &other),
            Err(GamaError::Compat(_))
        ));
    }
}
