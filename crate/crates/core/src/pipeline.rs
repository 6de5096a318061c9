//! The desk-scale experiment: data, frozen models, prompt bank, generators
//! for several methods and seeds, and every evaluation table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::eval::{
    context_consistency_score, evaluate_attack, pca_embed_export, AttackRow, ContextRow, Defense,
    GeneratorInfo, PcaExport, PgdConfig, Victim,
};
use crate::formats;
use crate::nets::{
    pretrain_joint_encoder, retrieval_mean_rank, save_checkpoint, EncoderTrainConfig, JointEncoder,
    Model, SurrogateArch, SurrogateTrainConfig, TrainingCurve, TrainingMeta, PREFIX,
};
use crate::promptbank::{build_prompts, embed_bank, save_bank, PromptBank};
use crate::scenegen::{
    compute_cooccurrence, generate_dataset, save_dataset, CooccurrenceMatrix, SceneConfig,
    SceneDataset,
};
use crate::train::{
    log_ndjson, train_generator, AttackMethod, GeneratorRun, TrainConfig, TrainInputs,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    /// Shared surrogate training settings; the architecture is set per model.
    pub surrogate: SurrogateTrainConfig,
    /// Architecture of the attacker's surrogate (the white-box victim).
    pub surrogate_arch: SurrogateArch,
    /// Adversarial training settings of the hardened victim.
    pub pgd: PgdConfig,
    pub encoder: EncoderTrainConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<AttackMethod>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            surrogate: SurrogateTrainConfig::default(),
            surrogate_arch: SurrogateArch::ShallowWide,
            pgd: PgdConfig::default(),
            encoder: EncoderTrainConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            methods: vec![
                AttackMethod::Gama,
                AttackMethod::AblateImgTxt,
                AttackMethod::AblateImgOnly,
            ],
        }
    }
}

/// Architecture whose plain and hardened copies form the defence pair.
pub const DEFENDED_ARCH: SurrogateArch = SurrogateArch::DeepNarrow;

pub fn victim_id(arch: SurrogateArch) -> String {
    format!("arch{}", arch.id())
}

#[derive(Debug, Clone)]
pub struct GeneratorOutcome {
    pub id: String,
    pub method: AttackMethod,
    pub seed: u64,
    pub run: GeneratorRun,
    pub rows: Vec<AttackRow>,
    pub context: Vec<ContextRow>,
    pub pca: PcaExport,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: SceneDataset,
    pub cooccurrence: CooccurrenceMatrix,
    /// Surrogate first, then the other architectures, the hardened copy and the blurred copy.
    pub victims: Vec<Victim>,
    pub surrogate_curves: Vec<(String, TrainingCurve)>,
    pub encoder: JointEncoder,
    pub encoder_curve: TrainingCurve,
    pub encoder_rank: f64,
    pub bank: PromptBank,
    pub generators: Vec<GeneratorOutcome>,
}

impl Experiment {
    pub fn surrogate(&self) -> &Victim {
        &self.victims[0]
    }

    /// Report rows of every generator; each row carries its victim's clean score.
    pub fn all_rows(&self) -> Vec<AttackRow> {
        self.generators
            .iter()
            .flat_map(|g| g.rows.iter().cloned())
            .collect()
    }

    pub fn context_rows(&self) -> Vec<ContextRow> {
        self.generators
            .iter()
            .flat_map(|g| g.context.iter().cloned())
            .collect()
    }
}

fn generator_info(id: &str, exp_surrogate: &Victim, dataset: &SceneDataset) -> GeneratorInfo {
    GeneratorInfo {
        id: id.to_string(),
        surrogate_id: exp_surrogate.spec.id.clone(),
        surrogate_fingerprints: vec![exp_surrogate.model.fingerprint()],
        distribution_id: dataset.distribution_id.clone(),
    }
}

/// Run the whole experiment. `progress` receives one line per finished stage.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<Experiment> {
    if cfg.seeds.is_empty() || cfg.methods.is_empty() {
        return Err(GamaError::config(
            "experiment",
            "needs at least one seed and one method",
        ));
    }
    let dataset = generate_dataset(&cfg.scene)?;
    let cooccurrence = compute_cooccurrence(&dataset)?;
    progress(&format!(
        "dataset: {} images, {} classes, {} co-occurring pairs",
        dataset.samples.len(),
        dataset.classes(),
        cooccurrence.nonzero() / 2
    ));

    let mut archs = vec![cfg.surrogate_arch];
    archs.extend(
        SurrogateArch::ALL
            .into_iter()
            .filter(|&a| a != cfg.surrogate_arch),
    );
    let mut victims = Vec::new();
    let mut surrogate_curves = Vec::new();
    for arch in archs {
        let (model, curve) = train_surrogate_for(&dataset, cfg, arch, None)?;
        let id = victim_id(arch);
        progress(&format!(
            "surrogate {id}: loss {:.4} -> {:.4}",
            curve.initial_loss, curve.final_loss
        ));
        surrogate_curves.push((id.clone(), curve));
        victims.push(Victim::new(id, model, Defense::None));
    }
    let (hardened, curve) = train_surrogate_for(&dataset, cfg, DEFENDED_ARCH, Some(cfg.pgd))?;
    let id = format!("{}-pgd", victim_id(DEFENDED_ARCH));
    progress(&format!(
        "surrogate {id}: loss {:.4} -> {:.4}",
        curve.initial_loss, curve.final_loss
    ));
    surrogate_curves.push((id.clone(), curve));
    victims.push(Victim::new(id, hardened, Defense::PgdTrained));
    let plain = victims
        .iter()
        .find(|v| v.spec.id == victim_id(DEFENDED_ARCH))
        .expect("every architecture is trained")
        .model
        .clone();
    victims.push(Victim::new(
        format!("{}-median3", victim_id(DEFENDED_ARCH)),
        plain,
        Defense::MedianBlur { window: 3 },
    ));

    let (encoder, encoder_curve) = pretrain_joint_encoder(&dataset, &cfg.encoder)?;
    let encoder_rank = retrieval_mean_rank(&encoder, &dataset, 31, cfg.encoder.seed)?;
    progress(&format!(
        "encoder: loss {:.4} -> {:.4}, retrieval mean rank {encoder_rank:.2} of 32",
        encoder_curve.initial_loss, encoder_curve.final_loss
    ));
    let prompts = build_prompts(&dataset.class_names(), &cooccurrence, PREFIX)?;
    let bank = embed_bank(&prompts, &encoder, PREFIX)?;
    progress(&format!(
        "prompt bank: P={} K={}",
        bank.len(),
        bank.embed_dim()
    ));

    let surrogate = &victims[0];
    let eps = cfg.train.eps;

    let test = dataset.test();
    let clean_features: Vec<Vec<f32>> = test
        .iter()
        .map(|s| surrogate.model.infer(s.image.data()).map(|(_, f)| f))
        .collect::<Result<_>>()?;

    let mut generators = Vec::new();
    for &seed in &cfg.seeds {
        for &method in &cfg.methods {
            let id = format!("{method}-s{seed}");
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let inputs = TrainInputs {
                surrogates: std::slice::from_ref(&surrogate.model),
                encoder: Some(&encoder),
                bank: Some(&bank),
            };
            let run = train_generator(&tc, method, inputs, &dataset)?;
            let report = evaluate_attack(
                &(&run.generator, eps),
                &generator_info(&id, surrogate, &dataset),
                &victims,
                &dataset,
            )?;
            let context = report
                .rows
                .iter()
                .zip(&report.attacked_predictions)
                .map(|(row, preds)| {
                    let s = context_consistency_score(preds, &cooccurrence, row.attacked / 100.0)?;
                    Ok(ContextRow {
                        generator_id: id.clone(),
                        victim_id: row.victim_id.clone(),
                        precision: s.precision,
                        misclassification: s.misclassification,
                        score: s.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let perturbed_features: Vec<Vec<f32>> = test
                .iter()
                .map(|s| {
                    let adv = run.generator.perturb(s.image.data(), eps)?;
                    surrogate.model.infer(&adv).map(|(_, f)| f)
                })
                .collect::<Result<_>>()?;
            let pca = pca_embed_export(&clean_features, &perturbed_features)?;
            let means = run.epoch_means();
            progress(&format!(
                "generator {id}: loss {:.4} -> {:.4}; {}",
                means.first().copied().unwrap_or(f64::NAN),
                means.last().copied().unwrap_or(f64::NAN),
                report
                    .rows
                    .iter()
                    .map(|r| format!("{} {:.1}->{:.1}", r.victim_id, r.clean, r.attacked))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
            generators.push(GeneratorOutcome {
                id,
                method,
                seed,
                run,
                rows: report.rows,
                context,
                pca,
            });
        }
    }

    Ok(Experiment {
        config: cfg.clone(),
        dataset,
        cooccurrence,
        victims,
        surrogate_curves,
        encoder,
        encoder_curve,
        encoder_rank,
        bank,
        generators,
    })
}

fn train_surrogate_for(
    dataset: &SceneDataset,
    cfg: &ExperimentConfig,
    arch: SurrogateArch,
    pgd: Option<PgdConfig>,
) -> Result<(crate::nets::SurrogateClassifier, TrainingCurve)> {
    crate::nets::train_surrogate(
        dataset,
        &SurrogateTrainConfig {
            arch,
            pgd,
            ..cfg.surrogate.clone()
        },
    )
}

fn meta(
    seed: u64,
    epochs: usize,
    dataset: &SceneDataset,
    extra: &[(&str, serde_json::Value)],
) -> TrainingMeta {
    TrainingMeta {
        seed,
        epochs,
        distribution_id: dataset.distribution_id.clone(),
        extra: extra
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    }
}

/// Write every artifact of `exp` under `dir`; returns the written paths.
pub fn write_experiment(exp: &Experiment, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| GamaError::io(dir, e))?;
    let mut written = Vec::new();
    let mut push = |p: std::path::PathBuf| {
        written.push(p.clone());
        p
    };
    save_dataset(&push(dir.join("dataset.gamd")), &exp.dataset)?;
    for v in &exp.victims {
        if matches!(v.spec.defense, Defense::MedianBlur { .. }) {
            continue;
        }
        let extra = [(
            "pgd",
            serde_json::Value::Bool(v.spec.defense == Defense::PgdTrained),
        )];
        save_checkpoint(
            &push(dir.join(format!("{}.gamc", v.spec.id))),
            &v.model,
            &meta(
                exp.config.surrogate.seed,
                exp.config.surrogate.epochs,
                &exp.dataset,
                &extra,
            ),
        )?;
    }
    save_checkpoint(
        &push(dir.join("encoder.gamc")),
        &exp.encoder,
        &meta(
            exp.config.encoder.seed,
            exp.config.encoder.epochs,
            &exp.dataset,
            &[],
        ),
    )?;
    save_bank(&push(dir.join("bank.gamb")), &exp.bank)?;
    for g in &exp.generators {
        let extra = [("method", serde_json::Value::String(g.method.tag().into()))];
        save_checkpoint(
            &push(dir.join(format!("{}.gamc", g.id))),
            &g.run.generator,
            &meta(g.seed, exp.config.train.epochs, &exp.dataset, &extra),
        )?;
        formats::write_atomic(
            &push(dir.join(format!("{}.log.ndjson", g.id))),
            log_ndjson(&g.run.log)?.as_bytes(),
        )?;
        formats::write_atomic(
            &push(dir.join(format!("{}.pca.csv", g.id))),
            g.pca.to_csv().as_bytes(),
        )?;
    }
    formats::write_atomic(
        &push(dir.join("report.csv")),
        crate::eval::report_csv(&exp.all_rows())?.as_bytes(),
    )?;
    formats::write_atomic(
        &push(dir.join("context.csv")),
        crate::eval::context_rows_csv(&exp.context_rows())?.as_bytes(),
    )?;
    Ok(written)
}
