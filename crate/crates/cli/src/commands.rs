use std::path::{Path, PathBuf};

use gama_core::eval::{
    ablation_summary, context_consistency_score, context_rows_csv, context_summary,
    evaluate_attack, label_shift_rate, parse_context_csv, parse_report_csv, pca_embed_export,
    pca_summary, report_csv, transfer_matrix, ContextRow, Defense, GeneratorInfo,
    IdentityPerturber, Perturber, Scenario, Victim, VictimSpec,
};
use gama_core::formats::{self, sidecar_path, write_atomic};
use gama_core::nets::{
    load_checkpoint, pretrain_joint_encoder, retrieval_mean_rank, save_checkpoint,
    EncoderTrainConfig, JointEncoder, Model, PerturbationGenerator, SurrogateArch,
    SurrogateClassifier, SurrogateTrainConfig, Task, TrainingMeta,
};
use gama_core::pipeline::{run_experiment, write_experiment, ExperimentConfig};
use gama_core::promptbank::{build_prompts, embed_bank, load_bank, save_bank};
use gama_core::scenegen::{
    compute_cooccurrence, generate_dataset, load_dataset, save_dataset, CooccurrenceMatrix,
    ImageDims, SceneConfig, SceneDataset,
};
use gama_core::train::{
    log_ndjson, train_generator as fit_generator, AttackMethod, TrainConfig, TrainInputs,
};
use gama_core::{GamaError, Result};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::manifest::{manifest_path, Run};
use crate::{
    BankArgs, DatasetArgs, EncoderArgs, EvaluateArgs, ExperimentArgs, GeneratorArgs, ReportArgs,
    ReportMode, SurrogateArgs, TaskArg,
};

const SEED_ENV: &str = "GAMA_SEED";

/// JSON config with serde defaults; parse errors name the offending field path.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = formats::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        GamaError::config(
            if field == "." {
                "config".to_string()
            } else {
                field
            },
            e.inner().to_string(),
        )
    })
}

/// Config value, then `GAMA_SEED`, then the flag.
fn resolve_seed(config: u64, flag: Option<u64>) -> Result<u64> {
    let env = match std::env::var(SEED_ENV) {
        Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| {
            GamaError::config(SEED_ENV, format!("{s:?} is not an unsigned integer"))
        })?),
        Err(_) => None,
    };
    Ok(flag.or(env).unwrap_or(config))
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = formats::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| GamaError::config("pairs", format!("{}: {e}", path.display())))
}

fn with_sidecar(path: &Path) -> Vec<PathBuf> {
    let side = sidecar_path(path);
    if side.exists() {
        vec![path.to_path_buf(), side]
    } else {
        vec![path.to_path_buf()]
    }
}

fn inputs_with_sidecars(paths: &[&Path]) -> Vec<PathBuf> {
    paths.iter().flat_map(|p| with_sidecar(p)).collect()
}

fn start(command: &'static str, inputs: &[PathBuf]) -> Result<Run> {
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Run::start(command, &refs)
}

fn meta(seed: u64, epochs: usize, dataset: &SceneDataset, extra: Value) -> TrainingMeta {
    TrainingMeta {
        seed,
        epochs,
        distribution_id: dataset.distribution_id.clone(),
        extra: match extra {
            Value::Object(m) => m,
            _ => Default::default(),
        },
    }
}

pub fn dataset(a: DatasetArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = a.config.iter().cloned().collect();
    inputs.extend(a.pairs.iter().cloned());
    let run = start("dataset", &inputs)?;
    let mut cfg: SceneConfig = load_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    if let Some(c) = a.classes {
        cfg.classes = c;
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    if let Some(s) = a.size {
        cfg.dims = ImageDims {
            height: s,
            width: s,
            ..cfg.dims
        };
    }
    if let Some(d) = a.distribution {
        cfg.distribution = d;
    }
    if let Some(f) = a.test_fraction {
        cfg.test_fraction = f;
    }
    if let Some(p) = &a.pairs {
        cfg.allowed_pairs = Some(read_pairs(p)?);
    }
    let d = generate_dataset(&cfg)?;
    let o = compute_cooccurrence(&d)?;
    save_dataset(&a.out, &d)?;
    println!(
        "dataset: {} images ({} train, {} test), {} classes, distribution {}",
        d.samples.len(),
        d.split.train.len(),
        d.split.test.len(),
        d.classes(),
        d.distribution_id
    );
    println!(
        "co-occurrence: {} nonzero entries ({} pairs)",
        o.nonzero(),
        o.nonzero() / 2
    );
    run.finish(
        &cfg,
        cfg.seed,
        &with_sidecar(&a.out),
        &manifest_path(&a.out),
    )?;
    Ok(())
}

/// Clean score of one victim on the test split.
fn clean_score(model: &SurrogateClassifier, d: &SceneDataset) -> Result<(String, f64)> {
    let info = GeneratorInfo {
        id: "no_attack".into(),
        surrogate_id: String::new(),
        surrogate_fingerprints: Vec::new(),
        distribution_id: d.distribution_id.clone(),
    };
    let victim = Victim::new("model", model.clone(), Defense::None);
    let report = evaluate_attack(&IdentityPerturber { eps: 1.0 }, &info, &[victim], d)?;
    Ok((report.rows[0].metric.clone(), report.rows[0].clean))
}

pub fn train_surrogate(a: SurrogateArgs) -> Result<()> {
    let mut inputs = inputs_with_sidecars(&[&a.dataset]);
    inputs.extend(a.config.iter().cloned());
    let run = start("train-surrogate", &inputs)?;
    let mut cfg: SurrogateTrainConfig = load_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    if let Some(id) = a.arch {
        cfg.arch = SurrogateArch::from_id(id)?;
    }
    if let Some(t) = a.task {
        cfg.task = match t {
            TaskArg::MultiLabel => Task::MultiLabel,
            TaskArg::SingleLabel => Task::SingleLabel,
        };
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if a.pgd || a.pgd_eps.is_some() {
        let mut pgd = cfg.pgd.unwrap_or_default();
        if let Some(eps) = a.pgd_eps {
            pgd.eps = eps;
            pgd.step = eps / 2.0;
        }
        cfg.pgd = Some(pgd);
    }
    let d = load_dataset(&a.dataset)?;
    let (model, curve) = gama_core::nets::train_surrogate(&d, &cfg)?;
    let extra = json!({ "pgd": cfg.pgd.is_some(), "final_loss": curve.final_loss });
    save_checkpoint(&a.out, &model, &meta(cfg.seed, cfg.epochs, &d, extra))?;
    let (metric, clean) = clean_score(&model, &d)?;
    println!(
        "surrogate arch{}: loss {:.4} -> {:.4}; clean {metric} on test split {clean:.2}%",
        cfg.arch.id(),
        curve.initial_loss,
        curve.final_loss
    );
    run.finish(
        &cfg,
        cfg.seed,
        &with_sidecar(&a.out),
        &manifest_path(&a.out),
    )?;
    Ok(())
}

pub fn pretrain_encoder(a: EncoderArgs) -> Result<()> {
    let mut inputs = inputs_with_sidecars(&[&a.dataset]);
    inputs.extend(a.config.iter().cloned());
    let run = start("pretrain-encoder", &inputs)?;
    let mut cfg: EncoderTrainConfig = load_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(k) = a.embed_dim {
        cfg.embed_dim = k;
    }
    let d = load_dataset(&a.dataset)?;
    let (enc, curve) = pretrain_joint_encoder(&d, &cfg)?;
    save_checkpoint(&a.out, &enc, &meta(cfg.seed, cfg.epochs, &d, json!({})))?;
    let rank = retrieval_mean_rank(&enc, &d, 31, cfg.seed)?;
    println!(
        "encoder: loss {:.4} -> {:.4}; K={}; retrieval mean rank {rank:.2} of 32",
        curve.initial_loss,
        curve.final_loss,
        enc.embed_dim()
    );
    run.finish(
        &cfg,
        cfg.seed,
        &with_sidecar(&a.out),
        &manifest_path(&a.out),
    )?;
    Ok(())
}

pub fn build_bank(a: BankArgs) -> Result<()> {
    let mut inputs = inputs_with_sidecars(&[&a.encoder, &a.dataset]);
    inputs.extend(a.pairs.iter().cloned());
    let run = start("build-bank", &inputs)?;
    let (enc, _) = load_checkpoint::<JointEncoder>(&a.encoder)?;
    let d = load_dataset(&a.dataset)?;
    let o = match &a.pairs {
        Some(p) => CooccurrenceMatrix::from_pairs(d.classes(), &read_pairs(p)?)?,
        None => compute_cooccurrence(&d)?,
    };
    let prompts = build_prompts(&d.class_names(), &o, &a.prefix)?;
    let bank = embed_bank(&prompts, &enc, &a.prefix)?;
    save_bank(&a.out, &bank)?;
    println!(
        "prompt bank: P={} K={} prefix {:?}",
        bank.len(),
        bank.embed_dim(),
        bank.prefix
    );
    let cfg = json!({ "prefix": a.prefix, "pairs": a.pairs, "encoder_fingerprint": bank.encoder_fingerprint });
    run.finish(&cfg, 0, &with_sidecar(&a.out), &manifest_path(&a.out))?;
    Ok(())
}

pub fn train_generator(a: GeneratorArgs) -> Result<()> {
    let mut in_paths: Vec<&Path> = a.surrogate.iter().map(PathBuf::as_path).collect();
    in_paths.push(&a.dataset);
    in_paths.extend(a.encoder.as_deref());
    in_paths.extend(a.bank.as_deref());
    let mut inputs = inputs_with_sidecars(&in_paths);
    inputs.extend(a.config.iter().cloned());
    let run = start("train-generator", &inputs)?;

    let method: AttackMethod = a.method.parse()?;
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    if let Some(v) = a.eps {
        cfg.eps = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.candidates.is_some() {
        cfg.candidates = a.candidates;
    }
    let d = load_dataset(&a.dataset)?;
    cfg.generator.dims = d.dims;

    let surrogates = a
        .surrogate
        .iter()
        .map(|p| load_checkpoint::<SurrogateClassifier>(p).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let encoder = a
        .encoder
        .as_deref()
        .map(|p| load_checkpoint::<JointEncoder>(p).map(|(e, _)| e))
        .transpose()?;
    let bank = a.bank.as_deref().map(load_bank).transpose()?;
    let ensemble = surrogates.len() > 1;
    println!(
        "method={method} eps={:.6} ({:.1}/255) alpha={:.1} lr={} batch={} epochs={} seed={} surrogates={}{}",
        cfg.eps,
        cfg.eps * 255.0,
        cfg.alpha,
        cfg.lr,
        cfg.batch,
        cfg.epochs,
        cfg.seed,
        surrogates.len(),
        if ensemble { " (ensemble mode)" } else { "" }
    );
    let inputs = TrainInputs {
        surrogates: &surrogates,
        encoder: encoder.as_ref(),
        bank: bank.as_ref(),
    };
    let result = fit_generator(&cfg, method, inputs, &d)?;
    let ids: Vec<String> = a
        .surrogate
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let extra = json!({
        "method": method.tag(),
        "eps": cfg.eps,
        "alpha": cfg.alpha,
        "ensemble": ensemble,
        "surrogate_ids": ids,
        "surrogate_fingerprints": surrogates.iter().map(|s| s.fingerprint()).collect::<Vec<_>>(),
    });
    save_checkpoint(
        &a.out,
        &result.generator,
        &meta(cfg.seed, cfg.epochs, &d, extra),
    )?;
    let log_path = a.out.with_extension("log.ndjson");
    write_atomic(&log_path, log_ndjson(&result.log)?.as_bytes())?;
    let means = result.epoch_means();
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        println!(
            "generator: {} steps, epoch mean loss {first:.4} -> {last:.4}",
            result.log.len()
        );
    }
    let mut outputs = with_sidecar(&a.out);
    outputs.push(log_path);
    let manifest_cfg = json!({ "method": method.tag(), "train": cfg });
    run.finish(&manifest_cfg, cfg.seed, &outputs, &manifest_path(&a.out))?;
    Ok(())
}

fn load_victims(path: &Path, defense: Option<Defense>) -> Result<(Vec<Victim>, Vec<PathBuf>)> {
    let specs: Vec<VictimSpec> = {
        let text = formats::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| GamaError::config(format!("victims{}", e.path()), e.inner().to_string()))?
    };
    if specs.is_empty() {
        return Err(GamaError::config("victims", "the victim list is empty"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut victims = Vec::new();
    let mut files = Vec::new();
    for mut spec in specs {
        let rel = spec.checkpoint.clone().ok_or_else(|| {
            GamaError::config(format!("victims.{}.checkpoint", spec.id), "missing")
        })?;
        let ckpt = if rel.is_absolute() {
            rel
        } else {
            base.join(rel)
        };
        let (model, m) = load_checkpoint::<SurrogateClassifier>(&ckpt)?;
        if model.task() != spec.task
            || model.architecture_id() != spec.architecture_id
            || model.distribution_id() != spec.distribution_id
        {
            return Err(GamaError::Compat(format!(
                "victim {}: spec says {} arch{} on {}, checkpoint holds {} arch{} on {}",
                spec.id,
                spec.task.name(),
                spec.architecture_id,
                spec.distribution_id,
                model.task().name(),
                model.architecture_id(),
                model.distribution_id()
            )));
        }
        if let Some(d) = defense {
            spec.defense = d;
        }
        let hardened = m
            .training
            .extra
            .get("pgd")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        if spec.defense == Defense::PgdTrained && !hardened {
            return Err(GamaError::Compat(format!(
                "victim {} is not adversarially trained",
                spec.id
            )));
        }
        files.extend(with_sidecar(&ckpt));
        victims.push(Victim { spec, model });
    }
    Ok((victims, files))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let defense = a.defense.as_deref().map(Defense::parse).transpose()?;
    let d = load_dataset(&a.dataset)?;
    let (victims, victim_files) = load_victims(&a.victims, defense)?;

    let mut inputs = inputs_with_sidecars(&[&a.dataset]);
    inputs.push(a.victims.clone());
    inputs.extend(victim_files);
    let generator_path = (a.generator != "none").then(|| PathBuf::from(&a.generator));
    if let Some(g) = &generator_path {
        inputs.extend(with_sidecar(g));
    }
    inputs.extend(a.encoder.iter().cloned());
    let run = start("evaluate", &inputs)?;

    let loaded = generator_path
        .as_deref()
        .map(load_checkpoint::<PerturbationGenerator>)
        .transpose()?;
    let (info, eps, generator) = match &loaded {
        Some((g, m)) => {
            if g.dims() != d.dims {
                return Err(GamaError::Compat(format!(
                    "generator expects {:?} images, dataset has {:?}",
                    g.dims().shape(),
                    d.dims.shape()
                )));
            }
            let extra = &m.training.extra;
            let strings = |key: &str| -> Vec<String> {
                extra
                    .get(key)
                    .and_then(Value::as_array)
                    .map(|v| {
                        v.iter()
                            .filter_map(|s| s.as_str().map(String::from))
                            .collect()
                    })
                    .unwrap_or_default()
            };
            let method = extra
                .get("method")
                .and_then(Value::as_str)
                .unwrap_or("generator");
            let eps = a
                .eps
                .or_else(|| extra.get("eps").and_then(Value::as_f64).map(|v| v as f32))
                .ok_or_else(|| {
                    GamaError::config(
                        "eps",
                        "not recorded in the generator checkpoint; pass --eps",
                    )
                })?;
            let info = GeneratorInfo {
                id: format!("{method}-s{}", m.training.seed),
                surrogate_id: strings("surrogate_ids").join("+"),
                surrogate_fingerprints: strings("surrogate_fingerprints"),
                distribution_id: m.training.distribution_id.clone(),
            };
            (info, eps, Some(g))
        }
        None => {
            let info = GeneratorInfo {
                id: "no_attack-s0".into(),
                surrogate_id: String::new(),
                surrogate_fingerprints: Vec::new(),
                distribution_id: d.distribution_id.clone(),
            };
            (info, a.eps.unwrap_or(10.0 / 255.0), None)
        }
    };
    let perturber: Box<dyn Perturber> = match generator {
        Some(g) => Box::new((g, eps)),
        None => Box::new(IdentityPerturber { eps }),
    };
    let report = evaluate_attack(perturber.as_ref(), &info, &victims, &d)?;
    let o = compute_cooccurrence(&d)?;
    let context = report
        .rows
        .iter()
        .zip(&report.attacked_predictions)
        .map(|(row, preds)| {
            let s = context_consistency_score(preds, &o, row.attacked / 100.0)?;
            Ok(ContextRow {
                generator_id: info.id.clone(),
                victim_id: row.victim_id.clone(),
                precision: s.precision,
                misclassification: s.misclassification,
                score: s.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_atomic(&a.out, report_csv(&report.rows)?.as_bytes())?;
    let context_path = a.out.with_extension("context.csv");
    write_atomic(&context_path, context_rows_csv(&context)?.as_bytes())?;
    let mut outputs = vec![a.out.clone(), context_path];

    let test = d.test();
    let adv: Vec<Vec<f32>> = test
        .iter()
        .map(|s| perturber.perturb(s.image.data()))
        .collect::<Result<_>>()?;
    // Embedding diagnostics use the white-box victim when there is one.
    let probe = report
        .rows
        .iter()
        .position(|r| r.scenario == Scenario::White)
        .map(|i| &victims[i])
        .unwrap_or(&victims[0]);
    if probe.model.dims() == d.dims {
        let feats = |imgs: &mut dyn Iterator<Item = &[f32]>| -> Result<Vec<Vec<f32>>> {
            imgs.map(|x| probe.model.infer(x).map(|(_, f)| f)).collect()
        };
        let clean = feats(&mut test.iter().map(|s| s.image.data()))?;
        let pert = feats(&mut adv.iter().map(Vec::as_slice))?;
        if let Ok(pca) = pca_embed_export(&clean, &pert) {
            let pca_path = a.out.with_extension("pca.csv");
            write_atomic(&pca_path, pca.to_csv().as_bytes())?;
            outputs.push(pca_path);
        }
    }
    print!("{}", transfer_matrix(&report.rows));
    for r in &report.rows {
        println!(
            "{} [{}] defense={} {}: clean {:.2} attacked {:.2}",
            r.victim_id,
            if r.scenario == Scenario::White {
                "white"
            } else {
                "black"
            },
            r.defense,
            r.metric,
            r.clean,
            r.attacked
        );
    }
    if let Some(p) = &a.encoder {
        let (enc, _) = load_checkpoint::<JointEncoder>(p)?;
        let pairs: Vec<(Vec<f32>, Vec<f32>)> = test
            .iter()
            .map(|s| s.image.data().to_vec())
            .zip(adv)
            .collect();
        let rate = label_shift_rate(&enc, &pairs, &d.class_names())?;
        println!(
            "zero-shot top-2 label shift: {:.1}% of test images",
            100.0 * rate
        );
    }
    let cfg = json!({
        "generator": a.generator,
        "victims": victims.iter().map(|v| &v.spec).collect::<Vec<_>>(),
        "defense": a.defense,
        "eps": eps,
    });
    run.finish(&cfg, 0, &outputs, &manifest_path(&a.out))?;
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let refs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    let run = Run::start("report", &refs)?;
    let texts = a
        .inputs
        .iter()
        .map(|p| formats::read_to_string(p).map(|t| (p.display().to_string(), t)))
        .collect::<Result<Vec<_>>>()?;
    let attack_rows = || -> Result<Vec<_>> {
        let mut rows = Vec::new();
        for (_, t) in &texts {
            rows.extend(parse_report_csv(t)?);
        }
        Ok(rows)
    };
    let out = match a.mode {
        ReportMode::TransferMatrix => transfer_matrix(&attack_rows()?),
        ReportMode::Ablation => {
            let mut s = String::from("arm,method,clean,attacked,rows\n");
            for arm in ablation_summary(&attack_rows()?) {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{}\n",
                    arm.arm, arm.method, arm.clean, arm.attacked, arm.rows
                ));
            }
            s
        }
        ReportMode::Context => {
            let mut rows = Vec::new();
            for (_, t) in &texts {
                rows.extend(parse_context_csv(t)?);
            }
            context_summary(&rows)
        }
        ReportMode::Pca => pca_summary(&texts)?,
    };
    write_atomic(&a.out, out.as_bytes())?;
    print!("{out}");
    run.finish(
        &json!({ "mode": a.mode }),
        0,
        std::slice::from_ref(&a.out),
        &manifest_path(&a.out),
    )?;
    Ok(())
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = a.config.iter().cloned().collect();
    let run = start("experiment", &inputs)?;
    let mut cfg: ExperimentConfig = load_config(a.config.as_deref())?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed = s.trim().parse::<u64>().map_err(|_| {
            GamaError::config(SEED_ENV, format!("{s:?} is not an unsigned integer"))
        })?;
        cfg.seeds = vec![seed];
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(m) = a.methods {
        cfg.methods = m.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = a.samples {
        cfg.scene.samples = n;
    }
    let exp = run_experiment(&cfg, &mut |line| eprintln!("{line}"))?;
    let mut outputs = write_experiment(&exp, &a.out_dir)?;
    let rows = exp.all_rows();
    let tables = [
        ("transfer.csv", transfer_matrix(&rows)),
        ("ablation.csv", {
            let mut s = String::from("arm,method,clean,attacked,rows\n");
            for arm in ablation_summary(&rows) {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{}\n",
                    arm.arm, arm.method, arm.clean, arm.attacked, arm.rows
                ));
            }
            s
        }),
        ("context_summary.csv", context_summary(&exp.context_rows())),
    ];
    for (name, text) in &tables {
        let p = a.out_dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        println!("== {name}\n{text}");
        outputs.push(p);
    }
    let pca_inputs: Vec<(String, String)> = exp
        .generators
        .iter()
        .map(|g| (g.id.clone(), g.pca.to_csv()))
        .collect();
    let pca = pca_summary(&pca_inputs)?;
    let p = a.out_dir.join("pca_summary.csv");
    write_atomic(&p, pca.as_bytes())?;
    outputs.push(p);
    let seed = cfg.seeds.first().copied().unwrap_or_default();
    run.finish(&cfg, seed, &outputs, &a.out_dir.join("run.json"))?;
    Ok(())
}
