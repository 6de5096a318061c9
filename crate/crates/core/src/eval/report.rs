use std::collections::BTreeMap;
use std::path::PathBuf;

use gama_tensor::par;
use serde::{Deserialize, Serialize, Serializer};

use super::defense::Defense;
use super::metrics::{argmax, hamming_score, top1_accuracy};
use super::pca::centroid_separation;
use crate::error::{GamaError, Result};
use crate::nets::{Model, PerturbationGenerator, SurrogateClassifier, Task};
use crate::scenegen::{resize_nearest, SceneDataset};

/// Slack allowed on the ℓ∞ budget for float rounding.
pub const BUDGET_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    White,
    Black,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSpec {
    pub id: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub task: Task,
    pub architecture_id: u16,
    pub distribution_id: String,
    pub defense: Defense,
}

/// A loaded, frozen victim model.
#[derive(Debug, Clone)]
pub struct Victim {
    pub spec: VictimSpec,
    pub model: SurrogateClassifier,
}

impl Victim {
    pub fn new(id: impl Into<String>, model: SurrogateClassifier, defense: Defense) -> Self {
        let spec = VictimSpec {
            id: id.into(),
            checkpoint: None,
            task: model.task(),
            architecture_id: model.architecture_id(),
            distribution_id: model.distribution_id().to_string(),
            defense,
        };
        Self { spec, model }
    }
}

/// What the evaluator needs to know about the generator under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub id: String,
    /// Surrogate ids joined with `+` for ensembles.
    pub surrogate_id: String,
    pub surrogate_fingerprints: Vec<String>,
    /// Distribution the generator was trained on.
    pub distribution_id: String,
}

/// Anything that maps a clean image to a budget-constrained one.
pub trait Perturber: Sync {
    fn eps(&self) -> f32;
    fn perturb(&self, x: &[f32]) -> Result<Vec<f32>>;
}

/// `δ = 0`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityPerturber {
    pub eps: f32,
}

impl Perturber for IdentityPerturber {
    fn eps(&self) -> f32 {
        self.eps
    }

    fn perturb(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(x.to_vec())
    }
}

impl Perturber for (&PerturbationGenerator, f32) {
    fn eps(&self) -> f32 {
        self.1
    }

    fn perturb(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.0.perturb(x, self.1)
    }
}

/// Reject any image outside the ε-ball around `x` or the unit box.
pub fn check_budget(x: &[f32], x_adv: &[f32], eps: f32) -> Result<()> {
    if x.len() != x_adv.len() {
        return Err(GamaError::Budget(
            "perturbed image has a different size".into(),
        ));
    }
    for (i, (&a, &b)) in x.iter().zip(x_adv).enumerate() {
        if !b.is_finite() || !(0.0..=1.0).contains(&b) {
            return Err(GamaError::Budget(format!(
                "pixel {i} = {b} is outside [0, 1]"
            )));
        }
        if (a - b).abs() > eps + BUDGET_TOLERANCE {
            return Err(GamaError::Budget(format!(
                "pixel {i} moved by {} > ε = {eps}",
                (a - b).abs()
            )));
        }
    }
    Ok(())
}

fn six<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub generator_id: String,
    pub surrogate_id: String,
    pub victim_id: String,
    pub task: String,
    pub defense: String,
    pub scenario: Scenario,
    pub metric: String,
    #[serde(serialize_with = "six")]
    pub clean: f64,
    #[serde(serialize_with = "six")]
    pub attacked: f64,
    #[serde(serialize_with = "six")]
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    /// Per victim, per test sample: predicted label sets on perturbed inputs.
    pub attacked_predictions: Vec<Vec<Vec<bool>>>,
}

impl AttackReport {
    /// Mean attacked score over all rows (the "Average" column).
    pub fn average_attacked(&self) -> f64 {
        self.rows.iter().map(|r| r.attacked).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

struct Outcome {
    clean_labels: Vec<bool>,
    attacked_labels: Vec<bool>,
    clean_logits: Vec<f32>,
    attacked_logits: Vec<f32>,
}

/// Score every victim on clean and perturbed test images.
pub fn evaluate_attack(
    perturber: &dyn Perturber,
    info: &GeneratorInfo,
    victims: &[Victim],
    dataset: &SceneDataset,
) -> Result<AttackReport> {
    let test = dataset.test();
    if test.is_empty() {
        return Err(GamaError::Data("test split is empty".into()));
    }
    let eps = perturber.eps();
    let perturbed = par::map(&test, |s| -> Result<Vec<f32>> {
        let adv = perturber.perturb(s.image.data())?;
        check_budget(s.image.data(), &adv, eps)?;
        Ok(adv)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(victims.len());
    let mut attacked_predictions = Vec::with_capacity(victims.len());
    for v in victims {
        let vdims = v.model.dims();
        let idx: Vec<usize> = (0..test.len()).collect();
        let outcomes = par::map(&idx, |&i| -> Result<Outcome> {
            let prepare = |img: &[f32]| -> Result<Vec<f32>> {
                let resized = resize_nearest(img, dataset.dims, vdims)?;
                v.spec.defense.preprocess(&resized, vdims)
            };
            let (cl, _) = v.model.infer(&prepare(test[i].image.data())?)?;
            let (al, _) = v.model.infer(&prepare(&perturbed[i])?)?;
            let labels = |l: &[f32]| -> Vec<bool> {
                match v.model.task() {
                    Task::MultiLabel => l.iter().map(|&x| x >= 0.0).collect(),
                    Task::SingleLabel => {
                        let b = argmax(l);
                        (0..l.len()).map(|j| j == b).collect()
                    }
                }
            };
            Ok(Outcome {
                clean_labels: labels(&cl),
                attacked_labels: labels(&al),
                clean_logits: cl,
                attacked_logits: al,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let truths: Vec<Vec<bool>> = test.iter().map(|s| s.labels.clone()).collect();
        if truths[0].len() != v.model.classes() {
            return Err(GamaError::Compat(format!(
                "victim {} predicts {} classes, dataset has {}",
                v.spec.id,
                v.model.classes(),
                truths[0].len()
            )));
        }
        let (metric, clean, attacked) = match v.model.task() {
            Task::MultiLabel => {
                let c: Vec<Vec<bool>> = outcomes.iter().map(|o| o.clean_labels.clone()).collect();
                let a: Vec<Vec<bool>> =
                    outcomes.iter().map(|o| o.attacked_labels.clone()).collect();
                (
                    "hamming",
                    hamming_score(&c, &truths)?,
                    hamming_score(&a, &truths)?,
                )
            }
            Task::SingleLabel => {
                let labels = truths
                    .iter()
                    .map(|t| match t.iter().filter(|&&b| b).count() {
                        1 => Ok(t.iter().position(|&b| b).unwrap()),
                        n => Err(GamaError::Data(format!(
                            "single-label victim {} given a {n}-object scene",
                            v.spec.id
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let c: Vec<Vec<f32>> = outcomes.iter().map(|o| o.clean_logits.clone()).collect();
                let a: Vec<Vec<f32>> = outcomes.iter().map(|o| o.attacked_logits.clone()).collect();
                (
                    "top1",
                    top1_accuracy(&c, &labels)?,
                    top1_accuracy(&a, &labels)?,
                )
            }
        };
        let white = info.surrogate_fingerprints.contains(&v.model.fingerprint())
            && dataset.distribution_id == info.distribution_id
            && v.spec.distribution_id == info.distribution_id;
        rows.push(AttackRow {
            generator_id: info.id.clone(),
            surrogate_id: info.surrogate_id.clone(),
            victim_id: v.spec.id.clone(),
            task: v.model.task().name().into(),
            defense: v.spec.defense.name(),
            scenario: if white {
                Scenario::White
            } else {
                Scenario::Black
            },
            metric: metric.into(),
            clean,
            attacked,
            epsilon: eps as f64,
        });
        attacked_predictions.push(outcomes.into_iter().map(|o| o.attacked_labels).collect());
    }
    Ok(AttackReport {
        rows,
        attacked_predictions,
    })
}

pub fn report_csv(rows: &[AttackRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| GamaError::Data(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record([
            "generator_id",
            "surrogate_id",
            "victim_id",
            "task",
            "defense",
            "scenario",
            "metric",
            "clean",
            "attacked",
            "epsilon",
        ])
        .map_err(|e| GamaError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| GamaError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| GamaError::Data(e.to_string()))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<AttackRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| GamaError::Data(format!("report CSV: {e}"))))
        .collect()
}

/// Generator ids follow `<method>-s<seed>`; returns the method part.
pub fn method_of(generator_id: &str) -> &str {
    match generator_id.rfind("-s") {
        Some(i)
            if generator_id[i + 2..].chars().all(|c| c.is_ascii_digit())
                && i + 2 < generator_id.len() =>
        {
            &generator_id[..i]
        }
        _ => generator_id,
    }
}

/// Victims as columns, one row per generator (and defense), plus a clean
/// "no_attack" row and a per-row average column.
pub fn transfer_matrix(rows: &[AttackRow]) -> String {
    let mut victims: Vec<String> = Vec::new();
    for r in rows {
        if !victims.contains(&r.victim_id) {
            victims.push(r.victim_id.clone());
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut clean: BTreeMap<String, f64> = BTreeMap::new();
    for r in rows {
        let key = if r.defense == "none" {
            r.generator_id.clone()
        } else {
            format!("{}@{}", r.generator_id, r.defense)
        };
        if !order.contains(&key) {
            order.push(key.clone());
        }
        cells.insert((key, r.victim_id.clone()), r.attacked);
        clean.entry(r.victim_id.clone()).or_insert(r.clean);
    }
    let mut out = format!("generator_id,{},average\n", victims.join(","));
    let line = |name: &str, values: Vec<Option<f64>>| {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let avg = present.iter().sum::<f64>() / present.len().max(1) as f64;
        let cols: Vec<String> = values
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
            .collect();
        format!("{name},{},{avg:.6}\n", cols.join(","))
    };
    out.push_str(&line(
        "no_attack",
        victims.iter().map(|v| clean.get(v).copied()).collect(),
    ));
    for key in &order {
        out.push_str(&line(
            key,
            victims
                .iter()
                .map(|v| cells.get(&(key.clone(), v.clone())).copied())
                .collect(),
        ));
    }
    out
}

/// Ablation arms in plotting order with the method that realises each.
pub const ABLATION_ARMS: [(&str, &str); 3] = [
    ("L_i", "ablate_img_only"),
    ("L_i+L_t", "ablate_img_txt"),
    ("L", "gama"),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationArm {
    pub arm: String,
    pub method: String,
    #[serde(serialize_with = "six")]
    pub clean: f64,
    #[serde(serialize_with = "six")]
    pub attacked: f64,
    pub rows: usize,
}

/// Mean black-box scores of each ablation arm, in arm order. Arms with no rows are skipped.
pub fn ablation_summary(rows: &[AttackRow]) -> Vec<AblationArm> {
    ABLATION_ARMS
        .iter()
        .filter_map(|&(arm, method)| {
            let sel: Vec<&AttackRow> = rows
                .iter()
                .filter(|r| r.scenario == Scenario::Black && method_of(&r.generator_id) == method)
                .collect();
            (!sel.is_empty()).then(|| AblationArm {
                arm: arm.into(),
                method: method.into(),
                clean: sel.iter().map(|r| r.clean).sum::<f64>() / sel.len() as f64,
                attacked: sel.iter().map(|r| r.attacked).sum::<f64>() / sel.len() as f64,
                rows: sel.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub generator_id: String,
    pub victim_id: String,
    #[serde(serialize_with = "six")]
    pub precision: f64,
    #[serde(serialize_with = "six")]
    pub misclassification: f64,
    #[serde(serialize_with = "six")]
    pub score: f64,
}

pub fn context_rows_csv(rows: &[ContextRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| GamaError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| GamaError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| GamaError::Data(e.to_string()))
}

pub fn parse_context_csv(text: &str) -> Result<Vec<ContextRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| GamaError::Data(format!("context CSV: {e}"))))
        .collect()
}

/// Mean context score per attack method: `method,precision,misclassification,score,rows`.
pub fn context_summary(rows: &[ContextRow]) -> String {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let m = method_of(&r.generator_id).to_string();
        if !order.contains(&m) {
            order.push(m.clone());
        }
        let e = acc.entry(m).or_default();
        e.0 += r.precision;
        e.1 += r.misclassification;
        e.2 += r.score;
        e.3 += 1;
    }
    let mut out = String::from("method,precision,misclassification,score,rows\n");
    for m in order {
        let (p, mc, s, n) = acc[&m];
        let n_f = n as f64;
        out.push_str(&format!(
            "{m},{:.6},{:.6},{:.6},{n}\n",
            p / n_f,
            mc / n_f,
            s / n_f
        ));
    }
    out
}

/// Centroids and separation of each `x,y,group` PCA export.
pub fn pca_summary(inputs: &[(String, String)]) -> Result<String> {
    #[derive(Deserialize)]
    struct Point {
        x: f64,
        y: f64,
        group: String,
    }
    let mut out = String::from("input,clean_x,clean_y,perturbed_x,perturbed_y,separation\n");
    for (name, text) in inputs {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let points: Vec<Point> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GamaError::Data(format!("{name}: {e}")))?;
        let coords: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
        let flags: Vec<bool> = points
            .iter()
            .map(|p| match p.group.as_str() {
                "clean" => Ok(false),
                "perturbed" => Ok(true),
                g => Err(GamaError::Data(format!("{name}: unknown group {g:?}"))),
            })
            .collect::<Result<_>>()?;
        let centre = |want: bool| {
            let sel: Vec<&[f64; 2]> = coords
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| f == want)
                .map(|(c, _)| c)
                .collect();
            let n = sel.len().max(1) as f64;
            (
                sel.iter().map(|c| c[0]).sum::<f64>() / n,
                sel.iter().map(|c| c[1]).sum::<f64>() / n,
            )
        };
        let (cx, cy) = centre(false);
        let (px, py) = centre(true);
        let sep = centroid_separation(&coords, &flags)?;
        out.push_str(&format!(
            "{name},{cx:.6},{cy:.6},{px:.6},{py:.6},{sep:.6}\n"
        ));
    }
    Ok(out)
}
