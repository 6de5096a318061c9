use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::scenegen::CooccurrenceMatrix;

/// Mean per-sample `|Y ∩ Ŷ| / |Y ∪ Ŷ|` as a percentage; two empty sets score 1.
pub fn hamming_score(predictions: &[Vec<bool>], truths: &[Vec<bool>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(GamaError::Data("hamming score of an empty set".into()));
    }
    if predictions.len() != truths.len() {
        return Err(GamaError::Data(format!(
            "{} predictions for {} ground-truth rows",
            predictions.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(GamaError::Data(format!(
                "label widths differ: {} vs {}",
                p.len(),
                t.len()
            )));
        }
        let inter = p.iter().zip(t).filter(|(&a, &b)| a && b).count();
        let union = p.iter().zip(t).filter(|(&a, &b)| a || b).count();
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(100.0 * total / predictions.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top1_accuracy(logits: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(GamaError::Data("top-1 accuracy of an empty set".into()));
    }
    if logits.len() != labels.len() {
        return Err(GamaError::Data(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(100.0 * hits as f64 / logits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextScore {
    /// Fraction of predicted co-occurring pairs that are real co-occurrences.
    pub precision: f64,
    /// `1 − accuracy` on the perturbed set.
    pub misclassification: f64,
    pub score: f64,
    pub predicted_pairs: usize,
}

/// `2pm / (p + m)`, zero when both terms vanish.
pub fn harmonic_context(p: f64, m: f64) -> f64 {
    if p + m == 0.0 {
        0.0
    } else {
        2.0 * p * m / (p + m)
    }
}

/// Co-occurrence precision of perturbed predictions against `o`, combined with
/// the misclassification rate `1 − accuracy` (accuracy given as a fraction).
pub fn context_consistency_score(
    predictions: &[Vec<bool>],
    o: &CooccurrenceMatrix,
    accuracy: f64,
) -> Result<ContextScore> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(GamaError::Data(format!(
            "accuracy {accuracy} is not a fraction"
        )));
    }
    let o_delta =
        CooccurrenceMatrix::from_label_sets(o.size(), predictions.iter().map(|p| p.as_slice()));
    let pairs = o_delta.pairs();
    let precision = if pairs.is_empty() {
        1.0
    } else {
        pairs.iter().filter(|&&(i, j)| o.get(i, j)).count() as f64 / pairs.len() as f64
    };
    let misclassification = 1.0 - accuracy;
    Ok(ContextScore {
        precision,
        misclassification,
        score: harmonic_context(precision, misclassification),
        predicted_pairs: pairs.len(),
    })
}
