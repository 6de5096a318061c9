//! Co-occurrence-filtered class-pair prompts, their embedding matrix, and
//! least-similar retrieval.

use std::path::Path;

use gama_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::formats::{self, read_tensor_record, write_tensor_record, ByteReader, ByteWriter};
use crate::nets::{JointEncoder, Model, PREFIX};
use crate::scenegen::CooccurrenceMatrix;

pub(crate) const MAGIC: &str = "GAMB";
pub(crate) const VERSION: u16 = 1;
const MATRIX_NAME: &str = "text_embeddings";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub class_pair: (usize, usize),
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub prefix: String,
    pub prompts: Vec<TextPrompt>,
    /// `P × K`, one unit-norm row per prompt.
    pub embeddings: Tensor<f32>,
    pub encoder_fingerprint: String,
}

/// One prompt per unordered co-occurring pair, in lexicographic pair order.
pub fn build_prompts(
    class_names: &[String],
    o: &CooccurrenceMatrix,
    prefix: &str,
) -> Result<Vec<TextPrompt>> {
    if o.size() != class_names.len() {
        return Err(GamaError::Data(format!(
            "co-occurrence matrix is {0}×{0} for {1} class names",
            o.size(),
            class_names.len()
        )));
    }
    if !o.is_symmetric() || (0..o.size()).any(|i| o.get(i, i)) {
        return Err(GamaError::Data(
            "co-occurrence matrix must be symmetric with zero diagonal".into(),
        ));
    }
    if prefix.trim().is_empty() {
        return Err(GamaError::config("prefix", "must not be empty"));
    }
    let pairs = o.pairs();
    if pairs.is_empty() {
        return Err(GamaError::Data("no co-occurring pairs".into()));
    }
    Ok(pairs
        .into_iter()
        .map(|(i, j)| TextPrompt {
            class_pair: (i, j),
            text: format!(
                "{} {} and {}",
                prefix.trim(),
                class_names[i],
                class_names[j]
            ),
        })
        .collect())
}

pub fn default_prefix() -> &'static str {
    PREFIX
}

pub fn embed_bank(prompts: &[TextPrompt], enc: &JointEncoder, prefix: &str) -> Result<PromptBank> {
    if prompts.is_empty() {
        return Err(GamaError::Data("no prompts to embed".into()));
    }
    let k = enc.embed_dim();
    let mut data = Vec::with_capacity(prompts.len() * k);
    for p in prompts {
        data.extend(enc.encode_text(&p.text)?);
    }
    Ok(PromptBank {
        prefix: prefix.to_string(),
        prompts: prompts.to_vec(),
        embeddings: Tensor::new(vec![prompts.len(), k], data)?,
        encoder_fingerprint: enc.fingerprint(),
    })
}

impl PromptBank {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, p: usize) -> &[f32] {
        let k = self.embed_dim();
        &self.embeddings.data()[p * k..(p + 1) * k]
    }
}

/// `b` row indices drawn uniformly: without replacement when `b ≤ P`, with replacement otherwise.
pub fn sample_candidates(bank: &PromptBank, b: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let p = bank.len();
    if p == 0 {
        return Err(GamaError::Data("prompt bank is empty".into()));
    }
    if b == 0 {
        return Err(GamaError::config("candidates", "must be at least 1"));
    }
    if b > p {
        return Ok((0..b).map(|_| rng.below(p)).collect());
    }
    // Partial Fisher-Yates.
    let mut idx: Vec<usize> = (0..p).collect();
    for i in 0..b {
        let j = i + rng.below(p - i);
        idx.swap(i, j);
    }
    idx.truncate(b);
    Ok(idx)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Candidate with the smallest cosine similarity to `rho_img`; ties go to the
/// lowest bank row. Returns the bank row index and its embedding.
pub fn least_similar<'a>(
    rho_img: &[f32],
    bank: &'a PromptBank,
    candidates: &[usize],
) -> Result<(usize, &'a [f32])> {
    if candidates.is_empty() {
        return Err(GamaError::Data("empty candidate set".into()));
    }
    if rho_img.len() != bank.embed_dim() {
        return Err(GamaError::Compat(format!(
            "image embedding has {} dims, bank has {}",
            rho_img.len(),
            bank.embed_dim()
        )));
    }
    let mut best: Option<(f64, usize)> = None;
    for &c in candidates {
        if c >= bank.len() {
            return Err(GamaError::Data(format!(
                "candidate {c} out of range for {} prompts",
                bank.len()
            )));
        }
        let s = cosine(rho_img, bank.row(c));
        best = match best {
            Some((bs, bi)) if bs < s || (bs == s && bi <= c) => Some((bs, bi)),
            _ => Some((s, c)),
        };
    }
    let (_, idx) = best.expect("candidates are nonempty");
    Ok((idx, bank.row(idx)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankManifest {
    prefix: String,
    prompts: Vec<TextPrompt>,
    encoder_fingerprint: String,
    embed_dim: usize,
}

/// Embedding matrix as a framed tensor record plus a JSON prompt list.
pub fn save_bank(path: &Path, bank: &PromptBank) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC.as_bytes());
    w.u16(VERSION);
    w.u32(1);
    write_tensor_record(&mut w, MATRIX_NAME, &bank.embeddings);
    formats::write_atomic(path, &w.finish())?;
    formats::write_json(
        &formats::sidecar_path(path),
        &BankManifest {
            prefix: bank.prefix.clone(),
            prompts: bank.prompts.clone(),
            encoder_fingerprint: bank.encoder_fingerprint.clone(),
            embed_dim: bank.embed_dim(),
        },
    )
}

pub fn load_bank(path: &Path) -> Result<PromptBank> {
    let bytes = formats::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    if r.u32()? != 1 {
        return Err(GamaError::Data(
            "bank file must hold exactly one tensor".into(),
        ));
    }
    let (name, embeddings) = read_tensor_record(&mut r)?;
    r.finish()?;
    let m: BankManifest = formats::read_json(&formats::sidecar_path(path))?;
    if name != MATRIX_NAME || embeddings.shape() != [m.prompts.len(), m.embed_dim] {
        return Err(GamaError::Data(format!(
            "bank matrix {name} has shape {:?}, manifest lists {} prompts of width {}",
            embeddings.shape(),
            m.prompts.len(),
            m.embed_dim
        )));
    }
    Ok(PromptBank {
        prefix: m.prefix,
        prompts: m.prompts,
        embeddings,
        encoder_fingerprint: m.encoder_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderConfig;
    use crate::scenegen::{default_pairs, ImageDims, CLASS_NAMES};

    fn names(c: usize) -> Vec<String> {
        CLASS_NAMES[..c].iter().map(|s| s.to_string()).collect()
    }

    fn bank_from_rows(rows: &[Vec<f32>]) -> PromptBank {
        let k = rows[0].len();
        PromptBank {
            prefix: PREFIX.into(),
            prompts: (0..rows.len())
                .map(|i| TextPrompt {
                    class_pair: (0, i + 1),
                    text: String::new(),
                })
                .collect(),
            embeddings: Tensor::new(vec![rows.len(), k], rows.concat()).unwrap(),
            encoder_fingerprint: String::new(),
        }
    }

    #[test]
    fn prompts_follow_cooccurrence() {
        let o = CooccurrenceMatrix::from_pairs(4, &[(0, 1), (0, 2)]).unwrap();
        let p = build_prompts(&names(4), &o, PREFIX).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].text, "a photo depicts disk and cross");
        assert_eq!(p[1].class_pair, (0, 2));
        assert!(build_prompts(&names(4), &CooccurrenceMatrix::zeros(4), PREFIX).is_err());

        let o = CooccurrenceMatrix::from_pairs(6, &default_pairs(6)).unwrap();
        let p = build_prompts(&names(6), &o, PREFIX).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.len(), o.nonzero() / 2);
    }

    #[test]
    fn least_similar_examples() {
        // cs with (1,0): 0.9 and -0.3.
        let a = vec![0.9, (1.0f32 - 0.81).sqrt()];
        let b = vec![-0.3, (1.0f32 - 0.09).sqrt()];
        let bank = bank_from_rows(&[a, b]);
        assert_eq!(least_similar(&[1.0, 0.0], &bank, &[0, 1]).unwrap().0, 1);
        assert_eq!(least_similar(&[1.0, 0.0], &bank, &[0]).unwrap().0, 0);
        assert!(least_similar(&[1.0, 0.0], &bank, &[]).is_err());
        let tie = bank_from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(least_similar(&[1.0, 0.0], &tie, &[1, 0]).unwrap().0, 0);
    }

    #[test]
    fn candidate_sampling() {
        let bank = bank_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let mut s = sample_candidates(&bank, 3, &mut Rng::seed(1)).unwrap();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2]);
        let one = sample_candidates(&bank, 1, &mut Rng::seed(1)).unwrap();
        assert!(one.len() == 1 && one[0] < 3);
        let many = sample_candidates(&bank, 16, &mut Rng::seed(2)).unwrap();
        assert_eq!(
            many,
            sample_candidates(&bank, 16, &mut Rng::seed(2)).unwrap()
        );
        assert!(many.iter().all(|&i| i < 3));
        assert!(sample_candidates(&bank, 0, &mut Rng::seed(2)).is_err());
    }

    #[test]
    fn embed_and_round_trip() {
        let enc = JointEncoder::build(
            &EncoderConfig::for_classes(&names(6), ImageDims::default()),
            &mut Rng::seed(3),
        )
        .unwrap();
        let o = CooccurrenceMatrix::from_pairs(6, &default_pairs(6)).unwrap();
        let prompts = build_prompts(&names(6), &o, PREFIX).unwrap();
        let bank = embed_bank(&prompts, &enc, PREFIX).unwrap();
        assert_eq!(bank.embeddings.shape(), [8, 64]);
        for p in 0..bank.len() {
            let n: f32 = bank.row(p).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(embed_bank(&prompts, &enc, PREFIX).unwrap(), bank);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.gamb");
        save_bank(&path, &bank).unwrap();
        assert_eq!(load_bank(&path).unwrap(), bank);
    }
}
