use gama_tensor::par;

use crate::error::{GamaError, Result};
use crate::nets::{class_prompt, JointEncoder};

fn ranked_classes(enc: &JointEncoder, image: &[f32], prompts: &[Vec<f32>]) -> Result<Vec<usize>> {
    let e = enc.encode_image(image)?;
    let sims: Vec<f32> = prompts
        .iter()
        .map(|p| p.iter().zip(&e).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

fn class_embeddings(enc: &JointEncoder, class_names: &[String]) -> Result<Vec<Vec<f32>>> {
    class_names
        .iter()
        .map(|n| enc.encode_text(&class_prompt(n)))
        .collect()
}

/// Top-k classes by image-prompt similarity for a clean and a perturbed image.
pub fn zero_shot_label_shift(
    enc: &JointEncoder,
    x: &[f32],
    x_adv: &[f32],
    class_names: &[String],
    top_k: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if top_k == 0 || top_k > class_names.len() {
        return Err(GamaError::config(
            "top_k",
            format!("must be in 1..={}", class_names.len()),
        ));
    }
    let prompts = class_embeddings(enc, class_names)?;
    let mut clean = ranked_classes(enc, x, &prompts)?;
    let mut adv = ranked_classes(enc, x_adv, &prompts)?;
    clean.truncate(top_k);
    adv.truncate(top_k);
    Ok((clean, adv))
}

/// Fraction of image pairs whose top-2 zero-shot class sets differ.
pub fn label_shift_rate(
    enc: &JointEncoder,
    pairs: &[(Vec<f32>, Vec<f32>)],
    class_names: &[String],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GamaError::Data("no image pairs".into()));
    }
    let k = 2.min(class_names.len());
    let prompts = class_embeddings(enc, class_names)?;
    let shifted = par::map(pairs, |(x, x_adv)| -> Result<bool> {
        let mut a = ranked_classes(enc, x, &prompts)?;
        let mut b = ranked_classes(enc, x_adv, &prompts)?;
        a.truncate(k);
        b.truncate(k);
        a.sort_unstable();
        b.sort_unstable();
        Ok(a != b)
    });
    let mut count = 0usize;
    for s in shifted {
        count += s? as usize;
    }
    Ok(count as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EncoderConfig, Model};
    use crate::scenegen::ImageDims;
    use gama_tensor::Rng;

    #[test]
    fn identical_images_share_labels_and_full_k_is_a_permutation() {
        let names: Vec<String> = ["disk", "cross", "square", "ring"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let enc = JointEncoder::build(
            &EncoderConfig::for_classes(&names, ImageDims::default()),
            &mut Rng::seed(6),
        )
        .unwrap();
        let x = vec![0.4; 3 * 32 * 32];
        let (a, b) = zero_shot_label_shift(&enc, &x, &x, &names, 2).unwrap();
        assert_eq!(a, b);
        let (mut a, _) = zero_shot_label_shift(&enc, &x, &x, &names, 4).unwrap();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(
            label_shift_rate(&enc, &[(x.clone(), x)], &names).unwrap(),
            0.0
        );
    }
}
