use gama_tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};
use crate::nets::{Model, SurrogateClassifier};
use crate::scenegen::ImageDims;

/// Serialized by its short name: `none`, `median3`, `pgd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Defense {
    None,
    /// Per-channel median filter applied to every victim input.
    MedianBlur {
        window: usize,
    },
    /// Victim trained with PGD adversarial examples.
    PgdTrained,
}

impl Defense {
    pub fn name(&self) -> String {
        match self {
            Defense::None => "none".into(),
            Defense::MedianBlur { window } => format!("median{window}"),
            Defense::PgdTrained => "pgd".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Defense::None),
            "pgd" => Ok(Defense::PgdTrained),
            _ => s
                .strip_prefix("median")
                .and_then(|w| w.parse().ok())
                .filter(|w: &usize| w % 2 == 1 && *w >= 3)
                .map(|window| Defense::MedianBlur { window })
                .ok_or_else(|| {
                    GamaError::config(
                        "defense",
                        format!("unknown defense {s:?}; expected none, median3 or pgd"),
                    )
                }),
        }
    }

    /// Input preprocessing this defense applies before the victim sees an image.
    pub fn preprocess(&self, image: &[f32], dims: ImageDims) -> Result<Vec<f32>> {
        match self {
            Defense::MedianBlur { window } => median_blur(image, dims, *window),
            _ => Ok(image.to_vec()),
        }
    }
}

impl TryFrom<String> for Defense {
    type Error = GamaError;

    fn try_from(s: String) -> Result<Self> {
        Defense::parse(&s)
    }
}

impl From<Defense> for String {
    fn from(d: Defense) -> String {
        d.name()
    }
}

/// Sliding-window median per channel with edge-replicate padding.
pub fn median_blur(image: &[f32], dims: ImageDims, window: usize) -> Result<Vec<f32>> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(GamaError::config(
            "window",
            format!("must be odd and at least 3, got {window}"),
        ));
    }
    if image.len() != dims.numel() {
        return Err(GamaError::Data(format!(
            "{} pixels for a {:?} image",
            image.len(),
            dims.shape()
        )));
    }
    let (h, w) = (dims.height as isize, dims.width as isize);
    let r = (window / 2) as isize;
    let mut out = vec![0.0; image.len()];
    let mut buf = Vec::with_capacity(window * window);
    for c in 0..dims.channels {
        let plane = &image[c * dims.height * dims.width..(c + 1) * dims.height * dims.width];
        for y in 0..h {
            for x in 0..w {
                buf.clear();
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h - 1);
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w - 1);
                        buf.push(plane[(yy * w + xx) as usize]);
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, f32::total_cmp);
                out[(c as isize * h * w + y * w + x) as usize] = *m;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f32,
    pub step: f32,
    pub iters: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        let eps = 4.0 / 255.0;
        Self {
            eps,
            step: eps / 2.0,
            iters: 3,
        }
    }
}

/// Iterated sign-gradient ascent on the model's training loss, projected onto
/// the ℓ∞ ball around `x` and the unit box after every step.
pub fn pgd_attack(
    model: &SurrogateClassifier,
    x: &[f32],
    labels: &[bool],
    cfg: &PgdConfig,
) -> Result<Vec<f32>> {
    if !(cfg.eps > 0.0) || cfg.iters == 0 || !(cfg.step > 0.0) {
        return Err(GamaError::config(
            "pgd",
            "eps and step must be positive and iters at least 1",
        ));
    }
    let shape = model.dims().shape();
    let lo: Vec<f32> = x.iter().map(|&v| (v - cfg.eps).max(0.0)).collect();
    let hi: Vec<f32> = x.iter().map(|&v| (v + cfg.eps).min(1.0)).collect();
    let mut adv = x.to_vec();
    for _ in 0..cfg.iters {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false)?;
        let xv = tape.input(&shape, adv.clone(), true)?;
        let (logits, _) = model.forward(&mut tape, &p, xv)?;
        let loss = model.loss(&mut tape, logits, labels)?;
        tape.backward(loss)?;
        let g = tape
            .grad(xv)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; adv.len()]);
        for (i, a) in adv.iter_mut().enumerate() {
            let s = if g[i] > 0.0 {
                1.0
            } else if g[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + cfg.step * s).clamp(lo[i], hi[i]);
        }
    }
    Ok(adv)
}
