use crate::error::{mismatch, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Adam hyper-parameters. Defaults are the generator settings: learning rate
/// 1e-4 with decay rates 0.5 and 0.999.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(mismatch(
                "adam_step",
                format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != g.len() || p.numel() != m.len() {
                return Err(mismatch(
                    "adam_step",
                    format!(
                        "param {:?} with {} grads and {} moments",
                        p.shape(),
                        g.len(),
                        m.len()
                    ),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_generator_settings() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (1e-4, 0.5, 0.999, 1e-8));
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = vec![Tensor::<f64>::from_slice(&[1.0, -2.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::<f64>::from_slice(&[1.0, 1.0]).unwrap()];
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[vec![0.5, -2.0]]).unwrap();
        let want0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let want1 = 1.0 + 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].data()[0] - want0).abs() < 1e-15);
        assert!((p[0].data()[1] - want1).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::from_slice(&[1.0, 1.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(opt.step(&mut p, &[vec![0.5]]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }
}
