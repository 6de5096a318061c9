use gama_tensor::{Activation, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use super::{check_image, Conv, Model, ModelKind, ParamStore};
use crate::error::{GamaError, Result};
use crate::scenegen::ImageDims;

/// Keeps `atanh(2x − 1)` finite for saturated pixels.
const PIXEL_GUARD: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dims: ImageDims,
    /// Channels after the first convolution; the bottleneck has twice as many.
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Initial weight scale of the output convolution.
    pub output_gain: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dims: ImageDims::default(),
            base_channels: 8,
            residual_blocks: 2,
            output_gain: 0.01,
        }
    }
}

/// Encoder-decoder CNN: two strided downsamplings, residual blocks at the
/// bottleneck, two nearest-neighbour upsamplings. The network predicts an
/// offset in `atanh` space, so the squashed output starts near the input.
#[derive(Debug, Clone)]
pub struct PerturbationGenerator {
    config: GeneratorConfig,
    params: ParamStore,
    inc: Conv,
    down: [Conv; 2],
    blocks: Vec<[Conv; 2]>,
    up: Conv,
    up2: Conv,
    out: Conv,
}

impl Model for PerturbationGenerator {
    const KIND: ModelKind = ModelKind::Generator;
    type Config = GeneratorConfig;

    fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn architecture_id(&self) -> u16 {
        0
    }

    fn build(config: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.dims;
        if !d.height.is_multiple_of(4) || !d.width.is_multiple_of(4) || config.base_channels == 0 {
            return Err(GamaError::config(
                "generator",
                "image height and width must be multiples of 4 and base_channels positive",
            ));
        }
        let (c0, c1) = (config.base_channels, 2 * config.base_channels);
        let mut p = ParamStore::default();
        let inc = Conv::new(&mut p, "in", d.channels, c0, 3, 1, rng, 1.0)?;
        let down = [
            Conv::new(&mut p, "down1", c0, c1, 3, 2, rng, 1.0)?,
            Conv::new(&mut p, "down2", c1, c1, 3, 2, rng, 1.0)?,
        ];
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                Ok([
                    Conv::new(&mut p, &format!("res{i}.a"), c1, c1, 3, 1, rng, 0.7)?,
                    Conv::new(&mut p, &format!("res{i}.b"), c1, c1, 3, 1, rng, 0.35)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let up = Conv::new(&mut p, "up1", c1, c1, 3, 1, rng, 1.0)?;
        let up2 = Conv::new(&mut p, "up2", c1, c0, 3, 1, rng, 1.0)?;
        let out = Conv::new(
            &mut p,
            "out",
            c0,
            d.channels,
            3,
            1,
            rng,
            config.output_gain as f64,
        )?;
        Ok(Self {
            config: config.clone(),
            params: p,
            inc,
            down,
            blocks,
            up,
            up2,
            out,
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl PerturbationGenerator {
    pub fn dims(&self) -> ImageDims {
        self.config.dims
    }

    /// Squashed output in `[0, 1]`, before projection.
    pub fn raw(&self, tape: &mut Tape<f32>, p: &[Var], x: &[f32]) -> Result<Var> {
        check_image(self.config.dims, x)?;
        let act = Activation::FUSED_LEAKY;
        let shape = self.config.dims.shape();
        let xv = tape.constant(&shape, x.iter().map(|&v| 2.0 * v - 1.0).collect())?;
        let skip = self.inc.forward(tape, p, xv)?;
        let skip = tape.activation(skip, act)?;
        let mut h = skip;
        for conv in &self.down {
            h = conv.forward(tape, p, h)?;
            h = tape.activation(h, act)?;
        }
        for [a, b] in &self.blocks {
            let r = a.forward(tape, p, h)?;
            let r = tape.activation(r, act)?;
            let r = b.forward(tape, p, r)?;
            h = tape.add(h, r)?;
        }
        h = tape.upsample2x(h)?;
        h = self.up.forward(tape, p, h)?;
        h = tape.activation(h, act)?;
        h = tape.upsample2x(h)?;
        h = self.up2.forward(tape, p, h)?;
        h = tape.add(h, skip)?;
        h = tape.activation(h, act)?;
        let offset = self.out.forward(tape, p, h)?;

        let base: Vec<f32> = x
            .iter()
            .map(|&v| (2.0 * v.clamp(PIXEL_GUARD, 1.0 - PIXEL_GUARD) - 1.0).atanh())
            .collect();
        let base = tape.constant(&shape, base)?;
        let pre = tape.add(offset, base)?;
        let t = tape.activation(pre, Activation::Tanh)?;
        let half = tape.scale(t, 0.5)?;
        Ok(tape.add_scalar(half, 0.5)?)
    }

    /// Projected adversarial image `x̃ = P(raw)` with `‖x̃ − x‖∞ ≤ ε` and `x̃ ∈ [0,1]`.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &[Var], x: &[f32], eps: f32) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(GamaError::config(
                "eps",
                format!("must be positive, got {eps}"),
            ));
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GamaError::Data("generator input outside [0, 1]".into()));
        }
        let raw = self.raw(tape, p, x)?;
        Ok(tape.project_linf(raw, x, eps)?)
    }

    /// Inference with frozen weights.
    pub fn perturb(&self, x: &[f32], eps: f32) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &p, x, eps)?;
        Ok(tape.value(out).to_vec())
    }
}
