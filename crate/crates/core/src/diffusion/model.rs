//! Small conditional noise-prediction network `ε_θ(x, t, z)`.
//!
//! Two SiLU hidden layers over the concatenation of the state, a sinusoidal
//! time embedding and a learned prompt embedding. All parameters live in one
//! flat vector so optimizers, finite-difference audits and checkpoints can
//! treat them uniformly. Gradients are hand-derived (see [`DenoiserModel::backward`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::PromptId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub prompts: usize,
    pub steps: usize,
    pub time_embed: usize,
    pub prompt_embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn new(dim: usize, prompts: usize, steps: usize) -> Self {
        Self {
            dim,
            prompts,
            steps,
            time_embed: 16,
            prompt_embed: 8,
            hidden: 64,
        }
    }

    fn input_width(&self) -> usize {
        self.dim + self.time_embed + self.prompt_embed
    }

    fn layout(&self) -> Layout {
        let table = 0;
        let w1 = table + self.prompts * self.prompt_embed;
        let b1 = w1 + self.hidden * self.input_width();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * self.hidden;
        let w3 = b2 + self.hidden;
        let b3 = w3 + self.dim * self.hidden;
        let total = b3 + self.dim;
        Layout {
            table,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.prompts == 0 || self.steps == 0 || self.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.time_embed.is_multiple_of(2) || self.time_embed == 0 {
            return Err(Error::Config("time embedding width must be even and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    table: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

/// Anything that predicts the forward noise from a noisy state.
pub trait EpsPredictor: Sync {
    fn dim(&self) -> usize;
    fn predict_eps(&self, x: &[f64], t: usize, z: PromptId) -> Vec<f64>;
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Intermediate activations of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z: PromptId,
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    dims: ModelDims,
    params: Vec<f64>,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let l = dims.layout();
        let mut params = vec![0.0; l.total];
        for p in &mut params[l.table..l.w1] {
            *p = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        }
        let mut uniform = |slice: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in slice {
                *p = rng.random_range(-bound..bound);
            }
        };
        uniform(&mut params[l.w1..l.b1], dims.input_width());
        uniform(&mut params[l.w2..l.b2], dims.hidden);
        uniform(&mut params[l.w3..l.b3], dims.hidden);
        Ok(Self { dims, params })
    }

    pub fn from_params(dims: ModelDims, params: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if params.len() != dims.param_count() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Frequencies are geometric between 0.5 and `T / 2` over `t / T ∈ (0, 1]`,
    /// so no feature turns by more than half a radian between adjacent steps.
    fn time_embedding(&self, t: usize, out: &mut [f64]) {
        let half = self.dims.time_embed / 2;
        let steps = self.dims.steps as f64;
        let position = t as f64 / steps;
        for i in 0..half {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let freq = 0.5 * steps.powf(frac);
            out[i] = (position * freq).sin();
            out[half + i] = (position * freq).cos();
        }
    }

    pub fn forward(&self, x: &[f64], t: usize, z: PromptId) -> ForwardCache {
        let d = self.dims;
        let l = d.layout();
        let p = &self.params;
        let width = d.input_width();

        let mut input = vec![0.0; width];
        input[..d.dim].copy_from_slice(x);
        self.time_embedding(t, &mut input[d.dim..d.dim + d.time_embed]);
        let row = l.table + z.0 * d.prompt_embed;
        input[d.dim + d.time_embed..].copy_from_slice(&p[row..row + d.prompt_embed]);

        let dense = |w: usize, b: usize, rows: usize, cols: usize, inp: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|r| {
                    let weights = &p[w + r * cols..w + (r + 1) * cols];
                    p[b + r] + weights.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        };

        let pre1 = dense(l.w1, l.b1, d.hidden, width, &input);
        let act1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
        let pre2 = dense(l.w2, l.b2, d.hidden, d.hidden, &act1);
        let act2: Vec<f64> = pre2.iter().map(|&v| silu(v)).collect();
        let output = dense(l.w3, l.b3, d.dim, d.hidden, &act2);
        ForwardCache {
            z,
            input,
            pre1,
            act1,
            pre2,
            act2,
            output,
        }
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output` for one forward pass.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let d = self.dims;
        let l = d.layout();
        let p = &self.params;
        let width = d.input_width();

        for o in 0..d.dim {
            grad[l.b3 + o] += d_out[o];
            let g = &mut grad[l.w3 + o * d.hidden..l.w3 + (o + 1) * d.hidden];
            for (gk, a) in g.iter_mut().zip(&cache.act2) {
                *gk += d_out[o] * a;
            }
        }

        let mut d_pre2 = vec![0.0; d.hidden];
        for (k, dp) in d_pre2.iter_mut().enumerate() {
            let upstream: f64 = (0..d.dim).map(|o| p[l.w3 + o * d.hidden + k] * d_out[o]).sum();
            *dp = upstream * silu_grad(cache.pre2[k]);
        }
        for (a, &dp) in d_pre2.iter().enumerate() {
            grad[l.b2 + a] += dp;
            let g = &mut grad[l.w2 + a * d.hidden..l.w2 + (a + 1) * d.hidden];
            for (gk, h) in g.iter_mut().zip(&cache.act1) {
                *gk += dp * h;
            }
        }

        let mut d_act1 = vec![0.0; d.hidden];
        for (a, &dp) in d_pre2.iter().enumerate() {
            let w = &p[l.w2 + a * d.hidden..l.w2 + (a + 1) * d.hidden];
            for (acc, wk) in d_act1.iter_mut().zip(w) {
                *acc += wk * dp;
            }
        }
        let d_pre1: Vec<f64> = d_act1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, &x)| g * silu_grad(x))
            .collect();

        let embed_offset = d.dim + d.time_embed;
        let mut d_embed = vec![0.0; d.prompt_embed];
        for (a, &dp) in d_pre1.iter().enumerate() {
            grad[l.b1 + a] += dp;
            let row = l.w1 + a * width;
            let g = &mut grad[row..row + width];
            for (gk, x) in g.iter_mut().zip(&cache.input) {
                *gk += dp * x;
            }
            for (e, acc) in d_embed.iter_mut().enumerate() {
                *acc += p[row + embed_offset + e] * dp;
            }
        }
        let table_row = l.table + cache.z.0 * d.prompt_embed;
        for (e, g) in d_embed.iter().enumerate() {
            grad[table_row + e] += g;
        }
    }
}

impl EpsPredictor for DenoiserModel {
    fn dim(&self) -> usize {
        self.dims.dim
    }

    fn predict_eps(&self, x: &[f64], t: usize, z: PromptId) -> Vec<f64> {
        self.forward(x, t, z).output
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn model(seed: u64) -> DenoiserModel {
        let dims = ModelDims::new(2, 3, 20);
        DenoiserModel::new(dims, &mut SeedTree::new(seed).stream("init")).unwrap()
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let dims = ModelDims::new(2, 4, 50);
        // table 4·8, layer1 64·26 + 64, layer2 64·64 + 64, layer3 2·64 + 2
        assert_eq!(dims.param_count(), 32 + 1664 + 64 + 4096 + 64 + 128 + 2);
        assert_eq!(model(1).param_count(), ModelDims::new(2, 3, 20).param_count());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(model(3), model(3));
        assert_ne!(model(3), model(4));
    }

    #[test]
    fn from_params_validates() {
        let dims = ModelDims::new(2, 3, 20);
        assert!(DenoiserModel::from_params(dims, vec![0.0; 3]).is_err());
        let mut p = vec![0.0; dims.param_count()];
        p[5] = f64::NAN;
        assert!(DenoiserModel::from_params(dims, p).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = model(9);
        let x = [0.3, -0.7];
        let z = PromptId(2);
        let t = 7;
        // L = Σ_o c_o · out_o
        let c = [0.8, -1.3];
        let loss = |m: &DenoiserModel| -> f64 {
            m.forward(&x, t, z).output.iter().zip(&c).map(|(o, c)| o * c).sum()
        };
        let mut grad = vec![0.0; m.param_count()];
        let cache = m.forward(&x, t, z);
        m.backward(&cache, &c, &mut grad);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..m.param_count()).step_by(7) {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = loss(&m);
            m.params_mut()[i] = orig - h;
            let down = loss(&m);
            m.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-6));
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn unused_prompt_rows_get_no_gradient() {
        let m = model(2);
        let mut grad = vec![0.0; m.param_count()];
        let cache = m.forward(&[0.1, 0.2], 3, PromptId(0));
        m.backward(&cache, &[1.0, 1.0], &mut grad);
        let row1 = &grad[8..16];
        assert!(row1.iter().all(|g| *g == 0.0));
        assert!(grad[0..8].iter().any(|g| *g != 0.0));
    }
}
