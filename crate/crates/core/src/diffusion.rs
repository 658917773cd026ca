//! Diffusion output law: cosine noise schedule, an MLP denoiser with
//! adaptive scale/shift conditioning on `(t, z)`, the noise-prediction loss and
//! DDPM ancestral sampling.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{GridError, Result};
use crate::substrate::layers::{self, LinearParams, ParamBuilder};
use crate::substrate::{ParamStore, RealArray, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionHeadConfig {
    pub block_count: usize,
    pub width: usize,
    pub step_count: usize,
    /// Noise draws per target position in the training loss.
    pub samples_per_token: usize,
    /// Clamp on the predicted clean latent during sampling; `None` keeps the raw estimate.
    pub clip_x0: Option<f64>,
}

impl Default for DiffusionHeadConfig {
    fn default() -> Self {
        Self { block_count: 3, width: 256, step_count: 100, samples_per_token: 4, clip_x0: None }
    }
}

impl DiffusionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_count < 10 {
            return Err(GridError::Config("diffusion step_count must be at least 10".into()));
        }
        if self.block_count == 0 || self.width == 0 || self.samples_per_token == 0 {
            return Err(GridError::Config("diffusion blocks, width and samples must be positive".into()));
        }
        if self.clip_x0.is_some_and(|c| !(c > 0.0)) {
            return Err(GridError::Config("diffusion clip_x0 must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine schedule; index `t - 1` holds the values of step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineSchedule {
    pub alpha_bar: Vec<f64>,
    pub betas: Vec<f64>,
}

impl CosineSchedule {
    pub fn new(steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
        let mut betas = Vec::with_capacity(steps);
        for t in 1..=steps {
            let b = 1.0 - f(t as f64) / f((t - 1) as f64);
            betas.push(b.clamp(0.0, 0.999));
        }
        Self::from_betas(betas)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self { alpha_bar, betas }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar(t)` for `t` in `1..=T`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Evenly respaced sub-schedule with `count` steps; returns the original step per new step.
    pub fn respaced(&self, count: usize) -> (CosineSchedule, Vec<usize>) {
        let count = count.clamp(1, self.steps());
        if count == self.steps() {
            return (self.clone(), (1..=self.steps()).collect());
        }
        let kept: Vec<usize> = (0..count)
            .map(|i| 1 + ((i as f64) * (self.steps() - 1) as f64 / (count - 1).max(1) as f64).round() as usize)
            .collect();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(count);
        for &t in &kept {
            let ab = self.alpha_bar_at(t);
            betas.push((1.0 - ab / prev).clamp(0.0, 0.999));
            prev = ab;
        }
        (Self::from_betas(betas), kept)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenoiserBlock {
    shift: LinearParams,
    scale: LinearParams,
    gate: LinearParams,
    fc1: LinearParams,
    fc2: LinearParams,
}

/// MLP noise predictor `eps(x_t, t, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DiffusionHeadConfig,
    latent: usize,
    schedule: CosineSchedule,
    input: LinearParams,
    time1: LinearParams,
    time2: LinearParams,
    cond: LinearParams,
    blocks: Vec<DenoiserBlock>,
    final_shift: LinearParams,
    final_scale: LinearParams,
    out: LinearParams,
}

fn timestep_embedding(steps: &[usize], width: usize) -> RealArray {
    let half = width / 2;
    let mut data = vec![0.0; steps.len() * width];
    for (r, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            data[r * width + i] = a.cos();
            data[r * width + half + i] = a.sin();
        }
    }
    RealArray::from_vec(vec![steps.len(), width], data).expect("timestep embedding")
}

impl Denoiser {
    pub fn new(config: &DiffusionHeadConfig, latent: usize, cond_width: usize, pb: &mut ParamBuilder) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let blocks = (0..config.block_count)
            .map(|i| {
                let n = format!("diffusion.block{i}");
                Ok(DenoiserBlock {
                    shift: pb.linear_zero(&format!("{n}.shift"), w, w)?,
                    scale: pb.linear_zero(&format!("{n}.scale"), w, w)?,
                    gate: pb.linear_zero(&format!("{n}.gate"), w, w)?,
                    fc1: pb.linear(&format!("{n}.fc1"), w, w)?,
                    fc2: pb.linear(&format!("{n}.fc2"), w, w)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            latent,
            schedule: CosineSchedule::new(config.step_count),
            input: pb.linear("diffusion.input", latent, w)?,
            time1: pb.linear("diffusion.time1", w, w)?,
            time2: pb.linear("diffusion.time2", w, w)?,
            cond: pb.linear("diffusion.cond", cond_width, w)?,
            blocks,
            final_shift: pb.linear_zero("diffusion.final_shift", w, w)?,
            final_scale: pb.linear_zero("diffusion.final_scale", w, w)?,
            out: pb.linear_zero("diffusion.out", w, latent)?,
        })
    }

    pub fn config(&self) -> &DiffusionHeadConfig {
        &self.config
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    /// Predicted noise for rows `x_t` at steps `t` under conditioning rows `z`.
    pub fn forward(&self, tape: &mut Tape, x_t: Var, steps: &[usize], z: Var) -> Result<Var> {
        let w = self.config.width;
        let temb = tape.constant(timestep_embedding(steps, w));
        let t1 = layers::linear(tape, temb, &self.time1)?;
        let t1 = tape.silu(t1);
        let t2 = layers::linear(tape, t1, &self.time2)?;
        let zc = layers::linear(tape, z, &self.cond)?;
        let c = tape.add(t2, zc)?;
        let c = tape.silu(c);
        let mut x = layers::linear(tape, x_t, &self.input)?;
        for b in &self.blocks {
            let n = tape.layer_norm(x, None, None, 1e-6)?;
            let shift = layers::linear(tape, c, &b.shift)?;
            let scale = layers::linear(tape, c, &b.scale)?;
            let gate = layers::linear(tape, c, &b.gate)?;
            let h = tape.modulate(n, scale, shift)?;
            let h = layers::linear(tape, h, &b.fc1)?;
            let h = tape.silu(h);
            let h = layers::linear(tape, h, &b.fc2)?;
            let h = tape.mul(h, gate)?;
            x = tape.add(x, h)?;
        }
        let n = tape.layer_norm(x, None, None, 1e-6)?;
        let shift = layers::linear(tape, c, &self.final_shift)?;
        let scale = layers::linear(tape, c, &self.final_scale)?;
        let h = tape.modulate(n, scale, shift)?;
        layers::linear(tape, h, &self.out)
    }

    /// Per-draw losses `||eps - eps_hat||^2`, `samples` draws per row of `x0`.
    ///
    /// Output rows are ordered `[row0 draw0, row0 draw1, ..., row1 draw0, ...]`.
    pub fn loss_rows(&self, tape: &mut Tape, z: Var, x0: &RealArray, samples: usize, rng: &mut Rng) -> Result<Var> {
        let rows = x0.rows();
        if x0.cols() != self.latent || tape.value(z).rows() != rows {
            return Err(GridError::Config("diffusion loss inputs disagree in shape".into()));
        }
        if !tape.value(z).all_finite() {
            return Err(GridError::Numeric { layer: "diffusion.cond".into(), message: "non-finite conditioning vector".into() });
        }
        let m = self.latent;
        let n = rows * samples;
        let mut steps = Vec::with_capacity(n);
        let mut noisy = Vec::with_capacity(n * m);
        let mut noise = Vec::with_capacity(n * m);
        let mut idx = Vec::with_capacity(n);
        for r in 0..rows {
            for _ in 0..samples {
                let t = 1 + rng.below(self.schedule.steps());
                let ab = self.schedule.alpha_bar_at(t);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                for &x in x0.row(r) {
                    let e = rng.normal();
                    noise.push(e);
                    noisy.push(sa * x + sn * e);
                }
                steps.push(t);
                idx.push(r);
            }
        }
        let zr = tape.gather_rows(z, Rc::new(idx))?;
        let xt = tape.constant(RealArray::from_vec(vec![n, m], noisy)?);
        let eps = tape.constant(RealArray::from_vec(vec![n, m], noise)?);
        let pred = self.forward(tape, xt, &steps, zr)?;
        tape.squared_error_rows(pred, eps)
    }

    /// DDPM ancestral sampling for each row of `z`, one RNG stream per row.
    pub fn sample(&self, store: &ParamStore, z: &RealArray, rngs: &mut [Rng], step_count: usize) -> Result<RealArray> {
        let rows = z.rows();
        if rngs.len() != rows {
            return Err(GridError::Config("one RNG stream per sampled row required".into()));
        }
        let m = self.latent;
        let (sched, kept) = self.schedule.respaced(step_count);
        let mut x: Vec<f64> = Vec::with_capacity(rows * m);
        for rng in rngs.iter_mut() {
            for _ in 0..m {
                x.push(rng.normal());
            }
        }
        for i in (0..sched.steps()).rev() {
            let mut tape = Tape::new(store);
            let xv = tape.constant(RealArray::from_vec(vec![rows, m], x.clone())?);
            let zv = tape.constant(z.clone());
            let eps = self.forward(&mut tape, xv, &vec![kept[i]; rows], zv)?;
            let eps = tape.value(eps).data();
            let beta = sched.betas[i];
            let ab = sched.alpha_bar[i];
            let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar[i - 1] };
            // posterior q(x_{t-1} | x_t, x0) with x0 estimated from eps
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let sigma = if i == 0 { 0.0 } else { (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt() };
            for (r, rng) in rngs.iter_mut().enumerate() {
                for j in 0..m {
                    let k = r * m + j;
                    let mut x0 = (x[k] - (1.0 - ab).sqrt() * eps[k]) / ab.sqrt();
                    if let Some(c) = self.config.clip_x0 {
                        x0 = x0.clamp(-c, c);
                    }
                    let mean = c0 * x0 + ct * x[k];
                    x[k] = if i == 0 { mean } else { mean + sigma * rng.normal() };
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Numeric { layer: "diffusion.sample".into(), message: "non-finite sample".into() });
        }
        RealArray::from_vec(vec![rows, m], x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule::new(100);
        assert!(s.alpha_bar_at(1) > 0.99);
        assert!(s.alpha_bar_at(100) < 0.01);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn respacing_keeps_endpoints() {
        let s = CosineSchedule::new(100);
        let (r, kept) = s.respaced(10);
        assert_eq!(kept.first(), Some(&1));
        assert_eq!(kept.last(), Some(&100));
        assert!((r.alpha_bar[0] - s.alpha_bar_at(1)).abs() < 1e-12);
        assert!(r.alpha_bar[9] < 0.01);
    }
}
