//! Training losses: next-2D-distribution prediction with window `w` and
//! supervision density `n`, plus the raster and random-order 1D baselines.
//!
//! Timestep `t` counts revealed grid tokens, so the prefix at `t` is the start
//! row plus `t` tokens and the supervised set is drawn from `0..N`.

use std::rc::Rc;
use std::time::Instant;

use serde::Serialize;

use crate::backbone::{InputRow, RowContent};
use crate::error::{GridError, Result};
use crate::grid::{Example, TokenPayload};
use crate::heads::{HeadJob, OutputLaw};
use crate::model::GridModel;
use crate::substrate::{adamw_step, scheduled_lr, OptimizerState, RealArray, Rng, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveTag {
    TwoD,
    Raster1d,
    Random1d,
}

impl ObjectiveTag {
    pub fn name(self) -> &'static str {
        match self {
            Self::TwoD => "2d",
            Self::Raster1d => "1d_raster",
            Self::Random1d => "1d_random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Self::TwoD),
            "1d_raster" => Ok(Self::Raster1d),
            "1d_random" => Ok(Self::Random1d),
            other => Err(GridError::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveConfig {
    pub tag: ObjectiveTag,
    pub window: usize,
    pub density: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderPlan {
    pub tag: ObjectiveTag,
    /// `order[i]` is the cell revealed at position `i`.
    pub order: Vec<usize>,
    /// Supervised timesteps, ascending.
    pub supervised: Vec<usize>,
    pub window: usize,
}

pub fn make_order_plan(tag: ObjectiveTag, cells: usize, window: usize, density: usize, rng: &mut Rng) -> Result<OrderPlan> {
    if cells == 0 {
        return Err(GridError::Config("grid has no cells".into()));
    }
    if density == 0 || density > cells {
        return Err(GridError::Config(format!("supervision density {density} outside 1..={cells}")));
    }
    if window == 0 || window > cells {
        return Err(GridError::Config(format!("window {window} outside 1..={cells}")));
    }
    let order = match tag {
        ObjectiveTag::Raster1d => (0..cells).collect(),
        ObjectiveTag::Random1d | ObjectiveTag::TwoD => rng.permutation(cells),
    };
    let supervised = match tag {
        ObjectiveTag::TwoD => {
            let mut s = rng.sample_distinct(cells, density);
            s.sort_unstable();
            s
        }
        _ => (0..cells).collect(),
    };
    Ok(OrderPlan { tag, order, supervised, window })
}

impl OrderPlan {
    /// Cells the head is asked to predict at timestep `t`.
    pub fn targets(&self, t: usize, geometry: Option<crate::heads::ChunkGeometry>) -> Result<Vec<usize>> {
        let n = self.order.len();
        if t >= n {
            return Err(GridError::Internal(format!("timestep {t} leaves no target in {n} cells")));
        }
        let rest = &self.order[t..];
        let targets: Vec<usize> = match (self.window == n, geometry) {
            (true, _) => rest.to_vec(),
            (false, Some(g)) => {
                let chunk = g.chunk_of(self.order[t]);
                let mut cells: Vec<usize> = g.cells_of(chunk).into_iter().filter(|c| rest.contains(c)).collect();
                // next target first, then the remaining chunk cells in reveal order
                cells.sort_by_key(|c| rest.iter().position(|r| r == c));
                cells
            }
            (false, None) => return Err(GridError::Config("window below N requires a chunk head".into())),
        };
        if targets.is_empty() {
            return Err(GridError::Internal(format!("empty target set at timestep {t}")));
        }
        Ok(targets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub example: usize,
    pub timestep: usize,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub tag: ObjectiveTag,
    pub total: f64,
    pub terms: Vec<LossTerm>,
}

impl LossBreakdown {
    pub fn target_count(&self) -> usize {
        self.terms.iter().map(|t| t.values.len()).sum()
    }

    /// Plain mean of the recorded per-position terms.
    pub fn mean_of_terms(&self) -> f64 {
        let s: f64 = self.terms.iter().flat_map(|t| t.values.iter()).sum();
        s / self.target_count() as f64
    }
}

fn check_example(model: &GridModel, ex: &Example) -> Result<()> {
    let c = &model.config;
    if ex.grid.height != c.height || ex.grid.width != c.width {
        return Err(GridError::Config(format!(
            "grid {}x{} does not match model {}x{}",
            ex.grid.height, ex.grid.width, c.height, c.width
        )));
    }
    if ex.grid.is_discrete() != (model.law() == OutputLaw::Categorical) {
        return Err(GridError::Config("grid token kind does not match the model".into()));
    }
    Ok(())
}

/// Per-position losses for feature rows against target tokens; returns rows
/// (one per position, or `samples` per position for the diffusion law).
fn law_rows(model: &GridModel, tape: &mut Tape, features: Var, targets: &[TokenPayload], rng: &mut Rng) -> Result<(Var, usize)> {
    match model.law() {
        OutputLaw::Categorical => {
            let ids = targets
                .iter()
                .map(|t| match t {
                    TokenPayload::Id(i) => Ok(*i),
                    TokenPayload::Latent(_) => Err(GridError::Config("latent target for categorical law".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = model.head.logits(tape, features)?;
            Ok((tape.cross_entropy_rows(logits, Rc::new(ids))?, 1))
        }
        OutputLaw::Diffusion => {
            let den = model.head.denoiser().ok_or_else(|| GridError::Internal("missing denoiser".into()))?;
            let m = den.latent();
            let mut x0 = Vec::with_capacity(targets.len() * m);
            for t in targets {
                match t {
                    TokenPayload::Latent(v) if v.len() == m => x0.extend_from_slice(v),
                    _ => return Err(GridError::Config(format!("expected latent targets of width {m}"))),
                }
            }
            let x0 = RealArray::from_vec(vec![targets.len(), m], x0)?;
            let samples = den.config().samples_per_token;
            Ok((den.loss_rows(tape, features, &x0, samples, rng)?, samples))
        }
    }
}

/// Builds the mean loss over all supervised positions of a batch.
pub fn batch_loss(model: &GridModel, tape: &mut Tape, batch: &[Example], plans: &[OrderPlan], rng: &mut Rng) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() || batch.len() != plans.len() {
        return Err(GridError::Config("batch and plans must be non-empty and aligned".into()));
    }
    let tag = plans[0].tag;
    if plans.iter().any(|p| p.tag != tag) {
        return Err(GridError::Config("mixed objectives in one batch".into()));
    }
    let n = model.cells();
    for (ex, plan) in batch.iter().zip(plans) {
        check_example(model, ex)?;
        if plan.order.len() != n {
            return Err(GridError::Config("plan size differs from grid size".into()));
        }
    }
    let mut rows = Vec::new();
    let mut seq_lens = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut terms = Vec::new();
    let hidden_features = match tag {
        ObjectiveTag::TwoD => {
            let head_window = model.head_config.window(n);
            let geometry = model.head.geometry();
            let mut jobs = Vec::new();
            for (e, (ex, plan)) in batch.iter().zip(plans).enumerate() {
                if plan.window != head_window {
                    return Err(GridError::Config(format!(
                        "plan window {} does not match head window {head_window}",
                        plan.window
                    )));
                }
                let deepest = *plan.supervised.last().ok_or_else(|| GridError::Config("no supervised timestep".into()))?;
                let base = rows.len();
                rows.push(InputRow { content: RowContent::Start(ex.class), position: None });
                for &cell in &plan.order[..deepest] {
                    rows.push(InputRow { content: RowContent::Token(ex.grid.token(cell)), position: Some(cell) });
                }
                seq_lens.push(deepest + 1);
                for &t in &plan.supervised {
                    let masked = plan.targets(t, geometry)?;
                    targets.extend(masked.iter().map(|&c| ex.grid.token(c)));
                    jobs.push(HeadJob { prefix_rows: (base..base + t + 1).collect(), masked: masked.clone() });
                    terms.push(LossTerm { example: e, timestep: t, positions: masked, values: Vec::new() });
                }
            }
            let x = model.backbone.embed_rows(tape, &rows)?;
            let h = model.backbone.forward_packed(tape, x, &seq_lens)?;
            model.head.forward_packed(tape, h, &jobs)?
        }
        ObjectiveTag::Raster1d | ObjectiveTag::Random1d => {
            for (e, (ex, plan)) in batch.iter().zip(plans).enumerate() {
                for (i, &cell) in plan.order.iter().enumerate() {
                    let content = if i == 0 {
                        RowContent::Start(ex.class)
                    } else {
                        RowContent::Token(ex.grid.token(plan.order[i - 1]))
                    };
                    rows.push(InputRow { content, position: Some(cell) });
                    targets.push(ex.grid.token(cell));
                    terms.push(LossTerm { example: e, timestep: i, positions: vec![cell], values: Vec::new() });
                }
                seq_lens.push(n);
            }
            let x = model.backbone.embed_rows(tape, &rows)?;
            let h = model.backbone.forward_packed(tape, x, &seq_lens)?;
            model.head.forward_causal(tape, h, &seq_lens)?
        }
    };
    let (loss_rows, per) = law_rows(model, tape, hidden_features, &targets, rng)?;
    let total = tape.mean(loss_rows)?;
    let values = tape.value(loss_rows).data();
    let mut k = 0;
    for term in &mut terms {
        for _ in 0..term.positions.len() {
            term.values.push(values[k..k + per].iter().sum::<f64>() / per as f64);
            k += per;
        }
    }
    let total_value = tape.value(total).data()[0];
    if !total_value.is_finite() {
        return Err(GridError::Numeric { layer: "loss".into(), message: "non-finite loss".into() });
    }
    Ok((total, LossBreakdown { tag, total: total_value, terms }))
}

/// 2D loss of one grid under a fixed plan.
pub fn loss_2d(model: &GridModel, example: &Example, plan: &OrderPlan, rng: &mut Rng) -> Result<LossBreakdown> {
    if plan.tag != ObjectiveTag::TwoD {
        return Err(GridError::Config("loss_2d needs a 2d plan".into()));
    }
    let mut tape = Tape::new(&model.store);
    Ok(batch_loss(model, &mut tape, std::slice::from_ref(example), std::slice::from_ref(plan), rng)?.1)
}

/// Next-token loss of one grid along a 1D plan with shifted positions.
pub fn loss_1d(model: &GridModel, example: &Example, plan: &OrderPlan, rng: &mut Rng) -> Result<LossBreakdown> {
    if plan.tag == ObjectiveTag::TwoD {
        return Err(GridError::Config("loss_1d needs a 1d plan".into()));
    }
    let mut tape = Tape::new(&model.store);
    Ok(batch_loss(model, &mut tape, std::slice::from_ref(example), std::slice::from_ref(plan), rng)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub objective: &'static str,
    pub w: usize,
    pub n: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// One optimizer step on a batch with fresh plans drawn from `rng`.
pub fn training_step(
    model: &mut GridModel,
    optimizer: &mut OptimizerState,
    objective: &ObjectiveConfig,
    schedule: &LrSchedule,
    batch: &[Example],
    rng: &mut Rng,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let n = model.cells();
    let plans = batch
        .iter()
        .map(|_| make_order_plan(objective.tag, n, objective.window, objective.density, rng))
        .collect::<Result<Vec<_>>>()?;
    let (loss, mut grads) = {
        let mut tape = Tape::new(&model.store);
        let (loss_var, breakdown) = batch_loss(model, &mut tape, batch, &plans, rng)?;
        (breakdown.total, tape.backward(loss_var)?)
    };
    let grad_norm = grads.norm();
    if !grad_norm.is_finite() {
        return Err(GridError::Numeric { layer: "backward".into(), message: "non-finite gradient norm".into() });
    }
    if let Some(clip) = schedule.clip_norm {
        if grad_norm > clip {
            let s = clip / grad_norm;
            for g in &mut grads.0 {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let lr = scheduled_lr(schedule.base, schedule.warmup_steps, optimizer.step_count);
    adamw_step(&mut model.store, optimizer, &grads, lr)?;
    Ok(StepMetrics {
        step: optimizer.step_count,
        objective: objective.tag.name(),
        w: objective.window,
        n: objective.density,
        loss,
        lr,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
