//! Autoregressive grid generation: repeatedly pick a remaining cell, sample
//! its token from the head's prediction, and feed `(token, cell)` back.

use crate::backbone::{DecodeCache, InputRow, RowContent};
use crate::error::{GridError, Result};
use crate::grid::{TokenGrid, TokenPayload};
use crate::heads::{categorical_law, OutputLaw};
use crate::model::GridModel;
use crate::objective::ObjectiveTag;
use crate::substrate::{RealArray, Rng, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionPolicy {
    Uniform,
    Raster,
}

impl PositionPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "raster" => Ok(Self::Raster),
            other => Err(GridError::Config(format!("unknown position policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub diffusion_steps: usize,
    pub policy: PositionPolicy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: None, diffusion_steps: 100, policy: PositionPolicy::Uniform }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(GridError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(GridError::Config("top_k must be at least 1".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(GridError::Config("diffusion step count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GenerationState {
    pub revealed: Vec<(usize, TokenPayload)>,
    /// Unrevealed cells, ascending.
    pub remaining: Vec<usize>,
    pub cache: DecodeCache,
    /// Hidden states of the start row and every revealed token.
    pub hidden: Vec<f64>,
    pub step: usize,
    pub rng: Rng,
}

impl GenerationState {
    /// Fresh state with the start row already consumed.
    pub fn new(model: &GridModel, class: usize, seed: u64) -> Result<Self> {
        let mut cache = model.backbone.new_cache();
        let start = embed(model, InputRow { content: RowContent::Start(class), position: None })?;
        let h = model.backbone.causal_forward_step(&model.store, &mut cache, &start)?;
        Ok(Self {
            revealed: Vec::new(),
            remaining: (0..model.cells()).collect(),
            cache,
            hidden: h.into_data(),
            step: 0,
            rng: Rng::new(seed).split_named("generate", 0),
        })
    }

    fn prefix(&self, width: usize) -> RealArray {
        RealArray::from_vec(vec![self.hidden.len() / width, width], self.hidden.clone()).expect("prefix rows")
    }

    pub fn reveal(&mut self, model: &GridModel, cell: usize, token: TokenPayload) -> Result<()> {
        let slot = self
            .remaining
            .iter()
            .position(|&c| c == cell)
            .ok_or_else(|| GridError::State(format!("cell {cell} already revealed")))?;
        self.remaining.remove(slot);
        if !self.remaining.is_empty() {
            let x = embed(model, InputRow { content: RowContent::Token(token.clone()), position: Some(cell) })?;
            let h = model.backbone.causal_forward_step(&model.store, &mut self.cache, &x)?;
            self.hidden.extend_from_slice(h.data());
        }
        self.revealed.push((cell, token));
        self.step += 1;
        Ok(())
    }
}

fn embed(model: &GridModel, row: InputRow) -> Result<RealArray> {
    let mut tape = Tape::new(&model.store);
    let v = model.backbone.embed_rows(&mut tape, &[row])?;
    Ok(tape.value(v).clone())
}

pub fn choose_position(remaining: &[usize], policy: PositionPolicy, rng: &mut Rng) -> Result<usize> {
    if remaining.is_empty() {
        return Err(GridError::State("no remaining cells".into()));
    }
    Ok(match policy {
        PositionPolicy::Uniform => remaining[rng.below(remaining.len())],
        PositionPolicy::Raster => *remaining.iter().min().expect("non-empty"),
    })
}

/// Draws an id from logits with temperature and optional top-k truncation.
pub fn sample_categorical(logits: &[f64], config: &SamplingConfig, rng: &mut Rng) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(GridError::Numeric { layer: "head.logits".into(), message: "non-finite logits".into() });
    }
    let argmax = || {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    };
    if config.temperature < 1e-6 || config.top_k == Some(1) {
        return Ok(argmax());
    }
    let mut scaled: Vec<f64> = logits.iter().map(|v| v / config.temperature).collect();
    if let Some(k) = config.top_k {
        if k < scaled.len() {
            let mut idx: Vec<usize> = (0..scaled.len()).collect();
            idx.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
            for &i in &idx[k..] {
                scaled[i] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(rng.categorical(&categorical_law(&scaled)))
}

/// Samples the token of `cell` from a head call that masks every remaining cell.
pub fn sample_token(state: &mut GenerationState, cell: usize, model: &GridModel, config: &SamplingConfig) -> Result<TokenPayload> {
    if !state.remaining.contains(&cell) {
        return Err(GridError::State(format!("cell {cell} already revealed")));
    }
    let masked = model.default_mask(&state.revealed, cell)?;
    let payload = model.predict_from_hidden(&state.prefix(model.config.hidden), &masked)?;
    let slot = masked.iter().position(|&c| c == cell).expect("cell is masked");
    draw_payload(model, payload.row(slot), config, &mut state.rng)
}

/// Draws one token from a predicted payload row (logits or diffusion condition).
pub fn draw_payload(model: &GridModel, payload: &[f64], config: &SamplingConfig, rng: &mut Rng) -> Result<TokenPayload> {
    match model.law() {
        OutputLaw::Categorical => Ok(TokenPayload::Id(sample_categorical(payload, config, rng)?)),
        OutputLaw::Diffusion => {
            let den = model.head.denoiser().ok_or_else(|| GridError::Internal("missing denoiser".into()))?;
            let z = RealArray::from_vec(vec![1, payload.len()], payload.to_vec())?;
            let tag = rng.next_u64();
            let mut streams = [rng.split(tag)];
            let x = den.sample(&model.store, &z, &mut streams, config.diffusion_steps)?;
            Ok(TokenPayload::Latent(x.into_data()))
        }
    }
}

fn to_grid(model: &GridModel, revealed: &[(usize, TokenPayload)]) -> Result<TokenGrid> {
    let c = &model.config;
    let mut slots: Vec<Option<&TokenPayload>> = vec![None; c.cells()];
    for (cell, t) in revealed {
        if slots[*cell].replace(t).is_some() {
            return Err(GridError::Internal(format!("cell {cell} revealed twice")));
        }
    }
    let tokens: Vec<&TokenPayload> = slots
        .into_iter()
        .map(|s| s.ok_or_else(|| GridError::Internal("unfilled cell".into())))
        .collect::<Result<_>>()?;
    match model.law() {
        OutputLaw::Categorical => TokenGrid::from_ids(
            c.height,
            c.width,
            tokens.iter().map(|t| if let TokenPayload::Id(i) = t { *i } else { 0 }).collect(),
        ),
        OutputLaw::Diffusion => {
            let m = model.head.denoiser().map_or(0, |d| d.latent());
            let mut values = Vec::with_capacity(c.cells() * m);
            for t in tokens {
                if let TokenPayload::Latent(v) = t {
                    values.extend_from_slice(v);
                }
            }
            TokenGrid::from_latents(c.height, c.width, m, values)
        }
    }
}

/// Fills a grid with the decode cache; deterministic in `seed`.
pub fn generate_grid(model: &GridModel, class: usize, config: &SamplingConfig, seed: u64) -> Result<TokenGrid> {
    config.validate()?;
    let mut state = GenerationState::new(model, class, seed)?;
    while !state.remaining.is_empty() {
        let cell = choose_position(&state.remaining, config.policy, &mut state.rng)?;
        let token = sample_token(&mut state, cell, model, config)?;
        state.reveal(model, cell, token)?;
    }
    to_grid(model, &state.revealed)
}

/// Same draws as [`generate_grid`] but re-running the full prefix at every step.
pub fn generate_grid_uncached(model: &GridModel, class: usize, config: &SamplingConfig, seed: u64) -> Result<TokenGrid> {
    config.validate()?;
    let mut rng = Rng::new(seed).split_named("generate", 0);
    let mut revealed: Vec<(usize, TokenPayload)> = Vec::new();
    let mut remaining: Vec<usize> = (0..model.cells()).collect();
    while !remaining.is_empty() {
        let cell = choose_position(&remaining, config.policy, &mut rng)?;
        let masked = model.default_mask(&revealed, cell)?;
        let payload = model.predict(class, &revealed, &masked)?;
        let slot = masked.iter().position(|&c| c == cell).expect("cell is masked");
        let token = draw_payload(model, payload.row(slot), config, &mut rng)?;
        remaining.retain(|&c| c != cell);
        revealed.push((cell, token));
    }
    to_grid(model, &revealed)
}

/// Generation for the 1D baselines: each step feeds the previous token at the
/// position of the next target and reads the causal head output.
pub fn generate_grid_1d(model: &GridModel, tag: ObjectiveTag, class: usize, config: &SamplingConfig, seed: u64) -> Result<TokenGrid> {
    config.validate()?;
    let mut rng = Rng::new(seed).split_named("generate", 0);
    let n = model.cells();
    let order = match tag {
        ObjectiveTag::Raster1d => (0..n).collect(),
        ObjectiveTag::Random1d => rng.permutation(n),
        ObjectiveTag::TwoD => return Err(GridError::Config("2d models use generate_grid".into())),
    };
    let mut revealed: Vec<(usize, TokenPayload)> = Vec::with_capacity(n);
    for &cell in &order {
        let payload = next_token_payload(model, class, &revealed, cell)?;
        let token = draw_payload(model, payload.row(0), config, &mut rng)?;
        revealed.push((cell, token));
    }
    to_grid(model, &revealed)
}

/// Causal-head payload predicting `next` after the revealed sequence (1D baselines).
pub fn next_token_payload(model: &GridModel, class: usize, revealed: &[(usize, TokenPayload)], next: usize) -> Result<RealArray> {
    let mut rows = Vec::with_capacity(revealed.len() + 1);
    for i in 0..=revealed.len() {
        let content = if i == 0 { RowContent::Start(class) } else { RowContent::Token(revealed[i - 1].1.clone()) };
        let position = if i < revealed.len() { revealed[i].0 } else { next };
        rows.push(InputRow { content, position: Some(position) });
    }
    let mut tape = Tape::new(&model.store);
    let x = model.backbone.embed_rows(&mut tape, &rows)?;
    let h = model.backbone.forward_packed(&mut tape, x, &[rows.len()])?;
    let f = model.head.forward_causal(&mut tape, h, &[rows.len()])?;
    let last = tape.gather_rows(f, std::rc::Rc::new(vec![rows.len() - 1]))?;
    let p = model.head.payload(&mut tape, last)?;
    Ok(tape.value(p).clone())
}
