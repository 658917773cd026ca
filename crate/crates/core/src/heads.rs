//! 2D prediction heads: map causal prefix hidden states to per-cell output
//! law parameters for every masked cell.
//!
//! The global head runs bidirectional blocks over `[prefix states, mask
//! tokens]` and reads outputs at mask slots only. The chunk head lets
//! per-offset queries of one chunk cross-attend to the prefix, interleaved
//! with bidirectional self-attention inside the chunk.

use std::rc::Rc;

use crate::backbone::{ModelConfig, TokenKind};
use crate::diffusion::{Denoiser, DiffusionHeadConfig};
use crate::error::{GridError, Result};
use crate::substrate::layers::{self, AttnParams, BlockParams, LinearParams, NormParams, ParamBuilder};
use crate::substrate::tape::log_softmax_parts;
use crate::substrate::{AttnLayout, AttnSegment, ParamId, ParamStore, RealArray, Rng, SegmentMask, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Global,
    Chunk { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLaw {
    Categorical,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub depth: usize,
    pub hidden: usize,
    pub head_count: usize,
    pub law: OutputLaw,
}

impl HeadConfig {
    /// Head sized like the backbone.
    pub fn matching(model: &ModelConfig, kind: HeadKind) -> Self {
        let law = match model.token {
            TokenKind::Discrete { .. } => OutputLaw::Categorical,
            TokenKind::Continuous { .. } => OutputLaw::Diffusion,
        };
        Self { kind, depth: model.depth, hidden: model.hidden, head_count: model.head_count, law }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.hidden != model.hidden {
            return Err(GridError::Config(format!(
                "head hidden {} must equal backbone hidden {}",
                self.hidden, model.hidden
            )));
        }
        if self.head_count == 0 || self.hidden % self.head_count != 0 {
            return Err(GridError::Config("head width not divisible by head count".into()));
        }
        match (self.law, model.token) {
            (OutputLaw::Categorical, TokenKind::Discrete { .. }) | (OutputLaw::Diffusion, TokenKind::Continuous { .. }) => {}
            _ => {
                return Err(GridError::Config(
                    "categorical law requires discrete tokens and diffusion requires continuous tokens".into(),
                ))
            }
        }
        if let HeadKind::Chunk { window } = self.kind {
            ChunkGeometry::new(model.height, model.width, window)?;
        }
        Ok(())
    }

    pub fn window(&self, cells: usize) -> usize {
        match self.kind {
            HeadKind::Global => cells,
            HeadKind::Chunk { window } => window,
        }
    }
}

/// Tiling of the grid into equal contiguous rectangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub height: usize,
    pub width: usize,
    pub chunk_h: usize,
    pub chunk_w: usize,
}

impl ChunkGeometry {
    /// `s x s` blocks when `window = s^2` tiles the grid, else `1 x window` runs,
    /// else bands of whole rows.
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        let cells = height * width;
        if window == 0 || cells % window != 0 {
            return Err(GridError::Config(format!("window {window} does not divide {cells} cells")));
        }
        let s = (window as f64).sqrt().round() as usize;
        let (chunk_h, chunk_w) = if s * s == window && height % s == 0 && width % s == 0 {
            (s, s)
        } else if width % window == 0 {
            (1, window)
        } else if window % width == 0 && height % (window / width) == 0 {
            (window / width, width)
        } else {
            return Err(GridError::Config(format!("window {window} cannot tile a {height}x{width} grid")));
        };
        Ok(Self { height, width, chunk_h, chunk_w })
    }

    pub fn window(&self) -> usize {
        self.chunk_h * self.chunk_w
    }

    pub fn chunks_per_row(&self) -> usize {
        self.width / self.chunk_w
    }

    pub fn chunk_count(&self) -> usize {
        (self.height / self.chunk_h) * self.chunks_per_row()
    }

    pub fn chunk_of(&self, cell: usize) -> usize {
        let (r, c) = (cell / self.width, cell % self.width);
        (r / self.chunk_h) * self.chunks_per_row() + c / self.chunk_w
    }

    /// Row-major offset of `cell` inside its chunk.
    pub fn offset_in_chunk(&self, cell: usize) -> usize {
        let (r, c) = (cell / self.width, cell % self.width);
        (r % self.chunk_h) * self.chunk_w + c % self.chunk_w
    }

    pub fn cells_of(&self, chunk: usize) -> Vec<usize> {
        let (cr, cc) = (chunk / self.chunks_per_row(), chunk % self.chunks_per_row());
        let mut out = Vec::with_capacity(self.window());
        for r in 0..self.chunk_h {
            for c in 0..self.chunk_w {
                out.push((cr * self.chunk_h + r) * self.width + cc * self.chunk_w + c);
            }
        }
        out
    }
}

/// One head invocation inside a packed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadJob {
    /// Rows of the packed backbone output forming the causal prefix.
    pub prefix_rows: Vec<usize>,
    /// Masked cells to predict, in slot order.
    pub masked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct ChunkLayer {
    cross_norm: NormParams,
    cross: AttnParams,
    block: BlockParams,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Global { mask_table: ParamId, blocks: Vec<BlockParams> },
    Chunk { geometry: ChunkGeometry, queries: ParamId, layers: Vec<ChunkLayer> },
}

#[derive(Debug, Clone, PartialEq)]
enum Output {
    Categorical(LinearParams),
    Diffusion(Box<Denoiser>),
}

/// Per-position output law parameters for a set of masked cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub positions: Vec<usize>,
    pub law: OutputLaw,
    /// One row per position: `K` logits or a conditioning vector.
    pub payload: RealArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    config: HeadConfig,
    cells: usize,
    position: ParamId,
    body: Body,
    norm: NormParams,
    output: Output,
}

impl PredictionHead {
    pub fn new(
        config: &HeadConfig,
        model: &ModelConfig,
        diffusion: Option<&DiffusionHeadConfig>,
        position_table: ParamId,
        store: &mut ParamStore,
        rng: &Rng,
    ) -> Result<Self> {
        config.validate(model)?;
        let mut pb = ParamBuilder::new(store, rng.split_named("head", 0));
        let h = config.hidden;
        let ffn = model.ffn_dim;
        let body = match config.kind {
            HeadKind::Global => Body::Global {
                mask_table: pb.normal("head.mask_table", &[model.cells(), h], 0.02)?,
                blocks: (0..config.depth)
                    .map(|i| pb.block(&format!("head.block{i}"), h, ffn))
                    .collect::<Result<Vec<_>>>()?,
            },
            HeadKind::Chunk { window } => Body::Chunk {
                geometry: ChunkGeometry::new(model.height, model.width, window)?,
                queries: pb.normal("head.query_table", &[window, h], 0.02)?,
                layers: (0..config.depth)
                    .map(|i| {
                        Ok(ChunkLayer {
                            cross_norm: pb.layer_norm(&format!("head.layer{i}.cross_norm"), h)?,
                            cross: pb.attention(&format!("head.layer{i}.cross"), h)?,
                            block: pb.block(&format!("head.layer{i}.self"), h, ffn)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            },
        };
        let norm = pb.layer_norm("head.norm", h)?;
        let output = match (config.law, model.token) {
            (OutputLaw::Categorical, TokenKind::Discrete { vocab }) => Output::Categorical(pb.linear_small("head.logits", h, vocab, 0.02)?),
            (OutputLaw::Diffusion, TokenKind::Continuous { latent }) => {
                let dc = diffusion.cloned().unwrap_or_default();
                Output::Diffusion(Box::new(Denoiser::new(&dc, latent, h, &mut pb)?))
            }
            _ => return Err(GridError::Config("output law does not match token kind".into())),
        };
        Ok(Self { config: config.clone(), cells: model.cells(), position: position_table, body, norm, output })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn geometry(&self) -> Option<ChunkGeometry> {
        match &self.body {
            Body::Chunk { geometry, .. } => Some(*geometry),
            Body::Global { .. } => None,
        }
    }

    pub fn denoiser(&self) -> Option<&Denoiser> {
        match &self.output {
            Output::Diffusion(d) => Some(d),
            Output::Categorical(_) => None,
        }
    }

    /// Normalized features at every masked slot of every job, packed in job order.
    ///
    /// Masked cells are processed in ascending cell order and the rows are
    /// permuted back, so slot order never changes the arithmetic.
    pub fn forward_packed(&self, tape: &mut Tape, hidden: Var, jobs: &[HeadJob]) -> Result<Var> {
        let mut sorted = Vec::with_capacity(jobs.len());
        let mut back = Vec::new();
        for job in jobs {
            let mut order: Vec<usize> = (0..job.masked.len()).collect();
            order.sort_by_key(|&i| job.masked[i]);
            let mut rank = vec![0; order.len()];
            for (r, &i) in order.iter().enumerate() {
                rank[i] = r;
            }
            let base = back.len();
            back.extend(rank.iter().map(|&r| base + r));
            sorted.push(HeadJob { prefix_rows: job.prefix_rows.clone(), masked: order.iter().map(|&i| job.masked[i]).collect() });
        }
        let f = self.forward_sorted(tape, hidden, &sorted)?;
        if back.iter().enumerate().all(|(i, &b)| i == b) {
            Ok(f)
        } else {
            tape.gather_rows(f, Rc::new(back))
        }
    }

    fn forward_sorted(&self, tape: &mut Tape, hidden: Var, jobs: &[HeadJob]) -> Result<Var> {
        let hrows = tape.value(hidden).rows();
        for job in jobs {
            if job.prefix_rows.iter().any(|&r| r >= hrows) {
                return Err(GridError::Config("head prefix row out of range".into()));
            }
            if job.masked.iter().any(|&c| c >= self.cells) {
                return Err(GridError::Config("masked cell outside grid".into()));
            }
        }
        let heads = self.config.head_count;
        let features = match &self.body {
            Body::Global { mask_table, blocks } => {
                let mt = tape.param(*mask_table);
                let pos = tape.param(self.position);
                let mask_rows = tape.add(mt, pos)?;
                let src = tape.concat_rows(&[hidden, mask_rows])?;
                let mut idx = Vec::new();
                let mut segs = Vec::with_capacity(jobs.len());
                let mut out_idx = Vec::new();
                for job in jobs {
                    let start = idx.len();
                    idx.extend(job.prefix_rows.iter().copied());
                    out_idx.extend(idx.len()..idx.len() + job.masked.len());
                    idx.extend(job.masked.iter().map(|&c| hrows + c));
                    let len = idx.len() - start;
                    segs.push(AttnSegment { q_start: start, q_len: len, k_start: start, k_len: len, mask: SegmentMask::Full });
                }
                let layout = Rc::new(AttnLayout::new(heads, segs)?);
                let mut x = tape.gather_rows(src, Rc::new(idx))?;
                for (i, b) in blocks.iter().enumerate() {
                    x = layers::transformer_block_forward(tape, x, b, layout.clone(), &format!("head.block{i}"))?;
                }
                tape.gather_rows(x, Rc::new(out_idx))?
            }
            Body::Chunk { geometry, queries, layers: chunk_layers } => {
                let mut q_off = Vec::new();
                let mut q_cell = Vec::new();
                let mut ctx_idx = Vec::new();
                let mut cross = Vec::with_capacity(jobs.len());
                let mut own = Vec::with_capacity(jobs.len());
                for job in jobs {
                    if job.prefix_rows.is_empty() {
                        return Err(GridError::Config("chunk head requires a non-empty prefix".into()));
                    }
                    let chunk = job.masked.first().map(|&c| geometry.chunk_of(c));
                    if job.masked.iter().any(|&c| Some(geometry.chunk_of(c)) != chunk) {
                        return Err(GridError::Config("masked cells span more than one chunk".into()));
                    }
                    let (qs, ks) = (q_cell.len(), ctx_idx.len());
                    q_off.extend(job.masked.iter().map(|&c| geometry.offset_in_chunk(c)));
                    q_cell.extend(job.masked.iter().copied());
                    ctx_idx.extend(job.prefix_rows.iter().copied());
                    let (ql, kl) = (job.masked.len(), job.prefix_rows.len());
                    cross.push(AttnSegment { q_start: qs, q_len: ql, k_start: ks, k_len: kl, mask: SegmentMask::Full });
                    own.push(AttnSegment { q_start: qs, q_len: ql, k_start: qs, k_len: ql, mask: SegmentMask::Full });
                }
                let cross = Rc::new(AttnLayout::new(heads, cross)?);
                let own = Rc::new(AttnLayout::new(heads, own)?);
                let qt = tape.param(*queries);
                let qrows = tape.gather_rows(qt, Rc::new(q_off))?;
                let pos = tape.param(self.position);
                let prows = tape.gather_rows(pos, Rc::new(q_cell))?;
                let mut x = tape.add(qrows, prows)?;
                let ctx = tape.gather_rows(hidden, Rc::new(ctx_idx))?;
                for (i, l) in chunk_layers.iter().enumerate() {
                    let nq = layers::layer_norm(tape, x, &l.cross_norm)?;
                    let a = layers::attend(tape, nq, ctx, &l.cross, cross.clone())?;
                    x = tape.add(x, a)?;
                    x = layers::transformer_block_forward(tape, x, &l.block, own.clone(), &format!("head.layer{i}"))?;
                }
                x
            }
        };
        layers::layer_norm(tape, features, &self.norm)
    }

    /// Head blocks run causally over whole sequences, used by the 1D baselines.
    pub fn forward_causal(&self, tape: &mut Tape, hidden: Var, seq_lens: &[usize]) -> Result<Var> {
        let Body::Global { blocks, .. } = &self.body else {
            return Err(GridError::Config("1D objectives require the global head".into()));
        };
        let layout = Rc::new(crate::backbone::causal_layout(self.config.head_count, seq_lens)?);
        let mut x = hidden;
        for (i, b) in blocks.iter().enumerate() {
            x = layers::transformer_block_forward(tape, x, b, layout.clone(), &format!("head.block{i}"))?;
        }
        layers::layer_norm(tape, x, &self.norm)
    }

    /// Categorical logits for feature rows.
    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        match &self.output {
            Output::Categorical(p) => layers::linear(tape, features, p),
            Output::Diffusion(_) => Err(GridError::Config("diffusion head has no logits".into())),
        }
    }

    /// Payload rows for features: logits (categorical) or the features themselves (diffusion).
    pub fn payload(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        match &self.output {
            Output::Categorical(p) => layers::linear(tape, features, p),
            Output::Diffusion(_) => Ok(features),
        }
    }

    /// Global head on one prefix; `prefix_cells` lists the cells already revealed.
    pub fn global_head_forward(
        &self,
        tape: &mut Tape,
        prefix: Var,
        prefix_cells: &[usize],
        masked_cells: &[usize],
    ) -> Result<GridPrediction> {
        if !matches!(self.body, Body::Global { .. }) {
            return Err(GridError::Config("not a global head".into()));
        }
        self.single_job(tape, prefix, prefix_cells, masked_cells)
    }

    /// Chunk head on one prefix for masked cells of chunk `chunk_id`.
    pub fn chunk_head_forward(
        &self,
        tape: &mut Tape,
        prefix: Var,
        prefix_cells: &[usize],
        chunk_id: usize,
        masked_cells: &[usize],
    ) -> Result<GridPrediction> {
        let Body::Chunk { geometry, .. } = &self.body else {
            return Err(GridError::Config("not a chunk head".into()));
        };
        if chunk_id >= geometry.chunk_count() {
            return Err(GridError::Config(format!("chunk {chunk_id} out of range")));
        }
        if let Some(c) = masked_cells.iter().find(|&&c| c >= self.cells || geometry.chunk_of(c) != chunk_id) {
            return Err(GridError::Config(format!("cell {c} is not in chunk {chunk_id}")));
        }
        self.single_job(tape, prefix, prefix_cells, masked_cells)
    }

    fn single_job(&self, tape: &mut Tape, prefix: Var, prefix_cells: &[usize], masked: &[usize]) -> Result<GridPrediction> {
        if let Some(c) = masked.iter().find(|c| prefix_cells.contains(c)) {
            return Err(GridError::Config(format!("cell {c} is both visible and masked")));
        }
        let job = HeadJob { prefix_rows: (0..tape.value(prefix).rows()).collect(), masked: masked.to_vec() };
        let f = self.forward_packed(tape, prefix, &[job])?;
        let p = self.payload(tape, f)?;
        Ok(GridPrediction { positions: masked.to_vec(), law: self.config.law, payload: tape.value(p).clone() })
    }
}

/// Softmax probabilities of one logit row.
pub fn categorical_law(logits: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    log_softmax_parts(logits, &mut p);
    p
}

/// `-log softmax(logits)[target]`.
pub fn categorical_loss(logits: &[f64], target: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(GridError::Config("categorical law needs at least 2 classes".into()));
    }
    if target >= logits.len() {
        return Err(GridError::Config(format!("target {target} >= vocabulary {}", logits.len())));
    }
    let mut p = vec![0.0; logits.len()];
    let (_, lse) = log_softmax_parts(logits, &mut p);
    Ok(lse - logits[target])
}
