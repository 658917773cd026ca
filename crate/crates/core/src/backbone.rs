//! The 1D causal Transformer over `(token, own cell)` inputs.
//!
//! Every sequence starts with a start row (the class embedding; unconditional
//! models own a single start row), followed by revealed tokens in reveal
//! order. Each token row adds the position embedding of the token's own cell.

use std::rc::Rc;

use crate::error::{GridError, Result};
use crate::grid::TokenPayload;
use crate::substrate::layers::{self, BlockParams, LinearParams, NormParams, ParamBuilder};
use crate::substrate::{AttnLayout, AttnSegment, ParamId, ParamStore, RealArray, Rng, SegmentMask, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Discrete { vocab: usize },
    Continuous { latent: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub height: usize,
    pub width: usize,
    pub token: TokenKind,
    /// Zero means unconditional.
    pub class_count: usize,
}

impl ModelConfig {
    /// Named size preset: `tiny`, `small`, or the `base`/`large`/`huge` table sizes.
    pub fn preset(name: &str, height: usize, width: usize, token: TokenKind) -> Result<Self> {
        let (depth, hidden, ffn_dim, head_count, head_dim) = match name {
            "tiny" => (2, 64, 256, 4, 16),
            "small" => (4, 128, 512, 4, 32),
            "base" => (12, 768, 3072, 12, 64),
            "large" => (16, 1024, 4096, 16, 64),
            "huge" => (20, 1280, 5120, 16, 80),
            other => return Err(GridError::Config(format!("unknown model preset {other:?}"))),
        };
        let c = Self { depth, hidden, ffn_dim, head_count, head_dim, height, width, token, class_count: 0 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden != self.head_count * self.head_dim {
            return Err(GridError::Config(format!(
                "hidden {} != head_count {} * head_dim {}",
                self.hidden, self.head_count, self.head_dim
            )));
        }
        if self.cells() == 0 {
            return Err(GridError::Config("grid must have at least 1 cell".into()));
        }
        match self.token {
            TokenKind::Discrete { vocab } if vocab < 2 => {
                Err(GridError::Config("vocabulary must have at least 2 tokens".into()))
            }
            TokenKind::Continuous { latent: 0 } => Err(GridError::Config("latent width must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn start_rows(&self) -> usize {
        self.class_count.max(1)
    }

    pub fn vocab(&self) -> Option<usize> {
        match self.token {
            TokenKind::Discrete { vocab } => Some(vocab),
            TokenKind::Continuous { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenEmbedding {
    Table(ParamId),
    Affine(LinearParams),
}

/// What a packed input row carries.
#[derive(Debug, Clone, PartialEq)]
pub enum RowContent {
    Start(usize),
    Token(TokenPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputRow {
    pub content: RowContent,
    /// Cell whose position embedding is added, if any.
    pub position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    token: TokenEmbedding,
    position: ParamId,
    start: ParamId,
    blocks: Vec<BlockParams>,
    norm: NormParams,
}

impl Backbone {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(store, rng.split_named("backbone", 0));
        let token = match config.token {
            TokenKind::Discrete { vocab } => {
                TokenEmbedding::Table(pb.normal("backbone.token_table", &[vocab, config.hidden], 0.02)?)
            }
            TokenKind::Continuous { latent } => {
                TokenEmbedding::Affine(pb.linear("backbone.token_proj", latent, config.hidden)?)
            }
        };
        let position = pb.normal("backbone.position_table", &[config.cells(), config.hidden], 0.02)?;
        let start = pb.normal("backbone.start_table", &[config.start_rows(), config.hidden], 0.02)?;
        let blocks = (0..config.depth)
            .map(|i| pb.block(&format!("backbone.block{i}"), config.hidden, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let norm = pb.layer_norm("backbone.norm", config.hidden)?;
        Ok(Self { config: config.clone(), token, position, start, blocks, norm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn position_table(&self) -> ParamId {
        self.position
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &NormParams {
        &self.norm
    }

    /// Embeds packed rows: token (or start) embedding plus optional position embedding.
    pub fn embed_rows(&self, tape: &mut Tape, rows: &[InputRow]) -> Result<Var> {
        let n = self.config.cells();
        let hidden = self.config.hidden;
        let mut content_idx = Vec::with_capacity(rows.len());
        let mut pos_idx = Vec::with_capacity(rows.len());
        let token_part = match &self.token {
            TokenEmbedding::Table(table) => {
                let vocab = self.config.vocab().unwrap_or(0);
                for r in rows {
                    content_idx.push(match &r.content {
                        RowContent::Token(TokenPayload::Id(id)) if *id < vocab => *id,
                        RowContent::Token(TokenPayload::Id(id)) => {
                            return Err(GridError::Config(format!("token id {id} >= vocabulary {vocab}")))
                        }
                        RowContent::Token(TokenPayload::Latent(_)) => {
                            return Err(GridError::Config("latent token given to a discrete model".into()))
                        }
                        RowContent::Start(c) => vocab + self.check_class(*c)?,
                    });
                }
                Some(tape.param(*table))
            }
            TokenEmbedding::Affine(proj) => {
                let latent = match self.config.token {
                    TokenKind::Continuous { latent } => latent,
                    TokenKind::Discrete { .. } => unreachable!(),
                };
                let mut values = Vec::new();
                let mut count = 0;
                let mut pending = Vec::with_capacity(rows.len());
                for r in rows {
                    match &r.content {
                        RowContent::Token(TokenPayload::Latent(v)) if v.len() == latent => {
                            values.extend_from_slice(v);
                            pending.push(Ok(count));
                            count += 1;
                        }
                        RowContent::Token(_) => {
                            return Err(GridError::Config(format!("expected a latent token of width {latent}")))
                        }
                        RowContent::Start(c) => pending.push(Err(self.check_class(*c)?)),
                    }
                }
                for p in pending {
                    content_idx.push(match p {
                        Ok(i) => i,
                        Err(c) => count + c,
                    });
                }
                if count == 0 {
                    None
                } else {
                    let x = tape.constant(RealArray::from_vec(vec![count, latent], values)?);
                    Some(layers::linear(tape, x, proj)?)
                }
            }
        };
        let start = tape.param(self.start);
        let src = match token_part {
            Some(t) => tape.concat_rows(&[t, start])?,
            None => start,
        };
        let content = tape.gather_rows(src, Rc::new(content_idx))?;
        for r in rows {
            pos_idx.push(match r.position {
                Some(c) if c < n => c,
                Some(c) => return Err(GridError::Config(format!("cell {c} outside grid of {n} cells"))),
                None => n,
            });
        }
        let pos = tape.param(self.position);
        let zero = tape.constant(RealArray::zeros(&[1, hidden]));
        let pos_src = tape.concat_rows(&[pos, zero])?;
        let pos_rows = tape.gather_rows(pos_src, Rc::new(pos_idx))?;
        tape.add(content, pos_rows)
    }

    fn check_class(&self, c: usize) -> Result<usize> {
        if c < self.config.start_rows() {
            Ok(c)
        } else {
            Err(GridError::Config(format!(
                "class id {c} outside class_count {}",
                self.config.class_count
            )))
        }
    }

    /// Input for a revealed token: its embedding plus the position of its own cell.
    pub fn embed_step(&self, tape: &mut Tape, token: &TokenPayload, cell: usize) -> Result<Var> {
        self.embed_rows(tape, &[InputRow { content: RowContent::Token(token.clone()), position: Some(cell) }])
    }

    /// Shifted-position input of the 1D baselines: position of the *next* target cell.
    pub fn embed_step_shifted(&self, tape: &mut Tape, token: &TokenPayload, next_cell: usize) -> Result<Var> {
        self.embed_rows(tape, &[InputRow { content: RowContent::Token(token.clone()), position: Some(next_cell) }])
    }

    /// Causal pass over packed sequences of the given lengths; returns normalized hidden states.
    pub fn forward_packed(&self, tape: &mut Tape, x: Var, seq_lens: &[usize]) -> Result<Var> {
        let total: usize = seq_lens.iter().sum();
        if tape.value(x).rows() != total {
            return Err(GridError::Config("packed rows do not match sequence lengths".into()));
        }
        if let Some(&l) = seq_lens.iter().find(|&&l| l > self.config.cells() + 1) {
            return Err(GridError::Config(format!(
                "sequence length {l} exceeds {} cells plus start row",
                self.config.cells()
            )));
        }
        let layout = Rc::new(causal_layout(self.config.head_count, seq_lens)?);
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            h = layers::transformer_block_forward(tape, h, b, layout.clone(), &format!("backbone.block{i}"))?;
        }
        layers::layer_norm(tape, h, &self.norm)
    }

    /// Causal pass over one sequence of input vectors, optionally preceded by a class row.
    pub fn causal_forward(&self, tape: &mut Tape, inputs: Var, class: Option<usize>) -> Result<Var> {
        let x = match class {
            Some(c) => {
                let s = self.embed_rows(tape, &[InputRow { content: RowContent::Start(c), position: None }])?;
                tape.concat_rows(&[s, inputs])?
            }
            None => inputs,
        };
        let len = tape.value(x).rows();
        self.forward_packed(tape, x, &[len])
    }

    pub fn new_cache(&self) -> DecodeCache {
        DecodeCache {
            keys: vec![Vec::new(); self.config.depth],
            values: vec![Vec::new(); self.config.depth],
            len: 0,
            capacity: self.config.cells() + 1,
            hidden: self.config.hidden,
        }
    }

    /// Appends one input row to `cache` and returns its hidden state `(1, hidden)`.
    pub fn causal_forward_step(&self, store: &ParamStore, cache: &mut DecodeCache, input: &RealArray) -> Result<RealArray> {
        if cache.len >= cache.capacity {
            return Err(GridError::State(format!("decode cache full at {} rows", cache.capacity)));
        }
        if input.len() != self.config.hidden {
            return Err(GridError::Config("step input width differs from hidden size".into()));
        }
        let hidden = self.config.hidden;
        let layout = Rc::new(AttnLayout::new(
            self.config.head_count,
            vec![AttnSegment { q_start: 0, q_len: 1, k_start: 0, k_len: cache.len + 1, mask: SegmentMask::Causal }],
        )?);
        let mut tape = Tape::new(store);
        let mut x = tape.constant(input.clone().reshape(vec![1, hidden])?);
        let mut new_k = Vec::with_capacity(self.blocks.len());
        let mut new_v = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let n1 = layers::layer_norm(&mut tape, x, &b.norm1)?;
            let q = layers::linear(&mut tape, n1, &b.attn.q)?;
            let k = layers::linear(&mut tape, n1, &b.attn.k)?;
            let v = layers::linear(&mut tape, n1, &b.attn.v)?;
            let mut kd = cache.keys[l].clone();
            kd.extend_from_slice(tape.value(k).data());
            let mut vd = cache.values[l].clone();
            vd.extend_from_slice(tape.value(v).data());
            new_k.push(tape.value(k).data().to_vec());
            new_v.push(tape.value(v).data().to_vec());
            let kall = tape.constant(RealArray::from_vec(vec![cache.len + 1, hidden], kd)?);
            let vall = tape.constant(RealArray::from_vec(vec![cache.len + 1, hidden], vd)?);
            let a = tape.attention(q, kall, vall, layout.clone())?;
            let o = layers::linear(&mut tape, a, &b.attn.o)?;
            let h = tape.add(x, o)?;
            let n2 = layers::layer_norm(&mut tape, h, &b.norm2)?;
            let m = layers::mlp(&mut tape, n2, &b.mlp)?;
            x = tape.add(h, m)?;
            if !tape.value(x).all_finite() {
                return Err(GridError::Numeric { layer: format!("backbone.block{l}"), message: "non-finite activation".into() });
            }
        }
        let out = layers::layer_norm(&mut tape, x, &self.norm)?;
        for l in 0..self.blocks.len() {
            cache.keys[l].extend_from_slice(&new_k[l]);
            cache.values[l].extend_from_slice(&new_v[l]);
        }
        cache.len += 1;
        Ok(tape.value(out).clone())
    }
}

/// Per-layer keys and values of the processed prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    capacity: usize,
    hidden: usize,
}

impl DecodeCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Named tensors `cache.k{l}`/`cache.v{l}` plus `cache.meta = [len, capacity]`.
    pub fn to_tensors(&self) -> Vec<(String, RealArray)> {
        let mut out = vec![(
            "cache.meta".to_string(),
            RealArray::from_vec(vec![2], vec![self.len as f64, self.capacity as f64]).expect("meta"),
        )];
        for l in 0..self.keys.len() {
            for (tag, data) in [("k", &self.keys[l]), ("v", &self.values[l])] {
                out.push((
                    format!("cache.{tag}{l}"),
                    RealArray::from_vec(vec![self.len, self.hidden], data.clone()).expect("cache rows"),
                ));
            }
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, RealArray)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| GridError::Format(format!("missing tensor {name}")))
        };
        let meta = find("cache.meta")?;
        let (len, capacity) = (meta.data()[0] as usize, meta.data()[1] as usize);
        let depth = tensors.iter().filter(|(n, _)| n.starts_with("cache.k")).count();
        let mut keys = Vec::with_capacity(depth);
        let mut values = Vec::with_capacity(depth);
        let mut hidden = 0;
        for l in 0..depth {
            let k = find(&format!("cache.k{l}"))?;
            hidden = k.cols();
            keys.push(k.data().to_vec());
            values.push(find(&format!("cache.v{l}"))?.data().to_vec());
        }
        Ok(Self { keys, values, len, capacity, hidden })
    }
}

/// Causal segments for back-to-back sequences.
pub fn causal_layout(heads: usize, seq_lens: &[usize]) -> Result<AttnLayout> {
    let mut segs = Vec::with_capacity(seq_lens.len());
    let mut off = 0;
    for &l in seq_lens {
        if l == 0 {
            continue;
        }
        segs.push(AttnSegment { q_start: off, q_len: l, k_start: off, k_len: l, mask: SegmentMask::Causal });
        off += l;
    }
    AttnLayout::new(heads, segs)
}
