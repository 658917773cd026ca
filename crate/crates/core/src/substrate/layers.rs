//! Parameterized layers built on the tape: linear maps, layer norm,
//! pre-norm Transformer blocks (self- and cross-attention) and MLPs.

use std::rc::Rc;

use super::array::RealArray;
use super::attention::{attention_forward_packed, AttnLayout, AttnSegment, SegmentMask};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{GridError, Result};

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a name prefix with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: Rng) -> Self {
        Self { store, rng }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, RealArray::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, RealArray::filled(shape, 1.0))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.split_named(name, 0);
        let data = (0..n).map(|_| rng.normal() * std).collect();
        self.store.add(name, RealArray::from_vec(shape.to_vec(), data)?)
    }

    /// Glorot-uniform `(fan_in, fan_out)` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng.split_named(name, 0);
        let data = (0..fan_in * fan_out).map(|_| (2.0 * rng.next_f64() - 1.0) * bound).collect();
        self.store.add(name, RealArray::from_vec(vec![fan_in, fan_out], data)?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearParams> {
        Ok(LinearParams {
            w: self.xavier(&format!("{name}.weight"), fan_in, fan_out)?,
            b: self.zeros(&format!("{name}.bias"), &[fan_out])?,
        })
    }

    /// Linear map with small normal weights, for output projections.
    pub fn linear_small(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<LinearParams> {
        Ok(LinearParams {
            w: self.normal(&format!("{name}.weight"), &[fan_in, fan_out], std)?,
            b: self.zeros(&format!("{name}.bias"), &[fan_out])?,
        })
    }

    pub fn linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearParams> {
        Ok(LinearParams {
            w: self.zeros(&format!("{name}.weight"), &[fan_in, fan_out])?,
            b: self.zeros(&format!("{name}.bias"), &[fan_out])?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<NormParams> {
        Ok(NormParams {
            gain: self.ones(&format!("{name}.gain"), &[width])?,
            bias: self.zeros(&format!("{name}.bias"), &[width])?,
        })
    }

    pub fn attention(&mut self, name: &str, width: usize) -> Result<AttnParams> {
        Ok(AttnParams {
            q: self.linear(&format!("{name}.q"), width, width)?,
            k: self.linear(&format!("{name}.k"), width, width)?,
            v: self.linear(&format!("{name}.v"), width, width)?,
            o: self.linear(&format!("{name}.o"), width, width)?,
        })
    }

    pub fn mlp(&mut self, name: &str, width: usize, ffn: usize) -> Result<MlpParams> {
        Ok(MlpParams {
            up: self.linear(&format!("{name}.up"), width, ffn)?,
            down: self.linear(&format!("{name}.down"), ffn, width)?,
        })
    }

    pub fn block(&mut self, name: &str, width: usize, ffn: usize) -> Result<BlockParams> {
        Ok(BlockParams {
            norm1: self.layer_norm(&format!("{name}.norm1"), width)?,
            attn: self.attention(&format!("{name}.attn"), width)?,
            norm2: self.layer_norm(&format!("{name}.norm2"), width)?,
            mlp: self.mlp(&format!("{name}.mlp"), width, ffn)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

/// Pre-norm block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttnParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

pub fn linear(tape: &mut Tape, x: Var, p: &LinearParams) -> Result<Var> {
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    tape.linear(x, w, Some(b))
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &NormParams) -> Result<Var> {
    let g = tape.param(p.gain);
    let b = tape.param(p.bias);
    tape.layer_norm(x, Some(g), Some(b), LN_EPS)
}

/// Projected multi-head attention; `queries` and `context` are already normalized.
pub fn attend(tape: &mut Tape, queries: Var, context: Var, p: &AttnParams, layout: Rc<AttnLayout>) -> Result<Var> {
    let q = linear(tape, queries, &p.q)?;
    let k = linear(tape, context, &p.k)?;
    let v = linear(tape, context, &p.v)?;
    let a = tape.attention(q, k, v, layout)?;
    linear(tape, a, &p.o)
}

pub fn mlp(tape: &mut Tape, x: Var, p: &MlpParams) -> Result<Var> {
    let h = linear(tape, x, &p.up)?;
    let h = tape.gelu(h);
    linear(tape, h, &p.down)
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(GridError::Numeric { layer: layer.to_string(), message: "non-finite activation".into() })
    }
}

/// One pre-norm self-attention block over packed rows.
pub fn transformer_block_forward(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    layout: Rc<AttnLayout>,
    name: &str,
) -> Result<Var> {
    check_finite(tape, x, name)?;
    let n1 = layer_norm(tape, x, &p.norm1)?;
    let a = attend(tape, n1, n1, &p.attn, layout)?;
    let h = tape.add(x, a)?;
    let n2 = layer_norm(tape, h, &p.norm2)?;
    let m = mlp(tape, n2, &p.mlp)?;
    let y = tape.add(h, m)?;
    check_finite(tape, y, name)?;
    Ok(y)
}

/// Single-sequence multi-head attention without projections.
///
/// `mask[i][j]` says whether query `i` may attend to key `j`.
pub fn attention_forward(
    queries: &RealArray,
    keys: &RealArray,
    values: &RealArray,
    mask: &[Vec<bool>],
    head_count: usize,
) -> Result<RealArray> {
    let width = queries.cols();
    if keys.cols() != width || values.cols() != width {
        return Err(GridError::Config("query/key/value widths differ".into()));
    }
    if head_count == 0 || width % head_count != 0 {
        return Err(GridError::Config(format!("width {width} not divisible by head count {head_count}")));
    }
    let (ql, kl) = (queries.rows(), keys.rows());
    if values.rows() != kl || mask.len() != ql || mask.iter().any(|r| r.len() != kl) {
        return Err(GridError::Config("mask shape must be (query_len, key_len)".into()));
    }
    let dense = mask.iter().flatten().copied().collect();
    let layout = AttnLayout::new(
        head_count,
        vec![AttnSegment { q_start: 0, q_len: ql, k_start: 0, k_len: kl, mask: SegmentMask::Dense(dense) }],
    )?;
    let (out, _) = attention_forward_packed(queries.data(), keys.data(), values.data(), width, &layout)?;
    RealArray::from_vec(vec![ql, width], out)
}
