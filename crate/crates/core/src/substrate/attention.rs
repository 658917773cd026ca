//! Scaled dot-product multi-head attention over row-packed sequences.
//!
//! Queries, keys and values are stored as `(rows, width)` matrices holding
//! many independent sequences back to back. An [`AttnLayout`] names, for each
//! segment, the query rows, the key rows and which query/key pairs may interact.

use crate::error::{GridError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `0..=i + (k_len - q_len)`.
    Causal,
    /// Row-major `q_len * k_len` visibility matrix.
    Dense(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: SegmentMask,
}

impl AttnSegment {
    #[inline]
    fn visible(&self, i: usize, j: usize) -> bool {
        match &self.mask {
            SegmentMask::Full => true,
            SegmentMask::Causal => j + self.q_len <= i + self.k_len,
            SegmentMask::Dense(m) => m[i * self.k_len + j],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    heads: usize,
    segments: Vec<AttnSegment>,
    prob_offsets: Vec<usize>,
    prob_len: usize,
}

impl AttnLayout {
    /// Validates the segments: mask sizes and no query row without a visible key.
    pub fn new(heads: usize, segments: Vec<AttnSegment>) -> Result<Self> {
        if heads == 0 {
            return Err(GridError::Config("head count must be positive".into()));
        }
        let mut prob_offsets = Vec::with_capacity(segments.len());
        let mut off = 0;
        for (s, seg) in segments.iter().enumerate() {
            if let SegmentMask::Dense(m) = &seg.mask {
                if m.len() != seg.q_len * seg.k_len {
                    return Err(GridError::Config(format!("segment {s}: mask size mismatch")));
                }
            }
            for i in 0..seg.q_len {
                if !(0..seg.k_len).any(|j| seg.visible(i, j)) {
                    return Err(GridError::Config(format!(
                        "segment {s}: query row {i} has every key masked"
                    )));
                }
            }
            prob_offsets.push(off);
            off += heads * seg.q_len * seg.k_len;
        }
        Ok(Self { heads, segments, prob_offsets, prob_len: off })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn segments(&self) -> &[AttnSegment] {
        &self.segments
    }

    /// Attention probabilities of segment `s`, head `h`, as `q_len * k_len`.
    pub fn probs_of<'a>(&self, probs: &'a [f64], s: usize, h: usize) -> &'a [f64] {
        let seg = &self.segments[s];
        let n = seg.q_len * seg.k_len;
        let base = self.prob_offsets[s] + h * n;
        &probs[base..base + n]
    }

    fn check_rows(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        for seg in &self.segments {
            if seg.q_start + seg.q_len > q_rows || seg.k_start + seg.k_len > k_rows {
                return Err(GridError::Config("attention segment exceeds input rows".into()));
            }
        }
        Ok(())
    }
}

/// Returns `(output, probs)`; `output` has the query row count and `width` columns.
pub fn attention_forward_packed(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    layout: &AttnLayout,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if width % layout.heads != 0 {
        return Err(GridError::Config(format!(
            "width {width} not divisible by head count {}",
            layout.heads
        )));
    }
    let q_rows = q.len() / width;
    layout.check_rows(q_rows, k.len() / width)?;
    let hd = width / layout.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; layout.prob_len];
    let mut scores = Vec::new();
    for (s, seg) in layout.segments.iter().enumerate() {
        for h in 0..layout.heads {
            let base = layout.prob_offsets[s] + h * seg.q_len * seg.k_len;
            for i in 0..seg.q_len {
                let qi = &q[(seg.q_start + i) * width + h * hd..][..hd];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..seg.k_len {
                    if seg.visible(i, j) {
                        let kj = &k[(seg.k_start + j) * width + h * hd..][..hd];
                        let d: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        if d > max {
                            max = d;
                        }
                        scores.push(d);
                    } else {
                        scores.push(f64::NEG_INFINITY);
                    }
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut() {
                    *sc = if sc.is_finite() { (*sc - max).exp() } else { 0.0 };
                    denom += *sc;
                }
                let prow = &mut probs[base + i * seg.k_len..][..seg.k_len];
                let orow = &mut out[(seg.q_start + i) * width + h * hd..][..hd];
                for j in 0..seg.k_len {
                    let p = scores[j] / denom;
                    prow[j] = p;
                    if p != 0.0 {
                        let vj = &v[(seg.k_start + j) * width + h * hd..][..hd];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Accumulates input gradients given the output gradient `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward_packed(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    width: usize,
    layout: &AttnLayout,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let hd = width / layout.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dp = Vec::new();
    for (s, seg) in layout.segments.iter().enumerate() {
        for h in 0..layout.heads {
            let base = layout.prob_offsets[s] + h * seg.q_len * seg.k_len;
            for i in 0..seg.q_len {
                let prow = &probs[base + i * seg.k_len..][..seg.k_len];
                let doi = &dout[(seg.q_start + i) * width + h * hd..][..hd];
                dp.clear();
                let mut dot = 0.0;
                for j in 0..seg.k_len {
                    let p = prow[j];
                    if p == 0.0 {
                        dp.push(0.0);
                        continue;
                    }
                    let vrow = (seg.k_start + j) * width + h * hd;
                    let vj = &v[vrow..][..hd];
                    let g: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp.push(g);
                    dot += p * g;
                    for (d, o) in dv[vrow..][..hd].iter_mut().zip(doi) {
                        *d += p * o;
                    }
                }
                let qrow = (seg.q_start + i) * width + h * hd;
                for j in 0..seg.k_len {
                    let p = prow[j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dp[j] - dot) * scale;
                    let krow = (seg.k_start + j) * width + h * hd;
                    for t in 0..hd {
                        dq[qrow + t] += ds * k[krow + t];
                        dk[krow + t] += ds * q[qrow + t];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(q_len: usize, k_len: usize, mask: SegmentMask) -> AttnLayout {
        AttnLayout::new(1, vec![AttnSegment { q_start: 0, q_len, k_start: 0, k_len, mask }]).unwrap()
    }

    #[test]
    fn rejects_fully_masked_row() {
        let err = AttnLayout::new(
            1,
            vec![AttnSegment { q_start: 0, q_len: 2, k_start: 0, k_len: 2, mask: SegmentMask::Dense(vec![true, false, false, false]) }],
        );
        assert!(err.is_err());
    }

    #[test]
    fn causal_offset_for_cached_queries() {
        // One query against three keys: it is the newest row and sees all of them.
        let l = single(1, 3, SegmentMask::Causal);
        let seg = &l.segments()[0];
        assert!(seg.visible(0, 0) && seg.visible(0, 2));
        let l = single(3, 3, SegmentMask::Causal);
        let seg = &l.segments()[0];
        assert!(seg.visible(1, 1) && !seg.visible(1, 2));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let l = single(3, 3, SegmentMask::Causal);
        let q = [0.3, -1.0, 2.0, 0.1, 0.5, 0.5];
        let k = [1.0, 0.0, 0.2, 0.4, -0.3, 0.9];
        let v = k;
        let (_, probs) = attention_forward_packed(&q, &k, &v, 2, &l).unwrap();
        for i in 0..3 {
            let s: f64 = probs[i * 3..i * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
