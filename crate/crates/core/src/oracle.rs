//! Exactly enumerable grid distributions, brute-force conditionals, and the
//! evaluation suite comparing trained models against them.

use serde::Serialize;

use crate::error::{GridError, Result};
use crate::grid::TokenPayload;
use crate::model::GridModel;
use crate::objective::ObjectiveTag;
use crate::sampler::{generate_grid, generate_grid_1d, next_token_payload, SamplingConfig};
use crate::heads::{categorical_law, HeadJob};
use crate::substrate::{Rng, Tape};
use crate::backbone::{InputRow, RowContent};

/// Largest joint table we are willing to materialize.
pub const MAX_OUTCOMES: u64 = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub enum JointKind {
    /// Independent cells with the given per-cell distributions.
    Factorized { marginals: Vec<Vec<f64>> },
    /// Unary potentials per cell and shared edge potentials (`V x V`, row-major)
    /// on horizontal and vertical neighbours.
    PairwiseMarkov { unary: Vec<Vec<f64>>, horizontal: Vec<f64>, vertical: Vec<f64> },
    /// Paired cells equal with probability `1 - epsilon`, else independent uniform;
    /// unpaired cells uniform.
    CopyPairs { pairs: Vec<(usize, usize)>, epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub kind: JointKind,
}

/// `(r, c)` in the left half pairs with `((r + H/2) mod H, c + W/2)`.
pub fn default_pairs(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width / 2 {
            let pr = (r + height / 2) % height;
            out.push((r * width + c, pr * width + c + width / 2));
        }
    }
    out
}

impl JointSpec {
    pub fn factorized(height: usize, width: usize, marginals: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = marginals.first().map_or(0, |m| m.len());
        let s = Self { height, width, vocab, kind: JointKind::Factorized { marginals } };
        s.validate()?;
        Ok(s)
    }

    pub fn uniform(height: usize, width: usize, vocab: usize) -> Result<Self> {
        Self::factorized(height, width, vec![vec![1.0 / vocab as f64; vocab]; height * width])
    }

    /// Markov field with log-potentials drawn as `strength * N(0, 1)` (edges) and
    /// `0.5 * strength * N(0, 1)` (cells).
    pub fn random_markov(height: usize, width: usize, vocab: usize, strength: f64, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).split_named("markov", 0);
        let unary = (0..height * width)
            .map(|_| (0..vocab).map(|_| (0.5 * strength * rng.normal()).exp()).collect())
            .collect();
        let horizontal = (0..vocab * vocab).map(|_| (strength * rng.normal()).exp()).collect();
        let vertical = (0..vocab * vocab).map(|_| (strength * rng.normal()).exp()).collect();
        let s = Self { height, width, vocab, kind: JointKind::PairwiseMarkov { unary, horizontal, vertical } };
        s.validate()?;
        Ok(s)
    }

    pub fn copy_pairs(height: usize, width: usize, vocab: usize, epsilon: f64) -> Result<Self> {
        let s = Self { height, width, vocab, kind: JointKind::CopyPairs { pairs: default_pairs(height, width), epsilon } };
        s.validate()?;
        Ok(s)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn outcome_count(&self) -> Option<u64> {
        (self.vocab as u64).checked_pow(self.cells() as u32)
    }

    pub fn is_enumerable(&self) -> bool {
        self.outcome_count().is_some_and(|c| c <= MAX_OUTCOMES)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, v) = (self.cells(), self.vocab);
        if n == 0 || v < 2 {
            return Err(GridError::Config("joint spec needs at least one cell and two values".into()));
        }
        let positive = |xs: &[f64]| xs.iter().all(|&x| x.is_finite() && x >= 0.0);
        match &self.kind {
            JointKind::Factorized { marginals } => {
                if marginals.len() != n || marginals.iter().any(|m| m.len() != v || !positive(m)) {
                    return Err(GridError::Config("factorized marginals must be N rows of V non-negative values".into()));
                }
                if marginals.iter().any(|m| (m.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
                    return Err(GridError::Config("factorized marginals must sum to 1".into()));
                }
            }
            JointKind::PairwiseMarkov { unary, horizontal, vertical } => {
                if unary.len() != n || unary.iter().any(|u| u.len() != v || !positive(u)) {
                    return Err(GridError::Config("unary potentials must be N rows of V non-negative values".into()));
                }
                if horizontal.len() != v * v || vertical.len() != v * v || !positive(horizontal) || !positive(vertical) {
                    return Err(GridError::Config("edge potentials must be V x V non-negative tables".into()));
                }
            }
            JointKind::CopyPairs { pairs, epsilon } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(GridError::Config(format!("epsilon {epsilon} outside [0, 1]")));
                }
                let mut used = vec![false; n];
                for &(a, b) in pairs {
                    if a >= n || b >= n || a == b || used[a] || used[b] {
                        return Err(GridError::Config(format!("invalid pair ({a}, {b})")));
                    }
                    used[a] = true;
                    used[b] = true;
                }
            }
        }
        Ok(())
    }

    /// Pair-table value `q(a, b)` of the copy-pairs law.
    fn pair_prob(vocab: usize, epsilon: f64, a: usize, b: usize) -> f64 {
        let v = vocab as f64;
        let same = if a == b { 1.0 - epsilon } else { 0.0 };
        (same + epsilon / v) / v
    }

    /// Factor list: `(cells, table)` with tables indexed little-endian over the cells.
    fn factors(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        let (h, w, v) = (self.height, self.width, self.vocab);
        match &self.kind {
            JointKind::Factorized { marginals } => marginals.iter().enumerate().map(|(c, m)| (vec![c], m.clone())).collect(),
            JointKind::PairwiseMarkov { unary, horizontal, vertical } => {
                let mut f: Vec<(Vec<usize>, Vec<f64>)> =
                    unary.iter().enumerate().map(|(c, u)| (vec![c], u.clone())).collect();
                // tables below are indexed [first + V * second]; the stored edge tables are [first * V + second]
                let transpose = |t: &[f64]| {
                    let mut o = vec![0.0; v * v];
                    for a in 0..v {
                        for b in 0..v {
                            o[a + v * b] = t[a * v + b];
                        }
                    }
                    o
                };
                let (ht, vt) = (transpose(horizontal), transpose(vertical));
                for r in 0..h {
                    for c in 0..w {
                        let i = r * w + c;
                        if c + 1 < w {
                            f.push((vec![i, i + 1], ht.clone()));
                        }
                        if r + 1 < h {
                            f.push((vec![i, i + w], vt.clone()));
                        }
                    }
                }
                f
            }
            JointKind::CopyPairs { pairs, epsilon } => {
                let mut used = vec![false; self.cells()];
                let mut f = Vec::new();
                for &(a, b) in pairs {
                    used[a] = true;
                    used[b] = true;
                    let mut t = vec![0.0; v * v];
                    for x in 0..v {
                        for y in 0..v {
                            t[x + v * y] = Self::pair_prob(v, *epsilon, x, y);
                        }
                    }
                    f.push((vec![a, b], t));
                }
                for (c, u) in used.iter().enumerate() {
                    if !u {
                        f.push((vec![c], vec![1.0 / v as f64; v]));
                    }
                }
                f
            }
        }
    }

    /// Unnormalized probability of a full assignment, computed kind by kind.
    pub fn weight(&self, x: &[usize]) -> f64 {
        let (h, w, v) = (self.height, self.width, self.vocab);
        match &self.kind {
            JointKind::Factorized { marginals } => x.iter().enumerate().map(|(c, &xi)| marginals[c][xi]).product(),
            JointKind::PairwiseMarkov { unary, horizontal, vertical } => {
                let mut p = 1.0;
                for r in 0..h {
                    for c in 0..w {
                        let i = r * w + c;
                        p *= unary[i][x[i]];
                        if c + 1 < w {
                            p *= horizontal[x[i] * v + x[i + 1]];
                        }
                        if r + 1 < h {
                            p *= vertical[x[i] * v + x[i + w]];
                        }
                    }
                }
                p
            }
            JointKind::CopyPairs { pairs, epsilon } => {
                let mut paired = vec![false; x.len()];
                let mut p = 1.0;
                for &(a, b) in pairs {
                    paired[a] = true;
                    paired[b] = true;
                    p *= Self::pair_prob(v, *epsilon, x[a], x[b]);
                }
                p * (1.0 / v as f64).powi(paired.iter().filter(|&&u| !u).count() as i32)
            }
        }
    }
}

/// Normalized joint over all `V^N` outcomes; outcome `k` assigns cell `c` the
/// digit `(k / V^c) mod V`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub cells: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

impl JointTable {
    pub fn decode(&self, mut k: usize) -> Vec<usize> {
        (0..self.cells)
            .map(|_| {
                let d = k % self.vocab;
                k /= self.vocab;
                d
            })
            .collect()
    }

    pub fn encode(&self, x: &[usize]) -> usize {
        x.iter().rev().fold(0, |acc, &d| acc * self.vocab + d)
    }

    pub fn prob(&self, x: &[usize]) -> f64 {
        self.probs[self.encode(x)]
    }
}

pub fn enumerate_joint(spec: &JointSpec) -> Result<JointTable> {
    spec.validate()?;
    if !spec.is_enumerable() {
        return Err(GridError::Config(format!(
            "{}^{} outcomes exceed the enumeration bound of 2^22",
            spec.vocab,
            spec.cells()
        )));
    }
    let (n, v) = (spec.cells(), spec.vocab);
    let total = v.pow(n as u32);
    let factors = spec.factors();
    let mut probs = vec![1.0; total];
    let mut x = vec![0usize; n];
    for p in probs.iter_mut() {
        for (cells, table) in &factors {
            let mut idx = 0;
            for &c in cells.iter().rev() {
                idx = idx * v + x[c];
            }
            *p *= table[idx];
        }
        for d in x.iter_mut() {
            *d += 1;
            if *d < v {
                break;
            }
            *d = 0;
        }
    }
    let z: f64 = probs.iter().sum();
    if !(z > 0.0) {
        return Err(GridError::Domain("joint has zero total mass".into()));
    }
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(JointTable { cells: n, vocab: v, probs })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionalQuery {
    pub revealed: Vec<(usize, usize)>,
    pub query: usize,
}

impl ConditionalQuery {
    fn check(&self, cells: usize) -> Result<()> {
        if self.query >= cells {
            return Err(GridError::Config(format!("query cell {} outside grid", self.query)));
        }
        let mut seen = vec![false; cells];
        for &(c, _) in &self.revealed {
            if c >= cells || seen[c] || c == self.query {
                return Err(GridError::Config(format!("revealed cell {c} invalid, repeated, or the query")));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

fn normalize(mut p: Vec<f64>) -> Result<Vec<f64>> {
    let z: f64 = p.iter().sum();
    if !(z > 0.0) {
        return Err(GridError::Domain("revealed context has zero probability".into()));
    }
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// `p(x_query | revealed)` by summing table entries consistent with the context.
pub fn exact_conditional(table: &JointTable, query: &ConditionalQuery) -> Result<Vec<f64>> {
    query.check(table.cells)?;
    let v = table.vocab;
    let stride = |c: usize| v.pow(c as u32);
    let mut out = vec![0.0; v];
    for (k, &p) in table.probs.iter().enumerate() {
        if p == 0.0 || query.revealed.iter().any(|&(c, val)| (k / stride(c)) % v != val) {
            continue;
        }
        out[(k / stride(query.query)) % v] += p;
    }
    normalize(out)
}

/// Same conditional by enumerating completions of the unassigned cells only.
pub fn conditional_by_summation(spec: &JointSpec, query: &ConditionalQuery) -> Result<Vec<f64>> {
    query.check(spec.cells())?;
    let v = spec.vocab;
    let mut x = vec![0usize; spec.cells()];
    let mut free = Vec::new();
    let mut fixed = vec![false; spec.cells()];
    for &(c, val) in &query.revealed {
        if val >= v {
            return Err(GridError::Config(format!("value {val} outside vocabulary")));
        }
        x[c] = val;
        fixed[c] = true;
    }
    for c in 0..spec.cells() {
        if !fixed[c] && c != query.query {
            free.push(c);
        }
    }
    let combos = (v as u64).checked_pow(free.len() as u32).filter(|&k| k <= MAX_OUTCOMES);
    let combos = combos.ok_or_else(|| GridError::Config("too many completions to sum".into()))?;
    let mut out = vec![0.0; v];
    for (val, slot) in out.iter_mut().enumerate() {
        x[query.query] = val;
        for k in 0..combos {
            let mut r = k;
            for &c in &free {
                x[c] = (r % v as u64) as usize;
                r /= v as u64;
            }
            *slot += spec.weight(&x);
        }
    }
    normalize(out)
}

/// Closed-form conditional for copy-pairs: only the partner matters.
pub fn copy_pairs_conditional(spec: &JointSpec, query: &ConditionalQuery) -> Result<Vec<f64>> {
    query.check(spec.cells())?;
    let JointKind::CopyPairs { pairs, epsilon } = &spec.kind else {
        return Err(GridError::Config("not a copy-pairs spec".into()));
    };
    let v = spec.vocab;
    let partner = pairs.iter().find_map(|&(a, b)| {
        if a == query.query {
            Some(b)
        } else if b == query.query {
            Some(a)
        } else {
            None
        }
    });
    let known = partner.and_then(|p| query.revealed.iter().find(|&&(c, _)| c == p).map(|&(_, val)| val));
    match known {
        Some(val) => normalize((0..v).map(|x| JointSpec::pair_prob(v, *epsilon, x, val)).collect()),
        None => Ok(vec![1.0 / v as f64; v]),
    }
}

/// Exact conditional through whichever route the spec supports.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub spec: JointSpec,
    table: Option<JointTable>,
    cumulative: Vec<f64>,
}

impl Oracle {
    pub fn new(spec: &JointSpec) -> Result<Self> {
        spec.validate()?;
        let table = if spec.is_enumerable() { Some(enumerate_joint(spec)?) } else { None };
        let mut acc = 0.0;
        let cumulative = table
            .as_ref()
            .map(|t| {
                t.probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .unwrap_or_default();
        if table.is_none() && !matches!(spec.kind, JointKind::CopyPairs { .. } | JointKind::Factorized { .. }) {
            return Err(GridError::Config("markov spec exceeds the enumeration bound".into()));
        }
        Ok(Self { spec: spec.clone(), table, cumulative })
    }

    pub fn table(&self) -> Option<&JointTable> {
        self.table.as_ref()
    }

    pub fn conditional(&self, query: &ConditionalQuery) -> Result<Vec<f64>> {
        if let Some(t) = &self.table {
            return exact_conditional(t, query);
        }
        match &self.spec.kind {
            JointKind::CopyPairs { .. } => copy_pairs_conditional(&self.spec, query),
            JointKind::Factorized { marginals } => {
                query.check(self.spec.cells())?;
                Ok(marginals[query.query].clone())
            }
            JointKind::PairwiseMarkov { .. } => Err(GridError::Internal("markov oracle without table".into())),
        }
    }

    /// Single-cell marginals.
    pub fn marginals(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.spec.cells())
            .map(|c| self.conditional(&ConditionalQuery { revealed: Vec::new(), query: c }))
            .collect()
    }

    /// One exact draw (table inversion or ancestral sampling).
    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let (n, v) = (self.spec.cells(), self.spec.vocab);
        if let Some(t) = &self.table {
            let u = rng.next_f64() * self.cumulative.last().copied().unwrap_or(1.0);
            let k = self.cumulative.partition_point(|&c| c <= u);
            let last = t.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            return t.decode(k.min(last));
        }
        let mut x = vec![0; n];
        match &self.spec.kind {
            JointKind::Factorized { marginals } => {
                for (c, m) in marginals.iter().enumerate() {
                    x[c] = rng.categorical(m);
                }
            }
            JointKind::CopyPairs { pairs, epsilon } => {
                let mut paired = vec![false; n];
                for &(a, b) in pairs {
                    paired[a] = true;
                    paired[b] = true;
                    x[a] = rng.below(v);
                    x[b] = if rng.next_f64() < *epsilon { rng.below(v) } else { x[a] };
                }
                for c in 0..n {
                    if !paired[c] {
                        x[c] = rng.below(v);
                    }
                }
            }
            JointKind::PairwiseMarkov { .. } => unreachable!("markov oracles always carry a table"),
        }
        x
    }

    /// Exact `log p(x)`.
    pub fn log_prob(&self, x: &[usize]) -> Result<f64> {
        if let Some(t) = &self.table {
            return Ok(t.prob(x).ln());
        }
        let mut revealed = Vec::with_capacity(x.len());
        let mut lp = 0.0;
        for (c, &val) in x.iter().enumerate() {
            let p = self.conditional(&ConditionalQuery { revealed: revealed.clone(), query: c })?;
            lp += p[val].ln();
            revealed.push((c, val));
        }
        Ok(lp)
    }

    /// Entropy per cell in nats (exact for enumerable or factorizing specs).
    pub fn entropy_rate(&self) -> Result<f64> {
        let n = self.spec.cells() as f64;
        if let Some(t) = &self.table {
            let h: f64 = t.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            return Ok(h / n);
        }
        let ent = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
        match &self.spec.kind {
            JointKind::Factorized { marginals } => Ok(marginals.iter().map(|m| ent(m)).sum::<f64>() / n),
            JointKind::CopyPairs { pairs, epsilon } => {
                let v = self.spec.vocab;
                let cond: Vec<f64> = (0..v).map(|x| v as f64 * JointSpec::pair_prob(v, *epsilon, x, 0)).collect();
                let paired = 2 * pairs.len();
                let h = pairs.len() as f64 * ((v as f64).ln() + ent(&cond)) + (self.spec.cells() - paired) as f64 * (v as f64).ln();
                Ok(h / n)
            }
            JointKind::PairwiseMarkov { .. } => Err(GridError::Internal("markov oracle without table".into())),
        }
    }
}

/// Anything that yields categorical conditionals over grid cells.
pub trait ConditionalModel {
    fn vocab(&self) -> usize;
    fn cells(&self) -> usize;
    /// Distribution at `query` given `(cell, value)` pairs revealed in order.
    fn conditional(&self, revealed: &[(usize, usize)], query: usize) -> Result<Vec<f64>>;
    /// Reveal order used for likelihood evaluation.
    fn likelihood_order(&self, rng: &mut Rng) -> Vec<usize> {
        rng.permutation(self.cells())
    }
    /// `log p` of each token of `grid` revealed along `order`.
    fn chain_log_probs(&self, grid: &[usize], order: &[usize]) -> Result<Vec<f64>> {
        let mut revealed = Vec::with_capacity(order.len());
        let mut out = Vec::with_capacity(order.len());
        for &c in order {
            let p = self.conditional(&revealed, c)?;
            out.push(p[grid[c]].ln());
            revealed.push((c, grid[c]));
        }
        Ok(out)
    }
    fn generate(&self, seed: u64) -> Result<Vec<usize>>;
}

/// Predicts the uniform law everywhere.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub cells: usize,
    pub vocab: usize,
}

impl ConditionalModel for UniformModel {
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn cells(&self) -> usize {
        self.cells
    }
    fn conditional(&self, _: &[(usize, usize)], _: usize) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.vocab as f64; self.vocab])
    }
    fn generate(&self, seed: u64) -> Result<Vec<usize>> {
        let mut rng = Rng::new(seed);
        Ok((0..self.cells).map(|_| rng.below(self.vocab)).collect())
    }
}

/// The oracle itself posing as a model.
impl ConditionalModel for Oracle {
    fn vocab(&self) -> usize {
        self.spec.vocab
    }
    fn cells(&self) -> usize {
        self.spec.cells()
    }
    fn conditional(&self, revealed: &[(usize, usize)], query: usize) -> Result<Vec<f64>> {
        Oracle::conditional(self, &ConditionalQuery { revealed: revealed.to_vec(), query })
    }
    fn generate(&self, seed: u64) -> Result<Vec<usize>> {
        Ok(self.sample(&mut Rng::new(seed)))
    }
}

/// A trained categorical grid model evaluated under its training objective.
pub struct TrainedModel<'a> {
    pub model: &'a GridModel,
    pub objective: ObjectiveTag,
    pub class: usize,
    pub sampling: SamplingConfig,
}

impl TrainedModel<'_> {
    fn pairs(revealed: &[(usize, usize)]) -> Vec<(usize, TokenPayload)> {
        revealed.iter().map(|&(c, v)| (c, TokenPayload::Id(v))).collect()
    }
}

impl ConditionalModel for TrainedModel<'_> {
    fn vocab(&self) -> usize {
        self.model.config.vocab().unwrap_or(0)
    }
    fn cells(&self) -> usize {
        self.model.cells()
    }
    fn conditional(&self, revealed: &[(usize, usize)], query: usize) -> Result<Vec<f64>> {
        match self.objective {
            ObjectiveTag::TwoD => self.model.conditional(self.class, &Self::pairs(revealed), query),
            _ => {
                let p = next_token_payload(self.model, self.class, &Self::pairs(revealed), query)?;
                Ok(categorical_law(p.row(0)))
            }
        }
    }
    fn likelihood_order(&self, rng: &mut Rng) -> Vec<usize> {
        match self.objective {
            ObjectiveTag::Raster1d => (0..self.cells()).collect(),
            _ => rng.permutation(self.cells()),
        }
    }
    fn chain_log_probs(&self, grid: &[usize], order: &[usize]) -> Result<Vec<f64>> {
        let n = order.len();
        let m = self.model;
        let mut tape = Tape::new(&m.store);
        let mut rows = Vec::with_capacity(n);
        let features = match self.objective {
            ObjectiveTag::TwoD => {
                rows.push(InputRow { content: RowContent::Start(self.class), position: None });
                for &c in &order[..n - 1] {
                    rows.push(InputRow { content: RowContent::Token(TokenPayload::Id(grid[c])), position: Some(c) });
                }
                let x = m.backbone.embed_rows(&mut tape, &rows)?;
                let h = m.backbone.forward_packed(&mut tape, x, &[n])?;
                let mut jobs = Vec::with_capacity(n);
                let mut revealed: Vec<(usize, TokenPayload)> = Vec::with_capacity(n);
                for (t, &c) in order.iter().enumerate() {
                    jobs.push(HeadJob { prefix_rows: (0..=t).collect(), masked: m.default_mask(&revealed, c)? });
                    revealed.push((c, TokenPayload::Id(grid[c])));
                }
                let f = m.head.forward_packed(&mut tape, h, &jobs)?;
                let logits = m.head.logits(&mut tape, f)?;
                let logits = tape.value(logits);
                let mut out = Vec::with_capacity(n);
                let mut row = 0;
                for (job, &c) in jobs.iter().zip(order) {
                    let slot = job.masked.iter().position(|&x| x == c).expect("query masked");
                    out.push(categorical_law(logits.row(row + slot))[grid[c]].ln());
                    row += job.masked.len();
                }
                return Ok(out);
            }
            _ => {
                for (i, &c) in order.iter().enumerate() {
                    let content = if i == 0 {
                        RowContent::Start(self.class)
                    } else {
                        RowContent::Token(TokenPayload::Id(grid[order[i - 1]]))
                    };
                    rows.push(InputRow { content, position: Some(c) });
                }
                let x = m.backbone.embed_rows(&mut tape, &rows)?;
                let h = m.backbone.forward_packed(&mut tape, x, &[n])?;
                m.head.forward_causal(&mut tape, h, &[n])?
            }
        };
        let logits = m.head.logits(&mut tape, features)?;
        let logits = tape.value(logits);
        Ok(order.iter().enumerate().map(|(i, &c)| categorical_law(logits.row(i))[grid[c]].ln()).collect())
    }
    fn generate(&self, seed: u64) -> Result<Vec<usize>> {
        let g = match self.objective {
            ObjectiveTag::TwoD => generate_grid(self.model, self.class, &self.sampling, seed)?,
            tag => generate_grid_1d(self.model, tag, self.class, &self.sampling, seed)?,
        };
        Ok(g.ids().expect("categorical model").to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalCounts {
    pub queries: usize,
    pub heldout: usize,
    pub generations: usize,
    pub order_pairs: usize,
}

impl Default for EvalCounts {
    fn default() -> Self {
        Self { queries: 200, heldout: 200, generations: 200, order_pairs: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tv_mean: f64,
    pub tv_p95: f64,
    pub nll: f64,
    pub marginal_tv: f64,
    pub order_sens: f64,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Random query: a grid drawn from the oracle, a random revealed subset in random
/// order (size uniform in `0..N`), and an unrevealed query cell.
pub fn random_query(oracle: &Oracle, rng: &mut Rng) -> ConditionalQuery {
    let n = oracle.spec.cells();
    let x = oracle.sample(rng);
    let k = rng.below(n);
    let order = rng.permutation(n);
    ConditionalQuery { revealed: order[..k].iter().map(|&c| (c, x[c])).collect(), query: order[k + rng.below(n - k)] }
}

/// Held-out grids the model never saw, drawn from an independent stream.
pub fn heldout_grids(oracle: &Oracle, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed).split_named("heldout", 0);
    (0..count).map(|_| oracle.sample(&mut rng)).collect()
}

/// Mean per-cell negative log-likelihood of `grids` along the model's own orders.
pub fn heldout_nll(model: &dyn ConditionalModel, grids: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).split_named("nll-order", 0);
    let mut total = 0.0;
    let mut count = 0usize;
    for g in grids {
        let order = model.likelihood_order(&mut rng);
        let lp = model.chain_log_probs(g, &order)?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok(total / count as f64)
}

pub fn eval_suite(model: &dyn ConditionalModel, oracle: &Oracle, counts: &EvalCounts, seed: u64) -> Result<EvalReport> {
    let base = Rng::new(seed);
    let mut qrng = base.split_named("queries", 0);
    let mut tvs = Vec::with_capacity(counts.queries);
    for _ in 0..counts.queries {
        let q = random_query(oracle, &mut qrng);
        let exact = oracle.conditional(&q)?;
        tvs.push(total_variation(&model.conditional(&q.revealed, q.query)?, &exact));
    }
    let nll = heldout_nll(model, &heldout_grids(oracle, counts.heldout, seed), seed)?;
    let marginal_tv = if counts.generations == 0 {
        f64::NAN
    } else {
        let (n, v) = (oracle.spec.cells(), oracle.spec.vocab);
        let mut freq = vec![vec![0.0; v]; n];
        for i in 0..counts.generations {
            let g = model.generate(base.split_named("generate", i as u64).next_u64())?;
            for (c, &x) in g.iter().enumerate() {
                freq[c][x] += 1.0 / counts.generations as f64;
            }
        }
        let exact = oracle.marginals()?;
        freq.iter().zip(&exact).map(|(f, e)| total_variation(f, e)).sum::<f64>() / n as f64
    };
    let mut orng = base.split_named("orders", 0);
    let mut sens = Vec::with_capacity(counts.order_pairs);
    let n = oracle.spec.cells();
    while sens.len() < counts.order_pairs && n >= 3 {
        let q = random_query(oracle, &mut orng);
        if q.revealed.len() < 2 {
            continue;
        }
        let mut other = q.revealed.clone();
        orng.shuffle(&mut other);
        let a = model.conditional(&q.revealed, q.query)?;
        let b = model.conditional(&other, q.query)?;
        sens.push(total_variation(&a, &b));
    }
    let order_sens = if sens.is_empty() { 0.0 } else { sens.iter().sum::<f64>() / sens.len() as f64 };
    Ok(EvalReport {
        tv_mean: tvs.iter().sum::<f64>() / tvs.len().max(1) as f64,
        tv_p95: percentile(&tvs, 95.0),
        nll,
        marginal_tv,
        order_sens,
    })
}
