//! A complete grid model: backbone, prediction head, and their parameters.

use crate::backbone::{Backbone, InputRow, ModelConfig, RowContent};
use crate::diffusion::DiffusionHeadConfig;
use crate::error::{GridError, Result};
use crate::grid::TokenPayload;
use crate::heads::{categorical_law, HeadConfig, HeadJob, OutputLaw, PredictionHead};
use crate::substrate::{ParamStore, RealArray, Rng, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub config: ModelConfig,
    pub head_config: HeadConfig,
    pub diffusion: Option<DiffusionHeadConfig>,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: PredictionHead,
}

impl GridModel {
    pub fn new(
        config: &ModelConfig,
        head_config: &HeadConfig,
        diffusion: Option<&DiffusionHeadConfig>,
        seed: u64,
    ) -> Result<Self> {
        let rng = Rng::new(seed).split_named("init", 0);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config, &mut store, &rng)?;
        let diffusion = match head_config.law {
            OutputLaw::Diffusion => Some(diffusion.cloned().unwrap_or_default()),
            OutputLaw::Categorical => None,
        };
        let head = PredictionHead::new(
            head_config,
            config,
            diffusion.as_ref(),
            backbone.position_table(),
            &mut store,
            &rng,
        )?;
        Ok(Self { config: config.clone(), head_config: head_config.clone(), diffusion, store, backbone, head })
    }

    pub fn law(&self) -> OutputLaw {
        self.head_config.law
    }

    pub fn cells(&self) -> usize {
        self.config.cells()
    }

    /// Start row followed by one row per revealed `(cell, token)` at its own cell.
    pub fn prefix_rows(class: usize, revealed: &[(usize, TokenPayload)]) -> Vec<InputRow> {
        let mut rows = Vec::with_capacity(revealed.len() + 1);
        rows.push(InputRow { content: RowContent::Start(class), position: None });
        rows.extend(
            revealed
                .iter()
                .map(|(cell, tok)| InputRow { content: RowContent::Token(tok.clone()), position: Some(*cell) }),
        );
        rows
    }

    /// Head payload rows (logits or conditioning vectors) at `masked` given the revealed prefix.
    pub fn predict(&self, class: usize, revealed: &[(usize, TokenPayload)], masked: &[usize]) -> Result<RealArray> {
        let n = self.cells();
        let mut seen = vec![false; n];
        for (c, _) in revealed {
            if *c >= n || seen[*c] {
                return Err(GridError::Config(format!("revealed cell {c} invalid or repeated")));
            }
            seen[*c] = true;
        }
        if let Some(c) = masked.iter().find(|&&c| c >= n || seen[c]) {
            return Err(GridError::Config(format!("masked cell {c} invalid or already revealed")));
        }
        let mut tape = Tape::new(&self.store);
        let x = self.backbone.embed_rows(&mut tape, &Self::prefix_rows(class, revealed))?;
        let h = self.backbone.forward_packed(&mut tape, x, &[revealed.len() + 1])?;
        let job = HeadJob { prefix_rows: (0..=revealed.len()).collect(), masked: masked.to_vec() };
        let f = self.head.forward_packed(&mut tape, h, &[job])?;
        let p = self.head.payload(&mut tape, f)?;
        let out = tape.value(p).clone();
        if !out.all_finite() {
            return Err(GridError::Numeric { layer: "head.output".into(), message: "non-finite payload".into() });
        }
        Ok(out)
    }

    /// Head payload rows for precomputed prefix hidden states `(t + 1, hidden)`.
    pub fn predict_from_hidden(&self, prefix: &RealArray, masked: &[usize]) -> Result<RealArray> {
        let mut tape = Tape::new(&self.store);
        let h = tape.constant(prefix.clone());
        let job = HeadJob { prefix_rows: (0..prefix.rows()).collect(), masked: masked.to_vec() };
        let f = self.head.forward_packed(&mut tape, h, &[job])?;
        let p = self.head.payload(&mut tape, f)?;
        let out = tape.value(p).clone();
        if !out.all_finite() {
            return Err(GridError::Numeric { layer: "head.output".into(), message: "non-finite payload".into() });
        }
        Ok(out)
    }

    /// Categorical distribution at `query`, read from a head call with `query` among the masked cells.
    pub fn conditional(&self, class: usize, revealed: &[(usize, TokenPayload)], query: usize) -> Result<Vec<f64>> {
        if self.law() != OutputLaw::Categorical {
            return Err(GridError::Config("exact conditionals need the categorical law".into()));
        }
        let masked = self.default_mask(revealed, query)?;
        let payload = self.predict(class, revealed, &masked)?;
        let slot = masked.iter().position(|&c| c == query).expect("query is masked");
        Ok(categorical_law(payload.row(slot)))
    }

    /// Mask population for a query: every unrevealed cell for the global head,
    /// the unrevealed cells of the query's chunk for the chunk head.
    pub fn default_mask(&self, revealed: &[(usize, TokenPayload)], query: usize) -> Result<Vec<usize>> {
        let n = self.cells();
        if query >= n {
            return Err(GridError::Config(format!("query cell {query} outside grid")));
        }
        let mut seen = vec![false; n];
        for (c, _) in revealed {
            if *c < n {
                seen[*c] = true;
            }
        }
        if seen[query] {
            return Err(GridError::State(format!("query cell {query} is already revealed")));
        }
        Ok(match self.head.geometry() {
            None => (0..n).filter(|&c| !seen[c]).collect(),
            Some(g) => g.cells_of(g.chunk_of(query)).into_iter().filter(|&c| !seen[c]).collect(),
        })
    }
}
