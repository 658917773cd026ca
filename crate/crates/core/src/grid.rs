//! Token grids: the `H x W` substrate every model reads and writes.

use std::fmt::Write as _;

use crate::error::{GridError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum TokenPayload {
    Id(usize),
    Latent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridPayload {
    Ids(Vec<usize>),
    /// Row-major cells, `width` values each.
    Latents { width: usize, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub payload: GridPayload,
}

impl TokenGrid {
    pub fn from_ids(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(GridError::Config(format!("{} ids for a {height}x{width} grid", ids.len())));
        }
        Ok(Self { height, width, payload: GridPayload::Ids(ids) })
    }

    pub fn from_latents(height: usize, width: usize, latent: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * latent || latent == 0 {
            return Err(GridError::Config(format!(
                "{} latent values for a {height}x{width} grid of width {latent}",
                values.len()
            )));
        }
        Ok(Self { height, width, payload: GridPayload::Latents { width: latent, values } })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.payload, GridPayload::Ids(_))
    }

    pub fn ids(&self) -> Option<&[usize]> {
        match &self.payload {
            GridPayload::Ids(ids) => Some(ids),
            GridPayload::Latents { .. } => None,
        }
    }

    pub fn latent(&self, cell: usize) -> Option<&[f64]> {
        match &self.payload {
            GridPayload::Latents { width, values } => Some(&values[cell * width..(cell + 1) * width]),
            GridPayload::Ids(_) => None,
        }
    }

    pub fn token(&self, cell: usize) -> TokenPayload {
        match &self.payload {
            GridPayload::Ids(ids) => TokenPayload::Id(ids[cell]),
            GridPayload::Latents { width, values } => {
                TokenPayload::Latent(values[cell * width..(cell + 1) * width].to_vec())
            }
        }
    }

    /// Text dump: header `H W kind`, then one line per grid row (ids) or per cell (latents).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.payload {
            GridPayload::Ids(ids) => {
                let _ = writeln!(s, "{} {} discrete", self.height, self.width);
                for r in 0..self.height {
                    let row: Vec<String> = ids[r * self.width..(r + 1) * self.width].iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(s, "{}", row.join(" "));
                }
            }
            GridPayload::Latents { width, values } => {
                let _ = writeln!(s, "{} {} continuous", self.height, self.width);
                for cell in values.chunks(*width) {
                    let row: Vec<String> = cell.iter().map(|v| format!("{v:e}")).collect();
                    let _ = writeln!(s, "{}", row.join(" "));
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| GridError::Format("empty grid dump".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(GridError::Format(format!("bad grid header {header:?}")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| GridError::Format(format!("bad extent {s:?}")));
        let (h, w) = (parse(parts[0])?, parse(parts[1])?);
        match parts[2] {
            "discrete" => {
                let ids = lines
                    .flat_map(|l| l.split_whitespace())
                    .map(parse)
                    .collect::<Result<Vec<_>>>()?;
                Self::from_ids(h, w, ids)
            }
            "continuous" => {
                let rows: Vec<Vec<f64>> = lines
                    .map(|l| {
                        l.split_whitespace()
                            .map(|v| v.parse::<f64>().map_err(|_| GridError::Format(format!("bad value {v:?}"))))
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                let m = rows.first().map_or(0, |r| r.len());
                Self::from_latents(h, w, m, rows.concat())
            }
            k => Err(GridError::Format(format!("unknown grid kind {k:?}"))),
        }
    }
}

/// A grid with its class label (0 for unconditional corpora).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub grid: TokenGrid,
    pub class: usize,
}
