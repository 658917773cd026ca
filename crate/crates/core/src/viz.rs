//! Cosine-similarity and attention maps for reference cells, written as PGM.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::backbone::{InputRow, RowContent};
use crate::error::{GridError, Result};
use crate::grid::Example;
use crate::image::scaled_map;
use crate::model::GridModel;
use crate::substrate::{RealArray, Tape};

/// Cosine similarity of every row to row `reference`; zero-norm pairs score 0.
pub fn cosine_similarity_map(embeddings: &RealArray, reference: usize) -> Result<Vec<f64>> {
    if reference >= embeddings.rows() {
        return Err(GridError::Config(format!("reference cell {reference} outside {} cells", embeddings.rows())));
    }
    let r = embeddings.row(reference);
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((0..embeddings.rows())
        .map(|i| {
            let e = embeddings.row(i);
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn == 0.0 || en == 0.0 {
                0.0
            } else {
                e.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (rn * en)
            }
        })
        .collect())
}

/// Writes `<prefix>_sim_<cell>.pgm` and `<prefix>_attn_<cell>.pgm` for each reference cell.
///
/// `attention[i]` is the weight vector of cell `i` over all cells.
pub fn similarity_and_attention_export(
    dir: &Path,
    prefix: &str,
    height: usize,
    width: usize,
    embeddings: &RealArray,
    attention: &[Vec<f64>],
    references: &[usize],
) -> Result<Vec<PathBuf>> {
    let n = height * width;
    if embeddings.rows() != n || attention.len() != n || attention.iter().any(|a| a.len() != n) {
        return Err(GridError::Config("embedding and attention tables must cover every cell".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &cell in references {
        let sim = cosine_similarity_map(embeddings, cell)?;
        let p = dir.join(format!("{prefix}_sim_{cell}.pgm"));
        scaled_map(width, height, &sim)?.save(&p)?;
        written.push(p);
        let p = dir.join(format!("{prefix}_attn_{cell}.pgm"));
        scaled_map(width, height, &attention[cell])?.save(&p)?;
        written.push(p);
    }
    Ok(written)
}

/// Final backbone hidden state per cell and head-averaged final-layer attention
/// per cell, with the grid fed in raster order.
pub fn model_maps(model: &GridModel, example: &Example) -> Result<(RealArray, Vec<Vec<f64>>)> {
    let n = model.cells();
    let mut rows = vec![InputRow { content: RowContent::Start(example.class), position: None }];
    rows.extend((0..n).map(|c| InputRow { content: RowContent::Token(example.grid.token(c)), position: Some(c) }));
    let mut tape = Tape::new(&model.store);
    let x = model.backbone.embed_rows(&mut tape, &rows)?;
    let h = model.backbone.forward_packed(&mut tape, x, &[n + 1])?;
    let cells = tape.gather_rows(h, Rc::new((1..=n).collect()))?;
    let hidden = tape.value(cells).clone();
    let last = *tape.attention_nodes().last().ok_or_else(|| GridError::Internal("backbone has no attention".into()))?;
    let (layout, probs) = tape.attention_probs(last).expect("attention node");
    let heads = layout.heads();
    let mut attention = vec![vec![0.0; n]; n];
    for hd in 0..heads {
        let p = layout.probs_of(probs, 0, hd);
        for (i, row) in attention.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += p[(i + 1) * (n + 1) + j + 1] / heads as f64;
            }
        }
    }
    Ok((hidden, attention))
}

/// Reference cells scaled from a `from_cells`-cell grid to an `n`-cell grid.
pub fn scale_reference_cells(cells: &[usize], from_cells: usize, n: usize) -> Vec<usize> {
    cells.iter().map(|&c| (c * n / from_cells).min(n - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let e = RealArray::from_vec(vec![3, 2], vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let m = cosine_similarity_map(&e, 0).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn scaled_reference_cells() {
        assert_eq!(scale_reference_cells(&[87, 138, 203], 256, 256), vec![87, 138, 203]);
        assert_eq!(scale_reference_cells(&[87, 138, 203], 256, 16), vec![5, 8, 12]);
    }
}
