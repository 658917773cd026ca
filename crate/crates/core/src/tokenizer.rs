//! Reconstruction-only tokenizers: a k-means patch quantizer (discrete ids)
//! and a PCA linear autoencoder (continuous latents).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{GridError, Result};
use crate::grid::TokenGrid;
use crate::image::Image;
use crate::oracle::percentile;
use crate::substrate::{RealArray, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
}

impl PatchShape {
    pub fn dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    fn grid_extent(&self, image: &Image) -> Result<(usize, usize)> {
        if image.channels != self.channels {
            return Err(GridError::Config(format!(
                "image has {} channels, tokenizer expects {}",
                image.channels, self.channels
            )));
        }
        if self.patch_h == 0 || self.patch_w == 0 || image.height % self.patch_h != 0 || image.width % self.patch_w != 0 {
            return Err(GridError::Config(format!(
                "{}x{} image is not divisible into {}x{} patches",
                image.width, image.height, self.patch_w, self.patch_h
            )));
        }
        Ok((image.height / self.patch_h, image.width / self.patch_w))
    }

    /// Patches in row-major grid order, each flattened row-major with channels interleaved.
    pub fn extract(&self, image: &Image) -> Result<(usize, usize, Vec<Vec<f64>>)> {
        let (gh, gw) = self.grid_extent(image)?;
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut p = Vec::with_capacity(self.dim());
                for y in 0..self.patch_h {
                    for x in 0..self.patch_w {
                        for ch in 0..self.channels {
                            p.push(image.get(gx * self.patch_w + x, gy * self.patch_h + y, ch));
                        }
                    }
                }
                out.push(p);
            }
        }
        Ok((gh, gw, out))
    }

    pub fn assemble(&self, grid_h: usize, grid_w: usize, patches: &[Vec<f64>]) -> Result<Image> {
        if patches.len() != grid_h * grid_w || patches.iter().any(|p| p.len() != self.dim()) {
            return Err(GridError::Config("patch count or width does not match the grid".into()));
        }
        let mut img = Image::filled(grid_w * self.patch_w, grid_h * self.patch_h, self.channels, 0.0);
        for (i, p) in patches.iter().enumerate() {
            let (gy, gx) = (i / grid_w, i % grid_w);
            let mut k = 0;
            for y in 0..self.patch_h {
                for x in 0..self.patch_w {
                    for ch in 0..self.channels {
                        img.set(gx * self.patch_w + x, gy * self.patch_h + y, ch, p[k]);
                        k += 1;
                    }
                }
            }
        }
        Ok(img)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<Vec<f64>>,
    pub shape: PatchShape,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Nearest entry by squared error; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let d = sq_dist(patch, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFit {
    pub codebook: Codebook,
    pub warnings: Vec<String>,
}

/// Lloyd's k-means with k-means++ seeding; empty clusters restart at the point
/// farthest from its centroid.
pub fn fit_discrete_codebook(patches: &[Vec<f64>], k: usize, shape: PatchShape, seed: u64, max_iters: usize) -> Result<CodebookFit> {
    if k == 0 {
        return Err(GridError::Config("codebook size must be positive".into()));
    }
    if patches.len() < k {
        return Err(GridError::Config(format!("{} patches cannot fit {k} centroids", patches.len())));
    }
    if patches.iter().any(|p| p.len() != shape.dim() || p.iter().any(|v| !v.is_finite())) {
        return Err(GridError::Config(format!("patches must be finite vectors of width {}", shape.dim())));
    }
    let mut warnings = Vec::new();
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in patches {
        if !distinct.iter().any(|d| *d == p) {
            distinct.push(p);
            if distinct.len() >= k {
                break;
            }
        }
    }
    let k = if distinct.len() < k {
        warnings.push(format!("only {} distinct patches; codebook shrunk from {k}", distinct.len()));
        distinct.len()
    } else {
        k
    };
    let mut rng = Rng::new(seed).split_named("kmeans", 0);
    let mut centroids: Vec<Vec<f64>> = vec![patches[rng.below(patches.len())].clone()];
    let mut d2: Vec<f64> = patches.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 { rng.categorical(&d2) } else { rng.below(patches.len()) };
        centroids.push(patches[next].clone());
        let c = centroids.last().expect("pushed");
        for (d, p) in d2.iter_mut().zip(patches) {
            *d = d.min(sq_dist(p, c));
        }
    }
    let mut book = Codebook { entries: centroids, shape };
    let mut assign = vec![usize::MAX; patches.len()];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(patches) {
            let n = book.nearest(p);
            changed |= n != *a;
            *a = n;
        }
        let dim = shape.dim();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(patches) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..patches.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&patches[i], &book.entries[assign[i]]);
                        let dj = sq_dist(&patches[j], &book.entries[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("non-empty corpus");
                book.entries[c] = patches[far].clone();
                assign[far] = c;
                changed = true;
            } else {
                book.entries[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(CodebookFit { codebook: book, warnings })
}

pub fn encode_discrete(image: &Image, codebook: &Codebook) -> Result<TokenGrid> {
    let (gh, gw, patches) = codebook.shape.extract(image)?;
    TokenGrid::from_ids(gh, gw, patches.iter().map(|p| codebook.nearest(p)).collect())
}

pub fn decode_discrete(grid: &TokenGrid, codebook: &Codebook) -> Result<Image> {
    let ids = grid.ids().ok_or_else(|| GridError::Config("continuous grid given to a discrete tokenizer".into()))?;
    let patches = ids
        .iter()
        .map(|&i| codebook.entries.get(i).cloned().ok_or_else(|| GridError::Config(format!("token id {i} >= codebook size"))))
        .collect::<Result<Vec<_>>>()?;
    codebook.shape.assemble(grid.height, grid.width, &patches)
}

/// `latent = (x - mean) * encode`, `x = mean + latent * decode`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAutoencoder {
    pub shape: PatchShape,
    pub latent: usize,
    pub mean: Vec<f64>,
    /// `d x m`, row-major.
    pub encode: Vec<f64>,
    /// `m x d`, row-major.
    pub decode: Vec<f64>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// PCA fit. Latents are rescaled by one global factor so their average variance is 1.
pub fn fit_linear_autoencoder(patches: &[Vec<f64>], latent: usize, shape: PatchShape) -> Result<LinearAutoencoder> {
    let d = shape.dim();
    if latent == 0 || latent > d {
        return Err(GridError::Config(format!("latent width {latent} outside 1..={d}")));
    }
    if patches.is_empty() || patches.iter().any(|p| p.len() != d) {
        return Err(GridError::Config(format!("need a non-empty corpus of width-{d} patches")));
    }
    let n = patches.len() as f64;
    let mut mean = vec![0.0; d];
    for p in patches {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in patches {
        for i in 0..d {
            let a = p[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += a * (p[j] - mean[j]) / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let kept: f64 = eigenvalues[..latent].iter().sum::<f64>() / latent as f64;
    let scale = if kept > 1e-12 { kept.sqrt() } else { 1.0 };
    let mut encode = vec![0.0; d * latent];
    let mut decode = vec![0.0; latent * d];
    for (j, &col) in order[..latent].iter().enumerate() {
        let v = eig.eigenvectors.column(col);
        // fix the sign so the largest-magnitude component is positive
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            encode[i * latent + j] = sign * v[i] / scale;
            decode[j * d + i] = sign * v[i] * scale;
        }
    }
    Ok(LinearAutoencoder { shape, latent, mean, encode, decode, eigenvalues })
}

impl LinearAutoencoder {
    pub fn encode_patch(&self, p: &[f64]) -> Vec<f64> {
        let d = self.shape.dim();
        let mut z = vec![0.0; self.latent];
        for i in 0..d {
            let a = p[i] - self.mean[i];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += a * self.encode[i * self.latent + j];
            }
        }
        z
    }

    pub fn decode_patch(&self, z: &[f64]) -> Vec<f64> {
        let d = self.shape.dim();
        let mut x = self.mean.clone();
        for (j, &zj) in z.iter().enumerate() {
            for i in 0..d {
                x[i] += zj * self.decode[j * d + i];
            }
        }
        x
    }

    /// Sum of discarded eigenvalues: the expected per-patch squared error on the fitting corpus.
    pub fn tail_energy(&self) -> f64 {
        self.eigenvalues[self.latent..].iter().sum()
    }
}

pub fn encode_continuous(image: &Image, ae: &LinearAutoencoder) -> Result<TokenGrid> {
    let (gh, gw, patches) = ae.shape.extract(image)?;
    let values = patches.iter().flat_map(|p| ae.encode_patch(p)).collect();
    TokenGrid::from_latents(gh, gw, ae.latent, values)
}

pub fn decode_continuous(grid: &TokenGrid, ae: &LinearAutoencoder) -> Result<Image> {
    if grid.is_discrete() {
        return Err(GridError::Config("discrete grid given to a continuous tokenizer".into()));
    }
    let patches = (0..grid.cells())
        .map(|c| {
            let z = grid.latent(c).expect("continuous grid");
            if z.len() != ae.latent {
                return Err(GridError::Config(format!("latent width {} != {}", z.len(), ae.latent)));
            }
            Ok(ae.decode_patch(z))
        })
        .collect::<Result<Vec<_>>>()?;
    ae.shape.assemble(grid.height, grid.width, &patches)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    Discrete(Codebook),
    Continuous(LinearAutoencoder),
}

impl Tokenizer {
    pub fn shape(&self) -> PatchShape {
        match self {
            Self::Discrete(c) => c.shape,
            Self::Continuous(a) => a.shape,
        }
    }

    pub fn encode(&self, image: &Image) -> Result<TokenGrid> {
        match self {
            Self::Discrete(c) => encode_discrete(image, c),
            Self::Continuous(a) => encode_continuous(image, a),
        }
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        match self {
            Self::Discrete(c) => decode_discrete(grid, c),
            Self::Continuous(a) => decode_continuous(grid, a),
        }
    }

    /// Named tensors for checkpoint storage.
    pub fn to_tensors(&self) -> Vec<(String, RealArray)> {
        let s = self.shape();
        let meta = |kind: f64, width: f64| {
            RealArray::from_vec(vec![5], vec![kind, s.patch_h as f64, s.patch_w as f64, s.channels as f64, width])
                .expect("meta")
        };
        match self {
            Self::Discrete(c) => vec![
                ("tokenizer.meta".into(), meta(0.0, c.size() as f64)),
                (
                    "tokenizer.codebook".into(),
                    RealArray::from_vec(vec![c.size(), s.dim()], c.entries.concat()).expect("codebook"),
                ),
            ],
            Self::Continuous(a) => vec![
                ("tokenizer.meta".into(), meta(1.0, a.latent as f64)),
                ("tokenizer.mean".into(), RealArray::from_vec(vec![s.dim()], a.mean.clone()).expect("mean")),
                ("tokenizer.encode".into(), RealArray::from_vec(vec![s.dim(), a.latent], a.encode.clone()).expect("enc")),
                ("tokenizer.decode".into(), RealArray::from_vec(vec![a.latent, s.dim()], a.decode.clone()).expect("dec")),
                (
                    "tokenizer.eigenvalues".into(),
                    RealArray::from_vec(vec![s.dim()], a.eigenvalues.clone()).expect("eig"),
                ),
            ],
        }
    }

    pub fn from_tensors(tensors: &[(String, RealArray)]) -> Result<Option<Self>> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a);
        let Some(meta) = find("tokenizer.meta") else { return Ok(None) };
        let need = |name: &str| find(name).ok_or_else(|| GridError::Format(format!("missing tensor {name}")));
        let m = meta.data();
        if m.len() != 5 {
            return Err(GridError::Format("bad tokenizer meta".into()));
        }
        let shape = PatchShape { patch_h: m[1] as usize, patch_w: m[2] as usize, channels: m[3] as usize };
        let width = m[4] as usize;
        Ok(Some(if m[0] == 0.0 {
            let cb = need("tokenizer.codebook")?;
            Self::Discrete(Codebook { entries: cb.data().chunks(shape.dim()).map(|c| c.to_vec()).collect(), shape })
        } else {
            Self::Continuous(LinearAutoencoder {
                shape,
                latent: width,
                mean: need("tokenizer.mean")?.data().to_vec(),
                encode: need("tokenizer.encode")?.data().to_vec(),
                decode: need("tokenizer.decode")?.data().to_vec(),
                eigenvalues: need("tokenizer.eigenvalues")?.data().to_vec(),
            })
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub kind: &'static str,
    /// Codebook size `K` (discrete) or latent width `m` (continuous).
    pub size: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Mean per-pixel squared error over images.
    pub mse_mean: f64,
    pub mse_p50: f64,
    pub mse_p95: f64,
    pub psnr_mean: f64,
    pub warnings: Vec<String>,
}

/// Per-pixel MSE of one image against its reconstruction.
pub fn image_mse(a: &Image, b: &Image) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels.len() as f64
}

/// PSNR for unit peak, capped at 100 dB for exact reconstructions.
pub fn psnr(mse: f64) -> f64 {
    (10.0 * (1.0 / mse.max(1e-10)).log10()).min(100.0)
}

pub fn reconstruction_report(images: &[Image], tokenizer: &Tokenizer, warnings: &[String]) -> Result<ReconstructionReport> {
    if images.is_empty() {
        return Err(GridError::Config("empty corpus".into()));
    }
    let mses = images
        .iter()
        .map(|img| Ok(image_mse(img, &tokenizer.decode(&tokenizer.encode(img)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let s = tokenizer.shape();
    let (kind, size) = match tokenizer {
        Tokenizer::Discrete(c) => ("discrete", c.size()),
        Tokenizer::Continuous(a) => ("continuous", a.latent),
    };
    Ok(ReconstructionReport {
        kind,
        size,
        patch_h: s.patch_h,
        patch_w: s.patch_w,
        mse_mean: mses.iter().sum::<f64>() / mses.len() as f64,
        mse_p50: percentile(&mses, 50.0),
        mse_p95: percentile(&mses, 95.0),
        psnr_mean: mses.iter().map(|&m| psnr(m)).sum::<f64>() / mses.len() as f64,
        warnings: warnings.to_vec(),
    })
}

/// Every patch of every image, for fitting.
pub fn corpus_patches(images: &[Image], shape: PatchShape) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for img in images {
        out.extend(shape.extract(img)?.2);
    }
    Ok(out)
}
