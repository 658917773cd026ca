//! Corpora: synthetic grids drawn from a joint spec, synthetic shape images for
//! the tokenizer path, content-hash splits, and seeded batching.

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{GridError, Result};
use crate::grid::{Example, TokenGrid};
use crate::image::Image;
use crate::oracle::Oracle;
use crate::substrate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub split: Split,
    /// Hash of the spec text or image directory the corpus came from.
    pub provenance: String,
}

/// Hex SHA-256 of `bytes`, truncated to 16 characters.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Content hash of one example (grid dump plus class).
pub fn example_hash(ex: &Example) -> String {
    short_hash(format!("{}class {}\n", ex.grid.to_text(), ex.class).as_bytes())
}

/// i.i.d. grids from the oracle; example `i` uses its own RNG stream.
pub fn sample_corpus(oracle: &Oracle, count: usize, seed: u64, provenance: &str) -> Result<Corpus> {
    let spec = &oracle.spec;
    let base = Rng::new(seed).split_named("corpus", 0);
    let examples = (0..count)
        .map(|i| {
            let mut rng = base.split(i as u64);
            Ok(Example { grid: TokenGrid::from_ids(spec.height, spec.width, oracle.sample(&mut rng))?, class: 0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { examples, split: Split::Train, provenance: provenance.to_string() })
}

/// Partitions by content hash, so identical grids always land in the same split.
/// Roughly `heldout_per_mille / 1000` of distinct contents go to the held-out side.
pub fn split_by_hash(corpus: Corpus, heldout_per_mille: u32) -> (Corpus, Corpus) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for ex in corpus.examples {
        let h = example_hash(&ex);
        let bucket = u32::from_str_radix(&h[..8], 16).unwrap_or(0) % 1000;
        if bucket < heldout_per_mille {
            held.push(ex);
        } else {
            train.push(ex);
        }
    }
    (
        Corpus { examples: train, split: Split::Train, provenance: corpus.provenance.clone() },
        Corpus { examples: held, split: Split::Heldout, provenance: corpus.provenance },
    )
}

/// Fails if any held-out example also appears in the training corpus.
pub fn check_disjoint(train: &Corpus, heldout: &Corpus) -> Result<()> {
    let seen: HashSet<String> = train.examples.iter().map(example_hash).collect();
    match heldout.examples.iter().find(|e| seen.contains(&example_hash(e))) {
        Some(e) => Err(GridError::Domain(format!("held-out example {} leaks into training", example_hash(e)))),
        None => Ok(()),
    }
}

/// Seeded shuffle then consecutive batches; the last batch may be short.
pub fn make_batches(corpus: &Corpus, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if corpus.examples.is_empty() {
        return Err(GridError::Config("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(GridError::Config("batch size must be positive".into()));
    }
    let mut rng = Rng::new(epoch_seed).split_named("epoch", 0);
    let order = rng.permutation(corpus.examples.len());
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless batches over repeated epochs, epoch `e` shuffled with `seed + e`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

impl BatchStream {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self { batch_size, seed, epoch: 0, cursor: 0 }
    }

    pub fn next_batch(&mut self, corpus: &Corpus) -> Result<Vec<Example>> {
        let batches = make_batches(corpus, self.batch_size, self.seed.wrapping_add(self.epoch))?;
        let out = batches[self.cursor].iter().map(|&i| corpus.examples[i].clone()).collect();
        self.cursor += 1;
        if self.cursor == batches.len() {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripes,
}

impl ShapeKind {
    pub fn class_id(self) -> usize {
        match self {
            Self::Rectangle => 0,
            Self::Disk => 1,
            Self::Stripes => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(Self::Rectangle),
            "disk" => Ok(Self::Disk),
            "stripes" => Ok(Self::Stripes),
            other => Err(GridError::Config(format!("unknown shape kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeImageSpec {
    pub width: usize,
    pub height: usize,
    pub kinds: Vec<ShapeKind>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// When set, every shape uses the same centered geometry.
    pub fixed_geometry: bool,
}

impl ShapeImageSpec {
    pub fn validate(&self, patch_h: usize, patch_w: usize) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(GridError::Config("at least one shape kind required".into()));
        }
        if self.width < 4 || self.height < 4 {
            return Err(GridError::Config("shape images need at least 4x4 pixels".into()));
        }
        if patch_h == 0 || patch_w == 0 || self.height % patch_h != 0 || self.width % patch_w != 0 {
            return Err(GridError::Config(format!(
                "{}x{} images are not divisible by {patch_w}x{patch_h} patches",
                self.width, self.height
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(GridError::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.9;

pub fn render_shape(spec: &ShapeImageSpec, kind: ShapeKind, rng: &mut Rng) -> Image {
    let (w, h) = (spec.width, spec.height);
    let mut img = Image::filled(w, h, 1, BACKGROUND);
    let (x0, y0, sw, sh) = if spec.fixed_geometry {
        (w / 4, h / 4, w / 2, h / 2)
    } else {
        let sw = w / 4 + rng.below(w / 2);
        let sh = h / 4 + rng.below(h / 2);
        (rng.below(w - sw + 1), rng.below(h - sh + 1), sw, sh)
    };
    let period = if spec.fixed_geometry { 2 } else { 2 + rng.below(2) };
    for y in 0..h {
        for x in 0..w {
            let inside = match kind {
                ShapeKind::Rectangle => x >= x0 && x < x0 + sw && y >= y0 && y < y0 + sh,
                ShapeKind::Disk => {
                    let r = sw.min(sh) as f64 / 2.0;
                    let (cx, cy) = (x0 as f64 + sw as f64 / 2.0, y0 as f64 + sh as f64 / 2.0);
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dx * dx + dy * dy <= r * r
                }
                ShapeKind::Stripes => {
                    x >= x0 && x < x0 + sw && y >= y0 && y < y0 + sh && ((y - y0) / period) % 2 == 0
                }
            };
            if inside {
                img.set(x, y, 0, FOREGROUND);
            }
        }
    }
    if spec.noise > 0.0 {
        for p in &mut img.pixels {
            *p = (*p + spec.noise * rng.normal()).clamp(0.0, 1.0);
        }
    }
    img
}

/// In-memory shape images with class labels; image `i` uses its own stream.
pub fn shape_images(spec: &ShapeImageSpec, count: usize, seed: u64) -> Vec<(Image, usize)> {
    let base = Rng::new(seed).split_named("shapes", 0);
    (0..count)
        .map(|i| {
            let mut rng = base.split(i as u64);
            let kind = spec.kinds[i % spec.kinds.len()];
            (render_shape(spec, kind, &mut rng), kind.class_id())
        })
        .collect()
}

/// Writes `shape_XXXXX.pgm` files plus `manifest.txt` (`filename class_id` lines).
pub fn render_shape_corpus(spec: &ShapeImageSpec, count: usize, seed: u64, dir: &Path) -> Result<Vec<(String, usize)>> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(count);
    for (i, (img, class)) in shape_images(spec, count, seed).into_iter().enumerate() {
        let name = format!("shape_{i:05}.pgm");
        img.save(&dir.join(&name))?;
        manifest.push_str(&format!("{name} {class}\n"));
        entries.push((name, class));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(entries)
}

/// Reads a manifest directory back into labeled images.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(Image, usize)>> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            let name = parts.next().ok_or_else(|| GridError::Format(format!("bad manifest line {l:?}")))?;
            let class = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| GridError::Format(format!("bad manifest line {l:?}")))?;
            Ok((Image::load(&dir.join(name))?, class))
        })
        .collect()
}

/// Hash over a directory's manifest and file bytes.
pub fn image_dir_hash(dir: &Path) -> Result<String> {
    let manifest = std::fs::read(dir.join("manifest.txt"))?;
    let mut all = manifest.clone();
    for line in String::from_utf8_lossy(&manifest).lines() {
        if let Some(name) = line.split_whitespace().next() {
            all.extend(std::fs::read(dir.join(name))?);
        }
    }
    Ok(short_hash(&all))
}
