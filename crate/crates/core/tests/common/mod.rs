#![allow(dead_code)]

use gridlm::backbone::{ModelConfig, TokenKind};
use gridlm::diffusion::DiffusionHeadConfig;
use gridlm::grid::{Example, TokenGrid};
use gridlm::heads::{HeadConfig, HeadKind};
use gridlm::model::GridModel;
use gridlm::substrate::Rng;

pub fn tiny_config(h: usize, w: usize, vocab: usize, depth: usize, hidden: usize) -> ModelConfig {
    let heads = 4.min(hidden);
    ModelConfig {
        depth,
        hidden,
        ffn_dim: 2 * hidden,
        head_count: heads,
        head_dim: hidden / heads,
        height: h,
        width: w,
        token: TokenKind::Discrete { vocab },
        class_count: 0,
    }
}

pub fn tiny_model(h: usize, w: usize, vocab: usize, kind: HeadKind, seed: u64) -> GridModel {
    let cfg = tiny_config(h, w, vocab, 2, 16);
    let hc = HeadConfig::matching(&cfg, kind);
    GridModel::new(&cfg, &hc, None, seed).unwrap()
}

pub fn tiny_continuous_model(h: usize, w: usize, latent: usize, seed: u64) -> GridModel {
    let mut cfg = tiny_config(h, w, 2, 2, 16);
    cfg.token = TokenKind::Continuous { latent };
    let hc = HeadConfig::matching(&cfg, HeadKind::Global);
    let d = DiffusionHeadConfig { block_count: 1, width: 16, step_count: 20, samples_per_token: 2, clip_x0: None };
    GridModel::new(&cfg, &hc, Some(&d), seed).unwrap()
}

pub fn random_grid(h: usize, w: usize, vocab: usize, rng: &mut Rng) -> TokenGrid {
    TokenGrid::from_ids(h, w, (0..h * w).map(|_| rng.below(vocab)).collect()).unwrap()
}

pub fn random_examples(h: usize, w: usize, vocab: usize, count: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| Example { grid: random_grid(h, w, vocab, &mut rng), class: 0 }).collect()
}
