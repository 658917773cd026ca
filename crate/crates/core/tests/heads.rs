mod common;

use gridlm::diffusion::{CosineSchedule, Denoiser, DiffusionHeadConfig};
use gridlm::grid::TokenPayload;
use gridlm::heads::{ChunkGeometry, HeadKind};
use gridlm::model::GridModel;
use gridlm::substrate::layers::ParamBuilder;
use gridlm::substrate::{adamw_step, OptimizerState, ParamStore, RealArray, Rng, Tape};
use gridlm::GridError;
use proptest::prelude::*;

fn revealed(cells: &[usize], ids: &[usize]) -> Vec<(usize, TokenPayload)> {
    cells.iter().zip(ids).map(|(&c, &i)| (c, TokenPayload::Id(i))).collect()
}

fn prefix_var(model: &GridModel, tape: &mut Tape, rev: &[(usize, TokenPayload)]) -> gridlm::substrate::Var {
    let rows = GridModel::prefix_rows(0, rev);
    let n = rows.len();
    let x = model.backbone.embed_rows(tape, &rows).unwrap();
    model.backbone.forward_packed(tape, x, &[n]).unwrap()
}

#[test]
fn last_cell_gives_one_payload() {
    let model = common::tiny_model(3, 3, 4, HeadKind::Global, 1);
    let rev = revealed(&[0, 1, 2, 3, 4, 5, 6, 7], &[0, 1, 2, 3, 0, 1, 2, 3]);
    let mut tape = Tape::new(&model.store);
    let prefix = prefix_var(&model, &mut tape, &rev);
    let cells: Vec<usize> = rev.iter().map(|r| r.0).collect();
    let p = model.head.global_head_forward(&mut tape, prefix, &cells, &[8]).unwrap();
    assert_eq!(p.positions, vec![8]);
    assert_eq!(p.payload.shape(), &[1, 4]);
}

#[test]
fn empty_prefix_prediction_is_finite() {
    let model = common::tiny_model(3, 3, 4, HeadKind::Global, 2);
    let all: Vec<usize> = (0..9).collect();
    let p = model.predict(0, &[], &all).unwrap();
    assert_eq!(p.rows(), 9);
    assert!(p.all_finite());
}

#[test]
fn overlapping_masked_cell_is_rejected() {
    let model = common::tiny_model(3, 3, 4, HeadKind::Global, 3);
    let rev = revealed(&[4], &[1]);
    let mut tape = Tape::new(&model.store);
    let prefix = prefix_var(&model, &mut tape, &rev);
    let r = model.head.global_head_forward(&mut tape, prefix, &[4], &[4, 5]);
    assert!(matches!(r, Err(GridError::Config(_))));
}

#[test]
fn prediction_ignores_tokens_outside_prefix() {
    let model = common::tiny_model(3, 3, 4, HeadKind::Global, 4);
    let rev = revealed(&[2, 7], &[1, 3]);
    let masked = [0, 1, 3, 4, 5, 6, 8];
    let a = model.predict(0, &rev, &masked).unwrap();
    // the model never sees the hidden cells, whatever their values would be
    let b = model.predict(0, &rev, &masked).unwrap();
    assert_eq!(a, b);
    let other = revealed(&[2, 7], &[1, 2]);
    assert_ne!(model.predict(0, &other, &masked).unwrap(), a);
}

#[test]
fn chunk_tiling_arithmetic() {
    let g = ChunkGeometry::new(4, 4, 4).unwrap();
    assert_eq!(g.chunk_count(), 4);
    assert_eq!(g.cells_of(g.chunk_of(5)), vec![0, 1, 4, 5]);
    assert_eq!(g.cells_of(g.chunk_of(10)), vec![10, 11, 14, 15]);
    let row = ChunkGeometry::new(2, 6, 3).unwrap();
    assert_eq!(row.cells_of(row.chunk_of(4)), vec![3, 4, 5]);
}

#[test]
fn single_chunk_covers_the_global_target_set() {
    let global = common::tiny_model(2, 2, 3, HeadKind::Global, 5);
    let chunk = common::tiny_model(2, 2, 3, HeadKind::Chunk { window: 4 }, 5);
    let rev = revealed(&[1], &[2]);
    let ga = global.default_mask(&rev, 0).unwrap();
    let ca = chunk.default_mask(&rev, 0).unwrap();
    let (mut gs, mut cs) = (ga.clone(), ca.clone());
    gs.sort();
    cs.sort();
    assert_eq!(gs, cs);
    assert_eq!(gs, vec![0, 2, 3]);
}

#[test]
fn chunk_head_rejects_foreign_cells_and_empty_prefix() {
    let model = common::tiny_model(4, 4, 3, HeadKind::Chunk { window: 4 }, 6);
    let rev = revealed(&[0], &[1]);
    let mut tape = Tape::new(&model.store);
    let prefix = prefix_var(&model, &mut tape, &rev);
    assert!(matches!(model.head.chunk_head_forward(&mut tape, prefix, &[0], 0, &[1, 2]), Err(GridError::Config(_))));
    assert!(model.head.chunk_head_forward(&mut tape, prefix, &[0], 0, &[1, 4, 5]).is_ok());
    let empty = tape.constant(RealArray::zeros(&[0, 16]));
    assert!(matches!(model.head.chunk_head_forward(&mut tape, empty, &[], 0, &[0]), Err(GridError::Config(_))));
}

#[test]
fn cosine_schedule_properties() {
    let s = CosineSchedule::new(100);
    assert!(s.alpha_bar_at(1) > 0.99 && s.alpha_bar_at(100) < 0.01);
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    let mut rng = Rng::new(1);
    let ab = s.alpha_bar_at(100);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let x0 = rng.normal();
        let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * rng.normal();
        sxy += x0 * xt;
        sxx += x0 * x0;
        syy += xt * xt;
    }
    assert!((sxy / (sxx * syy).sqrt()).abs() < 0.1);
}

fn denoiser(latent: usize, seed: u64) -> (ParamStore, Denoiser) {
    let mut store = ParamStore::new();
    let cfg = DiffusionHeadConfig { block_count: 2, width: 32, step_count: 50, samples_per_token: 8, clip_x0: None };
    let d = Denoiser::new(&cfg, latent, 4, &mut ParamBuilder::new(&mut store, Rng::new(seed))).unwrap();
    (store, d)
}

fn train_denoiser(store: &mut ParamStore, d: &Denoiser, targets: &dyn Fn(&mut Rng) -> Vec<f64>, steps: usize) {
    let mut opt = OptimizerState::new(store, 3e-3, 0.9, 0.99, 0.0, 1e-8).unwrap();
    let mut rng = Rng::new(99);
    let m = d.latent();
    for _ in 0..steps {
        let x0: Vec<f64> = (0..32).flat_map(|_| targets(&mut rng)).collect();
        let x0 = RealArray::from_vec(vec![32, m], x0).unwrap();
        let grads = {
            let mut tape = Tape::new(store);
            let z = tape.constant(RealArray::filled(&[32, 4], 0.5));
            let l = d.loss_rows(&mut tape, z, &x0, 4, &mut rng).unwrap();
            let l = tape.mean(l).unwrap();
            tape.backward(l).unwrap()
        };
        adamw_step(store, &mut opt, &grads, 3e-3).unwrap();
    }
}

#[test]
fn memorized_point_is_resampled_closely() {
    let (mut store, d) = denoiser(2, 1);
    let target = [0.7, -0.4];
    train_denoiser(&mut store, &d, &|_| target.to_vec(), 400);
    let z = RealArray::filled(&[200, 4], 0.5);
    let mut rngs: Vec<Rng> = (0..200).map(|i| Rng::new(7).split(i)).collect();
    let x = d.sample(&store, &z, &mut rngs, 50).unwrap();
    let mut dist: Vec<f64> = (0..200).map(|r| x.row(r).iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
    dist.sort_by(f64::total_cmp);
    assert!(dist[179] < 0.1 * 2f64.sqrt(), "p90 distance {}", dist[179]);
}

#[test]
fn zero_denoiser_loss_is_latent_width() {
    let (store, d) = denoiser(3, 2);
    let mut rng = Rng::new(3);
    let mut tape = Tape::new(&store);
    let z = tape.constant(RealArray::filled(&[100, 4], 0.1));
    let x0 = RealArray::filled(&[100, 3], 0.3);
    let l = d.loss_rows(&mut tape, z, &x0, 100, &mut rng).unwrap();
    let mean = tape.value(l).sum() / tape.value(l).len() as f64;
    assert!((mean - 3.0).abs() < 0.05 * 3.0, "{mean}");
}

#[test]
fn non_finite_conditioning_is_numeric_error() {
    let (store, d) = denoiser(1, 3);
    let mut tape = Tape::new(&store);
    let z = tape.constant(RealArray::filled(&[1, 4], f64::NAN));
    let r = d.loss_rows(&mut tape, z, &RealArray::zeros(&[1, 1]), 1, &mut Rng::new(0));
    assert!(matches!(r, Err(GridError::Numeric { .. })));
}

#[test]
fn fixed_seed_sampling_is_bitwise_stable() {
    let (store, d) = denoiser(2, 4);
    let z = RealArray::filled(&[3, 4], 0.2);
    let run = || {
        let mut rngs: Vec<Rng> = (0..3).map(|i| Rng::new(5).split(i)).collect();
        d.sample(&store, &z, &mut rngs, 20).unwrap()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn masked_slots_are_equivariant(seed in any::<u64>(), k in 1usize..8) {
        let model = common::tiny_model(3, 3, 4, HeadKind::Global, seed);
        let mut rng = Rng::new(seed);
        let order = rng.permutation(9);
        let rev = revealed(&order[..9 - k], &order[..9 - k].iter().map(|c| c % 4).collect::<Vec<_>>());
        let masked = order[9 - k..].to_vec();
        let mut shuffled = masked.clone();
        rng.shuffle(&mut shuffled);
        let a = model.predict(0, &rev, &masked).unwrap();
        let b = model.predict(0, &rev, &shuffled).unwrap();
        for (j, c) in shuffled.iter().enumerate() {
            let i = masked.iter().position(|x| x == c).unwrap();
            prop_assert!(a.row(i).iter().zip(b.row(j)).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
