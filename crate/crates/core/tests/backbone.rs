mod common;

use std::rc::Rc;

use gridlm::backbone::{Backbone, DecodeCache, ModelConfig};
use gridlm::checkpoint::Checkpoint;
use gridlm::grid::TokenPayload;
use gridlm::substrate::{ParamStore, RealArray, Rng, RngState, Tape};
use gridlm::GridError;
use proptest::prelude::*;

fn setup(class_count: usize) -> (ModelConfig, ParamStore, Backbone) {
    let mut cfg = common::tiny_config(3, 3, 4, 2, 16);
    cfg.class_count = class_count;
    let mut store = ParamStore::new();
    let bb = Backbone::new(&cfg, &mut store, &Rng::new(11)).unwrap();
    (cfg, store, bb)
}

fn random_inputs(len: usize, hidden: usize, seed: u64) -> RealArray {
    let mut rng = Rng::new(seed);
    RealArray::from_vec(vec![len, hidden], (0..len * hidden).map(|_| rng.normal()).collect()).unwrap()
}

fn full_forward(store: &ParamStore, bb: &Backbone, x: &RealArray) -> RealArray {
    let mut tape = Tape::new(store);
    let v = tape.constant(x.clone());
    let h = bb.causal_forward(&mut tape, v, None).unwrap();
    tape.value(h).clone()
}

#[test]
fn embed_step_is_token_plus_own_position() {
    let (_, store, bb) = setup(0);
    let table = store.value(store.id("backbone.token_table").unwrap()).clone();
    let pos = store.value(store.id("backbone.position_table").unwrap()).clone();
    let mut tape = Tape::new(&store);
    let e = bb.embed_step(&mut tape, &TokenPayload::Id(0), 0).unwrap();
    let expect: Vec<f64> = table.row(0).iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
    assert_eq!(tape.value(e).data(), &expect[..]);
    let a = bb.embed_step(&mut tape, &TokenPayload::Id(2), 1).unwrap();
    let b = bb.embed_step(&mut tape, &TokenPayload::Id(2), 5).unwrap();
    let diff: Vec<f64> = tape.value(a).data().iter().zip(tape.value(b).data()).map(|(x, y)| x - y).collect();
    let pdiff: Vec<f64> = pos.row(1).iter().zip(pos.row(5)).map(|(x, y)| x - y).collect();
    for (d, p) in diff.iter().zip(&pdiff) {
        assert!((d - p).abs() < 1e-15);
    }
}

#[test]
fn shifted_embedder_differs_when_next_cell_differs() {
    let (_, store, bb) = setup(0);
    let mut tape = Tape::new(&store);
    for own in 0..9 {
        for next in 0..9 {
            let a = bb.embed_step(&mut tape, &TokenPayload::Id(1), own).unwrap();
            let b = bb.embed_step_shifted(&mut tape, &TokenPayload::Id(1), next).unwrap();
            assert_eq!(tape.value(a) == tape.value(b), own == next);
        }
    }
}

#[test]
fn bad_token_id_is_config_error() {
    let (_, store, bb) = setup(0);
    let mut tape = Tape::new(&store);
    assert!(matches!(bb.embed_step(&mut tape, &TokenPayload::Id(4), 0), Err(GridError::Config(_))));
}

#[test]
fn overlength_is_config_error() {
    let (cfg, store, bb) = setup(0);
    let mut tape = Tape::new(&store);
    let x = tape.constant(random_inputs(cfg.cells() + 2, cfg.hidden, 1));
    assert!(matches!(bb.causal_forward(&mut tape, x, None), Err(GridError::Config(_))));
}

#[test]
fn single_step_ignores_later_context() {
    let (cfg, store, bb) = setup(0);
    let x = random_inputs(1, cfg.hidden, 2);
    let alone = full_forward(&store, &bb, &x);
    let mut longer = x.data().to_vec();
    longer.extend(random_inputs(6, cfg.hidden, 3).into_data());
    let long = full_forward(&store, &bb, &RealArray::from_vec(vec![7, cfg.hidden], longer).unwrap());
    assert_eq!(alone.row(0), long.row(0));
}

#[test]
fn class_token_reaches_every_position() {
    let (cfg, store, bb) = setup(3);
    let start = store.id("backbone.start_table").unwrap();
    let x0 = random_inputs(8, cfg.hidden, 4);
    for t in 0..8 {
        let mut tape = Tape::new(&store);
        let x = tape.constant(x0.clone());
        let h = bb.causal_forward(&mut tape, x, Some(2)).unwrap();
        let row = tape.gather_rows(h, Rc::new(vec![t + 1])).unwrap();
        let loss = tape.mean(row).unwrap();
        let g = tape.backward(loss).unwrap();
        let grad = g.get(start);
        assert!(grad.row(2).iter().any(|&v| v != 0.0), "no class gradient at t={t}");
        assert!(grad.row(0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cached_steps_match_full_forward() {
    let (cfg, store, bb) = setup(0);
    let x = random_inputs(8, cfg.hidden, 5);
    let full = full_forward(&store, &bb, &x);
    let mut cache = bb.new_cache();
    for t in 0..8 {
        let input = RealArray::from_vec(vec![1, cfg.hidden], x.row(t).to_vec()).unwrap();
        let h = bb.causal_forward_step(&store, &mut cache, &input).unwrap();
        for (a, b) in h.data().iter().zip(full.row(t)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn full_cache_is_state_error() {
    let (cfg, store, bb) = setup(0);
    let mut cache = bb.new_cache();
    let input = random_inputs(1, cfg.hidden, 6);
    for _ in 0..cache.capacity() {
        bb.causal_forward_step(&store, &mut cache, &input).unwrap();
    }
    assert!(matches!(bb.causal_forward_step(&store, &mut cache, &input), Err(GridError::State(_))));
}

#[test]
fn cache_survives_checkpoint_bytes() {
    let (cfg, store, bb) = setup(0);
    let mut cache = bb.new_cache();
    for t in 0..4 {
        bb.causal_forward_step(&store, &mut cache, &random_inputs(1, cfg.hidden, 20 + t)).unwrap();
    }
    let ckpt = Checkpoint {
        config_hash: "cachetest".into(),
        config_text: String::new(),
        step: 0,
        rng: RngState { seed: 0, position: 0 },
        tensors: cache.to_tensors(),
    };
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(DecodeCache::from_tensors(&back.tensors).unwrap(), cache);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prefix_states_ignore_future_inputs(seed in any::<u64>(), len in 2usize..10, cut in 0usize..9) {
        let (cfg, store, bb) = setup(0);
        let cut = cut % (len - 1);
        let x = random_inputs(len, cfg.hidden, seed);
        let mut y = x.clone();
        let mut rng = Rng::new(seed ^ 7);
        for r in cut + 1..len {
            for v in y.row_mut(r) {
                *v += rng.normal();
            }
        }
        let (a, b) = (full_forward(&store, &bb, &x), full_forward(&store, &bb, &y));
        for r in 0..=cut {
            prop_assert!(a.row(r).iter().zip(b.row(r)).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn incremental_matches_full_for_every_prefix(seed in any::<u64>(), len in 1usize..10) {
        let (cfg, store, bb) = setup(0);
        let x = random_inputs(len, cfg.hidden, seed);
        let full = full_forward(&store, &bb, &x);
        let mut cache = bb.new_cache();
        for t in 0..len {
            let input = RealArray::from_vec(vec![1, cfg.hidden], x.row(t).to_vec()).unwrap();
            let h = bb.causal_forward_step(&store, &mut cache, &input).unwrap();
            prop_assert!(h.data().iter().zip(full.row(t)).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }
}
