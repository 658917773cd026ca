use std::collections::HashMap;

use gridlm::data::*;
use gridlm::grid::{Example, TokenGrid};
use gridlm::oracle::{JointSpec, Oracle};
use gridlm::tokenizer::{corpus_patches, encode_discrete, fit_discrete_codebook, PatchShape};
use gridlm::GridError;
use proptest::prelude::*;

fn corpus_of(n: usize) -> Corpus {
    let examples = (0..n).map(|i| Example { grid: TokenGrid::from_ids(1, 1, vec![i]).unwrap(), class: 0 }).collect();
    Corpus { examples, split: Split::Train, provenance: "test".into() }
}

#[test]
fn deterministic_spec_gives_identical_examples() {
    let mut m = vec![vec![0.0; 3]; 4];
    for (c, row) in m.iter_mut().enumerate() {
        row[c % 3] = 1.0;
    }
    let oracle = Oracle::new(&JointSpec::factorized(2, 2, m).unwrap()).unwrap();
    let c = sample_corpus(&oracle, 20, 0, "p").unwrap();
    assert!(c.examples.iter().all(|e| e.grid.ids().unwrap() == [0, 1, 2, 0]));
}

#[test]
fn uniform_outcomes_are_uniform() {
    let oracle = Oracle::new(&JointSpec::uniform(2, 2, 2).unwrap()).unwrap();
    let draws = 10_000;
    let c = sample_corpus(&oracle, draws, 3, "p").unwrap();
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for e in &c.examples {
        *counts.entry(e.grid.ids().unwrap().to_vec()).or_default() += 1;
    }
    assert_eq!(counts.len(), 16);
    let p = 1.0 / 16.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (k, n) in counts {
        assert!((n as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{k:?} {n}");
    }
}

#[test]
fn same_seed_same_corpus() {
    let oracle = Oracle::new(&JointSpec::random_markov(3, 3, 4, 1.0, 1).unwrap()).unwrap();
    assert_eq!(sample_corpus(&oracle, 50, 9, "p").unwrap(), sample_corpus(&oracle, 50, 9, "p").unwrap());
    assert_ne!(sample_corpus(&oracle, 50, 9, "p").unwrap(), sample_corpus(&oracle, 50, 10, "p").unwrap());
}

#[test]
fn batch_sizes() {
    let b = make_batches(&corpus_of(10), 4, 0).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    assert_eq!(make_batches(&corpus_of(10), 4, 0).unwrap(), b);
    assert_ne!(make_batches(&corpus_of(10), 4, 1).unwrap(), b);
    assert!(matches!(make_batches(&corpus_of(0), 4, 0), Err(GridError::Config(_))));
}

#[test]
fn stream_covers_each_epoch_once() {
    let corpus = corpus_of(10);
    let mut s = BatchStream::new(4, 5);
    for _ in 0..3 {
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(s.next_batch(&corpus).unwrap().into_iter().map(|e| e.grid.ids().unwrap()[0]));
        }
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
    assert_eq!(s.epoch, 3);
}

#[test]
fn hash_split_is_disjoint() {
    let oracle = Oracle::new(&JointSpec::random_markov(2, 2, 3, 0.5, 2).unwrap()).unwrap();
    let corpus = sample_corpus(&oracle, 500, 0, "p").unwrap();
    let (train, held) = split_by_hash(corpus, 200);
    assert!(!held.examples.is_empty() && !train.examples.is_empty());
    assert_eq!(held.split, Split::Heldout);
    check_disjoint(&train, &held).unwrap();
    let mut leaky = train.clone();
    leaky.examples.push(held.examples[0].clone());
    assert!(check_disjoint(&leaky, &held).is_err());
}

fn spec(kinds: Vec<ShapeKind>, noise: f64, fixed: bool) -> ShapeImageSpec {
    ShapeImageSpec { width: 16, height: 16, kinds, noise, fixed_geometry: fixed }
}

#[test]
fn fixed_shapes_render_identical_files() {
    let s = spec(vec![ShapeKind::Disk], 0.0, true);
    let dir = tempfile::tempdir().unwrap();
    let entries = render_shape_corpus(&s, 5, 3, dir.path()).unwrap();
    let first = std::fs::read(dir.path().join(&entries[0].0)).unwrap();
    for (name, class) in &entries {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), first);
        assert_eq!(*class, 1);
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
}

#[test]
fn shape_dir_round_trip() {
    let s = spec(vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Stripes], 0.05, false);
    let dir = tempfile::tempdir().unwrap();
    render_shape_corpus(&s, 9, 1, dir.path()).unwrap();
    let loaded = load_image_dir(dir.path()).unwrap();
    let classes: Vec<usize> = loaded.iter().map(|(_, c)| *c).collect();
    assert_eq!(classes, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    let h = image_dir_hash(dir.path()).unwrap();
    let again = tempfile::tempdir().unwrap();
    render_shape_corpus(&s, 9, 1, again.path()).unwrap();
    assert_eq!(image_dir_hash(again.path()).unwrap(), h);
}

#[test]
fn shape_spec_validation() {
    let s = spec(vec![ShapeKind::Disk], 0.0, false);
    assert!(s.validate(4, 4).is_ok());
    assert!(matches!(s.validate(3, 4), Err(GridError::Config(_))));
    assert!(matches!(spec(vec![], 0.0, false).validate(4, 4), Err(GridError::Config(_))));
    assert!(matches!(ShapeKind::parse("star"), Err(GridError::Config(_))));
}

#[test]
fn shapes_use_several_tokens() {
    let s = spec(vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Stripes], 0.02, false);
    let images: Vec<_> = shape_images(&s, 30, 4).into_iter().map(|(i, _)| i).collect();
    let shape = PatchShape { patch_h: 4, patch_w: 4, channels: 1 };
    let fit = fit_discrete_codebook(&corpus_patches(&images, shape).unwrap(), 8, shape, 0, 50).unwrap();
    let mut ids = std::collections::HashSet::new();
    for img in &images {
        ids.extend(encode_discrete(img, &fit.codebook).unwrap().ids().unwrap().iter().copied());
    }
    assert!(ids.len() >= 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_partition_the_corpus(n in 1usize..60, size in 1usize..20, seed in any::<u64>()) {
        let b = make_batches(&corpus_of(n), size, seed).unwrap();
        prop_assert_eq!(b.len(), n.div_ceil(size));
        prop_assert!(b[..b.len() - 1].iter().all(|x| x.len() == size));
        let mut all: Vec<usize> = b.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
