//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and a
//! summary line. Exits 0 unless `GRIDLM_ACCEPTANCE_STRICT` is set, so the other
//! test targets still run. Pass criterion ids (e.g. `C3 C9`) to run a subset.

mod common;

use std::path::Path;
use std::time::Instant;

use gridlm::backbone::{Backbone, ModelConfig, TokenKind};
use gridlm::checkpoint::Checkpoint;
use gridlm::config::RunConfig;
use gridlm::data::Corpus;
use gridlm::diffusion::{Denoiser, DiffusionHeadConfig};
use gridlm::grid::{Example, TokenPayload};
use gridlm::heads::{HeadConfig, HeadKind};
use gridlm::model::GridModel;
use gridlm::objective::{batch_loss, make_order_plan, training_step, LrSchedule, ObjectiveConfig, ObjectiveTag};
use gridlm::oracle::{eval_suite, total_variation, EvalCounts, Oracle, TrainedModel};
use gridlm::run::{self, AblationRow, Session};
use gridlm::sampler::{choose_position, generate_grid, sample_token, GenerationState, SamplingConfig};
use gridlm::substrate::layers::ParamBuilder;
use gridlm::substrate::{adamw_step, grad_check, GradCheckOptions, OptimizerState, ParamStore, RealArray, Rng, Tape};
use gridlm::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Models trained by one criterion and reused by a later one.
#[derive(Default)]
struct Shared {
    markov: Option<(GridModel, Oracle)>,
}

fn config(lines: &[&str]) -> RunConfig {
    RunConfig::parse(&lines.join("\n")).expect("acceptance config")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over sqrt(n)).
fn std_err(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn c1_gradients(_: &mut Shared) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = ModelConfig::preset("tiny", 3, 3, TokenKind::Discrete { vocab: 4 })?;
    let mut hc = HeadConfig::matching(&cfg, HeadKind::Global);
    hc.depth = 2;
    let model = GridModel::new(&cfg, &hc, None, 1)?;
    let batch = common::random_examples(3, 3, 4, 2, 2);
    let mut rng = Rng::new(3);
    let plans = (0..2).map(|_| make_order_plan(ObjectiveTag::TwoD, 9, 9, 3, &mut rng)).collect::<Result<Vec<_>>>()?;
    let shape = model.clone();
    let mut store = model.store;
    let f = |t: &mut Tape| Ok(batch_loss(&shape, t, &batch, &plans, &mut Rng::new(4))?.0);
    let opts = GradCheckOptions { max_entries_per_tensor: Some(48), ..GradCheckOptions::default() };
    let report = grad_check(&mut store, f, &opts)?;
    let entries: usize = report.tensors.iter().map(|t| t.checked).sum();
    let secs = start.elapsed().as_secs_f64();
    let err = report.max_rel_error();
    outcome(
        err < 1e-3 && secs < 300.0,
        format!("max rel error {err:.2e} over {entries} entries in {} tensors, {secs:.0}s", report.tensors.len()),
    )
}

fn c2_causality(_: &mut Shared) -> Result<Outcome> {
    let cfg = ModelConfig::preset("tiny", 3, 3, TokenKind::Discrete { vocab: 4 })?;
    let mut store = ParamStore::new();
    let bb = Backbone::new(&cfg, &mut store, &Rng::new(5))?;
    let cap = cfg.cells() + 1;
    let forward = |x: &RealArray| -> Result<RealArray> {
        let mut tape = Tape::new(&store);
        let v = tape.constant(x.clone());
        let h = bb.causal_forward(&mut tape, v, None)?;
        Ok(tape.value(h).clone())
    };
    let random = |rng: &mut Rng, len: usize| RealArray::from_vec(vec![len, cfg.hidden], (0..len * cfg.hidden).map(|_| rng.normal()).collect());
    let mut rng = Rng::new(6);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = 2 + rng.below(cap - 1);
        let cut = rng.below(len - 1);
        let x = random(&mut rng, len)?;
        let mut y = x.clone();
        for r in cut + 1..len {
            for v in y.row_mut(r) {
                *v += 3.0 * rng.normal();
            }
        }
        let (a, b) = (forward(&x)?, forward(&y)?);
        if (0..=cut).any(|r| a.row(r).iter().zip(b.row(r)).any(|(p, q)| p.to_bits() != q.to_bits())) {
            violations += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = random(&mut rng, cap)?;
        let full = forward(&x)?;
        let mut cache = bb.new_cache();
        for t in 0..cap {
            let h = bb.causal_forward_step(&store, &mut cache, &RealArray::from_vec(vec![1, cfg.hidden], x.row(t).to_vec())?)?;
            for (a, b) in h.data().iter().zip(full.row(t)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(violations == 0 && worst < 1e-5, format!("{violations} prefix changes in 1000 trials, incremental max diff {worst:.1e}"))
}

fn c3_oracle_match(shared: &mut Shared) -> Result<Outcome> {
    let cfg = config(&[
        "spec.kind = pairwise-markov",
        "spec.height = 3",
        "spec.width = 3",
        "spec.vocab = 4",
        "spec.strength = 1.0",
        "spec.seed = 7",
        "objective.n = 2",
        "data.train_count = 200000",
        "train.steps = 3125",
    ]);
    let start = Instant::now();
    let prepared = run::prepare(&cfg)?;
    let oracle = prepared.oracle.clone().expect("spec oracle");
    let mut session = Session::new(&cfg)?;
    let counts = EvalCounts { queries: 200, heldout: 0, generations: 0, order_pairs: 0 };
    let eval = |model: &GridModel| {
        let tm = TrainedModel { model, objective: ObjectiveTag::TwoD, class: 0, sampling: SamplingConfig::default() };
        eval_suite(&tm, &oracle, &counts, 3)
    };
    let budget = cfg.uint("train.steps");
    let marks: Vec<u64> = (0..=4).map(|q| budget * q / 4).collect();
    let mut curve = Vec::new();
    for &m in &marks {
        while session.step_count() < m {
            session.step(&prepared.train)?;
        }
        let r = eval(&session.model)?;
        curve.push((r.tv_mean, r.tv_p95));
    }
    let secs = start.elapsed().as_secs_f64();
    let (base, (tv, p95)) = (curve[0].0, *curve.last().expect("curve"));
    let monotone = curve.windows(2).all(|w| w[1].0 <= w[0].0);
    let means: Vec<f64> = curve.iter().map(|c| c.0).collect();
    shared.markov = Some((session.model, oracle));
    outcome(
        tv <= 0.08 && p95 <= 0.20 && monotone && tv * 5.0 <= base && secs <= 1800.0,
        format!("tv_mean {tv:.4} tv_p95 {p95:.4}, curve {} at steps {marks:?}, {secs:.0}s", fmt(&means)),
    )
}

const COPY_PAIRS: &[&str] = &[
    "spec.kind = copy-pairs",
    "spec.height = 4",
    "spec.width = 4",
    "spec.vocab = 4",
    "spec.epsilon = 0.1",
    "data.train_count = 20000",
    "data.heldout_count = 300",
];

fn ablate(base: &[&str], cells: &str, seeds: &str) -> Result<Vec<AblationRow>> {
    let cfg = config(base).with_overrides(&[("ablate.cells".into(), cells.into()), ("ablate.seeds".into(), seeds.into())])?;
    let out = tempfile::tempdir()?;
    let (_, rows) = run::cmd_ablate(&cfg, out.path())?;
    for r in &rows {
        println!("    {} seed {} steps {} nll {:.4} tv {:.4} {}", r.cell, r.seed, r.steps, r.nll, r.tv_mean, r.status);
    }
    Ok(rows)
}

fn nlls(rows: &[AblationRow], cell: usize, seeds: usize) -> Vec<f64> {
    rows[cell * seeds..(cell + 1) * seeds].iter().map(|r| r.nll).collect()
}

/// `b - a` per seed must be positive with mean at least 3 standard errors.
fn separated(a: &[f64], b: &[f64]) -> (bool, f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let (m, se) = (mean(&d), std_err(&d));
    (m > 0.0 && m >= 3.0 * se, m, se)
}

fn c4_and_c5() -> Result<Vec<(&'static str, Outcome)>> {
    let start = Instant::now();
    let mut base = COPY_PAIRS.to_vec();
    base.push("train.steps = 400");
    let rows = ablate(
        &base,
        "objective.tag=1d_raster | objective.tag=1d_random | objective.preset=wNn1 | objective.preset=w4n4,head.kind=chunk",
        "0,1,2",
    )?;
    let secs = start.elapsed().as_secs_f64();
    let ok = rows.iter().all(|r| r.status == "ok");
    let (raster, random, two_d, chunked) = (nlls(&rows, 0, 3), nlls(&rows, 1, 3), nlls(&rows, 2, 3), nlls(&rows, 3, 3));
    let (first, d1, s1) = separated(&two_d, &random);
    let (second, d2, s2) = separated(&random, &raster);
    let c4 = Outcome {
        pass: ok && first && second && secs < 3600.0,
        detail: format!(
            "nll 2d {} 1d_random {} 1d_raster {}; random-2d {d1:.4} (se {s1:.4}), raster-random {d2:.4} (se {s2:.4}), {secs:.0}s",
            fmt(&two_d),
            fmt(&random),
            fmt(&raster)
        ),
    };
    let c5 = Outcome {
        pass: ok && mean(&two_d) <= mean(&chunked),
        detail: format!(
            "seed-mean nll wNn1 {:.4} ({}) vs w4n4 {:.4} ({}), budget {} vs {}",
            mean(&two_d),
            fmt(&two_d),
            mean(&chunked),
            fmt(&chunked),
            rows[6].budget,
            rows[9].budget
        ),
    };
    Ok(vec![("C4", c4), ("C5", c5)])
}

fn c6_density(_: &mut Shared) -> Result<Outcome> {
    const THRESHOLD: f64 = 0.95;
    const MAX_STEPS: u64 = 400;
    const EVERY: u64 = 10;
    let mut table = Vec::new();
    for n in [1, 4, 8] {
        let mut per_seed = Vec::new();
        for seed in 0..3u64 {
            let mut lines = COPY_PAIRS.to_vec();
            let extra = [format!("objective.n = {n}"), format!("train.seed = {seed}")];
            lines.extend(extra.iter().map(String::as_str));
            let cfg = config(&lines);
            let prepared = run::prepare(&cfg)?;
            let probe = Corpus { examples: prepared.heldout.examples[..100].to_vec(), ..prepared.heldout.clone() };
            let mut session = Session::new(&cfg)?;
            let mut reached = None;
            while session.step_count() <= MAX_STEPS {
                if session.step_count() % EVERY == 0 && run::model_nll(&session.model, ObjectiveTag::TwoD, &probe, 1)? <= THRESHOLD {
                    reached = Some(session.step_count());
                    break;
                }
                session.step(&prepared.train)?;
            }
            per_seed.push(reached);
        }
        table.push((n, per_seed));
    }
    let steps = |v: &[Option<u64>]| -> Option<f64> {
        v.iter().map(|s| s.map(|x| x as f64)).collect::<Option<Vec<f64>>>().map(|x| mean(&x))
    };
    let means: Vec<Option<f64>> = table.iter().map(|(_, v)| steps(v)).collect();
    let pass = means.iter().all(Option::is_some) && means.windows(2).all(|w| w[1] <= w[0]);
    let detail = table
        .iter()
        .zip(&means)
        .map(|((n, v), m)| {
            let per: Vec<String> = v.iter().map(|s| s.map_or("-".into(), |x| x.to_string())).collect();
            format!("n={n}: {} (mean {})", per.join("/"), m.map_or("never".into(), |x| format!("{x:.1}")))
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("steps to nll <= {THRESHOLD}: {detail}"))
}

fn c7_split(_: &mut Shared) -> Result<Outcome> {
    let base = [
        "spec.kind = pairwise-markov",
        "spec.height = 3",
        "spec.width = 3",
        "spec.vocab = 4",
        "spec.seed = 7",
        "data.train_count = 20000",
        "train.steps = 1000",
    ];
    let rows = ablate(&base, "model.split=3/1 | model.split=2/2", "0,1,2")?;
    let (deep_backbone, balanced) = (nlls(&rows, 0, 3), nlls(&rows, 1, 3));
    outcome(
        rows.iter().all(|r| r.status == "ok") && mean(&balanced) <= mean(&deep_backbone),
        format!(
            "seed-mean nll 2/2 {:.4} ({}) vs 3/1 {:.4} ({})",
            mean(&balanced),
            fmt(&balanced),
            mean(&deep_backbone),
            fmt(&deep_backbone)
        ),
    )
}

struct ShapeRun {
    curve: Vec<(u64, f64)>,
    model_mse: f64,
    floor_mse: f64,
    report_floor: f64,
}

impl ShapeRun {
    /// First evaluated step at which 80% of the final improvement is reached.
    fn steps_to_80(&self) -> u64 {
        let (first, last) = (self.curve[0].1, self.curve.last().expect("curve").1);
        let target = first - 0.8 * (first - last);
        self.curve.iter().find(|(_, l)| *l <= target).map_or(u64::MAX, |(s, _)| *s)
    }
}

fn shape_run(kind: &str, size: usize, clip: f64) -> Result<ShapeRun> {
    let cfg = config(&[
        "data.source = shapes",
        "data.train_count = 2000",
        "data.heldout_count = 100",
        &format!("tokenizer.kind = {kind}"),
        &format!("tokenizer.size = {size}"),
        &format!("diffusion.clip_x0 = {clip}"),
        "train.steps = 600",
    ]);
    let prepared = run::prepare(&cfg)?;
    let mut session = Session::new(&cfg)?;
    let mut curve = Vec::new();
    loop {
        let s = session.step_count();
        if s % 25 == 0 {
            curve.push((s, run::heldout_loss(&session.model, &cfg, &prepared.heldout, 1)?));
        }
        if s == cfg.uint("train.steps") {
            break;
        }
        session.step(&prepared.train)?;
    }
    let probe = Corpus { examples: prepared.heldout.examples[..50].to_vec(), ..prepared.heldout.clone() };
    let tok = prepared.tokenizer.as_ref().expect("shape tokenizer");
    let (model_mse, floor_mse) = run::informed_reconstruction(&session.model, tok, &probe, &prepared.heldout_images[..50], 50, 2)?;
    let report_floor = prepared.tokenizer_report.as_ref().map_or(f64::NAN, |r| r.mse_mean);
    Ok(ShapeRun { curve, model_mse, floor_mse, report_floor })
}

fn c8_discrete_vs_continuous(_: &mut Shared) -> Result<Outcome> {
    let start = Instant::now();
    let discrete = shape_run("discrete", 16, 0.0)?;
    let continuous = shape_run("continuous", 4, 5.0)?;
    let (sd, sc) = (discrete.steps_to_80(), continuous.steps_to_80());
    let ratio = |r: &ShapeRun| r.model_mse / r.floor_mse;
    let (rd, rc) = (ratio(&discrete), ratio(&continuous));
    let curve = |r: &ShapeRun| r.curve.iter().step_by(4).map(|(s, l)| format!("{s}:{l:.3}")).collect::<Vec<_>>().join(" ");
    println!("    discrete loss {}", curve(&discrete));
    println!("    continuous loss {}", curve(&continuous));
    outcome(
        sd < sc && (rd - 1.0).abs() <= 0.2 && (rc - 1.0).abs() <= 0.2,
        format!(
            "80% of improvement at step {sd} (discrete) vs {sc} (continuous); decoded mse/floor {rd:.2} ({:.4}/{:.4}, train floor {:.4}) vs {rc:.2} ({:.4}/{:.4}, train floor {:.4}), {:.0}s",
            discrete.model_mse,
            discrete.floor_mse,
            discrete.report_floor,
            continuous.model_mse,
            continuous.floor_mse,
            continuous.report_floor,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c9_sampler(shared: &mut Shared) -> Result<Outcome> {
    let (model, oracle) = match shared.markov.take() {
        Some(m) => m,
        None => return outcome(false, "needs the C3 model; run C3 first".into()),
    };
    let cfg = SamplingConfig::default();
    let (n, v) = (model.cells(), 4);
    let generations = 10_000;
    let mut bad_reveals = 0;
    let mut freq = vec![vec![0.0; v]; n];
    for seed in 0..generations as u64 {
        let mut state = GenerationState::new(&model, 0, seed)?;
        let mut count = vec![0usize; n];
        while !state.remaining.is_empty() {
            let cell = choose_position(&state.remaining, cfg.policy, &mut state.rng)?;
            let token = sample_token(&mut state, cell, &model, &cfg)?;
            count[cell] += 1;
            if let TokenPayload::Id(id) = token {
                freq[cell][id] += 1.0 / generations as f64;
            }
            state.reveal(&model, cell, token)?;
        }
        if count.iter().any(|&c| c != 1) || state.step != n {
            bad_reveals += 1;
        }
        if seed < 100 {
            let direct = generate_grid(&model, 0, &cfg, seed)?;
            let ids: Vec<usize> = state.revealed.iter().fold(vec![0; n], |mut g, (c, t)| {
                if let TokenPayload::Id(i) = t {
                    g[*c] = *i;
                }
                g
            });
            if direct.ids() != Some(&ids[..]) {
                bad_reveals += 1;
            }
        }
    }
    let exact = oracle.marginals()?;
    let marginal_tv = freq.iter().zip(&exact).map(|(f, e)| total_variation(f, e)).fold(0.0, f64::max);
    let identical = (0..20).all(|s| {
        let a = generate_grid(&model, 0, &cfg, s).map(|g| g.to_text());
        let b = generate_grid(&model, 0, &cfg, s).map(|g| g.to_text());
        matches!((a, b), (Ok(x), Ok(y)) if x.as_bytes() == y.as_bytes())
    });

    let mut memo = common::tiny_model(3, 3, 4, HeadKind::Global, 6);
    let grid = common::random_examples(3, 3, 4, 1, 9).remove(0);
    let mut opt = OptimizerState::new(&memo.store, 1e-2, 0.9, 0.95, 0.0, 1e-8)?;
    let objective = ObjectiveConfig { tag: ObjectiveTag::TwoD, window: 9, density: 3 };
    let schedule = LrSchedule { base: 1e-2, warmup_steps: 0, clip_norm: Some(1.0) };
    let mut rng = Rng::new(17);
    let batch: Vec<Example> = vec![grid.clone(); 8];
    for _ in 0..300 {
        training_step(&mut memo, &mut opt, &objective, &schedule, &batch, &mut rng)?;
    }
    let greedy = SamplingConfig { top_k: Some(1), ..SamplingConfig::default() };
    let memorized = (0..10).all(|s| generate_grid(&memo, 0, &greedy, s).is_ok_and(|g| g == grid.grid));
    outcome(
        bad_reveals == 0 && identical && memorized && marginal_tv <= 0.05,
        format!(
            "{bad_reveals} bad of {generations} generations, byte-identical {identical}, memorized {memorized}, max cell marginal tv {marginal_tv:.4}"
        ),
    )
}

fn c10_diffusion(_: &mut Shared) -> Result<Outcome> {
    let cfg = DiffusionHeadConfig { block_count: 2, width: 64, step_count: 50, samples_per_token: 8, clip_x0: None };

    let mut wide_store = ParamStore::new();
    let wide = Denoiser::new(&cfg, 4, 4, &mut ParamBuilder::new(&mut wide_store, Rng::new(2)))?;
    let zero_loss = {
        let mut tape = Tape::new(&wide_store);
        let z = tape.constant(RealArray::filled(&[2500, 4], 0.3));
        let l = wide.loss_rows(&mut tape, z, &RealArray::filled(&[2500, 4], 0.5), 4, &mut Rng::new(3))?;
        tape.value(l).sum() / tape.value(l).len() as f64
    };

    let mut store = ParamStore::new();
    let d = Denoiser::new(&cfg, 1, 4, &mut ParamBuilder::new(&mut store, Rng::new(1)))?;
    let mut opt = OptimizerState::new(&store, 3e-3, 0.9, 0.99, 0.0, 1e-8)?;
    let mut rng = Rng::new(4);
    for _ in 0..1500 {
        let x0 = RealArray::from_vec(vec![64, 1], (0..64).map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 }).collect())?;
        let grads = {
            let mut tape = Tape::new(&store);
            let z = tape.constant(RealArray::filled(&[64, 4], 0.5));
            let l = d.loss_rows(&mut tape, z, &x0, 8, &mut rng)?;
            let l = tape.mean(l)?;
            tape.backward(l)?
        };
        adamw_step(&mut store, &mut opt, &grads, 3e-3)?;
    }
    let draws = 2000;
    let z = RealArray::filled(&[draws, 4], 0.5);
    let mut rngs: Vec<Rng> = (0..draws as u64).map(|i| Rng::new(5).split(i)).collect();
    let x = d.sample(&store, &z, &mut rngs, 50)?;
    let near = |m: f64| x.data().iter().filter(|v| (*v - m).abs() < 0.5).count() as f64 / draws as f64;
    let (lo, hi) = (near(-1.0), near(1.0));
    let in_range = |p: f64| (0.3..=0.7).contains(&p);
    outcome(
        in_range(lo) && in_range(hi) && (zero_loss - 4.0).abs() <= 0.05 * 4.0,
        format!("mode masses {lo:.3} / {hi:.3} of {draws} samples, zero-output loss {zero_loss:.4} (m = 4) over 10^4 draws"),
    )
}

fn hash_everywhere(dir: &Path, hash: &str) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    for entry in std::fs::read_dir(dir)?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = std::fs::read(entry.path())?;
        if !name.starts_with(hash) && !String::from_utf8_lossy(&bytes).contains(hash) {
            missing.push(name);
        }
    }
    Ok(missing)
}

fn c11_infrastructure(_: &mut Shared) -> Result<Outcome> {
    let small = [
        "model.depth = 2",
        "model.hidden = 16",
        "model.head_count = 4",
        "spec.height = 3",
        "spec.width = 3",
        "data.train_count = 500",
        "data.heldout_count = 20",
        "train.batch_size = 16",
        "train.steps = 40",
        "train.checkpoint_every = 10",
        "eval.queries = 20",
        "eval.heldout = 20",
        "eval.generations = 10",
        "eval.order_pairs = 5",
        "sample.count = 2",
        "viz.count = 1",
        "ablate.cells = objective.n=1 | objective.n=2",
    ];
    let cfg = config(&small);
    let hash = cfg.training_hash();
    let whole = tempfile::tempdir()?;
    let a = run::cmd_train(&cfg, whole.path(), false, None)?;
    let split = tempfile::tempdir()?;
    run::cmd_train(&cfg, split.path(), false, Some(20))?;
    let b = run::cmd_train(&cfg, split.path(), false, None)?;
    let resumed = b.resumed_from == Some(20) && std::fs::read(a.dir.join("final.ckpt"))? == std::fs::read(b.dir.join("final.ckpt"))?;

    let mut round_trip = true;
    for entry in std::fs::read_dir(&a.dir)?.flatten() {
        if entry.path().extension().is_some_and(|e| e == "ckpt") {
            let bytes = std::fs::read(entry.path())?;
            round_trip &= Checkpoint::from_bytes(&bytes)?.to_bytes() == bytes;
        }
    }

    let out = whole.path();
    let s = run::cmd_sample(&cfg, out, 1, false)?;
    let (e, _) = run::cmd_eval(&cfg, out, 1, false)?;
    let (v, _) = run::cmd_viz(&cfg, out, false)?;
    let (ab, _) = run::cmd_ablate(&cfg, out)?;
    let mut missing = Vec::new();
    for dir in [&a.dir, &s, &e, &v] {
        missing.extend(hash_everywhere(dir, &hash)?);
    }
    missing.extend(hash_everywhere(&ab, &cfg.output_hash("ablate"))?);

    let shapes = config(&[
        "data.source = shapes",
        "data.train_count = 30",
        "data.heldout_count = 5",
        "tokenizer.size = 4",
        "model.depth = 1",
        "model.hidden = 16",
        "model.head_count = 4",
        "train.steps = 2",
        "sample.count = 1",
    ]);
    let shape_out = tempfile::tempdir()?;
    let t = run::cmd_train(&shapes, shape_out.path(), false, None)?;
    let ss = run::cmd_sample(&shapes, shape_out.path(), 0, false)?;
    missing.extend(hash_everywhere(&t.dir, &shapes.training_hash())?);
    missing.extend(hash_everywhere(&ss, &shapes.training_hash())?);
    outcome(
        resumed && round_trip && missing.is_empty(),
        format!("resume bitwise equal {resumed}, checkpoint bytes round trip {round_trip}, artifacts without hash {missing:?}"),
    )
}

type Single = fn(&mut Shared) -> Result<Outcome>;

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f == id);
    let names = [
        ("C1", "gradient correctness"),
        ("C2", "causality"),
        ("C3", "oracle conditional match"),
        ("C4", "ordering 2d < 1d_random < 1d_raster"),
        ("C5", "larger window at matched budget"),
        ("C6", "supervision density speeds convergence"),
        ("C7", "backbone/head split"),
        ("C8", "discrete vs continuous"),
        ("C9", "sampler validity"),
        ("C10", "diffusion head sanity"),
        ("C11", "infrastructure"),
    ];
    let singles: [(&str, Single); 9] = [
        ("C1", c1_gradients),
        ("C2", c2_causality),
        ("C3", c3_oracle_match),
        ("C6", c6_density),
        ("C7", c7_split),
        ("C8", c8_discrete_vs_continuous),
        ("C9", c9_sampler),
        ("C10", c10_diffusion),
        ("C11", c11_infrastructure),
    ];
    let title = |id: &str| names.iter().find(|(i, _)| *i == id).map_or("", |(_, t)| *t);
    let mut shared = Shared::default();
    let mut results: Vec<(String, bool)> = Vec::new();
    let mut report = |id: &str, r: Result<Outcome>, secs: f64| {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{id} {}: {} ({detail}) [{secs:.0}s]", title(id), if pass { "PASS" } else { "FAIL" });
        results.push((id.to_string(), pass));
    };
    let order = ["C1", "C2", "C3", "C4", "C6", "C7", "C8", "C9", "C10", "C11"];
    for id in order {
        let start = Instant::now();
        if id == "C4" {
            if !(wanted("C4") || wanted("C5")) {
                continue;
            }
            match c4_and_c5() {
                Ok(pair) => {
                    for (pid, o) in pair {
                        if wanted(pid) {
                            report(pid, Ok(o), start.elapsed().as_secs_f64());
                        }
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for pid in ["C4", "C5"] {
                        if wanted(pid) {
                            report(pid, outcome(false, format!("error: {msg}")), start.elapsed().as_secs_f64());
                        }
                    }
                }
            }
            continue;
        }
        if !wanted(id) && !(id == "C3" && wanted("C9")) {
            continue;
        }
        let f = singles.iter().find(|(i, _)| *i == id).expect("criterion").1;
        let r = f(&mut shared);
        if !wanted(id) {
            continue;
        }
        report(id, r, start.elapsed().as_secs_f64());
    }
    let failed: Vec<&str> = results.iter().filter(|(_, p)| !p).map(|(i, _)| i.as_str()).collect();
    println!("acceptance: {} passed, {} failed {failed:?}", results.len() - failed.len(), failed.len());
    if !failed.is_empty() && std::env::var_os("GRIDLM_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
