//! End-to-end pipelines behind the command-line tool: data preparation,
//! checkpointed training with bit-exact resume, ablation, sampling, evaluation,
//! and visualization exports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::{self, BatchStream, Corpus, Split};
use crate::error::{GridError, Result};
use crate::grid::{Example, TokenGrid};
use crate::heads::OutputLaw;
use crate::image::Image;
use crate::model::GridModel;
use crate::objective::{batch_loss, make_order_plan, training_step, ObjectiveTag, StepMetrics};
use crate::oracle::{eval_suite, heldout_nll, EvalCounts, EvalReport, Oracle, TrainedModel};
use crate::grid::TokenPayload;
use crate::sampler::{draw_payload, generate_grid, generate_grid_1d, SamplingConfig};
use crate::substrate::{OptimizerState, Rng, Tape};
use crate::tokenizer::{self, PatchShape, ReconstructionReport, Tokenizer};
use crate::viz;

/// Data, tokenizer, and oracle for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Corpus,
    pub heldout: Corpus,
    pub tokenizer: Option<Tokenizer>,
    pub oracle: Option<Oracle>,
    pub tokenizer_report: Option<ReconstructionReport>,
    /// Held-out images (tokenizer path only), aligned with `heldout`.
    pub heldout_images: Vec<Image>,
}

/// Removes training examples whose content also occurs in the held-out split.
fn drop_leaks(train: Vec<Example>, heldout: &[Example]) -> Vec<Example> {
    let held: HashSet<String> = heldout.iter().map(data::example_hash).collect();
    train.into_iter().filter(|e| !held.contains(&data::example_hash(e))).collect()
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let seed = config.uint("data.seed");
    let (train_n, held_n) = (config.usize("data.train_count"), config.usize("data.heldout_count"));
    if config.text("data.source") == "spec" {
        let oracle = Oracle::new(&config.joint_spec()?)?;
        let provenance = format!("spec:{}", data::short_hash(config.spec_text().as_bytes()));
        let train = data::sample_corpus(&oracle, train_n, seed, &provenance)?;
        let mut heldout = data::sample_corpus(&oracle, held_n, Rng::new(seed).split_named("heldout", 0).next_u64(), &provenance)?;
        heldout.split = Split::Heldout;
        let train = Corpus { examples: drop_leaks(train.examples, &heldout.examples), ..train };
        data::check_disjoint(&train, &heldout)?;
        return Ok(Prepared { train, heldout, tokenizer: None, oracle: Some(oracle), tokenizer_report: None, heldout_images: Vec::new() });
    }
    let (images, provenance) = if config.text("shapes.dir").is_empty() {
        let spec = config.shape_spec()?;
        let text: String = config.canonical_text().lines().filter(|l| l.starts_with("shapes.")).collect();
        (data::shape_images(&spec, train_n + held_n, seed), format!("shapes:{}", data::short_hash(text.as_bytes())))
    } else {
        let dir = Path::new(config.text("shapes.dir"));
        (data::load_image_dir(dir)?, format!("images:{}", data::image_dir_hash(dir)?))
    };
    if images.len() <= held_n {
        return Err(GridError::Config(format!("data.heldout_count {held_n} leaves no training images")));
    }
    let split = images.len() - held_n;
    let shape = PatchShape {
        patch_h: config.usize("tokenizer.patch_h"),
        patch_w: config.usize("tokenizer.patch_w"),
        channels: images[0].0.channels,
    };
    let train_images: Vec<Image> = images[..split].iter().map(|(i, _)| i.clone()).collect();
    let patches = tokenizer::corpus_patches(&train_images, shape)?;
    let size = config.usize("tokenizer.size");
    let (tok, warnings) = if config.text("tokenizer.kind") == "discrete" {
        let fit = tokenizer::fit_discrete_codebook(&patches, size, shape, config.uint("tokenizer.seed"), config.usize("tokenizer.iters"))?;
        if fit.codebook.size() != size {
            return Err(GridError::Config(format!(
                "tokenizer.size: corpus supports only {} codebook entries",
                fit.codebook.size()
            )));
        }
        (Tokenizer::Discrete(fit.codebook), fit.warnings)
    } else {
        (Tokenizer::Continuous(tokenizer::fit_linear_autoencoder(&patches, size, shape)?), Vec::new())
    };
    let report = tokenizer::reconstruction_report(&train_images, &tok, &warnings)?;
    let encode = |items: &[(Image, usize)]| {
        items
            .iter()
            .map(|(img, class)| Ok(Example { grid: tok.encode(img)?, class: *class }))
            .collect::<Result<Vec<_>>>()
    };
    let heldout = Corpus { examples: encode(&images[split..])?, split: Split::Heldout, provenance: provenance.clone() };
    let train = Corpus { examples: drop_leaks(encode(&images[..split])?, &heldout.examples), split: Split::Train, provenance };
    data::check_disjoint(&train, &heldout)?;
    let heldout_images = images[split..].iter().map(|(i, _)| i.clone()).collect();
    Ok(Prepared { train, heldout, tokenizer: Some(tok), oracle: None, tokenizer_report: Some(report), heldout_images })
}

/// Model, optimizer, and stream positions of a training run.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: RunConfig,
    pub model: GridModel,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub stream: BatchStream,
}

impl Session {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = GridModel::new(
            &config.model_config()?,
            &config.head_config()?,
            Some(&config.diffusion_config()),
            config.uint("model.seed") ^ config.uint("train.seed").wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )?;
        let optimizer = OptimizerState::new(
            &model.store,
            config.real("optim.lr"),
            config.real("optim.beta1"),
            config.real("optim.beta2"),
            config.real("optim.weight_decay"),
            config.real("optim.eps"),
        )?;
        let seed = config.uint("train.seed");
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            rng: Rng::new(seed).split_named("train", 0),
            stream: BatchStream::new(config.usize("train.batch_size"), Rng::new(seed).split_named("batches", 0).next_u64()),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count
    }

    pub fn step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let batch = self.stream.next_batch(corpus)?;
        let objective = self.config.objective()?;
        let schedule = self.config.schedule();
        training_step(&mut self.model, &mut self.optimizer, &objective, &schedule, &batch, &mut self.rng)
    }

    pub fn checkpoint(&self, tokenizer: Option<&Tokenizer>) -> Checkpoint {
        let mut tensors = checkpoint::param_tensors(&self.model.store);
        tensors.extend(checkpoint::optimizer_tensors(&self.model.store, &self.optimizer));
        tensors.push((
            "train.stream".into(),
            crate::substrate::RealArray::from_vec(
                vec![3],
                vec![self.stream.epoch as f64, self.stream.cursor as f64, self.stream.seed as f64],
            )
            .expect("stream"),
        ));
        if let Some(t) = tokenizer {
            tensors.extend(t.to_tensors());
        }
        Checkpoint {
            config_hash: self.config.training_hash(),
            config_text: self.config.canonical_text(),
            step: self.optimizer.step_count,
            rng: self.rng.state(),
            tensors,
        }
    }

    /// Rebuilds a session from a checkpoint written under `config`.
    pub fn resume(config: &RunConfig, ckpt: &Checkpoint, force: bool) -> Result<Self> {
        ckpt.check_hash(&config.training_hash(), force)?;
        let mut s = Self::new(config)?;
        checkpoint::restore_params(&mut s.model.store, &ckpt.tensors)?;
        s.optimizer = checkpoint::restore_optimizer(&s.model.store, &ckpt.tensors)?;
        s.rng = Rng::from_state(ckpt.rng);
        let st = ckpt.tensor("train.stream").ok_or_else(|| GridError::Format("checkpoint lacks train.stream".into()))?;
        s.stream.epoch = st.data()[0] as u64;
        s.stream.cursor = st.data()[1] as usize;
        Ok(s)
    }
}

/// Model (and tokenizer) restored from a checkpoint for inference.
pub fn load_model(config: &RunConfig, ckpt: &Checkpoint, force: bool) -> Result<(GridModel, Option<Tokenizer>)> {
    ckpt.check_hash(&config.training_hash(), force)?;
    // the embedded config wins when forcing a mismatched checkpoint
    let cfg = if ckpt.config_hash == config.training_hash() { config.clone() } else { RunConfig::parse(&ckpt.config_text)? };
    let s = Session::new(&cfg)?;
    let mut model = s.model;
    checkpoint::restore_params(&mut model.store, &ckpt.tensors)?;
    Ok((model, Tokenizer::from_tensors(&ckpt.tensors)?))
}

/// Mean objective loss on held-out examples with fixed plans.
pub fn heldout_loss(model: &GridModel, config: &RunConfig, heldout: &Corpus, seed: u64) -> Result<f64> {
    let objective = config.objective()?;
    let mut rng = Rng::new(seed).split_named("heldout-loss", 0);
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in heldout.examples.chunks(64) {
        let plans = chunk
            .iter()
            .map(|_| make_order_plan(objective.tag, model.cells(), objective.window, objective.density.max(1), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new(&model.store);
        let (_, b) = batch_loss(model, &mut tape, chunk, &plans, &mut rng)?;
        total += b.total * b.target_count() as f64;
        count += b.target_count() as f64;
    }
    Ok(total / count)
}

/// Held-out per-cell NLL of a categorical model along its objective's orders.
pub fn model_nll(model: &GridModel, tag: ObjectiveTag, heldout: &Corpus, seed: u64) -> Result<f64> {
    let tm = TrainedModel { model, objective: tag, class: 0, sampling: Default::default() };
    let grids: Vec<Vec<usize>> = heldout
        .examples
        .iter()
        .map(|e| e.grid.ids().map(|i| i.to_vec()).ok_or_else(|| GridError::Config("NLL needs discrete grids".into())))
        .collect::<Result<_>>()?;
    heldout_nll(&tm, &grids, seed)
}

/// Decoded-prediction error against the tokenizer floor: every cell of each
/// held-out grid is predicted from all other cells (greedy for categorical,
/// one diffusion draw for continuous), the grid is decoded, and the per-pixel
/// MSE to the source image is compared with the plain reconstruction MSE.
/// Returns `(model_mse, floor_mse)`.
pub fn informed_reconstruction(
    model: &GridModel,
    tok: &Tokenizer,
    heldout: &Corpus,
    images: &[Image],
    diffusion_steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let greedy = SamplingConfig { temperature: 1.0, top_k: Some(1), diffusion_steps, ..SamplingConfig::default() };
    let mut rng = Rng::new(seed).split_named("informed", 0);
    let (mut model_mse, mut floor_mse) = (0.0, 0.0);
    for (ex, img) in heldout.examples.iter().zip(images) {
        let n = ex.grid.cells();
        let mut predicted = Vec::with_capacity(n);
        for cell in 0..n {
            let revealed: Vec<(usize, TokenPayload)> = (0..n).filter(|&c| c != cell).map(|c| (c, ex.grid.token(c))).collect();
            let masked = model.default_mask(&revealed, cell)?;
            let payload = model.predict(ex.class, &revealed, &masked)?;
            let slot = masked.iter().position(|&c| c == cell).expect("cell is masked");
            predicted.push(draw_payload(model, payload.row(slot), &greedy, &mut rng)?);
        }
        let grid = match model.law() {
            OutputLaw::Categorical => TokenGrid::from_ids(
                ex.grid.height,
                ex.grid.width,
                predicted.iter().map(|t| if let TokenPayload::Id(i) = t { *i } else { 0 }).collect(),
            )?,
            OutputLaw::Diffusion => TokenGrid::from_latents(
                ex.grid.height,
                ex.grid.width,
                ex.grid.latent(0).map_or(0, <[f64]>::len),
                predicted.iter().flat_map(|t| if let TokenPayload::Latent(v) = t { v.clone() } else { Vec::new() }).collect(),
            )?,
        };
        model_mse += tokenizer::image_mse(&tok.decode(&grid)?, img);
        floor_mse += tokenizer::image_mse(&tok.decode(&ex.grid)?, img);
    }
    let count = heldout.examples.len().max(1) as f64;
    Ok((model_mse / count, floor_mse / count))
}

fn write_log_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct LogHeader<'a> {
    config_hash: &'a str,
    provenance: &'a str,
    objective: &'static str,
    parameters: usize,
}

/// Training summary returned to callers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub resumed_from: Option<u64>,
}

fn output_dir(config: &RunConfig, out: &Path, command: &str) -> PathBuf {
    out.join(config.output_hash(command)).join(command)
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Keeps only log lines at or before `step` (plus the header).
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(()) };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_none_or(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept)?;
    Ok(())
}

/// Trains to `train.steps`, checkpointing every `train.checkpoint_every` steps and
/// resuming from the newest periodic checkpoint in the output directory.
/// `stop_after` interrupts the run early (for resume testing).
pub fn cmd_train(config: &RunConfig, out: &Path, force: bool, stop_after: Option<u64>) -> Result<TrainOutcome> {
    let dir = output_dir(config, out, "train");
    std::fs::create_dir_all(&dir)?;
    let prepared = prepare(config)?;
    let log = dir.join("metrics.jsonl");
    let (mut session, resumed_from) = match latest_checkpoint(&dir) {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            let s = Session::resume(config, &ckpt, force)?;
            truncate_log(&log, ckpt.step)?;
            log::info!("resuming from {} at step {}", p.display(), ckpt.step);
            (s, Some(ckpt.step))
        }
        None => {
            let _ = std::fs::remove_file(&log);
            let s = Session::new(config)?;
            let header = LogHeader {
                config_hash: &config.training_hash(),
                provenance: &prepared.train.provenance,
                objective: config.objective()?.tag.name(),
                parameters: s.model.store.scalar_count(),
            };
            write_log_line(&log, &serde_json::to_string(&header).expect("header"))?;
            if let Some(r) = &prepared.tokenizer_report {
                let mut v = serde_json::to_value(r).expect("report");
                v["config_hash"] = serde_json::Value::String(config.training_hash());
                std::fs::write(dir.join("tokenizer_report.json"), serde_json::to_string_pretty(&v).expect("report"))?;
            }
            (s, None)
        }
    };
    let budget = config.uint("train.steps");
    let every = config.uint("train.checkpoint_every");
    let mut final_loss = None;
    while session.step_count() < budget {
        if stop_after.is_some_and(|s| session.step_count() >= s) {
            break;
        }
        let m = match session.step(&prepared.train) {
            Ok(m) => m,
            Err(e @ GridError::Numeric { .. }) => {
                session.checkpoint(prepared.tokenizer.as_ref()).save(&dir.join("last_good.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        final_loss = Some(m.loss);
        write_log_line(&log, &m.to_json_line())?;
        if every > 0 && m.step % every == 0 {
            session.checkpoint(prepared.tokenizer.as_ref()).save(&dir.join(format!("step_{:08}.ckpt", m.step)))?;
        }
    }
    if session.step_count() >= budget {
        session.checkpoint(prepared.tokenizer.as_ref()).save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { dir, steps: session.step_count(), final_loss, resumed_from })
}

/// One evaluated ablation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub objective: String,
    pub w: usize,
    pub n: usize,
    pub budget: usize,
    pub split: String,
    pub steps: u64,
    pub nll: f64,
    pub tv_mean: f64,
    pub status: String,
}

/// Trains one configuration in memory and returns held-out NLL and conditional TV.
pub fn train_and_score(config: &RunConfig, eval_seed: u64) -> Result<(u64, f64, f64)> {
    let prepared = prepare(config)?;
    let mut session = Session::new(config)?;
    for _ in 0..config.uint("train.steps") {
        session.step(&prepared.train)?;
    }
    let tag = config.objective()?.tag;
    if session.model.law() != OutputLaw::Categorical {
        return Ok((session.step_count(), heldout_loss(&session.model, config, &prepared.heldout, eval_seed)?, f64::NAN));
    }
    let nll = model_nll(&session.model, tag, &prepared.heldout, eval_seed)?;
    let tv = match &prepared.oracle {
        Some(o) => {
            let counts = EvalCounts {
                queries: config.usize("eval.queries"),
                heldout: 0,
                generations: 0,
                order_pairs: 0,
            };
            let tm = TrainedModel { model: &session.model, objective: tag, class: 0, sampling: config.sampling() };
            let mut rep = eval_suite(&tm, o, &EvalCounts { heldout: 1, ..counts }, eval_seed)?;
            rep.nll = nll;
            rep.tv_mean
        }
        None => f64::NAN,
    };
    Ok((session.step_count(), nll, tv))
}

fn worker_count() -> usize {
    std::env::var("GRIDLM_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

pub const ABLATION_HEADER: &str = "cell,seed,objective,w,n,budget,split,steps,nll,tv_mean,status";

/// Runs every `(cell, seed)` combination and writes `ablation.csv`; failing cells
/// are recorded and the harness continues.
pub fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<(PathBuf, Vec<AblationRow>)> {
    let dir = output_dir(config, out, "ablate");
    std::fs::create_dir_all(&dir)?;
    let cells = config.ablation_cells()?;
    let seeds = config.ablation_seeds()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let run = |&(ci, seed): &(usize, u64)| -> AblationRow {
        let cell = &cells[ci];
        let label = cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        let mut overrides = cell.clone();
        overrides.push(("train.seed".into(), seed.to_string()));
        let mut row = AblationRow {
            cell: label,
            seed,
            objective: String::new(),
            w: 0,
            n: 0,
            budget: 0,
            split: String::new(),
            steps: 0,
            nll: f64::NAN,
            tv_mean: f64::NAN,
            status: "ok".into(),
        };
        let result = config.with_overrides(&overrides).and_then(|c| {
            let o = c.objective()?;
            row.objective = o.tag.name().into();
            row.w = o.window;
            row.n = o.density;
            row.budget = o.window * o.density;
            row.split = format!("{}/{}", c.model_config()?.depth, c.head_config()?.depth);
            train_and_score(&c, 0)
        });
        match result {
            Ok((steps, nll, tv)) => {
                row.steps = steps;
                row.nll = nll;
                row.tv_mean = tv;
            }
            Err(e) => row.status = format!("error: {e}").replace(',', ";"),
        }
        row
    };
    let workers = worker_count().min(jobs.len()).max(1);
    let mut rows: Vec<Option<AblationRow>> = vec![None; jobs.len()];
    if workers == 1 {
        for (i, j) in jobs.iter().enumerate() {
            rows[i] = Some(run(j));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut rows);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run(&jobs[i]);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
    }
    let rows: Vec<AblationRow> = rows.into_iter().map(|r| r.expect("every job ran")).collect();
    let mut csv = format!("# config_hash {}\n{ABLATION_HEADER}\n", config.output_hash("ablate"));
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
            r.cell, r.seed, r.objective, r.w, r.n, r.budget, r.split, r.steps, r.nll, r.tv_mean, r.status
        );
    }
    std::fs::write(dir.join("ablation.csv"), csv)?;
    Ok((dir, rows))
}

fn checkpoint_path(config: &RunConfig, out: &Path, key: &str) -> PathBuf {
    let given = config.text(key);
    if given.is_empty() {
        output_dir(config, out, "train").join("final.ckpt")
    } else {
        PathBuf::from(given)
    }
}

/// Grayscale rendering of token ids for grids without an image tokenizer.
fn ids_image(grid: &TokenGrid, vocab: usize) -> Result<Image> {
    let ids = grid.ids().ok_or_else(|| GridError::Config("expected a discrete grid".into()))?;
    let scale = (vocab.max(2) - 1) as f64;
    Image::new(grid.width, grid.height, 1, ids.iter().map(|&i| i as f64 / scale).collect())
}

/// Generates `sample.count` grids; writes dumps, decoded images, and a manifest.
pub fn cmd_sample(config: &RunConfig, out: &Path, seed: u64, force: bool) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(&checkpoint_path(config, out, "sample.checkpoint"))?;
    let (model, tok) = load_model(config, &ckpt, force)?;
    if config.text("data.source") == "shapes" && tok.is_none() {
        return Err(GridError::Config("checkpoint carries no tokenizer to decode samples".into()));
    }
    let class = config.usize("sample.class");
    if class >= model.config.start_rows() {
        return Err(GridError::Config(format!(
            "sample.class {class} outside class_count {}",
            model.config.class_count
        )));
    }
    let dir = output_dir(config, out, "sample");
    std::fs::create_dir_all(&dir)?;
    let tag = config.objective()?.tag;
    let sampling = config.sampling();
    let mut manifest = format!("# config_hash {}\n", ckpt.config_hash);
    for i in 0..config.usize("sample.count") {
        let s = seed.wrapping_add(i as u64);
        let grid = match tag {
            ObjectiveTag::TwoD => generate_grid(&model, class, &sampling, s)?,
            t => generate_grid_1d(&model, t, class, &sampling, s)?,
        };
        let stem = format!("sample_{i:05}");
        std::fs::write(dir.join(format!("{stem}.txt")), format!("# config_hash {}\n{}", ckpt.config_hash, grid.to_text()))?;
        let img = match &tok {
            Some(t) => t.decode(&grid)?,
            None => ids_image(&grid, model.config.vocab().unwrap_or(2))?,
        };
        let ext = if img.channels == 1 { "pgm" } else { "ppm" };
        img.save_with_comment(&dir.join(format!("{stem}.{ext}")), &format!("config_hash {}", ckpt.config_hash))?;
        let _ = writeln!(manifest, "{stem}.{ext} seed {s} class {class}");
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct EvalFile<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Evaluation report against the configured spec oracle.
pub fn cmd_eval(config: &RunConfig, out: &Path, seed: u64, force: bool) -> Result<(PathBuf, EvalReport)> {
    let ckpt = Checkpoint::load(&checkpoint_path(config, out, "eval.checkpoint"))?;
    let (model, _) = load_model(config, &ckpt, force)?;
    if config.text("data.source") != "spec" {
        return Err(GridError::Config("data.source: eval needs a spec oracle".into()));
    }
    let oracle = Oracle::new(&config.joint_spec()?)?;
    let counts = EvalCounts {
        queries: config.usize("eval.queries"),
        heldout: config.usize("eval.heldout"),
        generations: config.usize("eval.generations"),
        order_pairs: config.usize("eval.order_pairs"),
    };
    let tm = TrainedModel { model: &model, objective: config.objective()?.tag, class: 0, sampling: config.sampling() };
    let report = eval_suite(&tm, &oracle, &counts, seed)?;
    let dir = output_dir(config, out, "eval");
    std::fs::create_dir_all(&dir)?;
    let line = serde_json::to_string(&EvalFile { config_hash: &ckpt.config_hash, report: &report }).expect("report");
    std::fs::write(dir.join("report.jsonl"), format!("{line}\n"))?;
    Ok((dir, report))
}

/// Similarity and attention maps for the first `viz.count` held-out examples.
pub fn cmd_viz(config: &RunConfig, out: &Path, force: bool) -> Result<(PathBuf, Vec<PathBuf>)> {
    let ckpt = Checkpoint::load(&checkpoint_path(config, out, "viz.checkpoint"))?;
    let (model, _) = load_model(config, &ckpt, force)?;
    let prepared = prepare(config)?;
    let n = model.cells();
    let mut refs = config.reference_cells()?;
    if refs.is_empty() {
        refs = viz::scale_reference_cells(&[87, 138, 203], 256, n);
    }
    if let Some(c) = refs.iter().find(|&&c| c >= n) {
        return Err(GridError::Config(format!("viz.cells: cell {c} outside {n} cells")));
    }
    let dir = output_dir(config, out, "viz");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (i, ex) in prepared.heldout.examples.iter().take(config.usize("viz.count")).enumerate() {
        let (hidden, attention) = viz::model_maps(&model, ex)?;
        let prefix = format!("{}_{i:03}", ckpt.config_hash);
        written.extend(viz::similarity_and_attention_export(
            &dir,
            &prefix,
            model.config.height,
            model.config.width,
            &hidden,
            &attention,
            &refs,
        )?);
    }
    Ok((dir, written))
}
