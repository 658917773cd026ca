//! Flat `section.key = value` run configuration with defaults, validation,
//! presets, and a stable hash of the training-relevant keys.

use std::collections::BTreeMap;

use crate::backbone::{ModelConfig, TokenKind};
use crate::data::{short_hash, ShapeImageSpec, ShapeKind};
use crate::diffusion::DiffusionHeadConfig;
use crate::error::{GridError, Result};
use crate::heads::{HeadConfig, HeadKind, OutputLaw};
use crate::objective::{ObjectiveConfig, ObjectiveTag, LrSchedule};
use crate::oracle::JointSpec;
use crate::sampler::{PositionPolicy, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Real,
    Text,
}

/// Every accepted key with its default and value type.
const KEYS: &[(&str, &str, Kind)] = &[
    ("model.preset", "tiny", Kind::Text),
    ("model.depth", "", Kind::Uint),
    ("model.hidden", "", Kind::Uint),
    ("model.ffn_dim", "", Kind::Uint),
    ("model.head_count", "", Kind::Uint),
    ("model.split", "", Kind::Text),
    ("model.class_count", "0", Kind::Uint),
    ("model.seed", "0", Kind::Uint),
    ("head.kind", "global", Kind::Text),
    ("head.depth", "", Kind::Uint),
    ("diffusion.blocks", "3", Kind::Uint),
    ("diffusion.width", "256", Kind::Uint),
    ("diffusion.steps", "100", Kind::Uint),
    ("diffusion.samples_per_token", "4", Kind::Uint),
    ("diffusion.clip_x0", "0", Kind::Real),
    ("objective.preset", "", Kind::Text),
    ("objective.tag", "2d", Kind::Text),
    ("objective.w", "N", Kind::Text),
    ("objective.n", "1", Kind::Uint),
    ("data.source", "spec", Kind::Text),
    ("data.train_count", "10000", Kind::Uint),
    ("data.heldout_count", "200", Kind::Uint),
    ("data.seed", "0", Kind::Uint),
    ("spec.kind", "pairwise-markov", Kind::Text),
    ("spec.height", "3", Kind::Uint),
    ("spec.width", "3", Kind::Uint),
    ("spec.vocab", "4", Kind::Uint),
    ("spec.strength", "1.0", Kind::Real),
    ("spec.epsilon", "0.1", Kind::Real),
    ("spec.seed", "0", Kind::Uint),
    ("shapes.width", "16", Kind::Uint),
    ("shapes.height", "16", Kind::Uint),
    ("shapes.kinds", "rectangle,disk,stripes", Kind::Text),
    ("shapes.noise", "0.02", Kind::Real),
    ("shapes.dir", "", Kind::Text),
    ("tokenizer.kind", "discrete", Kind::Text),
    ("tokenizer.patch_h", "4", Kind::Uint),
    ("tokenizer.patch_w", "4", Kind::Uint),
    ("tokenizer.size", "16", Kind::Uint),
    ("tokenizer.iters", "50", Kind::Uint),
    ("tokenizer.seed", "0", Kind::Uint),
    ("optim.lr", "0.001", Kind::Real),
    ("optim.beta1", "0.9", Kind::Real),
    ("optim.beta2", "0.95", Kind::Real),
    ("optim.weight_decay", "0.0", Kind::Real),
    ("optim.eps", "1e-8", Kind::Real),
    ("optim.warmup", "100", Kind::Uint),
    ("optim.clip", "1.0", Kind::Real),
    ("train.steps", "1000", Kind::Uint),
    ("train.batch_size", "64", Kind::Uint),
    ("train.seed", "0", Kind::Uint),
    ("train.checkpoint_every", "0", Kind::Uint),
    ("sample.count", "1", Kind::Uint),
    ("sample.class", "0", Kind::Uint),
    ("sample.temperature", "1.0", Kind::Real),
    ("sample.top_k", "0", Kind::Uint),
    ("sample.policy", "uniform", Kind::Text),
    ("sample.diffusion_steps", "100", Kind::Uint),
    ("sample.checkpoint", "", Kind::Text),
    ("eval.queries", "200", Kind::Uint),
    ("eval.heldout", "200", Kind::Uint),
    ("eval.generations", "100", Kind::Uint),
    ("eval.order_pairs", "100", Kind::Uint),
    ("eval.checkpoint", "", Kind::Text),
    ("viz.cells", "", Kind::Text),
    ("viz.checkpoint", "", Kind::Text),
    ("viz.count", "4", Kind::Uint),
    ("ablate.cells", "", Kind::Text),
    ("ablate.seeds", "0", Kind::Text),
    ("run.out", "out", Kind::Text),
];

/// Key prefixes that do not change what training computes.
const NON_TRAINING: &[&str] = &["sample.", "eval.", "viz.", "ablate.", "run."];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeMap<String, String>,
}

fn key_kind(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|&(_, _, kind)| kind)
}

fn bad(key: &str, msg: impl std::fmt::Display) -> GridError {
    GridError::Config(format!("{key}: {msg}"))
}

/// `wNn1`, `w4n4`, ... -> `(window, density)`, with `None` for a full-grid window.
pub fn parse_objective_preset(s: &str) -> Result<(Option<usize>, usize)> {
    let err = || GridError::Config(format!("objective.preset: cannot parse {s:?} (expected like wNn1 or w4n4)"));
    let rest = s.strip_prefix('w').ok_or_else(err)?;
    let split = rest.find('n').ok_or_else(err)?;
    let (w, n) = (&rest[..split], &rest[split + 1..]);
    let window = if w == "N" { None } else { Some(w.parse::<usize>().map_err(|_| err())?) };
    let density = n.parse::<usize>().map_err(|_| err())?;
    Ok((window, density))
}

/// `"3/1"` -> backbone depth 3, head depth 1 (spaces allowed).
pub fn parse_split(s: &str) -> Result<(usize, usize)> {
    let err = || GridError::Config(format!("model.split: cannot parse {s:?} (expected like 3/1)"));
    let (a, b) = s.split_once('/').ok_or_else(err)?;
    let a = a.trim().parse::<usize>().map_err(|_| err())?;
    let b = b.trim().parse::<usize>().map_err(|_| err())?;
    if a == 0 || b == 0 {
        return Err(err());
    }
    Ok((a, b))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut explicit = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GridError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if key_kind(&k).is_none() {
                return Err(bad(&k, "unknown key"));
            }
            if explicit.insert(k.clone(), v).is_some() {
                return Err(bad(&k, "set more than once"));
            }
        }
        Self::from_explicit(explicit)
    }

    pub fn from_explicit(explicit: BTreeMap<String, String>) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|&(k, d, _)| (k.to_string(), d.to_string())).collect();
        for (k, v) in &explicit {
            if key_kind(k).is_none() {
                return Err(bad(k, "unknown key"));
            }
            values.insert(k.clone(), v.clone());
        }
        if let Some(p) = explicit.get("objective.preset").filter(|p| !p.is_empty()) {
            let (w, n) = parse_objective_preset(p)?;
            values.insert("objective.tag".into(), "2d".into());
            values.insert("objective.w".into(), w.map_or("N".into(), |w| w.to_string()));
            values.insert("objective.n".into(), n.to_string());
        }
        let cfg = Self { values, explicit };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with extra `key = value` overrides applied on top of the explicit keys.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut explicit = self.explicit.clone();
        for (k, v) in overrides {
            if k == "objective.tag" || k == "objective.w" || k == "objective.n" {
                explicit.remove("objective.preset");
            }
            explicit.insert(k.clone(), v.clone());
        }
        Self::from_explicit(explicit)
    }

    fn validate(&self) -> Result<()> {
        for &(k, _, kind) in KEYS {
            let v = &self.values[k];
            if v.is_empty() {
                continue;
            }
            match kind {
                Kind::Uint => {
                    v.parse::<u64>().map_err(|_| bad(k, format!("expected an unsigned integer, got {v:?}")))?;
                }
                Kind::Real => {
                    let x = v.parse::<f64>().map_err(|_| bad(k, format!("expected a number, got {v:?}")))?;
                    if !x.is_finite() {
                        return Err(bad(k, "must be finite"));
                    }
                }
                Kind::Text => {}
            }
        }
        ObjectiveTag::parse(self.text("objective.tag")).map_err(|e| bad("objective.tag", e))?;
        PositionPolicy::parse(self.text("sample.policy")).map_err(|e| bad("sample.policy", e))?;
        match self.text("head.kind") {
            "global" | "chunk" => {}
            other => return Err(bad("head.kind", format!("unknown head kind {other:?}"))),
        }
        match self.text("data.source") {
            "spec" | "shapes" => {}
            other => return Err(bad("data.source", format!("unknown source {other:?}"))),
        }
        match self.text("tokenizer.kind") {
            "discrete" | "continuous" => {}
            other => return Err(bad("tokenizer.kind", format!("unknown tokenizer {other:?}"))),
        }
        if !self.text("model.split").is_empty() {
            parse_split(self.text("model.split"))?;
        }
        let w = self.text("objective.w");
        if w != "N" {
            w.parse::<usize>().map_err(|_| bad("objective.w", format!("expected N or an integer, got {w:?}")))?;
        }
        if self.real("sample.temperature") <= 0.0 {
            return Err(bad("sample.temperature", "must be positive"));
        }
        if self.uint("train.batch_size") == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        self.model_config()?;
        self.head_config()?;
        self.objective()?;
        self.diffusion_config().validate().map_err(|e| bad("diffusion", e))?;
        if self.text("data.source") == "spec" {
            self.joint_spec()?;
        } else {
            self.shape_spec()?;
        }
        Ok(())
    }

    pub fn text(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn uint(&self, key: &str) -> u64 {
        self.text(key).parse().unwrap_or(0)
    }

    pub fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    pub fn real(&self, key: &str) -> f64 {
        self.text(key).parse().unwrap_or(0.0)
    }

    fn opt_usize(&self, key: &str) -> Option<usize> {
        let v = self.text(key);
        (!v.is_empty()).then(|| self.usize(key))
    }

    /// Explicitly given keys, sorted.
    pub fn explicit(&self) -> &BTreeMap<String, String> {
        &self.explicit
    }

    /// Canonical text of every resolved key.
    pub fn canonical_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of the resolved keys that influence training.
    pub fn training_hash(&self) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| !NON_TRAINING.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        short_hash(text.as_bytes())
    }

    /// Hash naming the output directory of `command`.
    pub fn output_hash(&self, command: &str) -> String {
        if command == "ablate" {
            let extra: String = self
                .values
                .iter()
                .filter(|(k, _)| k.starts_with("ablate."))
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            short_hash(format!("{}{extra}", self.training_hash()).as_bytes())
        } else {
            self.training_hash()
        }
    }

    pub fn grid_extent(&self) -> Result<(usize, usize)> {
        if self.text("data.source") == "spec" {
            Ok((self.usize("spec.height"), self.usize("spec.width")))
        } else {
            let (ph, pw) = (self.usize("tokenizer.patch_h"), self.usize("tokenizer.patch_w"));
            if ph == 0 || pw == 0 {
                return Err(bad("tokenizer.patch_h", "patch extents must be positive"));
            }
            Ok((self.usize("shapes.height") / ph, self.usize("shapes.width") / pw))
        }
    }

    pub fn token_kind(&self) -> Result<TokenKind> {
        if self.text("data.source") == "spec" {
            return Ok(TokenKind::Discrete { vocab: self.usize("spec.vocab") });
        }
        let size = self.usize("tokenizer.size");
        Ok(match self.text("tokenizer.kind") {
            "discrete" => TokenKind::Discrete { vocab: size },
            _ => TokenKind::Continuous { latent: size },
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let (h, w) = self.grid_extent()?;
        let mut c = ModelConfig::preset(self.text("model.preset"), h, w, self.token_kind()?)
            .map_err(|e| bad("model.preset", e))?;
        if let Some(d) = self.opt_usize("model.depth") {
            c.depth = d;
        }
        if let Some(x) = self.opt_usize("model.hidden") {
            c.hidden = x;
        }
        if let Some(x) = self.opt_usize("model.ffn_dim") {
            c.ffn_dim = x;
        }
        if let Some(x) = self.opt_usize("model.head_count") {
            c.head_count = x;
        }
        if c.head_count == 0 || c.hidden % c.head_count != 0 {
            return Err(bad("model.head_count", "must divide model.hidden"));
        }
        c.head_dim = c.hidden / c.head_count;
        if !self.text("model.split").is_empty() {
            c.depth = parse_split(self.text("model.split"))?.0;
        }
        c.class_count = self.usize("model.class_count");
        if self.text("data.source") == "shapes" && c.class_count == 0 {
            c.class_count = 3;
        }
        c.validate().map_err(|e| bad("model", e))?;
        Ok(c)
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        let model = self.model_config()?;
        let window = self.window()?;
        let kind = match self.text("head.kind") {
            "chunk" => HeadKind::Chunk { window },
            _ => {
                if window != model.cells() {
                    return Err(bad("objective.w", "a window below N requires head.kind = chunk"));
                }
                HeadKind::Global
            }
        };
        let mut h = HeadConfig::matching(&model, kind);
        if let Some(d) = self.opt_usize("head.depth") {
            h.depth = d;
        }
        if !self.text("model.split").is_empty() {
            h.depth = parse_split(self.text("model.split"))?.1;
        }
        h.validate(&model).map_err(|e| bad("head", e))?;
        Ok(h)
    }

    pub fn law(&self) -> Result<OutputLaw> {
        Ok(self.head_config()?.law)
    }

    pub fn window(&self) -> Result<usize> {
        let (h, w) = self.grid_extent()?;
        Ok(match self.text("objective.w") {
            "N" => h * w,
            s => s.parse().map_err(|_| bad("objective.w", "expected N or an integer"))?,
        })
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        let tag = ObjectiveTag::parse(self.text("objective.tag")).map_err(|e| bad("objective.tag", e))?;
        let (h, w) = self.grid_extent()?;
        let n = h * w;
        let window = self.window()?;
        let density = self.usize("objective.n");
        if density == 0 || density > n {
            return Err(bad("objective.n", format!("supervision density must lie in 1..={n}")));
        }
        if window == 0 || window > n {
            return Err(bad("objective.w", format!("window must lie in 1..={n}")));
        }
        if tag != ObjectiveTag::TwoD && self.text("head.kind") != "global" {
            return Err(bad("head.kind", "1D objectives require the global head"));
        }
        Ok(ObjectiveConfig { tag, window, density })
    }

    pub fn diffusion_config(&self) -> DiffusionHeadConfig {
        DiffusionHeadConfig {
            block_count: self.usize("diffusion.blocks"),
            width: self.usize("diffusion.width"),
            step_count: self.usize("diffusion.steps"),
            samples_per_token: self.usize("diffusion.samples_per_token"),
            clip_x0: Some(self.real("diffusion.clip_x0")).filter(|&c| c > 0.0),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        let clip = self.real("optim.clip");
        LrSchedule { base: self.real("optim.lr"), warmup_steps: self.uint("optim.warmup"), clip_norm: (clip > 0.0).then_some(clip) }
    }

    pub fn sampling(&self) -> SamplingConfig {
        let k = self.usize("sample.top_k");
        SamplingConfig {
            temperature: self.real("sample.temperature"),
            top_k: (k > 0).then_some(k),
            diffusion_steps: self.usize("sample.diffusion_steps"),
            policy: PositionPolicy::parse(self.text("sample.policy")).unwrap_or(PositionPolicy::Uniform),
        }
    }

    pub fn joint_spec(&self) -> Result<JointSpec> {
        let (h, w, v) = (self.usize("spec.height"), self.usize("spec.width"), self.usize("spec.vocab"));
        let r = match self.text("spec.kind") {
            "pairwise-markov" => JointSpec::random_markov(h, w, v, self.real("spec.strength"), self.uint("spec.seed")),
            "copy-pairs" => JointSpec::copy_pairs(h, w, v, self.real("spec.epsilon")),
            "factorized-uniform" => JointSpec::uniform(h, w, v),
            other => return Err(bad("spec.kind", format!("unknown spec kind {other:?}"))),
        };
        r.map_err(|e| bad("spec", e))
    }

    /// Canonical text of the `spec.*` keys, used as corpus provenance.
    pub fn spec_text(&self) -> String {
        self.values.iter().filter(|(k, _)| k.starts_with("spec.")).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn shape_spec(&self) -> Result<ShapeImageSpec> {
        let kinds = self
            .text("shapes.kinds")
            .split(',')
            .map(|s| ShapeKind::parse(s.trim()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad("shapes.kinds", e))?;
        let s = ShapeImageSpec {
            width: self.usize("shapes.width"),
            height: self.usize("shapes.height"),
            kinds,
            noise: self.real("shapes.noise"),
            fixed_geometry: false,
        };
        s.validate(self.usize("tokenizer.patch_h"), self.usize("tokenizer.patch_w")).map_err(|e| bad("shapes", e))?;
        Ok(s)
    }

    /// Ablation cells: `|`-separated groups of `key=value` pairs joined by `,`.
    pub fn ablation_cells(&self) -> Result<Vec<Vec<(String, String)>>> {
        let text = self.text("ablate.cells");
        if text.trim().is_empty() {
            return Err(bad("ablate.cells", "no cells given"));
        }
        text.split('|')
            .map(|cell| {
                cell.split(',')
                    .filter(|kv| !kv.trim().is_empty())
                    .map(|kv| {
                        let (k, v) = kv.split_once('=').ok_or_else(|| bad("ablate.cells", format!("bad pair {kv:?}")))?;
                        let k = k.trim().to_string();
                        if key_kind(&k).is_none() {
                            return Err(bad(&k, "unknown key"));
                        }
                        Ok((k, v.trim().to_string()))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn ablation_seeds(&self) -> Result<Vec<u64>> {
        self.text("ablate.seeds")
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| bad("ablate.seeds", format!("bad seed {s:?}"))))
            .collect()
    }

    pub fn reference_cells(&self) -> Result<Vec<usize>> {
        let text = self.text("viz.cells");
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        text.split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| bad("viz.cells", format!("bad cell {s:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names() {
        assert_eq!(parse_objective_preset("wNn1").unwrap(), (None, 1));
        assert_eq!(parse_objective_preset("w4n4").unwrap(), (Some(4), 4));
        assert_eq!(parse_objective_preset("w256n1").unwrap(), (Some(256), 1));
        assert!(parse_objective_preset("x4n4").is_err());
        assert_eq!(parse_split("31 / 1").unwrap(), (31, 1));
        assert_eq!(parse_split("3/1").unwrap(), (3, 1));
        assert!(parse_split("3").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("model.bogus = 3\n").unwrap_err();
        assert!(e.to_string().contains("model.bogus"));
    }

    #[test]
    fn bad_value_is_named() {
        let e = RunConfig::parse("train.steps = many\n").unwrap_err();
        assert!(e.to_string().contains("train.steps"));
    }

    #[test]
    fn preset_sets_window_and_density() {
        let c = RunConfig::parse("objective.preset = wNn1\n").unwrap();
        let o = c.objective().unwrap();
        assert_eq!((o.tag, o.window, o.density), (ObjectiveTag::TwoD, 9, 1));
    }

    #[test]
    fn hash_ignores_sampling_keys() {
        let a = RunConfig::parse("train.steps = 5\n").unwrap();
        let b = RunConfig::parse("train.steps = 5\nsample.count = 9\n").unwrap();
        let c = RunConfig::parse("train.steps = 6\n").unwrap();
        assert_eq!(a.training_hash(), b.training_hash());
        assert_ne!(a.training_hash(), c.training_hash());
    }
}
