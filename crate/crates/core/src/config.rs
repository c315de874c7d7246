//! TOML run configuration.
//!
//! ```toml
//! profile = "desk"            # desk | paper-dims
//! mode = "task"               # task | class
//! seed = 7
//! out = "runs/demo"
//! expert_init = "fresh"       # fresh | warm-start-copy
//! support_shots = 8
//! probes = 20
//! embeddings = "prompts.json" # optional; hashed embeddings otherwise
//!
//! [model]                     # any subset overrides the profile
//! rank = 8
//!
//! [gate]                      # class mode only
//! composition = "input-projection"
//! projection = "per-expert"
//! d_txt = 32
//!
//! [train]                     # any subset overrides the profile
//! epochs = 30
//! batch_size = 8
//!
//! [[steps]]
//! name = "a"
//! synth = "task-a"            # or folder = "...", test_folder = "..."
//! classes = [0, 1, 2]         # defaults to the dataset's classes
//! prompt = "bright discs and squares"
//! epochs = 15                 # per-step override
//! train = 64                  # synthetic sample counts
//! test = 50
//! data_seed = 11
//! ```
//!
//! Unknown keys anywhere are errors; every offending key is listed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_folder_dataset, gen_task_dataset, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::gating::ExpertInit;
use crate::model::{GateComposition, GateConfig, GateProjection, Mode, ModelConfig, Profile};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub image_size: Option<usize>,
    pub patch: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub rank: Option<usize>,
    pub attention_adapters: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateOverrides {
    pub composition: Option<GateComposition>,
    pub projection: Option<GateProjection>,
    pub d_txt: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
}

/// One step's data source and settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folder: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_folder: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<u16>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

/// The configuration file as written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Option<Profile>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub expert_init: Option<ExpertInit>,
    pub support_shots: Option<usize>,
    pub probes: Option<usize>,
    pub embeddings: Option<PathBuf>,
    pub model: Option<ModelOverrides>,
    pub gate: Option<GateOverrides>,
    pub train: Option<TrainOverrides>,
    #[serde(default)]
    pub steps: Vec<StepConfig>,
}

/// A configuration with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRun {
    pub profile: Profile,
    pub mode: Mode,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub expert_init: ExpertInit,
    pub support_shots: usize,
    pub probes: usize,
    pub embeddings: Option<PathBuf>,
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub steps: Vec<StepConfig>,
    /// Directory relative data paths are resolved against.
    pub base_dir: PathBuf,
}

const TOP_KEYS: &[&str] = &[
    "profile", "mode", "seed", "out", "expert_init", "support_shots", "probes", "embeddings", "model", "gate",
    "train", "steps",
];
const MODEL_KEYS: &[&str] = &["image_size", "patch", "d_model", "heads", "layers", "d_ff", "rank", "attention_adapters"];
const GATE_KEYS: &[&str] = &["composition", "projection", "d_txt"];
const TRAIN_KEYS: &[&str] =
    &["epochs", "batch_size", "lr", "min_lr", "warmup_epochs", "beta1", "beta2", "eps", "weight_decay"];
const STEP_KEYS: &[&str] = &[
    "name", "synth", "folder", "test_folder", "classes", "prompt", "epochs", "train", "test", "data_seed",
];

fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |t: &toml::Table, allowed: &[&str], path: &str| {
        for k in t.keys().filter(|k| !allowed.contains(&k.as_str())) {
            out.push(if path.is_empty() { k.clone() } else { format!("{path}.{k}") });
        }
    };
    check(table, TOP_KEYS, "");
    for (key, allowed) in [("model", MODEL_KEYS), ("gate", GATE_KEYS), ("train", TRAIN_KEYS)] {
        if let Some(toml::Value::Table(t)) = table.get(key) {
            check(t, allowed, key);
        }
    }
    if let Some(toml::Value::Array(steps)) = table.get("steps") {
        for (i, s) in steps.iter().enumerate() {
            if let toml::Value::Table(t) = s {
                check(t, STEP_KEYS, &format!("steps[{i}]"));
            }
        }
    }
    out
}

impl RunConfig {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let parse_err = |e: toml::de::Error| Error::Parse {
            file: file.to_string(),
            offset: e.span().map_or(0, |s| s.start) as u64,
            msg: e.message().to_string(),
        };
        let table: toml::Table = text.parse().map_err(parse_err)?;
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(Error::config(format!("{file}: unknown keys: {}", unknown.join(", "))));
        }
        toml::from_str(text).map_err(parse_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Fills defaults from the profile and validates every field, listing
    /// all problems with their keys.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedRun> {
        let profile = self.profile.unwrap_or_default();
        let mode = self.mode.unwrap_or_default();
        let mut model = ModelConfig::for_profile(profile);
        if let Some(m) = &self.model {
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = m.$f { model.$f = v; })* };
            }
            set!(image_size, patch, d_model, heads, layers, d_ff, rank, attention_adapters);
        }
        let mut gate = GateConfig::default();
        if let Some(g) = &self.gate {
            if let Some(v) = g.composition {
                gate.composition = v;
            }
            if let Some(v) = g.projection {
                gate.projection = v;
            }
            if let Some(v) = g.d_txt {
                gate.d_txt = v;
            }
        }
        let mut train = match profile {
            Profile::Desk => TrainConfig::default(),
            Profile::PaperDims => TrainConfig::paper_scale(),
        };
        if let Some(t) = &self.train {
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = t.$f { train.$f = v; })* };
            }
            set!(epochs, batch_size, lr, min_lr, warmup_epochs, beta1, beta2, eps, weight_decay);
        }

        let mut problems = Vec::new();
        if let Err(e) = model.validate() {
            problems.push(format!("model: {e}"));
        }
        problems.extend(train.problems());
        if mode == Mode::Task && self.gate.is_some() {
            problems.push("gate: only valid with mode = \"class\"".to_string());
        }
        if gate.d_txt == 0 {
            problems.push("gate.d_txt must be at least 1".to_string());
        }
        for (i, s) in self.steps.iter().enumerate() {
            let key = format!("steps[{i}]");
            if s.name.trim().is_empty() {
                problems.push(format!("{key}.name must not be empty"));
            }
            match (&s.synth, &s.folder) {
                (Some(_), Some(_)) => problems.push(format!("{key}: set only one of synth and folder")),
                (None, None) => problems.push(format!("{key}: needs synth or folder")),
                (Some(name), None) => {
                    if let Err(e) = TaskSpec::named(name) {
                        problems.push(format!("{key}.synth: {e}"));
                    }
                }
                (None, Some(_)) => {
                    if s.train.is_some() || s.test.is_some() || s.data_seed.is_some() {
                        problems.push(format!("{key}: train, test and data_seed apply to synth data only"));
                    }
                }
            }
            if s.test_folder.is_some() && s.folder.is_none() {
                problems.push(format!("{key}.test_folder needs folder"));
            }
            if s.epochs == Some(0) {
                problems.push(format!("{key}.epochs must be at least 1"));
            }
            if let Some(e) = s.epochs {
                if e < train.warmup_epochs {
                    problems.push(format!("{key}.epochs {e} is shorter than train.warmup_epochs"));
                }
            }
            if mode == Mode::Class && s.prompt.is_none() {
                problems.push(format!("{key}.prompt is required in class mode"));
            }
            if self.steps[..i].iter().any(|p| p.name == s.name) {
                problems.push(format!("{key}.name {:?} is used twice", s.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::config(problems.join("\n  ")));
        }
        Ok(ResolvedRun {
            profile,
            mode,
            seed: self.seed.unwrap_or(0),
            out: self.out.clone(),
            expert_init: self.expert_init.unwrap_or_default(),
            support_shots: self.support_shots.unwrap_or(8),
            probes: self.probes.unwrap_or(20),
            embeddings: self.embeddings.clone(),
            model,
            gate,
            train,
            steps: self.steps.clone(),
            base_dir: base_dir.to_path_buf(),
        })
    }
}

/// Train and test splits plus the classes of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepData {
    pub classes: Vec<u16>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub warnings: Vec<String>,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl StepConfig {
    /// Generates or loads the step's data at `image_size`.
    pub fn load(&self, image_size: usize, base_dir: &Path) -> Result<StepData> {
        let (classes, train, test, warnings) = match (&self.synth, &self.folder) {
            (Some(name), None) => {
                let mut spec = TaskSpec::named(name)?.with_size(image_size);
                let (train, test) = (self.train.unwrap_or(spec.train), self.test.unwrap_or(spec.test));
                spec = spec.with_counts(train, 0, test);
                if let Some(s) = self.data_seed {
                    spec = spec.with_seed(s);
                }
                let ds = gen_task_dataset(&spec)?;
                (spec.classes, ds.train, ds.test, Vec::new())
            }
            (None, Some(dir)) => {
                let tr = load_folder_dataset(&resolve_path(base_dir, dir))?;
                let mut warnings = tr.warnings;
                let test = match &self.test_folder {
                    Some(t) => {
                        let te = load_folder_dataset(&resolve_path(base_dir, t))?;
                        warnings.extend(te.warnings);
                        te.samples
                    }
                    None => {
                        warnings.push(format!("step {}: no test_folder; nothing to evaluate", self.name));
                        Vec::new()
                    }
                };
                (tr.classes, tr.samples, test, warnings)
            }
            _ => return Err(Error::config(format!("step {}: needs exactly one of synth and folder", self.name))),
        };
        let classes = match &self.classes {
            Some(c) => {
                let declared: Vec<u16> = classes.iter().copied().filter(|&c| c != 0).collect();
                if let Some(bad) = declared.iter().find(|d| !c.contains(d)) {
                    return Err(Error::Validation(format!(
                        "step {}: dataset label {bad} is missing from classes {c:?}",
                        self.name
                    )));
                }
                c.clone()
            }
            None => classes,
        };
        for s in train.iter().chain(&test) {
            if let Some(&bad) = s.mask.iter().find(|&&m| m != 0 && !classes.contains(&m)) {
                return Err(Error::Validation(format!(
                    "step {}: label id {bad} is not among the classes {classes:?}",
                    self.name
                )));
            }
            if s.size() != (image_size, image_size) {
                return Err(Error::Validation(format!(
                    "step {}: {}x{} image, model expects {image_size}x{image_size}",
                    self.name,
                    s.size().0,
                    s.size().1
                )));
            }
        }
        Ok(StepData { classes, train, test, warnings })
    }

    /// The configuration as stored in step records.
    pub fn to_source(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("step config serialises")
    }

    pub fn from_source(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Validation(format!("stored step source: {e}")))
    }
}
