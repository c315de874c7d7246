use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{evaluate, mean_foreground_dice, train_step, TrainConfig};
use crate::checksum::Fnv64;
use crate::data::{Sample, StepLoader};
use crate::error::{Error, Result};
use crate::gating::{add_class_expert, add_expert, EmbeddingProvider, ExpertInit, FeatureExtractor, TaskRegistry};
use crate::model::{Mode, Routing, SegBackbone};
use crate::tensor::{Rng, Tensor};

/// Outcome of a completed step as measured at the end of that step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: usize,
    pub name: String,
    pub classes: Vec<u16>,
    pub dice: f64,
    pub per_class: BTreeMap<u16, f64>,
    pub probe_count: usize,
    pub probe_checksum: u64,
    /// Where the step's data came from, as written in the run configuration.
    pub source: Value,
    /// Logits of the first `probe_count` test images (in-memory only).
    #[serde(skip)]
    pub probe_logits: Vec<Tensor>,
}

/// A model together with its registry and per-step history.
#[derive(Clone, Debug)]
pub struct Session {
    pub model: SegBackbone,
    pub registry: TaskRegistry,
    pub history: Vec<TaskRecord>,
    pub seed: u64,
    /// Set when the adapters of experts `1..=k` were merged into dense
    /// weights; such a session only serves step `k`.
    pub merged_upto: Option<usize>,
}

impl Session {
    pub fn new(model: SegBackbone, seed: u64) -> Self {
        Self { model, registry: TaskRegistry::new(), history: Vec::new(), seed, merged_upto: None }
    }

    /// Routing and head rows under which step `k`'s results are frozen:
    /// the expert stack `1..=k` with that step's rows (task level), or
    /// top-1 routing over experts `1..=k` with the label set `Y^k` (class
    /// level).
    pub fn retained_view(&self, k: usize) -> (Routing, Vec<usize>) {
        match self.model.mode() {
            Mode::Task => (Routing::Stack(k), self.model.rows_of_step(k)),
            Mode::Class => (Routing::Top1Upto(k), self.model.rows_upto(k)),
        }
    }

    /// Routing and head rows used while training step `t`.
    pub fn training_view(&self, t: usize) -> (Routing, Vec<usize>) {
        match self.model.mode() {
            Mode::Task => (Routing::Stack(t), self.model.rows_of_step(t)),
            Mode::Class => (Routing::Soft, self.model.rows_upto(t)),
        }
    }
}

/// One continual step: its data, new classes and hyperparameters.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub name: String,
    /// New classes `C^t`; the first step (and every task-level step)
    /// includes background 0.
    pub classes: Vec<u16>,
    pub prompt: Option<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_cfg: TrainConfig,
    pub source: Value,
}

/// Ordered steps plus run-wide settings.
pub struct RunPlan<'a> {
    pub steps: Vec<StepPlan>,
    pub init: ExpertInit,
    pub support_shots: usize,
    pub probes: usize,
    /// Test splits of steps completed before this run, indexed by step.
    /// Missing entries are not re-evaluated.
    pub prior_tests: Vec<Option<Vec<Sample>>>,
    pub checkpoint_dir: Option<PathBuf>,
    pub provider: Option<&'a dyn EmbeddingProvider>,
    pub extractor: &'a dyn FeatureExtractor,
}

/// Line-delimited event log plus the per-step Dice matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub events: Vec<Value>,
    pub tasks: Vec<String>,
    /// `matrix[row][k]`: Dice of step `k + 1` after the row's step.
    pub rows: Vec<(usize, Vec<Option<f64>>)>,
}

impl Report {
    pub fn push(&mut self, event: Value) {
        self.events.push(event);
    }

    pub fn to_jsonl(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }

    /// Whitespace-separated table: one row per completed step, one column
    /// per task, `-` where a task was not (yet) evaluated.
    pub fn summary_table(&self) -> String {
        let mut out = String::from("after_step");
        for t in &self.tasks {
            write!(out, " {t}").unwrap();
        }
        out.push('\n');
        for (step, row) in &self.rows {
            write!(out, "{step}").unwrap();
            for k in 0..self.tasks.len() {
                match row.get(k).copied().flatten() {
                    Some(d) => write!(out, " {d:.6}").unwrap(),
                    None => out.push_str(" -"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn probe_logits(model: &SegBackbone, test: &[Sample], n: usize, view: &(Routing, Vec<usize>)) -> Result<Vec<Tensor>> {
    test.iter().take(n).map(|s| Ok(model.logits(&s.image, view.0, &view.1)?.0)).collect()
}

fn checksum(logits: &[Tensor]) -> u64 {
    let mut h = Fnv64::new();
    logits.iter().for_each(|l| h.write(&l.to_le_bytes()));
    h.finish()
}

/// Fraction of tokens inside regions of `classes` whose top-1 route is
/// `expert`, per block.
fn route_share(model: &SegBackbone, test: &[Sample], classes: &[u16], expert: usize) -> Result<Vec<f64>> {
    let cfg = model.config();
    let (p, g, size) = (cfg.patch, cfg.grid(), cfg.image_size);
    let rows = model.rows_upto(model.head().iter().map(|h| h.step).max().unwrap_or(0));
    let mut hits = vec![0usize; cfg.layers];
    let mut total = 0usize;
    for s in test {
        let routes = model.routes(&s.image, Routing::Top1, &rows)?;
        for tok in 0..g * g {
            let (gy, gx) = (tok / g, tok % g);
            let inside = (0..p * p)
                .filter(|&i| classes.contains(&s.mask[(gy * p + i / p) * size + gx * p + i % p]))
                .count();
            if 2 * inside <= p * p {
                continue;
            }
            total += 1;
            for (l, r) in routes.iter().enumerate() {
                hits[l] += (r[tok] == expert) as usize;
            }
        }
    }
    Ok(hits.iter().map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 }).collect())
}

/// Runs every step of `plan` on `session`: add an expert, train it on the
/// step's data only, evaluate all steps seen so far, and verify that the
/// stored probe logits and Dice of earlier steps are reproduced exactly.
pub fn run_continual(session: &mut Session, plan: &RunPlan, report: &mut Report) -> Result<()> {
    if session.merged_upto.is_some() {
        return Err(Error::State("a merged model cannot be trained further".into()));
    }
    let root = Rng::new(session.seed);
    let mut tests: Vec<Option<Vec<Sample>>> = plan.prior_tests.clone();
    tests.resize(session.registry.current_step(), None);
    report.tasks = session.registry.tasks().iter().map(|t| t.name.clone()).collect();
    let mut loader = StepLoader::new();
    for _ in 0..session.registry.current_step() {
        loader.push_step(Vec::new());
    }
    for step in &plan.steps {
        let t = session.registry.current_step() + 1;
        let labels = session.registry.labels();
        if let Some(&c) = step.classes.iter().find(|&&c| c != 0 && labels.contains(&c)) {
            return Err(Error::Validation(format!(
                "step {t} ({}) reuses class {c}, already in the label space {labels:?}",
                step.name
            )));
        }
        session.registry.register(&step.name, &step.classes, step.prompt.as_deref())?;
        let e = match session.model.mode() {
            Mode::Task => add_expert(&mut session.model, plan.init, &root)?,
            Mode::Class => {
                let prompt = step
                    .prompt
                    .as_deref()
                    .ok_or_else(|| Error::config(format!("class-level step {} needs a prompt", step.name)))?;
                let provider = plan.provider.ok_or_else(|| Error::config("class-level runs need a text embedder"))?;
                add_class_expert(&mut session.model, prompt, provider, plan.init, &root)?
            }
        };
        debug_assert_eq!(e, t);
        session.model.add_head_rows(t, &step.classes)?;
        report.tasks.push(step.name.clone());
        report.push(json!({
            "event": "step_start",
            "step": t,
            "name": step.name,
            "classes": step.classes,
            "experts": session.model.experts(),
            "trainable_params": session.model.trainable_param_count(),
            "total_params": session.model.total_param_count(),
        }));

        loader.push_step(step.train.clone());
        let (routing, rows) = session.training_view(t);
        let mut epochs = Vec::new();
        train_step(
            &mut session.model,
            &mut loader,
            t,
            routing,
            &rows,
            &step.train_cfg,
            &root.derive(&format!("step{t}.train")),
            |s| epochs.push(*s),
        )?;
        if !loader.log().only_step(t) {
            return Err(Error::State(format!("step {t} read data of another step")));
        }
        for s in epochs {
            report.push(json!({"event": "epoch", "step": t, "epoch": s.epoch, "lr": s.lr, "loss": s.loss}));
        }
        if session.model.mode() == Mode::Task && plan.support_shots > 0 {
            let support: Vec<Tensor> = step.train.iter().take(plan.support_shots).map(|s| s.image.clone()).collect();
            session.registry.set_support(t, &support, plan.extractor)?;
        }
        tests.push(Some(step.test.clone()));

        let mut row = Vec::with_capacity(t);
        for k in 1..=t {
            let Some(test) = tests[k - 1].as_ref() else {
                row.push(None);
                continue;
            };
            let view = session.retained_view(k);
            let classes = session.registry.task(k)?.classes.clone();
            let counts = evaluate(&session.model, test, view.0, &view.1)?;
            let dice = mean_foreground_dice(&counts, &classes);
            let per_class: BTreeMap<u16, f64> = classes.iter().map(|&c| (c, counts.dice(c))).collect();
            let probes = probe_logits(&session.model, test, plan.probes, &view)?;
            let sum = checksum(&probes);
            let mut event = json!({
                "event": "eval",
                "after_step": t,
                "task": k,
                "dice": dice,
                "per_class": per_class,
                "probe_checksum": format!("{sum:016x}"),
            });
            if k < t {
                let rec = session
                    .history
                    .iter()
                    .find(|r| r.id == k)
                    .ok_or_else(|| Error::State(format!("no record of step {k}")))?;
                let same_logits = if rec.probe_logits.is_empty() {
                    rec.probe_checksum == sum
                } else {
                    rec.probe_logits.len() == probes.len()
                        && rec.probe_logits.iter().zip(&probes).all(|(a, b)| a.bit_eq(b))
                };
                if !same_logits || rec.dice != dice || rec.per_class != per_class {
                    return Err(Error::FreezeViolation { name: format!("outputs of step {k} ({})", rec.name) });
                }
                event["retained"] = json!(true);
            } else {
                session.history.push(TaskRecord {
                    id: t,
                    name: step.name.clone(),
                    classes: classes.clone(),
                    dice,
                    per_class: per_class.clone(),
                    probe_count: probes.len(),
                    probe_checksum: sum,
                    source: step.source.clone(),
                    probe_logits: probes,
                });
            }
            if session.model.mode() == Mode::Class {
                let rows_t = session.model.rows_upto(t);
                let routed = evaluate(&session.model, test, Routing::Top1, &rows_t)?;
                event["routed_dice"] = json!(mean_foreground_dice(&routed, &classes));
            }
            row.push(Some(dice));
            report.push(event);
        }
        if session.model.mode() == Mode::Class && t > 1 {
            let new: Vec<u16> = step.classes.iter().copied().filter(|&c| c != 0).collect();
            let share = route_share(&session.model, &step.test, &new, t)?;
            report.push(json!({"event": "route_share", "step": t, "expert": t, "per_block": share}));
        }
        report.rows.push((t, row));
        if let Some(dir) = &plan.checkpoint_dir {
            let name = format!("step{t}.lmoe");
            crate::checkpoint::save(session, &dir.join(&name))?;
            report.push(json!({"event": "checkpoint", "step": t, "file": name}));
        }
    }
    let matrix: Vec<Value> = report.rows.iter().map(|(s, r)| json!({"after_step": s, "dice": r})).collect();
    report.push(json!({"event": "summary", "tasks": report.tasks, "matrix": matrix}));
    Ok(())
}
