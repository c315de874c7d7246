//! Continual-learning control: expert addition, the task registry with its
//! matching-based task classifier, and class-level gating.

mod class_gate;
mod embed;
mod features;

use serde::{Deserialize, Serialize};

pub use class_gate::{class_gate_weights, top1_route, ClassGate};
pub use embed::{EmbeddingProvider, FileEmbedder, HashEmbedder};
pub use features::{FeatureExtractor, PyramidHistogram};

use crate::data::accumulate_labels;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{Mode, Phase, SegBackbone};
use crate::tensor::{Rng, Tensor};

/// How a new expert's factors are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertInit {
    /// `B = 0`, fresh Gaussian `A`: the new expert starts as a no-op.
    #[default]
    Fresh,
    /// Copy the previous expert's `A` and `B` as the starting point.
    WarmStartCopy,
}

/// Freezes everything trained so far and appends one expert to every
/// adapted layer. Task-level models only; class-level models need a text
/// embedding and use [`add_class_expert`].
pub fn add_expert(model: &mut SegBackbone, init: ExpertInit, rng: &Rng) -> Result<usize> {
    if model.mode() == Mode::Class {
        return Err(Error::config("class-level experts need a task prompt; use add_class_expert"));
    }
    append_expert(model, init, rng)
}

/// Class-level expert addition: embeds `prompt` once, stores it as the new
/// expert's `τ_e`, and adds the gate projection for that expert.
pub fn add_class_expert(
    model: &mut SegBackbone,
    prompt: &str,
    provider: &dyn EmbeddingProvider,
    init: ExpertInit,
    rng: &Rng,
) -> Result<usize> {
    if model.mode() != Mode::Class {
        return Err(Error::config("add_class_expert needs a class-level model"));
    }
    if model.phase() == Phase::Training {
        return Err(Error::State("cannot add an expert while a training step is running".into()));
    }
    let tau = provider.embed(prompt)?;
    let d = model.config().d_model;
    let e = model.experts() + 1;
    model
        .gate_mut()
        .expect("class-level model has a gate")
        .add_expert(prompt, tau, d, &mut rng.derive(&format!("gate.expert{e}")))?;
    append_expert(model, init, rng)
}

fn append_expert(model: &mut SegBackbone, init: ExpertInit, rng: &Rng) -> Result<usize> {
    if model.phase() == Phase::Training {
        return Err(Error::State("cannot add an expert while a training step is running".into()));
    }
    let e = model.experts() + 1;
    let r = model.config().rank;
    for h in model.head_mut() {
        h.freeze();
    }
    for lin in model.adapted_linears_mut() {
        lin.freeze_all();
        let adapter = match (init, lin.adapters().last()) {
            (ExpertInit::WarmStartCopy, Some(prev)) => {
                let mut copy = prev.clone();
                copy.b.trainable = true;
                copy.a.trainable = true;
                copy
            }
            _ => {
                let mut lrng = rng.derive(&format!("expert{e}.{}", lin.prefix()));
                LoraAdapter::init(lin.d_out(), lin.d_in(), r, &mut lrng)?
            }
        };
        lin.push_adapter(adapter)?;
    }
    model.set_experts(e);
    Ok(e)
}

/// One registered continual step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: usize,
    pub name: String,
    pub expert: usize,
    /// New classes `C^t` (task-level entries include background 0).
    pub classes: Vec<u16>,
    pub prompt: Option<String>,
}

/// Expert registry, accumulated label space and support-set centroids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TaskRegistry {
    tasks: Vec<TaskEntry>,
    labels: Vec<u16>,
    centroids: Vec<Option<Tensor>>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(tasks: Vec<TaskEntry>, labels: Vec<u16>, centroids: Vec<Option<Tensor>>) -> Self {
        Self { tasks, labels, centroids }
    }

    /// Registers step `T + 1`, served by expert `T + 1`. Class ids must be
    /// new apart from background.
    pub fn register(&mut self, name: &str, classes: &[u16], prompt: Option<&str>) -> Result<usize> {
        self.labels = accumulate_labels(&self.labels, classes)?;
        let id = self.tasks.len() + 1;
        self.tasks.push(TaskEntry {
            id,
            name: name.to_string(),
            expert: id,
            classes: classes.to_vec(),
            prompt: prompt.map(str::to_string),
        });
        self.centroids.push(None);
        Ok(id)
    }

    pub fn tasks(&self) -> &[TaskEntry] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> Result<&TaskEntry> {
        id.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::Validation(format!("unknown task {id}; {} registered", self.tasks.len())))
    }

    pub fn current_step(&self) -> usize {
        self.tasks.len()
    }

    /// Accumulated label set `Y^T` in insertion order.
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn centroids(&self) -> &[Option<Tensor>] {
        &self.centroids
    }

    /// Stores the unit-norm mean feature of a task's support images.
    pub fn set_support(&mut self, id: usize, support: &[Tensor], extractor: &dyn FeatureExtractor) -> Result<()> {
        self.task(id)?;
        if support.is_empty() {
            return Err(Error::Validation(format!("task {id}: empty support set")));
        }
        let mut acc: Vec<f64> = Vec::new();
        for img in support {
            let f = extractor.features(img)?;
            if acc.is_empty() {
                acc = vec![0.0; f.len()];
            }
            acc.iter_mut().zip(&f).for_each(|(a, v)| *a += v);
        }
        let c = normalise(acc);
        self.centroids[id - 1] = Some(Tensor::new([c.len()], c.into_iter().map(|v| v as f32).collect())?);
        Ok(())
    }
}

pub(crate) fn normalise(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Task whose support centroid has the highest cosine similarity with the
/// query's features; ties go to the lowest task id.
pub fn classify_task(image: &Tensor, registry: &TaskRegistry, extractor: &dyn FeatureExtractor) -> Result<usize> {
    if registry.tasks.is_empty() {
        return Err(Error::State("task registry is empty".into()));
    }
    let q = normalise(extractor.features(image)?);
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in registry.centroids.iter().enumerate() {
        let c = c
            .as_ref()
            .ok_or_else(|| Error::State(format!("task {} has no support centroid", i + 1)))?;
        if c.numel() != q.len() {
            return Err(Error::shape(format!("centroid has {} dims, features have {}", c.numel(), q.len())));
        }
        let cos: f64 = c.data().iter().zip(&q).map(|(&a, &b)| a as f64 * b).sum();
        if best.map_or(true, |(_, s)| cos > s) {
            best = Some((i + 1, cos));
        }
    }
    Ok(best.expect("non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn registry_accumulates_labels() {
        let mut r = TaskRegistry::new();
        r.register("a", &[0, 1, 2], None).unwrap();
        r.register("b", &[0, 3], None).unwrap();
        assert_eq!(r.labels(), &[0, 1, 2, 3]);
        assert!(matches!(r.register("c", &[0, 2], None), Err(Error::Config(_))));
        assert_eq!(r.current_step(), 2);
    }

    #[test]
    fn empty_registry_cannot_classify() {
        let r = TaskRegistry::new();
        let err = classify_task(&Tensor::zeros([8, 8]), &r, &PyramidHistogram::default()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn add_expert_refused_mid_training() {
        let mut m = SegBackbone::new(ModelConfig::tiny(), Mode::Task, None, 0).unwrap();
        m.set_phase(Phase::Training);
        assert!(matches!(add_expert(&mut m, ExpertInit::Fresh, &Rng::new(0)), Err(Error::State(_))));
    }

    #[test]
    fn add_expert_freezes_and_counts() {
        let cfg = ModelConfig::tiny();
        let mut m = SegBackbone::new(cfg.clone(), Mode::Task, None, 0).unwrap();
        add_expert(&mut m, ExpertInit::Fresh, &Rng::new(0)).unwrap();
        assert_eq!(m.trainable_param_count(), cfg.expert_param_count());
        add_expert(&mut m, ExpertInit::Fresh, &Rng::new(0)).unwrap();
        assert_eq!(m.trainable_param_count(), cfg.expert_param_count());
        for lin in m.adapted_linears() {
            assert!(lin.adapters()[0].frozen() && !lin.adapters()[1].frozen());
        }
    }

    #[test]
    fn warm_start_copies_previous_factors() {
        let mut m = SegBackbone::new(ModelConfig::tiny(), Mode::Task, None, 0).unwrap();
        add_expert(&mut m, ExpertInit::Fresh, &Rng::new(0)).unwrap();
        add_expert(&mut m, ExpertInit::WarmStartCopy, &Rng::new(0)).unwrap();
        for lin in m.adapted_linears() {
            let (a, b) = (&lin.adapters()[0], &lin.adapters()[1]);
            assert!(a.a.value.bit_eq(&b.a.value));
            assert!(b.a.name.ends_with("expert2.A"));
        }
    }
}
