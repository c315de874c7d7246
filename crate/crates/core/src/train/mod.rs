//! Optimisation, schedules, losses and metrics, the per-step trainer and
//! the continual orchestration loop.

mod continual;
mod loss;
mod optim;
mod schedule;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use continual::{run_continual, Report, RunPlan, Session, StepPlan, TaskRecord};
pub use loss::{class_columns, dice_score, seg_loss, seg_loss_graph, DiceCounts, DICE_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::Schedule;

use crate::autograd::Tape;
use crate::data::{Sample, StepLoader};
use crate::error::{Error, Result};
use crate::model::{Phase, Routing, SegBackbone};
use crate::tensor::{Rng, Tensor};

pub const THREADS_ENV: &str = "LOMOE_THREADS";

/// Hyperparameters of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_epochs: 10,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }
}

impl TrainConfig {
    /// 100 epochs, batch 16.
    pub fn paper_scale() -> Self {
        Self { epochs: 100, batch_size: 16, ..Self::default() }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.lr, self.min_lr, self.warmup_epochs, self.epochs)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Every problem with the hyperparameters, one entry per key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("train.batch_size must be at least 1".to_string());
        }
        if let Err(e) = self.schedule() {
            out.push(format!("train: {e}"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            out.push("train.beta1 and train.beta2 must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            out.push("train.eps must be positive".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            out.push("train.weight_decay must be non-negative".to_string());
        }
        out
    }
}

/// Mean loss and learning rate of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Worker pool sized by `LOMOE_THREADS`, or the available cores.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::config(format!("cannot start {n} workers: {e}")))
}

/// FNV-1a checksum of every frozen parameter's bytes.
pub fn frozen_checksums(model: &SegBackbone) -> BTreeMap<String, u64> {
    model.params().into_iter().filter(|p| !p.trainable).map(|p| (p.name.clone(), p.value.checksum())).collect()
}

fn audit(model: &SegBackbone, reference: &BTreeMap<String, u64>) -> Result<()> {
    let now = frozen_checksums(model);
    for (name, sum) in reference {
        if now.get(name) != Some(sum) {
            return Err(Error::FreezeViolation { name: name.clone() });
        }
    }
    Ok(())
}

/// Loss and trainable-parameter gradients of a single sample.
pub fn sample_gradients(
    model: &SegBackbone,
    sample: &Sample,
    routing: Routing,
    rows: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::<f32>::new();
    let f = model.forward(&mut tape, &sample.image, routing, rows, true)?;
    let loss = seg_loss_graph(&mut tape, f.logits, &sample.mask, &f.classes)?;
    let value = tape.value(loss).data()[0] as f64;
    Ok((value, tape.backward(loss)?.into_params()))
}

/// Trains the model's unfrozen parameters on the loader's `step` split.
/// Gradients are computed per sample on the worker pool and summed in
/// sample order, so results do not depend on the worker count. Frozen
/// parameters are audited by checksum after every epoch.
pub fn train_step(
    model: &mut SegBackbone,
    loader: &mut StepLoader,
    step: usize,
    routing: Routing,
    rows: &[usize],
    cfg: &TrainConfig,
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if model.phase() == Phase::Training {
        return Err(Error::State("a training step is already running".into()));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    loader.activate(step)?;
    if loader.is_empty(step) {
        return Err(Error::Validation(format!("step {step} has no training samples")));
    }
    if model.trainable_param_count() == 0 {
        return Err(Error::State("model has no trainable parameters".into()));
    }
    model.set_phase(Phase::Training);
    let out = run_epochs(model, loader, step, routing, rows, cfg, rng, &mut on_epoch);
    model.set_phase(Phase::Idle);
    out
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut SegBackbone,
    loader: &mut StepLoader,
    step: usize,
    routing: Routing,
    rows: &[usize],
    cfg: &TrainConfig,
    rng: &Rng,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let schedule = cfg.schedule()?;
    let pool = worker_pool()?;
    let reference = frozen_checksums(model);
    let mut opt = AdamW::new(cfg.optimizer());
    let n = loader.len(step);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        rng.derive(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| loader.get(step, i).cloned()).collect::<Result<_>>()?;
            let shared: &SegBackbone = model;
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = pool.install(|| {
                batch.par_iter().map(|s| sample_gradients(shared, s, routing, rows)).collect()
            });
            let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                for (name, g) in grads {
                    let acc = sums.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
                    acc.iter_mut().zip(g.data()).for_each(|(a, &v)| *a += v as f64);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            sums.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            opt.step(&mut model.params_mut(), &sums, lr)?;
        }
        audit(model, &reference)?;
        let s = EpochStats { epoch, lr, loss: total / n as f64 };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Pooled per-class overlap counts of the model's predictions on `samples`.
pub fn evaluate(model: &SegBackbone, samples: &[Sample], routing: Routing, rows: &[usize]) -> Result<DiceCounts> {
    let pool = worker_pool()?;
    let classes: Vec<u16> = rows.iter().map(|&r| model.head()[r].class_id).collect();
    let parts: Vec<Result<DiceCounts>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let pred = model.predict(&s.image, routing, rows)?;
                class_columns(&s.mask, &classes)?;
                let mut c = DiceCounts::default();
                c.add(&pred, &s.mask, &classes);
                Ok(c)
            })
            .collect()
    });
    let mut total = DiceCounts::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Mean Dice over the foreground classes in `classes`.
pub fn mean_foreground_dice(counts: &DiceCounts, classes: &[u16]) -> f64 {
    let fg: Vec<u16> = classes.iter().copied().filter(|&c| c != 0).collect();
    if fg.is_empty() {
        return counts.dice(0);
    }
    fg.iter().map(|&c| counts.dice(c)).sum::<f64>() / fg.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_task_dataset, TaskSpec};
    use crate::gating::{add_expert, ExpertInit};
    use crate::model::{Mode, ModelConfig};

    fn tiny_model() -> SegBackbone {
        let mut m = SegBackbone::new(ModelConfig::tiny(), Mode::Task, None, 3).unwrap();
        add_expert(&mut m, ExpertInit::Fresh, &Rng::new(3)).unwrap();
        m.add_head_rows(1, &[0, 1, 2]).unwrap();
        m
    }

    #[test]
    fn loss_decreases_on_a_fixed_sample() {
        let mut m = tiny_model();
        let ds = gen_task_dataset(&TaskSpec::task_a().with_size(8).with_counts(1, 0, 0)).unwrap();
        let mut loader = StepLoader::new();
        loader.push_step(ds.train.clone());
        let cfg = TrainConfig { epochs: 50, batch_size: 1, lr: 1e-2, warmup_epochs: 0, ..Default::default() };
        let rows = m.rows_of_step(1);
        let stats = train_step(&mut m, &mut loader, 1, Routing::Stack(1), &rows, &cfg, &Rng::new(0), |_| {}).unwrap();
        assert!(stats[49].loss < 0.8 * stats[0].loss, "{} -> {}", stats[0].loss, stats[49].loss);
        assert_eq!(m.phase(), Phase::Idle);
        assert!(loader.log().only_step(1));
    }

    #[test]
    fn training_leaves_frozen_parameters_bitwise() {
        let mut m = tiny_model();
        let before = frozen_checksums(&m);
        let ds = gen_task_dataset(&TaskSpec::task_a().with_size(8).with_counts(4, 0, 0)).unwrap();
        let mut loader = StepLoader::new();
        loader.push_step(ds.train);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, warmup_epochs: 1, ..Default::default() };
        let rows = m.rows_of_step(1);
        train_step(&mut m, &mut loader, 1, Routing::Stack(1), &rows, &cfg, &Rng::new(0), |_| {}).unwrap();
        assert_eq!(before, frozen_checksums(&m));
    }

    #[test]
    fn audit_reports_the_changed_tensor() {
        let mut m = tiny_model();
        let reference = frozen_checksums(&m);
        let p = m.params_mut().into_iter().find(|p| p.name == "block0.ffn.wi.base").unwrap();
        p.value.data_mut()[0] += 1.0;
        let err = audit(&m, &reference).unwrap_err();
        assert!(matches!(err, Error::FreezeViolation { ref name } if name == "block0.ffn.wi.base"));
    }

    #[test]
    fn evaluation_rejects_foreign_labels() {
        let m = tiny_model();
        let s = Sample::new(Tensor::zeros([8, 8]), vec![7; 64]).unwrap();
        let err = evaluate(&m, &[s], Routing::Stack(1), &m.rows_of_step(1)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
