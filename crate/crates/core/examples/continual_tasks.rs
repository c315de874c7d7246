//! Two-step task-level continual run in memory: the first task's Dice and
//! probe logits survive the second step unchanged.

use lomoe::data::{gen_task_dataset, TaskSpec};
use lomoe::gating::{ExpertInit, PyramidHistogram};
use lomoe::model::{Mode, ModelConfig, SegBackbone};
use lomoe::train::{run_continual, Report, RunPlan, Session, StepPlan, TrainConfig};

fn main() -> lomoe::Result<()> {
    let model = SegBackbone::new(ModelConfig::desk(), Mode::Task, None, 1)?;
    let mut session = Session::new(model, 1);
    let cfg = TrainConfig { epochs: 4, batch_size: 4, warmup_epochs: 1, ..TrainConfig::default() };
    let mut steps = Vec::new();
    for name in ["task-a", "task-b"] {
        let spec = TaskSpec::named(name)?.with_counts(16, 0, 12);
        let ds = gen_task_dataset(&spec)?;
        steps.push(StepPlan {
            name: name.into(),
            classes: spec.classes.clone(),
            prompt: None,
            train: ds.train,
            test: ds.test,
            train_cfg: cfg,
            source: serde_json::Value::Null,
        });
    }
    let extractor = PyramidHistogram::default();
    let plan = RunPlan {
        steps,
        init: ExpertInit::Fresh,
        support_shots: 8,
        probes: 8,
        prior_tests: Vec::new(),
        checkpoint_dir: None,
        provider: None,
        extractor: &extractor,
    };
    let mut report = Report::default();
    run_continual(&mut session, &plan, &mut report)?;
    print!("{}", report.summary_table());
    for r in &session.history {
        println!("{}: probe checksum {:016x}", r.name, r.probe_checksum);
    }
    Ok(())
}
