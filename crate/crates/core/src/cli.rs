//! Command-line interface: train, continue, eval, inspect, merge, classify.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::checkpoint;
use crate::config::{ResolvedRun, RunConfig, StepConfig};
use crate::data::{load_folder_dataset, gen_task_dataset, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::gating::{classify_task, EmbeddingProvider, FileEmbedder, HashEmbedder, PyramidHistogram};
use crate::model::{Mode, Profile, Routing, SegBackbone};
use crate::train::{evaluate, mean_foreground_dice, run_continual, DiceCounts, Report, RunPlan, Session, StepPlan};

#[derive(Debug, Parser)]
#[command(name = "lomoe", version, about = "Low-rank mixture-of-experts continual segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every step of a configuration from a fresh backbone.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
    },
    /// Append and train the steps of a configuration on top of a checkpoint.
    Continue {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
    },
    /// Per-class Dice of a checkpoint. Without DATA, every registered step
    /// (or only `--task`) is evaluated on its own stored test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Route every image to this step instead of classifying it.
        #[arg(long)]
        task: Option<usize>,
        /// Write the report as JSON lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `synth:<profile>` or a dataset directory.
        data: Option<String>,
        /// Which split of a synthetic dataset to use.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print experts, freeze state, parameter counts, label sets and prompts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fold experts `1..=upto` into dense weights.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, alias = "task")]
        upto: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the step of every image with the support-set classifier.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        data: String,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                _ => 1,
            }
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { config, out: dir, seed, profile } => cmd_train(&config, dir, seed, profile, out),
        Command::Continue { checkpoint, config, out: dir, seed, profile } => {
            cmd_continue(&checkpoint, &config, dir, seed, profile, out)
        }
        Command::Eval { checkpoint, task, out: file, data, split } => {
            cmd_eval(&checkpoint, data.as_deref(), task, split, file.as_deref(), out)
        }
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint, out),
        Command::Merge { checkpoint, upto, out: file } => cmd_merge(&checkpoint, upto, &file, out),
        Command::Classify { checkpoint, data, split, out: file } => {
            cmd_classify(&checkpoint, &data, split, file.as_deref(), out)
        }
    }
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path, seed: Option<u64>, profile: Option<Profile>) -> Result<(RunConfig, ResolvedRun)> {
    let mut cfg = RunConfig::load(path)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    if profile.is_some() {
        cfg.profile = profile;
    }
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let resolved = cfg.resolve(&base)?;
    Ok((cfg, resolved))
}

fn provider(run: &ResolvedRun) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match &run.embeddings {
        Some(p) => {
            let path = if p.is_absolute() { p.clone() } else { run.base_dir.join(p) };
            let f = FileEmbedder::load(&path)?;
            if f.dim() != run.gate.d_txt {
                return Err(Error::config(format!(
                    "embeddings in {} have {} dims, gate.d_txt is {}",
                    path.display(),
                    f.dim(),
                    run.gate.d_txt
                )));
            }
            Box::new(f)
        }
        None => Box::new(HashEmbedder::new(run.gate.d_txt)),
    })
}

/// Step configuration with data paths made absolute, as stored in records.
fn anchored(step: &StepConfig, base: &Path) -> StepConfig {
    let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    StepConfig { folder: step.folder.as_ref().map(abs), test_folder: step.test_folder.as_ref().map(abs), ..step.clone() }
}

fn step_plans(run: &ResolvedRun, out: &mut dyn Write) -> Result<Vec<StepPlan>> {
    let mut plans = Vec::with_capacity(run.steps.len());
    for s in &run.steps {
        let s = anchored(s, &run.base_dir);
        let data = s.load(run.model.image_size, &run.base_dir)?;
        for w in &data.warnings {
            emit(out, format!("warning: {w}"))?;
        }
        let mut train_cfg = run.train;
        if let Some(e) = s.epochs {
            train_cfg.epochs = e;
        }
        plans.push(StepPlan {
            name: s.name.clone(),
            classes: data.classes,
            prompt: s.prompt.clone(),
            train: data.train,
            test: data.test,
            train_cfg,
            source: s.to_source(),
        });
    }
    Ok(plans)
}

fn finish_run(session: &Session, report: &Report, dir: &Path, out: &mut dyn Write) -> Result<()> {
    checkpoint::save(session, &dir.join("final.lmoe"))?;
    write_file(&dir.join("report.jsonl"), &report.to_jsonl())?;
    let table = report.summary_table();
    write_file(&dir.join("summary.txt"), &table)?;
    emit(out, "dice per task (rows: after step; columns: tasks)")?;
    emit(out, table.trim_end())?;
    emit(out, format!("wrote {}", dir.display()))
}

pub fn cmd_train(
    config: &Path,
    dir: Option<PathBuf>,
    seed: Option<u64>,
    profile: Option<Profile>,
    out: &mut dyn Write,
) -> Result<()> {
    let (_, run) = load_config(config, seed, profile)?;
    let dir = dir.or_else(|| run.out.as_ref().map(|o| run.base_dir.join(o))).ok_or_else(|| {
        Error::config("no output directory: pass --out or set `out` in the configuration")
    })?;
    if run.steps.is_empty() {
        return Err(Error::config("steps: the configuration lists no steps"));
    }
    let gate = (run.mode == Mode::Class).then(|| run.gate.clone());
    let model = SegBackbone::new(run.model.clone(), run.mode, gate, run.seed)?;
    let mut session = Session::new(model, run.seed);
    let embedder = provider(&run)?;
    let extractor = PyramidHistogram::default();
    let plan = RunPlan {
        steps: step_plans(&run, out)?,
        init: run.expert_init,
        support_shots: run.support_shots,
        probes: run.probes,
        prior_tests: Vec::new(),
        checkpoint_dir: Some(dir.clone()),
        provider: Some(embedder.as_ref()),
        extractor: &extractor,
    };
    let mut report = Report::default();
    run_continual(&mut session, &plan, &mut report)?;
    finish_run(&session, &report, &dir, out)
}

fn stored_test_split(session: &Session, k: usize) -> Result<Vec<Sample>> {
    let rec = session
        .history
        .iter()
        .find(|r| r.id == k)
        .ok_or_else(|| Error::Validation(format!("checkpoint has no record of step {k}")))?;
    let step = StepConfig::from_source(&rec.source)?;
    Ok(step.load(session.model.config().image_size, Path::new("."))?.test)
}

pub fn cmd_continue(
    ckpt: &Path,
    config: &Path,
    dir: Option<PathBuf>,
    seed: Option<u64>,
    profile: Option<Profile>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut session = checkpoint::load(ckpt)?;
    let (raw, mut run) = load_config(config, seed, profile)?;
    let fixed: Vec<&str> = [
        ("mode", raw.mode.is_some()),
        ("model", raw.model.is_some()),
        ("gate", raw.gate.is_some()),
        ("embeddings", raw.embeddings.is_some() && session.model.mode() == Mode::Task),
    ]
    .into_iter()
    .filter_map(|(k, set)| set.then_some(k))
    .collect();
    if !fixed.is_empty() {
        return Err(Error::config(format!(
            "{}: {} come from the checkpoint and may not be set when continuing",
            config.display(),
            fixed.join(", ")
        )));
    }
    if run.steps.is_empty() {
        return Err(Error::config("steps: the configuration lists no steps"));
    }
    run.model = session.model.config().clone();
    run.mode = session.model.mode();
    if let Some(g) = session.model.gate() {
        run.gate = g.config().clone();
    }
    if let Some(s) = seed.or(raw.seed) {
        session.seed = s;
    }
    let dir = dir.or_else(|| run.out.as_ref().map(|o| run.base_dir.join(o))).ok_or_else(|| {
        Error::config("no output directory: pass --out or set `out` in the configuration")
    })?;
    let mut prior = Vec::with_capacity(session.registry.current_step());
    for k in 1..=session.registry.current_step() {
        prior.push(Some(stored_test_split(&session, k)?));
    }
    let embedder = provider(&run)?;
    let extractor = PyramidHistogram::default();
    let plan = RunPlan {
        steps: step_plans(&run, out)?,
        init: run.expert_init,
        support_shots: run.support_shots,
        probes: run.probes,
        prior_tests: prior,
        checkpoint_dir: Some(dir.clone()),
        provider: Some(embedder.as_ref()),
        extractor: &extractor,
    };
    let mut report = Report::default();
    run_continual(&mut session, &plan, &mut report)?;
    finish_run(&session, &report, &dir, out)
}

/// Loads `synth:<profile>` or a dataset directory.
fn load_data(spec: &str, size: usize, split: Split) -> Result<(Vec<Sample>, Vec<u16>, Option<String>)> {
    if let Some(name) = spec.strip_prefix("synth:") {
        let ts = TaskSpec::named(name)?.with_size(size);
        let ts = match split {
            Split::Train => ts.clone().with_counts(ts.train, 0, 0),
            Split::Test => ts.clone().with_counts(0, 0, ts.test),
        };
        let ds = gen_task_dataset(&ts)?;
        let samples = if split == Split::Train { ds.train } else { ds.test };
        return Ok((samples, ts.classes, Some(name.to_string())));
    }
    let ds = load_folder_dataset(Path::new(spec))?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok((ds.samples, ds.classes, None))
}

/// Routing and rows serving step `k`, honouring merged checkpoints.
fn view(session: &Session, k: usize) -> Result<(Routing, Vec<usize>)> {
    session.registry.task(k)?;
    match session.merged_upto {
        Some(u) if u == k => Ok((Routing::Stack(0), session.model.rows_of_step(k))),
        Some(u) => Err(Error::Validation(format!("merged checkpoint only serves step {u}, not {k}"))),
        None => Ok(session.retained_view(k)),
    }
}

/// The registered step a labelled dataset belongs to: the one whose
/// classes cover every foreground label.
fn owning_task(session: &Session, classes: &[u16], name: Option<&str>) -> Option<usize> {
    let reg = session.registry.tasks();
    if let Some(n) = name {
        if let Some(t) = reg.iter().find(|t| {
            StepConfig::from_source(&session.history.get(t.id - 1).map_or(json!(null), |r| r.source.clone()))
                .is_ok_and(|s| s.synth.as_deref() == Some(n))
        }) {
            return Some(t.id);
        }
    }
    let fg: Vec<u16> = classes.iter().copied().filter(|&c| c != 0).collect();
    reg.iter().find(|t| !fg.is_empty() && fg.iter().all(|c| t.classes.contains(c))).map(|t| t.id)
}

fn dice_line(counts: &DiceCounts, classes: &[u16]) -> String {
    let mut s = format!("dice {:.6}", mean_foreground_dice(counts, classes));
    for &c in classes.iter().filter(|&&c| c != 0) {
        s.push_str(&format!(" class{c}={:.6}", counts.dice(c)));
    }
    s
}

pub fn cmd_eval(
    ckpt: &Path,
    data: Option<&str>,
    task: Option<usize>,
    split: Split,
    report_file: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let session = checkpoint::load(ckpt)?;
    let mut events = Vec::new();
    let Some(data) = data else {
        let tasks: Vec<usize> = match (task, session.merged_upto) {
            (Some(k), _) => vec![k],
            (None, Some(u)) => vec![u],
            (None, None) => (1..=session.registry.current_step()).collect(),
        };
        for k in tasks {
            let test = stored_test_split(&session, k)?;
            let (routing, rows) = view(&session, k)?;
            let classes = session.registry.task(k)?.classes.clone();
            let counts = evaluate(&session.model, &test, routing, &rows)?;
            let dice = mean_foreground_dice(&counts, &classes);
            emit(out, format!("task {k} ({}): {}", session.registry.task(k)?.name, dice_line(&counts, &classes)))?;
            events.push(json!({"event": "eval", "task": k, "dice": dice, "samples": test.len()}));
        }
        return write_events(report_file, &events);
    };
    let (samples, classes, name) = load_data(data, session.model.config().image_size, split)?;
    let labels = session.registry.labels();
    if let Some(bad) = classes.iter().find(|c| !labels.contains(c)) {
        return Err(Error::Validation(format!("dataset class {bad} is not in the checkpoint's label set {labels:?}")));
    }
    let mut counts = DiceCounts::default();
    match (session.model.mode(), task) {
        (Mode::Task, Some(k)) | (Mode::Class, Some(k)) => {
            let (routing, rows) = view(&session, k)?;
            counts = evaluate(&session.model, &samples, routing, &rows)?;
            emit(out, format!("task {k} (explicit): {}", dice_line(&counts, &classes)))?;
        }
        (Mode::Task, None) => {
            let truth = owning_task(&session, &classes, name.as_deref());
            let extractor = PyramidHistogram::default();
            let mut correct = 0usize;
            for s in &samples {
                let k = classify_task(&s.image, &session.registry, &extractor)?;
                correct += (Some(k) == truth) as usize;
                let (routing, rows) = view(&session, k)?;
                let pred = session.model.predict(&s.image, routing, &rows)?;
                counts.add(&pred, &s.mask, &classes);
            }
            emit(out, format!("auto-routed: {}", dice_line(&counts, &classes)))?;
            match truth {
                Some(t) => {
                    let acc = correct as f64 / samples.len().max(1) as f64;
                    emit(out, format!(
                        "classifier accuracy {acc:.4} ({correct}/{}), task confusions {}",
                        samples.len(),
                        samples.len() - correct
                    ))?;
                    events.push(json!({"event": "classifier", "truth": t, "accuracy": acc, "confusions": samples.len() - correct}));
                }
                None => emit(out, "classifier accuracy unavailable: no registered step owns these labels")?,
            }
        }
        (Mode::Class, None) => {
            let rows = session.model.rows_upto(session.registry.current_step());
            counts = evaluate(&session.model, &samples, Routing::Top1, &rows)?;
            emit(out, format!("top-1 routed: {}", dice_line(&counts, &classes)))?;
        }
    }
    let per_class: std::collections::BTreeMap<u16, f64> = classes.iter().map(|&c| (c, counts.dice(c))).collect();
    events.push(json!({
        "event": "eval",
        "data": data,
        "task": task,
        "dice": mean_foreground_dice(&counts, &classes),
        "per_class": per_class,
        "samples": samples.len(),
    }));
    write_events(report_file, &events)
}

fn write_events(file: Option<&Path>, events: &[serde_json::Value]) -> Result<()> {
    match file {
        Some(f) => write_file(f, &events.iter().map(|e| format!("{e}\n")).collect::<String>()),
        None => Ok(()),
    }
}

pub fn cmd_inspect(ckpt: &Path, out: &mut dyn Write) -> Result<()> {
    let s = checkpoint::load(ckpt)?;
    let m = &s.model;
    let c = m.config();
    emit(out, format!("checkpoint {}", ckpt.display()))?;
    emit(out, format!("mode {}", if m.mode() == Mode::Task { "task" } else { "class" }))?;
    emit(out, format!(
        "backbone image {} patch {} d_model {} heads {} layers {} d_ff {} rank {} attention_adapters {}",
        c.image_size, c.patch, c.d_model, c.heads, c.layers, c.d_ff, c.rank, c.attention_adapters
    ))?;
    let lins = m.adapted_linears();
    let frozen = (1..=m.experts()).filter(|&e| lins.iter().all(|l| l.adapters()[e - 1].frozen())).count();
    emit(out, format!("experts {} frozen {}", m.experts(), frozen))?;
    if let Some(u) = s.merged_upto {
        emit(out, format!("merged experts 1..={u} into dense weights; adapters 0"))?;
    }
    emit(out, format!("step {}", s.registry.current_step()))?;
    emit(out, format!("labels {:?}", s.registry.labels()))?;
    for t in s.registry.tasks() {
        emit(out, format!(
            "task {} name {:?} expert {} classes {:?} prompt {}",
            t.id,
            t.name,
            t.expert,
            t.classes,
            t.prompt.as_deref().map_or("-".to_string(), |p| format!("{p:?}"))
        ))?;
    }
    for r in &s.history {
        emit(out, format!("record step {} dice {:.6} probes {} checksum {:016x}", r.id, r.dice, r.probe_count, r.probe_checksum))?;
    }
    let (tr, total) = (m.trainable_param_count(), m.total_param_count());
    emit(out, format!("params trainable {tr} total {total} ratio {:.6}", tr as f64 / total as f64))?;
    let params = m.params();
    emit(out, format!("tensors {} frozen {}", params.len(), params.iter().filter(|p| !p.trainable).count()))?;
    Ok(())
}

pub fn cmd_merge(ckpt: &Path, upto: usize, file: &Path, out: &mut dyn Write) -> Result<()> {
    let s = checkpoint::load(ckpt)?;
    let merged = checkpoint::merge(&s, upto)?;
    checkpoint::save(&merged, file)?;
    emit(out, format!("merged experts 1..={upto} of {} into {}", s.model.experts(), file.display()))
}

pub fn cmd_classify(ckpt: &Path, data: &str, split: Split, file: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let s = checkpoint::load(ckpt)?;
    let (samples, classes, name) = load_data(data, s.model.config().image_size, split)?;
    let truth = owning_task(&s, &classes, name.as_deref());
    let extractor = PyramidHistogram::default();
    let mut events = Vec::with_capacity(samples.len());
    let mut correct = 0;
    for (i, sample) in samples.iter().enumerate() {
        let k = classify_task(&sample.image, &s.registry, &extractor)?;
        correct += (Some(k) == truth) as usize;
        emit(out, format!("{i} {k}"))?;
        events.push(json!({"index": i, "task": k}));
    }
    if let Some(t) = truth {
        emit(out, format!(
            "classifier accuracy {:.4} ({correct}/{}) against step {t}",
            correct as f64 / samples.len().max(1) as f64,
            samples.len()
        ))?;
    }
    write_events(file, &events)
}
