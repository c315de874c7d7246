use std::path::{Path, PathBuf};
use std::process::Command;

use lomoe::checkpoint;
use lomoe::cli::{cmd_classify, cmd_continue, cmd_eval, cmd_inspect, cmd_merge, cmd_train, Split};
use lomoe::Error;

const TINY: &str = "seed = 3
[model]
image_size = 16
patch = 4
d_model = 16
heads = 2
layers = 1
d_ff = 32
rank = 2
[train]
epochs = 2
batch_size = 4
warmup_epochs = 1
";

fn step(name: &str, synth: &str) -> String {
    format!("\n[[steps]]\nname = \"{name}\"\nsynth = \"{synth}\"\ntrain = 6\ntest = 4\n")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn train_two_steps(dir: &Path) -> PathBuf {
    let cfg = write(dir, "run.toml", &format!("{TINY}{}{}", step("a", "task-a"), step("b", "task-b")));
    let out = dir.join("run");
    cmd_train(&cfg, Some(out.clone()), None, None, &mut Vec::new()).unwrap();
    out
}

fn text(f: impl FnOnce(&mut Vec<u8>) -> lomoe::Result<()>) -> String {
    let mut buf = Vec::new();
    f(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn train_writes_checkpoints_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    for f in ["step1.lmoe", "step2.lmoe", "final.lmoe", "report.jsonl", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(out.join("step2.lmoe")).unwrap(), std::fs::read(out.join("final.lmoe")).unwrap());
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("after_step a b"));
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn inspect_reports_experts_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let one = text(|b| cmd_inspect(&out.join("step1.lmoe"), b));
    assert!(one.contains("experts 1 frozen 0"), "{one}");
    let two = text(|b| cmd_inspect(&out.join("step2.lmoe"), b));
    assert!(two.contains("experts 2 frozen 1"), "{two}");
    assert!(two.contains("labels [0, 1, 2, 3]"), "{two}");
    let s = checkpoint::load(&out.join("step2.lmoe")).unwrap();
    let line = format!("params trainable {} total {}", s.model.trainable_param_count(), s.model.total_param_count());
    assert!(two.contains(&line), "{two}");
}

#[test]
fn eval_reproduces_the_recorded_dice() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let s = checkpoint::load(&out.join("final.lmoe")).unwrap();
    let printed = text(|b| cmd_eval(&out.join("final.lmoe"), None, None, Split::Test, None, b));
    for r in &s.history {
        assert!(printed.contains(&format!("task {} ({}): dice {:.6}", r.id, r.name, r.dice)), "{printed}");
    }
    let explicit = text(|b| cmd_eval(&out.join("final.lmoe"), Some("synth:task-b"), Some(2), Split::Test, None, b));
    assert!(explicit.starts_with("task 2 (explicit)"), "{explicit}");
}

#[test]
fn eval_rejects_foreign_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let err = cmd_eval(&out.join("final.lmoe"), Some("synth:lesion"), None, Split::Test, None, &mut Vec::new());
    assert!(matches!(err, Err(Error::Validation(_))), "{err:?}");
}

#[test]
fn merged_checkpoint_serves_only_its_task() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let merged = tmp.path().join("merged.lmoe");
    let err = cmd_merge(&out.join("final.lmoe"), 3, &merged, &mut Vec::new());
    assert!(matches!(err, Err(Error::Routing(_))));
    cmd_merge(&out.join("final.lmoe"), 2, &merged, &mut Vec::new()).unwrap();
    let listing = text(|b| cmd_inspect(&merged, b));
    assert!(listing.contains("experts 0"), "{listing}");
    let err = cmd_eval(&merged, None, Some(1), Split::Test, None, &mut Vec::new());
    assert!(matches!(err, Err(Error::Validation(_))));
    let s = checkpoint::load(&out.join("final.lmoe")).unwrap();
    let served = text(|b| cmd_eval(&merged, None, Some(2), Split::Test, None, b));
    assert!(served.contains(&format!("dice {:.4}", s.history[1].dice)), "{served}");
}

#[test]
fn continue_refuses_architecture_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let cfg = write(tmp.path(), "more.toml", &format!("[model]\nrank = 2\n{}", step("c", "task-c")));
    let err = cmd_continue(&out.join("final.lmoe"), &cfg, Some(tmp.path().join("more")), None, None, &mut Vec::new());
    assert!(matches!(&err, Err(Error::Config(m)) if m.contains("model")), "{err:?}");
}

#[test]
fn continue_keeps_earlier_tensors_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let cfg = write(tmp.path(), "more.toml", &format!("[train]\nepochs = 1\nwarmup_epochs = 0\n{}", step("c", "task-c")));
    let more = tmp.path().join("more");
    cmd_continue(&out.join("final.lmoe"), &cfg, Some(more.clone()), None, None, &mut Vec::new()).unwrap();
    let before = checkpoint::load(&out.join("final.lmoe")).unwrap();
    let after = checkpoint::load(&more.join("final.lmoe")).unwrap();
    assert_eq!(after.model.experts(), 3);
    for p in before.model.params() {
        let q = after.model.params().into_iter().find(|q| q.name == p.name).unwrap().clone();
        assert!(p.value.bit_eq(&q.value), "{}", p.name);
        assert!(!q.trainable, "{}", p.name);
    }
    assert_eq!(after.history[..2], before.history[..]);
}

#[test]
fn classify_reports_accuracy_for_known_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let printed = text(|b| cmd_classify(&out.join("final.lmoe"), "synth:task-b", Split::Test, None, b));
    assert!(printed.contains("against step 2"), "{printed}");
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train_two_steps(tmp.path());
    let ck = out.join("final.lmoe");
    let before = std::fs::read(&ck).unwrap();
    cmd_inspect(&ck, &mut Vec::new()).unwrap();
    cmd_eval(&ck, None, None, Split::Test, None, &mut Vec::new()).unwrap();
    cmd_classify(&ck, "synth:task-a", Split::Train, None, &mut Vec::new()).unwrap();
    cmd_merge(&ck, 1, &tmp.path().join("m.lmoe"), &mut Vec::new()).unwrap();
    assert_eq!(std::fs::read(&ck).unwrap(), before);
}

#[test]
fn unknown_config_keys_are_all_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "colour = 1\n[train]\nepoch = 3\n[[steps]]\nname = \"a\"\nsize = 4\n");
    let err = cmd_train(&cfg, Some(tmp.path().join("o")), None, None, &mut Vec::new()).unwrap_err().to_string();
    for k in ["colour", "train.epoch", "steps[0].size"] {
        assert!(err.contains(k), "{err}");
    }
}

#[test]
fn binary_exits_nonzero_on_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_lomoe");
    let junk = write(tmp.path(), "junk.lmoe", "LMOX0000");
    let run = |args: &[&str]| Command::new(bin).args(args).env("LOMOE_THREADS", "1").output().unwrap();
    let o = run(&["inspect", "--checkpoint", junk.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte 0"), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!run(&["eval"]).status.success());
    assert!(!run(&["train", "--config", "/nonexistent.toml"]).status.success());
    let cfg = write(tmp.path(), "ok.toml", &format!("{TINY}{}", step("a", "task-a")));
    let out = tmp.path().join("o");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = Command::new(bin).args(args).env("LOMOE_THREADS", "zero").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("LOMOE_THREADS"));
    assert!(run(&args).status.success());
}

#[test]
fn demo_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["demo_task.toml", "demo_class.toml"] {
        let path = dir.join(name);
        let run = lomoe::config::RunConfig::load(&path).unwrap().resolve(&dir).unwrap();
        assert!(!run.steps.is_empty(), "{name}");
    }
}
