use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aeprep::config::ExperimentConfig;
use aeprep::pipeline::{self, Context, Mode, Trained};

const TINY: &str = "\
# tiny end-to-end run
samples_per_class = 4
min_width = 16
min_height = 16
max_width = 20
max_height = 20
side = 16
latent = 4
epochs_stage1 = 1
epochs_stage2 = 1
batch_size = 4
";

fn aep(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aep"));
    cmd.current_dir(dir).args(args).env_remove("AEP_THREADS");
    if let Some(t) = threads {
        cmd.env("AEP_THREADS", t);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got stdout:\n{}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

const RECIPE: [&[&str]; 7] = [
    &["gen-data", "--config", "tiny.cfg", "--out", "data"],
    &["pretrain-ae", "--config", "tiny.cfg", "--out", "runs"],
    &["train", "--config", "tiny.cfg", "--out", "runs", "--mode", "enhanced"],
    &["train", "--config", "tiny.cfg", "--out", "runs", "--mode", "baseline"],
    &["evaluate", "--config", "tiny.cfg", "--out", "runs", "--mode", "enhanced"],
    &["evaluate", "--config", "tiny.cfg", "--out", "runs", "--mode", "baseline"],
    &["compare", "--config", "tiny.cfg", "--out", "runs"],
];

fn recipe(dir: &Path, threads: Option<&str>) -> String {
    RECIPE.iter().map(|args| ok(&aep(dir, args, threads))).collect()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap())).collect();
    out.sort();
    out
}

#[test]
fn help_lists_the_flags() {
    let dir = tempfile::tempdir().unwrap();
    let train = ok(&aep(dir.path(), &["train", "--help"], None));
    for flag in ["--config", "--out", "--mode", "--seed", "--checkpoint", "--data"] {
        assert!(train.contains(flag), "train --help lacks {flag}");
    }
    assert!(train.contains("[default: enhanced]"));
    let top = ok(&aep(dir.path(), &["--help"], None));
    for cmd in ["gen-data", "pretrain-ae", "train", "evaluate", "compare", "AEP_THREADS"] {
        assert!(top.contains(cmd), "--help lacks {cmd}");
    }
    failed(&aep(dir.path(), &["train", "--mode", "fancy"], None));
}

#[test]
fn gen_data_counts_and_repeatability() {
    let dir = setup();
    let text = ok(&aep(dir.path(), &["gen-data", "--config", "tiny.cfg", "--out", "a"], None));
    assert!(text.contains("wrote 16 images"), "{text}");
    assert!(text.contains("happy") && text.contains(" 4"));
    ok(&aep(dir.path(), &["gen-data", "--config", "tiny.cfg", "--out", "b"], None));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 17);
    assert_eq!(manifest, fs::read_to_string(dir.path().join("b/manifest.csv")).unwrap());
    for class in ["angry", "happy", "neutral", "sad"] {
        assert_eq!(fs::read_dir(dir.path().join("a").join(class)).unwrap().count(), 4);
    }
}

#[test]
fn missing_checkpoint_names_the_remedy() {
    let dir = setup();
    ok(&aep(dir.path(), RECIPE[0], None));
    let err = failed(&aep(dir.path(), RECIPE[2], None));
    assert!(err.contains("stage-1 checkpoint") && err.contains("aep pretrain-ae"), "{err}");
    let err = failed(&aep(dir.path(), RECIPE[4], None));
    assert!(err.contains("aep train --mode enhanced"), "{err}");
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "side = 8\n").unwrap();
    let err = failed(&aep(dir.path(), &["gen-data", "--config", "bad.cfg", "--out", "d"], None));
    assert!(err.contains("side"), "{err}");
    fs::write(dir.path().join("typo.cfg"), "sied = 48\n").unwrap();
    failed(&aep(dir.path(), &["gen-data", "--config", "typo.cfg", "--out", "d"], None));
    for t in ["0", "many"] {
        let err = failed(&aep(dir.path(), RECIPE[0], Some(t)));
        assert!(err.contains("AEP_THREADS"), "{err}");
    }
}

#[test]
fn recipe_is_deterministic_and_thread_count_free() {
    let (one, two) = (setup(), setup());
    let text = recipe(one.path(), None);
    assert!(text.contains("Paired test samples"), "{text}");
    recipe(two.path(), Some("2"));
    let (a, b) = (files(&one.path().join("runs")), files(&two.path().join("runs")));
    assert!(a.iter().any(|(p, _)| p.to_string_lossy() == "report_seed1.txt"));
    assert_eq!(a.len(), b.len());
    for ((pa, da), (pb, db)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs", pa.display());
    }
    // rerunning into the same directory overwrites with identical bytes
    recipe(one.path(), None);
    assert_eq!(files(&one.path().join("runs")), a);
}

#[test]
fn compare_rejects_mismatched_test_sets() {
    let dir = setup();
    recipe(dir.path(), None);
    let path = dir.path().join("runs/predictions_enhanced_seed1.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = failed(&aep(dir.path(), RECIPE[6], None));
    assert!(err.contains("pairing error"), "{err}");
}

#[test]
fn identical_predictions_compare_as_no_change() {
    let dir = setup();
    recipe(dir.path(), None);
    let runs = dir.path().join("runs");
    fs::copy(runs.join("predictions_baseline_seed1.csv"), runs.join("predictions_enhanced_seed1.csv")).unwrap();
    let text = ok(&aep(dir.path(), RECIPE[6], None));
    assert!(text.contains("Improvement: +0.0 points"), "{text}");
    assert!(text.contains("McNemar: undefined"), "{text}");
}

#[test]
fn reloaded_checkpoints_reproduce_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::parse(TINY).unwrap();
    config.epochs_stage2 = 5;
    let data = dir.path().join("data");
    let ctx = Context { config, data: data.clone(), out: dir.path().join("runs"), threads: 1 };
    pipeline::gen_data(&Context { out: data, ..ctx.clone() }).unwrap();
    pipeline::pretrain_ae(&ctx).unwrap();
    let split = pipeline::load_split(&ctx).unwrap();
    for mode in [Mode::Enhanced, Mode::Baseline] {
        pipeline::train_model(&ctx, mode, None).unwrap();
        let eval = pipeline::evaluate(&ctx, mode, None).unwrap();
        let model = Trained::load(&ctx.model_checkpoint(mode), mode, &ctx.config).unwrap();
        let preds = model.predict_all(&split.test, 1).unwrap();
        let written: Vec<String> = fs::read_to_string(ctx.artifact(&format!("predictions_{mode}"), "csv")).unwrap().lines().skip(1).map(String::from).collect();
        let expected: Vec<String> = split.test.iter().zip(&preds).map(|(s, p)| format!("{},{},{p}", s.source, s.label)).collect();
        assert_eq!(written, expected, "{mode}");
        let correct = split.test.iter().zip(&preds).filter(|(s, &p)| s.label == p).count();
        assert_eq!(eval.metrics.accuracy, correct as f64 / split.test.len() as f64);
    }
}
