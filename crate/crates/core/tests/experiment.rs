use std::fs;
use std::path::Path;

use usercl::engine::TrainConfig;
use usercl::experiment::checkpoint::load_checkpoint;
use usercl::experiment::runner::{checkpoint_path, RECORDS_FILE};
use usercl::experiment::*;
use usercl::metrics::{build_results_matrix, MetricRecord};
use usercl::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
tasks = "three-task"
users = 160
vocab = 30
seq_len = 8
dim = 8
dilations = [1, 2]
kernel_width = 2
batch_size = 32
epochs = 2
pretrain_epochs = 2
lr = 0.003
pretrain_lr = 0.003
"#,
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn records(dir: &Path) -> Vec<MetricRecord> {
    runner::read_jsonl(&dir.join(RECORDS_FILE)).unwrap()
}

#[test]
fn a_run_fills_the_results_matrix_and_checkpoints_every_task() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let summary = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!((summary.completed, summary.total), (3, 3));
    for s in 0..3 {
        assert!(checkpoint_path(tmp.path(), s).exists());
    }
    let run = load_run(tmp.path()).unwrap();
    let m = build_results_matrix(&run.records, &run.manifest.tasks).unwrap();
    assert_eq!(m.cells.len(), 6);
    assert!(m.missing().is_empty());
    assert!(run.timings.iter().all(|t| t.seconds >= 0.0));
    assert!(!run.timings.is_empty());
}

#[test]
fn interrupted_runs_resume_to_the_same_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&tiny(&a), &RunOptions::default()).unwrap();
    let partial = run_experiment(&tiny(&b), &RunOptions { stop_after: Some(2), ..RunOptions::default() }).unwrap();
    assert_eq!(partial.completed, 2);
    let done = run_experiment(&tiny(&b), &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(done.completed, 3);
    assert_eq!(fs::read(a.join(RECORDS_FILE)).unwrap(), fs::read(b.join(RECORDS_FILE)).unwrap());

    // A checkpoint written after stage 2 but followed by a crash mid-stage-3 leaves extra lines.
    let mut text = fs::read_to_string(b.join(RECORDS_FILE)).unwrap();
    fs::remove_file(checkpoint_path(&b, 2)).unwrap();
    text.push_str(&text.lines().last().unwrap().to_string());
    text.push('\n');
    fs::write(b.join(RECORDS_FILE), text).unwrap();
    run_experiment(&tiny(&b), &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(fs::read(a.join(RECORDS_FILE)).unwrap(), fs::read(b.join(RECORDS_FILE)).unwrap());
}

#[test]
fn resuming_with_another_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&tiny(tmp.path()), &RunOptions { stop_after: Some(1), ..RunOptions::default() }).unwrap();
    let mut other = tiny(tmp.path());
    other.alpha = 0.1;
    let err = run_experiment(&other, &RunOptions { resume: true, ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, Error::ResumeMismatch(_)), "{err}");
    assert!(err.is_config());
}

#[test]
fn checkpoints_reproduce_inference_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    run_experiment(&cfg, &RunOptions::default()).unwrap();
    let bundle = cfg.prepare_bundle().unwrap();
    let spec = cfg.model_spec(&bundle);
    let (state, info) = load_checkpoint(&checkpoint_path(tmp.path(), 2), spec.clone()).unwrap();
    assert_eq!(info.completed, 3);
    let probe: Vec<&[usize]> = bundle.users.iter().take(16).map(|u| &u.items[..u.items.len() - 1]).collect();
    let logits = spec.infer(&state.models[0], 2, 2, cfg.s_max, &probe).unwrap();
    let (again, _) = load_checkpoint(&checkpoint_path(tmp.path(), 2), spec.clone()).unwrap();
    let second = spec.infer(&again.models[0], 2, 2, cfg.s_max, &probe).unwrap();
    assert_eq!(logits, second);
    let stream = records(tmp.path());
    let evaluated = evaluate_run(&cfg, None, "test").unwrap();
    for e in evaluated {
        let logged = stream.iter().find(|r| r.stage == 2 && r.epoch.is_none() && r.task == e.task).unwrap();
        assert_eq!(logged.value.to_bits(), e.value.to_bits(), "{}", e.task);
    }
}

#[test]
fn shared_source_parameters_skip_pretraining() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&tiny(&a), &RunOptions { stop_after: Some(1), ..RunOptions::default() }).unwrap();
    let mut naive = tiny(&b);
    naive.alpha = 0.0;
    run_experiment(&naive, &RunOptions { init_from: Some(a.clone()), ..RunOptions::default() }).unwrap();
    let first = |d: &Path| records(d).into_iter().find(|r| r.epoch.is_none()).unwrap();
    assert_eq!(first(&a).value.to_bits(), first(&b).value.to_bits());
    assert!(records(&b).iter().all(|r| r.stage > 0 || r.epoch.is_none()));

    let mut wider = tiny(&tmp.path().join("c"));
    wider.dim = 12;
    let err = run_experiment(&wider, &RunOptions { init_from: Some(a), ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, Error::ResumeMismatch(_)), "{err}");
}

#[test]
fn reversed_order_keeps_the_source_task_first() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.order = "reversed".into();
    cfg.epochs = 1;
    run_experiment(&cfg, &RunOptions::default()).unwrap();
    let run = load_run(tmp.path()).unwrap();
    assert_eq!(run.manifest.tasks, ["watch", "age", "profile"]);
    assert!(render_report(&[run]).unwrap().text.contains("watch   age"));
}

fn fixture(name: &str) -> RunData {
    load_run(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report").join(name)).unwrap()
}

#[test]
fn report_matches_golden_file() {
    let runs = [fixture("teracon_fwd"), fixture("sinmo_fwd")];
    let report = render_report(&runs).unwrap();
    let golden = include_str!("fixtures/report/expected.txt");
    assert_eq!(report.text, golden);
    assert!(report.warnings.is_empty());
}

/// A run whose every post-stage cell equals the task's final score.
fn flat_run(label: &str, tasks: &[(&str, f64)]) -> RunData {
    let mut run = fixture("teracon_fwd");
    run.label = label.into();
    run.manifest.tasks = tasks.iter().map(|(t, _)| t.to_string()).collect();
    run.records.clear();
    for stage in 0..tasks.len() {
        for &(task, value) in &tasks[..=stage] {
            run.records.push(MetricRecord {
                method: "teracon".into(),
                order: "forward".into(),
                stage,
                task: task.into(),
                epoch: None,
                split: "test".into(),
                metric: "acc".into(),
                value,
            });
        }
    }
    run
}

#[test]
fn noisy_runs_report_bracketed_degradation() {
    assert_eq!(report::degradation(0.45, 0.5).map(|v| (v * 1e9).round() / 1e9), Some(-10.0));
    let clean = flat_run("clean", &[("watch", 0.1), ("click", 0.2), ("age", 0.5)]);
    let same = flat_run("same", &[("watch", 0.1), ("click", 0.2), ("noise", 0.02), ("age", 0.5)]);
    let worse = flat_run("worse", &[("watch", 0.1), ("click", 0.2), ("noise", 0.02), ("age", 0.4)]);
    let text = render_report(&[clean, same, worse]).unwrap().text;
    let section = &text[text.find("noisy task:").unwrap()..];
    let row = |label: &str| section.lines().find(|l| l.starts_with(&format!("{label} "))).unwrap().to_string();
    let same = row("same");
    assert!(same.contains("0.1000 [0.00%]") && same.contains("0.5000 [0.00%]"), "{same}");
    assert!(same.trim_end().ends_with("0.00%"), "{same}");
    let worse = row("worse");
    assert!(worse.contains("0.4000 [-20.00%]") && worse.trim_end().ends_with("-20.00%"), "{worse}");
}

#[test]
fn missing_cells_are_warned_about() {
    let mut run = fixture("teracon_fwd");
    run.records.retain(|r| !(r.stage == 1 && r.task == "click"));
    let report = render_report(&[run]).unwrap();
    assert!(report.warnings.iter().any(|w| w.contains("(1,1)")));
    assert!(report.text.contains("warning:"));
}

#[test]
fn train_config_uses_per_task_learning_rates() {
    let mut cfg = ExperimentConfig::default();
    cfg.task_lr = vec![0.01, 0.02];
    assert_eq!(cfg.train_config(1).lr, 0.02);
    assert_eq!(cfg.train_config(5).lr, cfg.lr);
    assert_eq!(TrainConfig::default().s_max, cfg.train_config(0).s_max);
}
