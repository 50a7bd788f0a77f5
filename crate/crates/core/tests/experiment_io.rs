//! End-to-end tests of the experiment layer: sweep execution, run-directory
//! contents, summary schema, and report regeneration from stored files.

use std::fs;

use ecdnn::config::ExperimentSpec;
use ecdnn::experiment::{self, SweepSummary};
use ecdnn::harness::Strategy;

fn tiny_spec(out: &std::path::Path) -> ExperimentSpec {
    let text = format!(
        r#"
name = "tiny"
output_dir = "{}"

[dataset.gaussians]
n = 300
dim = 2
classes = 2
noise = 1.4
seed = 3

[model]
hidden = [8]

[train]
strategies = ["s-dnn", "e-dnn", "ma-dnn", "ec-dnn"]
total_iterations = 60
batch_size = 16
learning_rate = 0.05
execution = "sequential"

[sweep]
taus = [20, 30]
workers = [2]
seeds = [1, 2]
"#,
        out.display()
    );
    ExperimentSpec::from_toml_str(&text).unwrap()
}

#[test]
fn sweep_writes_complete_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let summary = experiment::run_experiment(&spec, tmp.path()).unwrap();
    let sweep_dir = tmp.path().join("tiny");

    // Sweep-level artifacts.
    for file in ["summary.json", "table.txt", "histogram.csv"] {
        assert!(sweep_dir.join(file).is_file(), "missing {file}");
    }
    assert!(sweep_dir.join("error_vs_time_k2.svg").is_file());
    assert!(sweep_dir.join("diff_lg_ma.svg").is_file());
    assert!(sweep_dir.join("diff_lc_ec.svg").is_file());

    // Every grid point got a complete run directory.
    let grid = experiment::sweep_grid(&spec);
    assert_eq!(
        grid.len(),
        2 /* s-dnn seeds */ + 2 /* e-dnn */ + 4 /* ma */ + 4 /* ec */
    );
    for (strategy, tau, workers, seed) in grid {
        let cfg = spec.to_train_config(strategy, tau, workers, seed).unwrap();
        let dir = sweep_dir.join(cfg.run_id());
        for file in [
            "config.toml",
            "VERSION",
            "sync_metrics.csv",
            "train_loss.csv",
            "summary.json",
        ] {
            assert!(dir.join(file).is_file(), "missing {file} in {}", dir.display());
        }
        let version = fs::read_to_string(dir.join("VERSION")).unwrap();
        assert!(version.starts_with("ecdnn "), "bad version stamp: {version}");
    }

    // The summary parses back through its own schema and covers all methods.
    let json = fs::read_to_string(sweep_dir.join("summary.json")).unwrap();
    let parsed: SweepSummary = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.runs.len(), 12);
    for strategy in Strategy::ALL {
        assert!(
            parsed.rows.iter().any(|r| r.strategy == strategy),
            "no table row for {strategy}"
        );
    }
    // The averaging reference gives itself speed 1.
    let ma_g = parsed
        .rows
        .iter()
        .find(|r| r.strategy == Strategy::MaDnn && r.variant == "G")
        .unwrap();
    assert_eq!(ma_g.speed, Some(1.0));
    assert_eq!(summary.rows.len(), parsed.rows.len());
}

#[test]
fn report_rebuilds_the_same_table_from_stored_files() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let first = experiment::run_experiment(&spec, tmp.path()).unwrap();
    let sweep_dir = tmp.path().join("tiny");
    let table_before = fs::read_to_string(sweep_dir.join("table.txt")).unwrap();
    let hist_before = fs::read_to_string(sweep_dir.join("histogram.csv")).unwrap();

    // Wipe the derived artifacts, keep only run directories.
    for file in ["summary.json", "table.txt", "histogram.csv"] {
        fs::remove_file(sweep_dir.join(file)).unwrap();
    }
    let rebuilt = experiment::report(&spec, &sweep_dir).unwrap();
    let table_after = fs::read_to_string(sweep_dir.join("table.txt")).unwrap();
    let hist_after = fs::read_to_string(sweep_dir.join("histogram.csv")).unwrap();
    assert_eq!(table_before, table_after);
    assert_eq!(hist_before, hist_after);
    assert_eq!(first.rows.len(), rebuilt.rows.len());
    for (a, b) in first.rows.iter().zip(&rebuilt.rows) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.error, b.error);
        assert_eq!(a.speed, b.speed);
        assert_eq!(a.tau, b.tau);
    }
}

#[test]
fn run_views_rebuilt_from_disk_match_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let data = spec.dataset.load().unwrap();
    let cfg = spec
        .to_train_config(Strategy::EcDnn, 20, 2, 1)
        .unwrap();
    let (record, dir) = experiment::run_single(&cfg, &data, tmp.path()).unwrap();
    let view = experiment::load_run_view(&dir).unwrap();

    let expected_curve = record.curve(ecdnn::metrics::Variant::Global);
    assert_eq!(view.curve_global.len(), expected_curve.len());
    for ((ta, ea), (tb, eb)) in view.curve_global.iter().zip(&expected_curve) {
        assert_eq!(ta, tb);
        assert_eq!(ea, eb);
    }
    let expected_lc = record.diff_lc_series();
    assert_eq!(view.diff_lc.len(), expected_lc.len());
    for (a, b) in view.diff_lc.iter().zip(&expected_lc) {
        assert!((a - b).abs() < 1e-12);
    }
    // The best-local curve derived from train_loss.csv matches the in-memory
    // selection.
    let expected_l = record.curve(ecdnn::metrics::Variant::BestLocal);
    for ((ta, ea), (tb, eb)) in view.curve_best_local.iter().zip(&expected_l) {
        assert_eq!(ta, tb);
        assert_eq!(ea, eb);
    }
}

#[test]
fn checkpoints_and_relabel_dumps_appear_when_enabled() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(tmp.path());
    spec.train.checkpoints = true;
    spec.train.dump_relabeled = true;
    spec.train.strategies = vec![Strategy::EcDnn];
    spec.sweep.taus = vec![30];
    spec.sweep.seeds = vec![1];
    experiment::run_experiment(&spec, tmp.path()).unwrap();
    let run_dir = tmp.path().join("tiny").join("ec-dnn_k2_tau30_seed1");
    assert!(run_dir.join("checkpoints/checkpoint_t30_worker0.json").is_file());
    assert!(run_dir.join("checkpoints/checkpoint_t60_worker1.json").is_file());
    assert!(run_dir.join("relabel_dumps/relabeled_t30_worker0.csv").is_file());
    let dump =
        fs::read_to_string(run_dir.join("relabel_dumps/relabeled_t30_worker0.csv")).unwrap();
    assert!(dump.starts_with("y,x0,x1,ybar0,ybar1"));
}

#[test]
fn output_root_resolution_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let flag = std::path::Path::new("/flag/root");
    assert_eq!(
        experiment::resolve_output_root(Some(flag), &spec),
        flag.to_path_buf()
    );
    // Without a flag it falls back to the spec (the env override is covered
    // in the CLI tests to keep process-global state out of this binary).
    assert_eq!(
        experiment::resolve_output_root(None, &spec),
        spec.output_dir
    );
}
