use std::path::Path;

use super::*;
use crate::data::save_dataset;
use crate::ids::ClassId;
use crate::protocol::{IncrementKind, IncrementSpec};

fn small_data() -> Dataset {
    SyntheticSpec::toy(2, 2, 6, 30, 1.0, 11).generate().unwrap()
}

fn small_plan() -> IncrementPlan {
    let mut a = IncrementSpec::new(IncrementKind::Disease, vec![ClassId(0), ClassId(1)], DomainId(0));
    let mut b = IncrementSpec::new(IncrementKind::Dataset, vec![ClassId(2), ClassId(3)], DomainId(1));
    for inc in [&mut a, &mut b] {
        inc.epochs = 2;
        inc.new_fraction = 1.0;
    }
    IncrementPlan {
        increments: vec![a, b],
        hidden: vec![8],
        ..IncrementPlan::default()
    }
}

fn config(taus: Vec<f64>, seeds: Vec<u64>, arms: Vec<Arm>) -> ExperimentConfig {
    ExperimentConfig {
        plan: small_plan(),
        data: DataSource {
            synthetic: None,
            csv: Some("unused.csv".into()),
        },
        sweep: SweepAxes { taus, seeds, arms },
        output: None,
        workers: 2,
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn median_of_odd_even_and_empty() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[f64::NAN, 1.0]), Some(1.0));
}

#[test]
fn run_ids_and_order() {
    let c = config(vec![1.5, 2.0], vec![0, 1], vec![Arm::WithMd, Arm::WithoutMd]);
    let ids: Vec<String> = c.runs().iter().map(RunSpec::id).collect();
    assert_eq!(ids.len(), 8);
    assert_eq!(ids[0], "with-md-tau1.5-seed0");
    assert_eq!(ids[1], "without-md-tau1.5-seed0");
    assert_eq!(ids[7], "without-md-tau2-seed1");
    let plain = config(vec![], vec![4], vec![Arm::WithMd]);
    assert_eq!(plain.runs()[0].id(), "with-md-seed4");
    let p = plain.runs()[0].plan(&plain.plan);
    assert_eq!(p.seed, 4);
    assert!(p.increments.iter().all(|i| i.tau == 2.0));
}

#[test]
fn config_validation() {
    let mut c = config(vec![2.0], vec![0], vec![Arm::WithMd]);
    c.validate().unwrap();
    c.data.synthetic = Some("x.toml".into());
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.data = DataSource::default();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    for bad in [
        config(vec![0.0], vec![0], vec![Arm::WithMd]),
        config(vec![-1.0], vec![0], vec![Arm::WithMd]),
        config(vec![2.0], vec![], vec![Arm::WithMd]),
        config(vec![2.0], vec![0], vec![]),
        config(vec![2.0, 2.0], vec![0], vec![Arm::WithMd]),
        config(vec![2.0], vec![0, 0], vec![Arm::WithMd]),
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{:?}", bad.sweep);
    }
}

#[test]
fn load_rebases_paths_and_reports_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let text = r#"
workers = 1
output = "out"

[data]
csv = "data.csv"

[sweep]
taus = [1.5, 2.0]
seeds = [1, 2]
arms = ["with-md", "without-md"]

[plan]
seed = 3

[[plan.increments]]
kind = "disease"
classes = [0, 1]
domain = 0
"#;
    fs::write(&path, text).unwrap();
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!(c.data.csv.as_deref(), Some(dir.path().join("data.csv").as_path()));
    assert_eq!(c.output.as_deref(), Some(dir.path().join("out").as_path()));
    assert_eq!(c.sweep.arms, vec![Arm::WithMd, Arm::WithoutMd]);
    assert_eq!(c.plan.increments[0].epochs, 20);

    fs::write(&path, "[data]\ncsv = \"a.csv\"\n\n[sweep]\nbogus = 1\n").unwrap();
    match ExperimentConfig::load(&path) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 5),
        other => panic!("expected format error, got {other:?}"),
    }
    assert!(matches!(
        ExperimentConfig::load(&dir.path().join("missing.toml")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn load_data_from_either_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::toy(1, 2, 3, 10, 1.0, 1);
    let spec_path = dir.path().join("spec.toml");
    fs::write(&spec_path, toml::to_string(&spec).unwrap()).unwrap();
    let csv_path = dir.path().join("d.csv");
    save_dataset(&spec.generate().unwrap(), &csv_path).unwrap();
    let mut c = config(vec![], vec![0], vec![Arm::WithMd]);
    c.data = DataSource {
        synthetic: Some(spec_path),
        csv: None,
    };
    let a = c.load_data().unwrap();
    c.data = DataSource {
        synthetic: None,
        csv: Some(csv_path),
    };
    assert_eq!(a, c.load_data().unwrap());
}

#[test]
fn single_run_summary_equals_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(vec![], vec![7], vec![Arm::WithMd]);
    let report = run_experiment(&c, &small_data(), dir.path()).unwrap();
    assert_eq!(report.runs.len(), 1);
    let run = &report.runs[0];
    let arm = report.arm(Arm::WithMd, None).unwrap();
    assert_eq!(arm.median_accuracy, run.final_accuracy);
    assert_eq!(arm.median_forgetting, run.final_forgetting);
    assert!(run.bookkeeping_ok());
    for f in ["runs.csv", "tau_sweep.csv", "ablation.csv", "summary.md"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let run_dir = dir.path().join(RUNS_DIR).join("with-md-seed7");
    assert!(run_dir.join(RUN_FILE).is_file());
    let metrics = String::from_utf8(read(&run_dir.join("metrics.csv"))).unwrap();
    assert!(metrics.starts_with("increment,domain,class,accuracy,tpr,ppv,f1,forgetting\n"));
    let record: RunRecord = serde_json::from_slice(&read(&run_dir.join(RUN_FILE))).unwrap();
    assert_eq!(record.logs.len(), 2);
    assert_eq!(record.logs[1].evaluation.accuracy, run.final_accuracy.unwrap());
}

#[test]
fn tau_grid_and_paired_ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    let grid = vec![1.5, 2.0, 2.5, 3.0, 3.5];
    let c = config(grid.clone(), vec![0, 1], vec![Arm::WithMd, Arm::WithoutMd]);
    let report = run_experiment(&c, &small_data(), dir.path()).unwrap();
    assert_eq!(report.runs.len(), 20);
    assert_eq!(report.tau_sweep.len(), 2);
    for row in &report.tau_sweep {
        let taus: Vec<Option<f64>> = row.errors.iter().map(|e| e.0).collect();
        assert_eq!(taus, grid.iter().copied().map(Some).collect::<Vec<_>>());
        assert!(row.errors.iter().all(|e| e.1.is_some()));
        let (t, pos) = row.argmin.unwrap();
        let i = grid.iter().position(|g| Some(*g) == t).unwrap();
        let expect = if i == 0 || i == 4 {
            GridPosition::Boundary
        } else {
            GridPosition::Interior
        };
        assert_eq!(pos, expect);
    }
    let csv = String::from_utf8(read(&dir.path().join("tau_sweep.csv"))).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "arm,1.5,2,2.5,3,3.5,argmin_tau,argmin_position"
    );
    for domain in [DomainId(0), DomainId(1)] {
        for tau in &grid {
            let arms: Vec<Arm> = report
                .ablation
                .iter()
                .filter(|r| r.domain == domain && r.tau == Some(*tau))
                .map(|r| r.arm)
                .collect();
            assert_eq!(arms, vec![Arm::WithMd, Arm::WithoutMd]);
        }
    }
    let summary = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(summary.contains("argmin"));
    assert!(summary.contains("All runs log L_IL"));
}

#[test]
fn artifacts_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = config(vec![2.0], vec![0, 1], vec![Arm::WithMd, Arm::ExemplarFreeCe]);
    let data = small_data();
    run_experiment(&c, &data, a.path()).unwrap();
    let mut serial = c.clone();
    serial.workers = 1;
    run_experiment(&serial, &data, b.path()).unwrap();
    for spec in c.runs() {
        for f in [RUN_FILE, "metrics.csv"] {
            let rel = Path::new(RUNS_DIR).join(spec.id()).join(f);
            assert_eq!(
                read(&a.path().join(&rel)),
                read(&b.path().join(&rel)),
                "{}",
                rel.display()
            );
        }
    }
    for f in ["runs.csv", "tau_sweep.csv", "ablation.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let body = |d: &Path| {
        let s = fs::read_to_string(d.join("summary.md")).unwrap();
        s.split_once('\n').unwrap().1.to_string()
    };
    assert_eq!(body(a.path()), body(b.path()));
}

#[test]
fn report_recomputes_and_flags_tampered_log() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(vec![], vec![0, 1, 2, 3, 4], vec![Arm::WithMd]);
    let first = run_experiment(&c, &small_data(), dir.path()).unwrap();
    assert!(first.flagged().is_empty());
    let accs: Vec<f64> = first.runs.iter().filter_map(|r| r.final_accuracy).collect();
    assert_eq!(first.arms[0].median_accuracy, median(&accs));

    let path = dir.path().join(RUNS_DIR).join("with-md-seed2").join(RUN_FILE);
    let mut record: RunRecord = serde_json::from_slice(&read(&path)).unwrap();
    record.logs[0].epochs[0].l_il += 1e-6;
    fs::write(&path, serde_json::to_vec(&record).unwrap()).unwrap();
    let again = report(dir.path()).unwrap();
    let flagged: Vec<&str> = again.flagged().iter().map(|r| r.run_id.as_str()).collect();
    assert_eq!(flagged, vec!["with-md-seed2"]);
    let summary = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(summary.contains("FLAGGED"));
    assert!(summary.contains("with-md-seed2"));
    let runs_csv = String::from_utf8(read(&dir.path().join("runs.csv"))).unwrap();
    assert!(runs_csv
        .lines()
        .any(|l| l.starts_with("with-md-seed2,") && l.ends_with(",false")));
}

#[test]
fn report_lists_corrupt_and_missing_logs() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(vec![], vec![0, 1, 2], vec![Arm::WithMd]);
    run_experiment(&c, &small_data(), dir.path()).unwrap();
    let runs = dir.path().join(RUNS_DIR);
    fs::write(runs.join("with-md-seed0").join(RUN_FILE), b"{ not json").unwrap();
    fs::remove_file(runs.join("with-md-seed1").join(RUN_FILE)).unwrap();
    match report(dir.path()) {
        Err(Error::Report(msg)) => {
            assert!(msg.contains("with-md-seed0"), "{msg}");
            assert!(msg.contains("with-md-seed1"), "{msg}");
            assert!(!msg.contains("with-md-seed2"), "{msg}");
        }
        other => panic!("expected report error, got {other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(report(empty.path()).is_err());
}

#[test]
fn unresolved_classes_fail_before_any_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(vec![], vec![0], vec![Arm::WithMd]);
    c.plan.increments[0].classes = vec![ClassId(0), ClassId(42)];
    assert!(matches!(
        run_experiment(&c, &small_data(), dir.path()),
        Err(Error::Config(_))
    ));
    assert!(!dir.path().join(RUNS_DIR).join("with-md-seed0").exists());
}

#[test]
fn numeric_failure_names_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data();
    let huge: Vec<f64> = data.features().as_slice().iter().map(|v| v * 1e300).collect();
    let features = crate::numerics::DenseMatrix::new(data.len(), data.dim(), huge).unwrap();
    let data = Dataset::new(
        features,
        data.labels().to_vec(),
        data.domains().to_vec(),
        data.splits().to_vec(),
    )
    .unwrap();
    let c = config(vec![], vec![5], vec![Arm::WithMd]);
    match run_experiment(&c, &data, dir.path()) {
        Err(Error::Run { run, source }) => {
            assert_eq!(run, "with-md-seed5");
            assert!(matches!(*source, Error::Numeric(_)), "{source}");
        }
        other => panic!("expected run error, got {other:?}"),
    }
}
