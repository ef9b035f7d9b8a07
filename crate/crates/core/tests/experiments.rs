use std::path::Path;

use proptest::prelude::*;
use stada::experiments::*;

fn record(name: &str, seed: u64, acc: &[f64]) -> ResultRecord {
    let best = acc.iter().cloned().fold(f64::MIN, f64::max);
    ResultRecord {
        name: name.into(),
        traditional: "None".into(),
        styles: name.into(),
        backbone: "small_cnn".into(),
        seed,
        best_val_accuracy: best,
        best_epoch: acc.iter().position(|&a| a == best).unwrap() + 1,
        per_epoch_val_accuracy: acc.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        dataset_hash: "d".repeat(64),
        config_hash: format!("{name}-{seed}"),
        timestamp: "1970-01-01T00:00:00Z".into(),
        toolkit_version: TOOLKIT_VERSION.into(),
    }
}

const SMALL_MATRIX: &str = r#"{
  "dataset": "toy:classes=3,per_class=10,size=32,seed=3",
  "seeds": [0, 1],
  "classifier": {"epochs": 2},
  "experiments": [
    {"name": "None"},
    {"name": "Flipping", "traditional": ["flip_horizontal"], "seeds": [4]}
  ]
}"#;

proptest! {
    #[test]
    fn ledger_round_trips_and_chains(accs in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..6), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let ledger = dir.path().join("ledger.csv");
        let rows: Vec<ResultRecord> = accs.iter().enumerate().map(|(i, a)| record(&format!("r{i}"), i as u64, a)).collect();
        for r in &rows {
            append_record(&ledger, r).unwrap();
        }
        let back = read_ledger(&ledger).unwrap();
        prop_assert_eq!(&back, &rows);
        for r in &back {
            prop_assert_eq!(r.per_epoch().iter().cloned().fold(f64::MIN, f64::max), r.best_val_accuracy);
        }
        prop_assert_eq!(verify_chain(&ledger).unwrap(), rows.len());
    }

    #[test]
    fn summary_statistics(accs in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        let rows: Vec<ResultRecord> = accs.iter().enumerate().map(|(i, &a)| {
            let mut r = record("Wave", i as u64, &[a]);
            r.config_hash = format!("h{i}");
            r
        }).collect();
        let s = summarize(&rows, GroupBy::Cell);
        prop_assert_eq!(s.len(), 1);
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        prop_assert!((s[0].mean - mean).abs() < 1e-12);
        prop_assert_eq!(s[0].n, accs.len());
        if accs.len() > 1 {
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assert!((s[0].std - var.sqrt()).abs() < 1e-12);
        } else {
            prop_assert_eq!(s[0].std, 0.0);
        }
    }
}

#[test]
fn tampering_breaks_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("l.csv");
    append_record(&ledger, &record("a", 0, &[0.5])).unwrap();
    append_record(&ledger, &record("b", 0, &[0.7])).unwrap();
    let text = std::fs::read_to_string(&ledger)
        .unwrap()
        .replace("0.7", "0.9");
    std::fs::write(&ledger, text).unwrap();
    assert!(matches!(
        verify_chain(&ledger),
        Err(ExperimentError::Chain { row: 2, .. })
    ));
}

#[test]
fn reruns_keep_the_latest_row() {
    let a = record("a", 0, &[0.4]);
    let mut a2 = a.clone();
    a2.best_val_accuracy = 0.9;
    let rows = latest_records(&[a.clone(), record("b", 0, &[0.1]), a2.clone()]);
    assert_eq!(rows.len(), 2);
    assert!(rows.contains(&a2));
    assert!(!rows.contains(&a));
}

#[test]
fn empty_report() {
    assert_eq!(render_table(&[], GroupBy::Cell), "no results\n");
    assert!(read_ledger(Path::new("/nonexistent/ledger.csv"))
        .unwrap()
        .is_empty());
}

#[test]
fn matrix_parsing() {
    let m = Matrix::parse(Path::new("/x/m.json"), SMALL_MATRIX).unwrap();
    assert_eq!(m.configs.len(), 3);
    assert_eq!(m.configs[2].seed, 4);
    assert_eq!(m.configs[2].classifier.seed, 4);
    assert_eq!(m.configs[0].classifier.epochs, 2);
    assert_ne!(m.configs[0].config_hash(), m.configs[1].config_hash());
    let again = Matrix::parse(Path::new("/y/m.json"), SMALL_MATRIX).unwrap();
    assert_eq!(again.configs[0].config_hash(), m.configs[0].config_hash());
    assert_eq!(m.checkpoint_path("Wave"), Path::new("/x/styles/Wave.ckpt"));

    let unknown = SMALL_MATRIX.replace("\"seeds\": [0, 1]", "\"seedz\": [0, 1]");
    assert!(Matrix::parse(Path::new("m.json"), &unknown).is_err());
    let dup = SMALL_MATRIX.replace("\"name\": \"Flipping\"", "\"name\": \"None\"");
    assert!(Matrix::parse(Path::new("m.json"), &dup)
        .unwrap_err()
        .to_string()
        .contains("unique"));
    let no_seeds = SMALL_MATRIX.replace("\"seeds\": [4]", "\"seeds\": []");
    assert!(Matrix::parse(Path::new("m.json"), &no_seeds).is_err());
    let bad_cls = SMALL_MATRIX.replace("\"epochs\": 2", "\"epochs\": 0");
    assert!(Matrix::parse(Path::new("m.json"), &bad_cls).is_err());
}

#[test]
fn shipped_matrices_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("matrices");
    for (file, cells) in [
        ("traditional.json", 3),
        ("single_style.json", 8),
        ("combined.json", 8),
        ("content_weight.json", 3),
        ("vgg19.json", 6),
    ] {
        let m = Matrix::load(&dir.join(file)).unwrap();
        assert_eq!(m.configs.len(), cells * 3, "{file}");
    }
}

#[test]
fn toy_references() {
    let r = ToyRef::parse("toy:classes=3,per_class=10,size=32,seed=3")
        .unwrap()
        .unwrap();
    assert_eq!((r.classes, r.per_class, r.size, r.seed), (3, 10, 32, 3));
    assert!(ToyRef::parse("data/caltech").unwrap().is_none());
    let d = ToyRef::parse("toy:classes=2").unwrap().unwrap();
    assert_eq!((d.classes, d.per_class, d.size, d.seed), (2, 60, 32, 0));
    for bad in [
        "toy:classes=9",
        "toy:colour=3",
        "toy:size=x",
        "toy:per_class=1",
    ] {
        assert!(ToyRef::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn matrix_run_skips_done_work_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::parse(&dir.path().join("m.json"), SMALL_MATRIX).unwrap();
    let ledger = dir.path().join("ledger.csv");
    let opts = RunOptions {
        cache_dir: dir.path().join("cache"),
        deterministic: true,
        ..RunOptions::default()
    };
    let first = run_matrix(&m, &ledger, &opts).unwrap();
    assert!(first.succeeded());
    assert_eq!(first.appended.len(), 3);
    for r in &first.appended {
        assert!((0.0..=1.0).contains(&r.best_val_accuracy));
        assert_eq!(r.per_epoch().len(), 2);
        assert_eq!(r.timestamp, "1970-01-01T00:00:00Z");
    }
    let second = run_matrix(&m, &ledger, &opts).unwrap();
    assert_eq!((second.appended.len(), second.skipped.len()), (0, 3));
    let forced = run_matrix(
        &m,
        &ledger,
        &RunOptions {
            force: true,
            ..opts.clone()
        },
    )
    .unwrap();
    assert_eq!(forced.appended.len(), 3);
    let rows = read_ledger(&ledger).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(&rows[..3], &rows[3..]);
    assert_eq!(verify_chain(&ledger).unwrap(), 6);
    let table = render_table(&summarize(&rows, GroupBy::Cell), GroupBy::Cell);
    assert!(table.starts_with("Traditional Method"), "{table}");
    assert_eq!(
        summarize(&rows, GroupBy::Traditional)
            .iter()
            .map(|r| r.n)
            .sum::<usize>(),
        3
    );
}

#[test]
fn missing_style_checkpoint_is_a_per_cell_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_MATRIX.replace(
        "{\"name\": \"None\"}",
        "{\"name\": \"Wave\", \"styles\": [\"Wave\"]}",
    );
    let m = Matrix::parse(&dir.path().join("m.json"), &text).unwrap();
    let opts = RunOptions {
        cache_dir: dir.path().join("cache"),
        ..RunOptions::default()
    };
    let out = run_matrix(&m, &dir.path().join("l.csv"), &opts).unwrap();
    assert_eq!(out.failures.len(), 2);
    assert_eq!(out.appended.len(), 1);
    assert!(out.failures[0].1.to_string().contains("Wave.ckpt"));
}
