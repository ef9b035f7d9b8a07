mod common;

use std::collections::HashSet;

use common::*;
use proptest::prelude::*;
use stada::augmentor::*;
use stada::classify::{split_dataset, train_count};
use stada::image_tensor::ImageTensor;
use stada::toy::write_toy_dataset;

fn image() -> impl Strategy<Value = ImageTensor> {
    (1usize..=3, 1usize..=7).prop_flat_map(|(c, s)| {
        prop::collection::vec(0.0f64..255.0, c * s * s)
            .prop_map(move |d| ImageTensor::from_planes(c, s, s, d))
    })
}

proptest! {
    #[test]
    fn flips_and_quarter_turns_are_exact(img in image()) {
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img.clone());
        prop_assert_eq!(rotate(&img, 0.0), img.clone());
        prop_assert_eq!(rotate(&img, 360.0), img.clone());
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate(&r, 90.0);
        }
        prop_assert_eq!(&r, &img);
        prop_assert_eq!(rotate(&rotate(&img, 90.0), 270.0), img.clone());
        prop_assert_eq!(rotate(&img, 180.0), rotate(&rotate(&img, 90.0), 90.0));
        let mut sorted_a = img.data().to_vec();
        let mut sorted_b = rotate(&img, 90.0).data().to_vec();
        sorted_a.sort_by(f64::total_cmp);
        sorted_b.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_a, sorted_b);
    }

    #[test]
    fn stratified_split_rounds_per_class(
        counts in prop::collection::vec(2usize..40, 1..6),
        fraction in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let ds = fake_dataset(&counts);
        let (train, val) = split_dataset(&ds, fraction, seed).unwrap();
        for (c, &n) in counts.iter().enumerate() {
            let t = train.class_counts()[c];
            prop_assert_eq!(t, train_count(n, fraction));
            prop_assert!((t as f64 - fraction * n as f64).abs() <= 0.5 + 1e-9);
            prop_assert_eq!(t + val.class_counts()[c], n);
        }
        let tr: HashSet<_> = train.items.iter().map(|i| &i.path).collect();
        prop_assert!(val.items.iter().all(|i| !tr.contains(&i.path)));
        prop_assert_eq!(split_dataset(&ds, fraction, seed).unwrap(), (train, val));
    }
}

#[test]
fn split_rejects_bad_input() {
    assert!(split_dataset(&fake_dataset(&[5, 5]), 1.0, 0).is_err());
    assert!(split_dataset(&fake_dataset(&[5, 5]), 0.0, 0).is_err());
    assert!(split_dataset(&fake_dataset(&[5, 1]), 0.7, 0).is_err());
}

#[test]
fn multiplicity_and_provenance_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(&dir.path().join("raw"), 2, 3, 8, 1).unwrap();
    let (ds, warnings) = scan_dataset(&dir.path().join("raw")).unwrap();
    assert!(warnings.is_empty());
    let styles = vec![
        dummy_style(dir.path(), "Alpha", 1),
        dummy_style(dir.path(), "Beta", 2),
    ];
    let plans = [
        AugmentPlan::default(),
        AugmentPlan {
            traditional: vec![Traditional::FlipHorizontal],
            ..AugmentPlan::default()
        },
        AugmentPlan {
            traditional: vec![Traditional::Rotation],
            rotation_angles: vec![90.0, 33.0],
            styles: styles[..1].to_vec(),
        },
        AugmentPlan {
            traditional: vec![Traditional::FlipHorizontal, Traditional::Rotation],
            rotation_angles: DEFAULT_ROTATIONS.to_vec(),
            styles: styles.clone(),
        },
    ];
    for (k, plan) in plans.iter().enumerate() {
        let out = dir.path().join(format!("aug{k}"));
        let m = build_augmented(&ds, plan, &out).unwrap();
        assert_eq!(m.rows.len(), ds.len() * plan.multiplicity());
        let back = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m.rows);
        let originals = back.iter().filter(|r| r.provenance.is_original()).count();
        assert_eq!(originals, ds.len());
        for r in &back {
            assert!(out.join(&r.output_path).is_file(), "{}", r.output_path);
        }
        let relabeled = LabeledDataset::from_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(relabeled.classes, ds.classes);
        assert_eq!(relabeled.len(), m.rows.len());
    }
}

#[test]
fn invalid_plans_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(&dir.path().join("raw"), 2, 2, 8, 1).unwrap();
    let (ds, _) = scan_dataset(&dir.path().join("raw")).unwrap();
    let out = dir.path().join("out");
    let bad = AugmentPlan {
        traditional: vec![Traditional::Rotation],
        ..AugmentPlan::default()
    };
    assert!(build_augmented(&ds, &bad, &out).is_err());
    let missing = AugmentPlan {
        styles: vec![dir.path().join("nope.ckpt")],
        ..AugmentPlan::default()
    };
    let err = build_augmented(&ds, &missing, &out).unwrap_err();
    assert!(err.to_string().contains("nope.ckpt"), "{err}");
    assert!(!out.join(MANIFEST_FILE).exists());
}
