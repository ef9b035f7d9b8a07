//! Stratified 70:30 split of a toy dataset and a short classifier run,
//! with and without flip augmentation of the training split.
//!
//! `cargo run --release --example classify_toy [out_dir]`

use std::path::PathBuf;

use stada::augmentor::{
    build_augmented, scan_dataset, AugmentPlan, LabeledDataset, Traditional, MANIFEST_FILE,
};
use stada::classify::{split_dataset, train_classifier, ClassifierConfig};
use stada::toy::write_toy_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "target/examples/classify".into());
    write_toy_dataset(&out.join("dataset"), 3, 60, 32, 0)?;
    let (dataset, _) = scan_dataset(&out.join("dataset"))?;
    let (train, val) = split_dataset(&dataset, 0.7, 0)?;
    println!(
        "train per class {:?}, val per class {:?}",
        train.class_counts(),
        val.class_counts()
    );

    let cfg = ClassifierConfig::default();
    let plain = train_classifier(&train, &val, &cfg, Some(&out.join("runs/plain")))?;

    let plan = AugmentPlan {
        traditional: vec![Traditional::FlipHorizontal],
        ..AugmentPlan::default()
    };
    build_augmented(&train, &plan, &out.join("flipped"))?;
    let flipped = LabeledDataset::from_manifest(&out.join("flipped").join(MANIFEST_FILE))?;
    let aug = train_classifier(&flipped, &val, &cfg, Some(&out.join("runs/flipped")))?;

    for (label, run) in [("None", &plain), ("Flipping", &aug)] {
        let curve: Vec<String> = run
            .per_epoch_val_accuracy
            .iter()
            .map(|a| format!("{a:.2}"))
            .collect();
        println!(
            "{label:9} best {:.3} at epoch {:2}  [{}]  {:.1}s",
            run.best_val_accuracy,
            run.best_epoch,
            curve.join(" "),
            run.wall_time_s
        );
    }
    Ok(())
}
