//! Writes a toy labelled dataset, trains two styles and expands the dataset
//! with flips, rotations and both styles. Prints the manifest breakdown.
//!
//! `cargo run --release --example augment_dataset [out_dir]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use stada::augmentor::{
    build_augmented, scan_dataset, AugmentPlan, Traditional, DEFAULT_ROTATIONS,
};
use stada::toy::{train_style_models, write_toy_dataset, ToyStyleSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "target/examples/augment".into());
    let raw = out.join("dataset");
    write_toy_dataset(&raw, 3, 10, 32, 0)?;
    let (dataset, _) = scan_dataset(&raw)?;
    println!("{} images in classes {:?}", dataset.len(), dataset.classes);

    let styles = train_style_models(
        &["Scream", "Wave"],
        &out.join("work"),
        &out.join("styles"),
        &ToyStyleSettings::default(),
    )?;

    let plan = AugmentPlan {
        traditional: vec![Traditional::FlipHorizontal, Traditional::Rotation],
        rotation_angles: DEFAULT_ROTATIONS.to_vec(),
        styles,
    };
    let manifest = build_augmented(&dataset, &plan, &out.join("augmented"))?;
    println!(
        "{} rows = {} images x {} ({} traditional + {} styled copies each)",
        manifest.rows.len(),
        dataset.len(),
        plan.multiplicity(),
        plan.traditional_expansions(),
        plan.styles.len()
    );
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for r in &manifest.rows {
        *by_kind.entry(r.provenance.to_string()).or_default() += 1;
    }
    for (k, n) in by_kind {
        println!("  {k:16} {n}");
    }
    for s in &manifest.styles {
        println!(
            "style {} from {} ({})",
            s.name,
            s.checkpoint.display(),
            &s.weights_sha256[..12]
        );
    }
    Ok(())
}
