//! Trains the eight toy styles plus the `Wave2` content-weight variant into
//! `matrices/styles/`, where the shipped matrices look for them. Run this
//! once before `stada run-matrix --matrix crates/core/matrices/<m>.json`.
//!
//! `cargo run --release --example toy_gallery [out_dir]`

use std::path::PathBuf;

use stada::toy::{train_style_models, ToyStyleSettings, STYLE_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/matrices/styles").into());
    let mut names = STYLE_NAMES.to_vec();
    names.push("Wave2");
    let work = std::env::temp_dir().join("stada-toy-gallery");
    let t = std::time::Instant::now();
    for p in train_style_models(&names, &work, &out, &ToyStyleSettings::default())? {
        println!("{}", p.display());
    }
    println!("{:.0}s", t.elapsed().as_secs_f64());
    Ok(())
}
