//! Runs one of the shipped experiment matrices end to end on the toy
//! dataset: trains any missing styles, appends ledger rows and prints the
//! report table.
//!
//! `cargo run --release --example experiment_matrix [matrix.json] [out_dir]`

use std::collections::BTreeSet;
use std::path::PathBuf;

use stada::experiments::{
    read_ledger, render_table, run_matrix, summarize, write_plots, GroupBy, Matrix, RunOptions,
};
use stada::toy::{train_style_models, ToyStyleSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let matrix_path = args.next().map(PathBuf::from).unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/matrices/traditional.json").into()
    });
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| "target/examples/matrix".into());

    // Re-root the matrix in `out` so style checkpoints resolve there.
    let text = std::fs::read_to_string(&matrix_path)?;
    let name = matrix_path
        .file_name()
        .ok_or("matrix path has no file name")?;
    let matrix = Matrix::parse(&out.join(name), &text)?;

    let styles: BTreeSet<&str> = matrix
        .configs
        .iter()
        .flat_map(|c| c.styles.iter().map(String::as_str))
        .collect();
    if !styles.is_empty() {
        let names: Vec<&str> = styles.into_iter().collect();
        let dir = matrix
            .checkpoint_path(names[0])
            .parent()
            .expect("file path")
            .to_path_buf();
        train_style_models(
            &names,
            &out.join("style-work"),
            &dir,
            &ToyStyleSettings::default(),
        )?;
    }

    let ledger = out.join("ledger.csv");
    let opts = RunOptions {
        cache_dir: out.join("cache"),
        ..RunOptions::default()
    };
    let outcome = run_matrix(&matrix, &ledger, &opts)?;
    println!(
        "{} appended, {} already in the ledger, {} failed",
        outcome.appended.len(),
        outcome.skipped.len(),
        outcome.failures.len()
    );
    let rows = summarize(&read_ledger(&ledger)?, GroupBy::Cell);
    print!("{}", render_table(&rows, GroupBy::Cell));
    let svg = write_plots(&out, &rows)?;
    println!("curves: {}", svg.display());
    Ok(())
}
