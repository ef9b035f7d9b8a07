//! Iterative transfer: optimise the pixels of a toy image towards a style
//! texture. Writes the content, style and result PNGs plus a loss trace.
//!
//! `cargo run --release --example descriptive_transfer [out_dir]`

use std::path::PathBuf;

use stada::descriptive::{optimize, DescriptiveRunConfig, Init};
use stada::losses::LossWeights;
use stada::lossnet::LossNetConfig;
use stada::toy::{style_texture, toy_image};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "target/examples/descriptive".into());
    let net = LossNetConfig::default().build()?;
    let content = toy_image(0, 64, 3);
    let style = style_texture("Scream", 64);

    let target = net.compute_style_target(&style, &[])?;
    let feats = net.extract_features(&content, net.content_layers())?;
    let cfg = DescriptiveRunConfig {
        weights: LossWeights::new(1.0, 20.0, 0.0)?,
        iterations: 200,
        step_size: 2.0,
        init: Init::ContentCopy,
        seed: 0,
        log_every: 20,
    };
    let run = optimize(&content, &target, &feats, &net, &cfg)?;
    for r in &run.trace.rows {
        println!(
            "step {:4}  content {:.3e}  style {:.3e}  total {:.3e}",
            r.step, r.content_loss, r.style_loss, r.total
        );
    }
    content.save_png(&out.join("content.png"))?;
    style.save_png(&out.join("style.png"))?;
    run.image.save_png(&out.join("result.png"))?;
    run.trace.save_csv(&out.join("trace.csv"))?;
    println!(
        "best objective {:.4e}; images in {}",
        run.best_total,
        out.display()
    );
    Ok(())
}
