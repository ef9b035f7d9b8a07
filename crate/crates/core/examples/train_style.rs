//! Trains a small feed-forward style network on a toy corpus, reloads the
//! checkpoint and stylizes one image per toy class.
//!
//! `cargo run --release --example train_style [out_dir] [style]`

use std::path::PathBuf;

use stada::toy::{toy_image, train_style_models, ToyStyleSettings, TOY_CLASSES};
use stada::transformnet::TransformNetwork;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| "target/examples/train_style".into());
    let style = args.next().unwrap_or_else(|| "Wave".into());

    let settings = ToyStyleSettings::default();
    let t = std::time::Instant::now();
    let ckpt = train_style_models(&[style.as_str()], &out.join("work"), &out, &settings)?.remove(0);
    println!(
        "{} ready after {:.1}s",
        ckpt.display(),
        t.elapsed().as_secs_f64()
    );

    let (net, header) = TransformNetwork::load_checkpoint(&ckpt)?;
    println!(
        "style `{}`, {} conv layers, {} steps at lr {}",
        header.style_name,
        net.conv_layer_count(),
        header.training_meta.steps,
        header.training_meta.learning_rate
    );
    for (c, name) in TOY_CLASSES.iter().enumerate() {
        let img = toy_image(c, settings.image_size, 42);
        img.save_png(&out.join(format!("{name}.png")))?;
        let styled = net.stylize(&img);
        let (lo, hi) = styled.min_max();
        styled.save_png(&out.join(format!("{name}.{style}.png")))?;
        println!("{name}: stylized pixels in [{lo:.1}, {hi:.1}]");
    }
    Ok(())
}
