//! Extracts loss-network features from a procedural style texture, builds
//! its Gram targets and shows that an image scores zero against its own
//! targets.

use stada::losses::{content_loss, gram_matrix, style_loss};
use stada::lossnet::LossNetConfig;
use stada::toy::style_texture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = LossNetConfig::default().build()?;
    println!(
        "backbone {} (weights {}), content {:?}, style {:?}",
        net.backbone_id(),
        &net.weights_hash()[..12],
        net.content_layers(),
        net.style_layers()
    );

    let style = style_texture("Wave", 64);
    let target = net.compute_style_target(&style, &[])?;
    for (g, w) in target.grams().iter().zip(target.layer_weights()) {
        println!(
            "  {:8} Gram {}x{}  weight {w}",
            g.layer_id(),
            g.size(),
            g.size()
        );
    }
    let again = net.compute_style_target(&style, &[])?;
    assert_eq!(again, target);
    println!("cached targets: {}", net.cached_targets());

    let feats = net.extract_features(&style, net.style_layers())?;
    let grams: Vec<_> = feats.maps().iter().map(gram_matrix).collect();
    let dims: Vec<_> = feats.maps().iter().map(|f| f.shape()).collect();
    println!("self style loss {}", style_loss(&grams, &target, &dims)?);
    let c = feats.get("relu2_2").expect("tapped");
    println!("self content loss {}", content_loss(c, c)?);
    Ok(())
}
