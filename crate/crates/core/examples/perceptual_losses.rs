//! The four perceptual losses on hand-sized feature maps, their gradients,
//! and the weighted combination.

use stada::image_tensor::ImageTensor;
use stada::losses::{
    content_loss, content_loss_grad, gram_matrix, layer_style_loss, style_loss, total_objective,
    tv_loss, FeatureMap, LossWeights, StyleTarget,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two channels over three positions.
    let f = FeatureMap::from_rows("relu2_2", &[vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 3.0]])?;
    let p = FeatureMap::from_rows("relu2_2", &[vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]])?;

    let (lc, grad) = content_loss_grad(&f, &p)?;
    println!("content loss {lc} (direct: {})", content_loss(&f, &p)?);
    println!("d/dF = {:?}", grad.data());

    let g = gram_matrix(&f);
    let a = gram_matrix(&p);
    println!("Gram of F: {:?}", g.data());
    let (n, m) = f.shape();
    println!("layer style loss {}", layer_style_loss(&g, &a, n, m)?);

    let target = StyleTarget::uniform(vec![a])?;
    let ls = style_loss(&[g], &target, &[(n, m)])?;
    println!("style loss over one layer {ls}");

    let img = ImageTensor::from_planes(1, 2, 2, vec![0.0, 10.0, 20.0, 30.0]);
    let ltv = tv_loss(&img);
    println!("tv loss of a 2x2 ramp {ltv}");

    let w = LossWeights::default();
    println!(
        "total with λc={}, λs={}, λtv={}: {}",
        w.lambda_content,
        w.lambda_style,
        w.lambda_tv,
        total_objective(lc, ls, ltv, &w)?
    );
    Ok(())
}
