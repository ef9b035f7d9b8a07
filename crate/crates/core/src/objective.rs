//! The combined perceptual objective evaluated on a graph node, plus the
//! loss trace shared by the iterative optimizer and the trainer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image_tensor::{ColorSpace, ImageTensor, ValueRange};
use crate::losses::{
    content_loss_grad, style_loss_grad, total_objective, tv_loss_grad, LossError, LossWeights,
    StyleTarget,
};
use crate::lossnet::{feature_grad_tensor, feature_map, FeatureMapSet, LossNetError, LossNetwork};
use crate::nn::{Graph, Tensor, Var};

/// One evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub content_loss: f64,
    pub style_loss: f64,
    pub tv_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<LossRow>,
}

impl LossTrace {
    pub fn push(&mut self, row: LossRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn first(&self) -> Option<&LossRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LossRow> {
        self.rows.last()
    }

    /// Running minimum of `total` over the logged rows.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.rows
            .iter()
            .map(|r| {
                best = best.min(r.total);
                best
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(std::io::Error::other)?;
        crate::container::write_atomic(path, &buf)
    }

    pub fn read_csv(path: &Path) -> csv::Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<Result<Vec<LossRow>, _>>()?;
        Ok(LossTrace { rows })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    LossNet(#[from] LossNetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{got} content targets for a batch of {batch}")]
    Batch { got: usize, batch: usize },
}

/// Objective values (batch means) and the gradient seeds that backpropagate
/// them into the graph.
pub struct Evaluation {
    pub content_loss: f64,
    pub style_loss: f64,
    pub tv_loss: f64,
    pub total: f64,
    pub seeds: Vec<(Var, Tensor)>,
}

impl Evaluation {
    pub fn row(&self, step: usize) -> LossRow {
        LossRow {
            step,
            content_loss: self.content_loss,
            style_loss: self.style_loss,
            tv_loss: self.tv_loss,
            total: self.total,
        }
    }
}

/// Evaluates `λc·content + λs·style + λTV·tv` on the image batch `y`
/// (`[0, 255]` RGB), averaged over the batch.
///
/// `content_targets[b]` holds the target maps for item `b`; its layer ids
/// choose the content layers. An empty slice means no content term.
pub fn evaluate(
    g: &mut Graph,
    net: &LossNetwork,
    y: Var,
    content_targets: &[FeatureMapSet],
    style: &StyleTarget,
    weights: &LossWeights,
) -> Result<Evaluation, ObjectiveError> {
    let batch = g.value(y).batch();
    if !content_targets.is_empty() && content_targets.len() != batch {
        return Err(ObjectiveError::Batch {
            got: content_targets.len(),
            batch,
        });
    }
    let content_ids: Vec<String> = content_targets
        .first()
        .map(|s| s.layer_ids().into_iter().map(String::from).collect())
        .unwrap_or_default();
    let style_ids: Vec<String> = style.layer_ids().into_iter().map(String::from).collect();
    let mut all_ids = content_ids.clone();
    for id in &style_ids {
        if !all_ids.contains(id) {
            all_ids.push(id.clone());
        }
    }
    let taps = net.tap(g, y, &all_ids)?;
    let var_of = |id: &str| taps[all_ids.iter().position(|x| x == id).expect("tapped")];

    let inv_b = 1.0 / batch as f64;
    // per tapped layer, per item, the accumulated d(total)/d(feature)
    let mut grads: Vec<Vec<Vec<f64>>> = all_ids
        .iter()
        .map(|id| {
            let t = g.value(var_of(id));
            vec![vec![0.0; t.item_len()]; batch]
        })
        .collect();
    let mut content = 0.0;
    let mut style_total = 0.0;
    for b in 0..batch {
        for id in &content_ids {
            let f = feature_map(id, g.value(var_of(id)), b)?;
            let p = content_targets[b].get(id).expect("id taken from this set");
            let (l, d) = content_loss_grad(&f, p)?;
            content += l * inv_b;
            let slot = &mut grads[all_ids.iter().position(|x| x == id).unwrap()][b];
            let k = weights.lambda_content * inv_b;
            slot.iter_mut().zip(d.data()).for_each(|(s, v)| *s += k * v);
        }
        let feats = style_ids
            .iter()
            .map(|id| feature_map(id, g.value(var_of(id)), b))
            .collect::<Result<Vec<_>, _>>()?;
        let (l, ds) = style_loss_grad(&feats, style)?;
        style_total += l * inv_b;
        let k = weights.lambda_style * inv_b;
        for (id, d) in style_ids.iter().zip(&ds) {
            let slot = &mut grads[all_ids.iter().position(|x| x == id).unwrap()][b];
            slot.iter_mut().zip(d.data()).for_each(|(s, v)| *s += k * v);
        }
    }

    let image = ImageTensor::from_tensor(g.value(y), ValueRange::Byte, ColorSpace::Rgb);
    let (tv_sum, tv_grad) = tv_loss_grad(&image);
    let tv = tv_sum * inv_b;
    let total = total_objective(content, style_total, tv, weights)?;

    let mut seeds = Vec::new();
    for (id, items) in all_ids.iter().zip(grads) {
        let v = var_of(id);
        if items.iter().flatten().any(|x| *x != 0.0) {
            seeds.push((v, feature_grad_tensor(g.value(v).shape(), &items)));
        }
    }
    if weights.lambda_tv != 0.0 {
        let k = weights.lambda_tv * inv_b;
        let data = tv_grad.data().iter().map(|v| (k * v) as f32).collect();
        seeds.push((y, Tensor::from_vec(g.value(y).shape(), data)));
    }
    Ok(Evaluation {
        content_loss: content,
        style_loss: style_total,
        tv_loss: tv,
        total,
        seeds,
    })
}
