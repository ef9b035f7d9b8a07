use std::sync::Arc;

use super::kernels::{self, NormStats, PadMode};
use super::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ScaledTanh {
        input: Var,
    },
    ChannelAffine {
        input: Var,
        source_channel: Vec<usize>,
        scale: Vec<f32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape of tensor operations supporting reverse-mode
/// differentiation.
///
/// Leaves are either constants or trainable; a node needs a gradient iff one
/// of its inputs does, so frozen sub-networks cost only the input-gradient
/// half of backprop.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted (pixels being optimized, for instance).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Shares a parameter tensor without copying it.
    pub fn parameter(&mut self, value: &Arc<Tensor>, trainable: bool) -> Var {
        self.push_shared(Arc::clone(value), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Var {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            mode,
        );
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                pad,
                mode,
            },
            needs,
        )
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Var {
        let (out, stats) = kernels::instance_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            INSTANCE_NORM_EPS,
        );
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            },
            needs,
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect());
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn max_pool2(&mut self, input: Var) -> Var {
        let (out, argmax) = kernels::max_pool2_forward(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::MaxPool2 { input, argmax }, needs)
    }

    pub fn upsample2(&mut self, input: Var) -> Var {
        let out = kernels::upsample2_forward(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Upsample2 { input }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    /// `127.5·(tanh(x) + 1)`, mapping onto `[0, 255]`.
    pub fn scaled_tanh(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_vec(
            x.shape(),
            x.data().iter().map(|v| 127.5 * (v.tanh() + 1.0)).collect(),
        );
        let needs = self.needs(input);
        self.push(out, Op::ScaledTanh { input }, needs)
    }

    /// `y[:, c] = (x[:, source_channel[c]] - shift[c]) · scale[c]`.
    pub fn channel_affine(
        &mut self,
        input: Var,
        source_channel: &[usize],
        shift: &[f32],
        scale: &[f32],
    ) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.shape();
        assert_eq!(source_channel.len(), c);
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            let xi = x.item(b);
            let oi = out.item_mut(b);
            for ch in 0..c {
                let src = &xi[source_channel[ch] * hw..(source_channel[ch] + 1) * hw];
                for (o, v) in oi[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                    *o = (*v - shift[ch]) * scale[ch];
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            out,
            Op::ChannelAffine {
                input,
                source_channel: source_channel.to_vec(),
                scale: scale.to_vec(),
            },
            needs,
        )
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let out = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias));
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        )
    }

    /// Reverse pass seeded with `d(objective)/d(node)` for each given node.
    ///
    /// Seeds on the same node are summed. Gradients of intermediate nodes
    /// are released once propagated; leaves keep theirs.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape mismatch");
            last = last.max(v.0);
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                pad,
                mode,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    dy,
                    *stride,
                    *pad,
                    *mode,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = g.input {
                    send(*input, dx, grads);
                }
                if let Some(dw) = g.weight {
                    send(*weight, dw, grads);
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    send(*b, db, grads);
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    self.value(*input),
                    self.value(*gamma),
                    stats,
                    dy,
                );
                send(*input, dx, grads);
                send(*gamma, dgamma, grads);
                send(*beta, dbeta, grads);
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let dx = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*input, Tensor::from_vec(x.shape(), dx), grads);
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = kernels::max_pool2_backward(self.value(*input).shape(), argmax, dy);
                send(*input, dx, grads);
            }
            Op::Upsample2 { input } => {
                let dx = kernels::upsample2_backward(self.value(*input).shape(), dy);
                send(*input, dx, grads);
            }
            Op::Add { a, b } => {
                send(*a, dy.clone(), grads);
                send(*b, dy.clone(), grads);
            }
            Op::ScaledTanh { input } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(out, g)| {
                        let t = out / 127.5 - 1.0;
                        g * 127.5 * (1.0 - t * t)
                    })
                    .collect();
                send(*input, Tensor::from_vec(dy.shape(), dx), grads);
            }
            Op::ChannelAffine {
                input,
                source_channel,
                scale,
            } => {
                let [n, c, h, w] = dy.shape();
                let hw = h * w;
                let mut dx = Tensor::zeros(dy.shape());
                for b in 0..n {
                    let gi = dy.item(b);
                    let di = dx.item_mut(b);
                    for ch in 0..c {
                        let dst = source_channel[ch];
                        for (d, g) in di[dst * hw..(dst + 1) * hw]
                            .iter_mut()
                            .zip(&gi[ch * hw..(ch + 1) * hw])
                        {
                            *d += g * scale[ch];
                        }
                    }
                }
                send(*input, dx, grads);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dparams) = kernels::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    dy,
                    self.needs(*input),
                    self.needs(*weight) || self.needs(*bias),
                );
                if let Some(dx) = dx {
                    send(*input, dx, grads);
                }
                if let Some((dw, db)) = dparams {
                    send(*weight, dw, grads);
                    send(*bias, db, grads);
                }
            }
        }
    }
}

pub(crate) const INSTANCE_NORM_EPS: f32 = 1e-5;

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
