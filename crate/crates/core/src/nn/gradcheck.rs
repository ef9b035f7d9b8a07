//! Central-difference checks of every backward kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, PadMode, Tensor, Var};

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
}

fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let objective = |inputs: &[Tensor], proj: Option<&Tensor>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out, proj.cloned())
    };
    let (g, vars, out, _) = objective(&inputs, None);
    let proj = random(g.value(out).shape(), &mut rng);
    let dot = |g: &Graph, out: Var| -> f64 {
        g.value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };
    let grads = g.backward(vec![(out, proj.clone())]);
    let eps = 1e-2f32;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input gradient").clone();
        let n = inputs[k].len();
        let picks: Vec<usize> = if n <= 24 {
            (0..n).collect()
        } else {
            (0..24).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let (gp, _, op, _) = objective(&plus, Some(&proj));
            let (gm, _, om, _) = objective(&minus, Some(&proj));
            let numeric = (dot(&gp, op) - dot(&gm, om)) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            let tol = 2e-2 * (1.0 + a.abs().max(numeric.abs()));
            assert!(
                (a - numeric).abs() <= tol,
                "input {k} index {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, mode, k) in [
        (1, 1, PadMode::Zero, 3),
        (2, 1, PadMode::Reflect, 3),
        (1, 2, PadMode::Reflect, 5),
        (1, 0, PadMode::Zero, 1),
    ] {
        let x = random([2, 3, 6, 5], &mut rng);
        let w = random([4, 3, k, k], &mut rng);
        let b = random([4, 1, 1, 1], &mut rng);
        check(vec![x, w, b], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad, mode)
        });
    }
}

#[test]
fn instance_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random([2, 3, 4, 4], &mut rng);
    let gamma = random([3, 1, 1, 1], &mut rng);
    let beta = random([3, 1, 1, 1], &mut rng);
    check(vec![x, gamma, beta], |g, v| {
        g.instance_norm(v[0], v[1], v[2])
    });
}

#[test]
fn pointwise_and_resampling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // keep relu/maxpool inputs away from kinks and ties
    let spaced = |shape: [usize; 4], rng: &mut ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let mut vals: Vec<f32> = (0..n)
            .map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * 0.1)
            .collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        Tensor::from_vec(shape, vals)
    };
    check(vec![spaced([1, 2, 5, 3], &mut rng)], |g, v| g.relu(v[0]));
    check(vec![spaced([2, 2, 5, 3], &mut rng)], |g, v| {
        g.max_pool2(v[0])
    });
    check(vec![random([2, 2, 3, 4], &mut rng)], |g, v| {
        g.upsample2(v[0])
    });
    check(vec![random([1, 3, 3, 3], &mut rng)], |g, v| {
        g.scaled_tanh(v[0])
    });
    check(
        vec![
            random([1, 3, 3, 3], &mut rng),
            random([1, 3, 3, 3], &mut rng),
        ],
        |g, v| g.add(v[0], v[1]),
    );
    check(vec![random([2, 3, 2, 3], &mut rng)], |g, v| {
        g.channel_affine(v[0], &[2, 1, 0], &[0.5, -0.25, 1.0], &[2.0, 0.5, -1.5])
    });
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random([3, 2, 2, 2], &mut rng);
    let w = random([5, 8, 1, 1], &mut rng);
    let b = random([5, 1, 1, 1], &mut rng);
    check(vec![x, w, b], |g, v| g.linear(v[0], v[1], v[2]));
}

#[test]
fn composed_residual_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random([1, 2, 4, 4], &mut rng);
    let w1 = random([2, 2, 3, 3], &mut rng);
    let w2 = random([2, 2, 3, 3], &mut rng);
    let gamma = random([2, 1, 1, 1], &mut rng);
    let beta = random([2, 1, 1, 1], &mut rng);
    check(vec![x, w1, w2, gamma, beta], |g, v| {
        let h = g.conv2d(v[0], v[1], None, 1, 1, PadMode::Reflect);
        let h = g.instance_norm(h, v[3], v[4]);
        let h = g.conv2d(h, v[2], None, 1, 1, PadMode::Reflect);
        let h = g.upsample2(h);
        let s = g.conv2d(h, v[1], None, 2, 1, PadMode::Reflect);
        g.add(s, v[0])
    });
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::full([1, 1, 3, 3], 1.0));
    let w = std::sync::Arc::new(Tensor::full([1, 1, 3, 3], 0.5));
    let wv = g.parameter(&w, false);
    let y = g.conv2d(x, wv, None, 1, 1, PadMode::Zero);
    let grads = g.backward(vec![(y, Tensor::full([1, 1, 3, 3], 1.0))]);
    assert!(grads.get(wv).is_none());
    assert!(grads.get(x).is_some());
}
