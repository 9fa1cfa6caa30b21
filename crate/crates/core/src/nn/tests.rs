use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projected scalar objective `sum(out * r)`.
fn objective(net: &Sequential, x: &Tensor, r: &Tensor, train: bool) -> f64 {
    let out = if train {
        net.clone().forward_train(x).unwrap().0
    } else {
        net.forward(x).unwrap()
    };
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_gradients(net: Sequential, x_shape: Vec<usize>, train: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, x_shape);
    let out_shape = net.forward(&x).unwrap().shape().to_vec();
    let r = random_tensor(&mut rng, out_shape);
    let (_, tape) = if train {
        net.clone().forward_train(&x).unwrap()
    } else {
        net.forward_tape(&x).unwrap()
    };
    let (dx, grads) = net.backward(&tape, &r, true);
    let dx = dx.unwrap();
    let h = 1e-5;

    for i in (0..x.len()).step_by((x.len() / 17).max(1)) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (objective(&net, &xp, &r, train) - objective(&net, &xm, &r, train)) / (2.0 * h);
        assert!(rel_err(fd, dx.data()[i]) < 1e-4, "input grad {i}: fd {fd} vs {}", dx.data()[i]);
    }

    let mut slot = 0;
    for li in 0..net.layers.len() {
        let np = net.layers[li].params().len();
        for pi in 0..np {
            let len = net.layers[li].params()[pi].len();
            for k in (0..len).step_by((len / 7).max(1)) {
                let mut plus = net.clone();
                plus.layers[li].params_mut()[pi][k] += h;
                let mut minus = net.clone();
                minus.layers[li].params_mut()[pi][k] -= h;
                let fd = (objective(&plus, &x, &r, train) - objective(&minus, &x, &r, train)) / (2.0 * h);
                let an = grads.0[slot][k];
                assert!(rel_err(fd, an) < 1e-4, "layer {li} param {pi}[{k}]: fd {fd} vs {an}");
            }
            slot += 1;
        }
    }
}

#[test]
fn conv_bn_pool_linear_gradients_eval() {
    let mut net = Arch::SmallCnn.build([2, 8, 8], 3, 1).unwrap();
    // non-trivial running statistics
    for l in &mut net.layers {
        if let Layer::BatchNorm2d(bn) = l {
            bn.running_mean.iter_mut().for_each(|m| *m = 0.1);
            bn.running_var.iter_mut().for_each(|v| *v = 0.7);
        }
    }
    check_gradients(net, vec![2, 2, 8, 8], false, 2);
}

#[test]
fn conv_bn_gradients_train_mode() {
    let net = Arch::SmallCnn.build([2, 8, 8], 3, 3).unwrap();
    check_gradients(net, vec![3, 2, 8, 8], true, 4);
}

#[test]
fn strided_conv_and_patch_expand_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(&mut rng, 3, 5, 2, 2, 0)),
        Layer::Tanh,
        Layer::Conv2d(Conv2d::new(&mut rng, 5, 4, 1, 1, 0)),
        patch_expand(6, 4, 3, 2),
        Layer::Sigmoid,
    ]);
    check_gradients(net, vec![2, 3, 6, 6], false, 7);
}

#[test]
fn mlp_gradients() {
    let net = Arch::Mlp.build([1, 4, 4], 3, 8).unwrap();
    check_gradients(net, vec![4, 1, 4, 4], false, 9);
}

#[test]
fn describe_parse_roundtrip_preserves_outputs() {
    let net = Arch::WideCnn.build([3, 16, 16], 10, 11).unwrap();
    let mut copy = Sequential::parse(&net.describe()).unwrap();
    copy.load_state_vector(&net.state_vector()).unwrap();
    assert_eq!(copy, net);
    assert!(copy.load_state_vector(&[1.0]).is_err());
}

#[test]
fn empty_batch_passes_through() {
    let net = Arch::SmallCnn.build([3, 8, 8], 4, 0).unwrap();
    let out = net.forward(&Tensor::zeros(vec![0, 3, 8, 8])).unwrap();
    assert_eq!(out.shape(), &[0, 4]);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(Schedule::Cosine.rate(0.1, 0, 10), 0.1);
    assert!(Schedule::Cosine.rate(0.1, 10, 10).abs() < 1e-15);
    assert_eq!(Schedule::Constant.rate(0.1, 7, 10), 0.1);
}

#[test]
fn sgd_reduces_quadratic_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut net = Sequential::new(vec![Layer::Flatten, Layer::Linear(Linear::new(&mut rng, 4, 1))]);
    let x = random_tensor(&mut rng, vec![8, 1, 2, 2]);
    let loss = |net: &Sequential| net.forward(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>();
    let before = loss(&net);
    let mut opt = Optimizer::new(OptimizerKind::sgd(), &net);
    for _ in 0..50 {
        let (out, tape) = net.forward_tape(&x).unwrap();
        let g = Tensor::new(out.shape().to_vec(), out.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (_, grads) = net.backward(&tape, &g, false);
        opt.step(&mut net, &grads, 0.01);
    }
    assert!(loss(&net) < before * 0.5);
}
