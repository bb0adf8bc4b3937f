use mvstr_tensor::gradcheck::{gradcheck, GradcheckOptions};
use mvstr_tensor::{Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> mvstr_tensor::Result<Var<'t, f64>>,
{
    let report = gradcheck(name, inputs, f, &GradcheckOptions::with_tol(1e-4)).unwrap();
    assert!(report.passed(), "{} worst {:?}", report.summary(), report.worst());
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.param(rt(&[3, 4], 1));
    let grads = tape.backward(x.sum()).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_twice_x() {
    let tape = Tape::new();
    let xt = rt(&[5], 2);
    let x = tape.param(xt.clone());
    let grads = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    for (g, v) in grads.get(x).unwrap().data().iter().zip(xt.data()) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn reused_tensor_accumulates() {
    let tape = Tape::new();
    let x = tape.param(rt(&[4], 3));
    let a = x.scale(3.0);
    let b = x.exp();
    let loss = a.add(b).unwrap().sum();
    let g = tape.backward(loss).unwrap().get(x).unwrap().clone();

    let tape = Tape::new();
    let x1 = tape.param(rt(&[4], 3));
    let ga = tape.backward(x1.scale(3.0).sum()).unwrap().get(x1).unwrap().clone();
    let tape = Tape::new();
    let x2 = tape.param(rt(&[4], 3));
    let gb = tape.backward(x2.exp().sum()).unwrap().get(x2).unwrap().clone();
    for i in 0..4 {
        assert!((g.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut tape = Tape::<f64>::new();
    {
        let x = tape.param(rt(&[2], 4));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardTwice)));
    }
    tape.reset();
    let x = tape.param(rt(&[2], 4));
    assert!(tape.backward(x.sum()).is_ok());
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(rt(&[3], 5));
    let x = tape.param(rt(&[3], 6));
    let grads = tape.backward(c.mul(x).unwrap().sum()).unwrap();
    assert!(grads.get(c).is_none());
    assert!(!c.requires_grad());
    assert!(grads.get(x).is_some());
}

#[test]
fn gradcheck_elementwise_ops() {
    let (a, b) = (rt(&[3, 4], 10), rt(&[3, 4], 11));
    check("add", &[a.clone(), b.clone()], |_, v| v[0].add(v[1]));
    check("sub", &[a.clone(), b.clone()], |_, v| v[0].sub(v[1]));
    check("mul", &[a.clone(), b.clone()], |_, v| v[0].mul(v[1]));
    let pos = b.map(|x| x.abs() + 0.5);
    check("div", &[a.clone(), pos], |_, v| v[0].div(v[1]));
    check("exp", &[a.clone()], |_, v| Ok(v[0].exp()));
    check("elu", &[a.clone()], |_, v| Ok(v[0].elu()));
    check("relu", &[a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |_, v| Ok(v[0].relu()));
    check("square", &[a.clone()], |_, v| Ok(v[0].square()));
    let far = b.map(|x| x * 3.0);
    check("smooth_l1", &[a.clone(), far], |_, v| v[0].smooth_l1(v[1]));
}

#[test]
fn gradcheck_broadcasting() {
    check("add bias", &[rt(&[2, 3, 4], 12), rt(&[4], 13)], |_, v| v[0].add(v[1]));
    check("mul column", &[rt(&[2, 3, 4], 14), rt(&[3, 1], 15)], |_, v| v[0].mul(v[1]));
    let den = rt(&[2, 3, 1], 16).map(|x| x.abs() + 0.5);
    check("div rows", &[rt(&[2, 3, 4], 17), den], |_, v| v[0].div(v[1]));
}

#[test]
fn gradcheck_structural_ops() {
    let x = rt(&[2, 3, 4], 20);
    check("permute", &[x.clone()], |_, v| v[0].permute(&[2, 0, 1]));
    check("transpose", &[x.clone()], |_, v| v[0].transpose());
    check("reshape", &[x.clone()], |_, v| v[0].reshape(&[6, 4]));
    check("narrow", &[x.clone()], |_, v| v[0].narrow(2, 1, 2));
    check("pad", &[x.clone()], |_, v| v[0].pad(&[(0, 1), (2, 0), (1, 1)]));
    check("concat", &[x.clone(), rt(&[2, 2, 4], 21)], |_, v| Var::concat(&[v[0], v[1]], 1));
    check("sum_dim", &[x.clone()], |_, v| v[0].sum_dim(1));
    check("mean_dim", &[x.clone()], |_, v| v[0].mean_dim(0));
    check("mean", &[x.clone()], |_, v| Ok(v[0].mean()));
    check("upsample_nearest", &[rt(&[1, 2, 2, 3, 2], 22)], |_, v| v[0].upsample_nearest(&[2, 2, 2]));
}

#[test]
fn gradcheck_softmax_and_layer_norm() {
    let x = rt(&[3, 5, 2], 30);
    check("softmax", &[x.clone()], |_, v| v[0].softmax(1));
    let gamma = rt(&[5], 31);
    let beta = rt(&[5], 32);
    check("layer_norm mid dim", &[x.clone(), gamma.clone(), beta.clone()], |_, v| {
        v[0].layer_norm(1, v[1], v[2], 1e-5)
    });
    check("layer_norm last dim", &[rt(&[4, 5], 33), gamma, beta], |_, v| v[0].layer_norm(1, v[1], v[2], 1e-5));
}

#[test]
fn gradcheck_matmul() {
    check("matmul", &[rt(&[3, 4], 40), rt(&[4, 2], 41)], |_, v| v[0].matmul(v[1]));
    check("batched matmul", &[rt(&[2, 3, 4], 42), rt(&[2, 4, 2], 43)], |_, v| v[0].matmul(v[1]));
    check("broadcast matmul", &[rt(&[2, 3, 4], 44), rt(&[4, 2], 45)], |_, v| v[0].matmul(v[1]));
}

#[test]
fn gradcheck_convolutions() {
    check("conv2d", &[rt(&[1, 2, 5, 5], 50), rt(&[3, 2, 3, 3], 51), rt(&[3], 52)], |_, v| {
        v[0].conv2d(v[1], Some(v[2]), 1, 1)
    });
    check("conv2d stride 2", &[rt(&[2, 2, 6, 5], 53), rt(&[2, 2, 3, 3], 54), rt(&[2], 55)], |_, v| {
        v[0].conv2d(v[1], Some(v[2]), 2, 1)
    });
    check("conv3d", &[rt(&[1, 2, 4, 4, 3], 56), rt(&[2, 2, 3, 3, 3], 57), rt(&[2], 58)], |_, v| {
        v[0].conv3d(v[1], Some(v[2]), [1; 3], [1; 3])
    });
    check("conv3d stride 2", &[rt(&[1, 2, 4, 4, 4], 59), rt(&[3, 2, 3, 3, 3], 60)], |_, v| {
        v[0].conv3d(v[1], None, [2; 3], [1; 3])
    });
    check("conv3d pointwise", &[rt(&[1, 3, 2, 3, 2], 61), rt(&[2, 3, 1, 1, 1], 62)], |_, v| {
        v[0].conv3d(v[1], None, [1; 3], [0; 3])
    });
}

#[test]
fn gradcheck_grid_sample_wrt_input_and_grid() {
    let x = rt(&[1, 2, 5, 6], 70);
    // Keep coordinates away from integer values (kinks) and the border.
    let grid = Tensor::from_fn(vec![1, 3, 4, 2], |i| {
        let base = if i[3] == 0 { 1.3 * i[2] as f64 } else { i[1] as f64 };
        base + 0.25 + 0.1 * ((i[1] * 7 + i[2] * 3 + i[3]) % 5) as f64
    });
    check("grid_sample", &[x, grid], |_, v| Ok(v[0].grid_sample(v[1])?.0));
    check("resize_bilinear", &[rt(&[1, 2, 3, 4], 71)], |_, v| v[0].resize_bilinear(6, 8));
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::<f32>::new();
    let x = Tensor::<f32>::uniform(vec![7, 9], -20.0, 20.0, &mut ChaCha8Rng::seed_from_u64(80));
    let y = tape.constant(x).softmax(1).unwrap().value();
    for r in 0..7 {
        let s: f64 = (0..9).map(|c| y.get(&[r, c]) as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let uniform = tape.constant(Tensor::<f32>::full([4], 2.5)).softmax(0).unwrap().value();
    assert!(uniform.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    let big = tape.constant(Tensor::<f32>::from_f64([2], &[0.0, 200.0]).unwrap()).softmax(0).unwrap().value();
    assert!(big.data()[0] < 1e-30 && (big.data()[1] - 1.0).abs() < 1e-7);
}

#[test]
fn layer_norm_normalizes_each_position() {
    let tape = Tape::<f32>::new();
    let x = Tensor::<f32>::uniform(vec![6, 8], -3.0, 5.0, &mut ChaCha8Rng::seed_from_u64(81));
    let y = tape
        .constant(x)
        .layer_norm(1, tape.constant(Tensor::ones([8])), tape.constant(Tensor::zeros([8])), 1e-12)
        .unwrap()
        .value();
    for r in 0..6 {
        let vals: Vec<f64> = (0..8).map(|c| y.get(&[r, c]) as f64).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "mean {mean} var {var}");
    }
    let constant = tape
        .constant(Tensor::<f32>::full([2, 3], 4.0))
        .layer_norm(1, tape.constant(Tensor::ones([3])), tape.constant(Tensor::zeros([3])), 1e-5)
        .unwrap()
        .value();
    assert!(constant.data().iter().all(|&v| v == 0.0));
    let beta = Tensor::<f32>::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
    let gamma_zero = tape
        .constant(Tensor::<f32>::uniform(vec![2, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(82)))
        .layer_norm(1, tape.constant(Tensor::zeros([3])), tape.constant(beta.clone()), 1e-5)
        .unwrap()
        .value();
    for r in 0..2 {
        for c in 0..3 {
            assert_eq!(gamma_zero.get(&[r, c]), beta.get(&[c]));
        }
    }
}

#[test]
fn smooth_l1_closed_forms_and_elu_anchor() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rt(&[5], 90));
    assert!(x.smooth_l1(x).unwrap().value().data().iter().all(|&v| v == 0.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    let two = tape.constant(Tensor::scalar(2.0));
    assert_eq!(zero.smooth_l1(two).unwrap().value().item(), 1.5);
    assert_eq!(zero.elu().add_scalar(1.0).value().item(), 1.0);
}
