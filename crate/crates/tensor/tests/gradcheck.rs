//! Finite-difference verification of every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segcls_tensor::{Conv3dSpec, ConvTranspose1dSpec, Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compare analytic gradients of `sum(f(inputs) * probe)` against central
/// differences for every input element.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars);
        let out_val = (*g.value(out)).clone();
        let probe = probe.cloned().unwrap_or_else(|| Tensor::zeros(out_val.shape()));
        let p = g.constant(probe);
        let loss = g.sum_all(g.mul(out, p));
        let grads = g.backward(loss);
        let gs = vars.iter().zip(inputs).map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        (g.value(loss).item(), gs, out_val)
    };
    let (_, _, out0) = eval(&inputs, None);
    let probe = random(out0.shape(), &mut rng);
    let (_, analytic, _) = eval(&inputs, Some(&probe));
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k} element {i}: analytic {a} numeric {numeric} rel err {err}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], |g, v| g.tanh(v[0]));
    check(vec![a.clone()], |g, v| g.relu(v[0]));
    check(vec![a.clone()], |g, v| g.scale(g.add_scalar(v[0], 0.3), -2.0));
    check(vec![a], |g, v| g.mean_all(v[0]));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    check(vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(vec![a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1));
    check(vec![a.clone()], |g, v| g.slice(v[0], 2, 1, 3));
    check(vec![a.clone()], |g, v| g.mean_axis(v[0], 1));
    check(vec![a.clone()], |g, v| g.flip(v[0], &[0, 2]));
    check(vec![a], |g, v| g.reshape(v[0], &[6, 4]));
}

#[test]
fn linear_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5, 3], &mut rng);
    let w = random(&[4, 3], &mut rng);
    let b = random(&[4], &mut rng);
    check(vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn conv3d_strided_and_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 2, 4, 5, 4], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x.clone(), w.clone(), b.clone()], |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::new(2, 1)));
    check(vec![x, w], |g, v| g.conv3d(v[0], v[1], None, Conv3dSpec::new(1, 1)));
}

#[test]
fn conv3d_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 2, 3, 2], &mut rng);
    let w = random(&[2, 3, 1, 1, 1], &mut rng);
    let b = random(&[2], &mut rng);
    check(vec![x, w, b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::new(1, 0)));
}

#[test]
fn conv3d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 2, 5, 4, 6], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let g = Graph::<f64>::no_grad();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.value(g.conv3d(xv, wv, None, Conv3dSpec::new(2, 1)));
    assert_eq!(y.shape(), [1, 3, 3, 2, 3]);
    let at = |c: usize, i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= 5 || j >= 4 || k >= 6 {
            0.0
        } else {
            x.data()[((c * 5 + i as usize) * 4 + j as usize) * 6 + k as usize]
        }
    };
    for co in 0..3 {
        for (oi, oj, ok) in (0..3).flat_map(|i| (0..2).flat_map(move |j| (0..3).map(move |k| (i, j, k)))) {
            let mut s = 0.0;
            for ci in 0..2 {
                for (a, b, c) in (0..3).flat_map(|a| (0..3).flat_map(move |b| (0..3).map(move |c| (a, b, c)))) {
                    let wv = w.data()[(((co * 2 + ci) * 3 + a) * 3 + b) * 3 + c];
                    s += wv * at(ci, 2 * oi as isize + a as isize - 1, 2 * oj as isize + b as isize - 1, 2 * ok as isize + c as isize - 1);
                }
            }
            let got = y.data()[((co * 3 + oi) * 2 + oj) * 3 + ok];
            assert!((got - s).abs() < 1e-12, "{got} vs {s}");
        }
    }
}

#[test]
fn conv_transpose1d_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[3, 2, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let spec = ConvTranspose1dSpec { stride: 2, padding: 1, output_padding: 1 };
    let g = Graph::<f64>::no_grad();
    let y = g.conv_transpose1d(g.constant(x.clone()), g.constant(w.clone()), None, spec);
    assert_eq!(g.shape(y), [2, 2, 8]);
    check(vec![x, w, b], move |g, v| g.conv_transpose1d(v[0], v[1], Some(v[2]), spec));
}

#[test]
fn normalization_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 4, 3, 2], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5));
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).0);
    let mean = random(&[4], &mut rng);
    let var = Tensor::from_fn(&[4], |i| 0.5 + i as f64);
    check(vec![x, gamma, beta], move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5));
}

#[test]
fn group_norm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 8, 4, 4, 4], &mut rng);
    let g = Graph::<f64>::no_grad();
    let y = g.group_norm(g.constant(x), g.constant(Tensor::ones(&[8])), g.constant(Tensor::zeros(&[8])), 4, 1e-5);
    let y = g.value(y);
    for group in y.data().chunks(2 * 64) {
        let mean: f64 = group.iter().sum::<f64>() / group.len() as f64;
        let var: f64 = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn pooling_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[1, 2, 4, 2, 4], &mut rng);
    check(vec![x.clone()], |g, v| g.max_pool3d_2x(v[0]));
    check(vec![x.clone()], |g, v| g.upsample2x(v[0]));
    check(vec![x], |g, v| g.resize_trilinear(v[0], [3, 5, 7]));
}

#[test]
fn upsample_reproduces_half_pixel_linear_interpolation() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::new(&[1, 1, 1, 1, 2], vec![0.0, 1.0]));
    let y = g.value(g.upsample2x(x));
    assert_eq!(y.shape(), [1, 1, 2, 2, 4]);
    assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn weighted_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    let w = Tensor::new(&[2], vec![0.7, 1.3]);
    check(vec![a, b, w], |g, v| g.weighted_fuse(&[v[0], v[1]], v[2], 1e-4));
}

#[test]
fn dropout_scales_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(&[1000]));
    let y = g.value(g.dropout(x, 0.2, &mut rng));
    let kept = y.data().iter().filter(|&&v| v != 0.0).count();
    assert!((700..900).contains(&kept), "{kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
}

#[test]
fn meta_mode_propagates_shapes_only() {
    let g = Graph::<f32>::no_grad();
    let x = g.constant(Tensor::meta(&[1, 4, 128, 128, 96]));
    let w = g.constant(Tensor::meta(&[16, 4, 3, 3, 3]));
    let y = g.conv3d(x, w, None, Conv3dSpec::new(2, 1));
    assert_eq!(g.shape(y), [1, 16, 64, 64, 48]);
    assert!(g.is_meta(y));
    let up = g.upsample2x(g.max_pool3d_2x(y));
    assert_eq!(g.shape(up), [1, 16, 64, 64, 48]);
}
