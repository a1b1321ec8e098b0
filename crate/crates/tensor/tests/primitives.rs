use kws_tensor::gradcheck::check_gradients;
use kws_tensor::{same_padding, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

/// Direct sliding-window cross-correlation with the same padding rule.
fn sliding_window_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], stride: usize) -> (Vec<usize>, Vec<f64>) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, _) = same_padding(h, kh, stride);
    let (pl, _) = same_padding(w, kw, stride);
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Vec::new();
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pt as isize;
                            let xx = (ox * stride + kx) as isize - pl as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += x.at(&[ci, y as usize, xx as usize]) * k.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    (vec![c_out, ho, wo], out)
}

#[test]
fn matmul_identity_and_scalar() {
    let mut t = Tape::<f32>::new();
    let eye = t.leaf(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let b = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 4.0, 0.0, 7.25]).unwrap();
    let bv = t.leaf(b.clone());
    let out = t.matmul(eye, bv).unwrap();
    assert_eq!(t.value(out), &b);

    let a = t.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let c = t.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let p = t.matmul(a, c).unwrap();
    assert_eq!(t.value(p).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(3, 4, 2), (7, 5, 9), (1, 13, 4), (16, 16, 16)] {
        let (a, b) = (uniform(&[m, k], &mut rng), uniform(&[k, n], &mut rng));
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let out = t.matmul(va, vb).unwrap();
        let oracle = triple_loop(&a, &b);
        for (x, y) in t.value(out).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.leaf(Tensor::zeros(vec![2, 3]));
    let b = t.leaf(Tensor::zeros(vec![4, 2]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![4, 2] });
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
}

#[test]
fn matmul_is_linear_in_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (uniform(&[4, 6], &mut rng), uniform(&[6, 3], &mut rng));
    for alpha in [-2.0, 0.5] {
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let scaled = t.scale(va, alpha);
        let lhs = t.matmul(scaled, vb).unwrap();
        let ab = t.matmul(va, vb).unwrap();
        let rhs = t.scale(ab, alpha);
        assert!(t.value(lhs).max_abs_diff(t.value(rhs)) < 1e-5);
    }
}

#[test]
fn conv_counts_valid_taps_on_ones() {
    let x = Tensor::<f64>::full(vec![1, 4, 4], 1.0);
    let k = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
    let mut t = Tape::new();
    let (vx, vk, vb) = (t.leaf(x.clone()), t.leaf(k.clone()), t.leaf(Tensor::zeros(vec![1])));
    let out = t.conv2d(vx, vk, vb, (2, 2)).unwrap();
    let (shape, oracle) = sliding_window_conv(&x, &k, &[0.0], 2);
    assert_eq!(t.shape(out), shape.as_slice());
    assert_eq!(t.value(out).data(), oracle.as_slice());
    // 4 -> 2 with one trailing pad: windows cover 3x3, 3x2, 2x3, 2x2 valid taps.
    assert_eq!(oracle, vec![9.0, 6.0, 6.0, 4.0]);
}

#[test]
fn conv_matches_sliding_window_on_random_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c_in, h, w, c_out, stride) in [(1, 7, 9, 2, 2), (3, 6, 5, 4, 2), (2, 5, 5, 3, 1)] {
        let x = uniform(&[c_in, h, w], &mut rng);
        let k = uniform(&[c_out, c_in, 3, 3], &mut rng);
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let vk = t.leaf(k.clone());
        let vb = t.leaf(Tensor::new(vec![c_out], bias.clone()).unwrap());
        let out = t.conv2d(vx, vk, vb, (stride, stride)).unwrap();
        let (shape, oracle) = sliding_window_conv(&x, &k, &bias, stride);
        assert_eq!(t.shape(out), shape.as_slice());
        for (a, b) in t.value(out).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_chain_for_one_second_input() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::zeros(vec![1, 1, 40, 98]));
    let k1 = t.leaf(Tensor::zeros(vec![32, 1, 3, 3]));
    let k2 = t.leaf(Tensor::zeros(vec![32, 32, 3, 3]));
    let bias = t.leaf(Tensor::full(vec![32], 0.1));
    let h1 = t.conv2d(x, k1, bias, (2, 2)).unwrap();
    assert_eq!(t.shape(h1), &[1, 32, 20, 49]);
    let h2 = t.conv2d(h1, k2, bias, (2, 2)).unwrap();
    assert_eq!(t.shape(h2), &[1, 32, 10, 25]);
    // zero input: output is the bias broadcast
    let expect = 0.1 + 32.0 * 9.0 * 0.0;
    assert!(t.value(h1).data().iter().all(|&v| v == 0.1f32));
    assert!(t.value(h2).data().iter().all(|&v| (v - expect as f32).abs() < 1e-7));
}

#[test]
fn conv_rejects_empty_spatial_extent() {
    let mut t = Tape::<f32>::new();
    assert!(Tensor::<f32>::new(vec![1, 0, 4], vec![]).is_err());
    let x = t.leaf(Tensor::zeros(vec![2, 4, 4]));
    let k = t.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
    let b = t.leaf(Tensor::zeros(vec![1]));
    assert!(t.conv2d(x, k, b, (2, 2)).is_err());
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

    let c = t.leaf(Tensor::full(vec![5, 3], 1.5));
    let m = t.mean_axis(c, 0).unwrap();
    assert_eq!(t.value(m).shape(), &[3]);
    assert_eq!(t.value(m).data(), &[1.5, 1.5, 1.5]);

    let z = t.leaf(Tensor::zeros(vec![12]));
    let s = t.softmax(z).unwrap();
    for &p in t.value(s).data() {
        assert!((p - 1.0 / 12.0).abs() < 1e-7);
    }
}

#[test]
fn axis_errors() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::zeros(vec![2, 3]));
    assert!(matches!(t.mean_axis(x, 2), Err(TensorError::AxisOutOfRange { axis: 2, rank: 2, .. })));
    assert!(matches!(t.concat(&[x, x], 5), Err(TensorError::AxisOutOfRange { .. })));
    assert!(matches!(t.slice(x, 3, 0, 1), Err(TensorError::AxisOutOfRange { .. })));
    assert!(t.permute(x, &[0, 0]).is_err());
}

#[test]
fn backward_square() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
}

#[test]
fn backward_mse_is_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (uniform(&[20], &mut rng), uniform(&[20], &mut rng));
    let mut t = Tape::new();
    let va = t.param(a.clone());
    let vb = t.leaf(b.clone());
    let d = t.sub(va, vb).unwrap();
    let sq = t.mul(d, d).unwrap();
    let loss = t.mean_all(sq);
    let g = t.backward(loss).unwrap();
    for ((ga, x), y) in g.wrt(va).data().iter().zip(a.data()).zip(b.data()) {
        assert!((ga - 2.0 * (x - y) / 20.0).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unreachable() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::full(vec![2], 1.0));
    let unused = t.param(Tensor::full(vec![4], 1.0));
    let y = t.scale(x, 2.0);
    assert_eq!(t.backward(y).unwrap_err(), TensorError::NotScalar(vec![2]));
    let s = t.sum_all(y);
    let g = t.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
    assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&[2, 3, 8, 8], &mut rng).cast::<f32>();
        let k = uniform(&[4, 3, 3, 3], &mut rng).cast::<f32>();
        let mut t = Tape::<f32>::new();
        let vx = t.leaf(x);
        let vk = t.param(k);
        let vb = t.param(Tensor::full(vec![4], 0.1));
        let y = t.conv2d(vx, vk, vb, (2, 2)).unwrap();
        let y = t.dropout(y, 0.1, &mut rng).unwrap();
        let l = t.mean_all(y);
        let g = t.backward(l).unwrap();
        (t.value(y).clone(), g.wrt(vk))
    };
    assert_eq!(run(), run());
}

// ---- gradient checks: five random shapes per primitive -------------------

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn assert_grads(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> kws_tensor::Result<Var>) {
    let errs = check_gradients(&inputs, H, 64, 17, f).unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e <= TOL, "{name}: input {i} relative error {e}");
    }
}

fn shapes2(rng: &mut ChaCha8Rng) -> Vec<[usize; 2]> {
    (0..5).map(|_| [rng.random_range(1..6), rng.random_range(1..7)]).collect()
}

#[test]
fn gradcheck_matmul_and_batch_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let (m, k, n, b) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        assert_grads("matmul", vec![uniform(&[m, k], &mut rng), uniform(&[k, n], &mut rng)], |t, v| t.matmul(v[0], v[1]));
        assert_grads("bmm", vec![uniform(&[b, m, k], &mut rng), uniform(&[b, k, n], &mut rng)], |t, v| {
            t.batch_matmul(v[0], v[1], false)
        });
        assert_grads("bmm_t", vec![uniform(&[b, m, k], &mut rng), uniform(&[b, n, k], &mut rng)], |t, v| {
            t.batch_matmul(v[0], v[1], true)
        });
    }
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for s in shapes2(&mut rng) {
        let (a, b) = (uniform(&s, &mut rng), uniform(&s, &mut rng));
        assert_grads("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        assert_grads("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        assert_grads("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        assert_grads("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
        assert_grads("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0])));
        assert_grads("abs", vec![a.clone()], |t, v| Ok(t.abs(v[0])));
        let pos = a.map(|x| x.abs() + 0.5);
        assert_grads("log", vec![pos], |t, v| t.log(v[0]));
        let bias = uniform(&s[1..], &mut rng);
        assert_grads("add_broadcast", vec![a.clone(), bias], |t, v| t.add_broadcast(v[0], v[1]));
    }
}

#[test]
fn gradcheck_shape_ops_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let s = [rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..5)];
        let x = uniform(&s, &mut rng);
        let y = uniform(&[s[0], rng.random_range(1..4), s[2]], &mut rng);
        assert_grads("concat", vec![x.clone(), y], |t, v| t.concat(&[v[0], v[1]], 1));
        assert_grads("reshape", vec![x.clone()], |t, v| t.reshape(v[0], &[s[0] * s[1], s[2]]));
        assert_grads("permute", vec![x.clone()], |t, v| t.permute(v[0], &[2, 0, 1]));
        assert_grads("slice", vec![x.clone()], |t, v| t.slice(v[0], 1, 1, s[1] - 1));
        for axis in 0..3 {
            assert_grads("mean_axis", vec![x.clone()], |t, v| t.mean_axis(v[0], axis));
        }
        assert_grads("mean_all", vec![x.clone()], |t, v| Ok(t.mean_all(v[0])));
        assert_grads("sum_all", vec![x.clone()], |t, v| Ok(t.sum_all(v[0])));
        assert_grads("softmax", vec![x.clone()], |t, v| t.softmax(v[0]));
        let m = uniform(&[s[1], s[2]], &mut rng);
        assert_grads("transpose", vec![m], |t, v| t.transpose(v[0]));
    }
}

#[test]
fn gradcheck_network_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        assert_grads(
            "conv2d",
            vec![uniform(&[b, ci, h, w], &mut rng), uniform(&[co, ci, 3, 3], &mut rng), uniform(&[co], &mut rng)],
            |t, v| t.conv2d(v[0], v[1], v[2], (2, 2)),
        );
        let (rows, d) = (rng.random_range(1..5), rng.random_range(2..8));
        assert_grads(
            "layer_norm",
            vec![uniform(&[rows, d], &mut rng), uniform(&[d], &mut rng), uniform(&[d], &mut rng)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        );
        let n = rng.random_range(1..6);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..d)).collect();
        assert_grads("cross_entropy", vec![uniform(&[n, d], &mut rng).map(|x| 3.0 * x)], |t, v| {
            t.cross_entropy(v[0], &labels)
        });
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn(vec![rows, cols], |_| rng.random_range(-10.0..10.0));
        let mut t = Tape::new();
        let v = t.leaf(x);
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(cols in 2usize..15, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn(vec![3, cols], |_| rng.random_range(-20.0..20.0));
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..cols)).collect();
        let mut t = Tape::new();
        let v = t.leaf(x);
        let l = t.cross_entropy(v, &labels).unwrap();
        prop_assert!(t.value(l).item() >= 0.0);
    }

    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let x = Tensor::<f32>::from_fn(vec![a, b, c], |i| i as f32);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let p = t.permute(v, &[1, 2, 0]).unwrap();
        let back = t.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(t.value(back), &x);
    }
}

#[test]
fn overflow_is_recorded_not_fatal() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1e30, 1.0]).unwrap());
    let y = t.scale(x, 1e10);
    assert!(!t.value(y).is_finite());
    let z = t.add(y, y).unwrap();
    if cfg!(debug_assertions) {
        // the add only propagates an infinity it was given
        assert_eq!(t.first_overflow(), Some("scale"));
    }
    assert!(!t.value(z).is_finite());
}
