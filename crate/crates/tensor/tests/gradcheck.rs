use densim_tensor::check::{central_difference, relative_error};
use densim_tensor::{BnMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Compares backprop against central differences for every input coordinate.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).expect("missing gradient").clone();
        let mut flat = input.data().to_vec();
        for i in 0..flat.len() {
            let numeric = central_difference(&mut flat, i, 1e-6, |x| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == idx {
                            g.leaf(Tensor::new(t.shape().to_vec(), x.to_vec()), true)
                        } else {
                            g.leaf(t.clone(), true)
                        }
                    })
                    .collect();
                let out = build(&mut g, &vars);
                g.value(out).item()
            });
            let err = relative_error(analytic.data()[i], numeric, 1e-7);
            assert!(err < 1e-5, "input {idx} coord {i}: analytic {} numeric {numeric}", analytic.data()[i]);
        }
    }
}

/// Weighted sum so that every output coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
    let w = g.constant(w);
    let p = g.mul(v, w);
    g.sum_all(p)
}

#[test]
fn pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(vec![2, 3], &mut rng);
    let b = random(vec![2, 3], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.sqr(m);
        let k = g.scale(q, 1.7);
        let k = g.add_scalar(k, 0.3);
        let sg = g.sigmoid(k);
        let r = g.relu(v[0]);
        let t = g.add(sg, r);
        weighted_sum(g, t)
    });
    check(vec![a], |g, v| {
        let m = g.mean_all(v[0]);
        let s = g.sqr(m);
        g.sum_all(s)
    });
}

#[test]
fn matmul_all_transpose_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for ta in [false, true] {
        for tb in [false, true] {
            let a = random(if ta { vec![4, 3] } else { vec![3, 4] }, &mut rng);
            let b = random(if tb { vec![5, 4] } else { vec![4, 5] }, &mut rng);
            check(vec![a, b], |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb);
                weighted_sum(g, m)
            });
        }
    }
    let a = random(vec![3, 2], &mut rng);
    check(vec![a], |g, v| {
        let t = g.transpose(v[0]);
        weighted_sum(g, t)
    });
}

#[test]
fn conv2d_strided_padded_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(vec![2, 2, 6, 5], &mut rng);
    let w = random(vec![3, 2, 3, 3], &mut rng);
    let b = random(vec![3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            weighted_sum(g, y)
        });
    }
    let w1 = random(vec![4, 2, 1, 1], &mut rng);
    check(vec![x, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0);
        weighted_sum(g, y)
    });
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(vec![1, 2, 5, 4], &mut rng);
    let w = random(vec![2, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1);
    let y = g.value(y).clone();
    assert_eq!(y.shape(), &[1, 2, 3, 2]);
    for co in 0..2 {
        for oy in 0..3 {
            for ox in 0..2 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let iy = (oy * 2 + ki) as isize - 1;
                            let ix = (ox * 2 + kj) as isize - 1;
                            if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                s += x.data()[(ci * 5 + iy as usize) * 4 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                assert!((y.data()[(co * 3 + oy) * 2 + ox] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(vec![2, 3, 2, 2], &mut rng);
    let gamma = random(vec![3], &mut rng);
    let beta = random(vec![3], &mut rng);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train);
        weighted_sum(g, y)
    });
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 0.9];
    check(vec![x, gamma, beta], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var });
        weighted_sum(g, y)
    });
}

#[test]
fn channel_pooling_upsample_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(vec![2, 3, 2, 3], &mut rng);
    check(vec![x.clone()], |g, v| {
        let m = g.max_channels(v[0]);
        let a = g.mean_channels(v[0]);
        let c = g.concat(m, a, 1);
        let u = g.upsample_nearest(c, 2, 3);
        weighted_sum(g, u)
    });
    check(vec![x.clone()], |g, v| {
        let r = g.to_rows(v[0]);
        let s = g.softmax_rows(r);
        let b = g.from_rows(s, 2, 2, 3);
        weighted_sum(g, b)
    });
    check(vec![x], |g, v| {
        let n = g.narrow(v[0], 3, 1, 2);
        let n2 = g.narrow(v[0], 1, 0, 1);
        let a = weighted_sum(g, n);
        let b = weighted_sum(g, n2);
        g.add(a, b)
    });
}

#[test]
fn bce_with_logits_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(vec![2, 3], &mut rng).map(|v| v * 3.0);
    let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    check(vec![logits], |g, v| g.bce_with_logits(v[0], &targets));
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
    let b = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
    let m = g.mul(a, b);
    let s = g.sum_all(m);
    let grads = g.backward(s);
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    assert!(grads.get(b).is_none());
}

#[test]
fn softmax_rows_are_stochastic_even_for_large_inputs() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], vec![1000.0, 999.0, -1000.0, 0.0, 0.0, 0.0]));
    let s = g.softmax_rows(x);
    for row in g.value(s).data().chunks(3) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
