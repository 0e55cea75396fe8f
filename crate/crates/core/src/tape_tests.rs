use super::*;

/// Deterministic pseudo-random fill in [-1, 1].
fn fill(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Compare tape gradients of every input against central differences.
/// Returns the worst norm-wise relative error over inputs.
fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut num = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            num[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
    }
    worst
}

/// A fixed random linear functional, so every output element matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let r = fill(tape.value(y).shape(), seed);
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum_all(p)
}

#[test]
fn linear_gradients() {
    let err = grad_check(&[fill(&[3, 4], 1), fill(&[5, 4], 2), fill(&[5], 3)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        probe(t, y, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv2d_gradients() {
    let err = grad_check(&[fill(&[2, 2, 6, 5], 4), fill(&[3, 2, 3, 3], 5), fill(&[3], 6)], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        probe(t, y, 10)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_transpose2d_gradients_and_shape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(fill(&[2, 3, 4, 4], 1));
    let w = tape.constant(fill(&[3, 2, 4, 4], 2));
    let y = tape.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 2, 8, 8]);

    let err = grad_check(&[fill(&[2, 3, 3, 3], 7), fill(&[3, 2, 4, 4], 8), fill(&[2], 9)], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        probe(t, y, 11)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x; w), y> == <x, conv_transpose(y; w)> for matching geometry.
    let x = fill(&[1, 2, 8, 8], 3);
    let w = fill(&[3, 2, 4, 4], 4);
    let y = fill(&[1, 3, 4, 4], 5);
    let mut tape = Tape::<f64>::new();
    let (xv, wv, yv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
    let cx = tape.conv2d(xv, wv, None, 2, 1).unwrap();
    let ty = tape.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
    let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn batch_norm_gradients_grouped() {
    for groups in [1, 2] {
        let err = grad_check(&[fill(&[4, 3, 2, 2], 12), fill(&[3], 13), fill(&[3], 14)], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], groups, 1e-5).unwrap();
            probe(t, y, 15)
        });
        assert!(err < 1e-5, "groups {groups}: {err}");
    }
}

#[test]
fn batch_norm_normalizes_each_group() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(fill(&[4, 2, 3, 3], 20));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let (y, stats) = tape.batch_norm(x, g, b, 2, 0.0).unwrap();
    let yv = tape.value(y);
    for group in 0..2 {
        for c in 0..2 {
            let vals: Vec<f64> = (group * 2..group * 2 + 2)
                .flat_map(|bi| yv.data()[(bi * 2 + c) * 9..(bi * 2 + c + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(stats.mean.len(), 2);
    assert!(stats.var.iter().all(|&v| v > 0.0));
}

#[test]
fn batch_norm_eval_gradients() {
    let mean = [0.1, -0.2];
    let var = [0.5, 2.0];
    let err = grad_check(&[fill(&[2, 2, 3, 3], 16), fill(&[2], 17), fill(&[2], 18)], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap();
        probe(t, y, 19)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pointwise_and_pooling_gradients() {
    let err = grad_check(&[fill(&[2, 3, 4, 4], 21)], |t, v| {
        let s = t.sigmoid(v[0]);
        let r = t.relu(s);
        let p = t.avg_pool(r).unwrap();
        let q = t.reshape(p, &[3, 2]).unwrap();
        let q = t.scale(q, 1.5);
        probe(t, q, 22)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn normalize_rowdot_concat_gradients() {
    let err = grad_check(&[fill(&[3, 4], 23), fill(&[3, 4], 24), fill(&[2, 4], 25)], |t, v| {
        let a = t.l2_normalize_rows(v[0], 1e-12).unwrap();
        let b = t.l2_normalize_rows(v[1], 1e-12).unwrap();
        let d = t.row_dot(a, b).unwrap();
        let m = t.matmul_nt(a, v[2]).unwrap();
        let c = t.concat_cols(d, m).unwrap();
        let r = t.concat_rows(c, c).unwrap();
        probe(t, r, 26)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn select_rows_gradients_with_repeats() {
    let err = grad_check(&[fill(&[4, 3], 27)], |t, v| {
        let r = t.select_rows(v[0], &[2, 0, 2, 3]).unwrap();
        probe(t, r, 28)
    });
    assert!(err < 1e-6, "{err}");
    let mut t = Tape::<f64>::new();
    let x = t.leaf(fill(&[2, 3], 1));
    assert!(t.select_rows(x, &[2]).is_err());
}

#[test]
fn nce_gradients_with_and_without_mask() {
    let targets = [1usize, 0, 2];
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 11).collect();
    for m in [None, Some(mask.as_slice())] {
        let err = grad_check(&[fill(&[3, 4], 27)], |t, v| {
            let s = t.scale(v[0], 3.0);
            t.nce(s, &targets, m).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn nce_value_matches_cross_entropy() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = tape.nce(l, &[2], None).unwrap();
    let want = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
    assert!((tape.value(loss).item() - want).abs() < 1e-12);
}

#[test]
fn mse_and_weighted_sum_gradients() {
    let err = grad_check(&[fill(&[2, 5], 28), fill(&[2, 5], 29)], |t, v| {
        let a = t.mse(v[0], v[1]).unwrap();
        let s = t.sum_all(v[0]);
        t.weighted_sum(&[(a, 2.0), (s, -0.5)]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(fill(&[2, 2], 30));
    let d = tape.detach(x);
    let y = tape.mul(d, x).unwrap();
    let s = tape.sum_all(y);
    let grads = tape.backward(s).unwrap();
    // Only the non-detached factor contributes: ds/dx = detached value.
    assert_eq!(grads.get(x).unwrap().data(), tape.value(d).data());
    assert!(grads.get(d).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(fill(&[2, 2], 31));
    assert!(tape.backward(x).is_err());
}
