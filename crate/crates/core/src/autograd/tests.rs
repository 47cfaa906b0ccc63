use super::*;

fn det_values(n: usize, seed: f64) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.754_877 + seed).sin() * 0.9 + ((i as f64) * 0.13).cos() * 0.1)
        .collect()
}

/// Projects `out` onto fixed weights so every output element contributes.
fn project(g: &mut Graph<f64>, out: Var) -> Var {
    let n = g.value(out).len();
    let flat = g.reshape(out, &[1, n]);
    let r = g.input(Tensor::new(vec![n, 1], det_values(n, 0.3)).unwrap());
    g.matmul(flat, r)
}

/// Compares analytic input gradients to central differences for `build`.
fn check<F>(shapes: &[Vec<usize>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let n = s.iter().product();
            Tensor::new(s.clone(), det_values(n, k as f64 * 1.7)).unwrap()
        })
        .collect();
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.tracked_input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = project(&mut g, out);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.tracked_input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = project(&mut g, out);
    let grads = g.backward(loss);
    let eps = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.var(*v).cloned().unwrap_or_else(|| Tensor::zeros(&shapes[k]));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { vec![4, 3] } else { vec![3, 4] };
        let b = if tb { vec![5, 4] } else { vec![4, 5] };
        check(&[a, b], |g, v| g.matmul_t(v[0], ta, v[1], tb));
    }
}

#[test]
fn elementwise_ops() {
    check(&[vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1]));
    check(&[vec![2, 3], vec![2, 3]], |g, v| {
        let s = g.add(v[0], v[1]);
        let m = g.mul(s, v[1]);
        g.scale(m, 0.7)
    });
    check(&[vec![3, 5]], |g, v| {
        let s = g.sigmoid(v[0]);
        let t = g.tanh(v[0]);
        g.add(s, t)
    });
    check(&[vec![3, 5]], |g, v| {
        let shifted = g.scale(v[0], 1.3);
        g.relu(shifted)
    });
}

#[test]
fn conv2d_with_stride_and_padding() {
    check(&[vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    check(&[vec![2, 3, 4, 4], vec![2, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
}

#[test]
fn conv3d_temporal_with_replicate_padding() {
    check(&[vec![5, 2, 3, 3], vec![3, 2, 2, 3, 3], vec![2]], |g, v| {
        g.conv3d_temporal(v[0], v[1], v[2], 2)
    });
}

#[test]
fn pooling_ops() {
    check(&[vec![1, 2, 5, 5]], |g, v| g.max_pool2d(v[0], 3, 2, 1));
    check(&[vec![3, 2, 2, 3]], |g, v| g.spatial_max(v[0]));
    check(&[vec![3, 2, 2, 3]], |g, v| g.spatial_mean(v[0]));
    check(&[vec![2, 3, 2, 2], vec![3], vec![3]], |g, v| {
        g.channel_affine(v[0], v[1], v[2])
    });
}

#[test]
fn similarity_ops() {
    check(&[vec![5, 3]], |g, v| g.neg_sq_dist(v[0]));
    check(&[vec![4, 3]], |g, v| {
        let n = g.normalize_rows(v[0]);
        g.matmul_t(n, false, n, true)
    });
    check(&[vec![4, 6]], |g, v| g.softmax_rows(v[0]));
}

#[test]
fn normalization_ops() {
    check(&[vec![4, 5], vec![5], vec![5]], |g, v| g.layer_norm(v[0], v[1], v[2]));
    check(&[vec![6, 3], vec![3], vec![3]], |g, v| g.column_norm(v[0], v[1], v[2]));
}

#[test]
fn layout_ops() {
    check(&[vec![2, 3, 4]], |g, v| g.permute3(v[0], [1, 2, 0]));
    check(&[vec![2, 3, 4]], |g, v| g.permute3(v[0], [2, 0, 1]));
    check(&[vec![3, 6]], |g, v| g.slice_cols(v[0], 2, 3));
    check(&[vec![3, 2], vec![3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]));
    check(&[vec![5, 2]], |g, v| g.slice_rows(v[0], 1, 3));
    check(&[vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]));
    check(&[vec![5, 2]], |g, v| g.shift_rows(v[0], 2));
    check(&[vec![1, 4]], |g, v| g.repeat_rows(v[0], 3));
}

#[test]
fn loss_ops() {
    check(&[vec![4, 5]], |g, v| {
        g.softmax_cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
    });
    check(&[vec![4, 1]], |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0]));
}

#[test]
fn masked_cross_entropy_is_zero_without_targets() {
    let mut g = Graph::<f64>::new();
    let x = g.tracked_input(Tensor::full(&[3, 4], 0.5));
    let l = g.softmax_cross_entropy(x, &[None, None, None]);
    assert_eq!(g.value(l).data()[0], 0.0);
    let grads = g.backward(l);
    assert!(grads.var(x).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn params_are_deduplicated_and_reported() {
    let mut g = Graph::<f64>::new();
    let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let a = g.param("w", &w);
    let b = g.param("w", &w);
    assert_eq!(a, b);
    let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let y = g.matmul(x, a);
    let y2 = g.matmul(y, b);
    let r = g.input(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let l = g.matmul(y2, r);
    let grads = g.backward(l);
    assert_eq!(grads.params().len(), 1);
    assert_eq!(grads.param("w").unwrap().shape(), &[2, 2]);
}

#[test]
fn neg_sq_dist_is_exactly_symmetric() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::from_fn(&[7, 5], |i| (i as f32 * 1.37).sin() * 40.0));
    let s = g.neg_sq_dist(x);
    let v = g.value(s);
    for i in 0..7 {
        assert_eq!(v.at(i, i), 0.0);
        for j in 0..7 {
            assert_eq!(v.at(i, j), v.at(j, i));
        }
    }
}
