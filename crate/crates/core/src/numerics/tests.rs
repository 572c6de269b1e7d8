use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>;

/// Scalarizes `build(inputs)` with a fixed random projection and returns the
/// worst mixed relative/absolute discrepancy between backward and central
/// differences over every input entry.
fn worst_fd_error(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let proj = Tensor::<f64>::randn(&out_shape, &mut rng);
    let loss_of = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let pv = g.constant(proj.clone());
        let prod = g.mul(out, pv).unwrap();
        let l = g.sum(prod);
        (g, l, vars)
    };
    let (g, l, vars) = loss_of(inputs);
    let grads = g.backward(l).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].numel() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[j] += eps;
            let mut down = inputs.to_vec();
            down[k].data_mut()[j] -= eps;
            let (gu, lu, _) = loss_of(&up);
            let (gd, ld, _) = loss_of(&down);
            let numeric = (gu.value(lu).item() - gd.value(ld).item()) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

const SEEDS: u64 = 20;

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[3, 3], &mut rng);
        let b = rand_tensor(&[3, 3], &mut rng);
        let err = worst_fd_error(&|g, v| g.matmul(v[0], v[1]), &[a, b], seed);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn sum_of_product_gradient_wrt_left_is_row_sums_of_right() {
    // d/dA sum(A·B) = 1·Bᵀ, i.e. every row equals the row sums of B.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&[3, 3], &mut rng);
    let b = rand_tensor(&[3, 3], &mut rng);
    let mut g = Graph::new();
    let va = g.input(a);
    let vb = g.constant(b.clone());
    let p = g.matmul(va, vb).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    let da = grads.get(va).unwrap();
    for i in 0..3 {
        for k in 0..3 {
            let row_sum: f64 = b.row(k).iter().sum();
            assert!((da.data()[i * 3 + k] - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let kinds = [
        UnaryKind::Neg,
        UnaryKind::Exp,
        UnaryKind::Sigmoid,
        UnaryKind::LeakyRelu(0.01),
        UnaryKind::Swish,
        UnaryKind::Softplus,
        UnaryKind::Clamp(-0.5, 0.5),
    ];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[4, 5], &mut rng);
        for kind in kinds {
            let err = worst_fd_error(&move |g, v| g.unary(kind, v[0]), &[x.clone()], seed);
            assert!(err <= 1e-4, "{kind:?} seed {seed}: {err}");
        }
        let pos = x.map(|v| v.abs() + 0.1);
        let err = worst_fd_error(&|g, v| g.log(v[0]), &[pos], seed);
        assert!(err <= 1e-4, "log seed {seed}: {err}");

        let y = rand_tensor(&[4, 5], &mut rng);
        for (name, f) in [
            ("add", &(|g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1])) as &Build),
            ("sub", &|g, v| g.sub(v[0], v[1])),
            ("mul", &|g, v| g.mul(v[0], v[1])),
        ] {
            let err = worst_fd_error(f, &[x.clone(), y.clone()], seed);
            assert!(err <= 1e-4, "{name} seed {seed}: {err}");
        }
        let sc = rand_tensor(&[1], &mut rng);
        let err = worst_fd_error(&|g, v| g.mul(v[0], v[1]), &[x.clone(), sc], seed);
        assert!(err <= 1e-4, "scalar mul seed {seed}: {err}");
        let bias = rand_tensor(&[5], &mut rng);
        let err = worst_fd_error(&|g, v| g.add_bias(v[0], v[1]), &[x.clone(), bias], seed);
        assert!(err <= 1e-4, "add_bias seed {seed}: {err}");
    }
}

#[test]
fn elementwise_reference_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 0.0]).unwrap());
    let lr = g.leaky_relu(x, 0.01).unwrap();
    assert!((g.value(lr).data()[0] + 0.01).abs() < 1e-15);
    let sw = g.swish(x).unwrap();
    assert_eq!(g.value(sw).data()[1], 0.0);
    let sg = g.sigmoid(x).unwrap();
    assert_eq!(g.value(sg).data()[1], 0.5);
}

#[test]
fn log_of_nonpositive_is_domain_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
    assert!(matches!(g.log(x), Err(NumericsError::Domain { .. })));
}

#[test]
fn incompatible_broadcast_is_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(NumericsError::Dimension { .. })));
}

fn unit_running(f: usize) -> RunningStats<f64> {
    RunningStats {
        mean: Tensor::zeros(&[f]),
        var: Tensor::ones(&[f]),
    }
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[4, 3], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        for mode in [NormMode::Train, NormMode::Eval] {
            let err = worst_fd_error(
                &move |g, v| Ok(g.batchnorm(v[0], v[1], v[2], &unit_running(3), mode)?.0),
                &[x.clone(), gamma.clone(), beta.clone()],
                seed,
            );
            assert!(err <= 1e-4, "{mode:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn batchnorm_constant_column_gives_zero_mean_output() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3, 2], &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap());
    let gm = g.constant(Tensor::ones(&[2]));
    let bt = g.constant(Tensor::zeros(&[2]));
    let (y, stats) = g
        .batchnorm(x, gm, bt, &unit_running(2), NormMode::Train)
        .unwrap();
    let out = g.value(y);
    for r in 0..3 {
        assert_eq!(out.data()[r * 2], 0.0);
    }
    let col: f64 = (0..3).map(|r| out.data()[r * 2 + 1]).sum();
    assert!(col.abs() < 1e-12);
    let stats = stats.unwrap();
    // running mean moves 10% of the way to the batch mean
    assert!((stats.mean.data()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn batchnorm_eval_with_unit_statistics_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&[1, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt.clone());
    let gm = g.constant(Tensor::ones(&[4]));
    let bt = g.constant(Tensor::zeros(&[4]));
    let (y, stats) = g
        .batchnorm(x, gm, bt, &unit_running(4), NormMode::Eval)
        .unwrap();
    assert!(stats.is_none());
    for (a, b) in g.value(y).data().iter().zip(xt.data()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn batchnorm_single_row_train_is_config_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let gm = g.constant(Tensor::ones(&[2]));
    let bt = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        g.batchnorm(x, gm, bt, &unit_running(2), NormMode::Train),
        Err(NumericsError::Config(_))
    ));
}

#[test]
fn conv2d_reference_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = rand_tensor(&[2, 1, 4, 4], &mut rng);
    let x = g.constant(img.clone());
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &img);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let err = worst_fd_error(
            &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
            &[x, w, b],
            seed,
        );
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn conv_transpose2d_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let err = worst_fd_error(
            &|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
            &[x, w, b],
            seed,
        );
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn conv_transpose_inverts_strided_conv_shape() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 64, 7, 7]));
    let w = g.constant(Tensor::zeros(&[64, 32, 4, 4]));
    let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 32, 14, 14]);
}

#[test]
fn conv_output_must_be_positive() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(
        g.conv2d(x, w, None, 1, 0),
        Err(NumericsError::Shape(_))
    ));
}

#[test]
fn concat_shapes_and_gradient_routing() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 512]));
    let b = g.constant(Tensor::zeros(&[2, 128]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 640]);
    let single = g.concat(&[a], 1).unwrap();
    assert_eq!(g.value(single), g.value(a));
    let bad = g.constant(Tensor::zeros(&[3, 128]));
    assert!(g.concat(&[a, bad], 1).is_err());

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 3], &mut rng);
        let y = rand_tensor(&[2, 2], &mut rng);
        let z = rand_tensor(&[1, 2], &mut rng);
        let err = worst_fd_error(&|g, v| g.concat(&v[..2], 1), &[x.clone(), y.clone()], seed);
        assert!(err <= 1e-4);
        let err = worst_fd_error(&|g, v| g.concat(&v[1..], 0), &[x, y, z], seed);
        assert!(err <= 1e-4);
    }
}

#[test]
fn logsumexp_reference_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    let l = g.logsumexp(x, 0).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    let x = g.constant(Tensor::from_f64(&[2], &[1000.0, 1000.0]).unwrap());
    let l = g.logsumexp(x, 0).unwrap();
    assert!((g.value(l).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    let x = g.constant(Tensor::from_f64(&[1], &[-3.25]).unwrap());
    let l = g.logsumexp(x, 0).unwrap();
    assert_eq!(g.value(l).item(), -3.25);
    let x = g.constant(Tensor::from_f64(&[2], &[-1e4, 1e4]).unwrap());
    let l = g.logsumexp(x, 0).unwrap();
    assert_eq!(g.value(l).item(), 1e4);
    assert!(g.logsumexp(x, 1).is_err());
}

#[test]
fn reductions_and_reshapes_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[3, 4, 2], &mut rng);
        for axis in 0..3 {
            let err = worst_fd_error(&move |g, v| g.logsumexp(v[0], axis), &[x.clone()], seed);
            assert!(err <= 1e-4, "lse axis {axis}: {err}");
            let err = worst_fd_error(&move |g, v| g.sum_axis(v[0], axis), &[x.clone()], seed);
            assert!(err <= 1e-4, "sum axis {axis}: {err}");
        }
        let m = rand_tensor(&[3, 4], &mut rng);
        let err = worst_fd_error(&|g, v| g.log_softmax(v[0]), &[m.clone()], seed);
        assert!(err <= 1e-4);
        let err = worst_fd_error(&|g, v| Ok(g.mean(v[0])), &[m.clone()], seed);
        assert!(err <= 1e-4);
        let err = worst_fd_error(&|g, v| g.reshape(v[0], &[2, 6]), &[m.clone()], seed);
        assert!(err <= 1e-4);
        let row = rand_tensor(&[1, 4], &mut rng);
        let err = worst_fd_error(&|g, v| g.repeat_rows(v[0], 3), &[row], seed);
        assert!(err <= 1e-4);
    }
}

#[test]
fn backward_basic_contracts() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("p", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
    let unused = store.insert("q", Tensor::ones(&[2])).unwrap();

    let mut g = Graph::new();
    let p = g.param(&store, id);
    let l = g.sum(p);
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let p = g.param(&store, id);
    let z = g.scale(p, 0.0);
    let l = g.sum(z);
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.data(), &[0.0, 0.0, 0.0]);

    let mut g = Graph::new();
    let p = g.param(&store, id);
    assert!(matches!(g.backward(p), Err(NumericsError::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logsumexp_is_shift_equivariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        c in -1e3f64..1e3,
    ) {
        let mut g = Graph::<f64>::new();
        let n = xs.len();
        let x = g.constant(Tensor::from_f64(&[n], &xs).unwrap());
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let xc = g.constant(Tensor::from_f64(&[n], &shifted).unwrap());
        let a = g.logsumexp(x, 0).unwrap();
        let b = g.logsumexp(xc, 0).unwrap();
        let lhs = g.value(b).item();
        let rhs = g.value(a).item() + c;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let wt = Tensor::<f64>::randn(&[4, 2], &mut rng);
        let grad_of = |a: f64, b: f64| {
            let mut g = Graph::new();
            let x = g.input(xt.clone());
            let w = g.constant(wt.clone());
            let h = g.matmul(x, w).unwrap();
            let f1 = g.swish(h).unwrap();
            let f = g.sum(f1);
            let e = g.exp(x).unwrap();
            let q = g.mul(e, x).unwrap();
            let gl = g.sum(q);
            let fa = g.scale(f, a);
            let gb = g.scale(gl, b);
            let l = g.add(fa, gb).unwrap();
            g.backward(l).unwrap().get(x).unwrap().clone()
        };
        let combined = grad_of(alpha, beta);
        let f_only = grad_of(1.0, 0.0);
        let g_only = grad_of(0.0, 1.0);
        for i in 0..combined.numel() {
            let expect = alpha * f_only.data()[i] + beta * g_only.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn ops_stay_finite_on_documented_domains(xs in prop::collection::vec(-80.0f64..80.0, 1..16)) {
        let n = xs.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[1, n], &xs).unwrap());
        for kind in [UnaryKind::Sigmoid, UnaryKind::Swish, UnaryKind::Softplus, UnaryKind::LeakyRelu(0.01), UnaryKind::Exp] {
            let y = g.unary(kind, x).unwrap();
            prop_assert!(g.value(y).is_finite());
        }
        let y = g.log_softmax(x).unwrap();
        prop_assert!(g.value(y).is_finite());
    }
}
