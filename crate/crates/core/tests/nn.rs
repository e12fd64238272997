use approx::assert_abs_diff_eq;
use exlab_core::nn::gradcheck::{clear_of_kinks, finite_diff_check_with};
use exlab_core::nn::{
    finite_diff_check, load_checkpoint, load_checkpoint_as, save_checkpoint, Activation, Architecture, DenseLayer,
    LayerGrads, Network, Optimizer, OptimizerConfig, ParamGrads, Tensor,
};
use exlab_core::rng::seeded;
use exlab_core::{Error, Result};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn half_sq(out: &Tensor) -> Result<(f64, Tensor)> {
    let v = out.data().iter().map(|x| 0.5 * x * x).sum();
    Ok((v, out.clone()))
}

fn arch(widths: &[usize], hidden: Activation, output: Activation) -> Architecture {
    Architecture { widths: widths.to_vec(), hidden_activation: hidden, output_activation: output }
}

/// Draws a net and batch whose relu pre-activations stay ≥1e-3 from zero.
fn kink_free(a: &Architecture, rows: usize, seed: u64) -> (Network, Tensor) {
    let mut rng = seeded(seed, 0);
    loop {
        let net = Network::new(a, &mut rng).unwrap();
        let batch = randn(rows, a.widths[0], &mut rng);
        if clear_of_kinks(&net, &batch, 1e-3).unwrap() {
            return (net, batch);
        }
    }
}

fn act(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
    }
}

#[test]
fn two_layer_forward_matches_hand_arithmetic() {
    let l1 = DenseLayer::new(
        Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
        Tensor::vector(vec![0.05, -0.05]).unwrap(),
        Activation::Tanh,
    )
    .unwrap();
    let l2 = DenseLayer::new(
        Tensor::matrix(1, 2, vec![0.7, -0.8]).unwrap(),
        Tensor::vector(vec![0.1]).unwrap(),
        Activation::Identity,
    )
    .unwrap();
    let net = Network::from_layers(vec![l1, l2]).unwrap();
    let x = [1.0, 2.0, -1.0];
    let h0 = (0.1 * 1.0 - 0.2 * 2.0 + 0.3 * -1.0 + 0.05f64).tanh();
    let h1 = (0.4 * 1.0 + 0.5 * 2.0 - 0.6 * -1.0 - 0.05f64).tanh();
    let expect = 0.7 * h0 - 0.8 * h1 + 0.1;
    assert_abs_diff_eq!(net.predict_one(&x).unwrap()[0], expect, epsilon = 1e-14);
}

#[test]
fn width_mismatch_names_the_layer() {
    let net = Network::new(&Architecture::mlp(&[4, 3, 2]), &mut seeded(0, 0)).unwrap();
    let err = net.predict(&Tensor::zeros(&[2, 5])).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(err.to_string().contains("layer 0"), "{err}");
}

#[test]
fn zero_output_grad_gives_zero_parameter_grads() {
    let net = Network::new(&Architecture::mlp(&[4, 5, 3]), &mut seeded(1, 0)).unwrap();
    let batch = randn(6, 4, &mut seeded(1, 1));
    let trace = net.forward(&batch).unwrap();
    let (grads, input_grad) = net.backward(&trace, &Tensor::zeros(&[6, 3])).unwrap();
    assert!(grads.flatten().iter().all(|&g| g == 0.0));
    assert!(input_grad.data().iter().all(|&g| g == 0.0));
    assert_eq!(input_grad.shape(), &[6, 4]);
}

#[test]
fn gradients_of_every_layer_kind_match_finite_differences() {
    for kind in [Activation::Identity, Activation::Relu, Activation::Tanh] {
        for seed in 0..20 {
            let (net, batch) = kink_free(&arch(&[4, 5, 4, 3], kind, kind), 3, seed);
            let err = finite_diff_check(&net, half_sq, &batch, 1e-5).unwrap();
            assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn linear_net_with_quadratic_loss_is_near_exact() {
    let a = arch(&[3, 4, 2], Activation::Identity, Activation::Identity);
    let (net, batch) = kink_free(&a, 4, 9);
    assert!(finite_diff_check(&net, half_sq, &batch, 1e-5).unwrap() < 1e-6);
}

#[test]
fn doubled_gradient_is_caught() {
    let a = arch(&[3, 4, 2], Activation::Tanh, Activation::Identity);
    let (net, batch) = kink_free(&a, 4, 2);
    let err = finite_diff_check_with(&net, half_sq, |g| g.iter().map(|v| 2.0 * v).collect(), &batch, 1e-5).unwrap();
    assert_abs_diff_eq!(err, 0.5, epsilon = 1e-4);
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let net = Network::new(&Architecture::mlp(&[2, 2]), &mut seeded(0, 0)).unwrap();
    let batch = Tensor::zeros(&[1, 2]);
    assert!(finite_diff_check(&net, half_sq, &batch, 0.0).is_err());
    assert!(finite_diff_check(&net, half_sq, &batch, 1e-2).is_err());
}

#[test]
fn input_gradient_chains_head_into_encoder() {
    let a = arch(&[3, 4], Activation::Tanh, Activation::Tanh);
    let b = arch(&[4, 2], Activation::Tanh, Activation::Identity);
    let mut rng = seeded(4, 0);
    let f = Network::new(&a, &mut rng).unwrap();
    let g = Network::new(&b, &mut rng).unwrap();
    let batch = randn(2, 3, &mut rng);
    let ft = f.forward(&batch).unwrap();
    let gt = g.forward(ft.output()).unwrap();
    let (_, dh) = g.backward(&gt, gt.output()).unwrap();
    let (fg, _) = f.backward(&ft, &dh).unwrap();

    let composed = |p: &[f64]| {
        let mut f2 = f.clone();
        f2.set_flat_params(p).unwrap();
        let out = g.predict(&f2.predict(&batch).unwrap()).unwrap();
        out.data().iter().map(|v| 0.5 * v * v).sum::<f64>()
    };
    let numeric = exlab_core::nn::numeric_gradient(composed, &f.flat_params(), 1e-5);
    assert!(exlab_core::nn::max_relative_error(&fg.flatten(), &numeric) < 1e-4);
}

#[test]
fn sgd_step_is_plain_arithmetic() {
    let layer = DenseLayer::new(
        Tensor::matrix(1, 1, vec![1.0]).unwrap(),
        Tensor::vector(vec![1.0]).unwrap(),
        Activation::Identity,
    )
    .unwrap();
    let mut net = Network::from_layers(vec![layer]).unwrap();
    let grads = ParamGrads {
        layers: vec![LayerGrads {
            weights: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            bias: Tensor::vector(vec![2.0]).unwrap(),
        }],
    };
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &net).unwrap();
    opt.step(&mut net, &grads).unwrap();
    assert_abs_diff_eq!(net.flat_params()[0], 0.8, epsilon = 1e-15);
    assert_abs_diff_eq!(net.flat_params()[1], 0.8, epsilon = 1e-15);
}

#[test]
fn nan_gradient_stops_the_optimizer() {
    let mut net = Network::new(&Architecture::mlp(&[2, 2]), &mut seeded(0, 0)).unwrap();
    let mut grads = ParamGrads::zeros_like(&net);
    grads.layers[0].bias.data_mut()[0] = f64::NAN;
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), &net).unwrap();
    assert!(matches!(opt.step(&mut net, &grads), Err(Error::Numeric { .. })));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.exlb");
    let net = Network::new(&Architecture::mlp(&[16, 8, 4]), &mut seeded(3, 0)).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"EXLB");
    assert!(matches!(load_checkpoint_as(&path, &Architecture::mlp(&[16, 9, 4])), Err(Error::Shape(_))));
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.exlb");
    let net = Network::new(&Architecture::mlp(&[3, 2]), &mut seeded(0, 0)).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_explicit_loops(seed in 0u64..10_000, rows in 1usize..5) {
        let a = arch(&[5, 4, 3], Activation::Tanh, Activation::Relu);
        let mut rng = seeded(seed, 0);
        let net = Network::new(&a, &mut rng).unwrap();
        let batch = randn(rows, 5, &mut rng);
        let out = net.predict(&batch).unwrap();
        for r in 0..rows {
            let mut h = batch.row(r).to_vec();
            for layer in net.layers() {
                let w = layer.weights();
                h = (0..w.rows())
                    .map(|i| act(layer.activation(), layer.bias().data()[i] + (0..w.cols()).map(|j| w.get(i, j) * h[j]).sum::<f64>()))
                    .collect();
            }
            for (x, y) in out.row(r).iter().zip(&h) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_params_round_trip(seed in 0u64..10_000) {
        let mut net = Network::new(&Architecture::mlp(&[3, 4, 2]), &mut seeded(seed, 0)).unwrap();
        let p = net.flat_params();
        prop_assert_eq!(p.len(), net.num_params());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        net.set_flat_params(&shifted).unwrap();
        prop_assert_eq!(net.flat_params(), shifted);
    }
}
