use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_core::jaccard::jaccard_loss_grad;
use segfuse_core::segnet::{build_pointwise, build_unet, count_params, init_weights, Activation, Model, UNetConfig};

/// Layer-by-layer parameter census, written independently of the model code.
fn census(in_c: usize, depth: usize, base: usize, per_block: usize, bias: bool) -> usize {
    let conv = |i: usize, o: usize, k: usize| k * k * i * o + if bias { o } else { 0 };
    let block = |i: usize, o: usize| conv(i, o, 3) + (per_block - 1) * conv(o, o, 3);
    let mut n = 0;
    let mut cin = in_c;
    for l in 0..depth {
        n += block(cin, base << l);
        cin = base << l;
    }
    n += block(cin, base << depth);
    for l in 0..depth {
        let w = base << l;
        n += 4 * (2 * w) * w + if bias { w } else { 0 };
        n += block(2 * w, w);
    }
    n + conv(base, 1, 1)
}

fn cfg(in_channels: usize, depth: usize, base_width: usize, conv_per_block: usize, bias: bool) -> UNetConfig {
    UNetConfig { in_channels, depth, base_width, conv_per_block, activation: Activation::Relu, bias }
}

#[test]
fn reference_config_param_count() {
    let m = build_unet(&UNetConfig::reference(8)).unwrap();
    assert_eq!(census(8, 3, 16, 2, true), 482_753);
    assert_eq!(count_params(&m), 482_753);
    let m11 = build_unet(&UNetConfig::reference(11)).unwrap();
    assert_eq!(count_params(&m11), census(11, 3, 16, 2, true));
}

#[test]
fn census_matches_over_grid() {
    for depth in 1..=4 {
        for base in [1, 3, 8] {
            for per_block in 1..=3 {
                for bias in [true, false] {
                    let m = build_unet(&cfg(5, depth, base, per_block, bias)).unwrap();
                    assert_eq!(count_params(&m), census(5, depth, base, per_block, bias));
                }
            }
        }
    }
}

#[test]
fn width_doubling_scales_quadratically() {
    let small = count_params(&build_unet(&cfg(8, 1, 8, 1, false)).unwrap());
    let large = count_params(&build_unet(&cfg(8, 1, 16, 1, false)).unwrap());
    assert_eq!((small, large), (3400, 12432));
    let ratio = large as f64 / small as f64;
    // the input layer grows only linearly in width, the rest quadratically
    assert!(ratio > 3.5 && ratio <= 4.0, "ratio {ratio}");
}

#[test]
fn pointwise_param_count() {
    assert_eq!(count_params(&build_pointwise(3, true).unwrap()), 4);
    assert_eq!(count_params(&build_pointwise(3, false).unwrap()), 3);
}

#[test]
fn uniform_init_moments() {
    let m = init_weights(build_unet(&UNetConfig::reference(8)).unwrap(), 2024);
    let w: Vec<f64> = m.params().iter().take(100_000).map(|&v| v as f64).collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma2 = 0.1f64.powi(2) / 12.0;
    assert!(mean.abs() < 3.0 * (sigma2 / n).sqrt(), "mean {mean}");
    assert!((var - sigma2).abs() / sigma2 < 0.02, "var {var} vs {sigma2}");
    let lo = m.params().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = m.params().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert!(lo >= -0.05 && hi <= 0.05);
}

#[test]
fn forward_is_deterministic() {
    let m = init_weights(build_unet(&cfg(3, 2, 4, 2, true)).unwrap(), 9);
    let x = Array3::from_shape_fn((3, 16, 16), |(c, i, j)| ((c * 7 + i * 3 + j) % 11) as f32 / 11.0);
    let a = m.predict(x.view()).unwrap();
    let b = m.predict(x.view()).unwrap();
    assert_eq!(a, b);
}

fn loss_of(model: &Model<f64>, x: &Array3<f64>, target: &Array2<f64>) -> f64 {
    let p = model.predict(x.view()).unwrap();
    jaccard_loss_grad(target.view(), p.view()).unwrap().0
}

/// Fraction of probed parameters whose analytic gradient agrees with a
/// central difference within relative error `tol`.
fn gradient_agreement(mut model: Model<f64>, probes: usize, seed: u64, h: f64, tol: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.in_channels();
    let x = Array3::from_shape_fn((c, 8, 8), |_| rng.random::<f64>());
    let target = Array2::from_shape_fn((8, 8), |_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
    let (p, tape) = model.forward_train(x.view()).unwrap();
    let (_, dp) = jaccard_loss_grad(target.view(), p.view()).unwrap();
    let analytic = model.backward(tape, &dp);

    let n = model.params().len();
    let mut ok = 0;
    for _ in 0..probes {
        let i = rng.random_range(0..n);
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = loss_of(&model, &x, &target);
        model.params_mut()[i] = orig - h;
        let down = loss_of(&model, &x, &target);
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-12 || (a - numeric).abs() / scale < tol {
            ok += 1;
        }
    }
    ok as f64 / probes as f64
}

fn scaled(model: &Model, factor: f64) -> Model<f64> {
    let mut m = model.cast::<f64>();
    m.params_mut().iter_mut().for_each(|v| *v *= factor);
    m
}

#[test]
fn unet_gradient_matches_central_differences() {
    let m = init_weights(build_unet(&cfg(3, 2, 4, 2, true)).unwrap(), 5);
    // scale weights up so activations do not vanish through the stack
    let frac = gradient_agreement(scaled(&m, 10.0), 100, 77, 1e-3, 1e-4);
    assert!(frac >= 0.99, "agreement {frac}");
}

#[test]
fn unet_gradient_leaky_no_bias() {
    let mut c = cfg(2, 1, 3, 3, false);
    c.activation = Activation::LeakyRelu;
    let m = init_weights(build_unet(&c).unwrap(), 6);
    // three stacked convs at width 3 put many pre-activations near a kink;
    // a smaller step keeps the difference quotient on one linear piece
    let frac = gradient_agreement(scaled(&m, 10.0), 100, 78, 1e-5, 1e-4);
    assert!(frac >= 0.99, "agreement {frac}");
}

#[test]
fn pointwise_gradient_matches_central_differences() {
    let m = init_weights(build_pointwise(4, true).unwrap(), 7);
    let frac = gradient_agreement(scaled(&m, 20.0), 50, 79, 1e-3, 1e-4);
    assert_eq!(frac, 1.0);
}
