//! Property checks over kernels, the discriminator and the generator.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use waveunetd::disc::{WaveUNet, WaveUNetConfig};
use waveunetd::generator::{Generator, GeneratorConfig};
use waveunetd::graph::Graph;
use waveunetd::kernels::{self, ConvSpec};
use waveunetd::{Shape, Tensor3};

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn noise(seed: u64, shape: Shape) -> Tensor3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_disc() -> WaveUNetConfig {
    WaveUNetConfig {
        base_channels: 2,
        ..WaveUNetConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(64)
    })]

    #[test]
    fn global_norm_output_has_unit_rms(
        values in prop::collection::vec(-50.0f64..50.0, 2..64),
        batch in 1usize..3,
    ) {
        prop_assume!(rms(&values) >= 1e-3);
        let data: Vec<f64> = (0..batch).flat_map(|b| values.iter().map(move |v| v * (b + 1) as f64)).collect();
        let x = Tensor3::new(Shape::new(batch, 1, values.len()), data).unwrap();
        let (y, _) = kernels::global_norm(&x);
        for b in 0..batch {
            let r = rms(y.item(b));
            prop_assert!((r - 1.0).abs() <= 1e-4, "rms {r}");
        }
    }

    #[test]
    fn global_norm_ignores_positive_scale(values in prop::collection::vec(-5.0f64..5.0, 2..48)) {
        prop_assume!(rms(&values) >= 1e-3);
        let x = Tensor3::from_signal(&values);
        let (base, _) = kernels::global_norm(&x);
        for c in [0.5, 2.0, 100.0] {
            let (scaled, _) = kernels::global_norm(&x.map(|v| v * c));
            for (a, b) in base.data().iter().zip(scaled.data()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint(
        seed in any::<u64>(),
        cin in 1usize..4,
        cout in 1usize..4,
        k in 1usize..6,
        stride in 1usize..4,
        pad in 0usize..3,
        frames in 2usize..12,
    ) {
        prop_assume!(2 * pad < k);
        // lengths where the transpose maps back onto every input sample
        let time = (frames - 1) * stride + k - 2 * pad;
        let x = noise(seed, Shape::new(2, cin, time));
        let w = noise(seed ^ 1, Shape::new(cout, cin, k));
        let spec = ConvSpec::new(stride, pad);
        let y = kernels::conv1d(&x, &w, None, spec).unwrap();
        let r = noise(seed ^ 2, y.shape());
        // conv_transpose1d takes (in, out, k) weights: the conv weight read as (cout, cin, k)
        let back = kernels::conv_transpose1d(&r, &w, None, stride, pad).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let lhs = y.dot(&r);
        let rhs = x.dot(&back);
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn duplicate_then_group_mean_is_identity(seed in any::<u64>(), ch in 1usize..4, factor in 1usize..4) {
        let x = noise(seed, Shape::new(2, ch, 5));
        let y = kernels::duplicate_channels(&x, factor).unwrap();
        let back = kernels::group_mean_channels(&y, ch).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn score_map_matches_input_resolution() {
    let d = WaveUNet::<f32>::new(small_disc(), 0).unwrap();
    for time in [256, 4096, 8192, 1000, 3] {
        let out = d.infer(&Tensor3::zeros(Shape::new(1, 1, time))).unwrap();
        assert_eq!(out.score_map.shape(), Shape::new(1, 1, time));
        assert_eq!(out.features.len(), 2 + 2 * 4 + 1);
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let d = WaveUNet::<f64>::new(small_disc(), 3).unwrap();
    let a = noise(1, Shape::new(1, 1, 1024));
    let b = noise(2, Shape::new(1, 1, 1024));
    let ab = d.infer(&Tensor3::stack(&[a.clone(), b.clone()]).unwrap()).unwrap();
    let ba = d.infer(&Tensor3::stack(&[b, a]).unwrap()).unwrap();
    assert_eq!(ab.score_map.item(0), ba.score_map.item(1));
    assert_eq!(ab.score_map.item(1), ba.score_map.item(0));
    for (fa, fb) in ab.features.iter().zip(&ba.features) {
        assert_eq!(fa.item(0), fb.item(1));
    }
}

/// Circularly shifting by one bottleneck period shifts the score map, away
/// from the edges. The signal is zero within a receptive field of each end, so
/// every interior window sees the same samples before and after the shift.
#[test]
fn shift_by_total_stride_shifts_scores() {
    let d = WaveUNet::<f64>::new(small_disc(), 5).unwrap();
    let (len, margin, shift) = (16384usize, 5120usize, 256usize);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = vec![0.0f64; len];
    for v in &mut x[margin..len - margin] {
        *v = rng.gen_range(-0.5..0.5);
    }
    let mut shifted = vec![0.0f64; len];
    for i in 0..len {
        shifted[(i + shift) % len] = x[i];
    }
    let s0 = d.infer(&Tensor3::from_signal(&x)).unwrap().score_map;
    let s1 = d.infer(&Tensor3::from_signal(&shifted)).unwrap().score_map;
    let s0 = s0.data();
    let s1 = s1.data();
    let mut worst = 0.0f64;
    for t in 4096..len - 4096 - shift {
        worst = worst.max((s1[t + shift] - s0[t]).abs());
    }
    assert!(worst <= 1e-4, "max deviation {worst}");
}

fn flowing_fraction(params: &[Tensor3<f64>], grads: &[Vec<f64>]) -> f64 {
    let alive = params
        .iter()
        .zip(grads)
        .filter(|(_, g)| g.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-12)
        .count();
    alive as f64 / params.len() as f64
}

#[test]
fn every_discriminator_tensor_receives_gradient() {
    let d = WaveUNet::<f64>::new(small_disc(), 9).unwrap();
    let mut g = Graph::new();
    let p = d.params().bind(&mut g, true);
    let x = g.constant(noise(4, Shape::new(2, 1, 2048)));
    let out = d.forward(&mut g, &p, x).unwrap();
    let loss = g.mean(out.score);
    let grads = g.backward(loss).unwrap();
    let per: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(d.params().values())
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    let frac = flowing_fraction(d.params().values(), &per);
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn mel_loss_reaches_every_generator_tensor() {
    use std::sync::Arc;
    use waveunetd::losses::mel_loss;
    use waveunetd::signal::{LogMel, MelConfig};

    let gen = Generator::<f64>::new(
        GeneratorConfig {
            base_channels: 32,
            ..GeneratorConfig::default()
        },
        2,
    )
    .unwrap();
    let engine = Arc::new(LogMel::<f64>::new(&MelConfig::default()).unwrap());
    let mut g = Graph::new();
    let p = gen.params().bind(&mut g, true);
    let mel = g.constant(noise(6, Shape::new(1, 80, 5)).map(|v| v * 3.0 - 4.0));
    let fake = gen.forward(&mut g, &p, mel).unwrap();
    let real = g.constant(noise(7, Shape::new(1, 1, 5 * 256)).map(|v| 0.3 * v));
    let loss = mel_loss(&mut g, &engine, real, fake).unwrap();
    let grads = g.backward(loss).unwrap();
    let per: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(gen.params().values())
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    let frac = flowing_fraction(gen.params().values(), &per);
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn generator_batch_items_are_independent() {
    let gen = Generator::<f64>::new(
        GeneratorConfig {
            base_channels: 16,
            ..GeneratorConfig::default()
        },
        1,
    )
    .unwrap();
    let a = noise(1, Shape::new(1, 80, 4));
    let b = noise(2, Shape::new(1, 80, 4));
    let ab = gen.generate(&Tensor3::stack(&[a.clone(), b.clone()]).unwrap()).unwrap();
    let ba = gen.generate(&Tensor3::stack(&[b, a]).unwrap()).unwrap();
    assert_eq!(ab.item(0), ba.item(1));
    assert_eq!(ab.shape().time, 4 * 256);
}

#[test]
fn forward_and_backward_are_repeatable() {
    let d = WaveUNet::<f32>::new(small_disc(), 2).unwrap();
    let x = noise(3, Shape::new(2, 1, 1024)).cast::<f32>();
    let run = || {
        let mut g = Graph::new();
        let p = d.params().bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = d.forward(&mut g, &p, xv).unwrap();
        let l = g.mean(out.score);
        let grads = g.backward(l).unwrap();
        p.vars()
            .iter()
            .zip(d.params().values())
            .flat_map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .map(f32::to_bits)
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn generator_step_leaves_discriminator_without_gradient() {
    use waveunetd::losses;

    let d = WaveUNet::<f64>::new(small_disc(), 0).unwrap();
    let gen = Generator::<f64>::new(
        GeneratorConfig {
            base_channels: 16,
            ..GeneratorConfig::default()
        },
        0,
    )
    .unwrap();
    let mut g = Graph::new();
    let gp = gen.params().bind(&mut g, true);
    let dp = d.params().bind(&mut g, false);
    let mel = g.constant(noise(1, Shape::new(1, 80, 4)));
    let fake = gen.forward(&mut g, &gp, mel).unwrap();
    let real = g.constant(noise(2, Shape::new(1, 1, 1024)));
    let ro = d.forward(&mut g, &dp, real).unwrap();
    let fo = d.forward(&mut g, &dp, fake).unwrap();
    let adv = losses::adv_loss_g(&mut g, fo.score);
    let fm = losses::feature_matching_vars(&mut g, &ro, &fo).unwrap();
    let total = g.linear(&[(adv, 1.0), (fm, 2.0)]).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(dp.vars().iter().all(|&v| grads.get(v).is_none()));
    assert!(gp.vars().iter().any(|&v| grads.get(v).is_some()));
}
