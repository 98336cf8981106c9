mod common;

use common::*;
use msrg::arch::{ArchOptions, Network, Preset, Scale};
use msrg::data::{denormalize, flip_horizontal, flip_vertical, normalize, preprocess, record_rng, split};
use msrg::losses::{bce_loss, combined_generator_loss, pixel_loss, LossWeights, PerceptualExtractor};
use msrg::metrics::{psnr_values, ssim, Psnr, SsimMode};
use msrg::optim::{clip_global_norm, AdamState};
use msrg::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, RngCore};

fn image(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..h * w).map(|_| r.random_range(0..256) as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_is_bounded(seed in any::<u64>(), sizes in prop::collection::vec(1usize..40, 1..5), max in 1e-3f64..10.0) {
        let mut r = rng(seed);
        let mut bufs: Vec<Vec<f64>> = sizes.iter().map(|&n| normal(&mut r, n, 5.0)).collect();
        let mut views: Vec<&mut [f64]> = bufs.iter_mut().map(|b| b.as_mut_slice()).collect();
        clip_global_norm(&mut views, max);
        let after = bufs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-12);
    }

    #[test]
    fn adam_step_ignores_partitioning(seed in any::<u64>(), cut in 1usize..15) {
        let mut r = rng(seed);
        let values = normal(&mut r, 16, 1.0);
        let grads = normal(&mut r, 16, 1.0);
        let with = |v: &[f64], g: &[f64]| {
            let mut t = Tensor::new(&[v.len()], v.to_vec()).unwrap().with_requires_grad(true);
            t.grad_mut().copy_from_slice(g);
            t
        };
        let mut whole = with(&values, &grads);
        let mut adam = AdamState::new(1e-2);
        let (mut a, mut b) = (with(&values[..cut], &grads[..cut]), with(&values[cut..], &grads[cut..]));
        let mut split_adam = AdamState::new(1e-2);
        for _ in 0..3 {
            adam.step(&mut [&mut whole]).unwrap();
            split_adam.step(&mut [&mut a, &mut b]).unwrap();
        }
        let joined: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        prop_assert_eq!(whole.data(), &joined[..]);
    }

    #[test]
    fn flips_are_involutions(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let img = Tensor::uniform(&[1, h, w], -1.0, 1.0, &mut rng(seed));
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(&img)), &img);
        prop_assert_eq!(&flip_vertical(&flip_vertical(&img)), &img);
    }

    #[test]
    fn global_ssim_is_symmetric_and_permutation_invariant(seed in any::<u64>(), h in 2usize..16, w in 2usize..16) {
        let x = image(seed, h, w);
        let y = image(seed ^ 0x5555, h, w);
        let xt = Tensor::new(&[1, h, w], x.clone()).unwrap();
        let yt = Tensor::new(&[1, h, w], y.clone()).unwrap();
        let s = ssim(&xt, &yt, 255.0, SsimMode::Global).unwrap();
        prop_assert_eq!(s.to_bits(), ssim(&yt, &xt, 255.0, SsimMode::Global).unwrap().to_bits());
        prop_assert!((-1.0..=1.0).contains(&s));
        // Same permutation applied to both images.
        let mut idx: Vec<usize> = (0..h * w).collect();
        let mut r = rng(seed.wrapping_add(1));
        for i in (1..idx.len()).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        let px = Tensor::new(&[1, h, w], idx.iter().map(|&i| x[i]).collect()).unwrap();
        let py = Tensor::new(&[1, h, w], idx.iter().map(|&i| y[i]).collect()).unwrap();
        let sp = ssim(&px, &py, 255.0, SsimMode::Global).unwrap();
        prop_assert!((s - sp).abs() < 1e-12);
    }

    #[test]
    fn windowed_ssim_of_identical_images_is_one(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, size in 1usize..15) {
        let x = Tensor::new(&[1, h, w], image(seed, h, w)).unwrap();
        let mode = SsimMode::Windowed { size, sigma: 1.5 };
        prop_assert_eq!(ssim(&x, &x, 255.0, mode).unwrap(), 1.0);
    }

    #[test]
    fn psnr_decreases_with_noise(seed in any::<u64>()) {
        let x = image(seed, 12, 12);
        let mut r = rng(seed ^ 1);
        let dir: Vec<f64> = (0..144).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut last = f64::INFINITY;
        for level in 1..=10 {
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + d * level as f64).collect();
            let Psnr::Finite(db) = psnr_values(&x, &y, 255.0).unwrap() else { panic!("noisy copy scored infinite") };
            prop_assert!(db < last);
            last = db;
        }
    }

    #[test]
    fn normalization_round_trip(p in 0u8..=255) {
        let x = normalize(p as f64);
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert_eq!(denormalize(x), p);
    }

    #[test]
    fn preprocess_is_idempotent_on_conformant_input(seed in any::<u64>(), h in 1usize..16, w in 1usize..16) {
        let raw = Tensor::new(&[1, h, w], image(seed, h, w)).unwrap();
        let once = preprocess(&raw, h, w).unwrap();
        let back = once.map(|x| denormalize(x) as f64);
        let twice = preprocess(&back, h, w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (a, b) = split(&items, ratio, seed).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }

    #[test]
    fn record_streams_are_reproducible(seed in any::<u64>(), id in "[a-z0-9_]{1,12}", salt in any::<u64>()) {
        let (mut a, mut b) = (record_rng(seed, &id, salt), record_rng(seed, &id, salt));
        prop_assert_eq!(a.next_u64(), b.next_u64());
        prop_assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn backward_is_bit_reproducible(seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[1, 2, 5, 5], normal(&mut r, 50, 1.0)).unwrap().with_requires_grad(true));
            let w = tape.leaf(Tensor::new(&[3, 2, 3, 3], normal(&mut r, 54, 1.0)).unwrap().with_requires_grad(true));
            let y = tape.conv2d(x, w, msrg::ConvGeometry::new(1, 1)).unwrap();
            let y = tape.tanh(y);
            let l = tape.sum(y);
            tape.backward(l).unwrap();
            (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn reshape_round_trip(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6) {
        let t = Tensor::uniform(&[a, b, c], -1.0, 1.0, &mut rng(seed));
        let back = t.reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn leaky_relu_with_unit_slope_is_identity(seed in any::<u64>()) {
        let x = Tensor::new(&[20], normal(&mut rng(seed), 20, 3.0)).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.leaky_relu(v, 1.0);
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn losses_are_nonnegative_and_linear_in_weights(seed in any::<u64>(), adv in 0.01f64..2.0, pix in 0.0f64..2.0, perc in 0.0f64..2.0) {
        let mut r = rng(seed);
        let ex = PerceptualExtractor::new(7);
        let g = Tensor::new(&[2, 1, 8, 8], normal(&mut r, 128, 0.5)).unwrap();
        let t = Tensor::new(&[2, 1, 8, 8], normal(&mut r, 128, 0.5)).unwrap();
        let d = Tensor::new(&[2, 1], vec![r.random_range(0.01..0.99), r.random_range(0.01..0.99)]).unwrap();
        let eval = |w: &LossWeights| {
            let mut tape = Tape::new();
            let (dv, gv, tv) = (tape.constant(d.clone()), tape.constant(g.clone()), tape.constant(t.clone()));
            let l = combined_generator_loss(&mut tape, dv, gv, tv, w, &ex).unwrap();
            prop_assert!(l.adv >= 0.0 && l.pix >= 0.0 && l.perc >= 0.0);
            Ok(tape.value(l.total).data()[0])
        };
        let w = LossWeights::new(adv, pix, perc).unwrap();
        let once = eval(&w)?;
        let twice = eval(&w.scaled(2.0))?;
        prop_assert!(once >= 0.0);
        prop_assert!((twice - 2.0 * once).abs() <= 1e-12 * once.abs().max(1.0));
    }
}

#[test]
fn degenerate_losses_are_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut rng(2)));
    let l = pixel_loss(&mut tape, x, x).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
    // The clamp keeps a perfect prediction a hair above zero.
    let p = tape.constant(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
    let b = bce_loss(&mut tape, p, &[1.0, 0.0]).unwrap();
    assert!(tape.value(b).data()[0] < 1e-6);
}

#[test]
fn adam_shrinks_a_quadratic() {
    let mut theta = Tensor::new(&[1], vec![1.0]).unwrap().with_requires_grad(true);
    let mut adam = AdamState::new(1e-2);
    let mut last = 1.0f64;
    for _ in 0..100 {
        let v = theta.data()[0];
        theta.grad_mut()[0] = 2.0 * v;
        adam.step(&mut [&mut theta]).unwrap();
        let now = theta.data()[0].abs();
        assert!(now < last);
        last = now;
    }
}

#[test]
fn generator_outputs_lie_in_tanh_range() {
    let opts = ArchOptions::default();
    for preset in [Preset::CsrBaseline, Preset::CsrOptimized, Preset::SoupBaseline, Preset::SoupOptimized] {
        let scale = preset.scale_for_size(16).unwrap();
        let g = Network::build(preset.generator(scale, &opts).unwrap(), &mut rng(1), 0).unwrap();
        let mut r = rng(2);
        let z = Tensor::randn(&[2, 100], 3.0, &mut r);
        let cond = preset.conditional().then_some(&[0.0, 1.0][..]);
        let side = g.spec.output_shape[2];
        let guide = Tensor::uniform(&[2, 1, side, side], -1.0, 1.0, &mut r);
        let y = g.generate_tensor(&z, cond, Some(&guide)).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)), "{preset}");
    }
}

#[test]
fn condition_contract_is_enforced() {
    let opts = ArchOptions::default();
    let scale: Scale = "2/25".parse().unwrap();
    let g = Network::build(Preset::CsrOptimized.generator(scale, &opts).unwrap(), &mut rng(1), 0).unwrap();
    let z = Tensor::randn(&[1, 100], 1.0, &mut rng(3));
    let guide = Tensor::zeros(&[1, 1, 16, 16]);
    assert!(g.generate_tensor(&z, None, Some(&guide)).is_err());
    let soup = Network::build(Preset::SoupBaseline.generator("1/16".parse().unwrap(), &opts).unwrap(), &mut rng(1), 0).unwrap();
    assert!(soup.generate_tensor(&z, Some(&[1.0]), None).is_err());
}
