mod common;

use std::fs;
use std::path::Path;

use msrg::arch::Preset;
use msrg::data::{generate_phantom_dataset, load_and_preprocess, read_gray, train_count, AugmentConfig, DatasetSpec, ImageRecord};
use msrg::losses::{combined_generator_loss, LossWeights, PerceptualExtractor};
use msrg::train::{make_batch, reconstruct_dir, run, train_step, ReconstructOptions, StopReason, TrainConfig, TrainState};
use msrg::{Error, Tape, Tensor};

fn config(preset: Preset) -> TrainConfig {
    let mut c = TrainConfig::preset(preset);
    c.scale = preset.scale_for_size(16).unwrap();
    c.batch_size = 4;
    c.residual_blocks = 1;
    c.sn_warmup = 20;
    c.augment = AugmentConfig::default();
    c
}

fn values(net: &msrg::arch::Network) -> Vec<Vec<f64>> {
    net.params().iter().map(|t| t.data().to_vec()).collect()
}

fn phantoms(dir: &Path, n: usize, conditional: bool) -> Vec<ImageRecord> {
    generate_phantom_dataset(n, (16, 16), 21, conditional, dir).unwrap();
    let mut spec = DatasetSpec::new(dir, (16, 16));
    spec.conditional = conditional;
    load_and_preprocess(&spec).unwrap().records
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let recs = phantoms(dir.path(), 4, false);
    let mut c = config(Preset::SoupOptimized);
    c.gen_lr = 0.0;
    c.disc_lr = 0.0;
    let mut s = TrainState::new(c).unwrap();
    let (g0, d0) = (values(&s.gen), values(&s.disc));
    let picks: Vec<_> = recs.iter().collect();
    for step in 0..3 {
        let batch = make_batch(&s.config, &picks, step).unwrap();
        train_step(&mut s, &batch).unwrap();
    }
    assert_eq!(values(&s.gen), g0);
    assert_eq!(values(&s.disc), d0);
    assert_eq!(s.step, 3);
}

#[test]
fn each_network_moves_only_under_its_own_update() {
    let dir = tempfile::tempdir().unwrap();
    let recs = phantoms(dir.path(), 4, true);
    let picks: Vec<_> = recs.iter().collect();
    for freeze_gen in [true, false] {
        let mut c = config(Preset::CsrOptimized);
        if freeze_gen {
            c.gen_lr = 0.0;
        } else {
            c.disc_lr = 0.0;
        }
        let mut s = TrainState::new(c).unwrap();
        let (g0, d0) = (values(&s.gen), values(&s.disc));
        let batch = make_batch(&s.config, &picks, 0).unwrap();
        train_step(&mut s, &batch).unwrap();
        assert_eq!(values(&s.gen) == g0, freeze_gen);
        assert_eq!(values(&s.disc) == d0, !freeze_gen);
    }
}

#[test]
fn adversarial_term_is_ln2_at_an_undecided_discriminator() {
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::full(&[3, 1], 0.5));
    let g = tape.constant(Tensor::zeros(&[3, 1, 8, 8]));
    let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
    let l = combined_generator_loss(&mut tape, d, g, g, &w, &PerceptualExtractor::new(7)).unwrap();
    assert!((l.adv - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((tape.value(l.total).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn one_epoch_runs_ceil_of_train_over_batch_steps() {
    let dir = tempfile::tempdir().unwrap();
    let recs = phantoms(dir.path(), 10, false);
    let mut c = config(Preset::SoupBaseline);
    c.epochs = 1;
    let mut s = TrainState::new(c.clone()).unwrap();
    let out = run(&mut s, &recs, None).unwrap();
    let expected = train_count(10, c.split_ratio).div_ceil(c.batch_size) as u64;
    assert_eq!(s.step, expected);
    assert_eq!(out.log.steps.len() as u64, expected);
    assert_eq!(out.log.epochs.len(), 1);
    assert_eq!(out.stop, StopReason::Completed);
    assert!(out.log.steps.iter().all(|r| r.gen_loss.is_finite() && r.disc_loss.is_finite()));
    assert!(out.log.steps.windows(2).all(|w| w[1].step > w[0].step));
}

#[test]
fn plateaued_loss_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let recs = phantoms(dir.path(), 8, false);
    let mut c = config(Preset::SoupBaseline);
    c.gen_lr = 0.0;
    c.disc_lr = 0.0;
    c.epochs = 10;
    c.patience = 1;
    c.plateau_eps = 0.5;
    let mut s = TrainState::new(c).unwrap();
    let out = run(&mut s, &recs, None).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStopped);
    assert_eq!(out.log.epochs.len(), 2);
}

#[test]
fn conditional_preset_without_labels_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let recs = phantoms(dir.path(), 6, false);
    let mut s = TrainState::new(config(Preset::CsrOptimized)).unwrap();
    let e = run(&mut s, &recs, None).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(s.step, 0);
}

#[test]
fn reconstruction_is_deterministic_and_8_bit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let recs = phantoms(&data, 5, true);
    let mut c = config(Preset::CsrOptimized);
    c.max_steps = Some(2);
    let mut s = TrainState::new(c).unwrap();
    run(&mut s, &recs, None).unwrap();
    let opts = ReconstructOptions {
        grid: true,
        ..Default::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let names = reconstruct_dir(&s.gen, &s.config, &data, &a, &opts).unwrap();
    assert_eq!(names.len(), 5);
    reconstruct_dir(&s.gen, &s.config, &data, &b, &opts).unwrap();
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
        let img = read_gray(&a.join(n)).unwrap();
        assert_eq!(img.shape(), &[1, 16, 16]);
        assert!(img.data().iter().all(|v| (0.0..=255.0).contains(v)));
        assert_eq!(read_gray(&a.join("grid").join(n)).unwrap().shape(), &[1, 16, 48]);
    }
}
