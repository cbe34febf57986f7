use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::degrade::identity_kernel;
use crate::graph::Tape;
use crate::nets::{Checkpoint, ParamStore};
use crate::scalar::Scalar;
use crate::settings::build_setting;
use crate::synth;
use crate::tensor::Tensor;

fn config(variant: &str, data: &Path, out: &Path, iterations: u64) -> TrainConfig {
    let text = format!(
        "[train]\nvariant = \"{variant}\"\nsetting = \"D\"\ndata = \"{}\"\nout = \"{}\"\niterations = {iterations}\n\
         batch = 4\nlog_every = 2\ncheckpoint_every = 2\nsample_every = 2\ngrid_size = 4\nprecision = \"f64\"\n\
         [nets]\npreset = \"micro\"\n",
        data.display(),
        out.display()
    );
    TrainConfig::from_text(&text).unwrap()
}

fn dataset(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(dir.path(), &synth::shapes(n, 3, 16, 1).unwrap()).unwrap();
    dir
}

fn set<T: Scalar>(store: &mut ParamStore<T>, name: &str, v: f64) {
    let i = store.names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = &mut store.tensors_mut()[i];
    *t = Tensor::full(t.shape(), T::of(v));
}

fn bundle(variant: Variant, setting: char) -> GeneratorBundle<f64> {
    GeneratorBundle::new(variant, &crate::nets::NetConfig::micro(), &build_setting(setting).unwrap(), 3).unwrap()
}

fn run_fake(b: &GeneratorBundle<f64>, seed: u64) -> (Tensor<f64>, Tensor<f64>, FakeOutput, Tape<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let binds = b.bind(&mut tape, false);
    let latents = sample_latents(b, 3, &mut rng);
    let fake = fake_pipeline(&mut tape, b, &binds, &latents, &mut rng).unwrap();
    (tape.value(fake.x).clone(), tape.value(fake.y).clone(), fake, tape)
}

#[test]
fn variant_names_round_trip() {
    let names: HashSet<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names.len(), 14);
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
        let text = toml::to_string(&std::collections::BTreeMap::from([("v", v)])).unwrap();
        assert_eq!(text.trim(), format!("v = \"{}\"", v.name()));
    }
    assert!(Variant::parse("WGAN").is_err());
}

#[test]
fn variant_stage_table() {
    let row = |v: Variant| (v.source(), v.blur(), v.noise(), v.comp(), v.ac_blur(), v.ac_comp(), v.adaptive_ac());
    use Stage::*;
    assert_eq!(row(Variant::Gan), (Source::None, Off, false, Off, false, false, true));
    assert_eq!(row(Variant::BrGan), (Source::Learned, Masked, false, Off, false, false, true));
    assert_eq!(row(Variant::BrGanNoMask).1, Unmasked);
    assert_eq!(row(Variant::NrGan), (Source::Learned, Off, true, Off, false, false, true));
    assert_eq!(row(Variant::CrGanNoMask).3, Unmasked);
    assert_eq!(row(Variant::CrGanAcComp), (Source::Learned, Off, false, Masked, false, true, true));
    assert_eq!(row(Variant::BncrGan), (Source::Learned, Masked, true, Masked, true, true, true));
    assert_eq!(row(Variant::BncrGanNoAc).4..=row(Variant::BncrGanNoAc).5, false..=false);
    assert_eq!((row(Variant::BncrGanNoAcBlur).4, row(Variant::BncrGanNoAcBlur).5), (false, true));
    assert_eq!((row(Variant::BncrGanNoAcComp).4, row(Variant::BncrGanNoAcComp).5), (true, false));
    assert_eq!(row(Variant::BncrGanNonadaptive), (Source::Learned, Masked, true, Masked, true, true, false));
    assert_eq!(Variant::AmbientGan.source(), Source::GroundTruth);
    assert_eq!(Variant::PAmbientGan.source(), Source::Parametric);
}

#[test]
fn bundles_hold_the_generators_of_each_variant() {
    let names = |v| bundle(v, 'N').stores().iter().map(|(n, _)| *n).collect::<Vec<_>>();
    assert_eq!(names(Variant::Gan), ["gx"]);
    assert_eq!(names(Variant::AmbientGan), ["gx"]);
    assert_eq!(names(Variant::PAmbientGan), ["gx", "gp"]);
    assert_eq!(names(Variant::BrGan), ["gx", "gk"]);
    assert_eq!(names(Variant::NrGan), ["gx", "gn"]);
    assert_eq!(names(Variant::CrGan), ["gx", "gq"]);
    assert_eq!(names(Variant::BncrGan), ["gx", "gk", "gn", "gq"]);
    // shared initialization across variants
    assert_eq!(bundle(Variant::Gan, 'A').x.params, bundle(Variant::BncrGan, 'N').x.params);
}

#[test]
fn plain_gan_shows_clean_output() {
    let (x, y, fake, _) = run_fake(&bundle(Variant::Gan, 'D'), 0);
    assert_eq!(x, y);
    assert!(fake.kernel.is_none() && fake.q.is_none() && fake.sigma.is_none());
}

#[test]
fn closed_masks_and_zero_noise_leave_images_unchanged() {
    let mut b = bundle(Variant::BncrGan, 'N');
    let k = b.k.as_mut().unwrap();
    set(&mut k.params, "mask.w", 0.0);
    set(&mut k.params, "mask.b", -1000.0);
    let n = b.n.as_mut().unwrap();
    set(&mut n.params, "out.w", 0.0);
    set(&mut n.params, "out.b", -1000.0);
    let q = b.q.as_mut().unwrap();
    set(&mut q.params, "mask.w", 0.0);
    set(&mut q.params, "mask.b", -1000.0);
    let (x, y, fake, tape) = run_fake(&b, 1);
    assert_eq!(x, y);
    let id = identity_kernel::<f64>(9).unwrap();
    for kb in tape.value(fake.kernel.unwrap()).unstack() {
        assert_eq!(kb.data(), id.data());
    }
}

#[test]
fn open_masks_degrade() {
    let (x, y, fake, tape) = run_fake(&bundle(Variant::BncrGan, 'N'), 2);
    assert_ne!(x, y);
    let q = tape.value(fake.q.unwrap());
    assert!(q.data().iter().all(|&v| v > 0.0 && v < 100.0));
    for kb in tape.value(fake.kernel.unwrap()).unstack() {
        assert!((kb.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ground_truth_degradation_of_clean_setting_is_identity() {
    let (x, y, fake, _) = run_fake(&bundle(Variant::AmbientGan, 'A'), 3);
    assert_eq!(x, y);
    assert!(fake.kernel.is_none());
    let (x, y, _, _) = run_fake(&bundle(Variant::AmbientGan, 'D'), 3);
    assert_ne!(x, y);
}

#[test]
fn parametric_degradation_follows_setting() {
    let b = bundle(Variant::PAmbientGan, 'N');
    let (_, _, fake, tape) = run_fake(&b, 4);
    let k = tape.value(fake.kernel.unwrap());
    assert_eq!(k.shape(), &[3, 9, 9]);
    let items = k.unstack();
    assert!(items.iter().all(|i| (i.sum() - 1.0).abs() < 1e-12 && *i == items[0]));
    let q = tape.value(fake.q.unwrap());
    assert!(q.data().iter().all(|&v| (v - 90.0).abs() < 1e-9));
    let (sr, _) = fake.sigma.unwrap();
    assert!(tape.value(sr).data().iter().all(|&v| (v - crate::nets::SIGMA_INIT).abs() < 1e-12));
    let r = bundle(Variant::PAmbientGan, 'R');
    let (_, _, fake, _) = run_fake(&r, 4);
    assert!(fake.kernel.is_none() && fake.q.is_none() && fake.sigma.is_some());
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut adam = Adam::new(&store);
    let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
    let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    adam.step(&mut store, std::slice::from_ref(&g), &cfg).unwrap();
    let w = store.tensors()[0].data();
    assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 2.1).abs() < 1e-6 && w[2] == 3.0);
    // second step: v̂ mixes both gradients
    adam.step(&mut store, &[g], &cfg).unwrap();
    let v = adam.v.tensors()[0].data()[0];
    let want_v = 0.99 * 0.01 * 0.25 + 0.01 * 0.25;
    assert!((v - want_v).abs() < 1e-15);
    assert_eq!(adam.t, 2);
}

#[test]
fn ema_formula() {
    let mut ema = ParamStore::<f64>::new();
    ema.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
    let mut p = ParamStore::<f64>::new();
    p.add("w", Tensor::from_vec(&[2], vec![3.0, 1.0]).unwrap());
    ema_update(&mut ema, &p, 0.9).unwrap();
    let e = ema.tensors()[0].data();
    assert!((e[0] - 1.2).abs() < 1e-15 && (e[1] + 0.8).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = dataset(4);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config("BNCR-GAN", data.path(), out.path(), 1);
    cfg.adam.lr = 0.0;
    let mut state = TrainState::<f64>::new(&cfg).unwrap();
    let before = state.clone();
    let real = crate::degrade::Image::batch(&synth::shapes(4, 3, 16, 9).unwrap()).unwrap();
    let m = train_step(&mut state, &real, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(state.iteration, 1);
    assert_eq!(m.iter, 1);
    assert_eq!(state.d.params, before.d.params);
    for ((_, a), (_, b)) in state.bundle.stores().iter().zip(before.bundle.stores()) {
        assert_eq!(*a, b);
    }
    let drift = state
        .bundle
        .ema_x
        .tensors()
        .iter()
        .zip(before.bundle.ema_x.tensors())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>());
    assert!(drift.fold(0.0, f64::max) < 1e-15);
    assert!(m.ac_blur.is_some() && m.ac_comp.is_some() && m.mean_q.is_some());
    assert!(m.mean_entropy.is_some() && m.mean_m_q.is_some());
    assert!(m.r1 > 0.0 && m.d_loss.is_finite() && m.g_loss.is_finite());
}

#[test]
fn steps_update_parameters_and_ema() {
    let data = dataset(4);
    let out = tempfile::tempdir().unwrap();
    let cfg = config("GAN", data.path(), out.path(), 1);
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    let before = state.clone();
    let real = crate::degrade::Image::batch(&synth::shapes(4, 3, 16, 9).unwrap()).unwrap().cast::<f32>();
    let m = train_step(&mut state, &real, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(m.ac_blur.is_none() && m.mean_q.is_none());
    assert_ne!(state.d.params, before.d.params);
    assert_ne!(state.bundle.x.params, before.bundle.x.params);
    let mut want = before.bundle.ema_x.clone();
    ema_update(&mut want, &state.bundle.x.params, 0.999).unwrap();
    assert_eq!(state.bundle.ema_x, want);
}

#[test]
fn run_writes_logs_grids_and_checkpoints() {
    let data = dataset(6);
    let out = tempfile::tempdir().unwrap();
    let cfg = config("BNCR-GAN", data.path(), out.path(), 4);
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.iterations, 4);
    let log = std::fs::read_to_string(out.path().join(METRICS_FILE)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "iter,d_loss,g_loss,r1,ac_blur,ac_comp,mean_q,mean_entropy,mean_m_q");
    assert_eq!(lines.count(), 2);
    for f in ["grid_0000002.png", "grid_0000004.png", "ckpt_0000002.ckpt", CHECKPOINT_FINAL, CHECKPOINT_LATEST] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    let ck = Checkpoint::load(&summary.final_checkpoint).unwrap();
    assert_eq!(ck.iteration, 4);
    for p in ["gx", "gk", "gn", "gq", "ema", "d", "adam.gx.m", "adam.d.v"] {
        assert!(ck.has_prefix(p), "{p}");
    }
    let (loaded_cfg, b) = load_generator::<f64>(&summary.final_checkpoint).unwrap();
    assert_eq!(loaded_cfg.train.variant, Variant::BncrGan);
    let samples = sample_clean(&b, 5, 0, true).unwrap();
    assert_eq!(samples.len(), 5);
    assert_eq!(samples, sample_clean(&b, 5, 0, true).unwrap());
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let data = dataset(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&config("BNCR-GAN", data.path(), a.path(), 4)).unwrap();
    run(&config("BNCR-GAN", data.path(), b.path(), 2)).unwrap();
    let mut resumed = config("BNCR-GAN", data.path(), b.path(), 4);
    resumed.train.resume = Some(b.path().join(CHECKPOINT_FINAL));
    run(&resumed).unwrap();
    let fa = Checkpoint::load(&a.path().join(CHECKPOINT_FINAL)).unwrap();
    let fb = Checkpoint::load(&b.path().join(CHECKPOINT_FINAL)).unwrap();
    assert_eq!(fa.iteration, fb.iteration);
    assert!(fa.arrays == fb.arrays, "resumed checkpoint differs");
    assert_eq!(
        std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap(),
        std::fs::read_to_string(b.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn config_round_trips_and_validates() {
    let data = dataset(1);
    let cfg = config("CR-GAN+ACcomp", data.path(), Path::new("/tmp/x"), 10);
    let text = cfg.to_text().unwrap();
    assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
    assert!(TrainConfig::from_text(&text.replace("iterations = 10", "iterations = 0")).is_err());
    assert!(TrainConfig::from_text(&text.replace("[nets]", "[nets]\nbogus = 1")).is_err());
    let wide = TrainConfig::from_text(&text.replace("[nets]", "[nets]\nlatent_dim = 8")).unwrap();
    assert_eq!(wide.net_config().unwrap().latent_dim, 8);
}
