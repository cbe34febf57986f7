use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::degrade::{diff_jpeg, QualityFactor};
use crate::gradcheck;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Random linear functional used to reduce an output to a scalar.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = t.constant(normal(t.shape(y), seed));
    let p = t.mul(y, w);
    t.sum(p)
}

fn tiny8() -> NetConfig {
    NetConfig {
        image_size: 8,
        latent_dim: 6,
        gen_init_channels: 4,
        gen_up_channels: vec![4],
        disc_down_channels: vec![4, 4],
        disc_plain_channels: vec![4],
        mlp_hidden: 8,
        kernel_size: 3,
        translator_width: 4,
        translator_blocks: 1,
        ..NetConfig::micro()
    }
}

#[test]
fn presets_validate() {
    for name in ["cifar10", "ffhq", "tiny16", "tiny28", "tiny32", "micro"] {
        let cfg = NetConfig::preset(name).unwrap();
        cfg.validate().unwrap();
    }
    assert_eq!(NetConfig::tiny(32).start_size(), 4);
    assert_eq!(NetConfig::tiny(28).start_size(), 7);
    assert_eq!(NetConfig::tiny(16).start_size(), 4);
    assert_eq!(NetConfig::cifar10().kernel_size, 9);
    assert_eq!(NetConfig::ffhq().kernel_size, 15);
    assert!(NetConfig::preset("huge").is_err());
    let mut bad = NetConfig::micro();
    bad.kernel_size = 4;
    assert!(bad.validate().is_err());
}

#[test]
fn image_generator_shape_and_determinism() {
    let cfg = NetConfig::micro();
    let mut store = ParamStore::<f64>::new();
    let g = ImageGenerator::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let z = normal(&[3, cfg.latent_dim], 1);
    let run = || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let x = g.forward(&mut tape, &p, zv).unwrap();
        tape.value(x).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[3, 3, 16, 16]);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, run());

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let zv = tape.constant(Tensor::zeros(&[1, 5]));
    assert!(g.forward(&mut tape, &p, zv).is_err());
}

#[test]
fn image_generator_latent_gradient() {
    let cfg = tiny8();
    let mut store = ParamStore::<f64>::new();
    let g = ImageGenerator::new(&cfg, &mut store, &mut rng(2)).unwrap();
    let z = normal(&[2, cfg.latent_dim], 3);
    let r = gradcheck::check(&z, 1e-6, |t, zv| {
        let p = store.bind(t, false);
        let x = g.forward(t, &p, zv).unwrap();
        project(t, x, 4)
    });
    assert!(r.relative_error() < 1e-3, "{}", r.relative_error());
}

#[test]
fn kernel_heads_ranges() {
    let cfg = NetConfig::micro();
    let mut store = ParamStore::<f64>::new();
    let g = KernelGenerator::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let z = tape.constant(normal(&[5, cfg.latent_dim], 9));
    let (k, m) = g.heads(&mut tape, &p, z).unwrap();
    assert_eq!(tape.shape(k), &[5, 81]);
    for i in 0..5 {
        let row = tape.value(k).item(i);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    assert!(tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn quality_heads_ranges() {
    let cfg = NetConfig::micro();
    let mut store = ParamStore::<f64>::new();
    let g = QualityGenerator::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let z = normal(&[7, cfg.latent_dim], 5);
    let run = || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (q, m) = g.heads(&mut tape, &p, zv).unwrap();
        (tape.value(q).clone(), tape.value(m).clone())
    };
    let (q, m) = run();
    assert_eq!(q.shape(), &[7]);
    assert!(q.data().iter().all(|&v| v > 0.0 && v < 100.0));
    assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!((q, m), run());
}

#[test]
fn noise_generator_starts_near_zero() {
    let cfg = NetConfig::micro();
    let mut store = ParamStore::<f64>::new();
    let g = NoiseGenerator::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let z = tape.constant(normal(&[2, cfg.latent_dim], 5));
    let (sr, ss) = g.sigmas(&mut tape, &p, z).unwrap();
    assert_eq!(tape.shape(sr), &[2, 3, 16, 16]);
    for v in tape.value(sr).data().iter().chain(tape.value(ss).data()) {
        assert!((v - SIGMA_INIT).abs() < 1e-12);
    }
    let x = tape.constant(Tensor::full(&[2, 3, 16, 16], 0.5));
    let n = crate::degrade::sample_noise_tape(&mut tape, x, sr, ss, &mut rng(1)).unwrap();
    assert!(tape.value(n).data().iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn compose_kernel_cases() {
    let mut r = rng(4);
    let k_hat = BlurKernel::normalized(3, (0..9).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let id = identity_kernel::<f64>(3).unwrap();
    assert_eq!(compose_kernel(&k_hat, &[0.0; 9]).unwrap(), id);
    let full = compose_kernel(&k_hat, &[1.0; 9]).unwrap();
    for (a, b) in full.data().iter().zip(k_hat.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let uniform = BlurKernel::new(3, vec![1.0 / 9.0; 9]).unwrap();
    let half = compose_kernel(&uniform, &[0.5; 9]).unwrap();
    for (i, &v) in half.data().iter().enumerate() {
        let want: f64 = if i == 4 { 0.5 / 9.0 + 0.5 } else { 0.5 / 9.0 };
        assert!((v - want).abs() < 1e-15);
    }
    assert!(compose_kernel(&uniform, &[1.5; 9]).is_err());
}

#[test]
fn compose_kernel_tape_matches_plain_and_gradchecks() {
    let k_raw = uniform(&[2, 9], 0.1, 1.0, 1);
    let mut k_hat = k_raw.clone();
    for i in 0..2 {
        let s: f64 = k_hat.item(i).iter().sum();
        k_hat.item_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    let m = uniform(&[2, 9], 0.05, 0.95, 2);
    let mut tape = Tape::new();
    let (kv, mv) = (tape.constant(k_hat.clone()), tape.constant(m.clone()));
    let out = compose_kernel_tape(&mut tape, kv, mv).unwrap();
    for i in 0..2 {
        let plain = compose_kernel(&BlurKernel::new(3, k_hat.item(i).to_vec()).unwrap(), m.item(i)).unwrap();
        for (a, b) in tape.value(out).item(i).iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let rk = gradcheck::check(&k_hat, 1e-6, |t, v| {
        let mv = t.constant(m.clone());
        let y = compose_kernel_tape(t, v, mv).unwrap();
        project(t, y, 3)
    });
    assert!(rk.relative_error() < 1e-6);
    let rm = gradcheck::check(&m, 1e-6, |t, v| {
        let kv = t.constant(k_hat.clone());
        let y = compose_kernel_tape(t, kv, v).unwrap();
        project(t, y, 3)
    });
    assert!(rm.relative_error() < 1e-6);
}

#[test]
fn compose_compressed_cases() {
    let x = Image::from_tensor(&uniform(&[3, 16, 16], 0.0, 1.0, 3)).unwrap();
    let jpeg = diff_jpeg(&x, QualityFactor::new(30.0).unwrap(), JpegRounding::Smooth).unwrap();
    assert_eq!(compose_compressed(&x, 30.0, 0.0).unwrap(), x);
    assert_eq!(compose_compressed(&x, 30.0, 1.0).unwrap(), jpeg);
    let mid = compose_compressed(&x, 30.0, 0.5).unwrap();
    for ((m, a), b) in mid.data().iter().zip(x.data()).zip(jpeg.data()) {
        assert!((m - 0.5 * (a + b)).abs() < 1e-15);
    }
}

#[test]
fn compose_compressed_gradients() {
    let x = uniform(&[1, 3, 8, 8], 0.2, 0.8, 5);
    let q = Tensor::from_vec(&[1], vec![55.0]).unwrap();
    let m = Tensor::from_vec(&[1], vec![0.7]).unwrap();
    let rx = gradcheck::check(&x, 1e-6, |t, v| {
        let (qv, mv) = (t.constant(q.clone()), t.constant(m.clone()));
        let y = compose_compressed_tape(t, v, qv, mv).unwrap();
        project(t, y, 6)
    });
    assert!(rx.relative_error() < 1e-5, "{}", rx.relative_error());
    let rq = gradcheck::check(&q, 1e-6, |t, v| {
        let (xv, mv) = (t.constant(x.clone()), t.constant(m.clone()));
        let y = compose_compressed_tape(t, xv, v, mv).unwrap();
        project(t, y, 6)
    });
    assert!(rq.relative_error() < 1e-5, "{}", rq.relative_error());
    let rm = gradcheck::check(&m, 1e-6, |t, v| {
        let (xv, qv) = (t.constant(x.clone()), t.constant(q.clone()));
        let y = compose_compressed_tape(t, xv, qv, v).unwrap();
        project(t, y, 6)
    });
    assert!(rm.relative_error() < 1e-8);
}

#[test]
fn discriminator_logits_and_input_gradient() {
    let cfg = tiny8();
    let mut store = ParamStore::<f64>::new();
    let d = Discriminator::new(&cfg, &mut store, &mut rng(7)).unwrap();
    let y = uniform(&[3, 3, 8, 8], 0.0, 1.0, 8);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let yv = tape.constant(y.clone());
    let l = d.forward(&mut tape, &p, yv).unwrap();
    assert_eq!(tape.shape(l), &[3]);
    assert!(tape.value(l).all_finite());
    let r = gradcheck::check(&y, 1e-6, |t, v| {
        let p = store.bind(t, false);
        let l = d.forward(t, &p, v).unwrap();
        project(t, l, 9)
    });
    assert!(r.relative_error() < 1e-3, "{}", r.relative_error());
    let wrong = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
    assert!(d.forward(&mut tape, &p, wrong).is_err());
}

#[test]
fn translator_shape_determinism_and_gradient() {
    let cfg = tiny8();
    let mut store = ParamStore::<f64>::new();
    let tr = Translator::new(&cfg, &mut store, &mut rng(10)).unwrap();
    let y = uniform(&[1, 3, 8, 8], 0.0, 1.0, 11);
    let run = || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let x = tr.forward(&mut tape, &p, yv).unwrap();
        tape.value(x).clone()
    };
    let a = run();
    assert_eq!(a.shape(), y.shape());
    assert_eq!(a, run());
    let r = gradcheck::check(&y, 1e-6, |t, v| {
        let p = store.bind(t, false);
        let x = tr.forward(t, &p, v).unwrap();
        project(t, x, 12)
    });
    assert!(r.relative_error() < 1e-3, "{}", r.relative_error());
}

#[test]
fn parameter_gradients_reach_every_tensor() {
    let cfg = tiny8();
    let mut store = ParamStore::<f64>::new();
    let d = Discriminator::new(&cfg, &mut store, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let y = tape.constant(uniform(&[2, 3, 8, 8], 0.0, 1.0, 2));
    let l = d.forward(&mut tape, &p, y).unwrap();
    let s = tape.sum(l);
    let grads = p.gradients(&tape.grad(s), &store);
    assert_eq!(grads.len(), store.len());
    for ((name, _), g) in store.iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} received no gradient");
    }
}

#[test]
fn stores_round_trip_through_checkpoints() {
    let cfg = NetConfig::micro();
    let mut store = ParamStore::<f32>::new();
    ImageGenerator::new(&cfg, &mut store, &mut rng(0)).unwrap();
    let mut ck = Checkpoint::new("cfg", 7);
    ck.push_store("gx", &store);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let mut fresh = ParamStore::<f32>::new();
    ImageGenerator::new(&cfg, &mut fresh, &mut rng(1)).unwrap();
    assert_ne!(fresh, store);
    back.load_store("gx", &mut fresh).unwrap();
    assert_eq!(fresh, store);
    let mut other = ParamStore::<f32>::new();
    Discriminator::new(&cfg, &mut other, &mut rng(0)).unwrap();
    assert!(back.load_store("gx", &mut other).is_err());
}
