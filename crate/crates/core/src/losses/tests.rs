use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::degrade::identity_kernel;
use crate::gradcheck;
use crate::nets::{NetConfig, ParamId};

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn scalar(t: &Tape<f64>, v: Var) -> f64 {
    t.value(v).data()[0]
}

#[test]
fn nonsat_values_at_zero_and_limits() {
    let ln2 = std::f64::consts::LN_2;
    let mut t = Tape::new();
    let r = t.constant(Tensor::zeros(&[4]));
    let f = t.constant(Tensor::zeros(&[4]));
    let d = nonsat_gan_loss(&mut t, Some(r), f, Side::Discriminator).unwrap();
    let g = nonsat_gan_loss(&mut t, None, f, Side::Generator).unwrap();
    assert!((scalar(&t, d) - 2.0 * ln2).abs() < 1e-15);
    assert!((scalar(&t, g) - ln2).abs() < 1e-15);

    let r = t.constant(Tensor::full(&[2], 60.0));
    let f = t.constant(Tensor::full(&[2], -60.0));
    let d = nonsat_gan_loss(&mut t, Some(r), f, Side::Discriminator).unwrap();
    assert!(scalar(&t, d) < 1e-20);
    assert!(nonsat_gan_loss(&mut t, None, f, Side::Discriminator).is_err());
}

#[test]
fn generator_loss_decreases_in_fake_logit() {
    let mut prev = f64::INFINITY;
    for i in -40..=40 {
        let mut t = Tape::new();
        let f = t.constant(Tensor::full(&[1], i as f64 * 0.25));
        let g = nonsat_gan_loss(&mut t, None, f, Side::Generator).unwrap();
        let v = scalar(&t, g);
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn nonsat_gradients() {
    let fake = uniform(&[5], -3.0, 3.0, 1);
    let real = uniform(&[5], -3.0, 3.0, 2);
    let r = gradcheck::check(&fake, 1e-6, |t, f| {
        let rv = t.constant(real.clone());
        nonsat_gan_loss(t, Some(rv), f, Side::Discriminator).unwrap()
    });
    assert!(r.relative_error() < 1e-8);
    // d/dl softplus(−l)/B = −sigmoid(−l)/B
    let mut t = Tape::new();
    let f = t.leaf(fake.clone());
    let g = nonsat_gan_loss(&mut t, None, f, Side::Generator).unwrap();
    let grad = t.grad(g).take(f).unwrap();
    for (gv, l) in grad.data().iter().zip(fake.data()) {
        assert!((gv + 1.0 / (1.0 + l.exp()) / 5.0).abs() < 1e-15);
    }
}

/// `D(y) = Σ_j w_j·y_j² + b`, whose penalty has a closed form.
struct Quadratic {
    w: ParamId,
    b: ParamId,
}

impl Critic for Quadratic {
    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, y: Var) -> Result<Var> {
        let b = tape.shape(y)[0];
        let n = tape.value(y).item_len();
        let flat = tape.reshape(y, &[b, n])?;
        let sq = tape.square(flat);
        let out = tape.linear(sq, p.var(self.w), p.var(self.b))?;
        tape.reshape(out, &[b])
    }
}

/// `D(y) = Σ y` per item.
struct SumCritic;

impl Critic for SumCritic {
    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, _p: &Binding, y: Var) -> Result<Var> {
        Ok(tape.sum_per_item(y))
    }
}

/// Ignores its input.
struct ConstantCritic(ParamId);

impl Critic for ConstantCritic {
    fn logits<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, y: Var) -> Result<Var> {
        let b = tape.shape(y)[0];
        let ones = tape.constant(Tensor::full(&[b, 1], S::one()));
        let w = tape.constant(Tensor::zeros(&[1, 1]));
        let out = tape.linear(ones, w, p.var(self.0))?;
        tape.reshape(out, &[b])
    }
}

#[test]
fn r1_of_constant_critic_is_zero() {
    let mut store = ParamStore::<f64>::new();
    let c = ConstantCritic(store.add("b", Tensor::full(&[1], 0.3)));
    let r = r1_penalty(&c, &store, &uniform(&[2, 3, 4, 4], 0.0, 1.0, 0)).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.param_grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn r1_of_linear_critic_is_half_pixel_count() {
    let store = ParamStore::<f64>::new();
    let r = r1_penalty(&SumCritic, &store, &uniform(&[3, 3, 4, 5], 0.0, 1.0, 0)).unwrap();
    assert!((r.value - 0.5 * 60.0).abs() < 1e-12);
}

#[test]
fn r1_matches_closed_form_for_quadratic_critic() {
    let (b, n) = (3, 2 * 3 * 3);
    let mut store = ParamStore::<f64>::new();
    let c = Quadratic { w: store.add("w", uniform(&[1, n], -1.0, 1.0, 5)), b: store.add("b", Tensor::full(&[1], 0.2)) };
    let y = uniform(&[b, 2, 3, 3], 0.0, 1.0, 6);
    let r = r1_penalty(&c, &store, &y).unwrap();
    let w = store.get(c.w).data();
    let mut value = 0.0;
    let mut dw = vec![0.0; n];
    for i in 0..b {
        for j in 0..n {
            let yv = y.item(i)[j];
            value += 0.5 * 4.0 * w[j] * w[j] * yv * yv / b as f64;
            dw[j] += 4.0 * w[j] * yv * yv / b as f64;
        }
    }
    assert!((r.value - value).abs() < 1e-12);
    for (a, e) in r.param_grads[0].data().iter().zip(&dw) {
        assert!((a - e).abs() < 1e-12);
    }
    assert!(r.param_grads[1].data()[0].abs() < 1e-15);
}

fn tiny_disc(seed: u64) -> (Discriminator, ParamStore<f64>) {
    let cfg =
        NetConfig { image_size: 8, disc_down_channels: vec![4, 4], disc_plain_channels: vec![4], ..NetConfig::micro() };
    let mut store = ParamStore::new();
    let d = Discriminator::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (d, store)
}

fn critic_sum(d: &Discriminator, store: &ParamStore<f64>, y: &Tensor<f64>) -> f64 {
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let yv = t.constant(y.clone());
    let l = d.forward(&mut t, &p, yv).unwrap();
    t.value(l).sum()
}

#[test]
fn r1_of_network_matches_finite_difference_input_gradient() {
    let (d, store) = tiny_disc(3);
    let y = uniform(&[2, 3, 8, 8], 0.0, 1.0, 4);
    let r = r1_penalty(&d, &store, &y).unwrap();
    let h = 1e-6;
    let mut probe = y.clone();
    let mut sq = 0.0;
    for i in 0..y.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = critic_sum(&d, &store, &probe);
        probe.data_mut()[i] = orig - h;
        let down = critic_sum(&d, &store, &probe);
        probe.data_mut()[i] = orig;
        sq += ((up - down) / (2.0 * h)).powi(2);
    }
    let fd = 0.5 * sq / 2.0;
    assert!((r.value - fd).abs() / fd < 1e-3, "{} vs {fd}", r.value);
}

#[test]
fn r1_parameter_gradient_matches_finite_difference() {
    let (d, store) = tiny_disc(8);
    let y = uniform(&[2, 3, 8, 8], 0.0, 1.0, 9);
    let r = r1_penalty(&d, &store, &y).unwrap();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (pi, t) in store.tensors().iter().enumerate() {
        for _ in 0..4 {
            let j = rng.random_range(0..t.len());
            let mut probe = store.clone();
            let orig = probe.tensors()[pi].data()[j];
            probe.tensors_mut()[pi].data_mut()[j] = orig + h;
            let up = r1_penalty(&d, &probe, &y).unwrap().value;
            probe.tensors_mut()[pi].data_mut()[j] = orig - h;
            let down = r1_penalty(&d, &probe, &y).unwrap().value;
            numeric.push((up - down) / (2.0 * h));
            analytic.push(r.param_grads[pi].data()[j]);
        }
    }
    let check = gradcheck::GradCheck { analytic, numeric };
    assert!(check.relative_error() < 1e-4, "{}", check.relative_error());
}

#[test]
fn r1_runs_in_single_precision() {
    let cfg =
        NetConfig { image_size: 8, disc_down_channels: vec![4, 4], disc_plain_channels: vec![4], ..NetConfig::micro() };
    let mut s32 = ParamStore::<f32>::new();
    let d = Discriminator::new(&cfg, &mut s32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let y64 = uniform(&[2, 3, 8, 8], 0.0, 1.0, 2);
    let r32 = r1_penalty(&d, &s32, &y64.cast::<f32>()).unwrap();
    let r64 = r1_penalty(&d, &s32.cast::<f64>(), &y64).unwrap();
    assert!((r32.value as f64 - r64.value).abs() / r64.value < 1e-4);
}

fn textured(seed: u64) -> Image<f64> {
    Image::from_tensor(&uniform(&[3, 16, 16], 0.0, 1.0, seed)).unwrap()
}

#[test]
fn ac_blur_examples() {
    let x = textured(1);
    assert_eq!(ac_blur(&x, &identity_kernel(9).unwrap(), 1.0).unwrap(), 0.0);
    assert_eq!(ac_blur_weight(0.0, 1.0), 1.0);
    let flat = BlurKernel::new(9, vec![1.0 / 81.0; 81]).unwrap();
    let w = ac_blur_weight(kernel_entropy(&flat), 1.0);
    assert!((w - 1.0 / 81.0).abs() < 1e-9);
    let gray = Image::filled(3, 16, 16, 0.37).unwrap();
    assert!(ac_blur(&gray, &flat, 1.0).unwrap() < 1e-28);
    assert!(ac_blur(&x, &flat, 1.0).unwrap() > 0.0);
}

#[test]
fn ac_comp_examples() {
    assert_eq!(ac_comp_weight(100.0, 10.0), 1.0);
    assert!((ac_comp_weight(0.0, 10.0) - (-10.0f64).exp()).abs() < 1e-18);
    let gray = Image::filled(3, 16, 16, 128.0 / 255.0).unwrap();
    for q in [1.0, 20.0, 63.5, 100.0] {
        assert!(ac_comp(&gray, QualityFactor::new(q).unwrap(), 10.0).unwrap() < 1e-24);
    }
    assert!(ac_comp(&textured(2), QualityFactor::new(20.0).unwrap(), 10.0).unwrap() > 0.0);
}

#[test]
fn ac_blur_tape_matches_plain_and_stops_gradient() {
    let xs = [textured(3), textured(4)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ks: Vec<BlurKernel<f64>> = (0..2)
        .map(|_| BlurKernel::normalized(5, (0..25).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let mut t = Tape::new();
    let x = t.leaf(Image::batch(&xs).unwrap());
    let kt =
        Tensor::stack(&ks.iter().map(|k| Tensor::from_vec(&[5, 5], k.data().to_vec()).unwrap()).collect::<Vec<_>>())
            .unwrap();
    let k = t.leaf(kt);
    let loss = ac_blur_tape(&mut t, x, k, 1.0).unwrap();
    let plain = (ac_blur(&xs[0], &ks[0], 1.0).unwrap() + ac_blur(&xs[1], &ks[1], 1.0).unwrap()) / 2.0;
    assert!((scalar(&t, loss) - plain).abs() < 1e-14);

    let mut grads = t.grad(loss);
    assert!(grads.take(k).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    let gx = grads.take(x).unwrap();
    let n = xs[0].data().len() as f64;
    for (b, (img, ker)) in xs.iter().zip(&ks).enumerate() {
        let w = ac_blur_weight(kernel_entropy(ker), 1.0);
        let blurred = convolve(img, ker).unwrap();
        for ((g, a), r) in gx.item(b).iter().zip(img.data()).zip(blurred.data()) {
            assert!((g - 2.0 * w * (a - r) / n / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn ac_comp_tape_matches_plain_and_stops_gradient() {
    let xs = [textured(6), textured(7)];
    let qs = [35.0, 80.0];
    let mut t = Tape::new();
    let x = t.leaf(Image::batch(&xs).unwrap());
    let q = t.leaf(Tensor::from_vec(&[2], qs.to_vec()).unwrap());
    let loss = ac_comp_tape(&mut t, x, q, 10.0).unwrap();
    let plain: f64 =
        xs.iter().zip(qs).map(|(img, qv)| ac_comp(img, QualityFactor::new(qv).unwrap(), 10.0).unwrap()).sum::<f64>()
            / 2.0;
    assert!((scalar(&t, loss) - plain).abs() < 1e-14);
    let mut grads = t.grad(loss);
    assert!(grads.take(q).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    let gx = grads.take(x).unwrap();
    let n = xs[0].data().len() as f64;
    for (b, (img, qv)) in xs.iter().zip(qs).enumerate() {
        let w = ac_comp_weight(qv, 10.0);
        let c = diff_jpeg(img, QualityFactor::new(qv).unwrap(), JpegRounding::Smooth).unwrap();
        for ((g, a), r) in gx.item(b).iter().zip(img.data()).zip(c.data()) {
            assert!((g - 2.0 * w * (a - r) / n / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn diversity_examples() {
    let za = uniform(&[2, 4], -1.0, 1.0, 1);
    let zb = uniform(&[2, 4], -1.0, 1.0, 2);
    let a = uniform(&[2, 6], 0.0, 1.0, 3);
    let b = uniform(&[2, 6], 0.0, 1.0, 4);
    let run = |oa: &Tensor<f64>, ob: &Tensor<f64>, z1: &Tensor<f64>, z2: &Tensor<f64>| {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(oa.clone()), t.constant(ob.clone()));
        let r = diversity_reg(&mut t, va, vb, z1, z2).unwrap();
        scalar(&t, r)
    };
    assert_eq!(run(&a, &a, &za, &zb), 0.0);
    assert_eq!(run(&a, &b, &za, &za), -DIVERSITY_CLIP);
    let base = run(&a, &b, &za, &zb);
    assert!(base < 0.0 && base > -DIVERSITY_CLIP);
    let double = run(&a.map(|v| 2.0 * v), &b.map(|v| 2.0 * v), &za, &zb);
    assert!((double - 2.0 * base).abs() < 1e-14);
    // independent evaluation of the ratio
    let mut expect = 0.0;
    for i in 0..2 {
        let num: f64 = a.item(i).iter().zip(b.item(i)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 6.0;
        let den: f64 = za.item(i).iter().zip(zb.item(i)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
        expect += (-num / (den + 1e-8)).max(-10.0) / 2.0;
    }
    assert!((base - expect).abs() < 1e-14);
}

#[test]
fn diversity_gradient() {
    let za = uniform(&[2, 4], -1.0, 1.0, 1);
    let zb = uniform(&[2, 4], -1.0, 1.0, 2);
    let b = uniform(&[2, 6], 0.0, 1.0, 4);
    let a = uniform(&[2, 6], 0.0, 1.0, 3);
    let r = gradcheck::check(&a, 1e-6, |t, v| {
        let vb = t.constant(b.clone());
        diversity_reg(t, v, vb, &za, &zb).unwrap()
    });
    assert!(r.relative_error() < 1e-8);
    let mut t = Tape::new();
    let va = t.constant(a.clone());
    let vb = t.constant(b);
    assert!(diversity_reg(&mut t, va, vb, &za, &Tensor::zeros(&[3, 4])).is_err());
}

#[test]
fn default_weights_are_valid() {
    let w = LossWeights::default();
    w.validate().unwrap();
    assert_eq!((w.lambda_r1, w.lambda_ac, w.mu_k, w.mu_q), (10.0, 0.1, 1.0, 10.0));
    assert_eq!((w.lambda_ds_k, w.lambda_ds_n, w.lambda_ds_q), (4e-4, 0.02, 1e-5));
    assert!(LossWeights { mu_q: -1.0, ..w.clone() }.validate().is_err());
    assert!(LossWeights { lambda_r1: f64::NAN, ..w }.validate().is_err());
}
