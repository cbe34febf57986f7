use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::eval::{ExtractorKind, PSNR_CAP};
use crate::gradcheck;
use crate::synth;
use crate::train::{TrainConfig, Variant};

fn tiny_net() -> NetConfig {
    NetConfig { translator_width: 4, translator_blocks: 1, ..NetConfig::micro() }
}

fn corpus(n: usize, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth::write_dataset(dir.path(), &synth::shapes(n, 3, 16, seed).unwrap()).unwrap();
    dir
}

fn config(source: &str, extra: &str, data: &Path, out: &Path, iterations: u64) -> RestoreConfig {
    let text = format!(
        "[restore]\nsource = \"{source}\"\n{extra}\ndata = \"{}\"\nout = \"{}\"\niterations = {iterations}\nbatch = 3\n\
         log_every = 1\ncheckpoint_every = 2\nprecision = \"f64\"\n[nets]\npreset = \"micro\"\ntranslator_width = 4\n",
        data.display(),
        out.display()
    );
    RestoreConfig::from_text(&text).unwrap()
}

fn translator() -> Part<Translator, f64> {
    let mut params = ParamStore::new();
    let net = Translator::new(&tiny_net(), &mut params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    Part { net, params }
}

#[test]
fn translation_keeps_shape_and_is_deterministic() {
    let t = translator();
    let y = synth::shapes(1, 3, 12, 2).unwrap().remove(0);
    let a = translate_image(&t.net, &t.params, &y).unwrap();
    assert!(a.same_shape(&y));
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, translate_image(&t.net, &t.params, &y).unwrap());
    let bad = Image::filled(1, 8, 8, 0.5).unwrap();
    assert!(translate_image(&t.net, &t.params, &bad).is_err());
}

#[test]
fn translation_gradients_match_finite_differences() {
    let t = translator();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
    let r = gradcheck::check(&y, 1e-6, |tape, v| {
        let p = t.params.bind(tape, false);
        let out = translate(tape, &t.net, &p, v).unwrap();
        let sq = tape.square(out);
        tape.sum(sq)
    });
    assert!(r.relative_error() < 1e-3, "{}", r.relative_error());
}

fn critic() -> Part<Discriminator, f64> {
    let mut params = ParamStore::new();
    let net = Discriminator::new(&tiny_net(), &mut params, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    Part { net, params }
}

#[test]
fn identity_restorer_on_clean_setting_has_zero_rec_and_id() {
    let d = critic();
    let degrader = Degrader::<f64>::Setting(build_setting('A').unwrap());
    let y = Image::batch(&synth::shapes(2, 3, 16, 3).unwrap()).unwrap();
    let mut tape = Tape::new();
    let empty = ParamStore::<f64>::new().bind(&mut tape, false);
    let dp = d.params.bind(&mut tape, false);
    let yv = tape.constant(y);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = unir_losses(&mut tape, yv, &IdentityMap, &empty, &degrader, &d.net, &dp, 1.0, 0.1, &mut rng).unwrap();
    assert_eq!(value(&tape, l.id), 0.0);
    assert_eq!(value(&tape, l.rec), 0.0);
    assert_eq!(value(&tape, l.total), value(&tape, l.adv));
}

#[test]
fn zero_weights_leave_the_adversarial_term() {
    let t = translator();
    let d = critic();
    let degrader = Degrader::<f64>::Setting(build_setting('Q').unwrap());
    let y = Image::batch(&synth::shapes(2, 3, 16, 4).unwrap()).unwrap();
    let mut tape = Tape::new();
    let tp = t.params.bind(&mut tape, true);
    let dp = d.params.bind(&mut tape, false);
    let yv = tape.constant(y);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = unir_losses(&mut tape, yv, &t.net, &tp, &degrader, &d.net, &dp, 0.0, 0.0, &mut rng).unwrap();
    assert_eq!(value(&tape, l.total), value(&tape, l.adv));
    assert!(value(&tape, l.rec) > 0.0 && value(&tape, l.id) > 0.0);
}

#[test]
fn reconstruction_redraws_the_degradation() {
    // the same restored batch degraded twice in sequence differs
    let degrader = Degrader::<f64>::Setting(build_setting('R').unwrap());
    let x = Image::batch(&synth::shapes(2, 3, 16, 5).unwrap()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = degrader.degrade(&mut tape, xv, &mut rng).unwrap();
    let b = degrader.degrade(&mut tape, xv, &mut rng).unwrap();
    assert_ne!(tape.value(a), tape.value(b));
}

#[test]
fn learned_degrader_ignores_the_setting() {
    let net = NetConfig::micro();
    let mut bundle = GeneratorBundle::<f64>::new(Variant::BncrGan, &net, &build_setting('A').unwrap(), 0).unwrap();
    let x = Image::batch(&synth::shapes(2, 3, 16, 6).unwrap()).unwrap();
    let run = |b: &GeneratorBundle<f64>| {
        let d = Degrader::from_generators(b.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = d.degrade(&mut tape, xv, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        tape.value(y).clone()
    };
    let before = run(&bundle);
    bundle.setting = build_setting('N').unwrap();
    bundle.setting.kernel_size = 3;
    assert_eq!(before, run(&bundle));
    let gan = GeneratorBundle::<f64>::new(Variant::Gan, &net, &build_setting('A').unwrap(), 0).unwrap();
    assert!(Degrader::from_generators(gan).is_err());
}

#[test]
fn missing_checkpoint_is_invalid() {
    let data = corpus(3, 0);
    let cfg = config("bncr-checkpoint", "checkpoint = \"/nonexistent/x.ckpt\"", data.path(), data.path(), 1);
    assert!(matches!(Degrader::<f64>::from_config(&cfg), Err(Error::InvalidArgument(_))));
    let text = cfg.to_text().unwrap().replace("checkpoint = \"/nonexistent/x.ckpt\"\n", "");
    assert!(RestoreConfig::from_text(&text).is_err());
}

#[test]
fn restorer_resumes_exactly_and_logs_components() {
    let data = corpus(4, 7);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = "setting = \"Q\"";
    train_restorer(&config("ground-truth", extra, data.path(), a.path(), 3)).unwrap();
    train_restorer(&config("ground-truth", extra, data.path(), b.path(), 2)).unwrap();
    let mut resumed = config("ground-truth", extra, data.path(), b.path(), 3);
    resumed.restore.resume = Some(b.path().join(RESTORER_LATEST));
    let summary = train_restorer(&resumed).unwrap();
    assert_eq!(summary.iterations, 3);
    let ca = Checkpoint::load(&a.path().join(RESTORER_FINAL)).unwrap();
    let cb = Checkpoint::load(&b.path().join(RESTORER_FINAL)).unwrap();
    assert!(ca.arrays == cb.arrays, "resumed restorer differs");
    let log = std::fs::read_to_string(a.path().join(RESTORE_LOG_FILE)).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iter,d_loss,r1,adv,rec,id");
    assert_eq!(log.lines().count(), 4);
    assert_eq!(log, std::fs::read_to_string(b.path().join(RESTORE_LOG_FILE)).unwrap());

    let out = tempfile::tempdir().unwrap();
    assert_eq!(restore_dir(&summary.final_checkpoint, data.path(), out.path()).unwrap(), 4);
    let (restored, _) = crate::imageio::read_image(&out.path().join("img_00000.png")).unwrap();
    assert_eq!((restored.channels(), restored.height()), (3, 16));
}

#[test]
fn restorer_trains_against_learned_generators() {
    let data = corpus(4, 8);
    let gen_out = tempfile::tempdir().unwrap();
    let text = format!(
        "[train]\nvariant = \"BNCR-GAN\"\ndata = \"{}\"\nout = \"{}\"\niterations = 1\nbatch = 2\nprecision = \"f64\"\n\
         [nets]\npreset = \"micro\"\n",
        data.path().display(),
        gen_out.path().display()
    );
    let ckpt = crate::train::run(&TrainConfig::from_text(&text).unwrap()).unwrap().final_checkpoint;
    let out = tempfile::tempdir().unwrap();
    let cfg = config("bncr-checkpoint", &format!("checkpoint = \"{}\"", ckpt.display()), data.path(), out.path(), 1);
    let m = train_restorer(&cfg).unwrap().last.unwrap();
    assert!(m.adv.is_finite() && m.rec > 0.0 && m.id > 0.0);
}

#[test]
fn evaluation_rows_and_identity_scores() {
    let clean = synth::shapes(6, 3, 16, 10).unwrap();
    let ex = FeatureExtractor::new(ExtractorKind::RandProj, (3, 16, 16), 0).unwrap();
    let rows = restore_eval("identity", "A", &clean, &clean, &ex).unwrap();
    assert_eq!(rows.len(), 4);
    let get = |m: &str| rows.iter().find(|r| r.metric == m).unwrap().value;
    assert_eq!(get("psnr"), PSNR_CAP);
    assert!((get("ssim") - 1.0).abs() < 1e-12);
    assert!(get("fid").abs() < 1e-9 && get("proxy_perceptual") == 0.0);
    assert!(restore_eval("x", "A", &clean[..3], &clean, &ex).is_err());

    let degraded: Vec<Image<f64>> = clean
        .iter()
        .map(|c| Image::new(3, 16, 16, c.data().iter().map(|v| 0.8 * v + 0.1).collect()).unwrap())
        .collect();
    let out = tempfile::tempdir().unwrap();
    let rows = restore_report("restored", "A", &degraded, &clean, &clean, &ex, out.path()).unwrap();
    assert_eq!(rows.len(), 8);
    let base_psnr = rows.iter().find(|r| r.model == "degraded" && r.metric == "psnr").unwrap().value;
    let want: f64 = clean.iter().zip(&degraded).map(|(c, d)| psnr(c, d).unwrap()).sum::<f64>() / 6.0;
    assert!((base_psnr - want).abs() < 1e-12);
    assert!(out.path().join("metrics.csv").exists() && out.path().join("grid_restoration.png").exists());
}
