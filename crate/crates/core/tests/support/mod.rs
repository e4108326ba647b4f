//! Central finite-difference checks shared by the gradient tests and the
//! acceptance runner. Every check returns the worst relative error it saw, so
//! callers decide whether to assert or report.

#![allow(dead_code)]

use dewm::config::{TrainConfig, UpsampleMode, Variant};
use dewm::nn::{
    decoder_graph, discriminator_graph, embed_graph, encoder_graph, make_variant, Mode, ModelBundle, Session, DECODER,
};
use dewm::noise::{distort_batch, jpeg, Distortion};
use dewm::training::{generator_forward, generator_objective};
use dewm_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
/// Absolute slack for gradients that are numerically zero.
const FLOOR: f64 = 1e-8;

/// One named check and the worst relative error it produced.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub worst: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let diff = ((a - n).abs() - FLOOR).max(0.0);
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

pub fn tiny(variant: Variant, mode: UpsampleMode) -> ModelBundle<f64> {
    let config = TrainConfig {
        h: 16,
        w: 16,
        l: 8,
        channels: 8,
        variant,
        upsample_mode: mode,
        seed: 5,
        ..TrainConfig::default()
    };
    make_variant(&config).unwrap().cast()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn image(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    random(&[n, 3, 16, 16], rng, 0.2, 0.8)
}

/// Gradient of a scalar `f` with respect to an input tensor at `samples`
/// random positions (all positions when `samples` is `None`).
fn check_input<F>(name: &str, bundle: &ModelBundle<f64>, input: &Tensor<f64>, samples: Option<usize>, f: F) -> Check
where
    F: Fn(&mut Session<'_, f64>, Var) -> Var,
{
    let eval = |x: &Tensor<f64>| {
        let mut sess = Session::new(&bundle.params, Mode::Eval);
        let v = sess.tape.constant(x.clone());
        let out = f(&mut sess, v);
        sess.tape.value(out).data()[0]
    };
    let mut sess = Session::new(&bundle.params, Mode::Eval);
    let x = sess.tape.leaf(input.clone());
    let out = f(&mut sess, x);
    let grads = sess.tape.backward(out).unwrap();
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let positions: Vec<usize> = match samples {
        Some(k) => (0..k).map(|_| rng.random_range(0..input.len())).collect(),
        None => (0..input.len()).collect(),
    };
    let mut worst = 0.0f64;
    for idx in positions {
        let mut plus = input.clone();
        plus.data_mut()[idx] += EPS;
        let mut minus = input.clone();
        minus.data_mut()[idx] -= EPS;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[idx], numeric));
    }
    Check {
        name: name.to_string(),
        worst,
    }
}

/// Parameter gradients at `count` random (name, index) positions among the
/// trainable parameters under `prefixes`.
fn check_params<F>(name: &str, bundle: &ModelBundle<f64>, prefixes: &[&str], count: usize, f: F) -> Check
where
    F: Fn(&mut Session<'_, f64>) -> Var,
{
    let eval = |b: &ModelBundle<f64>| {
        let mut sess = Session::new(&b.params, Mode::Eval);
        let out = f(&mut sess);
        sess.tape.value(out).data()[0]
    };
    let mut sess = Session::with_grads(&bundle.params, Mode::Eval, prefixes);
    let out = f(&mut sess);
    let grads = sess.tape.backward(out).unwrap();
    let leaves = sess.leaves().to_vec();
    assert!(!leaves.is_empty(), "{name}: no parameters bound");
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (pname, var) = &leaves[rng.random_range(0..leaves.len())];
        let size = bundle.params.get(pname).unwrap().len();
        let idx = rng.random_range(0..size);
        let a = grads.get(*var).map(|g| g.data()[idx]).unwrap_or(0.0);
        let mut plus = bundle.clone();
        plus.params.get_mut(pname).unwrap().data_mut()[idx] += EPS;
        let mut minus = bundle.clone();
        minus.params.get_mut(pname).unwrap().data_mut()[idx] -= EPS;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
        worst = worst.max(rel_err(a, numeric));
    }
    Check {
        name: name.to_string(),
        worst,
    }
}

fn weighted_sum(sess: &mut Session<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(sess.tape.shape(out), &mut rng, -1.0, 1.0);
    let w = sess.tape.constant(w);
    let p = sess.tape.mul(out, w).unwrap();
    sess.tape.sum(p)
}

pub fn decoder_checks() -> Vec<Check> {
    let b = tiny(Variant::Deend, UpsampleMode::NearestInterp);
    let arch = b.arch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = image(&mut rng, 2);
    vec![
        check_input("decoder/input", &b, &x, Some(40), |s, v| {
            let y = decoder_graph(s, DECODER, &arch, v).unwrap();
            weighted_sum(s, y, 3)
        }),
        check_params("decoder/params", &b, &["decoder."], 30, |s| {
            let v = s.tape.constant(x.clone());
            let y = decoder_graph(s, DECODER, &arch, v).unwrap();
            weighted_sum(s, y, 3)
        }),
    ]
}

pub fn decoder_depth_checks() -> Vec<Check> {
    (3..=7)
        .map(|unions| {
            let config = TrainConfig {
                h: 16,
                w: 16,
                l: 8,
                channels: 8,
                decoder_unions: unions,
                ..TrainConfig::default()
            };
            let b: ModelBundle<f64> = make_variant(&config).unwrap().cast();
            let arch = b.arch.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(unions as u64);
            let x = image(&mut rng, 1);
            check_input(&format!("decoder depth {unions}"), &b, &x, Some(20), |s, v| {
                let y = decoder_graph(s, DECODER, &arch, v).unwrap();
                weighted_sum(s, y, 4)
            })
        })
        .collect()
}

fn encoder_check(b: &ModelBundle<f64>, label: &str) -> Vec<Check> {
    let arch = b.arch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feature = random(&[2, 8], &mut rng, -1.0, 1.0);
    let host = image(&mut rng, 2);
    let message = Tensor::from_fn(&[2, 8], |i| (i % 3 == 0) as u8 as f64);
    vec![
        // gradient of the residual sum with respect to each message bit
        check_input(&format!("{label}/message"), b, &message, None, |s, m| {
            let f = s.tape.constant(feature.clone());
            let h = s.tape.constant(host.clone());
            let r = encoder_graph(s, &arch, Some(f), m, h).unwrap();
            s.tape.sum(r)
        }),
        check_params(&format!("{label}/params"), b, &["encoder."], 30, |s| {
            let f = s.tape.constant(feature.clone());
            let m = s.tape.constant(message.clone());
            let h = s.tape.constant(host.clone());
            let r = encoder_graph(s, &arch, Some(f), m, h).unwrap();
            weighted_sum(s, r, 5)
        }),
    ]
}

pub fn encoder_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for mode in UpsampleMode::ALL {
        out.extend(encoder_check(&tiny(Variant::Deend, mode), &format!("encoder {mode:?}")));
    }
    out.extend(encoder_check(&tiny(Variant::EWNd, UpsampleMode::NearestInterp), "encoder e_w_nd"));
    out.extend(encoder_check(&tiny(Variant::EndBaseline, UpsampleMode::NearestInterp), "encoder end_baseline"));
    out
}

pub fn discriminator_checks() -> Vec<Check> {
    let b = tiny(Variant::Deend, UpsampleMode::NearestInterp);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = image(&mut rng, 2);
    vec![
        check_input("discriminator/input", &b, &x, Some(40), |s, v| {
            let y = discriminator_graph(s, v).unwrap();
            let p = s.tape.sigmoid(y);
            weighted_sum(s, p, 6)
        }),
        check_params("discriminator/params", &b, &["discriminator."], 20, |s| {
            let v = s.tape.constant(x.clone());
            let y = discriminator_graph(s, v).unwrap();
            weighted_sum(s, y, 6)
        }),
    ]
}

/// The guided embedding, including the gradient that reaches the decoder
/// through the guidance pass.
pub fn embedding_checks() -> Vec<Check> {
    let b = tiny(Variant::Deend, UpsampleMode::NearestInterp);
    let arch = b.arch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let host = image(&mut rng, 1);
    let message = Tensor::from_fn(&[1, 8], |i| (i % 2) as f64);
    vec![
        check_input("embed/host", &b, &host, Some(30), |s, h| {
            let m = s.tape.constant(message.clone());
            let out = embed_graph(s, &arch, h, m, 0.01).unwrap();
            weighted_sum(s, out.watermarked, 8)
        }),
        check_params("embed/guide decoder", &b, &["decoder."], 20, |s| {
            let h = s.tape.constant(host.clone());
            let m = s.tape.constant(message.clone());
            let out = embed_graph(s, &arch, h, m, 0.01).unwrap();
            weighted_sum(s, out.watermarked, 8)
        }),
    ]
}

/// Full generator objective (embedding, distortion, decoding, adversarial
/// term) for every variant.
pub fn objective_checks() -> Vec<Check> {
    [Variant::Deend, Variant::DeAEndB, Variant::EndBaseline, Variant::EWNd]
        .into_iter()
        .map(|variant| {
            let b = tiny(variant, UpsampleMode::NearestInterp);
            let arch = b.arch.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let host = image(&mut rng, 2);
            let messages = Tensor::from_fn(&[2, 8], |i| (i % 3 == 1) as u8 as f64);
            let prefixes = arch.generator_prefixes();
            check_params(&format!("objective {variant}"), &b, &prefixes, 10, |s| {
                let mut noise_rng = ChaCha8Rng::seed_from_u64(0);
                let fwd = generator_forward(
                    s,
                    &arch,
                    &host,
                    &messages,
                    &[Distortion::Dropout { ratio: 0.3 }],
                    0.05,
                    &mut noise_rng,
                )
                .unwrap();
                generator_objective(s, &fwd, [1.0, 10.0, 0.5], false).unwrap().1
            })
        })
        .collect()
}

/// Gradient of a weighted sum of `g(x)` with respect to every element of `x`.
fn check_function<G>(name: &str, x: &Tensor<f64>, g: G) -> Check
where
    G: Fn(&mut Tape<f64>, Var) -> Var,
{
    let shape = x.shape().to_vec();
    let f = |x: &Tensor<f64>| -> (Tape<f64>, Var, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = g(&mut tape, v);
        let mut wr = ChaCha8Rng::seed_from_u64(1);
        let w = tape.constant(random(&shape, &mut wr, -1.0, 1.0));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        (tape, v, loss)
    };
    let (tape, v, loss) = f(x);
    let analytic = tape.backward(loss).unwrap().get(v).cloned().unwrap();
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[idx] += EPS;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= EPS;
        let (tp, _, lp) = f(&plus);
        let (tm, _, lm) = f(&minus);
        let numeric = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[idx], numeric));
    }
    Check {
        name: name.to_string(),
        worst,
    }
}

fn noise_check(name: &str, d: Distortion, size: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 3, size, size], &mut rng, 0.3, 0.7);
    let host = random(&[1, 3, size, size], &mut rng, 0.0, 1.0);
    check_function(name, &x, |tape, v| {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(42);
        distort_batch(tape, v, &host, &[d], &mut noise_rng).unwrap()
    })
}

/// Every distortion with a true gradient. The simulated JPEG is checked with
/// its rounding steps disabled, since rounding has zero derivative almost
/// everywhere.
pub fn noise_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 3, 16, 16], &mut rng, 0.3, 0.7);
    let tables = [jpeg::scaled_table(&jpeg::LUMA_TABLE, 50), jpeg::scaled_table(&jpeg::CHROMA_TABLE, 50)];
    vec![
        noise_check("identity", Distortion::Identity, 8),
        noise_check("cropout", Distortion::Cropout { ratio: 0.4 }, 8),
        noise_check("dropout", Distortion::Dropout { ratio: 0.4 }, 8),
        noise_check("gaussian_noise", Distortion::GaussianNoise { variance: 0.0004 }, 8),
        noise_check("gaussian_blur", Distortion::GaussianBlur { sigma: 1.0 }, 16),
        check_function("jpeg_simulated", &x, |tape, v| {
            jpeg::simulate_with_tables(tape, v, &tables, false).unwrap()
        }),
    ]
}
