//! Alternating discriminator/generator optimization and the epoch loop.

pub mod losses;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use dewm_autograd::{Adam, AdamConfig, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::config::lambda_schedule;
use crate::checkpoint::{rng_state_bytes, Checkpoint};
use crate::config::{validate_config, Lambdas, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::{
    apply_running_updates, decoder_graph, discriminator_graph, embed_graph, make_variant, Architecture, Mode,
    ModelBundle, Session, DECODER, DISCRIMINATOR,
};
use crate::noise::{distort_batch, sample_training_spec, Distortion, NoiseSpec};
use crate::params::ParamStore;
use crate::types::{ImageArray, ImageRole, WatermarkMessage};
use losses::{adversarial_graph, discriminator_graph_loss};

/// Momentum of the batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Losses of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_e: f64,
    pub l_d: f64,
    pub l_ad: f64,
    pub l_dis: f64,
    pub total: f64,
    pub lambdas: Lambdas,
    /// Mean bit accuracy of the step's decoder outputs.
    pub bit_accuracy: f64,
    /// Mean PSNR between hosts and watermarked images of the step.
    pub psnr: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_e: f64,
    pub l_d: f64,
    pub l_ad: f64,
    pub l_dis: f64,
    pub psnr_train: f64,
    pub bitacc_train: f64,
    pub lambdas: Lambdas,
}

impl EpochMetrics {
    /// Weighted generator loss of the epoch means.
    pub fn total(&self) -> f64 {
        let [a, b, c] = self.lambdas;
        a * self.l_e + b * self.l_d + c * self.l_ad
    }
}

/// Graph nodes of the generator forward pass up to the decoder outputs.
pub struct GeneratorForward {
    pub watermarked: Var,
    pub noised: Var,
    pub logits: Var,
    pub l_e: Var,
    pub l_d: Var,
}

/// Embeds `messages` (`N x L`) into `host` (`N x C x H x W`), distorts and
/// decodes. Every distortion's randomness is drawn from `rng`.
pub fn generator_forward<T: Real>(
    sess: &mut Session<'_, T>,
    arch: &Architecture,
    host: &Tensor<T>,
    messages: &Tensor<T>,
    distortions: &[Distortion],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<GeneratorForward> {
    let hv = sess.tape.constant(host.clone());
    let mv = sess.tape.constant(messages.clone());
    let emb = embed_graph(sess, arch, hv, mv, alpha)?;
    let noised = distort_batch(&mut sess.tape, emb.watermarked, host, distortions, rng)?;
    let logits = decoder_graph(sess, DECODER, arch, noised)?;
    let l_e = sess.tape.mse(hv, emb.watermarked)?;
    let l_d = sess.tape.mse(mv, logits)?;
    Ok(GeneratorForward {
        watermarked: emb.watermarked,
        noised,
        logits,
        l_e,
        l_d,
    })
}

/// Adds the adversarial term and the weighted total; returns `(l_ad, total)`.
/// Discriminator parameters must be bindable in `sess`.
pub fn generator_objective<T: Real>(
    sess: &mut Session<'_, T>,
    fwd: &GeneratorForward,
    lambdas: Lambdas,
    paper_literal: bool,
) -> Result<(Var, Var)> {
    let logits = discriminator_graph(sess, fwd.watermarked)?;
    let l_ad = adversarial_graph(&mut sess.tape, logits, paper_literal);
    let a = sess.tape.scale(fwd.l_e, T::from_f64(lambdas[0]));
    let b = sess.tape.scale(fwd.l_d, T::from_f64(lambdas[1]));
    let c = sess.tape.scale(l_ad, T::from_f64(lambdas[2]));
    let ab = sess.tape.add(a, b)?;
    let total = sess.tape.add(ab, c)?;
    Ok((l_ad, total))
}

fn messages_tensor<T: Real>(messages: &[WatermarkMessage], l: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(messages.len() * l);
    for m in messages {
        if m.len() != l {
            return Err(Error::MessageLength {
                expected: l,
                actual: m.len(),
            });
        }
        data.extend(m.as_reals::<T>());
    }
    Ok(Tensor::from_vec(&[messages.len(), l], data)?)
}

fn scalar(sess: &Session<'_, f32>, v: Var) -> f64 {
    sess.tape.value(v).data()[0] as f64
}

/// Gradients of the session's leaves, by parameter name.
fn collect_grads(sess: &Session<'_, f32>, loss: Var) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut grads = sess.tape.backward(loss)?;
    Ok(sess
        .leaves()
        .iter()
        .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
        .collect())
}

fn adam_step(opt: &mut Adam<f32>, store: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)]) -> Result<()> {
    opt.begin_step();
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        opt.update(name, p.data_mut(), g.data());
    }
    Ok(())
}

/// Mutable training state: generator and discriminator parameters, their
/// optimizers and the random stream.
pub struct Trainer {
    config: TrainConfig,
    arch: Architecture,
    generator: ParamStore<f32>,
    discriminator: ParamStore<f32>,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let bundle = make_variant(config)?;
        Self::from_bundle(config, bundle)
    }

    /// Starts from existing parameters (for example a loaded checkpoint).
    pub fn from_bundle(config: &TrainConfig, bundle: ModelBundle) -> Result<Self> {
        let config = validate_config(config.clone())?;
        if bundle.arch != Architecture::from_config(&config) {
            return Err(Error::Config("bundle architecture differs from config".into()));
        }
        let mut generator = bundle.params;
        let discriminator = generator.split_prefix(&format!("{DISCRIMINATOR}."));
        let adam = AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep the data/noise stream apart from the initialization stream
        rng.set_stream(1);
        Ok(Self {
            arch: bundle.arch,
            config,
            generator,
            discriminator,
            gen_opt: Adam::new(adam),
            disc_opt: Adam::new(adam),
            rng,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Current parameters as a bundle (canonical order).
    pub fn bundle(&self) -> ModelBundle {
        let mut params = self.generator.clone();
        params.absorb(self.discriminator.clone());
        ModelBundle {
            arch: self.arch.clone(),
            params,
        }
    }

    pub fn generator_params(&self) -> &ParamStore<f32> {
        &self.generator
    }

    pub fn discriminator_params(&self) -> &ParamStore<f32> {
        &self.discriminator
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            bundle: self.bundle(),
            rng_state: rng_state_bytes(&self.rng),
        }
    }

    /// Draws one concrete distortion per image from the configured spec.
    pub fn sample_distortions(&mut self, n: usize) -> Result<Vec<Distortion>> {
        sample_distortions(&self.config.noise, n, &mut self.rng)
    }

    /// One discriminator update followed by one generator update, with
    /// noise parameters sampled from the configured spec.
    pub fn train_step(&mut self, hosts: &[&ImageArray], messages: &[WatermarkMessage], lambdas: Lambdas) -> Result<LossReport> {
        let distortions = self.sample_distortions(hosts.len())?;
        self.train_step_with(hosts, messages, &distortions, lambdas)
    }

    pub fn train_step_with(
        &mut self,
        hosts: &[&ImageArray],
        messages: &[WatermarkMessage],
        distortions: &[Distortion],
        lambdas: Lambdas,
    ) -> Result<LossReport> {
        if hosts.len() != messages.len() || hosts.is_empty() {
            return Err(Error::shape(format!("{} images vs {} messages", hosts.len(), messages.len())));
        }
        for h in hosts {
            let (c, hh, w) = h.dims();
            if (c, hh, w) != self.config.image_dims() {
                return Err(Error::shape(format!("image {c}x{hh}x{w} does not match config")));
            }
        }
        let host = ImageArray::batch::<f32>(hosts)?;
        let msgs = messages_tensor::<f32>(messages, self.config.l)?;
        let literal = self.config.paper_literal_gan;
        let arch = self.arch.clone();
        let prefixes = arch.generator_prefixes();

        let mut gen_sess = Session::with_grads(&self.generator, Mode::Train, &prefixes);
        let fwd = generator_forward(&mut gen_sess, &arch, &host, &msgs, distortions, self.config.alpha, &mut self.rng)?;
        let watermarked = gen_sess.tape.value(fwd.watermarked).clone();

        // discriminator step on detached images
        let (l_dis, disc_grads, disc_running) = {
            let mut ds = Session::with_grads(&self.discriminator, Mode::Train, &[DISCRIMINATOR]);
            let em = ds.tape.constant(watermarked.clone());
            let ho = ds.tape.constant(host.clone());
            let le = discriminator_graph(&mut ds, em)?;
            let lh = discriminator_graph(&mut ds, ho)?;
            let loss = discriminator_graph_loss(&mut ds.tape, le, lh, literal)?;
            (scalar(&ds, loss), collect_grads(&ds, loss)?, ds.take_running_updates())
        };
        if !l_dis.is_finite() {
            return Err(self.non_finite(format!("discriminator loss {l_dis}")));
        }

        // generator step against the freshly updated discriminator; its
        // batch statistics from this pass are not kept
        let updated_disc = {
            let mut d = self.discriminator.clone();
            adam_step(&mut self.disc_opt, &mut d, &disc_grads)?;
            apply_running_updates(&mut d, &disc_running, BN_MOMENTUM)?;
            d
        };
        gen_sess.bind_constants(&updated_disc, &format!("{DISCRIMINATOR}."));
        let (l_ad, total) = generator_objective(&mut gen_sess, &fwd, lambdas, literal)?;
        let report_total = scalar(&gen_sess, total);
        let (l_e, l_d, l_ad) = (scalar(&gen_sess, fwd.l_e), scalar(&gen_sess, fwd.l_d), scalar(&gen_sess, l_ad));
        if ![report_total, l_e, l_d, l_ad].iter().all(|v| v.is_finite()) {
            return Err(self.non_finite(format!("l_e {l_e}, l_d {l_d}, l_ad {l_ad}")));
        }
        let logits = gen_sess.tape.value(fwd.logits).clone();
        let gen_grads = collect_grads(&gen_sess, total)?;
        let gen_running: Vec<_> = gen_sess
            .take_running_updates()
            .into_iter()
            .filter(|u| !u.prefix.starts_with(DISCRIMINATOR))
            .collect();
        drop(gen_sess);

        self.discriminator = updated_disc;
        adam_step(&mut self.gen_opt, &mut self.generator, &gen_grads)?;
        apply_running_updates(&mut self.generator, &gen_running, BN_MOMENTUM)?;
        self.steps += 1;

        let l = self.config.l;
        let mut correct = 0usize;
        for (i, m) in messages.iter().enumerate() {
            for (j, &b) in m.bits().iter().enumerate() {
                correct += usize::from(u8::from(logits.data()[i * l + j] > 0.5) == b);
            }
        }
        let mut psnr_sum = 0.0;
        for (i, h) in hosts.iter().enumerate() {
            let wm = ImageArray::from_tensor(&watermarked.unstack()[i], ImageRole::Watermarked)?;
            psnr_sum += psnr(h, &wm)?;
        }
        Ok(LossReport {
            l_e,
            l_d,
            l_ad,
            l_dis,
            total: report_total,
            lambdas,
            bit_accuracy: correct as f64 / (messages.len() * l) as f64,
            psnr: psnr_sum / hosts.len() as f64,
        })
    }

    fn non_finite(&self, detail: String) -> Error {
        Error::NonFinite {
            epoch: self.epoch,
            step: self.steps,
            detail,
        }
    }

    /// One pass over `dataset` in a freshly shuffled order with random
    /// messages, using the epoch's loss weights.
    pub fn run_epoch(&mut self, dataset: &[ImageArray]) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let lambdas = lambda_schedule(self.epoch, &self.config);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let hosts: Vec<&ImageArray> = chunk.iter().map(|&i| &dataset[i]).collect();
            let messages: Vec<WatermarkMessage> =
                (0..chunk.len()).map(|_| WatermarkMessage::random(self.config.l, &mut self.rng)).collect();
            let r = self.train_step(&hosts, &messages, lambdas)?;
            for (s, v) in sums.iter_mut().zip([r.l_e, r.l_d, r.l_ad, r.l_dis, r.psnr, r.bit_accuracy]) {
                *s += v;
            }
            batches += 1;
        }
        let mean = |i: usize| sums[i] / batches as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            l_e: mean(0),
            l_d: mean(1),
            l_ad: mean(2),
            l_dis: mean(3),
            psnr_train: mean(4),
            bitacc_train: mean(5),
            lambdas,
        };
        self.epoch += 1;
        Ok(metrics)
    }
}

/// One concrete distortion per image, sampled from `spec`.
pub fn sample_distortions(spec: &NoiseSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<Distortion>> {
    (0..n).map(|_| sample_training_spec(spec, rng)?.concrete()).collect()
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    /// Checkpoint rewritten after every epoch.
    pub checkpoint: PathBuf,
    /// Metrics log, one JSON object per line.
    pub metrics: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.dewm"),
            metrics: dir.join("metrics.jsonl"),
        }
    }
}

/// Result of a full training run.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs `config.epochs` epochs over `dataset`. With `outputs`, the metrics
/// log is written line by line and the checkpoint after every epoch.
pub fn train(config: &TrainConfig, dataset: &[ImageArray], outputs: Option<&TrainOutputs>) -> Result<TrainRun> {
    let config = validate_config(config.clone())?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    for (i, img) in dataset.iter().enumerate() {
        if img.dims() != config.image_dims() {
            return Err(Error::Dataset(format!(
                "image {i} is {:?}, config expects {:?}",
                img.dims(),
                config.image_dims()
            )));
        }
    }
    let mut trainer = Trainer::new(&config)?;
    let mut log = match outputs {
        Some(o) => Some(File::create(&o.metrics)?),
        None => None,
    };
    let mut metrics = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let m = trainer.run_epoch(dataset)?;
        log::info!(
            "epoch {} l_e {:.6} l_d {:.6} psnr {:.2} bitacc {:.4}",
            m.epoch,
            m.l_e,
            m.l_d,
            m.psnr_train,
            m.bitacc_train
        );
        if let (Some(f), Some(o)) = (log.as_mut(), outputs) {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
            f.flush()?;
            trainer.checkpoint().save(&o.checkpoint)?;
        }
        metrics.push(m);
    }
    Ok(TrainRun {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::nn::GUIDE_DECODER;
    use crate::params::ParamKind;

    fn config() -> TrainConfig {
        TrainConfig {
            h: 16,
            w: 16,
            l: 8,
            channels: 8,
            batch_size: 2,
            epochs: 2,
            phase_switch_epoch: 1,
            ..TrainConfig::default()
        }
    }

    fn images(n: usize) -> Vec<ImageArray> {
        (0..n)
            .map(|i| {
                let data = (0..3 * 256).map(|k| ((k * (5 + 2 * i) + i) % 89) as f32 / 89.0).collect();
                ImageArray::new(3, 16, 16, data, ImageRole::Host).unwrap()
            })
            .collect()
    }

    fn messages(n: usize) -> Vec<WatermarkMessage> {
        (0..n)
            .map(|i| WatermarkMessage::new((0..8).map(|j| ((i + j * 3) % 2) as u8).collect()).unwrap())
            .collect()
    }

    fn trainable(store: &ParamStore<f32>, prefix: &str) -> Vec<(String, Vec<f32>)> {
        store
            .iter()
            .filter(|(name, e)| name.starts_with(prefix) && e.kind == ParamKind::Trainable)
            .map(|(name, e)| (name.to_string(), e.value.data().to_vec()))
            .collect()
    }

    fn step(trainer: &mut Trainer, lambdas: Lambdas) -> LossReport {
        let imgs = images(2);
        let hosts: Vec<&ImageArray> = imgs.iter().collect();
        trainer.train_step(&hosts, &messages(2), lambdas).unwrap()
    }

    #[test]
    fn total_is_the_weighted_sum_of_the_terms() {
        let mut trainer = Trainer::new(&config()).unwrap();
        let lambdas = [2.0, 3.0, 0.5];
        let r = step(&mut trainer, lambdas);
        let expected = 2.0 * r.l_e + 3.0 * r.l_d + 0.5 * r.l_ad;
        assert!((r.total - expected).abs() < 1e-5 * expected.abs().max(1.0), "{} vs {expected}", r.total);
        assert!(r.l_dis > 0.0 && (0.0..=1.0).contains(&r.bit_accuracy));
    }

    #[test]
    fn zero_weights_leave_the_generator_untouched_but_train_the_discriminator() {
        let mut trainer = Trainer::new(&config()).unwrap();
        let gen_before = trainable(trainer.generator_params(), "");
        let disc_before = trainable(trainer.discriminator_params(), DISCRIMINATOR);
        step(&mut trainer, [0.0, 0.0, 0.0]);
        assert_eq!(trainable(trainer.generator_params(), ""), gen_before);
        assert_ne!(trainable(trainer.discriminator_params(), DISCRIMINATOR), disc_before);
    }

    #[test]
    fn message_loss_never_touches_the_discriminator_through_the_generator_step() {
        let mut trainer = Trainer::new(&config()).unwrap();
        let disc_before = trainable(trainer.discriminator_params(), DISCRIMINATOR);
        let mut reference = Trainer::new(&config()).unwrap();
        step(&mut trainer, [0.0, 1.0, 0.0]);
        step(&mut reference, [0.0, 0.0, 0.0]);
        // both discriminators took the same single update
        assert_eq!(
            trainable(trainer.discriminator_params(), DISCRIMINATOR),
            trainable(reference.discriminator_params(), DISCRIMINATOR)
        );
        assert_ne!(trainable(trainer.discriminator_params(), DISCRIMINATOR), disc_before);
    }

    #[test]
    fn image_loss_trains_the_shared_decoder_only_when_it_guides() {
        let mut shared = Trainer::new(&config()).unwrap();
        let before = trainable(shared.generator_params(), DECODER);
        step(&mut shared, [1.0, 0.0, 0.0]);
        assert_ne!(trainable(shared.generator_params(), DECODER), before);

        let split_cfg = TrainConfig {
            variant: Variant::DeAEndB,
            ..config()
        };
        let mut split = Trainer::new(&split_cfg).unwrap();
        let dec = trainable(split.generator_params(), "decoder.");
        let guide = trainable(split.generator_params(), GUIDE_DECODER);
        step(&mut split, [1.0, 0.0, 0.0]);
        assert_eq!(trainable(split.generator_params(), "decoder."), dec);
        assert_ne!(trainable(split.generator_params(), GUIDE_DECODER), guide);
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let data = images(4);
        let a = train(&config(), &data, None).unwrap();
        let b = train(&config(), &data, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint.bundle, b.checkpoint.bundle);
        let c = train(&TrainConfig { seed: 9, ..config() }, &data, None).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn loss_weights_switch_at_the_phase_boundary() {
        let run = train(&config(), &images(2), None).unwrap();
        let cfg = config();
        assert_eq!(run.metrics[0].lambdas, cfg.lambda_phase1);
        assert_eq!(run.metrics[1].lambdas, cfg.lambda_phase2);
        assert_eq!(run.checkpoint.epoch, 2);
    }

    #[test]
    fn writes_metrics_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs::in_dir(dir.path());
        let run = train(&config(), &images(2), Some(&outputs)).unwrap();
        let log = std::fs::read_to_string(&outputs.metrics).unwrap();
        let parsed: Vec<EpochMetrics> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, run.metrics);
        let loaded = Checkpoint::load(&outputs.checkpoint).unwrap();
        assert_eq!(loaded.bundle, run.checkpoint.bundle);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let mut trainer = Trainer::new(&config()).unwrap();
        let imgs = images(2);
        let hosts: Vec<&ImageArray> = imgs.iter().collect();
        assert!(trainer.train_step(&hosts, &messages(1), [1.0, 1.0, 0.0]).is_err());
        assert!(train(&config(), &[], None).is_err());
    }

    #[test]
    fn message_loss_falls_tenfold_on_a_fixed_pair() {
        let mut trainer = Trainer::new(&config()).unwrap();
        let imgs = images(1);
        let hosts = [&imgs[0]];
        let msg = messages(1);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..500 {
            let r = trainer.train_step(&hosts, &msg, [1.0, 10.0, 0.0]).unwrap();
            first.get_or_insert(r.l_d);
            last = r.l_d;
        }
        let first = first.unwrap();
        assert!(last * 10.0 <= first, "l_d {first} -> {last}");
    }
}
