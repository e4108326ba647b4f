//! The shared decoder, the encoder family, the discriminator and the
//! bundle tying them together for each variant.

pub mod layers;
mod session;

use std::sync::Arc;

use dewm_autograd::{Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use session::{apply_running_updates, Mode, RunningUpdate, Session};

use crate::config::{validate_config, TrainConfig, UpsampleMode, Variant};
use crate::error::{Error, Result};
use crate::params::{ParamInfo, ParamKind, ParamStore};
use crate::types::{ImageArray, ImageRole, LatentFeature, WatermarkMessage};
use layers::{conv, conv_bn_relu, init_conv, init_conv_bn_relu, init_linear, init_se_block, linear, se_block};

/// Extraction decoder, present in every variant.
pub const DECODER: &str = "decoder";
/// Separate guidance decoder of the `de_a_end_b` variant.
pub const GUIDE_DECODER: &str = "guide_decoder";
pub const ENCODER: &str = "encoder";
pub const DISCRIMINATOR: &str = "discriminator";

/// Factor applied to the Kaiming-initialized weights of the residual output
/// convolution and the decoder logit layer. Starting both near zero keeps the
/// initial watermark faint and the initial logits small, which lets the
/// encoder and decoder agree on a message code much sooner.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

fn scale_init<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<()> {
    let scale = T::from_f64(OUTPUT_INIT_SCALE);
    for v in store.get_mut(name)?.data_mut() {
        *v *= scale;
    }
    Ok(())
}

/// Everything that fixes parameter names and shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub l: usize,
    pub channels: usize,
    pub variant: Variant,
    pub decoder_unions: usize,
    pub upsample_mode: UpsampleMode,
}

impl Architecture {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            c: config.c,
            h: config.h,
            w: config.w,
            l: config.l,
            channels: config.channels,
            variant: config.variant,
            decoder_unions: config.decoder_unions,
            upsample_mode: config.upsample_mode,
        }
    }

    /// Name prefix of the decoder producing the latent feature, if the
    /// variant has a guidance pass.
    pub fn guide_prefix(&self) -> Option<&'static str> {
        match self.variant {
            Variant::Deend => Some(DECODER),
            Variant::DeAEndB => Some(GUIDE_DECODER),
            Variant::EndBaseline | Variant::EWNd => None,
        }
    }

    /// Prefixes of everything optimized by the generator step.
    pub fn generator_prefixes(&self) -> Vec<&'static str> {
        let mut p = vec![ENCODER, DECODER];
        if self.variant == Variant::DeAEndB {
            p.push(GUIDE_DECODER);
        }
        p
    }

    fn check_image(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if (c, h, w) != (self.c, self.h, self.w) {
            return Err(Error::shape(format!(
                "image {c}x{h}x{w} does not match model {}x{}x{}",
                self.c, self.h, self.w
            )));
        }
        Ok(())
    }

    fn check_message(&self, len: usize) -> Result<()> {
        if len != self.l {
            return Err(Error::MessageLength {
                expected: self.l,
                actual: len,
            });
        }
        Ok(())
    }
}

/// Registers a decoder under `prefix`: stem, three downsampling SE-blocks,
/// `unions - 3` Conv-BN-ReLU units, one SE-block and a linear head.
pub fn build_decoder<T: Real>(store: &mut ParamStore<T>, prefix: &str, arch: &Architecture, rng: &mut impl Rng) -> Result<()> {
    if !(3..=7).contains(&arch.decoder_unions) {
        return Err(Error::Config(format!("decoder_unions {} out of [3,7]", arch.decoder_unions)));
    }
    let ch = arch.channels;
    init_conv_bn_relu(store, &format!("{prefix}.stem"), arch.c, ch, 3, rng);
    for i in 1..=3 {
        init_se_block(store, &format!("{prefix}.down{i}"), ch, rng);
    }
    for i in 1..=arch.decoder_unions - 3 {
        init_conv_bn_relu(store, &format!("{prefix}.union{i}"), ch, ch, 3, rng);
    }
    init_se_block(store, &format!("{prefix}.se"), ch, rng);
    init_linear(store, &format!("{prefix}.head"), arch.l, ch * (arch.h / 8) * (arch.w / 8), rng);
    scale_init(store, &format!("{prefix}.head.weight"))
}

/// Registers the encoder for the architecture's variant and upsampling mode.
pub fn build_encoder<T: Real>(store: &mut ParamStore<T>, arch: &Architecture, rng: &mut impl Rng) -> Result<()> {
    let ch = arch.channels;
    if arch.variant == Variant::EndBaseline {
        init_conv_bn_relu(store, "encoder.block1", arch.c + arch.l, ch, 3, rng);
        for i in 2..=4 {
            init_conv_bn_relu(store, &format!("encoder.block{i}"), ch, ch, 3, rng);
        }
        init_conv(store, "encoder.out", arch.c, ch, 1, true, rng);
        return scale_init(store, "encoder.out.weight");
    }
    let input = if arch.variant == Variant::EWNd { arch.l } else { 2 * arch.l };
    let (h8, w8) = (arch.h / 8, arch.w / 8);
    init_linear(store, "encoder.stem", h8 * w8, input, rng);
    init_conv_bn_relu(store, "encoder.lift", 1, ch, 3, rng);
    for i in 1..=3 {
        let prefix = format!("encoder.up{i}");
        match arch.upsample_mode {
            UpsampleMode::NearestInterp => {}
            UpsampleMode::TransposeConv => {
                let w = crate::params::kaiming(&[ch, ch, 2, 2], ch, rng);
                store.insert(format!("{prefix}.up.weight"), w, ParamKind::Trainable);
            }
            UpsampleMode::Unpool => {
                let cells = ch * (h8 << (i - 1)) * (w8 << (i - 1));
                let locs = Tensor::from_fn(&[cells], |_| T::from_f64(rng.random_range(0..4u8) as f64));
                store.insert(format!("{prefix}.unpool.locations"), locs, ParamKind::Buffer);
            }
        }
        init_conv_bn_relu(store, &prefix, ch, ch, 3, rng);
    }
    init_conv(store, "encoder.out", arch.c, ch, 1, true, rng);
    scale_init(store, "encoder.out.weight")
}

/// Four stride-2 Conv-BN-ReLU blocks, global average pooling, one logit.
pub fn build_discriminator<T: Real>(store: &mut ParamStore<T>, arch: &Architecture, rng: &mut impl Rng) {
    let ch = arch.channels;
    init_conv_bn_relu(store, "discriminator.block1", arch.c, ch, 3, rng);
    for i in 2..=4 {
        init_conv_bn_relu(store, &format!("discriminator.block{i}"), ch, ch, 3, rng);
    }
    init_linear(store, "discriminator.head", 1, ch, rng);
}

/// `N x C x H x W` images to `N x L` decoder outputs.
pub fn decoder_graph<T: Real>(sess: &mut Session<'_, T>, prefix: &str, arch: &Architecture, x: Var) -> Result<Var> {
    let mut y = conv_bn_relu(sess, &format!("{prefix}.stem"), x, 1)?;
    for i in 1..=3 {
        y = se_block(sess, &format!("{prefix}.down{i}"), y, 2)?;
    }
    for i in 1..=arch.decoder_unions - 3 {
        y = conv_bn_relu(sess, &format!("{prefix}.union{i}"), y, 1)?;
    }
    y = se_block(sess, &format!("{prefix}.se"), y, 1)?;
    let n = sess.tape.shape(y)[0];
    let flat: usize = sess.tape.shape(y)[1..].iter().product();
    let y = sess.tape.reshape(y, &[n, flat])?;
    linear(sess, &format!("{prefix}.head"), y)
}

/// Encoder residual `N x C x H x W`. `feature` is the `N x L` latent feature
/// (ignored by variants without guidance); `host` is only read by the
/// encoder-driven baseline.
pub fn encoder_graph<T: Real>(
    sess: &mut Session<'_, T>,
    arch: &Architecture,
    feature: Option<Var>,
    message: Var,
    host: Var,
) -> Result<Var> {
    let n = sess.tape.shape(message)[0];
    if arch.variant == Variant::EndBaseline {
        let m = sess.tape.expand_spatial(message, arch.h, arch.w)?;
        let mut y = sess.tape.concat(&[host, m])?;
        for i in 1..=4 {
            y = conv_bn_relu(sess, &format!("encoder.block{i}"), y, 1)?;
        }
        return conv(sess, "encoder.out", y, 1);
    }
    let input = match (arch.variant, feature) {
        (Variant::EWNd, _) => message,
        (_, Some(f)) => sess.tape.concat(&[f, message])?,
        (_, None) => return Err(Error::shape("guided encoder needs a latent feature")),
    };
    let y = linear(sess, "encoder.stem", input)?;
    let y = sess.tape.reshape(y, &[n, 1, arch.h / 8, arch.w / 8])?;
    let mut y = conv_bn_relu(sess, "encoder.lift", y, 1)?;
    for i in 1..=3 {
        let prefix = format!("encoder.up{i}");
        y = match arch.upsample_mode {
            UpsampleMode::NearestInterp => sess.tape.upsample_nearest2(y)?,
            UpsampleMode::TransposeConv => {
                let w = sess.param(&format!("{prefix}.up.weight"))?;
                sess.tape.conv_transpose2x2(y, w, None)?
            }
            UpsampleMode::Unpool => {
                let locs: Arc<[u8]> = sess
                    .store()
                    .get(&format!("{prefix}.unpool.locations"))?
                    .data()
                    .iter()
                    .map(|v| v.as_f64() as u8)
                    .collect();
                sess.tape.unpool2(y, locs)?
            }
        };
        y = conv_bn_relu(sess, &prefix, y, 1)?;
    }
    conv(sess, "encoder.out", y, 1)
}

/// `N x C x H x W` images to `N x 1` logits.
pub fn discriminator_graph<T: Real>(sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let mut y = x;
    for i in 1..=4 {
        y = conv_bn_relu(sess, &format!("discriminator.block{i}"), y, 2)?;
    }
    let pooled = sess.tape.global_avg_pool(y)?;
    linear(sess, "discriminator.head", pooled)
}

/// Output of the embedding graph.
pub struct Embedded {
    /// Latent feature from the guidance pass, when the variant has one.
    pub feature: Option<Var>,
    pub residual: Var,
    /// `clamp(host + alpha * residual, 0, 1)`, identity gradient.
    pub watermarked: Var,
}

pub fn embed_graph<T: Real>(
    sess: &mut Session<'_, T>,
    arch: &Architecture,
    host: Var,
    message: Var,
    alpha: f64,
) -> Result<Embedded> {
    let feature = match arch.guide_prefix() {
        Some(prefix) => Some(decoder_graph(sess, prefix, arch, host)?),
        None => None,
    };
    let residual = encoder_graph(sess, arch, feature, message, host)?;
    let scaled = sess.tape.scale(residual, T::from_f64(alpha));
    let sum = sess.tape.add(host, scaled)?;
    // Clamp in the forward pass only: a saturated pixel still receives the
    // image-loss gradient that pulls it back into range.
    let clamped = sess.tape.value(sum).map(|v| v.max(T::zero()).min(T::one()));
    let watermarked = sess.tape.straight_through(sum, clamped)?;
    Ok(Embedded {
        feature,
        residual,
        watermarked,
    })
}

/// The networks of one variant and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Real = f32> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

/// Builds and initializes every network of the configured variant from
/// `config.seed`.
pub fn make_variant(config: &TrainConfig) -> Result<ModelBundle> {
    let config = validate_config(config.clone())?;
    let arch = Architecture::from_config(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    build_encoder(&mut params, &arch, &mut rng)?;
    build_decoder(&mut params, DECODER, &arch, &mut rng)?;
    if arch.variant == Variant::DeAEndB {
        build_decoder(&mut params, GUIDE_DECODER, &arch, &mut rng)?;
    }
    build_discriminator(&mut params, &arch, &mut rng);
    Ok(ModelBundle { arch, params })
}

impl<T: Real> ModelBundle<T> {
    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn manifest(&self) -> Vec<ParamInfo> {
        self.params.manifest()
    }

    /// Trainable scalars under a prefix such as `"decoder"`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.params.trainable_count(&format!("{prefix}."))
    }

    fn image_tensor(&self, image: &ImageArray) -> Result<Tensor<T>> {
        let (c, h, w) = image.dims();
        self.arch.check_image(c, h, w)?;
        Ok(image.to_tensor())
    }

    fn message_tensor(&self, message: &WatermarkMessage) -> Result<Tensor<T>> {
        self.arch.check_message(message.len())?;
        Ok(Tensor::from_fn(&[1, message.len()], |i| T::from_f64(message.bits()[i] as f64)))
    }

    /// Raw decoder outputs of the extraction decoder, inference mode.
    pub fn decoder_forward(&self, image: &ImageArray) -> Result<Vec<f64>> {
        self.decoder_forward_with(DECODER, image)
    }

    fn decoder_forward_with(&self, prefix: &str, image: &ImageArray) -> Result<Vec<f64>> {
        let x = self.image_tensor(image)?;
        let mut sess = Session::new(&self.params, Mode::Eval);
        let xv = sess.tape.constant(x);
        let y = decoder_graph(&mut sess, prefix, &self.arch, xv)?;
        Ok(sess.tape.value(y).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Latent feature of the guidance pass; `None` for variants without one.
    pub fn latent_feature(&self, host: &ImageArray) -> Result<Option<LatentFeature>> {
        match self.arch.guide_prefix() {
            Some(prefix) => Ok(Some(LatentFeature::new(self.decoder_forward_with(prefix, host)?)?)),
            None => Ok(None),
        }
    }

    /// Encoder residual `R` as a `1 x C x H x W` tensor, inference mode.
    /// `feature` is required by guided variants and ignored otherwise.
    pub fn encoder_forward(
        &self,
        feature: Option<&LatentFeature>,
        message: &WatermarkMessage,
        host: &ImageArray,
    ) -> Result<Tensor<T>> {
        let m = self.message_tensor(message)?;
        let x = self.image_tensor(host)?;
        let f = match feature {
            Some(f) => {
                self.arch.check_message(f.values().len())?;
                Some(Tensor::from_fn(&[1, f.values().len()], |i| T::from_f64(f.values()[i])))
            }
            None => None,
        };
        let mut sess = Session::new(&self.params, Mode::Eval);
        let mv = sess.tape.constant(m);
        let xv = sess.tape.constant(x);
        let fv = f.map(|f| sess.tape.constant(f));
        let r = encoder_graph(&mut sess, &self.arch, fv, mv, xv)?;
        Ok(sess.tape.value(r).clone())
    }

    /// `clamp(host + alpha * R, 0, 1)` with the guidance pass run on `host`.
    pub fn embed(&self, host: &ImageArray, message: &WatermarkMessage, alpha: f64) -> Result<ImageArray> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {alpha} must be finite and non-negative")));
        }
        let x = self.image_tensor(host)?;
        let m = self.message_tensor(message)?;
        let mut sess = Session::new(&self.params, Mode::Eval);
        let xv = sess.tape.constant(x);
        let mv = sess.tape.constant(m);
        let out = embed_graph(&mut sess, &self.arch, xv, mv, alpha)?;
        ImageArray::from_tensor(sess.tape.value(out.watermarked), ImageRole::Watermarked)
    }

    /// Bits `logit > 0.5`, together with the raw outputs.
    pub fn extract_with_logits(&self, image: &ImageArray) -> Result<(WatermarkMessage, Vec<f64>)> {
        let logits = self.decoder_forward(image)?;
        Ok((threshold(&logits)?, logits))
    }

    pub fn extract(&self, image: &ImageArray) -> Result<WatermarkMessage> {
        Ok(self.extract_with_logits(image)?.0)
    }

    /// Probability that `image` carries a watermark, inference mode.
    pub fn discriminator_forward(&self, image: &ImageArray) -> Result<f64> {
        let x = self.image_tensor(image)?;
        let mut sess = Session::new(&self.params, Mode::Eval);
        let xv = sess.tape.constant(x);
        let logit = discriminator_graph(&mut sess, xv)?;
        let p = sess.tape.sigmoid(logit);
        Ok(sess.tape.value(p).data()[0].as_f64())
    }
}

/// Bit `i` is 1 iff `logits[i] > 0.5`.
pub fn threshold(logits: &[f64]) -> Result<WatermarkMessage> {
    WatermarkMessage::new(logits.iter().map(|&v| u8::from(v > 0.5)).collect())
}
