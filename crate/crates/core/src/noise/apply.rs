use dewm_autograd::ops::spatial::gaussian_taps;
use dewm_autograd::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::jpeg;
use super::median::median_filter;
use super::spec::{sample_training_spec, Distortion, NoiseSpec};
use crate::error::{Error, Result};
use crate::types::{ImageArray, ImageRole};

/// Everything a distortion needs besides the watermarked image itself.
#[derive(Clone, Debug)]
pub struct DistortionContext {
    /// Source of replacement pixels for cropout and dropout.
    pub host: ImageArray,
    pub rng_seed: u64,
    /// Training draws range-valued parameters; evaluation requires points.
    pub training: bool,
}

/// Applies one distortion to one watermarked image.
pub fn apply_noise(spec: &NoiseSpec, watermarked: &ImageArray, ctx: &DistortionContext) -> Result<ImageArray> {
    if ctx.host.dims() != watermarked.dims() {
        return Err(Error::shape(format!(
            "host {:?} vs watermarked {:?}",
            ctx.host.dims(),
            watermarked.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng_seed);
    let concrete = if ctx.training {
        sample_training_spec(spec, &mut rng)?
    } else {
        spec.clone()
    };
    let distortion = concrete.concrete()?;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(watermarked.to_tensor());
    let host = ctx.host.to_tensor::<f64>();
    let y = distort_batch(&mut tape, x, &host, &[distortion], &mut rng)?;
    ImageArray::from_tensor(tape.value(y), ImageRole::Distorted)
}

/// Distorts every image of an `N x C x H x W` batch. `distortions` holds one
/// entry per image, or a single entry shared by all. Random choices are drawn
/// from `rng` image by image, so the result is reproducible from its seed.
pub fn distort_batch<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    host: &Tensor<T>,
    distortions: &[Distortion],
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || host.shape() != shape.as_slice() {
        return Err(Error::shape(format!("batch {shape:?} vs host {:?}", host.shape())));
    }
    let n = shape[0];
    if distortions.len() != n && distortions.len() != 1 {
        return Err(Error::shape(format!("{} distortions for a batch of {n}", distortions.len())));
    }
    // One coin per mini-batch decides real or simulated JPEG for jpeg_mbrs.
    let mbrs_real = if distortions.iter().any(|d| matches!(d, Distortion::JpegMbrs { .. })) {
        rng.random_bool(0.5)
    } else {
        false
    };
    if n == 1 {
        return distort_one(tape, x, host, distortions[0], mbrs_real, rng);
    }
    let mut one = shape.clone();
    one[0] = 1;
    let hosts = host
        .unstack()
        .into_iter()
        .map(|h| h.reshape(&one))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut parts = Vec::with_capacity(n);
    for (i, h) in hosts.iter().enumerate() {
        let xi = tape.select(x, i)?;
        let d = distortions[if distortions.len() == 1 { 0 } else { i }];
        parts.push(distort_one(tape, xi, h, d, mbrs_real, rng)?);
    }
    Ok(tape.cat0(&parts)?)
}

/// Distorts a single `1 x C x H x W` image.
pub fn distort_one<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    host: &Tensor<T>,
    distortion: Distortion,
    mbrs_real: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let hw = h * w;
    Ok(match distortion {
        Distortion::Identity => x,
        Distortion::Cropout { ratio } => {
            let replaced = cropout_mask(h, w, ratio, rng);
            replace_with_host(tape, x, host, c, &replaced)?
        }
        Distortion::Dropout { ratio } => {
            let replaced: Vec<bool> = (0..hw).map(|_| rng.random::<f64>() < ratio).collect();
            replace_with_host(tape, x, host, c, &replaced)?
        }
        Distortion::GaussianNoise { variance } => {
            if variance == 0.0 {
                return Ok(x);
            }
            let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Noise(e.to_string()))?;
            let noise = Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(rng)));
            let noise = tape.constant(noise);
            let noisy = tape.add(x, noise)?;
            tape.clamp(noisy, T::zero(), T::one())
        }
        Distortion::SaltPepper { ratio } => {
            let mut value = tape.value(x).clone();
            for i in 0..hw {
                if rng.random::<f64>() < ratio {
                    let v = if rng.random_bool(0.5) { T::one() } else { T::zero() };
                    for ch in 0..c {
                        value.data_mut()[ch * hw + i] = v;
                    }
                }
            }
            tape.straight_through(x, value)?
        }
        Distortion::GaussianBlur { sigma } => {
            if sigma <= 0.0 {
                return Ok(x);
            }
            let taps = gaussian_taps(sigma).into_iter().map(T::from_f64).collect();
            let blurred = tape.separable_blur(x, taps)?;
            tape.clamp(blurred, T::zero(), T::one())
        }
        Distortion::MedianBlur { window } => {
            if window <= 1 {
                return Ok(x);
            }
            let value = median_filter(tape.value(x), window);
            tape.straight_through(x, value)?
        }
        Distortion::JpegSimulated { quality } => jpeg::simulate(tape, x, quality)?,
        Distortion::JpegReal { quality } => real_jpeg(tape, x, quality)?,
        Distortion::JpegMbrs { quality } => {
            if mbrs_real {
                real_jpeg(tape, x, quality)?
            } else {
                jpeg::simulate(tape, x, quality)?
            }
        }
    })
}

fn real_jpeg<T: Real>(tape: &mut Tape<T>, x: Var, quality: u8) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let data: Vec<f32> = tape.value(x).data().iter().map(|v| v.as_f64() as f32).collect();
    let out = jpeg::real_roundtrip(&data, shape[1], shape[2], shape[3], quality)?;
    let value = Tensor::from_vec(&shape, out.into_iter().map(|v| T::from_f64(v as f64)).collect())?;
    Ok(tape.straight_through(x, value)?)
}

/// `out = x` where `replaced` is false and `host` where it is true; the mask is
/// per pixel and shared across channels.
fn replace_with_host<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    host: &Tensor<T>,
    channels: usize,
    replaced: &[bool],
) -> Result<Var> {
    let hw = replaced.len();
    let keep = Tensor::from_fn(tape.shape(x), |i| if replaced[i % hw] { T::zero() } else { T::one() });
    let fill = Tensor::from_fn(host.shape(), |i| if replaced[i % hw] { host.data()[i] } else { T::zero() });
    debug_assert_eq!(keep.len(), channels * hw);
    let keep = tape.constant(keep);
    let fill = tape.constant(fill);
    let kept = tape.mul(x, keep)?;
    Ok(tape.add(kept, fill)?)
}

/// Row-major `H x W` mask of the cropout rectangle (true = replaced by host).
/// The rectangle covers `ratio` of the area, rounded to whole pixels, with an
/// aspect ratio drawn from `[0.5, 2]` and a uniformly random position.
pub fn cropout_mask(h: usize, w: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let total = h * w;
    let target = (ratio * total as f64).round() as usize;
    if target == 0 {
        return vec![false; total];
    }
    if target >= total {
        return vec![true; total];
    }
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let rh = ((target as f64 * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((target as f64 / rh as f64).round() as usize).clamp(1, w);
    let rh = ((target as f64 / rw as f64).round() as usize).clamp(1, h);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut mask = vec![false; total];
    for y in top..top + rh {
        for x in left..left + rw {
            mask[y * w + x] = true;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseKind, ParamValue};

    fn image(seed: u64, value_shift: f32) -> ImageArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 16 * 16).map(|_| (rng.random::<f32>() * 0.8 + value_shift).min(1.0)).collect();
        ImageArray::new(3, 16, 16, data, ImageRole::Watermarked).unwrap()
    }

    fn ctx(host: &ImageArray, seed: u64) -> DistortionContext {
        DistortionContext {
            host: host.clone(),
            rng_seed: seed,
            training: false,
        }
    }

    fn run(kind: NoiseKind, p: f64, wm: &ImageArray, host: &ImageArray) -> ImageArray {
        apply_noise(&NoiseSpec::point(kind, p), wm, &ctx(host, 9)).unwrap()
    }

    #[test]
    fn boundary_parameters_are_exact() {
        let (wm, host) = (image(1, 0.1), image(2, 0.0));
        assert_eq!(apply_noise(&NoiseSpec::identity(), &wm, &ctx(&host, 0)).unwrap().data(), wm.data());
        assert_eq!(run(NoiseKind::Cropout, 0.0, &wm, &host).data(), wm.data());
        assert_eq!(run(NoiseKind::Cropout, 1.0, &wm, &host).data(), host.data());
        assert_eq!(run(NoiseKind::Dropout, 0.0, &wm, &host).data(), wm.data());
        assert_eq!(run(NoiseKind::Dropout, 1.0, &wm, &host).data(), host.data());
        assert_eq!(run(NoiseKind::GaussianNoise, 0.0, &wm, &host).data(), wm.data());
        assert_eq!(run(NoiseKind::MedianBlur, 1.0, &wm, &host).data(), wm.data());
        assert_eq!(run(NoiseKind::SaltPepper, 0.0, &wm, &host).data(), wm.data());
        assert_eq!(run(NoiseKind::GaussianBlur, 0.0, &wm, &host).data(), wm.data());
    }

    #[test]
    fn every_kind_stays_in_unit_range_and_is_deterministic() {
        let (wm, host) = (image(3, 0.2), image(4, 0.0));
        for kind in NoiseKind::ALL {
            let spec = NoiseSpec::new(kind);
            let training = DistortionContext {
                training: true,
                ..ctx(&host, 11)
            };
            let a = apply_noise(&spec, &wm, &training).unwrap();
            let b = apply_noise(&spec, &wm, &training).unwrap();
            assert_eq!(a, b, "{kind}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        }
    }

    #[test]
    fn dropout_fraction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let host = Tensor::<f64>::zeros(&[1, 3, 128, 128]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 128, 128], 1.0));
        let y = distort_batch(&mut tape, x, &host, &[Distortion::Dropout { ratio: 0.4 }], &mut rng).unwrap();
        let replaced = tape.value(y).data()[..128 * 128].iter().filter(|&&v| v == 0.0).count();
        let frac = replaced as f64 / (128.0 * 128.0);
        assert!((frac - 0.4).abs() < 0.02, "{frac}");
        // the same pixels are replaced in every channel
        let d = tape.value(y).data();
        assert_eq!(&d[..128 * 128], &d[128 * 128..2 * 128 * 128]);
    }

    #[test]
    fn cropout_rectangle_area_tracks_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for ratio in [0.1, 0.25, 0.4, 0.5, 0.9] {
            for _ in 0..20 {
                let mask = cropout_mask(32, 32, ratio, &mut rng);
                let area = mask.iter().filter(|&&m| m).count() as f64 / 1024.0;
                assert!((area - ratio).abs() < 0.06, "ratio {ratio} area {area}");
                // replaced pixels form one rectangle: rows touched x cols touched == count
                let rows: Vec<usize> = (0..32).filter(|r| mask[r * 32..r * 32 + 32].iter().any(|&m| m)).collect();
                let cols: Vec<usize> = (0..32).filter(|c| (0..32).any(|r| mask[r * 32 + c])).collect();
                assert_eq!(rows.len() * cols.len(), mask.iter().filter(|&&m| m).count());
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let wm = ImageArray::filled(3, 16, 16, 0.3, ImageRole::Watermarked).unwrap();
        let out = run(NoiseKind::GaussianBlur, 2.0, &wm, &wm);
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn jpeg_flavours_agree_on_mid_gray() {
        let wm = ImageArray::filled(3, 16, 16, 128.0 / 255.0, ImageRole::Watermarked).unwrap();
        let sim = run(NoiseKind::JpegSimulated, 50.0, &wm, &wm);
        let real = run(NoiseKind::JpegReal, 50.0, &wm, &wm);
        assert_eq!(sim.to_u8(), real.to_u8());
        assert_eq!(sim.data(), wm.data());
    }

    #[test]
    fn salt_pepper_sets_whole_pixels_to_extremes() {
        let (wm, host) = (image(7, 0.1), image(8, 0.0));
        let out = run(NoiseKind::SaltPepper, 0.3, &wm, &host);
        let hw = 256;
        let mut flipped = 0;
        for i in 0..hw {
            if out.data()[i] != wm.data()[i] {
                flipped += 1;
                let v = out.data()[i];
                assert!(v == 0.0 || v == 1.0);
                assert_eq!(out.data()[hw + i], v);
                assert_eq!(out.data()[2 * hw + i], v);
            }
        }
        assert!(flipped > 30 && flipped < 130, "{flipped}");
    }

    #[test]
    fn range_spec_requires_training_mode() {
        let (wm, host) = (image(1, 0.0), image(2, 0.0));
        let spec = NoiseSpec::with_param(NoiseKind::GaussianNoise, ParamValue::Range([0.001, 0.04]));
        assert!(apply_noise(&spec, &wm, &ctx(&host, 1)).is_err());
        let train = DistortionContext {
            training: true,
            ..ctx(&host, 1)
        };
        assert!(apply_noise(&spec, &wm, &train).is_ok());
    }

    #[test]
    fn batch_gets_one_distortion_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let host = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.5));
        let ds = [Distortion::Identity, Distortion::Cropout { ratio: 1.0 }];
        let y = distort_batch(&mut tape, x, &host, &ds, &mut rng).unwrap();
        let d = tape.value(y).data();
        assert!(d[..192].iter().all(|&v| v == 0.5));
        assert!(d[192..].iter().all(|&v| v == 0.0));
    }
}
