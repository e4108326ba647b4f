//! Value types shared across the crate: images, messages and latent features.

use std::fmt;

use dewm_autograd::{Real, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageRole {
    Host,
    Watermarked,
    Distorted,
}

/// A `C x H x W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    role: ImageRole,
}

impl ImageArray {
    /// Validates finiteness, the `[0, 1]` range and that `H`, `W` are
    /// multiples of 8.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, role: ImageRole) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Image("image needs at least one channel".into()));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
            return Err(Error::Image(format!("{height}x{width} is not a non-empty multiple of 8")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Image(format!(
                "expected {} values for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Image(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            role,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, role: ImageRole) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width], role)
    }

    /// Builds an image from a `C x H x W` (or `1 x C x H x W`) tensor,
    /// clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, role: ImageRole) -> Result<Self> {
        let dims: Vec<usize> = match t.shape() {
            [c, h, w] => vec![*c, *h, *w],
            [1, c, h, w] => vec![*c, *h, *w],
            other => return Err(Error::shape(format!("cannot view {other:?} as an image"))),
        };
        let data = t.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Self::new(dims[0], dims[1], dims[2], data, role)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn role(&self) -> ImageRole {
        self.role
    }

    pub fn with_role(mut self, role: ImageRole) -> Self {
        self.role = role;
        self
    }

    /// `1 x C x H x W` tensor in the requested precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.channels, self.height, self.width], |i| T::from_f64(self.data[i] as f64))
    }

    /// Stacks same-shaped images into an `N x C x H x W` batch.
    pub fn batch<T: Real>(images: &[&ImageArray]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::shape(format!("batch mixes {:?} and {:?}", dims, img.dims())));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::from_vec(&[images.len(), dims.0, dims.1, dims.2], data)?)
    }

    /// 8-bit quantized values, `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8], role: ImageRole) -> Result<Self> {
        Self::new(channels, height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect(), role)
    }

    /// Re-quantizes through 8 bits, as writing and re-reading a PNG would.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Self {
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            ..self.clone()
        }
    }
}

/// An `L`-bit payload.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WatermarkMessage {
    bits: Vec<u8>,
}

impl WatermarkMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Message("message must carry at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Message(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        Self {
            bits: (0..len.max(1)).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    pub fn as_reals<T: Real>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| T::from_f64(b as f64)).collect()
    }

    /// Big-endian bit order. The string must have exactly `ceil(len / 4)`
    /// digits; padding bits of the last digit are dropped.
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Message("message length must be at least 1".into()));
        }
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.trim().chars() {
            let nibble = ch
                .to_digit(16)
                .ok_or_else(|| Error::Message(format!("'{ch}' is not a hex digit")))?;
            bits.extend((0..4).rev().map(|k| ((nibble >> k) & 1) as u8));
        }
        if bits.len() != len.div_ceil(4) * 4 {
            return Err(Error::MessageLength {
                expected: len,
                actual: bits.len(),
            });
        }
        bits.truncate(len);
        Ok(Self { bits })
    }

    /// Upper-case hex, zero-padding the last nibble when `L` is not a
    /// multiple of 4.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|chunk| {
                let v = chunk.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | ((b as u32) << (3 - i)));
                char::from_digit(v, 16).unwrap().to_ascii_uppercase()
            })
            .collect()
    }
}

impl fmt::Display for WatermarkMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Decoder output on the undistorted host: one real value per message bit.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeature {
    values: Vec<f64>,
}

impl LatentFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("latent feature has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hex_expands_big_endian() {
        let m = WatermarkMessage::from_hex("F0", 8).unwrap();
        assert_eq!(m.bits(), &[1, 1, 1, 1, 0, 0, 0, 0]);
        let z = WatermarkMessage::from_hex("E", 3).unwrap();
        assert_eq!(z.bits(), &[1, 1, 1]);
    }

    #[test]
    fn hex_round_trip() {
        let m = WatermarkMessage::from_hex("A5C3", 16).unwrap();
        assert_eq!(m.to_hex(), "A5C3");
    }

    #[test]
    fn hex_errors() {
        assert!(matches!(WatermarkMessage::from_hex("G1", 8), Err(Error::Message(_))));
        assert!(matches!(
            WatermarkMessage::from_hex("F", 8),
            Err(Error::MessageLength { expected: 8, actual: 4 })
        ));
        assert!(matches!(
            WatermarkMessage::from_hex("F00", 8),
            Err(Error::MessageLength { expected: 8, actual: 12 })
        ));
    }

    #[test]
    fn message_rejects_non_binary_bits() {
        assert!(WatermarkMessage::new(vec![0, 2]).is_err());
        assert!(WatermarkMessage::new(vec![]).is_err());
    }

    #[test]
    fn image_validation() {
        assert!(ImageArray::filled(3, 16, 16, 0.5, ImageRole::Host).is_ok());
        assert!(ImageArray::filled(3, 130, 128, 0.5, ImageRole::Host).is_err());
        assert!(ImageArray::filled(3, 8, 8, 1.5, ImageRole::Host).is_err());
        assert!(ImageArray::filled(0, 8, 8, 0.5, ImageRole::Host).is_err());
    }

    #[test]
    fn u8_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(3 * 8 * 8).collect();
        let img = ImageArray::from_u8(3, 8, 8, &bytes, ImageRole::Host).unwrap();
        assert_eq!(img.to_u8(), bytes);
    }

    proptest! {
        #[test]
        fn hex_inverse_on_nibble_aligned_messages(bits in proptest::collection::vec(0u8..2, 1..16usize)
            .prop_map(|mut v| { while v.len() % 4 != 0 { v.push(0); } v })) {
            let m = WatermarkMessage::new(bits.clone()).unwrap();
            let back = WatermarkMessage::from_hex(&m.to_hex(), bits.len()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
