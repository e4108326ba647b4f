//! Image quality and extraction metrics.

use crate::error::{Error, Result};
use crate::types::{ImageArray, WatermarkMessage};

/// PSNR cap used when the quantized images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// PSNR in dB between the 8-bit quantizations of `a` and `b`.
pub fn psnr(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("psnr of {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (qa, qb) = (a.to_u8(), b.to_u8());
    let sse: f64 = qa
        .iter()
        .zip(&qb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse / qa.len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(sent: &WatermarkMessage, received: &WatermarkMessage) -> Result<f64> {
    if sent.len() != received.len() {
        return Err(Error::MessageLength {
            expected: sent.len(),
            actual: received.len(),
        });
    }
    let same = sent.bits().iter().zip(received.bits()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / sent.len() as f64)
}
