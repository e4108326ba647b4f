//! JPEG in two flavours: a differentiable simulation built from tape
//! operations, and a real baseline codec round trip used as reference.

use dewm_autograd::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Annex K luminance table, row-major (not zig-zag).
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, row-major.
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// JFIF RGB to YCbCr without the chroma offset (applied to level-shifted RGB).
pub const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_735_891_647_856_1, -0.331_264_108_352_143_9, 0.5],
    [0.5, -0.418_687_589_158_345_2, -0.081_312_410_841_654_8],
];

/// Scales a base table by the usual libjpeg quality rule.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &v) in out.iter_mut().zip(base) {
        *o = ((v as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

/// Exact matrix inverse of a 3x3 matrix.
pub fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

/// Quantization step per coefficient for a `N x C x H x W` tensor: luma
/// table on channel 0, chroma tables on the rest.
fn quant_steps<T: Real>(shape: &[usize], tables: &[[u16; 64]; 2]) -> Tensor<T> {
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    Tensor::from_fn(shape, |i| {
        let ch = (i / (h * w)) % c;
        let (y, x) = ((i / w) % h, i % w);
        let table = if ch == 0 { &tables[0] } else { &tables[1] };
        T::from_f64(table[(y % 8) * 8 + x % 8] as f64)
    })
}

/// Differentiable JPEG on `x` (values in `[0, 1]`, 1 or 3 channels) using the
/// given luma/chroma tables. With `rounding` the quantized coefficients and
/// the decoded 8-bit pixels are rounded in the forward pass with identity
/// gradients; without it the graph is smooth (used for gradient checks).
pub fn simulate_with_tables<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    tables: &[[u16; 64]; 2],
    rounding: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = shape.get(1).copied().unwrap_or(0);
    if shape.len() != 4 || (c != 1 && c != 3) {
        return Err(Error::shape(format!("jpeg needs N x (1|3) x H x W, got {shape:?}")));
    }
    let color = c == 3;
    let mut v = tape.scale(x, T::from_f64(255.0));
    v = tape.add_scalar(v, T::from_f64(-128.0));
    if color {
        v = tape.pixel_linear(v, RGB_TO_YCBCR)?;
    }
    v = tape.block_dct8(v, false)?;
    let steps = quant_steps::<T>(&shape, tables);
    let inv_steps = tape.constant(steps.map(|s| T::one() / s));
    let steps = tape.constant(steps);
    v = tape.mul(v, inv_steps)?;
    if rounding {
        let rounded = tape.value(v).map(|q| q.round());
        v = tape.straight_through(v, rounded)?;
    }
    v = tape.mul(v, steps)?;
    v = tape.block_dct8(v, true)?;
    if color {
        v = tape.pixel_linear(v, invert3(&RGB_TO_YCBCR))?;
    }
    v = tape.add_scalar(v, T::from_f64(128.0));
    if rounding {
        let pixels = tape.value(v).map(|p| p.round());
        v = tape.straight_through(v, pixels)?;
    }
    v = tape.scale(v, T::from_f64(1.0 / 255.0));
    Ok(tape.clamp(v, T::zero(), T::one()))
}

/// Differentiable JPEG at the given quality factor.
pub fn simulate<T: Real>(tape: &mut Tape<T>, x: Var, quality: u8) -> Result<Var> {
    let tables = [scaled_table(&LUMA_TABLE, quality), scaled_table(&CHROMA_TABLE, quality)];
    simulate_with_tables(tape, x, &tables, true)
}

/// Baseline JPEG encode (4:4:4, standard tables) and decode of one
/// `C x H x W` image held as `[0, 1]` values. Returns the decoded values.
pub fn real_roundtrip(data: &[f32], channels: usize, height: usize, width: usize, quality: u8) -> Result<Vec<f32>> {
    let color = match channels {
        1 => jpeg_encoder::ColorType::Luma,
        3 => jpeg_encoder::ColorType::Rgb,
        c => return Err(Error::Image(format!("jpeg codec supports 1 or 3 channels, got {c}"))),
    };
    let (w16, h16) = match (u16::try_from(width), u16::try_from(height)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return Err(Error::Image(format!("{height}x{width} too large for JPEG"))),
    };
    let hw = height * width;
    let mut interleaved = vec![0u8; channels * hw];
    for ch in 0..channels {
        for i in 0..hw {
            interleaved[i * channels + ch] = (data[ch * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut bytes = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut bytes, quality.clamp(1, 100));
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_4_4);
    encoder
        .encode(&interleaved, w16, h16, color)
        .map_err(|e| Error::Image(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Image(format!("jpeg decode: {e}")))?;
    let pixels: Vec<u8> = if channels == 3 {
        decoded.to_rgb8().into_raw()
    } else {
        decoded.to_luma8().into_raw()
    };
    let mut out = vec![0f32; channels * hw];
    for ch in 0..channels {
        for i in 0..hw {
            out[ch * hw + i] = pixels[i * channels + ch] as f32 / 255.0;
        }
    }
    Ok(out)
}
