use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn nchw(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(op, format!("expected NCHW, got {:?}", t.shape()))),
    }
}

/// Mirror an out-of-range index back into `0..len`, excluding the edge sample
/// (`-1 -> 1`, `len -> len - 2`). Offsets of any magnitude fold periodically.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub fn upsample_nearest2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x, "upsample_nearest2")?;
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for r in 0..2 * h {
            for col in 0..2 * w {
                dst[r * 2 * w + col] = src[(r / 2) * w + col / 2];
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = (dy.dim(0), dy.dim(1), dy.dim(2), dy.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for r in 0..h2 {
            for col in 0..w2 {
                dst[(r / 2) * w + col / 2] += src[r * w2 + col];
            }
        }
    }
    dx
}

/// Max-unpooling with fixed locations: each input value lands on one cell of
/// its 2x2 output block (`loc = 2 * row + col`), the other three are zero.
/// `locations` has one entry per `(channel, row, col)` and is shared by every
/// image in the batch.
pub fn unpool2<T: Real>(x: &Tensor<T>, locations: &[u8]) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x, "unpool2")?;
    if locations.len() != c * h * w {
        return Err(Error::shape("unpool2 locations", &[c * h * w], &[locations.len()]));
    }
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            let p = b * c + ch;
            for r in 0..h {
                for col in 0..w {
                    let loc = locations[(ch * h + r) * w + col] as usize;
                    let (a, bb) = (loc / 2, loc % 2);
                    y.data_mut()[p * 4 * h * w + (2 * r + a) * 2 * w + 2 * col + bb] =
                        x.data()[p * h * w + r * w + col];
                }
            }
        }
    }
    Ok(y)
}

pub fn unpool2_backward<T: Real>(dy: &Tensor<T>, locations: &[u8]) -> Tensor<T> {
    let (n, c, h, w) = (dy.dim(0), dy.dim(1), dy.dim(2) / 2, dy.dim(3) / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let p = b * c + ch;
            for r in 0..h {
                for col in 0..w {
                    let loc = locations[(ch * h + r) * w + col] as usize;
                    let (a, bb) = (loc / 2, loc % 2);
                    dx.data_mut()[p * h * w + r * w + col] =
                        dy.data()[p * 4 * h * w + (2 * r + a) * 2 * w + 2 * col + bb];
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x, "global_avg_pool")?;
    let s = h * w;
    let inv = T::from_f64(1.0 / s as f64);
    Ok(Tensor::from_fn(&[n, c], |p| {
        x.data()[p * s..(p + 1) * s].iter().copied().sum::<T>() * inv
    }))
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let s: usize = x_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / s as f64);
    Tensor::from_fn(x_shape, |i| dy.data()[i / s] * inv)
}

/// `y[n, c, ..] = x[n, c, ..] * s[n, c]`.
pub fn channel_scale<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x, "channel_scale")?;
    if s.shape() != [n, c] {
        return Err(Error::shape("channel_scale", &[n, c], s.shape()));
    }
    let hw = h * w;
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * s.data()[i / hw]))
}

/// `v: N x L` broadcast to `N x L x h x w`.
pub fn expand_spatial<T: Real>(v: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if v.shape().len() != 2 {
        return Err(Error::invalid("expand_spatial", "expected N x L"));
    }
    let (n, l) = (v.dim(0), v.dim(1));
    let hw = h * w;
    Ok(Tensor::from_fn(&[n, l, h, w], |i| v.data()[i / hw]))
}

/// Normalized 1-D Gaussian taps with half-width `ceil(3 sigma)`.
/// A non-positive sigma yields the single tap `[1]`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// One reflect-padded 1-D pass along rows (`horizontal`) or columns. With
/// `adjoint` the transposed linear map is applied instead.
fn pass_1d<T: Real>(x: &Tensor<T>, taps: &[T], horizontal: bool, adjoint: bool) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let r = (taps.len() / 2) as isize;
    let mut y = Tensor::zeros(x.shape());
    let (len, lines, stride_along, stride_across) = if horizontal { (w, h, 1, w) } else { (h, w, w, 1) };
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * h * w..(p + 1) * h * w];
        for line in 0..lines {
            let base = line * stride_across;
            for i in 0..len {
                for (t, &tap) in taps.iter().enumerate() {
                    let j = reflect_index(i as isize + t as isize - r, len);
                    if adjoint {
                        dst[base + j * stride_along] += tap * src[base + i * stride_along];
                    } else {
                        dst[base + i * stride_along] += tap * src[base + j * stride_along];
                    }
                }
            }
        }
    }
    y
}

/// Separable blur with the same taps along both axes, reflect padding.
pub fn separable_blur<T: Real>(x: &Tensor<T>, taps: &[T]) -> Result<Tensor<T>> {
    nchw(x, "separable_blur")?;
    if taps.len().is_multiple_of(2) {
        return Err(Error::invalid("separable_blur", "tap count must be odd"));
    }
    Ok(pass_1d(&pass_1d(x, taps, true, false), taps, false, false))
}

pub fn separable_blur_backward<T: Real>(dy: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    pass_1d(&pass_1d(dy, taps, false, true), taps, true, true)
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
pub fn dct8_basis() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (xx, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * xx + 1) as f64 * u as f64 * PI) / 16.0).cos();
        }
    }
    d
}

/// Blockwise 8x8 2-D DCT of every plane (`inverse` selects the IDCT). The
/// transform is orthonormal, so the adjoint of the forward pass is the
/// inverse pass and vice versa.
pub fn block_dct8<T: Real>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x, "block_dct8")?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid("block_dct8", format!("{h}x{w} is not a multiple of 8")));
    }
    let basis = dct8_basis();
    let d: Vec<T> = basis.iter().flatten().map(|&v| T::from_f64(v)).collect();
    let mut y = Tensor::zeros(x.shape());
    let mut blk = [T::zero(); 64];
    let mut tmp = [T::zero(); 64];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * h * w..(p + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for i in 0..8 {
                    blk[i * 8..i * 8 + 8].copy_from_slice(&src[(by + i) * w + bx..(by + i) * w + bx + 8]);
                }
                // forward: D B D^T, inverse: D^T B D
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = T::zero();
                        for k in 0..8 {
                            let dik = if inverse { d[k * 8 + i] } else { d[i * 8 + k] };
                            acc += dik * blk[k * 8 + j];
                        }
                        tmp[i * 8 + j] = acc;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = T::zero();
                        for k in 0..8 {
                            let dkj = if inverse { d[k * 8 + j] } else { d[j * 8 + k] };
                            acc += tmp[i * 8 + k] * dkj;
                        }
                        dst[(by + i) * w + bx + j] = acc;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Per-pixel `3 x 3` channel mixing: `y[o] = sum_c m[o][c] x[c]`.
pub fn pixel_linear<T: Real>(x: &Tensor<T>, m: &[[f64; 3]; 3]) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x, "pixel_linear")?;
    if c != 3 {
        return Err(Error::invalid("pixel_linear", format!("needs 3 channels, got {c}")));
    }
    let hw = h * w;
    let mt: Vec<T> = m.iter().flatten().map(|&v| T::from_f64(v)).collect();
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        let src = &x.data()[b * 3 * hw..(b + 1) * 3 * hw];
        let dst = &mut y.data_mut()[b * 3 * hw..(b + 1) * 3 * hw];
        for o in 0..3 {
            for i in 0..hw {
                dst[o * hw + i] = mt[o * 3] * src[i] + mt[o * 3 + 1] * src[hw + i] + mt[o * 3 + 2] * src[2 * hw + i];
            }
        }
    }
    Ok(y)
}

pub fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_repeating_the_edge() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-9, 5), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn nearest_upsample_replicates_a_single_value() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![0.7f64]).unwrap();
        let y = upsample_nearest2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.7; 4]);
    }

    #[test]
    fn dct_round_trip_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 8, 16], |i| ((i * 31) % 17) as f64 - 8.0);
        let y = block_dct8(&block_dct8(&x, false).unwrap(), true).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dct_of_constant_block_is_dc_only() {
        let x = Tensor::full(&[1, 1, 8, 8], 3.0f64);
        let y = block_dct8(&x, false).unwrap();
        assert!((y.data()[0] - 24.0).abs() < 1e-12);
        assert!(y.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gaussian_taps_are_normalized_and_sized_by_three_sigma() {
        let t = gaussian_taps(2.0);
        assert_eq!(t.len(), 13);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_taps(0.0), vec![1.0]);
    }

    #[test]
    fn blur_adjoint_satisfies_inner_product_identity() {
        let taps: Vec<f64> = gaussian_taps(1.0);
        let x = Tensor::from_fn(&[1, 2, 5, 7], |i| ((i * 13) % 7) as f64 - 3.0);
        let v = Tensor::from_fn(&[1, 2, 5, 7], |i| ((i * 5) % 11) as f64 * 0.1);
        let ax = separable_blur(&x, &taps).unwrap();
        let atv = separable_blur_backward(&v, &taps);
        let lhs: f64 = ax.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(atv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
