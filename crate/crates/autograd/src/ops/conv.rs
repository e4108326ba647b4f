use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution over one `C x H x W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::invalid("conv2d", "expected NCHW input and OIKK weight"));
        }
        let (cin, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, k, k2) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wcin != cin || k != k2 {
            return Err(Error::shape("conv2d", &[cout, cin, k, k], w_shape));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, weight) + bias` for `x: N x Cin x H x W`, `weight: Cout x Cin x k x k`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", &[g.cout], b.shape()));
        }
    }
    let n = x.dim(0);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.cols();
    let mut y = Tensor::zeros(&[n, g.cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * g.cols()]
    };
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let yi = &mut y.data_mut()[i * out_len..(i + 1) * out_len];
        let b_mat: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        T::gemm(g.cout, g.rows(), g.cols(), weight.data(), false, b_mat, false, yi, T::zero());
        if let Some(b) = bias {
            for (co, row) in yi.chunks_mut(g.cols()).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let n = x.dim(0);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.cols();
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[g.cout]));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.rows() * g.cols() }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { g.rows() * g.cols() } else { 0 }];
    for i in 0..n {
        let dyi = &dy.data()[i * out_len..(i + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyi.chunks(g.cols()).enumerate() {
                db.data_mut()[co] += row.iter().copied().sum();
            }
        }
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let b_mat: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            T::gemm(g.cout, g.cols(), g.rows(), dyi, false, b_mat, true, dw.data_mut(), T::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(g.rows(), g.cout, g.cols(), weight.data(), true, dyi, false, dxi, T::one());
            } else {
                T::gemm(g.rows(), g.cout, g.cols(), weight.data(), true, dyi, false, &mut dcols, T::zero());
                col2im(&dcols, &g, dxi);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

fn check_tconv(x: &Tensor<impl Real>, weight: &Tensor<impl Real>) -> Result<(usize, usize, usize, usize, usize)> {
    if x.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(Error::invalid("conv_transpose2x2", "expected NCHW input and IOKK weight"));
    }
    let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = weight.dim(1);
    if weight.shape() != [cin, cout, 2, 2] {
        return Err(Error::shape("conv_transpose2x2", &[cin, cout, 2, 2], weight.shape()));
    }
    Ok((n, cin, h, w, cout))
}

/// Transposed convolution with a 2x2 kernel and stride 2, doubling `H` and `W`.
/// `weight` is laid out `Cin x Cout x 2 x 2`.
pub fn conv_transpose2x2<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout) = check_tconv(x, weight)?;
    let hw = h * w;
    let mut y = Tensor::zeros(&[n, cout, 2 * h, 2 * w]);
    let mut tmp = vec![T::zero(); cout * 4 * hw];
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        T::gemm(cout * 4, cin, hw, weight.data(), true, xi, false, &mut tmp, T::zero());
        let yi = &mut y.data_mut()[i * cout * 4 * hw..(i + 1) * cout * 4 * hw];
        for co in 0..cout {
            let bv = bias.map_or(T::zero(), |b| b.data()[co]);
            for a in 0..2 {
                for b in 0..2 {
                    let row = &tmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for r in 0..h {
                        for c in 0..w {
                            yi[(co * 2 * h + 2 * r + a) * 2 * w + 2 * c + b] = row[r * w + c] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose2x2_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w, cout) = check_tconv(x, weight)?;
    let hw = h * w;
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[cout]));
    let mut dtmp = vec![T::zero(); cout * 4 * hw];
    for i in 0..n {
        let dyi = &dy.data()[i * cout * 4 * hw..(i + 1) * cout * 4 * hw];
        for co in 0..cout {
            for a in 0..2 {
                for b in 0..2 {
                    let row = &mut dtmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for r in 0..h {
                        for c in 0..w {
                            row[r * w + c] = dyi[(co * 2 * h + 2 * r + a) * 2 * w + 2 * c + b];
                        }
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                db.data_mut()[co] += dtmp[co * 4 * hw..(co + 1) * 4 * hw].iter().copied().sum();
            }
        }
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
            T::gemm(cin, cout * 4, hw, weight.data(), false, &dtmp, false, dxi, T::one());
        }
        if let Some(dw) = dw.as_mut() {
            T::gemm(cin, hw, cout * 4, xi, false, &dtmp, true, dw.data_mut(), T::one());
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// `y = x W^T + b` for `x: N x In`, `W: Out x In`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || weight.shape().len() != 2 || x.dim(1) != weight.dim(1) {
        return Err(Error::shape("linear", &[x.dim(0), weight.dim(1)], x.shape()));
    }
    let (n, fin, fout) = (x.dim(0), x.dim(1), weight.dim(0));
    let mut y = Tensor::zeros(&[n, fout]);
    T::gemm(n, fin, fout, x.data(), false, weight.data(), true, y.data_mut(), T::zero());
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(Error::shape("linear bias", &[fout], b.shape()));
        }
        for row in y.data_mut().chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, fin, fout) = (x.dim(0), x.dim(1), weight.dim(0));
    let dx = need.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(n, fout, fin, dy.data(), false, weight.data(), false, dx.data_mut(), T::zero());
        dx
    });
    let dw = need.1.then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        T::gemm(fout, n, fin, dy.data(), true, x.data(), false, dw.data_mut(), T::zero());
        dw
    });
    let db = need.2.then(|| {
        let mut db = Tensor::zeros(&[fout]);
        for row in dy.data().chunks(fout) {
            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
