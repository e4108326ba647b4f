//! Coupling analysis: which pixels the decoder needs versus where the
//! encoder actually puts its residual.

use dewm_autograd::Real;

use crate::error::{Error, Result};
use crate::nn::{decoder_graph, Mode, ModelBundle, Session, DECODER};
use crate::types::{ImageArray, WatermarkMessage};

/// A `C x H x W` map of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub dims: (usize, usize, usize),
    pub data: Vec<f64>,
    pub normalized: bool,
}

impl FeatureMap {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if dims.0 * dims.1 * dims.2 != data.len() {
            return Err(Error::shape(format!("{dims:?} needs {} values, got {}", dims.0 * dims.1 * dims.2, data.len())));
        }
        Ok(Self {
            dims,
            data,
            normalized: false,
        })
    }
}

/// Gradient of `MSE(D(host), message)` with respect to the host pixels, with
/// batch norm on running statistics.
pub fn decoder_needed_map<T: Real>(
    bundle: &ModelBundle<T>,
    host: &ImageArray,
    message: &WatermarkMessage,
) -> Result<FeatureMap> {
    if host.dims() != (bundle.arch.c, bundle.arch.h, bundle.arch.w) {
        return Err(Error::shape(format!("host {:?} does not match the model", host.dims())));
    }
    if message.len() != bundle.arch.l {
        return Err(Error::MessageLength {
            expected: bundle.arch.l,
            actual: message.len(),
        });
    }
    let mut sess = Session::new(&bundle.params, Mode::Eval);
    let x = sess.tape.leaf(host.to_tensor());
    let logits = decoder_graph(&mut sess, DECODER, &bundle.arch, x)?;
    let m = sess.tape.constant(dewm_autograd::Tensor::from_vec(&[1, message.len()], message.as_reals())?);
    let loss = sess.tape.mse(logits, m)?;
    let grads = sess.tape.backward(loss)?;
    let g = grads.get(x).ok_or_else(|| Error::shape("no gradient reached the input"))?;
    FeatureMap::new(host.dims(), g.data().iter().map(|v| v.as_f64()).collect())
}

/// `I_em - I_o`, so clamping at the image bounds is reflected.
pub fn encoded_residual_map<T: Real>(
    bundle: &ModelBundle<T>,
    host: &ImageArray,
    message: &WatermarkMessage,
    alpha: f64,
) -> Result<FeatureMap> {
    let wm = bundle.embed(host, message, alpha)?;
    let data = wm.data().iter().zip(host.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
    FeatureMap::new(host.dims(), data)
}

/// `|m|` min-max scaled to `[0, 1]` over the whole map; a constant map
/// becomes all zeros.
pub fn normalize_map(m: &FeatureMap) -> Result<FeatureMap> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::shape("feature map has non-finite entries"));
    }
    let abs: Vec<f64> = m.data.iter().map(|v| v.abs()).collect();
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        abs.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; abs.len()]
    };
    Ok(FeatureMap {
        dims: m.dims,
        data,
        normalized: true,
    })
}

/// Cosine similarity of the mean-centered maps; 0 when either map has no
/// variance.
pub fn coupling_consistency(r: &FeatureMap, g: &FeatureMap) -> Result<f64> {
    if r.dims != g.dims {
        return Err(Error::shape(format!("{:?} vs {:?}", r.dims, g.dims)));
    }
    let n = r.data.len() as f64;
    let mr = r.data.iter().sum::<f64>() / n;
    let mg = g.data.iter().sum::<f64>() / n;
    let (mut dot, mut nr, mut ng) = (0.0, 0.0, 0.0);
    for (a, b) in r.data.iter().zip(&g.data) {
        let (x, y) = (a - mr, b - mg);
        dot += x * y;
        nr += x * x;
        ng += y * y;
    }
    if nr == 0.0 || ng == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nr.sqrt() * ng.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(data: Vec<f64>) -> FeatureMap {
        let n = data.len();
        FeatureMap::new((1, 1, n), data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_map(&map(vec![-2.0, 0.0, 2.0])).unwrap().data, vec![1.0, 0.0, 1.0]);
        assert_eq!(normalize_map(&map(vec![3.0; 4])).unwrap().data, vec![0.0; 4]);
        let once = normalize_map(&map(vec![0.1, -0.7, 0.3, 0.0])).unwrap();
        assert_eq!(normalize_map(&once).unwrap(), once);
    }

    #[test]
    fn consistency_examples() {
        let a = map(vec![0.0, 1.0, 0.5, 0.2]);
        assert!((coupling_consistency(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = map(a.data.iter().map(|v| -v).collect());
        assert!((coupling_consistency(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // disjoint supports of equal energy: [1,1,0,0] and [0,0,1,1]
        // centered: [.5,.5,-.5,-.5] and [-.5,-.5,.5,.5] -> dot -1, norms 1 -> -1
        let r = map(vec![1.0, 1.0, 0.0, 0.0]);
        let g = map(vec![0.0, 0.0, 1.0, 1.0]);
        assert!((coupling_consistency(&r, &g).unwrap() + 1.0).abs() < 1e-12);
        // [1,0,0,0] vs [0,1,0,0]: centered [.75,-.25,-.25,-.25] and [-.25,.75,-.25,-.25]
        // dot = -.1875-.1875+.0625+.0625 = -.25, norms^2 = .75 -> -1/3
        let r = map(vec![1.0, 0.0, 0.0, 0.0]);
        let g = map(vec![0.0, 1.0, 0.0, 0.0]);
        assert!((coupling_consistency(&r, &g).unwrap() + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(coupling_consistency(&map(vec![1.0; 4]), &g).unwrap(), 0.0);
        assert!(coupling_consistency(&map(vec![1.0; 3]), &g).is_err());
    }

    proptest! {
        #[test]
        fn normalized_range_is_exactly_unit(data in proptest::collection::vec(-5.0f64..5.0, 2..50)) {
            let m = normalize_map(&map(data.clone())).unwrap();
            let abs: Vec<f64> = data.iter().map(|v| v.abs()).collect();
            let constant = abs.iter().all(|&v| v == abs[0]);
            if !constant {
                let lo = m.data.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
        }

        #[test]
        fn consistency_ignores_positive_rescaling(
            a in proptest::collection::vec(-5.0f64..5.0, 8),
            b in proptest::collection::vec(-5.0f64..5.0, 8),
            s in 0.1f64..10.0,
        ) {
            let na = normalize_map(&map(a.clone())).unwrap();
            let nas = normalize_map(&map(a.iter().map(|v| v * s).collect())).unwrap();
            let nb = normalize_map(&map(b)).unwrap();
            let x = coupling_consistency(&na, &nb).unwrap();
            let y = coupling_consistency(&nas, &nb).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
