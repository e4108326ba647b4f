use dewm_autograd::ops::spatial::reflect_index;
use dewm_autograd::{Real, Tensor};

/// Per-plane sliding-window median of an `N x C x H x W` tensor with reflect
/// padding. `window` must be odd; a window of 1 returns the input.
pub fn median_filter<T: Real>(x: &Tensor<T>, window: usize) -> Tensor<T> {
    let shape = x.shape();
    if window <= 1 || shape.len() != 4 {
        return x.clone();
    }
    let (h, w) = (shape[2], shape[3]);
    let r = (window / 2) as isize;
    let mut out = Tensor::zeros(shape);
    let mut buf: Vec<T> = Vec::with_capacity(window * window);
    for p in 0..shape[0] * shape[1] {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                buf.clear();
                for di in -r..=r {
                    let yi = reflect_index(i as isize + di, h);
                    for dj in -r..=r {
                        buf.push(src[yi * w + reflect_index(j as isize + dj, w)]);
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
                dst[i * w + j] = *m;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_one_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 8, 8], |i| (i % 7) as f64 / 7.0);
        assert_eq!(median_filter(&x, 1), x);
    }

    #[test]
    fn removes_isolated_impulse() {
        let mut x = Tensor::<f64>::full(&[1, 1, 8, 8], 0.25);
        x.data_mut()[3 * 8 + 4] = 1.0;
        let y = median_filter(&x, 3);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn matches_brute_force_on_corner() {
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 13) % 17) as f64);
        let y = median_filter(&x, 3);
        // reflect padding around (0,0): rows {1,0,1}, cols {1,0,1}
        let mut vals = Vec::new();
        for r in [1usize, 0, 1] {
            for c in [1usize, 0, 1] {
                vals.push(x.data()[r * 8 + c]);
            }
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(y.data()[0], vals[4]);
    }
}
