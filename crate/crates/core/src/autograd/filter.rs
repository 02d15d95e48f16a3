//! Fixed linear filters with replicate borders: separable Gaussian blur and
//! central-difference derivatives.

use super::Var;
use crate::real::Real;

/// Normalized Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

#[derive(Clone, Copy)]
enum Dir {
    X,
    Y,
}

/// 1-d correlation along `dir` with clamped (replicate) indices.
fn pass<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, taps: &[T], dir: Dir) {
    let r = (taps.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                let o = k as isize - r;
                let idx = match dir {
                    Dir::X => y * w + (x as isize + o).clamp(0, w as isize - 1) as usize,
                    Dir::Y => (y as isize + o).clamp(0, h as isize - 1) as usize * w + x,
                };
                acc += t * src[idx];
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Adjoint of [`pass`].
fn pass_adjoint<T: Real>(g: &[T], dst: &mut [T], h: usize, w: usize, taps: &[T], dir: Dir) {
    let r = (taps.len() / 2) as isize;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (k, &t) in taps.iter().enumerate() {
                let o = k as isize - r;
                let idx = match dir {
                    Dir::X => y * w + (x as isize + o).clamp(0, w as isize - 1) as usize,
                    Dir::Y => (y as isize + o).clamp(0, h as isize - 1) as usize * w + x,
                };
                dst[idx] += t * gv;
            }
        }
    }
}

impl<T: Real> Var<T> {
    /// Separable filtering of every plane: `x_taps` along rows then `y_taps` along columns.
    fn separable(&self, x_taps: Vec<T>, y_taps: Vec<T>) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let plane = h * w;
        let mut out = vec![T::zero(); n * c * plane];
        let mut tmp = vec![T::zero(); plane];
        for (src, dst) in self.data().chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            pass(src, &mut tmp, h, w, &x_taps, Dir::X);
            pass(&tmp, dst, h, w, &y_taps, Dir::Y);
        }
        Var::from_op(vec![n, c, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * plane];
            let mut tmp = vec![T::zero(); plane];
            for (gsrc, dst) in g.chunks_exact(plane).zip(gx.chunks_exact_mut(plane)) {
                pass_adjoint(gsrc, &mut tmp, h, w, &y_taps, Dir::Y);
                pass_adjoint(&tmp, dst, h, w, &x_taps, Dir::X);
            }
            vec![Some(gx)]
        })
    }

    /// Gaussian blur with standard deviation `sigma` pixels, replicate borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Var<T> {
        let taps: Vec<T> = gaussian_taps(sigma).into_iter().map(T::lit).collect();
        self.separable(taps.clone(), taps)
    }

    /// Central difference `(x[j+1] − x[j−1]) / 2` along columns, replicate borders.
    pub fn diff_x(&self) -> Var<T> {
        let half = T::lit(0.5);
        self.separable(vec![-half, T::zero(), half], vec![T::one()])
    }

    /// Central difference along rows.
    pub fn diff_y(&self) -> Var<T> {
        let half = T::lit(0.5);
        self.separable(vec![T::one()], vec![-half, T::zero(), half])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_are_adjoint_consistent() {
        // <F x, y> == <x, F^T y>
        let (h, w) = (6, 7);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.77).sin()).collect();
        let y: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.31).cos()).collect();
        for f in [
            |v: &Var<f64>| v.gaussian_blur(1.3),
            |v: &Var<f64>| v.diff_x(),
            |v: &Var<f64>| v.diff_y(),
        ] {
            let xv = Var::leaf(vec![1, 1, h, w], x.clone(), true);
            let fx = f(&xv);
            let lhs: f64 = fx.data().iter().zip(&y).map(|(a, b)| a * b).sum();
            let g = fx.backward_with(y.clone());
            let rhs: f64 = g.get(&xv).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let v = Var::<f64>::full(vec![1, 2, 5, 5], 0.3).gaussian_blur(2.0);
        assert!(v.data().iter().all(|&x| (x - 0.3).abs() < 1e-12));
        let d = Var::<f64>::full(vec![1, 1, 5, 5], 0.3).diff_x();
        assert!(d.data().iter().all(|&x| x == 0.0));
    }
}
