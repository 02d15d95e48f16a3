//! Differentiable resampling: bilinear point sampling, resizing and local correlation.

use super::Var;
use crate::real::Real;

/// Bilinear stencil of a point clamped into `[0, size-1]`.
#[derive(Clone, Copy)]
struct Axis<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// `false` when the coordinate was clamped (zero derivative).
    inside: bool,
}

#[inline]
fn axis<T: Real>(coord: T, size: usize) -> Axis<T> {
    let max = T::from_usize_lossy(size - 1);
    let inside = coord >= T::zero() && coord <= max;
    let c = coord.max(T::zero()).min(max);
    if size == 1 {
        return Axis { i0: 0, i1: 0, frac: T::zero(), inside: false };
    }
    let mut i0 = c.floor().to_usize().unwrap_or(0);
    if i0 >= size - 1 {
        i0 = size - 2;
    }
    let frac = c - T::from_usize_lossy(i0);
    Axis { i0, i1: i0 + 1, frac, inside }
}

impl<T: Real> Var<T> {
    /// Samples `self` (N,C,H,W) at pixel coordinates `coords` (N,2,Ho,Wo), channel 0 = x
    /// (column), channel 1 = y (row). Coordinates are clamped to the image border before
    /// interpolation. Differentiable in both the image and the coordinates.
    pub fn grid_sample(&self, coords: &Var<T>) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let (cn, two, oh, ow) = coords.dims4();
        assert_eq!((cn, two), (n, 2), "grid_sample: coords must be (N, 2, Ho, Wo)");
        let (plane, oplane) = (h * w, oh * ow);
        let mut out = vec![T::zero(); n * c * oplane];
        for b in 0..n {
            let cx = &coords.data()[b * 2 * oplane..b * 2 * oplane + oplane];
            let cy = &coords.data()[b * 2 * oplane + oplane..(b + 1) * 2 * oplane];
            for p in 0..oplane {
                let ax = axis(cx[p], w);
                let ay = axis(cy[p], h);
                let (fx, fy) = (ax.frac, ay.frac);
                let weights = [
                    (ay.i0 * w + ax.i0, (T::one() - fx) * (T::one() - fy)),
                    (ay.i0 * w + ax.i1, fx * (T::one() - fy)),
                    (ay.i1 * w + ax.i0, (T::one() - fx) * fy),
                    (ay.i1 * w + ax.i1, fx * fy),
                ];
                for ch in 0..c {
                    let img = &self.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    out[(b * c + ch) * oplane + p] = weights[0].1 * img[weights[0].0]
                        + weights[1].1 * img[weights[1].0]
                        + weights[2].1 * img[weights[2].0]
                        + weights[3].1 * img[weights[3].0];
                }
            }
        }
        let (img, crd) = (self.clone(), coords.clone());
        Var::from_op(vec![n, c, oh, ow], out, &[self, coords], move |g| {
            let mut gi = img.requires_grad().then(|| vec![T::zero(); n * c * plane]);
            let mut gc = crd.requires_grad().then(|| vec![T::zero(); n * 2 * oplane]);
            for b in 0..n {
                let cx = &crd.data()[b * 2 * oplane..b * 2 * oplane + oplane];
                let cy = &crd.data()[b * 2 * oplane + oplane..(b + 1) * 2 * oplane];
                for p in 0..oplane {
                    let ax = axis(cx[p], w);
                    let ay = axis(cy[p], h);
                    let (fx, fy) = (ax.frac, ay.frac);
                    let (i00, i01, i10, i11) =
                        (ay.i0 * w + ax.i0, ay.i0 * w + ax.i1, ay.i1 * w + ax.i0, ay.i1 * w + ax.i1);
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let gv = g[(b * c + ch) * oplane + p];
                        let base = (b * c + ch) * plane;
                        if let Some(gi) = gi.as_mut() {
                            gi[base + i00] += gv * (T::one() - fx) * (T::one() - fy);
                            gi[base + i01] += gv * fx * (T::one() - fy);
                            gi[base + i10] += gv * (T::one() - fx) * fy;
                            gi[base + i11] += gv * fx * fy;
                        }
                        if gc.is_some() {
                            let im = &img.data()[base..base + plane];
                            let (v00, v01, v10, v11) = (im[i00], im[i01], im[i10], im[i11]);
                            dx += gv * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                            dy += gv * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                    if let Some(gc) = gc.as_mut() {
                        if ax.inside {
                            gc[b * 2 * oplane + p] += dx;
                        }
                        if ay.inside {
                            gc[b * 2 * oplane + oplane + p] += dy;
                        }
                    }
                }
            }
            vec![gi, gc]
        })
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let xs = resize_axis::<T>(w, ow);
        let ys = resize_axis::<T>(h, oh);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (src, dst) in self.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for (oy, ay) in ys.iter().enumerate() {
                for (ox, ax) in xs.iter().enumerate() {
                    let (fx, fy) = (ax.frac, ay.frac);
                    dst[oy * ow + ox] = (T::one() - fy)
                        * ((T::one() - fx) * src[ay.i0 * w + ax.i0] + fx * src[ay.i0 * w + ax.i1])
                        + fy * ((T::one() - fx) * src[ay.i1 * w + ax.i0] + fx * src[ay.i1 * w + ax.i1]);
                }
            }
        }
        Var::from_op(vec![n, c, oh, ow], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gsrc, dst) in g.chunks_exact(oh * ow).zip(gx.chunks_exact_mut(h * w)) {
                for (oy, ay) in ys.iter().enumerate() {
                    for (ox, ax) in xs.iter().enumerate() {
                        let gv = gsrc[oy * ow + ox];
                        let (fx, fy) = (ax.frac, ay.frac);
                        dst[ay.i0 * w + ax.i0] += gv * (T::one() - fy) * (T::one() - fx);
                        dst[ay.i0 * w + ax.i1] += gv * (T::one() - fy) * fx;
                        dst[ay.i1 * w + ax.i0] += gv * fy * (T::one() - fx);
                        dst[ay.i1 * w + ax.i1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// 2×2 average pooling (H and W must be even).
    pub fn avg_pool2(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd size {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (src, dst) in self.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = quarter * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        Var::from_op(vec![n, c, oh, ow], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gsrc, dst) in g.chunks_exact(oh * ow).zip(gx.chunks_exact_mut(h * w)) {
                for y in 0..oh {
                    for x in 0..ow {
                        let v = gsrc[y * ow + x] * quarter;
                        let i = 2 * y * w + 2 * x;
                        dst[i] = v;
                        dst[i + 1] = v;
                        dst[i + w] = v;
                        dst[i + w + 1] = v;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Local correlation cost volume.
    ///
    /// Output (N, (2d+1)², H, W); channel `(dy+d)(2d+1) + (dx+d)` holds
    /// `⟨a(p), b(p + (dx, dy))⟩ / C`, with `b` read as zero outside the image.
    pub fn correlate(&self, other: &Var<T>, d: usize) -> Var<T> {
        assert_eq!(self.shape(), other.shape(), "correlate: shape mismatch");
        assert!(d >= 1, "correlate: radius must be at least 1");
        let (n, c, h, w) = self.dims4();
        let span = 2 * d + 1;
        let plane = h * w;
        let inv_c = T::one() / T::from_usize_lossy(c);
        let mut out = vec![T::zero(); n * span * span * plane];
        let di = d as isize;
        let ranges = move |off: isize, size: usize| -> (usize, usize) {
            // valid p with 0 <= p + off < size
            let lo = ((-off).max(0) as usize).min(size);
            let hi = (size as isize - off).min(size as isize).max(0) as usize;
            (lo, hi.max(lo))
        };
        for b in 0..n {
            for oy in -di..=di {
                let (ylo, yhi) = ranges(oy, h);
                for ox in -di..=di {
                    let (xlo, xhi) = ranges(ox, w);
                    if ylo == yhi || xlo == xhi {
                        continue;
                    }
                    let o = ((oy + di) as usize) * span + (ox + di) as usize;
                    let dst = &mut out[(b * span * span + o) * plane..(b * span * span + o + 1) * plane];
                    for ch in 0..c {
                        let fa = &self.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        let fb = &other.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        for y in ylo..yhi {
                            let yb = (y as isize + oy) as usize;
                            let row_a = &fa[y * w + xlo..y * w + xhi];
                            let row_b = &fb[yb * w + (xlo as isize + ox) as usize..yb * w + (xhi as isize + ox) as usize];
                            let row_o = &mut dst[y * w + xlo..y * w + xhi];
                            for ((o, &a), &bv) in row_o.iter_mut().zip(row_a).zip(row_b) {
                                *o += a * bv;
                            }
                        }
                    }
                    dst.iter_mut().for_each(|v| *v *= inv_c);
                }
            }
        }
        let (fa_v, fb_v) = (self.clone(), other.clone());
        Var::from_op(vec![n, span * span, h, w], out, &[self, other], move |g| {
            let mut ga = fa_v.requires_grad().then(|| vec![T::zero(); n * c * plane]);
            let mut gb = fb_v.requires_grad().then(|| vec![T::zero(); n * c * plane]);
            for b in 0..n {
                for oy in -di..=di {
                    let (ylo, yhi) = ranges(oy, h);
                    for ox in -di..=di {
                        let (xlo, xhi) = ranges(ox, w);
                        let o = ((oy + di) as usize) * span + (ox + di) as usize;
                        let go = &g[(b * span * span + o) * plane..(b * span * span + o + 1) * plane];
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let fa = &fa_v.data()[base..base + plane];
                            let fb = &fb_v.data()[base..base + plane];
                            for y in ylo..yhi {
                                let yb = (y as isize + oy) as usize;
                                for x in xlo..xhi {
                                    let xb = (x as isize + ox) as usize;
                                    let gv = go[y * w + x] * inv_c;
                                    if let Some(ga) = ga.as_mut() {
                                        ga[base + y * w + x] += gv * fb[yb * w + xb];
                                    }
                                    if let Some(gb) = gb.as_mut() {
                                        gb[base + yb * w + xb] += gv * fa[y * w + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        })
    }
}

fn resize_axis<T: Real>(src: usize, dst: usize) -> Vec<Axis<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let mut a = axis(T::lit(s), src);
            a.inside = true;
            a
        })
        .collect()
}
