//! Convolutions via im2col + GEMM, plus the deformable 3×3 variant.

use super::Var;
use crate::real::Real;

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvOpts {
    pub const fn same(k: usize) -> Self {
        Self { stride: 1, pad: k / 2, dilation: 1 }
    }

    pub const fn dilated(k: usize, dilation: usize) -> Self {
        Self { stride: 1, pad: dilation * (k / 2), dilation }
    }

    pub const fn strided(k: usize, stride: usize) -> Self {
        Self { stride, pad: k / 2, dilation: 1 }
    }

    fn out_size(&self, size: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(size + 2 * self.pad >= span, "conv: input {size} smaller than kernel span {span}");
        (size + 2 * self.pad - span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    opts: ConvOpts,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.opts.stride == 1 && self.opts.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate hit by output `o` at kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let p = (o * self.opts.stride + t * self.opts.dilation) as isize - self.opts.pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (k, oh, ow) = (g.k, g.oh, g.ow);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match g.src(oy, ky, g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (k, oh, ow) = (g.k, g.oh, g.ow);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &[T], n: usize, o: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); o];
    for b in 0..n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let base = (b * o + oc) * plane;
            *acc += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Shared backward for any "columns · weights" layer: returns (d_columns per item, d_weight).
fn gemm_backward<T: Real>(
    g: &[T],
    weight: &[T],
    cols_of: impl Fn(usize, &mut [T]),
    n: usize,
    o: usize,
    rows: usize,
    plane: usize,
    need_cols_grad: bool,
    mut on_cols_grad: impl FnMut(usize, &[T]),
) -> Vec<T> {
    let mut gw = vec![T::zero(); o * rows];
    let mut cols = vec![T::zero(); rows * plane];
    let mut gcols = vec![T::zero(); rows * plane];
    for b in 0..n {
        let gy = &g[b * o * plane..(b + 1) * o * plane];
        cols_of(b, &mut cols);
        T::gemm(o, plane, rows, gy, false, &cols, true, &mut gw, true);
        if need_cols_grad {
            T::gemm(rows, o, plane, weight, true, gy, false, &mut gcols, false);
            on_cols_grad(b, &gcols);
        }
    }
    gw
}

impl<T: Real> Var<T> {
    /// 2-d convolution of `self` (N,C,H,W) with `weight` (O,C,k,k) and optional bias (O).
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, opts: ConvOpts) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let (o, wc, k, k2) = weight.dims4();
        assert_eq!(wc, c, "conv2d: weight expects {wc} input channels, got {c}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        if let Some(b) = bias {
            assert_eq!(b.numel(), o, "conv2d: bias length");
        }
        let geo = Geometry { c, h, w, k, oh: opts.out_size(h, k), ow: opts.out_size(w, k), opts };
        let (rows, plane) = (geo.rows(), geo.cols());
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
        for b in 0..n {
            let xb = &self.data()[b * c * h * w..(b + 1) * c * h * w];
            let colsb: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut cols);
                &cols
            };
            T::gemm(o, rows, plane, weight.data(), false, colsb, false, &mut out[b * o * plane..(b + 1) * o * plane], false);
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), plane);
        }

        let (x, wt, bs) = (self.clone(), weight.clone(), bias.cloned());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Var::from_op(vec![n, o, geo.oh, geo.ow], out, &parents, move |g| {
            let xd = x.data();
            let item = c * h * w;
            let mut gx = x.requires_grad().then(|| vec![T::zero(); n * item]);
            let gw = gemm_backward(
                g,
                wt.data(),
                |b, cols| {
                    let xb = &xd[b * item..(b + 1) * item];
                    if geo.is_pointwise() {
                        cols.copy_from_slice(xb);
                    } else {
                        im2col(xb, &geo, cols);
                    }
                },
                n,
                o,
                rows,
                plane,
                gx.is_some(),
                |b, gcols| {
                    let gxb = &mut gx.as_mut().expect("requested")[b * item..(b + 1) * item];
                    if geo.is_pointwise() {
                        gxb.iter_mut().zip(gcols).for_each(|(a, &v)| *a += v);
                    } else {
                        col2im(gcols, &geo, gxb);
                    }
                },
            );
            let mut grads = vec![gx, wt.requires_grad().then_some(gw)];
            if let Some(bias) = &bs {
                grads.push(bias.requires_grad().then(|| bias_grad(g, n, o, plane)));
            }
            grads
        })
    }

    /// Deformable 3×3 convolution (stride 1, zero padding 1).
    ///
    /// `offsets` has shape (N, 18, H, W): channel `2t` / `2t+1` holds the (dx, dy)
    /// displacement of kernel tap `t` (row-major over the 3×3 window). Taps are read
    /// with bilinear interpolation, samples outside the image read zero, so with all
    /// offsets zero the layer reproduces [`Var::conv2d`] with `ConvOpts::same(3)`.
    pub fn deform_conv3x3(&self, offsets: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let (o, wc, k, _) = weight.dims4();
        assert_eq!((wc, k), (c, 3), "deform_conv3x3: weight must be (O, {c}, 3, 3)");
        assert_eq!(offsets.shape(), [n, 18, h, w], "deform_conv3x3: offsets must be (N, 18, H, W)");
        let geo = DeformGeometry { c, h, w };
        let (rows, plane) = (c * 9, h * w);
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = vec![T::zero(); rows * plane];
        for b in 0..n {
            geo.columns(self.item_slice(b), offsets.item_slice(b), &mut cols);
            T::gemm(o, rows, plane, weight.data(), false, &cols, false, &mut out[b * o * plane..(b + 1) * o * plane], false);
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), plane);
        }

        let (x, off, wt, bs) = (self.clone(), offsets.clone(), weight.clone(), bias.cloned());
        let mut parents = vec![self, offsets, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Var::from_op(vec![n, o, h, w], out, &parents, move |g| {
            let item = c * plane;
            let need_x = x.requires_grad();
            let need_off = off.requires_grad();
            let mut gx = need_x.then(|| vec![T::zero(); n * item]);
            let mut goff = need_off.then(|| vec![T::zero(); n * 18 * plane]);
            let gw = gemm_backward(
                g,
                wt.data(),
                |b, cols| geo.columns(x.item_slice(b), off.item_slice(b), cols),
                n,
                o,
                rows,
                plane,
                need_x || need_off,
                |b, gcols| {
                    let gxb = gx.as_mut().map(|v| &mut v[b * item..(b + 1) * item]);
                    let goffb = goff.as_mut().map(|v| &mut v[b * 18 * plane..(b + 1) * 18 * plane]);
                    geo.columns_backward(x.item_slice(b), off.item_slice(b), gcols, gxb, goffb);
                },
            );
            let mut grads = vec![gx, goff, wt.requires_grad().then_some(gw)];
            if let Some(bias) = &bs {
                grads.push(bias.requires_grad().then(|| bias_grad(g, n, o, plane)));
            }
            grads
        })
    }

    fn item_slice(&self, b: usize) -> &[T] {
        let (_, c, h, w) = self.dims4();
        &self.data()[b * c * h * w..(b + 1) * c * h * w]
    }
}

#[derive(Clone, Copy)]
struct DeformGeometry {
    c: usize,
    h: usize,
    w: usize,
}

/// Bilinear corner weights and zero-filled corner reads for one sample point.
struct Tap<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl DeformGeometry {
    #[inline]
    fn tap<T: Real>(&self, offs: &[T], t: usize, p: usize, y: usize, x: usize) -> Tap<T> {
        let plane = self.h * self.w;
        let (ky, kx) = (t / 3, t % 3);
        let sx = T::from_usize_lossy(x + kx) - T::one() + offs[2 * t * plane + p];
        let sy = T::from_usize_lossy(y + ky) - T::one() + offs[(2 * t + 1) * plane + p];
        let (flx, fly) = (sx.floor(), sy.floor());
        Tap {
            x0: flx.to_isize().unwrap_or(isize::MIN / 2),
            y0: fly.to_isize().unwrap_or(isize::MIN / 2),
            fx: sx - flx,
            fy: sy - fly,
        }
    }

    #[inline]
    fn read<T: Real>(&self, plane: &[T], y: isize, x: isize) -> T {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            plane[y as usize * self.w + x as usize]
        } else {
            T::zero()
        }
    }

    fn columns<T: Real>(&self, x: &[T], offs: &[T], cols: &mut [T]) {
        let plane = self.h * self.w;
        for t in 0..9 {
            for y in 0..self.h {
                for xx in 0..self.w {
                    let p = y * self.w + xx;
                    let tap = self.tap(offs, t, p, y, xx);
                    let (w00, w01) = ((T::one() - tap.fx) * (T::one() - tap.fy), tap.fx * (T::one() - tap.fy));
                    let (w10, w11) = ((T::one() - tap.fx) * tap.fy, tap.fx * tap.fy);
                    for c in 0..self.c {
                        let img = &x[c * plane..(c + 1) * plane];
                        let v = w00 * self.read(img, tap.y0, tap.x0)
                            + w01 * self.read(img, tap.y0, tap.x0 + 1)
                            + w10 * self.read(img, tap.y0 + 1, tap.x0)
                            + w11 * self.read(img, tap.y0 + 1, tap.x0 + 1);
                        cols[(c * 9 + t) * plane + p] = v;
                    }
                }
            }
        }
    }

    fn columns_backward<T: Real>(&self, x: &[T], offs: &[T], gcols: &[T], mut gx: Option<&mut [T]>, mut goff: Option<&mut [T]>) {
        let plane = self.h * self.w;
        for t in 0..9 {
            for y in 0..self.h {
                for xx in 0..self.w {
                    let p = y * self.w + xx;
                    let tap = self.tap(offs, t, p, y, xx);
                    let (fx, fy) = (tap.fx, tap.fy);
                    let corners = [
                        (tap.y0, tap.x0, (T::one() - fx) * (T::one() - fy)),
                        (tap.y0, tap.x0 + 1, fx * (T::one() - fy)),
                        (tap.y0 + 1, tap.x0, (T::one() - fx) * fy),
                        (tap.y0 + 1, tap.x0 + 1, fx * fy),
                    ];
                    let (mut dsx, mut dsy) = (T::zero(), T::zero());
                    for c in 0..self.c {
                        let g = gcols[(c * 9 + t) * plane + p];
                        if g == T::zero() {
                            continue;
                        }
                        let img = &x[c * plane..(c + 1) * plane];
                        if let Some(gx) = gx.as_deref_mut() {
                            let gplane = &mut gx[c * plane..(c + 1) * plane];
                            for &(cy, cx, wgt) in &corners {
                                if cy >= 0 && cx >= 0 && (cy as usize) < self.h && (cx as usize) < self.w {
                                    gplane[cy as usize * self.w + cx as usize] += g * wgt;
                                }
                            }
                        }
                        if goff.is_some() {
                            let v00 = self.read(img, tap.y0, tap.x0);
                            let v01 = self.read(img, tap.y0, tap.x0 + 1);
                            let v10 = self.read(img, tap.y0 + 1, tap.x0);
                            let v11 = self.read(img, tap.y0 + 1, tap.x0 + 1);
                            dsx += g * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                            dsy += g * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                    if let Some(goff) = goff.as_deref_mut() {
                        goff[2 * t * plane + p] += dsx;
                        goff[(2 * t + 1) * plane + p] += dsy;
                    }
                }
            }
        }
    }
}
