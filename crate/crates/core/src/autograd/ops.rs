use super::Var;
use crate::real::Real;

fn same_shape<T: Real>(a: &Var<T>, b: &Var<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<T: Real> Var<T> {
    fn unary<F, D>(&self, f: F, df: D) -> Var<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = out.clone();
        Var::from_op(self.shape().to_vec(), out, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(&y)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "add");
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Var::from_op(self.shape().to_vec(), out, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "sub");
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Var::from_op(self.shape().to_vec(), out, &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "mul");
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(self.shape().to_vec(), out, &[self, other], move |g| {
            let ga = if a.requires_grad() {
                Some(g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect())
            } else {
                None
            };
            let gb = if b.requires_grad() {
                Some(g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect())
            } else {
                None
            };
            vec![ga, gb]
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let out = self.data().iter().map(|&x| x * s).collect();
        Var::from_op(self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let out = self.data().iter().map(|&x| x + s).collect();
        Var::from_op(self.shape().to_vec(), out, &[self], |g| vec![Some(g.to_vec())])
    }

    /// `s - x`
    pub fn rsub_scalar(&self, s: T) -> Var<T> {
        let out = self.data().iter().map(|&x| s - x).collect();
        Var::from_op(self.shape().to_vec(), out, &[self], |g| {
            vec![Some(g.iter().map(|&v| -v).collect())]
        })
    }

    pub fn square(&self) -> Var<T> {
        let two = T::lit(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// `sqrt(x + eps)`
    pub fn sqrt_eps(&self, eps: T) -> Var<T> {
        let half = T::lit(0.5);
        self.unary(move |x| (x + eps).sqrt(), move |_, y| half / y)
    }

    pub fn recip(&self) -> Var<T> {
        self.unary(|x| T::one() / x, |_, y| -y * y)
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(T::tanh, |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(T::exp, |_, y| y)
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// Elementwise clamp; the gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(&self) -> Var<T> {
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let n = self.numel();
        Var::from_op(vec![1], vec![T::lit(total)], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.numel();
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let inv = T::one() / T::from_usize_lossy(n);
        Var::from_op(vec![1], vec![T::lit(total / n as f64)], &[self], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Mean absolute difference, the `‖·‖₁` used by every photometric loss.
    pub fn l1(&self, other: &Var<T>) -> Var<T> {
        self.sub(other).abs().mean()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.numel(), "reshape: element count");
        if !self.requires_grad() {
            return Var::from_shared(shape, self.shared_data(), false);
        }
        Var::from_op(shape, self.to_vec(), &[self], |g| vec![Some(g.to_vec())])
    }

    /// Concatenates 4-d tensors along the channel axis.
    pub fn cat_channels(parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty(), "cat_channels: nothing to concatenate");
        let (n, _, h, w) = parts[0].dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc, ph, pw) = p.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "cat_channels: spatial/batch mismatch");
                pc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Var::from_op(vec![n, total, h, w], out, parts, move |g| {
            let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Channel slice `[start, start + len)` of a 4-d tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= c, "narrow_channels: {start}+{len} > {c}");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&self.data()[base..base + len * plane]);
        }
        Var::from_op(vec![n, len, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * plane];
            for b in 0..n {
                let dst = (b * c + start) * plane;
                let src = b * len * plane;
                gx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
            }
            vec![Some(gx)]
        })
    }

    /// Batch slice `[start, start + len)` of a 4-d tensor.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(start + len <= n, "narrow_batch: {start}+{len} > {n}");
        let item = c * h * w;
        let out = self.data()[start * item..(start + len) * item].to_vec();
        Var::from_op(vec![len, c, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * item];
            gx[start * item..(start + len) * item].copy_from_slice(g);
            vec![Some(gx)]
        })
    }

    /// Concatenates 4-d tensors along the batch axis.
    pub fn cat_batch(parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty(), "cat_batch: nothing to concatenate");
        let (_, c, h, w) = parts[0].dims4();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc, ph, pw) = p.dims4();
                assert_eq!((pc, ph, pw), (c, h, w), "cat_batch: shape mismatch");
                pn * pc * ph * pw
            })
            .collect();
        let total_n: usize = parts.iter().map(|p| p.dims4().0).sum();
        let mut out = Vec::with_capacity(sizes.iter().sum());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Var::from_op(vec![total_n, c, h, w], out, parts, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g[off..off + s].to_vec();
                    off += s;
                    Some(part)
                })
                .collect()
        })
    }

    /// Repeats a single-channel tensor `c` times along the channel axis.
    pub fn broadcast_channels(&self, c: usize) -> Var<T> {
        let (n, one, h, w) = self.dims4();
        assert_eq!(one, 1, "broadcast_channels expects one channel");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            let src = &self.data()[b * plane..(b + 1) * plane];
            for _ in 0..c {
                out.extend_from_slice(src);
            }
        }
        Var::from_op(vec![n, c, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * plane];
            for b in 0..n {
                for ch in 0..c {
                    let src = &g[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    gx[b * plane..(b + 1) * plane]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &v)| *a += v);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Sums a 4-d tensor over its channels, keeping a singleton channel axis.
    pub fn sum_channels(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let src = &self.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                out[b * plane..(b + 1) * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &v)| *a += v);
            }
        }
        Var::from_op(vec![n, 1, h, w], out, &[self], move |g| {
            let mut gx = Vec::with_capacity(n * c * plane);
            for b in 0..n {
                for _ in 0..c {
                    gx.extend_from_slice(&g[b * plane..(b + 1) * plane]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Channel-wise maximum, `(N, C, H, W) → (N, 1, H, W)`. The gradient goes to
    /// the first maximal channel.
    pub fn max_channels(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let plane = h * w;
        let d = self.data();
        let mut out = vec![T::zero(); n * plane];
        let mut arg = vec![0usize; n * plane];
        for b in 0..n {
            for p in 0..plane {
                let (mut best, mut best_c) = (d[b * c * plane + p], 0);
                for ch in 1..c {
                    let v = d[(b * c + ch) * plane + p];
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                out[b * plane + p] = best;
                arg[b * plane + p] = best_c;
            }
        }
        Var::from_op(vec![n, 1, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * plane];
            for b in 0..n {
                for p in 0..plane {
                    gx[(b * c + arg[b * plane + p]) * plane + p] = g[b * plane + p];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Adds a per-channel bias vector (shape `[c]`) to a 4-d tensor.
    pub fn add_channel_bias(&self, bias: &Var<T>) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(bias.numel(), c, "add_channel_bias: bias length");
        let plane = h * w;
        let mut out = self.to_vec();
        for b in 0..n {
            for ch in 0..c {
                let bv = bias.data()[ch];
                out[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        Var::from_op(self.shape().to_vec(), out, &[self, bias], move |g| {
            let mut gb = vec![T::zero(); c];
            for b in 0..n {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    *acc += g[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
                }
            }
            vec![Some(g.to_vec()), Some(gb)]
        })
    }

    /// Replicate (edge) padding of the two spatial axes.
    pub fn pad_replicate(&self, pad: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src_index = move |y: usize, x: usize| -> usize {
            let sy = y.saturating_sub(pad).min(h - 1);
            let sx = x.saturating_sub(pad).min(w - 1);
            sy * w + sx
        };
        let mut out = Vec::with_capacity(n * c * hp * wp);
        for plane in self.data().chunks_exact(h * w) {
            for y in 0..hp {
                for x in 0..wp {
                    out.push(plane[src_index(y, x)]);
                }
            }
        }
        Var::from_op(vec![n, c, hp, wp], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gplane, dst) in g.chunks_exact(hp * wp).zip(gx.chunks_exact_mut(h * w)) {
                for y in 0..hp {
                    for x in 0..wp {
                        dst[src_index(y, x)] += gplane[y * wp + x];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Replicate-pads the bottom and right edges up to `(hp, wp)`.
    pub fn pad_bottom_right(&self, hp: usize, wp: usize) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(hp >= h && wp >= w, "pad_bottom_right: target smaller than input");
        if (hp, wp) == (h, w) {
            return self.clone();
        }
        let mut out = Vec::with_capacity(n * c * hp * wp);
        for plane in self.data().chunks_exact(h * w) {
            for y in 0..hp {
                let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
                out.extend_from_slice(row);
                out.extend(std::iter::repeat_n(row[w - 1], wp - w));
            }
        }
        Var::from_op(vec![n, c, hp, wp], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gplane, dst) in g.chunks_exact(hp * wp).zip(gx.chunks_exact_mut(h * w)) {
                for y in 0..hp {
                    let sy = y.min(h - 1);
                    for x in 0..wp {
                        dst[sy * w + x.min(w - 1)] += gplane[y * wp + x];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Top-left `(h, w)` window.
    pub fn crop(&self, h: usize, w: usize) -> Var<T> {
        let (n, c, hi, wi) = self.dims4();
        assert!(h <= hi && w <= wi, "crop: window larger than input");
        if (h, w) == (hi, wi) {
            return self.clone();
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in self.data().chunks_exact(hi * wi) {
            for y in 0..h {
                out.extend_from_slice(&plane[y * wi..y * wi + w]);
            }
        }
        Var::from_op(vec![n, c, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * hi * wi];
            for (gplane, dst) in g.chunks_exact(h * w).zip(gx.chunks_exact_mut(hi * wi)) {
                for y in 0..h {
                    dst[y * wi..y * wi + w].copy_from_slice(&gplane[y * w..(y + 1) * w]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-pixel mix `m·self + (1 − m)·other` with a one-channel `m` broadcast
    /// over channels. Where both inputs agree the output is that value exactly.
    pub fn lerp_mask(&self, other: &Var<T>, m: &Var<T>) -> Var<T> {
        same_shape(self, other, "lerp_mask");
        let (n, c, h, w) = self.dims4();
        assert_eq!(m.shape(), &[n, 1, h, w], "lerp_mask: mask shape");
        let plane = h * w;
        let (a, b, md) = (self.data(), other.data(), m.data());
        let mut out = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let mv = md[(i / (c * plane)) * plane + i % plane];
            out.push(if a[i] == b[i] { a[i] } else { mv * a[i] + (T::one() - mv) * b[i] });
        }
        let (av, bv, mvv) = (self.clone(), other.clone(), m.clone());
        Var::from_op(self.shape().to_vec(), out, &[self, other, m], move |g| {
            let (a, b, md) = (av.data(), bv.data(), mvv.data());
            let mix = |i: usize| md[(i / (c * plane)) * plane + i % plane];
            let ga = av.requires_grad().then(|| (0..g.len()).map(|i| g[i] * mix(i)).collect());
            let gb = bv.requires_grad().then(|| (0..g.len()).map(|i| g[i] * (T::one() - mix(i))).collect());
            let gm = mvv.requires_grad().then(|| {
                let mut gm = vec![T::zero(); n * plane];
                for i in 0..g.len() {
                    gm[(i / (c * plane)) * plane + i % plane] += g[i] * (a[i] - b[i]);
                }
                gm
            });
            vec![ga, gb, gm]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Var;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 0.8)
            .collect()
    }

    /// Central-difference check of `f` at `x`, seeded with cotangent `w`.
    fn check_grad(x0: Vec<f64>, shape: Vec<usize>, f: impl Fn(&Var<f64>) -> Var<f64>) {
        let x = Var::leaf(shape.clone(), x0.clone(), true);
        let y = f(&x);
        let w = rand_vec(y.numel(), 7);
        let g = y.backward_with(w.clone()).get_or_zeros(&x);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fp: f64 = f(&Var::new(shape.clone(), xp)).data().iter().zip(&w).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&Var::new(shape.clone(), xm)).data().iter().zip(&w).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn elementwise_gradients() {
        let shape = vec![1, 2, 3, 3];
        let x0 = rand_vec(18, 1);
        let other = Var::new(shape.clone(), rand_vec(18, 2));
        check_grad(x0.clone(), shape.clone(), |x| x.mul(&other).add(x).sigmoid());
        check_grad(x0.clone(), shape.clone(), |x| x.square().sqrt_eps(0.1).tanh());
        check_grad(x0.clone(), shape.clone(), |x| x.leaky_relu(0.1).sub(&other).exp());
        check_grad(x0.clone(), shape.clone(), |x| x.pad_replicate(2).scale(3.0));
        check_grad(x0.clone(), shape.clone(), |x| x.narrow_channels(1, 1).broadcast_channels(3));
        check_grad(x0.clone(), shape.clone(), |x| Var::cat_channels(&[x, &other, x]).sum_channels());
        check_grad(x0.clone(), shape.clone(), |x| x.max_channels().square());
        check_grad(x0.clone(), shape.clone(), |x| x.add_scalar(3.0).recip());
        check_grad(x0.clone(), shape.clone(), |x| x.pad_bottom_right(5, 4).crop(2, 3).square());
        check_grad(x0.clone(), shape.clone(), |x| {
            let m = x.narrow_channels(0, 1).sigmoid();
            x.lerp_mask(&other, &m)
        });
        check_grad(x0.clone(), shape.clone(), |x| other.lerp_mask(&x.square(), &x.narrow_channels(1, 1)));
        check_grad(x0, shape, |x| x.mean().add(&x.sum()));
    }

    #[test]
    fn mul_by_itself_accumulates() {
        let x = Var::leaf(vec![3], vec![1.0f64, -2.0, 3.0], true);
        let g = x.mul(&x).sum().backward();
        assert_eq!(g.get(&x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Var::<f32>::full(vec![2, 2], 1.0);
        let b = a.add(&a).sigmoid();
        assert!(!b.requires_grad());
        assert!(b.backward_with(vec![1.0; 4]).get(&a).is_none());
    }

    #[test]
    fn l1_matches_mean_abs() {
        let a = Var::<f64>::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]);
        let b = Var::<f64>::new(vec![4], vec![0.25, 0.25, 0.75, 1.25]);
        assert!((a.l1(&b).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lerp_mask_is_exact_at_extremes_and_on_agreement() {
        let a = Var::<f32>::new(vec![1, 3, 1, 2], vec![0.1, 0.3, 0.7, 0.2, 0.9, 0.4]);
        let b = Var::<f32>::new(vec![1, 3, 1, 2], vec![0.7, 0.3, 0.6, 0.2, 0.123, 0.4]);
        let one = Var::<f32>::full(vec![1, 1, 1, 2], 1.0);
        let zero = Var::<f32>::full(vec![1, 1, 1, 2], 0.0);
        let third = Var::<f32>::full(vec![1, 1, 1, 2], 1.0 / 3.0);
        assert_eq!(a.lerp_mask(&b, &one).data(), a.data());
        assert_eq!(a.lerp_mask(&b, &zero).data(), b.data());
        assert_eq!(a.lerp_mask(&a, &third).data(), a.data());
    }
}
