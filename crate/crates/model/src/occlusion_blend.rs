//! Occlusion masks from flow consistency, the blending network and the
//! stage-one losses.

use rand_chacha::ChaCha8Rng;
use toonbetween_core::geometry::cyclic_displacement_var;
use toonbetween_core::nn::{lrelu, Conv2d, ParamStore, Session};
use toonbetween_core::sketchgen::{ContourDetector, GradientDetector};
use toonbetween_core::{
    BlendMask, ContourMap, ConvOpts, DistanceMap, Error, FlowField, Frame, Grid, OcclusionMask, Real, Result, Var,
};

use crate::config::BlendConfig;

/// Weight of the warping term in the synthesis loss.
pub const LAMBDA_WARP: f64 = 0.5;
/// Weight of the contour term in the synthesis loss.
pub const LAMBDA_CONTOUR: f64 = 0.01;

/// `2σ(‖v(v(p, f_ab), f_ba) − p‖₂) − 1`.
pub fn occlusion_mask_var<T: Real>(f_ab: &Var<T>, f_ba: &Var<T>) -> Var<T> {
    cyclic_displacement_var(f_ab, f_ba).sigmoid().scale(T::lit(2.0)).add_scalar(-T::one())
}

pub fn occlusion_mask(f_ab: &FlowField, f_ba: &FlowField) -> Result<OcclusionMask> {
    if f_ab.dims() != f_ba.dims() {
        return Err(Error::Shape { expected: format!("{:?}", f_ab.dims()), got: format!("{:?}", f_ba.dims()) });
    }
    let v = occlusion_mask_var::<f64>(&f_ab.to_var(), &f_ba.to_var());
    OcclusionMask::new(Grid::from_var(&v, 0))
}

/// Three-layer blending network over `(I_t0, I_t1, O_t0, O_t1, S_t)`.
pub struct BlendNet {
    layers: Vec<Conv2d>,
}

/// Channel order of the blending network input.
pub const BLEND_INPUTS: [&str; 5] = ["warped_0", "warped_1", "occlusion_0", "occlusion_1", "sketch"];

impl BlendNet {
    pub fn new(cfg: &BlendConfig) -> Self {
        let mut prev = 9;
        let mut layers: Vec<Conv2d> = cfg
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let l = Conv2d::new(format!("blend.conv{i}"), prev, c, 3, ConvOpts::same(3));
                prev = c;
                l
            })
            .collect();
        layers.push(Conv2d::new(format!("blend.conv{}", cfg.hidden.len()), prev, 1, 3, ConvOpts::same(3)));
        Self { layers }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.layers.iter().for_each(|l| l.init(store, rng));
    }

    /// Soft blending mask `M ∈ [0, 1]`, `(N, 1, H, W)`.
    pub fn forward<T: Real>(
        &self,
        s: &Session<'_, T>,
        w0: &Var<T>,
        w1: &Var<T>,
        o0: &Var<T>,
        o1: &Var<T>,
        sketch: &Var<T>,
    ) -> Var<T> {
        let mut x = Var::cat_channels(&[w0, w1, o0, o1, sketch]);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, &x);
            if i < last {
                x = lrelu(&x);
            }
        }
        x.sigmoid()
    }
}

/// `M ⊙ I_t0 + (1 − M) ⊙ I_t1`.
pub fn blend_var<T: Real>(w0: &Var<T>, w1: &Var<T>, m: &Var<T>) -> Var<T> {
    w0.lerp_mask(w1, m)
}

pub fn blend(w0: &Frame, w1: &Frame, m: &BlendMask) -> Result<Frame> {
    if w0.dims() != w1.dims() || w0.dims() != m.dims() {
        return Err(Error::Contract("blend inputs differ in size".into()));
    }
    Frame::new(Grid::from_var(&blend_var::<f32>(&w0.to_var(), &w1.to_var(), &m.to_var()), 0))
}

/// Exact squared Euclidean distance transform of a binary mask (true = site),
/// by separable lower envelopes of parabolas. `None` when there is no site.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    assert_eq!(sites.len(), h * w);
    if !sites.iter().any(|&s| s) {
        return None;
    }
    let inf = 1e20;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { inf }).collect();
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        let d = envelope_1d(&col);
        for y in 0..h {
            g[y * w + x] = d[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let d = envelope_1d(&g[y * w..(y + 1) * w]);
        out[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    Some(out)
}

/// 1-D squared distance transform of sampled function `f`.
fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    let cross = |q: usize, p: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
    for q in 1..n {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    out
}

/// Euclidean distance to the nearest contour pixel (value ≥ 0.5).
pub fn distance_transform(contours: &ContourMap) -> Result<DistanceMap> {
    let (h, w) = contours.dims();
    let sites: Vec<bool> = contours.grid().data().iter().map(|&v| v >= 0.5).collect();
    let sq = squared_distance_transform(&sites, h, w).ok_or(Error::EmptyContours)?;
    DistanceMap::new(Grid::new(1, h, w, sq.into_iter().map(|v| v.sqrt() as f32).collect())?)
}

/// Mean of `(1 − E(Î)) ⊙ D`.
pub fn contour_loss_var<T: Real>(detector: &impl ContourDetector, i_hat: &Var<T>, d: &Var<T>) -> Var<T> {
    detector.detect_var(i_hat).rsub_scalar(T::one()).mul(d).mean()
}

pub fn contour_loss(i_hat: &Frame, d: &DistanceMap) -> f64 {
    contour_loss_var::<f64>(&GradientDetector::default(), &i_hat.to_var(), &d.to_var()).item()
}

/// Photometric mean absolute error.
pub fn blend_loss_var<T: Real>(i_hat: &Var<T>, it: &Var<T>) -> Var<T> {
    i_hat.l1(it)
}

pub fn blend_loss(i_hat: &Frame, it: &Frame) -> f64 {
    blend_loss_var::<f64>(&i_hat.to_var(), &it.to_var()).item()
}

/// `L_blend + λ₁·L_warp + λ₂·L_contour`.
pub fn synthesis_loss_var<T: Real>(blend: &Var<T>, warp: &Var<T>, contour: &Var<T>) -> Var<T> {
    weighted_synthesis_loss_var(blend, warp, contour, LAMBDA_WARP, LAMBDA_CONTOUR)
}

/// `L_blend + λ_warp·L_warp + λ_contour·L_contour` with explicit weights.
pub fn weighted_synthesis_loss_var<T: Real>(blend: &Var<T>, warp: &Var<T>, contour: &Var<T>, lambda_warp: f64, lambda_contour: f64) -> Var<T> {
    blend.add(&warp.scale(T::lit(lambda_warp))).add(&contour.scale(T::lit(lambda_contour)))
}

pub fn synthesis_loss(blend: f64, warp: f64, contour: f64) -> f64 {
    synthesis_loss_var::<f64>(&Var::scalar(blend), &Var::scalar(warp), &Var::scalar(contour)).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mask_of_inverse_flows_is_zero() {
        let a = FlowField::constant(8, 8, 1.5, -2.0);
        let b = FlowField::constant(8, 8, -1.5, 2.0);
        let m = occlusion_mask(&a, &b).unwrap();
        assert!(m.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_of_two_pixel_cycle() {
        let m = occlusion_mask(&FlowField::zeros(6, 6), &FlowField::constant(6, 6, 2.0, 0.0)).unwrap();
        for &v in m.grid().data() {
            assert!((v as f64 - 1.0f64.tanh()).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let a = Frame::filled(4, 4, 0.2);
        let b = Frame::filled(4, 4, 0.8);
        let m = |v| BlendMask::new(Grid::filled(1, 4, 4, v)).unwrap();
        assert_eq!(blend(&a, &b, &m(1.0)).unwrap(), a);
        assert_eq!(blend(&a, &b, &m(0.0)).unwrap(), b);
        for &v in blend(&a, &b, &m(0.5)).unwrap().grid().data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_net_range_and_shape() {
        let net = BlendNet::new(&BlendConfig { hidden: vec![32, 32] });
        let mut store = ParamStore::<f32>::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let s = Session::inference(&store);
        let big = |c| Var::<f32>::new(vec![1, c, 5, 7], (0..35 * c).map(|i| ((i * 37) % 11) as f32 * 40.0 - 200.0).collect());
        let m = net.forward(&s, &big(3), &big(3), &big(1), &big(1), &big(1));
        assert_eq!(m.shape(), &[1, 1, 5, 7]);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn distance_transform_corner_pixel() {
        let mut g = Grid::filled(1, 3, 3, 0.0);
        g.set(0, 0, 0, 1.0);
        let d = distance_transform(&ContourMap::new(g).unwrap()).unwrap();
        let want = [0.0, 1.0, 2.0, 1.0, 2f32.sqrt(), 5f32.sqrt(), 2.0, 5f32.sqrt(), 8f32.sqrt()];
        assert_eq!(d.grid().data(), &want);
    }

    #[test]
    fn distance_transform_full_and_empty() {
        let full = ContourMap::new(Grid::filled(1, 4, 5, 1.0)).unwrap();
        assert!(distance_transform(&full).unwrap().grid().data().iter().all(|&v| v == 0.0));
        let empty = ContourMap::new(Grid::filled(1, 4, 5, 0.0)).unwrap();
        let err = distance_transform(&empty).unwrap_err();
        assert_eq!(err.to_string(), "empty ground-truth contours");
    }

    #[test]
    fn contour_loss_one_dimensional_case() {
        // E = [0,0,1,0,0] against D = [2,1,0,1,2]
        let d = Var::<f64>::new(vec![1, 1, 1, 5], vec![2.0, 1.0, 0.0, 1.0, 2.0]);
        let e = Var::<f64>::new(vec![1, 1, 1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let v = e.rsub_scalar(1.0).mul(&d).mean().item();
        assert!((v - 1.2).abs() < 1e-12);
    }

    #[test]
    fn losses_compose() {
        assert_eq!(synthesis_loss(0.0, 0.0, 0.0), 0.0);
        assert!((synthesis_loss(1.0, 2.0, 3.0) - 2.03).abs() < 1e-12);
        assert_eq!(blend_loss(&Frame::filled(4, 4, 0.0), &Frame::filled(4, 4, 1.0)), 1.0);
        assert_eq!(blend_loss(&Frame::filled(4, 4, 0.0), &Frame::filled(4, 4, 0.25)), 0.25);
        let d0 = DistanceMap::new(Grid::filled(1, 8, 8, 0.0)).unwrap();
        assert_eq!(contour_loss(&Frame::filled(8, 8, 0.3), &d0), 0.0);
    }
}
