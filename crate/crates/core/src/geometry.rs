//! Bilinear sampling, backward warping and flow composition.
//!
//! The `*_var` functions are the differentiable tensor forms used inside the
//! networks; the plain functions wrap them for single images.

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::grid::{identity_coords, FlowField, Grid, PointGrid};
use crate::real::Real;

/// `v(p, f) = p + f(p)` for a batch of flows (N, 2, H, W).
pub fn map_points_var<T: Real>(flow: &Var<T>) -> Var<T> {
    let (n, two, h, w) = flow.dims4();
    assert_eq!(two, 2, "map_points: flow must have 2 channels");
    flow.add(&identity_coords(n, h, w))
}

/// `w(image, flow)`: samples `image` at `p + flow(p)` with border clamping.
pub fn backward_warp_var<T: Real>(image: &Var<T>, flow: &Var<T>) -> Var<T> {
    let (n, _, h, w) = image.dims4();
    let (fn_, _, fh, fw) = flow.dims4();
    assert_eq!((n, h, w), (fn_, fh, fw), "backward_warp: image/flow shape mismatch");
    image.grid_sample(&map_points_var(flow))
}

/// Per-pixel `‖v(v(p, f_ab), f_ba) − p‖₂` as an (N, 1, H, W) tensor.
///
/// `f_ba` is sampled bilinearly (border clamp) at the fractional point `v(p, f_ab)`.
pub fn cyclic_displacement_var<T: Real>(f_ab: &Var<T>, f_ba: &Var<T>) -> Var<T> {
    assert_eq!(f_ab.shape(), f_ba.shape(), "cyclic_displacement: shape mismatch");
    // v(v(p, f_ab), f_ba) − p = f_ab(p) + f_ba(v(p, f_ab))
    let back = f_ba.grid_sample(&map_points_var(f_ab));
    f_ab.add(&back).norm_channels()
}

impl<T: Real> Var<T> {
    /// Euclidean norm across channels, (N, C, H, W) → (N, 1, H, W).
    ///
    /// The gradient at a zero vector is taken as zero.
    pub fn norm_channels(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            for p in 0..plane {
                let mut s = T::zero();
                for ch in 0..c {
                    let v = self.data()[(b * c + ch) * plane + p];
                    s += v * v;
                }
                out[b * plane + p] = s.sqrt();
            }
        }
        let (x, norms) = (self.clone(), out.clone());
        Var::from_op(vec![n, 1, h, w], out, &[self], move |g| {
            let mut gx = vec![T::zero(); n * c * plane];
            for b in 0..n {
                for p in 0..plane {
                    let nv = norms[b * plane + p];
                    if nv == T::zero() {
                        continue;
                    }
                    let gv = g[b * plane + p] / nv;
                    for ch in 0..c {
                        let i = (b * c + ch) * plane + p;
                        gx[i] = gv * x.data()[i];
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            expected: format!("{what} {}x{}", a.0, a.1),
            got: format!("{}x{}", b.0, b.1),
        });
    }
    Ok(())
}

/// Bilinear interpolation of `image` at `coords` (border clamped).
///
/// The output has the spatial size of `coords` and the channel count of `image`.
pub fn bilinear_sample(image: &Grid, coords: &PointGrid) -> Result<Grid> {
    if !coords.grid().all_finite() {
        return Err(contract("bilinear_sample: non-finite coordinates"));
    }
    let out = image.to_var::<f32>().grid_sample(&coords.to_var());
    Ok(Grid::from_var(&out, 0))
}

/// Backward warp of any image-like grid by a flow of the same spatial size.
pub fn backward_warp(image: &Grid, flow: &FlowField) -> Result<Grid> {
    check_same_dims(image.dims(), flow.dims(), "image")?;
    let out = backward_warp_var(&image.to_var::<f32>(), &flow.to_var());
    Ok(Grid::from_var(&out, 0))
}

/// `p + f(p)` without clamping.
pub fn map_points(flow: &FlowField) -> PointGrid {
    let out = map_points_var(&flow.to_var::<f32>());
    PointGrid::new(Grid::from_var(&out, 0)).expect("finite flow gives finite points")
}

/// Round-trip displacement magnitude of `f_ab` followed by `f_ba`.
pub fn cyclic_displacement(f_ab: &FlowField, f_ba: &FlowField) -> Result<Grid> {
    check_same_dims(f_ab.dims(), f_ba.dims(), "flow")?;
    let out = cyclic_displacement_var(&f_ab.to_var::<f32>(), &f_ba.to_var());
    Ok(Grid::from_var(&out, 0))
}
