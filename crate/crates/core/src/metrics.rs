//! Frame and flow quality metrics: ℓ1, PSNR, SSIM and endpoint error.

use crate::grid::{FlowField, Frame, Grid};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn assert_same(a: &Grid, b: &Grid) {
    assert!(a.same_shape(b), "metric inputs must share a shape");
}

/// Mean absolute difference over pixels and channels.
pub fn l1(a: &Frame, b: &Frame) -> f64 {
    grid_l1(a.grid(), b.grid())
}

pub fn grid_l1(a: &Grid, b: &Grid) -> f64 {
    assert_same(a, b);
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    s / a.data().len() as f64
}

pub fn mse(a: &Grid, b: &Grid) -> f64 {
    assert_same(a, b);
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    s / a.data().len() as f64
}

/// `10·log₁₀(1/MSE)` for unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Frame, b: &Frame) -> f64 {
    let m = mse(a.grid(), b.grid());
    if m == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity of two unit-range grids.
///
/// 11×11 Gaussian window (σ = 1.5), K₁ = 0.01, K₂ = 0.03, evaluated per channel on
/// the valid region and averaged over channels. Images smaller than the window
/// use a window shrunk to the image size.
pub fn grid_ssim(a: &Grid, b: &Grid) -> f64 {
    assert_same(a, b);
    let (h, w) = a.dims();
    let mut win = gaussian_window();
    let k = SSIM_WINDOW.min(h).min(w);
    if k < SSIM_WINDOW {
        let off = (SSIM_WINDOW - k) / 2;
        win = win[off..off + k].to_vec();
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let x: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &win);
        let (my, _, _) = filter_valid(&y, h, w, &win);
        let (sxx, _, _) = filter_valid(&xx, h, w, &win);
        let (syy, _, _) = filter_valid(&yy, h, w, &win);
        let (sxy, _, _) = filter_valid(&xy, h, w, &win);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    total / a.channels() as f64
}

pub fn ssim(a: &Frame, b: &Frame) -> f64 {
    grid_ssim(a.grid(), b.grid())
}

/// Mean endpoint error between two flows.
pub fn epe(f: &FlowField, g: &FlowField) -> f64 {
    epe_masked(f, g, None)
}

/// Mean endpoint error over pixels where `mask` is true (all pixels when `None`).
pub fn epe_masked(f: &FlowField, g: &FlowField, mask: Option<&[bool]>) -> f64 {
    assert_same(f.grid(), g.grid());
    let (h, w) = f.dims();
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m[y * w + x]) {
                continue;
            }
            let (a, b) = (f.at(y, x), g.at(y, x));
            s += ((a.0 - b.0) as f64).hypot((a.1 - b.1) as f64);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
