use crate::autograd::Var;
use crate::grid::{ContourMap, Frame, Grid};
use crate::real::Real;

/// Differentiable soft edge detector, `(N, 3, H, W) → (N, 1, H, W)` in `[0, 1)`.
///
/// Anything implementing this can stand in for the default detector, both for
/// sketch synthesis and inside the contour loss.
pub trait ContourDetector: Send + Sync {
    fn detect_var<T: Real>(&self, frames: &Var<T>) -> Var<T>;

    fn detect(&self, frame: &Frame) -> ContourMap {
        let out = self.detect_var::<f32>(&frame.to_var());
        ContourMap::new(Grid::from_var(&out, 0).map(|v| v.clamp(0.0, 1.0))).expect("detector output in range")
    }
}

/// Multi-scale gradient-magnitude detector.
///
/// Per scale σ: Gaussian blur (replicate borders), central-difference gradients,
/// per-channel magnitude reduced by the channel maximum, scaled by `σ√(2π)` so that a unit
/// step edge peaks at 1 at every scale, then squashed with `tanh(gain · m)`.
/// Responses are averaged over the selected scales.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDetector {
    pub sigmas: Vec<f64>,
    pub gain: f64,
}

/// Scales of the default detector.
pub const DEFAULT_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];
/// Scale standing in for the "second level" side output used for sketches.
pub const SKETCH_SIGMA: f64 = 2.0;

const MAGNITUDE_EPS: f64 = 1e-8;

impl Default for GradientDetector {
    fn default() -> Self {
        Self { sigmas: DEFAULT_SIGMAS.to_vec(), gain: 4.0 }
    }
}

impl GradientDetector {
    /// Single-scale variant.
    pub fn level(sigma: f64) -> Self {
        Self { sigmas: vec![sigma], ..Self::default() }
    }
}

impl ContourDetector for GradientDetector {
    fn detect_var<T: Real>(&self, frames: &Var<T>) -> Var<T> {
        assert!(!self.sigmas.is_empty(), "detector needs at least one scale");
        let mut acc: Option<Var<T>> = None;
        for &sigma in &self.sigmas {
            let blurred = frames.gaussian_blur(sigma);
            let magnitude = blurred
                .diff_x()
                .square()
                .add(&blurred.diff_y().square())
                .sqrt_eps(T::lit(MAGNITUDE_EPS))
                .max_channels();
            let norm = sigma * (2.0 * std::f64::consts::PI).sqrt();
            let response = magnitude.scale(T::lit(norm * self.gain)).tanh();
            acc = Some(match acc {
                None => response,
                Some(a) => a.add(&response),
            });
        }
        acc.expect("non-empty").scale(T::lit(1.0 / self.sigmas.len() as f64))
    }
}

/// Contour map of a frame with the default multi-scale detector.
pub fn detect_contours(frame: &Frame) -> ContourMap {
    GradientDetector::default().detect(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_frame_has_no_contours() {
        let c = detect_contours(&Frame::filled(24, 24, 0.4));
        assert!(c.grid().data().iter().all(|&v| v < 0.05));
    }

    #[test]
    fn vertical_split_peaks_at_the_split() {
        let (h, w, split) = (20, 32, 13);
        let f = Frame::new(Grid::from_fn(3, h, w, |c, _, x| {
            if x < split {
                0.2
            } else if c == 0 {
                0.9
            } else {
                0.5
            }
        }))
        .unwrap();
        let c = detect_contours(&f);
        for y in 0..h {
            let row: Vec<f32> = (0..w).map(|x| c.grid().get(0, y, x)).collect();
            let max = row.iter().cloned().fold(0.0, f32::max);
            let argmax: Vec<usize> = (0..w).filter(|&x| row[x] >= max - 1e-6).collect();
            // the step lies between columns split-1 and split
            let (lo, hi) = (*argmax.first().unwrap(), *argmax.last().unwrap());
            assert!(hi - lo < 3, "row {y}: argmax band {argmax:?}");
            assert!(lo + 2 >= split && hi <= split + 1, "row {y}: argmax band {argmax:?}");
        }
    }

    #[test]
    fn brightness_offset_does_not_change_response() {
        let f = Frame::new(Grid::from_fn(3, 16, 16, |c, y, x| {
            0.3 + 0.3 * (((x * 3 + y * 5 + c) as f32) * 0.4).sin()
        }))
        .unwrap();
        let g = Frame::new(f.grid().map(|v| v + 0.1)).unwrap();
        let (a, b) = (detect_contours(&f), detect_contours(&g));
        for (x, y) in a.grid().data().iter().zip(b.grid().data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
