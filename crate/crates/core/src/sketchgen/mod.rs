//! Synthetic sketches from colour frames.
//!
//! `detect_contours → threshold_and_prune → vectorize_smooth → rasterize`, with
//! the smoothing tolerance and stroke width drawn per sample.

mod detect;
mod prune;
mod raster;
mod vectorize;

pub use detect::{detect_contours, ContourDetector, GradientDetector, DEFAULT_SIGMAS, SKETCH_SIGMA};
pub use prune::{components, threshold_and_prune};
pub use raster::rasterize;
pub use vectorize::{douglas_peucker, thin, vectorize_smooth, Stroke, StrokeSet, DEFAULT_STROKE_WIDTH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Frame, Sketch};

/// Knobs of [`synth_sketch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchParams {
    /// Detector scale used for sketches.
    pub sigma: f64,
    pub thresh: f32,
    pub min_length: usize,
    /// Douglas–Peucker tolerance drawn uniformly from this range.
    pub smoothing: (f32, f32),
    pub width: f32,
    /// Stroke width is drawn from `width ± width_jitter`.
    pub width_jitter: f32,
}

impl Default for SketchParams {
    fn default() -> Self {
        Self {
            sigma: SKETCH_SIGMA,
            thresh: 0.25,
            min_length: 20,
            smoothing: (0.5, 1.5),
            width: DEFAULT_STROKE_WIDTH,
            width_jitter: 0.5,
        }
    }
}

impl SketchParams {
    /// No jitter: fixed smoothing at the middle of the range, nominal width.
    pub fn deterministic(&self) -> Self {
        let mid = 0.5 * (self.smoothing.0 + self.smoothing.1);
        Self { smoothing: (mid, mid), width_jitter: 0.0, ..self.clone() }
    }
}

/// Vector strokes of a frame, before rasterization.
pub fn synth_strokes(frame: &Frame, params: &SketchParams, rng: &mut impl Rng) -> StrokeSet {
    let (lo, hi) = params.smoothing;
    let smoothing = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let j = params.width_jitter;
    let width = if j > 0.0 { params.width + rng.random_range(-j..j) } else { params.width };
    let cmap = GradientDetector::level(params.sigma).detect(frame);
    let binary = threshold_and_prune(&cmap, params.thresh, params.min_length);
    let mut strokes = vectorize_smooth(&binary, smoothing);
    strokes.width = width.max(0.25);
    strokes
}

/// Hand-drawn-looking sketch of `frame`.
pub fn synth_sketch(frame: &Frame, params: &SketchParams, rng: &mut impl Rng) -> Sketch {
    let (h, w) = frame.dims();
    let sketch = rasterize(&synth_strokes(frame, params, rng), h, w);
    let ink = sketch.ink_fraction();
    if ink > 0.0 && !(0.002..=0.15).contains(&ink) {
        eprintln!("warning: synthetic sketch ink fraction {:.4} outside [0.002, 0.15]", ink);
    }
    sketch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ContourMap, Grid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc_frame(h: usize, w: usize, cx: f32, cy: f32, r: f32) -> Frame {
        Frame::new(Grid::from_fn(3, h, w, |c, y, x| {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            if d <= r {
                [0.9, 0.4, 0.2][c]
            } else {
                0.95
            }
        }))
        .unwrap()
    }

    #[test]
    fn constant_frame_gives_blank_sketch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = synth_sketch(&Frame::filled(32, 32, 0.6), &SketchParams::default(), &mut rng);
        assert!(s.grid().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn different_seeds_differ() {
        let f = disc_frame(48, 48, 24.0, 24.0, 12.0);
        let p = SketchParams::default();
        let a = synth_sketch(&f, &p, &mut ChaCha8Rng::seed_from_u64(1));
        let b = synth_sketch(&f, &p, &mut ChaCha8Rng::seed_from_u64(2));
        let c = synth_sketch(&f, &p, &mut ChaCha8Rng::seed_from_u64(1));
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn line_round_trip_within_one_pixel() {
        let (h, w) = (24, 48);
        let m = ContourMap::new(Grid::from_fn(1, h, w, |_, y, x| {
            if y == 12 && (8..40).contains(&x) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let s = rasterize(&vectorize_smooth(&m, 1.0), h, w);
        let truth: Vec<(f32, f32)> = (8..40).map(|x| (x as f32, 12.0)).collect();
        let ink: Vec<(f32, f32)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| s.grid().get(0, y, x) < 0.5)
            .map(|(x, y)| (x as f32, y as f32))
            .collect();
        assert!(!ink.is_empty());
        let near = |p: (f32, f32), set: &[(f32, f32)]| {
            set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f32::MAX, f32::min)
        };
        let a: f32 = ink.iter().map(|&p| near(p, &truth)).sum::<f32>() / ink.len() as f32;
        let b: f32 = truth.iter().map(|&p| near(p, &ink)).sum::<f32>() / truth.len() as f32;
        assert!(0.5 * (a + b) <= 1.0, "chamfer {}", 0.5 * (a + b));
    }

    #[test]
    fn sprite_sketch_hugs_the_boundary() {
        let (cx, cy, r) = (40.0f32, 30.0f32, 16.0f32);
        let f = disc_frame(64, 80, cx, cy, r);
        let s = synth_sketch(&f, &SketchParams::default(), &mut ChaCha8Rng::seed_from_u64(5));
        let (mut total, mut near) = (0.0f32, 0.0f32);
        for y in 0..64 {
            for x in 0..80 {
                let ink = 1.0 - s.grid().get(0, y, x);
                let d = (((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() - r).abs();
                total += ink;
                if d <= 3.0 {
                    near += ink;
                }
            }
        }
        assert!(total > 0.0);
        assert!(near / total >= 0.9, "{}", near / total);
    }
}
