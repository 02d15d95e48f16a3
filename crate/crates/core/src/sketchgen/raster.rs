use crate::grid::{Grid, Sketch};

use super::vectorize::StrokeSet;

/// Sampling step along strokes before segment rasterization, in pixels.
const SAMPLE_STEP: f32 = 0.5;

fn segment_distance(px: f32, py: f32, a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    ((px - a[0] - t * dx).powi(2) + (py - a[1] - t * dy).powi(2)).sqrt()
}

/// Draws anti-aliased dark strokes (ink 0) on white paper (1).
///
/// Coverage of a pixel is `clamp(width/2 + 0.5 − d, 0, 1)` where `d` is the
/// distance from the pixel center to the nearest stroke segment.
pub fn rasterize(strokes: &StrokeSet, h: usize, w: usize) -> Sketch {
    let mut cover = vec![0.0f32; h * w];
    let half = strokes.width / 2.0;
    let reach = half + 0.5;
    for stroke in &strokes.strokes {
        let pts = stroke.sample(SAMPLE_STEP);
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
            let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            let y1 = ((a[1].max(b[1]) + reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = segment_distance(x as f32, y as f32, a, b);
                    let c = (reach - d).clamp(0.0, 1.0);
                    let slot = &mut cover[y * w + x];
                    if c > *slot {
                        *slot = c;
                    }
                }
            }
        }
    }
    let data = cover.into_iter().map(|c| 1.0 - c).collect();
    Sketch::new(Grid::new(1, h, w, data).expect("sized")).expect("values in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketchgen::vectorize::{Stroke, DEFAULT_STROKE_WIDTH};

    #[test]
    fn empty_set_is_blank_paper() {
        let s = rasterize(&StrokeSet::empty(1.5), 12, 9);
        assert!(s.grid().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn horizontal_stroke_profile() {
        let set = StrokeSet {
            strokes: vec![Stroke { points: vec![[2.0, 5.0], [20.0, 5.0]], closed: false }],
            width: DEFAULT_STROKE_WIDTH,
        };
        let s = rasterize(&set, 12, 24);
        let row_min = (0..24).map(|x| s.grid().get(0, 5, x)).fold(1.0, f32::min);
        assert!(row_min < 0.2);
        for y in 0..12usize {
            if (y as isize - 5).abs() > 2 {
                assert!((0..24).all(|x| s.grid().get(0, y, x) == 1.0), "row {y} has ink");
            }
        }
    }
}
