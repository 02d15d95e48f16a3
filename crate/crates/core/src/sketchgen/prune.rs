use crate::grid::{ContourMap, Grid};

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// 8-connected components of the pixels where `mask` is true, as index lists.
pub fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in NEIGHBORS8 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Binarizes `cmap` at `thresh` (inclusive) and removes 8-connected components
/// with fewer than `min_length` pixels.
pub fn threshold_and_prune(cmap: &ContourMap, thresh: f32, min_length: usize) -> ContourMap {
    assert!(thresh > 0.0 && thresh < 1.0, "threshold must be in (0, 1)");
    assert!(min_length >= 1, "min_length must be at least 1");
    let (h, w) = cmap.dims();
    let mask: Vec<bool> = cmap.grid().data().iter().map(|&v| v >= thresh).collect();
    let mut out = vec![0.0f32; h * w];
    for comp in components(&mask, h, w) {
        if comp.len() >= min_length {
            comp.into_iter().for_each(|i| out[i] = 1.0);
        }
    }
    ContourMap::new(Grid::new(1, h, w, out).expect("sized")).expect("binary")
}
