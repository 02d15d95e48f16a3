//! Binary contour map → smooth vector strokes.
//!
//! Zhang–Suen thinning reduces every component to a one-pixel skeleton, a greedy
//! walk turns skeleton pixels into ordered paths, Douglas–Peucker keeps the
//! salient points and a uniform Catmull-Rom spline through them gives the curve.

use serde::{Deserialize, Serialize};

use crate::grid::ContourMap;

/// Default stroke width of synthetic sketches, in pixels.
pub const DEFAULT_STROKE_WIDTH: f32 = 1.5;

/// One stroke: Catmull-Rom control points in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<[f32; 2]>,
    #[serde(default)]
    pub closed: bool,
}

/// A set of strokes drawn with a common width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeSet {
    pub strokes: Vec<Stroke>,
    pub width: f32,
}

impl StrokeSet {
    pub fn empty(width: f32) -> Self {
        Self { strokes: Vec::new(), width }
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    /// Debug form: a JSON array of point lists.
    pub fn to_json(&self) -> String {
        let lists: Vec<&Vec<[f32; 2]>> = self.strokes.iter().map(|s| &s.points).collect();
        serde_json::to_string(&lists).expect("plain floats serialize")
    }

    /// Checks the "≥ 2 points, coordinates within the overshoot margin" invariant.
    pub fn is_valid_for(&self, h: usize, w: usize) -> bool {
        let margin = 8.0;
        self.strokes.iter().all(|s| {
            s.points.len() >= 2
                && s.points.iter().all(|&[x, y]| {
                    x >= -margin && y >= -margin && x <= w as f32 + margin && y <= h as f32 + margin
                })
        })
    }
}

impl Stroke {
    /// Dense polyline along the spline, about `step` pixels between samples.
    pub fn sample(&self, step: f32) -> Vec<[f32; 2]> {
        let p = &self.points;
        let n = p.len();
        if n < 2 {
            return p.clone();
        }
        let segs = if self.closed { n } else { n - 1 };
        let at = |i: isize| -> [f32; 2] {
            if self.closed {
                p[i.rem_euclid(n as isize) as usize]
            } else {
                p[i.clamp(0, n as isize - 1) as usize]
            }
        };
        let mut out = Vec::new();
        for s in 0..segs as isize {
            let (p0, p1, p2, p3) = (at(s - 1), at(s), at(s + 1), at(s + 2));
            let len = ((p2[0] - p1[0]).powi(2) + (p2[1] - p1[1]).powi(2)).sqrt();
            let k = ((len / step).ceil() as usize).max(1);
            for j in 0..k {
                let t = j as f32 / k as f32;
                out.push(catmull_rom(p0, p1, p2, p3, t));
            }
        }
        out.push(if self.closed { p[0] } else { p[n - 1] });
        out
    }

    /// Arc length of the sampled curve.
    pub fn length(&self) -> f32 {
        self.sample(0.25)
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }
}

fn catmull_rom(p0: [f32; 2], p1: [f32; 2], p2: [f32; 2], p3: [f32; 2], t: f32) -> [f32; 2] {
    let (t2, t3) = (t * t, t * t * t);
    let f = |a: f32, b: f32, c: f32, d: f32| {
        0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
    };
    [f(p0[0], p1[0], p2[0], p3[0]), f(p0[1], p1[1], p2[1], p3[1])]
}

/// Zhang–Suen thinning of a binary mask, in place.
pub fn thin(mask: &mut [bool], h: usize, w: usize) {
    let get = |m: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !mask[y as usize * w + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        get(mask, y - 1, x),
                        get(mask, y - 1, x + 1),
                        get(mask, y, x + 1),
                        get(mask, y + 1, x + 1),
                        get(mask, y + 1, x),
                        get(mask, y + 1, x - 1),
                        get(mask, y, x - 1),
                        get(mask, y - 1, x - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            remove.into_iter().for_each(|i| mask[i] = false);
        }
        if !changed {
            break;
        }
    }
}

const FOUR: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
const DIAG: [(isize, isize); 4] = [(1, 1), (1, -1), (-1, -1), (-1, 1)];

/// Orders skeleton pixels into paths. Endpoints seed walks first; leftover
/// pixels (loops) seed walks afterwards. Returns `(path, closed)` pairs.
fn trace(mask: &[bool], h: usize, w: usize) -> Vec<(Vec<(usize, usize)>, bool)> {
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    let degree = |y: usize, x: usize| {
        FOUR.iter()
            .chain(&DIAG)
            .filter(|(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                inside(ny, nx) && mask[ny as usize * w + nx as usize]
            })
            .count()
    };
    let mut visited = vec![false; h * w];
    let mut paths = Vec::new();
    let mut seeds: Vec<usize> = (0..h * w).filter(|&i| mask[i] && degree(i / w, i % w) == 1).collect();
    seeds.extend((0..h * w).filter(|&i| mask[i]));
    for seed in seeds {
        if visited[seed] {
            continue;
        }
        let mut path = vec![(seed / w, seed % w)];
        visited[seed] = true;
        loop {
            let (y, x) = *path.last().expect("non-empty");
            let next = FOUR.iter().chain(&DIAG).find_map(|(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                (inside(ny, nx) && mask[ny as usize * w + nx as usize] && !visited[ny as usize * w + nx as usize])
                    .then_some((ny as usize, nx as usize))
            });
            match next {
                Some((ny, nx)) => {
                    visited[ny * w + nx] = true;
                    path.push((ny, nx));
                }
                None => break,
            }
        }
        let (sy, sx) = path[0];
        let (ey, ex) = *path.last().expect("non-empty");
        let closed = path.len() >= 8 && sy.abs_diff(ey) <= 1 && sx.abs_diff(ex) <= 1;
        paths.push((path, closed));
    }
    paths
}

fn point_segment_distance(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Douglas–Peucker simplification keeping both endpoints.
pub fn douglas_peucker(points: &[[f32; 2]], tolerance: f32) -> Vec<[f32; 2]> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let (mut best, mut best_d) = (a, -1.0f32);
        for i in a + 1..b {
            let d = point_segment_distance(points[i], points[a], points[b]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > tolerance {
            keep[best] = true;
            stack.push((a, best));
            stack.push((best, b));
        }
    }
    points.iter().zip(keep).filter_map(|(p, k)| k.then_some(*p)).collect()
}

/// Traces a binary contour map into smooth strokes of [`DEFAULT_STROKE_WIDTH`].
pub fn vectorize_smooth(binary: &ContourMap, smoothing: f32) -> StrokeSet {
    let (h, w) = binary.dims();
    let mut mask: Vec<bool> = binary.grid().data().iter().map(|&v| v >= 0.5).collect();
    thin(&mut mask, h, w);
    let mut strokes = Vec::new();
    for (path, closed) in trace(&mask, h, w) {
        if path.len() < 2 {
            continue;
        }
        let pts: Vec<[f32; 2]> = path.iter().map(|&(y, x)| [x as f32, y as f32]).collect();
        let stroke = if closed {
            // split the loop at its far point so both halves keep their shape
            let far = (1..pts.len())
                .max_by(|&i, &j| {
                    let d = |k: usize| (pts[k][0] - pts[0][0]).powi(2) + (pts[k][1] - pts[0][1]).powi(2);
                    d(i).total_cmp(&d(j))
                })
                .expect("loop has points");
            let mut a = douglas_peucker(&pts[..=far], smoothing);
            let mut ring = pts[far..].to_vec();
            ring.push(pts[0]);
            let b = douglas_peucker(&ring, smoothing);
            a.pop();
            a.extend(&b[..b.len() - 1]);
            if a.len() < 3 {
                a = pts.clone();
            }
            Stroke { points: a, closed: true }
        } else {
            Stroke { points: douglas_peucker(&pts, smoothing), closed: false }
        };
        strokes.push(stroke);
    }
    StrokeSet { strokes, width: DEFAULT_STROKE_WIDTH }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn binary(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> ContourMap {
        ContourMap::new(Grid::from_fn(1, h, w, |_, y, x| if on(y, x) { 1.0 } else { 0.0 })).unwrap()
    }

    #[test]
    fn empty_map_gives_no_strokes() {
        assert!(vectorize_smooth(&binary(10, 10, |_, _| false), 1.0).is_empty());
    }

    #[test]
    fn straight_line_stays_on_the_line() {
        let m = binary(20, 50, |y, x| y == 10 && (10..40).contains(&x));
        let s = vectorize_smooth(&m, 1.0);
        assert_eq!(s.len(), 1);
        for [_, y] in s.strokes[0].sample(0.5) {
            assert!((y - 10.0).abs() < 0.75);
        }
        assert!(s.is_valid_for(20, 50));
    }

    #[test]
    fn thick_line_is_thinned_to_one_stroke() {
        let m = binary(20, 50, |y, x| (9..=11).contains(&y) && (10..40).contains(&x));
        let s = vectorize_smooth(&m, 1.0);
        assert_eq!(s.len(), 1);
        assert!(s.strokes[0].length() > 20.0);
    }

    #[test]
    fn circle_becomes_closed_stroke_with_correct_length() {
        let (cx, cy, r) = (20.0f32, 20.0f32, 10.0f32);
        let m = binary(40, 40, |y, x| {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            (d - r).abs() < 0.5
        });
        let s = vectorize_smooth(&m, 1.0);
        assert_eq!(s.len(), 1, "{:?}", s.strokes.iter().map(|s| s.points.len()).collect::<Vec<_>>());
        assert!(s.strokes[0].closed);
        let len = s.strokes[0].length();
        let want = 2.0 * std::f32::consts::PI * r;
        assert!((len - want).abs() / want < 0.1, "length {len} vs {want}");
    }

    #[test]
    fn json_is_array_of_point_lists() {
        let s = StrokeSet {
            strokes: vec![Stroke { points: vec![[0.0, 1.0], [2.0, 3.0]], closed: false }],
            width: 1.5,
        };
        assert_eq!(s.to_json(), "[[[0.0,1.0],[2.0,3.0]]]");
    }
}
