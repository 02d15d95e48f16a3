//! Synthetic cartoon clips: outlined, patterned sprites moving over a static
//! painted background, with analytic flow between any two times.

use rand::Rng;
use serde::{Deserialize, Serialize};
use toonbetween_core::{FlowField, Frame, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipse { rx: f64, ry: f64 },
    RoundRect { hx: f64, hy: f64, r: f64 },
}

impl Shape {
    /// Signed distance in local units (negative inside).
    fn sdf(&self, u: [f64; 2]) -> f64 {
        match *self {
            Shape::Ellipse { rx, ry } => {
                // first-order distance estimate, exact on circles
                let k = ((u[0] / rx).powi(2) + (u[1] / ry).powi(2)).sqrt();
                let g = ((u[0] / (rx * rx)).powi(2) + (u[1] / (ry * ry)).powi(2)).sqrt();
                if g < 1e-12 {
                    -rx.min(ry)
                } else {
                    k * (k - 1.0) / g
                }
            }
            Shape::RoundRect { hx, hy, r } => {
                let qx = u[0].abs() - (hx - r);
                let qy = u[1].abs() - (hy - r);
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0) - r
            }
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Ellipse { rx, ry } => rx.max(ry),
            Shape::RoundRect { hx, hy, .. } => (hx * hx + hy * hy).sqrt(),
        }
    }
}

/// Pose over time: quadratic path, linear rotation and scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub origin: [f64; 2],
    pub velocity: [f64; 2],
    pub acceleration: [f64; 2],
    pub angle: f64,
    pub spin: f64,
    pub scale: f64,
    pub growth: f64,
}

impl Motion {
    pub fn translation(origin: [f64; 2], velocity: [f64; 2]) -> Self {
        Self { origin, velocity, acceleration: [0.0; 2], angle: 0.0, spin: 0.0, scale: 1.0, growth: 0.0 }
    }

    fn pose(&self, tau: f64) -> ([f64; 2], f64, f64) {
        let c = [
            self.origin[0] + self.velocity[0] * tau + self.acceleration[0] * tau * tau,
            self.origin[1] + self.velocity[1] * tau + self.acceleration[1] * tau * tau,
        ];
        (c, self.angle + self.spin * tau, self.scale * (1.0 + self.growth * tau))
    }

    fn to_local(&self, p: [f64; 2], tau: f64) -> ([f64; 2], f64) {
        let (c, th, s) = self.pose(tau);
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        let (sn, cs) = th.sin_cos();
        ([(cs * dx + sn * dy) / s, (-sn * dx + cs * dy) / s], s)
    }

    fn to_world(&self, u: [f64; 2], tau: f64) -> [f64; 2] {
        let (c, th, s) = self.pose(tau);
        let (sn, cs) = th.sin_cos();
        [c[0] + s * (cs * u[0] - sn * u[1]), c[1] + s * (sn * u[0] + cs * u[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    pub fill: [f32; 3],
    pub accent: [f32; 3],
    /// Stripe frequency (radians per local unit) and direction.
    pub stripes: f64,
    pub stripe_angle: f64,
    pub outline: f64,
    pub motion: Motion,
}

const INK: f32 = 0.08;

impl Sprite {
    /// Coverage and colour at world point `p`, time `tau`.
    fn sample(&self, p: [f64; 2], tau: f64) -> (f64, [f32; 3]) {
        let (u, s) = self.motion.to_local(p, tau);
        let d = self.shape.sdf(u) * s;
        let alpha = (0.5 - d).clamp(0.0, 1.0);
        if alpha == 0.0 {
            return (0.0, [0.0; 3]);
        }
        let (sn, cs) = self.stripe_angle.sin_cos();
        let m = (0.5 + 0.5 * (self.stripes * (cs * u[0] + sn * u[1])).sin()) as f32;
        let ink = ((d + self.outline + 0.5).clamp(0.0, 1.0)) as f32;
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            let base = self.fill[k] * (1.0 - m) + self.accent[k] * m;
            *v = base * (1.0 - ink) + INK * ink;
        }
        (alpha, c)
    }

    fn covers(&self, p: [f64; 2], tau: f64) -> bool {
        let (u, s) = self.motion.to_local(p, tau);
        self.shape.sdf(u) * s < 0.0
    }
}

/// Static painted background: two-tone gradient with soft waves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub top: [f32; 3],
    pub bottom: [f32; 3],
    pub wave: [f64; 3],
}

impl Background {
    fn at(&self, x: f64, y: f64, h: usize) -> [f32; 3] {
        let g = (y / h.max(2) as f64) as f32;
        let ripple = 0.06 * ((x * self.wave[0] + y * self.wave[1]).sin() * (y * self.wave[2]).cos()) as f32;
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            *v = (self.top[k] * (1.0 - g) + self.bottom[k] * g + ripple).clamp(0.0, 1.0);
        }
        c
    }
}

/// Kind of motion drawn by [`SpriteScene::random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionKind {
    Translation,
    Parabolic,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub kind: MotionKind,
    /// Largest sprite-centre displacement over the unit time interval.
    pub max_displacement: f64,
}

impl SceneOptions {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, sprites: 2, kind: MotionKind::Affine, max_displacement: 16.0 }
    }
}

/// Sprites in back-to-front order over a background, moving over `τ ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteScene {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
}

fn color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl SpriteScene {
    pub fn random(opts: &SceneOptions, rng: &mut impl Rng) -> Self {
        let (h, w) = (opts.height as f64, opts.width as f64);
        let size = h.min(w);
        let background = Background {
            top: color(rng, 0.55, 0.95),
            bottom: color(rng, 0.45, 0.9),
            wave: [rng.random_range(0.05..0.15), rng.random_range(0.05..0.15), rng.random_range(0.03..0.1)],
        };
        let sprites = (0..opts.sprites)
            .map(|_| {
                let a = rng.random_range(0.12..0.22) * size;
                let b = a * rng.random_range(0.6..1.0);
                let shape = if rng.random_bool(0.5) {
                    Shape::Ellipse { rx: a, ry: b }
                } else {
                    Shape::RoundRect { hx: a, hy: b, r: 0.3 * b }
                };
                let margin = shape.extent() * 0.5;
                let dmax = opts.max_displacement;
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let len = rng.random_range(0.4..1.0) * dmax;
                let velocity = [len * ang.cos(), len * ang.sin()];
                // both end points keep the centre at least `margin` from the border
                let mut place = |extent: f64, v: f64| {
                    let lo = margin.max(margin - v);
                    let hi = (extent - margin).min(extent - margin - v);
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        0.5 * (extent - v)
                    }
                };
                let origin = [place(w, velocity[0]), place(h, velocity[1])];
                let mut motion = Motion::translation(origin, velocity);
                if matches!(opts.kind, MotionKind::Parabolic | MotionKind::Affine) {
                    // bend the path while keeping the end point: p(1) = origin + velocity
                    let bend = [rng.random_range(-0.5..0.5) * dmax, rng.random_range(-0.5..0.5) * dmax];
                    motion.velocity = [velocity[0] - bend[0], velocity[1] - bend[1]];
                    motion.acceleration = bend;
                }
                if opts.kind == MotionKind::Affine {
                    motion.angle = rng.random_range(-0.5..0.5);
                    motion.spin = rng.random_range(-0.25..0.25);
                    motion.growth = rng.random_range(-0.1..0.1);
                }
                Sprite {
                    shape,
                    fill: color(rng, 0.1, 0.9),
                    accent: color(rng, 0.1, 0.9),
                    stripes: rng.random_range(0.3..0.8),
                    stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
                    outline: rng.random_range(1.0..2.0),
                    motion,
                }
            })
            .collect();
        Self { height: opts.height, width: opts.width, background, sprites }
    }

    pub fn render(&self, tau: f64) -> Frame {
        let mut data = vec![0.0f32; 3 * self.height * self.width];
        let plane = self.height * self.width;
        for y in 0..self.height {
            for x in 0..self.width {
                let p = [x as f64, y as f64];
                let mut c = self.background.at(p[0], p[1], self.height);
                for s in &self.sprites {
                    let (a, sc) = s.sample(p, tau);
                    if a > 0.0 {
                        for k in 0..3 {
                            c[k] = c[k] * (1.0 - a as f32) + sc[k] * a as f32;
                        }
                    }
                }
                for k in 0..3 {
                    data[k * plane + y * self.width + x] = c[k];
                }
            }
        }
        Frame::new(Grid::new(3, self.height, self.width, data).expect("sized")).expect("in range")
    }

    /// Index of the front-most sprite whose interior contains `p` at `tau`.
    fn owner(&self, p: [f64; 2], tau: f64) -> Option<usize> {
        self.sprites.iter().rposition(|s| s.covers(p, tau))
    }

    /// Backward flow `f_{a→b}`: the point of frame `a` at pixel `p` appears at
    /// `p + f(p)` in frame `b`. Background pixels have zero flow.
    pub fn flow(&self, a: f64, b: f64) -> FlowField {
        FlowField::from_fn(self.height, self.width, |y, x| {
            let p = [x as f64, y as f64];
            match self.owner(p, a) {
                Some(i) => {
                    let m = &self.sprites[i].motion;
                    let (u, _) = m.to_local(p, a);
                    let q = m.to_world(u, b);
                    ((q[0] - p[0]) as f32, (q[1] - p[1]) as f32)
                }
                None => (0.0, 0.0),
            }
        })
    }

    /// Pixels covered by any sprite at `tau`.
    pub fn sprite_mask(&self, tau: f64) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.owner([x as f64, y as f64], tau).is_some());
            }
        }
        out
    }

    /// Pixels at `a` whose content is also visible at `b` (same owner at the target).
    pub fn visible_mask(&self, a: f64, b: f64) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = [x as f64, y as f64];
                let ok = match self.owner(p, a) {
                    Some(i) => {
                        let m = &self.sprites[i].motion;
                        let q = m.to_world(m.to_local(p, a).0, b);
                        self.owner(q, b) == Some(i)
                    }
                    None => self.owner(p, b).is_none(),
                };
                out.push(ok);
            }
        }
        out
    }

    /// Frames at `n` evenly spaced times `i / (n − 1)`.
    pub fn clip(&self, n: usize) -> Vec<Frame> {
        assert!(n >= 2, "a clip needs two frames");
        (0..n).map(|i| self.render(i as f64 / (n - 1) as f64)).collect()
    }
}
