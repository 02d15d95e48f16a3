//! Sketch-to-frame correspondence.
//!
//! A dilated residual transformer lifts the sketch (conditioned on both
//! keyframes) into a dense feature image. Two feature pyramids with identical
//! layout but separate weights embed the sketch features and the frames, and a
//! shared coarse-to-fine decoder turns local cost volumes into flow.

use rand_chacha::ChaCha8Rng;
use toonbetween_core::geometry::backward_warp_var;
use toonbetween_core::nn::{lrelu, Conv2d, ParamStore, Session};
use toonbetween_core::{ConvOpts, Error, FlowField, Frame, Grid, Real, Result, Sketch, Var};

use crate::config::CorrespondenceConfig;

/// Which pyramid weights to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Sketch,
    Frame,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Sketch => "corr.sketch_pyramid",
            Branch::Frame => "corr.frame_pyramid",
        }
    }
}

/// The four flows between time `t` and the keyframes, as graph tensors.
#[derive(Debug, Clone)]
pub struct FlowVars<T: Real> {
    pub t0: Var<T>,
    pub f0t: Var<T>,
    pub t1: Var<T>,
    pub f1t: Var<T>,
}

/// Bidirectional flows between the sketch time and both keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceResult {
    pub f_t0: FlowField,
    pub f_0t: FlowField,
    pub f_t1: FlowField,
    pub f_1t: FlowField,
}

impl<T: Real> FlowVars<T> {
    pub fn to_result(&self, index: usize) -> Result<CorrespondenceResult> {
        let get = |v: &Var<T>| FlowField::new(Grid::from_var(v, index));
        Ok(CorrespondenceResult { f_t0: get(&self.t0)?, f_0t: get(&self.f0t)?, f_t1: get(&self.t1)?, f_1t: get(&self.f1t)? })
    }
}

impl CorrespondenceResult {
    pub fn to_vars<T: Real>(&self) -> FlowVars<T> {
        FlowVars { t0: self.f_t0.to_var(), f0t: self.f_0t.to_var(), t1: self.f_t1.to_var(), f1t: self.f_1t.to_var() }
    }
}

struct Decoder {
    hidden: Vec<Conv2d>,
    out: Conv2d,
    context: Vec<Conv2d>,
}

/// Correspondence network.
pub struct Correspondence {
    cfg: CorrespondenceConfig,
    entry: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    exit: Conv2d,
    sketch_pyramid: Vec<(Conv2d, Conv2d)>,
    frame_pyramid: Vec<(Conv2d, Conv2d)>,
    decoders: Vec<Decoder>,
}

fn pyramid_layers(prefix: &str, in_channels: usize, channels: &[usize]) -> Vec<(Conv2d, Conv2d)> {
    let mut prev = in_channels;
    channels
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let opts = if l == 0 { ConvOpts::same(3) } else { ConvOpts::strided(3, 2) };
            let a = Conv2d::new(format!("{prefix}.level{l}.a"), prev, c, 3, opts);
            let b = Conv2d::new(format!("{prefix}.level{l}.b"), c, c, 3, ConvOpts::same(3));
            prev = c;
            (a, b)
        })
        .collect()
}

/// Scales each flow vector `r` to `r·d/√(d² + |r|²)`, keeping its length below `d`.
fn soft_clamp_norm<T: Real>(r: &Var<T>, d: f64) -> Var<T> {
    let (_, c, _, _) = r.dims4();
    let s = r.square().sum_channels().add_scalar(T::lit(d * d)).sqrt_eps(T::zero()).recip().scale(T::lit(d));
    r.mul(&s.broadcast_channels(c))
}

impl Correspondence {
    pub fn new(cfg: &CorrespondenceConfig) -> Self {
        assert!(cfg.levels() >= 2, "pyramid needs at least two levels");
        assert!(cfg.finest_level < cfg.levels(), "finest level outside the pyramid");
        let c0 = cfg.transformer_channels;
        let entry = Conv2d::new("corr.transformer.entry", 7, c0, 3, ConvOpts::dilated(3, 2));
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                (
                    Conv2d::new(format!("corr.transformer.block{i}.a"), c0, c0, 3, ConvOpts::dilated(3, d)),
                    Conv2d::new(format!("corr.transformer.block{i}.b"), c0, c0, 3, ConvOpts::dilated(3, d)),
                )
            })
            .collect();
        let exit = Conv2d::new("corr.transformer.exit", c0, c0, 3, ConvOpts::dilated(3, 4));
        let span = 2 * cfg.search_radius + 1;
        let decoders = cfg
            .pyramid_channels
            .iter()
            .enumerate()
            .map(|(l, &cl)| {
                let mut prev = span * span + cl + 2;
                let hidden = cfg
                    .decoder_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let conv = Conv2d::new(format!("corr.decoder{l}.conv{i}"), prev, c, 3, ConvOpts::same(3));
                        prev = c;
                        conv
                    })
                    .collect();
                let out = Conv2d::new(format!("corr.decoder{l}.flow"), prev, 2, 3, ConvOpts::same(3));
                let mut cprev = prev + 2;
                let n = cfg.context_dilations.len();
                let context = cfg
                    .context_dilations
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let c = if i + 1 == n { 2 } else { cfg.context_channels };
                        let conv = Conv2d::new(format!("corr.decoder{l}.context{i}"), cprev, c, 3, ConvOpts::dilated(3, d));
                        cprev = c;
                        conv
                    })
                    .collect();
                Decoder { hidden, out, context }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            entry,
            blocks,
            exit,
            sketch_pyramid: pyramid_layers(Branch::Sketch.prefix(), c0, &cfg.pyramid_channels),
            frame_pyramid: pyramid_layers(Branch::Frame.prefix(), 3, &cfg.pyramid_channels),
            decoders,
        }
    }

    pub fn config(&self) -> &CorrespondenceConfig {
        &self.cfg
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.entry.init(store, rng);
        for (a, b) in &self.blocks {
            a.init(store, rng);
            b.init(store, rng);
        }
        self.exit.init(store, rng);
        for (a, b) in self.sketch_pyramid.iter().chain(&self.frame_pyramid) {
            a.init(store, rng);
            b.init(store, rng);
        }
        for dec in &self.decoders {
            dec.hidden.iter().for_each(|c| c.init(store, rng));
            dec.out.init_zero(store);
            let n = dec.context.len();
            for (i, c) in dec.context.iter().enumerate() {
                if i + 1 == n {
                    c.init_zero(store);
                } else {
                    c.init(store, rng);
                }
            }
        }
    }

    /// Copies pretrained pyramid weights for `branch` from `source` (same names).
    pub fn import_pyramid<T: Real>(store: &mut ParamStore<T>, source: &ParamStore<T>, branch: Branch) -> usize {
        store.import_prefix(source, branch.prefix())
    }

    /// Sketch features conditioned on both keyframes, `(N, C₀, H, W)`.
    pub fn transform_sketch<T: Real>(&self, s: &Session<'_, T>, sketch: &Var<T>, i0: &Var<T>, i1: &Var<T>) -> Var<T> {
        let x = Var::cat_channels(&[sketch, i0, i1]).add_scalar(T::lit(-0.5));
        let mut h = lrelu(&self.entry.forward(s, &x));
        for (a, b) in &self.blocks {
            let r = b.forward(s, &lrelu(&a.forward(s, &h)));
            h = lrelu(&h.add(&r));
        }
        self.exit.forward(s, &h)
    }

    /// Feature pyramid, level 0 first.
    pub fn pyramid<T: Real>(&self, s: &Session<'_, T>, x: &Var<T>, branch: Branch) -> Vec<Var<T>> {
        let layers = match branch {
            Branch::Sketch => &self.sketch_pyramid,
            Branch::Frame => &self.frame_pyramid,
        };
        let mut out = Vec::with_capacity(layers.len());
        let mut h = match branch {
            Branch::Sketch => x.clone(),
            Branch::Frame => x.add_scalar(T::lit(-0.5)),
        };
        for (a, b) in layers {
            h = lrelu(&b.forward(s, &lrelu(&a.forward(s, &h))));
            out.push(h.clone());
        }
        out
    }

    fn decode_level<T: Real>(&self, s: &Session<'_, T>, level: usize, src: &Var<T>, tgt: &Var<T>, up: &Var<T>) -> Var<T> {
        let dec = &self.decoders[level];
        let d = self.cfg.search_radius;
        let warped = backward_warp_var(tgt, up);
        let cost = lrelu(&src.correlate(&warped, d));
        let mut x = Var::cat_channels(&[&cost, src, up]);
        for c in &dec.hidden {
            x = lrelu(&c.forward(s, &x));
        }
        let r = dec.out.forward(s, &x);
        let mut y = Var::cat_channels(&[&x, &up.add(&r)]);
        let n = dec.context.len();
        for (i, c) in dec.context.iter().enumerate() {
            y = c.forward(s, &y);
            if i + 1 < n {
                y = lrelu(&y);
            }
        }
        up.add(&soft_clamp_norm(&r.add(&y), d as f64))
    }

    /// Coarse-to-fine flow from `src` to `tgt` pyramids, decoding levels
    /// `coarsest ..= finest` and upsampling to `(h, w)`.
    pub fn estimate<T: Real>(
        &self,
        s: &Session<'_, T>,
        src: &[Var<T>],
        tgt: &[Var<T>],
        finest: usize,
        h: usize,
        w: usize,
    ) -> Var<T> {
        let levels = self.cfg.levels();
        assert!(finest < levels);
        let mut flow: Option<Var<T>> = None;
        for l in (finest..levels).rev() {
            let (n, _, hl, wl) = src[l].dims4();
            let up = match &flow {
                None => Var::zeros(vec![n, 2, hl, wl]),
                Some(f) => f.resize_bilinear(hl, wl).scale(T::lit(2.0)),
            };
            flow = Some(self.decode_level(s, l, &src[l], &tgt[l], &up));
        }
        flow.expect("at least one level")
            .resize_bilinear(h, w)
            .scale(T::lit((1usize << finest) as f64))
    }

    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = 1usize << (self.cfg.levels() - 1);
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Flows between the sketch time and both keyframes, decoding down to `finest`.
    pub fn forward_levels<T: Real>(
        &self,
        s: &Session<'_, T>,
        sketch: &Var<T>,
        i0: &Var<T>,
        i1: &Var<T>,
        finest: usize,
    ) -> FlowVars<T> {
        let (n, _, h, w) = i0.dims4();
        let (hp, wp) = self.padded_dims(h, w);
        let (sk, a, b) = (sketch.pad_bottom_right(hp, wp), i0.pad_bottom_right(hp, wp), i1.pad_bottom_right(hp, wp));
        let feat = self.transform_sketch(s, &sk, &a, &b);
        let ps = self.pyramid(s, &feat, Branch::Sketch);
        let pf = self.pyramid(s, &Var::cat_batch(&[&a, &b]), Branch::Frame);
        // one batched decode for [t→0, t→1, 0→t, 1→t]
        let src: Vec<Var<T>> = ps.iter().zip(&pf).map(|(sl, fl)| Var::cat_batch(&[sl, sl, fl])).collect();
        let tgt: Vec<Var<T>> = ps.iter().zip(&pf).map(|(sl, fl)| Var::cat_batch(&[fl, sl, sl])).collect();
        let flows = self.estimate(s, &src, &tgt, finest, hp, wp).crop(h, w);
        FlowVars {
            t0: flows.narrow_batch(0, n),
            t1: flows.narrow_batch(n, n),
            f0t: flows.narrow_batch(2 * n, n),
            f1t: flows.narrow_batch(3 * n, n),
        }
    }

    pub fn forward<T: Real>(&self, s: &Session<'_, T>, sketch: &Var<T>, i0: &Var<T>, i1: &Var<T>) -> FlowVars<T> {
        self.forward_levels(s, sketch, i0, i1, self.cfg.finest_level)
    }

    /// Frame-to-frame mode: both inputs go through the frame branch, the sketch
    /// branch and transformer are bypassed. Returns `(f_ab, f_ba)`.
    pub fn forward_frames<T: Real>(&self, s: &Session<'_, T>, a: &Var<T>, b: &Var<T>) -> (Var<T>, Var<T>) {
        let (n, _, h, w) = a.dims4();
        let (hp, wp) = self.padded_dims(h, w);
        let pf = self.pyramid(s, &Var::cat_batch(&[&a.pad_bottom_right(hp, wp), &b.pad_bottom_right(hp, wp)]), Branch::Frame);
        let swapped: Vec<Var<T>> = pf
            .iter()
            .map(|l| Var::cat_batch(&[&l.narrow_batch(n, n), &l.narrow_batch(0, n)]))
            .collect();
        let flows = self.estimate(s, &pf, &swapped, self.cfg.finest_level, hp, wp).crop(h, w);
        (flows.narrow_batch(0, n), flows.narrow_batch(n, n))
    }

    /// Single-sample convenience wrapper.
    pub fn estimate_correspondence(
        &self,
        store: &ParamStore<f32>,
        sketch: &Sketch,
        i0: &Frame,
        i1: &Frame,
    ) -> Result<CorrespondenceResult> {
        check_inputs(sketch, i0, i1)?;
        let s = Session::inference(store);
        self.forward(&s, &sketch.to_var(), &i0.to_var(), &i1.to_var()).to_result(0)
    }
}

pub(crate) fn check_inputs(sketch: &Sketch, i0: &Frame, i1: &Frame) -> Result<()> {
    if i0.dims() != i1.dims() || sketch.dims() != i0.dims() {
        return Err(Error::Contract(format!(
            "input sizes differ: sketch {:?}, keyframes {:?} and {:?}",
            sketch.dims(),
            i0.dims(),
            i1.dims()
        )));
    }
    let (h, w) = i0.dims();
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!("frames must be at least 8x8, got {h}x{w}")));
    }
    Ok(())
}

/// Warping loss: four mean-absolute photometric terms, one per flow.
pub fn warping_loss<T: Real>(flows: &FlowVars<T>, i0: &Var<T>, i1: &Var<T>, it: &Var<T>) -> Var<T> {
    let a = it.l1(&backward_warp_var(i0, &flows.t0));
    let b = it.l1(&backward_warp_var(i1, &flows.t1));
    let c = i0.l1(&backward_warp_var(it, &flows.f0t));
    let d = i1.l1(&backward_warp_var(it, &flows.f1t));
    a.add(&b).add(&c).add(&d)
}
