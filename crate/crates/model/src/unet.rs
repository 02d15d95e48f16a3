use rand_chacha::ChaCha8Rng;
use toonbetween_core::nn::{lrelu, Conv2d, ParamStore, Session};
use toonbetween_core::{ConvOpts, Real, Var};

use crate::config::UNetConfig;

struct Block {
    a: Conv2d,
    b: Conv2d,
    /// Offset predictor for a deformable second conv.
    offsets: Option<Conv2d>,
}

impl Block {
    fn new(prefix: &str, cin: usize, cout: usize, deformable: bool) -> Self {
        Self {
            a: Conv2d::new(format!("{prefix}.a"), cin, cout, 3, ConvOpts::same(3)),
            b: Conv2d::new(format!("{prefix}.b"), cout, cout, 3, ConvOpts::same(3)),
            offsets: deformable.then(|| Conv2d::new(format!("{prefix}.offsets"), cout, 18, 3, ConvOpts::same(3))),
        }
    }

    fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.a.init(store, rng);
        self.b.init(store, rng);
        if let Some(o) = &self.offsets {
            o.init_zero(store);
        }
    }

    fn forward<T: Real>(&self, s: &Session<'_, T>, x: &Var<T>) -> Var<T> {
        let h = lrelu(&self.a.forward(s, x));
        let y = match &self.offsets {
            Some(o) => self.b.forward_deformable(s, &h, &o.forward(s, &h)),
            None => self.b.forward(s, &h),
        };
        lrelu(&y)
    }
}

/// Encoder/decoder with skip connections and a zero-initialized output layer.
///
/// `depth` average-pool downsamplings; level `i` has `base · 2^i` channels.
/// Inputs must have sides divisible by `2^depth`.
pub struct UNet {
    depth: usize,
    encoder: Vec<Block>,
    decoder: Vec<(Conv2d, Block)>,
    out: Conv2d,
}

impl UNet {
    pub fn new(prefix: &str, cfg: &UNetConfig, in_channels: usize, out_channels: usize, deformable_encoder: bool) -> Self {
        let ch = |i: usize| cfg.base << i;
        let encoder = (0..=cfg.depth)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { ch(i - 1) };
                Block::new(&format!("{prefix}.enc{i}"), cin, ch(i), deformable_encoder)
            })
            .collect();
        let decoder = (0..cfg.depth)
            .rev()
            .map(|i| {
                let up = Conv2d::new(format!("{prefix}.up{i}"), ch(i + 1), ch(i), 3, ConvOpts::same(3));
                (up, Block::new(&format!("{prefix}.dec{i}"), 2 * ch(i), ch(i), false))
            })
            .collect();
        let out = Conv2d::new(format!("{prefix}.out"), ch(0), out_channels, 3, ConvOpts::same(3));
        Self { depth: cfg.depth, encoder, decoder, out }
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.encoder.iter().for_each(|b| b.init(store, rng));
        for (up, b) in &self.decoder {
            up.init(store, rng);
            b.init(store, rng);
        }
        self.out.init_zero(store);
    }

    pub fn forward<T: Real>(&self, s: &Session<'_, T>, x: &Var<T>) -> Var<T> {
        let (_, _, h, w) = x.dims4();
        assert!(h % self.multiple() == 0 && w % self.multiple() == 0, "U-Net input {h}x{w} not divisible by {}", self.multiple());
        let mut skips = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                cur = cur.avg_pool2();
            }
            cur = block.forward(s, &cur);
            skips.push(cur.clone());
        }
        skips.pop();
        for (up, block) in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4();
            let u = lrelu(&up.forward(s, &cur.resize_bilinear(sh, sw)));
            cur = block.forward(s, &Var::cat_channels(&[&u, &skip]));
        }
        self.out.forward(s, &cur)
    }

    /// Like `forward`, but replicate-pads to a valid size and crops back.
    pub fn forward_any<T: Real>(&self, s: &Session<'_, T>, x: &Var<T>) -> Var<T> {
        let (_, _, h, w) = x.dims4();
        let m = self.multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        self.forward(s, &x.pad_bottom_right(hp, wp)).crop(h, w)
    }
}
