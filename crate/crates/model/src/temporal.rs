//! Clip-level refinement of the inbetweens with a deformable U-Net.

use rand_chacha::ChaCha8Rng;
use toonbetween_core::nn::{ParamStore, Session};
use toonbetween_core::{Error, Frame, Grid, Real, Result, Var};

use crate::config::TemporalConfig;
use crate::unet::UNet;

/// Residual refiner for a fixed-length clip whose first and last frames are keyframes.
pub struct TemporalNet {
    frames: usize,
    unet: UNet,
}

impl TemporalNet {
    pub fn new(cfg: &TemporalConfig) -> Self {
        assert!(cfg.frames >= 3, "a clip needs at least one inbetween");
        Self { frames: cfg.frames, unet: UNet::new("temporal", &cfg.unet, 3 * cfg.frames, 3 * (cfg.frames - 2), true) }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.unet.init(store, rng);
    }

    /// Refines the inbetweens of a clip given as `frames` tensors of shape
    /// `(N, 3, H, W)`. Returns the `frames − 2` refined inbetweens, clamped to [0, 1].
    pub fn forward<T: Real>(&self, s: &Session<'_, T>, clip: &[Var<T>]) -> Result<Vec<Var<T>>> {
        if clip.len() != self.frames {
            return Err(Error::Contract(format!("temporal net expects {} frames, got {}", self.frames, clip.len())));
        }
        let refs: Vec<&Var<T>> = clip.iter().collect();
        let x = Var::cat_channels(&refs).add_scalar(T::lit(-0.5));
        let delta = self.unet.forward_any(s, &x);
        Ok((1..self.frames - 1)
            .map(|i| clip[i].add(&delta.narrow_channels(3 * (i - 1), 3)).clamp(T::zero(), T::one()))
            .collect())
    }

    /// Refines a whole clip; keyframes are returned untouched.
    pub fn refine_clip(&self, store: &ParamStore<f32>, clip: &[Frame]) -> Result<Vec<Frame>> {
        if clip.len() != self.frames {
            return Err(Error::Contract(format!("temporal net expects {} frames, got {}", self.frames, clip.len())));
        }
        let s = Session::inference(store);
        let vars: Vec<Var<f32>> = clip.iter().map(|f| f.to_var()).collect();
        let inner = self.forward(&s, &vars)?;
        let mut out = Vec::with_capacity(clip.len());
        out.push(clip[0].clone());
        for v in &inner {
            out.push(Frame::from_var_clamped(v, 0)?);
        }
        out.push(clip[clip.len() - 1].clone());
        Ok(out)
    }

    /// Refines a sequence of any length ≥ 2 by overlapping windows.
    ///
    /// Windows of `frames` frames advance by `frames − 1`; the last window is
    /// aligned to the sequence end. Frames covered by two windows are
    /// cross-faded linearly across the overlap. Sequences shorter than a window
    /// are padded by repeating the last frame, and the padding is discarded.
    pub fn refine_sequence(&self, store: &ParamStore<f32>, seq: &[Frame]) -> Result<Vec<Frame>> {
        let n = self.frames;
        let m = seq.len();
        if m < 3 {
            return Ok(seq.to_vec());
        }
        if m < n {
            let mut padded = seq.to_vec();
            padded.resize(n, seq[m - 1].clone());
            let mut out = self.refine_clip(store, &padded)?;
            out.truncate(m);
            out[m - 1] = seq[m - 1].clone();
            return Ok(out);
        }
        let mut starts: Vec<usize> = (0..).map(|i| i * (n - 1)).take_while(|&s| s + n <= m).collect();
        if starts.last().is_none_or(|&s| s + n < m) {
            starts.push(m - n);
        }
        let refined: Vec<Vec<Frame>> = starts.iter().map(|&s| self.refine_clip(store, &seq[s..s + n])).collect::<Result<_>>()?;
        let (h, w) = seq[0].dims();
        let mut acc = vec![vec![0.0f64; 3 * h * w]; m];
        let mut weight = vec![0.0f64; m];
        for (wi, &s) in starts.iter().enumerate() {
            for j in 0..n {
                let idx = s + j;
                // overlap with the previous / next window ramps linearly
                let mut wgt = 1.0;
                if wi > 0 {
                    let prev_end = starts[wi - 1] + n - 1;
                    if idx <= prev_end {
                        let span = (prev_end - s + 2) as f64;
                        wgt = (idx - s + 1) as f64 / span;
                    }
                }
                if wi + 1 < starts.len() {
                    let next = starts[wi + 1];
                    if idx >= next {
                        let span = (s + n - 1 - next + 2) as f64;
                        wgt = (s + n - idx) as f64 / span;
                    }
                }
                for (a, &v) in acc[idx].iter_mut().zip(refined[wi][j].grid().data()) {
                    *a += wgt * v as f64;
                }
                weight[idx] += wgt;
            }
        }
        let mut out: Vec<Frame> = acc
            .into_iter()
            .zip(weight)
            .map(|(a, wsum)| {
                let data = a.into_iter().map(|v| (v / wsum).clamp(0.0, 1.0) as f32).collect();
                Frame::new(Grid::new(3, h, w, data).expect("sized"))
            })
            .collect::<Result<_>>()?;
        out[0] = seq[0].clone();
        out[m - 1] = seq[m - 1].clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::UNetConfig;
    use rand::SeedableRng;

    fn net() -> (TemporalNet, ParamStore<f32>) {
        let t = TemporalNet::new(&TemporalConfig { frames: 7, unet: UNetConfig { base: 4, depth: 2 } });
        let mut store = ParamStore::new();
        t.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (t, store)
    }

    fn seq(m: usize) -> Vec<Frame> {
        (0..m)
            .map(|i| Frame::new(Grid::from_fn(3, 8, 12, |c, y, x| ((x + y + c + i) % 5) as f32 / 4.0)).unwrap())
            .collect()
    }

    #[test]
    fn identity_at_init() {
        let (t, store) = net();
        let s = seq(7);
        assert_eq!(t.refine_clip(&store, &s).unwrap(), s);
        for m in [2, 3, 5, 7, 12, 13, 20] {
            assert_eq!(t.refine_sequence(&store, &seq(m)).unwrap(), seq(m), "length {m}");
        }
    }

    #[test]
    fn wrong_length_is_contract_error() {
        let (t, store) = net();
        assert!(matches!(t.refine_clip(&store, &seq(5)), Err(Error::Contract(_))));
    }
}
