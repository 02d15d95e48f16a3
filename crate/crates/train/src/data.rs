//! Dataset preparation: duplicate pruning, scene splitting, matching-rate
//! filtering, sketch synthesis and the on-disk layout.
//!
//! ```text
//! dataset/
//!   manifest.json
//!   {scene_id}/frame_00000.png
//!   {scene_id}/sketch_00000.png
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toonbetween_core::geometry::backward_warp;
use toonbetween_core::metrics::ssim;
use toonbetween_core::nn::{ParamStore, Session};
use toonbetween_core::sketchgen::{synth_sketch, SketchParams};
use toonbetween_core::{io, Error, FlowField, Frame, Grid, Result};
use toonbetween_model::correspondence::Correspondence;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Neighbours at or above this SSIM are duplicates.
    pub prune_ssim: f64,
    /// Consecutive frames below this SSIM start a new scene.
    pub scene_cut_ssim: f64,
    pub min_scene_frames: usize,
    /// Per-pixel error (fraction of the colour range) counted as a match.
    pub match_error: f64,
    /// Triples with a lower matching rate are dropped.
    pub match_rate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { prune_ssim: 0.95, scene_cut_ssim: 0.35, min_scene_frames: 3, match_error: 0.05, match_rate: 0.65 }
    }
}

/// Greedy forward scan; returns the indices of kept frames. The first frame is
/// always kept, and frame `i` is kept when its SSIM with the last kept frame is
/// below `thresh`.
pub fn prune_duplicates(frames: &[Frame], thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..frames.len() {
        match kept.last() {
            Some(&last) if ssim(&frames[last], &frames[i]) >= thresh => {}
            _ => kept.push(i),
        }
    }
    kept
}

/// Cuts wherever consecutive frames have SSIM below `cut`; returns index
/// ranges of the surviving scenes (at least `min_len` frames each).
pub fn split_scenes(frames: &[Frame], cut: f64, min_len: usize) -> Vec<std::ops::Range<usize>> {
    let mut scenes = Vec::new();
    let mut start = 0;
    for i in 1..=frames.len() {
        if i == frames.len() || ssim(&frames[i - 1], &frames[i]) < cut {
            if i - start >= min_len {
                scenes.push(start..i);
            }
            start = i;
        }
    }
    scenes
}

/// Fraction of pixels of `it` reproduced within `err` (mean over channels) by
/// the better of `I₀` warped with `f_t0` and `I₁` warped with `f_t1`.
pub fn matching_rate(i0: &Frame, it: &Frame, i1: &Frame, f_t0: &FlowField, f_t1: &FlowField, err: f64) -> Result<f64> {
    let w0 = backward_warp(i0.grid(), f_t0)?;
    let w1 = backward_warp(i1.grid(), f_t1)?;
    let (h, w) = it.dims();
    if w0.dims() != (h, w) || w1.dims() != (h, w) {
        return Err(Error::Shape { expected: format!("{h}x{w}"), got: format!("{:?} / {:?}", w0.dims(), w1.dims()) });
    }
    let plane = h * w;
    let t = it.grid().data();
    let mut matched = 0usize;
    for p in 0..plane {
        let e = |g: &[f32]| (0..3).map(|c| (g[c * plane + p] - t[c * plane + p]).abs() as f64).sum::<f64>() / 3.0;
        if e(w0.data()).min(e(w1.data())) < err {
            matched += 1;
        }
    }
    Ok(matched as f64 / plane as f64)
}

/// Source of the flows `(f_t0, f_t1)` from a middle frame to its neighbours.
pub trait FlowProvider {
    fn flows(&self, i0: &Frame, it: &Frame, i1: &Frame) -> Result<(FlowField, FlowField)>;
}

/// Zero flow; the matching rate then measures raw photometric similarity.
pub struct ZeroFlow;

impl FlowProvider for ZeroFlow {
    fn flows(&self, _: &Frame, it: &Frame, _: &Frame) -> Result<(FlowField, FlowField)> {
        let (h, w) = it.dims();
        Ok((FlowField::zeros(h, w), FlowField::zeros(h, w)))
    }
}

/// The correspondence network in frame-to-frame mode.
pub struct NetworkFlow<'a> {
    pub net: &'a Correspondence,
    pub params: &'a ParamStore<f32>,
}

impl FlowProvider for NetworkFlow<'_> {
    fn flows(&self, i0: &Frame, it: &Frame, i1: &Frame) -> Result<(FlowField, FlowField)> {
        let s = Session::inference(self.params);
        let t = it.to_var::<f32>();
        let (f_t0, _) = self.net.forward_frames(&s, &t, &i0.to_var());
        let (f_t1, _) = self.net.forward_frames(&s, &t, &i1.to_var());
        Ok((FlowField::new(Grid::from_var(&f_t0, 0))?, FlowField::new(Grid::from_var(&f_t1, 0))?))
    }
}

/// Precomputed flows, e.g. read from `.flo` files of an external estimator.
pub struct FnFlow<F>(pub F);

impl<F> FlowProvider for FnFlow<F>
where
    F: Fn(&Frame, &Frame, &Frame) -> Result<(FlowField, FlowField)>,
{
    fn flows(&self, i0: &Frame, it: &Frame, i1: &Frame) -> Result<(FlowField, FlowField)> {
        (self.0)(i0, it, i1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub source: usize,
    /// Frame numbers in the source sequence.
    pub timestamps: Vec<usize>,
    pub frames: Vec<String>,
    pub sketches: Vec<String>,
}

/// A stage-1 triple, as frame indices into its scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleEntry {
    pub scene: String,
    pub frames: [usize; 3],
    pub matching_rate: f64,
}

/// A stage-2 window of seven consecutive frames starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub scene: String,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub ssim_variant: String,
    pub thresholds: Thresholds,
    pub sketch: SketchParams,
    pub scenes: Vec<SceneEntry>,
    pub stage1: Vec<TripleEntry>,
    pub rejected: Vec<TripleEntry>,
    pub stage2: Vec<WindowEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(dir.as_ref().join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn scene(&self, id: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

pub const CLIP_FRAMES: usize = 7;

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub sketch: SketchParams,
    pub window_stride: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { seed: 0, thresholds: Thresholds::default(), sketch: SketchParams::default(), window_stride: 1 }
    }
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn sketch_name(i: usize) -> String {
    format!("sketch_{i:05}.png")
}

/// Scene and sample selection without touching the disk. Returns the manifest
/// and, per scene, the kept frames.
pub fn plan_dataset(sources: &[Vec<Frame>], opts: &PrepareOptions, flows: &dyn FlowProvider) -> Result<(Manifest, Vec<Vec<Frame>>)> {
    let th = &opts.thresholds;
    let mut scenes = Vec::new();
    let mut scene_frames = Vec::new();
    let mut stage1 = Vec::new();
    let mut rejected = Vec::new();
    let mut stage2 = Vec::new();
    for (si, source) in sources.iter().enumerate() {
        if let Some(f) = source.iter().find(|f| f.dims() != source[0].dims()) {
            return Err(Error::Contract(format!("source {si} mixes resolutions {:?} and {:?}", source[0].dims(), f.dims())));
        }
        let kept_idx = prune_duplicates(source, th.prune_ssim);
        let kept: Vec<Frame> = kept_idx.iter().map(|&i| source[i].clone()).collect();
        for range in split_scenes(&kept, th.scene_cut_ssim, th.min_scene_frames.max(3)) {
            let id = format!("s{si:03}_{:03}", scenes.iter().filter(|s: &&SceneEntry| s.source == si).count());
            let frames: Vec<Frame> = kept[range.clone()].to_vec();
            for i in 0..frames.len() - 2 {
                let (f_t0, f_t1) = flows.flows(&frames[i], &frames[i + 1], &frames[i + 2])?;
                let rate = matching_rate(&frames[i], &frames[i + 1], &frames[i + 2], &f_t0, &f_t1, th.match_error)?;
                let entry = TripleEntry { scene: id.clone(), frames: [i, i + 1, i + 2], matching_rate: rate };
                if rate < th.match_rate {
                    rejected.push(entry);
                } else {
                    stage1.push(entry);
                }
            }
            let stride = opts.window_stride.max(1);
            let mut start = 0;
            while start + CLIP_FRAMES <= frames.len() {
                stage2.push(WindowEntry { scene: id.clone(), start });
                start += stride;
            }
            scenes.push(SceneEntry {
                id,
                source: si,
                timestamps: kept_idx[range].to_vec(),
                frames: (0..frames.len()).map(frame_name).collect(),
                sketches: (0..frames.len()).map(sketch_name).collect(),
            });
            scene_frames.push(frames);
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        ssim_variant: "gaussian 11x11 sigma 1.5, per-channel mean".into(),
        thresholds: th.clone(),
        sketch: opts.sketch.clone(),
        scenes,
        stage1,
        rejected,
        stage2,
    };
    Ok((manifest, scene_frames))
}

/// Seed of the sketch for frame `frame` of scene `scene`.
fn sketch_seed(seed: u64, scene: usize, frame: usize) -> u64 {
    seed ^ ((scene as u64) << 32) ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs the full preparation protocol and writes the dataset to `out`.
pub fn prepare_dataset(
    sources: &[Vec<Frame>],
    out: impl AsRef<Path>,
    opts: &PrepareOptions,
    flows: &dyn FlowProvider,
) -> Result<Manifest> {
    let out = out.as_ref();
    let (manifest, scene_frames) = plan_dataset(sources, opts, flows)?;
    std::fs::create_dir_all(out)?;
    for (si, (scene, frames)) in manifest.scenes.iter().zip(&scene_frames).enumerate() {
        let dir = out.join(&scene.id);
        std::fs::create_dir_all(&dir)?;
        for (fi, frame) in frames.iter().enumerate() {
            io::write_frame(dir.join(&scene.frames[fi]), frame)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sketch_seed(opts.seed, si, fi));
            io::write_sketch(dir.join(&scene.sketches[fi]), &synth_sketch(frame, &opts.sketch, &mut rng))?;
        }
    }
    std::fs::write(out.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}

/// Reads all PNG files of a directory in name order.
pub fn read_frame_dir(dir: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(io::read_frame).collect()
}
