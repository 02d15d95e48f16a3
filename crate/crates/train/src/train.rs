//! Two-stage training: synthesis (correspondence + blending) on triples, then
//! all modules jointly on seven-frame clips.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toonbetween_core::metrics::psnr;
use toonbetween_core::nn::{clip_grad_norm, Adam, AdamConfig, Session};
use toonbetween_core::sketchgen::{detect_contours, threshold_and_prune, GradientDetector, SketchParams};
use toonbetween_core::{DistanceMap, Error, Frame, Grid, Sketch, Var};
use toonbetween_model::checkpoint::{self, CheckpointError};
use toonbetween_model::correspondence::warping_loss;
use toonbetween_model::occlusion_blend::{blend_loss_var, contour_loss_var, distance_transform, weighted_synthesis_loss_var};
use toonbetween_model::Model;

use crate::config::TrainConfig;
use crate::data::{Manifest, CLIP_FRAMES};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("no training samples")]
    Empty,
    #[error(transparent)]
    Data(#[from] Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ground-truth contour distances of a frame, from the same detector and
/// thresholds used to synthesize sketches.
pub fn contour_distance(frame: &Frame, params: &SketchParams) -> Result<DistanceMap, Error> {
    distance_transform(&threshold_and_prune(&detect_contours(frame), params.thresh, params.min_length))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Sample {
    pub i0: Frame,
    pub it: Frame,
    pub i1: Frame,
    pub sketch: Sketch,
    pub distance: DistanceMap,
}

impl Stage1Sample {
    /// Fails with [`Error::EmptyContours`] when the middle frame has no contours.
    pub fn new(i0: Frame, it: Frame, i1: Frame, sketch: Sketch, params: &SketchParams) -> Result<Self, Error> {
        if i0.dims() != it.dims() || i1.dims() != it.dims() || sketch.dims() != it.dims() {
            return Err(Error::Contract("stage-1 sample sizes differ".into()));
        }
        let distance = contour_distance(&it, params)?;
        Ok(Self { i0, it, i1, sketch, distance })
    }
}

/// Seven consecutive frames and the sketch of the middle one.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Sample {
    pub frames: Vec<Frame>,
    pub sketch: Sketch,
}

impl Stage2Sample {
    pub fn new(frames: Vec<Frame>, sketch: Sketch) -> Result<Self, Error> {
        if frames.len() != CLIP_FRAMES {
            return Err(Error::Contract(format!("stage-2 sample needs {CLIP_FRAMES} frames, got {}", frames.len())));
        }
        if frames.iter().any(|f| f.dims() != sketch.dims()) {
            return Err(Error::Contract("stage-2 sample sizes differ".into()));
        }
        Ok(Self { frames, sketch })
    }

    pub const SKETCH_TIME: f64 = 0.5;

    pub fn times() -> Vec<f64> {
        (1..CLIP_FRAMES - 1).map(|i| i as f64 / (CLIP_FRAMES - 1) as f64).collect()
    }
}

/// Loads the stage-1 triples listed in a manifest; triples whose middle frame
/// has no contours are skipped.
pub fn load_stage1(dir: impl AsRef<Path>, manifest: &Manifest) -> Result<Vec<Stage1Sample>, Error> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for e in &manifest.stage1 {
        let scene = manifest.scene(&e.scene).ok_or_else(|| Error::Contract(format!("unknown scene {}", e.scene)))?;
        let f = |i: usize| toonbetween_core::io::read_frame(dir.join(&scene.id).join(&scene.frames[i]));
        let sketch = toonbetween_core::io::read_sketch(dir.join(&scene.id).join(&scene.sketches[e.frames[1]]))?;
        match Stage1Sample::new(f(e.frames[0])?, f(e.frames[1])?, f(e.frames[2])?, sketch, &manifest.sketch) {
            Ok(s) => out.push(s),
            Err(Error::EmptyContours) => continue,
            Err(err) => return Err(err),
        }
    }
    Ok(out)
}

pub fn load_stage2(dir: impl AsRef<Path>, manifest: &Manifest) -> Result<Vec<Stage2Sample>, Error> {
    let dir = dir.as_ref();
    manifest
        .stage2
        .iter()
        .map(|e| {
            let scene = manifest.scene(&e.scene).ok_or_else(|| Error::Contract(format!("unknown scene {}", e.scene)))?;
            let frames = (e.start..e.start + CLIP_FRAMES)
                .map(|i| toonbetween_core::io::read_frame(dir.join(&scene.id).join(&scene.frames[i])))
                .collect::<Result<Vec<_>, _>>()?;
            let sketch = toonbetween_core::io::read_sketch(dir.join(&scene.id).join(&scene.sketches[e.start + CLIP_FRAMES / 2]))?;
            Stage2Sample::new(frames, sketch)
        })
        .collect()
}

/// Stage-1 loss terms for one sample, as graph nodes.
pub struct Stage1Terms<T: toonbetween_core::Real> {
    pub total: Var<T>,
    pub blend: Var<T>,
    pub warp: Var<T>,
    pub contour: Var<T>,
    pub frame: Var<T>,
}

pub fn stage1_terms(model: &Model, s: &Session<'_, f32>, x: &Stage1Sample, cfg: &TrainConfig) -> Stage1Terms<f32> {
    let (i0, it, i1) = (x.i0.to_var(), x.it.to_var(), x.i1.to_var());
    let st = model.net.stage_one(s, &x.sketch.to_var(), &i0, &i1);
    let blend = blend_loss_var(&st.frame, &it);
    let warp = warping_loss(&st.flows, &i0, &i1, &it);
    let contour = contour_loss_var(&GradientDetector::default(), &st.frame, &x.distance.to_var());
    let total = weighted_synthesis_loss_var(&blend, &warp, &contour, cfg.lambda_warp, cfg.lambda_contour);
    Stage1Terms { total, blend, warp, contour, frame: st.frame }
}

/// Mean ℓ1 over the five inbetweens of a clip; returns the loss and the outputs.
pub fn stage2_terms(model: &Model, s: &Session<'_, f32>, x: &Stage2Sample, temporal: bool) -> (Var<f32>, Vec<Var<f32>>) {
    let n = x.frames.len();
    let (i0, i1, sk) = (x.frames[0].to_var(), x.frames[n - 1].to_var(), x.sketch.to_var());
    let st = model.net.stage_one(s, &sk, &i0, &i1);
    let mut outs = model.net.sequence_vars(s, &st, &i0, &i1, &sk, Stage2Sample::SKETCH_TIME, &Stage2Sample::times());
    if temporal {
        let mut clip = Vec::with_capacity(n);
        clip.push(i0);
        clip.extend(outs);
        clip.push(i1);
        outs = model.net.temporal.forward(s, &clip).expect("clip length matches the temporal net");
    }
    let mut loss: Option<Var<f32>> = None;
    for (o, gt) in outs.iter().zip(&x.frames[1..n - 1]) {
        let l = o.l1(&gt.to_var());
        loss = Some(match loss {
            None => l,
            Some(a) => a.add(&l),
        });
    }
    (loss.expect("five inbetweens").scale(1.0 / (n - 2) as f32), outs)
}

/// Mean stage-1 loss over samples, inference mode.
pub fn stage1_loss(model: &Model, samples: &[Stage1Sample], cfg: &TrainConfig) -> f64 {
    let s = Session::inference(&model.params);
    samples.iter().map(|x| stage1_terms(model, &s, x, cfg).total.item() as f64).sum::<f64>() / samples.len().max(1) as f64
}

/// Mean PSNR of the synthesized middle frames.
pub fn stage1_psnr(model: &Model, samples: &[Stage1Sample]) -> Result<f64, Error> {
    let mut acc = 0.0;
    for x in samples {
        acc += psnr(&model.synthesize_middle(&x.sketch, &x.i0, &x.i1)?.frame, &x.it);
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// Mean PSNR over all inbetweens of the clips.
pub fn stage2_psnr(model: &Model, samples: &[Stage2Sample], temporal: bool) -> Result<f64, Error> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for x in samples {
        let m = x.frames.len();
        let outs = model.interpolate_sequence(&x.frames[0], &x.frames[m - 1], &x.sketch, Stage2Sample::SKETCH_TIME, &Stage2Sample::times(), temporal)?;
        for (o, gt) in outs.iter().zip(&x.frames[1..m - 1]) {
            acc += psnr(o, gt);
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// `(step, validation PSNR)`; step 0 is before any update.
    pub validation: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    fn write_curves(&self, dir: &Path, stage: &str) -> std::io::Result<()> {
        let mut f = std::fs::File::create(dir.join(format!("{stage}_loss.csv")))?;
        writeln!(f, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(f, "{},{l}", i + 1)?;
        }
        let mut f = std::fs::File::create(dir.join(format!("{stage}_validation.csv")))?;
        writeln!(f, "step,psnr")?;
        for (s, p) in &self.validation {
            writeln!(f, "{s},{p}")?;
        }
        Ok(())
    }
}

/// Output and stopping hooks of a training run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoints and curves go here when set.
    pub out_dir: Option<PathBuf>,
    /// Progress lines.
    pub log: Option<&'a mut dyn Write>,
    /// Stops early once validation PSNR reaches this value.
    pub target_psnr: Option<f64>,
}

fn total_steps(cfg: &TrainConfig, epochs: usize, n: usize) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    cfg.max_steps.unwrap_or(epochs * per_epoch)
}

fn crop_frame(f: &Frame, y: usize, x: usize, h: usize, w: usize) -> Frame {
    let g = f.grid();
    Frame::new(Grid::from_fn(3, h, w, |c, yy, xx| g.get(c, y + yy, x + xx))).expect("crop of a frame")
}

fn crop_grid(g: &Grid, y: usize, x: usize, h: usize, w: usize) -> Grid {
    Grid::from_fn(g.channels(), h, w, |c, yy, xx| g.get(c, y + yy, x + xx))
}

fn crop_window(rng: &mut ChaCha8Rng, dims: (usize, usize), cfg: &TrainConfig) -> (usize, usize, usize, usize) {
    let (h, w) = (cfg.height.min(dims.0), cfg.width.min(dims.1));
    (rng.random_range(0..=dims.0 - h), rng.random_range(0..=dims.1 - w), h, w)
}

fn crop_stage1(x: &Stage1Sample, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Stage1Sample {
    let dims = x.it.dims();
    if dims.0 <= cfg.height && dims.1 <= cfg.width {
        return x.clone();
    }
    let (y, xo, h, w) = crop_window(rng, dims, cfg);
    Stage1Sample {
        i0: crop_frame(&x.i0, y, xo, h, w),
        it: crop_frame(&x.it, y, xo, h, w),
        i1: crop_frame(&x.i1, y, xo, h, w),
        sketch: Sketch::new(crop_grid(x.sketch.grid(), y, xo, h, w)).expect("crop of a sketch"),
        distance: DistanceMap::new(crop_grid(x.distance.grid(), y, xo, h, w)).expect("crop of a distance map"),
    }
}

fn crop_stage2(x: &Stage2Sample, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Stage2Sample {
    let dims = x.sketch.dims();
    if dims.0 <= cfg.height && dims.1 <= cfg.width {
        return x.clone();
    }
    let (y, xo, h, w) = crop_window(rng, dims, cfg);
    Stage2Sample {
        frames: x.frames.iter().map(|f| crop_frame(f, y, xo, h, w)).collect(),
        sketch: Sketch::new(crop_grid(x.sketch.grid(), y, xo, h, w)).expect("crop of a sketch"),
    }
}

/// Generic loop: shuffled epochs, a bounded prefetch queue of cropped batches,
/// gradient averaging over the batch, divergence guard, Adam updates.
#[allow(clippy::too_many_arguments)]
fn run<S: Clone + Send + Sync>(
    model: &mut Model,
    samples: &[S],
    cfg: &TrainConfig,
    epochs: usize,
    stage: &str,
    opts: &mut RunOptions<'_>,
    crop: impl Fn(&S, &mut ChaCha8Rng, &TrainConfig) -> S + Send + Sync,
    loss: impl Fn(&Model, &Session<'_, f32>, &S) -> Var<f32>,
    validate: impl Fn(&Model) -> Result<f64, Error>,
    frozen: &[&str],
) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let steps = total_steps(cfg, epochs, samples.len());
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() });
    for (prefix, factor) in &cfg.lr_scale {
        adam = adam.with_lr_scale(prefix.clone(), *factor);
    }
    let mut report = TrainReport::default();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    report.validation.push((0, validate(model)?));
    let batch = cfg.batch_size;
    let seed = cfg.seed;
    std::thread::scope(|scope| -> Result<(), TrainError> {
        let (tx, rx) = sync_channel::<Vec<S>>(2);
        let crop = &crop;
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = Vec::new();
            for _ in 0..steps {
                let mut b = Vec::with_capacity(batch);
                while b.len() < batch.min(samples.len()) {
                    if order.is_empty() {
                        order = (0..samples.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    let i = order.pop().expect("refilled");
                    b.push(crop(&samples[i], &mut rng, cfg));
                }
                if tx.send(b).is_err() {
                    return;
                }
            }
        });
        for step in 1..=steps {
            let b = rx.recv().expect("prefetch thread produces every step");
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut total = 0.0;
            for x in &b {
                let s = Session::training(&model.params).freeze(frozen);
                let l = loss(model, &s, x);
                total += l.item() as f64;
                let mut g = l.backward();
                for (name, gv) in s.param_grads(&mut g) {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, v)| *a += v),
                        None => {
                            grads.insert(name, gv);
                        }
                    }
                }
            }
            let inv = 1.0 / b.len() as f32;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            let mean = total / b.len() as f64;
            let norm = match cfg.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => toonbetween_core::nn::grad_norm(&grads),
            };
            if !mean.is_finite() || !norm.is_finite() {
                return Err(TrainError::Diverged { step, loss: mean });
            }
            adam.config.lr = cfg.lr_at(step - 1, steps);
            adam.step(&mut model.params, &grads);
            report.losses.push(mean);
            if step % cfg.validate_every == 0 || step == steps {
                let v = validate(model)?;
                report.validation.push((step, v));
                if let Some(log) = opts.log.as_mut() {
                    writeln!(log, "{stage} step {step}/{steps} loss {mean:.5} val_psnr {v:.3}")?;
                }
                if opts.target_psnr.is_some_and(|t| v >= t) {
                    break;
                }
            }
            if let Some(dir) = &opts.out_dir {
                if step % cfg.checkpoint_every == 0 {
                    let p = dir.join(format!("{stage}_step{step:06}.safetensors"));
                    checkpoint::save(model, &p)?;
                    report.checkpoints.push(p);
                }
            }
        }
        Ok(())
    })?;
    if let Some(dir) = &opts.out_dir {
        let p = dir.join(format!("{stage}_final.safetensors"));
        checkpoint::save(model, &p)?;
        report.checkpoints.push(p);
        report.write_curves(dir, stage)?;
    }
    Ok(report)
}

/// Stage 1: correspondence and blending networks on the synthesis loss.
/// Validation PSNR is measured on `validation` (or the training set when empty).
pub fn train_stage1(
    model: &mut Model,
    train: &[Stage1Sample],
    validation: &[Stage1Sample],
    cfg: &TrainConfig,
    opts: &mut RunOptions<'_>,
) -> Result<TrainReport, TrainError> {
    let val = if validation.is_empty() { train } else { validation };
    run(
        model,
        train,
        cfg,
        cfg.stage1_epochs,
        "stage1",
        opts,
        crop_stage1,
        |m, s, x| stage1_terms(m, s, x, cfg).total,
        |m| stage1_psnr(m, val),
        &["refine.", "temporal."],
    )
}

/// Stage 2: every module jointly on the clip ℓ1 loss. With `cfg.temporal`
/// off the temporal network is frozen and bypassed.
pub fn train_stage2(
    model: &mut Model,
    train: &[Stage2Sample],
    validation: &[Stage2Sample],
    cfg: &TrainConfig,
    opts: &mut RunOptions<'_>,
) -> Result<TrainReport, TrainError> {
    let val = if validation.is_empty() { train } else { validation };
    let frozen: &[&str] = if cfg.temporal { &[] } else { &["temporal."] };
    run(
        model,
        train,
        cfg,
        cfg.stage2_epochs,
        "stage2",
        opts,
        crop_stage2,
        |m, s, x| stage2_terms(m, s, x, cfg.temporal).0,
        |m| stage2_psnr(m, val, cfg.temporal),
        frozen,
    )
}
