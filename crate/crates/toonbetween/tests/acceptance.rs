//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Runs without the libtest harness so the report is always printed.

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use toonbetween::service::{router, AppState, ServiceConfig};
use toonbetween_core::metrics::{epe, epe_masked, psnr, ssim};
use toonbetween_core::sketchgen::{synth_sketch, GradientDetector, SketchParams};
use toonbetween_core::{io, ContourMap, ConvOpts, FlowField, Frame, Grid, Sketch, Var};
use toonbetween_model::checkpoint;
use toonbetween_model::interpolate::interp_flows_var;
use toonbetween_model::occlusion_blend::{
    blend, contour_loss_var, distance_transform, occlusion_mask_var, squared_distance_transform, synthesis_loss,
};
use toonbetween_model::{Model, ModelConfig};
use toonbetween_core::nn::Session;
use toonbetween_core::geometry::backward_warp_var;
use toonbetween_core::BlendMask;
use toonbetween_train::data::{matching_rate, plan_dataset, prepare_dataset, prune_duplicates, FnFlow, PrepareOptions};
use toonbetween_train::synth::{MotionKind, SceneOptions, SpriteScene};
use toonbetween_train::train::{train_stage1, train_stage2, RunOptions, Stage1Sample, Stage2Sample};
use toonbetween_train::TrainConfig;

const H: usize = 96;
const W: usize = 160;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, title: &str, outcome: Result<String, String>) {
        match outcome {
            Ok(detail) => println!("PASS  [{id}] {title}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  [{id}] {title}: {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn rand_var(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Var<f64> {
    let n = shape.iter().product();
    Var::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- formulas

fn flow_interpolation_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (10, 14);
    let mut worst: f64 = 0.0;
    let mut note = |what: &str, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        if e > 1e-6 {
            Err(format!("{what}: error {e:.3e}"))
        } else {
            Ok(())
        }
    };
    for _ in 0..100 {
        let f0t = rand_var(&mut rng, &[1, 2, h, w], -8.0, 8.0);
        let ft0 = rand_var(&mut rng, &[1, 2, h, w], -8.0, 8.0);
        let t: f64 = rng.random_range(0.1..1.0);
        let zero = vec![0.0; 2 * h * w];

        // endpoints, approached from inside (0, t)
        let lo = interp_flows_var(&f0t, &ft0, t * 1e-10, t);
        note("f_0k at k→0", max_abs_diff(lo.f_0k.data(), &zero))?;
        note("f_k0 at k→0", max_abs_diff(lo.f_k0.data(), &zero))?;
        note("f_tk at k→0", max_abs_diff(lo.f_tk.data(), ft0.data()))?;
        note("f_kt at k→0", max_abs_diff(lo.f_kt.data(), f0t.data()))?;
        let hi = interp_flows_var(&f0t, &ft0, t * (1.0 - 1e-10), t);
        note("f_0k at k→t", max_abs_diff(hi.f_0k.data(), f0t.data()))?;
        note("f_k0 at k→t", max_abs_diff(hi.f_k0.data(), ft0.data()))?;
        note("f_tk at k→t", max_abs_diff(hi.f_tk.data(), &zero))?;
        note("f_kt at k→t", max_abs_diff(hi.f_kt.data(), &zero))?;

        // midpoint antisymmetry
        let mid = interp_flows_var(&f0t, &ft0, t / 2.0, t);
        note("f_k0 = -f_kt at k=t/2", max_abs_diff(mid.f_k0.data(), mid.f_kt.neg().data()))?;

        // linearity in the input flows
        let k = rng.random_range(0.01..0.99) * t;
        let g0t = rand_var(&mut rng, &[1, 2, h, w], -8.0, 8.0);
        let gt0 = rand_var(&mut rng, &[1, 2, h, w], -8.0, 8.0);
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed = interp_flows_var(&f0t.scale(a).add(&g0t.scale(b)), &ft0.scale(a).add(&gt0.scale(b)), k, t);
        let (pf, pg) = (interp_flows_var(&f0t, &ft0, k, t), interp_flows_var(&g0t, &gt0, k, t));
        for (name, m, x, y) in [
            ("f_0k", &mixed.f_0k, &pf.f_0k, &pg.f_0k),
            ("f_tk", &mixed.f_tk, &pf.f_tk, &pg.f_tk),
            ("f_kt", &mixed.f_kt, &pf.f_kt, &pg.f_kt),
            ("f_k0", &mixed.f_k0, &pf.f_k0, &pg.f_k0),
        ] {
            note(&format!("linearity {name}"), max_abs_diff(m.data(), x.scale(a).add(&y.scale(b)).data()))?;
        }

        // constant translation: a point moving linearly by d over (0, t)
        let d = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let field = |s: f64| Var::new(vec![1, 2, h, w], (0..2 * h * w).map(|i| s * d[i / (h * w)]).collect::<Vec<f64>>());
        let c = interp_flows_var(&field(1.0), &field(-1.0), k, t);
        note("translation f_0k", max_abs_diff(c.f_0k.data(), field(k / t).data()))?;
        note("translation f_k0", max_abs_diff(c.f_k0.data(), field(-k / t).data()))?;
        note("translation f_kt", max_abs_diff(c.f_kt.data(), field((t - k) / t).data()))?;
        note("translation f_tk", max_abs_diff(c.f_tk.data(), field((k - t) / t).data()))?;

        // each flow is a polynomial of degree ≤ 2 in k: third differences vanish
        let step = t / 5.0;
        let seq: Vec<_> = (1..5).map(|i| interp_flows_var(&f0t, &ft0, i as f64 * step, t)).collect();
        for pick in [|f: &toonbetween_model::interpolate::InterpFlowVars<f64>| f.f_kt.clone(), |f: &toonbetween_model::interpolate::InterpFlowVars<f64>| f.f_k0.clone()] {
            let v: Vec<Var<f64>> = seq.iter().map(pick).collect();
            let third = v[3].sub(&v[2].scale(3.0)).add(&v[1].scale(3.0)).sub(&v[0]);
            note("third difference in k", max_abs_diff(third.data(), &zero))?;
        }
    }
    Ok(format!("100 flow pairs, max error {worst:.2e} (tol 1e-6)"))
}

/// Bilinear sample of a 2-channel field at (x, y), coordinates clamped to the border.
fn sample_clamped(f: &[f64], h: usize, w: usize, x: f64, y: f64) -> [f64; 2] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let at = |yy: usize, xx: usize| f[c * h * w + yy * w + xx];
        *o = at(y0, x0) * (1.0 - fx) * (1.0 - fy) + at(y0, x0 + 1) * fx * (1.0 - fy) + at(y0 + 1, x0) * (1.0 - fx) * fy + at(y0 + 1, x0 + 1) * fx * fy;
    }
    out
}

fn occlusion_is_tanh() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (11, 13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let fab = rand_var(&mut rng, &[1, 2, h, w], -3.0, 3.0);
        let fba = rand_var(&mut rng, &[1, 2, h, w], -3.0, 3.0);
        let got = occlusion_mask_var(&fab, &fba);
        let (a, b) = (fab.data(), fba.data());
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (dx, dy) = (a[p], a[h * w + p]);
                let back = sample_clamped(b, h, w, x as f64 + dx, y as f64 + dy);
                let cyc = ((dx + back[0]).powi(2) + (dy + back[1]).powi(2)).sqrt();
                worst = worst.max((got.data()[p] - (cyc / 2.0).tanh()).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("100 flow pairs, max |O - tanh(c/2)| = {worst:.2e} (tol 1e-6)"))
}

fn distance_transform_exact() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 32;
    for case in 0..50 {
        let density = [0.002, 0.01, 0.05, 0.2, 0.6][case % 5];
        let mut sites: Vec<bool> = (0..n * n).map(|_| rng.random_bool(density)).collect();
        if !sites.iter().any(|&s| s) {
            sites[rng.random_range(0..n * n)] = true;
        }
        let pts: Vec<(i64, i64)> = (0..n * n).filter(|&i| sites[i]).map(|i| ((i / n) as i64, (i % n) as i64)).collect();
        let brute: Vec<f64> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as i64, (i % n) as i64);
                pts.iter().map(|&(py, px)| ((py - y).pow(2) + (px - x).pow(2)) as f64).fold(f64::INFINITY, f64::min)
            })
            .collect();
        let sq = squared_distance_transform(&sites, n, n).ok_or("no sites")?;
        if sq != brute {
            return Err(format!("mask {case}: squared distances differ"));
        }
        let cmap = ContourMap::new(Grid::new(1, n, n, sites.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()).unwrap()).unwrap();
        let d = distance_transform(&cmap).map_err(|e| e.to_string())?;
        let want: Vec<f32> = brute.iter().map(|v| v.sqrt() as f32).collect();
        if d.grid().data() != want.as_slice() {
            return Err(format!("mask {case}: distances differ"));
        }
    }
    Ok("50 random 32x32 masks match brute force exactly".into())
}

fn metric_oracles() -> Result<String, String> {
    let zero = Frame::new(Grid::filled(3, 16, 16, 0.0)).unwrap();
    let half = Frame::new(Grid::filled(3, 16, 16, 0.5)).unwrap();
    let p = psnr(&zero, &half);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Frame::new(Grid::new(3, 24, 24, (0..3 * 24 * 24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()).unwrap();
    let s = ssim(&x, &x);
    let f = FlowField::from_fn(12, 12, |_, _| (3.0, 4.0));
    let e = epe(&f, &FlowField::zeros(12, 12));
    let l = synthesis_loss(1.0, 2.0, 3.0);
    let ok = (p - 6.0206).abs() <= 1e-3 && (s - 1.0).abs() <= 1e-12 && (e - 5.0).abs() <= 1e-6 && (l - 2.03).abs() <= 1e-12;
    check(ok, format!("PSNR {p:.4} dB, SSIM(x,x) {s}, EPE {e}, loss composition {l:.6}"))
}

// ---------------------------------------------------------- differentiability

/// Largest coordinate-wise relative error between analytic and central-difference
/// gradients of the scalar `f` at `x0`.
fn grad_error(x0: &Var<f64>, f: &dyn Fn(&Var<f64>) -> Var<f64>) -> f64 {
    let x = Var::leaf(x0.shape().to_vec(), x0.to_vec(), true);
    let mut g = f(&x).backward();
    let analytic = g.take(&x).unwrap_or_else(|| vec![0.0; x.numel()]);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..x0.numel())
        .map(|i| {
            let mut p = x0.to_vec();
            p[i] += h;
            let up = f(&Var::new(x0.shape().to_vec(), p.clone())).item();
            p[i] -= 2.0 * h;
            let down = f(&Var::new(x0.shape().to_vec(), p)).item();
            (up - down) / (2.0 * h)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

fn smooth_image(c: usize, h: usize, w: usize, phase: f64) -> Var<f64> {
    Var::new(
        vec![1, c, h, w],
        (0..c * h * w)
            .map(|i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                0.5 + 0.4 * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.45 + ch as f64).cos())
            })
            .collect(),
    )
}

fn differentiability() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;

    let img = smooth_image(3, 12, 12, 0.3);
    let wts = rand_var(&mut rng, &[1, 3, 12, 12], -1.0, 1.0);
    let flow = rand_var(&mut rng, &[1, 2, 12, 12], -2.5, 2.5);
    let e = grad_error(&flow, &|f| backward_warp_var(&img, f).mul(&wts).sum());
    parts.push(format!("warp/flow {e:.1e}"));
    worst = worst.max(e);

    let fba = rand_var(&mut rng, &[1, 2, 10, 10], -2.0, 2.0);
    let fab = rand_var(&mut rng, &[1, 2, 10, 10], -2.0, 2.0);
    let mw = rand_var(&mut rng, &[1, 1, 10, 10], -1.0, 1.0);
    let e1 = grad_error(&fab, &|f| occlusion_mask_var(f, &fba).mul(&mw).sum());
    let e2 = grad_error(&fba, &|f| occlusion_mask_var(&fab, f).mul(&mw).sum());
    parts.push(format!("occlusion {:.1e}", e1.max(e2)));
    worst = worst.max(e1).max(e2);

    let frame = smooth_image(3, 16, 16, 1.1);
    let d = rand_var(&mut rng, &[1, 1, 16, 16], 0.0, 6.0);
    let det = GradientDetector::default();
    let e = grad_error(&frame, &|x| contour_loss_var(&det, x, &d));
    parts.push(format!("contour loss {e:.1e}"));
    worst = worst.max(e);

    let x = smooth_image(2, 9, 9, 0.7);
    let weight = rand_var(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let offsets = rand_var(&mut rng, &[1, 18, 9, 9], -1.5, 1.5);
    let ow = rand_var(&mut rng, &[1, 3, 9, 9], -1.0, 1.0);
    let e = grad_error(&offsets, &|o| x.deform_conv3x3(o, &weight, None).mul(&ow).sum());
    parts.push(format!("deformable offsets {e:.1e}"));
    worst = worst.max(e);

    check(worst < 1e-3, format!("max relative error {worst:.2e} (tol 1e-3): {}", parts.join(", ")))
}

// ------------------------------------------------------- reductions/identities

fn reductions() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 2 * 4 * 11 * 13;
    let x = Var::<f32>::new(vec![2, 4, 11, 13], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let wgt = Var::<f32>::new(vec![5, 4, 3, 3], (0..180).map(|_| rng.random_range(-1.0..1.0)).collect());
    let bias = Var::<f32>::new(vec![5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
    let zeros = Var::<f32>::zeros(vec![2, 18, 11, 13]);
    let deform_ok = x.deform_conv3x3(&zeros, &wgt, Some(&bias)).data() == x.conv2d(&wgt, Some(&bias), ConvOpts::same(3)).data();

    let model = Model::new(ModelConfig::compact(), 9);
    let s = Session::inference(&model.params);
    let i0 = smooth_image(3, 24, 32, 0.0).to_vec().iter().map(|&v| v as f32).collect::<Vec<_>>();
    let i0 = Var::<f32>::new(vec![1, 3, 24, 32], i0);
    let ih = Var::<f32>::new(vec![1, 3, 24, 32], smooth_image(3, 24, 32, 0.9).to_vec().iter().map(|&v| v as f32).collect());
    let sk = Var::<f32>::full(vec![1, 1, 24, 32], 1.0);
    let f0t = Var::<f32>::new(vec![1, 2, 24, 32], (0..2 * 24 * 32).map(|_| rng.random_range(-3.0..3.0)).collect());
    let ft0 = Var::<f32>::new(vec![1, 2, 24, 32], (0..2 * 24 * 32).map(|_| rng.random_range(-3.0..3.0)).collect());
    let iv = model.net.interpolate_at(&s, &i0, &ih, &sk, &f0t, &ft0, 0.2, 0.5);
    let refine_ok = [(&iv.rough.f_0k, &iv.refined.f_0k), (&iv.rough.f_tk, &iv.refined.f_tk), (&iv.rough.f_kt, &iv.refined.f_kt), (&iv.rough.f_k0, &iv.refined.f_k0)]
        .iter()
        .all(|(a, b)| a.data() == b.data());

    let clip: Vec<Frame> = (0..7)
        .map(|i| Frame::new(Grid::from_fn(3, 24, 32, |c, y, x| ((x * 7 + y * 3 + c * 5 + i * 2) % 13) as f32 / 12.0)).unwrap())
        .collect();
    let temporal_ok = model.net.temporal.refine_clip(&model.params, &clip).map_err(|e| e.to_string())? == clip;

    let (a, b) = (clip[1].clone(), clip[4].clone());
    let ones = BlendMask::new(Grid::filled(1, 24, 32, 1.0)).unwrap();
    let nil = BlendMask::new(Grid::filled(1, 24, 32, 0.0)).unwrap();
    let blend_ok = blend(&a, &b, &ones).unwrap() == a && blend(&a, &b, &nil).unwrap() == b;

    check(
        deform_ok && refine_ok && temporal_ok && blend_ok,
        format!("deform(0)==conv {deform_ok}, refinement identity {refine_ok}, temporal identity {temporal_ok}, blend pass-through {blend_ok}"),
    )
}

// -------------------------------------------------------------- experiments

fn sprite_clips(kind: MotionKind, seeds: std::ops::Range<u64>, frames: usize) -> Vec<(SpriteScene, Vec<Frame>)> {
    scene_clips(SceneOptions { kind, ..SceneOptions::new(H, W) }, seeds, frames)
}

fn scene_clips(opts: SceneOptions, seeds: std::ops::Range<u64>, frames: usize) -> Vec<(SpriteScene, Vec<Frame>)> {
    seeds
        .map(|s| {
            let scene = SpriteScene::random(&opts, &mut ChaCha8Rng::seed_from_u64(s));
            let clip = scene.clip(frames);
            (scene, clip)
        })
        .collect()
}

fn sketch_of(frame: &Frame, seed: u64) -> Sketch {
    synth_sketch(frame, &SketchParams::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn average(a: &Frame, b: &Frame) -> Frame {
    Frame::new(Grid::from_fn(3, a.height(), a.width(), |c, y, x| 0.5 * (a.grid().get(c, y, x) + b.grid().get(c, y, x)))).unwrap()
}

fn experiment_config(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig { lr, batch_size: 1, height: H, width: W, max_steps: Some(steps), validate_every: 50, model: ModelConfig::compact(), ..TrainConfig::default() }
}

/// Stage-1 overfit on 8 Affine-motion triples; returns the trained model too.
fn stage1_overfit(clips: &[(SpriteScene, Vec<Frame>)]) -> (Result<String, String>, Option<Model>) {
    let params = SketchParams::default();
    let samples: Result<Vec<Stage1Sample>, _> = clips
        .iter()
        .enumerate()
        .map(|(i, (_, c))| Stage1Sample::new(c[0].clone(), c[3].clone(), c[6].clone(), sketch_of(&c[3], i as u64), &params))
        .collect();
    let samples = match samples {
        Ok(s) => s,
        Err(e) => return (Err(e.to_string()), None),
    };
    let baseline = samples.iter().map(|x| psnr(&average(&x.i0, &x.i1), &x.it)).sum::<f64>() / samples.len() as f64;
    let cfg = experiment_config(2000, 1e-3);
    let mut model = Model::new(cfg.model.clone(), 0);
    let report = match train_stage1(&mut model, &samples, &[], &cfg, &mut RunOptions { target_psnr: Some(30.5), ..Default::default() }) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), None),
    };
    let mut acc = 0.0;
    for x in &samples {
        match model.synthesize_middle(&x.sketch, &x.i0, &x.i1) {
            Ok(out) => acc += psnr(&out.frame, &x.it),
            Err(e) => return (Err(e.to_string()), None),
        }
    }
    let got = acc / samples.len() as f64;
    let steps = report.steps();
    let outcome = check(
        got >= 30.0 && got - baseline >= 5.0 && steps <= 2000,
        format!("PSNR {got:.2} dB after {steps} steps, keyframe-average baseline {baseline:.2} dB (+{:.2} dB)", got - baseline),
    );
    (outcome, Some(model))
}

fn correspondence_epe() -> Result<String, String> {
    let params = SketchParams::default();
    // keyframe-to-keyframe translation of at most 8 px
    let opts = SceneOptions { kind: MotionKind::Translation, max_displacement: 8.0, ..SceneOptions::new(H, W) };
    let train = scene_clips(opts.clone(), 1000..1000 + EPE_TRAIN_SCENES, 3);
    let held = scene_clips(opts, 5000..5016, 3);
    let samples = |cs: &[(SpriteScene, Vec<Frame>)], seed: u64| -> Result<Vec<Stage1Sample>, String> {
        cs.iter()
            .enumerate()
            .map(|(i, (_, c))| Stage1Sample::new(c[0].clone(), c[1].clone(), c[2].clone(), sketch_of(&c[1], seed + i as u64), &params).map_err(|e| e.to_string()))
            .collect()
    };
    let tr = samples(&train, 0)?;
    let va = samples(&held, 9000)?;
    let cfg = TrainConfig { validate_every: EPE_STEPS, lr_final: Some(1e-5), ..experiment_config(EPE_STEPS, 1e-3) };
    let mut model = Model::new(cfg.model.clone(), 0);
    train_stage1(&mut model, &tr, &va, &cfg, &mut RunOptions::default()).map_err(|e| e.to_string())?;
    let mut acc = 0.0;
    let mut largest: f64 = 0.0;
    for ((scene, _), x) in held.iter().zip(&va) {
        let r = model.net.correspondence.estimate_correspondence(&model.params, &x.sketch, &x.i0, &x.i1).map_err(|e| e.to_string())?;
        let gt = scene.flow(0.5, 0.0);
        let d = scene.flow(0.0, 1.0);
        let (dx, dy) = (d.grid().plane(0), d.grid().plane(1));
        largest = largest.max(dx.iter().zip(dy).map(|(a, b)| (a.hypot(*b)) as f64).fold(0.0, f64::max));
        acc += epe_masked(&r.f_t0, &gt, Some(&scene.sprite_mask(0.5)));
    }
    let mean = acc / held.len() as f64;
    check(
        mean < 1.5 && largest <= 8.0,
        format!("mean sprite EPE {mean:.3} px on 16 held-out triples (limit 1.5), largest |d| {largest:.2} px"),
    )
}

const EPE_TRAIN_SCENES: u64 = 64;
const EPE_STEPS: usize = 1500;
const STAGE2_STEPS: usize = 300;
const STAGE2_LR: f64 = 1e-4;

fn clip_psnr(model: &Model, clips: &[(SpriteScene, Vec<Frame>)], temporal: bool) -> Result<f64, String> {
    let times: Vec<f64> = (1..6).map(|i| i as f64 / 6.0).collect();
    let mut acc = 0.0;
    for (i, (_, c)) in clips.iter().enumerate() {
        let out = model.interpolate_sequence(&c[0], &c[6], &sketch_of(&c[3], i as u64), 0.5, &times, temporal).map_err(|e| e.to_string())?;
        acc += out.iter().zip(&c[1..6]).map(|(o, g)| psnr(o, g)).sum::<f64>() / 5.0;
    }
    Ok(acc / clips.len() as f64)
}

fn full_pipeline(stage1: &Model, clips: &[(SpriteScene, Vec<Frame>)]) -> (Result<String, String>, Option<Model>) {
    let run = || -> Result<(String, bool, Model), String> {
        let bytes = checkpoint::to_bytes(stage1).map_err(|e| e.to_string())?;
        let samples: Vec<Stage2Sample> = clips
            .iter()
            .enumerate()
            .map(|(i, (_, c))| Stage2Sample::new(c.clone(), sketch_of(&c[3], i as u64)).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        let mut arms = Vec::new();
        for temporal in [true, false] {
            let mut model = checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
            let mut cfg = TrainConfig { temporal, ..experiment_config(STAGE2_STEPS, STAGE2_LR) };
            cfg.lr_scale.insert("temporal.".into(), 10.0);
            train_stage2(&mut model, &samples, &[], &cfg, &mut RunOptions::default()).map_err(|e| e.to_string())?;
            arms.push((clip_psnr(&model, clips, temporal)?, model));
        }
        let (off, _) = arms.pop().expect("two arms");
        let (on, model) = arms.pop().expect("two arms");
        let before = clip_psnr(stage1, clips, false)?;
        let ok = on >= 28.0 && on >= off;
        Ok((format!("mean PSNR of 5 inbetweens {on:.3} dB with temporal processing, {off:.3} dB without (stage 1 only {before:.2} dB)"), ok, model))
    };
    match run() {
        Ok((msg, ok, model)) => (check(ok, msg), Some(model)),
        Err(e) => (Err(e), None),
    }
}

fn noisy_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f32) -> Frame {
    let base = Grid::from_fn(3, h, w, |c, y, x| 0.4 + 0.002 * (x + y) as f32 + 0.05 * c as f32);
    let data = base.data().iter().map(|&v| if amp > 0.0 { v + rng.random_range(-amp..amp) } else { v }).collect();
    Frame::new(Grid::new(3, h, w, data).unwrap()).unwrap()
}

fn with_block(f: &Frame, pixels: usize, delta: f32) -> Frame {
    let (h, w) = f.dims();
    let mut data = f.grid().data().to_vec();
    for p in 0..pixels {
        for c in 0..3 {
            data[c * h * w + p] = (data[c * h * w + p] + delta).clamp(0.0, 1.0);
        }
    }
    Frame::new(Grid::new(3, h, w, data).unwrap()).unwrap()
}

fn data_prep() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();

    // pruning: exact and near duplicates go, moving frames stay
    let (_, clip) = sprite_clips(MotionKind::Translation, 77..78, 6).remove(0);
    let jitter = |f: &Frame, rng: &mut ChaCha8Rng| {
        Frame::new(Grid::new(3, H, W, f.grid().data().iter().map(|&v| (v + rng.random_range(-0.002..0.002)).clamp(0.0, 1.0)).collect()).unwrap()).unwrap()
    };
    let j2 = jitter(&clip[2], &mut rng);
    let seq = vec![clip[0].clone(), clip[0].clone(), clip[1].clone(), clip[2].clone(), j2, clip[2].clone(), clip[3].clone(), clip[4].clone(), clip[5].clone()];
    let kept = prune_duplicates(&seq, 0.95);
    if kept != vec![0, 2, 3, 6, 7, 8] {
        return Err(format!("pruning kept {kept:?}, expected [0, 2, 3, 6, 7, 8]"));
    }
    // inclusive threshold: a pair exactly at the threshold is a duplicate
    let s = ssim(&clip[0], &clip[1]);
    let pair = [clip[0].clone(), clip[1].clone()];
    if prune_duplicates(&pair, s) != vec![0] || prune_duplicates(&pair, s + 1e-9) != vec![0, 1] {
        return Err("SSIM threshold is not inclusive".into());
    }
    notes.push("SSIM-0.95 pruning as constructed".to_string());

    // matching rate: exact fractions on a 20x20 frame, zero flows
    let (h, w) = (20, 20);
    let base = noisy_frame(&mut rng, h, w, 0.0);
    let z = FlowField::zeros(h, w);
    let rate = |bad: usize, delta: f32| matching_rate(&base, &with_block(&base, bad, delta), &base, &z, &z, 0.05).unwrap();
    let checks = [
        (rate(140, 0.2), 0.65, true),
        (rate(141, 0.2), 259.0 / 400.0, false),
        (rate(120, 0.049), 1.0, true),
        (rate(120, 0.051), 0.7, true),
    ];
    for (i, (got, want, accept)) in checks.iter().enumerate() {
        if got != want || (*got >= 0.65) != *accept {
            return Err(format!("matching-rate case {i}: got {got}, expected {want}"));
        }
    }
    notes.push("5%-error / 65%-rate boundaries exact".into());

    // filtering inside dataset planning: a corrupted middle frame is rejected
    let frames: Vec<Frame> = (0..7).map(|_| noisy_frame(&mut rng, 24, 24, 0.02)).collect();
    let mut frames = frames;
    frames[3] = with_block(&frames[3], 24 * 10, 0.12);
    let opts = PrepareOptions::default();
    let zero_flows = FnFlow(|_: &Frame, it: &Frame, _: &Frame| {
        let (h, w) = it.dims();
        Ok((FlowField::zeros(h, w), FlowField::zeros(h, w)))
    });
    let (manifest, _) = plan_dataset(std::slice::from_ref(&frames), &opts, &zero_flows).map_err(|e| e.to_string())?;
    if manifest.scenes.len() != 1 || manifest.scenes[0].timestamps.len() != 7 {
        return Err(format!("constructed sequence split or pruned unexpectedly: {:?}", manifest.scenes.iter().map(|s| &s.timestamps).collect::<Vec<_>>()));
    }
    let rejected: Vec<[usize; 3]> = manifest.rejected.iter().map(|t| t.frames).collect();
    let accepted: Vec<[usize; 3]> = manifest.stage1.iter().map(|t| t.frames).collect();
    if rejected != vec![[2, 3, 4]] || accepted.len() != 4 {
        return Err(format!("accepted {accepted:?}, rejected {rejected:?}"));
    }
    notes.push("corrupted triple rejected".into());

    // determinism: two runs write byte-identical datasets
    let sources: Vec<Vec<Frame>> = sprite_clips(MotionKind::Affine, 300..302, 9).into_iter().map(|(_, c)| c).collect();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let opts = PrepareOptions { seed: 42, ..PrepareOptions::default() };
    for d in &dirs {
        prepare_dataset(&sources, d.path(), &opts, &zero_flows).map_err(|e| e.to_string())?;
    }
    let listing = |root: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in std::fs::read_dir(&dir).unwrap().flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let (a, b) = (listing(dirs[0].path()), listing(dirs[1].path()));
    if a != b || a.is_empty() {
        return Err("reruns differ".into());
    }
    notes.push(format!("rerun byte-identical ({} files)", a.len()));
    Ok(notes.join("; "))
}

// ------------------------------------------------------------------ service

const BOUNDARY: &str = "acceptanceBoundary";

fn form(i0: &Frame, i1: &Frame, sketch: &Sketch) -> Vec<u8> {
    let mut b = Vec::new();
    for (name, data) in [
        ("keyframe0", io::encode_frame_png(i0).unwrap()),
        ("keyframe1", io::encode_frame_png(i1).unwrap()),
        ("sketch", io::encode_gray_png(sketch.grid()).unwrap()),
    ] {
        b.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\nContent-Type: image/png\r\n\r\n").as_bytes());
        b.extend_from_slice(&data);
        b.extend_from_slice(b"\r\n");
    }
    for (name, v) in [("t", "0.5"), ("times", "0.16666666666666666,0.3333333333333333,0.5,0.6666666666666666,0.8333333333333334"), ("temporal", "on")] {
        b.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{v}\r\n").as_bytes());
    }
    b.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    b
}

fn service_determinism(model: Model, clip: &[Frame]) -> Result<String, String> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().map_err(|e| e.to_string())?;
    let body = form(&clip[0], &clip[6], &sketch_of(&clip[3], 0));
    let app = router(AppState::new(Some(model), "acceptance", ServiceConfig::default()));
    let call = |app: axum::Router| {
        let body = body.clone();
        async move {
            let req = Request::post("/synthesize")
                .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
                .body(Body::from(body))
                .unwrap();
            let resp = app.oneshot(req).await.unwrap();
            let status = resp.status();
            let id = resp.headers().get("x-request-id").map(|v| v.to_str().unwrap().to_string());
            (status, id, resp.into_body().collect().await.unwrap().to_bytes())
        }
    };
    let (a, b, c) = rt.block_on(async {
        let a = call(app.clone()).await;
        let (b, c) = tokio::join!(call(app.clone()), call(app.clone()));
        (a, b, c)
    });
    if a.0 != StatusCode::OK {
        return Err(format!("status {}: {}", a.0, String::from_utf8_lossy(&a.2)));
    }
    let v: serde_json::Value = serde_json::from_slice(&a.2).map_err(|e| e.to_string())?;
    let frames = v["frames"].as_array().map_or(0, |f| f.len());
    check(
        a == b && b == c && frames == 5,
        format!("3 identical requests (2 concurrent): {frames} frames, bodies identical {}, request id {}", a.2 == b.2 && b.2 == c.2, a.1.unwrap_or_default()),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a filter that
    // does not name this suite skips it
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut r = Report { failed: 0 };
    let started = Instant::now();

    let t = Instant::now();
    let f1 = flow_interpolation_identities();
    let f2 = occlusion_is_tanh();
    let f3 = distance_transform_exact();
    let f4 = metric_oracles();
    let budget = within(t.elapsed(), Duration::from_secs(60));
    for (id, title, out) in [
        ("formula-1", "flow interpolation identities", f1),
        ("formula-2", "occlusion mask equals tanh(c/2)", f2),
        ("formula-3", "distance transform vs brute force", f3),
        ("formula-4", "metric oracles", f4),
    ] {
        r.line(id, title, out.and_then(|d| budget.clone().map(|_| d)));
    }

    let t = Instant::now();
    let d = differentiability();
    r.line("gradients", "finite-difference gradient checks", d.and_then(|s| within(t.elapsed(), Duration::from_secs(300)).map(|_| s)));
    r.line("identities", "reduction and identity suite", reductions());

    let t = Instant::now();
    let clips = sprite_clips(MotionKind::Affine, 100..108, 7);
    let (e5, stage1) = stage1_overfit(&clips);
    r.line("exp-5", "stage-1 overfit on 8 sprite triples", e5);
    r.line("exp-6", "correspondence EPE on held-out translations", correspondence_epe());
    let full = match &stage1 {
        Some(m) => {
            let (out, model) = full_pipeline(m, &clips);
            r.line("exp-7", "full-pipeline interpolation of 7-frame clips", out);
            model
        }
        None => {
            r.line("exp-7", "full-pipeline interpolation of 7-frame clips", Err("no stage-1 model".into()));
            None
        }
    };
    r.line("exp-8", "data-preparation thresholds and determinism", data_prep());
    let exp_time = t.elapsed();
    r.line("exp-time", "learning experiments within 60 minutes", within(exp_time, Duration::from_secs(3600)).map(|_| format!("{exp_time:.0?}")));

    let model = full.unwrap_or_else(|| Model::new(ModelConfig::compact(), 0));
    r.line("service", "service determinism", service_determinism(model, &clips[0].1));

    println!("acceptance: {} failed, total {:.0?}", r.failed, started.elapsed());
    if r.failed > 0 {
        std::process::exit(1);
    }
}
