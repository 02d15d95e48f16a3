use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toonbetween_core::sketchgen::{synth_sketch, SketchParams};
use toonbetween_model::{checkpoint, Model, ModelConfig};
use toonbetween_train::synth::{MotionKind, SceneOptions, SpriteScene};
use toonbetween_train::train::{stage1_loss, train_stage1, train_stage2, RunOptions, Stage1Sample, Stage2Sample, TrainError};
use toonbetween_train::TrainConfig;

const H: usize = 32;
const W: usize = 48;

fn clips(seeds: std::ops::Range<u64>, frames: usize) -> Vec<Vec<toonbetween_core::Frame>> {
    let opts = SceneOptions { kind: MotionKind::Affine, max_displacement: 6.0, ..SceneOptions::new(H, W) };
    seeds.map(|s| SpriteScene::random(&opts, &mut ChaCha8Rng::seed_from_u64(s)).clip(frames)).collect()
}

fn stage1_samples() -> Vec<Stage1Sample> {
    let p = SketchParams::default();
    clips(0..3, 3)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let sk = synth_sketch(&c[1], &p, &mut ChaCha8Rng::seed_from_u64(i as u64));
            Stage1Sample::new(c[0].clone(), c[1].clone(), c[2].clone(), sk, &p).unwrap()
        })
        .collect()
}

fn stage2_samples() -> Vec<Stage2Sample> {
    let p = SketchParams::default();
    clips(10..12, 7)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let sk = synth_sketch(&c[3], &p, &mut ChaCha8Rng::seed_from_u64(i as u64));
            Stage2Sample::new(c, sk).unwrap()
        })
        .collect()
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig { max_steps: Some(steps), batch_size: 2, height: H, width: W, validate_every: 1, model: ModelConfig::compact(), ..TrainConfig::default() }
}

fn params_under(model: &Model, prefix: &str) -> Vec<(String, Vec<f32>)> {
    model.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(n, t)| (n.clone(), t.data.to_vec())).collect()
}

#[test]
fn initial_loss_is_finite_and_positive() {
    let model = Model::new(ModelConfig::compact(), 0);
    let l = stage1_loss(&model, &stage1_samples(), &config(1));
    assert!(l.is_finite() && l > 0.0, "{l}");
}

#[test]
fn checkpoint_round_trip_keeps_validation_loss() {
    let samples = stage1_samples();
    let cfg = config(2);
    let mut model = Model::new(cfg.model.clone(), 3);
    let report = train_stage1(&mut model, &samples, &[], &cfg, &mut RunOptions::default()).unwrap();
    assert_eq!(report.steps(), 2);
    assert_eq!(report.validation.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(stage1_loss(&model, &samples, &cfg), stage1_loss(&back, &samples, &cfg));
}

#[test]
fn runs_are_deterministic() {
    let samples = stage1_samples();
    let cfg = config(2);
    let run = || {
        let mut m = Model::new(cfg.model.clone(), 5);
        let r = train_stage1(&mut m, &samples, &[], &cfg, &mut RunOptions::default()).unwrap();
        (r.losses, checkpoint::to_bytes(&m).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_one_leaves_later_modules_alone() {
    let samples = stage1_samples();
    let cfg = config(1);
    let mut model = Model::new(cfg.model.clone(), 1);
    let refine = params_under(&model, "refine.");
    let temporal = params_under(&model, "temporal.");
    let corr = params_under(&model, "corr");
    train_stage1(&mut model, &samples, &[], &cfg, &mut RunOptions::default()).unwrap();
    assert_eq!(params_under(&model, "refine."), refine);
    assert_eq!(params_under(&model, "temporal."), temporal);
    assert_ne!(params_under(&model, "corr"), corr);
}

#[test]
fn stage_two_without_temporal_freezes_it() {
    let samples = stage2_samples();
    let cfg = TrainConfig { temporal: false, ..config(1) };
    let mut model = Model::new(cfg.model.clone(), 2);
    let temporal = params_under(&model, "temporal.");
    let refine = params_under(&model, "refine.");
    train_stage2(&mut model, &samples, &[], &cfg, &mut RunOptions::default()).unwrap();
    assert_eq!(params_under(&model, "temporal."), temporal);
    assert_ne!(params_under(&model, "refine."), refine);

    let cfg = TrainConfig { temporal: true, ..config(1) };
    train_stage2(&mut model, &samples, &[], &cfg, &mut RunOptions::default()).unwrap();
    assert_ne!(params_under(&model, "temporal."), temporal);
}

#[test]
fn non_finite_loss_stops_training() {
    let samples = stage1_samples();
    let cfg = TrainConfig { lambda_contour: f64::INFINITY, ..config(3) };
    let mut model = Model::new(cfg.model.clone(), 0);
    match train_stage1(&mut model, &samples, &[], &cfg, &mut RunOptions::default()) {
        Err(TrainError::Diverged { step: 1, loss }) => assert!(!loss.is_finite()),
        other => panic!("expected divergence at step 1, got {:?}", other.map(|r| r.losses)),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let mut model = Model::new(ModelConfig::compact(), 0);
    assert!(matches!(train_stage1(&mut model, &[], &[], &config(1), &mut RunOptions::default()), Err(TrainError::Empty)));
}

#[test]
fn out_dir_gets_checkpoints_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 1, ..config(2) };
    let mut model = Model::new(cfg.model.clone(), 0);
    let mut opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let report = train_stage1(&mut model, &stage1_samples(), &[], &cfg, &mut opts).unwrap();
    assert_eq!(report.checkpoints.len(), 3);
    for p in &report.checkpoints {
        assert!(p.exists(), "{}", p.display());
    }
    let last = checkpoint::load(report.checkpoints.last().unwrap()).unwrap();
    assert_eq!(checkpoint::to_bytes(&last).unwrap(), checkpoint::to_bytes(&model).unwrap());
}
