//! The full inbetweening model: stage-one synthesis, arbitrary-time
//! interpolation and optional temporal refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toonbetween_core::geometry::backward_warp_var;
use toonbetween_core::nn::{ParamStore, Session};
use toonbetween_core::{BlendMask, Error, FlowField, Frame, Grid, OcclusionMask, Real, Result, Sketch, Var};

use crate::config::ModelConfig;
use crate::correspondence::{check_inputs, Correspondence, CorrespondenceResult, FlowVars};
use crate::interpolate::{interp_flows_var, FlowRefiner, InterpFlowVars};
use crate::occlusion_blend::{blend_var, occlusion_mask_var, BlendNet};
use crate::temporal::TemporalNet;

/// Intermediate tensors of middle-frame synthesis.
#[derive(Debug, Clone)]
pub struct StageOneVars<T: Real> {
    pub flows: FlowVars<T>,
    pub warped0: Var<T>,
    pub warped1: Var<T>,
    pub occlusion0: Var<T>,
    pub occlusion1: Var<T>,
    pub mask: Var<T>,
    pub frame: Var<T>,
}

/// Intermediate tensors of one interpolated frame.
#[derive(Debug, Clone)]
pub struct InterpVars<T: Real> {
    pub rough: InterpFlowVars<T>,
    pub refined: InterpFlowVars<T>,
    pub mask: Var<T>,
    pub frame: Var<T>,
}

/// Result of middle-frame synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub frame: Frame,
    pub flows: CorrespondenceResult,
    pub occlusion: (OcclusionMask, OcclusionMask),
    pub blend_mask: BlendMask,
}

/// Network architecture (no parameters).
pub struct Inbetweener {
    pub config: ModelConfig,
    pub correspondence: Correspondence,
    pub blend: BlendNet,
    pub refine: FlowRefiner,
    pub temporal: TemporalNet,
}

fn check_time(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("{name} = {v} outside (0, 1)")))
    }
}

impl Inbetweener {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            correspondence: Correspondence::new(&config.correspondence),
            blend: BlendNet::new(&config.blend),
            refine: FlowRefiner::new(&config.refine),
            temporal: TemporalNet::new(&config.temporal),
            config,
        }
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.correspondence.init(&mut store, &mut rng);
        self.blend.init(&mut store, &mut rng);
        self.refine.init(&mut store, &mut rng);
        self.temporal.init(&mut store, &mut rng);
        store
    }

    /// Middle frame from the sketch and both keyframes.
    pub fn stage_one<T: Real>(&self, s: &Session<'_, T>, sketch: &Var<T>, i0: &Var<T>, i1: &Var<T>) -> StageOneVars<T> {
        let flows = self.correspondence.forward(s, sketch, i0, i1);
        self.stage_one_from_flows(s, flows, sketch, i0, i1)
    }

    pub fn stage_one_from_flows<T: Real>(
        &self,
        s: &Session<'_, T>,
        flows: FlowVars<T>,
        sketch: &Var<T>,
        i0: &Var<T>,
        i1: &Var<T>,
    ) -> StageOneVars<T> {
        let warped0 = backward_warp_var(i0, &flows.t0);
        let warped1 = backward_warp_var(i1, &flows.t1);
        let occlusion0 = occlusion_mask_var(&flows.t0, &flows.f0t);
        let occlusion1 = occlusion_mask_var(&flows.t1, &flows.f1t);
        let mask = self.blend.forward(s, &warped0, &warped1, &occlusion0, &occlusion1, sketch);
        let frame = blend_var(&warped0, &warped1, &mask);
        StageOneVars { flows, warped0, warped1, occlusion0, occlusion1, mask, frame }
    }

    /// Frame at time `k ∈ (0, t)` of the segment whose ends are `i0` (time 0)
    /// and the synthesized `i_hat` (time `t`).
    #[allow(clippy::too_many_arguments)]
    pub fn interpolate_at<T: Real>(
        &self,
        s: &Session<'_, T>,
        i0: &Var<T>,
        i_hat: &Var<T>,
        sketch: &Var<T>,
        f_0t: &Var<T>,
        f_t0: &Var<T>,
        k: f64,
        t: f64,
    ) -> InterpVars<T> {
        let rough = interp_flows_var(f_0t, f_t0, k, t);
        let i_0k = backward_warp_var(i0, &rough.f_k0);
        let i_tk = backward_warp_var(i_hat, &rough.f_kt);
        let refined = self.refine.forward(s, &i_0k, &i_tk, &rough);
        let w0 = backward_warp_var(i0, &refined.f_k0);
        let w1 = backward_warp_var(i_hat, &refined.f_kt);
        let o0 = occlusion_mask_var(&refined.f_k0, &refined.f_0k);
        let o1 = occlusion_mask_var(&refined.f_kt, &refined.f_tk);
        let s_k = backward_warp_var(sketch, &refined.f_kt);
        let mask = self.blend.forward(s, &w0, &w1, &o0, &o1, &s_k);
        let frame = blend_var(&w0, &w1, &mask);
        InterpVars { rough, refined, mask, frame }
    }

    /// Frames at `times` (sorted, in (0, 1)) in graph form, without temporal refinement.
    pub fn sequence_vars<T: Real>(
        &self,
        s: &Session<'_, T>,
        stage: &StageOneVars<T>,
        i0: &Var<T>,
        i1: &Var<T>,
        sketch: &Var<T>,
        t: f64,
        times: &[f64],
    ) -> Vec<Var<T>> {
        times
            .iter()
            .map(|&k| {
                if k == t {
                    stage.frame.clone()
                } else if k < t {
                    self.interpolate_at(s, i0, &stage.frame, sketch, &stage.flows.f0t, &stage.flows.t0, k, t).frame
                } else {
                    self.interpolate_at(s, i1, &stage.frame, sketch, &stage.flows.f1t, &stage.flows.t1, 1.0 - k, 1.0 - t)
                        .frame
                }
            })
            .collect()
    }

    pub fn synthesize_middle(&self, store: &ParamStore<f32>, sketch: &Sketch, i0: &Frame, i1: &Frame) -> Result<Synthesis> {
        check_inputs(sketch, i0, i1)?;
        let s = Session::inference(store);
        let st = self.stage_one(&s, &sketch.to_var(), &i0.to_var(), &i1.to_var());
        Ok(Synthesis {
            frame: Frame::from_var_clamped(&st.frame, 0)?,
            flows: st.flows.to_result(0)?,
            occlusion: (
                OcclusionMask::new(Grid::from_var(&st.occlusion0, 0))?,
                OcclusionMask::new(Grid::from_var(&st.occlusion1, 0))?,
            ),
            blend_mask: BlendMask::new(Grid::from_var(&st.mask, 0))?,
        })
    }

    /// One frame at time `k ∈ (0, t)` from stage-one outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn interpolate_frame(
        &self,
        store: &ParamStore<f32>,
        i0: &Frame,
        i_hat: &Frame,
        sketch: &Sketch,
        f_0t: &FlowField,
        f_t0: &FlowField,
        k: f64,
        t: f64,
    ) -> Result<Frame> {
        check_inputs(sketch, i0, i_hat)?;
        if !(t > 0.0 && t <= 1.0 && k > 0.0 && k < t) {
            return Err(Error::Contract(format!("need 0 < k < t <= 1, got k = {k}, t = {t}")));
        }
        let s = Session::inference(store);
        let v = self.interpolate_at(&s, &i0.to_var(), &i_hat.to_var(), &sketch.to_var(), &f_0t.to_var(), &f_t0.to_var(), k, t);
        Frame::from_var_clamped(&v.frame, 0)
    }

    /// Frames at every time in `times`, in order. `times` must be sorted and
    /// inside (0, 1); the sketch time `t` may or may not be among them.
    #[allow(clippy::too_many_arguments)]
    pub fn interpolate_sequence(
        &self,
        store: &ParamStore<f32>,
        i0: &Frame,
        i1: &Frame,
        sketch: &Sketch,
        t: f64,
        times: &[f64],
        temporal: bool,
    ) -> Result<Vec<Frame>> {
        check_time("t", t)?;
        for (i, &k) in times.iter().enumerate() {
            check_time("time", k)?;
            if i > 0 && times[i - 1] >= k {
                return Err(Error::Contract("times must be strictly increasing".into()));
            }
        }
        if times.is_empty() {
            return Ok(Vec::new());
        }
        check_inputs(sketch, i0, i1)?;
        let s = Session::inference(store);
        let (sk, a, b) = (sketch.to_var(), i0.to_var(), i1.to_var());
        let st = self.stage_one(&s, &sk, &a, &b);
        let frames: Vec<Frame> = self
            .sequence_vars(&s, &st, &a, &b, &sk, t, times)
            .iter()
            .map(|v| Frame::from_var_clamped(v, 0))
            .collect::<Result<_>>()?;
        if !temporal {
            return Ok(frames);
        }
        let mut seq = Vec::with_capacity(frames.len() + 2);
        seq.push(i0.clone());
        seq.extend(frames);
        seq.push(i1.clone());
        let mut refined = self.temporal.refine_sequence(store, &seq)?;
        refined.pop();
        refined.remove(0);
        Ok(refined)
    }
}

/// Architecture plus trained parameters.
pub struct Model {
    pub net: Inbetweener,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let net = Inbetweener::new(config);
        let params = net.init_params(seed);
        Self { net, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn synthesize_middle(&self, sketch: &Sketch, i0: &Frame, i1: &Frame) -> Result<Synthesis> {
        self.net.synthesize_middle(&self.params, sketch, i0, i1)
    }

    pub fn interpolate_sequence(
        &self,
        i0: &Frame,
        i1: &Frame,
        sketch: &Sketch,
        t: f64,
        times: &[f64],
        temporal: bool,
    ) -> Result<Vec<Frame>> {
        self.net.interpolate_sequence(&self.params, i0, i1, sketch, t, times, temporal)
    }
}
