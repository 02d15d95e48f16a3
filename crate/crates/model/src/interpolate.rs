//! Flows at an intermediate time `k ∈ (0, t)` from the flows between 0 and `t`.

use rand_chacha::ChaCha8Rng;
use toonbetween_core::nn::{ParamStore, Session};
use toonbetween_core::{Error, FlowField, Real, Result, Var};

use crate::config::UNetConfig;
use crate::unet::UNet;

/// Flows between time `k` and the segment ends 0 and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpFlows {
    pub f_0k: FlowField,
    pub f_tk: FlowField,
    pub f_k0: FlowField,
    pub f_kt: FlowField,
    pub k: f64,
    pub t: f64,
}

/// Graph form of [`InterpFlows`].
#[derive(Debug, Clone)]
pub struct InterpFlowVars<T: Real> {
    pub f_0k: Var<T>,
    pub f_tk: Var<T>,
    pub f_k0: Var<T>,
    pub f_kt: Var<T>,
}

/// Coefficients `(a, b)` such that each flow is `a·f_0t + b·f_t0`, in the order
/// `f_0k, f_tk, f_kt, f_k0`.
pub fn interp_coefficients(k: f64, t: f64) -> [(f64, f64); 4] {
    let t2 = t * t;
    [
        (k / t, 0.0),
        (0.0, (t - k) / t),
        ((t - k) * (t - k) / t2, -k * (t - k) / t2),
        (-k * (t - k) / t2, k * k / t2),
    ]
}

fn check_times(k: f64, t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Contract(format!("sketch time t = {t} outside (0, 1]")));
    }
    if !(k > 0.0 && k < t) {
        return Err(Error::Contract(format!("time k = {k} outside (0, {t})")));
    }
    Ok(())
}

/// Linear-motion flow interpolation.
pub fn interp_flows(f_0t: &FlowField, f_t0: &FlowField, k: f64, t: f64) -> Result<InterpFlows> {
    check_times(k, t)?;
    if f_0t.dims() != f_t0.dims() {
        return Err(Error::Contract("flow sizes differ".into()));
    }
    let [c0k, ctk, ckt, ck0] = interp_coefficients(k, t);
    let mix = |(a, b): (f64, f64)| f_0t.combine(a as f32, f_t0, b as f32);
    Ok(InterpFlows { f_0k: mix(c0k)?, f_tk: mix(ctk)?, f_kt: mix(ckt)?, f_k0: mix(ck0)?, k, t })
}

/// Graph version of [`interp_flows`]; `k` and `t` must satisfy `0 < k < t ≤ 1`.
pub fn interp_flows_var<T: Real>(f_0t: &Var<T>, f_t0: &Var<T>, k: f64, t: f64) -> InterpFlowVars<T> {
    check_times(k, t).expect("valid interpolation times");
    let [c0k, ctk, ckt, ck0] = interp_coefficients(k, t);
    let mix = |(a, b): (f64, f64)| {
        if b == 0.0 {
            f_0t.scale(T::lit(a))
        } else if a == 0.0 {
            f_t0.scale(T::lit(b))
        } else {
            f_0t.scale(T::lit(a)).add(&f_t0.scale(T::lit(b)))
        }
    };
    InterpFlowVars { f_0k: mix(c0k), f_tk: mix(ctk), f_kt: mix(ckt), f_k0: mix(ck0) }
}

/// Residual flow refinement over `(I_0k, I_tk, f_0k, f_tk, f_k0, f_kt)`.
pub struct FlowRefiner {
    unet: UNet,
}

impl FlowRefiner {
    pub fn new(cfg: &UNetConfig) -> Self {
        Self { unet: UNet::new("refine", cfg, 14, 8, false) }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.unet.init(store, rng);
    }

    pub fn forward<T: Real>(&self, s: &Session<'_, T>, i_0k: &Var<T>, i_tk: &Var<T>, rough: &InterpFlowVars<T>) -> InterpFlowVars<T> {
        let x = Var::cat_channels(&[
            &i_0k.add_scalar(T::lit(-0.5)),
            &i_tk.add_scalar(T::lit(-0.5)),
            &rough.f_0k,
            &rough.f_tk,
            &rough.f_k0,
            &rough.f_kt,
        ]);
        let r = self.unet.forward_any(s, &x);
        InterpFlowVars {
            f_0k: rough.f_0k.add(&r.narrow_channels(0, 2)),
            f_tk: rough.f_tk.add(&r.narrow_channels(2, 2)),
            f_k0: rough.f_k0.add(&r.narrow_channels(4, 2)),
            f_kt: rough.f_kt.add(&r.narrow_channels(6, 2)),
        }
    }
}
