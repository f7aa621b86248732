//! Differentiable building blocks: a matrix autodiff tape, dense layers,
//! layer norm, the message passing network, initialization and Adam.

mod layers;
mod params;
mod tape;
mod tensor;

pub use layers::{GraphBatch, LayerNorm, Linear, Mlp, Mpn, MpnConfig, MpnOutput, INIT_GAIN, LEAKY_SLOPE};
pub use params::{clip_grad_norm, orthogonal, Adam, AdamConfig, ParamStore};
pub use tape::{softplus, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Central finite-difference gradient of `loss` with respect to every scalar
/// in `store`.
pub fn finite_difference(store: &ParamStore, h: f64, mut loss: impl FnMut(&ParamStore) -> f64) -> Vec<f64> {
    let base = store.flat();
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + h;
        probe.set_flat(&x).expect("same layout");
        let up = loss(&probe);
        x[i] = base[i] - h;
        probe.set_flat(&x).expect("same layout");
        let down = loss(&probe);
        x[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor on the denominator.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
