use ndarray::Array2;
use rand::Rng;

use super::{encode, encode_backward, EncoderConfig, EncoderParams};
use crate::params::{finite_difference_check, GradCheckReport};
use crate::Result;

/// Scalar loss over the encoder output, with its gradient.
pub trait LossProbe {
    fn eval(&self, g: &Array2<f64>) -> (f64, Array2<f64>);
}

/// `L = sum(R * g)`
pub struct LinearProbe(pub Array2<f64>);

impl LossProbe for LinearProbe {
    fn eval(&self, g: &Array2<f64>) -> (f64, Array2<f64>) {
        ((&self.0 * g).sum(), self.0.clone())
    }
}

/// `L = 0.5 * sum((R * g)^2)`
pub struct QuadraticProbe(pub Array2<f64>);

impl LossProbe for QuadraticProbe {
    fn eval(&self, g: &Array2<f64>) -> (f64, Array2<f64>) {
        let rg = &self.0 * g;
        let loss = 0.5 * rg.mapv(|v| v * v).sum();
        (loss, &rg * &self.0)
    }
}

/// Max relative error between the analytic encoder gradient of `probe`
/// and central differences with the given `step`, on up to `samples`
/// coordinates per tensor.
pub fn grad_check(
    params: &EncoderParams<f64>,
    config: &EncoderConfig,
    probe_doc: &[u32],
    probe: &impl LossProbe,
    samples: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let enc = encode(probe_doc, params, config)?;
    let (_, upstream) = probe.eval(&enc.g);
    let mut grads = params.zeros_like();
    encode_backward(&enc, &upstream, params, config, &mut grads)?;
    let loss = |p: &EncoderParams<f64>| -> Result<f64> {
        let enc = encode(probe_doc, p, config)?;
        Ok(probe.eval(&enc.g).0)
    };
    finite_difference_check(params, &grads, loss, samples, step, rng)
}
