//! Named tensor access shared by the optimizer, checkpoints and gradient
//! checks.

use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::{Error, Real, Result};

/// A collection of named, contiguous tensors. Names and order are stable
/// for a given configuration; gradient structures share the layout of the
/// parameters they belong to.
pub trait ParamSet<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn fill_zero(&mut self)
    where
        T: Real,
    {
        for (_, mut t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    fn all_finite(&self) -> bool
    where
        T: Real,
    {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        T: Real,
    {
        let theirs = other.tensors();
        for ((_, mut mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine += &t;
        }
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central finite differences of `loss` on up
/// to `samples` randomly chosen coordinates per tensor (all coordinates
/// of smaller tensors).
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &P,
    mut loss: F,
    samples: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    P: ParamSet<f64> + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let grads: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tensors: Vec::new(),
    };
    for (ti, (name, grad)) in grads.iter().enumerate() {
        let len = grad.len();
        if len == 0 {
            continue;
        }
        let coords: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            index::sample(rng, len, samples).into_vec()
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let original = get(&mut probe, ti, i);
            set(&mut probe, ti, i, original + step);
            let plus = loss(&probe)?;
            set(&mut probe, ti, i, original - step);
            let minus = loss(&probe)?;
            set(&mut probe, ti, i, original);
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() || !grad[i].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at {name}[{i}]: analytic {}, numeric {numeric}",
                    grad[i]
                )));
            }
            worst = worst.max(relative_error(grad[i], numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.tensors.push(TensorCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

fn get<P: ParamSet<f64>>(p: &mut P, tensor: usize, i: usize) -> f64 {
    let mut ts = p.tensors_mut();
    ts[tensor].1.as_slice_mut().expect("contiguous tensor")[i]
}

fn set<P: ParamSet<f64>>(p: &mut P, tensor: usize, i: usize, v: f64) {
    let mut ts = p.tensors_mut();
    ts[tensor].1.as_slice_mut().expect("contiguous tensor")[i] = v;
}
