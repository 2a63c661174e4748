use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// Tanh-approximation GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// In-place max-subtracted softmax over each row.
pub fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major"));
    }
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backward of a row softmax: `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_rows_backward<T: Real>(probs: ArrayView2<T>, dprobs: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    Zip::from(out.rows_mut())
        .and(probs.rows())
        .and(dprobs.rows())
        .for_each(|mut o, p, dp| {
            let dot = p.dot(&dp);
            Zip::from(&mut o)
                .and(&p)
                .and(&dp)
                .for_each(|o, &p, &dp| *o = p * (dp - dot));
        });
    out
}

pub struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

pub fn layer_norm<T: Real>(
    x: &Array2<T>,
    gain: ArrayView1<T>,
    bias: ArrayView1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let n = T::from_usize(x.ncols()).unwrap();
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) / n;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dx; accumulates into `dgain` and `dbias`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    dy: &Array2<T>,
    gain: ArrayView1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let n = T::from_usize(dy.ncols()).unwrap();
    let mut dx = dy * &gain;
    for ((mut row, xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / n;
        let mean_dx = row.dot(&xh) / n;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|d, &xh| *d = inv * (*d - mean_d - xh * mean_dx));
    }
    dx
}
