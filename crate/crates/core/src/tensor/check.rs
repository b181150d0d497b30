//! Finite-difference verification harness for the autodiff engine.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, TensorId};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences at `point`, returning the maximum relative
/// error `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates. Meaningful in 64-bit mode; 32-bit differences drown in
/// rounding error.
pub fn gradient_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, TensorId) -> Result<TensorId>,
{
    if !point.data().iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("gradient_check point"));
    }

    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone().with_requires_grad());
        let out = f(&mut g, x)?;
        if g.tensor(out).numel() != 1 {
            return Err(Error::shape(
                "gradient_check",
                format!("f must be scalar-valued, got shape {:?}", g.tensor(out).shape()),
            ));
        }
        g.backward(out)?;
        // A constant f never reaches the leaf; its gradient is zero.
        g.grad(x).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); point.numel()])
    };

    let eval = |data: Vec<T>| -> Result<T> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(point.shape().to_vec(), data)?);
        let out = f(&mut g, x)?;
        let v = g.tensor(out).item();
        if !v.is_finite() {
            return Err(Error::non_finite("gradient_check evaluation"));
        }
        Ok(v)
    };

    let two = T::from_f64(2.0);
    let mut max_err = T::zero();
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] = plus[i] + step;
        let mut minus = point.data().to_vec();
        minus[i] = minus[i] - step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let denom = T::one().max(analytic[i].abs()).max(numeric.abs());
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
