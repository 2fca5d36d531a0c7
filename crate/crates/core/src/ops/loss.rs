use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean absolute error and its gradient with respect to `pred`.
///
/// The gradient is `sign(pred - target) / N` with `sign(0) = 0`.
pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.expect_same_shape(target, "mae_loss")?;
    let n = T::from_usize(pred.len().max(1)).unwrap();
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<T>()
        / n;
    let grad = pred.zip_map(target, "mae_loss", |p, t| {
        let d = p - t;
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    })?;
    Ok((loss, grad))
}
