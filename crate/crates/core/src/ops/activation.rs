use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient mask uses strict `x > 0`, so the subgradient at zero is 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(input, "relu_backward", |g, x| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        // split by sign so exp never overflows
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

/// Takes the forward output `s`; derivative is `s (1 - s)`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(output, "sigmoid_backward", |g, s| g * s * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_mask() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Tensor::full(&[3], 1.0), &x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let x = Tensor::<f64>::zeros(&[1]);
        let s = sigmoid_forward(&x);
        assert_eq!(s[0], 0.5);
        let d = sigmoid_backward(&Tensor::full(&[1], 1.0), &s).unwrap();
        assert_eq!(d[0], 0.25);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let x = Tensor::<f32>::from_vec(&[2], vec![-1000.0, 1000.0]).unwrap();
        let s = sigmoid_forward(&x);
        assert!(s.all_finite());
        assert_eq!(s.data(), &[0.0, 1.0]);
    }
}
