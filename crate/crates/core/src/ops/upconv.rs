//! 2x2 stride-2 transposed convolution (learned 2x up-sampling).
//!
//! Weights are laid out `(in_channels, out_channels, 2, 2)`, which is the
//! weight tensor of the stride-2 2x2 convolution this operator is the
//! adjoint of.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims4, Tensor};

fn check_weights<T: Scalar>(op: &'static str, x: Dims4, weights: &Tensor<T>) -> Result<usize> {
    match *weights.shape() {
        [ci, co, 2, 2] if ci == x.c => Ok(co),
        [ci, _, 2, 2] => Err(Error::shape(op, "input channels", ci, x.c)),
        _ => Err(Error::shape(
            op,
            "weights",
            format!("[{}, out, 2, 2]", x.c),
            format!("{:?}", weights.shape()),
        )),
    }
}

/// Reorders (o, 2h, 2w) into the (o*4) x (h*w) layout where row
/// `o*4 + di*2 + dj` holds the (di, dj) sub-lattice.
fn gather_lattice<T: Scalar>(src: &[T], co: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for o in 0..co {
        let chan = &src[o * 4 * hw..(o + 1) * 4 * hw];
        for di in 0..2 {
            for dj in 0..2 {
                let row = &mut dst[(o * 4 + di * 2 + dj) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        row[i * w + j] = chan[(2 * i + di) * 2 * w + 2 * j + dj];
                    }
                }
            }
        }
    }
}

fn scatter_lattice<T: Scalar>(src: &[T], co: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for o in 0..co {
        let chan = &mut dst[o * 4 * hw..(o + 1) * 4 * hw];
        for di in 0..2 {
            for dj in 0..2 {
                let row = &src[(o * 4 + di * 2 + dj) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        chan[(2 * i + di) * 2 * w + 2 * j + dj] = row[i * w + j];
                    }
                }
            }
        }
    }
}

pub fn transposed_conv2x2_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv2x2_forward";
    let x = input.dims4(OP)?;
    let co = check_weights(OP, x, weights)?;
    if bias.len() != co {
        return Err(Error::shape(OP, "bias length", co, bias.len()));
    }
    let hw = x.plane();
    let rows = co * 4;
    let mut lattice = vec![T::zero(); rows * hw];
    let mut out = Tensor::zeros(&[x.n, co, 2 * x.h, 2 * x.w]);
    let per_out = co * 4 * hw;
    for b in 0..x.n {
        for (r, row) in lattice.chunks_mut(hw).enumerate() {
            row.fill(bias[r / 4]);
        }
        // lattice (co*4, hw) += W^T (co*4, ci) * x (ci, hw)
        T::gemm(
            rows,
            x.c,
            hw,
            T::one(),
            weights.data(),
            (1, rows),
            input.sample(b),
            (hw, 1),
            T::one(),
            &mut lattice,
            (hw, 1),
        );
        scatter_lattice(&lattice, co, x.h, x.w, &mut out.data_mut()[b * per_out..(b + 1) * per_out]);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct UpconvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn transposed_conv2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<UpconvGrads<T>> {
    const OP: &str = "transposed_conv2x2_backward";
    let x = saved_input.dims4(OP)?;
    let co = check_weights(OP, x, weights)?;
    let g = grad_out.dims4(OP)?;
    let expected = Dims4::new(x.n, co, 2 * x.h, 2 * x.w);
    if g != expected {
        return Err(Error::shape(OP, "grad_out", expected, g));
    }
    let hw = x.plane();
    let rows = co * 4;
    let mut lattice = vec![T::zero(); rows * hw];
    let mut grad_in = Tensor::zeros(&x.to_vec());
    let mut grad_w = Tensor::zeros(weights.shape());
    let mut grad_b = Tensor::zeros(&[co]);
    let per_in = x.c * hw;
    for b in 0..x.n {
        gather_lattice(grad_out.sample(b), co, x.h, x.w, &mut lattice);
        for (r, row) in lattice.chunks(hw).enumerate() {
            grad_b[r / 4] += row.iter().copied().sum::<T>();
        }
        // dx (ci, hw) = W (ci, co*4) * G (co*4, hw)
        T::gemm(
            x.c,
            rows,
            hw,
            T::one(),
            weights.data(),
            (rows, 1),
            &lattice,
            (hw, 1),
            T::zero(),
            &mut grad_in.data_mut()[b * per_in..(b + 1) * per_in],
            (hw, 1),
        );
        // dW (ci, co*4) += x (ci, hw) * G^T (hw, co*4)
        T::gemm(
            x.c,
            hw,
            rows,
            T::one(),
            saved_input.sample(b),
            (hw, 1),
            &lattice,
            (1, hw),
            T::one(),
            grad_w.data_mut(),
            (rows, 1),
        );
    }
    Ok(UpconvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::{conv2d_forward, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pixel_broadcasts_kernel() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1], 3.0);
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = transposed_conv2x2_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn doubles_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 5, 2, 2], -1.0, 1.0, &mut rng);
        let y = transposed_conv2x2_forward(&x, &w, &Tensor::zeros(&[5])).unwrap();
        assert_eq!(y.shape(), &[1, 5, 16, 16]);
    }

    #[test]
    fn adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let (ci, co) = (3, 4);
            // conv maps (co, 2h, 2w) -> (ci, h, w) with weights (ci, co, 2, 2)
            let w = Tensor::<f64>::uniform(&[ci, co, 2, 2], -1.0, 1.0, &mut rng);
            let big = Tensor::<f64>::uniform(&[2, co, 6, 8], -1.0, 1.0, &mut rng);
            let small = Tensor::<f64>::uniform(&[2, ci, 3, 4], -1.0, 1.0, &mut rng);
            let spec = ConvSpec {
                kernel_h: 2,
                kernel_w: 2,
                stride: 2,
                padding: 0,
                in_channels: co,
                out_channels: ci,
            };
            let lhs = conv2d_forward(&big, &w, &Tensor::zeros(&[ci]), &spec)
                .unwrap()
                .dot(&small)
                .unwrap();
            let rhs = big
                .dot(&transposed_conv2x2_forward(&small, &w, &Tensor::zeros(&[co])).unwrap())
                .unwrap();
            assert!(((lhs - rhs) / lhs.abs().max(1e-300)).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rejects_non_2x2_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        assert!(transposed_conv2x2_forward(&x, &w, &Tensor::zeros(&[2])).is_err());
        let w = Tensor::zeros(&[3, 2, 2, 2]);
        let err = transposed_conv2x2_forward(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }
}
