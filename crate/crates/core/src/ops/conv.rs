//! 2-D convolution with explicit zero padding, lowered to a matrix product
//! over unfolded patches.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    /// Zero-padding rows/columns added on every side.
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// 3x3, stride 1, pad 1: spatial size is preserved.
    pub fn same3x3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            in_channels,
            out_channels,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel_h) / self.stride + 1,
            (w + 2 * self.padding - self.kernel_w) / self.stride + 1,
        )
    }

    fn validate(&self, op: &'static str, input: Dims4) -> Result<Dims4> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::invalid(op, "kernel extents and stride must be positive"));
        }
        if input.c != self.in_channels {
            return Err(Error::shape(op, "input channels", self.in_channels, input.c));
        }
        if input.h + 2 * self.padding < self.kernel_h {
            return Err(Error::shape(
                op,
                "input height",
                format!("padded size >= {}", self.kernel_h),
                input.h + 2 * self.padding,
            ));
        }
        if input.w + 2 * self.padding < self.kernel_w {
            return Err(Error::shape(
                op,
                "input width",
                format!("padded size >= {}", self.kernel_w),
                input.w + 2 * self.padding,
            ));
        }
        let (oh, ow) = self.output_hw(input.h, input.w);
        Ok(Dims4::new(input.n, self.out_channels, oh, ow))
    }

    fn validate_weights<T: Scalar>(&self, op: &'static str, weights: &Tensor<T>) -> Result<()> {
        let expected = self.weight_shape();
        if weights.shape() != expected {
            return Err(Error::shape(
                op,
                "weights",
                format!("{expected:?}"),
                format!("{:?}", weights.shape()),
            ));
        }
        Ok(())
    }
}

/// Unfold one sample (c, h, w) into a (c*kh*kw) x (oh*ow) patch matrix.
fn im2col<T: Scalar>(src: &[T], x: Dims4, spec: &ConvSpec, out: Dims4, cols: &mut [T]) {
    let plane = out.plane();
    let pad = spec.padding as isize;
    for c in 0..x.c {
        let chan = &src[c * x.plane()..(c + 1) * x.plane()];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ki) * spec.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..out.h {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    let line = &mut dst[oy * out.w..(oy + 1) * out.w];
                    if iy < 0 || iy >= x.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * x.w..(iy as usize + 1) * x.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= x.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into one sample.
fn col2im<T: Scalar>(cols: &[T], x: Dims4, spec: &ConvSpec, out: Dims4, dst: &mut [T]) {
    let plane = out.plane();
    let pad = spec.padding as isize;
    for c in 0..x.c {
        let chan = &mut dst[c * x.plane()..(c + 1) * x.plane()];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ki) * spec.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..out.h {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let dst_row = &mut chan[iy as usize * x.w..(iy as usize + 1) * x.w];
                    for ox in 0..out.w {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < x.w as isize {
                            dst_row[ix as usize] += src[oy * out.w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_forward";
    let x = input.dims4(OP)?;
    let out = spec.validate(OP, x)?;
    spec.validate_weights(OP, weights)?;
    if bias.len() != spec.out_channels {
        return Err(Error::shape(OP, "bias length", spec.out_channels, bias.len()));
    }

    let k = spec.fan_in();
    let plane = out.plane();
    let mut cols = vec![T::zero(); k * plane];
    let mut result = Tensor::zeros(&out.to_vec());
    let per_out = out.c * plane;
    for b in 0..x.n {
        im2col(input.sample(b), x, spec, out, &mut cols);
        let dst = &mut result.data_mut()[b * per_out..(b + 1) * per_out];
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        T::gemm(
            out.c,
            k,
            plane,
            T::one(),
            weights.data(),
            (k, 1),
            &cols,
            (plane, 1),
            T::one(),
            dst,
            (plane, 1),
        );
    }
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    let x = saved_input.dims4(OP)?;
    let out = spec.validate(OP, x)?;
    spec.validate_weights(OP, weights)?;
    let g = grad_out.dims4(OP)?;
    if g != out {
        return Err(Error::shape(OP, "grad_out", out, g));
    }

    let k = spec.fan_in();
    let plane = out.plane();
    let mut cols = vec![T::zero(); k * plane];
    let mut grad_cols = vec![T::zero(); k * plane];
    let mut grad_input = Tensor::zeros(&x.to_vec());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = Tensor::zeros(&[out.c]);
    let per_in = x.c * x.plane();

    for b in 0..x.n {
        let gout = grad_out.sample(b);
        for (o, chunk) in gout.chunks(plane).enumerate() {
            grad_bias[o] += chunk.iter().copied().sum::<T>();
        }
        im2col(saved_input.sample(b), x, spec, out, &mut cols);
        // dW += gout * cols^T
        T::gemm(
            out.c,
            plane,
            k,
            T::one(),
            gout,
            (plane, 1),
            &cols,
            (1, plane),
            T::one(),
            grad_weights.data_mut(),
            (k, 1),
        );
        // dcols = W^T * gout
        T::gemm(
            k,
            out.c,
            plane,
            T::one(),
            weights.data(),
            (1, k),
            gout,
            (plane, 1),
            T::zero(),
            &mut grad_cols,
            (plane, 1),
        );
        let dst = &mut grad_input.data_mut()[b * per_in..(b + 1) * per_in];
        col2im(&grad_cols, x, spec, out, dst);
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, no unfolding.
    fn conv_direct(input: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let x = input.dims4("t").unwrap();
        let (oh, ow) = spec.output_hw(x.h, x.w);
        let mut out = Tensor::zeros(&[x.n, spec.out_channels, oh, ow]);
        for b in 0..x.n {
            for o in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..x.c {
                            for ki in 0..spec.kernel_h {
                                for kj in 0..spec.kernel_w {
                                    let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let iv = input[((b * x.c + c) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = w[((o * x.c + c) * spec.kernel_h + ki) * spec.kernel_w + kj];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((b * spec.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_on_ones() {
        let input = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &w, &b, &ConvSpec::pointwise(1, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_ones_kernel_center_sums_window() {
        let input = Tensor::<f32>::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &w, &b, &ConvSpec::same3x3(1, 1)).unwrap();
        assert_eq!(out[4], 45.0);
        // corner sees 1+2+4+5
        assert_eq!(out[0], 12.0);
    }

    #[test]
    fn same_padding_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::<f32>::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::same3x3(4, 6);
        let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let b = Tensor::zeros(&[6]);
        let out = conv2d_forward(&input, &w, &b, &spec).unwrap();
        assert_eq!(out.shape(), &[2, 6, 8, 8]);
    }

    #[test]
    fn matches_direct_loops_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec {
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
            in_channels: 3,
            out_channels: 2,
        };
        let input = Tensor::<f64>::uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
        let fast = conv2d_forward(&input, &w, &b, &spec).unwrap();
        let slow = conv_direct(&input, &w, &b, &spec);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_dimension() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d_forward(&input, &w, &b, &ConvSpec::same3x3(3, 1)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn rejects_too_small_input() {
        let input = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d_forward(&input, &w, &b, &ConvSpec { padding: 0, ..ConvSpec::same3x3(1, 1) }).unwrap_err();
        assert!(err.to_string().contains("input height"), "{err}");
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::same3x3(2, 3);
        let input = Tensor::<f32>::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&Tensor::zeros(&[1, 3, 5, 5]), &input, &w, &spec).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.weights.max_abs(), 0.0);
        assert_eq!(g.bias.max_abs(), 0.0);
    }

    #[test]
    fn backward_identity_kernel_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Tensor::<f32>::uniform(&[2, 1, 4, 3], -1.0, 1.0, &mut rng);
        let g_out = Tensor::<f32>::uniform(&[2, 1, 4, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let g = conv2d_backward(&g_out, &input, &w, &ConvSpec::pointwise(1, 1)).unwrap();
        assert_eq!(g.input, g_out);
        assert_eq!(g.bias[0], g_out.sum());
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let input = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let err = conv2d_backward(&Tensor::zeros(&[1, 1, 3, 4]), &input, &w, &ConvSpec::same3x3(1, 1)).unwrap_err();
        assert!(err.to_string().contains("grad_out"));
    }
}
