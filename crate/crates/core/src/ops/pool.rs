use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat input index of the argmax for every pooled output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    const OP: &str = "maxpool2x2_forward";
    let x = input.dims4(OP)?;
    if x.h % 2 != 0 {
        return Err(Error::shape(OP, "height", "an even extent", x.h));
    }
    if x.w % 2 != 0 {
        return Err(Error::shape(OP, "width", "an even extent", x.w));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(&[x.n, x.c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let src = input.data();
    for plane in 0..x.n * x.c {
        let base = plane * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * x.w + 2 * ox;
                let candidates = [top, top + 1, top + x.w, top + x.w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[argmax.len()] = src[best];
                argmax.push(best);
            }
        }
    }
    let indices = PoolIndices {
        input_shape: [x.n, x.c, x.h, x.w],
        argmax,
    };
    Ok((out, indices))
}

pub fn maxpool2x2_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2x2_backward";
    let [n, c, h, w] = indices.input_shape;
    let g = grad_out.dims4(OP)?;
    let expected = [n, c, h / 2, w / 2];
    if g.to_vec() != expected {
        return Err(Error::shape(OP, "grad_out", format!("{expected:?}"), g));
    }
    if indices.argmax.len() != g.len() {
        return Err(Error::Internal(format!(
            "{OP}: {} indices for {} pooled elements",
            indices.argmax.len(),
            g.len()
        )));
    }
    let mut grad_in = Tensor::zeros(&indices.input_shape);
    let (oh, ow) = (h / 2, w / 2);
    for (o, (&idx, &gv)) in indices.argmax.iter().zip(grad_out.data()).enumerate() {
        let plane = o / (oh * ow);
        let oy = (o / ow) % oh;
        let ox = o % ow;
        let local = idx.wrapping_sub(plane * h * w);
        let (iy, ix) = (local / w, local % w);
        if local >= h * w || iy / 2 != oy || ix / 2 != ox {
            return Err(Error::Internal(format!(
                "{OP}: index {idx} lies outside the 2x2 window of output {o}"
            )));
        }
        grad_in[idx] += gv;
    }
    Ok(grad_in)
}
