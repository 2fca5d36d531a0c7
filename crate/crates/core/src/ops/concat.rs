//! Channel concatenation for skip connections.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Concatenate along channels; `a` occupies the leading channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let da = a.dims4(OP)?;
    let db = b.dims4(OP)?;
    if da.n != db.n {
        return Err(Error::shape(OP, "batch", da.n, db.n));
    }
    if da.h != db.h {
        return Err(Error::shape(OP, "height", da.h, db.h));
    }
    if da.w != db.w {
        return Err(Error::shape(OP, "width", da.w, db.w));
    }
    let pa = da.c * da.plane();
    let pb = db.c * db.plane();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..da.n {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::from_vec(&[da.n, da.c + db.c, da.h, da.w], data)
}

/// Backward of [`concat_channels`]: split the gradient at `lead_channels`.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, lead_channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "split_channels";
    let d = grad.dims4(OP)?;
    if lead_channels > d.c {
        return Err(Error::shape(OP, "channels", format!(">= {lead_channels}"), d.c));
    }
    let plane = d.plane();
    let ca = lead_channels;
    let cb = d.c - ca;
    let mut a = Vec::with_capacity(d.n * ca * plane);
    let mut b = Vec::with_capacity(d.n * cb * plane);
    for s in grad.data().chunks(d.c * plane) {
        a.extend_from_slice(&s[..ca * plane]);
        b.extend_from_slice(&s[ca * plane..]);
    }
    Ok((
        Tensor::from_vec(&[d.n, ca, d.h, d.w], a)?,
        Tensor::from_vec(&[d.n, cb, d.h, d.w], b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_partner_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng);
        let e = Tensor::zeros(&[2, 0, 4, 4]);
        assert_eq!(concat_channels(&x, &e).unwrap(), x);
    }

    #[test]
    fn shape_rule_and_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::<f32>::uniform(&[1, 4, 8, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[1, 6, 8, 8], 0.0, 1.0, &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 10, 8, 8]);
        let (ga, gb) = split_channels(&c, 4).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let b = Tensor::<f32>::zeros(&[1, 1, 8, 4]);
        let err = concat_channels(&a, &b).unwrap_err();
        assert!(err.to_string().contains("width"));
    }
}
