//! Finite-difference verification of analytic gradients.
//!
//! Every registered op is reduced to a scalar loss `L = <op(x), R>` with a
//! random projection `R`, so the upstream gradient fed to the backward is
//! exactly `R`. Central differences are taken in `f64`.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    concat_channels, conv2d_backward, conv2d_forward, mae_loss, maxpool2x2_backward, maxpool2x2_forward,
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, split_channels, transposed_conv2x2_backward,
    transposed_conv2x2_forward, ConvSpec,
};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Central differences are exact for affine maps at any step, and a unit
/// step keeps the cancellation error of `L(x+h) - L(x-h)` far below the
/// linear tolerance.
pub const FD_STEP_LINEAR: f64 = 1.0;
/// Entries whose analytic and numeric magnitudes are both below this are skipped.
pub const SKIP_BELOW: f64 = 1e-8;
pub const TOL_LINEAR: f64 = 1e-9;
pub const TOL_NONLINEAR: f64 = 1e-6;
pub const TOL_NETWORK: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        GradcheckReport {
            name: name.into(),
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance && self.checked > 0
    }

    pub fn absorb(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.skipped
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(f, " worst={w}")?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale < SKIP_BELOW {
        None
    } else {
        Some((analytic - numeric).abs() / scale)
    }
}

/// Finite-difference formula used by [`gradcheck_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    Central,
    /// Four-evaluation formula with truncation error O(h^4); allows a larger
    /// step, which lowers the roundoff floor on deep compositions.
    FivePoint,
}

impl Stencil {
    fn derivative<F: FnMut(f64) -> f64>(self, mut at: F, step: f64) -> f64 {
        match self {
            Stencil::Central => (at(step) - at(-step)) / (2.0 * step),
            Stencil::FivePoint => {
                let (p1, m1) = (at(step), at(-step));
                let (p2, m2) = (at(2.0 * step), at(-2.0 * step));
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
            }
        }
    }
}

/// Compare `analytic` against central differences of `loss` around `point`.
pub fn gradcheck<F>(
    name: &str,
    loss: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> GradcheckReport
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    gradcheck_with(name, loss, point, analytic, step, Stencil::Central, tolerance)
}

pub fn gradcheck_with<F>(
    name: &str,
    mut loss: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    stencil: Stencil,
    tolerance: f64,
) -> GradcheckReport
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    gradcheck_guarded(name, |t| Some(loss(t)), point, analytic, step, stencil, tolerance)
}

/// Like [`gradcheck_with`], but `loss` may refuse a probe by returning
/// `None` (e.g. when it lands across a kink); the entry is then skipped.
pub fn gradcheck_guarded<F>(
    name: &str,
    mut loss: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    stencil: Stencil,
    tolerance: f64,
) -> GradcheckReport
where
    F: FnMut(&Tensor<f64>) -> Option<f64>,
{
    let mut report = GradcheckReport::new(name, tolerance);
    if point.shape() != analytic.shape() {
        report.max_rel_error = f64::INFINITY;
        report.worst = Some(format!(
            "gradient shape {:?} != input shape {:?}",
            analytic.shape(),
            point.shape()
        ));
        return report;
    }
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe[i];
        let mut refused = false;
        let numeric = stencil.derivative(
            |d| {
                probe[i] = orig + d;
                loss(&probe).unwrap_or_else(|| {
                    refused = true;
                    f64::NAN
                })
            },
            step,
        );
        probe[i] = orig;
        if refused {
            report.skipped += 1;
            continue;
        }
        match relative_error(analytic[i], numeric) {
            None => report.skipped += 1,
            Some(err) => {
                report.checked += 1;
                if err > report.max_rel_error || err.is_nan() {
                    report.max_rel_error = err;
                    report.worst = Some(format!("{name}[{i}] analytic={:.6e} numeric={numeric:.6e}", analytic[i]));
                }
            }
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpName {
    Conv2d,
    TransposedConv,
    MaxPool,
    Relu,
    Sigmoid,
    Concat,
    Mae,
}

impl OpName {
    pub const ALL: [OpName; 7] = [
        OpName::Conv2d,
        OpName::TransposedConv,
        OpName::MaxPool,
        OpName::Relu,
        OpName::Sigmoid,
        OpName::Concat,
        OpName::Mae,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpName::Conv2d => "conv2d",
            OpName::TransposedConv => "transposed_conv",
            OpName::MaxPool => "maxpool",
            OpName::Relu => "relu",
            OpName::Sigmoid => "sigmoid",
            OpName::Concat => "concat",
            OpName::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Option<OpName> {
        OpName::ALL.into_iter().find(|op| op.as_str() == s)
    }

    /// Ops that are linear in each checked argument get the tighter bound.
    pub fn is_linear(self) -> bool {
        matches!(self, OpName::Conv2d | OpName::TransposedConv | OpName::Concat)
    }

    pub fn tolerance(self) -> f64 {
        if self.is_linear() {
            TOL_LINEAR
        } else {
            TOL_NONLINEAR
        }
    }

    pub fn step(self) -> f64 {
        if self.is_linear() {
            FD_STEP_LINEAR
        } else {
            FD_STEP
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform samples whose magnitude stays at least `margin` away from zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let dist = Uniform::new(-1.0, 1.0);
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn proj(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.dot(r).unwrap()
}

/// One random instance of `op`. `corrupt` doubles one analytic entry, used
/// as a negative control.
pub fn check_op_instance(op: OpName, seed: u64, corrupt: bool) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = op.tolerance();
    let step = op.step();
    let name = op.as_str();
    let mut report = GradcheckReport::new(name, tol);
    let mut finish = |mut parts: Vec<(String, Tensor<f64>, Tensor<f64>, Box<dyn FnMut(&Tensor<f64>) -> f64>)>| {
        if corrupt {
            let g = &mut parts[0].2;
            let idx = g.data().iter().position(|v| v.abs() > 1e-3).unwrap_or(0);
            g[idx] *= 2.0;
        }
        for (label, point, analytic, mut f) in parts {
            report.absorb(gradcheck(&label, &mut f, &point, &analytic, step, tol));
        }
    };

    match op {
        OpName::Conv2d => {
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let spec = ConvSpec {
                kernel_h: 3,
                kernel_w: 3,
                stride,
                padding: 1,
                in_channels: cin,
                out_channels: cout,
            };
            let x = rand_tensor(&mut rng, &[2, cin, 5, 6]);
            let w = rand_tensor(&mut rng, &spec.weight_shape());
            let b = rand_tensor(&mut rng, &[cout]);
            let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let g = conv2d_backward(&r, &x, &w, &spec).unwrap();
            let (w1, b1, r1) = (w.clone(), b.clone(), r.clone());
            let (x2, b2, r2) = (x.clone(), b.clone(), r.clone());
            let (x3, w3, r3) = (x.clone(), w.clone(), r.clone());
            finish(vec![
                (
                    "conv2d.input".into(),
                    x,
                    g.input,
                    Box::new(move |t| proj(&conv2d_forward(t, &w1, &b1, &spec).unwrap(), &r1)),
                ),
                (
                    "conv2d.weights".into(),
                    w,
                    g.weights,
                    Box::new(move |t| proj(&conv2d_forward(&x2, t, &b2, &spec).unwrap(), &r2)),
                ),
                (
                    "conv2d.bias".into(),
                    b,
                    g.bias,
                    Box::new(move |t| proj(&conv2d_forward(&x3, &w3, t, &spec).unwrap(), &r3)),
                ),
            ]);
        }
        OpName::TransposedConv => {
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let x = rand_tensor(&mut rng, &[2, cin, 3, 4]);
            let w = rand_tensor(&mut rng, &[cin, cout, 2, 2]);
            let b = rand_tensor(&mut rng, &[cout]);
            let y = transposed_conv2x2_forward(&x, &w, &b).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let g = transposed_conv2x2_backward(&r, &x, &w).unwrap();
            let (w1, b1, r1) = (w.clone(), b.clone(), r.clone());
            let (x2, b2, r2) = (x.clone(), b.clone(), r.clone());
            let (x3, w3, r3) = (x.clone(), w.clone(), r.clone());
            finish(vec![
                (
                    "upconv.input".into(),
                    x,
                    g.input,
                    Box::new(move |t| proj(&transposed_conv2x2_forward(t, &w1, &b1).unwrap(), &r1)),
                ),
                (
                    "upconv.weights".into(),
                    w,
                    g.weights,
                    Box::new(move |t| proj(&transposed_conv2x2_forward(&x2, t, &b2).unwrap(), &r2)),
                ),
                (
                    "upconv.bias".into(),
                    b,
                    g.bias,
                    Box::new(move |t| proj(&transposed_conv2x2_forward(&x3, &w3, t).unwrap(), &r3)),
                ),
            ]);
        }
        OpName::MaxPool => {
            let x = rand_tensor(&mut rng, &[2, 2, 4, 6]);
            let (y, idx) = maxpool2x2_forward(&x).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let g = maxpool2x2_backward(&r, &idx).unwrap();
            finish(vec![(
                "maxpool.input".into(),
                x,
                g,
                Box::new(move |t| proj(&maxpool2x2_forward(t).unwrap().0, &r)),
            )]);
        }
        OpName::Relu => {
            let x = rand_away_from_zero(&mut rng, &[2, 3, 4, 4], 1e-3);
            let r = rand_tensor(&mut rng, x.shape());
            let g = relu_backward(&r, &x).unwrap();
            finish(vec![(
                "relu.input".into(),
                x,
                g,
                Box::new(move |t| proj(&relu_forward(t), &r)),
            )]);
        }
        OpName::Sigmoid => {
            let x = rand_tensor(&mut rng, &[2, 3, 4, 4]).map(|v| 4.0 * v);
            let r = rand_tensor(&mut rng, x.shape());
            let s = sigmoid_forward(&x);
            let g = sigmoid_backward(&r, &s).unwrap();
            finish(vec![(
                "sigmoid.input".into(),
                x,
                g,
                Box::new(move |t| proj(&sigmoid_forward(t), &r)),
            )]);
        }
        OpName::Concat => {
            let ca = rng.gen_range(1..=3);
            let cb = rng.gen_range(1..=3);
            let a = rand_tensor(&mut rng, &[2, ca, 3, 3]);
            let b = rand_tensor(&mut rng, &[2, cb, 3, 3]);
            let y = concat_channels(&a, &b).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let (ga, gb) = split_channels(&r, ca).unwrap();
            let (b1, r1) = (b.clone(), r.clone());
            let (a2, r2) = (a.clone(), r);
            finish(vec![
                (
                    "concat.a".into(),
                    a,
                    ga,
                    Box::new(move |t| proj(&concat_channels(t, &b1).unwrap(), &r1)),
                ),
                (
                    "concat.b".into(),
                    b,
                    gb,
                    Box::new(move |t| proj(&concat_channels(&a2, t).unwrap(), &r2)),
                ),
            ]);
        }
        OpName::Mae => {
            let target = rand_tensor(&mut rng, &[2, 1, 4, 4]);
            let offset = rand_away_from_zero(&mut rng, target.shape(), 1e-3);
            let pred = target.zip_map(&offset, "gradcheck", |a, b| a + b).unwrap();
            let (_, g) = mae_loss(&pred, &target).unwrap();
            finish(vec![(
                "mae.pred".into(),
                pred,
                g,
                Box::new(move |t| mae_loss(t, &target).unwrap().0),
            )]);
        }
    }
    report
}

/// Check `op` on `instances` random instances derived from `seed`.
pub fn check_op(op: OpName, seed: u64, instances: usize) -> GradcheckReport {
    let mut report = GradcheckReport::new(op.as_str(), op.tolerance());
    for i in 0..instances as u64 {
        report.absorb(check_op_instance(op, seed.wrapping_add(i), false));
    }
    report
}
