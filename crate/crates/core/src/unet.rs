//! U-Net style encoder-decoder.
//!
//! Layer table for `depth = D`, `base_channels = B`, `c_k = B * 2^k`:
//!
//! | layer            | op                                   | channels                |
//! |------------------|--------------------------------------|-------------------------|
//! | `enc{k}.conv1`   | 3x3 conv, pad 1, ReLU                | `in` or `c_{k-1}` → `c_k` |
//! | `enc{k}.conv2`   | 3x3 conv, pad 1, ReLU                | `c_k` → `c_k`           |
//! | (pool)           | 2x2 max-pool after every encoder stage |                       |
//! | `mid.conv1/2`    | 3x3 conv, pad 1, ReLU                | `c_{D-1}` → `c_D` → `c_D` |
//! | `dec{d}.up`      | 2x2 stride-2 transposed conv, linear | `c_{k+1}` → `c_k`       |
//! | `dec{d}.conv1`   | 3x3 conv on `[skip_k, up]`, ReLU     | `2 c_k` → `c_k`         |
//! | `dec{d}.conv2`   | 3x3 conv, ReLU                       | `c_k` → `c_k`           |
//! | `head`           | 1x1 conv, then sigmoid or identity   | `c_0` → `out`           |
//!
//! where decoder stage `d` works at level `k = D - 1 - d`. Parameters are
//! stored layer by layer in the table order above, weight before bias.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, split_channels, transposed_conv2x2_backward,
    transposed_conv2x2_forward, ConvSpec, PoolIndices,
};
use crate::ops::gradcheck::{gradcheck_guarded, GradcheckReport, Stencil, TOL_NETWORK};

const NETWORK_STEP: f64 = 3e-3;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Linear,
}

impl OutputActivation {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputActivation::Sigmoid => "sigmoid",
            OutputActivation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(OutputActivation::Sigmoid),
            "linear" => Some(OutputActivation::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of pooling stages; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub output_activation: OutputActivation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    UpConv { in_channels: usize, out_channels: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv(spec) => spec.weight_shape().to_vec(),
            LayerKind::UpConv {
                in_channels,
                out_channels,
            } => vec![in_channels, out_channels, 2, 2],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv(spec) => spec.out_channels,
            LayerKind::UpConv { out_channels, .. } => out_channels,
        }
    }

    /// Inputs contributing to one output element. A 2x2 stride-2
    /// transposed conv touches each output pixel with exactly one tap per
    /// input channel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv(spec) => spec.fan_in(),
            LayerKind::UpConv { in_channels, .. } => in_channels,
        }
    }

    fn conv_spec(&self) -> ConvSpec {
        match self.kind {
            LayerKind::Conv(spec) => spec,
            LayerKind::UpConv { .. } => unreachable!("{} is not a conv layer", self.name),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "UNetConfig";
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::invalid(OP, format!("depth must be in 1..=16, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid(OP, "base_channels must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(OP, "in_channels and out_channels must be >= 1"));
        }
        Ok(())
    }

    /// Spatial divisibility factor, `2^depth`.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn layers(&self) -> Vec<Layer> {
        let conv = |name: String, cin, cout| Layer {
            name,
            kind: LayerKind::Conv(ConvSpec::same3x3(cin, cout)),
        };
        let mut layers = Vec::new();
        let mut cin = self.in_channels;
        for k in 0..self.depth {
            let c = self.channels_at(k);
            layers.push(conv(format!("enc{k}.conv1"), cin, c));
            layers.push(conv(format!("enc{k}.conv2"), c, c));
            cin = c;
        }
        let cmid = self.channels_at(self.depth);
        layers.push(conv("mid.conv1".into(), cin, cmid));
        layers.push(conv("mid.conv2".into(), cmid, cmid));
        for d in 0..self.depth {
            let k = self.depth - 1 - d;
            let c = self.channels_at(k);
            layers.push(Layer {
                name: format!("dec{d}.up"),
                kind: LayerKind::UpConv {
                    in_channels: self.channels_at(k + 1),
                    out_channels: c,
                },
            });
            layers.push(conv(format!("dec{d}.conv1"), 2 * c, c));
            layers.push(conv(format!("dec{d}.conv2"), c, c));
        }
        layers.push(Layer {
            name: "head".into(),
            kind: LayerKind::Conv(ConvSpec::pointwise(self.channels_at(0), self.out_channels)),
        });
        layers
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                let w = (format!("{}.weight", l.name), l.weight_shape());
                let b = (format!("{}.bias", l.name), vec![l.bias_len()]);
                [w, b]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Ordered parameter set. Any mutable access assigns a fresh generation
/// so activations recorded before the change are rejected by `backward`.
#[derive(Clone, Debug)]
pub struct UNetParams<T> {
    config: UNetConfig,
    entries: Vec<(String, Tensor<T>)>,
    generation: u64,
}

impl<T: Scalar> PartialEq for UNetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.entries == other.entries
    }
}

impl<T: Scalar> UNetParams<T> {
    /// Wrap externally produced tensors, checking them against the config's
    /// shape table.
    pub fn from_entries(config: UNetConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != entries.len() {
            return Err(Error::invalid(
                "UNetParams",
                format!("expected {} tensors, got {}", expected.len(), entries.len()),
            ));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::invalid(
                    "UNetParams",
                    format!("expected {name} {shape:?}, got {got_name} {:?}", t.shape()),
                ));
            }
        }
        Ok(UNetParams {
            config,
            entries,
            generation: next_generation(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.generation = next_generation();
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        UNetParams {
            config: self.config.clone(),
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            generation: next_generation(),
        }
    }

    fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.entries[2 * layer].1
    }

    fn bias(&self, layer: usize) -> &Tensor<T> {
        &self.entries[2 * layer + 1].1
    }
}

/// Build freshly initialized parameters: He-style uniform weights with
/// standard deviation `sqrt(2 / fan_in)`, zero biases.
pub fn build<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<UNetParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for layer in config.layers() {
        // uniform on [-a, a] has std a / sqrt(3)
        let bound = (6.0 / layer.fan_in() as f64).sqrt();
        let w = Tensor::uniform(&layer.weight_shape(), -bound, bound, &mut rng);
        entries.push((format!("{}.weight", layer.name), w));
        entries.push((format!("{}.bias", layer.name), Tensor::zeros(&[layer.bias_len()])));
    }
    UNetParams::from_entries(config.clone(), entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Values recorded by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    generation: u64,
    /// Input of every layer, indexed like the layer table.
    layer_inputs: Vec<Tensor<T>>,
    /// Post-activation output of every layer (pre-sigmoid for the head).
    layer_outputs: Vec<Tensor<T>>,
    pools: Vec<PoolIndices>,
    output: Tensor<T>,
}

impl<T: Scalar> Activations<T> {
    /// Encoder feature map (pre-pool) at level `k`, used as the skip partner.
    pub fn skip(&self, level: usize) -> &Tensor<T> {
        &self.layer_outputs[2 * level + 1]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor<T> {
        &self.layer_outputs[layer]
    }

    pub fn layer_input(&self, layer: usize) -> &Tensor<T> {
        &self.layer_inputs[layer]
    }

    /// Which ReLU units are active and which element each pool picked.
    /// The head layer has no ReLU and is left out.
    pub fn pattern(&self) -> (Vec<bool>, Vec<PoolIndices>) {
        let relu = self.layer_outputs[..self.layer_outputs.len() - 1]
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > T::zero()))
            .collect();
        (relu, self.pools.clone())
    }
}

struct Recorder<T> {
    enabled: bool,
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Recorder<T> {
    fn push(&mut self, input: &Tensor<T>, output: &Tensor<T>) {
        if self.enabled {
            self.inputs.push(input.clone());
            self.outputs.push(output.clone());
        }
    }
}

pub fn check_input_dims(config: &UNetConfig, batch: &Tensor<impl Scalar>) -> Result<()> {
    const OP: &str = "unet::forward";
    let d = batch.dims4(OP)?;
    if d.c != config.in_channels {
        return Err(Error::shape(OP, "input channels", config.in_channels, d.c));
    }
    let div = config.divisor();
    if d.h == 0 || d.w == 0 || d.h % div != 0 || d.w % div != 0 {
        return Err(Error::invalid(
            OP,
            format!(
                "spatial dims {}x{} are not divisible by 2^{} = {div}; resize inputs first \
                 (pipeline::resize_to_multiple)",
                d.h, d.w, config.depth
            ),
        ));
    }
    Ok(())
}

/// Run the network. Activations are only recorded in [`Mode::Train`].
pub fn forward<T: Scalar>(
    params: &UNetParams<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<Activations<T>>)> {
    let config = params.config();
    check_input_dims(config, batch)?;
    let layers = config.layers();
    let mut rec = Recorder {
        enabled: mode == Mode::Train,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let mut li = 0;
    let conv_relu = |li: &mut usize, x: &Tensor<T>, rec: &mut Recorder<T>| -> Result<Tensor<T>> {
        let spec = layers[*li].conv_spec();
        let y = relu_forward(&conv2d_forward(x, params.weight(*li), params.bias(*li), &spec)?);
        rec.push(x, &y);
        *li += 1;
        Ok(y)
    };

    let mut x = batch.clone();
    let mut skips = Vec::with_capacity(config.depth);
    let mut pools = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        x = conv_relu(&mut li, &x, &mut rec)?;
        x = conv_relu(&mut li, &x, &mut rec)?;
        let (pooled, idx) = maxpool2x2_forward(&x)?;
        skips.push(x);
        pools.push(idx);
        x = pooled;
    }
    x = conv_relu(&mut li, &x, &mut rec)?;
    x = conv_relu(&mut li, &x, &mut rec)?;
    for d in 0..config.depth {
        let k = config.depth - 1 - d;
        let up = transposed_conv2x2_forward(&x, params.weight(li), params.bias(li))?;
        rec.push(&x, &up);
        li += 1;
        let joined = concat_channels(&skips[k], &up)?;
        x = conv_relu(&mut li, &joined, &mut rec)?;
        x = conv_relu(&mut li, &x, &mut rec)?;
    }
    let head = layers[li].conv_spec();
    let z = conv2d_forward(&x, params.weight(li), params.bias(li), &head)?;
    rec.push(&x, &z);
    let out = match config.output_activation {
        OutputActivation::Sigmoid => sigmoid_forward(&z),
        OutputActivation::Linear => z,
    };
    if !out.all_finite() {
        return Err(Error::NonFinite("unet::forward output".into()));
    }

    let saved = rec.enabled.then(|| Activations {
        generation: params.generation(),
        layer_inputs: rec.inputs,
        layer_outputs: rec.outputs,
        pools,
        output: out.clone(),
    });
    Ok((out, saved))
}

#[derive(Clone, Debug)]
pub struct NetGrads<T> {
    /// One tensor per parameter, aligned with [`UNetParams::entries`].
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

pub fn backward<T: Scalar>(
    params: &UNetParams<T>,
    act: &Activations<T>,
    grad_output: &Tensor<T>,
) -> Result<NetGrads<T>> {
    if act.generation != params.generation() {
        return Err(Error::StaleActivations {
            recorded: act.generation,
            current: params.generation(),
        });
    }
    let config = params.config();
    let layers = config.layers();
    grad_output.expect_same_shape(&act.output, "unet::backward")?;
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; params.len()];

    let mut store = |layer: usize, w: Tensor<T>, b: Tensor<T>| {
        grads[2 * layer] = Some(w);
        grads[2 * layer + 1] = Some(b);
    };
    let conv_relu_back = |layer: usize, g: &Tensor<T>, store: &mut dyn FnMut(usize, Tensor<T>, Tensor<T>)| {
        let g = relu_backward(g, &act.layer_outputs[layer])?;
        let cg = conv2d_backward(&g, &act.layer_inputs[layer], params.weight(layer), &layers[layer].conv_spec())?;
        store(layer, cg.weights, cg.bias);
        Ok::<_, Error>(cg.input)
    };

    let head = layers.len() - 1;
    let g = match config.output_activation {
        OutputActivation::Sigmoid => sigmoid_backward(grad_output, &act.output)?,
        OutputActivation::Linear => grad_output.clone(),
    };
    let cg = conv2d_backward(&g, &act.layer_inputs[head], params.weight(head), &layers[head].conv_spec())?;
    store(head, cg.weights, cg.bias);
    let mut g = cg.input;

    let mid = 2 * config.depth;
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; config.depth];
    for d in (0..config.depth).rev() {
        let k = config.depth - 1 - d;
        let up = mid + 2 + 3 * d;
        g = conv_relu_back(up + 2, &g, &mut store)?;
        g = conv_relu_back(up + 1, &g, &mut store)?;
        let (g_skip, g_up) = split_channels(&g, config.channels_at(k))?;
        skip_grads[k] = Some(g_skip);
        let ug = transposed_conv2x2_backward(&g_up, &act.layer_inputs[up], params.weight(up))?;
        store(up, ug.weights, ug.bias);
        g = ug.input;
    }
    g = conv_relu_back(mid + 1, &g, &mut store)?;
    g = conv_relu_back(mid, &g, &mut store)?;
    for k in (0..config.depth).rev() {
        let pooled = maxpool2x2_backward(&g, &act.pools[k])?;
        let skip = skip_grads[k].take().expect("decoder stage visited");
        g = pooled.zip_map(&skip, "unet::backward", |a, b| a + b)?;
        g = conv_relu_back(2 * k + 1, &g, &mut store)?;
        g = conv_relu_back(2 * k, &g, &mut store)?;
    }

    let params = grads
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Internal(format!("no gradient for parameter {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetGrads { params, input: g })
}

/// Whole-network gradient check in f64 against `<forward(x), r>` for a
/// random projection `r`, over the input and every parameter tensor.
///
/// With ReLU and max pooling frozen, the pre-sigmoid output is affine in any
/// single weight or pixel, so the loss is smooth between kinks. Probes whose
/// activation pattern differs from the base point are refused, which lets
/// the step sit well above the roundoff floor.
pub fn gradcheck_network(config: &UNetConfig, seed: u64, h: usize, w: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = build::<f64>(config, seed)?;
    let params = perturb_biases(params, &mut rng);
    let x = Tensor::<f64>::uniform(&[1, config.in_channels, h, w], 0.0, 1.0, &mut rng);
    let (y, act) = forward(&params, &x, Mode::Train)?;
    let act = act.expect("train mode");
    let base = act.pattern();
    let r = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let grads = backward(&params, &act, &r)?;

    let mut report = GradcheckReport::new("unet", TOL_NETWORK);
    let loss = |p: &UNetParams<f64>, x: &Tensor<f64>| {
        let (y, act) = forward(p, x, Mode::Train).expect("forward");
        (act.expect("train mode").pattern() == base).then(|| y.dot(&r).expect("shape"))
    };
    report.absorb(gradcheck_guarded(
        "unet.input",
        |t| loss(&params, t),
        &x,
        &grads.input,
        NETWORK_STEP,
        Stencil::FivePoint,
        TOL_NETWORK,
    ));
    for i in 0..params.len() {
        let name = params.entries()[i].0.clone();
        let point = params.entries()[i].1.clone();
        let mut probe = params.clone();
        report.absorb(gradcheck_guarded(
            &name,
            |t| {
                *probe.tensors_mut().nth(i).unwrap() = t.clone();
                loss(&probe, &x)
            },
            &point,
            &grads.params[i],
            NETWORK_STEP,
            Stencil::FivePoint,
            TOL_NETWORK,
        ));
    }
    Ok(report)
}

/// Zero biases make many units sit exactly on ReLU kinks for symmetric
/// inputs; small random biases keep the check away from them.
fn perturb_biases(mut params: UNetParams<f64>, rng: &mut ChaCha8Rng) -> UNetParams<f64> {
    for (name, t) in params.entries.iter_mut() {
        if name.ends_with(".bias") {
            *t = Tensor::uniform(t.shape(), -0.1, 0.1, rng);
        }
    }
    params.generation = next_generation();
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 2,
            ..UNetConfig::default()
        }
    }

    /// Closed-form count for the layer table, written out independently.
    fn closed_form_count(depth: usize, base: usize, cin: usize, cout: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let c = |k: usize| base << k;
        let mut total = 0;
        for k in 0..depth {
            total += conv(if k == 0 { cin } else { c(k - 1) }, c(k), 3) + conv(c(k), c(k), 3);
        }
        total += conv(c(depth - 1), c(depth), 3) + conv(c(depth), c(depth), 3);
        for k in 0..depth {
            total += c(k + 1) * c(k) * 4 + c(k); // up
            total += conv(2 * c(k), c(k), 3) + conv(c(k), c(k), 3);
        }
        total + conv(c(0), cout, 1)
    }

    #[test]
    fn default_param_count_matches_table() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.param_count(), closed_form_count(4, 16, 1, 1));
        assert_eq!(cfg.param_count(), 1_940_817);
        let p = build::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.scalar_count(), 1_940_817);
        // channels 16, 32, 64, 128 then 256
        let shapes = cfg.param_shapes();
        assert_eq!(shapes[0], ("enc0.conv1.weight".into(), vec![16, 1, 3, 3]));
        assert_eq!(shapes[8], ("enc2.conv1.weight".into(), vec![64, 32, 3, 3]));
        assert_eq!(shapes[16], ("mid.conv1.weight".into(), vec![256, 128, 3, 3]));
        assert_eq!(shapes[20], ("dec0.up.weight".into(), vec![256, 128, 2, 2]));
        assert_eq!(shapes.last().unwrap(), &("head.bias".into(), vec![1]));
    }

    #[test]
    fn param_count_matches_closed_form_for_other_configs() {
        for (depth, base) in [(1, 1), (2, 2), (3, 5), (4, 8)] {
            let cfg = UNetConfig {
                depth,
                base_channels: base,
                ..UNetConfig::default()
            };
            assert_eq!(cfg.param_count(), closed_form_count(depth, base, 1, 1));
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = build::<f32>(&tiny(), 42).unwrap();
        let b = build::<f32>(&tiny(), 42).unwrap();
        let c = build::<f32>(&tiny(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_scale_and_zero_bias() {
        let p = build::<f64>(&UNetConfig::default(), 3).unwrap();
        let (name, w) = &p.entries()[2];
        assert_eq!(name, "enc0.conv2.weight");
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / (16.0 * 9.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var / target - 1.0).abs() < 0.1, "var {var} vs {target}");
        assert!(p.entries().iter().filter(|(n, _)| n.ends_with(".bias")).all(|(_, b)| b.max_abs() == 0.0));
    }

    #[test]
    fn base_one_builds() {
        let cfg = UNetConfig {
            base_channels: 1,
            ..UNetConfig::default()
        };
        let p = build::<f32>(&cfg, 0).unwrap();
        assert!(p.tensors().all(|t| t.len() >= 1));
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let (y, _) = forward(&p, &x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn shape_preservation_and_sigmoid_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = build::<f32>(&UNetConfig { base_channels: 4, ..UNetConfig::default() }, 1).unwrap();
        let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(forward(&p, &x, Mode::Infer).unwrap().0.shape(), &[1, 1, 16, 16]);
        let x = Tensor::uniform(&[2, 1, 64, 48], 0.0, 1.0, &mut rng);
        let (y, _) = forward(&p, &x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), &[2, 1, 64, 48]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn skip_partners_have_matching_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = UNetConfig { base_channels: 2, ..UNetConfig::default() };
        let p = build::<f32>(&cfg, 2).unwrap();
        let x = Tensor::uniform(&[1, 1, 32, 48], 0.0, 1.0, &mut rng);
        let (_, act) = forward(&p, &x, Mode::Train).unwrap();
        let act = act.unwrap();
        for k in 0..cfg.depth {
            let s = act.skip(k).dims4("t").unwrap();
            assert_eq!((s.h, s.w), (32 >> k, 48 >> k));
            // decoder stage d = depth-1-k: up-conv output is the concat partner
            let up = act.layer_output(2 * cfg.depth + 2 + 3 * (cfg.depth - 1 - k)).dims4("t").unwrap();
            assert_eq!((up.h, up.w, up.c), (s.h, s.w, s.c));
        }
    }

    #[test]
    fn train_and_infer_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = build::<f32>(&tiny(), 3).unwrap();
        let x = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
        let (a, none) = forward(&p, &x, Mode::Infer).unwrap();
        let (b, some) = forward(&p, &x, Mode::Train).unwrap();
        assert_eq!(a, b);
        assert!(none.is_none() && some.is_some());
    }

    #[test]
    fn indivisible_input_points_at_resize() {
        let p = build::<f32>(&tiny(), 0).unwrap();
        let err = forward(&p, &Tensor::zeros(&[1, 1, 10, 8]), Mode::Infer).unwrap_err();
        assert!(err.to_string().contains("resize"), "{err}");
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = build::<f32>(&tiny(), 4).unwrap();
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let (y, act) = forward(&p, &x, Mode::Train).unwrap();
        let g = backward(&p, &act.unwrap(), &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(g.params.len(), p.len());
        for (gt, (_, pt)) in g.params.iter().zip(p.entries()) {
            assert_eq!(gt.shape(), pt.shape());
            assert_eq!(gt.max_abs(), 0.0);
        }
    }

    #[test]
    fn whole_network_gradcheck_tiny() {
        let rep = gradcheck_network(&tiny(), 11, 8, 8).unwrap();
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn whole_network_gradcheck_linear_head_depth1() {
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 3,
            output_activation: OutputActivation::Linear,
            ..UNetConfig::default()
        };
        let rep = gradcheck_network(&cfg, 12, 4, 6).unwrap();
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn stale_activations_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = build::<f32>(&tiny(), 5).unwrap();
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let (y, act) = forward(&p, &x, Mode::Train).unwrap();
        p.tensors_mut().next().unwrap()[0] += 1.0;
        let err = backward(&p, &act.unwrap(), &Tensor::full(y.shape(), 1.0)).unwrap_err();
        assert!(matches!(err, Error::StaleActivations { .. }));
    }
}
