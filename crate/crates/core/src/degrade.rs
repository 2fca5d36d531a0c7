//! Synthetic training pairs: a procedural ridge-pattern generator and a
//! fixed-order chain of seeded degradation operators.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{normalize, read_image, resize_plane, round_half_up, write_image, GrayImage};
use crate::pipeline::Affine;

/// Degraded input and its clean target.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub degraded: GrayImage,
    pub clean: GrayImage,
    pub seed: u64,
    pub id: String,
}

/// RNG stream ids, so the clean pattern and its degradation never share draws.
const STREAM_CLEAN: u64 = 0;
const STREAM_DEGRADE: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

// ---------------------------------------------------------------------------
// Clean ridge patterns

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeConfig {
    /// Band of the ridge period measured along image rows, in pixels.
    pub period_min: f64,
    pub period_max: f64,
    /// Bound on the angle between the ridge normal and the x axis.
    pub max_tilt_degrees: f64,
    /// Amplitude of the smooth orientation noise (part of the tilt budget).
    pub wobble_degrees: f64,
    /// Value-noise lattice cells across each axis.
    pub orientation_cells: usize,
    /// Steepness of the soft threshold applied to the sine.
    pub sharpness: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            period_min: 7.0,
            period_max: 12.0,
            max_tilt_degrees: 35.0,
            wobble_degrees: 20.0,
            orientation_cells: 3,
            sharpness: 5.0,
        }
    }
}

impl RidgeConfig {
    /// Normal-direction period range that keeps the row period inside the band.
    fn normal_period_range(&self) -> (f64, f64) {
        (self.period_min, self.period_max * self.max_tilt_degrees.to_radians().cos())
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.normal_period_range();
        if !(self.period_min > 2.0 && lo <= hi) {
            return Err(Error::invalid(
                "RidgeConfig",
                format!(
                    "period band [{}, {}] too narrow for a tilt of {} degrees",
                    self.period_min, self.period_max, self.max_tilt_degrees
                ),
            ));
        }
        if !(0.0..90.0).contains(&self.max_tilt_degrees) || !(0.0..=self.max_tilt_degrees).contains(&self.wobble_degrees) {
            return Err(Error::invalid("RidgeConfig", "need 0 <= wobble <= tilt < 90 degrees"));
        }
        if self.orientation_cells == 0 || !(self.sharpness > 0.0) {
            return Err(Error::invalid("RidgeConfig", "cells and sharpness must be positive"));
        }
        Ok(())
    }
}

/// Smooth value noise in `[-1, 1]` on a `cells x cells` lattice.
fn value_noise(w: usize, h: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let scale = |i: usize, len: usize| {
        if len > 1 {
            i as f64 / (len - 1) as f64 * cells as f64
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let v = scale(y, h);
        let j = (v.floor() as usize).min(cells - 1);
        let fy = smooth(v - j as f64);
        for x in 0..w {
            let u = scale(x, w);
            let i = (u.floor() as usize).min(cells - 1);
            let fx = smooth(u - i as f64);
            let at = |a: usize, b: usize| lattice[b * n + a];
            let top = at(i, j) * (1.0 - fx) + at(i + 1, j) * fx;
            let bottom = at(i, j + 1) * (1.0 - fx) + at(i + 1, j + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn generate_clean(seed: u64, h: usize, w: usize) -> Result<GrayImage> {
    generate_clean_with(seed, h, w, &RidgeConfig::default())
}

/// Dark ridges on white inside an elliptical print area. The phase is
/// integrated along rows from the center column (and down the center
/// column), so the local row frequency is exactly `cos(theta) / period`.
pub fn generate_clean_with(seed: u64, h: usize, w: usize, cfg: &RidgeConfig) -> Result<GrayImage> {
    if h < 32 || w < 32 {
        return Err(Error::invalid("generate_clean", format!("need h, w >= 32, got {h}x{w}")));
    }
    cfg.validate()?;
    let mut rng = rng_for(seed, STREAM_CLEAN);
    let period = uniform(&mut rng, cfg.normal_period_range());
    let base_budget = (cfg.max_tilt_degrees - cfg.wobble_degrees).to_radians();
    let base = uniform(&mut rng, (-base_budget, base_budget));
    let wobble = cfg.wobble_degrees.to_radians();
    let theta: Vec<f64> = value_noise(w, h, cfg.orientation_cells, &mut rng)
        .into_iter()
        .map(|n| base + wobble * n)
        .collect();
    let pressure: Vec<f64> = value_noise(w, h, 2, &mut rng)
        .into_iter()
        .map(|n| 0.925 + 0.075 * n)
        .collect();
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let k = 2.0 * PI / period;

    let cx = w / 2;
    let cy = h / 2;
    let mut phase = vec![0.0f64; w * h];
    phase[cy * w + cx] = phase0;
    for y in cy + 1..h {
        phase[y * w + cx] = phase[(y - 1) * w + cx] + k * theta[y * w + cx].sin();
    }
    for y in (0..cy).rev() {
        phase[y * w + cx] = phase[(y + 1) * w + cx] - k * theta[y * w + cx].sin();
    }
    for y in 0..h {
        let row = y * w;
        for x in cx + 1..w {
            phase[row + x] = phase[row + x - 1] + k * theta[row + x].cos();
        }
        for x in (0..cx).rev() {
            phase[row + x] = phase[row + x + 1] - k * theta[row + x].cos();
        }
    }

    let (ax, ay) = (0.46 * w as f64, 0.47 * h as f64);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = (x as f64 - (w as f64 - 1.0) / 2.0) / ax;
            let dy = (y as f64 - (h as f64 - 1.0) / 2.0) / ay;
            let mask = ((1.0 - (dx * dx + dy * dy).sqrt()) / 0.08).clamp(0.0, 1.0);
            let ridge = 1.0 / (1.0 + (-cfg.sharpness * phase[i].sin()).exp());
            px.push(round_half_up(255.0 * (1.0 - mask * pressure[i] * ridge)));
        }
    }
    GrayImage::from_storage(w, h, px)
}

// ---------------------------------------------------------------------------
// Operators (compute domain, row-major planes)

/// Truncated Gaussian taps, radius `ceil(3 sigma)`, summing to one.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn blur_f64(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return src.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * src[y * w + clamp(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[clamp(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    let wide: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    blur_f64(&wide, w, h, sigma).into_iter().map(|v| v as f32).collect()
}

/// Rotation about the image center with white fill.
pub fn rotate(src: &[f32], w: usize, h: usize, degrees: f64) -> Vec<f32> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    Affine {
        m: [[c, -s], [s, c]],
        t: [0.0, 0.0],
    }
    .warp(src, w, h, 1.0)
}

/// Per-pixel (dx, dy): unit-uniform noise, Gaussian-smoothed, scaled by `alpha`.
pub fn displacement_field(w: usize, h: usize, alpha: f64, sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = || {
        let noise: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        blur_f64(&noise, w, h, sigma).into_iter().map(|v| v * alpha).collect::<Vec<_>>()
    };
    let dx = field();
    let dy = field();
    (dx, dy)
}

pub fn elastic_transform(src: &[f32], w: usize, h: usize, alpha: f64, sigma: f64, seed: u64) -> Vec<f32> {
    if alpha == 0.0 {
        return src.to_vec();
    }
    let (dx, dy) = displacement_field(w, h, alpha, sigma, seed);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + dx[i]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + dy[i]).clamp(0.0, (h - 1) as f64);
            out.push(crate::image::sample_bilinear(src, w, h, sx, sy, crate::image::Border::Clamp));
        }
    }
    out
}

/// Downscale by `factor`, then upscale back to the original size.
pub fn reduce_resolution(src: &[f32], w: usize, h: usize, factor: f64) -> Vec<f32> {
    let sw = ((w as f64 / factor).round() as usize).max(1);
    let sh = ((h as f64 / factor).round() as usize).max(1);
    let small = resize_plane(src, w, h, sw, sh);
    resize_plane(&small, sw, sh, w, h)
}

fn clamp_unit(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

pub fn adjust_brightness(src: &[f32], offset: f64) -> Vec<f32> {
    src.iter().map(|&v| clamp_unit(v as f64 + offset)).collect()
}

/// Scale deviations from the image mean.
pub fn adjust_contrast(src: &[f32], factor: f64) -> Vec<f32> {
    let mean = src.iter().map(|&v| v as f64).sum::<f64>() / src.len() as f64;
    src.iter().map(|&v| clamp_unit((v as f64 - mean) * factor + mean)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Noise,
    Lines,
    Grid,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Noise, Texture::Lines, Texture::Grid];

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Noise => "noise",
            Texture::Lines => "lines",
            Texture::Grid => "grid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Texture::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// Procedural background in `[0, 1]`.
pub fn background_texture(w: usize, h: usize, texture: Texture, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = value_noise(w, h, 4, &mut rng);
    let level = rng.gen_range(0.35..0.8);
    let base: Vec<f64> = noise.iter().map(|n| level + 0.2 * n).collect();
    let stripes = |rng: &mut ChaCha8Rng| {
        let angle = rng.gen_range(0.0..PI);
        let period = rng.gen_range(6.0..24.0);
        let (s, c) = angle.sin_cos();
        move |x: usize, y: usize| 0.5 + 0.5 * (2.0 * PI * (x as f64 * c + y as f64 * s) / period).sin()
    };
    let out: Vec<f64> = match texture {
        Texture::Noise => base,
        Texture::Lines => {
            let a = stripes(&mut rng);
            (0..w * h).map(|i| 0.6 * base[i] + 0.4 * a(i % w, i / w)).collect()
        }
        Texture::Grid => {
            let a = stripes(&mut rng);
            let b = stripes(&mut rng);
            (0..w * h)
                .map(|i| 0.6 * base[i] + 0.4 * a(i % w, i / w).min(b(i % w, i / w)))
                .collect()
        }
    };
    out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn blend_background(src: &[f32], w: usize, h: usize, alpha: f64, texture: Texture, seed: u64) -> Vec<f32> {
    if alpha == 0.0 {
        return src.to_vec();
    }
    let bg = background_texture(w, h, texture, seed);
    src.iter()
        .zip(&bg)
        .map(|(&v, &b)| clamp_unit(v as f64 * (1.0 - alpha) + b * alpha))
        .collect()
}

/// Occluders are filled with the print background (white).
pub const OCCLUSION_FILL: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Ellipse { cx: usize, cy: usize, rx: usize, ry: usize },
}

impl Shape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 - cx as f64) / rx.max(1) as f64;
                let dy = (y as f64 - cy as f64) / ry.max(1) as f64;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

pub fn occlude(src: &[f32], w: usize, shapes: &[Shape]) -> Vec<f32> {
    let mut out = src.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        if shapes.iter().any(|s| s.contains(i % w, i / w)) {
            *v = OCCLUSION_FILL;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scratch {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub width: f64,
    pub intensity: f64,
}

fn segment_distance(px: f64, py: f64, s: &Scratch) -> f64 {
    let (vx, vy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - s.x0) * vx + (py - s.y0) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (s.x0 + t * vx - px, s.y0 + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Anti-aliased line segments: coverage falls off linearly over one pixel
/// at the stroke edge.
pub fn draw_scratches(src: &[f32], w: usize, scratches: &[Scratch]) -> Vec<f32> {
    let mut out: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    for s in scratches {
        for (i, v) in out.iter_mut().enumerate() {
            let d = segment_distance((i % w) as f64, (i / w) as f64, s);
            let cover = (s.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                *v = *v * (1.0 - cover) + s.intensity * cover;
            }
        }
    }
    out.into_iter().map(clamp_unit).collect()
}

// ---------------------------------------------------------------------------
// Draws and their manifest tokens

/// Application order; also the order tokens appear in a manifest record.
pub const OPERATOR_ORDER: [&str; 9] = [
    "rotation",
    "elastic",
    "resolution",
    "blur",
    "brightness",
    "contrast",
    "background",
    "occlusion",
    "scratch",
];

/// Parameters of one fired operator.
#[derive(Clone, Debug, PartialEq)]
pub enum OpDraw {
    Rotation { degrees: f64 },
    Elastic { alpha: f64, sigma: f64, seed: u64 },
    Resolution { factor: f64 },
    Blur { sigma: f64 },
    Brightness { offset: f64 },
    Contrast { factor: f64 },
    Background { alpha: f64, texture: Texture, seed: u64 },
    Occlusion { shapes: Vec<Shape> },
    Scratch { strokes: Vec<Scratch> },
}

impl OpDraw {
    pub fn name(&self) -> &'static str {
        match self {
            OpDraw::Rotation { .. } => "rotation",
            OpDraw::Elastic { .. } => "elastic",
            OpDraw::Resolution { .. } => "resolution",
            OpDraw::Blur { .. } => "blur",
            OpDraw::Brightness { .. } => "brightness",
            OpDraw::Contrast { .. } => "contrast",
            OpDraw::Background { .. } => "background",
            OpDraw::Occlusion { .. } => "occlusion",
            OpDraw::Scratch { .. } => "scratch",
        }
    }

    fn rank(&self) -> usize {
        OPERATOR_ORDER.iter().position(|n| *n == self.name()).unwrap()
    }

    pub fn parse(token: &str) -> std::result::Result<OpDraw, String> {
        let (name, args) = token
            .split_once('=')
            .ok_or_else(|| format!("token {token:?} has no '='"))?;
        let float = |s: &str| s.parse::<f64>().map_err(|_| format!("{name}: bad number {s:?}"));
        let int = |s: &str| s.parse::<u64>().map_err(|_| format!("{name}: bad integer {s:?}"));
        let idx = |s: &str| s.parse::<usize>().map_err(|_| format!("{name}: bad integer {s:?}"));
        let fields: Vec<&str> = args.split(',').collect();
        let arity = |n: usize| {
            if fields.len() == n {
                Ok(())
            } else {
                Err(format!("{name}: expected {n} fields, got {}", fields.len()))
            }
        };
        let draw = match name {
            "rotation" => {
                arity(1)?;
                OpDraw::Rotation { degrees: float(fields[0])? }
            }
            "elastic" => {
                arity(3)?;
                OpDraw::Elastic {
                    alpha: float(fields[0])?,
                    sigma: float(fields[1])?,
                    seed: int(fields[2])?,
                }
            }
            "resolution" => {
                arity(1)?;
                OpDraw::Resolution { factor: float(fields[0])? }
            }
            "blur" => {
                arity(1)?;
                OpDraw::Blur { sigma: float(fields[0])? }
            }
            "brightness" => {
                arity(1)?;
                OpDraw::Brightness { offset: float(fields[0])? }
            }
            "contrast" => {
                arity(1)?;
                OpDraw::Contrast { factor: float(fields[0])? }
            }
            "background" => {
                arity(3)?;
                OpDraw::Background {
                    alpha: float(fields[0])?,
                    texture: Texture::parse(fields[1]).ok_or_else(|| format!("unknown texture {:?}", fields[1]))?,
                    seed: int(fields[2])?,
                }
            }
            "occlusion" => {
                let mut shapes = Vec::new();
                for part in args.split('|').filter(|p| !p.is_empty()) {
                    let f: Vec<&str> = part.split(':').collect();
                    if f.len() != 5 {
                        return Err(format!("occlusion: malformed shape {part:?}"));
                    }
                    let (a, b, c, d) = (idx(f[1])?, idx(f[2])?, idx(f[3])?, idx(f[4])?);
                    shapes.push(match f[0] {
                        "rect" => Shape::Rect { x0: a, y0: b, x1: c, y1: d },
                        "ellipse" => Shape::Ellipse { cx: a, cy: b, rx: c, ry: d },
                        other => return Err(format!("occlusion: unknown shape {other:?}")),
                    });
                }
                OpDraw::Occlusion { shapes }
            }
            "scratch" => {
                let mut strokes = Vec::new();
                for part in args.split('|').filter(|p| !p.is_empty()) {
                    let f = part.split(':').map(float).collect::<std::result::Result<Vec<_>, _>>()?;
                    if f.len() != 6 {
                        return Err(format!("scratch: malformed stroke {part:?}"));
                    }
                    strokes.push(Scratch {
                        x0: f[0],
                        y0: f[1],
                        x1: f[2],
                        y1: f[3],
                        width: f[4],
                        intensity: f[5],
                    });
                }
                OpDraw::Scratch { strokes }
            }
            other => return Err(format!("unknown operator {other:?}")),
        };
        Ok(draw)
    }
}

impl fmt::Display for OpDraw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}=", self.name())?;
        match self {
            OpDraw::Rotation { degrees } => write!(f, "{degrees}"),
            OpDraw::Elastic { alpha, sigma, seed } => write!(f, "{alpha},{sigma},{seed}"),
            OpDraw::Resolution { factor } => write!(f, "{factor}"),
            OpDraw::Blur { sigma } => write!(f, "{sigma}"),
            OpDraw::Brightness { offset } => write!(f, "{offset}"),
            OpDraw::Contrast { factor } => write!(f, "{factor}"),
            OpDraw::Background { alpha, texture, seed } => write!(f, "{alpha},{},{seed}", texture.as_str()),
            OpDraw::Occlusion { shapes } => {
                let parts: Vec<String> = shapes
                    .iter()
                    .map(|s| match *s {
                        Shape::Rect { x0, y0, x1, y1 } => format!("rect:{x0}:{y0}:{x1}:{y1}"),
                        Shape::Ellipse { cx, cy, rx, ry } => format!("ellipse:{cx}:{cy}:{rx}:{ry}"),
                    })
                    .collect();
                write!(f, "{}", parts.join("|"))
            }
            OpDraw::Scratch { strokes } => {
                let parts: Vec<String> = strokes
                    .iter()
                    .map(|s| format!("{}:{}:{}:{}:{}:{}", s.x0, s.y0, s.x1, s.y1, s.width, s.intensity))
                    .collect();
                write!(f, "{}", parts.join("|"))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and sampling

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Toggle {
    pub enabled: bool,
    pub probability: f64,
}

impl Toggle {
    pub const fn on(probability: f64) -> Self {
        Toggle { enabled: true, probability }
    }
}

/// Which texture a background blend uses; `Any` picks uniformly per pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureChoice {
    Any,
    Only(Texture),
}

impl TextureChoice {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "any" {
            Some(TextureChoice::Any)
        } else {
            Texture::parse(s).map(TextureChoice::Only)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TextureChoice::Any => "any",
            TextureChoice::Only(t) => t.as_str(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationConfig {
    pub rotation: Toggle,
    pub rotation_degrees: (f64, f64),
    pub elastic: Toggle,
    pub elastic_alpha: (f64, f64),
    pub elastic_sigma: (f64, f64),
    pub resolution: Toggle,
    pub resolution_factor: (f64, f64),
    pub blur: Toggle,
    pub blur_sigma: (f64, f64),
    pub brightness: Toggle,
    pub brightness_offset: (f64, f64),
    pub contrast: Toggle,
    pub contrast_factor: (f64, f64),
    pub background: Toggle,
    pub background_alpha: (f64, f64),
    pub background_texture: TextureChoice,
    pub occlusion: Toggle,
    pub occlusion_count: (usize, usize),
    /// Extent as a fraction of the smaller image side.
    pub occlusion_size: (f64, f64),
    pub scratch: Toggle,
    pub scratch_count: (usize, usize),
    /// Length as a fraction of the image diagonal.
    pub scratch_length: (f64, f64),
    /// Stroke width in pixels.
    pub scratch_width: (f64, f64),
    /// Darkness of a stroke; light strokes use `1 - value`.
    pub scratch_intensity: (f64, f64),
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            rotation: Toggle::on(0.5),
            rotation_degrees: (-15.0, 15.0),
            elastic: Toggle::on(0.5),
            elastic_alpha: (1.0, 4.0),
            elastic_sigma: (4.0, 8.0),
            resolution: Toggle::on(0.3),
            resolution_factor: (1.5, 3.0),
            blur: Toggle::on(0.5),
            blur_sigma: (0.5, 2.5),
            brightness: Toggle::on(0.5),
            brightness_offset: (-0.2, 0.2),
            contrast: Toggle::on(0.5),
            contrast_factor: (0.6, 1.4),
            background: Toggle::on(0.8),
            background_alpha: (0.2, 0.6),
            background_texture: TextureChoice::Any,
            occlusion: Toggle::on(0.4),
            occlusion_count: (1, 3),
            occlusion_size: (0.1, 0.3),
            scratch: Toggle::on(0.4),
            scratch_count: (1, 4),
            scratch_length: (0.2, 0.6),
            scratch_width: (1.0, 3.0),
            scratch_intensity: (0.0, 0.1),
        }
    }
}

impl DegradationConfig {
    /// Every operator switched off.
    pub fn disabled() -> Self {
        let mut c = DegradationConfig::default();
        for t in c.toggles_mut() {
            t.enabled = false;
        }
        c
    }

    /// Only the named operator, firing always.
    pub fn only(name: &str) -> Result<Self> {
        let mut c = DegradationConfig::disabled();
        let idx = OPERATOR_ORDER
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::invalid("DegradationConfig::only", format!("unknown operator {name:?}")))?;
        *c.toggles_mut()[idx] = Toggle::on(1.0);
        Ok(c)
    }

    /// Toggles in operator order.
    pub fn toggles_mut(&mut self) -> [&mut Toggle; 9] {
        [
            &mut self.rotation,
            &mut self.elastic,
            &mut self.resolution,
            &mut self.blur,
            &mut self.brightness,
            &mut self.contrast,
            &mut self.background,
            &mut self.occlusion,
            &mut self.scratch,
        ]
    }

    pub fn toggles(&self) -> [Toggle; 9] {
        [
            self.rotation,
            self.elastic,
            self.resolution,
            self.blur,
            self.brightness,
            self.contrast,
            self.background,
            self.occlusion,
            self.scratch,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "DegradationConfig";
        for (name, t) in OPERATOR_ORDER.iter().zip(self.toggles()) {
            if !(0.0..=1.0).contains(&t.probability) {
                return Err(Error::invalid(OP, format!("{name}: probability {} outside [0, 1]", t.probability)));
            }
        }
        let ranges = [
            ("rotation.degrees", self.rotation_degrees),
            ("elastic.alpha", self.elastic_alpha),
            ("elastic.sigma", self.elastic_sigma),
            ("resolution.factor", self.resolution_factor),
            ("blur.sigma", self.blur_sigma),
            ("brightness.offset", self.brightness_offset),
            ("contrast.factor", self.contrast_factor),
            ("background.alpha", self.background_alpha),
            ("occlusion.size", self.occlusion_size),
            ("scratch.length", self.scratch_length),
            ("scratch.width", self.scratch_width),
            ("scratch.intensity", self.scratch_intensity),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::invalid(OP, format!("{name}: range [{lo}, {hi}] is not ordered")));
            }
        }
        let counts = [("occlusion.count", self.occlusion_count), ("scratch.count", self.scratch_count)];
        for (name, (lo, hi)) in counts {
            if lo > hi {
                return Err(Error::invalid(OP, format!("{name}: range [{lo}, {hi}] is not ordered")));
            }
        }
        let positive = [
            ("resolution.factor", self.resolution_factor.0 >= 1.0),
            ("elastic.sigma", self.elastic_sigma.0 >= 0.0),
            ("blur.sigma", self.blur_sigma.0 >= 0.0),
            ("contrast.factor", self.contrast_factor.0 >= 0.0),
            ("background.alpha", self.background_alpha.0 >= 0.0 && self.background_alpha.1 <= 1.0),
            ("occlusion.size", self.occlusion_size.0 >= 0.0 && self.occlusion_size.1 <= 1.0),
            ("scratch.intensity", self.scratch_intensity.0 >= 0.0 && self.scratch_intensity.1 <= 1.0),
            ("scratch.width", self.scratch_width.0 >= 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::invalid(OP, format!("{name}: range outside the operator's domain")));
            }
        }
        Ok(())
    }
}

fn count(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// Sample the fired operators for a `w x h` image, in operator order.
pub fn sample_draws(config: &DegradationConfig, w: usize, h: usize, seed: u64) -> Vec<OpDraw> {
    let mut rng = rng_for(seed, STREAM_DEGRADE);
    let mut draws = Vec::new();
    for (idx, toggle) in config.toggles().into_iter().enumerate() {
        if !toggle.enabled || !rng.gen_bool(toggle.probability) {
            continue;
        }
        let draw = match idx {
            0 => OpDraw::Rotation {
                degrees: uniform(&mut rng, config.rotation_degrees),
            },
            1 => OpDraw::Elastic {
                alpha: uniform(&mut rng, config.elastic_alpha),
                sigma: uniform(&mut rng, config.elastic_sigma),
                seed: rng.gen(),
            },
            2 => OpDraw::Resolution {
                factor: uniform(&mut rng, config.resolution_factor),
            },
            3 => OpDraw::Blur {
                sigma: uniform(&mut rng, config.blur_sigma),
            },
            4 => OpDraw::Brightness {
                offset: uniform(&mut rng, config.brightness_offset),
            },
            5 => OpDraw::Contrast {
                factor: uniform(&mut rng, config.contrast_factor),
            },
            6 => OpDraw::Background {
                alpha: uniform(&mut rng, config.background_alpha),
                texture: match config.background_texture {
                    TextureChoice::Any => Texture::ALL[rng.gen_range(0..Texture::ALL.len())],
                    TextureChoice::Only(t) => t,
                },
                seed: rng.gen(),
            },
            7 => {
                let side = w.min(h) as f64;
                let n = count(&mut rng, config.occlusion_count);
                let shapes = (0..n)
                    .map(|_| {
                        let sw = ((uniform(&mut rng, config.occlusion_size) * side).round() as usize).clamp(1, w);
                        let sh = ((uniform(&mut rng, config.occlusion_size) * side).round() as usize).clamp(1, h);
                        let x0 = rng.gen_range(0..=w - sw);
                        let y0 = rng.gen_range(0..=h - sh);
                        if rng.gen_bool(0.5) {
                            Shape::Rect {
                                x0,
                                y0,
                                x1: x0 + sw,
                                y1: y0 + sh,
                            }
                        } else {
                            Shape::Ellipse {
                                cx: x0 + sw / 2,
                                cy: y0 + sh / 2,
                                rx: (sw / 2).max(1),
                                ry: (sh / 2).max(1),
                            }
                        }
                    })
                    .collect();
                OpDraw::Occlusion { shapes }
            }
            _ => {
                let diag = ((w * w + h * h) as f64).sqrt();
                let n = count(&mut rng, config.scratch_count);
                let strokes = (0..n)
                    .map(|_| {
                        let len = uniform(&mut rng, config.scratch_length) * diag;
                        let angle = rng.gen_range(0.0..PI);
                        let x0 = rng.gen_range(0.0..w as f64);
                        let y0 = rng.gen_range(0.0..h as f64);
                        let width = uniform(&mut rng, config.scratch_width);
                        let dark = uniform(&mut rng, config.scratch_intensity);
                        let intensity = if rng.gen_bool(0.5) { dark } else { 1.0 - dark };
                        Scratch {
                            x0,
                            y0,
                            x1: x0 + len * angle.cos(),
                            y1: y0 + len * angle.sin(),
                            width,
                            intensity,
                        }
                    })
                    .collect();
                OpDraw::Scratch { strokes }
            }
        };
        draws.push(draw);
    }
    draws
}

/// Apply recorded draws to a storage-domain clean image. Returns
/// `(degraded, target)`; the target differs from `clean` only by rotation.
pub fn apply_draws(clean: &GrayImage, draws: &[OpDraw]) -> Result<(GrayImage, GrayImage)> {
    const OP: &str = "apply_draws";
    clean.expect_storage(OP)?;
    if draws.windows(2).any(|p| p[0].rank() >= p[1].rank()) {
        return Err(Error::invalid(OP, "draws must follow the fixed operator order, each at most once"));
    }
    let (h, w) = clean.dims();
    let unit = normalize(clean)?;
    let mut target = unit.compute().unwrap().to_vec();
    let mut x = target.clone();
    for draw in draws {
        x = match *draw {
            OpDraw::Rotation { degrees } => {
                target = rotate(&target, w, h, degrees);
                rotate(&x, w, h, degrees)
            }
            OpDraw::Elastic { alpha, sigma, seed } => elastic_transform(&x, w, h, alpha, sigma, seed),
            OpDraw::Resolution { factor } => reduce_resolution(&x, w, h, factor),
            OpDraw::Blur { sigma } => gaussian_blur(&x, w, h, sigma),
            OpDraw::Brightness { offset } => adjust_brightness(&x, offset),
            OpDraw::Contrast { factor } => adjust_contrast(&x, factor),
            OpDraw::Background { alpha, texture, seed } => blend_background(&x, w, h, alpha, texture, seed),
            OpDraw::Occlusion { ref shapes } => occlude(&x, w, shapes),
            OpDraw::Scratch { ref strokes } => draw_scratches(&x, w, strokes),
        };
    }
    let to_storage = |px: Vec<f32>| {
        GrayImage::from_storage(w, h, px.into_iter().map(|v| round_half_up(v as f64 * 255.0)).collect())
    };
    Ok((to_storage(x)?, to_storage(target)?))
}

/// Degrade a storage-domain clean image. The pair id is the seed.
pub fn degrade(clean: &GrayImage, config: &DegradationConfig, seed: u64) -> Result<ImagePair> {
    Ok(degrade_logged(clean, config, seed)?.0)
}

pub fn degrade_logged(clean: &GrayImage, config: &DegradationConfig, seed: u64) -> Result<(ImagePair, Vec<OpDraw>)> {
    config.validate()?;
    let (h, w) = clean.dims();
    let draws = sample_draws(config, w, h, seed);
    let (degraded, target) = apply_draws(clean, &draws)?;
    Ok((
        ImagePair {
            degraded,
            clean: target,
            seed,
            id: seed.to_string(),
        },
        draws,
    ))
}

// ---------------------------------------------------------------------------
// Datasets

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub draws: Vec<OpDraw>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// (h, w) of every pair.
    pub size: (usize, usize),
    pub base_seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn input_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}_input.png"))
    }

    pub fn target_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}_target.png"))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let bad = |line: usize, msg: String| Error::data(path, format!("line {}: {msg}", line + 1));
        let mut size = None;
        let mut base_seed = None;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let Some((key, value)) = header.split_once(':') else {
                    continue;
                };
                let value = value.trim();
                match key.trim() {
                    "size" => {
                        let (h, w) = value
                            .split_once('x')
                            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
                            .ok_or_else(|| bad(n, format!("bad size {value:?}")))?;
                        size = Some((h, w));
                    }
                    "base_seed" => {
                        base_seed = Some(value.parse().map_err(|_| bad(n, format!("bad base_seed {value:?}")))?);
                    }
                    "order" => {
                        let order: Vec<&str> = value.split_whitespace().collect();
                        if order != OPERATOR_ORDER {
                            return Err(bad(n, format!("unsupported operator order {value:?}")));
                        }
                    }
                    _ => {}
                }
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap().to_string();
            let seed = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(n, "missing or malformed seed".into()))?;
            let draws = fields
                .map(OpDraw::parse)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(n, e))?;
            records.push(ManifestRecord { id, seed, draws });
        }
        Ok(Manifest {
            size: size.ok_or_else(|| Error::data(path, "missing '# size:' header"))?,
            base_seed: base_seed.unwrap_or(0),
            records,
        })
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# order: {}", OPERATOR_ORDER.join(" "))?;
        writeln!(f, "# size: {}x{}", self.size.0, self.size.1)?;
        writeln!(f, "# base_seed: {}", self.base_seed)?;
        for r in &self.records {
            write!(f, "{} {}", r.id, r.seed)?;
            for d in &r.draws {
                write!(f, " {d}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn pair_id(index: usize) -> String {
    format!("fp{index:05}")
}

/// Write `n_pairs` PNG pairs and `manifest.txt` into `out_dir`. Pair `i`
/// uses seed `base_seed + i` for both its clean pattern and its draws.
pub fn build_dataset(
    n_pairs: usize,
    h: usize,
    w: usize,
    config: &DegradationConfig,
    base_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let seed = base_seed.wrapping_add(i as u64);
        let id = pair_id(i);
        let clean = generate_clean(seed, h, w)?;
        let (pair, draws) = degrade_logged(&clean, config, seed)?;
        write_image(&pair.degraded, Manifest::input_path(dir, &id))?;
        write_image(&pair.clean, Manifest::target_path(dir, &id))?;
        records.push(ManifestRecord { id, seed, draws });
    }
    let manifest = Manifest {
        size: (h, w),
        base_seed,
        records,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_string()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read `dir/manifest.txt`.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

/// Load the pairs listed in a manifest, in manifest order.
pub fn load_pairs(dir: impl AsRef<Path>, manifest: &Manifest) -> Result<Vec<ImagePair>> {
    let dir = dir.as_ref();
    manifest
        .records
        .iter()
        .map(|r| {
            let input = Manifest::input_path(dir, &r.id);
            let target = Manifest::target_path(dir, &r.id);
            let degraded = read_image(&input)?;
            let clean = read_image(&target)?;
            if degraded.dims() != clean.dims() {
                return Err(Error::data(&input, format!("dims differ from {}", target.display())));
            }
            Ok(ImagePair {
                degraded,
                clean,
                seed: r.seed,
                id: r.id.clone(),
            })
        })
        .collect()
}
