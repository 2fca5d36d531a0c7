//! MAE, PSNR and SSIM on the unit intensity scale, per image and over
//! directories of predictions and targets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{is_image_path, read_image, GrayImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, "image dims", format!("{:?}", b.dims()), format!("{:?}", a.dims())));
    }
    Ok(())
}

/// Mean absolute difference on `[0, 1]`. Two storage images are compared
/// through their integer differences, so the result is `sum / (255 n)`.
pub fn mae(pred: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_pair("mae", pred, target)?;
    if let (Some(a), Some(b)) = (pred.storage(), target.storage()) {
        let total: u64 = a.iter().zip(b).map(|(x, y)| x.abs_diff(*y) as u64).sum();
        return Ok(total as f64 / (255.0 * a.len() as f64));
    }
    Ok(mae_plane(&pred.unit_values(), &target.unit_values()))
}

pub fn mae_plane(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn mse_plane(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn mse(pred: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_pair("mse", pred, target)?;
    Ok(mse_plane(&pred.unit_values(), &target.unit_values()))
}

/// `10 log10(1 / mse)`; identical images give `f64::INFINITY`.
pub fn psnr_plane(a: &[f64], b: &[f64]) -> f64 {
    let m = mse_plane(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

pub fn psnr(pred: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_pair("psnr", pred, target)?;
    Ok(psnr_plane(&pred.unit_values(), &target.unit_values()))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.map(|t| t / total)
}

/// Valid-mode separable Gaussian filter: output is `(h-10) x (w-10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 windows, `L = 1`.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::shape("ssim", "pixel count", w * h, a.len().max(b.len())));
    }
    let taps = ssim_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

pub fn ssim(pred: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_pair("ssim", pred, target)?;
    let (h, w) = pred.dims();
    ssim_plane(&pred.unit_values(), &target.unit_values(), w, h)
}

// ---------------------------------------------------------------------------
// Reports

/// Scale MAE is reported on. PSNR and SSIM are scale-invariant when the
/// peak and dynamic range scale with the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricScale {
    #[default]
    Unit,
    Byte,
}

impl MetricScale {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unit" => Some(MetricScale::Unit),
            "byte" => Some(MetricScale::Byte),
            _ => None,
        }
    }

    fn mae_factor(self) -> f64 {
        match self {
            MetricScale::Unit => 1.0,
            MetricScale::Byte => 255.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub mae: f64,
    /// Mean over finite rows only.
    pub psnr_db: f64,
    pub psnr_excluded: usize,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    /// Sorted by id.
    pub rows: Vec<ReportRow>,
    pub aggregate: Aggregate,
    /// Targets with no prediction.
    pub missing_predictions: Vec<PathBuf>,
    /// Predictions with no target.
    pub missing_targets: Vec<PathBuf>,
}

impl MetricsReport {
    pub fn from_rows(mut rows: Vec<ReportRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let count = rows.len();
        let mean = |f: &dyn Fn(&ReportRow) -> f64| -> f64 {
            if count == 0 {
                f64::NAN
            } else {
                rows.iter().map(f).sum::<f64>() / count as f64
            }
        };
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
        let aggregate = Aggregate {
            count,
            mae: mean(&|r| r.mae),
            psnr_db: if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            psnr_excluded: count - finite.len(),
            ssim: mean(&|r| r.ssim),
        };
        MetricsReport {
            rows,
            aggregate,
            missing_predictions: Vec::new(),
            missing_targets: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing_predictions.is_empty() && self.missing_targets.is_empty()
    }

    /// Human-readable warnings (excluded PSNR values, unmatched files).
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.aggregate.psnr_excluded > 0 {
            out.push(format!(
                "{} identical pair(s) have infinite PSNR and are excluded from the PSNR mean",
                self.aggregate.psnr_excluded
            ));
        }
        for p in &self.missing_predictions {
            out.push(format!("no prediction for target {}", p.display()));
        }
        for p in &self.missing_targets {
            out.push(format!("no target for prediction {}", p.display()));
        }
        out
    }
}

fn num(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        v.to_string()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "id,mae,psnr_db,ssim")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.id, num(r.mae), num(r.psnr_db), num(r.ssim))?;
        }
        for p in &self.missing_predictions {
            writeln!(f, "# missing prediction: {}", p.display())?;
        }
        for p in &self.missing_targets {
            writeln!(f, "# missing target: {}", p.display())?;
        }
        let a = &self.aggregate;
        writeln!(f, "# count: {} psnr_inf_excluded: {}", a.count, a.psnr_excluded)?;
        writeln!(f, "mean,{},{},{}", num(a.mae), num(a.psnr_db), num(a.ssim))
    }
}

const SUFFIXES: [&str; 3] = ["_input", "_target", "_pred"];

/// Pair id of an image file: its stem without a role suffix.
pub fn image_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    SUFFIXES
        .iter()
        .find_map(|s| stem.strip_suffix(s).map(str::to_string))
        .unwrap_or(stem)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn has_suffix(path: &Path, suffix: &str) -> bool {
    path.file_stem().is_some_and(|s| s.to_string_lossy().ends_with(suffix))
}

/// Compute per-image metrics for every target id. On the target side a
/// `_target` file wins over other files with the same id; on the prediction
/// side a file with the target's exact name wins, then any file with the id.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, target_dir: impl AsRef<Path>, scale: MetricScale) -> Result<MetricsReport> {
    let (pred_dir, target_dir) = (pred_dir.as_ref(), target_dir.as_ref());
    let mut targets: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in list_images(target_dir)? {
        let id = image_id(&path);
        let replace = match targets.get(&id) {
            None => true,
            Some(prev) => !has_suffix(prev, "_target") && has_suffix(&path, "_target"),
        };
        if replace {
            targets.insert(id, path);
        }
    }
    let preds = list_images(pred_dir)?;
    let mut by_id: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for p in &preds {
        by_id.entry(image_id(p)).or_default().push(p.clone());
    }

    let mut rows = Vec::new();
    let mut missing_predictions = Vec::new();
    for (id, target_path) in &targets {
        let same_name = pred_dir.join(target_path.file_name().unwrap());
        let pred_path = if same_name.is_file() {
            Some(same_name)
        } else {
            by_id.get(id).and_then(|v| v.first().cloned())
        };
        let Some(pred_path) = pred_path else {
            missing_predictions.push(target_path.clone());
            continue;
        };
        let pred = read_image(&pred_path)?;
        let target = read_image(target_path)?;
        if pred.dims() != target.dims() {
            return Err(Error::data(
                &pred_path,
                format!("dims {:?} differ from target {:?}", pred.dims(), target.dims()),
            ));
        }
        let ssim = ssim(&pred, &target).map_err(|e| Error::data(&pred_path, e.to_string()))?;
        rows.push(ReportRow {
            id: id.clone(),
            mae: mae(&pred, &target)? * scale.mae_factor(),
            psnr_db: psnr(&pred, &target)?,
            ssim,
        });
    }
    let missing_targets = by_id
        .iter()
        .filter(|(id, _)| !targets.contains_key(*id))
        .flat_map(|(_, v)| v.iter().cloned())
        .collect();
    let mut report = MetricsReport::from_rows(rows);
    report.missing_predictions = missing_predictions;
    report.missing_targets = missing_targets;
    Ok(report)
}
