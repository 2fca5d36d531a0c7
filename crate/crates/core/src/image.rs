//! Grayscale images in either the 8-bit storage domain or the unit-interval
//! compute domain, plus PNG / binary PGM I/O and bilinear resampling.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Integers in `[0, 255]`.
    Storage,
    /// Reals in `[0, 1]`.
    Compute,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Storage(Vec<u8>),
    Compute(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Pixels,
}

/// Round half-up on the 0..255 scale. A `1e-4` level slack absorbs float
/// noise so that, e.g., an exact 127.5 computed as 127.49999 still rounds up.
pub fn round_half_up(v: f64) -> u8 {
    (v + 0.5 + 1e-4).floor().clamp(0.0, 255.0) as u8
}

impl GrayImage {
    pub fn from_storage(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::check_dims("GrayImage::from_storage", width, height, pixels.len())?;
        Ok(GrayImage {
            width,
            height,
            pixels: Pixels::Storage(pixels),
        })
    }

    /// Values must lie in `[0, 1]`.
    pub fn from_compute(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::check_dims("GrayImage::from_compute", width, height, pixels.len())?;
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "GrayImage::from_compute",
                format!("pixel value {bad} outside [0, 1]"),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: Pixels::Compute(pixels),
        })
    }

    /// Clamps into `[0, 1]`; used by operators whose arithmetic may overshoot.
    pub fn from_compute_clamped(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::from_compute(width, height, pixels)
    }

    fn check_dims(op: &'static str, width: usize, height: usize, len: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(op, format!("zero-sized image {width}x{height}")));
        }
        if width * height != len {
            return Err(Error::shape(op, "pixel count", width * height, len));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// (height, width)
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn domain(&self) -> Domain {
        match self.pixels {
            Pixels::Storage(_) => Domain::Storage,
            Pixels::Compute(_) => Domain::Compute,
        }
    }

    pub fn storage(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::Storage(p) => Some(p),
            Pixels::Compute(_) => None,
        }
    }

    pub fn compute(&self) -> Option<&[f32]> {
        match &self.pixels {
            Pixels::Compute(p) => Some(p),
            Pixels::Storage(_) => None,
        }
    }

    pub fn expect_storage(&self, op: &'static str) -> Result<&[u8]> {
        self.storage()
            .ok_or_else(|| Error::invalid(op, "expected a storage-domain (0..255) image"))
    }

    pub fn expect_compute(&self, op: &'static str) -> Result<&[f32]> {
        self.compute()
            .ok_or_else(|| Error::invalid(op, "expected a compute-domain (0..1) image"))
    }

    /// Pixel values on the unit scale regardless of domain.
    pub fn unit_values(&self) -> Vec<f64> {
        match &self.pixels {
            Pixels::Storage(p) => p.iter().map(|&v| v as f64 / 255.0).collect(),
            Pixels::Compute(p) => p.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Divide intensities by 255.
pub fn normalize(img: &GrayImage) -> Result<GrayImage> {
    let px = img.expect_storage("normalize")?;
    GrayImage::from_compute(img.width, img.height, px.iter().map(|&v| v as f32 / 255.0).collect())
}

/// Multiply by 255 and round half-up.
pub fn denormalize(img: &GrayImage) -> Result<GrayImage> {
    let px = img.expect_compute("denormalize")?;
    GrayImage::from_storage(
        img.width,
        img.height,
        px.iter().map(|&v| round_half_up(v as f64 * 255.0)).collect(),
    )
}

/// How taps falling outside the image are resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Border {
    Clamp,
    Fill(f32),
}

/// Bilinear sample of a row-major plane at real coordinates (pixel centers
/// at integers).
pub fn sample_bilinear(src: &[f32], w: usize, h: usize, x: f64, y: f64, border: Border) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |xi: isize, yi: isize| -> f64 {
        match border {
            Border::Clamp => {
                let xc = xi.clamp(0, w as isize - 1) as usize;
                let yc = yi.clamp(0, h as isize - 1) as usize;
                src[yc * w + xc] as f64
            }
            Border::Fill(v) => {
                if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                    v as f64
                } else {
                    src[yi as usize * w + xi as usize] as f64
                }
            }
        }
    };
    let top = if fx == 0.0 {
        tap(x0, y0)
    } else {
        tap(x0, y0) * (1.0 - fx) + tap(x0 + 1, y0) * fx
    };
    if fy == 0.0 {
        return top as f32;
    }
    let bottom = if fx == 0.0 {
        tap(x0, y0 + 1)
    } else {
        tap(x0, y0 + 1) * (1.0 - fx) + tap(x0 + 1, y0 + 1) * fx
    };
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Bilinear resize with half-pixel-center coordinates and clamped edges.
pub fn resize_plane(src: &[f32], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<f32> {
    if (w, h) == (new_w, new_h) {
        return src.to_vec();
    }
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let mut out = Vec::with_capacity(new_w * new_h);
    for oy in 0..new_h {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for ox in 0..new_w {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            out.push(sample_bilinear(src, w, h, x, y, Border::Clamp));
        }
    }
    out
}

/// Resize a compute-domain image.
pub fn resize(img: &GrayImage, new_h: usize, new_w: usize) -> Result<GrayImage> {
    let px = img.expect_compute("resize")?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("resize", "target size must be non-zero"));
    }
    GrayImage::from_compute_clamped(new_w, new_h, resize_plane(px, img.width, img.height, new_w, new_h))
}

// ---------------------------------------------------------------------------
// I/O

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |msg: &str| Error::data(path, format!("PGM: {msg}"));
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM (maxval <= 255) is supported"));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
    let px = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| round_half_up(v as f64 * 255.0 / maxval as f64))
            .collect()
    };
    GrayImage::from_storage(w, h, px)
}

pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    let px = img.expect_storage("encode_pgm")?;
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(px);
    Ok(out)
}

/// Read an 8-bit grayscale image (PNG or binary PGM, sniffed by content).
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        return parse_pgm(&bytes, path);
    }
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
    let luma = decoded.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_storage(w as usize, h as usize, luma.into_raw())
}

/// Write a storage-domain image; `.pgm` paths get binary PGM, anything else PNG.
pub fn write_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let px = img.expect_storage("write_image")?;
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        return std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e));
    }
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, px.to_vec())
        .ok_or_else(|| Error::Internal("raster size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, e.to_string()))
}

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        let img = GrayImage::from_storage(3, 1, vec![0, 255, 51]).unwrap();
        let n = normalize(&img).unwrap();
        assert_eq!(n.domain(), Domain::Compute);
        assert_eq!(n.compute().unwrap(), &[0.0, 1.0, 0.2]);
        let c = normalize(&GrayImage::from_storage(2, 2, vec![128; 4]).unwrap()).unwrap();
        assert!(c.compute().unwrap().iter().all(|&v| v == 128.0 / 255.0));
        assert!(normalize(&n).is_err(), "normalize must reject compute domain");
    }

    #[test]
    fn normalize_denormalize_identity() {
        let px: Vec<u8> = (0..=255).collect();
        let img = GrayImage::from_storage(16, 16, px).unwrap();
        assert_eq!(denormalize(&normalize(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn zero_sized_rejected() {
        assert!(GrayImage::from_storage(0, 3, vec![]).is_err());
    }

    #[test]
    fn resize_same_size_is_identity_and_constant_preserved() {
        let px: Vec<f32> = (0..12).map(|v| v as f32 / 11.0).collect();
        assert_eq!(resize_plane(&px, 4, 3, 4, 3), px);
        let c = resize_plane(&[0.25; 12], 4, 3, 7, 5);
        assert!(c.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_half_pixel_convention() {
        // 2 -> 4 upsample of [0, 1]: centers map to -0.25, 0.25, 0.75, 1.25
        let out = resize_plane(&[0.0, 1.0], 2, 1, 4, 1);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_fill_border() {
        let v = sample_bilinear(&[0.0; 4], 2, 2, -1.0, 0.0, Border::Fill(1.0));
        assert_eq!(v, 1.0);
        let v = sample_bilinear(&[0.0; 4], 2, 2, -0.5, 0.0, Border::Fill(1.0));
        assert_eq!(v, 0.5);
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..35).map(|v| (v * 7) as u8).collect();
        let img = GrayImage::from_storage(7, 5, px).unwrap();
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            write_image(&img, &p).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20]);
        std::fs::write(&p, bytes).unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!(img.storage().unwrap(), &[10, 20]);
    }
}
