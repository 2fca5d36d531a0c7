//! Binary checkpoint format.
//!
//! ```text
//! "FPDN"                       4 bytes
//! version                      u32
//! config length, config        u32 + UTF-8 `key=value` lines
//! per parameter, in order:
//!   name length, name          u32 + UTF-8
//!   rank, extents              u32 + rank x u32
//!   values                     f32 x product(extents)
//! ```
//!
//! All integers and reals are little-endian. The parameter list is checked
//! against the shape table implied by the stored model config.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{OutputActivation, UNetConfig, UNetParams};

pub const MAGIC: &[u8; 4] = b"FPDN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: UNetParams<f32>,
    /// Free-form `meta.*` entries (e.g. best validation MAE, epoch).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn config(&self) -> &UNetConfig {
        self.params.config()
    }
}

pub fn config_entries(config: &UNetConfig) -> Vec<(String, String)> {
    vec![
        ("model.depth".into(), config.depth.to_string()),
        ("model.base_channels".into(), config.base_channels.to_string()),
        ("model.in_channels".into(), config.in_channels.to_string()),
        ("model.out_channels".into(), config.out_channels.to_string()),
        (
            "model.output_activation".into(),
            config.output_activation.as_str().into(),
        ),
    ]
}

fn parse_config(block: &str) -> Result<(UNetConfig, BTreeMap<String, String>), CheckpointError> {
    let mut config = UNetConfig::default();
    let mut seen = 0;
    let mut meta = BTreeMap::new();
    for line in block.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Config(format!("line without '=': {line:?}")))?;
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| CheckpointError::Config(format!("{key}: not an integer: {value:?}")))
        };
        match key {
            "model.depth" => config.depth = int()?,
            "model.base_channels" => config.base_channels = int()?,
            "model.in_channels" => config.in_channels = int()?,
            "model.out_channels" => config.out_channels = int()?,
            "model.output_activation" => {
                config.output_activation = OutputActivation::parse(value)
                    .ok_or_else(|| CheckpointError::Config(format!("unknown activation {value:?}")))?
            }
            k if k.starts_with("meta.") => {
                meta.insert(k["meta.".len()..].to_string(), value.to_string());
                continue;
            }
            other => return Err(CheckpointError::Config(format!("unknown key {other:?}"))),
        }
        seen += 1;
    }
    if seen != 5 {
        return Err(CheckpointError::Config(format!("expected 5 model keys, found {seen}")));
    }
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok((config, meta))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

/// Serialize parameters (stored as f32) with optional metadata.
pub fn encode_checkpoint<T: Scalar>(params: &UNetParams<T>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut block = String::new();
    for (k, v) in config_entries(params.config()) {
        block.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in meta {
        block.push_str(&format!("meta.{k}={v}\n"));
    }
    let mut out = Vec::with_capacity(16 + block.len() + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, block.len());
    out.extend_from_slice(block.as_bytes());
    for (name, t) in params.entries() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("config length")?;
    let block = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| CheckpointError::Config("config block is not UTF-8".into()))?;
    let (config, meta) = parse_config(block)?;

    let expected = config.param_shapes();
    let mut entries = Vec::with_capacity(expected.len());
    for (index, (want_name, want_shape)) in expected.iter().enumerate() {
        let what = format!("parameter {index} ({want_name})");
        let name_len = r.u32(&what)?;
        let name = String::from_utf8_lossy(r.take(name_len, &what)?).into_owned();
        if &name != want_name {
            return Err(CheckpointError::ShapeTable {
                index,
                msg: format!("expected {want_name}, found {name}"),
            });
        }
        let rank = r.u32(&what)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank.min(8) {
            shape.push(r.u32(&what)?);
        }
        if &shape != want_shape {
            return Err(CheckpointError::ShapeTable {
                index,
                msg: format!("{name}: expected extents {want_shape:?}, found {shape:?} (rank {rank})"),
            });
        }
        let count: usize = shape.iter().product();
        let raw = r.take(4 * count, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data).expect("count checked")));
    }
    if !r.done() {
        return Err(CheckpointError::ShapeTable {
            index: expected.len(),
            msg: format!("{} trailing bytes after the last parameter", bytes.len() - r.pos),
        });
    }
    let params = UNetParams::from_entries(config, entries).map_err(|e| CheckpointError::ShapeTable {
        index: 0,
        msg: e.to_string(),
    })?;
    Ok(Checkpoint { params, meta })
}

pub fn save_checkpoint<T: Scalar>(
    params: &UNetParams<T>,
    meta: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::build;

    fn sample() -> (UNetParams<f32>, BTreeMap<String, String>) {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 3,
            output_activation: OutputActivation::Linear,
            ..UNetConfig::default()
        };
        let mut meta = BTreeMap::new();
        meta.insert("best_val_mae".to_string(), "0.125".to_string());
        (build(&cfg, 17).unwrap(), meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &meta, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config(), p.config());
        assert_eq!(ck.meta, meta);
        for ((na, a), (nb, b)) in p.entries().iter().zip(ck.params.entries()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(encode_checkpoint(&ck.params, &ck.meta), std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_layout() {
        let (p, _) = sample();
        let bytes = encode_checkpoint(&p, &BTreeMap::new());
        assert_eq!(&bytes[..4], b"FPDN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let block = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert!(block.starts_with("model.depth=2\n"));
        let name_len = u32::from_le_bytes(bytes[12 + len..16 + len].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16 + len..16 + len + name_len], b"enc0.conv1.weight");
    }

    #[test]
    fn truncation_is_reported() {
        let (p, meta) = sample();
        let bytes = encode_checkpoint(&p, &meta);
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_checkpoint(cut), Err(CheckpointError::Truncated(_))));
        let err = decode_checkpoint(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(err.to_string().contains("truncated file"), "{err}");
    }

    #[test]
    fn wrong_magic() {
        let (p, meta) = sample();
        let mut bytes = encode_checkpoint(&p, &meta);
        bytes[0] = b'X';
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
        assert!(err.to_string().contains("not a checkpoint"));
        assert!(matches!(decode_checkpoint(b"FP"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_mismatch() {
        let (p, meta) = sample();
        let mut bytes = encode_checkpoint(&p, &meta);
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn shape_table_mismatch() {
        let (p, meta) = sample();
        let bytes = encode_checkpoint(&p, &meta);
        // claim a wider base width than the tensors that follow
        let key = b"model.base_channels=3";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len() - 1;
        let mut bad = bytes.clone();
        bad[at] = b'4';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::ShapeTable { index: 0, .. })
        ));

        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(CheckpointError::ShapeTable { .. })));
    }
}
