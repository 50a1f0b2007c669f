//! On-disk container: a UTF-8 text header paired with a raw payload file.
//!
//! The header holds one `key = value` pair per line: `shape`, `spacing`,
//! `origin`, `kind`, `channels`, `dtype` (f32 or u8), `byte_order` (always
//! little), `payload` (payload filename, resolved relative to the header),
//! and `classes` for label data. The payload is the array in C order
//! (last index fastest), little-endian. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "mpseg-container-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub kind: String,
    /// Declared class count K for label data; labels must lie in 0..=K.
    pub classes: Option<u8>,
    pub channels: usize,
    pub dtype: Dtype,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::U8(_) => Dtype::U8,
        }
    }
}

fn join_nums<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Derive the default payload filename for a header path: same stem, `.raw`.
pub fn default_payload_name(header_path: &Path) -> String {
    let stem = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    format!("{stem}.raw")
}

/// Write header + payload. `header.payload` names the payload file,
/// created next to the header.
pub fn write(header_path: &Path, header: &Header, payload: &Payload) -> Result<()> {
    let expected: usize = header.shape.iter().product::<usize>() * header.channels;
    if payload.len() != expected {
        return Err(Error::data(format!(
            "payload length {} does not match shape {:?} x channels {}",
            payload.len(),
            header.shape,
            header.channels
        )));
    }
    if payload.dtype() != header.dtype {
        return Err(Error::data("payload dtype does not match header dtype"));
    }
    if header.shape.len() != header.spacing.len() || header.shape.len() != header.origin.len() {
        return Err(Error::data(
            "shape, spacing, and origin must have the same rank",
        ));
    }

    let mut text = String::new();
    text.push_str(&format!("format = {FORMAT_TAG}\n"));
    text.push_str(&format!("shape = {}\n", join_nums(&header.shape)));
    text.push_str(&format!("spacing = {}\n", join_nums(&header.spacing)));
    text.push_str(&format!("origin = {}\n", join_nums(&header.origin)));
    text.push_str(&format!("kind = {}\n", header.kind));
    if let Some(k) = header.classes {
        text.push_str(&format!("classes = {k}\n"));
    }
    text.push_str(&format!("channels = {}\n", header.channels));
    text.push_str(&format!("dtype = {}\n", header.dtype.name()));
    text.push_str("byte_order = little\n");
    text.push_str(&format!("payload = {}\n", header.payload));

    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;

    let payload_path = dir.join(&header.payload);
    let bytes = match payload {
        Payload::F32(v) => {
            let mut b = Vec::with_capacity(v.len() * 4);
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
            b
        }
        Payload::U8(v) => v.clone(),
    };
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    Ok(())
}

fn parse_usizes(val: &str, key: &str, path: &Path) -> Result<Vec<usize>> {
    val.split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|_| {
                Error::data(format!(
                    "malformed header {}: key '{key}' has non-integer token '{t}'",
                    path.display()
                ))
            })
        })
        .collect()
}

fn parse_f64s(val: &str, key: &str, path: &Path) -> Result<Vec<f64>> {
    val.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                Error::data(format!(
                    "malformed header {}: key '{key}' has non-numeric token '{t}'",
                    path.display()
                ))
            })
        })
        .collect()
}

/// Read header + payload from a header path.
pub fn read(header_path: &Path) -> Result<(Header, Payload)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let mut shape = None;
    let mut spacing = None;
    let mut origin = None;
    let mut kind = None;
    let mut classes = None;
    let mut channels = None;
    let mut dtype = None;
    let mut byte_order = None;
    let mut payload_name = None;
    let mut format_tag = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, val)) = line.split_once('=') else {
            return Err(Error::data(format!(
                "malformed header {}: line {} has no '=': '{line}'",
                header_path.display(),
                lineno + 1
            )));
        };
        let key = key.trim();
        let val = val.trim();
        match key {
            "format" => format_tag = Some(val.to_string()),
            "shape" => shape = Some(parse_usizes(val, key, header_path)?),
            "spacing" => spacing = Some(parse_f64s(val, key, header_path)?),
            "origin" => origin = Some(parse_f64s(val, key, header_path)?),
            "kind" => kind = Some(val.to_string()),
            "classes" => {
                classes = Some(val.parse::<u8>().map_err(|_| {
                    Error::data(format!(
                        "malformed header {}: classes '{val}' not a u8",
                        header_path.display()
                    ))
                })?)
            }
            "channels" => {
                channels = Some(val.parse::<usize>().map_err(|_| {
                    Error::data(format!(
                        "malformed header {}: channels '{val}' not an integer",
                        header_path.display()
                    ))
                })?)
            }
            "dtype" => {
                dtype = Some(match val {
                    "f32" => Dtype::F32,
                    "u8" => Dtype::U8,
                    other => {
                        return Err(Error::data(format!(
                            "malformed header {}: unsupported dtype '{other}' (expected f32 or u8)",
                            header_path.display()
                        )))
                    }
                })
            }
            "byte_order" => byte_order = Some(val.to_string()),
            "payload" => payload_name = Some(val.to_string()),
            other => {
                return Err(Error::data(format!(
                    "malformed header {}: unknown key '{other}'",
                    header_path.display()
                )))
            }
        }
    }

    if format_tag.as_deref() != Some(FORMAT_TAG) {
        return Err(Error::data(format!(
            "malformed header {}: missing or wrong format tag (expected '{FORMAT_TAG}')",
            header_path.display()
        )));
    }
    if byte_order.as_deref() != Some("little") {
        return Err(Error::data(format!(
            "malformed header {}: byte_order must be 'little'",
            header_path.display()
        )));
    }
    let missing = |k: &str| {
        Error::data(format!(
            "malformed header {}: missing key '{k}'",
            header_path.display()
        ))
    };
    let header = Header {
        shape: shape.ok_or_else(|| missing("shape"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
        origin: origin.ok_or_else(|| missing("origin"))?,
        kind: kind.ok_or_else(|| missing("kind"))?,
        classes,
        channels: channels.ok_or_else(|| missing("channels"))?,
        dtype: dtype.ok_or_else(|| missing("dtype"))?,
        payload: payload_name.ok_or_else(|| missing("payload"))?,
    };
    if header.shape.len() != header.spacing.len() || header.shape.len() != header.origin.len() {
        return Err(Error::data(format!(
            "malformed header {}: shape/spacing/origin ranks differ",
            header_path.display()
        )));
    }
    if header.channels == 0 || header.shape.iter().any(|&d| d == 0) {
        return Err(Error::data(format!(
            "malformed header {}: zero-sized dimension",
            header_path.display()
        )));
    }

    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let payload_path = dir.join(&header.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected: usize = header.shape.iter().product::<usize>() * header.channels;
    if bytes.len() != expected * header.dtype.size() {
        return Err(Error::data(format!(
            "payload {} has {} bytes, expected {} ({:?} x {} channels x {} bytes)",
            payload_path.display(),
            bytes.len(),
            expected * header.dtype.size(),
            header.shape,
            header.channels,
            header.dtype.size()
        )));
    }
    let payload = match header.dtype {
        Dtype::F32 => {
            let mut v = Vec::with_capacity(expected);
            for chunk in bytes.chunks_exact(4) {
                v.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            Payload::F32(v)
        }
        Dtype::U8 => Payload::U8(bytes),
    };
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.vhdr");
        let header = Header {
            shape: vec![2, 3, 4],
            spacing: vec![1.0, 0.5, 2.25],
            origin: vec![-1.5, 0.0, 3.0],
            kind: "intensity".into(),
            classes: None,
            channels: 1,
            dtype: Dtype::F32,
            payload: default_payload_name(&path),
        };
        let vals: Vec<f32> = (0..24).map(|i| (i as f32).sin() * 1e-3 + i as f32).collect();
        write(&path, &header, &Payload::F32(vals.clone())).unwrap();
        let (h2, p2) = read(&path).unwrap();
        assert_eq!(h2, header);
        match p2 {
            Payload::F32(v) => {
                assert_eq!(v.len(), vals.len());
                for (a, b) in v.iter().zip(vals.iter()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("wrong payload dtype"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected_with_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.vhdr");
        let header = Header {
            shape: vec![2, 2, 2],
            spacing: vec![1.0; 3],
            origin: vec![0.0; 3],
            kind: "label".into(),
            classes: Some(1),
            channels: 1,
            dtype: Dtype::U8,
            payload: "lab.raw".into(),
        };
        write(&path, &header, &Payload::U8(vec![0; 8])).unwrap();
        std::fs::write(dir.path().join("lab.raw"), [0u8; 5]).unwrap();
        let err = read(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("5 bytes"), "diagnostic should name actual size: {msg}");
        assert!(msg.contains("expected 8"), "diagnostic should name expected size: {msg}");
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vhdr");
        std::fs::write(&path, "format = mpseg-container-v1\nshape 2 2 2\n").unwrap();
        assert!(read(&path).is_err());
    }
}
