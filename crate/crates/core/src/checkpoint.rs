//! Trained remover + classifier state and its on-disk format.
//!
//! Layout: the 8-byte magic `DPSTYLR1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the `W1`, `W2` and `head` arrays as
//! little-endian IEEE-754 `f32` in the order and at the offsets the header's
//! array manifest lists.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::embedding::PromptTemplate;
use crate::error::{io_err, Error, Result};
use crate::losses::ClassifierHead;
use crate::matrix::Matrix;
use crate::remover::StyleRemoverParams;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DPSTYLR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub remover: StyleRemoverParams<T>,
    pub head: ClassifierHead<T>,
    pub template: PromptTemplate,
    pub class_names: Vec<String>,
    pub backend: BackendDescriptor,
    pub config: TrainConfig,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    c: usize,
    d: usize,
    r: usize,
    m: usize,
    template_id: String,
    template_pattern: String,
    class_names: Vec<String>,
    backend_variant: String,
    seed: u64,
    config: TrainConfig,
    arrays: Vec<ArrayEntry>,
}

const ARRAY_NAMES: [&str; 3] = ["W1", "W2", "head"];

impl<T: Scalar> Checkpoint<T> {
    pub fn dim(&self) -> usize {
        self.remover.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = [
            self.remover.w1.as_slice(),
            self.remover.w2.as_slice(),
            self.head.weights.as_slice(),
        ];
        let shapes = [
            self.remover.w1.shape(),
            self.remover.w2.shape(),
            self.head.weights.shape(),
        ];
        let mut entries = Vec::with_capacity(3);
        let mut offset = 0;
        for ((name, data), (rows, cols)) in ARRAY_NAMES.iter().zip(arrays).zip(shapes) {
            let length = data.len() * 4;
            entries.push(ArrayEntry {
                name: (*name).into(),
                shape: [rows, cols],
                offset,
                length,
            });
            offset += length;
        }
        let header = Header {
            format_version: self.format_version,
            c: self.backend.c,
            d: self.backend.d,
            r: self.remover.ratio,
            m: self.class_names.len(),
            template_id: self.template.id().into(),
            template_pattern: self.template.pattern().into(),
            class_names: self.class_names.clone(),
            backend_variant: self.backend.variant.clone(),
            seed: self.config.seed,
            config: self.config.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for data in arrays {
            for x in data {
                out.extend_from_slice(&x.to_f32().expect("f32 representable").to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 {
            return Err(fail(format!(
                "file is {} bytes, too short for a header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("bad magic, not a checkpoint file".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if header_len > body.len() {
            return Err(fail(format!(
                "header claims {header_len} bytes but only {} remain (truncated)",
                body.len()
            )));
        }
        let (header_bytes, data) = body.split_at(header_len);
        let value: serde_json::Value =
            serde_json::from_slice(header_bytes).map_err(|e| fail(format!("malformed header: {e}")))?;
        let version = value.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(FORMAT_VERSION)) {
            let found = value
                .get("format_version")
                .map_or_else(|| "none".to_string(), ToString::to_string);
            return Err(fail(format!(
                "unsupported format version {found} (this build reads {FORMAT_VERSION})"
            )));
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| fail(format!("malformed header: {e}")))?;

        let hidden = if header.r == 0 { 0 } else { header.c / header.r };
        let expected = [[header.c, hidden], [hidden, header.c], [header.m, header.c]];
        if header.arrays.len() != 3 {
            return Err(fail(format!("expected 3 arrays, found {}", header.arrays.len())));
        }
        if header.class_names.len() != header.m {
            return Err(fail(format!(
                "header lists {} class names but m = {}",
                header.class_names.len(),
                header.m
            )));
        }
        let mut total = 0;
        let mut mats = Vec::with_capacity(3);
        for ((entry, name), shape) in header.arrays.iter().zip(ARRAY_NAMES).zip(expected) {
            if entry.name != name {
                return Err(fail(format!("expected array {name}, found {}", entry.name)));
            }
            if entry.shape != shape {
                return Err(fail(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    entry.shape, shape
                )));
            }
            if entry.length != shape[0] * shape[1] * 4 || entry.offset != total {
                return Err(fail(format!("array {name} has inconsistent offset or length")));
            }
            let end = entry.offset + entry.length;
            if end > data.len() {
                return Err(fail(format!(
                    "array {name} needs bytes up to {end} but data section has {} (truncated)",
                    data.len()
                )));
            }
            let values = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect();
            mats.push(Matrix::from_vec(shape[0], shape[1], values)?);
            total = end;
        }
        if total != data.len() {
            return Err(fail(format!(
                "{} trailing bytes after the arrays",
                data.len() - total
            )));
        }
        let head_w = mats.pop().expect("three arrays");
        let w2 = mats.pop().expect("three arrays");
        let w1 = mats.pop().expect("three arrays");
        let remover = StyleRemoverParams::from_matrices(w1, w2, header.r).map_err(|e| fail(e.to_string()))?;
        let head = ClassifierHead::new(head_w).map_err(|e| fail(e.to_string()))?;
        let template = PromptTemplate::new(header.template_id, header.template_pattern)
            .map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            remover,
            head,
            template,
            class_names: header.class_names,
            backend: BackendDescriptor {
                c: header.c,
                d: header.d,
                variant: header.backend_variant,
            },
            config: header.config,
            format_version: header.format_version,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn sample() -> Checkpoint<f32> {
        let mut rng = stream_rng(3, Stream::HeadInit, 0);
        Checkpoint {
            remover: StyleRemoverParams::init(16, 4, &mut rng).unwrap(),
            head: ClassifierHead::init(3, 16, &mut rng).unwrap(),
            template: PromptTemplate::from_pattern("a [class] in a S* style").unwrap(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
            backend: BackendDescriptor {
                c: 16,
                d: 8,
                variant: "toy".into(),
            },
            config: TrainConfig::default(),
            format_version: FORMAT_VERSION,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.remover.w1), bits(&c.remover.w1));
        assert_eq!(bits(&back.head.weights), bits(&c.head.weights));
        assert_eq!(&std::fs::read(&path).unwrap()[..8], MAGIC);
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes();
        let path = Path::new("t.ckpt");
        let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..20], path).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..5], path).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra, path).is_err());
    }

    #[test]
    fn unknown_version_named() {
        let mut c = sample();
        c.format_version = 7;
        let err = Checkpoint::<f32>::from_bytes(&c.to_bytes(), Path::new("v.ckpt")).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn bad_magic_and_shapes() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bytes, Path::new("m")).is_err());

        let c = sample();
        let good = c.to_bytes();
        let len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&good[12..12 + len]).unwrap();
        let tampered = header.replace("\"r\":4", "\"r\":2");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        bytes.extend_from_slice(tampered.as_bytes());
        bytes.extend_from_slice(&good[12 + len..]);
        let err = Checkpoint::<f32>::from_bytes(&bytes, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
