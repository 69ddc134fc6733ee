//! Checkpoint files: a JSON document holding metadata and a list of named
//! real arrays. Array data is base64-encoded little-endian `f64`, so values
//! round-trip bit-exactly.
//!
//! ```json
//! {
//!   "format": "dmmimo-checkpoint",
//!   "version": 1,
//!   "meta": { "kind": "feed_forward", ... },
//!   "arrays": [ { "name": "layer0.weight", "shape": [256, 70], "dtype": "f64le", "data": "..." } ]
//! }
//! ```

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT: &str = "dmmimo-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    meta: Map<String, Value>,
    arrays: Vec<ArrayRecord>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing string field `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Checkpoint(format!("missing number field `{key}`")))
    }

    pub fn meta_usizes(&self, key: &str) -> Result<Vec<usize>> {
        self.meta
            .get(key)
            .and_then(Value::as_array)
            .and_then(|v| v.iter().map(|x| x.as_u64().map(|u| u as usize)).collect())
            .ok_or_else(|| Error::Checkpoint(format!("missing integer list `{key}`")))
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| {
                    let bytes: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                    ArrayRecord {
                        name: a.name.clone(),
                        shape: a.shape.clone(),
                        dtype: "f64le".into(),
                        data: STANDARD.encode(bytes),
                    }
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                doc.format, doc.version
            )));
        }
        let arrays = doc
            .arrays
            .into_iter()
            .map(|r| {
                if r.dtype != "f64le" {
                    return Err(Error::Checkpoint(format!("array `{}`: dtype {}", r.name, r.dtype)));
                }
                let bytes = STANDARD
                    .decode(r.data.as_bytes())
                    .map_err(|e| Error::Checkpoint(format!("array `{}`: {e}", r.name)))?;
                let expected = r.shape.iter().product::<usize>();
                if bytes.len() != expected * 8 {
                    return Err(Error::Checkpoint(format!(
                        "array `{}`: {} bytes for shape {:?}",
                        r.name,
                        bytes.len(),
                        r.shape
                    )));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(NamedArray {
                    name: r.name,
                    shape: r.shape,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta: doc.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
