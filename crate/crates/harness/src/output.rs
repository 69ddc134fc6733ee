//! Output files. Every CSV starts with a `#` line carrying the config
//! hash, master seed, tool version and a hash of the file body; JSON files
//! carry the same fields in a top-level `provenance` object.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dmmimo_core::checkpoint::Checkpoint;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{HarnessError, Result};

pub const TOOL_VERSION: &str = concat!("dmmimo ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

/// First 16 hex digits of the SHA-256 of `body`.
pub fn content_version(body: &str) -> String {
    hex(&Sha256::digest(body.as_bytes()))[..16].to_string()
}

impl Provenance {
    pub fn header_line(&self, body: &str) -> String {
        format!(
            "# {TOOL_VERSION} config_sha256={} seed={} content={}\n",
            self.config_sha256,
            self.seed,
            content_version(body)
        )
    }

    pub fn to_json(&self, body: &str) -> Value {
        json!({
            "tool": TOOL_VERSION,
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "content": content_version(body),
        })
    }
}

/// Formats a float so the text round-trips; infinities print as `inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn body(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_csv(path: &Path, prov: &Provenance, table: &Table) -> Result<()> {
    let body = table.body();
    let text = prov.header_line(&body) + &body;
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes `value` (an object) pretty-printed with a `provenance` key added.
/// Keys come out sorted.
pub fn write_json(path: &Path, prov: &Provenance, value: Value) -> Result<()> {
    let body = serde_json::to_string(&value).expect("json serializes");
    let mut doc = Map::new();
    doc.insert("provenance".into(), prov.to_json(&body));
    match value {
        Value::Object(m) => doc.extend(m),
        other => {
            doc.insert("value".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc)).expect("json serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// JSON numbers cannot hold infinities; they become the strings `inf`/`-inf`.
pub fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_f64(v))
    }
}

pub fn save_checkpoint(path: &Path, prov: &Provenance, mut ck: Checkpoint) -> Result<()> {
    let body = ck.to_json();
    ck.meta.insert("provenance".into(), prov.to_json(&body));
    ck.save(path).map_err(HarnessError::from)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

/// Fixed file names inside the output directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn codec_stage1(&self) -> PathBuf {
        self.file("codec_stage1.json")
    }

    pub fn codec_stage3(&self) -> PathBuf {
        self.file("codec_stage3.json")
    }

    pub fn predictor(&self) -> PathBuf {
        self.file("predictor.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            config_sha256: "ab".repeat(32),
            seed: 3,
        }
    }

    #[test]
    fn csv_has_header_comment_and_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1".into(), fmt_f64(f64::INFINITY)]);
        let path = dir.path().join("x.csv");
        write_csv(&path, &prov(), &t).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let head = lines.next().unwrap();
        assert!(head.starts_with("# dmmimo "));
        assert!(head.contains("seed=3"));
        assert!(head.contains(&format!("content={}", content_version("a,b\n1,inf\n"))));
        assert_eq!(lines.collect::<Vec<_>>(), vec!["a,b", "1,inf"]);
    }

    #[test]
    fn json_carries_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json(&path, &prov(), json!({"z": 1, "a": json_f64(f64::NEG_INFINITY)})).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj["provenance"]["seed"], 3);
        assert_eq!(obj["z"], 1);
        assert_eq!(obj["a"], "-inf");
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, 1e-300, 3.5, -2.0 / 3.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let err = load_checkpoint(Path::new("/nonexistent/ck.json")).unwrap_err();
        assert_eq!(err.kind(), "missing_checkpoint");
    }
}
