//! File helpers: atomic writes and the `key = value` text format shared by
//! stain profiles, color stats, descriptor sidecars and checkpoint metadata.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temp file in the same directory plus rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Reals are written with 17 significant digits so they parse back bit-exactly.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_reals(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_real(x)).collect::<Vec<_>>().join(" ")
}

/// Escape an identifier into a file-name-safe, injective form.
pub fn file_stem_for_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    // a leading dot would make hidden files and ".." is a path component
    if out.starts_with('.') {
        out.replace_range(0..1, "%2E");
    }
    out
}

/// Ordered `key = value` document. Lines starting with `#` are comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    order: Vec<String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        if self.entries.insert(key.to_string(), value.into()).is_none() {
            self.order.push(key.to_string());
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in &self.order {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&self.entries[k]);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(origin, format!("line {}: expected `key = value`", i + 1))
            })?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_string(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn require(&self, key: &str, origin: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(origin, format!("missing key `{key}`")))
    }

    pub fn reals(&self, key: &str, origin: &Path) -> Result<Vec<f64>> {
        self.require(key, origin)?
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(origin, format!("key `{key}`: bad real {t:?}")))
            })
            .collect()
    }

    pub fn reals_n<const N: usize>(&self, key: &str, origin: &Path) -> Result<[f64; N]> {
        let v = self.reals(key, origin)?;
        v.as_slice().try_into().map_err(|_| {
            Error::parse(
                origin,
                format!("key `{key}`: expected {N} values, found {}", v.len()),
            )
        })
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str, origin: &Path) -> Result<T> {
        let raw = self.require(key, origin)?;
        raw.parse::<T>()
            .map_err(|_| Error::parse(origin, format!("key `{key}`: cannot parse {raw:?}")))
    }
}
