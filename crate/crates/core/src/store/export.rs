//! CSV and JSON exports stamped with the run's config hash and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub config_hash: String,
    pub seed: u64,
}

impl ExportMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Creates `path` with the meta comment line, then lets `body` write CSV.
pub fn write_csv<F>(path: &Path, meta: &ExportMeta, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(meta.comment().as_bytes())?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    meta: &'a ExportMeta,
    data: &'a T,
}

/// Pretty JSON `{"meta": ..., "data": ...}` with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, meta: &ExportMeta, data: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &Stamped { meta, data })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
