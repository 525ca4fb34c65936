use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "MANIFEST";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Output directory of one run. Every file written through it is listed in
/// the MANIFEST, in `sha256sum` format, with a `#` header carrying the status.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
    stage: String,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            stage: "start".into(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stage(&mut self, name: &str) {
        log::info!("stage: {name}");
        self.stage = name.into();
    }

    /// Registers a file (relative to the run directory) for the MANIFEST.
    pub fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io(&p, e))?;
        self.record(name);
        Ok(())
    }

    pub fn write_csv<T: serde::Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        }
        w.flush().map_err(|e| io(&p, e))?;
        self.record(name);
        Ok(())
    }

    /// Writes the MANIFEST; `failure` marks the stage and error that stopped
    /// the run, leaving whatever was already written in place.
    pub fn finish(&self, failure: Option<&CliError>) -> Result<(), CliError> {
        let p = self.path(MANIFEST);
        let mut out = Vec::new();
        match failure {
            None => writeln!(out, "# status: ok"),
            Some(e) => writeln!(
                out,
                "# status: failed\n# stage: {}\n# error: {}",
                self.stage,
                e.to_string().replace('\n', " ")
            ),
        }
        .expect("write to Vec");
        for f in &self.files {
            writeln!(out, "{}  {f}", sha256_file(&self.path(f))?).expect("write to Vec");
        }
        fs::write(&p, out).map_err(|e| io(&p, e))
    }
}

/// Manifest entries that no longer match, as `(file, reason)`.
pub fn verify(dir: &Path) -> Result<Vec<(String, String)>, CliError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
    let mut bad = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| CliError::Io(format!("{}: malformed line '{line}'", p.display())))?;
        match sha256_file(&dir.join(name)) {
            Ok(h) if h == hash => {}
            Ok(_) => bad.push((name.to_string(), "hash mismatch".to_string())),
            Err(e) => bad.push((name.to_string(), e.to_string())),
        }
    }
    Ok(bad)
}
