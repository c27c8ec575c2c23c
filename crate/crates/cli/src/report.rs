//! Run reports and the files they describe.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use atomshadow_core::image::{save_image, ImageFormat, ImageGrid, Sidecar};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Everything a run did. `timings` is the only field that changes between
/// identical runs.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub results: Value,
    pub warnings: Vec<String>,
    pub timings: Vec<(String, f64)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects outputs under one directory and writes the report last.
pub struct RunWriter {
    dir: PathBuf,
    report: RunReport,
    started: Instant,
}

impl RunWriter {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let dir = config.output_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            report: RunReport {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: config.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                results: Value::Null,
                warnings: Vec::new(),
                timings: Vec::new(),
            },
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.report.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        if ImageFormat::from_path(path).ok() == Some(ImageFormat::F32) {
            let sidecar = Sidecar::path_for(path);
            if sidecar.exists() {
                self.input(&sidecar)?;
            }
        }
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let sha256 = sha256_file(&self.dir.join(name))?;
        self.report.outputs.push(FileEntry {
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    /// Saves `image` as `<stem>.<ext>` in the run directory.
    pub fn image(&mut self, stem: &str, image: &ImageGrid, format: ImageFormat) -> Result<PathBuf> {
        let name = format!("{stem}.{}", format.extension());
        let path = self.dir.join(&name);
        save_image(image, &path, format)?;
        self.record(&name)?;
        if format == ImageFormat::F32 {
            let sidecar = Sidecar::path_for(&path);
            let sidecar_name = sidecar
                .file_name()
                .expect("sidecar has a name")
                .to_string_lossy()
                .to_string();
            self.record(&sidecar_name)?;
        }
        Ok(path)
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        self.record(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        self.record(name)
    }

    pub fn results(&mut self, value: impl Serialize) -> Result<()> {
        self.report.results = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.report.warnings.push(message);
    }

    pub fn time(&mut self, stage: impl Into<String>, seconds: f64) {
        self.report.timings.push((stage.into(), seconds));
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let total = self.started.elapsed().as_secs_f64();
        self.report.timings.push(("total".into(), total));
        let path = self.dir.join(REPORT_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
