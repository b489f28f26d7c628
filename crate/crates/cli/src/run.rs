//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hsenet::error::{Error, Result};
use hsenet::eval::MetricReport;
use hsenet::train::LossLog;
use hsenet::Config;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_FILE: &str = "loss.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Everything needed to re-run a command. Holds no wall-clock data, so two
/// runs of the same command agree byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub preset: String,
    pub config_hash: String,
    pub seed: u64,
    pub lambda_s: f64,
    pub tau_init: f64,
    pub lr: f64,
    pub epochs: BTreeMap<String, usize>,
    pub config: String,
    pub corpus: Option<String>,
    pub corpus_manifest_sha256: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, cfg: &Config) -> Self {
        let epochs = [
            ("stage1", cfg.stage1_epochs),
            ("stage2", cfg.stage2_epochs),
            ("lm", cfg.lm_epochs),
            ("report", cfg.report_epochs),
            ("vqa", cfg.vqa_epochs),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            command: command.to_string(),
            argv,
            preset: cfg.preset.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            lambda_s: cfg.lambda_s,
            tau_init: cfg.tau_init,
            lr: cfg.lr,
            epochs,
            config: cfg.to_text(),
            corpus: None,
            corpus_manifest_sha256: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_metrics(&mut self, report: &MetricReport) -> Result<()> {
        report.validate()?;
        for (k, v) in &report.values {
            self.metrics.insert(format!("{}.{k}", report.task), *v);
        }
        Ok(())
    }
}

/// A freshly created `<root>/<config hash>-<UTC timestamp>` directory; the
/// timestamp has millisecond resolution.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let stem = format!("{}-{}", manifest.config_hash, chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ"));
        let mut path = root.join(&stem);
        let mut k = 1;
        loop {
            match std::fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    k += 1;
                    path = root.join(format!("{stem}-{k}"));
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        let run = Self { path, manifest };
        run.write(CONFIG_FILE, run.manifest.config.as_bytes())?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    /// Records the hash of an artifact already written inside the run.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let h = sha256_file(&self.file(name))?;
        self.manifest.outputs.insert(name.to_string(), h);
        Ok(())
    }

    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write(name, bytes)?;
        self.record(name)
    }

    pub fn write_losses(&mut self, log: &LossLog) -> Result<()> {
        self.write_output(LOSS_FILE, log.to_jsonl()?.as_bytes())
    }

    pub fn write_metrics(&mut self, reports: &[MetricReport]) -> Result<()> {
        for r in reports {
            self.manifest.add_metrics(r)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest.metrics)?;
        self.write_output(METRICS_FILE, json.as_bytes())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        self.write(MANIFEST_FILE, json.as_bytes())?;
        Ok(self.path)
    }
}
