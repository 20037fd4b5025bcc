//! Run directories: manifest, config snapshot, JSON-lines logs, checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pbmorl_core::eql::{MetricRecord, RunArtifacts, RunEvent, RunHooks, RunStatus};
use pbmorl_core::envs::EnvKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, TeacherMode};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const EVENTS: &str = "events.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const SUMMARY: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub env: EnvKind,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub teacher: TeacherMode,
    pub oracle: bool,
    /// SHA-256 of the config snapshot.
    pub config_hash: String,
    pub version: String,
    /// Base URL of the preference service, for `serve`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_completed: usize,
    pub preferences: usize,
    pub queries_issued: u64,
    pub stopped_early: bool,
    pub eu: Option<f64>,
    pub hv: Option<f64>,
}

impl RunSummary {
    pub fn of(run: &RunArtifacts) -> Self {
        let last = run.metrics.last();
        RunSummary {
            steps_completed: run.steps_completed,
            preferences: run.preferences,
            queries_issued: run.queries_issued,
            stopped_early: run.stopped_early,
            eu: last.map(|m| m.eu),
            hv: last.map(|m| m.hv),
        }
    }
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes via a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, body: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `path`; an existing non-empty directory is replaced only with `force`.
    pub fn create(path: &Path, force: bool) -> anyhow::Result<Self> {
        let occupied = path.exists() && (path.is_file() || fs::read_dir(path)?.next().is_some());
        if occupied {
            if !force {
                bail!("output directory {} already exists; pass --force to overwrite it", path.display());
            }
            if path.is_file() {
                bail!("{} is a file, not a directory", path.display());
            }
            fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the config snapshot and manifest; returns the manifest.
    pub fn start(&self, command: &str, cfg: &RunConfig, config_path: Option<&Path>, endpoint: Option<String>) -> anyhow::Result<RunManifest> {
        let snapshot = cfg.to_toml()?;
        write_atomic(&self.file(CONFIG), &snapshot)?;
        let manifest = RunManifest {
            command: command.to_string(),
            env: cfg.env,
            config_path: config_path.map(Path::to_path_buf),
            seed: cfg.seed,
            output_dir: self.path.clone(),
            teacher: cfg.teacher,
            oracle: cfg.oracle,
            config_hash: sha256_hex(&snapshot),
            version: env!("CARGO_PKG_VERSION").to_string(),
            endpoint,
        };
        write_atomic(&self.file(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn finish(&self, run: &RunArtifacts) -> anyhow::Result<RunSummary> {
        let summary = RunSummary::of(run);
        write_atomic(&self.file(SUMMARY), &serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    }
}

/// Streams metrics and events to JSON-lines files and progress to the log.
pub struct FileHooks {
    metrics: BufWriter<File>,
    events: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl FileHooks {
    pub fn new(dir: &RunDir) -> anyhow::Result<Self> {
        let open = |name: &str| -> anyhow::Result<BufWriter<File>> {
            let p = dir.file(name);
            Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
        };
        Ok(FileHooks {
            metrics: open(METRICS)?,
            events: open(EVENTS)?,
            error: None,
        })
    }

    fn line<T: Serialize>(out: &mut BufWriter<File>, value: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, value)?;
        out.write_all(b"\n")?;
        out.flush()
    }

    fn keep(&mut self, r: std::io::Result<()>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }

    /// The first write error, if any.
    pub fn close(mut self) -> anyhow::Result<()> {
        let a = self.metrics.flush();
        let b = self.events.flush();
        if let Some(e) = self.error.take() {
            return Err(e).context("writing run logs");
        }
        a.and(b).context("writing run logs")
    }
}

impl RunHooks for FileHooks {
    fn on_event(&mut self, event: &RunEvent) {
        match event {
            RunEvent::Feedback {
                step,
                labels,
                preferences,
                report,
                ..
            } => {
                let acc = report
                    .as_ref()
                    .and_then(|r| r.train_accuracy)
                    .map_or("n/a".to_string(), |a| format!("{:.1}%", 100.0 * a));
                log::info!("step {step}: {labels} labels in, {preferences} preferences total, reward-model accuracy {acc}");
            }
            RunEvent::FeedbackSkipped { step, reason } => log::info!("step {step}: reward update skipped ({reason})"),
            RunEvent::Stopped { step } => log::warn!("stopped at step {step}"),
            RunEvent::Evaluation { .. } => {}
        }
        let r = Self::line(&mut self.events, event);
        self.keep(r);
    }

    fn on_metric(&mut self, record: &MetricRecord) {
        log::info!("step {}: eu {:.4} hv {:.4}", record.step, record.eu, record.hv);
        let r = Self::line(&mut self.metrics, record);
        self.keep(r);
    }
}

/// Forwards to both hooks; stops when either asks.
pub struct Both<'a>(pub &'a mut dyn RunHooks, pub &'a mut dyn RunHooks);

impl RunHooks for Both<'_> {
    fn on_event(&mut self, e: &RunEvent) {
        self.0.on_event(e);
        self.1.on_event(e);
    }

    fn on_metric(&mut self, r: &MetricRecord) {
        self.0.on_metric(r);
        self.1.on_metric(r);
    }

    fn on_status(&mut self, s: &RunStatus) {
        self.0.on_status(s);
        self.1.on_status(s);
    }

    fn should_stop(&mut self) -> bool {
        self.0.should_stop() | self.1.should_stop()
    }
}
