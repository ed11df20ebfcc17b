//! Training and inference stages, checkpoints and run logs.

pub mod config;
pub mod metrics;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod teacher;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub use config::{FbdProjector, RunConfig, StageSchedule};
pub use metrics::{evaluate_miou, Confusion, MetricsReport};
pub use stage1::{train_stage1, Stage1Output};
pub use stage2::{generate_pseudo_masks, PseudoMaskRun};
pub use stage3::{load_segmenter, predict_masks, train_segmenter, SegmenterOutput};
pub use teacher::{pretrain_teacher, TeacherOutput};

use crate::encoders::{PhraseVocab, TextEncoder, VisualEncoder};
use crate::error::{CtdnError, Result};
use crate::nn::{AdamW, Archive, NamedArray, ParamStore};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEXT_CKPT: &str = "text.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const SEGMENTER_CKPT: &str = "segmenter.ckpt";

/// Model parameters plus optimizer moments, step counter and the config the
/// run used.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub archive: Archive,
}

impl Checkpoint {
    pub fn new(
        model: Archive,
        optimizer: Option<(&AdamW, &ParamStore)>,
        step: usize,
        config: &RunConfig,
    ) -> Self {
        let mut archive = model;
        archive.meta.insert("step".into(), step.to_string());
        archive.meta.insert("config".into(), config.to_text());
        archive
            .meta
            .insert("format".into(), CHECKPOINT_FORMAT.to_string());
        if let Some((opt, store)) = optimizer {
            archive.arrays.extend(opt.state_arrays(store));
        }
        Checkpoint { archive }
    }

    pub fn step(&self) -> usize {
        self.archive
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }

    pub fn config(&self) -> Result<Option<RunConfig>> {
        self.archive
            .meta
            .get("config")
            .map(|t| RunConfig::from_text(t))
            .transpose()
    }

    pub fn optimizer_state(&self) -> Vec<NamedArray> {
        self.archive
            .arrays
            .iter()
            .filter(|a| a.name.starts_with("adamw."))
            .cloned()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.archive.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        match archive.meta.get("format").map(String::as_str) {
            Some(f) if f == CHECKPOINT_FORMAT.to_string() => Ok(Checkpoint { archive }),
            other => Err(CtdnError::Format {
                path: path.to_path_buf(),
                msg: format!("checkpoint format {other:?}"),
            }),
        }
    }
}

pub fn load_visual(path: &Path) -> Result<VisualEncoder> {
    VisualEncoder::from_archive(&Checkpoint::load(path)?.archive)
}

pub fn load_text(path: &Path) -> Result<TextEncoder> {
    TextEncoder::from_archive(&Checkpoint::load(path)?.archive)
}

/// Appends one `key=value` line per training step.
pub struct StepLog {
    file: Option<fs::File>,
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl StepLog {
    /// Logs to `path` (truncated), or only in memory when `None`.
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(d) = p.parent() {
                    fs::create_dir_all(d).map_err(|e| CtdnError::io(d, e))?;
                }
                Some(fs::File::create(p).map_err(|e| CtdnError::io(p, e))?)
            }
            None => None,
        };
        Ok(StepLog {
            file,
            curves: BTreeMap::new(),
        })
    }

    pub fn record(&mut self, step: usize, values: &[(&str, f64)]) -> Result<()> {
        let mut line = format!("step={step}");
        for (k, v) in values {
            let _ = write!(line, " {k}={v:.6e}");
            self.curves.entry(k.to_string()).or_default().push(*v);
        }
        log::debug!("{line}");
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}").map_err(|e| CtdnError::io("step log", e))?;
        }
        Ok(())
    }
}

/// Parses a [`StepLog`] line into its step and named values.
pub fn parse_log_line(line: &str) -> Option<(usize, BTreeMap<String, f64>)> {
    let mut parts = line.split_whitespace();
    let step = parts.next()?.strip_prefix("step=")?.parse().ok()?;
    let mut out = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=')?;
        out.insert(k.to_string(), v.parse().ok()?);
    }
    Some((step, out))
}

/// Vocabulary ids of `phrases`.
pub fn phrase_ids(vocab: &PhraseVocab, phrases: &[String]) -> Result<Vec<usize>> {
    phrases.iter().map(|p| vocab.id(p)).collect()
}

pub fn run_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.run_dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_round_trip() {
        let mut log = StepLog::new(None).unwrap();
        log.record(3, &[("l_rel", 0.5), ("lr", 1e-4)]).unwrap();
        assert_eq!(log.curves["l_rel"], vec![0.5]);
        let (s, v) = parse_log_line("step=3 l_rel=5.000000e-1 lr=1.000000e-4").unwrap();
        assert_eq!(s, 3);
        assert_eq!(v["l_rel"], 0.5);
        assert!(parse_log_line("nonsense").is_none());
    }
}
