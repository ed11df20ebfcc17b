//! Flat `key = value` run configuration with dotted sections.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cam::AssembleParams;
use crate::crf::CrfParams;
use crate::error::{CtdnError, Result};
use crate::losses::{KlOrder, LossWeights};
use crate::nn::{SegmenterConfig, TextConfig, VitConfig};

/// Which frozen projector partitions tokens for the decoupling loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbdProjector {
    /// Copy of the student head taken at the start of every epoch.
    Snapshot,
    /// The teacher's head.
    Teacher,
}

impl FromStr for FbdProjector {
    type Err = CtdnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snapshot" => Ok(FbdProjector::Snapshot),
            "teacher" => Ok(FbdProjector::Teacher),
            other => Err(CtdnError::Config(format!(
                "unknown fbd projector `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for FbdProjector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FbdProjector::Snapshot => "snapshot",
            FbdProjector::Teacher => "teacher",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,

    pub vit: VitConfig,
    pub text: TextConfig,

    pub teacher: StageSchedule,
    pub train: StageSchedule,
    pub weight_decay: f32,
    pub poly_power: f32,
    /// Crop side in dataset pixels; crops are resized to `image_size`.
    pub crop: usize,
    /// Stop stage 1 after this many optimizer steps (0 = no limit).
    pub max_steps: usize,

    pub loss: LossWeights,
    pub kl_order: KlOrder,
    pub fbd_projector: FbdProjector,

    pub tau_box: f64,
    pub assemble: AssembleParams,
    pub last_k: usize,
    pub identity_affinity: bool,
    pub use_box: bool,
    pub cam_dump_dir: Option<PathBuf>,
    pub sinkhorn_tol: f64,
    pub sinkhorn_iters: usize,
    pub crf: CrfParams,

    pub seg: StageSchedule,
    pub segmenter: SegmenterConfig,
    pub seg_use_gt: bool,
    /// Train images used for stage 3 (0 = all).
    pub seg_train_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            n_train: 500,
            n_val: 100,
            image_size: 96,
            vit: VitConfig::default(),
            text: TextConfig::default(),
            teacher: StageSchedule {
                epochs: 20,
                lr: 5e-4,
                batch_size: 16,
            },
            train: StageSchedule {
                epochs: 30,
                lr: 3e-4,
                batch_size: 16,
            },
            weight_decay: 0.01,
            poly_power: 0.9,
            crop: 80,
            max_steps: 0,
            loss: LossWeights::default(),
            kl_order: KlOrder::StudentFirst,
            fbd_projector: FbdProjector::Snapshot,
            tau_box: 0.4,
            assemble: AssembleParams::default(),
            last_k: 3,
            identity_affinity: false,
            use_box: true,
            cam_dump_dir: None,
            sinkhorn_tol: 1e-3,
            sinkhorn_iters: 10,
            crf: CrfParams::default(),
            seg: StageSchedule {
                epochs: 20,
                lr: 1e-3,
                batch_size: 8,
            },
            segmenter: SegmenterConfig::default(),
            seg_use_gt: false,
            seg_train_limit: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CtdnError::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        vec![
            ("seed", self.seed.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("data.n_train", self.n_train.to_string()),
            ("data.n_val", self.n_val.to_string()),
            ("data.image_size", self.image_size.to_string()),
            ("run.dir", self.run_dir.display().to_string()),
            ("model.patch", self.vit.patch.to_string()),
            ("model.dim", self.vit.dim.to_string()),
            ("model.depth", self.vit.depth.to_string()),
            ("model.heads", self.vit.heads.to_string()),
            ("model.mlp_ratio", self.vit.mlp_ratio.to_string()),
            ("model.embed_dim", self.vit.embed_dim.to_string()),
            ("text.dim", self.text.dim.to_string()),
            ("text.depth", self.text.depth.to_string()),
            ("text.heads", self.text.heads.to_string()),
            ("teacher.epochs", self.teacher.epochs.to_string()),
            ("teacher.lr", self.teacher.lr.to_string()),
            ("teacher.batch_size", self.teacher.batch_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.poly_power", self.poly_power.to_string()),
            ("train.crop", self.crop.to_string()),
            ("train.max_steps", self.max_steps.to_string()),
            ("loss.lambda1", self.loss.lambda1.to_string()),
            ("loss.lambda2", self.loss.lambda2.to_string()),
            ("loss.lambda3", self.loss.lambda3.to_string()),
            ("loss.delta", self.loss.delta.to_string()),
            ("loss.kl_order", self.kl_order.to_string()),
            ("loss.fbd_projector", self.fbd_projector.to_string()),
            ("cam.tau_box", self.tau_box.to_string()),
            ("cam.tau_fg", self.assemble.tau_fg.to_string()),
            ("cam.gamma", self.assemble.gamma.to_string()),
            ("cam.last_k", self.last_k.to_string()),
            ("cam.identity_affinity", self.identity_affinity.to_string()),
            ("cam.use_box", self.use_box.to_string()),
            ("cam.dump_dir", opt_path(&self.cam_dump_dir)),
            ("sinkhorn.tol", self.sinkhorn_tol.to_string()),
            ("sinkhorn.max_iters", self.sinkhorn_iters.to_string()),
            ("crf.n_iters", self.crf.n_iters.to_string()),
            ("crf.w_appearance", self.crf.w_appearance.to_string()),
            ("crf.w_smoothness", self.crf.w_smoothness.to_string()),
            ("crf.theta_alpha", self.crf.theta_alpha.to_string()),
            ("crf.theta_beta", self.crf.theta_beta.to_string()),
            ("crf.theta_gamma", self.crf.theta_gamma.to_string()),
            ("seg.epochs", self.seg.epochs.to_string()),
            ("seg.lr", self.seg.lr.to_string()),
            ("seg.batch_size", self.seg.batch_size.to_string()),
            (
                "seg.base_channels",
                self.segmenter.base_channels.to_string(),
            ),
            ("seg.levels", self.segmenter.levels.to_string()),
            ("seg.use_gt", self.seg_use_gt.to_string()),
            ("seg.train_limit", self.seg_train_limit.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.n_train" => self.n_train = parse(key, v)?,
            "data.n_val" => self.n_val = parse(key, v)?,
            "data.image_size" => self.image_size = parse(key, v)?,
            "run.dir" => self.run_dir = PathBuf::from(v),
            "model.patch" => self.vit.patch = parse(key, v)?,
            "model.dim" => self.vit.dim = parse(key, v)?,
            "model.depth" => self.vit.depth = parse(key, v)?,
            "model.heads" => self.vit.heads = parse(key, v)?,
            "model.mlp_ratio" => self.vit.mlp_ratio = parse(key, v)?,
            "model.embed_dim" => self.vit.embed_dim = parse(key, v)?,
            "text.dim" => self.text.dim = parse(key, v)?,
            "text.depth" => self.text.depth = parse(key, v)?,
            "text.heads" => self.text.heads = parse(key, v)?,
            "teacher.epochs" => self.teacher.epochs = parse(key, v)?,
            "teacher.lr" => self.teacher.lr = parse(key, v)?,
            "teacher.batch_size" => self.teacher.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.poly_power" => self.poly_power = parse(key, v)?,
            "train.crop" => self.crop = parse(key, v)?,
            "train.max_steps" => self.max_steps = parse(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, v)?,
            "loss.lambda3" => self.loss.lambda3 = parse(key, v)?,
            "loss.delta" => self.loss.delta = parse(key, v)?,
            "loss.kl_order" => self.kl_order = v.parse()?,
            "loss.fbd_projector" => self.fbd_projector = v.parse()?,
            "cam.tau_box" => self.tau_box = parse(key, v)?,
            "cam.tau_fg" => self.assemble.tau_fg = parse(key, v)?,
            "cam.gamma" => self.assemble.gamma = parse(key, v)?,
            "cam.last_k" => self.last_k = parse(key, v)?,
            "cam.identity_affinity" => self.identity_affinity = parse(key, v)?,
            "cam.use_box" => self.use_box = parse(key, v)?,
            "cam.dump_dir" => self.cam_dump_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "sinkhorn.tol" => self.sinkhorn_tol = parse(key, v)?,
            "sinkhorn.max_iters" => self.sinkhorn_iters = parse(key, v)?,
            "crf.n_iters" => self.crf.n_iters = parse(key, v)?,
            "crf.w_appearance" => self.crf.w_appearance = parse(key, v)?,
            "crf.w_smoothness" => self.crf.w_smoothness = parse(key, v)?,
            "crf.theta_alpha" => self.crf.theta_alpha = parse(key, v)?,
            "crf.theta_beta" => self.crf.theta_beta = parse(key, v)?,
            "crf.theta_gamma" => self.crf.theta_gamma = parse(key, v)?,
            "seg.epochs" => self.seg.epochs = parse(key, v)?,
            "seg.lr" => self.seg.lr = parse(key, v)?,
            "seg.batch_size" => self.seg.batch_size = parse(key, v)?,
            "seg.base_channels" => self.segmenter.base_channels = parse(key, v)?,
            "seg.levels" => self.segmenter.levels = parse(key, v)?,
            "seg.use_gt" => self.seg_use_gt = parse(key, v)?,
            "seg.train_limit" => self.seg_train_limit = parse(key, v)?,
            other => return Err(CtdnError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CtdnError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CtdnError::io(path, e))?;
        RunConfig::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Derives dependent fields and validates.
    pub fn finish(mut self) -> Result<Self> {
        self.vit.image_size = self.image_size;
        self.text.embed_dim = self.vit.embed_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.crf.validate()?;
        let bad = |m: String| Err(CtdnError::Config(m));
        for (name, s) in [
            ("teacher", &self.teacher),
            ("train", &self.train),
            ("seg", &self.seg),
        ] {
            if s.batch_size == 0 {
                return bad(format!("{name}.batch_size must be >= 1"));
            }
            if !(s.lr > 0.0) || !s.lr.is_finite() {
                return bad(format!("{name}.lr must be > 0"));
            }
        }
        if !self.image_size.is_multiple_of(self.vit.patch) {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.vit.patch
            ));
        }
        if !self.vit.dim.is_multiple_of(self.vit.heads)
            || !self.text.dim.is_multiple_of(self.text.heads)
        {
            return bad("width not divisible by head count".into());
        }
        if self.crop == 0 || self.crop > self.image_size {
            return bad(format!("crop {} not in 1..={}", self.crop, self.image_size));
        }
        if self.last_k == 0 || self.last_k > self.vit.depth {
            return bad(format!(
                "cam.last_k {} not in 1..={}",
                self.last_k, self.vit.depth
            ));
        }
        if !(self.tau_box > 0.0 && self.tau_box < 1.0) {
            return bad(format!("cam.tau_box {} not in (0, 1)", self.tau_box));
        }
        if self.segmenter.levels == 0
            || !self
                .image_size
                .is_multiple_of(1 << (self.segmenter.levels - 1))
        {
            return bad("image size not divisible by the segmenter's downsampling".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("loss.lambda1", "1.5").unwrap();
        c.set("cam.dump_dir", "/tmp/x").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c.finish().unwrap());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("train.lr = 0").is_err());
        assert!(RunConfig::from_text("loss.lambda2 = -1").is_err());
        assert!(RunConfig::from_text("train.batch_size = 0").is_err());
    }
}
