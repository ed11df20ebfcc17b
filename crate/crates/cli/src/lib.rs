//! Command-line front end: `run(argv)` parses, dispatches and maps failures
//! to exit codes (0 ok, 1 usage, 2 runtime).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctdn::data::{
    build_dataset, load_image, load_mask, write_rgb_png, Dataset, DatasetManifest, SceneSpec,
    Split, PALETTE,
};
use ctdn::pipeline::{
    generate_pseudo_masks, load_text, load_visual, pretrain_teacher, train_segmenter, train_stage1,
    Confusion, RunConfig, STUDENT_CKPT, TEACHER_CKPT, TEXT_CKPT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "ctdn",
    version,
    about = "Text-supervised egocentric segmentation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic desk dataset into `data.dir`.
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the teacher and the shared text encoder.
    PretrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the student from a pretrained teacher.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint [default: <run.dir>/teacher.ckpt].
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Text encoder checkpoint [default: <run.dir>/text.ckpt].
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Generate pseudo masks and score them against ground truth.
    GenMasks {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Visual encoder checkpoint [default: <run.dir>/student.ckpt].
        #[arg(long)]
        student: Option<PathBuf>,
        /// Text encoder checkpoint [default: <run.dir>/text.ckpt].
        #[arg(long)]
        text: Option<PathBuf>,
        /// Split to process.
        #[arg(long, default_value = "train")]
        split: String,
        /// Output directory [default: <run.dir>/masks/<split>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the segmentation network on pseudo masks.
    TrainSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pseudo-mask directory [default: <run.dir>/masks/train].
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Train on ground-truth masks instead (upper bound).
        #[arg(long)]
        gt: bool,
        /// Warm-start from a segmenter checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Compare two directories of label PNGs by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Number of foreground classes [default: largest label seen].
        #[arg(long)]
        num_classes: Option<usize>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Blend a mask over its image with the class palette.
    Visualize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference checks of every loss gradient.
    Gradcheck {
        /// Random instances per suite.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Built-in defaults, then the config file, then `--set`, then `--seed`.
pub fn resolve_config(
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = file {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{s}`");
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.finish()?)
}

/// Bad flags or config values; reported with exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(format!("{e:#}")).into()
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), &self.set, self.seed).map_err(usage)
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = DatasetManifest::load(&cfg.data_dir).with_context(|| {
        format!(
            "loading dataset from {} (run `ctdn make-data` first)",
            cfg.data_dir.display()
        )
    })?;
    let data = Dataset::load(manifest)?;
    if let Some(img) = data.images.first() {
        if (img.height(), img.width()) != (cfg.image_size, cfg.image_size) {
            bail!(
                "dataset images are {}x{} but data.image_size is {}",
                img.height(),
                img.width(),
                cfg.image_size
            );
        }
    }
    Ok(data)
}

/// Overlays `mask` on RGB bytes: labeled pixels become `0.5·img + 0.5·color`
/// (rounded), background pixels are copied.
pub fn overlay(rgb: &[u8], mask: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != mask.len() * 3 {
        bail!(
            "image has {} pixels, mask has {}",
            rgb.len() / 3,
            mask.len()
        );
    }
    let mut out = rgb.to_vec();
    for (i, &m) in mask.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let color = PALETTE
            .get(m as usize)
            .with_context(|| format!("label {m} outside the palette"))?;
        for c in 0..3 {
            let v = 0.5 * rgb[i * 3 + c] as f32 + 0.5 * color[c] as f32;
            out[i * 3 + c] = v.round() as u8;
        }
    }
    Ok(out)
}

pub fn visualize(image: &Path, mask: &Path, out: &Path) -> Result<()> {
    let img = load_image(image)?;
    let (w, h, m) = load_mask(mask)?;
    if (w, h) != (img.width(), img.height()) {
        bail!(
            "image is {}x{} but mask is {w}x{h}",
            img.width(),
            img.height()
        );
    }
    let bytes = ctdn::data::image_to_bytes(&img);
    write_rgb_png(out, w, h, &overlay(&bytes, &m)?)?;
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Scores every ground-truth PNG in `gt` against the same name in `pred`.
pub fn eval_dirs(
    pred: &Path,
    gt: &Path,
    num_classes: Option<usize>,
) -> Result<ctdn::pipeline::MetricsReport> {
    let names = png_names(gt)?;
    if names.is_empty() {
        bail!("no masks in {}", gt.display());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for n in &names {
        let (gw, gh, g) = load_mask(&gt.join(n))?;
        let p = pred.join(n);
        if !p.exists() {
            bail!("prediction {} missing", p.display());
        }
        let (pw, ph, pm) = load_mask(&p)?;
        if (gw, gh) != (pw, ph) {
            bail!("{n}: prediction is {pw}x{ph}, ground truth {gw}x{gh}");
        }
        pairs.push((pm, g));
    }
    let k = match num_classes {
        Some(k) => k,
        None => pairs
            .iter()
            .flat_map(|(p, g)| p.iter().chain(g))
            .copied()
            .max()
            .unwrap_or(0) as usize,
    };
    let mut conf = Confusion::new(k + 1);
    for (p, g) in &pairs {
        conf.add(p, g)?;
    }
    Ok(conf.report())
}

fn print_report(r: &ctdn::pipeline::MetricsReport) {
    println!("mIoU {:.4}", r.miou);
    println!("pixel accuracy {:.4}", r.pixel_accuracy);
    for (c, iou) in r.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {c}: IoU {v:.4}"),
            None => println!("  class {c}: absent"),
        }
    }
}

fn or_run(p: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.run_dir.join(name))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData { cfg } => {
            let cfg = cfg.resolve()?;
            let spec = SceneSpec {
                height: cfg.image_size,
                width: cfg.image_size,
                seed: cfg.seed,
                ..Default::default()
            };
            let m = build_dataset(&spec, cfg.n_train, cfg.n_val, &cfg.data_dir)?;
            println!(
                "wrote {} scenes to {}",
                m.entries.len(),
                cfg.data_dir.display()
            );
        }
        Command::PretrainTeacher { cfg } => {
            let cfg = cfg.resolve()?;
            let data = load_data(&cfg)?;
            let out = pretrain_teacher(&cfg, &data)?;
            let l = out.curves.get("l_con").cloned().unwrap_or_default();
            if let (Some(a), Some(b)) = (l.first(), l.last()) {
                println!("teacher loss {a:.4} -> {b:.4}");
            }
            println!(
                "wrote {} and {}",
                cfg.run_dir.join(TEACHER_CKPT).display(),
                cfg.run_dir.join(TEXT_CKPT).display()
            );
        }
        Command::Train { cfg, teacher, text } => {
            let cfg = cfg.resolve()?;
            let data = load_data(&cfg)?;
            let t = load_visual(&or_run(&teacher, &cfg, TEACHER_CKPT))?;
            let x = load_text(&or_run(&text, &cfg, TEXT_CKPT))?;
            let out = train_stage1(&cfg, &data, &t, &x)?;
            for k in ["total", "l_rel", "l_ct", "l_vrd", "l_fbd"] {
                if let Some(v) = out.curves.get(k).and_then(|c| c.last()) {
                    println!("{k} {v:.4}");
                }
            }
            println!(
                "{} steps, wrote {}",
                out.steps,
                cfg.run_dir.join(STUDENT_CKPT).display()
            );
        }
        Command::GenMasks {
            cfg,
            student,
            text,
            split,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let split = Split::parse(&split).map_err(usage)?;
            let data = load_data(&cfg)?;
            let s = load_visual(&or_run(&student, &cfg, STUDENT_CKPT))?;
            let x = load_text(&or_run(&text, &cfg, TEXT_CKPT))?;
            let dir = out.unwrap_or_else(|| cfg.run_dir.join("masks").join(split.as_str()));
            let run = generate_pseudo_masks(&s, &x, &data, split, &cfg, Some(&dir))?;
            for id in &run.skipped {
                println!("skipped {id}: no present classes");
            }
            println!("wrote {} masks to {}", run.masks.len(), dir.display());
            print_report(&run.report);
        }
        Command::TrainSeg {
            cfg,
            masks,
            gt,
            init_from,
        } => {
            let mut cfg = cfg.resolve()?;
            cfg.seg_use_gt |= gt;
            let data = load_data(&cfg)?;
            let dir = masks.unwrap_or_else(|| cfg.run_dir.join("masks").join("train"));
            let out = train_segmenter(Some(&dir), &data, &cfg, init_from.as_deref())?;
            print_report(&out.report);
        }
        Command::Eval {
            pred,
            gt,
            num_classes,
            out,
        } => {
            let r = eval_dirs(&pred, &gt, num_classes)?;
            print_report(&r);
            if let Some(p) = out {
                r.save(&p)?;
            }
        }
        Command::Visualize { image, mask, out } => {
            visualize(&image, &mask, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { instances, seed } => {
            let results = ctdn::gradcheck::run_all(seed, instances)?;
            let mut ok = true;
            for r in &results {
                let tag = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{tag} {:<22} {} instances, max rel err {:.2e}",
                    r.name, r.instances, r.max_rel_err
                );
                ok &= r.passed();
            }
            if !ok {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

/// Runs one command. `argv` excludes the program name.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let args = std::iter::once("ctdn").chain(argv.iter().map(|s| s.as_ref()));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("usage: ctdn <COMMAND> [OPTIONS]   (see `ctdn --help`)");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
