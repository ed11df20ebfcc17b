//! Segmentation network training on pseudo (or ground-truth) masks.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{load_mask, Dataset, Split};
use crate::encoders::ImageTensor;
use crate::error::{CtdnError, Result};
use crate::nn::{poly_lr, AdamW, ParamStore, Segmenter, SegmenterConfig};
use crate::tensor::Mat;

use super::stage2::mask_path;
use super::{Checkpoint, Confusion, MetricsReport, RunConfig, StepLog, SEGMENTER_CKPT};

pub struct SegmenterOutput {
    pub segmenter: Segmenter,
    pub store: ParamStore,
    /// Validation report after the last epoch.
    pub report: MetricsReport,
}

/// Mean per-pixel cross-entropy of `P×K` logits against integer targets.
pub fn pixel_cross_entropy(g: &mut Graph, logits: Var, targets: &[u8]) -> Result<Var> {
    let z = g.value(logits);
    let (p, k) = z.shape();
    if targets.len() != p {
        return Err(CtdnError::LengthMismatch {
            expected: p,
            got: targets.len(),
        });
    }
    let mut grad = Mat::zeros(p, k);
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= k {
            return Err(CtdnError::IndexOutOfRange { index: t, len: k });
        }
        let row = z.row(i);
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let se: f32 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + se.ln();
        total += (lse - row[t]) as f64;
        let gr = grad.row_mut(i);
        for c in 0..k {
            gr[c] = ((row[c] - lse).exp() - (c == t) as u8 as f32) / p as f32;
        }
    }
    Ok(g.custom(
        &[logits],
        Mat::scalar((total / p.max(1) as f64) as f32),
        Box::new(move |up, _| vec![Some(grad.map(|x| x * up.get(0, 0)))]),
    ))
}

/// Argmax labels for each image, ties toward the lower class.
pub fn predict_masks(seg: &Segmenter, store: &ParamStore, images: &[&ImageTensor]) -> Vec<Vec<u8>> {
    images
        .iter()
        .map(|img| {
            let mut g = Graph::new();
            let out = seg.forward(&mut g, store, &[img]);
            crate::crf::crf_argmax(g.value(out).data(), seg.cfg.num_classes)
        })
        .collect()
}

fn evaluate(
    seg: &Segmenter,
    store: &ParamStore,
    data: &Dataset,
    idx: &[usize],
) -> Result<MetricsReport> {
    let mut conf = Confusion::new(seg.cfg.num_classes);
    for &i in idx {
        let pred = predict_masks(seg, store, &[&data.images[i]]).remove(0);
        conf.add(&pred, &data.masks[i])?;
    }
    Ok(conf.report())
}

fn seg_meta(cfg: &SegmenterConfig) -> BTreeMap<String, String> {
    [
        ("seg.base_channels", cfg.base_channels),
        ("seg.levels", cfg.levels),
        ("seg.num_classes", cfg.num_classes),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn load_segmenter(path: &Path) -> Result<(Segmenter, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let get = |k: &str| -> Result<usize> {
        ck.archive
            .meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CtdnError::MissingCheckpoint(format!("segmenter checkpoint lacks {k}")))
    };
    let cfg = SegmenterConfig {
        base_channels: get("seg.base_channels")?,
        levels: get("seg.levels")?,
        num_classes: get("seg.num_classes")?,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ck.archive.seed);
    let seg = Segmenter::new(&mut store, &mut rng, "seg", cfg);
    store.load_archive(&ck.archive)?;
    Ok((seg, store))
}

/// Trains on the train split with masks from `masks_dir` (or ground truth
/// when `cfg.seg_use_gt`), evaluating on val ground truth every epoch.
pub fn train_segmenter(
    masks_dir: Option<&Path>,
    data: &Dataset,
    cfg: &RunConfig,
    init_from: Option<&Path>,
) -> Result<SegmenterOutput> {
    let start = Instant::now();
    let mut train = data.indices(Split::Train);
    if cfg.seg_train_limit > 0 {
        train.truncate(cfg.seg_train_limit);
    }
    let val = data.indices(Split::Val);
    let targets: Vec<Vec<u8>> = if cfg.seg_use_gt {
        train.iter().map(|&i| data.masks[i].clone()).collect()
    } else {
        let dir =
            masks_dir.ok_or_else(|| CtdnError::Config("pseudo-mask directory required".into()))?;
        let ids: Vec<&str> = train
            .iter()
            .map(|&i| data.manifest.entries[i].id.as_str())
            .collect();
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !mask_path(dir, id).exists())
            .map(|s| s.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CtdnError::MissingMasks(missing));
        }
        let mut out = Vec::new();
        for (&i, id) in train.iter().zip(&ids) {
            let (w, h, m) = load_mask(&mask_path(dir, id))?;
            if (w, h) != (data.images[i].width(), data.images[i].height()) {
                return Err(CtdnError::dims(format!("pseudo mask {id} size")));
            }
            out.push(m);
        }
        out
    };

    let seg_cfg = SegmenterConfig {
        num_classes: data.num_classes() + 1,
        ..cfg.segmenter.clone()
    };
    let mut store = ParamStore::new();
    let seed = cfg.seed ^ 0x5e6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg = Segmenter::new(&mut store, &mut rng, "seg", seg_cfg);
    if let Some(p) = init_from {
        let ck = Checkpoint::load(p)?;
        store.load_archive(&ck.archive)?;
        store.unfreeze_all();
    }
    let mut opt = AdamW::new(&store, cfg.weight_decay);
    let sched = &cfg.seg;
    let total = sched.epochs * train.len().div_ceil(sched.batch_size);
    let mut log = StepLog::new(Some(&cfg.run_dir.join("seg_log.txt")))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut report = MetricsReport::default();
    for _ in 0..sched.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sched.batch_size) {
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|&k| &data.images[train[k]]).collect();
            let tgt: Vec<u8> = chunk
                .iter()
                .flat_map(|&k| targets[k].iter().copied())
                .collect();
            let mut g = Graph::new();
            let logits = seg.forward(&mut g, &store, &imgs);
            let loss = pixel_cross_entropy(&mut g, logits, &tgt)?;
            let lv = g.value(loss).get(0, 0) as f64;
            if !lv.is_finite() {
                return Err(CtdnError::Diverged {
                    step,
                    what: "segmentation loss".into(),
                });
            }
            let mut grads = g.backward(loss);
            let pg = g.param_grads(&mut grads, store.uid());
            let lr = poly_lr(sched.lr, step, total, cfg.poly_power);
            opt.step(&mut store, &pg, lr)?;
            log.record(step, &[("seg_ce", lv), ("lr", lr as f64)])?;
            step += 1;
        }
        let r = evaluate(&seg, &store, data, &val)?;
        log.curves
            .entry("val_miou".into())
            .or_default()
            .push(r.miou);
        log::info!("segmenter step {step}: val mIoU {:.4}", r.miou);
        report = r;
    }
    if sched.epochs == 0 {
        report = evaluate(&seg, &store, data, &val)?;
    }
    report.loss_curves = log.curves;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Checkpoint::new(
        store.to_archive(seed, seg_meta(&seg.cfg)),
        Some((&opt, &store)),
        step,
        cfg,
    )
    .save(&cfg.run_dir.join(SEGMENTER_CKPT))?;
    Ok(SegmenterOutput {
        segmenter: seg,
        store,
        report,
    })
}
