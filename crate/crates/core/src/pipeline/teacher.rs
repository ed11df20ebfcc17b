//! Contrastive image-text pretraining of the teacher and the shared text
//! encoder.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{
    generate_scene_from_seed, ClassKind, Dataset, DatasetManifest, ManifestEntry, Split,
};
use crate::encoders::{PromptTemplate, TextEncoder, VisualEncoder};
use crate::error::{CtdnError, Result};
use crate::losses::{relation_loss_var, similarity_logits_var, ClassLabelVector};
use crate::nn::{poly_lr, AdamW};
use crate::par::{self, Parallelism};
use crate::tensor::Mat;

use super::{Checkpoint, RunConfig, StepLog, TEACHER_CKPT, TEXT_CKPT};

/// Salt separating the text encoder's init stream from the visual one.
const TEXT_SEED_SALT: u64 = 0x7465_7874;

/// Starting logit scale for pretraining from scratch (`1/0.07`). The student
/// inherits whatever the teacher learned.
pub const PRETRAIN_LOGIT_SCALE: f32 = 1.0 / 0.07;

pub struct TeacherOutput {
    pub teacher: VisualEncoder,
    pub text: TextEncoder,
    pub curves: BTreeMap<String, Vec<f64>>,
}

/// Phrases that describe an image: its present classes, the generic
/// foreground nouns of the kinds present, `table`, and the distractors the
/// renderer painted.
pub fn positive_phrases(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    distractors: &[String],
) -> Vec<String> {
    let present = entry.labels.present();
    let mut any_hand = false;
    let mut any_object = false;
    let mut out: Vec<String> = Vec::new();
    for &c in &present {
        out.push(manifest.classes[c].clone());
        match ClassKind::parse(&manifest.classes[c]) {
            Ok(ClassKind::Hand { .. }) => any_hand = true,
            Ok(ClassKind::Object { .. }) => any_object = true,
            Err(_) => {}
        }
    }
    for p in &manifest.cognition.fg {
        let hit = if p.contains("object") {
            any_object
        } else if p.contains("hand") || p.contains("arm") {
            any_hand
        } else {
            !present.is_empty()
        };
        if hit {
            out.push(p.clone());
        }
    }
    for p in &manifest.cognition.bg {
        if p == "table" || distractors.contains(p) {
            out.push(p.clone());
        }
    }
    out.dedup();
    out
}

/// Pairwise sigmoid image-text loss over a `B×M` logit node: every
/// (image, text) cell is an independent binary match, positives from
/// `positive`. Symmetric in images and texts.
pub fn pair_loss_var(g: &mut Graph, logits: Var, positive: &[Vec<bool>]) -> Result<Var> {
    let m = g.value(logits).cols();
    if positive.len() != g.value(logits).rows() || positive.iter().any(|r| r.len() != m) {
        return Err(CtdnError::dims("positive mask vs logits"));
    }
    let labels = positive
        .iter()
        .map(|r| ClassLabelVector::new(r.iter().map(|&p| p as u8).collect()))
        .collect::<Result<Vec<_>>>()?;
    relation_loss_var(g, logits, &labels)
}

/// Column-wise max over each of `groups` equal row blocks of a node:
/// `(groups·n)×M → groups×M`. The gradient goes to the arg-max row, ties to
/// the first.
pub fn group_max_rows(g: &mut Graph, z: Var, groups: usize) -> Var {
    let v = g.value(z);
    let (rows, m) = v.shape();
    assert!(
        groups > 0 && rows % groups == 0,
        "group_max_rows: {rows} rows in {groups} groups"
    );
    let n = rows / groups;
    let mut arg = vec![0usize; groups * m];
    let mut out = Mat::zeros(groups, m);
    for b in 0..groups {
        for j in 0..m {
            let mut best = b * n;
            for r in b * n + 1..(b + 1) * n {
                if v.get(r, j) > v.get(best, j) {
                    best = r;
                }
            }
            arg[b * m + j] = best;
            out.set(b, j, v.get(best, j));
        }
    }
    g.custom(
        &[z],
        out,
        Box::new(move |up, _| {
            let mut d = Mat::zeros(rows, m);
            for b in 0..groups {
                for j in 0..m {
                    let r = arg[b * m + j];
                    d.set(r, j, d.get(r, j) + up.get(b, j));
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Trains teacher and text encoder from scratch on the train split, then
/// freezes both and writes their checkpoints into the run directory.
///
/// The loss has a global term on the class token and a local term on the
/// best-matching patch token per (image, text) pair, so patch tokens end up
/// text-aligned on their own.
pub fn pretrain_teacher(cfg: &RunConfig, data: &Dataset) -> Result<TeacherOutput> {
    let manifest = &data.manifest;
    let vocab = manifest.phrase_vocab();
    let mut text = TextEncoder::new(
        cfg.text.clone(),
        vocab.clone(),
        &[],
        cfg.seed ^ TEXT_SEED_SALT,
    );
    let mut teacher = VisualEncoder::new(cfg.vit.clone(), "teacher", cfg.seed);
    teacher
        .store
        .get_mut(teacher.vit.logit_scale)
        .set(0, 0, PRETRAIN_LOGIT_SCALE.ln());

    let train = data.indices(Split::Train);
    let positives: Vec<Vec<bool>> =
        par::map_slice(Parallelism::default(), &train, |&i| -> Result<Vec<bool>> {
            let e = &manifest.entries[i];
            let img = &data.images[i];
            let spec = manifest.scene_spec(img.height(), img.width());
            let scene = generate_scene_from_seed(&spec, e.seed)?;
            let pos = positive_phrases(manifest, e, &scene.distractors);
            Ok((0..vocab.len())
                .map(|p| pos.contains(&vocab.phrases()[p]))
                .collect())
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let prompts = [PromptTemplate::student(), PromptTemplate::teacher()];
    let mut seqs = Vec::new();
    let mut seq_phrase = Vec::new();
    for prompt in &prompts {
        for p in 0..vocab.len() {
            seqs.push(text.token_ids(p, prompt)?);
            seq_phrase.push(p);
        }
    }

    let mut opt_v = AdamW::new(&teacher.store, cfg.weight_decay);
    let mut opt_t = AdamW::new(&text.store, cfg.weight_decay);
    let sched = &cfg.teacher;
    let steps_per_epoch = train.len().div_ceil(sched.batch_size);
    let total = sched.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac);
    let mut log = StepLog::new(Some(&cfg.run_dir.join("teacher_log.txt")))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(sched.batch_size) {
            let imgs: Vec<_> = chunk.iter().map(|&k| &data.images[train[k]]).collect();
            let mask: Vec<Vec<bool>> = chunk
                .iter()
                .map(|&k| seq_phrase.iter().map(|&p| positives[k][p]).collect())
                .collect();
            let mut g = Graph::new();
            let fwd = teacher.vit.forward(&mut g, &teacher.store, &imgs);
            let cls = g.gather_rows(fwd.tokens, &teacher.vit.class_rows(imgs.len()));
            let proj = teacher.vit.project(&mut g, &teacher.store, cls);
            let tf = text.model.forward(&mut g, &text.store, &seqs)?;
            let log_mu = teacher.store.var(&mut g, teacher.vit.logit_scale);
            let logits = similarity_logits_var(&mut g, proj, tf, log_mu);
            let global = pair_loss_var(&mut g, logits, &mask)?;
            let rows: Vec<usize> = (0..imgs.len())
                .flat_map(|b| teacher.vit.patch_rows(b))
                .collect();
            let patches = g.gather_rows(fwd.tokens, &rows);
            let patch_proj = teacher.vit.project(&mut g, &teacher.store, patches);
            let patch_logits = similarity_logits_var(&mut g, patch_proj, tf, log_mu);
            let best = group_max_rows(&mut g, patch_logits, imgs.len());
            let local = pair_loss_var(&mut g, best, &mask)?;
            let loss = g.weighted_sum(&[(global, 1.0), (local, 1.0)]);
            let lv = g.value(loss).get(0, 0) as f64;
            if !lv.is_finite() {
                return Err(CtdnError::Diverged {
                    step,
                    what: "contrastive loss".into(),
                });
            }
            let mut grads = g.backward(loss);
            let gv = g.param_grads(&mut grads, teacher.store.uid());
            let gt = g.param_grads(&mut grads, text.store.uid());
            let lr = poly_lr(sched.lr, step, total, cfg.poly_power);
            opt_v.step(&mut teacher.store, &gv, lr)?;
            opt_t.step(&mut text.store, &gt, lr)?;
            teacher.clamp_logit_scale();
            let parts = [
                g.value(global).get(0, 0) as f64,
                g.value(local).get(0, 0) as f64,
            ];
            log.record(
                step,
                &[
                    ("l_con", lv),
                    ("l_global", parts[0]),
                    ("l_local", parts[1]),
                    ("mu", teacher.logit_scale().value() as f64),
                    ("lr", lr as f64),
                ],
            )?;
            step += 1;
        }
    }

    teacher.freeze();
    text.store.freeze_all();
    Checkpoint::new(teacher.to_archive(BTreeMap::new()), None, step, cfg)
        .save(&cfg.run_dir.join(TEACHER_CKPT))?;
    Checkpoint::new(text.to_archive(BTreeMap::new()), None, step, cfg)
        .save(&cfg.run_dir.join(TEXT_CKPT))?;
    Ok(TeacherOutput {
        teacher,
        text,
        curves: log.curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_loss_is_mean_cell_bce() {
        let z = Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f32 * 0.5 - 1.0);
        let mask = vec![vec![true, false, true], vec![false, false, true]];
        let mut g = Graph::new();
        let v = g.input(z.clone());
        let l = pair_loss_var(&mut g, v, &mask).unwrap();
        let mut want = 0.0f64;
        for r in 0..2 {
            for c in 0..3 {
                let p = 1.0 / (1.0 + (-(z.get(r, c) as f64)).exp());
                want -= if mask[r][c] { p.ln() } else { (1.0 - p).ln() };
            }
        }
        assert!((g.value(l).get(0, 0) as f64 - want / 6.0).abs() < 1e-5);
        let bad = vec![vec![true, false]];
        let mut g = Graph::new();
        let v = g.input(z);
        assert!(pair_loss_var(&mut g, v, &bad).is_err());
    }

    #[test]
    fn group_max_picks_rows_and_routes_gradient() {
        let z = Mat::from_vec(4, 2, vec![1.0, 5.0, 3.0, 2.0, -1.0, 0.0, -2.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let v = g.input(z);
        let m = group_max_rows(&mut g, v, 2);
        assert_eq!(g.value(m).data(), &[3.0, 5.0, -1.0, 0.0]);
        let s = g.sum_all(m);
        let gr = g.backward(s).get(v).unwrap().clone();
        assert_eq!(gr.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
