//! Student training: relation learning with cognition transfer, visual
//! distillation and foreground-background decoupling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{load_batch, Dataset, Split};
use crate::encoders::{
    encode_texts, project, ImageTensor, ProjectionHead, PromptTemplate, TextEncoder, TextFeatures,
    VisualEncoder,
};
use crate::error::{CtdnError, Result};
use crate::losses::{
    categorize_tokens, cognition_transfer_var, compute_prototypes, fbd_var, relation_loss_var,
    similarity_logits, similarity_logits_var, softmax64, vrd_var, CognitionSet, Prototypes,
    TokenPartition,
};
use crate::nn::{poly_lr, AdamW};
use crate::tensor::{Mat, Mat64};

use super::{phrase_ids, Checkpoint, FbdProjector, RunConfig, StepLog, STUDENT_CKPT};

pub struct Stage1Output {
    pub student: VisualEncoder,
    pub curves: BTreeMap<String, Vec<f64>>,
    pub steps: usize,
}

/// Text-side constants of stage 1.
pub struct Stage1Texts {
    /// Class phrases under the student prompt.
    pub classes: TextFeatures,
    /// Cognition phrases under the student prompt.
    pub cognition: TextFeatures,
    /// Cognition phrases under the teacher prompt.
    pub cognition_teacher: TextFeatures,
    pub set: CognitionSet,
    pub prototypes: Prototypes,
}

impl Stage1Texts {
    pub fn new(
        text: &TextEncoder,
        classes: &[String],
        fg: &[String],
        bg: &[String],
        teacher_prompt: &PromptTemplate,
    ) -> Result<Self> {
        let vocab = &text.phrases;
        let class_ids = phrase_ids(vocab, classes)?;
        let fg_ids = phrase_ids(vocab, fg)?;
        let bg_ids = phrase_ids(vocab, bg)?;
        let set = CognitionSet::new(fg_ids, bg_ids)?;
        let student = PromptTemplate::student();
        let cognition = encode_texts(text, &set.all(), &student)?;
        let prototypes = compute_prototypes(&cognition, &set)?;
        Ok(Stage1Texts {
            classes: encode_texts(text, &class_ids, &student)?,
            cognition_teacher: encode_texts(text, &set.all(), teacher_prompt)?,
            cognition,
            set,
            prototypes,
        })
    }
}

/// Teacher cognition distribution `softmax(μ' cos(ψ'(t_cls), F'_C))` per image.
fn teacher_targets(
    teacher: &VisualEncoder,
    imgs: &[&ImageTensor],
    texts: &Stage1Texts,
) -> Result<(Mat64, Mat)> {
    let head = teacher.head();
    let mu = teacher.logit_scale().value() as f64;
    let cog = texts.cognition_teacher.vectors.to_f64();
    let mut probs = Vec::with_capacity(imgs.len());
    let mut means = Mat::zeros(imgs.len(), head.out_dim());
    for (b, img) in imgs.iter().enumerate() {
        let f = crate::encoders::encode_image_teacher(teacher, img)?;
        let cls = project(&Mat::row_vector(f.class_token()), &head)?;
        let cls: Vec<f64> = cls.data().iter().map(|&v| v as f64).collect();
        probs.push(softmax64(&similarity_logits(&cls, &cog, mu)?)?);
        let patches = f.patch_tokens();
        let mut m = Mat::zeros(1, patches.cols());
        for r in 0..patches.rows() {
            for (a, &v) in m.data_mut().iter_mut().zip(patches.row(r)) {
                *a += v / patches.rows() as f32;
            }
        }
        means.row_mut(b).copy_from_slice(project(&m, &head)?.row(0));
    }
    Ok((Mat64::from_rows(&probs)?, means))
}

/// Partitions each image's patch tokens with a frozen projector.
fn partitions(
    tokens: &Mat,
    rows: &[Vec<usize>],
    head: &ProjectionHead,
    protos: &Prototypes,
    delta: f64,
) -> Result<Vec<TokenPartition>> {
    rows.iter()
        .map(|r| {
            let projected = project(&tokens.select_rows(r), head)?.to_f64();
            categorize_tokens(&projected, protos, delta)
        })
        .collect()
}

/// Trains the student from the frozen teacher. `text` must be frozen.
pub fn train_stage1(
    cfg: &RunConfig,
    data: &Dataset,
    teacher: &VisualEncoder,
    text: &TextEncoder,
) -> Result<Stage1Output> {
    if !teacher.is_frozen() || !text.is_frozen() {
        return Err(CtdnError::MissingCheckpoint(
            "stage 1 needs a frozen pretrained teacher and text encoder".into(),
        ));
    }
    let teacher_sum = teacher.store.checksum();
    let text_sum = text.store.checksum();
    let manifest = &data.manifest;
    let texts = Stage1Texts::new(
        text,
        &manifest.classes,
        &manifest.cognition.fg,
        &manifest.cognition.bg,
        &PromptTemplate::teacher(),
    )?;

    let mut student = VisualEncoder::student_from(teacher, "student")?;
    let mut opt = AdamW::new(&student.store, cfg.weight_decay);
    let train = data.indices(Split::Train);
    let sched = &cfg.train;
    let steps_per_epoch = train.len().div_ceil(sched.batch_size);
    let mut total = sched.epochs * steps_per_epoch;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157);
    let mut log = StepLog::new(Some(&cfg.run_dir.join("stage1_log.txt")))?;
    let w = cfg.loss;
    let crop = (cfg.crop, cfg.crop);
    let mut order = train.clone();
    let mut step = 0;
    let class_texts = texts.classes.vectors.clone();
    let cog_texts = texts.cognition.vectors.clone();

    'outer: for epoch in 0..sched.epochs {
        let frozen_head = match cfg.fbd_projector {
            FbdProjector::Snapshot => {
                let mut h = student.head();
                h.frozen = true;
                h
            }
            FbdProjector::Teacher => teacher.head(),
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(sched.batch_size) {
            if step >= total {
                break 'outer;
            }
            let batch = load_batch(data, chunk, crop, cfg.image_size, &mut rng)?;
            let imgs: Vec<&ImageTensor> = batch.iter().map(|(i, _)| i).collect();
            let labels: Vec<_> = batch.iter().map(|(_, l)| l.clone()).collect();
            let bsz = imgs.len();
            let (teacher_probs, teacher_means) = teacher_targets(teacher, &imgs, &texts)?;

            let mut g = Graph::new();
            let vit = &student.vit;
            let store = &student.store;
            let fwd = vit.forward(&mut g, store, &imgs);
            let cls = g.gather_rows(fwd.tokens, &vit.class_rows(bsz));
            let cls_proj = vit.project(&mut g, store, cls);
            let log_mu = store.var(&mut g, vit.logit_scale);
            let ft = g.constant(class_texts.clone());
            let fc = g.constant(cog_texts.clone());
            let class_logits = similarity_logits_var(&mut g, cls_proj, ft, log_mu);
            let cog_logits = similarity_logits_var(&mut g, cls_proj, fc, log_mu);
            let l_rel = relation_loss_var(&mut g, class_logits, &labels)?;
            let l_ct = cognition_transfer_var(&mut g, cog_logits, &teacher_probs, cfg.kl_order)?;

            let rows: Vec<Vec<usize>> = (0..bsz).map(|b| vit.patch_rows(b)).collect();
            let means = g.group_mean(fwd.tokens, &rows);
            let means_proj = vit.project(&mut g, store, means);
            let l_vrd = vrd_var(&mut g, means_proj, &teacher_means)?;

            let parts = partitions(
                g.value(fwd.tokens),
                &rows,
                &frozen_head,
                &texts.prototypes,
                w.delta,
            )?;
            let l_fbd = fbd_var(&mut g, fwd.tokens, &rows, &parts)?;

            let loss = g.weighted_sum(&[
                (l_rel, 1.0),
                (l_ct, w.lambda1 as f32),
                (l_vrd, w.lambda2 as f32),
                (l_fbd, w.lambda3 as f32),
            ]);
            let vals: Vec<f64> = [loss, l_rel, l_ct, l_vrd, l_fbd]
                .iter()
                .map(|&v| g.value(v).get(0, 0) as f64)
                .collect();
            if let Some(bad) = vals.iter().position(|v| !v.is_finite()) {
                return Err(CtdnError::Diverged {
                    step,
                    what: ["total", "l_rel", "l_ct", "l_vrd", "l_fbd"][bad].into(),
                });
            }
            let mut grads = g.backward(loss);
            let pg = g.param_grads(&mut grads, student.store.uid());
            let lr = poly_lr(sched.lr, step, total, cfg.poly_power);
            opt.step(&mut student.store, &pg, lr)?;
            student.clamp_logit_scale();
            let n_fg: usize = parts.iter().map(|p| p.fg_indices.len()).sum();
            let n_bg: usize = parts.iter().map(|p| p.bg_indices.len()).sum();
            log.record(
                step,
                &[
                    ("total", vals[0]),
                    ("l_rel", vals[1]),
                    ("l_ct", vals[2]),
                    ("l_vrd", vals[3]),
                    ("l_fbd", vals[4]),
                    ("fg_tokens", n_fg as f64 / bsz as f64),
                    ("bg_tokens", n_bg as f64 / bsz as f64),
                    ("lr", lr as f64),
                ],
            )?;
            step += 1;
        }
        if teacher.store.checksum() != teacher_sum {
            return Err(CtdnError::FrozenMutated("teacher".into()));
        }
        if text.store.checksum() != text_sum {
            return Err(CtdnError::FrozenMutated("text encoder".into()));
        }
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), epoch.to_string());
        Checkpoint::new(
            student.to_archive(meta),
            Some((&opt, &student.store)),
            step,
            cfg,
        )
        .save(&cfg.run_dir.join(STUDENT_CKPT))?;
    }
    if teacher.store.checksum() != teacher_sum || text.store.checksum() != text_sum {
        return Err(CtdnError::FrozenMutated("teacher or text encoder".into()));
    }
    Checkpoint::new(
        student.to_archive(BTreeMap::new()),
        Some((&opt, &student.store)),
        step,
        cfg,
    )
    .save(&cfg.run_dir.join(STUDENT_CKPT))?;
    Ok(Stage1Output {
        student,
        curves: log.curves,
        steps: step,
    })
}
