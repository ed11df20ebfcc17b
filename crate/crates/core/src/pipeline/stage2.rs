//! Pseudo-mask generation: Grad-CAM, attention-affinity refinement, box
//! masks and dense CRF.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autograd::{Graph, Var};
use crate::cam::{
    affinity_matrix, aggregate_affinity, assemble_pseudo_mask, box_mask, gradcam, refine_cam,
    threshold_labels, AffinityMatrix, BoxMask, CamMap, PseudoMask,
};
use crate::crf::dense_crf;
use crate::data::{save_mask, Dataset, Split};
use crate::encoders::{encode_texts, ImageTensor, PromptTemplate, TextEncoder, VisualEncoder};
use crate::error::Result;
use crate::losses::similarity_logits_var;
use crate::nn::ParamStore;
use crate::par::{self, Parallelism};
use crate::tensor::{Mat, Mat64};

use super::{phrase_ids, Confusion, MetricsReport, RunConfig};

pub struct PseudoMaskRun {
    pub report: MetricsReport,
    /// `(image id, labels)` for every processed image.
    pub masks: Vec<(String, Vec<u8>)>,
    /// Ids skipped because no class is present.
    pub skipped: Vec<String>,
}

/// `z_j − logsumexp(z)` of a `1×M` row.
fn log_softmax_element(g: &mut Graph, z: Var, j: usize) -> Var {
    let row = g.value(z).row(0).to_vec();
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let se: f32 = row.iter().map(|v| (v - mx).exp()).sum();
    let lse = mx + se.ln();
    let grad: Vec<f32> = row
        .iter()
        .enumerate()
        .map(|(i, v)| (i == j) as u8 as f32 - (v - lse).exp())
        .collect();
    let m = row.len();
    g.custom(
        &[z],
        Mat::scalar(row[j] - lse),
        Box::new(move |up, _| {
            let s = up.get(0, 0);
            vec![Some(Mat::from_fn(1, m, |_, i| grad[i] * s))]
        }),
    )
}

/// Everything stage 2 needs from the student and text encoder.
pub struct CamModel<'a> {
    pub student: &'a VisualEncoder,
    /// Frozen copy of the student parameters.
    pub store: ParamStore,
    /// Class phrases, student prompt, row per class.
    pub class_texts: Mat,
    /// Background cognition phrases, student prompt.
    pub bg_texts: Mat,
}

impl<'a> CamModel<'a> {
    pub fn new(
        student: &'a VisualEncoder,
        text: &TextEncoder,
        classes: &[String],
        bg: &[String],
    ) -> Result<Self> {
        let prompt = PromptTemplate::student();
        let class_texts =
            encode_texts(text, &phrase_ids(&text.phrases, classes)?, &prompt)?.vectors;
        let bg_texts = encode_texts(text, &phrase_ids(&text.phrases, bg)?, &prompt)?.vectors;
        let mut store = student.store.clone();
        store.freeze_all();
        Ok(CamModel {
            student,
            store,
            class_texts,
            bg_texts,
        })
    }

    /// Normalized Grad-CAM of each class in `present` (0-based). The score is
    /// the log-softmax of the class logit over the appeared classes plus the
    /// background cognition phrases.
    pub fn cams(
        &self,
        image: &ImageTensor,
        present: &[usize],
    ) -> Result<(Vec<CamMap>, crate::encoders::VisualFeatures)> {
        let feats = self.student.encode(image)?;
        let mut texts = self.class_texts.select_rows(present);
        let mut data = texts.data().to_vec();
        data.extend_from_slice(self.bg_texts.data());
        texts = Mat::from_vec(
            present.len() + self.bg_texts.rows(),
            self.class_texts.cols(),
            data,
        )?;
        let vit = &self.student.vit;
        let mut cams = Vec::with_capacity(present.len());
        for (j, &c) in present.iter().enumerate() {
            let cam = gradcam(&feats, c + 1, |g, a| {
                let cls = g.constant(Mat::row_vector(&feats.activation_cls));
                let h = g.concat_rows(&[cls, a]);
                let x = g.constant(feats.residual.clone());
                let y = vit.forward_tail_normed(g, &self.store, x, h, 1);
                let cls_out = g.gather_rows(y, &[0]);
                let proj = vit.project_frozen(g, &self.store, cls_out);
                let t = g.constant(texts.clone());
                let log_mu = self.store.const_var(g, vit.logit_scale);
                let z = similarity_logits_var(g, proj, t, log_mu);
                Ok(log_softmax_element(g, z, j))
            })?;
            cams.push(cam);
        }
        Ok((cams, feats))
    }
}

/// Pseudo mask of one image with its initial and refined cams.
pub fn pseudo_mask_for(
    model: &CamModel,
    image: &ImageTensor,
    present: &[usize],
    num_classes: usize,
    cfg: &RunConfig,
) -> Result<(PseudoMask, Vec<CamMap>, Vec<CamMap>)> {
    let (cams, feats) = model.cams(image, present)?;
    let n = feats.grid.0 * feats.grid.1;
    let aff = if cfg.identity_affinity {
        let mut m = Mat64::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        AffinityMatrix(m)
    } else {
        affinity_matrix(
            &aggregate_affinity(&feats, cfg.last_k)?,
            cfg.sinkhorn_iters,
            cfg.sinkhorn_tol,
        )?
    };
    let refined = cams
        .iter()
        .map(|cam| {
            let bx = if cfg.use_box {
                box_mask(cam, cfg.tau_box)
            } else {
                BoxMask {
                    h: cam.h,
                    w: cam.w,
                    values: vec![1; n],
                }
            };
            refine_cam(cam, &aff, &bx)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels_1: Vec<usize> = present.iter().map(|c| c + 1).collect();
    let mut pm = assemble_pseudo_mask(
        &refined,
        &labels_1,
        num_classes,
        cfg.assemble,
        (image.height(), image.width()),
    )?;
    let probs = dense_crf(&pm.unary, num_classes + 1, image, &cfg.crf)?;
    pm.labels = threshold_labels(&probs, num_classes + 1, &pm.fg_score, cfg.assemble.tau_fg);
    pm.unary = probs;
    Ok((pm, cams, refined))
}

/// Generates pseudo masks for `split`, writes them to `out_dir/<id>.png`
/// and scores them against the ground truth.
pub fn generate_pseudo_masks(
    student: &VisualEncoder,
    text: &TextEncoder,
    data: &Dataset,
    split: Split,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<PseudoMaskRun> {
    let start = Instant::now();
    let manifest = &data.manifest;
    let k = manifest.num_classes();
    let model = CamModel::new(student, text, &manifest.classes, &manifest.cognition.bg)?;
    let idx = data.indices(split);
    let results = par::map_slice(
        Parallelism::default(),
        &idx,
        |&i| -> Result<Option<Vec<u8>>> {
            let e = &manifest.entries[i];
            let present = e.labels.present();
            if present.is_empty() {
                log::warn!("{}: no present classes, skipped", e.id);
                return Ok(None);
            }
            let img = &data.images[i];
            let (pm, cams, refined) = pseudo_mask_for(&model, img, &present, k, cfg)?;
            if let Some(dir) = out_dir {
                save_mask(
                    &mask_path(dir, &e.id),
                    img.width(),
                    img.height(),
                    &pm.labels,
                )?;
            }
            if let Some(dump) = &cfg.cam_dump_dir {
                for (cam, r) in cams.iter().zip(&refined) {
                    cam.save_png(&dump.join(format!("{}_c{}_init.png", e.id, cam.class_id)))?;
                    r.save_png(&dump.join(format!("{}_c{}.png", e.id, r.class_id)))?;
                }
            }
            Ok(Some(pm.labels))
        },
    );
    let mut conf = Confusion::new(k + 1);
    let mut masks = Vec::new();
    let mut skipped = Vec::new();
    for (&i, r) in idx.iter().zip(results) {
        let id = manifest.entries[i].id.clone();
        match r? {
            Some(labels) => {
                conf.add(&labels, &data.masks[i])?;
                masks.push((id, labels));
            }
            None => skipped.push(id),
        }
    }
    let mut report = conf.report();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        report.save(&dir.join("report.txt"))?;
    }
    Ok(PseudoMaskRun {
        report,
        masks,
        skipped,
    })
}

/// Path of the pseudo mask for image `id`.
pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}
