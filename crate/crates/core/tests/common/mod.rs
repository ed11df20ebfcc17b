#![allow(dead_code)]

use std::path::Path;

use ctdn::data::{build_dataset, Dataset, SceneSpec};
use ctdn::pipeline::RunConfig;

/// A small but complete configuration for `size`-pixel scenes.
pub fn tiny_config(root: &Path, size: usize, n_train: usize, n_val: usize) -> RunConfig {
    let mut c = RunConfig::default();
    let text = format!(
        "data.dir = {}\nrun.dir = {}\ndata.n_train = {n_train}\ndata.n_val = {n_val}\ndata.image_size = {size}\n\
         model.patch = 8\nmodel.dim = 32\nmodel.depth = 2\nmodel.heads = 2\nmodel.mlp_ratio = 2\nmodel.embed_dim = 16\n\
         text.dim = 32\ntext.depth = 1\ntext.heads = 2\ncam.last_k = 2\ntrain.crop = {}\n\
         teacher.epochs = 1\nteacher.batch_size = 8\ntrain.epochs = 1\ntrain.batch_size = 4\n\
         seg.epochs = 1\nseg.base_channels = 8\nseg.levels = 2\n",
        root.join("data").display(),
        root.join("run").display(),
        size * 3 / 4,
    );
    c.apply_text(&text).unwrap();
    c.finish().unwrap()
}

pub fn build(cfg: &RunConfig) -> Dataset {
    let spec = SceneSpec {
        height: cfg.image_size,
        width: cfg.image_size,
        seed: cfg.seed,
        ..Default::default()
    };
    let m = build_dataset(&spec, cfg.n_train, cfg.n_val, &cfg.data_dir).unwrap();
    Dataset::load(m).unwrap()
}

use ctdn::encoders::{
    encode_texts, project, ImageTensor, PromptTemplate, TextEncoder, VisualEncoder,
};
use ctdn::losses::{
    cognition_transfer_loss, mean_patch_token, similarity_logits, softmax64, vrd_from_projected,
};
use ctdn::tensor::Mat;

/// `(L_CT, L_VRD)` of one image, computed on the f64 reference path with
/// the student reading cognition texts under `student_prompt` and the
/// teacher under `teacher_prompt`.
pub fn distill_losses(
    student: &VisualEncoder,
    teacher: &VisualEncoder,
    text: &TextEncoder,
    phrases: &[usize],
    img: &ImageTensor,
    student_prompt: &PromptTemplate,
    teacher_prompt: &PromptTemplate,
) -> (f64, f64) {
    let side = |enc: &VisualEncoder, prompt: &PromptTemplate| {
        let f = enc.encode(img).unwrap();
        let head = enc.head();
        let cls = project(&Mat::row_vector(f.class_token()), &head).unwrap();
        let cls: Vec<f64> = cls.data().iter().map(|&v| v as f64).collect();
        let texts = encode_texts(text, phrases, prompt)
            .unwrap()
            .vectors
            .to_f64();
        let p =
            softmax64(&similarity_logits(&cls, &texts, enc.logit_scale().value() as f64).unwrap())
                .unwrap();
        let mean = mean_patch_token(&f.tokens.to_f64());
        let mean = Mat::row_vector(&mean.iter().map(|&v| v as f32).collect::<Vec<_>>());
        let pm: Vec<f64> = project(&mean, &head)
            .unwrap()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        (p, pm)
    };
    let (ps, ms) = side(student, student_prompt);
    let (pt, mt) = side(teacher, teacher_prompt);
    (
        cognition_transfer_loss(&ps, &pt).unwrap(),
        vrd_from_projected(&ms, &mt).unwrap().0,
    )
}
