//! Student and teacher visual encoders, the shared frozen text encoder and
//! the projection heads that map visual tokens into the text space.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{CtdnError, Result};
use crate::nn::params::{Archive, ParamStore};
use crate::nn::text::{TextConfig, TextTransformer, WordVocab};
use crate::nn::vit::{Vit, VitConfig};
use crate::tensor::Mat;

pub const STUDENT_PROMPT: &str = "an egocentric origami {}.";
pub const TEACHER_PROMPT: &str = "a clean origami {}.";

/// Row-major `H×W×3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(CtdnError::dims(format!(
                "{} values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(CtdnError::OutOfRange(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn check_patch_size(&self, patch: usize) -> Result<()> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(CtdnError::dims(format!(
                "image {}x{} not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut out = ImageTensor::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(y, x, self.pixel(top + y, left + x));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [0f32; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    *v = bilinear_sample(self.height, self.width, y, x, h, w, |yy, xx| {
                        self.pixels[(yy * self.width + xx) * 3 + c]
                    });
                }
                out.set_pixel(y, x, rgb);
            }
        }
        out
    }
}

/// Samples a source grid of `sh×sw` at output pixel `(y, x)` of an `oh×ow`
/// grid (align-corners = false).
pub fn bilinear_sample(
    sh: usize,
    sw: usize,
    y: usize,
    x: usize,
    oh: usize,
    ow: usize,
    get: impl Fn(usize, usize) -> f32,
) -> f32 {
    let fy = ((y as f32 + 0.5) * sh as f32 / oh as f32 - 0.5).clamp(0.0, (sh - 1) as f32);
    let fx = ((x as f32 + 0.5) * sw as f32 / ow as f32 - 0.5).clamp(0.0, (sw - 1) as f32);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
    let top = get(y0, x0) * (1.0 - tx) + get(y0, x1) * tx;
    let bot = get(y1, x0) * (1.0 - tx) + get(y1, x1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Text template with exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let n = template.matches("{}").count();
        if n != 1 {
            return Err(CtdnError::Config(format!(
                "prompt template `{template}` has {n} placeholders, expected 1"
            )));
        }
        Ok(PromptTemplate { template })
    }

    pub fn student() -> Self {
        PromptTemplate::new(STUDENT_PROMPT).expect("valid")
    }

    pub fn teacher() -> Self {
        PromptTemplate::new(TEACHER_PROMPT).expect("valid")
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    pub fn fill(&self, phrase: &str) -> String {
        self.template.replacen("{}", phrase, 1)
    }
}

/// Ordered phrase list; the line number of a phrase is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseVocab {
    phrases: Vec<String>,
}

impl PhraseVocab {
    pub fn new(phrases: Vec<String>) -> Self {
        PhraseVocab { phrases }
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrase(&self, id: usize) -> Result<&str> {
        self.phrases
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| CtdnError::UnknownPhrase(format!("phrase id {id}")))
    }

    pub fn id(&self, phrase: &str) -> Result<usize> {
        self.phrases
            .iter()
            .position(|p| p == phrase)
            .ok_or_else(|| CtdnError::UnknownPhrase(phrase.to_string()))
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.phrases {
            s.push_str(p);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        PhraseVocab {
            phrases: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| CtdnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CtdnError::io(path, e))?;
        Ok(PhraseVocab::parse(&text))
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    /// `N_v×C_v`; row 0 is the class token.
    pub tokens: Mat,
    /// Per block, head-averaged `N_v×N_v` attention.
    pub attention: Vec<Mat>,
    /// Grad-CAM activation map, `(h·w)×Z`, row-major over the patch grid:
    /// the normalized patch tokens entering the final block's attention.
    pub activation: Mat,
    /// Class-token row of the same normalized stream as `activation`.
    pub activation_cls: Vec<f32>,
    /// Residual stream entering the final block, `N_v×C_v`.
    pub residual: Mat,
    pub grid: (usize, usize),
}

impl VisualFeatures {
    pub fn class_token(&self) -> &[f32] {
        self.tokens.row(0)
    }

    pub fn patch_tokens(&self) -> Mat {
        let idx: Vec<usize> = (1..self.tokens.rows()).collect();
        self.tokens.select_rows(&idx)
    }
}

/// Encoded phrases, one row per requested phrase id.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub vectors: Mat,
    pub phrase_ids: Vec<usize>,
}

impl TextFeatures {
    pub fn row_of(&self, phrase_id: usize) -> Option<&[f32]> {
        self.phrase_ids
            .iter()
            .position(|&p| p == phrase_id)
            .map(|i| self.vectors.row(i))
    }
}

/// Affine map from visual width to text width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weight: Mat,
    pub bias: Mat,
    pub frozen: bool,
}

impl ProjectionHead {
    pub fn new(weight: Mat, bias: Mat, frozen: bool) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(CtdnError::dims(format!(
                "bias {:?} for weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(ProjectionHead {
            weight,
            bias,
            frozen,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Applies `tokens · W + b` row-wise.
pub fn project(tokens: &Mat, head: &ProjectionHead) -> Result<Mat> {
    if tokens.cols() != head.in_dim() {
        return Err(CtdnError::dims(format!(
            "tokens have {} columns, head expects {}",
            tokens.cols(),
            head.in_dim()
        )));
    }
    let mut out = tokens.matmul(&head.weight);
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(head.bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Learnable similarity scale `μ = exp(log_value)`, kept within `[1, 200]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitScale {
    pub log_value: f32,
}

impl LogitScale {
    pub const MIN: f32 = 1.0;
    pub const MAX: f32 = 200.0;

    pub fn new(mu: f32) -> Self {
        LogitScale {
            log_value: mu.clamp(Self::MIN, Self::MAX).ln(),
        }
    }

    pub fn value(&self) -> f32 {
        self.log_value.exp()
    }

    pub fn clamp(&mut self) {
        self.log_value = self.log_value.clamp(Self::MIN.ln(), Self::MAX.ln());
    }
}

impl Default for LogitScale {
    fn default() -> Self {
        LogitScale::new(100.0)
    }
}

/// A ViT plus its parameters. Student and teacher share this type; the
/// teacher has every parameter frozen.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub vit: Vit,
    pub store: ParamStore,
    pub prefix: String,
    pub seed: u64,
}

impl VisualEncoder {
    pub fn new(cfg: VitConfig, prefix: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vit = Vit::new(&mut store, &mut rng, prefix, cfg);
        VisualEncoder {
            vit,
            store,
            prefix: prefix.to_string(),
            seed,
        }
    }

    /// Trainable copy of `teacher` with parameters renamed to `prefix`.
    pub fn student_from(teacher: &VisualEncoder, prefix: &str) -> Result<Self> {
        let mut s = VisualEncoder::new(teacher.vit.cfg.clone(), prefix, teacher.seed);
        s.store.copy_prefixed(
            &teacher.store,
            &format!("{}.", teacher.prefix),
            &format!("{prefix}."),
        )?;
        s.store.unfreeze_all();
        Ok(s)
    }

    pub fn is_frozen(&self) -> bool {
        self.store.ids().all(|id| self.store.is_frozen(id))
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn head(&self) -> ProjectionHead {
        let frozen = self.store.is_frozen(self.vit.proj.0);
        ProjectionHead {
            weight: self.store.get(self.vit.proj.0).clone(),
            bias: self.store.get(self.vit.proj.1).clone(),
            frozen,
        }
    }

    pub fn logit_scale(&self) -> LogitScale {
        LogitScale {
            log_value: self.store.get(self.vit.logit_scale).get(0, 0),
        }
    }

    pub fn clamp_logit_scale(&mut self) {
        let mut s = self.logit_scale();
        s.clamp();
        self.store
            .get_mut(self.vit.logit_scale)
            .set(0, 0, s.log_value);
    }

    /// Forward pass without keeping a tape.
    pub fn encode(&self, image: &ImageTensor) -> Result<VisualFeatures> {
        image.check_patch_size(self.vit.cfg.patch)?;
        if image.height() != self.vit.cfg.image_size || image.width() != self.vit.cfg.image_size {
            return Err(CtdnError::dims(format!(
                "image {}x{} but encoder expects {}x{}",
                image.height(),
                image.width(),
                self.vit.cfg.image_size,
                self.vit.cfg.image_size
            )));
        }
        let mut g = Graph::new();
        let fwd = self.vit.forward(&mut g, &self.store, &[image]);
        let tokens = g.value(fwd.tokens).clone();
        let n = tokens.rows();
        let act_rows: Vec<usize> = (1..n).collect();
        let normed = self
            .vit
            .final_pre_norm(&mut g, &self.store, fwd.final_input);
        let activation = g.value(normed).select_rows(&act_rows);
        let activation_cls = g.value(normed).row(0).to_vec();
        let residual = g.value(fwd.final_input).clone();
        let side = self.vit.cfg.grid();
        Ok(VisualFeatures {
            tokens,
            attention: fwd.attention.into_iter().map(|mut l| l.remove(0)).collect(),
            activation,
            activation_cls,
            residual,
            grid: (side, side),
        })
    }

    pub fn to_archive(&self, meta: BTreeMap<String, String>) -> Archive {
        let mut meta = meta;
        meta.insert("kind".into(), "visual".into());
        meta.insert("prefix".into(), self.prefix.clone());
        meta.extend(vit_meta(&self.vit.cfg));
        self.store.to_archive(self.seed, meta)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let prefix = archive
            .meta
            .get("prefix")
            .cloned()
            .ok_or_else(|| CtdnError::MissingCheckpoint("archive has no prefix".into()))?;
        let cfg = vit_cfg_from_meta(&archive.meta)?;
        let mut enc = VisualEncoder::new(cfg, &prefix, archive.seed);
        enc.store.load_archive(archive)?;
        Ok(enc)
    }
}

fn vit_meta(cfg: &VitConfig) -> BTreeMap<String, String> {
    [
        ("vit.image_size", cfg.image_size),
        ("vit.patch", cfg.patch),
        ("vit.dim", cfg.dim),
        ("vit.depth", cfg.depth),
        ("vit.heads", cfg.heads),
        ("vit.mlp_ratio", cfg.mlp_ratio),
        ("vit.embed_dim", cfg.embed_dim),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CtdnError::MissingCheckpoint(format!("archive metadata lacks {key}")))
}

fn vit_cfg_from_meta(meta: &BTreeMap<String, String>) -> Result<VitConfig> {
    Ok(VitConfig {
        image_size: meta_usize(meta, "vit.image_size")?,
        patch: meta_usize(meta, "vit.patch")?,
        dim: meta_usize(meta, "vit.dim")?,
        depth: meta_usize(meta, "vit.depth")?,
        heads: meta_usize(meta, "vit.heads")?,
        mlp_ratio: meta_usize(meta, "vit.mlp_ratio")?,
        embed_dim: meta_usize(meta, "vit.embed_dim")?,
    })
}

/// Frozen-after-pretraining text encoder over a phrase vocabulary.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub model: TextTransformer,
    pub store: ParamStore,
    pub phrases: PhraseVocab,
    pub seed: u64,
}

impl TextEncoder {
    /// Word vocabulary covers every phrase plus the two default prompts and
    /// any `extra_prompts`.
    pub fn new(cfg: TextConfig, phrases: PhraseVocab, extra_prompts: &[&str], seed: u64) -> Self {
        let mut texts: Vec<&str> = phrases.phrases().iter().map(String::as_str).collect();
        let prompts = [
            STUDENT_PROMPT.replace("{}", ""),
            TEACHER_PROMPT.replace("{}", ""),
        ];
        let extra: Vec<String> = extra_prompts.iter().map(|p| p.replace("{}", "")).collect();
        texts.extend(prompts.iter().map(String::as_str));
        texts.extend(extra.iter().map(String::as_str));
        let vocab = WordVocab::from_texts(texts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47);
        let mut store = ParamStore::new();
        let model = TextTransformer::new(&mut store, &mut rng, "text", cfg, vocab);
        TextEncoder {
            model,
            store,
            phrases,
            seed,
        }
    }

    pub fn token_ids(&self, phrase_id: usize, prompt: &PromptTemplate) -> Result<Vec<usize>> {
        let phrase = self.phrases.phrase(phrase_id)?;
        self.model.vocab.encode(&prompt.fill(phrase))
    }

    pub fn is_frozen(&self) -> bool {
        self.store.ids().all(|id| self.store.is_frozen(id))
    }

    pub fn to_archive(&self, meta: BTreeMap<String, String>) -> Archive {
        let mut meta = meta;
        meta.insert("kind".into(), "text".into());
        meta.insert("phrases".into(), self.phrases.phrases().join("|"));
        let c = &self.model.cfg;
        for (k, v) in [
            ("text.dim", c.dim),
            ("text.depth", c.depth),
            ("text.heads", c.heads),
            ("text.max_len", c.max_len),
            ("text.embed_dim", c.embed_dim),
        ] {
            meta.insert(k.into(), v.to_string());
        }
        self.store.to_archive(self.seed, meta)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let m = &archive.meta;
        let cfg = TextConfig {
            dim: meta_usize(m, "text.dim")?,
            depth: meta_usize(m, "text.depth")?,
            heads: meta_usize(m, "text.heads")?,
            max_len: meta_usize(m, "text.max_len")?,
            embed_dim: meta_usize(m, "text.embed_dim")?,
        };
        let phrases = PhraseVocab::new(
            m.get("phrases")
                .ok_or_else(|| CtdnError::MissingCheckpoint("archive lacks phrases".into()))?
                .split('|')
                .map(String::from)
                .collect(),
        );
        let mut enc = TextEncoder::new(cfg, phrases, &[], archive.seed);
        enc.store.load_archive(archive)?;
        Ok(enc)
    }
}

/// Student forward for a single image. The returned features are detached
/// copies; training code builds its own tape through [`Vit::forward`].
pub fn encode_image_student(
    student: &VisualEncoder,
    image: &ImageTensor,
) -> Result<VisualFeatures> {
    student.encode(image)
}

/// Teacher forward; fails unless the teacher is fully frozen.
pub fn encode_image_teacher(
    teacher: &VisualEncoder,
    image: &ImageTensor,
) -> Result<VisualFeatures> {
    if !teacher.is_frozen() {
        return Err(CtdnError::MissingCheckpoint(
            "teacher parameters are not frozen; load a pretrained teacher checkpoint".into(),
        ));
    }
    teacher.encode(image)
}

/// Encodes `prompt.fill(phrase)` for each phrase id; never tracks gradient.
pub fn encode_texts(
    text: &TextEncoder,
    phrase_ids: &[usize],
    prompt: &PromptTemplate,
) -> Result<TextFeatures> {
    let seqs = phrase_ids
        .iter()
        .map(|&id| text.token_ids(id, prompt))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let mut frozen = text.store.clone();
    frozen.freeze_all();
    let v = text.model.forward(&mut g, &frozen, &seqs)?;
    Ok(TextFeatures {
        vectors: g.value(v).clone(),
        phrase_ids: phrase_ids.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> VitConfig {
        VitConfig {
            image_size: 16,
            patch: 8,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 8,
        }
    }

    #[test]
    fn prompt_needs_single_placeholder() {
        assert!(PromptTemplate::new("a {} and {}").is_err());
        assert!(PromptTemplate::new("nothing").is_err());
        assert_eq!(
            PromptTemplate::student().fill("table"),
            "an egocentric origami table."
        );
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(2, 2, vec![0.5; 12]).is_ok());
        assert!(ImageTensor::new(2, 2, vec![1.5; 12]).is_err());
        assert!(ImageTensor::new(2, 2, vec![0.5; 11]).is_err());
        assert!(ImageTensor::zeros(12, 16).check_patch_size(8).is_err());
    }

    #[test]
    fn zero_image_gives_finite_tokens_and_stochastic_attention() {
        let enc = VisualEncoder::new(small_cfg(), "student", 1);
        let f = encode_image_student(&enc, &ImageTensor::zeros(16, 16)).unwrap();
        assert!(f.tokens.is_finite());
        assert_eq!(f.tokens.rows(), 5);
        assert_eq!(f.attention.len(), 2);
        for a in &f.attention {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(f.activation.shape(), (4, 16));
        let again = encode_image_student(&enc, &ImageTensor::zeros(16, 16)).unwrap();
        assert_eq!(f.tokens, again.tokens);
    }

    #[test]
    fn wrong_size_is_dimension_error() {
        let enc = VisualEncoder::new(small_cfg(), "student", 1);
        assert!(matches!(
            enc.encode(&ImageTensor::zeros(12, 16)),
            Err(CtdnError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn unfrozen_teacher_rejected() {
        let enc = VisualEncoder::new(small_cfg(), "teacher", 1);
        assert!(encode_image_teacher(&enc, &ImageTensor::zeros(16, 16)).is_err());
    }

    #[test]
    fn text_encoding_rows_and_unknown_ids() {
        let vocab = PhraseVocab::new(vec!["table".into(), "my left hand".into()]);
        let te = TextEncoder::new(TextConfig::default(), vocab, &[], 3);
        let empty = encode_texts(&te, &[], &PromptTemplate::student()).unwrap();
        assert_eq!(empty.vectors.rows(), 0);
        let f = encode_texts(&te, &[1, 0, 1], &PromptTemplate::student()).unwrap();
        assert_eq!(f.vectors.rows(), 3);
        assert_eq!(f.vectors.row(0), f.vectors.row(2));
        assert!(matches!(
            encode_texts(&te, &[5], &PromptTemplate::student()),
            Err(CtdnError::UnknownPhrase(_))
        ));
    }

    #[test]
    fn projection_identity_and_zero() {
        let tokens = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f32);
        let id = ProjectionHead::new(Mat::identity(4), Mat::zeros(1, 4), true).unwrap();
        assert_eq!(project(&tokens, &id).unwrap(), tokens);
        let zero = ProjectionHead::new(Mat::zeros(4, 2), Mat::zeros(1, 2), true).unwrap();
        assert!(project(&tokens, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(project(&Mat::zeros(1, 3), &id).is_err());
    }

    #[test]
    fn logit_scale_clamps() {
        let mut s = LogitScale { log_value: 10.0 };
        s.clamp();
        assert!((s.value() - 200.0).abs() < 1e-2);
        assert!((LogitScale::default().value() - 100.0).abs() < 1e-3);
    }
}
