//! Stage-1 training objectives.
//!
//! Every loss is a pure double precision function with a hand-derived
//! gradient (`*_grad`). The `*_var` adapters wrap them as graph nodes so the
//! training loop backpropagates through exactly the same arithmetic the
//! finite-difference suite checks.

use crate::autograd::{Graph, Var};
use crate::encoders::{ProjectionHead, TextFeatures, VisualFeatures};
use crate::error::{CtdnError, Result};
use crate::tensor::{dot64, norm64, Mat, Mat64};

/// Probability and norm floor.
pub const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabelVector {
    labels: Vec<u8>,
}

impl ClassLabelVector {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(CtdnError::OutOfRange(format!(
                "label entry {v} not in {{0, 1}}"
            )));
        }
        Ok(ClassLabelVector { labels })
    }

    pub fn zeros(n: usize) -> Self {
        ClassLabelVector { labels: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn set(&mut self, i: usize, present: bool) {
        self.labels[i] = present as u8;
    }

    pub fn any(&self) -> bool {
        self.labels.contains(&1)
    }

    /// Indices of present classes.
    pub fn present(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_bitstring(&self) -> String {
        self.labels
            .iter()
            .map(|&v| if v == 1 { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(CtdnError::OutOfRange(format!("label character `{other}`"))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(|labels| ClassLabelVector { labels })
    }
}

/// Foreground and background cognition phrase ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CognitionSet {
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
}

impl CognitionSet {
    pub fn new(foreground: Vec<usize>, background: Vec<usize>) -> Result<Self> {
        if foreground.is_empty() || background.is_empty() {
            return Err(CtdnError::Config(
                "cognition set needs at least one fg and one bg phrase".into(),
            ));
        }
        if foreground.iter().any(|f| background.contains(f)) {
            return Err(CtdnError::Config(
                "foreground and background cognition sets overlap".into(),
            ));
        }
        Ok(CognitionSet {
            foreground,
            background,
        })
    }

    /// Foreground ids followed by background ids.
    pub fn all(&self) -> Vec<usize> {
        self.foreground
            .iter()
            .chain(&self.background)
            .copied()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.foreground.len() + self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

/// Patch-token assignment. Indices are 0-based rows of the patch-token
/// matrix (class token excluded).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenPartition {
    pub fg_indices: Vec<usize>,
    pub bg_indices: Vec<usize>,
    pub uncertain_indices: Vec<usize>,
    pub fg_scores: Vec<f64>,
    pub bg_scores: Vec<f64>,
    /// Tokens with zero norm, placed in the uncertain set.
    pub zero_norm_tokens: usize,
}

impl TokenPartition {
    pub fn len(&self) -> usize {
        self.fg_indices.len() + self.bg_indices.len() + self.uncertain_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5.0,
            lambda2: 2.5,
            lambda3: 0.2,
            delta: 0.025,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CtdnError::Config(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Argument order of the cognition-transfer KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlOrder {
    /// `KL(P_student ‖ P_teacher)`
    #[default]
    StudentFirst,
    /// `KL(P_teacher ‖ P_student)`
    TeacherFirst,
}

impl std::str::FromStr for KlOrder {
    type Err = CtdnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_first" => Ok(KlOrder::StudentFirst),
            "teacher_first" => Ok(KlOrder::TeacherFirst),
            other => Err(CtdnError::Config(format!("unknown kl order `{other}`"))),
        }
    }
}

impl std::fmt::Display for KlOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KlOrder::StudentFirst => "student_first",
            KlOrder::TeacherFirst => "teacher_first",
        })
    }
}

// ---- similarity -----------------------------------------------------------

/// `μ · cos(query, row_i)` for every text row.
pub fn similarity_logits(query: &[f64], texts: &Mat64, mu: f64) -> Result<Vec<f64>> {
    if query.len() != texts.cols {
        return Err(CtdnError::LengthMismatch {
            expected: texts.cols,
            got: query.len(),
        });
    }
    let qn = norm64(query);
    if qn == 0.0 {
        return Err(CtdnError::ZeroVector("similarity query".into()));
    }
    (0..texts.rows)
        .map(|i| {
            let row = texts.row(i);
            let rn = norm64(row);
            if rn == 0.0 {
                return Err(CtdnError::ZeroVector(format!("text row {i}")));
            }
            Ok(dot64(query, row) / (qn * rn) * mu)
        })
        .collect()
}

/// Graph version: `μ · normalize(queries) · normalize(texts)ᵀ`, with `μ`
/// given as the log-parameter node.
pub fn similarity_logits_var(g: &mut Graph, queries: Var, texts: Var, log_mu: Var) -> Var {
    let q = g.normalize_rows(queries);
    let t = g.normalize_rows(texts);
    let cos = g.matmul_nt(q, t);
    let mu = g.exp(log_mu);
    g.mul_scalar(cos, mu)
}

// ---- relation (BCE) ---------------------------------------------------------

fn log_sigmoid(z: f64) -> f64 {
    // -softplus(-z)
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over classes, log arguments floored at 1e-12.
pub fn relation_loss(logits: &[f64], labels: &ClassLabelVector) -> Result<f64> {
    relation_loss_grad(logits, labels).map(|(v, _)| v)
}

pub fn relation_loss_grad(logits: &[f64], labels: &ClassLabelVector) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(CtdnError::LengthMismatch {
            expected: labels.len(),
            got: logits.len(),
        });
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let lf = FLOOR.ln();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels.as_slice()) {
        if !z.is_finite() {
            return Err(CtdnError::NonFinite("relation logits".into()));
        }
        let y = y as f64;
        let lp = log_sigmoid(z);
        let lq = log_sigmoid(-z);
        let s = sigmoid(z);
        let mut g = 0.0;
        if lp > lf {
            total -= y * lp;
            g -= y * (1.0 - s);
        } else {
            total -= y * lf;
        }
        if lq > lf {
            total -= (1.0 - y) * lq;
            g += (1.0 - y) * s;
        } else {
            total -= (1.0 - y) * lf;
        }
        grad.push(g / n);
    }
    Ok((total / n, grad))
}

/// Batch-mean relation loss over rows of a `B×N_t` logit node.
pub fn relation_loss_var(g: &mut Graph, logits: Var, labels: &[ClassLabelVector]) -> Result<Var> {
    let lv = g.value(logits).to_f64();
    if lv.rows != labels.len() {
        return Err(CtdnError::LengthMismatch {
            expected: labels.len(),
            got: lv.rows,
        });
    }
    let b = lv.rows.max(1) as f64;
    let mut total = 0.0;
    let mut grad = Mat64::zeros(lv.rows, lv.cols);
    for (r, lab) in labels.iter().enumerate() {
        let (v, gr) = relation_loss_grad(lv.row(r), lab)?;
        total += v / b;
        for (d, x) in grad.row_mut(r).iter_mut().zip(gr) {
            *d = x / b;
        }
    }
    Ok(scalar_node(g, &[logits], total, vec![grad.to_f32()]))
}

// ---- cognition transfer -------------------------------------------------------

pub fn softmax64(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CtdnError::NonFinite("softmax input".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Softmax of student and teacher cognition logits.
pub fn cognition_distributions(
    student_logits: &[f64],
    teacher_logits: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if student_logits.len() != teacher_logits.len() {
        return Err(CtdnError::LengthMismatch {
            expected: teacher_logits.len(),
            got: student_logits.len(),
        });
    }
    Ok((softmax64(student_logits)?, softmax64(teacher_logits)?))
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-4 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CtdnError::InvalidDistribution(format!(
            "{what} sums to {s}"
        )));
    }
    Ok(())
}

/// `Σ P(i)·log(P(i)/P'(i))`; zero-probability terms vanish, `P'` floored.
pub fn cognition_transfer_loss(p: &[f64], p_prime: &[f64]) -> Result<f64> {
    cognition_transfer_grad(p, p_prime).map(|(v, _, _)| v)
}

/// Value plus gradients with respect to `P` and `P'`.
pub fn cognition_transfer_grad(p: &[f64], p_prime: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if p.len() != p_prime.len() {
        return Err(CtdnError::LengthMismatch {
            expected: p_prime.len(),
            got: p.len(),
        });
    }
    check_distribution(p, "P")?;
    check_distribution(p_prime, "P'")?;
    let mut v = 0.0;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; p.len()];
    for i in 0..p.len() {
        let q = p_prime[i].max(FLOOR);
        if p[i] > 0.0 {
            v += p[i] * (p[i] / q).ln();
            dp[i] = (p[i] / q).ln() + 1.0;
            if p_prime[i] > FLOOR {
                dq[i] = -p[i] / q;
            }
        }
    }
    Ok((v.max(0.0), dp, dq))
}

/// KL term as a function of the student logits, teacher distribution held
/// constant. Returns the value and the gradient w.r.t. the student logits.
pub fn cognition_transfer_grad_logits(
    student_logits: &[f64],
    teacher_probs: &[f64],
    order: KlOrder,
) -> Result<(f64, Vec<f64>)> {
    let p = softmax64(student_logits)?;
    match order {
        KlOrder::StudentFirst => {
            let (v, dp, _) = cognition_transfer_grad(&p, teacher_probs)?;
            let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            Ok((v, p.iter().zip(&dp).map(|(pi, gi)| pi * (gi - s)).collect()))
        }
        KlOrder::TeacherFirst => {
            let (v, _, dq) = cognition_transfer_grad(teacher_probs, &p)?;
            let s: f64 = p.iter().zip(&dq).map(|(a, b)| a * b).sum();
            Ok((v, p.iter().zip(&dq).map(|(pi, gi)| pi * (gi - s)).collect()))
        }
    }
}

/// Batch-mean cognition transfer over rows of `B×N_cog` student logits.
pub fn cognition_transfer_var(
    g: &mut Graph,
    student_logits: Var,
    teacher_probs: &Mat64,
    order: KlOrder,
) -> Result<Var> {
    let sv = g.value(student_logits).to_f64();
    if (sv.rows, sv.cols) != (teacher_probs.rows, teacher_probs.cols) {
        return Err(CtdnError::dims("cognition logits vs teacher distribution"));
    }
    let b = sv.rows.max(1) as f64;
    let mut total = 0.0;
    let mut grad = Mat64::zeros(sv.rows, sv.cols);
    for r in 0..sv.rows {
        let (v, gr) = cognition_transfer_grad_logits(sv.row(r), teacher_probs.row(r), order)?;
        total += v / b;
        for (d, x) in grad.row_mut(r).iter_mut().zip(gr) {
            *d = x / b;
        }
    }
    Ok(scalar_node(
        g,
        &[student_logits],
        total,
        vec![grad.to_f32()],
    ))
}

// ---- visual representation distillation --------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Head64 {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl From<&ProjectionHead> for Head64 {
    fn from(h: &ProjectionHead) -> Self {
        Head64 {
            weight: h.weight.to_f64(),
            bias: h.bias.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

impl Head64 {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

/// Mean of rows `1..N` (class token excluded).
pub fn mean_patch_token(tokens: &Mat64) -> Vec<f64> {
    let mut m = vec![0.0; tokens.cols];
    let n = tokens.rows.saturating_sub(1).max(1) as f64;
    for r in 1..tokens.rows {
        for (a, b) in m.iter_mut().zip(tokens.row(r)) {
            *a += b / n;
        }
    }
    m
}

/// Mean squared difference of two projected vectors and its gradient
/// w.r.t. the first.
pub fn vrd_from_projected(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(CtdnError::LengthMismatch {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    let c = student.len().max(1) as f64;
    let mut v = 0.0;
    let mut g = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        let d = s - t;
        v += d * d / c;
        g.push(2.0 * d / c);
    }
    Ok((v, g))
}

/// Gradients of the distillation loss w.r.t. the student side.
#[derive(Debug, Clone, PartialEq)]
pub struct VrdGrad {
    pub value: f64,
    pub tokens: Mat64,
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

pub fn vrd_loss(
    student: &Mat64,
    teacher: &Mat64,
    psi: &Head64,
    psi_teacher: &Head64,
) -> Result<f64> {
    vrd_loss_grad(student, teacher, psi, psi_teacher).map(|g| g.value)
}

pub fn vrd_loss_grad(
    student: &Mat64,
    teacher: &Mat64,
    psi: &Head64,
    psi_teacher: &Head64,
) -> Result<VrdGrad> {
    if student.rows != teacher.rows || student.rows < 2 {
        return Err(CtdnError::dims(format!(
            "student has {} tokens, teacher {}",
            student.rows, teacher.rows
        )));
    }
    if psi.weight.rows != student.cols || psi_teacher.weight.rows != teacher.cols {
        return Err(CtdnError::dims("projection input width"));
    }
    if psi.weight.cols != psi_teacher.weight.cols {
        return Err(CtdnError::dims("projection output width"));
    }
    let ms = mean_patch_token(student);
    let mt = mean_patch_token(teacher);
    let (value, gp) = vrd_from_projected(&psi.apply(&ms), &psi_teacher.apply(&mt))?;
    // d/dmean = W · gp
    let gm: Vec<f64> = (0..psi.weight.rows)
        .map(|i| dot64(psi.weight.row(i), &gp))
        .collect();
    let n = (student.rows - 1) as f64;
    let mut tokens = Mat64::zeros(student.rows, student.cols);
    for r in 1..student.rows {
        for (d, x) in tokens.row_mut(r).iter_mut().zip(&gm) {
            *d = x / n;
        }
    }
    let mut weight = Mat64::zeros(psi.weight.rows, psi.weight.cols);
    for i in 0..psi.weight.rows {
        for (d, x) in weight.row_mut(i).iter_mut().zip(&gp) {
            *d = ms[i] * x;
        }
    }
    Ok(VrdGrad {
        value,
        tokens,
        weight,
        bias: gp,
    })
}

/// Distillation loss on encoder outputs, using each side's projection head.
pub fn vrd_loss_features(
    student: &VisualFeatures,
    teacher: &VisualFeatures,
    psi: &ProjectionHead,
    psi_teacher: &ProjectionHead,
) -> Result<f64> {
    vrd_loss(
        &student.tokens.to_f64(),
        &teacher.tokens.to_f64(),
        &Head64::from(psi),
        &Head64::from(psi_teacher),
    )
}

/// Batch-mean distillation between projected student means (`B×C` node) and
/// constant projected teacher means.
pub fn vrd_var(g: &mut Graph, student_proj: Var, teacher_proj: &Mat) -> Result<Var> {
    let sv = g.value(student_proj).to_f64();
    let tv = teacher_proj.to_f64();
    if (sv.rows, sv.cols) != (tv.rows, tv.cols) {
        return Err(CtdnError::dims("projected means"));
    }
    let b = sv.rows.max(1) as f64;
    let mut total = 0.0;
    let mut grad = Mat64::zeros(sv.rows, sv.cols);
    for r in 0..sv.rows {
        let (v, gr) = vrd_from_projected(sv.row(r), tv.row(r))?;
        total += v / b;
        for (d, x) in grad.row_mut(r).iter_mut().zip(gr) {
            *d = x / b;
        }
    }
    Ok(scalar_node(g, &[student_proj], total, vec![grad.to_f32()]))
}

// ---- foreground-background decoupling ---------------------------------------

/// Mean foreground and background cognition embeddings.
pub fn compute_prototypes(cog: &TextFeatures, set: &CognitionSet) -> Result<Prototypes> {
    let mean = |ids: &[usize]| -> Result<Vec<f64>> {
        let mut m = vec![0.0; cog.vectors.cols()];
        for &id in ids {
            let row = cog
                .row_of(id)
                .ok_or_else(|| CtdnError::UnknownPhrase(format!("phrase id {id} not encoded")))?;
            for (a, &b) in m.iter_mut().zip(row) {
                *a += b as f64 / ids.len() as f64;
            }
        }
        Ok(m)
    };
    let p = Prototypes {
        fg: mean(&set.foreground)?,
        bg: mean(&set.background)?,
    };
    if norm64(&p.fg) == 0.0 || norm64(&p.bg) == 0.0 {
        return Err(CtdnError::ZeroVector("prototype".into()));
    }
    Ok(p)
}

/// Splits projected patch tokens by `s_f − s_b` against margin `delta`.
pub fn categorize_tokens(
    projected: &Mat64,
    protos: &Prototypes,
    delta: f64,
) -> Result<TokenPartition> {
    if !(delta >= 0.0) {
        return Err(CtdnError::OutOfRange(format!("margin {delta}")));
    }
    if protos.fg.len() != projected.cols || protos.bg.len() != projected.cols {
        return Err(CtdnError::dims("prototype width"));
    }
    let (nf, nb) = (norm64(&protos.fg), norm64(&protos.bg));
    if nf == 0.0 || nb == 0.0 {
        return Err(CtdnError::ZeroVector("prototype".into()));
    }
    let mut part = TokenPartition::default();
    for i in 0..projected.rows {
        let t = projected.row(i);
        let nt = norm64(t);
        if nt == 0.0 {
            part.zero_norm_tokens += 1;
            part.fg_scores.push(0.0);
            part.bg_scores.push(0.0);
            part.uncertain_indices.push(i);
            continue;
        }
        let sf = dot64(t, &protos.fg) / (nt * nf);
        let sb = dot64(t, &protos.bg) / (nt * nb);
        part.fg_scores.push(sf);
        part.bg_scores.push(sb);
        let d = sf - sb;
        if d > delta {
            part.fg_indices.push(i);
        } else if d < -delta {
            part.bg_indices.push(i);
        } else {
            part.uncertain_indices.push(i);
        }
    }
    if part.zero_norm_tokens > 0 {
        log::warn!(
            "{} zero-norm tokens assigned to the uncertain set",
            part.zero_norm_tokens
        );
    }
    Ok(part)
}

/// Pairwise decoupling loss over unordered distinct pairs; empty terms
/// contribute zero.
pub fn fbd_loss(tokens: &Mat64, partition: &TokenPartition) -> Result<f64> {
    fbd_loss_grad(tokens, partition).map(|(v, _)| v)
}

pub fn fbd_loss_grad(tokens: &Mat64, partition: &TokenPartition) -> Result<(f64, Mat64)> {
    for &i in partition.fg_indices.iter().chain(&partition.bg_indices) {
        if i >= tokens.rows {
            return Err(CtdnError::IndexOutOfRange {
                index: i,
                len: tokens.rows,
            });
        }
    }
    let fg = &partition.fg_indices;
    let bg = &partition.bg_indices;
    let sel: Vec<usize> = fg.iter().chain(bg).copied().collect();
    let nsel = sel.len();
    let d = tokens.cols;
    let mut grad = Mat64::zeros(tokens.rows, d);
    if nsel < 2 {
        return Ok((0.0, grad));
    }
    // unit rows of the selected tokens and their Gram matrix
    let mut norms = Vec::with_capacity(nsel);
    let mut unit = Mat64::zeros(nsel, d);
    for (k, &i) in sel.iter().enumerate() {
        let n = norm64(tokens.row(i)).max(FLOOR);
        norms.push(n);
        for (u, x) in unit.row_mut(k).iter_mut().zip(tokens.row(i)) {
            *u = x / n;
        }
    }
    let mut gram = Mat64::zeros(nsel, nsel);
    for a in 0..nsel {
        for b in a + 1..nsel {
            let c = dot64(unit.row(a), unit.row(b));
            gram.data[a * nsel + b] = c;
            gram.data[b * nsel + a] = c;
        }
    }
    let nf = fg.len();
    let pairs_f = nf * nf.saturating_sub(1) / 2;
    let pairs_b = bg.len() * bg.len().saturating_sub(1) / 2;
    let pairs_n = nf * bg.len();
    let wf = if pairs_f > 0 {
        0.25 / pairs_f as f64
    } else {
        0.0
    };
    let wb = if pairs_b > 0 {
        0.25 / pairs_b as f64
    } else {
        0.0
    };
    let wn = if pairs_n > 0 {
        0.5 / pairs_n as f64
    } else {
        0.0
    };
    let mut value = 0.0;
    // coefficient of |cos| for each pair: positives −w, negatives +w
    let mut coef = Mat64::zeros(nsel, nsel);
    for a in 0..nsel {
        for b in a + 1..nsel {
            let (fa, fb) = (a < nf, b < nf);
            let c = gram.data[a * nsel + b].abs();
            let w = match (fa, fb) {
                (true, true) => {
                    value += wf * (1.0 - c);
                    -wf
                }
                (false, false) => {
                    value += wb * (1.0 - c);
                    -wb
                }
                _ => {
                    value += wn * c;
                    wn
                }
            };
            coef.data[a * nsel + b] = w;
            coef.data[b * nsel + a] = w;
        }
    }
    // ∂|c_ab|/∂x_a = sign(c_ab)·(u_b − c_ab·u_a)/‖x_a‖
    for a in 0..nsel {
        let mut acc = vec![0.0; d];
        for b in 0..nsel {
            if a == b {
                continue;
            }
            let c = gram.data[a * nsel + b];
            let w = coef.data[a * nsel + b] * c.signum() * (c != 0.0) as u8 as f64;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                acc[k] += w * (unit.get(b, k) - c * unit.get(a, k));
            }
        }
        let row = grad.row_mut(sel[a]);
        for k in 0..d {
            row[k] += acc[k] / norms[a];
        }
    }
    Ok((value, grad))
}

/// Batch-mean decoupling loss. `rows[b]` lists the token-matrix rows holding
/// image `b`'s patch tokens, in partition index order.
pub fn fbd_var(
    g: &mut Graph,
    tokens: Var,
    rows: &[Vec<usize>],
    partitions: &[TokenPartition],
) -> Result<Var> {
    if rows.len() != partitions.len() {
        return Err(CtdnError::LengthMismatch {
            expected: partitions.len(),
            got: rows.len(),
        });
    }
    let tv = g.value(tokens);
    let (n, c) = tv.shape();
    let b = rows.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Mat::zeros(n, c);
    for (r, p) in rows.iter().zip(partitions) {
        let sub = tv.select_rows(r).to_f64();
        let (v, gsub) = fbd_loss_grad(&sub, p)?;
        total += v / b;
        for (k, &row) in r.iter().enumerate() {
            for (d, x) in grad.row_mut(row).iter_mut().zip(gsub.row(k)) {
                *d += (*x / b) as f32;
            }
        }
    }
    Ok(scalar_node(g, &[tokens], total, vec![grad]))
}

/// `l_rel + λ1·l_ct + λ2·l_vrd + λ3·l_fbd`
pub fn total_loss(l_rel: f64, l_ct: f64, l_vrd: f64, l_fbd: f64, w: &LossWeights) -> Result<f64> {
    if [l_rel, l_ct, l_vrd, l_fbd].iter().any(|v| !v.is_finite()) {
        return Err(CtdnError::NonFinite("loss term".into()));
    }
    Ok(l_rel + w.lambda1 * l_ct + w.lambda2 * l_vrd + w.lambda3 * l_fbd)
}

/// Scalar node whose gradient w.r.t. each parent is `upstream · grads[k]`.
fn scalar_node(g: &mut Graph, parents: &[Var], value: f64, grads: Vec<Mat>) -> Var {
    g.custom(
        parents,
        Mat::scalar(value as f32),
        Box::new(move |up, needs| {
            let s = up.get(0, 0);
            grads
                .iter()
                .zip(needs)
                .map(|(gr, &need)| need.then(|| gr.map(|x| x * s)))
                .collect()
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(v: &[u8]) -> ClassLabelVector {
        ClassLabelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let t = Mat64::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = similarity_logits(&[1.0, 0.0], &t, 10.0).unwrap();
        assert_abs_diff_eq!(l[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], 0.0, epsilon = 1e-12);
        let l = similarity_logits(&[1.0, 1.0], &t, 2.0).unwrap();
        assert_abs_diff_eq!(l[0], 2.0 / 2f64.sqrt(), epsilon = 1e-6);
        assert!(matches!(
            similarity_logits(&[0.0, 0.0], &t, 1.0),
            Err(CtdnError::ZeroVector(_))
        ));
        let z = Mat64::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(similarity_logits(&[1.0, 0.0], &z, 1.0).is_err());
    }

    #[test]
    fn relation_examples() {
        assert_abs_diff_eq!(
            relation_loss(&[0.0, 0.0], &labels(&[1, 0])).unwrap(),
            2f64.ln(),
            epsilon = 1e-9
        );
        assert!(relation_loss(&[40.0, -40.0], &labels(&[1, 0])).unwrap() < 1e-10);
        assert_abs_diff_eq!(
            relation_loss(&[1.0], &labels(&[1])).unwrap(),
            0.313262,
            epsilon = 1e-6
        );
        assert!(relation_loss(&[1.0], &labels(&[1, 0])).is_err());
    }

    #[test]
    fn cognition_examples() {
        let (p, _) = cognition_distributions(&[0.0, 0.0, 0.0], &[5.0, 5.0, 5.0]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let (p, _) = cognition_distributions(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.268941, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.731059, epsilon = 1e-6);
        assert!(cognition_distributions(&[f64::NAN], &[0.0]).is_err());
        assert_eq!(
            cognition_transfer_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            cognition_transfer_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        assert!(matches!(
            cognition_transfer_loss(&[0.6, 0.6], &[0.5, 0.5]),
            Err(CtdnError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn vrd_examples() {
        let c = 64;
        let mut w = Mat64::zeros(c, c);
        for i in 0..c {
            w.data[i * c + i] = 1.0;
        }
        let head = Head64 {
            weight: w,
            bias: vec![0.0; c],
        };
        let mut s = Mat64::zeros(3, c);
        s.data[c] = 1.0; // token 1
        s.data[2 * c] = 1.0; // token 2
        let t = Mat64::zeros(3, c);
        assert_abs_diff_eq!(
            vrd_loss(&s, &t, &head, &head).unwrap(),
            1.0 / 64.0,
            epsilon = 1e-12
        );
        assert_eq!(vrd_loss(&s, &s, &head, &head).unwrap(), 0.0);
        // scaling the residual by k scales the loss by k²
        let mut s2 = s.clone();
        s2.data.iter_mut().for_each(|v| *v *= 2.0);
        assert_abs_diff_eq!(
            vrd_loss(&s2, &t, &head, &head).unwrap(),
            4.0 / 64.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn prototypes_and_partition() {
        let tf = TextFeatures {
            vectors: Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap(),
            phrase_ids: vec![4, 5, 6],
        };
        let set = CognitionSet::new(vec![4, 5], vec![6]).unwrap();
        let p = compute_prototypes(&tf, &set).unwrap();
        assert_eq!(p.fg, vec![0.5, 0.5]);
        let p2 = compute_prototypes(&tf, &CognitionSet::new(vec![5, 4], vec![6]).unwrap()).unwrap();
        assert_eq!(p, p2);
        assert!(compute_prototypes(&tf, &CognitionSet::new(vec![9], vec![6]).unwrap()).is_err());

        let protos = Prototypes {
            fg: vec![1.0, 0.0],
            bg: vec![0.0, 1.0],
        };
        let toks = Mat64::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![2.0, 0.1],
        ])
        .unwrap();
        let part = categorize_tokens(&toks, &protos, 0.025).unwrap();
        assert_eq!(part.bg_indices, vec![0]);
        assert_eq!(part.uncertain_indices, vec![1, 2]);
        assert_eq!(part.fg_indices, vec![3]);
        assert_eq!(part.zero_norm_tokens, 1);
    }

    #[test]
    fn margin_boundary() {
        // s_f - s_b = 0.03 > 0.025
        let protos = Prototypes {
            fg: vec![1.0, 0.0],
            bg: vec![0.0, 1.0],
        };
        let theta: f64 = std::f64::consts::FRAC_PI_4 - (0.03f64 / 2f64.sqrt()).asin();
        let t = Mat64::from_rows(&[vec![theta.cos(), theta.sin()]]).unwrap();
        let part = categorize_tokens(&t, &protos, 0.025).unwrap();
        let diff = part.fg_scores[0] - part.bg_scores[0];
        assert!(diff > 0.025 && diff < 0.035);
        assert_eq!(part.fg_indices, vec![0]);
    }

    #[test]
    fn fbd_examples() {
        let t = Mat64::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let part = TokenPartition {
            fg_indices: vec![0, 1],
            ..Default::default()
        };
        assert_eq!(fbd_loss(&t, &part).unwrap(), 0.0);
        let part = TokenPartition {
            fg_indices: vec![0],
            bg_indices: vec![1],
            ..Default::default()
        };
        assert_abs_diff_eq!(fbd_loss(&t, &part).unwrap(), 0.5, epsilon = 1e-12);
        let bad = TokenPartition {
            fg_indices: vec![5],
            ..Default::default()
        };
        assert!(matches!(
            fbd_loss(&t, &bad),
            Err(CtdnError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(
            total_loss(1.0, 1.0, 1.0, 1.0, &w).unwrap(),
            8.7,
            epsilon = 1e-12
        );
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let z = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            delta: 0.0,
        };
        assert_eq!(total_loss(0.7, 3.0, 2.0, 1.0, &z).unwrap(), 0.7);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn label_bitstrings() {
        let l = ClassLabelVector::from_bitstring("010011").unwrap();
        assert_eq!(l.present(), vec![1, 4, 5]);
        assert_eq!(l.to_bitstring(), "010011");
        assert!(ClassLabelVector::from_bitstring("012").is_err());
    }
}
