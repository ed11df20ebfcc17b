//! Class activation maps, attention affinity and pseudo-mask assembly.

use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::encoders::{bilinear_sample, VisualFeatures};
use crate::error::{CtdnError, Result};
use crate::par::{self, Parallelism};
use crate::tensor::Mat64;

/// One class map over the patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub class_id: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl CamMap {
    pub fn new(class_id: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(CtdnError::LengthMismatch {
                expected: h * w,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CtdnError::NonFinite("cam".into()));
        }
        Ok(CamMap {
            class_id,
            h,
            w,
            values,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Min-max rescale to `[0, 1]`. A constant positive map becomes all
    /// ones; an all-zero map stays zero.
    pub fn normalized(mut self) -> Self {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for v in &mut self.values {
            *v = if range > 1e-12 {
                (*v - lo) / range
            } else if hi > 0.0 {
                1.0
            } else {
                0.0
            };
        }
        self
    }

    /// Grayscale dump scaled to 0-255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        crate::data::write_gray_png(path, self.w, self.h, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(pub Mat64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Row-major labels, 0 = background.
    pub labels: Vec<u8>,
    /// `H·W·(K+1)` per-pixel distributions, channel 0 = background.
    pub unary: Vec<f32>,
    /// Best upsampled foreground score per pixel, used by the label rule.
    pub fg_score: Vec<f32>,
}

/// Grad-CAM before normalization: `ReLU(A·ω)` with `ω` the spatial mean of
/// `∂logit/∂A`.
///
/// `logit_fn` receives the activation as a tracked input node and must
/// return a `1×1` logit.
pub fn gradcam_raw<F>(features: &VisualFeatures, class_id: usize, logit_fn: F) -> Result<CamMap>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let a = &features.activation;
    let (h, w) = features.grid;
    if a.cols() == 0 || a.rows() == 0 {
        return Err(CtdnError::NoGradient);
    }
    if a.rows() != h * w {
        return Err(CtdnError::dims(format!(
            "activation has {} rows for a {h}x{w} grid",
            a.rows()
        )));
    }
    let mut g = Graph::new();
    let av = g.input(a.clone());
    let logit = logit_fn(&mut g, av)?;
    if g.value(logit).shape() != (1, 1) {
        return Err(CtdnError::dims("class logit must be 1x1"));
    }
    let grads = g.backward(logit);
    let Some(ga) = grads.get(av) else {
        return CamMap::new(class_id, h, w, vec![0.0; h * w]);
    };
    let hw = (h * w) as f64;
    let mut omega = vec![0.0f64; a.cols()];
    for r in 0..ga.rows() {
        for (o, &v) in omega.iter_mut().zip(ga.row(r)) {
            *o += v as f64;
        }
    }
    omega.iter_mut().for_each(|o| *o /= hw);
    if omega.iter().any(|o| !o.is_finite()) {
        return Err(CtdnError::NonFinite("grad-cam weights".into()));
    }
    let values = (0..a.rows())
        .map(|r| {
            let s: f64 = a
                .row(r)
                .iter()
                .zip(&omega)
                .map(|(&x, o)| x as f64 * o)
                .sum();
            s.max(0.0)
        })
        .collect();
    CamMap::new(class_id, h, w, values)
}

/// Grad-CAM normalized to `[0, 1]`.
pub fn gradcam<F>(features: &VisualFeatures, class_id: usize, logit_fn: F) -> Result<CamMap>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    gradcam_raw(features, class_id, logit_fn).map(CamMap::normalized)
}

/// Mean head-averaged attention over the last `last_k` blocks, patch block
/// only.
pub fn aggregate_affinity(features: &VisualFeatures, last_k: usize) -> Result<Mat64> {
    let layers = &features.attention;
    if last_k == 0 || last_k > layers.len() {
        return Err(CtdnError::OutOfRange(format!(
            "last_k = {last_k} with {} attention layers",
            layers.len()
        )));
    }
    let n = layers[0].rows();
    if n < 2 {
        return Err(CtdnError::dims("attention has no patch tokens"));
    }
    let p = n - 1;
    let mut out = Mat64::zeros(p, p);
    for layer in &layers[layers.len() - last_k..] {
        if layer.shape() != (n, n) {
            return Err(CtdnError::dims("attention layers differ in size"));
        }
        for i in 0..p {
            let src = &layer.row(i + 1)[1..];
            for (d, &s) in out.row_mut(i).iter_mut().zip(src) {
                *d += s as f64;
            }
        }
    }
    let k = last_k as f64;
    out.data.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

fn row_sums(m: &Mat64, mode: Parallelism) -> Vec<f64> {
    par::map_range(mode, m.rows, |r| m.row(r).iter().sum())
}

fn col_sums(m: &Mat64, mode: Parallelism) -> Vec<f64> {
    par::map_range(mode, m.cols, |c| {
        (0..m.rows).map(|r| m.data[r * m.cols + c]).sum()
    })
}

/// Largest deviation of any row or column sum from one.
pub fn doubly_stochastic_deviation(m: &Mat64) -> f64 {
    row_sums(m, Parallelism::Sequential)
        .into_iter()
        .chain(col_sums(m, Parallelism::Sequential))
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Alternating row/column normalization. Returns the matrix and the
/// deviation after each iteration.
pub fn sinkhorn_trace(
    matrix: &Mat64,
    max_iters: usize,
    tol: f64,
    mode: Parallelism,
) -> Result<(Mat64, Vec<f64>)> {
    if matrix.rows != matrix.cols {
        return Err(CtdnError::dims("sinkhorn needs a square matrix"));
    }
    if matrix.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CtdnError::OutOfRange(
            "sinkhorn input must be finite and nonnegative".into(),
        ));
    }
    let mut m = matrix.clone();
    if let Some(r) = row_sums(&m, mode).iter().position(|&s| s <= 0.0) {
        return Err(CtdnError::DegenerateMatrix(format!("row {r} is all zero")));
    }
    if let Some(c) = col_sums(&m, mode).iter().position(|&s| s <= 0.0) {
        return Err(CtdnError::DegenerateMatrix(format!(
            "column {c} is all zero"
        )));
    }
    let n = m.cols;
    let mut trace = Vec::new();
    let mut dev = doubly_stochastic_deviation(&m);
    let mut it = 0;
    while dev >= tol && it < max_iters {
        let rs = row_sums(&m, mode);
        par::for_each_chunk_mut(mode, &mut m.data, n, |r, row| {
            row.iter_mut().for_each(|v| *v /= rs[r]);
        });
        let cs = col_sums(&m, mode);
        par::for_each_chunk_mut(mode, &mut m.data, n, |_, row| {
            row.iter_mut().zip(&cs).for_each(|(v, c)| *v /= c);
        });
        dev = doubly_stochastic_deviation(&m);
        trace.push(dev);
        it += 1;
    }
    Ok((m, trace))
}

pub fn sinkhorn(matrix: &Mat64, max_iters: usize, tol: f64) -> Result<Mat64> {
    sinkhorn_trace(matrix, max_iters, tol, Parallelism::default()).map(|(m, _)| m)
}

/// `(σ(raw) + σ(raw)ᵀ) / 2`.
pub fn affinity_matrix(raw: &Mat64, max_iters: usize, tol: f64) -> Result<AffinityMatrix> {
    let s = sinkhorn(raw, max_iters, tol)?;
    let n = s.rows;
    let mut out = Mat64::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (s.data[i * n + j] + s.data[j * n + i]);
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    Ok(AffinityMatrix(out))
}

/// Union of filled bounding boxes of the 4-connected components at or above
/// `tau_box · max`.
pub fn box_mask(cam: &CamMap, tau_box: f64) -> BoxMask {
    let (h, w) = (cam.h, cam.w);
    let mut values = vec![0u8; h * w];
    let hi = cam.max();
    if hi <= 0.0 {
        return BoxMask { h, w, values };
    }
    let thr = tau_box * hi;
    let on: Vec<bool> = cam.values.iter().map(|&v| v >= thr && v > 0.0).collect();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        for y in y0..=y1 {
            values[y * w + x0..=y * w + x1]
                .iter_mut()
                .for_each(|v| *v = 1);
        }
    }
    BoxMask { h, w, values }
}

/// `box ⊙ (Φ · vec(cam))` with row-major `vec`, renormalized.
pub fn refine_cam(cam: &CamMap, aff: &AffinityMatrix, bx: &BoxMask) -> Result<CamMap> {
    let n = cam.h * cam.w;
    if aff.0.rows != n || aff.0.cols != n {
        return Err(CtdnError::dims(format!(
            "affinity {}x{} for {n} cam cells",
            aff.0.rows, aff.0.cols
        )));
    }
    if (bx.h, bx.w) != (cam.h, cam.w) {
        return Err(CtdnError::dims("box mask shape"));
    }
    let values = (0..n)
        .map(|i| {
            if bx.values[i] == 0 {
                return 0.0;
            }
            aff.0
                .row(i)
                .iter()
                .zip(&cam.values)
                .map(|(a, c)| a * c)
                .sum()
        })
        .collect();
    Ok(CamMap::new(cam.class_id, cam.h, cam.w, values)?.normalized())
}

/// Bilinear upsampling of a cam to `(oh, ow)`.
pub fn upsample_cam(cam: &CamMap, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push(bilinear_sample(cam.h, cam.w, y, x, oh, ow, |yy, xx| {
                cam.get(yy, xx) as f32
            }));
        }
    }
    out
}

/// Argmax with ties toward the lower index; pixels whose best foreground
/// score is below `tau_fg` become background.
pub fn threshold_labels(probs: &[f32], k1: usize, fg_score: &[f32], tau_fg: f32) -> Vec<u8> {
    probs
        .chunks(k1)
        .zip(fg_score)
        .map(|(p, &s)| {
            if s < tau_fg {
                return 0;
            }
            let mut best = 0;
            for (c, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssembleParams {
    pub tau_fg: f32,
    pub gamma: f32,
}

impl Default for AssembleParams {
    fn default() -> Self {
        AssembleParams {
            tau_fg: 0.3,
            gamma: 1.0,
        }
    }
}

/// Builds the per-pixel unary and labels from refined cams. `present[i]` is
/// the 1-based label of `refined[i]`; `num_classes` excludes background.
pub fn assemble_pseudo_mask(
    refined: &[CamMap],
    present: &[usize],
    num_classes: usize,
    params: AssembleParams,
    out_size: (usize, usize),
) -> Result<PseudoMask> {
    if refined.is_empty() {
        return Err(CtdnError::Config("no classes to assemble".into()));
    }
    if refined.len() != present.len() {
        return Err(CtdnError::LengthMismatch {
            expected: refined.len(),
            got: present.len(),
        });
    }
    if let Some(&bad) = present.iter().find(|&&c| c == 0 || c > num_classes) {
        return Err(CtdnError::IndexOutOfRange {
            index: bad,
            len: num_classes + 1,
        });
    }
    let (oh, ow) = out_size;
    let k1 = num_classes + 1;
    let up: Vec<Vec<f32>> = refined.iter().map(|c| upsample_cam(c, oh, ow)).collect();
    let mut unary = vec![0f32; oh * ow * k1];
    let mut fg_score = vec![0f32; oh * ow];
    for p in 0..oh * ow {
        let cell = &mut unary[p * k1..(p + 1) * k1];
        let best = up.iter().map(|u| u[p].clamp(0.0, 1.0)).fold(0f32, f32::max);
        fg_score[p] = best;
        cell[0] = (1.0 - best).clamp(0.0, 1.0).powf(params.gamma);
        for (u, &c) in up.iter().zip(present) {
            cell[c] += u[p].clamp(0.0, 1.0);
        }
        let s: f32 = cell.iter().sum();
        cell.iter_mut().for_each(|v| *v /= s);
    }
    let labels = threshold_labels(&unary, k1, &fg_score, params.tau_fg);
    Ok(PseudoMask {
        height: oh,
        width: ow,
        num_classes,
        labels,
        unary,
        fg_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(h: usize, w: usize, v: Vec<f64>) -> CamMap {
        CamMap::new(1, h, w, v).unwrap()
    }

    #[test]
    fn sinkhorn_examples() {
        let m = Mat64::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(sinkhorn(&m, 10, 1e-3).unwrap().data, vec![0.5; 4]);
        let p = Mat64::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(sinkhorn(&p, 10, 1e-3).unwrap(), p);
        let m = Mat64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = sinkhorn(&m, 1000, 1e-6).unwrap();
        assert!(doubly_stochastic_deviation(&s) < 1e-6);
        let z = Mat64::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            sinkhorn(&z, 10, 1e-3),
            Err(CtdnError::DegenerateMatrix(_))
        ));
    }

    #[test]
    fn box_examples() {
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        assert_eq!(
            box_mask(&cam(4, 4, v.clone()), 0.4)
                .values
                .iter()
                .filter(|&&b| b == 1)
                .count(),
            1
        );
        v[10] = 1.0;
        let b = box_mask(&cam(4, 4, v), 0.4);
        assert_eq!(b.values.iter().filter(|&&b| b == 1).count(), 2);
        assert_eq!(b.values[5], 1);
        assert_eq!(b.values[10], 1);
        assert!(box_mask(&cam(4, 4, vec![0.0; 16]), 0.4)
            .values
            .iter()
            .all(|&b| b == 0));
        // L shape fills its bounding box
        let mut v = vec![0.0; 9];
        for i in [0, 3, 6, 7, 8] {
            v[i] = 1.0;
        }
        assert!(box_mask(&cam(3, 3, v), 0.4).values.iter().all(|&b| b == 1));
    }

    #[test]
    fn refine_examples() {
        let c = cam(3, 3, vec![0.0, 0.5, 1.0, 0.2, 0.3, 0.1, 0.0, 0.9, 0.4]);
        let mut id = Mat64::zeros(9, 9);
        for i in 0..9 {
            id.data[i * 10] = 1.0;
        }
        let ones = BoxMask {
            h: 3,
            w: 3,
            values: vec![1; 9],
        };
        assert_eq!(
            refine_cam(&c, &AffinityMatrix(id.clone()), &ones).unwrap(),
            c
        );
        let zeros = BoxMask {
            h: 3,
            w: 3,
            values: vec![0; 9],
        };
        assert!(refine_cam(&c, &AffinityMatrix(id), &zeros)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));
        let uni = AffinityMatrix(Mat64::from_vec(9, 9, vec![1.0 / 9.0; 81]).unwrap());
        let r = refine_cam(&c, &uni, &ones).unwrap();
        assert!(r.values.iter().all(|&v| v == r.values[0]));
    }

    #[test]
    fn assemble_examples() {
        let one = cam(2, 2, vec![1.0; 4]);
        let m = assemble_pseudo_mask(&[one], &[3], 6, AssembleParams::default(), (8, 8)).unwrap();
        assert!(m.labels.iter().all(|&l| l == 3));
        let zero = cam(2, 2, vec![0.0; 4]);
        let m = assemble_pseudo_mask(&[zero], &[3], 6, AssembleParams::default(), (8, 8)).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        assert!(m.unary.chunks(7).all(|c| c[0] == 1.0));
        assert!(assemble_pseudo_mask(&[], &[], 6, AssembleParams::default(), (8, 8)).is_err());
    }
}
