//! Fully connected CRF with Gaussian kernels, exact mean-field inference.

use crate::encoders::ImageTensor;
use crate::error::{CtdnError, Result};
use crate::par::{self, Parallelism};
use crate::tensor::{gemm, Mat, MatRef};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    pub n_iters: usize,
    pub w_appearance: f32,
    pub w_smoothness: f32,
    pub theta_alpha: f32,
    pub theta_beta: f32,
    pub theta_gamma: f32,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            n_iters: 5,
            w_appearance: 4.0,
            w_smoothness: 3.0,
            theta_alpha: 30.0,
            theta_beta: 13.0,
            theta_gamma: 3.0,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_appearance", self.w_appearance),
            ("w_smoothness", self.w_smoothness),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CtdnError::Config(format!("crf {name} = {v}")));
            }
        }
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(CtdnError::Config(format!("crf {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Kernel rows per block; bounds the memory of one block to `ROWS·N` floats.
const BLOCK_ROWS: usize = 256;
/// Above this many pixels kernel blocks are recomputed every iteration
/// instead of cached.
const CACHE_LIMIT: usize = 4096;

struct Kernel<'a> {
    feats: Vec<[f32; 5]>,
    params: &'a CrfParams,
}

impl Kernel<'_> {
    fn new<'a>(image: &ImageTensor, params: &'a CrfParams) -> Kernel<'a> {
        let (h, w) = (image.height(), image.width());
        let mut feats = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let p = image.pixel(y, x);
                feats.push([y as f32, x as f32, p[0] * 255.0, p[1] * 255.0, p[2] * 255.0]);
            }
        }
        Kernel { feats, params }
    }

    /// Rows `r0..r1` of the combined kernel, zero on the diagonal.
    fn block(&self, r0: usize, r1: usize) -> Mat {
        let n = self.feats.len();
        let p = self.params;
        let ia = 1.0 / (2.0 * p.theta_alpha * p.theta_alpha);
        let ib = 1.0 / (2.0 * p.theta_beta * p.theta_beta);
        let ig = 1.0 / (2.0 * p.theta_gamma * p.theta_gamma);
        let mut out = Mat::zeros(r1 - r0, n);
        for i in r0..r1 {
            let fi = self.feats[i];
            let row = out.row_mut(i - r0);
            for (j, fj) in self.feats.iter().enumerate() {
                if i == j {
                    continue;
                }
                let dp = (fi[0] - fj[0]).powi(2) + (fi[1] - fj[1]).powi(2);
                let dc =
                    (fi[2] - fj[2]).powi(2) + (fi[3] - fj[3]).powi(2) + (fi[4] - fj[4]).powi(2);
                row[j] =
                    p.w_appearance * (-dp * ia - dc * ib).exp() + p.w_smoothness * (-dp * ig).exp();
            }
        }
        out
    }
}

fn check_unary(unary: &[f32], n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(CtdnError::dims("crf needs at least two labels"));
    }
    if unary.len() != n * k {
        return Err(CtdnError::LengthMismatch {
            expected: n * k,
            got: unary.len(),
        });
    }
    for (i, cell) in unary.chunks(k).enumerate() {
        let s: f32 = cell.iter().sum();
        if (s - 1.0).abs() > 1e-4 || cell.iter().any(|v| !(*v >= 0.0)) {
            return Err(CtdnError::InvalidDistribution(format!(
                "unary at pixel {i} sums to {s}"
            )));
        }
    }
    Ok(())
}

/// Mean-field inference with Potts compatibility:
/// `Q_i(l) ∝ U_i(l) · exp(Σ_{j≠i} k(i,j) Q_j(l))`.
///
/// `unary` is `H·W·K`, pixel-major.
pub fn dense_crf(
    unary: &[f32],
    k: usize,
    image: &ImageTensor,
    params: &CrfParams,
) -> Result<Vec<f32>> {
    dense_crf_with(unary, k, image, params, Parallelism::default())
}

pub fn dense_crf_with(
    unary: &[f32],
    k: usize,
    image: &ImageTensor,
    params: &CrfParams,
    mode: Parallelism,
) -> Result<Vec<f32>> {
    params.validate()?;
    let n = image.height() * image.width();
    check_unary(unary, n, k)?;
    if params.n_iters == 0 || (params.w_appearance == 0.0 && params.w_smoothness == 0.0) {
        return Ok(unary.to_vec());
    }
    let kernel = Kernel::new(image, params);
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(BLOCK_ROWS)
        .map(|r| (r, (r + BLOCK_ROWS).min(n)))
        .collect();
    let cached: Option<Vec<Mat>> =
        (n <= CACHE_LIMIT).then(|| par::map_slice(mode, &blocks, |&(r0, r1)| kernel.block(r0, r1)));
    let log_u: Vec<f32> = unary
        .iter()
        .map(|&u| if u > 0.0 { u.ln() } else { f32::NEG_INFINITY })
        .collect();
    let mut q = unary.to_vec();
    for _ in 0..params.n_iters {
        let msgs: Vec<Vec<f32>> = par::map_range(mode, blocks.len(), |b| {
            let (r0, r1) = blocks[b];
            let owned;
            let kb = match &cached {
                Some(c) => &c[b],
                None => {
                    owned = kernel.block(r0, r1);
                    &owned
                }
            };
            let mut out = vec![0f32; (r1 - r0) * k];
            gemm(
                r1 - r0,
                n,
                k,
                MatRef::normal(kb),
                MatRef::strided(&q, k, 1),
                &mut out,
                0.0,
            );
            out
        });
        let msg: Vec<f32> = msgs.concat();
        let mut next = vec![0f32; n * k];
        par::for_each_chunk_mut(mode, &mut next, k, |i, cell| {
            let lu = &log_u[i * k..(i + 1) * k];
            let m = &msg[i * k..(i + 1) * k];
            let mut best = f32::NEG_INFINITY;
            for c in 0..k {
                cell[c] = lu[c] + m[c];
                best = best.max(cell[c]);
            }
            let mut s = 0.0;
            for v in cell.iter_mut() {
                *v = if v.is_finite() {
                    (*v - best).exp()
                } else {
                    0.0
                };
                s += *v;
            }
            cell.iter_mut().for_each(|v| *v /= s);
        });
        q = next;
    }
    Ok(q)
}

/// Per-pixel argmax, ties toward the lower index.
pub fn crf_argmax(probs: &[f32], k: usize) -> Vec<u8> {
    probs
        .chunks(k)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if p[c] > p[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
