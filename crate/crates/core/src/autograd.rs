//! Tape-based reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Graph`] records one forward pass. Nodes are appended in evaluation
//! order, so walking them backwards is a valid topological order. Nodes whose
//! inputs are all untracked are stored without a backward closure, which is
//! how frozen encoders run forward-only inside a training step.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{gemm, gemm_strided, Mat, MatRef};

type Backward = Box<dyn Fn(&Mat, &[bool]) -> Vec<Option<Mat>> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Arc<Mat>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    tracked: bool,
    param: Option<(u64, usize)>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, usize), Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Head-averaged attention probabilities of one token segment.
pub type AttentionMaps = Vec<Mat>;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Arc<Mat>, tracked: bool, param: Option<(u64, usize)>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            tracked,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(Arc::new(value), false, None)
    }

    /// Tracked leaf; its gradient is available after [`Graph::backward`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.leaf(Arc::new(value), true, None)
    }

    /// Parameter leaf shared with a store. Repeated requests for the same
    /// parameter return the same node.
    pub fn param_leaf(&mut self, store_uid: u64, id: usize, value: Arc<Mat>, tracked: bool) -> Var {
        if let Some(&v) = self.param_cache.get(&(store_uid, id)) {
            return v;
        }
        let v = self.leaf(value, tracked, Some((store_uid, id)));
        self.param_cache.insert((store_uid, id), v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Mat> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Appends an operation node. The backward closure receives the output
    /// gradient and a per-parent "needs gradient" mask.
    pub fn custom(&mut self, parents: &[Var], value: Mat, backward: Backward) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if tracked { Some(backward) } else { None },
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar (1×1) node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].tracked)
                .collect();
            let pg = bw(&g, &needs);
            grads[i] = Some(g);
            for (k, (&p, gp)) in node.parents.iter().zip(pg).enumerate() {
                let Some(gp) = gp else { continue };
                if !needs[k] {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&gp),
                    None => grads[p] = Some(gp),
                }
            }
        }
        Grads { grads }
    }

    /// Gradients of the parameter leaves belonging to `store_uid`.
    pub fn param_grads(&self, grads: &mut Grads, store_uid: u64) -> Vec<(usize, Mat)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((uid, id)) = node.param {
                if uid == store_uid && node.tracked {
                    if let Some(g) = grads.grads[i].take() {
                        out.push((id, g));
                    }
                }
            }
        }
        out
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        let out = av.matmul(&bv);
        self.custom(
            &[a, b],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.matmul_nt(&bv)),
                    needs[1].then(|| av.matmul_tn(g)),
                ]
            }),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        let out = av.matmul_nt(&bv);
        self.custom(
            &[a, b],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.matmul(&bv)),
                    needs[1].then(|| g.matmul_tn(&av)),
                ]
            }),
        )
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "add_row bias shape");
        let mut out = xv.clone();
        let b = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.custom(
            &[x, bias],
            out,
            Box::new(move |g, needs| {
                let db = needs[1].then(|| column_sums(g));
                vec![needs[0].then(|| g.clone()), db]
            }),
        )
    }

    /// `x · w + b` with `w` of shape `in×out` and `b` of shape `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(
            &[a, b],
            out,
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(
            &[a, b],
            out,
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        self.custom(
            &[a, b],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&bv, |x, y| x * y)),
                    needs[1].then(|| g.zip_map(&av, |x, y| x * y)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| vec![Some(g.map(|x| x * s))]),
        )
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let av = self.value_arc(a);
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "mul_scalar needs 1x1");
        let sval = sv.get(0, 0);
        let out = av.map(|x| x * sval);
        self.custom(
            &[a, s],
            out,
            Box::new(move |g, needs| {
                let ds = needs[1].then(|| {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x as f64 * y as f64)
                        .sum();
                    Mat::scalar(d as f32)
                });
                vec![needs[0].then(|| g.map(|x| x * sval)), ds]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let ov = Arc::new(out.clone());
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&ov, |x, y| x * y))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.map(|x| x.max(0.0));
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&av, |x, y| if y > 0.0 { x } else { 0.0 }))]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const K: f32 = 0.797_884_6; // sqrt(2/pi)
        let av = self.value_arc(a);
        let out = av.map(|x| 0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh()));
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&av, |gg, x| {
                    let u = K * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
                    gg * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                }))]
            }),
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let xv = self.value_arc(x);
        let gv = self.value_arc(gamma);
        let bv = self.value(beta).clone();
        let (n, c) = xv.shape();
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = vec![0f32; n];
        let mut out = Mat::zeros(n, c);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let xh = xhat.row_mut(r);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| Mat::zeros(n, c));
                let mut dg = vec![0f32; c];
                let mut db = vec![0f32; c];
                let mut dxh = vec![0f32; c];
                for r in 0..n {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    for j in 0..c {
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                        dxh[j] = gr[j] * gv.data()[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxh.iter().sum::<f32>() / c as f32;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        let d = dx.row_mut(r);
                        for j in 0..c {
                            d[j] = inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                vec![
                    dx,
                    needs[1].then(|| Mat::row_vector(&dg)),
                    needs[2].then(|| Mat::row_vector(&db)),
                ]
            }),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ov = Arc::new(out.clone());
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(ov.rows(), ov.cols());
                for r in 0..ov.rows() {
                    let p = ov.row(r);
                    let gr = g.row(r);
                    let s: f32 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, dj) in d.row_mut(r).iter_mut().enumerate() {
                        *dj = p[j] * (gr[j] - s);
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Divides each row by its L2 norm (floored at 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let mut out = av.clone();
        let mut norms = vec![0f32; n];
        for r in 0..n {
            let nr = av
                .row(r)
                .iter()
                .map(|x| x * x)
                .sum::<f32>()
                .sqrt()
                .max(1e-12);
            norms[r] = nr;
            for x in out.row_mut(r) {
                *x /= nr;
            }
        }
        let ov = Arc::new(out.clone());
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(n, c);
                for r in 0..n {
                    let y = ov.row(r);
                    let gr = g.row(r);
                    let s: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, dj) in d.row_mut(r).iter_mut().enumerate() {
                        *dj = (gr[j] - y[j] * s) / norms[r];
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    // ---- structural -----------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let out = av.select_rows(idx);
        let idx = idx.to_vec();
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(n, c);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, y) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *x += y;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).rows()).collect();
        let mut data = Vec::with_capacity(sizes.iter().sum::<usize>() * c);
        for &p in parts {
            assert_eq!(self.value(p).cols(), c, "concat_rows width");
            data.extend_from_slice(self.value(p).data());
        }
        let out = Mat::from_vec(sizes.iter().sum(), c, data).expect("concat size");
        self.custom(
            parts,
            out,
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&s, &need)| {
                        let part = need.then(|| {
                            Mat::from_vec(s, c, g.data()[start * c..(start + s) * c].to_vec())
                                .expect("slice")
                        });
                        start += s;
                        part
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols height");
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Mat::zeros(n, ca + cb);
        for r in 0..n {
            out.row_mut(r)[..ca].copy_from_slice(av.row(r));
            out.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        self.custom(
            &[a, b],
            out,
            Box::new(move |g, needs| {
                let da = needs[0].then(|| Mat::from_fn(n, ca, |r, c| g.get(r, c)));
                let db = needs[1].then(|| Mat::from_fn(n, cb, |r, c| g.get(r, ca + c)));
                vec![da, db]
            }),
        )
    }

    /// Mean of the rows listed in each group; output has one row per group.
    pub fn group_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let mut out = Mat::zeros(groups.len(), c);
        for (gi, grp) in groups.iter().enumerate() {
            let inv = 1.0 / grp.len().max(1) as f32;
            let o = out.row_mut(gi);
            for &r in grp {
                for (x, y) in o.iter_mut().zip(av.row(r)) {
                    *x += y * inv;
                }
            }
        }
        let groups = groups.to_vec();
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(n, c);
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len().max(1) as f32;
                    for &r in grp {
                        for (x, y) in d.row_mut(r).iter_mut().zip(g.row(gi)) {
                            *x += y * inv;
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape();
        let out = Mat::scalar(av.get(r, c));
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(shape.0, shape.1);
                d.set(r, c, g.get(0, 0));
                vec![Some(d)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape();
        let out = Mat::scalar(self.value(a).sum());
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| vec![Some(Mat::full(shape.0, shape.1, g.get(0, 0)))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f64 = terms
            .iter()
            .map(|&(v, w)| w as f64 * self.value(v).get(0, 0) as f64)
            .sum();
        let weights: Vec<f32> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.custom(
            &parents,
            Mat::scalar(total as f32),
            Box::new(move |g, _| {
                weights
                    .iter()
                    .map(|&w| Some(Mat::scalar(w * g.get(0, 0))))
                    .collect()
            }),
        )
    }

    // ---- transformer pieces ----------------------------------------------

    /// Builds `[cls; patches_b] + pos` for each of `batch` images.
    pub fn assemble_tokens(&mut self, cls: Var, patches: Var, pos: Var, batch: usize) -> Var {
        let (cv, pv, posv) = (self.value(cls), self.value(patches), self.value(pos));
        let c = cv.cols();
        let n = posv.rows();
        let p = n - 1;
        assert_eq!(pv.rows(), batch * p, "assemble_tokens patch count");
        let mut out = Mat::zeros(batch * n, c);
        for b in 0..batch {
            for t in 0..n {
                let src = if t == 0 {
                    cv.row(0)
                } else {
                    pv.row(b * p + t - 1)
                };
                let o = out.row_mut(b * n + t);
                for j in 0..c {
                    o[j] = src[j] + posv.get(t, j);
                }
            }
        }
        self.custom(
            &[cls, patches, pos],
            out,
            Box::new(move |g, needs| {
                let mut dcls = Mat::zeros(1, c);
                let mut dp = Mat::zeros(batch * p, c);
                let mut dpos = Mat::zeros(n, c);
                for b in 0..batch {
                    for t in 0..n {
                        let gr = g.row(b * n + t);
                        if t == 0 {
                            for (x, y) in dcls.row_mut(0).iter_mut().zip(gr) {
                                *x += y;
                            }
                        } else {
                            dp.row_mut(b * p + t - 1).copy_from_slice(gr);
                        }
                        for (x, y) in dpos.row_mut(t).iter_mut().zip(gr) {
                            *x += y;
                        }
                    }
                }
                vec![
                    needs[0].then_some(dcls),
                    needs[1].then_some(dp),
                    needs[2].then_some(dpos),
                ]
            }),
        )
    }

    /// Multi-head scaled dot-product attention over independent token
    /// segments `(start, len)`. `qkv` holds `[Q | K | V]` column blocks of
    /// width `d` each. Returns the attended values and, per segment, the
    /// attention probabilities averaged over heads.
    pub fn attention(
        &mut self,
        qkv: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> (Var, AttentionMaps) {
        let qv = self.value_arc(qkv);
        let (t, w3) = qv.shape();
        let d = w3 / 3;
        assert_eq!(d * 3, w3, "qkv width");
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = Mat::zeros(t, d);
        let mut probs: Vec<Mat> = Vec::with_capacity(segments.len() * heads);
        let mut avg: Vec<Mat> = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let mut mean = Mat::zeros(len, len);
            for h in 0..heads {
                let q = MatRef::strided(&qv.data()[start * w3 + h * dh..], w3, 1);
                let kt = MatRef::strided(&qv.data()[start * w3 + d + h * dh..], 1, w3);
                let mut s = Mat::zeros(len, len);
                gemm(len, dh, len, q, kt, s.data_mut(), 0.0);
                for r in 0..len {
                    let row = s.row_mut(r);
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(row);
                }
                let v = MatRef::strided(&qv.data()[start * w3 + 2 * d + h * dh..], w3, 1);
                gemm_strided(
                    len,
                    len,
                    dh,
                    MatRef::normal(&s),
                    v,
                    &mut out.data_mut()[start * d + h * dh..],
                    d,
                    0.0,
                );
                mean.add_assign(&s);
                probs.push(s);
            }
            mean.scale_assign(1.0 / heads as f32);
            avg.push(mean);
        }
        let segs = segments.to_vec();
        let var = self.custom(
            &[qkv],
            out,
            Box::new(move |g, _| {
                let mut dqkv = Mat::zeros(t, w3);
                for (si, &(start, len)) in segs.iter().enumerate() {
                    for h in 0..heads {
                        let p = &probs[si * heads + h];
                        let go = MatRef::strided(&g.data()[start * d + h * dh..], d, 1);
                        // dV = Pᵀ dO
                        gemm_strided(
                            len,
                            len,
                            dh,
                            MatRef::transposed(p),
                            go,
                            &mut dqkv.data_mut()[start * w3 + 2 * d + h * dh..],
                            w3,
                            0.0,
                        );
                        // dP = dO Vᵀ
                        let vt = MatRef::strided(&qv.data()[start * w3 + 2 * d + h * dh..], 1, w3);
                        let mut dp = Mat::zeros(len, len);
                        gemm(len, dh, len, go, vt, dp.data_mut(), 0.0);
                        for r in 0..len {
                            let pr = p.row(r);
                            let dr = dp.row_mut(r);
                            let s: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                dr[j] = pr[j] * (dr[j] - s) * scale;
                            }
                        }
                        // dQ = dS K, dK = dSᵀ Q
                        let k = MatRef::strided(&qv.data()[start * w3 + d + h * dh..], w3, 1);
                        gemm_strided(
                            len,
                            len,
                            dh,
                            MatRef::normal(&dp),
                            k,
                            &mut dqkv.data_mut()[start * w3 + h * dh..],
                            w3,
                            0.0,
                        );
                        let q = MatRef::strided(&qv.data()[start * w3 + h * dh..], w3, 1);
                        gemm_strided(
                            len,
                            len,
                            dh,
                            MatRef::transposed(&dp),
                            q,
                            &mut dqkv.data_mut()[start * w3 + d + h * dh..],
                            w3,
                            0.0,
                        );
                    }
                }
                vec![Some(dqkv)]
            }),
        );
        (var, avg)
    }

    // ---- convolution pieces (feature maps are (B·H·W)×C, row-major pixels) --

    /// 3×3 convolution, stride 1, zero padding 1. `w` is `(9·Cin)×Cout`
    /// with rows ordered `(ky, kx, cin)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, bias: Var, batch: usize, h: usize, wd: usize) -> Var {
        let xv = self.value(x);
        let (n, cin) = xv.shape();
        assert_eq!(n, batch * h * wd, "conv3x3 input rows");
        let wv = self.value_arc(w);
        assert_eq!(wv.rows(), 9 * cin, "conv3x3 weight rows");
        let bv = self.value(bias);
        let cols = im2col3x3(xv, batch, h, wd);
        let mut out = cols.matmul(&wv);
        for r in 0..n {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.custom(
            &[x, w, bias],
            out,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| col2im3x3(&g.matmul_nt(&wv), batch, h, wd, cin, n));
                let dw = needs[1].then(|| cols.matmul_tn(g));
                let db = needs[2].then(|| column_sums(g));
                vec![dx, dw, db]
            }),
        )
    }

    pub fn avg_pool2(&mut self, x: Var, batch: usize, h: usize, wd: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let (h2, w2) = (h / 2, wd / 2);
        let mut out = Mat::zeros(batch * h2 * w2, c);
        for b in 0..batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let o = (b * h2 + y) * w2 + xx;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (b * h + 2 * y + dy) * wd + 2 * xx + dx;
                        for j in 0..c {
                            let v = out.get(o, j) + 0.25 * xv.get(i, j);
                            out.set(o, j, v);
                        }
                    }
                }
            }
        }
        let n = xv.rows();
        self.custom(
            &[x],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(n, c);
                for b in 0..batch {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let o = (b * h2 + y) * w2 + xx;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = (b * h + 2 * y + dy) * wd + 2 * xx + dx;
                                for j in 0..c {
                                    d.set(i, j, 0.25 * g.get(o, j));
                                }
                            }
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling of `(B·h·w)×C` maps.
    pub fn upsample2(&mut self, x: Var, batch: usize, h: usize, wd: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let (h2, w2) = (h * 2, wd * 2);
        let mut out = Mat::zeros(batch * h2 * w2, c);
        for b in 0..batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = (b * h + y / 2) * wd + xx / 2;
                    out.row_mut((b * h2 + y) * w2 + xx)
                        .copy_from_slice(xv.row(src));
                }
            }
        }
        let n = xv.rows();
        self.custom(
            &[x],
            out,
            Box::new(move |g, _| {
                let mut d = Mat::zeros(n, c);
                for b in 0..batch {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let src = (b * h + y / 2) * wd + xx / 2;
                            let gr = g.row((b * h2 + y) * w2 + xx);
                            for (a, v) in d.row_mut(src).iter_mut().zip(gr) {
                                *a += v;
                            }
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn im2col3x3(x: &Mat, batch: usize, h: usize, wd: usize) -> Mat {
    let c = x.cols();
    let mut cols = Mat::zeros(batch * h * wd, 9 * c);
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..wd {
                let row = cols.row_mut((b * h + y) * wd + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = (b * h + sy as usize) * wd + sx as usize;
                        let off = (ky * 3 + kx) * c;
                        row[off..off + c].copy_from_slice(x.row(src));
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3(dcols: &Mat, batch: usize, h: usize, wd: usize, c: usize, n: usize) -> Mat {
    let mut dx = Mat::zeros(n, c);
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..wd {
                let row = dcols.row((b * h + y) * wd + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let dst = (b * h + sy as usize) * wd + sx as usize;
                        let off = (ky * 3 + kx) * c;
                        for (a, v) in dx.row_mut(dst).iter_mut().zip(&row[off..off + c]) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(f(x) ⊙ probe))/dx in f32.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat, tol: f32) {
        let eval = |x: &Mat| -> (f32, Option<Mat>) {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = build(&mut g, xv);
            let w = Mat::from_fn(g.value(y).rows(), g.value(y).cols(), |r, c| {
                ((r * 7 + c * 3) % 5) as f32 * 0.3 - 0.6
            });
            let wv = g.constant(w);
            let p = g.mul(y, wv);
            let s = g.sum_all(p);
            let grads = g.backward(s);
            (g.value(s).get(0, 0), grads.get(xv).cloned())
        };
        let (_, grad) = eval(&x0);
        let grad = grad.expect("gradient");
        let eps = 1e-2;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * eps);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn sample(r: usize, c: usize, seed: u32) -> Mat {
        Mat::from_fn(r, c, |i, j| {
            let k = (i * 31 + j * 17 + seed as usize * 13) % 23;
            k as f32 / 11.0 - 1.0
        })
    }

    #[test]
    fn grad_layer_norm_and_gelu() {
        check(
            |g, x| {
                let gm = g.constant(sample(1, 4, 1));
                let bt = g.constant(sample(1, 4, 2));
                let y = g.layer_norm(x, gm, bt, 1e-5);
                g.gelu(y)
            },
            sample(3, 4, 3),
            2e-2,
        );
    }

    #[test]
    fn grad_attention() {
        check(
            |g, x| g.attention(x, &[(0, 3), (3, 2)], 2).0,
            sample(5, 12, 4).map(|v| v * 0.5),
            2e-2,
        );
    }

    #[test]
    fn grad_normalize_softmax() {
        check(
            |g, x| {
                let n = g.normalize_rows(x);
                g.softmax_rows(n)
            },
            sample(3, 5, 5),
            2e-2,
        );
    }

    #[test]
    fn grad_conv_pool_upsample() {
        check(
            |g, x| {
                let w = g.constant(sample(18, 3, 6).map(|v| v * 0.3));
                let b = g.constant(sample(1, 3, 7));
                let y = g.conv3x3(x, w, b, 1, 4, 4);
                let p = g.avg_pool2(y, 1, 4, 4);
                g.upsample2(p, 1, 2, 2)
            },
            sample(16, 2, 8),
            2e-2,
        );
    }

    #[test]
    fn grad_tokens_and_groups() {
        check(
            |g, x| {
                let cls = g.constant(sample(1, 3, 9));
                let pos = g.constant(sample(3, 3, 10));
                let t = g.assemble_tokens(cls, x, pos, 2);
                let m = g.group_mean(t, &[vec![1, 2], vec![4, 5, 3]]);
                let r = g.gather_rows(t, &[0, 3, 3]);
                g.concat_rows(&[m, r])
            },
            sample(4, 3, 11),
            2e-2,
        );
    }

    #[test]
    fn untracked_inputs_have_no_backward() {
        let mut g = Graph::new();
        let a = g.constant(Mat::identity(2));
        let b = g.constant(Mat::identity(2));
        let c = g.matmul(a, b);
        assert!(!g.is_tracked(c));
    }
}
