//! Pre-norm vision/text transformer blocks and the patch ViT.

use rand::Rng;

use crate::autograd::{AttentionMaps, Graph, Var};
use crate::encoders::ImageTensor;
use crate::nn::params::{small_uniform, xavier, ParamId, ParamStore};
use crate::tensor::Mat;

/// Input standardization applied before the patch embedding.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Uniform half-width of the position embedding init. Classes here are
/// defined by where things are, so position starts on the same scale as
/// patch content.
const POS_INIT_SCALE: f32 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output width of the projection head (text embedding width).
    pub embed_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 96,
            patch: 8,
            dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    heads: usize,
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out)),
        store.add(format!("{name}.bias"), Mat::zeros(1, fan_out)),
    )
}

fn add_norm(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.weight"), Mat::full(1, dim, 1.0)),
        store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
    )
}

fn lin(g: &mut Graph, store: &ParamStore, x: Var, p: (ParamId, ParamId)) -> Var {
    let w = store.var(g, p.0);
    let b = store.var(g, p.1);
    g.linear(x, w, b)
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, p: (ParamId, ParamId)) -> Var {
    let w = store.var(g, p.0);
    let b = store.var(g, p.1);
    g.layer_norm(x, w, b, 1e-5)
}

impl BlockParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        BlockParams {
            ln1: add_norm(store, &format!("{prefix}.ln1"), dim),
            qkv: add_linear(store, rng, &format!("{prefix}.attn.qkv"), dim, 3 * dim),
            proj: add_linear(store, rng, &format!("{prefix}.attn.proj"), dim, dim),
            ln2: add_norm(store, &format!("{prefix}.ln2"), dim),
            fc1: add_linear(
                store,
                rng,
                &format!("{prefix}.mlp.fc1"),
                dim,
                mlp_ratio * dim,
            ),
            fc2: add_linear(
                store,
                rng,
                &format!("{prefix}.mlp.fc2"),
                mlp_ratio * dim,
                dim,
            ),
            heads,
        }
    }

    /// `x + attn(ln1 x)`, then `+ mlp(ln2 ·)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize)],
    ) -> (Var, AttentionMaps) {
        let h = self.pre_norm(g, store, x);
        self.forward_normed(g, store, x, h, segments)
    }

    pub fn pre_norm(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        norm(g, store, x, self.ln1)
    }

    /// Block body with the attention input `h` given separately from the
    /// residual stream `x`.
    pub fn forward_normed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        h: Var,
        segments: &[(usize, usize)],
    ) -> (Var, AttentionMaps) {
        let qkv = lin(g, store, h, self.qkv);
        let (a, maps) = g.attention(qkv, segments, self.heads);
        let a = lin(g, store, a, self.proj);
        let x = g.add(x, a);
        let h = norm(g, store, x, self.ln2);
        let h = lin(g, store, h, self.fc1);
        let h = g.gelu(h);
        let h = lin(g, store, h, self.fc2);
        (g.add(x, h), maps)
    }
}

/// Patch ViT with a class token, learned positions and a projection head.
#[derive(Debug, Clone)]
pub struct Vit {
    pub cfg: VitConfig,
    patch_embed: (ParamId, ParamId),
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    ln_final: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub logit_scale: ParamId,
}

/// Graph handles of one batched forward pass.
pub struct VitForward {
    /// `(B·N)×D` final token matrix; row `b·N` is the class token of image `b`.
    pub tokens: Var,
    /// Residual stream entering the final block.
    pub final_input: Var,
    /// `attention[layer][image]` head-averaged `N×N` maps.
    pub attention: Vec<Vec<Mat>>,
    pub batch: usize,
}

impl Vit {
    /// Registers parameters under `prefix` (e.g. `student`).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: VitConfig) -> Self {
        let pd = cfg.patch * cfg.patch * 3;
        let patch_embed = add_linear(store, rng, &format!("{prefix}.patch_embed"), pd, cfg.dim);
        let cls = store.add(
            format!("{prefix}.cls_token"),
            small_uniform(rng, 1, cfg.dim, 0.035),
        );
        let pos = store.add(
            format!("{prefix}.pos_embed"),
            small_uniform(rng, cfg.num_tokens(), cfg.dim, POS_INIT_SCALE),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                BlockParams::new(
                    store,
                    rng,
                    &format!("{prefix}.block{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let ln_final = add_norm(store, &format!("{prefix}.ln_final"), cfg.dim);
        let proj = add_linear(
            store,
            rng,
            &format!("{prefix}.proj"),
            cfg.dim,
            cfg.embed_dim,
        );
        let logit_scale = store.add(format!("{prefix}.logit_scale"), Mat::scalar(100f32.ln()));
        Vit {
            cfg,
            patch_embed,
            cls,
            pos,
            blocks,
            ln_final,
            proj,
            logit_scale,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Flattens non-overlapping patches, `(y, x, channel)` order inside a
    /// patch and row-major patch order. Pixels are standardized with
    /// [`PIXEL_MEAN`] and [`PIXEL_STD`].
    pub fn patchify(&self, images: &[&ImageTensor]) -> Mat {
        let p = self.cfg.patch;
        let gsz = self.cfg.grid();
        let pd = p * p * 3;
        let mut out = Mat::zeros(images.len() * gsz * gsz, pd);
        for (b, img) in images.iter().enumerate() {
            assert_eq!(
                (img.height(), img.width()),
                (self.cfg.image_size, self.cfg.image_size)
            );
            for py in 0..gsz {
                for px in 0..gsz {
                    let row = out.row_mut((b * gsz + py) * gsz + px);
                    let mut k = 0;
                    for y in 0..p {
                        for x in 0..p {
                            let px_val = img.pixel(py * p + y, px * p + x);
                            for c in 0..3 {
                                row[k + c] = (px_val[c] - PIXEL_MEAN) / PIXEL_STD;
                            }
                            k += 3;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn segments(&self, batch: usize) -> Vec<(usize, usize)> {
        let n = self.cfg.num_tokens();
        (0..batch).map(|b| (b * n, n)).collect()
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, images: &[&ImageTensor]) -> Var {
        let patches = g.constant(self.patchify(images));
        let e = lin(g, store, patches, self.patch_embed);
        let cls = store.var(g, self.cls);
        let pos = store.var(g, self.pos);
        g.assemble_tokens(cls, e, pos, images.len())
    }

    pub fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        x: Var,
        batch: usize,
    ) -> (Var, AttentionMaps) {
        self.blocks[i].forward(g, store, x, &self.segments(batch))
    }

    pub fn final_norm(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        norm(g, store, x, self.ln_final)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[&ImageTensor],
    ) -> VitForward {
        let batch = images.len();
        let mut x = self.embed(g, store, images);
        let mut attention = Vec::with_capacity(self.depth());
        let mut final_input = x;
        for i in 0..self.depth() {
            if i + 1 == self.depth() {
                final_input = x;
            }
            let (y, maps) = self.block(g, store, i, x, batch);
            attention.push(maps);
            x = y;
        }
        let tokens = self.final_norm(g, store, x);
        VitForward {
            tokens,
            final_input,
            attention,
            batch,
        }
    }

    /// Runs only the final block and norm from a given residual stream.
    pub fn forward_tail(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Var {
        let (y, _) = self.block(g, store, self.depth() - 1, x, batch);
        self.final_norm(g, store, y)
    }

    /// `ln1` of the final block applied to its residual input.
    pub fn final_pre_norm(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.blocks[self.depth() - 1].pre_norm(g, store, x)
    }

    /// Final block and norm with the attention input `h` supplied apart
    /// from the residual stream `x`.
    pub fn forward_tail_normed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        h: Var,
        batch: usize,
    ) -> Var {
        let (y, _) =
            self.blocks[self.depth() - 1].forward_normed(g, store, x, h, &self.segments(batch));
        self.final_norm(g, store, y)
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        lin(g, store, x, self.proj)
    }

    /// Projection through the head with gradient blocked into its weights.
    pub fn project_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.const_var(g, self.proj.0);
        let b = store.const_var(g, self.proj.1);
        g.linear(x, w, b)
    }

    pub fn class_rows(&self, batch: usize) -> Vec<usize> {
        let n = self.cfg.num_tokens();
        (0..batch).map(|b| b * n).collect()
    }

    pub fn patch_rows(&self, b: usize) -> Vec<usize> {
        let n = self.cfg.num_tokens();
        (b * n + 1..(b + 1) * n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: usize) -> ImageTensor {
        let px = (0..8 * 8 * 3)
            .map(|i| ((i * 37 + seed * 11) % 19) as f32 / 19.0)
            .collect();
        ImageTensor::new(8, 8, px).unwrap()
    }

    fn loss(vit: &Vit, store: &ParamStore, imgs: &[&ImageTensor]) -> (f32, Vec<(usize, Mat)>) {
        let mut g = Graph::new();
        let f = vit.forward(&mut g, store, imgs);
        let cls = g.gather_rows(f.tokens, &vit.class_rows(imgs.len()));
        let p = vit.project(&mut g, store, cls);
        let (r, c) = g.value(p).shape();
        let w = g.constant(Mat::from_fn(r, c, |i, j| {
            ((i * 5 + j * 3) % 7) as f32 * 0.2 - 0.6
        }));
        let m = g.mul(p, w);
        let s = g.sum_all(m);
        let mut grads = g.backward(s);
        let pg = g.param_grads(&mut grads, store.uid());
        (g.value(s).get(0, 0), pg)
    }

    #[test]
    fn parameter_gradients_match_differences() {
        let cfg = VitConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 4,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vit = Vit::new(&mut store, &mut rng, "v", cfg);
        let (a, b) = (image(1), image(2));
        let imgs = [&a, &b];
        let (_, pg) = loss(&vit, &store, &imgs);
        let names = [
            "v.patch_embed.weight",
            "v.pos_embed",
            "v.block0.attn.qkv.weight",
            "v.block1.mlp.fc1.weight",
            "v.ln_final.weight",
        ];
        for name in names {
            let id = store.id_of(name).unwrap();
            let an = &pg
                .iter()
                .find(|(i, _)| *i == id.0)
                .unwrap_or_else(|| panic!("no grad for {name}"))
                .1;
            for k in (0..an.len()).step_by(13) {
                let eps = 2e-3;
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let lp = loss(&vit, &store, &imgs).0;
                store.get_mut(id).data_mut()[k] = orig - eps;
                let lm = loss(&vit, &store, &imgs).0;
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let a = an.data()[k];
                assert!(
                    (fd - a).abs() <= 3e-2 * (1.0 + fd.abs()),
                    "{name}[{k}]: fd {fd} vs {a}"
                );
            }
        }
    }
}
