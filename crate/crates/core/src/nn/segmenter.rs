//! Small encoder-decoder segmentation network with skip connections.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::ImageTensor;
use crate::nn::params::{xavier, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    /// Channels at the first level; doubled at each deeper level.
    pub base_channels: usize,
    pub levels: usize,
    pub num_classes: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            base_channels: 24,
            levels: 4,
            num_classes: 7,
        }
    }
}

type Conv = (ParamId, ParamId);

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    enc: Vec<(Conv, Conv)>,
    dec: Vec<(Conv, Conv)>,
    head: Conv,
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> Conv {
    // He-style scaling for ReLU stacks
    let a = (6.0 / (9 * cin) as f32).sqrt();
    let w = Mat::from_fn(9 * cin, cout, |_, _| rng.gen_range(-a..a));
    (
        store.add(format!("{name}.weight"), w),
        store.add(format!("{name}.bias"), Mat::zeros(1, cout)),
    )
}

impl Segmenter {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: SegmenterConfig,
    ) -> Self {
        let ch: Vec<usize> = (0..cfg.levels).map(|l| cfg.base_channels << l).collect();
        let mut enc = Vec::new();
        let mut cin = 3;
        for (l, &c) in ch.iter().enumerate() {
            enc.push((
                add_conv(store, rng, &format!("{prefix}.enc{l}.conv0"), cin, c),
                add_conv(store, rng, &format!("{prefix}.enc{l}.conv1"), c, c),
            ));
            cin = c;
        }
        let mut dec = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            dec.push((
                add_conv(
                    store,
                    rng,
                    &format!("{prefix}.dec{l}.conv0"),
                    ch[l + 1] + ch[l],
                    ch[l],
                ),
                add_conv(store, rng, &format!("{prefix}.dec{l}.conv1"), ch[l], ch[l]),
            ));
        }
        let head = (
            store.add(
                format!("{prefix}.head.weight"),
                xavier(rng, ch[0], cfg.num_classes),
            ),
            store.add(
                format!("{prefix}.head.bias"),
                Mat::zeros(1, cfg.num_classes),
            ),
        );
        Segmenter {
            cfg,
            enc,
            dec,
            head,
        }
    }

    fn conv(
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        c: Conv,
        b: usize,
        h: usize,
        w: usize,
    ) -> Var {
        let wv = store.var(g, c.0);
        let bv = store.var(g, c.1);
        let y = g.conv3x3(x, wv, bv, b, h, w);
        g.relu(y)
    }

    /// Per-pixel class logits, `(B·H·W)×K`. H and W must be divisible by
    /// `2^(levels-1)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&ImageTensor]) -> Var {
        let b = images.len();
        let (h0, w0) = (images[0].height(), images[0].width());
        let mut data = Vec::with_capacity(b * h0 * w0 * 3);
        for img in images {
            assert_eq!((img.height(), img.width()), (h0, w0));
            data.extend(img.pixels().iter().map(|v| v - 0.5));
        }
        let x = g.constant(Mat::from_vec(b * h0 * w0, 3, data).expect("image buffer"));
        let mut skips = Vec::new();
        let (mut h, mut w) = (h0, w0);
        let mut cur = x;
        for (l, &(c0, c1)) in self.enc.iter().enumerate() {
            cur = Self::conv(g, store, cur, c0, b, h, w);
            cur = Self::conv(g, store, cur, c1, b, h, w);
            if l + 1 < self.enc.len() {
                skips.push((cur, h, w));
                cur = g.avg_pool2(cur, b, h, w);
                h /= 2;
                w /= 2;
            }
        }
        for &(c0, c1) in &self.dec {
            let (skip, sh, sw) = skips.pop().expect("skip");
            cur = g.upsample2(cur, b, h, w);
            h = sh;
            w = sw;
            cur = g.concat_cols(cur, skip);
            cur = Self::conv(g, store, cur, c0, b, h, w);
            cur = Self::conv(g, store, cur, c1, b, h, w);
        }
        let hw = store.var(g, self.head.0);
        let hb = store.var(g, self.head.1);
        g.linear(cur, hw, hb)
    }
}
