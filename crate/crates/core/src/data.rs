//! Synthetic egocentric desk scenes: rendering, on-disk layout and loading.
//!
//! A scene is a textured table seen from above with up to four hands. The
//! wearer's hands ("my ...") enter from the bottom edge and the partner's
//! ("your ...") from the top. The partner faces the wearer, so their left
//! hand appears on the viewer's right. Held objects touch the palm of a hand
//! on the matching side.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{ImageTensor, PhraseVocab};
use crate::error::{CtdnError, Result};
use crate::losses::ClassLabelVector;
use crate::par::{self, Parallelism};

/// Minimum visible pixels for a class to count as present.
pub const PRESENCE_PIXELS: usize = 16;
/// Placement attempts before giving up on a scene.
pub const MAX_ATTEMPTS: usize = 100;

pub const DEFAULT_CLASSES: [&str; 6] = [
    "my left hand",
    "my right hand",
    "your left hand",
    "your right hand",
    "object in left hand",
    "object in right hand",
];
pub const DEFAULT_FG_COGNITION: [&str; 4] = ["hand", "object", "arm", "held object"];
pub const DEFAULT_BG_COGNITION: [&str; 6] = [
    "table",
    "wall",
    "floor",
    "jenga block",
    "shadow",
    "background clutter",
];

// Sampling ranges for angles and phases. The scene streams depend on these
// exact literals.
#[allow(clippy::approx_constant)]
const HALF_TURN: f32 = 3.14;
#[allow(clippy::approx_constant)]
const FULL_TURN: f32 = 6.28;

/// Fixed display palette indexed by class id.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [128, 128, 128],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Hand { mine: bool, side: Side },
    Object { side: Side },
}

impl ClassKind {
    pub fn parse(phrase: &str) -> Result<Self> {
        let p = phrase.trim().to_lowercase();
        let side = if p.contains("left") {
            Side::Left
        } else if p.contains("right") {
            Side::Right
        } else {
            return Err(CtdnError::Config(format!("class `{phrase}` names no side")));
        };
        if p.starts_with("object") {
            Ok(ClassKind::Object { side })
        } else if p.starts_with("my ") && p.ends_with("hand") {
            Ok(ClassKind::Hand { mine: true, side })
        } else if p.starts_with("your ") && p.ends_with("hand") {
            Ok(ClassKind::Hand { mine: false, side })
        } else {
            Err(CtdnError::Config(format!(
                "class `{phrase}` is not renderable"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistractorKind {
    Wall,
    Floor,
    Block,
    Shadow,
    Clutter,
}

impl DistractorKind {
    pub fn parse(phrase: &str) -> Option<Self> {
        match phrase.trim() {
            "wall" => Some(DistractorKind::Wall),
            "floor" => Some(DistractorKind::Floor),
            "jenga block" => Some(DistractorKind::Block),
            "shadow" => Some(DistractorKind::Shadow),
            "background clutter" => Some(DistractorKind::Clutter),
            _ => None,
        }
    }
}

/// Foreground and background cognition phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CognitionVocab {
    pub fg: Vec<String>,
    pub bg: Vec<String>,
}

impl Default for CognitionVocab {
    fn default() -> Self {
        CognitionVocab {
            fg: DEFAULT_FG_COGNITION.iter().map(|s| s.to_string()).collect(),
            bg: DEFAULT_BG_COGNITION.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub distractors: Vec<String>,
    pub cognition: CognitionVocab,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 96,
            width: 96,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            distractors: DEFAULT_BG_COGNITION.iter().map(|s| s.to_string()).collect(),
            cognition: CognitionVocab::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<Vec<ClassKind>> {
        if self.height < 32 || self.width < 32 {
            return Err(CtdnError::Config(format!(
                "canvas {}x{} below 32x32",
                self.height, self.width
            )));
        }
        if self.classes.is_empty() || self.classes.len() >= PALETTE.len() {
            return Err(CtdnError::Config(format!("{} classes", self.classes.len())));
        }
        for d in &self.distractors {
            if !self.cognition.bg.contains(d) {
                return Err(CtdnError::Config(format!(
                    "distractor `{d}` not in background cognition"
                )));
            }
        }
        let kinds = self
            .classes
            .iter()
            .map(|c| ClassKind::parse(c))
            .collect::<Result<Vec<_>>>()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(CtdnError::Config(format!(
                    "duplicate class `{}`",
                    self.classes[i]
                )));
            }
        }
        Ok(kinds)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Classes, then fg cognition, then bg cognition, without duplicates.
    pub fn phrase_vocab(&self) -> PhraseVocab {
        let mut out: Vec<String> = Vec::new();
        for p in self
            .classes
            .iter()
            .chain(&self.cognition.fg)
            .chain(&self.cognition.bg)
        {
            if !out.contains(p) {
                out.push(p.clone());
            }
        }
        PhraseVocab::new(out)
    }
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    /// Row-major class index per pixel, 0 = background.
    pub mask: Vec<u8>,
    pub labels: ClassLabelVector,
    pub seed: u64,
    /// Distractor phrases actually painted, sorted and deduplicated.
    pub distractors: Vec<String>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` under dataset seed `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

// ---- geometry ----------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Shape {
    Capsule {
        y0: f32,
        x0: f32,
        y1: f32,
        x1: f32,
        r: f32,
    },
    Ellipse {
        cy: f32,
        cx: f32,
        ry: f32,
        rx: f32,
        angle: f32,
    },
    Rect {
        cy: f32,
        cx: f32,
        hh: f32,
        hw: f32,
        angle: f32,
    },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Capsule { y0, x0, y1, x1, r } => {
                let (dy, dx) = (y1 - y0, x1 - x0);
                let l2 = dy * dy + dx * dx;
                let t = if l2 > 0.0 {
                    (((y - y0) * dy + (x - x0) * dx) / l2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (py, px) = (y0 + t * dy - y, x0 + t * dx - x);
                py * py + px * px <= r * r
            }
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (u, v) = ((y - cy) * c - (x - cx) * s, (y - cy) * s + (x - cx) * c);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::Rect {
                cy,
                cx,
                hh,
                hw,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (u, v) = ((y - cy) * c - (x - cx) * s, (y - cy) * s + (x - cx) * c);
                u.abs() <= hh && v.abs() <= hw
            }
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f32; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, shapes: &[Shape], color: [f32; 3], label: Option<u8>) {
        for y in 0..self.h {
            for x in 0..self.w {
                let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
                if shapes.iter().any(|s| s.contains(fy, fx)) {
                    let i = y * self.w + x;
                    self.rgb[i] = color;
                    if let Some(l) = label {
                        self.mask[i] = l;
                    }
                }
            }
        }
    }

    fn darken(&mut self, shape: Shape, factor: f32) {
        for y in 0..self.h {
            for x in 0..self.w {
                if shape.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    let p = &mut self.rgb[y * self.w + x];
                    p.iter_mut().for_each(|c| *c *= factor);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

fn skin(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let tones = [
        [0.94, 0.78, 0.66],
        [0.83, 0.62, 0.48],
        [0.62, 0.43, 0.3],
        [0.45, 0.3, 0.2],
    ];
    let t = tones[rng.gen_range(0..tones.len())];
    jitter(rng, t, 0.04)
}

fn saturated(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut c = [
        rng.gen_range(0.0..0.35),
        rng.gen_range(0.0..0.35),
        rng.gen_range(0.0..0.35),
    ];
    let hot = rng.gen_range(0..3);
    c[hot] = rng.gen_range(0.75..1.0);
    c
}

struct HandGeom {
    shapes: Vec<Shape>,
    palm: (f32, f32, f32),
    /// Unit vector from wrist toward fingertips.
    dir: (f32, f32),
}

fn hand_geometry(rng: &mut ChaCha8Rng, kind: (bool, Side), h: f32, w: f32) -> HandGeom {
    let (mine, side) = kind;
    let s = h.min(w) / 96.0;
    // viewer-side half: the partner's left appears on the viewer's right
    let viewer_left = (side == Side::Left) == mine;
    let xr = if viewer_left {
        (0.12, 0.42)
    } else {
        (0.58, 0.88)
    };
    let xe = rng.gen_range(xr.0..xr.1) * w;
    let reach = rng.gen_range(0.3..0.42) * h;
    let tilt: f32 = rng.gen_range(-0.35..0.35) + if viewer_left { 0.15 } else { -0.15 };
    // direction into the canvas
    let sign = if mine { -1.0 } else { 1.0 };
    let dir = (
        sign * tilt.cos(),
        tilt.sin() * if mine { 1.0 } else { -1.0 },
    );
    let (ey, ex) = (if mine { h + 4.0 * s } else { -4.0 * s }, xe);
    let (wy, wx) = (ey + dir.0 * reach, ex + dir.1 * reach);
    let arm_r = rng.gen_range(5.0..7.0) * s;
    let palm_r = rng.gen_range(7.0..9.0) * s;
    let (py, px) = (wy + dir.0 * palm_r * 0.8, wx + dir.1 * palm_r * 0.8);
    let mut shapes = vec![
        Shape::Capsule {
            y0: ey,
            x0: ex,
            y1: wy,
            x1: wx,
            r: arm_r,
        },
        Shape::Ellipse {
            cy: py,
            cx: px,
            ry: palm_r,
            rx: palm_r * 0.85,
            angle: tilt,
        },
    ];
    let base_angle = dir.1.atan2(dir.0);
    for f in 0..4 {
        let a = base_angle + (f as f32 - 1.5) * 0.32;
        let (fy, fx) = (py + a.cos() * palm_r * 0.7, px + a.sin() * palm_r * 0.7);
        let len = rng.gen_range(6.0..9.0) * s;
        shapes.push(Shape::Capsule {
            y0: fy,
            x0: fx,
            y1: fy + a.cos() * len,
            x1: fx + a.sin() * len,
            r: 1.8 * s,
        });
    }
    // thumb toward the body midline
    let ta = base_angle + if viewer_left == mine { 1.2 } else { -1.2 };
    shapes.push(Shape::Capsule {
        y0: py,
        x0: px,
        y1: py + ta.cos() * palm_r * 1.3,
        x1: px + ta.sin() * palm_r * 1.3,
        r: 2.2 * s,
    });
    HandGeom {
        shapes,
        palm: (py, px, palm_r),
        dir,
    }
}

fn object_shape(rng: &mut ChaCha8Rng, hand: &HandGeom, s: f32, overlap: f32) -> Shape {
    let (py, px, pr) = hand.palm;
    let off = rng.gen_range(-0.9f32..0.9);
    let base = hand.dir.1.atan2(hand.dir.0) + off;
    let (dy, dx) = (base.cos(), base.sin());
    let r = rng.gen_range(5.0..8.0) * s;
    // palm radius along this direction, approximately
    let dist = pr + r - overlap;
    let (cy, cx) = (py + dy * dist, px + dx * dist);
    if rng.gen_bool(0.5) {
        Shape::Ellipse {
            cy,
            cx,
            ry: r,
            rx: r,
            angle: 0.0,
        }
    } else {
        Shape::Rect {
            cy,
            cx,
            hh: r,
            hw: r,
            angle: base,
        }
    }
}

fn eight_adjacent(mask: &[u8], h: usize, w: usize, a: u8, b: u8) -> bool {
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != a {
                continue;
            }
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && mask[yy as usize * w + xx as usize] == b
                    {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn pixel_counts(mask: &[u8], k: usize) -> Vec<usize> {
    let mut c = vec![0usize; k + 1];
    for &m in mask {
        c[(m as usize).min(k)] += 1;
    }
    c
}

fn centroid_y(mask: &[u8], w: usize, label: u8) -> f32 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m == label {
            s += (i / w) as f64 + 0.5;
            n += 1;
        }
    }
    (s / n.max(1) as f64) as f32
}

type Rendered = (Vec<[f32; 3]>, Vec<u8>, Vec<usize>, Vec<String>);

fn try_render(spec: &SceneSpec, kinds: &[ClassKind], rng: &mut ChaCha8Rng) -> Option<Rendered> {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f32, w as f32);
    let s = hf.min(wf) / 96.0;
    let mut cv = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        mask: vec![0; h * w],
    };

    // table with grain
    let table = jitter(rng, [0.55, 0.5, 0.45], 0.15);
    let grain = rng.gen_range(0.02..0.06);
    let freq = rng.gen_range(0.15..0.4);
    let phase = rng.gen_range(0.0..FULL_TURN);
    for y in 0..h {
        let g = grain * ((y as f32 * freq + phase).sin());
        for x in 0..w {
            cv.rgb[y * w + x] = table.map(|c| (c + g).clamp(0.0, 1.0));
        }
    }

    // distractors
    let dkinds: Vec<(DistractorKind, &String)> = spec
        .distractors
        .iter()
        .filter_map(|d| DistractorKind::parse(d).map(|k| (k, d)))
        .collect();
    let mut painted: Vec<String> = Vec::new();
    if !dkinds.is_empty() {
        for _ in 0..rng.gen_range(1..=3) {
            let (kind, phrase) = dkinds[rng.gen_range(0..dkinds.len())];
            painted.push(phrase.clone());
            match kind {
                DistractorKind::Wall => {
                    let band = rng.gen_range(0.08..0.18) * hf;
                    let c = jitter(rng, [0.8, 0.8, 0.75], 0.1);
                    cv.paint(
                        &[Shape::Rect {
                            cy: 0.0,
                            cx: wf / 2.0,
                            hh: band,
                            hw: wf,
                            angle: 0.0,
                        }],
                        c,
                        None,
                    );
                }
                DistractorKind::Floor => {
                    let band = rng.gen_range(0.05..0.12) * wf;
                    let c = jitter(rng, [0.35, 0.33, 0.3], 0.08);
                    let cx = if rng.gen_bool(0.5) { 0.0 } else { wf };
                    cv.paint(
                        &[Shape::Rect {
                            cy: hf / 2.0,
                            cx,
                            hh: hf,
                            hw: band,
                            angle: 0.0,
                        }],
                        c,
                        None,
                    );
                }
                DistractorKind::Block => {
                    let c = jitter(rng, [0.85, 0.68, 0.45], 0.05);
                    for _ in 0..rng.gen_range(1..=3) {
                        let shape = Shape::Rect {
                            cy: rng.gen_range(0.1..0.9) * hf,
                            cx: rng.gen_range(0.1..0.9) * wf,
                            hh: 2.5 * s,
                            hw: 7.0 * s,
                            angle: rng.gen_range(0.0..HALF_TURN),
                        };
                        cv.paint(&[shape], c, None);
                    }
                }
                DistractorKind::Shadow => {
                    let shape = Shape::Ellipse {
                        cy: rng.gen_range(0.2..0.8) * hf,
                        cx: rng.gen_range(0.2..0.8) * wf,
                        ry: rng.gen_range(8.0..16.0) * s,
                        rx: rng.gen_range(8.0..16.0) * s,
                        angle: rng.gen_range(0.0..HALF_TURN),
                    };
                    cv.darken(shape, rng.gen_range(0.55..0.75));
                }
                DistractorKind::Clutter => {
                    // sometimes skin- or object-colored to interfere with foreground
                    let c = match rng.gen_range(0..3) {
                        0 => skin(rng),
                        1 => saturated(rng),
                        _ => jitter(rng, [0.5, 0.5, 0.5], 0.3),
                    };
                    let shape = Shape::Ellipse {
                        cy: rng.gen_range(0.15..0.85) * hf,
                        cx: rng.gen_range(0.15..0.85) * wf,
                        ry: rng.gen_range(3.0..6.0) * s,
                        rx: rng.gen_range(3.0..6.0) * s,
                        angle: 0.0,
                    };
                    cv.paint(&[shape], c, None);
                }
            }
        }
    }

    // hands
    let hand_slots: Vec<usize> = (0..kinds.len())
        .filter(|&i| matches!(kinds[i], ClassKind::Hand { .. }))
        .collect();
    let obj_slots: Vec<usize> = (0..kinds.len())
        .filter(|&i| matches!(kinds[i], ClassKind::Object { .. }))
        .collect();
    if hand_slots.is_empty() && !obj_slots.is_empty() {
        return None;
    }
    let n_hands = rng.gen_range(1..=hand_slots.len().min(4));
    let mut chosen = hand_slots.clone();
    for i in 0..chosen.len() {
        let j = rng.gen_range(i..chosen.len());
        chosen.swap(i, j);
    }
    chosen.truncate(n_hands);
    let my_sleeve = jitter(rng, [0.2, 0.3, 0.6], 0.2);
    let your_sleeve = jitter(rng, [0.6, 0.25, 0.2], 0.2);
    let my_skin = skin(rng);
    let your_skin = skin(rng);
    let mut geoms: Vec<(usize, HandGeom)> = Vec::new();
    for &slot in &chosen {
        let ClassKind::Hand { mine, side } = kinds[slot] else {
            unreachable!()
        };
        let g = hand_geometry(rng, (mine, side), hf, wf);
        let label = (slot + 1) as u8;
        let (sleeve, sk) = if mine {
            (my_sleeve, my_skin)
        } else {
            (your_sleeve, your_skin)
        };
        cv.paint(&g.shapes[..1], sleeve, Some(label));
        cv.paint(&g.shapes[1..], sk, Some(label));
        geoms.push((slot, g));
    }

    // held objects
    let mut rendered: Vec<usize> = chosen.clone();
    let mut contacts: Vec<(u8, u8)> = Vec::new();
    for &slot in &obj_slots {
        if rng.gen_bool(0.45) {
            continue;
        }
        let ClassKind::Object { side } = kinds[slot] else {
            unreachable!()
        };
        let holders: Vec<&(usize, HandGeom)> = geoms
            .iter()
            .filter(|(hs, _)| matches!(kinds[*hs], ClassKind::Hand { side: hside, .. } if hside == side))
            .collect();
        if holders.is_empty() {
            continue;
        }
        let (hslot, hg) = holders[rng.gen_range(0..holders.len())];
        let overlap = rng.gen_range(2.0..=6.0);
        let shape = object_shape(rng, hg, s, overlap);
        let c = saturated(rng);
        cv.paint(&[shape], c, Some((slot + 1) as u8));
        rendered.push(slot);
        contacts.push(((slot + 1) as u8, (*hslot + 1) as u8));
    }

    // validation
    let counts = pixel_counts(&cv.mask, kinds.len());
    for &slot in &rendered {
        if counts[slot + 1] < PRESENCE_PIXELS * 3 {
            return None;
        }
        if let ClassKind::Hand { mine, .. } = kinds[slot] {
            let cy = centroid_y(&cv.mask, w, (slot + 1) as u8);
            if mine != (cy > hf / 2.0) {
                return None;
            }
        }
    }
    for &(o, hnd) in &contacts {
        if !eight_adjacent(&cv.mask, h, w, o, hnd) {
            return None;
        }
    }
    rendered.sort();

    // sensor noise
    for p in cv.rgb.iter_mut() {
        let n = rng.gen_range(-0.02..0.02);
        *p = p.map(|c| (c + n).clamp(0.0, 1.0));
    }
    painted.sort();
    painted.dedup();
    Some((cv.rgb, cv.mask, rendered, painted))
}

/// Renders scene `index`. Deterministic in `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    generate_scene_from_seed(spec, scene_seed(spec.seed, index))
}

/// Renders the scene whose per-scene seed (as stored in a manifest) is `seed`.
pub fn generate_scene_from_seed(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let kinds = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some((rgb, mask, rendered, distractors)) = try_render(spec, &kinds, &mut rng) {
            // quantize so an in-memory scene equals its PNG round trip
            let pixels = rgb
                .iter()
                .flat_map(|p| p.map(|c| (c * 255.0).round() / 255.0))
                .collect();
            let image = ImageTensor::new(spec.height, spec.width, pixels)?;
            let mut labels = ClassLabelVector::zeros(kinds.len());
            for r in rendered {
                labels.set(r, true);
            }
            return Ok(Scene {
                image,
                mask,
                labels,
                seed,
                distractors,
            });
        }
    }
    Err(CtdnError::InfeasiblePlacement(MAX_ATTEMPTS))
}

pub fn generate_scenes_with(
    spec: &SceneSpec,
    indices: &[u64],
    mode: Parallelism,
) -> Result<Vec<Scene>> {
    par::map_slice(mode, indices, |&i| generate_scene(spec, i))
        .into_iter()
        .collect()
}

/// Present classes of a mask: entry `k-1` is set iff label `k` covers at
/// least [`PRESENCE_PIXELS`] pixels.
pub fn derive_multilabel(mask: &[u8], num_classes: usize) -> Result<ClassLabelVector> {
    let mut counts = vec![0usize; num_classes + 1];
    for &m in mask {
        let m = m as usize;
        if m > num_classes {
            return Err(CtdnError::IndexOutOfRange {
                index: m,
                len: num_classes + 1,
            });
        }
        counts[m] += 1;
    }
    ClassLabelVector::new(
        counts[1..]
            .iter()
            .map(|&c| (c >= PRESENCE_PIXELS) as u8)
            .collect(),
    )
}

// ---- png ---------------------------------------------------------------------

fn png_err(path: &Path, e: impl std::fmt::Display) -> CtdnError {
    CtdnError::Png {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CtdnError::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CtdnError::io(path, e))
}

fn write_png(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Decoded raw samples: (width, height, channels, bytes).
fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| CtdnError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "only 8-bit images are supported"));
    }
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type,
        buf,
    ))
}

pub fn write_gray_png(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Grayscale, None, data)
}

pub fn write_rgb_png(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Rgb, None, data)
}

pub fn image_to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect()
}

pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    write_rgb_png(path, img.width(), img.height(), &image_to_bytes(img))
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let (w, h, color, buf) = read_png(path)?;
    if color != png::ColorType::Rgb {
        return Err(png_err(path, format!("expected RGB, got {color:?}")));
    }
    ImageTensor::new(h, w, buf.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Palette PNG whose pixel values are the class indices.
pub fn save_mask(path: &Path, w: usize, h: usize, mask: &[u8]) -> Result<()> {
    let palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
    write_png(path, w, h, png::ColorType::Indexed, Some(palette), mask)
}

/// Returns `(width, height, labels)`.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, buf) = read_png(path)?;
    match color {
        png::ColorType::Indexed | png::ColorType::Grayscale => Ok((w, h, buf)),
        other => Err(png_err(
            path,
            format!("expected a palette mask, got {other:?}"),
        )),
    }
}

// ---- dataset -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(CtdnError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub labels: ClassLabelVector,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
    pub cognition: CognitionVocab,
    /// Distractor phrases the renderer drew from.
    pub distractors: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root
            .join("images")
            .join(e.split.as_str())
            .join(format!("{}.png", e.id))
    }

    pub fn mask_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root
            .join("masks")
            .join(e.split.as_str())
            .join(format!("{}.png", e.id))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn phrase_vocab(&self) -> PhraseVocab {
        self.scene_spec(32, 32).phrase_vocab()
    }

    /// Spec that regenerates this dataset's scenes from their stored seeds
    /// at canvas size `(height, width)`.
    pub fn scene_spec(&self, height: usize, width: usize) -> SceneSpec {
        SceneSpec {
            height,
            width,
            classes: self.classes.clone(),
            distractors: self.distractors.clone(),
            cognition: self.cognition.clone(),
            seed: 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.split.as_str(),
                e.labels.to_bitstring(),
                e.seed
            ));
        }
        s
    }

    pub fn save(&self) -> Result<()> {
        let write = |name: &str, lines: &[String]| -> Result<()> {
            let p = self.root.join(name);
            fs::write(
                &p,
                lines.iter().map(|l| format!("{l}\n")).collect::<String>(),
            )
            .map_err(|e| CtdnError::io(&p, e))
        };
        fs::create_dir_all(&self.root).map_err(|e| CtdnError::io(&self.root, e))?;
        write("classes.txt", &self.classes)?;
        write("cognition_fg.txt", &self.cognition.fg)?;
        write("cognition_bg.txt", &self.cognition.bg)?;
        write("distractors.txt", &self.distractors)?;
        let p = self.root.join(MANIFEST_FILE);
        fs::write(&p, self.to_text()).map_err(|e| CtdnError::io(&p, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let read_lines = |name: &str| -> Result<Vec<String>> {
            let p = root.join(name);
            Ok(PhraseVocab::load(&p)?.phrases().to_vec())
        };
        let classes = read_lines("classes.txt")?;
        let cognition = CognitionVocab {
            fg: read_lines("cognition_fg.txt")?,
            bg: read_lines("cognition_bg.txt")?,
        };
        let distractors = read_lines("distractors.txt")?;
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CtdnError::io(&path, e))?;
        let bad = |line: usize, msg: &str| CtdnError::Format {
            path: path.clone(),
            msg: format!("line {}: {msg}", line + 1),
        };
        let mut entries = Vec::new();
        let mut ids = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(n, "expected 4 tab-separated fields"));
            }
            let labels = ClassLabelVector::from_bitstring(f[2])
                .map_err(|_| bad(n, "bad label bitstring"))?;
            if labels.len() != classes.len() {
                return Err(bad(n, "label length differs from class count"));
            }
            if !ids.insert(f[0].to_string()) {
                return Err(bad(n, "duplicate id"));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split: Split::parse(f[1]).map_err(|_| bad(n, "bad split"))?,
                labels,
                seed: f[3].parse().map_err(|_| bad(n, "bad seed"))?,
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            classes,
            cognition,
            distractors,
        })
    }
}

/// Val scenes draw from a disjoint index range so their content does not
/// depend on the train count.
const VAL_INDEX_BASE: u64 = 1 << 32;

pub fn build_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    build_dataset_with(spec, n_train, n_val, out_dir, Parallelism::default())
}

pub fn build_dataset_with(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    out_dir: &Path,
    mode: Parallelism,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries: Vec::new(),
        classes: spec.classes.clone(),
        cognition: spec.cognition.clone(),
        distractors: spec.distractors.clone(),
    };
    for (split, n, base, prefix) in [
        (Split::Train, n_train, 0, "t"),
        (Split::Val, n_val, VAL_INDEX_BASE, "v"),
    ] {
        let indices: Vec<u64> = (0..n as u64).map(|i| base + i).collect();
        let scenes = par::map_slice(mode, &indices, |&idx| -> Result<ManifestEntry> {
            let scene = generate_scene(spec, idx)?;
            let entry = ManifestEntry {
                id: format!("{prefix}{:05}", idx - base),
                split,
                labels: derive_multilabel(&scene.mask, spec.num_classes())?,
                seed: scene.seed,
            };
            save_image(&manifest.image_path(&entry), &scene.image)?;
            save_mask(
                &manifest.mask_path(&entry),
                spec.width,
                spec.height,
                &scene.mask,
            )?;
            Ok(entry)
        });
        for s in scenes {
            manifest.entries.push(s?);
        }
    }
    manifest.save()?;
    Ok(manifest)
}

/// Images and masks of a manifest held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub masks: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let loaded = par::map_slice(
            Parallelism::default(),
            &manifest.entries,
            |e| -> Result<_> {
                let img = load_image(&manifest.image_path(e))?;
                let (w, h, mask) = load_mask(&manifest.mask_path(e))?;
                if (w, h) != (img.width(), img.height()) {
                    return Err(CtdnError::dims(format!(
                        "mask of {} differs from image size",
                        e.id
                    )));
                }
                Ok((img, mask))
            },
        );
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for l in loaded {
            let (i, m) = l?;
            images.push(i);
            masks.push(m);
        }
        Ok(Dataset {
            manifest,
            images,
            masks,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.entries.len())
            .filter(|&i| self.manifest.entries[i].split == split)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }
}

/// Crops a mask to `(top, left, h, w)`.
pub fn crop_mask(
    mask: &[u8],
    width: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for y in top..top + h {
        out.extend_from_slice(&mask[y * width + left..y * width + left + w]);
    }
    out
}

/// Random crops resized to `out_size`, each labeled from the mask inside the
/// crop. Crops with no present class are re-drawn.
pub fn load_batch(
    data: &Dataset,
    indices: &[usize],
    crop: (usize, usize),
    out_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(ImageTensor, ClassLabelVector)>> {
    let k = data.num_classes();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = data.images.get(i).ok_or(CtdnError::IndexOutOfRange {
            index: i,
            len: data.images.len(),
        })?;
        let (ih, iw) = (img.height(), img.width());
        if crop.0 > ih || crop.1 > iw || crop.0 == 0 || crop.1 == 0 {
            return Err(CtdnError::CropTooLarge {
                crop,
                image: (ih, iw),
            });
        }
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let top = rng.gen_range(0..=ih - crop.0);
            let left = rng.gen_range(0..=iw - crop.1);
            let labels =
                derive_multilabel(&crop_mask(&data.masks[i], iw, top, left, crop.0, crop.1), k)?;
            if labels.any() {
                found = Some((
                    img.crop(top, left, crop.0, crop.1)
                        .resize(out_size, out_size),
                    labels,
                ));
                break;
            }
        }
        out.push(found.ok_or(CtdnError::InfeasiblePlacement(MAX_ATTEMPTS))?);
    }
    Ok(out)
}
