//! Synthetic RGB-D scenes with exact salient-object masks.
//!
//! Depth follows the 0 = near, 1 = far convention. Each scene holds one
//! salient object and some distractors. Which cue separates the salient
//! object from the rest depends on the [`Regime`]:
//!
//! * `color`: the salient object has a contrasting color, everything lies in
//!   one flat depth plane and distractors are low-contrast.
//! * `depth`: the salient object is near and camouflaged against the far
//!   background, while distractors are colorful but far.
//! * `both`: the salient object is colorful and near. Distractors are either
//!   colorful and far or camouflaged and near, so neither cue alone suffices.
//! * `mixed`: one of the above per sample.

mod augment;
mod pnm;
mod store;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, flip_horizontal, rotate90, scale_brightness, AugmentToggles};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use store::{load_dataset, load_sample, save_dataset, save_sample, SamplePaths, MANIFEST};

/// One RGB-D scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `(1, 1, H, W)` in `[0, 1]`, 0 = near.
    pub depth: Tensor<f32>,
    /// `(1, 1, H, W)` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl SceneSample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.mask.shape();
        (s.h, s.w)
    }

    /// Checks shapes, value ranges and mask binarity.
    pub fn validate(&self) -> Result<()> {
        let (r, d, m) = (self.rgb.shape(), self.depth.shape(), self.mask.shape());
        if r.n != 1 || r.c != 3 || d != Shape::new(1, 1, r.h, r.w) || m != d {
            return Err(Error::dim("sample", format!("rgb {r}, depth {d}, mask {m}")));
        }
        let in_range = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.rgb) || !in_range(&self.depth) {
            return Err(Error::Domain(format!("sample {} has values outside [0, 1]", self.id)));
        }
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Domain(format!("mask of {} is not binary", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Color,
    Depth,
    Both,
    Mixed,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Color, Regime::Depth, Regime::Both, Regime::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Color => "color",
            Regime::Depth => "depth",
            Regime::Both => "both",
            Regime::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}` (expected color, depth, both or mixed)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Image (height, width).
    pub size: (usize, usize),
    /// Total objects per scene, salient one included (inclusive range).
    pub objects: (usize, usize),
    pub shapes: Vec<ShapeKind>,
    pub regime: Regime,
    /// Salient object area as a fraction of the image (inclusive range).
    pub salient_area: (f64, f64),
    /// Distractor area fraction range.
    pub distractor_area: (f64, f64),
    /// Amplitude of the smooth luminance pattern over the whole image.
    pub texture: f64,
    /// Standard deviation of per-pixel depth noise.
    pub depth_noise: f64,
    /// Largest per-channel color offset of a camouflaged object.
    pub camouflage: f64,
    /// Smallest mean per-channel difference of a contrasting color.
    pub contrast: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: (64, 64),
            objects: (1, 3),
            shapes: ShapeKind::ALL.to_vec(),
            regime: Regime::Mixed,
            salient_area: (0.04, 0.25),
            distractor_area: (0.02, 0.08),
            texture: 0.08,
            depth_noise: 0.02,
            camouflage: 0.05,
            contrast: 0.35,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let range = |(a, b): (f64, f64)| unit(a) && unit(b) && a <= b;
        if self.size.0 < 4 || self.size.1 < 4 {
            return Err(Error::Config(format!("image size {:?} is too small", self.size)));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(Error::Config(format!("invalid object count range {:?}", self.objects)));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape vocabulary is empty".into()));
        }
        if !range(self.salient_area) || !range(self.distractor_area) || self.salient_area.0 <= 0.0 {
            return Err(Error::Config("area ranges must be ordered fractions in (0, 1]".into()));
        }
        if ![self.texture, self.depth_noise, self.camouflage, self.contrast]
            .into_iter()
            .all(unit)
        {
            return Err(Error::Config("amplitudes must lie in [0, 1]".into()));
        }
        if self.contrast > 0.45 {
            return Err(Error::Config("contrast above 0.45 cannot always be met".into()));
        }
        Ok(())
    }

    /// Inclusive pixel-count bounds of the salient object.
    pub fn salient_pixel_bounds(&self) -> (usize, usize) {
        let total = (self.size.0 * self.size.1) as f64;
        (
            (self.salient_area.0 * total).ceil() as usize,
            (self.salient_area.1 * total).floor() as usize,
        )
    }
}

/// Geometric primitive with its bounding radius.
#[derive(Clone, Copy, Debug)]
struct Primitive {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Half extents (ellipse/rectangle) or circumradius in `a` (triangle).
    a: f64,
    b: f64,
    angle: f64,
    /// Triangle vertex angle offsets.
    jitter: [f64; 3],
}

impl Primitive {
    fn radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Rectangle => self.a.hypot(self.b),
            _ => self.a.max(self.b),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        match self.kind {
            ShapeKind::Ellipse => {
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                u * u + v * v <= 1.0
            }
            ShapeKind::Rectangle => (dx * c + dy * s).abs() <= self.a && (-dx * s + dy * c).abs() <= self.b,
            ShapeKind::Triangle => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|i| {
                        let t = self.angle + i as f64 * std::f64::consts::TAU / 3.0 + self.jitter[i];
                        (t.cos() * self.a, t.sin() * self.a)
                    })
                    .collect();
                let cross = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (dy - p.1) - (q.1 - p.1) * (dx - p.0);
                let d = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        let r = self.radius() + 1.0;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let y1 = ((self.cy + r).ceil().max(0.0) as usize).min(h);
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let x1 = ((self.cx + r).ceil().max(0.0) as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                out[y * w + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        out
    }
}

fn random_primitive(rng: &mut impl Rng, kinds: &[ShapeKind], area: f64, size: (usize, usize)) -> Primitive {
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let aspect: f64 = rng.gen_range(0.6..1.6);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let jitter = [
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
    ];
    let (a, b) = match kind {
        ShapeKind::Ellipse => {
            let a = (area * aspect / std::f64::consts::PI).sqrt();
            (a, area / (std::f64::consts::PI * a))
        }
        ShapeKind::Rectangle => {
            let a = (area * aspect / 4.0).sqrt();
            (a, area / (4.0 * a))
        }
        ShapeKind::Triangle => {
            let r = (area * 4.0 / (3.0 * 3f64.sqrt())).sqrt();
            (r, r)
        }
    };
    let r = if kind == ShapeKind::Rectangle {
        a.hypot(b)
    } else {
        a.max(b)
    };
    let mut place = |len: usize| {
        let len = len as f64;
        if 2.0 * r < len {
            rng.gen_range(r..len - r)
        } else {
            len / 2.0
        }
    };
    let cy = place(size.0);
    let cx = place(size.1);
    Primitive {
        kind,
        cx,
        cy,
        a,
        b,
        angle,
        jitter,
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ]
}

fn contrasting_color(rng: &mut impl Rng, bg: [f64; 3], min_diff: f64) -> [f64; 3] {
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let diff = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff >= min_diff {
            return c;
        }
    }
}

fn camouflaged_color(rng: &mut impl Rng, bg: [f64; 3], max_offset: f64) -> [f64; 3] {
    let mut c = bg;
    for v in &mut c {
        *v += if max_offset > 0.0 {
            rng.gen_range(-max_offset..=max_offset)
        } else {
            0.0
        };
    }
    c
}

fn near_depth(rng: &mut impl Rng) -> f64 {
    rng.gen_range(0.1..0.35)
}

/// Standard normal draw via Box-Muller.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic scene for `(seed, config)`.
pub fn generate_sample(seed: u64, config: &GenConfig) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = config.size;
    let regime = match config.regime {
        Regime::Mixed => [Regime::Color, Regime::Depth, Regime::Both][rng.gen_range(0..3)],
        r => r,
    };
    let flat_depth = regime == Regime::Color;

    // background
    let bg = random_color(&mut rng);
    let bg_depth = if flat_depth {
        rng.gen_range(0.4..0.9)
    } else {
        rng.gen_range(0.75..0.95)
    };
    let (gx, gy) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let mut rgb = vec![0.0f64; 3 * h * w];
    let mut depth = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (c, &v) in bg.iter().enumerate() {
                rgb[c * h * w + i] = v;
            }
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            depth[i] = bg_depth + gx * u + gy * v;
        }
    }

    // salient object, placed first so distractors can avoid it
    let (lo, hi) = config.salient_pixel_bounds();
    let total = (h * w) as f64;
    let mut salient = None;
    for _ in 0..100 {
        let area = rng.gen_range(config.salient_area.0..=config.salient_area.1) * total;
        let p = random_primitive(&mut rng, &config.shapes, area, config.size);
        let px = p.rasterize(h, w);
        let count = px.iter().filter(|&&b| b).count();
        if (lo..=hi).contains(&count) {
            salient = Some((p, px));
            break;
        }
    }
    let (salient, salient_px) = salient.unwrap_or_else(|| fallback_rectangle(config));

    let distractors = rng.gen_range(config.objects.0..=config.objects.1) - 1;
    for _ in 0..distractors {
        let mut placed = None;
        for _ in 0..50 {
            let area = rng.gen_range(config.distractor_area.0..=config.distractor_area.1) * total;
            let p = random_primitive(&mut rng, &config.shapes, area, config.size);
            let d = ((p.cx - salient.cx).powi(2) + (p.cy - salient.cy).powi(2)).sqrt();
            if d > p.radius() + salient.radius() + 3.0 {
                placed = Some(p);
                break;
            }
        }
        let Some(p) = placed else { continue };
        let (color, near) = match regime {
            Regime::Color => (camouflaged_color(&mut rng, bg, 2.0 * config.camouflage), None),
            Regime::Depth => (contrasting_color(&mut rng, bg, config.contrast), None),
            _ => {
                if rng.gen_bool(0.5) {
                    (contrasting_color(&mut rng, bg, config.contrast), None)
                } else {
                    (
                        camouflaged_color(&mut rng, bg, config.camouflage),
                        Some(near_depth(&mut rng)),
                    )
                }
            }
        };
        paint(&mut rgb, &mut depth, &p.rasterize(h, w), color, near);
    }

    let color = match regime {
        Regime::Depth => camouflaged_color(&mut rng, bg, config.camouflage),
        _ => contrasting_color(&mut rng, bg, config.contrast),
    };
    let near = (!flat_depth).then(|| near_depth(&mut rng));
    paint(&mut rgb, &mut depth, &salient_px, color, near);

    // smooth luminance pattern over everything, then depth noise
    let tau = std::f64::consts::TAU;
    let (fx, fy) = (rng.gen_range(1..=3) as f64, rng.gen_range(1..=3) as f64);
    let (px0, py0) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = config.texture
                * 0.5
                * (tau * fx * x as f64 / w as f64 + px0).sin()
                * (tau * fy * y as f64 / h as f64 + py0).sin();
            for c in 0..3 {
                rgb[c * h * w + i] += t;
            }
            if config.depth_noise > 0.0 {
                depth[i] += config.depth_noise * gaussian(&mut rng);
            }
        }
    }

    let to_tensor = |v: Vec<f64>, c: usize| {
        Tensor::from_vec(
            Shape::new(1, c, h, w),
            v.into_iter().map(|x| x.clamp(0.0, 1.0) as f32).collect(),
        )
    };
    let sample = SceneSample {
        id: format!("s{seed:06}"),
        rgb: to_tensor(rgb, 3)?,
        depth: to_tensor(depth, 1)?,
        mask: Tensor::from_vec(
            Shape::new(1, 1, h, w),
            salient_px.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?,
    };
    Ok(sample)
}

fn paint(rgb: &mut [f64], depth: &mut [f64], px: &[bool], color: [f64; 3], near: Option<f64>) {
    let plane = depth.len();
    for (i, _) in px.iter().enumerate().filter(|(_, &b)| b) {
        for (c, &v) in color.iter().enumerate() {
            rgb[c * plane + i] = v;
        }
        if let Some(d) = near {
            depth[i] = d;
        }
    }
}

/// Centered axis-aligned rectangle with the mid-range target area.
fn fallback_rectangle(config: &GenConfig) -> (Primitive, Vec<bool>) {
    let (h, w) = config.size;
    let (lo, hi) = config.salient_pixel_bounds();
    let target = (lo + hi) / 2;
    let rh = ((target as f64).sqrt().round() as usize).clamp(1, h);
    let rw = target.div_ceil(rh).clamp(1, w);
    let (y0, x0) = ((h - rh) / 2, (w - rw) / 2);
    let mut px = vec![false; h * w];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            px[y * w + x] = true;
        }
    }
    let p = Primitive {
        kind: ShapeKind::Rectangle,
        cx: (x0 as f64) + rw as f64 / 2.0,
        cy: (y0 as f64) + rh as f64 / 2.0,
        a: rw as f64 / 2.0,
        b: rh as f64 / 2.0,
        angle: 0.0,
        jitter: [0.0; 3],
    };
    (p, px)
}

/// Samples for seeds `first..first + count`.
pub fn generate_dataset(first: u64, count: usize, config: &GenConfig) -> Result<Vec<SceneSample>> {
    (first..first + count as u64)
        .map(|s| generate_sample(s, config))
        .collect()
}
