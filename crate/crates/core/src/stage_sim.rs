//! Synthetic capture-stage scenes with analytically known alpha.
//!
//! A scene is a procedural figure (ellipses, limb capsules and sub-pixel
//! hair strands) over either a generic smooth background (`base` records)
//! or a capture-stage panel with light discs and reflective strips. Stage
//! records additionally carry foreground-dependent background alterations
//! and sensor noise:
//!
//! ```text
//! I = α·F + (1 − α)·(B + δ) + ε
//! δ = −s · blur(shift(α)) · B  +  r · mirror(F·α) inside strips
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Record, Role, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image, ScribbleLabel, ScribbleMap};

/// Closed interval `[lo, hi]` sampled uniformly.
pub type Range = (f64, f64);
/// Inclusive integer interval.
pub type CountRange = (usize, usize);

const SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureConfig {
    /// Torso center x as a fraction of the width.
    pub center_x: Range,
    pub torso_width: Range,
    pub torso_height: Range,
    pub head_radius: Range,
    pub limb_radius: Range,
    pub arms: CountRange,
    pub strands: CountRange,
    /// Strand width in pixels; must stay below 1.
    pub strand_width: Range,
    pub strand_steps: CountRange,
}

impl Default for FigureConfig {
    fn default() -> Self {
        FigureConfig {
            center_x: (0.3, 0.7),
            torso_width: (0.10, 0.15),
            torso_height: (0.17, 0.22),
            head_radius: (0.07, 0.09),
            limb_radius: (0.03, 0.045),
            arms: (0, 2),
            strands: (8, 16),
            strand_width: (0.35, 0.8),
            strand_steps: (5, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundConfig {
    pub gray: Range,
    /// Peak-to-peak amplitude of a gentle vertical falloff on the panel.
    pub falloff: Range,
    pub discs: CountRange,
    pub disc_radius: Range,
    pub disc_brightness: Range,
    pub strips: CountRange,
    pub strip_width: CountRange,
    /// Added to the panel gray inside strips so they are visible in `B`.
    pub strip_sheen: Range,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            gray: (0.35, 0.6),
            falloff: (0.0, 0.04),
            discs: (1, 3),
            disc_radius: (1.5, 3.5),
            disc_brightness: (0.85, 1.0),
            strips: (1, 2),
            strip_width: (5, 12),
            strip_sheen: (0.04, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectsConfig {
    pub shadow_strength: Range,
    pub shadow_offset_x: Range,
    pub shadow_offset_y: Range,
    pub shadow_blur: Range,
    pub reflection_strength: Range,
    pub noise_sigma: Range,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        EffectsConfig {
            shadow_strength: (0.35, 0.65),
            shadow_offset_x: (-8.0, 8.0),
            shadow_offset_y: (2.0, 6.0),
            shadow_blur: (0.8, 2.5),
            reflection_strength: (0.3, 0.6),
            noise_sigma: (0.0, 0.02),
        }
    }
}

/// Simulated annotator used to scribble capture-stage records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribbleConfig {
    pub background_strokes: CountRange,
    pub foreground_strokes: CountRange,
    pub brush_radius: CountRange,
    pub stroke_steps: CountRange,
    /// Minimum channel-mean alteration for a pixel to count as a visible
    /// stage effect.
    pub effect_threshold: f64,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        ScribbleConfig {
            background_strokes: (4, 7),
            foreground_strokes: (1, 2),
            brush_radius: (1, 2),
            stroke_steps: (6, 14),
            effect_threshold: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub base: usize,
    pub capture_stage: usize,
    pub unlabeled: usize,
    pub validation: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            base: 64,
            capture_stage: 12,
            unlabeled: 40,
            validation: 16,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Base => self.base,
            Role::CaptureStage => self.capture_stage,
            Role::Unlabeled => self.unlabeled,
            Role::Validation => self.validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub counts: SplitCounts,
    #[serde(default)]
    pub figure: FigureConfig,
    #[serde(default)]
    pub background: BackgroundConfig,
    #[serde(default)]
    pub effects: EffectsConfig,
    #[serde(default)]
    pub scribbles: ScribbleConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 64,
            height: 64,
            counts: SplitCounts::default(),
            figure: FigureConfig::default(),
            background: BackgroundConfig::default(),
            effects: EffectsConfig::default(),
            scribbles: ScribbleConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.width < 16 || self.height < 16 {
            return bad("canvas must be at least 16x16");
        }
        let ranges = [
            self.figure.center_x,
            self.figure.torso_width,
            self.figure.torso_height,
            self.figure.head_radius,
            self.figure.limb_radius,
            self.figure.strand_width,
            self.background.gray,
            self.background.falloff,
            self.background.disc_radius,
            self.background.disc_brightness,
            self.background.strip_sheen,
            self.effects.shadow_strength,
            self.effects.shadow_offset_x,
            self.effects.shadow_offset_y,
            self.effects.shadow_blur,
            self.effects.reflection_strength,
            self.effects.noise_sigma,
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return bad("every range must satisfy lo <= hi");
        }
        let counts = [
            self.figure.arms,
            self.figure.strands,
            self.figure.strand_steps,
            self.background.discs,
            self.background.strips,
            self.background.strip_width,
            self.scribbles.background_strokes,
            self.scribbles.foreground_strokes,
            self.scribbles.brush_radius,
            self.scribbles.stroke_steps,
        ];
        if counts.iter().any(|(lo, hi)| lo > hi) {
            return bad("every count range must satisfy lo <= hi");
        }
        if self.figure.strand_width.1 >= 1.0 || self.figure.strand_width.0 <= 0.0 {
            return bad("strand width must lie in (0, 1)");
        }
        let unit = [
            self.effects.shadow_strength,
            self.effects.reflection_strength,
            self.background.gray,
            self.background.disc_brightness,
        ];
        if unit.iter().any(|(lo, hi)| *lo < 0.0 || *hi > 1.0) {
            return bad("strengths and intensities must lie in [0, 1]");
        }
        if self.effects.noise_sigma.0 < 0.0 || self.effects.noise_sigma.1 > 0.2 {
            return bad("noise sigma must lie in [0, 0.2]");
        }
        if self.effects.shadow_blur.0 < 0.0 {
            return bad("shadow blur must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: GeneratorConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("generator config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn count(rng: &mut impl Rng, (lo, hi): CountRange) -> usize {
    rng.random_range(lo..=hi)
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [uniform(rng, (lo, hi)), uniform(rng, (lo, hi)), uniform(rng, (lo, hi))]
}

/// SplitMix64 finalizer, used to derive independent per-record seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Solid figure primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Rotated ellipse: center, semi-axes, rotation in radians.
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        color: [f64; 3],
    },
    /// Segment swept by a disc.
    Capsule {
        a: (f64, f64),
        b: (f64, f64),
        radius: f64,
        color: [f64; 3],
    },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
                ..
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Capsule { a, b, radius, .. } => segment_distance_sq((px, py), a, b) <= radius * radius,
        }
    }

    fn color(&self) -> [f64; 3] {
        match *self {
            Shape::Ellipse { color, .. } | Shape::Capsule { color, .. } => color,
        }
    }

    /// Conservative pixel bounding box `(x0, y0, x1, y1)`, exclusive end.
    fn bbox(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = match *self {
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(ry);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Capsule { a, b, radius, .. } => (
                a.0.min(b.0) - radius,
                a.1.min(b.1) - radius,
                a.0.max(b.0) + radius,
                a.1.max(b.1) + radius,
            ),
        };
        let lo = |v: f64| v.floor().max(0.0) as usize;
        let hi = |v: f64, n: usize| ((v.ceil() + 1.0).max(0.0) as usize).min(n);
        (lo(x0), lo(y0), hi(x1, w), hi(y1, h))
    }
}

fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Thin polyline of sub-pixel width. Coverage of a pixel is the width
/// times the length of the polyline inside it, capped at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Strand {
    pub points: Vec<(f64, f64)>,
    pub width: f64,
    pub color: [f64; 3],
}

/// Length of segment `a→b` inside the unit pixel at `(x, y)` (Liang–Barsky).
fn clipped_length(a: (f64, f64), b: (f64, f64), x: f64, y: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-dx, a.0 - x),
        (dx, x + 1.0 - a.0),
        (-dy, a.1 - y),
        (dy, y + 1.0 - a.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return 0.0;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t1 <= t0 {
        0.0
    } else {
        (t1 - t0) * (dx * dx + dy * dy).sqrt()
    }
}

/// Rasterizes solid shapes (8×8 supersampled coverage, later shapes drawn
/// over earlier ones) and strands (analytic coverage) into `(F, α)`.
///
/// Solids are composited over the strands, so
/// `α·F = α_s·C_s + (1 − α_s)·α_h·C_h`.
pub fn rasterize(width: usize, height: usize, shapes: &[Shape], strands: &[Strand]) -> Result<(Image, AlphaMask)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("degenerate canvas".into()));
    }
    let n = width * height;
    let mut solid = vec![0.0f64; n];
    let mut solid_rgb = vec![[0.0f64; 3]; n];
    let step = 1.0 / SUPERSAMPLE as f64;
    let hits_per = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    // Per-pixel bounding box union keeps the supersampling cheap.
    let mut touched = vec![false; n];
    for s in shapes {
        let (x0, y0, x1, y1) = s.bbox(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                touched[y * width + x] = true;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !touched[i] {
                continue;
            }
            let mut hits = 0usize;
            let mut rgb = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if let Some(s) = shapes.iter().rev().find(|s| s.contains(px, py)) {
                        hits += 1;
                        let c = s.color();
                        (0..3).for_each(|k| rgb[k] += c[k]);
                    }
                }
            }
            if hits > 0 {
                solid[i] = hits as f64 / hits_per;
                solid_rgb[i] = rgb.map(|v| v / hits as f64);
            }
        }
    }

    let mut hair = vec![0.0f64; n];
    let mut hair_rgb = vec![[0.0f64; 3]; n];
    for s in strands {
        for seg in s.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = a.0.min(b.0).floor().max(0.0) as usize;
            let y0 = a.1.min(b.1).floor().max(0.0) as usize;
            let x1 = (a.0.max(b.0).floor() as isize + 1).clamp(0, width as isize) as usize;
            let y1 = (a.1.max(b.1).floor() as isize + 1).clamp(0, height as isize) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let cov = s.width * clipped_length(a, b, x as f64, y as f64);
                    if cov > 0.0 {
                        let i = y * width + x;
                        // Strands are mutually over-composited.
                        let prev = hair[i];
                        let cov = cov.min(1.0);
                        let next = cov + (1.0 - cov) * prev;
                        for k in 0..3 {
                            hair_rgb[i][k] = (cov * s.color[k] + (1.0 - cov) * prev * hair_rgb[i][k]) / next;
                        }
                        hair[i] = next;
                    }
                }
            }
        }
    }

    let mut alpha = vec![0.0; n];
    let mut fg = vec![0.0; 3 * n];
    for i in 0..n {
        let a = solid[i] + (1.0 - solid[i]) * hair[i];
        alpha[i] = a;
        for k in 0..3 {
            let premult = solid[i] * solid_rgb[i][k] + (1.0 - solid[i]) * hair[i] * hair_rgb[i][k];
            fg[3 * i + k] = if a > 0.0 { premult / a } else { 0.0 };
        }
    }
    Ok((Image::from_vec(width, height, fg)?, AlphaMask::from_vec(width, height, alpha)?))
}

/// Samples a figure layout: torso, head, two legs reaching the floor,
/// optional arms and hair strands leaving the head.
pub fn figure_layout(seed: u64, width: usize, height: usize, cfg: &FigureConfig) -> (Vec<Shape>, Vec<Strand>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let s = w.min(h);
    let cx = uniform(&mut rng, cfg.center_x) * w;
    let rx = uniform(&mut rng, cfg.torso_width) * s;
    let ry = uniform(&mut rng, cfg.torso_height) * s;
    let head_r = uniform(&mut rng, cfg.head_radius) * s;
    let limb_r = uniform(&mut rng, cfg.limb_radius) * s;
    // Feet near the bottom edge, head near the top.
    let floor = h * uniform(&mut rng, (0.9, 0.97));
    let cy = floor - 2.0 * ry - uniform(&mut rng, (0.12, 0.2)) * h;
    let head_y = cy - ry - head_r * 0.8;
    let torso_color = random_color(&mut rng, 0.05, 0.95);
    let leg_color = random_color(&mut rng, 0.05, 0.95);
    let skin = [
        uniform(&mut rng, (0.55, 0.95)),
        uniform(&mut rng, (0.4, 0.75)),
        uniform(&mut rng, (0.3, 0.6)),
    ];
    let hair_color = random_color(&mut rng, 0.02, 0.5);

    let mut shapes = Vec::new();
    for side in [-1.0, 1.0] {
        let hip = (cx + side * rx * 0.45, cy + ry * 0.7);
        let foot = (hip.0 + side * uniform(&mut rng, (0.0, 0.08)) * s, floor - limb_r);
        shapes.push(Shape::Capsule {
            a: hip,
            b: foot,
            radius: limb_r,
            color: leg_color,
        });
    }
    let arms = count(&mut rng, cfg.arms);
    for k in 0..arms {
        let side = if k % 2 == 0 { -1.0 } else { 1.0 };
        let shoulder = (cx + side * rx * 0.8, cy - ry * 0.6);
        let reach = uniform(&mut rng, (0.15, 0.3)) * s;
        let ang = uniform(&mut rng, (0.3, 1.3));
        let hand = (shoulder.0 + side * reach * ang.cos(), shoulder.1 + reach * ang.sin());
        shapes.push(Shape::Capsule {
            a: shoulder,
            b: hand,
            radius: limb_r * 0.8,
            color: torso_color,
        });
    }
    shapes.push(Shape::Ellipse {
        cx,
        cy,
        rx,
        ry,
        angle: uniform(&mut rng, (-0.15, 0.15)),
        color: torso_color,
    });
    let head_x = cx + uniform(&mut rng, (-0.2, 0.2)) * rx;
    shapes.push(Shape::Ellipse {
        cx: head_x,
        cy: head_y,
        rx: head_r,
        ry: head_r * 1.1,
        angle: 0.0,
        color: skin,
    });

    let mut strands = Vec::new();
    for _ in 0..count(&mut rng, cfg.strands) {
        let theta = uniform(&mut rng, (-2.6, -0.55));
        let mut p = (
            head_x + head_r * 0.9 * theta.cos(),
            head_y + head_r * 0.9 * theta.sin(),
        );
        let mut dir = theta + uniform(&mut rng, (-0.3, 0.3));
        let mut points = vec![p];
        for _ in 0..count(&mut rng, cfg.strand_steps) {
            dir += uniform(&mut rng, (-0.45, 0.45));
            let len = uniform(&mut rng, (1.0, 2.0));
            p = (p.0 + len * dir.cos(), p.1 + len * dir.sin());
            points.push(p);
        }
        strands.push(Strand {
            points,
            width: uniform(&mut rng, cfg.strand_width),
            color: hair_color,
        });
    }
    (shapes, strands)
}

pub fn gen_foreground(seed: u64, width: usize, height: usize, cfg: &FigureConfig) -> Result<(Image, AlphaMask)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("degenerate canvas".into()));
    }
    let (shapes, strands) = figure_layout(seed, width, height, cfg);
    rasterize(width, height, &shapes, &strands)
}

/// Half-open pixel-column interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strip {
    pub start: usize,
    pub end: usize,
}

/// Light disc on the stage panel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub brightness: f64,
}

/// Explicit panel description; [`gen_background`] samples one.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub gray: [f64; 3],
    pub falloff: f64,
    pub discs: Vec<Disc>,
    pub strips: Vec<Strip>,
    pub strip_sheen: f64,
}

pub fn render_panel(width: usize, height: usize, panel: &Panel) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("degenerate canvas".into()));
    }
    for s in &panel.strips {
        if s.start >= s.end || s.end > width {
            return Err(Error::InvalidArgument(format!(
                "reflective strip [{}, {}) lies outside the {width}-pixel canvas",
                s.start, s.end
            )));
        }
    }
    let mut data = Vec::with_capacity(width * height * 3);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..height {
        let fall = panel.falloff * (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let sheen = if panel.strips.iter().any(|s| (s.start..s.end).contains(&x)) {
                panel.strip_sheen
            } else {
                0.0
            };
            let mut px = panel.gray.map(|g| g - fall + sheen);
            for d in &panel.discs {
                let near = (x as f64 + 0.5 - d.cx).abs() <= d.radius + 1.0
                    && (y as f64 + 0.5 - d.cy).abs() <= d.radius + 1.0;
                if !near {
                    continue;
                }
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let dx = x as f64 + (sx as f64 + 0.5) * step - d.cx;
                        let dy = y as f64 + (sy as f64 + 0.5) * step - d.cy;
                        if dx * dx + dy * dy <= d.radius * d.radius {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                px = px.map(|v| cov * d.brightness + (1.0 - cov) * v);
            }
            data.extend_from_slice(&px);
        }
    }
    Image::from_vec(width, height, data)
}

pub fn sample_panel(seed: u64, width: usize, height: usize, cfg: &BackgroundConfig) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = uniform(&mut rng, cfg.gray);
    let gray = [0, 1, 2].map(|_| (g + uniform(&mut rng, (-0.02, 0.02))).clamp(0.0, 1.0));
    let falloff = uniform(&mut rng, cfg.falloff);
    let discs = (0..count(&mut rng, cfg.discs))
        .map(|_| Disc {
            cx: uniform(&mut rng, (0.0, width as f64)),
            cy: uniform(&mut rng, (0.0, height as f64 * 0.6)),
            radius: uniform(&mut rng, cfg.disc_radius),
            brightness: uniform(&mut rng, cfg.disc_brightness),
        })
        .collect();
    let strips = (0..count(&mut rng, cfg.strips))
        .map(|_| {
            let sw = count(&mut rng, cfg.strip_width).clamp(1, width);
            let start = rng.random_range(0..=width - sw);
            Strip { start, end: start + sw }
        })
        .collect();
    Panel {
        gray,
        falloff,
        discs,
        strips,
        strip_sheen: uniform(&mut rng, cfg.strip_sheen),
    }
}

/// Capture-stage panel background and its reflective strips.
pub fn gen_background(seed: u64, width: usize, height: usize, cfg: &BackgroundConfig) -> Result<(Image, Vec<Strip>)> {
    let panel = sample_panel(seed, width, height, cfg);
    Ok((render_panel(width, height, &panel)?, panel.strips))
}

/// Generic smooth colorful background used for the base split.
pub fn gen_generic_background(seed: u64, width: usize, height: usize) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<[f64; 3]> = (0..4).map(|_| random_color(&mut rng, 0.05, 0.95)).collect();
    let (fx, fy) = (uniform(&mut rng, (0.5, 2.5)), uniform(&mut rng, (0.5, 2.5)));
    let (px, py) = (uniform(&mut rng, (0.0, 6.3)), uniform(&mut rng, (0.0, 6.3)));
    let amp = uniform(&mut rng, (0.0, 0.15));
    let tint = random_color(&mut rng, -1.0, 1.0);
    Image::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let wave = amp * ((fx * u * 6.283 + px).sin() * (fy * v * 6.283 + py).cos());
        [0, 1, 2].map(|k| {
            let top = corners[0][k] * (1.0 - u) + corners[1][k] * u;
            let bottom = corners[2][k] * (1.0 - u) + corners[3][k] * u;
            top * (1.0 - v) + bottom * v + wave * tint[k]
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEffects {
    pub shadow_strength: f64,
    pub shadow_offset: (f64, f64),
    pub shadow_blur_sigma: f64,
    pub reflection_strength: f64,
    pub reflective_strips: Vec<Strip>,
    pub noise_sigma: f64,
}

impl StageEffects {
    pub fn none() -> Self {
        StageEffects {
            shadow_strength: 0.0,
            shadow_offset: (0.0, 0.0),
            shadow_blur_sigma: 0.0,
            reflection_strength: 0.0,
            reflective_strips: Vec::new(),
            noise_sigma: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng, strips: Vec<Strip>, cfg: &EffectsConfig) -> Self {
        StageEffects {
            shadow_strength: uniform(rng, cfg.shadow_strength),
            shadow_offset: (uniform(rng, cfg.shadow_offset_x), uniform(rng, cfg.shadow_offset_y)),
            shadow_blur_sigma: uniform(rng, cfg.shadow_blur),
            reflection_strength: uniform(rng, cfg.reflection_strength),
            reflective_strips: strips,
            noise_sigma: uniform(rng, cfg.noise_sigma),
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.shadow_strength) || !unit(self.reflection_strength) {
            return Err(Error::InvalidArgument("effect strengths must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.shadow_blur_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise and blur sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Normalized Gaussian blur with replicate borders; radius `ceil(3σ)`.
pub fn gaussian_blur(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * width + clamp(x as isize + d, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, height) * width + x])
                .sum();
        }
    }
    out
}

/// Per-pixel, per-channel background alteration `δ(F)`.
pub fn stage_delta(fg: &Image, alpha: &AlphaMask, bg: &Image, effects: &StageEffects) -> Result<Vec<f64>> {
    if fg.dims() != bg.dims() {
        return Err(Error::dims(bg.dims(), fg.dims()));
    }
    if alpha.dims() != bg.dims() {
        return Err(Error::dims(bg.dims(), alpha.dims()));
    }
    effects.validate()?;
    let (w, h) = bg.dims();
    for s in &effects.reflective_strips {
        if s.start >= s.end || s.end > w {
            return Err(Error::InvalidArgument(format!(
                "reflective strip [{}, {}) lies outside the {w}-pixel canvas",
                s.start, s.end
            )));
        }
    }
    let mut delta = vec![0.0; w * h * 3];
    if effects.shadow_strength > 0.0 {
        // Integer offsets keep the silhouette sharp before blurring.
        let (ox, oy) = (
            effects.shadow_offset.0.round() as isize,
            effects.shadow_offset.1.round() as isize,
        );
        let mut shifted = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sx, sy) = (x - ox, y - oy);
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    shifted[y as usize * w + x as usize] = alpha.data()[sy as usize * w + sx as usize];
                }
            }
        }
        let m = gaussian_blur(&shifted, w, h, effects.shadow_blur_sigma);
        for i in 0..w * h {
            for c in 0..3 {
                delta[3 * i + c] -= effects.shadow_strength * m[i] * bg.data()[3 * i + c];
            }
        }
    }
    if effects.reflection_strength > 0.0 {
        for s in &effects.reflective_strips {
            for y in 0..h {
                for x in s.start..s.end {
                    let mx = w - 1 - x;
                    let a = alpha.data()[y * w + mx];
                    for c in 0..3 {
                        delta[3 * (y * w + x) + c] +=
                            effects.reflection_strength * a * fg.data()[3 * (y * w + mx) + c];
                    }
                }
            }
        }
    }
    Ok(delta)
}

/// `I = α·F + (1 − α)·(B + δ) + ε`, clamped to `[0, 1]`.
pub fn apply_stage_effects(
    fg: &Image,
    alpha: &AlphaMask,
    bg: &Image,
    effects: &StageEffects,
    seed: u64,
) -> Result<Image> {
    let delta = stage_delta(fg, alpha, bg, effects)?;
    let (w, h) = bg.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        let a = alpha.data()[i];
        for c in 0..3 {
            let k = 3 * i + c;
            let mut v = a * fg.data()[k] + (1.0 - a) * (bg.data()[k] + delta[k]);
            if effects.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                v += effects.noise_sigma * z;
            }
            data.push(v);
        }
    }
    Image::from_vec(w, h, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub role: Role,
    pub image: Image,
    pub background: Image,
    pub foreground: Image,
    pub alpha: AlphaMask,
    pub effects: StageEffects,
    pub seed: u64,
}

/// Generates one scene. Base scenes are clean composites over a generic
/// background; every other role uses a capture-stage panel with effects.
pub fn gen_scene(id: &str, role: Role, seed: u64, cfg: &GeneratorConfig) -> Result<SceneSample> {
    let (w, h) = (cfg.width, cfg.height);
    let (fg, alpha) = gen_foreground(derive_seed(seed, 1, 0), w, h, &cfg.figure)?;
    let (background, effects) = match role {
        Role::Base => (gen_generic_background(derive_seed(seed, 2, 0), w, h)?, StageEffects::none()),
        _ => {
            let (bg, strips) = gen_background(derive_seed(seed, 2, 0), w, h, &cfg.background)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
            (bg, StageEffects::sample(&mut rng, strips, &cfg.effects))
        }
    };
    let image = apply_stage_effects(&fg, &alpha, &background, &effects, derive_seed(seed, 4, 0))?;
    Ok(SceneSample {
        id: id.to_string(),
        role,
        image,
        background,
        foreground: fg,
        alpha,
        effects,
        seed,
    })
}

/// Simulated failure-case annotation: background strokes over visible
/// stage effects where the quantized alpha is exactly 0, plus a few
/// foreground strokes where it is exactly 1. Never mislabels a pixel.
pub fn simulate_scribbles(scene: &SceneSample, cfg: &ScribbleConfig, seed: u64) -> Result<ScribbleMap> {
    let (w, h) = scene.alpha.dims();
    let delta = stage_delta(&scene.foreground, &scene.alpha, &scene.background, &scene.effects)?;
    let q = scene.alpha.quantized();
    let bg_pure: Vec<bool> = q.data().iter().map(|&a| a == 0.0).collect();
    let fg_pure: Vec<bool> = q.data().iter().map(|&a| a == 1.0).collect();
    let mut bg_cand: Vec<bool> = (0..w * h)
        .map(|i| {
            let d = (delta[3 * i].abs() + delta[3 * i + 1].abs() + delta[3 * i + 2].abs()) / 3.0;
            bg_pure[i] && d >= cfg.effect_threshold
        })
        .collect();
    if !bg_cand.iter().any(|&b| b) {
        bg_cand = bg_pure;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = ScribbleMap::unlabeled(w, h)?;
    let mut paint = |rng: &mut ChaCha8Rng, cand: &[bool], label: ScribbleLabel, strokes: usize| {
        let pool: Vec<usize> = (0..w * h).filter(|&i| cand[i]).collect();
        if pool.is_empty() {
            return;
        }
        for _ in 0..strokes {
            let start = pool[rng.random_range(0..pool.len())];
            let (mut x, mut y) = ((start % w) as isize, (start / w) as isize);
            let r = count(rng, cfg.brush_radius) as isize;
            for _ in 0..count(rng, cfg.stroke_steps) {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py) = (x + dx, y + dy);
                        if dx * dx + dy * dy > r * r || px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                            continue;
                        }
                        let (px, py) = (px as usize, py as usize);
                        if cand[py * w + px] {
                            map.set(px, py, label);
                        }
                    }
                }
                let (nx, ny) = (x + rng.random_range(-1i32..=1) as isize, y + rng.random_range(-1i32..=1) as isize);
                if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && cand[ny as usize * w + nx as usize] {
                    (x, y) = (nx, ny);
                }
            }
        }
    };
    let n_bg = count(&mut rng, cfg.background_strokes);
    paint(&mut rng, &bg_cand, ScribbleLabel::Background, n_bg);
    let n_fg = count(&mut rng, cfg.foreground_strokes);
    paint(&mut rng, &fg_pure, ScribbleLabel::Foreground, n_fg);
    if map.annotated_count() == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(map)
}

fn role_prefix(role: Role) -> &'static str {
    match role {
        Role::Base => "base",
        Role::CaptureStage => "stage",
        Role::Unlabeled => "unlabeled",
        Role::Validation => "val",
    }
}

fn role_stream(role: Role) -> u64 {
    match role {
        Role::Base => 11,
        Role::CaptureStage => 12,
        Role::Unlabeled => 13,
        Role::Validation => 14,
    }
}

/// Writes every split under `out/data/<id>/` and the manifest to
/// `out/manifest.jsonl`. Output depends only on `(cfg, seed)`.
pub fn gen_dataset(cfg: &GeneratorConfig, seed: u64, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut records = Vec::new();
    for role in Role::ALL {
        for k in 0..cfg.counts.get(role) {
            let id = format!("{}-{k:04}", role_prefix(role));
            let sample_seed = derive_seed(seed, role_stream(role), k as u64);
            let scene = gen_scene(&id, role, sample_seed, cfg)?;
            let dir = out.join("data").join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let rel = |f: &str| format!("data/{id}/{f}");
            scene.image.save_png(dir.join("image.png"))?;
            scene.background.save_png(dir.join("background.png"))?;
            let mut rec = Record {
                id: id.clone(),
                role,
                image: rel("image.png"),
                background: rel("background.png"),
                alpha_gt: None,
                scribbles: None,
                pseudo_label: None,
                seed: sample_seed,
            };
            if matches!(role, Role::Base | Role::Validation) {
                scene.alpha.save_png(dir.join("alpha.png"))?;
                rec.alpha_gt = Some(rel("alpha.png"));
            }
            if role == Role::CaptureStage {
                let s = simulate_scribbles(&scene, &cfg.scribbles, derive_seed(sample_seed, 5, 0))?;
                s.save_png(dir.join("scribbles.png"))?;
                rec.scribbles = Some(rel("scribbles.png"));
            }
            records.push(rec);
        }
    }
    let manifest = Manifest { records };
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::composite;

    const GRAY: [f64; 3] = [0.5, 0.5, 0.5];

    #[test]
    fn antialiased_full_canvas_ellipse() {
        let (w, h) = (32, 24);
        let e = Shape::Ellipse {
            cx: 16.0,
            cy: 12.0,
            rx: 15.0,
            ry: 11.0,
            angle: 0.0,
            color: [1.0, 0.0, 0.0],
        };
        let (_, a) = rasterize(w, h, &[e], &[]).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let r = (((px - 16.0) / 15.0).powi(2) + ((py - 12.0) / 11.0).powi(2)).sqrt();
                let v = a.get(x, y);
                // Pixels whose whole square lies inside/outside the ellipse.
                if r < 1.0 - 1.5 / 11.0 {
                    assert_eq!(v, 1.0, "({x},{y})");
                } else if r > 1.0 + 1.5 / 11.0 {
                    assert_eq!(v, 0.0, "({x},{y})");
                }
            }
        }
        assert!(a.data().iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn strands_only_give_fractional_alpha() {
        let cfg = FigureConfig::default();
        let (_, strands) = figure_layout(3, 64, 64, &cfg);
        assert!(!strands.is_empty());
        let (_, a) = rasterize(64, 64, &[], &strands).unwrap();
        let fractional = a.data().iter().filter(|&&v| v > 0.0 && v < 1.0).count();
        let covered = a.data().iter().filter(|&&v| v > 0.0).count();
        assert!(fractional > 0);
        assert!(fractional * 2 > covered, "{fractional} of {covered}");
    }

    #[test]
    fn clipped_length_oracle() {
        // Horizontal segment through the middle of pixel (0, 0), from x=-1 to x=2.
        assert!((clipped_length((-1.0, 0.5), (2.0, 0.5), 0.0, 0.0) - 1.0).abs() < 1e-12);
        // Diagonal through the unit square.
        let d = clipped_length((0.0, 0.0), (1.0, 1.0), 0.0, 0.0);
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(clipped_length((3.0, 3.0), (4.0, 4.0), 0.0, 0.0), 0.0);
    }

    #[test]
    fn foreground_is_deterministic() {
        let cfg = FigureConfig::default();
        let a = gen_foreground(9, 64, 64, &cfg).unwrap();
        let b = gen_foreground(9, 64, 64, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(gen_foreground(9, 0, 64, &cfg).is_err());
    }

    #[test]
    fn plain_panel_is_constant() {
        let panel = Panel {
            gray: [0.4; 3],
            falloff: 0.0,
            discs: vec![],
            strips: vec![],
            strip_sheen: 0.1,
        };
        let b = render_panel(16, 16, &panel).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn bright_disc_reaches_one() {
        let panel = Panel {
            gray: [0.4; 3],
            falloff: 0.0,
            discs: vec![Disc {
                cx: 8.0,
                cy: 8.0,
                radius: 3.0,
                brightness: 1.0,
            }],
            strips: vec![],
            strip_sheen: 0.0,
        };
        let b = render_panel(16, 16, &panel).unwrap();
        let max = b.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn strips_outside_canvas_rejected() {
        let panel = Panel {
            gray: [0.4; 3],
            falloff: 0.0,
            discs: vec![],
            strips: vec![Strip { start: 10, end: 20 }],
            strip_sheen: 0.0,
        };
        assert!(render_panel(16, 16, &panel).is_err());
    }

    #[test]
    fn background_is_deterministic() {
        let cfg = BackgroundConfig::default();
        assert_eq!(gen_background(4, 64, 64, &cfg).unwrap(), gen_background(4, 64, 64, &cfg).unwrap());
    }

    fn scene(w: usize, h: usize) -> (Image, AlphaMask, Image) {
        let (f, a) = gen_foreground(5, w, h, &FigureConfig::default()).unwrap();
        let (b, _) = gen_background(6, w, h, &BackgroundConfig::default()).unwrap();
        (f, a, b)
    }

    #[test]
    fn zero_effects_reduce_to_composite() {
        let (f, a, b) = scene(64, 64);
        let i = apply_stage_effects(&f, &a, &b, &StageEffects::none(), 1).unwrap();
        assert_eq!(i, composite(&f, &b, &a).unwrap());
    }

    #[test]
    fn empty_silhouette_leaves_background() {
        let (f, _, b) = scene(32, 32);
        let a = AlphaMask::filled(32, 32, 0.0).unwrap();
        let fx = StageEffects {
            shadow_strength: 0.7,
            shadow_offset: (3.0, 2.0),
            shadow_blur_sigma: 1.5,
            reflection_strength: 0.5,
            reflective_strips: vec![Strip { start: 2, end: 9 }],
            noise_sigma: 0.0,
        };
        assert_eq!(apply_stage_effects(&f, &a, &b, &fx, 1).unwrap(), b);
    }

    #[test]
    fn sharp_shadow_halves_background() {
        // 2×2 box at the top-left of a 4×4 canvas, shadow moved onto the
        // bottom-right 2×2 block.
        let a = AlphaMask::from_fn(4, 4, |x, y| if x < 2 && y < 2 { 1.0 } else { 0.0 }).unwrap();
        let f = Image::filled(4, 4, [0.9, 0.1, 0.1]).unwrap();
        let b = Image::from_fn(4, 4, |x, y| [0.2 + 0.1 * x as f64, 0.6, 0.3 + 0.05 * y as f64]).unwrap();
        let fx = StageEffects {
            shadow_strength: 0.5,
            shadow_offset: (2.0, 2.0),
            ..StageEffects::none()
        };
        let i = apply_stage_effects(&f, &a, &b, &fx, 0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (ip, bp) = (i.pixel(x, y), b.pixel(x, y));
                for c in 0..3 {
                    let expected = if x >= 2 && y >= 2 {
                        0.5 * bp[c]
                    } else if x < 2 && y < 2 {
                        f.pixel(x, y)[c]
                    } else {
                        bp[c]
                    };
                    assert!((ip[c] - expected).abs() < 1e-15, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn reflection_mirrors_foreground_inside_strip() {
        let a = AlphaMask::from_fn(8, 2, |x, _| if x == 1 { 1.0 } else { 0.0 }).unwrap();
        let f = Image::filled(8, 2, [0.8, 0.4, 0.2]).unwrap();
        let b = Image::filled(8, 2, [0.1; 3]).unwrap();
        let fx = StageEffects {
            reflection_strength: 0.5,
            reflective_strips: vec![Strip { start: 5, end: 8 }],
            ..StageEffects::none()
        };
        let i = apply_stage_effects(&f, &a, &b, &fx, 0).unwrap();
        // Column 1 mirrors to column 6.
        assert_eq!(i.pixel(6, 0), [0.1 + 0.4, 0.1 + 0.2, 0.1 + 0.1]);
        assert_eq!(i.pixel(5, 1), [0.1; 3]);
        assert_eq!(i.pixel(3, 0), [0.1; 3]);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let (w, h) = (256, 256);
        let b = Image::filled(w, h, GRAY).unwrap();
        let a = AlphaMask::filled(w, h, 0.0).unwrap();
        for s in [0.02, 0.05, 0.1] {
            let fx = StageEffects {
                noise_sigma: s,
                ..StageEffects::none()
            };
            let i = apply_stage_effects(&b, &a, &b, &fx, 77).unwrap();
            let d: Vec<f64> = i.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            assert!((var.sqrt() - s).abs() < 0.1 * s, "{} vs {s}", var.sqrt());
        }
    }

    #[test]
    fn shadow_is_local() {
        let (f, a, b) = scene(64, 64);
        let fx = StageEffects {
            shadow_strength: 0.6,
            shadow_offset: (5.0, 3.0),
            shadow_blur_sigma: 1.5,
            reflection_strength: 0.4,
            reflective_strips: vec![Strip { start: 3, end: 11 }],
            noise_sigma: 0.0,
        };
        let i = apply_stage_effects(&f, &a, &b, &fx, 0).unwrap();
        let c = composite(&f, &b, &a).unwrap();
        let reach = 5 + 3 + (3.0f64 * 1.5).ceil() as isize;
        for y in 0..64isize {
            for x in 0..64isize {
                let in_strip = (3..11).contains(&x);
                let near = (-reach..=reach).any(|dy| {
                    (-reach..=reach).any(|dx| {
                        let (sx, sy) = (x + dx, y + dy);
                        (0..64).contains(&sx) && (0..64).contains(&sy) && a.get(sx as usize, sy as usize) > 0.0
                    })
                });
                if !in_strip && !near {
                    assert_eq!(i.pixel(x as usize, y as usize), c.pixel(x as usize, y as usize));
                }
            }
        }
    }

    #[test]
    fn scribbles_never_mislabel() {
        let cfg = GeneratorConfig::default();
        for k in 0..6 {
            let s = gen_scene("s", Role::CaptureStage, k, &cfg).unwrap();
            let map = simulate_scribbles(&s, &cfg.scribbles, k).unwrap();
            assert!(map.annotated_count() > 0);
            let q = s.alpha.quantized();
            for (l, a) in map.labels().iter().zip(q.data()) {
                match l {
                    ScribbleLabel::Background => assert_eq!(*a, 0.0),
                    ScribbleLabel::Foreground => assert_eq!(*a, 1.0),
                    ScribbleLabel::Unlabeled => {}
                }
            }
        }
    }

    #[test]
    fn small_dataset_contract_and_determinism() {
        let cfg = GeneratorConfig {
            width: 32,
            height: 32,
            counts: SplitCounts {
                base: 4,
                capture_stage: 2,
                unlabeled: 2,
                validation: 2,
            },
            ..GeneratorConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = gen_dataset(&cfg, 42, d1.path()).unwrap();
        let m2 = gen_dataset(&cfg, 42, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.records.len(), 10);
        let loaded = Manifest::load(d1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m1);
        for r in &m1.records {
            for p in r.paths() {
                assert_eq!(
                    std::fs::read(d1.path().join(p)).unwrap(),
                    std::fs::read(d2.path().join(p)).unwrap()
                );
            }
            assert_eq!(r.alpha_gt.is_some(), matches!(r.role, Role::Base | Role::Validation));
            assert_eq!(r.scribbles.is_some(), r.role == Role::CaptureStage);
        }
        assert!(m1.by_role(Role::Validation).all(|r| r.alpha_gt.is_some()));
        assert_eq!(
            std::fs::read(d1.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(d2.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = GeneratorConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(GeneratorConfig::from_toml(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.figure.strand_width = (0.5, 1.5);
        assert!(bad.validate().is_err());
    }
}
