//! Quality control: trimaps from reference alpha, a trimap-constrained
//! colour-affinity diffusion solver used as an independent supervisor, and
//! band-restricted reports comparing candidate mattes to it.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image, Trimap, TrimapLabel};
use crate::metrics::{format_grad, format_mse, format_sad, SampleMetrics};

/// Alpha values strictly between these bounds are fractional.
pub const FRACTIONAL_LOW: f64 = 0.001;
pub const FRACTIONAL_HIGH: f64 = 0.999;

fn dilate(mask: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    // Separable square structuring element.
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            rows[y * w + x] = (lo..=hi).any(|sx| mask[y * w + sx]);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|sy| rows[sy * w + x]);
        }
    }
    out
}

fn neighbors4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Unknown is the fractional band `FRACTIONAL_LOW < G < FRACTIONAL_HIGH`
/// dilated by `band_radius` (square element), united with the inner
/// boundary shell (opaque pixels with a non-opaque 4-neighbour) dilated by
/// `band_radius − 1`. The rest is Foreground where `G ≥ 0.5`, else
/// Background.
pub fn trimap_from_alpha(g: &AlphaMask, band_radius: usize) -> Result<Trimap> {
    if band_radius == 0 {
        return Err(Error::InvalidArgument("band_radius must be at least 1".into()));
    }
    let (w, h) = g.dims();
    let a = g.data();
    let fractional: Vec<bool> = a.iter().map(|&v| v > FRACTIONAL_LOW && v < FRACTIONAL_HIGH).collect();
    let opaque: Vec<bool> = a.iter().map(|&v| v >= FRACTIONAL_HIGH).collect();
    let shell: Vec<bool> = (0..w * h)
        .map(|i| opaque[i] && neighbors4(i, w, h).any(|j| !opaque[j]))
        .collect();
    let band = dilate(&fractional, w, h, band_radius);
    let shell = dilate(&shell, w, h, band_radius - 1);
    let labels = (0..w * h)
        .map(|i| {
            if band[i] || shell[i] {
                TrimapLabel::Unknown
            } else if a[i] >= 0.5 {
                TrimapLabel::Foreground
            } else {
                TrimapLabel::Background
            }
        })
        .collect();
    Trimap::new(w, h, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Colour bandwidth of the affinity `exp(−‖ΔI‖² / h²)`.
    pub bandwidth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 5000,
            tolerance: 1e-6,
            bandwidth: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solve {
    pub alpha: AlphaMask,
    /// Max absolute update of each iteration.
    pub updates: Vec<f64>,
    pub converged: bool,
    /// Unknown pixels with no 4-connected path to a labeled pixel; they are
    /// left at 0.5.
    pub unreachable: Vec<usize>,
}

/// Jacobi iteration of `α_i ← Σ_j w_ij α_j / Σ_j w_ij` over 4-neighbours on
/// the Unknown region, with `α` fixed at 1 on Foreground and 0 on
/// Background. Unknown pixels start at 0.5.
pub fn supervise_solve(image: &Image, trimap: &Trimap, cfg: &SolverConfig) -> Result<Solve> {
    if image.dims() != trimap.dims() {
        return Err(Error::dims(trimap.dims(), image.dims()));
    }
    if !(cfg.bandwidth > 0.0) || !(cfg.tolerance >= 0.0) {
        return Err(Error::Config("solver bandwidth must be positive and tolerance non-negative".into()));
    }
    let (w, h) = trimap.dims();
    let labels = trimap.labels();
    let mut alpha: Vec<f64> = labels
        .iter()
        .map(|l| match l {
            TrimapLabel::Foreground => 1.0,
            TrimapLabel::Background => 0.0,
            TrimapLabel::Unknown => 0.5,
        })
        .collect();

    // Unknown pixels reachable from a labeled pixel.
    let mut reached = vec![false; w * h];
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| labels[i] != TrimapLabel::Unknown).collect();
    queue.iter().for_each(|&i| reached[i] = true);
    while let Some(i) = queue.pop_front() {
        for j in neighbors4(i, w, h) {
            if !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    let unknown: Vec<usize> = (0..w * h).filter(|&i| labels[i] == TrimapLabel::Unknown).collect();
    let unreachable: Vec<usize> = unknown.iter().copied().filter(|&i| !reached[i]).collect();
    let active: Vec<usize> = unknown.into_iter().filter(|&i| reached[i]).collect();

    let inv_h2 = 1.0 / (cfg.bandwidth * cfg.bandwidth);
    let px = image.data();
    let weights: Vec<Vec<(usize, f64)>> = active
        .iter()
        .map(|&i| {
            neighbors4(i, w, h)
                .map(|j| {
                    let d2: f64 = (0..3).map(|c| (px[3 * i + c] - px[3 * j + c]).powi(2)).sum();
                    (j, (-d2 * inv_h2).exp())
                })
                .collect()
        })
        .collect();

    let mut updates = Vec::new();
    let mut converged = active.is_empty();
    let mut next = vec![0.0; active.len()];
    for _ in 0..cfg.max_iterations {
        if converged {
            break;
        }
        let mut max_update = 0.0f64;
        for (k, &i) in active.iter().enumerate() {
            let (num, den) = weights[k]
                .iter()
                .fold((0.0, 0.0), |(n, d), &(j, wt)| (n + wt * alpha[j], d + wt));
            next[k] = if den > 0.0 { num / den } else { alpha[i] };
            max_update = max_update.max((next[k] - alpha[i]).abs());
        }
        for (k, &i) in active.iter().enumerate() {
            alpha[i] = next[k];
        }
        updates.push(max_update);
        converged = max_update < cfg.tolerance;
    }
    Ok(Solve {
        alpha: AlphaMask::from_vec(w, h, alpha)?,
        updates,
        converged,
        unreachable,
    })
}

/// Per-metric pass thresholds; `None` disables a metric. A sample passes
/// when every enabled metric is at or below its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub mse: Option<f64>,
    pub sad: Option<f64>,
    pub grad: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            mse: Some(0.02),
            sad: Some(0.08),
            grad: None,
        }
    }
}

impl Thresholds {
    pub fn passes(&self, m: &SampleMetrics) -> bool {
        let ok = |t: Option<f64>, v: f64| t.is_none_or(|t| v <= t);
        ok(self.mse, m.mse) && ok(self.sad, m.sad) && ok(self.grad, m.grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcSample {
    pub metrics: SampleMetrics,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub band_radius: usize,
    pub thresholds: Thresholds,
    pub samples: Vec<QcSample>,
}

impl QcReport {
    pub fn passed(&self) -> usize {
        self.samples.iter().filter(|s| s.pass).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    pub fn render_table(&self) -> String {
        let mut out = format!("band radius {}\n", self.band_radius);
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10} {:>8} {:>6}",
            "id", "MSE", "SAD", "Grad", "band px", "result"
        );
        for s in &self.samples {
            let m = &s.metrics;
            let _ = writeln!(
                out,
                "{:<16} {:>10} {:>10} {:>10} {:>8} {:>6}",
                m.id,
                format_mse(m.mse),
                format_sad(m.sad),
                format_grad(m.grad),
                m.pixel_count,
                if s.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "{}/{} passed", self.passed(), self.samples.len());
        out
    }
}

/// Band-restricted metrics of each candidate against its supervisor mask.
/// Samples with an empty band pass with zero error.
pub fn qc_validate(
    candidates: &BTreeMap<String, AlphaMask>,
    supervisors: &BTreeMap<String, AlphaMask>,
    trimaps: &BTreeMap<String, Trimap>,
    thresholds: Thresholds,
    band_radius: usize,
) -> Result<QcReport> {
    let missing: Vec<String> = candidates
        .keys()
        .filter(|k| !supervisors.contains_key(*k) || !trimaps.contains_key(*k))
        .chain(supervisors.keys().filter(|k| !candidates.contains_key(*k)))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::IdMismatch { missing });
    }
    let samples = candidates
        .iter()
        .map(|(id, m)| {
            let band = trimaps[id].unknown_region();
            let metrics = if band.iter().any(|&b| b) {
                SampleMetrics::compute(id, m, &supervisors[id], Some(&band))?
            } else {
                SampleMetrics {
                    id: id.clone(),
                    mse: 0.0,
                    sad: 0.0,
                    grad: 0.0,
                    pixel_count: 0,
                }
            };
            Ok(QcSample {
                pass: thresholds.passes(&metrics),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QcReport {
        band_radius,
        thresholds,
        samples,
    })
}

/// Trimaps from each sample's reference alpha and the supervisor's solve
/// on them.
pub fn supervise_samples(
    samples: &[Sample],
    band_radius: usize,
    solver: &SolverConfig,
) -> Result<(BTreeMap<String, Trimap>, BTreeMap<String, AlphaMask>)> {
    let mut trimaps = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for s in samples {
        let g = s
            .alpha
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("record `{}` has no ground-truth alpha", s.id)))?;
        let t = trimap_from_alpha(g, band_radius)?;
        masks.insert(s.id.clone(), supervise_solve(&s.image, &t, solver)?.alpha);
        trimaps.insert(s.id.clone(), t);
    }
    Ok((trimaps, masks))
}
