//! Matting error metrics: MSE, SAD and the Gaussian-derivative gradient
//! error, each optionally restricted to a pixel region.
//!
//! SAD is normalized per pixel (mean absolute difference) so values are
//! comparable across resolutions. Reports render MSE ×10⁴, SAD ×10³ and
//! Grad ×10⁵.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AlphaMask;

pub const GRAD_SIGMA: f64 = 1.4;

pub const MSE_SCALE: f64 = 1e4;
pub const SAD_SCALE: f64 = 1e3;
pub const GRAD_SCALE: f64 = 1e5;

/// First-derivative-of-Gaussian filter pair with replicate borders.
///
/// The 2-D x-kernel is `g(dy)·g'(dx)` normalized to unit L2 norm; the
/// y-kernel is its transpose. Both are separable.
#[derive(Debug, Clone)]
pub struct GaussianGradient {
    radius: usize,
    smooth: Vec<f64>,
    deriv: Vec<f64>,
}

impl GaussianGradient {
    pub fn new(sigma: f64) -> Self {
        let eps = 1e-2;
        let radius = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt())
            .ceil()
            .max(1.0) as usize;
        let gauss = |u: f64| {
            (-u * u / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let offsets = (0..=2 * radius).map(|k| k as f64 - radius as f64);
        let smooth: Vec<f64> = offsets.clone().map(gauss).collect();
        let mut deriv: Vec<f64> = offsets.map(|u| -u * gauss(u) / (sigma * sigma)).collect();
        let norm = (smooth.iter().map(|v| v * v).sum::<f64>()
            * deriv.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
        deriv.iter_mut().for_each(|v| *v /= norm);
        GaussianGradient {
            radius,
            smooth,
            deriv,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Full 2-D x-derivative kernel, indexed `[dy + r][dx + r]`.
    pub fn kernel_x(&self) -> Vec<Vec<f64>> {
        self.smooth
            .iter()
            .map(|gy| self.deriv.iter().map(|dx| gy * dx).collect())
            .collect()
    }

    /// `(gx, gy)` of a planar single-channel raster.
    pub fn apply(&self, plane: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
        let gx = conv_cols(&deriv_rows(plane, width, height, &self.deriv), width, height, &self.smooth);
        let gy = deriv_cols(&conv_rows(plane, width, height, &self.smooth), width, height, &self.deriv);
        (gx, gy)
    }

    /// Adjoint of [`apply`](Self::apply): maps upstream gradients on
    /// `(gx, gy)` back onto the input plane.
    pub fn adjoint(&self, dgx: &[f64], dgy: &[f64], width: usize, height: usize) -> Vec<f64> {
        let a = conv_rows_adjoint(
            &conv_cols_adjoint(dgx, width, height, &self.smooth),
            width,
            height,
            &self.deriv,
        );
        let b = conv_rows_adjoint(
            &conv_cols_adjoint(dgy, width, height, &self.deriv),
            width,
            height,
            &self.smooth,
        );
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }

    pub fn magnitude(&self, plane: &[f64], width: usize, height: usize) -> Vec<f64> {
        let (gx, gy) = self.apply(plane, width, height);
        gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
    }
}

impl Default for GaussianGradient {
    fn default() -> Self {
        Self::new(GRAD_SIGMA)
    }
}

// Convolution semantics: out[x] = Σ_k h[k]·src[clamp(x − (k − r))].
fn conv_rows(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as isize - (j as isize - r)).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

// Odd kernels (k[r+o] = −k[r−o]) summed as k[r+o]·(src[x−o] − src[x+o]), so
// a constant input gives exactly zero.
fn deriv_rows(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for o in 1..=r {
                let lo = row[x.saturating_sub(o)];
                let hi = row[(x + o).min(w - 1)];
                acc += k[r + o] * (lo - hi);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn deriv_cols(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for o in 1..=r {
            let lo = &src[y.saturating_sub(o) * w..][..w];
            let hi = &src[(y + o).min(h - 1) * w..][..w];
            let kv = k[r + o];
            out[y * w..(y + 1) * w]
                .iter_mut()
                .zip(lo.iter().zip(hi))
                .for_each(|(o, (a, b))| *o += kv * (a - b));
        }
    }
    out
}

fn conv_cols(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let sy = (y as isize - (j as isize - r)).clamp(0, h as isize - 1) as usize;
            let (o, s) = (&mut out[y * w..(y + 1) * w], &src[sy * w..(sy + 1) * w]);
            o.iter_mut().zip(s).for_each(|(o, s)| *o += kv * s);
        }
    }
    out
}

fn conv_rows_adjoint(d: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = d[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as isize - (j as isize - r)).clamp(0, w as isize - 1) as usize;
                out[y * w + sx] += kv * g;
            }
        }
    }
    out
}

fn conv_cols_adjoint(d: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let sy = (y as isize - (j as isize - r)).clamp(0, h as isize - 1) as usize;
            let (o, s) = (&mut out[sy * w..(sy + 1) * w], &d[y * w..(y + 1) * w]);
            o.iter_mut().zip(s).for_each(|(o, s)| *o += kv * s);
        }
    }
    out
}

fn check_pair(m: &AlphaMask, g: &AlphaMask, region: Option<&[bool]>) -> Result<usize> {
    if m.dims() != g.dims() {
        return Err(Error::dims(g.dims(), m.dims()));
    }
    match region {
        Some(r) if r.len() != m.len() => Err(Error::InvalidArgument(format!(
            "region has {} entries for {} pixels",
            r.len(),
            m.len()
        ))),
        Some(r) => match r.iter().filter(|&&b| b).count() {
            0 => Err(Error::EmptyRegion),
            n => Ok(n),
        },
        None => Ok(m.len()),
    }
}

fn region_mean(values: impl Iterator<Item = f64>, region: Option<&[bool]>, count: usize) -> f64 {
    let sum: f64 = match region {
        Some(r) => values.zip(r).filter(|(_, &b)| b).map(|(v, _)| v).sum(),
        None => values.sum(),
    };
    sum / count as f64
}

pub fn mse(m: &AlphaMask, g: &AlphaMask, region: Option<&[bool]>) -> Result<f64> {
    let n = check_pair(m, g, region)?;
    let d = m.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b));
    Ok(region_mean(d, region, n))
}

pub fn sad(m: &AlphaMask, g: &AlphaMask, region: Option<&[bool]>) -> Result<f64> {
    let n = check_pair(m, g, region)?;
    let d = m.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs());
    Ok(region_mean(d, region, n))
}

pub fn grad(m: &AlphaMask, g: &AlphaMask, region: Option<&[bool]>) -> Result<f64> {
    grad_with(&GaussianGradient::default(), m, g, region)
}

pub fn grad_with(
    op: &GaussianGradient,
    m: &AlphaMask,
    g: &AlphaMask,
    region: Option<&[bool]>,
) -> Result<f64> {
    let n = check_pair(m, g, region)?;
    let (w, h) = m.dims();
    let gm = op.magnitude(m.data(), w, h);
    let gg = op.magnitude(g.data(), w, h);
    let d = gm.iter().zip(&gg).map(|(a, b)| (a - b) * (a - b));
    Ok(region_mean(d, region, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mse: f64,
    pub sad: f64,
    pub grad: f64,
    pub pixel_count: usize,
}

impl SampleMetrics {
    pub fn compute(
        id: &str,
        m: &AlphaMask,
        g: &AlphaMask,
        region: Option<&[bool]>,
    ) -> Result<Self> {
        let pixel_count = check_pair(m, g, region)?;
        Ok(SampleMetrics {
            id: id.to_string(),
            mse: mse(m, g, region)?,
            sad: sad(m, g, region)?,
            grad: grad(m, g, region)?,
            pixel_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub sad: f64,
    pub grad: f64,
    pub pixel_count: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InvalidArgument("no samples to evaluate".into()));
        }
        let n = per_sample.len() as f64;
        Ok(MetricReport {
            mse: per_sample.iter().map(|s| s.mse).sum::<f64>() / n,
            sad: per_sample.iter().map(|s| s.sad).sum::<f64>() / n,
            grad: per_sample.iter().map(|s| s.grad).sum::<f64>() / n,
            pixel_count: per_sample.iter().map(|s| s.pixel_count).sum(),
            per_sample,
        })
    }

    pub fn row(&self, label: &str) -> ScoreRow {
        ScoreRow {
            label: label.to_string(),
            mse: self.mse,
            sad: self.sad,
            grad: self.grad,
        }
    }

    /// Per-sample rows followed by the mean.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<ScoreRow> = self
            .per_sample
            .iter()
            .map(|s| ScoreRow {
                label: s.id.clone(),
                mse: s.mse,
                sad: s.sad,
                grad: s.grad,
            })
            .collect();
        rows.push(self.row("mean"));
        render_table(&rows)
    }
}

/// Per-sample metrics and their means. Fails on an empty set or when the
/// two id sets differ.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, AlphaMask>,
    ground_truths: &BTreeMap<String, AlphaMask>,
    regions: Option<&BTreeMap<String, Vec<bool>>>,
) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    let missing = symmetric_missing(predictions.keys(), ground_truths.keys());
    if !missing.is_empty() {
        return Err(Error::IdMismatch { missing });
    }
    let per_sample = predictions
        .iter()
        .map(|(id, m)| {
            let region = match regions {
                Some(r) => Some(
                    r.get(id)
                        .ok_or_else(|| Error::IdMismatch {
                            missing: vec![id.clone()],
                        })?
                        .as_slice(),
                ),
                None => None,
            };
            SampleMetrics::compute(id, m, &ground_truths[id], region)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(per_sample)
}

pub(crate) fn symmetric_missing<'a>(
    a: impl Iterator<Item = &'a String> + Clone,
    b: impl Iterator<Item = &'a String> + Clone,
) -> Vec<String> {
    let sa: std::collections::BTreeSet<&String> = a.collect();
    let sb: std::collections::BTreeSet<&String> = b.collect();
    sa.symmetric_difference(&sb).map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    pub mse: f64,
    pub sad: f64,
    pub grad: f64,
}

pub fn format_mse(v: f64) -> String {
    format!("{:.3}", v * MSE_SCALE)
}

pub fn format_sad(v: f64) -> String {
    format!("{:.3}", v * SAD_SCALE)
}

pub fn format_grad(v: f64) -> String {
    format!("{:.3}", v * GRAD_SCALE)
}

/// Aligned plain-text table with the scale row under the header.
pub fn render_table(rows: &[ScoreRow]) -> String {
    let label_w = rows
        .iter()
        .map(|r| r.label.chars().count())
        .chain(std::iter::once(6))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<label_w$}  {:>10}  {:>10}  {:>10}", "Method", "MSE↓", "SAD↓", "Grad↓");
    let _ = writeln!(out, "{:<label_w$}  {:>10}  {:>10}  {:>10}", "", "·10⁻⁴", "·10⁻³", "·10⁻⁵");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>10}  {:>10}  {:>10}",
            r.label,
            format_mse(r.mse),
            format_sad(r.sad),
            format_grad(r.grad)
        );
    }
    out
}
