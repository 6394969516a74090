//! Training procedures: base training, scribble fine-tuning with hybrid
//! batches, pseudo-label distillation into the student, and the direct
//! scribble-trained student.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Role, Sample};
use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image, ResampleMode, ScribbleLabel, ScribbleMap};
use crate::metrics::{GaussianGradient, MetricReport, SampleMetrics};
use crate::net::{
    adam_step, backward, backward_student, forward_student, forward_teacher, AdamHyper, Checkpoint, Frozen,
    Network, COARSE_PREFIX, REFINER_PREFIX, STUDENT_SCALE,
};
use crate::stage_sim::derive_seed;

/// Weight of the gradient term in [`base_loss`].
pub const GRAD_LOSS_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_drop_iteration: usize,
    pub lr_after: f64,
    pub base_fraction: f64,
    pub noise_sigma_max: f64,
    /// Whether scribble samples are noise-augmented too.
    pub noise_scribbles: bool,
    /// Student distillation: coarse-only epochs, then joint epochs.
    pub coarse_epochs: usize,
    pub joint_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults.
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 2000,
            lr_initial: 5e-5,
            lr_drop_iteration: 600,
            lr_after: 2.5e-5,
            base_fraction: 0.8,
            noise_sigma_max: 0.1,
            noise_scribbles: true,
            coarse_epochs: 5,
            joint_epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for training from scratch.
    pub fn base() -> Self {
        TrainConfig {
            lr_initial: 1e-3,
            lr_after: 1e-3,
            base_fraction: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_fraction) {
            return Err(Error::Config(format!(
                "base_fraction must lie in [0, 1], got {}",
                self.base_fraction
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.noise_sigma_max >= 0.0) {
            return Err(Error::Config("noise_sigma_max must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_drop_iteration {
            self.lr_initial
        } else {
            self.lr_after
        }
    }

    /// Number of base records per batch, rounded half up.
    pub fn n_base(&self) -> usize {
        (self.batch_size as f64 * self.base_fraction + 0.5).floor() as usize
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `mean|M − G| + λ·mean(|∂x M − ∂x G| + |∂y M − ∂y G|)` and its gradient
/// with respect to `M`. `m` may hold raw network outputs outside [0, 1].
pub fn base_loss_grad_raw(m: &[f64], g: &AlphaMask) -> Result<(f64, Vec<f64>)> {
    if m.len() != g.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} values, target {}",
            m.len(),
            g.len()
        )));
    }
    let (w, h) = g.dims();
    let n = (w * h) as f64;
    let d: Vec<f64> = m.iter().zip(g.data()).map(|(a, b)| a - b).collect();
    let op = GaussianGradient::default();
    let (ex, ey) = op.apply(&d, w, h);
    let l1 = d.iter().map(|v| v.abs()).sum::<f64>() / n;
    let lg = ex.iter().zip(&ey).map(|(a, b)| a.abs() + b.abs()).sum::<f64>() / n;
    let sx: Vec<f64> = ex.iter().map(|&v| sign(v)).collect();
    let sy: Vec<f64> = ey.iter().map(|&v| sign(v)).collect();
    let back = op.adjoint(&sx, &sy, w, h);
    let grad = d
        .iter()
        .zip(&back)
        .map(|(&di, &bi)| (sign(di) + GRAD_LOSS_WEIGHT * bi) / n)
        .collect();
    Ok((l1 + GRAD_LOSS_WEIGHT * lg, grad))
}

pub fn base_loss_grad(m: &AlphaMask, g: &AlphaMask) -> Result<(f64, Vec<f64>)> {
    if m.dims() != g.dims() {
        return Err(Error::dims(g.dims(), m.dims()));
    }
    base_loss_grad_raw(m.data(), g)
}

pub fn base_loss(m: &AlphaMask, g: &AlphaMask) -> Result<f64> {
    Ok(base_loss_grad(m, g)?.0)
}

/// `(Σ_{i∈S} |M_i − Y_i|, |S|)`.
pub fn scribble_loss(m: &AlphaMask, y: &ScribbleMap) -> Result<(f64, usize)> {
    if m.dims() != y.dims() {
        return Err(Error::dims(y.dims(), m.dims()));
    }
    scribble_sum(m.data(), y)
}

fn scribble_sum(m: &[f64], y: &ScribbleMap) -> Result<(f64, usize)> {
    if m.len() != y.labels().len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} values, scribble map {}",
            m.len(),
            y.labels().len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (v, l) in m.iter().zip(y.labels()) {
        if let Some(t) = l.target() {
            sum += (v - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok((sum, count))
}

/// `sum / count` of [`scribble_loss`] on raw outputs and its gradient,
/// zero off `S`.
pub fn scribble_loss_grad_raw(m: &[f64], y: &ScribbleMap) -> Result<(f64, Vec<f64>)> {
    let (sum, count) = scribble_sum(m, y)?;
    let grad = m
        .iter()
        .zip(y.labels())
        .map(|(v, l)| l.target().map_or(0.0, |t| sign(v - t) / count as f64))
        .collect();
    Ok((sum / count as f64, grad))
}

pub fn scribble_loss_grad(m: &AlphaMask, y: &ScribbleMap) -> Result<(f64, Vec<f64>)> {
    if m.dims() != y.dims() {
        return Err(Error::dims(y.dims(), m.dims()));
    }
    scribble_loss_grad_raw(m.data(), y)
}

/// Adds `N(0, σ)` noise to every value of `I` and `B`, with
/// `σ ~ U[0, sigma_max]` drawn once. Returns the perturbed pair and `σ`.
pub fn augment_noise(image: &Image, background: &Image, sigma_max: f64, seed: u64) -> Result<(Image, Image, f64)> {
    if sigma_max <= 0.0 {
        return Ok((image.clone(), background.clone(), 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(0.0..=sigma_max);
    let (i, b) = add_noise(image, background, sigma, &mut rng)?;
    Ok((i, b, sigma))
}

/// Fixed-σ Gaussian noise on both images.
pub fn add_noise(image: &Image, background: &Image, sigma: f64, rng: &mut impl Rng) -> Result<(Image, Image)> {
    let mut perturb = |img: &Image| {
        let (w, h) = img.dims();
        let data = img
            .data()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + sigma * z
            })
            .collect();
        Image::from_vec(w, h, data)
    };
    let i = perturb(image)?;
    let b = perturb(background)?;
    Ok((i, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Base,
    Scribble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub source: Source,
    pub index: usize,
}

fn draw(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    if n <= pool {
        index::sample(rng, pool, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// Exactly `n_base` base entries followed by `batch − n_base` scribble
/// entries, sampled uniformly (without replacement when the pool allows).
pub fn sample_hybrid_batch(n_base_pool: usize, n_scribble_pool: usize, cfg: &TrainConfig, iteration: usize) -> Result<Vec<BatchEntry>> {
    let n_base = cfg.n_base();
    let n_scribble = cfg.batch_size - n_base;
    if n_base > 0 && n_base_pool == 0 {
        return Err(Error::InvalidArgument("batch needs base records but the base pool is empty".into()));
    }
    if n_scribble > 0 && n_scribble_pool == 0 {
        return Err(Error::InvalidArgument(
            "batch needs scribble records but the scribble pool is empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 21, iteration as u64));
    let mut out: Vec<BatchEntry> = draw(&mut rng, n_base_pool, n_base)
        .into_iter()
        .map(|index| BatchEntry {
            source: Source::Base,
            index,
        })
        .collect();
    out.extend(
        draw(&mut rng, n_scribble_pool, n_scribble)
            .into_iter()
            .map(|index| BatchEntry {
                source: Source::Scribble,
                index,
            }),
    );
    Ok(out)
}

/// Majority label among annotated pixels of each `scale × scale` cell;
/// ties and empty cells are `Unlabeled`.
pub fn downsample_scribbles(map: &ScribbleMap, scale: usize) -> Result<ScribbleMap> {
    let (w, h) = map.dims();
    if scale == 0 || w % scale != 0 || h % scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "scribble map {w}x{h} is not divisible by {scale}"
        )));
    }
    let (cw, ch) = (w / scale, h / scale);
    let mut labels = Vec::with_capacity(cw * ch);
    for cy in 0..ch {
        for cx in 0..cw {
            let (mut bg, mut fg) = (0, 0);
            for y in cy * scale..(cy + 1) * scale {
                for x in cx * scale..(cx + 1) * scale {
                    match map.get(x, y) {
                        ScribbleLabel::Background => bg += 1,
                        ScribbleLabel::Foreground => fg += 1,
                        ScribbleLabel::Unlabeled => {}
                    }
                }
            }
            labels.push(match bg.cmp(&fg) {
                std::cmp::Ordering::Greater => ScribbleLabel::Background,
                std::cmp::Ordering::Less => ScribbleLabel::Foreground,
                std::cmp::Ordering::Equal => ScribbleLabel::Unlabeled,
            });
        }
    }
    ScribbleMap::new(cw, ch, labels)
}

/// One line of the loss-curve log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub phase: String,
    pub iteration: usize,
    pub lr: f64,
    /// Mean loss over base (dense-target) samples in the batch.
    pub base_loss: Option<f64>,
    /// Mean selective loss over scribble samples in the batch.
    pub scribble_loss: Option<f64>,
    pub n_base: usize,
    pub n_scribble: usize,
}

pub const LOG_HEADER: &str = "phase\titeration\tlr\tbase_loss\tscribble_loss\tn_base\tn_scribble";

pub fn render_log(lines: &[LogLine]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.9}"));
    for l in lines {
        let _ = writeln!(
            out,
            "{}\t{}\t{:e}\t{}\t{}\t{}\t{}",
            l.phase,
            l.iteration,
            l.lr,
            opt(l.base_loss),
            opt(l.scribble_loss),
            l.n_base,
            l.n_scribble
        );
    }
    out
}

/// What a sample is supervised with.
#[derive(Debug, Clone)]
pub enum Target {
    Dense(AlphaMask),
    Scribble(ScribbleMap),
}

impl Target {
    fn loss_grad(&self, raw: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Target::Dense(g) => base_loss_grad_raw(raw, g),
            Target::Scribble(y) => scribble_loss_grad_raw(raw, y),
        }
    }

    fn at_coarse(&self) -> Result<Target> {
        Ok(match self {
            Target::Dense(g) => {
                let (w, h) = g.dims();
                Target::Dense(g.resample(w / STUDENT_SCALE, h / STUDENT_SCALE, ResampleMode::Bilinear)?)
            }
            Target::Scribble(y) => Target::Scribble(downsample_scribbles(y, STUDENT_SCALE)?),
        })
    }
}

/// A training example: inputs plus targets on the full-resolution output
/// and/or the student's coarse output.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Image,
    pub background: Image,
    pub full: Option<Target>,
    pub coarse: Option<Target>,
}

impl Example {
    fn dense(s: &Sample, g: &AlphaMask) -> Self {
        Example {
            image: s.image.clone(),
            background: s.background.clone(),
            full: Some(Target::Dense(g.clone())),
            coarse: None,
        }
    }

    /// Moves the full-resolution target to the coarse head.
    fn coarse_only(mut self) -> Result<Self> {
        self.coarse = self.full.take().map(|t| t.at_coarse()).transpose()?;
        Ok(self)
    }

    /// Adds a coarse copy of the full-resolution target.
    fn with_coarse(mut self) -> Result<Self> {
        self.coarse = self.full.as_ref().map(|t| t.at_coarse()).transpose()?;
        Ok(self)
    }
}

fn reject_validation(samples: &[Sample]) -> Result<()> {
    match samples.iter().find(|s| s.role == Role::Validation) {
        Some(s) => Err(Error::ValidationRecord { id: s.id.clone() }),
        None => Ok(()),
    }
}

fn require_alpha(s: &Sample) -> Result<&AlphaMask> {
    s.alpha
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("record `{}` has no ground-truth alpha", s.id)))
}

fn require_pseudo(s: &Sample) -> Result<&AlphaMask> {
    s.pseudo_label
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("record `{}` has no pseudo-label", s.id)))
}

fn scribble_example(s: &Sample) -> Result<Example> {
    let y = s
        .scribbles
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("record `{}` has no scribbles", s.id)))?;
    if y.annotated_count() == 0 {
        return Err(Error::Manifest(format!("record `{}` has an empty scribble map", s.id)));
    }
    Ok(Example {
        image: s.image.clone(),
        background: s.background.clone(),
        full: Some(Target::Scribble(y.clone())),
        coarse: None,
    })
}

/// Forward, loss and backward for one example; gradients are accumulated
/// into `grads` scaled by `scale`. Returns the unscaled loss.
fn accumulate(
    ck: &Checkpoint,
    image: &Image,
    background: &Image,
    ex: &Example,
    scale: f64,
    grads: &mut crate::net::ParamSet,
    frozen: Frozen,
) -> Result<f64> {
    match &ck.network {
        Network::Teacher { arch } => {
            if ex.coarse.is_some() {
                return Err(Error::InvalidArgument("the teacher has no coarse output".into()));
            }
            let target = ex
                .full
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("example has no target".into()))?;
            let (_, trace) = forward_teacher(arch, &ck.params, image, background)?;
            let (loss, mut d) = target.loss_grad(&trace.output().data)?;
            d.iter_mut().for_each(|v| *v *= scale);
            backward(arch, &ck.params, "", &trace, &d, grads, frozen, false)?;
            Ok(loss)
        }
        Network::Student { coarse, refiner } => {
            let pass = forward_student(coarse, refiner, &ck.params, image, background)?;
            let mut loss = 0.0;
            let mut head = |t: &Option<Target>, m: &[f64]| -> Result<Option<Vec<f64>>> {
                t.as_ref()
                    .map(|t| {
                        let (l, mut d) = t.loss_grad(m)?;
                        loss += l;
                        d.iter_mut().for_each(|v| *v *= scale);
                        Ok(d)
                    })
                    .transpose()
            };
            let d_full = head(&ex.full, &pass.refined_raw)?;
            let d_coarse = head(&ex.coarse, &pass.coarse_raw)?;
            backward_student(
                coarse,
                refiner,
                &ck.params,
                &pass,
                d_coarse.as_deref(),
                d_full.as_deref(),
                grads,
                frozen,
            )?;
            Ok(loss)
        }
    }
}

/// One optimizer run over `iterations` batches chosen by `batch_for`.
struct Phase<'a> {
    name: &'a str,
    cfg: &'a TrainConfig,
    frozen: Frozen<'a>,
    base: &'a [Example],
    scribble: &'a [Example],
}

impl Phase<'_> {
    fn run(
        &self,
        ck: &mut Checkpoint,
        iterations: usize,
        mut batch_for: impl FnMut(usize) -> Result<Vec<BatchEntry>>,
        log: &mut Vec<LogLine>,
    ) -> Result<()> {
        ck.reset_optimizer();
        let stream = derive_seed(self.cfg.seed, 31, self.name.len() as u64 ^ hash_name(self.name));
        let mut grads = ck.params.zeros_like();
        for t in 0..iterations {
            let batch = batch_for(t)?;
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            let (mut base_sum, mut n_base, mut scr_sum, mut n_scr) = (0.0, 0, 0.0, 0);
            for (slot, e) in batch.iter().enumerate() {
                let ex = match e.source {
                    Source::Base => &self.base[e.index],
                    Source::Scribble => &self.scribble[e.index],
                };
                let noisy = self.cfg.noise_sigma_max > 0.0 && (e.source == Source::Base || self.cfg.noise_scribbles);
                let loss = if noisy {
                    let seed = derive_seed(stream, t as u64, slot as u64);
                    let (i, b, _) = augment_noise(&ex.image, &ex.background, self.cfg.noise_sigma_max, seed)?;
                    accumulate(ck, &i, &b, ex, scale, &mut grads, self.frozen)?
                } else {
                    accumulate(ck, &ex.image, &ex.background, ex, scale, &mut grads, self.frozen)?
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        iteration: t,
                        loss,
                    });
                }
                match e.source {
                    Source::Base => {
                        base_sum += loss;
                        n_base += 1;
                    }
                    Source::Scribble => {
                        scr_sum += loss;
                        n_scr += 1;
                    }
                }
            }
            let lr = self.cfg.lr_at(t);
            adam_step(&mut ck.params, &grads, &mut ck.optimizer, &AdamHyper::with_lr(lr), self.frozen).map_err(
                |e| match e {
                    Error::NonFiniteGradient(_) => Error::Diverged {
                        iteration: t,
                        loss: f64::NAN,
                    },
                    other => other,
                },
            )?;
            if !ck.params.all_finite() {
                return Err(Error::Diverged {
                    iteration: t,
                    loss: f64::NAN,
                });
            }
            ck.iteration += 1;
            log.push(LogLine {
                phase: self.name.to_string(),
                iteration: t,
                lr,
                base_loss: (n_base > 0).then(|| base_sum / n_base as f64),
                scribble_loss: (n_scr > 0).then(|| scr_sum / n_scr as f64),
                n_base,
                n_scribble: n_scr,
            });
        }
        Ok(())
    }
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Uniform batches of base examples.
fn base_batches(pool: usize, cfg: &TrainConfig) -> impl FnMut(usize) -> Result<Vec<BatchEntry>> + '_ {
    move |t| {
        let all_base = TrainConfig {
            base_fraction: 1.0,
            ..cfg.clone()
        };
        sample_hybrid_batch(pool, 0, &all_base, t)
    }
}

/// Shuffled epochs over `pool`; the final batch of an epoch may be short.
fn epoch_batches(pool: usize, batch: usize, epochs: usize, seed: u64) -> Vec<Vec<BatchEntry>> {
    let mut out = Vec::new();
    for e in 0..epochs {
        let mut order: Vec<usize> = (0..pool).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 41, e as u64)));
        for chunk in order.chunks(batch) {
            out.push(
                chunk
                    .iter()
                    .map(|&index| BatchEntry {
                        source: Source::Base,
                        index,
                    })
                    .collect(),
            );
        }
    }
    out
}

pub type TrainOutput = (Checkpoint, Vec<LogLine>);

/// Base training on ground-truth alpha. The student is supervised on both
/// its refined output and its coarse output.
pub fn train_base(mut ck: Checkpoint, base: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    reject_validation(base)?;
    if base.is_empty() {
        return Err(Error::InvalidArgument("base split is empty".into()));
    }
    let student = ck.network.is_student();
    let examples = base
        .iter()
        .map(|s| {
            let ex = Example::dense(s, require_alpha(s)?);
            if student {
                ex.with_coarse()
            } else {
                Ok(ex)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();
    let phase = Phase {
        name: "base",
        cfg,
        frozen: Frozen::NONE,
        base: &examples,
        scribble: &[],
    };
    phase.run(&mut ck, cfg.iterations, base_batches(examples.len(), cfg), &mut log)?;
    Ok((ck, log))
}

/// Hybrid fine-tuning of the teacher: base records use [`base_loss`],
/// scribbled records use the selective loss on their annotated pixels.
pub fn finetune_teacher(mut ck: Checkpoint, base: &[Sample], scribbled: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    reject_validation(base)?;
    reject_validation(scribbled)?;
    if ck.network.is_student() {
        return Err(Error::InvalidArgument("finetune-teacher needs a teacher checkpoint".into()));
    }
    let base_ex = base
        .iter()
        .map(|s| Ok(Example::dense(s, require_alpha(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let scr_ex = scribbled.iter().map(scribble_example).collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();
    let phase = Phase {
        name: "finetune",
        cfg,
        frozen: Frozen::NONE,
        base: &base_ex,
        scribble: &scr_ex,
    };
    phase.run(
        &mut ck,
        cfg.iterations,
        |t| sample_hybrid_batch(base_ex.len(), scr_ex.len(), cfg, t),
        &mut log,
    )?;
    Ok((ck, log))
}

/// Teacher predictions for every sample, keyed by id.
pub fn distill_labels(teacher: &Checkpoint, samples: &[Sample]) -> Result<BTreeMap<String, AlphaMask>> {
    if teacher.network.is_student() {
        return Err(Error::InvalidArgument("distillation needs a teacher checkpoint".into()));
    }
    predict_all(teacher, samples)
}

const REFINER_FROZEN: &[&str] = &[REFINER_PREFIX];
const COARSE_FROZEN: &[&str] = &[COARSE_PREFIX];

/// Two-phase student fine-tuning on pseudo-labels: coarse stage alone
/// against 1/4-resolution labels with the refiner frozen, then both stages
/// against full-resolution labels.
pub fn finetune_student(mut ck: Checkpoint, pseudo: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    reject_validation(pseudo)?;
    if !ck.network.is_student() {
        return Err(Error::InvalidArgument("finetune-student needs a student checkpoint".into()));
    }
    if pseudo.is_empty() {
        return Err(Error::InvalidArgument("no pseudo-labeled records".into()));
    }
    let full = pseudo
        .iter()
        .map(|s| Ok(Example::dense(s, require_pseudo(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let coarse = full
        .iter()
        .cloned()
        .map(Example::coarse_only)
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();

    let batches = epoch_batches(coarse.len(), cfg.batch_size, cfg.coarse_epochs, derive_seed(cfg.seed, 51, 0));
    Phase {
        name: "coarse",
        cfg,
        frozen: Frozen(REFINER_FROZEN),
        base: &coarse,
        scribble: &[],
    }
    .run(&mut ck, batches.len(), |t| Ok(batches[t].clone()), &mut log)?;

    let batches = epoch_batches(full.len(), cfg.batch_size, cfg.joint_epochs, derive_seed(cfg.seed, 52, 0));
    Phase {
        name: "joint",
        cfg,
        frozen: Frozen::NONE,
        base: &full,
        scribble: &[],
    }
    .run(&mut ck, batches.len(), |t| Ok(batches[t].clone()), &mut log)?;
    Ok((ck, log))
}

/// Student trained directly on the hybrid data: the coarse stage is
/// fine-tuned with base alpha and coarse-resolution scribbles while the
/// refiner is frozen. Without `freeze_refiner`, a second phase then trains
/// the refiner alone on base records.
pub fn finetune_student_direct(
    mut ck: Checkpoint,
    base: &[Sample],
    scribbled: &[Sample],
    cfg: &TrainConfig,
    freeze_refiner: bool,
) -> Result<TrainOutput> {
    cfg.validate()?;
    reject_validation(base)?;
    reject_validation(scribbled)?;
    if !ck.network.is_student() {
        return Err(Error::InvalidArgument("finetune-student-direct needs a student checkpoint".into()));
    }
    let base_full = base
        .iter()
        .map(|s| Ok(Example::dense(s, require_alpha(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let base_coarse = base_full
        .iter()
        .cloned()
        .map(Example::coarse_only)
        .collect::<Result<Vec<_>>>()?;
    let scr_coarse = scribbled
        .iter()
        .map(|s| scribble_example(s)?.coarse_only())
        .collect::<Result<Vec<_>>>()?;
    // A coarse cell may lose every annotation through the majority rule.
    let scr_coarse: Vec<Example> = scr_coarse
        .into_iter()
        .filter(|e| matches!(&e.coarse, Some(Target::Scribble(y)) if y.annotated_count() > 0))
        .collect();
    let mut log = Vec::new();
    Phase {
        name: "direct",
        cfg,
        frozen: Frozen(REFINER_FROZEN),
        base: &base_coarse,
        scribble: &scr_coarse,
    }
    .run(
        &mut ck,
        cfg.iterations,
        |t| sample_hybrid_batch(base_coarse.len(), scr_coarse.len(), cfg, t),
        &mut log,
    )?;
    if !freeze_refiner {
        Phase {
            name: "refiner",
            cfg,
            frozen: Frozen(COARSE_FROZEN),
            base: &base_full,
            scribble: &[],
        }
        .run(&mut ck, cfg.iterations, base_batches(base_full.len(), cfg), &mut log)?;
    }
    Ok((ck, log))
}

pub fn predict_all(ck: &Checkpoint, samples: &[Sample]) -> Result<BTreeMap<String, AlphaMask>> {
    samples
        .iter()
        .map(|s| Ok((s.id.clone(), ck.network.predict(&ck.params, &s.image, &s.background)?)))
        .collect()
}

/// Full-frame metrics of `ck` against each sample's ground truth, or
/// against `reference` masks when given.
pub fn evaluate(ck: &Checkpoint, samples: &[Sample], reference: Option<&BTreeMap<String, AlphaMask>>) -> Result<MetricReport> {
    let per = samples
        .iter()
        .map(|s| {
            let g = match reference {
                Some(r) => r
                    .get(&s.id)
                    .ok_or_else(|| Error::IdMismatch {
                        missing: vec![s.id.clone()],
                    })?,
                None => require_alpha(s)?,
            };
            let m = ck.network.predict(&ck.params, &s.image, &s.background)?;
            SampleMetrics::compute(&s.id, &m, g, None)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(per)
}

/// Same as [`evaluate`] with fixed-σ noise added to both inputs.
pub fn evaluate_noisy(ck: &Checkpoint, samples: &[Sample], sigma: f64, seed: u64) -> Result<MetricReport> {
    let per = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 61, k as u64));
            let (i, b) = add_noise(&s.image, &s.background, sigma, &mut rng)?;
            let m = ck.network.predict(&ck.params, &i, &b)?;
            SampleMetrics::compute(&s.id, &m, require_alpha(s)?, None)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GaussianGradient;
    use crate::net::gradcheck::relative_error;

    fn mask(w: usize, h: usize, v: &[f64]) -> AlphaMask {
        AlphaMask::from_vec(w, h, v.to_vec()).unwrap()
    }

    /// Direct evaluation with explicit 2-D convolution taps.
    fn base_loss_oracle(m: &AlphaMask, g: &AlphaMask) -> f64 {
        let (w, h) = m.dims();
        let k = GaussianGradient::default().kernel_x();
        let r = (k.len() / 2) as isize;
        let at = |a: &AlphaMask, x: isize, y: isize| {
            a.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize)
        };
        let mut l1 = 0.0;
        let mut lg = 0.0;
        for y in 0..h as isize {
            for x in 0..w as isize {
                l1 += (at(m, x, y) - at(g, x, y)).abs();
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let kx = k[(dy + r) as usize][(dx + r) as usize];
                        let ky = k[(dx + r) as usize][(dy + r) as usize];
                        let d = at(m, x - dx, y - dy) - at(g, x - dx, y - dy);
                        gx += kx * d;
                        gy += ky * d;
                    }
                }
                lg += gx.abs() + gy.abs();
            }
        }
        let n = (w * h) as f64;
        l1 / n + 0.5 * lg / n
    }

    #[test]
    fn base_loss_cases() {
        let m = mask(3, 3, &[0.2; 9]);
        assert_eq!(base_loss(&m, &m).unwrap(), 0.0);
        let ones = AlphaMask::filled(5, 4, 1.0).unwrap();
        let zeros = AlphaMask::filled(5, 4, 0.0).unwrap();
        assert!((base_loss(&ones, &zeros).unwrap() - 1.0).abs() < 1e-12);
        let a = mask(2, 2, &[0.0, 1.0, 0.5, 0.25]);
        let b = mask(2, 2, &[0.0, 0.0, 1.0, 0.25]);
        assert!((base_loss(&a, &b).unwrap() - base_loss_oracle(&a, &b)).abs() < 1e-12);
        let c = AlphaMask::from_fn(9, 7, |x, y| ((x * 3 + y * 5) % 7) as f64 / 6.0).unwrap();
        let d = AlphaMask::from_fn(9, 7, |x, y| if x > 4 && y > 2 { 1.0 } else { 0.1 }).unwrap();
        assert!((base_loss(&c, &d).unwrap() - base_loss_oracle(&c, &d)).abs() < 1e-12);
    }

    #[test]
    fn base_loss_gradient_matches_finite_differences() {
        let g = AlphaMask::from_fn(7, 6, |x, y| if x + y > 6 { 0.9 } else { 0.1 }).unwrap();
        let m = AlphaMask::from_fn(7, 6, |x, y| 0.3 + 0.05 * x as f64 - 0.03 * y as f64 + 0.011 * (x * y) as f64).unwrap();
        let (_, grad) = base_loss_grad(&m, &g).unwrap();
        for i in 0..m.len() {
            let eval = |delta: f64| {
                let mut v = m.data().to_vec();
                v[i] += delta;
                base_loss(&AlphaMask::from_vec(7, 6, v).unwrap(), &g).unwrap()
            };
            let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!(relative_error(grad[i], numeric) < 1e-4, "{i}: {} vs {numeric}", grad[i]);
        }
    }

    fn scribbles(w: usize, h: usize, labels: &[(usize, ScribbleLabel)]) -> ScribbleMap {
        let mut s = ScribbleMap::unlabeled(w, h).unwrap();
        for &(i, l) in labels {
            s.set(i % w, i / w, l);
        }
        s
    }

    #[test]
    fn scribble_loss_cases() {
        use ScribbleLabel::*;
        let m = mask(3, 2, &[0.2, 1.0, 0.5, 0.9, 0.3, 0.0]);
        let y = scribbles(3, 2, &[(0, Background), (1, Foreground), (2, Foreground)]);
        let (sum, count) = scribble_loss(&m, &y).unwrap();
        assert!((sum - 0.7).abs() < 1e-12);
        assert_eq!(count, 3);
        // Only unlabeled pixels change.
        let m2 = mask(3, 2, &[0.2, 1.0, 0.5, 0.0, 1.0, 0.7]);
        assert_eq!(scribble_loss(&m2, &y).unwrap(), (sum, count));
        let exact = mask(3, 2, &[0.0, 1.0, 1.0, 0.4, 0.4, 0.4]);
        assert_eq!(scribble_loss(&exact, &y).unwrap(), (0.0, 3));
        assert!(matches!(
            scribble_loss(&m, &ScribbleMap::unlabeled(3, 2).unwrap()),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn scribble_gradient_is_zero_off_annotation() {
        use ScribbleLabel::*;
        let m = mask(4, 1, &[0.2, 0.6, 0.5, 0.9]);
        let y = scribbles(4, 1, &[(1, Background), (3, Foreground)]);
        let (l, g) = scribble_loss_grad(&m, &y).unwrap();
        assert!((l - (0.6 + 0.1) / 2.0).abs() < 1e-12);
        assert_eq!(g, vec![0.0, 0.5, 0.0, -0.5]);
    }

    #[test]
    fn hybrid_batch_composition() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.n_base(), 13);
        for t in 0..20 {
            let b = sample_hybrid_batch(64, 12, &cfg, t).unwrap();
            assert_eq!(b.iter().filter(|e| e.source == Source::Base).count(), 13);
            assert_eq!(b.iter().filter(|e| e.source == Source::Scribble).count(), 3);
            assert_eq!(b, sample_hybrid_batch(64, 12, &cfg, t).unwrap());
            let mut idx: Vec<usize> = b.iter().filter(|e| e.source == Source::Base).map(|e| e.index).collect();
            idx.sort();
            idx.dedup();
            assert_eq!(idx.len(), 13);
        }
        let all_base = TrainConfig {
            base_fraction: 1.0,
            ..cfg.clone()
        };
        assert!(sample_hybrid_batch(64, 0, &all_base, 0)
            .unwrap()
            .iter()
            .all(|e| e.source == Source::Base));
        let none_base = TrainConfig {
            base_fraction: 0.0,
            ..cfg.clone()
        };
        let b = sample_hybrid_batch(0, 12, &none_base, 3).unwrap();
        assert!(b.len() == 16 && b.iter().all(|e| e.source == Source::Scribble));
        assert!(sample_hybrid_batch(64, 0, &cfg, 0).is_err());
        assert!(sample_hybrid_batch(0, 12, &cfg, 0).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-5);
        assert_eq!(cfg.lr_at(599), 5e-5);
        assert_eq!(cfg.lr_at(600), 2.5e-5);
        assert_eq!((cfg.batch_size, cfg.iterations, cfg.noise_sigma_max), (16, 2000, 0.1));
        assert_eq!((cfg.coarse_epochs, cfg.joint_epochs), (5, 10));
    }

    #[test]
    fn noise_augmentation() {
        let i = Image::filled(32, 32, [0.5; 3]).unwrap();
        let (a, b, s) = augment_noise(&i, &i, 0.0, 3).unwrap();
        assert_eq!((a, b, s), (i.clone(), i.clone(), 0.0));
        let mut sigmas = Vec::new();
        for seed in 0..400 {
            let (a, _, s) = augment_noise(&i, &i, 0.1, seed).unwrap();
            assert!((0.0..=0.1).contains(&s));
            let n = a.data().len() as f64;
            let emp = (a.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / n).sqrt();
            assert!(emp <= 0.1 * 1.1, "{emp}");
            assert!((emp - s).abs() < 0.15 * s + 2e-3, "{emp} vs {s}");
            sigmas.push(s);
        }
        // Roughly uniform: each quarter of [0, 0.1] gets a fair share.
        for q in 0..4 {
            let c = sigmas.iter().filter(|&&s| s >= q as f64 * 0.025 && s < (q + 1) as f64 * 0.025).count();
            assert!((70..=130).contains(&c), "quarter {q}: {c}");
        }
    }

    #[test]
    fn majority_downsampling() {
        use ScribbleLabel::*;
        // Two 2×2 cells: first has 2 Bg vs 1 Fg, second a 1-1 tie.
        let y = scribbles(4, 2, &[(0, Background), (1, Background), (4, Foreground), (2, Foreground), (7, Background)]);
        let d = downsample_scribbles(&y, 2).unwrap();
        assert_eq!(d.labels(), &[Background, Unlabeled]);
        let empty = ScribbleMap::unlabeled(4, 4).unwrap();
        assert_eq!(downsample_scribbles(&empty, 4).unwrap().annotated_count(), 0);
        assert!(downsample_scribbles(&empty, 3).is_err());
    }
}
