//! Teacher and two-stage student built on the layer graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AlphaMask, Image};
use crate::net::arch::ArchSpec;
use crate::net::graph::{self, Trace};
use crate::net::layers::{BilinearOp, FeatureMap};
use crate::net::params::{init_params, Frozen, ParamSet};

pub const COARSE_PREFIX: &str = "coarse.";
pub const REFINER_PREFIX: &str = "refiner.";

/// The student's coarse stage runs at `1 / STUDENT_SCALE` resolution.
pub const STUDENT_SCALE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Network {
    Teacher { arch: ArchSpec },
    Student { coarse: ArchSpec, refiner: ArchSpec },
}

/// `[I, B, mean_c |I − B|]` as a 7-plane feature map.
pub fn matte_input(image: &Image, background: &Image) -> Result<FeatureMap> {
    if image.dims() != background.dims() {
        return Err(Error::dims(image.dims(), background.dims()));
    }
    let (w, h) = image.dims();
    let n = w * h;
    let mut data = Vec::with_capacity(7 * n);
    for c in 0..3 {
        data.extend(image.data().iter().skip(c).step_by(3));
    }
    for c in 0..3 {
        data.extend(background.data().iter().skip(c).step_by(3));
    }
    let (i, b) = (image.data(), background.data());
    data.extend((0..n).map(|p| {
        ((i[3 * p] - b[3 * p]).abs() + (i[3 * p + 1] - b[3 * p + 1]).abs() + (i[3 * p + 2] - b[3 * p + 2]).abs())
            / 3.0
    }));
    Ok(FeatureMap { c: 7, h, w, data })
}

fn plane_to_mask(fm: &FeatureMap) -> Result<AlphaMask> {
    AlphaMask::from_vec(fm.w, fm.h, fm.data.clone())
}

pub fn forward_teacher(
    arch: &ArchSpec,
    params: &ParamSet,
    image: &Image,
    background: &Image,
) -> Result<(AlphaMask, Trace)> {
    let trace = graph::forward(arch, params, "", matte_input(image, background)?)?;
    Ok((plane_to_mask(trace.output())?, trace))
}

/// Recorded state of one student forward pass. The `_raw` planes are the
/// unclamped network outputs that losses are taken on; the masks are their
/// clamped versions.
#[derive(Debug, Clone)]
pub struct StudentPass {
    pub coarse: AlphaMask,
    pub refined: AlphaMask,
    pub coarse_raw: Vec<f64>,
    pub refined_raw: Vec<f64>,
    coarse_trace: Trace,
    refiner_trace: Trace,
    up: BilinearOp,
}

pub fn forward_student(
    coarse_arch: &ArchSpec,
    refiner_arch: &ArchSpec,
    params: &ParamSet,
    image: &Image,
    background: &Image,
) -> Result<StudentPass> {
    let (w, h) = image.dims();
    if w % STUDENT_SCALE != 0 || h % STUDENT_SCALE != 0 {
        return Err(Error::InvalidArgument(format!(
            "student input {w}x{h} must be divisible by {STUDENT_SCALE}"
        )));
    }
    let (cw, ch) = (w / STUDENT_SCALE, h / STUDENT_SCALE);
    let full = matte_input(image, background)?;
    let small = BilinearOp::new(w, h, cw, ch).apply_map(&full);
    let coarse_trace = graph::forward(coarse_arch, params, COARSE_PREFIX, small)?;
    let coarse_plane = &coarse_trace.output().data;

    let up = BilinearOp::new(cw, ch, w, h);
    let up_coarse = up.apply(coarse_plane);
    let mut rin = full;
    rin.data.truncate(6 * w * h);
    rin.data.extend_from_slice(&up_coarse);
    let refiner_trace = graph::forward(refiner_arch, params, REFINER_PREFIX, rin)?;
    let refined_raw: Vec<f64> = up_coarse
        .iter()
        .zip(&refiner_trace.output().data)
        .map(|(u, r)| u + r)
        .collect();
    Ok(StudentPass {
        coarse: AlphaMask::from_vec(cw, ch, coarse_plane.clone())?,
        refined: AlphaMask::from_vec(w, h, refined_raw.clone())?,
        coarse_raw: coarse_plane.clone(),
        refined_raw,
        coarse_trace,
        refiner_trace,
        up,
    })
}

/// Backpropagates upstream gradients on the raw coarse and/or refined
/// outputs.
#[allow(clippy::too_many_arguments)]
pub fn backward_student(
    coarse_arch: &ArchSpec,
    refiner_arch: &ArchSpec,
    params: &ParamSet,
    pass: &StudentPass,
    d_coarse: Option<&[f64]>,
    d_refined: Option<&[f64]>,
    grads: &mut ParamSet,
    frozen: Frozen,
) -> Result<()> {
    let mut d_coarse_total = match d_coarse {
        Some(d) if d.len() != pass.coarse.len() => {
            return Err(Error::InvalidArgument("coarse gradient has wrong size".into()))
        }
        Some(d) => d.to_vec(),
        None => vec![0.0; pass.coarse.len()],
    };
    if let Some(d_sum) = d_refined {
        if d_sum.len() != pass.refined_raw.len() {
            return Err(Error::InvalidArgument("refined gradient has wrong size".into()));
        }
        let d_rin = graph::backward(
            refiner_arch,
            params,
            REFINER_PREFIX,
            &pass.refiner_trace,
            d_sum,
            grads,
            frozen,
            true,
        )?
        .expect("input gradient requested");
        let d_up: Vec<f64> = d_sum.iter().zip(d_rin.plane(6)).map(|(a, b)| a + b).collect();
        d_coarse_total
            .iter_mut()
            .zip(pass.up.adjoint(&d_up))
            .for_each(|(a, b)| *a += b);
    }
    graph::backward(
        coarse_arch,
        params,
        COARSE_PREFIX,
        &pass.coarse_trace,
        &d_coarse_total,
        grads,
        frozen,
        false,
    )?;
    Ok(())
}

impl Network {
    pub fn teacher() -> Self {
        Network::Teacher {
            arch: ArchSpec::teacher(),
        }
    }

    pub fn student() -> Self {
        Network::Student {
            coarse: ArchSpec::student_coarse(),
            refiner: ArchSpec::student_refiner(),
        }
    }

    pub fn is_student(&self) -> bool {
        matches!(self, Network::Student { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Network::Teacher { arch } => arch.validate(),
            Network::Student { coarse, refiner } => {
                coarse.validate()?;
                refiner.validate()
            }
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        match self {
            Network::Teacher { arch } => init_params(arch, "", seed),
            Network::Student { coarse, refiner } => {
                let mut p = init_params(coarse, COARSE_PREFIX, seed)?;
                let r = init_params(refiner, REFINER_PREFIX, seed ^ 0x5eed_0f_2e_f1)?;
                p.extend_prefixed("", r);
                Ok(p)
            }
        }
    }

    /// Full-resolution matte: the teacher output or the refined student
    /// output.
    pub fn predict(&self, params: &ParamSet, image: &Image, background: &Image) -> Result<AlphaMask> {
        match self {
            Network::Teacher { arch } => Ok(forward_teacher(arch, params, image, background)?.0),
            Network::Student { coarse, refiner } => {
                Ok(forward_student(coarse, refiner, params, image, background)?.refined)
            }
        }
    }

    pub fn check_input_dims(&self, width: usize, height: usize) -> Result<()> {
        match self {
            Network::Teacher { arch } => arch.check_input_dims(width, height),
            Network::Student { coarse, .. } => {
                if width % STUDENT_SCALE != 0 || height % STUDENT_SCALE != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "student input {width}x{height} must be divisible by {STUDENT_SCALE}"
                    )));
                }
                coarse.check_input_dims(width / STUDENT_SCALE, height / STUDENT_SCALE)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(w: usize, h: usize) -> (Image, Image) {
        let i = Image::from_fn(w, h, |x, y| {
            [x as f64 / w as f64, y as f64 / h as f64, ((x * y) % 7) as f64 / 7.0]
        })
        .unwrap();
        let b = Image::filled(w, h, [0.4, 0.5, 0.45]).unwrap();
        (i, b)
    }

    #[test]
    fn zero_teacher_outputs_zero() {
        let net = Network::teacher();
        let mut p = net.init_params(1).unwrap();
        p.fill_zero();
        let (i, b) = scene(16, 16);
        let m = net.predict(&p, &i, &b).unwrap();
        assert_eq!(m.dims(), (16, 16));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn teacher_shape_and_determinism() {
        let net = Network::teacher();
        let p = net.init_params(4).unwrap();
        let (i, b) = scene(24, 16);
        let a = net.predict(&p, &i, &b).unwrap();
        let c = net.predict(&p, &i, &b).unwrap();
        assert_eq!(a.dims(), (24, 16));
        assert_eq!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn teacher_rejects_bad_dims() {
        let net = Network::teacher();
        let p = net.init_params(4).unwrap();
        let (i, b) = scene(20, 16);
        assert!(net.predict(&p, &i, &b).is_err());
    }

    #[test]
    fn zero_refiner_passes_upsampled_coarse() {
        let Network::Student { coarse, refiner } = Network::student() else {
            unreachable!()
        };
        let mut p = Network::student().init_params(9).unwrap();
        for (name, t) in p.iter_mut() {
            if name.starts_with(REFINER_PREFIX) {
                t.data.fill(0.0);
            }
        }
        let (i, b) = scene(32, 16);
        let pass = forward_student(&coarse, &refiner, &p, &i, &b).unwrap();
        assert_eq!(pass.coarse.dims(), (8, 4));
        let up = BilinearOp::new(8, 4, 32, 16).apply(&pass.coarse_raw);
        assert_eq!(pass.refined_raw, up);
        assert_eq!(pass.refined, AlphaMask::from_vec(32, 16, up).unwrap());
    }

    #[test]
    fn student_is_much_smaller() {
        let t = Network::teacher().init_params(0).unwrap().parameter_count();
        let s = Network::student().init_params(0).unwrap().parameter_count();
        assert!(s * 5 < t, "student {s} teacher {t}");
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let i = Image::filled(32, 32, [0.7, 0.2, 0.4]).unwrap();
        let b = Image::filled(32, 32, [0.3, 0.3, 0.3]).unwrap();
        for net in [Network::teacher(), Network::student()] {
            let p = net.init_params(2).unwrap();
            let m = net.predict(&p, &i, &b).unwrap();
            let v0 = m.data()[0];
            assert!(m.data().iter().all(|v| (v - v0).abs() < 1e-12));
        }
    }

    #[test]
    fn student_gradients_match_finite_differences() {
        use crate::net::gradcheck::relative_error;
        let Network::Student { coarse, refiner } = Network::student() else {
            unreachable!()
        };
        let mut p = Network::student().init_params(21).unwrap();
        let (i, b) = scene(8, 8);
        let c_coarse: Vec<f64> = (0..4).map(|k| 0.3 - 0.2 * k as f64).collect();
        let c_ref: Vec<f64> = (0..64).map(|k| ((k * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let loss = |p: &ParamSet| {
            let s = forward_student(&coarse, &refiner, p, &i, &b).unwrap();
            let a: f64 = s.coarse_raw.iter().zip(&c_coarse).map(|(x, c)| x * c).sum();
            let r: f64 = s.refined_raw.iter().zip(&c_ref).map(|(x, c)| x * c).sum();
            a + r
        };
        let pass = forward_student(&coarse, &refiner, &p, &i, &b).unwrap();
        let mut g = p.zeros_like();
        backward_student(&coarse, &refiner, &p, &pass, Some(&c_coarse), Some(&c_ref), &mut g, Frozen::NONE)
            .unwrap();
        let mut worst = 0.0f64;
        for ti in 0..p.len() {
            for k in 0..p.tensors()[ti].len() {
                let orig = p.tensors()[ti].data[k];
                p.tensor_mut(ti).data[k] = orig + 1e-4;
                let up = loss(&p);
                p.tensor_mut(ti).data[k] = orig - 1e-4;
                let down = loss(&p);
                p.tensor_mut(ti).data[k] = orig;
                worst = worst.max(relative_error(g.tensors()[ti].data[k], (up - down) / 2e-4));
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn frozen_refiner_gets_no_gradient() {
        let Network::Student { coarse, refiner } = Network::student() else {
            unreachable!()
        };
        let p = Network::student().init_params(2).unwrap();
        let (i, b) = scene(16, 16);
        let pass = forward_student(&coarse, &refiner, &p, &i, &b).unwrap();
        let mut g = p.zeros_like();
        let d = vec![1.0; 256];
        backward_student(&coarse, &refiner, &p, &pass, None, Some(&d), &mut g, Frozen(&[REFINER_PREFIX]))
            .unwrap();
        for (name, t) in g.iter() {
            let zero = t.data.iter().all(|&v| v == 0.0);
            assert_eq!(zero, name.starts_with(REFINER_PREFIX), "{name}");
        }
    }
}
