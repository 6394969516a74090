//! Central finite-difference check of `graph::backward`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::net::arch::{Activation, ArchRole, ArchSpec, LayerSpec};
use crate::net::graph::{backward, forward};
use crate::net::layers::FeatureMap;
use crate::net::params::{init_params, Frozen, ParamSet};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Two 3×3 convolutions (ReLU then sigmoid) on `channels` inputs.
pub fn two_layer_arch(channels: usize) -> ArchSpec {
    ArchSpec {
        role: ArchRole::Custom,
        input_channels: channels,
        layers: vec![
            LayerSpec::conv("a", &[0], 4, 1, Activation::Relu),
            LayerSpec::conv("b", &[1], 1, 1, Activation::Sigmoid),
        ],
    }
}

/// Compares analytic and numeric gradients of `L = Σ_i c_i · out_i` for
/// random `c` and input, over every `every`-th parameter value.
pub fn check_arch(
    arch: &ArchSpec,
    width: usize,
    height: usize,
    seed: u64,
    step: f64,
    every: usize,
) -> Result<GradCheck> {
    let mut params = init_params(arch, "", seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let u = Uniform::new(-1.0, 1.0).expect("valid range");
    // Nonzero biases so bias gradients pass through non-trivial activations.
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            t.data.iter_mut().for_each(|v| *v = 0.1 * u.sample(&mut rng));
        }
    }
    let mut input = FeatureMap::zeros(arch.input_channels, height, width);
    input.data.iter_mut().for_each(|v| *v = u.sample(&mut rng).abs());
    let probe: Vec<f64> = (0..width * height).map(|_| u.sample(&mut rng)).collect();

    let loss = |p: &ParamSet| -> Result<f64> {
        let t = forward(arch, p, "", input.clone())?;
        Ok(t.output().data.iter().zip(&probe).map(|(o, c)| o * c).sum())
    };

    let trace = forward(arch, &params, "", input.clone())?;
    let mut grads = params.zeros_like();
    backward(arch, &params, "", &trace, &probe, &mut grads, Frozen::NONE, false)?;

    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut flat = 0usize;
    for ti in 0..params.len() {
        for k in 0..params.tensors()[ti].len() {
            flat += 1;
            if (flat - 1) % every.max(1) != 0 {
                continue;
            }
            let orig = params.tensors()[ti].data[k];
            params.tensor_mut(ti).data[k] = orig + step;
            let up = loss(&params)?;
            params.tensor_mut(ti).data[k] = orig - step;
            let down = loss(&params)?;
            params.tensor_mut(ti).data[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grads.tensors()[ti].data[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{k}]", params.names()[ti]);
            }
        }
    }
    Ok(report)
}
