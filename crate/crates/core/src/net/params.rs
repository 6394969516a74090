use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::arch::ArchSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named tensors. Used both for parameters and for
/// their gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => self.tensors[i] = tensor,
            None => {
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.data.fill(0.0));
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.data.iter_mut().for_each(|v| *v *= k));
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::Checkpoint(
                "parameter sets have different names or shapes".into(),
            ));
        }
        Ok(())
    }

    /// Appends every tensor of `other` with `prefix` prepended to its name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(format!("{prefix}{n}"), t);
        }
    }
}

/// Tensor names matching any of these prefixes receive no gradient and
/// no optimizer update.
#[derive(Debug, Clone, Copy, Default)]
pub struct Frozen<'a>(pub &'a [&'a str]);

impl Frozen<'_> {
    pub const NONE: Frozen<'static> = Frozen(&[]);

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|p| name.starts_with(p))
    }
}

/// He-normal kernels (variance 2 / fan_in) and zero biases, in layer
/// order, with names prefixed by `prefix`.
pub fn init_params(arch: &ArchSpec, prefix: &str, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamSet::new();
    let in_channels = arch.node_channels();
    for (li, layer) in arch.layers.iter().enumerate() {
        let cin = arch.layer_input_channels(li, &in_channels);
        let fan_in = cin * layer.kernel * layer.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let shape = [layer.out_channels, cin, layer.kernel, layer.kernel];
        let mut w = Tensor::zeros(&shape);
        w.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        out.insert(format!("{prefix}{}.weight", layer.name), w);
        out.insert(
            format!("{prefix}{}.bias", layer.name),
            Tensor::zeros(&[layer.out_channels]),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::arch::ArchSpec;

    #[test]
    fn init_is_deterministic() {
        let arch = ArchSpec::teacher();
        let a = init_params(&arch, "", 11).unwrap();
        let b = init_params(&arch, "", 11).unwrap();
        assert_eq!(a, b);
        let c = init_params(&arch, "", 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_are_zero() {
        let p = init_params(&ArchSpec::teacher(), "", 3).unwrap();
        for (name, t) in p.iter() {
            if name.ends_with(".bias") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn kernel_variance_matches_fan_in() {
        // The bottleneck kernel has 64·64·9 = 36864 samples at fan_in 576.
        let p = init_params(&ArchSpec::teacher(), "", 5).unwrap();
        let w = p.get("bottleneck.weight").unwrap();
        assert!(w.len() >= 10_000);
        let fan_in = (w.shape[1] * w.shape[2] * w.shape[3]) as f64;
        let n = w.len() as f64;
        let mean = w.data.iter().sum::<f64>() / n;
        let var = w.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / fan_in;
        assert!((var - expected).abs() / expected < 0.2, "{var} vs {expected}");
    }

    #[test]
    fn frozen_prefixes() {
        let f = Frozen(&["refiner."]);
        assert!(f.contains("refiner.r1.weight"));
        assert!(!f.contains("coarse.c1.weight"));
        assert!(!Frozen::NONE.contains("anything"));
    }
}
