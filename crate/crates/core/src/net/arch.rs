//! Layer graphs for the matte networks.
//!
//! A network is a list of 3×3 (or any odd-size) convolutions. Node 0 is the
//! network input and node `k + 1` is the output of layer `k`. Each layer reads
//! the channel concatenation of its `inputs`, optionally upsampling the first
//! one ×2 (nearest) so encoder-decoder skips line up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchRole {
    Teacher,
    StudentCoarse,
    StudentRefiner,
    /// Small graphs used for gradient checks and experiments.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub inputs: Vec<usize>,
    #[serde(default)]
    pub upsample_first: bool,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(
        name: &str,
        inputs: &[usize],
        out_channels: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            name: name.to_string(),
            inputs: inputs.to_vec(),
            upsample_first: false,
            kernel: 3,
            out_channels,
            stride,
            activation,
        }
    }

    pub fn upsampled(mut self) -> Self {
        self.upsample_first = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub role: ArchRole,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Channels of the background-conditioned input: image, background and
/// their channel-mean absolute difference.
pub const MATTE_INPUT_CHANNELS: usize = 7;

impl ArchSpec {
    /// Encoder 16→32→64 with stride-2 convolutions, a bottleneck, and a
    /// mirrored decoder with skip concatenations.
    pub fn teacher() -> Self {
        use Activation::*;
        ArchSpec {
            role: ArchRole::Teacher,
            input_channels: MATTE_INPUT_CHANNELS,
            layers: vec![
                LayerSpec::conv("enc1", &[0], 16, 2, Relu),
                LayerSpec::conv("enc2", &[1], 32, 2, Relu),
                LayerSpec::conv("enc3", &[2], 64, 2, Relu),
                LayerSpec::conv("bottleneck", &[3], 64, 1, Relu),
                LayerSpec::conv("dec3", &[4, 2], 32, 1, Relu).upsampled(),
                LayerSpec::conv("dec2", &[5, 1], 16, 1, Relu).upsampled(),
                LayerSpec::conv("dec1", &[6, 0], 8, 1, Relu).upsampled(),
                LayerSpec::conv("out", &[7], 1, 1, Identity),
            ],
        }
    }

    /// Runs at quarter resolution on the 7-channel input.
    pub fn student_coarse() -> Self {
        use Activation::*;
        ArchSpec {
            role: ArchRole::StudentCoarse,
            input_channels: MATTE_INPUT_CHANNELS,
            layers: vec![
                LayerSpec::conv("c1", &[0], 16, 1, Relu),
                LayerSpec::conv("c2", &[1], 16, 1, Relu),
                LayerSpec::conv("c3", &[2], 16, 1, Relu),
                LayerSpec::conv("c4", &[3], 1, 1, Identity),
            ],
        }
    }

    /// Full-resolution residual refiner over `[I, B, upsampled coarse]`.
    pub fn student_refiner() -> Self {
        use Activation::*;
        ArchSpec {
            role: ArchRole::StudentRefiner,
            input_channels: MATTE_INPUT_CHANNELS,
            layers: vec![
                LayerSpec::conv("r1", &[0], 8, 1, Relu),
                LayerSpec::conv("r2", &[1], 8, 1, Relu),
                LayerSpec::conv("r3", &[2], 1, 1, Identity),
            ],
        }
    }

    pub fn output_node(&self) -> usize {
        self.layers.len()
    }

    /// Output channel count of every node.
    pub fn node_channels(&self) -> Vec<usize> {
        std::iter::once(self.input_channels)
            .chain(self.layers.iter().map(|l| l.out_channels))
            .collect()
    }

    pub(crate) fn layer_input_channels(&self, layer: usize, node_channels: &[usize]) -> usize {
        self.layers[layer]
            .inputs
            .iter()
            .map(|&n| node_channels[n])
            .sum()
    }

    /// Total stride-2 downsampling depth; input dimensions must be
    /// divisible by `2^depth`.
    pub fn required_divisor(&self) -> usize {
        let mut scale = vec![1usize];
        let mut max = 1;
        for l in &self.layers {
            let mut s = scale[l.inputs[0]];
            if l.upsample_first {
                s /= 2;
            }
            s *= l.stride;
            max = max.max(s);
            scale.push(s);
        }
        max
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("arch: {msg}")));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.input_channels == 0 {
            return bad("zero input channels".into());
        }
        // Scale of each node relative to the input, as a power-of-two exponent.
        let mut level: Vec<i32> = vec![0];
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.is_empty() {
                return bad(format!("layer {} has no inputs", l.name));
            }
            if l.inputs.iter().any(|&n| n > i) {
                return bad(format!("layer {} reads a later node", l.name));
            }
            if l.kernel % 2 == 0 || l.out_channels == 0 || !(l.stride == 1 || l.stride == 2) {
                return bad(format!("layer {} has invalid kernel/stride/channels", l.name));
            }
            let mut first = level[l.inputs[0]];
            if l.upsample_first {
                first -= 1;
            }
            if first < 0 {
                return bad(format!("layer {} upsamples above input resolution", l.name));
            }
            if l.inputs[1..].iter().any(|&n| level[n] != first) {
                return bad(format!("layer {} concatenates mismatched resolutions", l.name));
            }
            level.push(first + if l.stride == 2 { 1 } else { 0 });
        }
        let last = self.layers.last().unwrap();
        if last.out_channels != 1 {
            return bad("final layer must output one channel".into());
        }
        if *level.last().unwrap() != 0 {
            return bad("output resolution differs from input".into());
        }
        if self.role != ArchRole::Custom && last.activation != Activation::Identity {
            return bad("matte heads must be linear; predictions are clamped".into());
        }
        Ok(())
    }

    pub fn check_input_dims(&self, width: usize, height: usize) -> Result<()> {
        let d = self.required_divisor();
        if width == 0 || height == 0 || width % d != 0 || height % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {width}x{height} must be nonzero and divisible by {d}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for a in [
            ArchSpec::teacher(),
            ArchSpec::student_coarse(),
            ArchSpec::student_refiner(),
        ] {
            a.validate().unwrap();
        }
        assert_eq!(ArchSpec::teacher().required_divisor(), 8);
        assert_eq!(ArchSpec::student_coarse().required_divisor(), 1);
    }

    #[test]
    fn rejects_bad_graphs() {
        let mut a = ArchSpec::teacher();
        a.layers[7].out_channels = 2;
        assert!(a.validate().is_err());

        let mut a = ArchSpec::teacher();
        a.layers[4].upsample_first = false;
        assert!(a.validate().is_err());

        let mut a = ArchSpec::teacher();
        a.layers[7].activation = Activation::Relu;
        assert!(a.validate().is_err());
    }

    #[test]
    fn teacher_needs_multiple_of_eight() {
        let a = ArchSpec::teacher();
        assert!(a.check_input_dims(64, 64).is_ok());
        assert!(a.check_input_dims(60, 64).is_err());
    }
}
