use crate::error::{Error, Result};
use crate::net::arch::ArchSpec;
use crate::net::layers::{
    activate, activation_backward, col2im, gemm, im2col, upsample2_nearest,
    upsample2_nearest_backward, FeatureMap,
};
use crate::net::params::{Frozen, ParamSet};

/// Intermediates recorded by [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    layers: usize,
    nodes: Vec<FeatureMap>,
    cols: Vec<Vec<f64>>,
    gathered: Vec<(usize, usize, usize)>,
}

impl Trace {
    pub fn output(&self) -> &FeatureMap {
        self.nodes.last().unwrap()
    }

    pub fn into_output(mut self) -> FeatureMap {
        self.nodes.pop().unwrap()
    }

    pub fn node(&self, i: usize) -> &FeatureMap {
        &self.nodes[i]
    }
}

fn weight_name(prefix: &str, layer: &str) -> String {
    format!("{prefix}{layer}.weight")
}

fn bias_name(prefix: &str, layer: &str) -> String {
    format!("{prefix}{layer}.bias")
}

fn gather(arch: &ArchSpec, li: usize, nodes: &[FeatureMap]) -> FeatureMap {
    let l = &arch.layers[li];
    let first = if l.upsample_first {
        upsample2_nearest(&nodes[l.inputs[0]])
    } else {
        nodes[l.inputs[0]].clone()
    };
    if l.inputs.len() == 1 {
        return first;
    }
    let mut parts: Vec<&FeatureMap> = vec![&first];
    parts.extend(l.inputs[1..].iter().map(|&n| &nodes[n]));
    FeatureMap::concat(&parts)
}

/// Evaluate the graph, keeping everything the backward pass needs.
pub fn forward(arch: &ArchSpec, params: &ParamSet, prefix: &str, input: FeatureMap) -> Result<Trace> {
    if input.c != arch.input_channels {
        return Err(Error::InvalidArgument(format!(
            "network expects {} input channels, got {}",
            arch.input_channels, input.c
        )));
    }
    arch.check_input_dims(input.w, input.h)?;
    let mut nodes = vec![input];
    let mut cols_all = Vec::with_capacity(arch.layers.len());
    let mut gathered = Vec::with_capacity(arch.layers.len());
    for (li, l) in arch.layers.iter().enumerate() {
        let x = gather(arch, li, &nodes);
        let w = params.require(&weight_name(prefix, &l.name))?;
        let b = params.require(&bias_name(prefix, &l.name))?;
        let k = x.c * l.kernel * l.kernel;
        if w.shape != [l.out_channels, x.c, l.kernel, l.kernel] || b.len() != l.out_channels {
            return Err(Error::Checkpoint(format!(
                "tensor shapes for layer `{}` do not match the arch",
                l.name
            )));
        }
        let (cols, ho, wo) = im2col(&x, l.kernel, l.stride);
        let p = ho * wo;
        let mut out = Vec::with_capacity(l.out_channels * p);
        for &bv in &b.data {
            out.extend(std::iter::repeat_n(bv, p));
        }
        gemm(l.out_channels, k, p, &w.data, (k as isize, 1), &cols, (p as isize, 1), 1.0, &mut out);
        activate(l.activation, &mut out);
        gathered.push((x.c, x.h, x.w));
        cols_all.push(cols);
        nodes.push(FeatureMap {
            c: l.out_channels,
            h: ho,
            w: wo,
            data: out,
        });
    }
    Ok(Trace {
        layers: arch.layers.len(),
        nodes,
        cols: cols_all,
        gathered,
    })
}

/// Reverse-mode pass. Parameter gradients are accumulated into `grads`
/// (which must contain the `prefix`ed tensors); frozen tensors are left
/// untouched. Returns the input gradient when `want_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    arch: &ArchSpec,
    params: &ParamSet,
    prefix: &str,
    trace: &Trace,
    d_output: &[f64],
    grads: &mut ParamSet,
    frozen: Frozen,
    want_input_grad: bool,
) -> Result<Option<FeatureMap>> {
    if trace.layers != arch.layers.len() || trace.nodes.len() != arch.layers.len() + 1 {
        return Err(Error::InvalidArgument(
            "recorded trace does not belong to this arch".into(),
        ));
    }
    let out = trace.output();
    if d_output.len() != out.data.len() {
        return Err(Error::InvalidArgument(format!(
            "upstream gradient has {} values, output has {}",
            d_output.len(),
            out.data.len()
        )));
    }
    let node_channels = arch.node_channels();
    let mut node_grads: Vec<Option<FeatureMap>> = vec![None; trace.nodes.len()];
    node_grads[arch.layers.len()] = Some(FeatureMap {
        c: out.c,
        h: out.h,
        w: out.w,
        data: d_output.to_vec(),
    });

    for (li, l) in arch.layers.iter().enumerate().rev() {
        let Some(mut g) = node_grads[li + 1].take() else {
            continue;
        };
        activation_backward(l.activation, &trace.nodes[li + 1].data, &mut g.data);
        let (cin, hin, win) = trace.gathered[li];
        let k = cin * l.kernel * l.kernel;
        let p = g.h * g.w;
        let cols = &trace.cols[li];
        let wname = weight_name(prefix, &l.name);
        let bname = bias_name(prefix, &l.name);

        if !frozen.contains(&wname) {
            let dw = grads
                .get_mut(&wname)
                .ok_or_else(|| Error::Checkpoint(format!("missing gradient slot `{wname}`")))?;
            // dW[O×K] += dY[O×P] · colsᵀ
            gemm(l.out_channels, p, k, &g.data, (p as isize, 1), cols, (1, p as isize), 1.0, &mut dw.data);
        }
        if !frozen.contains(&bname) {
            let db = grads
                .get_mut(&bname)
                .ok_or_else(|| Error::Checkpoint(format!("missing gradient slot `{bname}`")))?;
            for (o, row) in g.data.chunks(p).enumerate() {
                db.data[o] += row.iter().sum::<f64>();
            }
        }

        let needs_input = l.inputs.iter().any(|&n| n > 0 || want_input_grad);
        if !needs_input {
            continue;
        }
        let w = params.require(&wname)?;
        let mut dcols = vec![0.0; k * p];
        // dcols[K×P] = Wᵀ · dY
        gemm(k, l.out_channels, p, &w.data, (1, k as isize), &g.data, (p as isize, 1), 0.0, &mut dcols);
        let dx = col2im(&dcols, cin, hin, win, l.kernel, l.stride);

        let mut offset = 0;
        for (j, &n) in l.inputs.iter().enumerate() {
            let c = node_channels[n];
            let part = FeatureMap {
                c,
                h: hin,
                w: win,
                data: dx.data[offset * hin * win..(offset + c) * hin * win].to_vec(),
            };
            offset += c;
            if n == 0 && !want_input_grad {
                continue;
            }
            let part = if j == 0 && l.upsample_first {
                upsample2_nearest_backward(&part)
            } else {
                part
            };
            match &mut node_grads[n] {
                Some(acc) => acc.data.iter_mut().zip(&part.data).for_each(|(a, b)| *a += b),
                slot => *slot = Some(part),
            }
        }
    }
    if want_input_grad {
        let input = &trace.nodes[0];
        Ok(Some(node_grads[0].take().unwrap_or_else(|| {
            FeatureMap::zeros(input.c, input.h, input.w)
        })))
    } else {
        Ok(None)
    }
}
