//! Small parameterized building blocks shared by the backbone, encoder,
//! fusion neck and decoder. Each layer registers its parameters under a
//! dotted name, runs on the tape, and can describe itself to the cost
//! profiler so the analytic graph never drifts from the executable model.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::params::{he_init, normal_init, ParamId, ParamStore};
use crate::profiler::{LayerDesc, LayerKind};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
    pub name: String,
}

impl Conv2dLayer {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec) -> Self {
        let fan_in = spec.kernel_h * spec.kernel_w * spec.in_channels / spec.groups;
        let w = ps.register(&format!("{name}.w"), he_init(rng, &spec.weight_shape(), fan_in));
        let b = spec
            .bias
            .then(|| ps.register(&format!("{name}.b"), Tensor::zeros(&[spec.out_channels])));
        Conv2dLayer {
            w,
            b,
            spec,
            name: name.to_string(),
        }
    }

    /// Zero-initialized variant (used where a path must start inert).
    pub fn new_zero(ps: &mut ParamStore, name: &str, spec: ConvSpec) -> Self {
        let w = ps.register(&format!("{name}.w"), Tensor::zeros(&spec.weight_shape()));
        let b = spec
            .bias
            .then(|| ps.register(&format!("{name}.b"), Tensor::zeros(&[spec.out_channels])));
        Conv2dLayer {
            w,
            b,
            spec,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let w = t.param(ps, self.w);
        let b = self.b.map(|bid| t.param(ps, bid));
        t.conv2d(x, w, b, &self.spec)
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>, hw: (usize, usize)) -> Result<(usize, usize)> {
        let (oh, ow) = self.spec.out_hw(hw.0, hw.1)?;
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::Conv {
                spec: self.spec.clone(),
                out_h: oh,
                out_w: ow,
            },
        });
        Ok((oh, ow))
    }
}

#[derive(Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
    pub name: String,
}

impl LinearLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), he_init(rng, &[inputs, outputs], inputs));
        let b = Some(ps.register(&format!("{name}.b"), Tensor::zeros(&[outputs])));
        LinearLayer {
            w,
            b,
            inputs,
            outputs,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let w = t.param(ps, self.w);
        let b = self.b.map(|bid| t.param(ps, bid));
        t.linear(x, w, b)
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>, tokens: usize) {
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::Linear {
                inputs: self.inputs,
                outputs: self.outputs,
                tokens,
                bias: self.b.is_some(),
            },
        });
    }
}

#[derive(Clone)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub name: String,
}

impl LayerNormLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = ps.register(&format!("{name}.gain"), Tensor::ones(&[dim]));
        let shift = ps.register(&format!("{name}.shift"), Tensor::zeros(&[dim]));
        LayerNormLayer {
            gain,
            shift,
            dim,
            name: name.to_string(),
        }
    }

    /// Normalize the last axis of a (rows x dim) tensor.
    pub fn forward_rows(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let g = t.param(ps, self.gain);
        let s = t.param(ps, self.shift);
        t.layer_norm_rows(x, g, s)
    }

    /// Normalize over channels of an N x C x H x W map, per position.
    pub fn forward_channels(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let (n, _, h, w) = t.value(x).dims4()?;
        let tokens = t.tokens_from_nchw(x)?;
        let normed = self.forward_rows(t, ps, tokens)?;
        t.nchw_from_tokens(normed, n, h, w)
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>, positions: usize) {
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::LayerNorm {
                features: self.dim,
                positions,
            },
        });
    }
}

/// Learnable embedding matrix (query content/position, level encodings).
#[derive(Clone)]
pub struct EmbeddingParam {
    pub id: ParamId,
    pub rows: usize,
    pub dim: usize,
    pub name: String,
}

impl EmbeddingParam {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
    ) -> Self {
        let id = ps.register(name, normal_init(rng, &[rows, dim], std));
        EmbeddingParam {
            id,
            rows,
            dim,
            name: name.to_string(),
        }
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>) {
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::Embedding {
                rows: self.rows,
                dim: self.dim,
            },
        });
    }
}

/// Non-learned 2-D sinusoidal positional encoding laid out as
/// 1 x C x H x W. Channels split into four bands: sin/cos of x, sin/cos
/// of y, with geometrically spaced frequencies.
pub fn sinusoidal_2d(c: usize, h: usize, w: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(crate::error::Error::Config(format!(
            "positional encoding width {c} must be divisible by 4"
        )));
    }
    let quarter = c / 4;
    let temperature: f64 = 10000.0;
    let mut out = Tensor::zeros(&[1, c, h, w]);
    for q in 0..quarter {
        let freq = 1.0 / temperature.powf(q as f64 / quarter as f64);
        for y in 0..h {
            for x in 0..w {
                let px = x as f64 * freq;
                let py = y as f64 * freq;
                let base = y * w + x;
                let d = out.data_mut();
                d[(q) * h * w + base] = px.sin();
                d[(quarter + q) * h * w + base] = px.cos();
                d[(2 * quarter + q) * h * w + base] = py.sin();
                d[(3 * quarter + q) * h * w + base] = py.cos();
            }
        }
    }
    Ok(out)
}
