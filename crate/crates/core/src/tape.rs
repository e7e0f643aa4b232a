//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward operation appends a node holding its value and enough
//! context to push gradients back to its parents. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.
//! Parameters enter the tape as tagged leaves; after a backward pass
//! their gradients are accumulated into the owning [`ParamStore`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Elementwise activation kinds exposed by the public `activation` op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    SoftmaxLastAxis,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" | "softmax-over-last-axis" => Ok(Activation::SoftmaxLastAxis),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

enum Op {
    Leaf,
    Param,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    MinElem(ValueId, ValueId),
    MaxElem(ValueId, ValueId),
    Scale(ValueId, f64),
    MulScalar {
        a: ValueId,
        s: ValueId,
    },
    Abs(ValueId),
    Gelu(ValueId),
    Sigmoid(ValueId),
    Tanh(ValueId),
    ClampUnit(ValueId),
    SoftmaxLast {
        a: ValueId,
        row: usize,
    },
    LayerNormRows {
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        dim: usize,
        xhat: Vec<f64>,
        inv_sigma: Vec<f64>,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    },
    BatMatMul {
        a: ValueId,
        b: ValueId,
        trans_b: bool,
    },
    Reshape(ValueId),
    Permute {
        a: ValueId,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<ValueId>,
        axis: usize,
    },
    GatherRows {
        a: ValueId,
        rows: Vec<usize>,
    },
    Col {
        a: ValueId,
        col: usize,
    },
    AddRow {
        a: ValueId,
        row: ValueId,
    },
    SumAll(ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: ConvSpec,
    },
    GridSample {
        x: ValueId,
        coords: ValueId,
    },
    SpectralFilter {
        x: ValueId,
        w: ValueId,
    },
    Upsample2x(ValueId),
    ChannelMean(ValueId),
    ChannelMax {
        a: ValueId,
        argmax: Vec<usize>,
    },
    MulChannelBroadcast {
        a: ValueId,
        m: ValueId,
    },
    TokensFromNchw(ValueId),
    NchwFromTokens {
        a: ValueId,
        h: usize,
        w: usize,
    },
    CrossEntropyRows {
        logits: ValueId,
        targets: Vec<usize>,
    },
    GatherBias {
        table: ValueId,
        indices: Vec<usize>,
        tq: usize,
        tk: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, ValueId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf)
    }

    /// Insert a parameter value as a tagged leaf. Its gradient can later be
    /// pulled back into the store with [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        let vid = self.push(store.value(id).clone(), Op::Param);
        self.bindings.push((id, vid));
        vid
    }

    fn binary_same_shape(&self, a: ValueId, b: ValueId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "add")?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "sub")?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "mul")?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "div")?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x / y)
                .collect(),
        )?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "min")?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| if x <= y { *x } else { *y })
                .collect(),
        )?;
        Ok(self.push(v, Op::MinElem(a, b)))
    }

    pub fn max_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "max")?;
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| if x >= y { *x } else { *y })
                .collect(),
        )?;
        Ok(self.push(v, Op::MaxElem(a, b)))
    }

    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Multiply a tensor by a one-element scalar node (broadcast).
    pub fn mul_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "scalar operand must have one element, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(a).map(|x| x * sv);
        Ok(self.push(v, Op::MulScalar { a, s }))
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn clamp_unit(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(|x| x.clamp(-1.0, 1.0));
        self.push(v, Op::ClampUnit(a))
    }

    pub fn softmax_last(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        let row = *shape
            .last()
            .ok_or_else(|| Error::Shape("softmax needs rank >= 1".into()))?;
        if row < 1 {
            return Err(Error::Shape("softmax last extent must be >= 1".into()));
        }
        let mut data = self.value(a).data().to_vec();
        kernels::softmax_rows(&mut data, row);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::SoftmaxLast { a, row }))
    }

    pub fn activation(&mut self, a: ValueId, kind: Activation) -> Result<ValueId> {
        match kind {
            Activation::Gelu => Ok(self.gelu(a)),
            Activation::Sigmoid => Ok(self.sigmoid(a)),
            Activation::SoftmaxLastAxis => self.softmax_last(a),
        }
    }

    /// Layer normalization over the last axis of a (rows x dim) tensor.
    pub fn layer_norm_rows(&mut self, x: ValueId, gain: ValueId, shift: ValueId) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        let dim = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer norm needs rank >= 1".into()))?;
        if self.value(gain).len() != dim || self.value(shift).len() != dim {
            return Err(Error::Shape(format!(
                "layer norm gain/shift must have {dim} elements, got {}/{}",
                self.value(gain).len(),
                self.value(shift).len()
            )));
        }
        let (out, xhat, inv_sigma) = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(shift).data(),
            dim,
        );
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::LayerNormRows {
                x,
                gain,
                shift,
                dim,
                xhat,
                inv_sigma,
            },
        ))
    }

    /// y = x.w (+ b): x is (T x in), w is (in x out), b is (out).
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let (t, cin) = self.value(x).dims2()?;
        let (win, wout) = self.value(w).dims2()?;
        if cin != win {
            return Err(Error::Shape(format!(
                "linear: input width {cin} does not match weight rows {win}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != wout {
                return Err(Error::Shape(format!(
                    "linear bias length {} != out width {wout}",
                    self.value(b).len()
                )));
            }
        }
        let mut out = vec![0.0; t * wout];
        if let Some(bid) = b {
            let bd = self.value(bid).data();
            for row in out.chunks_mut(wout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::mm_nn(self.value(x).data(), self.value(w).data(), &mut out, t, cin, wout);
        let v = Tensor::new(vec![t, wout], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Batched matmul: a is (B x M x K); b is (B x K x N), or (B x N x K)
    /// when `trans_b`.
    pub fn bat_matmul(&mut self, a: ValueId, b: ValueId, trans_b: bool) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!(
                "bat_matmul wants matching rank-3 batches, got {sa:?} x {sb:?}"
            )));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(Error::Shape(format!(
                "bat_matmul inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let b_block = sb[1] * sb[2];
        let mut out = vec![0.0; bt * m * n];
        for bi in 0..bt {
            let av = &self.value(a).data()[bi * m * k..][..m * k];
            let bv = &self.value(b).data()[bi * b_block..][..b_block];
            let ov = &mut out[bi * m * n..][..m * n];
            if trans_b {
                kernels::mm_nt(av, bv, ov, m, k, n);
            } else {
                kernels::mm_nn(av, bv, ov, m, k, n);
            }
        }
        let v = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push(v, Op::BatMatMul { a, b, trans_b }))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId> {
        let in_shape = self.shape(a).to_vec();
        if perm.len() != in_shape.len() {
            return Err(Error::Shape(format!(
                "permutation {perm:?} does not match rank of {in_shape:?}"
            )));
        }
        let out = permute_data(self.value(a), perm);
        Ok(self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero parts".into()));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::Shape(format!(
                    "concat parts {:?} vs {:?} differ off-axis",
                    base,
                    s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let e = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = &mut data[o * row_out + offset * inner..][..e * inner];
                dst.copy_from_slice(&src[o * e * inner..][..e * inner]);
            }
            offset += e;
        }
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn gather_rows(&mut self, a: ValueId, rows: &[usize]) -> Result<ValueId> {
        let (r, c) = self.value(a).dims2()?;
        for &row in rows {
            if row >= r {
                return Err(Error::Shape(format!("gather row {row} out of {r}")));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            data.extend_from_slice(&self.value(a).data()[row * c..][..c]);
        }
        let v = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn col(&mut self, a: ValueId, col: usize) -> Result<ValueId> {
        let (r, c) = self.value(a).dims2()?;
        if col >= c {
            return Err(Error::Shape(format!("column {col} out of {c}")));
        }
        let data: Vec<f64> = (0..r).map(|i| self.value(a).data()[i * c + col]).collect();
        let v = Tensor::new(vec![r], data)?;
        Ok(self.push(v, Op::Col { a, col }))
    }

    /// Broadcast-add a length-D row vector to every row of a (T x D) tensor.
    pub fn add_row(&mut self, a: ValueId, row: ValueId) -> Result<ValueId> {
        let (_, d) = self.value(a).dims2()?;
        if self.value(row).len() != d {
            return Err(Error::Shape(format!(
                "row broadcast length {} != width {d}",
                self.value(row).len()
            )));
        }
        let rd = self.value(row).data().to_vec();
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .chunks(d)
                .flat_map(|r| r.iter().zip(&rd).map(|(x, y)| x + y))
                .collect(),
        )?;
        Ok(self.push(v, Op::AddRow { a, row }))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>, spec: &ConvSpec) -> Result<ValueId> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|bid| self.value(bid)),
            spec,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                spec: spec.clone(),
            },
        ))
    }

    pub fn grid_sample(&mut self, x: ValueId, coords: ValueId) -> Result<ValueId> {
        let out = kernels::grid_sample_forward(self.value(x), self.value(coords))?;
        Ok(self.push(out, Op::GridSample { x, coords }))
    }

    pub fn spectral_filter(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let out = kernels::spectral_filter_forward(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::SpectralFilter { x, w }))
    }

    pub fn upsample2x(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = self.value(a).data();
        {
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dst[p * 4 * h * w + y * 2 * w + x] = src[p * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x(a)))
    }

    /// Mean over the channel axis of N x C x H x W, keeping a singleton
    /// channel.
    pub fn channel_mean(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        let src = self.value(a).data();
        for ni in 0..n {
            for i in 0..h * w {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += src[(ni * c + ci) * h * w + i];
                }
                out.data_mut()[ni * h * w + i] = acc / c as f64;
            }
        }
        Ok(self.push(out, Op::ChannelMean(a)))
    }

    /// Max over the channel axis; ties resolve to the lowest channel.
    pub fn channel_max(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        let mut argmax = vec![0usize; n * h * w];
        let src = self.value(a).data();
        for ni in 0..n {
            for i in 0..h * w {
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for ci in 0..c {
                    let v = src[(ni * c + ci) * h * w + i];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out.data_mut()[ni * h * w + i] = best;
                argmax[ni * h * w + i] = best_c;
            }
        }
        Ok(self.push(out, Op::ChannelMax { a, argmax }))
    }

    /// Multiply an N x C x H x W tensor by an N x 1 x H x W map,
    /// broadcasting over channels.
    pub fn mul_channel_broadcast(&mut self, a: ValueId, m: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let ms = self.shape(m).to_vec();
        if ms != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "broadcast map must be {:?}, got {ms:?}",
                [n, 1, h, w]
            )));
        }
        let av = self.value(a).data();
        let mv = self.value(m).data();
        let mut data = vec![0.0; av.len()];
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h * w {
                    data[(ni * c + ci) * h * w + i] =
                        av[(ni * c + ci) * h * w + i] * mv[ni * h * w + i];
                }
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::MulChannelBroadcast { a, m }))
    }

    /// (N, C, H, W) -> (N*H*W, C) token matrix.
    pub fn tokens_from_nchw(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h * w {
                    data[(ni * h * w + i) * c + ci] = src[(ni * c + ci) * h * w + i];
                }
            }
        }
        let v = Tensor::new(vec![n * h * w, c], data)?;
        Ok(self.push(v, Op::TokensFromNchw(a)))
    }

    /// (N*H*W, C) -> (N, C, H, W).
    pub fn nchw_from_tokens(&mut self, a: ValueId, n: usize, h: usize, w: usize) -> Result<ValueId> {
        let (t, c) = self.value(a).dims2()?;
        if t != n * h * w {
            return Err(Error::Shape(format!(
                "token count {t} != {n} x {h} x {w}"
            )));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h * w {
                    data[(ni * c + ci) * h * w + i] = src[(ni * h * w + i) * c + ci];
                }
            }
        }
        let v = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.push(v, Op::NchwFromTokens { a, h, w }))
    }

    /// Per-row cross entropy of (R x C) logits against integer targets.
    /// Returns a length-R loss vector.
    pub fn cross_entropy_rows(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        let mut out = vec![0.0; r];
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            if targets[i] >= c {
                return Err(Error::Data(format!(
                    "class id {} out of {c} classes",
                    targets[i]
                )));
            }
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out[i] = lse - row[targets[i]];
        }
        let v = Tensor::new(vec![r], out)?;
        Ok(self.push(
            v,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Look up per-head bias values from a (heads x S) table at
    /// precomputed flat indices shared across heads; output is
    /// (heads x tq x tk).
    pub fn gather_bias(
        &mut self,
        table: ValueId,
        indices: &[usize],
        tq: usize,
        tk: usize,
    ) -> Result<ValueId> {
        let (m, s) = self.value(table).dims2()?;
        if indices.len() != tq * tk {
            return Err(Error::Shape(format!(
                "bias index count {} != {tq} x {tk}",
                indices.len()
            )));
        }
        for &i in indices {
            if i >= s {
                return Err(Error::Shape(format!("bias index {i} out of table size {s}")));
            }
        }
        let src = self.value(table).data();
        let mut data = vec![0.0; m * tq * tk];
        for mi in 0..m {
            for (j, &idx) in indices.iter().enumerate() {
                data[mi * tq * tk + j] = src[mi * s + idx];
            }
        }
        let v = Tensor::new(vec![m, tq, tk], data)?;
        Ok(self.push(
            v,
            Op::GatherBias {
                table,
                indices: indices.to_vec(),
                tq,
                tk,
            },
        ))
    }

    /// Verify that every node value on the tape is finite; names the first
    /// offending coordinate otherwise.
    pub fn assert_all_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            node.value
                .assert_finite(&format!("tape node {i}"))?;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss node. Returns the per-node
    /// gradient table.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Add the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(pid, vid) in &self.bindings {
            if let Some(g) = grads.wrt(vid) {
                let dst = store.grad_mut(pid);
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    pub fn param_bindings(&self) -> &[(ParamId, ValueId)] {
        &self.bindings
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        let acc = |grads: &mut Vec<Option<Tensor>>, id: ValueId, contrib: Tensor| {
            match &mut grads[id.0] {
                Some(t) => {
                    for (d, s) in t.data_mut().iter_mut().zip(contrib.data()) {
                        *d += s;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, b)| g * b)
                        .collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, a)| g * a)
                        .collect(),
                )?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv).map(|(g, b)| g / b).collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                )?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let is_min = matches!(self.nodes[i].op, Op::MinElem(..));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for j in 0..av.len() {
                    let pick_a = if is_min { av[j] <= bv[j] } else { av[j] >= bv[j] };
                    if pick_a {
                        da[j] = g.data()[j];
                    } else {
                        db[j] = g.data()[j];
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
            }
            Op::Scale(a, k) => {
                acc(grads, *a, g.map(|v| v * k));
            }
            Op::MulScalar { a, s } => {
                let sv = self.value(*s).data()[0];
                acc(grads, *a, g.map(|v| v * sv));
                let ds = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, a)| g * a)
                    .sum();
                acc(grads, *s, Tensor::scalar(ds));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av)
                        .map(|(g, a)| g * if *a > 0.0 { 1.0 } else if *a < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                )?;
                acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av)
                        .map(|(g, a)| g * kernels::gelu_grad(*a))
                        .collect(),
                )?;
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                )?;
                acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(yv)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )?;
                acc(grads, *a, da);
            }
            Op::ClampUnit(a) => {
                let av = self.value(*a).data();
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av)
                        .map(|(g, a)| if (-1.0..=1.0).contains(a) { *g } else { 0.0 })
                        .collect(),
                )?;
                acc(grads, *a, da);
            }
            Op::SoftmaxLast { a, row } => {
                let y = self.nodes[i].value.data();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / row {
                    let ys = &y[r * row..][..*row];
                    let gs = &g.data()[r * row..][..*row];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..*row {
                        da[r * row + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::LayerNormRows {
                x,
                gain,
                shift,
                dim,
                xhat,
                inv_sigma,
            } => {
                let (dx, dgain, dshift) = kernels::layer_norm_rows_backward(
                    g.data(),
                    xhat,
                    inv_sigma,
                    self.value(*gain).data(),
                    *dim,
                );
                acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                acc(grads, *gain, Tensor::new(self.shape(*gain).to_vec(), dgain)?);
                acc(grads, *shift, Tensor::new(self.shape(*shift).to_vec(), dshift)?);
            }
            Op::Linear { x, w, b } => {
                let (t, cin) = self.value(*x).dims2()?;
                let (_, cout) = self.value(*w).dims2()?;
                let mut dx = vec![0.0; t * cin];
                kernels::mm_nt(g.data(), self.value(*w).data(), &mut dx, t, cout, cin);
                let mut dw = vec![0.0; cin * cout];
                kernels::mm_tn(self.value(*x).data(), g.data(), &mut dw, cin, t, cout);
                acc(grads, *x, Tensor::new(vec![t, cin], dx)?);
                acc(grads, *w, Tensor::new(vec![cin, cout], dw)?);
                if let Some(bid) = b {
                    let mut db = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *bid, Tensor::new(vec![cout], db)?);
                }
            }
            Op::BatMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let mut da = vec![0.0; bt * m * k];
                let mut db = vec![0.0; sb.iter().product()];
                for bi in 0..bt {
                    let gv = &g.data()[bi * m * n..][..m * n];
                    let av = &self.value(*a).data()[bi * m * k..][..m * k];
                    let bv = &self.value(*b).data()[bi * k * n..][..k * n];
                    let dav = &mut da[bi * m * k..][..m * k];
                    let dbv = &mut db[bi * k * n..][..k * n];
                    if *trans_b {
                        // out = a.b^T with b (N x K): da = g.b, db = g^T.a
                        kernels::mm_nn(gv, bv, dav, m, n, k);
                        kernels::mm_tn(gv, av, dbv, n, m, k);
                    } else {
                        // out = a.b: da = g.b^T, db = a^T.g
                        kernels::mm_nt(gv, bv, dav, m, n, k);
                        kernels::mm_tn(av, gv, dbv, k, m, n);
                    }
                }
                acc(grads, *a, Tensor::new(sa, da)?);
                acc(grads, *b, Tensor::new(sb, db)?);
            }
            Op::Reshape(a) => {
                let da = g.clone().reshaped(self.shape(*a))?;
                acc(grads, *a, da);
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(grads, *a, permute_data(g, &inv));
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row_out = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let e = self.shape(p)[*axis];
                    let mut dp = vec![0.0; self.value(p).len()];
                    for o in 0..outer {
                        dp[o * e * inner..][..e * inner]
                            .copy_from_slice(&g.data()[o * row_out + offset * inner..][..e * inner]);
                    }
                    acc(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?);
                    offset += e;
                }
            }
            Op::GatherRows { a, rows } => {
                let (_, c) = self.value(*a).dims2()?;
                let mut da = vec![0.0; self.value(*a).len()];
                for (j, &row) in rows.iter().enumerate() {
                    for k in 0..c {
                        da[row * c + k] += g.data()[j * c + k];
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::Col { a, col } => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = vec![0.0; r * c];
                for j in 0..r {
                    da[j * c + col] = g.data()[j];
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::AddRow { a, row } => {
                acc(grads, *a, g.clone());
                let d = self.value(*row).len();
                let mut dr = vec![0.0; d];
                for chunk in g.data().chunks(d) {
                    for (dv, gv) in dr.iter_mut().zip(chunk) {
                        *dv += gv;
                    }
                }
                acc(grads, *row, Tensor::new(self.shape(*row).to_vec(), dr)?);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    spec,
                    g,
                )?;
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let (Some(bid), Some(db)) = (b, db) {
                    acc(grads, *bid, db);
                }
            }
            Op::GridSample { x, coords } => {
                let (dx, dc) =
                    kernels::grid_sample_backward(self.value(*x), self.value(*coords), g)?;
                acc(grads, *x, dx);
                acc(grads, *coords, dc);
            }
            Op::SpectralFilter { x, w } => {
                let (dx, dw) =
                    kernels::spectral_filter_backward(self.value(*x), self.value(*w), g)?;
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let mut da = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            da[p * h * w + (y / 2) * w + x / 2] +=
                                g.data()[p * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::ChannelMean(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let mut da = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for i in 0..h * w {
                        let gv = g.data()[ni * h * w + i] / c as f64;
                        for ci in 0..c {
                            da[(ni * c + ci) * h * w + i] = gv;
                        }
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::ChannelMax { a, argmax } => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let _ = c;
                let mut da = vec![0.0; self.value(*a).len()];
                for ni in 0..n {
                    for i in 0..h * w {
                        let ci = argmax[ni * h * w + i];
                        da[(ni * c + ci) * h * w + i] = g.data()[ni * h * w + i];
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::MulChannelBroadcast { a, m } => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let av = self.value(*a).data();
                let mv = self.value(*m).data();
                let mut da = vec![0.0; av.len()];
                let mut dm = vec![0.0; mv.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h * w {
                            let gv = g.data()[(ni * c + ci) * h * w + i];
                            da[(ni * c + ci) * h * w + i] = gv * mv[ni * h * w + i];
                            dm[ni * h * w + i] += gv * av[(ni * c + ci) * h * w + i];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                acc(grads, *m, Tensor::new(self.shape(*m).to_vec(), dm)?);
            }
            Op::TokensFromNchw(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let mut da = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h * w {
                            da[(ni * c + ci) * h * w + i] = g.data()[(ni * h * w + i) * c + ci];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::NchwFromTokens { a, h, w } => {
                let (t, c) = self.value(*a).dims2()?;
                let n = t / (h * w);
                let mut da = vec![0.0; t * c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h * w {
                            da[(ni * h * w + i) * c + ci] = g.data()[(ni * c + ci) * h * w + i];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (r, c) = self.value(*logits).dims2()?;
                let mut da = vec![0.0; r * c];
                for (ri, row) in self.value(*logits).data().chunks(c).enumerate() {
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let gv = g.data()[ri];
                    for j in 0..c {
                        let p = (row[j] - m).exp() / sum;
                        da[ri * c + j] = gv * (p - if j == targets[ri] { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *logits, Tensor::new(vec![r, c], da)?);
            }
            Op::GatherBias {
                table,
                indices,
                tq,
                tk,
            } => {
                let (m, s) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; m * s];
                for mi in 0..m {
                    for (j, &idx) in indices.iter().enumerate() {
                        dt[mi * s + idx] += g.data()[mi * tq * tk + j];
                    }
                }
                acc(grads, *table, Tensor::new(vec![m, s], dt)?);
            }
        }
        Ok(())
    }
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out = vec![0.0; t.len()];
    let mut idx = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = t.data()[src];
    }
    Tensor::new(out_shape, out).expect("permute preserves volume")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_all_ones_overlap_counts() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let spec = ConvSpec {
            bias: false,
            ..ConvSpec::dense(1, 1, 3, 1, 1)
        };
        let y = tape.conv2d(x, w, None, &spec).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[4], 9.0); // center
        for corner in [0, 2, 6, 8] {
            assert_eq!(d[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(d[edge], 6.0);
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let xt = rt(&mut rng, &[1, 1, 4, 5]);
        let x = tape.leaf(xt.clone());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = tape.leaf(k);
        let spec = ConvSpec {
            bias: false,
            ..ConvSpec::dense(1, 1, 3, 1, 1)
        };
        let y = tape.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rt(&mut rng, &[1, 2, 5, 5]);
        let specs = [
            ConvSpec::dense(2, 3, 3, 1, 1),
            ConvSpec::dense(2, 2, 3, 2, 0),
            ConvSpec {
                dilation: 2,
                ..ConvSpec::dense(2, 4, 3, 1, 2)
            },
            ConvSpec::depthwise(2, 3, 1),
            ConvSpec::depthwise(2, 5, 3),
        ];
        for spec in specs {
            let w = rt(&mut rng, &spec.weight_shape());
            let b = rt(&mut rng, &[spec.out_channels]);
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            let y = tape.conv2d(xi, wi, Some(bi), &spec).unwrap();
            let want = oracle::conv2d_naive(&x, &w, Some(&b), &spec).unwrap();
            let err = tape
                .value(y)
                .data()
                .iter()
                .zip(want.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-12, "{spec:?}: {err}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 2, 3, 3]));
        let spec = ConvSpec::dense(2, 2, 3, 1, 1);
        let err = tape.conv2d(x, w, None, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels") && msg.contains("dimension 1"), "{msg}");
    }

    #[test]
    fn conv_rejects_empty_output_as_config_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let spec = ConvSpec {
            bias: false,
            ..ConvSpec::dense(1, 1, 5, 1, 0)
        };
        assert!(matches!(
            tape.conv2d(x, w, None, &spec),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn conv_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rt(&mut rng, &[2, 2, 5, 4]);
        for spec in [
            ConvSpec::dense(2, 3, 3, 1, 1),
            ConvSpec::dense(2, 2, 3, 2, 1),
            ConvSpec::depthwise(2, 5, 2),
        ] {
            let w0 = rt(&mut rng, &spec.weight_shape());
            let b0 = rt(&mut rng, &[spec.out_channels]);
            // w.r.t. input
            let (w1, b1, s1) = (w0.clone(), b0.clone(), spec.clone());
            let e = grad_check(
                move |t, x| {
                    let w = t.leaf(w1.clone());
                    let b = t.leaf(b1.clone());
                    let y = t.conv2d(x, w, Some(b), &s1)?;
                    Ok(t.sum_all(y))
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-7, "dx {spec:?}: {e}");
            // w.r.t. weights
            let (x1, b1, s1) = (x0.clone(), b0.clone(), spec.clone());
            let e = grad_check(
                move |t, w| {
                    let x = t.leaf(x1.clone());
                    let b = t.leaf(b1.clone());
                    let y = t.conv2d(x, w, Some(b), &s1)?;
                    // nonlinearity so dW depends on values
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-7, "dw {spec:?}: {e}");
        }
    }

    #[test]
    fn depthwise_then_pointwise_equals_composed_dense() {
        // groups=C depthwise followed by 1x1 pointwise is the same linear
        // map as one dense conv whose kernel is w_pw[o][i] * w_dw[i][ky][kx]
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let x = rt(&mut rng, &[1, c, 6, 6]);
        let dw_spec = ConvSpec {
            bias: false,
            ..ConvSpec::depthwise(c, 3, 1)
        };
        let pw_spec = ConvSpec {
            bias: false,
            ..ConvSpec::pointwise(c, c)
        };
        let wdw = rt(&mut rng, &dw_spec.weight_shape());
        let wpw = rt(&mut rng, &pw_spec.weight_shape());
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let d = tape.leaf(wdw.clone());
        let p = tape.leaf(wpw.clone());
        let mid = tape.conv2d(xi, d, None, &dw_spec).unwrap();
        let got = tape.conv2d(mid, p, None, &pw_spec).unwrap();

        let dense_spec = ConvSpec {
            bias: false,
            ..ConvSpec::dense(c, c, 3, 1, 1)
        };
        let mut wd = Tensor::zeros(&dense_spec.weight_shape());
        for o in 0..c {
            for i in 0..c {
                for k in 0..9 {
                    wd.data_mut()[(o * c + i) * 9 + k] =
                        wpw.data()[o * c + i] * wdw.data()[i * 9 + k];
                }
            }
        }
        let want = oracle::conv2d_naive(&x, &wd, None, &dense_spec).unwrap();
        let err = tape
            .value(got)
            .data()
            .iter()
            .zip(want.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn grid_sample_matches_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rt(&mut rng, &[1, 1, 4, 4]);
        let coords = Tensor::from_fn(&[1, 3, 3, 2], |_| rng.gen_range(-1.2..1.2));
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let ci = tape.leaf(coords.clone());
        let y = tape.grid_sample(xi, ci).unwrap();
        for gi in 0..9 {
            let want = oracle::bilinear_sample_naive(
                &x,
                coords.data()[gi * 2],
                coords.data()[gi * 2 + 1],
                0,
                0,
            );
            assert!((tape.value(y).data()[gi] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_sample_rejects_bad_last_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let c = tape.leaf(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(matches!(
            tape.grid_sample(x, c),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn grid_sample_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rt(&mut rng, &[1, 2, 4, 4]);
        let c0 = Tensor::from_fn(&[1, 2, 3, 2], |_| rng.gen_range(-0.85..0.85));
        let (c1,) = (c0.clone(),);
        let e = grad_check(
            move |t, x| {
                let c = t.leaf(c1.clone());
                let y = t.grid_sample(x, c)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-7, "dx: {e}");
        let (x1,) = (x0.clone(),);
        let e = grad_check(
            move |t, c| {
                let x = t.leaf(x1.clone());
                let y = t.grid_sample(x, c)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &c0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "dcoords: {e}");
    }

    #[test]
    fn grid_sample_is_one_lipschitz_in_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rt(&mut rng, &[1, 1, 5, 5]);
        let coords = Tensor::from_fn(&[1, 4, 4, 2], |_| rng.gen_range(-1.3..1.3));
        let delta = 0.037;
        let mut xp = x.clone();
        for (i, v) in xp.data_mut().iter_mut().enumerate() {
            *v += delta * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let b = tape.leaf(xp);
        let c = tape.leaf(coords);
        let ya = tape.grid_sample(a, c).unwrap();
        let yb = tape.grid_sample(b, c).unwrap();
        let diff = tape
            .value(ya)
            .data()
            .iter()
            .zip(tape.value(yb).data())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff <= delta + 1e-15, "{diff} > {delta}");
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let g = tape.gelu(x);
        assert_eq!(tape.value(g).data()[0], 0.0);
        let z = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let sm = tape.softmax_last(z).unwrap();
        assert_eq!(tape.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rt(&mut rng, &[20]);
        for kind in [Activation::Gelu, Activation::Sigmoid] {
            let e = grad_check(
                move |t, x| {
                    let y = t.activation(x, kind)?;
                    Ok(t.sum_all(y))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-6, "{kind:?}: {e}");
        }
        // softmax: weight outputs so the gradient is informative
        let w = rt(&mut rng, &[4, 5]);
        let x2 = rt(&mut rng, &[4, 5]);
        let e = grad_check(
            move |t, x| {
                let y = t.softmax_last(x)?;
                let wl = t.leaf(w.clone());
                let p = t.mul(y, wl)?;
                Ok(t.sum_all(p))
            },
            &x2,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "softmax: {e}");
    }

    #[test]
    fn unknown_activation_kind_is_config_error() {
        let r: Result<Activation> = "swish".parse();
        assert!(matches!(r, Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn layer_norm_constant_input_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 4], 2.5));
        let g = tape.leaf(Tensor::ones(&[4]));
        let s = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm_rows(x, g, s).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        // large input scale keeps the epsilon term negligible
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_fn(&[2, 16], |_| rng.gen_range(-1e4..1e4));
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let g = tape.leaf(Tensor::ones(&[16]));
        let s = tape.leaf(Tensor::zeros(&[16]));
        let y = tape.layer_norm_rows(xi, g, s).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-10, "var {var}");
        }
    }

    #[test]
    fn layer_norm_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rt(&mut rng, &[3, 6]);
        let g0 = rt(&mut rng, &[6]);
        let s0 = rt(&mut rng, &[6]);
        let wsum = rt(&mut rng, &[3, 6]);
        for target in 0..3 {
            let (x1, g1, s1, w1) = (x0.clone(), g0.clone(), s0.clone(), wsum.clone());
            let e = grad_check(
                move |t, probe| {
                    let x = if target == 0 { probe } else { t.leaf(x1.clone()) };
                    let g = if target == 1 { probe } else { t.leaf(g1.clone()) };
                    let s = if target == 2 { probe } else { t.leaf(s1.clone()) };
                    let y = t.layer_norm_rows(x, g, s)?;
                    let wl = t.leaf(w1.clone());
                    let p = t.mul(y, wl)?;
                    Ok(t.sum_all(p))
                },
                [&x0, &g0, &s0][target],
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-6, "layer norm operand {target}: {e}");
        }
    }

    #[test]
    fn spectral_filter_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (h, w) in [(4usize, 4usize), (3, 5)] {
            let x0 = rt(&mut rng, &[1, 2, h, w]);
            let w0 = rt(&mut rng, &crate::kernels::spectral_filter_shape(2, h, w));
            let (w1,) = (w0.clone(),);
            let e = grad_check(
                move |t, x| {
                    let wf = t.leaf(w1.clone());
                    let y = t.spectral_filter(x, wf)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-7, "dx {h}x{w}: {e}");
            let (x1,) = (x0.clone(),);
            let e = grad_check(
                move |t, wf| {
                    let x = t.leaf(x1.clone());
                    let y = t.spectral_filter(x, wf)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-7, "dw {h}x{w}: {e}");
        }
    }

    #[test]
    fn elementwise_and_structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a0 = rt(&mut rng, &[2, 6]);
        let b0 = rt(&mut rng, &[2, 6]);
        // div needs denominators away from zero
        let bden = b0.map(|v| v.signum() * (v.abs() + 0.5));

        type Builder = Box<dyn Fn(&mut Tape, ValueId, ValueId) -> Result<ValueId>>;
        let cases: Vec<(&str, Builder)> = vec![
            ("add", Box::new(|t: &mut Tape, x, y| t.add(x, y))),
            ("sub", Box::new(|t: &mut Tape, x, y| t.sub(x, y))),
            ("mul", Box::new(|t: &mut Tape, x, y| t.mul(x, y))),
            ("div", Box::new(|t: &mut Tape, x, y| t.div(x, y))),
            ("min", Box::new(|t: &mut Tape, x, y| t.min_elem(x, y))),
            ("max", Box::new(|t: &mut Tape, x, y| t.max_elem(x, y))),
        ];
        for (name, build) in &cases {
            let second = if *name == "div" { bden.clone() } else { b0.clone() };
            let e = grad_check(
                |t, x| {
                    let y = t.leaf(second.clone());
                    let z = build(t, x, y)?;
                    let z2 = t.mul(z, z)?;
                    Ok(t.sum_all(z2))
                },
                &a0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-6, "{name}: {e}");
        }

        // abs / tanh / clamp / scale / mul_scalar
        let e = grad_check(
            |t, x| {
                let y = t.abs(x);
                Ok(t.sum_all(y))
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "abs: {e}");
        let e = grad_check(
            |t, x| {
                let y = t.tanh(x);
                Ok(t.sum_all(y))
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "tanh: {e}");
        let e = grad_check(
            |t, x| {
                let y = t.scale(x, -1.7);
                Ok(t.sum_all(y))
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-10, "scale: {e}");
        let e = grad_check(
            |t, x| {
                let s = t.leaf(Tensor::scalar(0.37));
                let y = t.mul_scalar(x, s)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "mul_scalar: {e}");
        // and w.r.t. the scalar itself
        let (a1,) = (a0.clone(),);
        let e = grad_check(
            move |t, s| {
                let x = t.leaf(a1.clone());
                let y = t.mul_scalar(x, s)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &Tensor::scalar(0.37),
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "mul_scalar ds: {e}");
    }

    #[test]
    fn linear_and_batmatmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = rt(&mut rng, &[3, 4]);
        let w0 = rt(&mut rng, &[4, 5]);
        let b0 = rt(&mut rng, &[5]);
        let (w1, b1) = (w0.clone(), b0.clone());
        let e = grad_check(
            move |t, x| {
                let w = t.leaf(w1.clone());
                let b = t.leaf(b1.clone());
                let y = t.linear(x, w, Some(b))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-7, "linear dx: {e}");
        let (x1, b1) = (x0.clone(), b0.clone());
        let e = grad_check(
            move |t, w| {
                let x = t.leaf(x1.clone());
                let b = t.leaf(b1.clone());
                let y = t.linear(x, w, Some(b))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-7, "linear dw: {e}");

        for trans_b in [false, true] {
            let a0 = rt(&mut rng, &[2, 3, 4]);
            let b0 = if trans_b {
                rt(&mut rng, &[2, 5, 4])
            } else {
                rt(&mut rng, &[2, 4, 5])
            };
            let (b2,) = (b0.clone(),);
            let e = grad_check(
                move |t, a| {
                    let b = t.leaf(b2.clone());
                    let y = t.bat_matmul(a, b, trans_b)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                },
                &a0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-7, "batmatmul da (trans_b={trans_b}): {e}");
            let (a2,) = (a0.clone(),);
            let e = grad_check(
                move |t, b| {
                    let a = t.leaf(a2.clone());
                    let y = t.bat_matmul(a, b, trans_b)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                },
                &b0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-7, "batmatmul db (trans_b={trans_b}): {e}");
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = rt(&mut rng, &[1, 3, 4, 4]);
        let weight = rt(&mut rng, &[1, 3, 8, 8]);
        let (w1,) = (weight.clone(),);
        let e = grad_check(
            move |t, x| {
                let y = t.upsample2x(x)?;
                let wl = t.leaf(w1.clone());
                let p = t.mul(y, wl)?;
                Ok(t.sum_all(p))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-9, "upsample: {e}");

        let wgt = rt(&mut rng, &[1, 1, 4, 4]);
        for use_max in [false, true] {
            let (w2,) = (wgt.clone(),);
            let e = grad_check(
                move |t, x| {
                    let y = if use_max {
                        t.channel_max(x)?
                    } else {
                        t.channel_mean(x)?
                    };
                    let wl = t.leaf(w2.clone());
                    let p = t.mul(y, wl)?;
                    Ok(t.sum_all(p))
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-6, "channel pool max={use_max}: {e}");
        }

        // token round trip and permute
        let tw = rt(&mut rng, &[4, 3]);
        let (tw1,) = (tw.clone(),);
        let e = grad_check(
            move |t, x| {
                let tok = t.tokens_from_nchw(x)?;
                let wl = t.leaf(tw1.clone());
                let p = t.mul(tok, wl)?;
                Ok(t.sum_all(p))
            },
            &Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.1),
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-9, "tokens: {e}");

        let mut tape = Tape::new();
        let x = tape.leaf(rt(&mut rng, &[1, 3, 2, 2]));
        let tok = tape.tokens_from_nchw(x).unwrap();
        let back = tape.nchw_from_tokens(tok, 1, 2, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());

        // concat + gather + col + add_row
        let a0 = rt(&mut rng, &[2, 3]);
        let b0 = rt(&mut rng, &[4, 3]);
        let (b1,) = (b0.clone(),);
        let e = grad_check(
            move |t, a| {
                let b = t.leaf(b1.clone());
                let cat = t.concat(&[a, b], 0)?;
                let g = t.gather_rows(cat, &[5, 0, 2])?;
                let c = t.col(g, 1)?;
                let c2 = t.mul(c, c)?;
                Ok(t.sum_all(c2))
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "concat/gather/col: {e}");

        let row0 = rt(&mut rng, &[3]);
        let (a1,) = (a0.clone(),);
        let e = grad_check(
            move |t, row| {
                let a = t.leaf(a1.clone());
                let y = t.add_row(a, row)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
            &row0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "add_row: {e}");
    }

    #[test]
    fn cross_entropy_and_bias_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let logits0 = rt(&mut rng, &[4, 3]);
        let targets = vec![0usize, 2, 1, 2];
        let t2 = targets.clone();
        let e = grad_check(
            move |t, l| {
                let ce = t.cross_entropy_rows(l, &t2)?;
                Ok(t.mean_all(ce))
            },
            &logits0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "cross entropy: {e}");

        // spot-check the forward value
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ce = tape.cross_entropy_rows(l, &[0]).unwrap();
        assert!((tape.value(ce).data()[0] - (2.0f64).ln()).abs() < 1e-12);

        let table0 = rt(&mut rng, &[2, 9]);
        let idx = vec![0usize, 4, 8, 4, 2, 0];
        let e = grad_check(
            move |t, tab| {
                let b = t.gather_bias(tab, &idx, 2, 3)?;
                let b2 = t.mul(b, b)?;
                Ok(t.sum_all(b2))
            },
            &table0,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "gather_bias: {e}");
    }

    #[test]
    fn grad_check_linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rt(&mut rng, &[7]);
        let x = rt(&mut rng, &[7]);
        let (a1,) = (a.clone(),);
        let e = grad_check(
            move |t, x| {
                let al = t.leaf(a1.clone());
                let p = t.mul(x, al)?;
                Ok(t.sum_all(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-9, "linear map: {e}");
    }

    #[test]
    fn grad_check_constant_map_is_zero() {
        let x = Tensor::from_fn(&[5], |i| i as f64);
        let e = grad_check(
            |t, x| {
                let z = t.sub(x, x)?;
                Ok(t.sum_all(z))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn param_gradients_accumulate_into_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = ParamStore::new();
        let w = store.register("w", rt(&mut rng, &[3]));
        let mut tape = Tape::new();
        let wl = tape.param(&store, w);
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let p = tape.mul(wl, x).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.grad(w).data(), &[1.0, 2.0, 3.0]);
        // second accumulation adds
        tape.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.grad(w).data(), &[2.0, 4.0, 6.0]);
    }
}
