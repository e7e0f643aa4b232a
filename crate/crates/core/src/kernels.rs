//! Raw forward/backward math behind the tape operations. Everything here
//! is single-threaded and runs in a fixed order, so results are
//! bit-reproducible across runs.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::fft2_plane;
use crate::tensor::Tensor;

/// Full description of a 2-D convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn dense(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::dense(in_channels, out_channels, 1, 1, 0)
    }

    /// Depthwise conv with symmetric padding that preserves spatial extent
    /// at stride 1.
    pub fn depthwise(channels: usize, k: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups: channels,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv extents must be positive".into()));
        }
        if self.in_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            )));
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        if self.dilation < 1 || self.stride < 1 || self.kernel_h < 1 || self.kernel_w < 1 {
            return Err(Error::Config(
                "stride, dilation and kernel extents must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::Config(format!(
                "kernel span {span} exceeds padded input {padded}; output would be empty"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_extent(h, self.kernel_h)?, self.out_extent(w, self.kernel_w)?))
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_h * self.kernel_w * (self.in_channels / self.groups) * self.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.bias { self.out_channels } else { 0 }
    }

    /// Receptive-field extent of this conv alone, in input pixels.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel_h.max(self.kernel_w) - 1) + 1
    }
}

/// Valid output range for one kernel tap: all `o` with
/// `0 <= o * stride + off < extent`.
fn tap_range(off: i64, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (extent as i64 - 1 - off).div_euclid(s);
    let lo = lo.max(0) as usize;
    if hi < lo as i64 {
        return (1, 0); // empty
    }
    (lo, (hi as usize).min(out_extent - 1))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {c} channels (dimension 1), spec expects {}",
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "conv weight shape {:?} does not match spec {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?}, expected [{}]",
                b.shape(),
                spec.out_channels
            )));
        }
    }
    let (oh, ow) = spec.out_hw(h, wd)?;
    let oc_total = spec.out_channels;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros(&[n, oc_total, oh, ow]);

    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for g in 0..spec.groups {
            for ocl in 0..ocg {
                let oc = g * ocg + ocl;
                let out_plane = &mut od[(ni * oc_total + oc) * oh * ow..][..oh * ow];
                if let Some(b) = b {
                    let bv = b.data()[oc];
                    if bv != 0.0 {
                        for v in out_plane.iter_mut() {
                            *v = bv;
                        }
                    }
                }
                for icl in 0..icg {
                    let ic = g * icg + icl;
                    let x_plane = &xd[(ni * c + ic) * h * wd..][..h * wd];
                    let w_base = (oc * icg + icl) * spec.kernel_h * spec.kernel_w;
                    for ky in 0..spec.kernel_h {
                        let yoff = (ky * spec.dilation) as i64 - spec.padding as i64;
                        let (oy0, oy1) = tap_range(yoff, spec.stride, h, oh);
                        if oy0 > oy1 {
                            continue;
                        }
                        for kx in 0..spec.kernel_w {
                            let wv = wdt[w_base + ky * spec.kernel_w + kx];
                            let xoff = (kx * spec.dilation) as i64 - spec.padding as i64;
                            let (ox0, ox1) = tap_range(xoff, spec.stride, wd, ow);
                            if ox0 > ox1 {
                                continue;
                            }
                            for oy in oy0..=oy1 {
                                let iy = (oy * spec.stride) as i64 + yoff;
                                let x_row = &x_plane[iy as usize * wd..][..wd];
                                let out_row = &mut out_plane[oy * ow..][..ow];
                                if spec.stride == 1 {
                                    let sx = (ox0 as i64 + xoff) as usize;
                                    let span = ox1 - ox0 + 1;
                                    let xs = &x_row[sx..sx + span];
                                    let os = &mut out_row[ox0..=ox1];
                                    for (o, xv) in os.iter_mut().zip(xs) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in ox0..=ox1 {
                                        let ix = (ox * spec.stride) as i64 + xoff;
                                        out_row[ox] += wv * x_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients w.r.t. input, weights and bias in one pass over the same
/// index space as the forward.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (n, c, h, wd) = x.dims4()?;
    let (oh, ow) = spec.out_hw(h, wd)?;
    let oc_total = spec.out_channels;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = if has_bias {
        Some(Tensor::zeros(&[oc_total]))
    } else {
        None
    };

    let xd = x.data();
    let wdt = w.data();
    let gd = grad_out.data();
    for ni in 0..n {
        for g in 0..spec.groups {
            for ocl in 0..ocg {
                let oc = g * ocg + ocl;
                let g_plane = &gd[(ni * oc_total + oc) * oh * ow..][..oh * ow];
                if let Some(db) = db.as_mut() {
                    db.data_mut()[oc] += g_plane.iter().sum::<f64>();
                }
                for icl in 0..icg {
                    let ic = g * icg + icl;
                    let x_plane = &xd[(ni * c + ic) * h * wd..][..h * wd];
                    let dx_plane_base = (ni * c + ic) * h * wd;
                    let w_base = (oc * icg + icl) * spec.kernel_h * spec.kernel_w;
                    for ky in 0..spec.kernel_h {
                        let yoff = (ky * spec.dilation) as i64 - spec.padding as i64;
                        let (oy0, oy1) = tap_range(yoff, spec.stride, h, oh);
                        if oy0 > oy1 {
                            continue;
                        }
                        for kx in 0..spec.kernel_w {
                            let wv = wdt[w_base + ky * spec.kernel_w + kx];
                            let xoff = (kx * spec.dilation) as i64 - spec.padding as i64;
                            let (ox0, ox1) = tap_range(xoff, spec.stride, wd, ow);
                            if ox0 > ox1 {
                                continue;
                            }
                            let mut wacc = 0.0;
                            for oy in oy0..=oy1 {
                                let iy = ((oy * spec.stride) as i64 + yoff) as usize;
                                let g_row = &g_plane[oy * ow..][..ow];
                                let x_row = &x_plane[iy * wd..][..wd];
                                let dx_row = dx_plane_base + iy * wd;
                                for ox in ox0..=ox1 {
                                    let ix = ((ox * spec.stride) as i64 + xoff) as usize;
                                    let gv = g_row[ox];
                                    wacc += x_row[ix] * gv;
                                    dx.data_mut()[dx_row + ix] += wv * gv;
                                }
                            }
                            dw.data_mut()[w_base + ky * spec.kernel_w + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Maps a normalized coordinate in [-1, 1] to a continuous pixel index.
/// -1/+1 land half a pixel outside the first/last center and are pulled
/// back onto them by the border clamp. Values within 1e-9 of an integer
/// snap onto it so that sampling at cell centers reads pixels exactly.
fn to_pixel(coord: f64, extent: usize) -> f64 {
    let c = coord.clamp(-1.0, 1.0);
    let mut p = (c + 1.0) * extent as f64 / 2.0 - 0.5;
    let r = p.round();
    if (p - r).abs() <= 1e-9 {
        p = r;
    }
    p.clamp(0.0, (extent - 1) as f64)
}

/// True when the (unsnapped) pixel position is strictly inside the valid
/// range, i.e. the clamp is inactive and coordinate gradients flow.
fn pixel_grad_active(coord: f64, extent: usize) -> bool {
    if !(-1.0..=1.0).contains(&coord) {
        return false;
    }
    let p = (coord + 1.0) * extent as f64 / 2.0 - 0.5;
    p > 0.0 && p < (extent - 1) as f64
}

struct SamplePoint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    gx_active: bool,
    gy_active: bool,
}

fn sample_point(cx: f64, cy: f64, h: usize, w: usize) -> SamplePoint {
    let px = to_pixel(cx, w);
    let py = to_pixel(cy, h);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    SamplePoint {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: px - x0 as f64,
        fy: py - y0 as f64,
        gx_active: pixel_grad_active(cx, w),
        gy_active: pixel_grad_active(cy, h),
    }
}

/// Bilinear sampling at normalized coordinates. `coords` is
/// N x H_G x W_G x 2 with (x, y) in the last axis.
pub fn grid_sample_forward(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let cs = coords.shape();
    if cs.len() != 4 || cs[3] != 2 {
        return Err(Error::Shape(format!(
            "coords must be N x H_G x W_G x 2, got {cs:?}"
        )));
    }
    if cs[0] != n {
        return Err(Error::Shape(format!(
            "coords batch {} does not match input batch {n}",
            cs[0]
        )));
    }
    let (hg, wg) = (cs[1], cs[2]);
    let mut out = Tensor::zeros(&[n, c, hg, wg]);
    let cd = coords.data();
    let xd = x.data();
    for ni in 0..n {
        for gi in 0..hg * wg {
            let cx = cd[(ni * hg * wg + gi) * 2];
            let cy = cd[(ni * hg * wg + gi) * 2 + 1];
            let p = sample_point(cx, cy, h, w);
            let w00 = (1.0 - p.fx) * (1.0 - p.fy);
            let w10 = p.fx * (1.0 - p.fy);
            let w01 = (1.0 - p.fx) * p.fy;
            let w11 = p.fx * p.fy;
            for ci in 0..c {
                let plane = &xd[(ni * c + ci) * h * w..][..h * w];
                let v = w00 * plane[p.y0 * w + p.x0]
                    + w10 * plane[p.y0 * w + p.x1]
                    + w01 * plane[p.y1 * w + p.x0]
                    + w11 * plane[p.y1 * w + p.x1];
                out.data_mut()[(ni * c + ci) * hg * wg + gi] = v;
            }
        }
    }
    Ok(out)
}

pub fn grid_sample_backward(
    x: &Tensor,
    coords: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let cs = coords.shape();
    let (hg, wg) = (cs[1], cs[2]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dc = Tensor::zeros(coords.shape());
    let cd = coords.data();
    let xd = x.data();
    let gd = grad_out.data();
    for ni in 0..n {
        for gi in 0..hg * wg {
            let cx = cd[(ni * hg * wg + gi) * 2];
            let cy = cd[(ni * hg * wg + gi) * 2 + 1];
            let p = sample_point(cx, cy, h, w);
            let w00 = (1.0 - p.fx) * (1.0 - p.fy);
            let w10 = p.fx * (1.0 - p.fy);
            let w01 = (1.0 - p.fx) * p.fy;
            let w11 = p.fx * p.fy;
            let mut gx_acc = 0.0;
            let mut gy_acc = 0.0;
            for ci in 0..c {
                let g = gd[(ni * c + ci) * hg * wg + gi];
                let base = (ni * c + ci) * h * w;
                let v00 = xd[base + p.y0 * w + p.x0];
                let v10 = xd[base + p.y0 * w + p.x1];
                let v01 = xd[base + p.y1 * w + p.x0];
                let v11 = xd[base + p.y1 * w + p.x1];
                let d = dx.data_mut();
                d[base + p.y0 * w + p.x0] += w00 * g;
                d[base + p.y0 * w + p.x1] += w10 * g;
                d[base + p.y1 * w + p.x0] += w01 * g;
                d[base + p.y1 * w + p.x1] += w11 * g;
                gx_acc += g * ((v10 - v00) * (1.0 - p.fy) + (v11 - v01) * p.fy);
                gy_acc += g * ((v01 - v00) * (1.0 - p.fx) + (v11 - v10) * p.fx);
            }
            let dpix_dnorm_x = w as f64 / 2.0;
            let dpix_dnorm_y = h as f64 / 2.0;
            if p.gx_active {
                dc.data_mut()[(ni * hg * wg + gi) * 2] = gx_acc * dpix_dnorm_x;
            }
            if p.gy_active {
                dc.data_mut()[(ni * hg * wg + gi) * 2 + 1] = gy_acc * dpix_dnorm_y;
            }
        }
    }
    Ok((dx, dc))
}

// ---- dense linear algebra ----

/// out(M x N) += a(M x K) * b(K x N)
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..][..n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..][..n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out(M x N) += a(M x K) * b(N x K)^T
pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..][..k];
        let out_row = &mut out[i * n..][..n];
        for j in 0..n {
            let b_row = &b[j * k..][..k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out_row[j] += acc;
        }
    }
}

/// out(M x N) += a(K x M)^T * b(K x N)
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let b_row = &b[kk * n..][..n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..][..n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// ---- activations ----

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax along the last axis, in place row by row.
pub fn softmax_rows(data: &mut [f64], row_len: usize) {
    for row in data.chunks_mut(row_len) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalize each row of (rows x dim) to zero mean / unit variance, then
/// apply gain and shift. Returns (output, x_hat, inv_sigma) so the
/// backward pass can reuse the normalized values.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / dim;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_sigma = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..][..dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_sigma[r] = inv;
        for i in 0..dim {
            let xh = (row[i] - mean) * inv;
            xhat[r * dim + i] = xh;
            out[r * dim + i] = gain[i] * xh + shift[i];
        }
    }
    (out, xhat, inv_sigma)
}

pub fn layer_norm_rows_backward(
    grad_out: &[f64],
    xhat: &[f64],
    inv_sigma: &[f64],
    gain: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = grad_out.len() / dim;
    let mut dx = vec![0.0; grad_out.len()];
    let mut dgain = vec![0.0; dim];
    let mut dshift = vec![0.0; dim];
    for r in 0..rows {
        let g = &grad_out[r * dim..][..dim];
        let xh = &xhat[r * dim..][..dim];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..dim {
            let gg = g[i] * gain[i];
            sum_g += gg;
            sum_gx += gg * xh[i];
            dgain[i] += g[i] * xh[i];
            dshift[i] += g[i];
        }
        let inv = inv_sigma[r];
        let nd = dim as f64;
        for i in 0..dim {
            let gg = g[i] * gain[i];
            dx[r * dim + i] = inv * (gg - sum_g / nd - xh[i] * sum_gx / nd);
        }
    }
    (dx, dgain, dshift)
}

// ---- learned spectral filtering ----

/// Effective full-plane filter value at (u, v) built from the half-plane
/// parameter tensor (C x H x (W/2+1) x 2). Columns that mirror onto
/// themselves are symmetrized so the full plane is always conjugate
/// symmetric and filtered signals stay real.
fn filter_at(wspec: &[f64], h: usize, w: usize, wh: usize, u: usize, v: usize) -> Complex64 {
    if v < wh {
        let primary = Complex64::new(
            wspec[(u * wh + v) * 2],
            wspec[(u * wh + v) * 2 + 1],
        );
        let self_mirrored_col = v == 0 || 2 * v == w;
        if self_mirrored_col {
            let um = (h - u) % h;
            let mirror = Complex64::new(
                wspec[(um * wh + v) * 2],
                wspec[(um * wh + v) * 2 + 1],
            );
            0.5 * (primary + mirror.conj())
        } else {
            primary
        }
    } else {
        filter_at(wspec, h, w, wh, (h - u) % h, w - v).conj()
    }
}

pub fn spectral_filter_shape(c: usize, h: usize, w: usize) -> Vec<usize> {
    vec![c, h, w / 2 + 1, 2]
}

/// All-pass initialization: unit gain at every frequency.
pub fn spectral_filter_identity(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&spectral_filter_shape(c, h, w), |i| {
        if i % 2 == 0 {
            1.0
        } else {
            0.0
        }
    })
}

/// y[c] = ifft2( fft2(x[c]) .* W_eff[c] ).re, per batch and channel.
pub fn spectral_filter_forward(x: &Tensor, wspec: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let wh = w / 2 + 1;
    if wspec.shape() != spectral_filter_shape(c, h, w).as_slice() {
        return Err(Error::Config(format!(
            "spectral filter built for plane {:?}, feature map is {}x{}x{} (expected filter {:?})",
            wspec.shape(),
            c,
            h,
            w,
            spectral_filter_shape(c, h, w)
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x.data()[(ni * c + ci) * h * w..][..h * w];
            for (dst, &v) in plane.iter_mut().zip(src) {
                *dst = Complex64::new(v, 0.0);
            }
            fft2_plane(&mut plane, h, w, false);
            let wf = &wspec.data()[ci * h * wh * 2..][..h * wh * 2];
            for u in 0..h {
                for v in 0..w {
                    plane[u * w + v] *= filter_at(wf, h, w, wh, u, v);
                }
            }
            fft2_plane(&mut plane, h, w, true);
            let dst = &mut out.data_mut()[(ni * c + ci) * h * w..][..h * w];
            for (o, p) in dst.iter_mut().zip(&plane) {
                *o = p.re;
            }
        }
    }
    Ok(out)
}

/// Gradients of the spectral filter w.r.t. input and the half-plane
/// parameters.
pub fn spectral_filter_backward(
    x: &Tensor,
    wspec: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let wh = w / 2 + 1;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(wspec.shape());
    let scale = 1.0 / (h * w) as f64;
    let mut gplane = vec![Complex64::new(0.0, 0.0); h * w];
    let mut xplane = vec![Complex64::new(0.0, 0.0); h * w];
    for ni in 0..n {
        for ci in 0..c {
            let gsrc = &grad_out.data()[(ni * c + ci) * h * w..][..h * w];
            let xsrc = &x.data()[(ni * c + ci) * h * w..][..h * w];
            for i in 0..h * w {
                gplane[i] = Complex64::new(gsrc[i], 0.0);
                xplane[i] = Complex64::new(xsrc[i], 0.0);
            }
            fft2_plane(&mut gplane, h, w, false);
            fft2_plane(&mut xplane, h, w, false);

            // dL/dW at every full-plane frequency: U(p) = X(p) conj(G(p)) / (HW)
            let wf = &wspec.data()[ci * h * wh * 2..][..h * wh * 2];
            let dwf = &mut dw.data_mut()[ci * h * wh * 2..][..h * wh * 2];
            for u in 0..h {
                for v in 0..wh {
                    let up = scale * xplane[u * w + v] * gplane[u * w + v].conj();
                    let self_mirrored_col = v == 0 || 2 * v == w;
                    let self_conjugate = self_mirrored_col && (2 * u) % h == 0;
                    let (dre, dim_) = if self_conjugate {
                        (up.re, 0.0)
                    } else if self_mirrored_col {
                        // stored twice per column via symmetrization
                        (up.re, -up.im)
                    } else {
                        (2.0 * up.re, -2.0 * up.im)
                    };
                    dwf[(u * wh + v) * 2] += dre;
                    dwf[(u * wh + v) * 2 + 1] += dim_;
                }
            }

            // dL/dx = ifft2( conj(W_eff) .* fft2(g) ).re
            for u in 0..h {
                for v in 0..w {
                    gplane[u * w + v] *= filter_at(wf, h, w, wh, u, v).conj();
                }
            }
            fft2_plane(&mut gplane, h, w, true);
            let dst = &mut dx.data_mut()[(ni * c + ci) * h * w..][..h * w];
            for (o, p) in dst.iter_mut().zip(&gplane) {
                *o = p.re;
            }
        }
    }
    Ok((dx, dw))
}
