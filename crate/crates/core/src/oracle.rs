//! Independent reference implementations used by the self-check suites
//! and the test oracles. Everything here is written as plain nested
//! loops straight from the defining formulas, deliberately sharing no
//! code with the optimized paths it is used to verify.

use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

/// Sliding-window convolution, one output element at a time.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (oh, ow) = spec.out_hw(h, wd)?;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
    for ni in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map(|b| b.data()[oc]).unwrap_or(0.0);
                    for icl in 0..icg {
                        let ic = g * icg + icl;
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + ky * spec.dilation) as i64
                                    - spec.padding as i64;
                                let ix = (ox * spec.stride + kx * spec.dilation) as i64
                                    - spec.padding as i64;
                                if iy < 0 || iy >= h as i64 || ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()
                                    [((ni * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * icg + icl) * spec.kernel_h + ky)
                                    * spec.kernel_w
                                    + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((ni * spec.out_channels + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Circular (wrap-around) convolution of each channel with one kernel,
/// directly from the periodic-sum definition.
pub fn circular_conv2d_naive(x: &Tensor, kernel: &[f64], kh: usize, kw: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..][..h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy + h - ky % h) % h;
                        let ix = (ox + w - kx % w) % w;
                        acc += kernel[ky * kw + kx] * plane[iy * w + ix];
                    }
                }
                out.data_mut()[p * h * w + oy * w + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Bilinear sampling evaluated from the four-neighbor weighted-sum
/// formula. Mirrors the documented coordinate convention: a normalized
/// coordinate u in [-1, 1] lands on continuous pixel (u+1)*extent/2 - 0.5,
/// clamped to the pixel index range.
pub fn bilinear_sample_naive(x: &Tensor, cx: f64, cy: f64, ni: usize, ci: usize) -> f64 {
    let (n, c, h, w) = x.dims4().expect("rank-4 input");
    assert!(ni < n && ci < c);
    let to_pix = |coord: f64, extent: usize| -> f64 {
        let p = (coord.clamp(-1.0, 1.0) + 1.0) * extent as f64 / 2.0 - 0.5;
        let r = p.round();
        let p = if (p - r).abs() <= 1e-9 { r } else { p };
        p.clamp(0.0, (extent - 1) as f64)
    };
    let px = to_pix(cx, w);
    let py = to_pix(cy, h);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let at = |yy: usize, xx: usize| x.data()[((ni * c + ci) * h + yy) * w + xx];
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x1) * fx * (1.0 - fy)
        + at(y1, x0) * (1.0 - fx) * fy
        + at(y1, x1) * fx * fy
}

/// Dense multi-head self-attention over token matrices, computed head by
/// head with explicit loops. `q_in`/`kv_in` are (T x D); weights are
/// (D x D) with optional biases; `bias` is an optional (heads x Tq x Tk)
/// additive logit bias.
#[allow(clippy::too_many_arguments)]
pub fn dense_mhsa_naive(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    bq: Option<&Tensor>,
    bk: Option<&Tensor>,
    bv: Option<&Tensor>,
    bo: Option<&Tensor>,
    heads: usize,
    bias: Option<&Tensor>,
) -> Tensor {
    let (tq, d) = (q_in.shape()[0], q_in.shape()[1]);
    let tk = k_in.shape()[0];
    let hd = d / heads;
    let proj = |x: &Tensor, w: &Tensor, b: Option<&Tensor>, t: usize| -> Vec<f64> {
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                let mut acc = b.map(|b| b.data()[j]).unwrap_or(0.0);
                for k in 0..d {
                    acc += x.data()[i * d + k] * w.data()[k * d + j];
                }
                out[i * d + j] = acc;
            }
        }
        out
    };
    let q = proj(q_in, wq, bq, tq);
    let k = proj(k_in, wk, bk, tk);
    let v = proj(v_in, wv, bv, tk);
    let mut mixed = vec![0.0; tq * d];
    for m in 0..heads {
        for i in 0..tq {
            let mut logits = vec![0.0; tk];
            for j in 0..tk {
                let mut dot = 0.0;
                for e in 0..hd {
                    dot += q[i * d + m * hd + e] * k[j * d + m * hd + e];
                }
                logits[j] = dot / (hd as f64).sqrt();
                if let Some(b) = bias {
                    logits[j] += b.data()[(m * tq + i) * tk + j];
                }
            }
            let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut den = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                den += *l;
            }
            for e in 0..hd {
                let mut acc = 0.0;
                for j in 0..tk {
                    acc += logits[j] / den * v[j * d + m * hd + e];
                }
                mixed[i * d + m * hd + e] = acc;
            }
        }
    }
    let mut out = vec![0.0; tq * d];
    for i in 0..tq {
        for j in 0..d {
            let mut acc = bo.map(|b| b.data()[j]).unwrap_or(0.0);
            for k in 0..d {
                acc += mixed[i * d + k] * wo.data()[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    Tensor::new(vec![tq, d], out).expect("shape")
}

/// Minimum-cost injection of rows into columns by exhaustive enumeration.
/// Only usable for small matrices; the sum is accumulated in row order so
/// results are comparable bit-for-bit with the optimized matcher.
pub fn assignment_brute_force(cost: &Tensor) -> (Vec<usize>, f64) {
    let (g, q) = cost.dims2().expect("rank-2 cost");
    assert!(g <= q, "more rows than columns");
    let mut cols: Vec<usize> = (0..q).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    permute_first(&mut cols, g, &mut |pick: &[usize]| {
        let mut total = 0.0;
        for (i, &j) in pick.iter().enumerate() {
            total += cost.data()[i * q + j];
        }
        let better = match &best {
            None => true,
            Some((bp, bt)) => {
                total < *bt || (total == *bt && pick < bp.as_slice())
            }
        };
        if better {
            best = Some((pick.to_vec(), total));
        }
    });
    best.expect("at least one injection")
}

/// Visit every ordered pick of `take` distinct items, in lexicographic
/// order of the resulting index sequences.
fn permute_first(cols: &mut Vec<usize>, take: usize, visit: &mut impl FnMut(&[usize])) {
    fn rec(
        cols: &[usize],
        used: &mut Vec<bool>,
        pick: &mut Vec<usize>,
        take: usize,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if pick.len() == take {
            visit(pick);
            return;
        }
        for (i, &cval) in cols.iter().enumerate() {
            if used[i] {
                continue;
            }
            used[i] = true;
            pick.push(cval);
            rec(cols, used, pick, take, visit);
            pick.pop();
            used[i] = false;
        }
    }
    let mut used = vec![false; cols.len()];
    let mut pick = Vec::new();
    rec(cols, &mut used, &mut pick, take, visit);
}
