//! 2-D discrete Fourier transforms over N x C x H x W tensors.
//!
//! Power-of-two extents go through an iterative radix-2 FFT; any other
//! extent falls back to a table-driven direct DFT. Both paths share the
//! same convention: unnormalized forward, 1/(H*W)-scaled inverse.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// Twiddle tables for one transform length.
struct Plan {
    n: usize,
    /// exp(-2*pi*i*m/n) for m in 0..n (forward sign).
    fwd: Vec<Complex64>,
}

impl Plan {
    fn new(n: usize) -> Plan {
        let fwd = (0..n)
            .map(|m| {
                let ang = -2.0 * std::f64::consts::PI * m as f64 / n as f64;
                Complex64::new(ang.cos(), ang.sin())
            })
            .collect();
        Plan { n, fwd }
    }

    fn twiddle(&self, m: usize, inverse: bool) -> Complex64 {
        let t = self.fwd[m % self.n];
        if inverse {
            t.conj()
        } else {
            t
        }
    }
}

fn transform_line(line: &mut [Complex64], plan: &Plan, inverse: bool, scratch: &mut Vec<Complex64>) {
    let n = line.len();
    debug_assert_eq!(n, plan.n);
    if n.is_power_of_two() {
        radix2(line, plan, inverse);
    } else {
        scratch.clear();
        scratch.extend_from_slice(line);
        for (k, out) in line.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut idx = 0usize;
            for &v in scratch.iter() {
                acc += v * plan.twiddle(idx, inverse);
                idx += k;
                if idx >= n {
                    idx -= n;
                }
            }
            *out = acc;
        }
    }
    if inverse {
        let s = 1.0 / n as f64;
        for v in line.iter_mut() {
            *v *= s;
        }
    }
}

fn radix2(line: &mut [Complex64], plan: &Plan, inverse: bool) {
    let n = line.len();
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            line.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = plan.twiddle(k * step, inverse);
                let a = line[start + k];
                let b = line[start + k + len / 2] * w;
                line[start + k] = a + b;
                line[start + k + len / 2] = a - b;
            }
        }
        len <<= 1;
    }
}

/// In-place 2-D transform of a single H x W plane.
pub(crate) fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(plane.len(), h * w);
    let row_plan = Plan::new(w);
    let col_plan = Plan::new(h);
    let mut scratch = Vec::new();
    for row in plane.chunks_mut(w) {
        transform_line(row, &row_plan, inverse, &mut scratch);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        transform_line(&mut col, &col_plan, inverse, &mut scratch);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

fn complex_planes(t: &ComplexTensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "spectral transform expects rank-4 N x C x H x W, got {s:?}"
        )));
    }
    Ok((s[0] * s[1], s[2], s[3]))
}

/// Per-channel 2-D DFT of a real N x C x H x W tensor. Forward direction,
/// unnormalized.
pub fn spectral_forward(input: &Tensor) -> Result<ComplexTensor> {
    let (n, c, h, w) = input.dims4()?;
    if h < 1 || w < 1 {
        return Err(Error::Shape("spatial extents must be >= 1".into()));
    }
    let mut out = ComplexTensor::zeros(input.shape());
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..n * c {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        for (dst, &v) in plane.iter_mut().zip(src) {
            *dst = Complex64::new(v, 0.0);
        }
        fft2_plane(&mut plane, h, w, false);
        for (i, v) in plane.iter().enumerate() {
            out.set(p * h * w + i, v.re, v.im);
        }
    }
    Ok(out)
}

/// Inverse of [`spectral_forward`]: applies the 1/(H*W)-scaled inverse DFT
/// per channel and returns the real part. The imaginary residue of a
/// spectrum that came from a real signal is below 1e-10 and is dropped.
pub fn spectral_inverse(input: &ComplexTensor) -> Result<Tensor> {
    let (planes, h, w) = complex_planes(input)?;
    let mut out = Tensor::zeros(input.shape());
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..planes {
        for i in 0..h * w {
            plane[i] = Complex64::new(input.re(p * h * w + i), input.im(p * h * w + i));
        }
        fft2_plane(&mut plane, h, w, true);
        for (i, v) in plane.iter().enumerate() {
            out.data_mut()[p * h * w + i] = v.re;
        }
    }
    Ok(out)
}

/// Max imaginary magnitude the inverse would discard; diagnostic for the
/// realness contract of conjugate-symmetric spectra.
pub fn inverse_imag_residue(input: &ComplexTensor) -> Result<f64> {
    let (planes, h, w) = complex_planes(input)?;
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    let mut residue: f64 = 0.0;
    for p in 0..planes {
        for i in 0..h * w {
            plane[i] = Complex64::new(input.re(p * h * w + i), input.im(p * h * w + i));
        }
        fft2_plane(&mut plane, h, w, true);
        for v in &plane {
            residue = residue.max(v.im.abs());
        }
    }
    Ok(residue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn round_trip_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for shape in [[1usize, 1, 8, 8], [1, 2, 6, 12], [2, 1, 3, 5]] {
            let x = random_map(&mut rng, &shape);
            let back = spectral_inverse(&spectral_forward(&x).unwrap()).unwrap();
            let err = x
                .data()
                .iter()
                .zip(back.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-10, "round trip error {err} for {shape:?}");
        }
    }

    #[test]
    fn constant_input_is_dc_only() {
        let c = 0.75;
        let x = Tensor::full(&[1, 1, 4, 4], c);
        let spec = spectral_forward(&x).unwrap();
        assert!((spec.re(0) - 16.0 * c).abs() < 1e-12);
        assert!(spec.im(0).abs() < 1e-12);
        for i in 1..16 {
            assert!(spec.re(i).abs() < 1e-12 && spec.im(i).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_map(&mut rng, &[1, 1, 4, 4]);
        let spec = spectral_forward(&x).unwrap();
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let freq: f64 = (0..16)
            .map(|i| spec.re(i) * spec.re(i) + spec.im(i) * spec.im(i))
            .sum();
        assert!((spatial - freq / 16.0).abs() < 1e-10);
    }

    #[test]
    fn real_spectrum_is_conjugate_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 4);
        let x = random_map(&mut rng, &[1, 1, h, w]);
        let spec = spectral_forward(&x).unwrap();
        for u in 0..h {
            for v in 0..w {
                let a = u * w + v;
                let b = ((h - u) % h) * w + (w - v) % w;
                assert!((spec.re(a) - spec.re(b)).abs() < 1e-10);
                assert!((spec.im(a) + spec.im(b)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matches_direct_term_sum() {
        // radix-2 path against a from-scratch double loop
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (8, 8);
        let x = random_map(&mut rng, &[1, 1, h, w]);
        let spec = spectral_forward(&x).unwrap();
        for u in 0..h {
            for v in 0..w {
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..h {
                    for xc in 0..w {
                        let ang = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * xc as f64 / w as f64);
                        let val = x.data()[y * w + xc];
                        re += val * ang.cos();
                        im += val * ang.sin();
                    }
                }
                let i = u * w + v;
                assert!((spec.re(i) - re).abs() < 1e-9);
                assert!((spec.im(i) - im).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_rejects_bad_rank() {
        let bad = ComplexTensor::zeros(&[4, 4]);
        assert!(spectral_inverse(&bad).is_err());
    }
}
