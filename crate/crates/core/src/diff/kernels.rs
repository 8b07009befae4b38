//! Elementwise and row-wise numeric kernels.
//!
//! On x86-64 with `std`, each public kernel is also compiled for AVX2+FMA and
//! picked at runtime. Floating-point operations are not contracted or
//! reassociated, so both builds give bitwise-identical results.

use alloc::vec::Vec;

use crate::real::Real;

use super::graph::LN_EPS;

#[cfg(all(feature = "std", target_arch = "x86_64"))]
fn has_avx2() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

macro_rules! multiversion {
    ($(#[$m:meta])* pub(crate) fn $name:ident<R: Real>($($arg:ident : $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        pub(crate) fn $name<R: Real>($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn generic<R: Real>($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(all(feature = "std", target_arch = "x86_64"))]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide<R: Real>($($arg: $ty),*) $(-> $ret)? {
                    generic($($arg),*)
                }
                if has_avx2() {
                    // SAFETY: the CPU supports the enabled features.
                    return unsafe { wide($($arg),*) };
                }
            }
            generic($($arg),*)
        }
    };
}

#[inline(always)]
fn gelu_cdf<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    half * (R::ONE + (x * R::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf_fast())
}

/// Sum with eight interleaved accumulators (vectorizes, fixed order).
#[inline(always)]
pub(crate) fn lane_sum<R: Real>(v: &[R]) -> R {
    let mut acc = [R::ZERO; 8];
    let chunks = v.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &x in rest {
        s += x;
    }
    s
}

#[inline(always)]
pub(crate) fn lane_dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

multiversion! {
    /// Exact-form GELU `x * Phi(x)`.
    pub(crate) fn gelu_forward<R: Real>(x: &[R]) -> Vec<R> {
        x.iter().map(|&v| v * gelu_cdf(v)).collect()
    }
}

multiversion! {
    /// `dx += dy * GELU'(x)`.
    pub(crate) fn gelu_backward<R: Real>(dx: &mut [R], dy: &[R], x: &[R]) {
        let inv_sqrt_2pi = R::from_f64(0.398_942_280_401_432_7);
        let half = R::from_f64(0.5);
        for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
            let pdf = inv_sqrt_2pi * (-(half * v * v)).exp_fast();
            *d += g * (gelu_cdf(v) + v * pdf);
        }
    }
}

multiversion! {
    /// Normalizes rows of length `len` in place; returns per-row 1/std.
    pub(crate) fn normalize_rows<R: Real>(data: &mut [R], len: usize) -> Vec<R> {
        let eps = R::from_f64(LN_EPS);
        let n = R::from_usize(len);
        data.chunks_mut(len)
            .map(|row| {
                let mean = lane_sum(row) / n;
                row.iter_mut().for_each(|v| *v -= mean);
                let var = lane_dot(row, row) / n;
                let inv = R::ONE / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v *= inv);
                inv
            })
            .collect()
    }
}

multiversion! {
    /// Layer-norm input gradient from the gradient w.r.t. the normalized values.
    pub(crate) fn normalize_rows_backward<R: Real>(dxhat: &[R], xhat: &[R], inv: &[R], len: usize, out: &mut [R]) {
        let n = R::from_usize(len);
        for (r, &inv_r) in inv.iter().enumerate() {
            let s = r * len;
            let dh = &dxhat[s..s + len];
            let xh = &xhat[s..s + len];
            let mean_d = lane_sum(dh) / n;
            let mean_dx = lane_dot(dh, xh) / n;
            for ((o, &d), &x) in out[s..s + len].iter_mut().zip(dh).zip(xh) {
                *o += inv_r * (d - mean_d - x * mean_dx);
            }
        }
    }
}

multiversion! {
    /// Row softmax in place; `fast` selects [`Real::exp_fast`].
    pub(crate) fn softmax_rows<R: Real>(data: &mut [R], len: usize, fast: bool) {
        for row in data.chunks_mut(len) {
            let mut m = [row[0]; 8];
            let chunks = row.chunks_exact(8);
            let rest = chunks.remainder();
            for c in chunks {
                for i in 0..8 {
                    m[i] = if c[i] > m[i] { c[i] } else { m[i] };
                }
            }
            let max = rest.iter().copied().fold(m.iter().copied().fold(row[0], R::max), R::max);
            if fast {
                row.iter_mut().for_each(|v| *v = (*v - max).exp_fast());
            } else {
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
            }
            let inv = R::ONE / lane_sum(row);
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

multiversion! {
    /// In-place softmax backward: `dp <- p * (dp - <dp, p>)` per row.
    pub(crate) fn softmax_rows_backward<R: Real>(dp: &mut [R], p: &[R], len: usize) {
        for (drow, prow) in dp.chunks_mut(len).zip(p.chunks(len)) {
            let dot = lane_dot(drow, prow);
            for (d, &pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - dot);
            }
        }
    }
}
