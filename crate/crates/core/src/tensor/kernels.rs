//! Matrix-multiply kernels.
//!
//! All variants accumulate into `c` (callers zero the output first when they
//! want a plain product). The `f32` path dispatches once per process to an
//! AVX-512 or AVX2 microkernel when the CPU supports it; every other element
//! type uses the generic loop. Each kernel has a fixed per-element reduction
//! order, so results are reproducible run-to-run on the same machine.

use super::Scalar;
use std::any::TypeId;

#[derive(Clone, Copy, PartialEq, Debug)]
enum Isa {
    Avx512,
    Avx2,
    Generic,
}

fn isa() -> Isa {
    use std::sync::OnceLock;
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
        Isa::Generic
    })
}

fn as_f32<T: 'static>(s: &[T]) -> Option<&[f32]> {
    if TypeId::of::<T>() == TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts(s.as_ptr() as *const f32, s.len()) })
    } else {
        None
    }
}

fn as_f32_mut<T: 'static>(s: &mut [T]) -> Option<&mut [f32]> {
    if TypeId::of::<T>() == TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut f32, s.len()) })
    } else {
        None
    }
}

/// c[m x n] += a[m x k] * b[k x n]
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if let (Some(af), Some(bf)) = (as_f32(a), as_f32(b)) {
        let cf = as_f32_mut(c).unwrap();
        match isa() {
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => unsafe { gemm_f32_avx512(af, bf, cf, m, k, n) },
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => unsafe { gemm_f32_avx2(af, bf, cf, m, k, n) },
            _ => gemm_generic(af, bf, cf, m, k, n),
        }
        return;
    }
    gemm_generic(a, b, c, m, k, n);
}

/// Above this much multiply work, transposing an operand and running the
/// register-tiled nn kernel beats the native strided paths.
const TRANSPOSE_WORK_THRESHOLD: usize = 1 << 21;

/// c[k x n] += a[m x k]^T * b[m x n]
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m * k * n >= TRANSPOSE_WORK_THRESHOLD {
        let at = transpose(a, m, k);
        gemm_nn(&at, b, c, k, m, n);
        return;
    }
    if let (Some(af), Some(bf)) = (as_f32(a), as_f32(b)) {
        let cf = as_f32_mut(c).unwrap();
        if isa() == Isa::Avx512 {
            #[cfg(target_arch = "x86_64")]
            unsafe {
                gemm_tn_f32_avx512(af, bf, cf, m, k, n);
                return;
            }
        }
        gemm_tn_generic(af, bf, cf, m, k, n);
        return;
    }
    gemm_tn_generic(a, b, c, m, k, n);
}

/// c[m x n] += a[m x k] * b[n x k]^T
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= TRANSPOSE_WORK_THRESHOLD {
        let bt = transpose(b, n, k);
        gemm_nn(a, &bt, c, m, k, n);
        return;
    }
    if let (Some(af), Some(bf)) = (as_f32(a), as_f32(b)) {
        let cf = as_f32_mut(c).unwrap();
        if isa() == Isa::Avx512 {
            #[cfg(target_arch = "x86_64")]
            unsafe {
                gemm_nt_f32_avx512(af, bf, cf, m, k, n);
                return;
            }
        }
        gemm_nt_generic(af, bf, cf, m, k, n);
        return;
    }
    gemm_nt_generic(a, b, c, m, k, n);
}

fn gemm_tn_generic<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

fn gemm_nt_generic<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for l in 0..k {
                s = arow[l].mul_add(brow[l], s);
            }
            c[i * n + j] += s;
        }
    }
}

/// a^T*b accumulation: stream rows of a and b, broadcast a elements.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_tn_f32_avx512(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    unsafe {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        let full = n / 16 * 16;
        for l in 0..m {
            let arow = ap.add(l * k);
            let brow = bp.add(l * n);
            for i in 0..k {
                let av = _mm512_set1_ps(*arow.add(i));
                let crow = cp.add(i * n);
                let mut j = 0;
                while j < full {
                    let cv = _mm512_loadu_ps(crow.add(j));
                    let bv = _mm512_loadu_ps(brow.add(j));
                    _mm512_storeu_ps(crow.add(j), _mm512_fmadd_ps(av, bv, cv));
                    j += 16;
                }
                if j < n {
                    let mask: __mmask16 = (1u16 << (n - j)) - 1;
                    let cv = _mm512_maskz_loadu_ps(mask, crow.add(j));
                    let bv = _mm512_maskz_loadu_ps(mask, brow.add(j));
                    _mm512_mask_storeu_ps(crow.add(j), mask, _mm512_fmadd_ps(av, bv, cv));
                }
            }
        }
    }
}

/// a*b^T accumulation: row-row dot products, vectorized over k.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_nt_f32_avx512(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    unsafe {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let full = k / 16 * 16;
        let tail_mask: __mmask16 = if k > full { (1u16 << (k - full)) - 1 } else { 0 };
        for i in 0..m {
            let arow = ap.add(i * k);
            for j in 0..n {
                let brow = bp.add(j * k);
                let mut acc = _mm512_setzero_ps();
                let mut l = 0;
                while l < full {
                    let av = _mm512_loadu_ps(arow.add(l));
                    let bv = _mm512_loadu_ps(brow.add(l));
                    acc = _mm512_fmadd_ps(av, bv, acc);
                    l += 16;
                }
                if tail_mask != 0 {
                    let av = _mm512_maskz_loadu_ps(tail_mask, arow.add(l));
                    let bv = _mm512_maskz_loadu_ps(tail_mask, brow.add(l));
                    acc = _mm512_fmadd_ps(av, bv, acc);
                }
                c[i * n + j] += _mm512_reduce_add_ps(acc);
            }
        }
    }
}

/// Row-major transpose of an r x s matrix into a new s x r buffer.
pub fn transpose<T: Scalar>(x: &[T], r: usize, s: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), r * s);
    let mut out = vec![T::ZERO; r * s];
    for i in 0..r {
        for j in 0..s {
            out[j * r + i] = x[i * s + j];
        }
    }
    out
}

fn gemm_generic<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_f32_avx2(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    // j-vectorized ikj; the compiler turns the inner mul_add loop into FMA.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

/// Register-tiled 4x32 microkernel with 4x16 and masked edges.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_f32_avx512(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;

    let ap = a.as_ptr();
    let bp = b.as_ptr();
    let cp = c.as_mut_ptr();

    unsafe {
        let mut i = 0;
        while i < m {
            let rows = (m - i).min(4);
            let mut j = 0;
            while j < n {
                let cols = n - j;
                if cols >= 32 {
                    // rows x 32 block, 2 accumulators per row
                    let mut acc = [[_mm512_setzero_ps(); 2]; 4];
                    for l in 0..k {
                        let b0 = _mm512_loadu_ps(bp.add(l * n + j));
                        let b1 = _mm512_loadu_ps(bp.add(l * n + j + 16));
                        for r in 0..rows {
                            let av = _mm512_set1_ps(*ap.add((i + r) * k + l));
                            acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
                            acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
                        }
                    }
                    for r in 0..rows {
                        let p = cp.add((i + r) * n + j);
                        _mm512_storeu_ps(p, _mm512_add_ps(_mm512_loadu_ps(p), acc[r][0]));
                        let p1 = p.add(16);
                        _mm512_storeu_ps(p1, _mm512_add_ps(_mm512_loadu_ps(p1), acc[r][1]));
                    }
                    j += 32;
                } else if cols >= 16 {
                    let mut acc = [_mm512_setzero_ps(); 4];
                    for l in 0..k {
                        let b0 = _mm512_loadu_ps(bp.add(l * n + j));
                        for r in 0..rows {
                            let av = _mm512_set1_ps(*ap.add((i + r) * k + l));
                            acc[r] = _mm512_fmadd_ps(av, b0, acc[r]);
                        }
                    }
                    for r in 0..rows {
                        let p = cp.add((i + r) * n + j);
                        _mm512_storeu_ps(p, _mm512_add_ps(_mm512_loadu_ps(p), acc[r]));
                    }
                    j += 16;
                } else {
                    let mask: __mmask16 = (1u16 << cols) - 1;
                    let mut acc = [_mm512_setzero_ps(); 4];
                    for l in 0..k {
                        let b0 = _mm512_maskz_loadu_ps(mask, bp.add(l * n + j));
                        for r in 0..rows {
                            let av = _mm512_set1_ps(*ap.add((i + r) * k + l));
                            acc[r] = _mm512_fmadd_ps(av, b0, acc[r]);
                        }
                    }
                    for r in 0..rows {
                        let p = cp.add((i + r) * n + j);
                        let prev = _mm512_maskz_loadu_ps(mask, p);
                        _mm512_mask_storeu_ps(p, mask, _mm512_add_ps(prev, acc[r]));
                    }
                    j = n;
                }
            }
            i += rows;
        }
    }
}


/// Whether the fast f32 vector paths are available on this CPU.
pub fn has_avx512() -> bool {
    isa() == Isa::Avx512
}

#[cfg(target_arch = "x86_64")]
mod avx512_math {
    use std::arch::x86_64::*;

    /// Vector e^x: same polynomial as [`crate::tensor::exp_f32`].
    #[inline(always)]
    pub unsafe fn exp_ps(x: __m512) -> __m512 {
        unsafe {
            let lo = _mm512_set1_ps(-87.336_54);
            let hi = _mm512_set1_ps(88.722_83);
            let x = _mm512_max_ps(lo, _mm512_min_ps(hi, x));
            let log2e = _mm512_set1_ps(std::f32::consts::LOG2_E);
            let kf = _mm512_roundscale_ps::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(
                _mm512_mul_ps(x, log2e),
            );
            let ln2_hi = _mm512_set1_ps(0.693_359_4);
            let ln2_lo = _mm512_set1_ps(-2.121_944_4e-4);
            let r = _mm512_fnmadd_ps(kf, ln2_lo, _mm512_fnmadd_ps(kf, ln2_hi, x));
            let mut p = _mm512_set1_ps(1.987_569_1e-4);
            p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.398_199_9e-3));
            p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.333_452e-3));
            p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.166_579_5e-2));
            p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.666_666_6e-1));
            p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5e-1));
            let poly = _mm512_fmadd_ps(_mm512_mul_ps(p, r), r, _mm512_add_ps(r, _mm512_set1_ps(1.0)));
            let k = _mm512_cvtps_epi32(kf);
            let two_k = _mm512_castsi512_ps(_mm512_slli_epi32::<23>(_mm512_add_epi32(
                k,
                _mm512_set1_epi32(127),
            )));
            _mm512_mul_ps(two_k, poly)
        }
    }

    /// tanh(x) = 1 - 2 / (e^(2x) + 1)
    #[inline(always)]
    pub unsafe fn tanh_ps(x: __m512) -> __m512 {
        unsafe {
            let one = _mm512_set1_ps(1.0);
            let e = exp_ps(_mm512_add_ps(x, x));
            _mm512_sub_ps(one, _mm512_div_ps(_mm512_set1_ps(2.0), _mm512_add_ps(e, one)))
        }
    }
}

/// In-place stabilized softmax over rows (f32 AVX-512 path).
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
pub unsafe fn softmax_rows_f32_avx512(data: &mut [f32], rows: usize, cols: usize) {
    use std::arch::x86_64::*;
    unsafe {
        let full = cols / 16 * 16;
        let mask: __mmask16 = if cols > full { (1u16 << (cols - full)) - 1 } else { 0 };
        for r in 0..rows {
            let row = data.as_mut_ptr().add(r * cols);
            let mut vmax = _mm512_set1_ps(f32::NEG_INFINITY);
            let mut j = 0;
            while j < full {
                vmax = _mm512_max_ps(vmax, _mm512_loadu_ps(row.add(j)));
                j += 16;
            }
            let mut m = _mm512_reduce_max_ps(vmax);
            if mask != 0 {
                let tail = _mm512_mask_loadu_ps(_mm512_set1_ps(f32::NEG_INFINITY), mask, row.add(j));
                m = m.max(_mm512_reduce_max_ps(tail));
            }
            let vm = _mm512_set1_ps(m);
            let mut vsum = _mm512_setzero_ps();
            j = 0;
            while j < full {
                let e = avx512_math::exp_ps(_mm512_sub_ps(_mm512_loadu_ps(row.add(j)), vm));
                _mm512_storeu_ps(row.add(j), e);
                vsum = _mm512_add_ps(vsum, e);
                j += 16;
            }
            let mut sum = _mm512_reduce_add_ps(vsum);
            if mask != 0 {
                let x = _mm512_maskz_loadu_ps(mask, row.add(j));
                let e = avx512_math::exp_ps(_mm512_sub_ps(x, vm));
                _mm512_mask_storeu_ps(row.add(j), mask, e);
                sum += _mm512_reduce_add_ps(_mm512_maskz_mov_ps(mask, e));
            }
            let inv = _mm512_set1_ps(1.0 / sum);
            j = 0;
            while j < full {
                _mm512_storeu_ps(row.add(j), _mm512_mul_ps(_mm512_loadu_ps(row.add(j)), inv));
                j += 16;
            }
            if mask != 0 {
                let v = _mm512_maskz_loadu_ps(mask, row.add(j));
                _mm512_mask_storeu_ps(row.add(j), mask, _mm512_mul_ps(v, inv));
            }
        }
    }
}

/// GELU (tanh form) forward, f32 AVX-512 path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
pub unsafe fn gelu_f32_avx512(x: &[f32], out: &mut [f32]) {
    use std::arch::x86_64::*;
    unsafe {
        let c = _mm512_set1_ps(0.797_884_56);
        let a = _mm512_set1_ps(0.044715);
        let half = _mm512_set1_ps(0.5);
        let one = _mm512_set1_ps(1.0);
        let n = x.len();
        let full = n / 16 * 16;
        let mut i = 0;
        while i < full {
            let xv = _mm512_loadu_ps(x.as_ptr().add(i));
            let x3 = _mm512_mul_ps(_mm512_mul_ps(xv, xv), xv);
            let inner = _mm512_mul_ps(c, _mm512_fmadd_ps(a, x3, xv));
            let t = avx512_math::tanh_ps(inner);
            let y = _mm512_mul_ps(_mm512_mul_ps(half, xv), _mm512_add_ps(one, t));
            _mm512_storeu_ps(out.as_mut_ptr().add(i), y);
            i += 16;
        }
        for j in full..n {
            out[j] = crate::tensor::exp_f32_gelu(x[j]);
        }
    }
}

/// GELU backward `dst += g * gelu'(x)`, f32 AVX-512 path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
pub unsafe fn gelu_bwd_f32_avx512(x: &[f32], g: &[f32], dst: &mut [f32]) {
    use std::arch::x86_64::*;
    unsafe {
        let c = _mm512_set1_ps(0.797_884_56);
        let a = _mm512_set1_ps(0.044715);
        let a3 = _mm512_set1_ps(3.0 * 0.044715);
        let half = _mm512_set1_ps(0.5);
        let one = _mm512_set1_ps(1.0);
        let n = x.len();
        let full = n / 16 * 16;
        let mut i = 0;
        while i < full {
            let xv = _mm512_loadu_ps(x.as_ptr().add(i));
            let x2 = _mm512_mul_ps(xv, xv);
            let inner = _mm512_mul_ps(c, _mm512_fmadd_ps(a, _mm512_mul_ps(x2, xv), xv));
            let t = avx512_math::tanh_ps(inner);
            let sech2 = _mm512_fnmadd_ps(t, t, one);
            let dinner = _mm512_mul_ps(c, _mm512_fmadd_ps(a3, x2, one));
            let dy = _mm512_fmadd_ps(
                _mm512_mul_ps(_mm512_mul_ps(half, xv), sech2),
                dinner,
                _mm512_mul_ps(half, _mm512_add_ps(one, t)),
            );
            let gv = _mm512_loadu_ps(g.as_ptr().add(i));
            let dv = _mm512_loadu_ps(dst.as_ptr().add(i));
            _mm512_storeu_ps(dst.as_mut_ptr().add(i), _mm512_fmadd_ps(gv, dy, dv));
            i += 16;
        }
        for j in full..n {
            let xi = x[j];
            let inner = 0.797_884_56 * (xi + 0.044715 * xi * xi * xi);
            let t = crate::tensor::Scalar::tanh_fast(inner);
            let dinner = 0.797_884_56 * (1.0 + 3.0 * 0.044715 * xi * xi);
            let dy = 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner;
            dst[j] += g[j] * dy;
        }
    }
}
