//! Dense kernels shared by forward and backward passes.

use num_complex::Complex64;

use crate::error::{AutodiffError, Result};

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn cget(d: &[f64], idx: usize) -> Complex64 {
    Complex64::new(d[2 * idx], d[2 * idx + 1])
}

#[inline]
pub(crate) fn cadd(d: &mut [f64], idx: usize, v: Complex64) {
    d[2 * idx] += v.re;
    d[2 * idx + 1] += v.im;
}

#[inline]
pub(crate) fn cset(d: &mut [f64], idx: usize, v: Complex64) {
    d[2 * idx] = v.re;
    d[2 * idx + 1] = v.im;
}

/// Complex `out[m,n] += op(a)[m,k] · op(b)[k,n]`, where `op` is identity or
/// conjugate transpose depending on the flags. Inputs are interleaved pairs.
pub(crate) fn cmatmul_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    a_herm: bool,
    b_herm: bool,
) {
    for i in 0..m {
        for p in 0..k {
            let av = if a_herm {
                cget(a, p * m + i).conj()
            } else {
                cget(a, i * k + p)
            };
            if av.re == 0.0 && av.im == 0.0 {
                continue;
            }
            for j in 0..n {
                let bv = if b_herm {
                    cget(b, j * k + p).conj()
                } else {
                    cget(b, p * n + j)
                };
                cadd(out, i * n + j, av * bv);
            }
        }
    }
}

/// Inverse of a `c × c` complex matrix by LU with partial pivoting.
/// Returns the inverse and a 1-norm condition estimate `‖A‖₁‖A⁻¹‖₁`.
pub(crate) fn cinverse(a: &[Complex64], c: usize) -> Result<(Vec<Complex64>, f64)> {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..c).collect();
    for col in 0..c {
        let mut piv = col;
        let mut best = lu[col * c + col].norm();
        for r in col + 1..c {
            let v = lu[r * c + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return Err(AutodiffError::Singular { cond: f64::INFINITY });
        }
        if piv != col {
            for j in 0..c {
                lu.swap(col * c + j, piv * c + j);
            }
            perm.swap(col, piv);
        }
        let d = lu[col * c + col];
        for r in col + 1..c {
            let f = lu[r * c + col] / d;
            lu[r * c + col] = f;
            for j in col + 1..c {
                let u = lu[col * c + j];
                lu[r * c + j] -= f * u;
            }
        }
    }
    let mut inv = vec![Complex64::new(0.0, 0.0); c * c];
    for j in 0..c {
        // solve A x = e_j, with P A = L U
        let mut x = vec![Complex64::new(0.0, 0.0); c];
        for i in 0..c {
            let mut s = if perm[i] == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
            for p in 0..i {
                s -= lu[i * c + p] * x[p];
            }
            x[i] = s;
        }
        for i in (0..c).rev() {
            let mut s = x[i];
            for p in i + 1..c {
                s -= lu[i * c + p] * x[p];
            }
            x[i] = s / lu[i * c + i];
        }
        for i in 0..c {
            inv[i * c + j] = x[i];
        }
    }
    let norm1 = |m: &[Complex64]| {
        (0..c)
            .map(|j| (0..c).map(|i| m[i * c + j].norm()).sum::<f64>())
            .fold(0.0_f64, f64::max)
    };
    let cond = norm1(a) * norm1(&inv);
    Ok((inv, cond))
}
