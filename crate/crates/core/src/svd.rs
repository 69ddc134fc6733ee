//! Singular value decomposition of square complex matrices.
//!
//! One-sided (Hestenes) Jacobi: columns of `A = H V` are rotated pairwise
//! until mutually orthogonal, accumulating the rotations in `V`. The
//! column norms are then the singular values and the normalized columns
//! form `U`. Accurate to working precision for the small `M x M` channel
//! matrices used here.

use num_complex::Complex64;

use crate::complex::CMatrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// `A = U diag(singular) V^H`, singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub singular: Vec<f64>,
    pub v: CMatrix,
}

pub fn svd(a: &CMatrix) -> Result<Svd> {
    let n = a.rows();
    if a.cols() != n || n == 0 {
        return Err(Error::DimensionMismatch {
            op: "svd",
            expected: (n, n),
            found: a.shape(),
        });
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument("svd of non-finite matrix".into()));
    }

    // Column-major working copies make the pair rotations contiguous.
    let mut cols: Vec<Vec<Complex64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<Complex64>> = (0..n)
        .map(|j| {
            let mut e = vec![Complex64::new(0.0, 0.0); n];
            e[j] = Complex64::new(1.0, 0.0);
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|c| c.norm_sqr()).sum();
                let beta: f64 = cols[q].iter().map(|c| c.norm_sqr()).sum();
                let gamma: Complex64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x.conj() * y).sum();
                let g = gamma.norm();
                if g <= f64::EPSILON * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                // Rotate q by the phase of gamma so the pair inner product is
                // real, then apply the real Jacobi rotation that zeroes it.
                let phase = (gamma / g).conj();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, phase, c, s);
                rotate(&mut vcols, p, q, phase, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let scale = norms.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut u_cols: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (pos, &j) in order.iter().enumerate() {
        if norms[j] > scale * 1e-14 {
            u_cols.push(cols[j].iter().map(|&c| c / norms[j]).collect());
        } else {
            u_cols.push(vec![Complex64::new(0.0, 0.0); n]);
            deficient.push(pos);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let u = CMatrix::from_fn(n, n, |i, j| u_cols[j][i]);
    let v = CMatrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    let singular = order.iter().map(|&j| norms[j]).collect();
    Ok(Svd { u, singular, v })
}

fn rotate(cols: &mut [Vec<Complex64>], p: usize, q: usize, phase: Complex64, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let yq = *y * phase;
        let xp = *x;
        *x = xp * c - yq * s;
        *y = xp * s + yq * c;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to
/// all others (Gram-Schmidt over the standard basis).
fn complete_orthonormal(cols: &mut [Vec<Complex64>], missing: &[usize]) {
    let n = cols.len();
    for &m in missing {
        for e in 0..n {
            let mut cand = vec![Complex64::new(0.0, 0.0); n];
            cand[e] = Complex64::new(1.0, 0.0);
            for (j, other) in cols.iter().enumerate() {
                if j == m || (missing.contains(&j) && other.iter().all(|c| c.norm_sqr() == 0.0)) {
                    continue;
                }
                let proj: Complex64 = other.iter().zip(&cand).map(|(o, c)| o.conj() * c).sum();
                for (c, o) in cand.iter_mut().zip(other) {
                    *c -= proj * o;
                }
            }
            let norm = cand.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[m] = cand.into_iter().map(|c| c / norm).collect();
                break;
            }
        }
    }
}
