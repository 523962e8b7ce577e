//! Independent numerical oracles for the `devsafe` test suites.
//!
//! Everything here works on plain slices and `Vec<f64>`; the crate has no
//! dependency on `devsafe` so an oracle can never share a code path with the
//! implementation it checks.

use std::fmt;

/// Outcome of comparing a candidate value against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub reference: f64,
    pub candidate: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Relative comparison; the denominator is floored at 1 so values near
    /// zero are compared absolutely.
    pub fn relative(quantity: impl Into<String>, reference: f64, candidate: f64, tolerance: f64) -> Self {
        let abs_err = (reference - candidate).abs();
        let rel_err = abs_err / reference.abs().max(1.0);
        OracleReport {
            quantity: quantity.into(),
            reference,
            candidate,
            abs_err,
            rel_err,
            tolerance,
            pass: rel_err <= tolerance,
        }
    }

    pub fn absolute(quantity: impl Into<String>, reference: f64, candidate: f64, tolerance: f64) -> Self {
        let abs_err = (reference - candidate).abs();
        let rel_err = abs_err / reference.abs().max(f64::MIN_POSITIVE);
        OracleReport {
            quantity: quantity.into(),
            reference,
            candidate,
            abs_err,
            rel_err,
            tolerance,
            pass: abs_err <= tolerance,
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: ref={:.6e} got={:.6e} abs={:.3e} rel={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.quantity,
            self.reference,
            self.candidate,
            self.abs_err,
            self.rel_err,
            self.tolerance
        )
    }
}

/// Central finite-difference gradient, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, p: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = p.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    out
}

/// Relative error `‖a − b‖ / max(‖b‖, floor)` between two vectors.
pub fn vec_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / nb.max(floor)
}

/// Neumaier compensated summation.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Double-double accumulator (about 106 bits of significand) built from
/// error-free transformations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl DoubleDouble {
    pub fn add_f64(self, b: f64) -> Self {
        let (s, e) = two_sum(self.hi, b);
        let (hi, lo) = quick_two_sum(s, e + self.lo);
        DoubleDouble { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Sum with a double-double accumulator.
pub fn dd_sum(values: &[f64]) -> f64 {
    values.iter().fold(DoubleDouble::default(), |acc, &v| acc.add_f64(v)).to_f64()
}

/// `log Σ exp(x_i)` with a shifted, double-double accumulated sum.
pub fn logsumexp_dd(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let terms: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    m + dd_sum(&terms).ln()
}

/// Exhaustive argmax; ties go to the lowest index.
pub fn argmax_scan(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..xs.len() {
        match best {
            None => best = Some(i),
            Some(b) if xs[i] > xs[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Closed form of `u_{t+1} = (1−γ)u_t + γ g`: returns `g + (1−γ)^t (u0 − g)`.
pub fn geometric_recursion(u0: f64, target: f64, gamma: f64, t: u32) -> f64 {
    target + (1.0 - gamma).powi(t as i32) * (u0 - target)
}

/// Row-major dense matrix used by the linear-algebra oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Dense { rows, cols, data }
    }

    /// Build from columns of equal length.
    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let ncols = cols.len();
        let nrows = cols.first().map_or(0, |c| c.len());
        let mut data = vec![0.0; nrows * ncols];
        for (j, c) in cols.iter().enumerate() {
            assert_eq!(c.len(), nrows);
            for i in 0..nrows {
                data[i * ncols + j] = c[i];
            }
        }
        Dense::new(nrows, ncols, data)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Dense {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Dense::new(self.cols, self.rows, data)
    }
}

/// All singular values (descending) by one-sided Jacobi rotations on the
/// columns. Iterates until every column pair is orthogonal to 1e-15 relative.
pub fn jacobi_singular_values(a: &Dense) -> Vec<f64> {
    let a = if a.rows < a.cols { a.transpose() } else { a.clone() };
    let (n, k) = (a.rows, a.cols);
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let x = cols[p][i];
                    let y = cols[q][i];
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Smallest singular value of a dense matrix (Jacobi SVD).
pub fn dense_sigma_min(a: &Dense) -> f64 {
    jacobi_singular_values(a).last().copied().unwrap_or(0.0)
}

/// Eigenvalues (ascending) of a symmetric matrix by the cyclic Jacobi method.
pub fn jacobi_sym_eigenvalues(a: &Dense) -> Vec<f64> {
    assert_eq!(a.rows, a.cols, "matrix must be square");
    let n = a.rows;
    let mut m = a.data.clone();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[idx(i, j)] * m[idx(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| m[idx(i, i)] * m[idx(i, i)]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = m[idx(r, p)];
                    let arq = m[idx(r, q)];
                    m[idx(r, p)] = c * arp - s * arq;
                    m[idx(r, q)] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = m[idx(p, r)];
                    let aqr = m[idx(q, r)];
                    m[idx(p, r)] = c * apr - s * aqr;
                    m[idx(q, r)] = s * apr + c * aqr;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[idx(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// `AᵀA` for a dense matrix.
pub fn gram(a: &Dense) -> Dense {
    let k = a.cols;
    let mut g = vec![0.0; k * k];
    for p in 0..k {
        for q in 0..k {
            g[p * k + q] = (0..a.rows).map(|i| a.get(i, p) * a.get(i, q)).sum();
        }
    }
    Dense::new(k, k, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_exact_on_quadratic() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1];
        let g = finite_diff_grad(f, &[0.7, -1.3], 1e-3);
        assert!((g[0] - (6.0 * 0.7 + 2.0 * 1.3)).abs() < 1e-10);
        assert!((g[1] - (-2.0 * 0.7 + 1.0)).abs() < 1e-10);
    }

    #[test]
    fn fd_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compensated_cancellation() {
        assert_eq!(compensated_sum(&[1e16, 1.0, -1e16]), 1.0);
        assert_eq!(compensated_sum(&[]), 0.0);
        assert_eq!(dd_sum(&[1e16, 1.0, -1e16]), 1.0);
    }

    #[test]
    fn compensated_matches_double_double() {
        let mut s = 0x1234_5678_9abc_def0u64;
        let vals: Vec<f64> = (0..1000)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 10f64.powi((s % 20) as i32 - 10)
            })
            .collect();
        let a = compensated_sum(&vals);
        let b = dd_sum(&vals);
        assert!((a - b).abs() <= f64::EPSILON * b.abs());
    }

    #[test]
    fn sigma_min_identity_and_rank_deficient() {
        let id = Dense::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((dense_sigma_min(&id) - 1.0).abs() < 1e-14);
        let rd = Dense::from_columns(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]);
        assert!(dense_sigma_min(&rd).abs() < 1e-10);
    }

    #[test]
    fn svd_and_gram_eigen_agree() {
        let a = Dense::from_columns(&[vec![1.0, 0.5, -0.2, 0.3], vec![0.1, 2.0, 0.7, -1.0], vec![0.0, 0.3, 1.5, 0.2]]);
        let s = dense_sigma_min(&a);
        let ev = jacobi_sym_eigenvalues(&gram(&a));
        assert!((s * s - ev[0]).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax_scan(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax_scan(&[0.1, 0.9, 0.2]), Some(1));
        assert_eq!(argmax_scan(&[]), None);
    }

    #[test]
    fn logsumexp_equal_entries() {
        let v = logsumexp_dd(&[2.0; 6]);
        assert!((v - (2.0 + 6f64.ln())).abs() < 1e-15);
    }
}
