//! Small dense helpers over row-major slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `A x` for `A` of shape `rows × cols`.
pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|i| dot(&a[i * cols..(i + 1) * cols], x)).collect()
}

/// `Aᵀ y` for `A` of shape `rows × cols`.
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, aij) in out.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
            *o += yi * aij;
        }
    }
    out
}

/// `out += scale · u vᵀ` where `out` is `u.len() × v.len()`.
pub fn add_outer(out: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    debug_assert_eq!(out.len(), u.len() * cols);
    for (i, &ui) in u.iter().enumerate() {
        let s = scale * ui;
        if s == 0.0 {
            continue;
        }
        for (o, &vj) in out[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *o += s * vj;
        }
    }
}

/// `y += a · x`.
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(y: &mut [f64], a: f64) {
    for v in y {
        *v *= a;
    }
}

pub fn is_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Pairwise (fixed-shape tree) summation. The split points depend only on the
/// length, so the result is reproducible bit for bit.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n if n <= 8 => v.iter().sum(),
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}
