//! Small numerical kernels shared by the modules: libm-backed elementary
//! functions, order-stable reductions, Gauss–Legendre rules and tiny dense
//! linear algebra.

use alloc::vec;
use alloc::vec::Vec;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn expm1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sqrt(norm_sq(a))
}

/// Euclidean distance between two vectors of equal length.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `(e^{r h} − 1) / r`, continuous at `r = 0`.
#[inline]
pub fn growth_integral(rate: f64, h: f64) -> f64 {
    if rate == 0.0 {
        h
    } else {
        expm1(rate * h) / rate
    }
}

const PAIRWISE_BLOCK: usize = 16;

/// Pairwise (cascade) summation. The split points depend only on the length,
/// so the result is independent of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..n` without materialising the terms.
pub fn pairwise_sum_by(n: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn go(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, f)
}

/// Sample mean and unbiased sample variance with pairwise reductions.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = pairwise_sum_by(n, &|i| {
        let d = values[i] - mean;
        d * d
    });
    (mean, ss / (n - 1) as f64)
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and its derivative.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss–Legendre rule mapped onto an arbitrary interval.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(points: usize) -> Self {
        let (nodes, weights) = gauss_legendre(points);
        Self { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        half * self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(mid + half * x)).sum::<f64>()
    }
}

/// Cholesky factor of a symmetric positive definite `p × p` row-major matrix.
/// Returns `None` if a pivot is not strictly positive and finite.
pub fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * p + k] * l[j * p + k]).sum();
            if i == j {
                let d = a[i * p + i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i * p + i] = sqrt(d);
            } else {
                l[i * p + j] = (a[i * p + j] - s) / l[j * p + j];
            }
        }
    }
    Some(l)
}

/// Solves `L L' x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i * p + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k * p + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * p + i];
    }
    x
}

/// Least squares `min |A z − b|` for `A` given column by column, via
/// Householder QR. Returns `None` when the columns are numerically dependent.
pub fn least_squares(columns: &[&[f64]], b: &[f64]) -> Option<Vec<f64>> {
    let m = b.len();
    let k = columns.len();
    if k == 0 {
        return Some(Vec::new());
    }
    if k > m {
        return None;
    }
    // Column-major working copy.
    let mut a: Vec<f64> = columns.iter().flat_map(|c| c.iter().copied()).collect();
    let mut rhs = b.to_vec();
    let scale = columns.iter().map(|c| norm(c)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..k {
        let col = &a[j * m..(j + 1) * m];
        let alpha = norm(&col[j..]);
        if alpha <= 1e-13 * scale {
            return None;
        }
        let sign = if col[j] >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = col[j..].to_vec();
        v[0] += sign * alpha;
        let vnorm_sq = norm_sq(&v);
        // Apply H = I − 2 v v'/|v|² to the remaining columns and the rhs.
        for jj in j..k {
            let c = &mut a[jj * m..(jj + 1) * m];
            let f = 2.0 * dot(&v, &c[j..]) / vnorm_sq;
            for (ci, vi) in c[j..].iter_mut().zip(&v) {
                *ci -= f * vi;
            }
        }
        let f = 2.0 * dot(&v, &rhs[j..]) / vnorm_sq;
        for (ri, vi) in rhs[j..].iter_mut().zip(&v) {
            *ri -= f * vi;
        }
    }
    let mut z = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|jj| a[jj * m + i] * z[jj]).sum();
        z[i] = (rhs[i] - s) / a[i * m + i];
    }
    Some(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(8);
        // Degree 15 is the highest exact degree for 8 points.
        let v = rule.integrate(0.0, 2.0, |x| libm::pow(x, 15.0));
        assert!((v - libm::pow(2.0, 16.0) / 16.0).abs() < 1e-9);
        let (_, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 4950.0);
        assert_eq!(pairwise_sum_by(100, &|i| i as f64), 4950.0);
    }

    #[test]
    fn least_squares_recovers_exact_solution() {
        let c1 = [1.0, 0.0, 1.0];
        let c2 = [0.0, 1.0, 1.0];
        let b = [2.0, 3.0, 5.0];
        let z = least_squares(&[&c1, &c2], &b).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-14 && (z[1] - 3.0).abs() < 1e-14);
        assert!(least_squares(&[&c1, &c1], &b).is_none());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, 2, &[6.0, 5.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn growth_integral_is_continuous_at_zero() {
        assert_eq!(growth_integral(0.0, 0.5), 0.5);
        assert!((growth_integral(1e-12, 0.5) - 0.5).abs() < 1e-12);
    }
}
