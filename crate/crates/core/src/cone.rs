//! Euclidean projection onto closed convex cones in `R^l`.
//!
//! Orthants, rays and the full space have closed forms. A finitely generated
//! cone `{Gλ : λ ≥ 0}` is handled by an active-set nonnegative least squares
//! solve, which terminates exactly in finitely many steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{dot, least_squares, norm, norm_sq};
use crate::{Error, Result};

/// KKT tolerance for the NNLS dual vector, relative to `max(1, |a|)`.
const NNLS_TOL: f64 = 1e-12;
/// NNLS iteration cap per generator.
const NNLS_ITERS_PER_GENERATOR: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum ConeKind {
    FullSpace {
        dim: usize,
    },
    NonnegativeOrthant {
        dim: usize,
    },
    /// `{t d : t ≥ 0}`.
    Ray {
        direction: Vec<f64>,
    },
    /// `{Gλ : λ ≥ 0}` with unit-norm generators.
    FinitelyGenerated {
        generators: Vec<Vec<f64>>,
    },
}

/// A validated closed convex cone.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeSpec {
    kind: ConeKind,
}

impl ConeSpec {
    pub fn full_space(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { kind: ConeKind::FullSpace { dim } })
    }

    pub fn nonnegative_orthant(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { kind: ConeKind::NonnegativeOrthant { dim } })
    }

    pub fn ray(direction: Vec<f64>) -> Result<Self> {
        check_dim(direction.len())?;
        check_vector("direction", &direction)?;
        Ok(Self { kind: ConeKind::Ray { direction } })
    }

    /// Generators are normalised to unit length; they may be linearly dependent.
    pub fn finitely_generated(generators: Vec<Vec<f64>>) -> Result<Self> {
        let first = generators.first().ok_or_else(|| Error::invalid("generators", "at least one generator is required"))?;
        let dim = first.len();
        check_dim(dim)?;
        let mut unit = Vec::with_capacity(generators.len());
        for g in generators {
            if g.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: g.len() });
            }
            check_vector("generators", &g)?;
            let n = norm(&g);
            unit.push(g.into_iter().map(|x| x / n).collect());
        }
        Ok(Self { kind: ConeKind::FinitelyGenerated { generators: unit } })
    }

    pub fn kind(&self) -> &ConeKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ConeKind::FullSpace { dim } | ConeKind::NonnegativeOrthant { dim } => *dim,
            ConeKind::Ray { direction } => direction.len(),
            ConeKind::FinitelyGenerated { generators } => generators[0].len(),
        }
    }

    /// The Euclidean-nearest point of the cone to `a`.
    pub fn project(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check_len(a)?;
        Ok(match &self.kind {
            ConeKind::FullSpace { .. } => a.to_vec(),
            ConeKind::NonnegativeOrthant { .. } => a.iter().map(|&x| x.max(0.0)).collect(),
            ConeKind::Ray { direction } => {
                let t = dot(a, direction).max(0.0) / norm_sq(direction);
                direction.iter().map(|d| t * d).collect()
            }
            ConeKind::FinitelyGenerated { generators } => {
                let weights = nnls(generators, a)?;
                let mut p = vec![0.0; a.len()];
                for (g, w) in generators.iter().zip(&weights) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi += w * gi;
                    }
                }
                p
            }
        })
    }

    /// `|a − project(a)| ≤ tol`.
    pub fn contains(&self, a: &[f64], tol: f64) -> Result<bool> {
        let r = self.polar_residual(a)?;
        Ok(norm(&r) <= tol)
    }

    /// `a − project(a)`, the component of `a` in the polar cone.
    pub fn polar_residual(&self, a: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(a)?;
        Ok(a.iter().zip(&p).map(|(x, y)| x - y).collect())
    }

    fn check_len(&self, a: &[f64]) -> Result<()> {
        let expected = self.dim();
        if a.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: a.len() });
        }
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::invalid("dim", "cone dimension must be at least 1"));
    }
    Ok(())
}

fn check_vector(name: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(name, "entries must be finite"));
    }
    if norm(v) <= 0.0 {
        return Err(Error::invalid(name, "vectors must be nonzero"));
    }
    Ok(())
}

/// Lawson–Hanson active-set solve of `min_{λ ≥ 0} |a − Gλ|²`, where the
/// columns of `G` are `generators`.
fn nnls(generators: &[Vec<f64>], a: &[f64]) -> Result<Vec<f64>> {
    let n = generators.len();
    let tol = NNLS_TOL * norm(a).max(1.0);
    let max_iter = NNLS_ITERS_PER_GENERATOR * n;

    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let mut iterations = 0;

    let residual = |x: &[f64]| -> Vec<f64> {
        let mut r = a.to_vec();
        for (g, w) in generators.iter().zip(x) {
            for (ri, gi) in r.iter_mut().zip(g) {
                *ri -= w * gi;
            }
        }
        r
    };

    loop {
        let r = residual(&x);
        let w: Vec<f64> = generators.iter().map(|g| dot(g, &r)).collect();
        // Candidates ordered by dual value; skip columns that add no new direction.
        let mut candidates: Vec<usize> = (0..n).filter(|&j| !passive[j] && w[j] > tol).collect();
        if candidates.is_empty() {
            return Ok(x);
        }
        candidates.sort_by(|&i, &j| w[j].total_cmp(&w[i]));
        let entering = candidates.into_iter().find(|&j| {
            let cols: Vec<&[f64]> = (0..n).filter(|&k| passive[k]).map(|k| generators[k].as_slice()).chain([generators[j].as_slice()]).collect();
            least_squares(&cols, a).is_some()
        });
        let Some(j) = entering else {
            return Ok(x);
        };
        passive[j] = true;

        loop {
            iterations += 1;
            if iterations > max_iter {
                let r = residual(&x);
                let kkt = generators.iter().map(|g| dot(g, &r)).fold(0.0_f64, f64::max);
                return Err(Error::NnlsNoConvergence { iterations: max_iter, residual: kkt });
            }
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let cols: Vec<&[f64]> = idx.iter().map(|&k| generators[k].as_slice()).collect();
            let z = least_squares(&cols, a).ok_or(Error::NnlsNoConvergence { iterations, residual: f64::NAN })?;
            if z.iter().all(|&v| v > 0.0) {
                for (&k, &v) in idx.iter().zip(&z) {
                    x[k] = v;
                }
                break;
            }
            // Step toward z until the first passive weight hits zero.
            let mut alpha = f64::INFINITY;
            for (&k, &v) in idx.iter().zip(&z) {
                if v <= 0.0 {
                    let gap = x[k] - v;
                    alpha = alpha.min(if gap > 0.0 { x[k] / gap } else { 0.0 });
                }
            }
            for (&k, &v) in idx.iter().zip(&z) {
                x[k] += alpha * (v - x[k]);
                if x[k] <= tol * 1e-3 {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
}
