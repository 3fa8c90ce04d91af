//! Linearized buckling eigenproblem `(K − λ K_ss) u = 0`.
//!
//! Small systems are reduced to a dense standard problem through the
//! Cholesky factor of `K`. Larger ones use subspace iteration on
//! `K⁻¹ K_ss`, which converges to the largest `μ = 1/λ` and therefore to the
//! lowest buckling factors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::AssembledSystem;
use crate::linalg::{dot, norm, CsrMatrix};

pub const DEFAULT_MODES: usize = 25;

/// Ritz values below this fraction of the largest are treated as zero.
const MU_CUTOFF: f64 = 1e-12;
const RESIDUAL_TOLERANCE: f64 = 1e-8;
const START_SEED: u64 = 0x5eed_b0c1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenConfig {
    /// Relative change of the Ritz values between sweeps.
    pub tol: f64,
    pub max_iters: usize,
    /// Systems up to this size are solved densely.
    pub dense_threshold: usize,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 1000,
            dense_threshold: 500,
        }
    }
}

/// Lowest positive buckling factors, ascending, with `uᵀ K_ss u = 1` modes.
#[derive(Debug, Clone, PartialEq)]
pub struct BucklingModes {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    /// Sweeps used by subspace iteration; zero for the dense path.
    pub iterations: usize,
}

impl BucklingModes {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn lambda1(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn first_mode(&self) -> &[f64] {
        &self.eigenvectors[0]
    }

    pub fn critical_loads(&self, reference_load: f64) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| l * reference_load)
            .collect()
    }
}

/// `uᵀ K u / uᵀ K_ss u`.
pub fn rayleigh_quotient(k: &CsrMatrix, k_ss: &CsrMatrix, u: &[f64]) -> Result<f64> {
    let den = k_ss.quad_form(u);
    if den == 0.0 || den.abs() <= f64::EPSILON * k_ss.max_abs() * dot(u, u) {
        return Err(Error::DegenerateMode);
    }
    Ok(k.quad_form(u) / den)
}

/// Scales `u` so that `uᵀ K_ss u = 1` and its first significant entry is
/// positive.
fn normalize(k_ss: &CsrMatrix, u: &mut [f64]) {
    let s = k_ss.quad_form(u);
    let scale = 1.0 / s.abs().sqrt();
    let peak = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sign = u
        .iter()
        .find(|v| v.abs() > 1e-8 * peak)
        .map_or(1.0, |v| v.signum());
    u.iter_mut().for_each(|v| *v *= sign * scale);
}

pub fn buckling_solve(
    system: &AssembledSystem,
    m: usize,
    config: &EigenConfig,
) -> Result<BucklingModes> {
    buckling_solve_from(system, m, config, &[])
}

/// As [`buckling_solve`], seeding subspace iteration with `start` (typically
/// the modes of a nearby design). The dense path ignores it.
pub fn buckling_solve_from(
    system: &AssembledSystem,
    m: usize,
    config: &EigenConfig,
    start: &[Vec<f64>],
) -> Result<BucklingModes> {
    if m == 0 {
        return Err(Error::EigenSolver(
            "number of modes must be positive".into(),
        ));
    }
    if !system.has_stress_stiffness() {
        return Err(Error::NoBucklingMode);
    }
    let n = system.dim();
    let mut modes = if n <= config.dense_threshold {
        dense_solve(system, m)?
    } else {
        subspace_solve(system, m, config, start)?
    };
    for u in &mut modes.eigenvectors {
        normalize(system.k_ss(), u);
    }
    Ok(modes)
}

/// Leading entries of a descending list that are clearly positive.
fn positive_count(mu: &[f64]) -> usize {
    let scale = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    mu.iter().take_while(|&&x| x > MU_CUTOFF * scale).count()
}

fn dense_solve(system: &AssembledSystem, m: usize) -> Result<BucklingModes> {
    let k = system.k().to_dense();
    let k_ss = system.k_ss().to_dense();
    let chol = k.cholesky().ok_or(Error::SingularSystem { pivot: 0 })?;
    let l = chol.l();
    // C = L⁻¹ K_ss L⁻ᵀ
    let y = l
        .solve_lower_triangular(&k_ss)
        .ok_or_else(|| Error::EigenSolver("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::EigenSolver("triangular solve failed".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();

    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mu: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let count = positive_count(&mu).min(m);
    if count == 0 {
        return Err(Error::NoBucklingMode);
    }
    let lt = l.transpose();
    let mut eigenvalues = Vec::with_capacity(count);
    let mut eigenvectors = Vec::with_capacity(count);
    for &i in &order[..count] {
        let u = lt
            .solve_upper_triangular(&eig.eigenvectors.column(i).into_owned())
            .ok_or_else(|| Error::EigenSolver("triangular solve failed".into()))?;
        eigenvalues.push(1.0 / eig.eigenvalues[i]);
        eigenvectors.push(u.as_slice().to_vec());
    }
    Ok(BucklingModes {
        eigenvalues,
        eigenvectors,
        iterations: 0,
    })
}

fn starting_vectors(system: &AssembledSystem, p: usize, start: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = system.dim();
    let mut out: Vec<Vec<f64>> = start
        .iter()
        .filter(|v| v.len() == n)
        .take(p)
        .cloned()
        .collect();
    let kd = system.k().diagonal();
    let sd: Vec<f64> = system.k_ss().diagonal().iter().map(|v| v.abs()).collect();
    if out.len() < p {
        out.push(sd.clone());
    }
    let mut ratio: Vec<usize> = (0..n).filter(|&i| sd[i] > 0.0).collect();
    ratio.sort_by(|&a, &b| (sd[b] / kd[b]).total_cmp(&(sd[a] / kd[a])).then(a.cmp(&b)));
    let units = p.saturating_sub(out.len() + 1);
    for &i in ratio.iter().take(units) {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        out.push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    while out.len() < p {
        out.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    out
}

/// K-orthonormal Ritz vectors of the pencil `(K_r, S_r)`, `μ` descending.
fn ritz(kr: &DMatrix<f64>, sr: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = kr.nrows();
    let ke = ((kr + kr.transpose()) * 0.5).symmetric_eigen();
    let dmax = ke.eigenvalues.max();
    let keep: Vec<usize> = (0..ke.eigenvalues.len())
        .filter(|&i| ke.eigenvalues[i] > 1e-12 * dmax)
        .collect();
    let t = DMatrix::from_fn(n, keep.len(), |r, c| {
        ke.eigenvectors[(r, keep[c])] / ke.eigenvalues[keep[c]].sqrt()
    });
    let s = t.transpose() * sr * &t;
    let s = (&s + s.transpose()) * 0.5;
    let se = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .total_cmp(&se.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mu = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let w = DMatrix::from_fn(se.eigenvalues.len(), order.len(), |r, c| {
        se.eigenvectors[(r, order[c])]
    });
    (mu, t * w)
}

fn combine(basis: &[Vec<f64>], q: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = basis.first().map_or(0, |b| b.len());
    (0..q.ncols())
        .map(|c| {
            let mut v = vec![0.0; n];
            for (j, b) in basis.iter().enumerate() {
                let w = q[(j, c)];
                if w != 0.0 {
                    v.iter_mut().zip(b).for_each(|(vi, bi)| *vi += w * bi);
                }
            }
            v
        })
        .collect()
}

fn subspace_solve(
    system: &AssembledSystem,
    m: usize,
    config: &EigenConfig,
    start: &[Vec<f64>],
) -> Result<BucklingModes> {
    let n = system.dim();
    let p = n.min((2 * m).max(m + 8));
    let (k, k_ss, factor) = (system.k(), system.k_ss(), system.factor());
    let mut x = starting_vectors(system, p, start);
    let mut previous: Option<Vec<f64>> = None;

    for iter in 1..=config.max_iters {
        let mut y: Vec<Vec<f64>> = x.iter().map(|v| k_ss.mul_vec(v)).collect();
        let mut xb: Vec<Vec<f64>> = y.iter().map(|v| factor.solve(v)).collect();
        // unit K-norm columns keep the reduced stiffness well scaled
        for (xv, yv) in xb.iter_mut().zip(y.iter_mut()) {
            let s = dot(xv, yv);
            if s > 0.0 {
                let c = 1.0 / s.sqrt();
                xv.iter_mut().for_each(|v| *v *= c);
                yv.iter_mut().for_each(|v| *v *= c);
            }
        }
        let q = xb.len();
        let kr = DMatrix::from_fn(q, q, |i, j| dot(&xb[i], &y[j]));
        let sy: Vec<Vec<f64>> = xb.iter().map(|v| k_ss.mul_vec(v)).collect();
        let sr = DMatrix::from_fn(q, q, |i, j| dot(&xb[i], &sy[j]));
        let (mu, coeffs) = ritz(&kr, &sr);
        x = combine(&xb, &coeffs);
        if x.is_empty() {
            return Err(Error::NoBucklingMode);
        }

        let count = positive_count(&mu).min(m);
        let settled = previous.as_ref().is_some_and(|prev| {
            count > 0
                && prev.len() >= count
                && (0..count).all(|i| (mu[i] - prev[i]).abs() <= config.tol * mu[i].abs())
        });
        if settled {
            let converged = (0..count).all(|i| {
                let ku = k.mul_vec(&x[i]);
                let su = k_ss.mul_vec(&x[i]);
                let lambda = 1.0 / mu[i];
                let r: Vec<f64> = ku.iter().zip(&su).map(|(a, b)| a - lambda * b).collect();
                norm(&r) <= RESIDUAL_TOLERANCE * norm(&ku)
            });
            if converged {
                return Ok(BucklingModes {
                    eigenvalues: mu[..count].iter().map(|v| 1.0 / v).collect(),
                    eigenvectors: x.into_iter().take(count).collect(),
                    iterations: iter,
                });
            }
        }
        if count == 0 && previous.is_some() && mu.first().is_none_or(|&v| v <= 0.0) {
            return Err(Error::NoBucklingMode);
        }
        previous = Some(mu);
    }
    Err(Error::EigenSolver(format!(
        "subspace iteration did not converge in {} sweeps",
        config.max_iters
    )))
}

/// Dense reference used by tests: the same pencil with every eigenpair.
#[cfg(test)]
pub(crate) fn dense_reference(system: &AssembledSystem) -> Vec<f64> {
    let k = system.k().to_dense();
    let s = system.k_ss().to_dense();
    // K^{-1/2} from the spectral decomposition of K
    let ke = k.symmetric_eigen();
    let inv_sqrt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        ke.eigenvalues.len(),
        ke.eigenvalues.iter().map(|v| 1.0 / v.sqrt()),
    ));
    let w = &ke.eigenvectors * inv_sqrt * ke.eigenvectors.transpose();
    let c = &w * s * &w;
    let c = (&c + c.transpose()) * 0.5;
    let mut mu: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
    mu.sort_by(|a, b| b.total_cmp(a));
    let count = positive_count(&mu);
    mu[..count].iter().map(|v| 1.0 / v).collect()
}
