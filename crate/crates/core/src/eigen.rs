//! Inexact shift-and-invert eigensolver for `A γ5`, singular-triplet
//! conversion and dense spectral oracles.
//!
//! With `T = γ5 (A + iτγ5)⁻¹ = (Aγ5 + iτ)⁻¹` the wanted eigenvectors of
//! `Aγ5` (smallest `|λ|`) are those of `T` with largest `|θ|`, `θ = 1/(λ + iτ)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{Inverter, SolveConfig};
use crate::lattice::{Gamma5, Gamma5Hermitian, GaugeField, RightGamma5, WilsonOperator};
use crate::linalg::{
    dot, materialize, norm, normalize, orthogonalize, random_gaussian, LinearOperator, C64, DENSE_LIMIT,
    ZERO,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenConfig {
    pub k: usize,
    /// Outer tolerance ξ; by default also the inner solver tolerance.
    pub tol: f64,
    pub tau: f64,
    pub max_basis: usize,
    pub max_restarts: usize,
    pub inner: SolveConfig,
    pub seed: u64,
    pub test: ConvergenceTest,
}

impl EigenConfig {
    pub fn new(k: usize, tol: f64) -> Self {
        Self {
            k,
            tol,
            tau: 0.0,
            max_basis: 2 * k + 16,
            max_restarts: 100,
            inner: SolveConfig::with_tol(tol),
            seed: 0,
            test: ConvergenceTest::RitzValue,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("eigensolver needs k >= 1".into()));
        }
        if self.max_basis < self.k + 2 {
            return Err(Error::InvalidArgument(format!(
                "max_basis {} must be at least k + 2 = {}",
                self.max_basis,
                self.k + 2
            )));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) || !(self.tau >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need tol in (0,1) and tau >= 0 (got {}, {})",
                self.tol, self.tau
            )));
        }
        self.inner.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Largest,
    Smallest,
}

/// When a Ritz pair `(θ, x)` counts as converged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceTest {
    /// `‖r‖ ≤ tol · max|θ|`, the largest Ritz magnitude seen standing in for
    /// the operator norm. Cheap, but interior pairs of an ill-conditioned
    /// operator are accepted long before their values are accurate.
    NormEstimate,
    /// `‖r‖ ≤ tol · |θ|` for each pair: relative accuracy in every value.
    #[default]
    RitzValue,
}

#[derive(Debug, Clone, Copy)]
struct GdParams {
    k: usize,
    tol: f64,
    max_basis: usize,
    keep: usize,
    max_applications: usize,
    hermitian: bool,
    target: Target,
    criterion: ConvergenceTest,
}

#[derive(Debug, Clone, Default)]
struct GdResult {
    values: Vec<C64>,
    vectors: Vec<Vec<C64>>,
    residuals: Vec<f64>,
    converged: Vec<bool>,
    applications: usize,
    restarts: usize,
}

fn order(values: &[C64], target: Target) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (values[a].norm(), values[b].norm());
        match target {
            Target::Largest => y.total_cmp(&x),
            Target::Smallest => x.total_cmp(&y),
        }
    });
    idx
}

/// Ritz values and unit coefficient vectors of the projected matrix, in
/// target order.
fn ritz(h: &DMatrix<C64>, hermitian: bool, target: Target) -> Result<(Vec<C64>, DMatrix<C64>)> {
    let n = h.nrows();
    let (values, vectors) = if hermitian {
        let sym = (h + h.adjoint()) * C64::new(0.5, 0.0);
        let e = sym.symmetric_eigen();
        let vals: Vec<C64> = e.eigenvalues.iter().map(|&l| C64::new(l, 0.0)).collect();
        (vals, e.eigenvectors)
    } else {
        let scale = h.iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let schur = h
            .clone()
            .try_schur(f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Breakdown("Schur decomposition of the projected matrix failed".into()))?;
        let (q, t) = schur.unpack();
        let vals: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
        let mut z = DMatrix::zeros(n, n);
        // eigenvectors of the triangular factor by back substitution
        for i in 0..n {
            z[(i, i)] = C64::new(1.0, 0.0);
            for j in (0..i).rev() {
                let mut s = ZERO;
                for l in j + 1..=i {
                    s += t[(j, l)] * z[(l, i)];
                }
                let mut den = t[(j, j)] - t[(i, i)];
                if den.norm() < f64::EPSILON * scale {
                    den = C64::new(f64::EPSILON * scale, 0.0);
                }
                z[(j, i)] = -s / den;
            }
        }
        let mut y = q * z;
        for mut c in y.column_iter_mut() {
            let nrm = c.norm();
            c /= C64::new(nrm, 0.0);
        }
        (vals, y)
    };
    let idx = order(&values, target);
    let sorted_vals = idx.iter().map(|&i| values[i]).collect();
    let sorted = DMatrix::from_fn(n, n, |r, c| vectors[(r, idx[c])]);
    Ok((sorted_vals, sorted))
}

fn combine(vecs: &[Vec<C64>], coeffs: &DMatrix<C64>) -> Vec<Vec<C64>> {
    let dim = vecs.first().map_or(0, Vec::len);
    coeffs
        .column_iter()
        .map(|c| {
            let mut out = vec![ZERO; dim];
            for (v, &a) in vecs.iter().zip(c.iter()) {
                if a != ZERO {
                    for (o, x) in out.iter_mut().zip(v) {
                        *o += a * x;
                    }
                }
            }
            out
        })
        .collect()
}

fn orthonormal_columns(m: &DMatrix<C64>) -> DMatrix<C64> {
    m.clone().qr().q()
}

/// Block-size-one Davidson with thick restart and locking. `apply` maps a
/// unit vector to its image and is told how many applications came before.
fn davidson<F>(dim: usize, mut apply: F, p: &GdParams, seed: u64) -> Result<GdResult>
where
    F: FnMut(&[C64], usize) -> Result<Vec<C64>>,
{
    let max_basis = p.max_basis.min(dim);
    let keep = p.keep.min(max_basis.saturating_sub(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GdResult::default();
    let mut v: Vec<Vec<C64>> = Vec::new();
    let mut w: Vec<Vec<C64>> = Vec::new();
    let mut max_seen: f64 = 0.0;

    let fresh = |rng: &mut ChaCha8Rng, locked: &[Vec<C64>], v: &[Vec<C64>]| -> Option<Vec<C64>> {
        for _ in 0..3 {
            let mut t = random_gaussian(rng, dim);
            let before = norm(&t);
            orthogonalize(locked, &mut t);
            orthogonalize(v, &mut t);
            if norm(&t) > 1e-8 * before {
                normalize(&mut t);
                return Some(t);
            }
        }
        None
    };

    let mut last: Option<(Vec<C64>, DMatrix<C64>)> = None;
    loop {
        if v.is_empty() {
            if out.vectors.len() >= dim {
                break;
            }
            match fresh(&mut rng, &out.vectors, &v) {
                Some(t) => {
                    w.push(apply(&t, out.applications)?);
                    out.applications += 1;
                    v.push(t);
                }
                None => break,
            }
        }
        let n = v.len();
        let h = DMatrix::from_fn(n, n, |i, j| dot(&v[i], &w[j]));
        let (vals, y) = ritz(&h, p.hermitian, p.target)?;
        max_seen = vals.iter().fold(max_seen, |m, x| m.max(x.norm()));
        let y0 = y.column(0).into_owned();
        let c0 = DMatrix::from_column_slice(n, 1, y0.as_slice());
        let x = combine(&v, &c0).pop().unwrap();
        let wx = combine(&w, &c0).pop().unwrap();
        let theta = vals[0];
        let mut r: Vec<C64> = wx.iter().zip(&x).map(|(a, b)| a - theta * b).collect();
        // residual of the operator deflated by the locked vectors; without this
        // the locking error of a dominant pair sets a floor for all later ones
        orthogonalize(&out.vectors, &mut r);
        let rn = norm(&r);
        let scale = match p.criterion {
            ConvergenceTest::NormEstimate => max_seen,
            ConvergenceTest::RitzValue => theta.norm(),
        };
        if rn <= p.tol * scale {
            let mut x = x;
            normalize(&mut x);
            out.values.push(theta);
            out.vectors.push(x);
            out.residuals.push(rn);
            out.converged.push(true);
            if out.values.len() == p.k {
                return Ok(out);
            }
            let m = (n - 1).min(keep);
            if m == 0 {
                v.clear();
                w.clear();
                last = None;
                continue;
            }
            let q = orthonormal_columns(&y.columns(0, m + 1).into_owned());
            let q = q.columns(1, m).into_owned();
            v = combine(&v, &q);
            w = combine(&w, &q);
            last = None;
            continue;
        }
        last = Some((vals, y.clone()));
        if out.applications >= p.max_applications {
            break;
        }
        if n >= max_basis {
            let q = orthonormal_columns(&y.columns(0, keep).into_owned());
            v = combine(&v, &q);
            w = combine(&w, &q);
            out.restarts += 1;
        }
        let mut t = r;
        orthogonalize(&out.vectors, &mut t);
        let remaining = orthogonalize(&v, &mut t);
        let t = if remaining > 1e-10 * rn.max(f64::MIN_POSITIVE) && remaining > 0.0 {
            let mut t = t;
            normalize(&mut t);
            t
        } else {
            match fresh(&mut rng, &out.vectors, &v) {
                Some(t) => t,
                None => break,
            }
        };
        w.push(apply(&t, out.applications)?);
        out.applications += 1;
        v.push(t);
    }

    // budget exhausted: report the best unconverged pairs
    if let Some((vals, y)) = last {
        let n = v.len();
        for j in 0..n.min(p.k - out.values.len()) {
            let c = DMatrix::from_column_slice(n, 1, y.column(j).as_slice());
            let mut x = combine(&v, &c).pop().unwrap();
            let wx = combine(&w, &c).pop().unwrap();
            let r: Vec<C64> = wx.iter().zip(&x).map(|(a, b)| a - vals[j] * b).collect();
            normalize(&mut x);
            out.values.push(vals[j]);
            out.vectors.push(x);
            out.residuals.push(norm(&r));
            out.converged.push(false);
        }
    }
    Ok(out)
}

/// Eigenpairs of `Aγ5` found through the shifted inverse.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Rayleigh quotients `x†Aγ5x`.
    pub lambdas: Vec<f64>,
    /// Eigenvalues `1/θ` of `Aγ5 + iτ` from the Ritz values.
    pub shifted: Vec<C64>,
    pub vectors: Vec<Vec<C64>>,
    /// `‖Aγ5x − λx‖`
    pub residuals: Vec<f64>,
    /// `‖T x − θx‖` at convergence.
    pub ritz_residuals: Vec<f64>,
    pub converged: Vec<bool>,
    pub inversions: usize,
    pub restarts: usize,
    pub tau: f64,
}

impl EigenPairs {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

fn finish_pairs<A: Gamma5Hermitian + ?Sized>(
    op: &A,
    gd: GdResult,
    inversions: usize,
    tau: f64,
) -> EigenPairs {
    let h = RightGamma5(op);
    let mut rows: Vec<(f64, C64, Vec<C64>, f64, f64, bool)> = gd
        .vectors
        .into_iter()
        .zip(gd.values)
        .zip(gd.residuals)
        .zip(gd.converged)
        .map(|(((x, theta), rr), conv)| {
            let hx = h.apply_vec(&x);
            let lambda = dot(&x, &hx).re;
            let res = norm(&hx.iter().zip(&x).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
            let shifted = if theta == ZERO { C64::new(f64::INFINITY, 0.0) } else { theta.inv() };
            (lambda, shifted, x, res, rr, conv)
        })
        .collect();
    rows.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
    let mut out = EigenPairs {
        lambdas: Vec::new(),
        shifted: Vec::new(),
        vectors: Vec::new(),
        residuals: Vec::new(),
        ritz_residuals: Vec::new(),
        converged: Vec::new(),
        inversions,
        restarts: gd.restarts,
        tau,
    };
    for (l, s, x, r, rr, c) in rows {
        out.lambdas.push(l);
        out.shifted.push(s);
        out.vectors.push(x);
        out.residuals.push(r);
        out.ritz_residuals.push(rr);
        out.converged.push(c);
    }
    out
}

/// Number of leading outer steps during which an unconverged inner solve is
/// read as a sign that the shift is too small.
const EARLY_STEPS: usize = 3;

/// Davidson on `γ5 (A + iτγ5)⁻¹_ξ` for the `k` largest `|θ|`. The inverter
/// must invert `A + iτγ5` with `τ = config.tau`.
pub fn inexact_eigensolve<A, I>(op: &A, config: &EigenConfig, inverter: &I) -> Result<EigenPairs>
where
    A: Gamma5Hermitian + ?Sized,
    I: Inverter + ?Sized,
{
    config.validate()?;
    if inverter.dim() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: inverter.dim(),
        });
    }
    let gamma5 = op.gamma5();
    let before = inverter.stats().applications;
    let params = GdParams {
        k: config.k.min(op.dim()),
        tol: config.tol,
        max_basis: config.max_basis,
        keep: config.k + 4,
        max_applications: config.max_basis * (config.max_restarts + 1),
        hermitian: config.tau == 0.0,
        target: Target::Largest,
        criterion: config.test,
    };
    let tau = config.tau;
    let gd = davidson(
        op.dim(),
        |x, step| {
            let (mut y, rep) = inverter.invert(x)?;
            if !rep.converged {
                if step < EARLY_STEPS {
                    return Err(Error::ShiftTooSmall { tau });
                }
                log::warn!("inner solve unconverged (relres {:.2e})", rep.final_relres);
            }
            gamma5.apply_in_place(&mut y);
            Ok(y)
        },
        &params,
        config.seed,
    )?;
    let inversions = inverter.stats().applications - before;
    Ok(finish_pairs(op, gd, inversions, tau))
}

/// Reruns with `τ ← max(2τ, τ₀)`, `τ₀ = 0.05 σ_max`, while the inner solves
/// stagnate; `make_inverter(τ)` must build an inverter of `A + iτγ5`.
pub fn eigensolve_with_shift_policy<A, I, F>(
    op: &A,
    config: &EigenConfig,
    mut make_inverter: F,
    sigma_max_est: f64,
    max_shift_restarts: usize,
) -> Result<EigenPairs>
where
    A: Gamma5Hermitian + ?Sized,
    I: Inverter,
    F: FnMut(f64) -> Result<I>,
{
    let tau0 = 0.05 * sigma_max_est;
    let mut cfg = *config;
    let mut spent = 0;
    for attempt in 0..=max_shift_restarts {
        let inverter = make_inverter(cfg.tau)?;
        match inexact_eigensolve(op, &cfg, &inverter) {
            Ok(mut pairs) => {
                pairs.inversions += spent;
                return Ok(pairs);
            }
            Err(Error::ShiftTooSmall { tau }) if attempt < max_shift_restarts => {
                spent += inverter.stats().applications;
                cfg.tau = (2.0 * tau).max(tau0);
                log::warn!("inner solves stagnated at tau={tau}; retrying with tau={}", cfg.tau);
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on its last attempt")
}

#[derive(Debug, Clone)]
pub struct SingularTriplets {
    /// Ascending.
    pub sigmas: Vec<f64>,
    pub left: Vec<Vec<C64>>,
    pub right: Vec<Vec<C64>>,
    pub lambdas: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Pairs with `λ = 0` exactly, where the sign was taken as `+1`.
    pub zero_lambda: Vec<bool>,
}

impl SingularTriplets {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Leading `k` left vectors.
    pub fn left_basis(&self, k: usize) -> &[Vec<C64>] {
        &self.left[..k]
    }
}

/// `Aγ5x = λx` gives `σ = |λ|`, `u = x`, `v = sign(λ) γ5 x`.
pub fn to_singular_triplets(pairs: &EigenPairs, gamma5: &Gamma5) -> Result<SingularTriplets> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    for &i in &idx {
        if !pairs.residuals[i].is_finite() || !pairs.lambdas[i].is_finite() {
            return Err(Error::InvalidArgument(format!("eigenpair {i} is not finite")));
        }
        if gamma5.dim() != pairs.vectors[i].len() {
            return Err(Error::DimensionMismatch {
                expected: gamma5.dim(),
                got: pairs.vectors[i].len(),
            });
        }
    }
    idx.sort_by(|&a, &b| pairs.lambdas[a].abs().total_cmp(&pairs.lambdas[b].abs()));
    let mut t = SingularTriplets {
        sigmas: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        lambdas: Vec::new(),
        residuals: Vec::new(),
        zero_lambda: Vec::new(),
    };
    for i in idx {
        let l = pairs.lambdas[i];
        let x = &pairs.vectors[i];
        let sign = if l < 0.0 { -1.0 } else { 1.0 };
        let mut v = gamma5.apply(x);
        v.iter_mut().for_each(|e| *e *= sign);
        t.sigmas.push(l.abs());
        t.left.push(x.clone());
        t.right.push(v);
        t.lambdas.push(l);
        t.residuals.push(pairs.residuals[i]);
        t.zero_lambda.push(l == 0.0);
    }
    Ok(t)
}

/// Full SVD with singular values in descending order.
#[derive(Debug, Clone)]
pub struct DenseSvd {
    pub u: DMatrix<C64>,
    pub sigmas: Vec<f64>,
    pub v: DMatrix<C64>,
}

impl DenseSvd {
    /// The `k` smallest singular values (ascending) with their left and right
    /// vectors.
    pub fn smallest(&self, k: usize) -> (Vec<f64>, Vec<Vec<C64>>, Vec<Vec<C64>>) {
        let n = self.sigmas.len();
        let cols: Vec<usize> = (0..k.min(n)).map(|i| n - 1 - i).collect();
        (
            cols.iter().map(|&j| self.sigmas[j]).collect(),
            cols.iter().map(|&j| self.u.column(j).iter().copied().collect()).collect(),
            cols.iter().map(|&j| self.v.column(j).iter().copied().collect()).collect(),
        )
    }
}

fn guard(n: usize) -> Result<()> {
    if n > DENSE_LIMIT {
        return Err(Error::SizeGuard {
            dim: n,
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

pub fn dense_svd_oracle(m: &DMatrix<C64>) -> Result<DenseSvd> {
    guard(m.nrows().max(m.ncols()))?;
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let v = vt.adjoint();
    Ok(DenseSvd {
        u: DMatrix::from_fn(u.nrows(), idx.len(), |r, c| u[(r, idx[c])]),
        sigmas: idx.iter().map(|&i| s[i]).collect(),
        v: DMatrix::from_fn(v.nrows(), idx.len(), |r, c| v[(r, idx[c])]),
    })
}

/// Eigenvalues ascending with eigenvectors as columns.
pub fn dense_hermitian_eig(m: &DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>)> {
    guard(m.nrows())?;
    let e = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    Ok((
        idx.iter().map(|&i| e.eigenvalues[i]).collect(),
        DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| e.eigenvectors[(r, idx[c])]),
    ))
}

/// Eigenpairs of `Aγ5` ordered by ascending `|λ|`.
pub fn dense_gamma5_spectrum<A: Gamma5Hermitian + ?Sized>(op: &A) -> Result<(Vec<f64>, DMatrix<C64>)> {
    let h = materialize(&RightGamma5(op))?;
    let h = (&h + h.adjoint()) * C64::new(0.5, 0.0);
    let (vals, vecs) = dense_hermitian_eig(&h)?;
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()));
    Ok((
        idx.iter().map(|&i| vals[i]).collect(),
        DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |r, c| vecs[(r, idx[c])]),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassTuning {
    pub mass: f64,
    /// Mass at which the lowest real mode of `A` crosses zero.
    pub critical: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Places the mass just above the critical value so that
/// `σ_min / σ_max ≤ target_ratio`, using dense spectra.
pub fn tune_critical_mass(gauge: &GaugeField, target_ratio: f64) -> Result<MassTuning> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("target ratio {target_ratio} not in (0,1)")));
    }
    let a0 = WilsonOperator::new(gauge.clone(), 0.0)?;
    let dense = materialize(&a0)?;
    let scale = dense.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let schur = dense
        .try_schur(1e-14, 20_000)
        .ok_or_else(|| Error::Breakdown("Schur decomposition of the Wilson operator failed".into()))?;
    let eig = schur.eigenvalues().ok_or_else(|| Error::Breakdown("no eigenvalues".into()))?;
    // real modes come in isolated real eigenvalues for γ5-Hermitian A; only
    // the physical branch (within 0.5 of the lowest real part; doublers sit ~2 up)
    // is a useful target. Without one, the lowest complex pair is tried, which
    // only works when its imaginary part is below the target.
    let real_tol = 1e-8 * scale;
    let min_re = eig.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let lowest = eig
        .iter()
        .filter(|z| z.im.abs() <= real_tol)
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    let has_real = lowest <= min_re + 0.5;
    let critical = if has_real { -lowest } else { -min_re };
    let spectrum = |m: f64| -> Result<(f64, f64)> {
        let (vals, _) = dense_gamma5_spectrum(&a0.with_mass(m)?)?;
        let smin = vals[0].abs();
        let smax = vals.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        Ok((smin, smax))
    };
    let (_, smax0) = spectrum(critical)?;
    let mut eps = 0.5 * target_ratio * smax0;
    for _ in 0..30 {
        let mass = critical + eps;
        let (smin, smax) = spectrum(mass)?;
        if smin / smax <= target_ratio {
            return Ok(MassTuning {
                mass,
                critical,
                sigma_min: smin,
                sigma_max: smax,
            });
        }
        eps *= 0.5;
    }
    let why = if has_real {
        ""
    } else {
        "; the gauge field has no real eigenvalue on the physical branch, try another seed"
    };
    Err(Error::Breakdown(format!(
        "could not reach sigma ratio {target_ratio} near critical mass {critical}{why}"
    )))
}

/// One row of the eigensolver comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub approach: String,
    pub inversions: usize,
    pub matvecs: usize,
    pub converged: bool,
    pub pairs: usize,
}

pub const APPROACH_SHIFT_INVERT: &str = "gd_gamma5_inv";
pub const APPROACH_NORMAL: &str = "gd_inv_inv_dagger";
pub const APPROACH_UNPRECONDITIONED: &str = "davidson_no_inversion";

/// Runs the three approaches for the `k` smallest singular directions at
/// the same tolerance. `inverter` inverts `A` (τ = 0); `max_matvecs` caps
/// the inversion-free run.
pub fn compare_eigensolvers<A, I>(
    op: &A,
    config: &EigenConfig,
    inverter: &I,
    max_matvecs: usize,
) -> Result<Vec<ComparisonRow>>
where
    A: Gamma5Hermitian + ?Sized,
    I: Inverter + ?Sized,
{
    config.validate()?;
    let mut rows = Vec::new();
    let base = EigenConfig { tau: 0.0, ..*config };

    inverter.reset_stats();
    let pairs = inexact_eigensolve(op, &base, inverter)?;
    rows.push(ComparisonRow {
        approach: APPROACH_SHIFT_INVERT.into(),
        inversions: pairs.inversions,
        matvecs: inverter.stats().matvecs,
        converged: pairs.all_converged(),
        pairs: pairs.len(),
    });

    // A⁻¹A⁻† with A⁻† = γ5A⁻¹γ5
    inverter.reset_stats();
    let gamma5 = op.gamma5();
    let params = GdParams {
        k: config.k,
        tol: config.tol,
        max_basis: config.max_basis,
        keep: config.k + 4,
        max_applications: config.max_basis * (config.max_restarts + 1),
        hermitian: true,
        target: Target::Largest,
        criterion: config.test,
    };
    let gd = davidson(
        op.dim(),
        |x, _| {
            let (mut y, _) = inverter.invert(&gamma5.apply(x))?;
            gamma5.apply_in_place(&mut y);
            Ok(inverter.invert(&y)?.0)
        },
        &params,
        config.seed,
    )?;
    rows.push(ComparisonRow {
        approach: APPROACH_NORMAL.into(),
        inversions: inverter.stats().applications,
        matvecs: inverter.stats().matvecs,
        converged: gd.converged.iter().all(|&c| c) && gd.converged.len() == config.k,
        pairs: gd.values.len(),
    });

    // (Aγ5)² without any inversion; residuals relative to each Ritz value
    let h = RightGamma5(op);
    let params = GdParams {
        target: Target::Smallest,
        criterion: ConvergenceTest::RitzValue,
        max_applications: max_matvecs / 2,
        ..params
    };
    let gd = davidson(
        op.dim(),
        |x, _| Ok(h.apply_vec(&h.apply_vec(x))),
        &params,
        config.seed,
    )?;
    rows.push(ComparisonRow {
        approach: APPROACH_UNPRECONDITIONED.into(),
        inversions: 0,
        matvecs: 2 * gd.applications,
        converged: gd.converged.iter().all(|&c| c) && gd.converged.len() == config.k,
        pairs: gd.values.len(),
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::{truncated_inverse, DenseInverse};
    use crate::lattice::{build_lattice, generate_gauge, Boundary, DenseGamma5Operator, GaugeKind, Shifted};
    use crate::linalg::{max_abs, orthonormality_error, sub};

    fn diag_test_op() -> DenseGamma5Operator {
        // A γ5 = diag(0.1, −0.2, 0.5, −1, 3) with γ5 = diag(1, −1, 1, −1, 1)
        let lam = [0.1, -0.2, 0.5, -1.0, 3.0];
        let signs = vec![1i8, -1, 1, -1, 1];
        let a = DMatrix::from_fn(5, 5, |i, j| {
            if i == j {
                C64::new(lam[i] * signs[i] as f64, 0.0)
            } else {
                ZERO
            }
        });
        DenseGamma5Operator::new(a, Gamma5::new(signs).unwrap()).unwrap()
    }

    fn shifted_inverse<A: Gamma5Hermitian>(op: &A, tau: f64) -> DenseInverse {
        DenseInverse::from_operator(&Shifted { op, tau }).unwrap()
    }

    fn small_config(k: usize, tol: f64) -> EigenConfig {
        EigenConfig::new(k, tol)
    }

    #[test]
    fn config_validation() {
        assert!(EigenConfig::new(0, 1e-8).validate().is_err());
        let mut c = EigenConfig::new(4, 1e-8);
        c.max_basis = 5;
        assert!(c.validate().is_err());
        c.max_basis = 6;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn diagonal_operator_unshifted() {
        let op = diag_test_op();
        let inv = shifted_inverse(&op, 0.0);
        let pairs = inexact_eigensolve(&op, &small_config(2, 1e-10), &inv).unwrap();
        assert!(pairs.all_converged());
        assert!((pairs.lambdas[0] - 0.1).abs() < 1e-8);
        assert!((pairs.lambdas[1] + 0.2).abs() < 1e-8);
        assert_eq!(pairs.inversions, inv.stats().applications);
    }

    #[test]
    fn diagonal_operator_shifted() {
        let op = diag_test_op();
        let inv = shifted_inverse(&op, 0.5);
        let cfg = EigenConfig {
            tau: 0.5,
            ..small_config(2, 1e-10)
        };
        let pairs = inexact_eigensolve(&op, &cfg, &inv).unwrap();
        assert!(pairs.all_converged());
        assert!((pairs.shifted[0] - C64::new(0.1, 0.5)).norm() < 1e-8);
        assert!((pairs.shifted[1] - C64::new(-0.2, 0.5)).norm() < 1e-8);
        // same eigenvectors: unit vectors e0 and e1 up to phase
        assert!((pairs.vectors[0][0].norm() - 1.0).abs() < 1e-8);
        assert!((pairs.vectors[1][1].norm() - 1.0).abs() < 1e-8);
    }

    fn wilson(dims: &[usize], mass: f64, beta: f64, seed: u64) -> WilsonOperator {
        let g = build_lattice(dims, Boundary::Periodic).unwrap();
        WilsonOperator::new(generate_gauge(&g, &GaugeKind::RandomPhase { beta }, seed).unwrap(), mass).unwrap()
    }

    #[test]
    fn wilson_exact_inner_matches_dense_and_svd() {
        let op = wilson(&[8, 8], 0.05, 2.0, 3);
        let inv = shifted_inverse(&op, 0.0);
        let pairs = inexact_eigensolve(&op, &small_config(6, 1e-10), &inv).unwrap();
        assert!(pairs.all_converged());
        let (dense, _) = dense_gamma5_spectrum(&op).unwrap();
        for i in 0..6 {
            assert!((pairs.lambdas[i] - dense[i]).abs() < 1e-8, "{i}: {} vs {}", pairs.lambdas[i], dense[i]);
        }
        assert!(orthonormality_error(&pairs.vectors) < 1e-8);
        let trip = to_singular_triplets(&pairs, op.gamma5()).unwrap();
        let svd = dense_svd_oracle(&materialize(&op).unwrap()).unwrap();
        let (small, _, _) = svd.smallest(6);
        for i in 0..6 {
            assert!((trip.sigmas[i] - small[i]).abs() < 1e-6);
            let av = op.apply_vec(&trip.right[i]);
            let su: Vec<C64> = trip.left[i].iter().map(|x| x * trip.sigmas[i]).collect();
            assert!(norm(&sub(&av, &su)) <= trip.residuals[i] + 1e-12);
        }
    }

    #[test]
    fn shifted_solve_on_wilson_keeps_magnitude_order() {
        let op = wilson(&[8, 8], 0.05, 2.0, 3);
        let (dense, _) = dense_gamma5_spectrum(&op).unwrap();
        for tau in [0.5, 1.0] {
            let inv = shifted_inverse(&op, tau);
            let cfg = EigenConfig {
                tau,
                ..small_config(5, 1e-10)
            };
            let pairs = inexact_eigensolve(&op, &cfg, &inv).unwrap();
            assert!(pairs.all_converged());
            for i in 0..5 {
                assert!((pairs.lambdas[i] - dense[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn inexact_inner_solves() {
        let op = wilson(&[8, 8], 0.05, 2.0, 3);
        let inv = truncated_inverse(Shifted { op: &op, tau: 0.0 }, SolveConfig::with_tol(1e-2)).unwrap();
        let pairs = inexact_eigensolve(&op, &small_config(4, 1e-2), &inv).unwrap();
        let (dense, _) = dense_gamma5_spectrum(&op).unwrap();
        for i in 0..4 {
            assert!((pairs.lambdas[i].abs() - dense[i].abs()).abs() <= 0.1 * dense[i].abs());
        }
    }

    #[test]
    fn stagnating_inner_solver_requests_larger_shift() {
        let op = wilson(&[8, 8], 0.05, 2.0, 3);
        let tight = |tau: f64| {
            let cfg = SolveConfig {
                max_iter: if tau == 0.0 { 2 } else { 10_000 },
                ..SolveConfig::with_tol(1e-10)
            };
            truncated_inverse(Shifted { op: &op, tau }, cfg)
        };
        let inv = tight(0.0).unwrap();
        let err = inexact_eigensolve(&op, &small_config(2, 1e-8), &inv).unwrap_err();
        assert!(matches!(err, Error::ShiftTooSmall { tau } if tau == 0.0));
        let pairs = eigensolve_with_shift_policy(&op, &small_config(2, 1e-8), tight, 4.0, 2).unwrap();
        assert!((pairs.tau - 0.2).abs() < 1e-15);
        assert!(pairs.all_converged());
        assert!(pairs.inversions > 2);
    }

    #[test]
    fn triplet_sign_identity_and_positive_case() {
        let op = diag_test_op();
        let mut x = vec![ZERO; 5];
        x[1] = C64::new(1.0, 0.0);
        let pairs = EigenPairs {
            lambdas: vec![-0.2],
            shifted: vec![C64::new(-0.2, 0.0)],
            vectors: vec![x.clone()],
            residuals: vec![0.0],
            ritz_residuals: vec![0.0],
            converged: vec![true],
            inversions: 0,
            restarts: 0,
            tau: 0.0,
        };
        let t = to_singular_triplets(&pairs, op.gamma5()).unwrap();
        assert_eq!(t.sigmas, vec![0.2]);
        let expected: Vec<C64> = op.gamma5().apply(&x).iter().map(|e| -e).collect();
        assert_eq!(t.right[0], expected);
        let av = op.apply_vec(&t.right[0]);
        assert!(norm(&sub(&av, &x.iter().map(|e| e * 0.2).collect::<Vec<_>>())) < 1e-15);

        let id5 = Gamma5::new(vec![1; 5]).unwrap();
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
            [1.0, 2.0, 3.0, 4.0, 5.0].map(|x| C64::new(x, 0.0)).to_vec(),
        ));
        let pos = DenseGamma5Operator::new(p, id5.clone()).unwrap();
        let inv = shifted_inverse(&pos, 0.0);
        let pairs = inexact_eigensolve(&pos, &small_config(2, 1e-10), &inv).unwrap();
        let t = to_singular_triplets(&pairs, &id5).unwrap();
        for i in 0..2 {
            assert!((t.sigmas[i] - t.lambdas[i]).abs() < 1e-15);
            assert_eq!(t.left[i], t.right[i]);
        }
    }

    #[test]
    fn zero_lambda_flagged() {
        let g5 = Gamma5::new(vec![1, -1]).unwrap();
        let pairs = EigenPairs {
            lambdas: vec![0.0],
            shifted: vec![ZERO],
            vectors: vec![vec![C64::new(1.0, 0.0), ZERO]],
            residuals: vec![0.0],
            ritz_residuals: vec![0.0],
            converged: vec![true],
            inversions: 0,
            restarts: 0,
            tau: 0.0,
        };
        let t = to_singular_triplets(&pairs, &g5).unwrap();
        assert!(t.zero_lambda[0]);
        assert_eq!(t.right[0], g5.apply(&pairs.vectors[0]));
    }

    #[test]
    fn svd_oracle_basics() {
        let id = DMatrix::<C64>::identity(4, 4);
        assert!(dense_svd_oracle(&id).unwrap().sigmas.iter().all(|&s| (s - 1.0).abs() < 1e-15));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
            [3.0, 1.0, 2.0].map(|x| C64::new(x, 0.0)).to_vec(),
        ));
        let s = dense_svd_oracle(&d).unwrap();
        assert_eq!(s.sigmas, vec![3.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = DMatrix::from_fn(50, 50, |_, _| random_gaussian(&mut rng, 1)[0]);
        let s = dense_svd_oracle(&r).unwrap();
        let sig = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
            s.sigmas.iter().map(|&x| C64::new(x, 0.0)).collect(),
        ));
        let back = &s.u * sig * s.v.adjoint();
        assert!(max_abs(&(back - &r)) <= 1e-10 * max_abs(&r));
    }

    #[test]
    fn shift_targets_agree_with_magnitude_order() {
        let op = wilson(&[4, 4], 0.1, 2.0, 6);
        let (vals, _) = dense_gamma5_spectrum(&op).unwrap();
        for tau in [0.0, 0.3, 1.0] {
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.sort_by(|&a, &b| {
                let ta = C64::new(vals[a], tau).inv().norm();
                let tb = C64::new(vals[b], tau).inv().norm();
                tb.total_cmp(&ta)
            });
            let ascending: Vec<usize> = (0..vals.len()).collect();
            assert_eq!(idx, ascending);
        }
    }

    #[test]
    fn mass_tuning_reaches_target_ratio() {
        let g = build_lattice(&[8, 8], Boundary::Periodic).unwrap();
        let gauge = generate_gauge(&g, &GaugeKind::RandomPhase { beta: 3.0 }, 14).unwrap();
        let t = tune_critical_mass(&gauge, 1e-3).unwrap();
        assert!(t.sigma_min / t.sigma_max <= 1e-3);
        assert!(t.mass > t.critical);
    }

    #[test]
    fn comparison_counts_are_deterministic() {
        let op = wilson(&[8, 8], 0.5, 2.0, 2);
        let inv = DenseInverse::from_operator(&op).unwrap();
        let cfg = small_config(3, 1e-6);
        let a = compare_eigensolvers(&op, &cfg, &inv, 20_000).unwrap();
        let b = compare_eigensolvers(&op, &cfg, &inv, 20_000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|r| r.converged), "{a:?}");
    }
}
