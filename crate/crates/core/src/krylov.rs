//! Krylov linear solvers and the inverse-operator abstractions built on them.
//!
//! Every solve starts from a zero initial guess and stops on the explicitly
//! recomputed relative residual `‖A x − b‖ ≤ ξ‖b‖`.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    axpy, check_dim, dot, norm, random_gaussian, scale, LinearOperator, C64, ZERO,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Gcr,
    Minres,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
    pub kind: SolverKind,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            restart: 32,
            kind: SolverKind::Gcr,
        }
    }
}

impl SolveConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "solver tolerance must lie in (0, 1), got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 || self.restart == 0 {
            return Err(Error::InvalidArgument(
                "max_iter and restart must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_relres: f64,
    pub converged: bool,
    pub matvecs: usize,
    /// Set when the iteration stopped on a zero search direction.
    pub breakdown: Option<String>,
}

fn true_relres<A: LinearOperator + ?Sized>(op: &A, x: &[C64], b: &[C64], bnorm: f64) -> f64 {
    let ax = op.apply_vec(x);
    let r: f64 = ax
        .iter()
        .zip(b)
        .map(|(a, b)| (b - a).norm_sqr())
        .sum::<f64>()
        .sqrt();
    r / bnorm
}

/// Restarted (flexible) GCR with an optional right preconditioner.
pub fn gcr_solve<A, M>(
    op: &A,
    b: &[C64],
    config: &SolveConfig,
    preconditioner: Option<&M>,
) -> Result<(Vec<C64>, SolveReport)>
where
    A: LinearOperator + ?Sized,
    M: LinearOperator + ?Sized,
{
    config.validate()?;
    let n = op.dim();
    check_dim(n, b.len())?;
    let bnorm = norm(b);
    let mut x = vec![ZERO; n];
    let mut report = SolveReport::default();
    if bnorm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let target = config.tol * bnorm;
    let mut r = b.to_vec();
    let mut rnorm = bnorm;
    let mut dirs: Vec<Vec<C64>> = Vec::with_capacity(config.restart);
    let mut images: Vec<Vec<C64>> = Vec::with_capacity(config.restart);

    'outer: while report.iterations < config.max_iter {
        dirs.clear();
        images.clear();
        while dirs.len() < config.restart && report.iterations < config.max_iter {
            let mut z = match preconditioner {
                Some(m) => m.apply_vec(&r),
                None => r.clone(),
            };
            let mut q = op.apply_vec(&z);
            report.matvecs += 1;
            for (p, aq) in dirs.iter().zip(&images) {
                let c = dot(aq, &q);
                axpy(-c, aq, &mut q);
                axpy(-c, p, &mut z);
            }
            let qn = norm(&q);
            if qn <= f64::EPSILON * rnorm.max(f64::MIN_POSITIVE) || !qn.is_finite() {
                report.breakdown = Some(format!(
                    "zero search direction at iteration {}",
                    report.iterations
                ));
                break 'outer;
            }
            let inv = C64::new(1.0 / qn, 0.0);
            scale(inv, &mut q);
            scale(inv, &mut z);
            let alpha = dot(&q, &r);
            axpy(alpha, &z, &mut x);
            axpy(-alpha, &q, &mut r);
            report.iterations += 1;
            rnorm = norm(&r);
            dirs.push(z);
            images.push(q);
            if rnorm <= target {
                break;
            }
        }
        // replace the recursive residual by the true one
        let ax = op.apply_vec(&x);
        report.matvecs += 1;
        for ((ri, bi), axi) in r.iter_mut().zip(b).zip(&ax) {
            *ri = bi - axi;
        }
        rnorm = norm(&r);
        if rnorm <= target {
            break;
        }
    }
    report.final_relres = true_relres(op, &x, b, bnorm);
    report.matvecs += 1;
    report.converged = report.final_relres <= config.tol;
    Ok((x, report))
}

/// Unpreconditioned GCR; shorthand for [`gcr_solve`] without `M`.
pub fn gcr<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[C64],
    config: &SolveConfig,
) -> Result<(Vec<C64>, SolveReport)> {
    gcr_solve::<A, A>(op, b, config, None)
}

/// Spot check `⟨x, Hy⟩ = ⟨Hx, y⟩` on a deterministic random pair.
pub fn hermiticity_defect<A: LinearOperator + ?Sized>(op: &A) -> f64 {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let x = random_gaussian(&mut rng, n);
    let y = random_gaussian(&mut rng, n);
    let hx = op.apply_vec(&x);
    let hy = op.apply_vec(&y);
    let scale = (norm(&hx) * norm(&y)).max(norm(&hy) * norm(&x));
    (dot(&x, &hy) - dot(&hx, &y)).norm() / scale.max(f64::MIN_POSITIVE)
}

/// MINRES for Hermitian (possibly indefinite) operators.
pub fn minres_solve<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[C64],
    config: &SolveConfig,
) -> Result<(Vec<C64>, SolveReport)> {
    config.validate()?;
    let n = op.dim();
    check_dim(n, b.len())?;
    let defect = hermiticity_defect(op);
    if defect > 1e-10 {
        return Err(Error::Contract(format!(
            "minres needs a Hermitian operator; <x,Hy> - <Hx,y> defect {defect:.3e}"
        )));
    }
    let mut report = SolveReport {
        matvecs: 2,
        ..Default::default()
    };
    let mut x = vec![ZERO; n];
    let beta1 = norm(b);
    if beta1 == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }

    let mut r1 = b.to_vec();
    let mut r2 = b.to_vec();
    let mut y = b.to_vec();
    let mut w = vec![ZERO; n];
    let mut w2 = vec![ZERO; n];
    let (mut oldb, mut beta) = (0.0f64, beta1);
    let (mut dbar, mut epsln) = (0.0f64, 0.0f64);
    let mut phibar = beta1;
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);

    while report.iterations < config.max_iter {
        report.iterations += 1;
        let v: Vec<C64> = y.iter().map(|yi| yi / beta).collect();
        y = op.apply_vec(&v);
        report.matvecs += 1;
        if report.iterations >= 2 {
            axpy(C64::new(-beta / oldb, 0.0), &r1, &mut y);
        }
        let alfa = dot(&v, &y).re;
        axpy(C64::new(-alfa / beta, 0.0), &r2, &mut y);
        r1 = std::mem::replace(&mut r2, y.clone());
        oldb = beta;
        beta = norm(&r2);

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let w1 = std::mem::replace(&mut w2, w.clone());
        for i in 0..n {
            w[i] = (v[i] - w1[i] * oldeps - w2[i] * delta) / gamma;
        }
        axpy(C64::new(phi, 0.0), &w, &mut x);

        let invariant = beta <= f64::EPSILON * beta1;
        if phibar <= config.tol * beta1 || invariant {
            let rel = true_relres(op, &x, b, beta1);
            report.matvecs += 1;
            if rel <= config.tol || invariant {
                break;
            }
        }
    }
    report.final_relres = true_relres(op, &x, b, beta1);
    report.converged = report.final_relres <= config.tol;
    Ok((x, report))
}

/// Runs the solver selected by `config.kind`.
pub fn solve<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[C64],
    config: &SolveConfig,
) -> Result<(Vec<C64>, SolveReport)> {
    match config.kind {
        SolverKind::Gcr => gcr(op, b, config),
        SolverKind::Minres => minres_solve(op, b, config),
    }
}

/// Accumulated cost of an inverse operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InversionStats {
    pub applications: usize,
    pub iterations: usize,
    pub matvecs: usize,
    pub unconverged: usize,
}

#[derive(Debug, Default)]
struct Counters {
    applications: AtomicUsize,
    iterations: AtomicUsize,
    matvecs: AtomicUsize,
    unconverged: AtomicUsize,
}

impl Counters {
    fn record(&self, r: &SolveReport) {
        self.applications.fetch_add(1, Ordering::Relaxed);
        self.iterations.fetch_add(r.iterations, Ordering::Relaxed);
        self.matvecs.fetch_add(r.matvecs, Ordering::Relaxed);
        if !r.converged {
            self.unconverged.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn snapshot(&self) -> InversionStats {
        InversionStats {
            applications: self.applications.load(Ordering::Relaxed),
            iterations: self.iterations.load(Ordering::Relaxed),
            matvecs: self.matvecs.load(Ordering::Relaxed),
            unconverged: self.unconverged.load(Ordering::Relaxed),
        }
    }

    fn reset(&self) {
        self.applications.store(0, Ordering::Relaxed);
        self.iterations.store(0, Ordering::Relaxed);
        self.matvecs.store(0, Ordering::Relaxed);
        self.unconverged.store(0, Ordering::Relaxed);
    }
}

/// An (approximate) inverse of a square operator. Each call is one
/// "inversion" for accounting purposes.
pub trait Inverter {
    fn dim(&self) -> usize;

    fn invert(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)>;

    fn stats(&self) -> InversionStats;

    fn reset_stats(&self);
}

impl<T: Inverter + ?Sized> Inverter for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn invert(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)> {
        (**self).invert(b)
    }
    fn stats(&self) -> InversionStats {
        (**self).stats()
    }
    fn reset_stats(&self) {
        (**self).reset_stats()
    }
}

/// `A⁻¹_ξ`: a fresh zero-start solve to relative tolerance ξ per application.
/// Unconverged solves are returned as-is with their report.
#[derive(Debug)]
pub struct TruncatedInverse<A> {
    op: A,
    config: SolveConfig,
    counters: Counters,
}

impl<A: LinearOperator> TruncatedInverse<A> {
    pub fn new(op: A, config: SolveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            op,
            config,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &SolveConfig {
        &self.config
    }

    pub fn operator(&self) -> &A {
        &self.op
    }
}

pub fn truncated_inverse<A: LinearOperator>(op: A, config: SolveConfig) -> Result<TruncatedInverse<A>> {
    TruncatedInverse::new(op, config)
}

impl<A: LinearOperator> Inverter for TruncatedInverse<A> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn invert(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)> {
        let (x, report) = solve(&self.op, b, &self.config)?;
        if let Some(reason) = &report.breakdown {
            log::debug!("truncated inverse breakdown: {reason}");
        }
        self.counters.record(&report);
        Ok((x, report))
    }

    fn stats(&self) -> InversionStats {
        self.counters.snapshot()
    }

    fn reset_stats(&self) {
        self.counters.reset()
    }
}

/// Exact inverse through a precomputed dense inverse matrix.
#[derive(Debug)]
pub struct DenseInverse {
    inverse: DMatrix<C64>,
    counters: Counters,
}

impl DenseInverse {
    pub fn new(matrix: &DMatrix<C64>) -> Result<Self> {
        let inverse = matrix
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Singular("dense LU found a zero pivot".into()))?;
        Ok(Self {
            inverse,
            counters: Counters::default(),
        })
    }

    pub fn from_operator<A: LinearOperator + ?Sized>(op: &A) -> Result<Self> {
        Self::new(&crate::linalg::materialize(op)?)
    }

    pub fn inverse(&self) -> &DMatrix<C64> {
        &self.inverse
    }
}

impl Inverter for DenseInverse {
    fn dim(&self) -> usize {
        self.inverse.nrows()
    }

    fn invert(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)> {
        check_dim(self.dim(), b.len())?;
        let x = &self.inverse * DVector::from_column_slice(b);
        let report = SolveReport {
            iterations: 1,
            final_relres: 0.0,
            converged: true,
            matvecs: 0,
            breakdown: None,
        };
        self.counters.record(&report);
        Ok((x.as_slice().to_vec(), report))
    }

    fn stats(&self) -> InversionStats {
        self.counters.snapshot()
    }

    fn reset_stats(&self) {
        self.counters.reset()
    }
}

/// `M⁻¹`: a fixed number of GCR iterations from a zero guess. The map is
/// homogeneous (`M⁻¹(αb) = αM⁻¹b`) but, like any Krylov polynomial chosen
/// from `b`, not additive.
#[derive(Debug)]
pub struct Smoother<A> {
    op: A,
    iterations: usize,
    matvecs: AtomicUsize,
}

pub fn make_smoother<A: LinearOperator>(op: A, n_iters: usize) -> Result<Smoother<A>> {
    if n_iters == 0 {
        return Err(Error::InvalidArgument("smoother needs at least one iteration".into()));
    }
    Ok(Smoother {
        op,
        iterations: n_iters,
        matvecs: AtomicUsize::new(0),
    })
}

impl<A: LinearOperator> Smoother<A> {
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn matvecs(&self) -> usize {
        self.matvecs.load(Ordering::Relaxed)
    }

    /// Smoothed correction together with the residual `b − A M⁻¹ b`, which
    /// GCR produces for free.
    pub fn smooth(&self, b: &[C64]) -> (Vec<C64>, Vec<C64>) {
        let n = self.op.dim();
        let mut x = vec![ZERO; n];
        let mut r = b.to_vec();
        let bnorm = norm(b);
        if bnorm == 0.0 {
            return (x, r);
        }
        let mut dirs: Vec<Vec<C64>> = Vec::with_capacity(self.iterations);
        let mut images: Vec<Vec<C64>> = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let mut z = r.clone();
            let mut q = self.op.apply_vec(&z);
            self.matvecs.fetch_add(1, Ordering::Relaxed);
            for (p, aq) in dirs.iter().zip(&images) {
                let c = dot(aq, &q);
                axpy(-c, aq, &mut q);
                axpy(-c, p, &mut z);
            }
            let qn = norm(&q);
            if qn <= 1e-15 * bnorm {
                break;
            }
            let inv = C64::new(1.0 / qn, 0.0);
            scale(inv, &mut q);
            scale(inv, &mut z);
            let alpha = dot(&q, &r);
            axpy(alpha, &z, &mut x);
            axpy(-alpha, &q, &mut r);
            if norm(&r) <= 1e-15 * bnorm {
                break;
            }
            dirs.push(z);
            images.push(q);
        }
        (x, r)
    }
}

impl<A: LinearOperator> LinearOperator for Smoother<A> {
    fn dim(&self) -> usize {
        self.op.dim()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let (s, _) = self.smooth(x);
        y.copy_from_slice(&s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{
        build_lattice, generate_gauge, Boundary, DenseGamma5Operator, GaugeKind, Gamma5Hermitian,
        LeftGamma5, Shifted, WilsonOperator,
    };
    use crate::linalg::{materialize, sub, DenseOperator};

    fn wilson(dims: &[usize], mass: f64, kind: GaugeKind) -> WilsonOperator {
        let g = build_lattice(dims, Boundary::Periodic).unwrap();
        WilsonOperator::new(generate_gauge(&g, &kind, 1).unwrap(), mass).unwrap()
    }

    fn diag(v: &[f64]) -> DenseOperator {
        let n = v.len();
        DenseOperator(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(v[i], 0.0)
            } else {
                ZERO
            }
        }))
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<C64> {
        random_gaussian(&mut ChaCha8Rng::seed_from_u64(seed), n)
    }

    #[test]
    fn gcr_identity_single_iteration() {
        let id = diag(&[1.0; 6]);
        let b = rand_vec(6, 1);
        let (x, rep) = gcr(&id, &b, &SolveConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(norm(&sub(&x, &b)) < 1e-14);
    }

    #[test]
    fn gcr_matches_dense_solve() {
        let op = wilson(&[8, 8], 1.0, GaugeKind::Unit);
        let b = rand_vec(op.dim(), 2);
        let cfg = SolveConfig::with_tol(1e-8);
        let (x, rep) = gcr(&op, &b, &cfg).unwrap();
        assert!(rep.converged);
        let r = sub(&op.apply_vec(&x), &b);
        assert!(norm(&r) <= 1e-8 * norm(&b));
        let dense = materialize(&op).unwrap();
        let exact = dense.lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let err = norm(&sub(&x, exact.as_slice())) / norm(exact.as_slice());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gcr_iteration_cap_reports_failure() {
        let op = wilson(&[8, 8], -0.5, GaugeKind::RandomPhase { beta: 2.0 });
        let b = rand_vec(op.dim(), 3);
        let cfg = SolveConfig {
            max_iter: 1,
            ..SolveConfig::with_tol(1e-10)
        };
        let (_, rep) = gcr(&op, &b, &cfg).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!(rep.final_relres > 1e-10 && rep.final_relres.is_finite());
    }

    #[test]
    fn gcr_zero_rhs() {
        let op = wilson(&[4, 4], 0.2, GaugeKind::Unit);
        let (x, rep) = gcr(&op, &vec![ZERO; op.dim()], &SolveConfig::default()).unwrap();
        assert!(x.iter().all(|v| *v == ZERO));
        assert!(rep.converged && rep.iterations == 0);
    }

    #[test]
    fn gcr_breakdown_on_singular_operator() {
        let op = diag(&[1.0, 0.0]);
        let b = vec![ZERO, C64::new(1.0, 0.0)];
        let (_, rep) = gcr(&op, &b, &SolveConfig::default()).unwrap();
        assert!(!rep.converged);
        assert!(rep.breakdown.is_some());
    }

    #[test]
    fn invalid_config_rejected() {
        let op = diag(&[1.0]);
        let b = vec![C64::new(1.0, 0.0)];
        assert!(gcr(&op, &b, &SolveConfig::with_tol(1.5)).is_err());
        let cfg = SolveConfig {
            max_iter: 0,
            ..Default::default()
        };
        assert!(gcr(&op, &b, &cfg).is_err());
    }

    #[test]
    fn minres_finite_termination() {
        let op = diag(&[1.0, -1.0, 2.0, -2.0]);
        let b = rand_vec(4, 4);
        let (x, rep) = minres_solve(&op, &b, &SolveConfig::with_tol(1e-12)).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 4, "{}", rep.iterations);
        let expect: Vec<C64> = b
            .iter()
            .zip([1.0, -1.0, 2.0, -2.0])
            .map(|(v, d)| v / d)
            .collect();
        assert!(norm(&sub(&x, &expect)) < 1e-12);
    }

    #[test]
    fn minres_eigenvector_rhs_one_iteration() {
        let op = diag(&[3.0, -1.0, 2.0]);
        let b = vec![ZERO, C64::new(0.0, 2.0), ZERO];
        let (x, rep) = minres_solve(&op, &b, &SolveConfig::with_tol(1e-12)).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!((x[1] - C64::new(0.0, -2.0)).norm() < 1e-14);
    }

    #[test]
    fn minres_on_gamma5_form_agrees_with_gcr() {
        let op = wilson(&[4, 4], 0.3, GaugeKind::RandomPhase { beta: 2.0 });
        let b = rand_vec(op.dim(), 5);
        let cfg = SolveConfig::with_tol(1e-10);
        let (x1, _) = gcr(&op, &b, &cfg).unwrap();
        let h = LeftGamma5(&op);
        let gb = op.gamma5().apply(&b);
        let (x2, rep) = minres_solve(&h, &gb, &cfg).unwrap();
        assert!(rep.converged);
        let rel = norm(&sub(&x1, &x2)) / norm(&x1);
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn minres_rejects_non_hermitian() {
        let op = wilson(&[4, 4], 0.3, GaugeKind::Unit);
        let b = rand_vec(op.dim(), 6);
        assert!(matches!(
            minres_solve(&op, &b, &SolveConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shift_rescues_singular_hermitian_form() {
        // Aγ5 with an exact zero eigenvalue: shift the mass onto it
        let op0 = wilson(&[4, 4], 0.0, GaugeKind::RandomPhase { beta: 3.0 });
        let h = materialize(&crate::lattice::RightGamma5(&op0)).unwrap();
        let eig = h.clone().symmetric_eigen();
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        let lam = eig.eigenvalues[imin];
        let v = eig.eigenvectors.column(imin).into_owned();
        let hz = &h - (&v * v.adjoint()) * C64::new(lam, 0.0);
        let g5 = op0.gamma5().clone();
        let n = hz.nrows();
        let a = DMatrix::from_fn(n, n, |i, j| hz[(i, j)] * g5.sign(j) as f64);
        let dense_op = DenseGamma5Operator::new(a, g5).unwrap();
        let b = rand_vec(n, 7);
        let cfg = SolveConfig {
            max_iter: 400,
            ..SolveConfig::with_tol(1e-8)
        };
        let (_, stalled) = gcr(&dense_op, &b, &cfg).unwrap();
        assert!(!stalled.converged);
        let shifted = Shifted {
            op: &dense_op,
            tau: 0.2,
        };
        let (_, ok) = gcr(&shifted, &b, &cfg).unwrap();
        assert!(ok.converged, "{ok:?}");
    }

    #[test]
    fn truncated_inverse_contract_and_accounting() {
        let op = wilson(&[8, 8], 0.1, GaugeKind::RandomPhase { beta: 4.0 });
        let inv = truncated_inverse(&op, SolveConfig::with_tol(1e-2)).unwrap();
        let mut total = 0;
        for s in 0..3 {
            let b = rand_vec(op.dim(), 10 + s);
            let (y, rep) = inv.invert(&b).unwrap();
            assert!(rep.converged);
            assert!(norm(&sub(&op.apply_vec(&y), &b)) <= 1e-2 * norm(&b));
            total += rep.matvecs;
        }
        let st = inv.stats();
        assert_eq!(st.applications, 3);
        assert_eq!(st.matvecs, total);
        inv.reset_stats();
        assert_eq!(inv.stats(), InversionStats::default());

        let two = diag(&[2.0; 5]);
        let inv2 = truncated_inverse(&two, SolveConfig::with_tol(0.5)).unwrap();
        let b = rand_vec(5, 20);
        let (y, _) = inv2.invert(&b).unwrap();
        for (yi, bi) in y.iter().zip(&b) {
            assert!((yi - bi / 2.0).norm() < 1e-14);
        }
    }

    #[test]
    fn truncated_inverse_is_deterministic() {
        let op = wilson(&[8, 8], 0.05, GaugeKind::RandomPhase { beta: 3.0 });
        let inv = truncated_inverse(&op, SolveConfig::with_tol(1e-3)).unwrap();
        let b = rand_vec(op.dim(), 30);
        let (y1, r1) = inv.invert(&b).unwrap();
        let (y2, r2) = inv.invert(&b).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn smoother_properties() {
        let op = wilson(&[4, 4], 1.0, GaugeKind::RandomPhase { beta: 2.0 });
        let exact = make_smoother(&op, 40).unwrap();
        let dense_inv = materialize(&op).unwrap().try_inverse().unwrap();
        let b = rand_vec(op.dim(), 8);
        let x = exact.apply_vec(&b);
        let xd = &dense_inv * DVector::from_column_slice(&b);
        assert!(norm(&sub(&x, xd.as_slice())) / norm(xd.as_slice()) < 1e-10);

        let m = make_smoother(&op, 3).unwrap();
        assert!(m.apply_vec(&vec![ZERO; op.dim()]).iter().all(|v| *v == ZERO));
        let two_b: Vec<C64> = b.iter().map(|v| v * C64::new(0.0, 2.0)).collect();
        let lhs = m.apply_vec(&two_b);
        let rhs: Vec<C64> = m.apply_vec(&b).iter().map(|v| v * C64::new(0.0, 2.0)).collect();
        assert!(norm(&sub(&lhs, &rhs)) < 1e-12 * norm(&rhs));

        // ‖(I − M⁻¹A)x‖ < ‖x‖
        for s in 0..10 {
            let x = rand_vec(op.dim(), 100 + s);
            let ax = op.apply_vec(&x);
            let e = sub(&x, &m.apply_vec(&ax));
            assert!(norm(&e) < norm(&x));
        }
        assert!(make_smoother(&op, 0).is_err());
    }

    #[test]
    fn dense_inverse_exact() {
        let op = wilson(&[4, 4], 0.4, GaugeKind::RandomPhase { beta: 2.0 });
        let inv = DenseInverse::from_operator(&op).unwrap();
        let b = rand_vec(op.dim(), 9);
        let (x, _) = inv.invert(&b).unwrap();
        assert!(norm(&sub(&op.apply_vec(&x), &b)) < 1e-12 * norm(&b));
        assert_eq!(inv.stats().applications, 1);
    }
}
