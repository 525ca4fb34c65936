//! Hutchinson trace estimation of `A⁻¹` with orthogonal and oblique
//! deflation, a-posteriori rank analysis, jackknife errors and the truncated
//! solver correction.
//!
//! Each noise vector contributes one sample: the weighted sum of the
//! quadratic forms of its probing/dilution slots (see [`ProbeSet`]).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::eigen::dense_hermitian_eig;
use crate::error::{Error, Result};
use crate::krylov::{Inverter, SolveConfig, TruncatedInverse};
use crate::lattice::{Gamma5, Gamma5Hermitian};
use crate::linalg::{dot, orthonormality_error, LinearOperator, C64, ZERO};
use crate::multigrid::Prolongator;
use crate::probing::{noise_batch, NoiseKind, ProbeSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEstimate {
    pub mean: C64,
    /// One stochastic sample per noise vector.
    pub samples: Vec<C64>,
    pub s: usize,
    /// Empirical sample variance divided by `s`.
    pub variance: f64,
    /// Jackknife error of `variance`.
    pub jackknife_err: f64,
    pub inversions: usize,
    /// Solves that stopped short of their tolerance.
    pub unconverged: usize,
    pub t0: C64,
    pub t1: C64,
}

impl TraceEstimate {
    fn from_samples(samples: Vec<C64>, t0: C64, inversions: usize, unconverged: usize) -> Result<Self> {
        let s = samples.len();
        if s == 0 {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        let t1 = samples.iter().sum::<C64>() / s as f64;
        let (var, err) = if s >= 2 { jackknife(&samples)? } else { (0.0, 0.0) };
        Ok(Self {
            mean: t0 + t1,
            s,
            variance: var / s as f64,
            jackknife_err: err / s as f64,
            inversions,
            unconverged,
            t0,
            t1,
            samples,
        })
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Empirical variance of a single sample.
    pub fn sample_variance(&self) -> f64 {
        self.variance * self.s as f64
    }
}

fn unbiased_variance(x: &[C64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<C64>() / n as f64;
    x.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (n - 1) as f64
}

/// Unbiased sample variance `Σ|xᵢ − x̄|²/(n−1)` and its leave-one-out
/// jackknife error. A single remaining sample has variance zero.
pub fn jackknife(samples: &[C64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("jackknife needs at least 2 samples, got {n}")));
    }
    let mean = samples.iter().sum::<C64>() / n as f64;
    let d: Vec<C64> = samples.iter().map(|x| x - mean).collect();
    let s1: C64 = d.iter().sum();
    let s2: f64 = d.iter().map(|x| x.norm_sqr()).sum();
    let var = s2 / (n - 1) as f64;
    let loo: Vec<f64> = d
        .iter()
        .map(|di| {
            if n == 2 {
                return 0.0;
            }
            let m = (n - 1) as f64;
            let rest1 = s1 - di;
            let rest2 = s2 - di.norm_sqr();
            ((rest2 - rest1.norm_sqr() / m) / (m - 1.0)).max(0.0)
        })
        .collect();
    let lbar = loo.iter().sum::<f64>() / n as f64;
    let err = ((n - 1) as f64 / n as f64 * loo.iter().map(|v| (v - lbar).powi(2)).sum::<f64>()).sqrt();
    Ok((var, err))
}

/// Runs `form(probe)` on every slot and combines slots per noise vector.
fn sample_probes<F>(probes: &ProbeSet, mut form: F) -> Result<Vec<C64>>
where
    F: FnMut(usize, usize, &[C64]) -> Result<C64>,
{
    let w = probes.weight();
    (0..probes.noise_count())
        .map(|j| {
            let mut acc = ZERO;
            for slot in 0..probes.slots() {
                acc += form(j, slot, &probes.probe(j, slot))?;
            }
            Ok(acc * w)
        })
        .collect()
}

fn solve_counted<I: Inverter + ?Sized>(inv: &I, b: &[C64], unconverged: &mut usize) -> Result<Vec<C64>> {
    let (x, rep) = inv.invert(b)?;
    if !rep.converged {
        *unconverged += 1;
        log::warn!("probe solve stopped at relres {:.2e}; sample kept", rep.final_relres);
    }
    Ok(x)
}

/// Plain estimate of `tr A⁻¹` from probe solves.
pub fn hutchinson<I: Inverter + ?Sized>(inv_op: &I, probes: &ProbeSet) -> Result<TraceEstimate> {
    if probes.dim() != inv_op.dim() {
        return Err(Error::DimensionMismatch {
            expected: inv_op.dim(),
            got: probes.dim(),
        });
    }
    let mut unconverged = 0;
    let mut inversions = 0;
    let samples = sample_probes(probes, |_, _, z| {
        let x = solve_counted(inv_op, z, &mut unconverged)?;
        inversions += 1;
        Ok(dot(z, &x) - ZERO)
    })?;
    TraceEstimate::from_samples(samples, ZERO, inversions, unconverged)
}

/// `(2/s)(‖B‖_F² − Σ|Bᵢᵢ|²)` with `s = 1`.
pub fn eq2_variance(b: &DMatrix<C64>) -> f64 {
    let fro: f64 = b.iter().map(|x| x.norm_sqr()).sum();
    let diag: f64 = b.diagonal().iter().map(|x| x.norm_sqr()).sum();
    2.0 * (fro - diag)
}

/// `Σ σᵢ⁻²`
pub fn singular_variance_estimate(sigmas: &[f64]) -> Result<f64> {
    if let Some(s) = sigmas.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("singular values must be positive, got {s}")));
    }
    Ok(sigmas.iter().map(|s| s.powi(-2)).sum())
}

/// Deterministic part over `U` plus Hutchinson on `A⁻¹(I − UU†)`. The `k`
/// solves `A⁻¹uᵢ` are reused for every probe.
pub fn deflate_orthogonal<I: Inverter + ?Sized>(
    inv_op: &I,
    u: &[Vec<C64>],
    probes: &ProbeSet,
) -> Result<TraceEstimate> {
    if probes.dim() != inv_op.dim() {
        return Err(Error::DimensionMismatch {
            expected: inv_op.dim(),
            got: probes.dim(),
        });
    }
    if u.iter().any(|v| v.len() != inv_op.dim()) {
        return Err(Error::DimensionMismatch {
            expected: inv_op.dim(),
            got: u.iter().map(Vec::len).find(|&l| l != inv_op.dim()).unwrap_or(0),
        });
    }
    let defect = orthonormality_error(u);
    if defect > 1e-6 {
        return Err(Error::Contract(format!("deflation basis not orthonormal (defect {defect:.2e})")));
    }
    let mut unconverged = 0;
    let mut inversions = 0;
    let mut y = Vec::with_capacity(u.len());
    let mut t0 = ZERO;
    for ui in u {
        let yi = solve_counted(inv_op, ui, &mut unconverged)?;
        inversions += 1;
        t0 += dot(ui, &yi);
        y.push(yi);
    }
    let samples = sample_probes(probes, |_, _, z| {
        let x = solve_counted(inv_op, z, &mut unconverged)?;
        inversions += 1;
        let mut corr = ZERO;
        if !u.is_empty() {
            let mut deflated = vec![ZERO; z.len()];
            for (ui, yi) in u.iter().zip(&y) {
                let c = dot(ui, z);
                for (d, v) in deflated.iter_mut().zip(yi) {
                    *d += c * v;
                }
            }
            corr = dot(z, &deflated);
        }
        Ok(dot(z, &x) - corr)
    })?;
    TraceEstimate::from_samples(samples, t0, inversions, unconverged)
}

/// The small factorization `Ū_r†γ5ᶜCŪ_r = ÛΛÛ†` and what follows from it.
#[derive(Debug, Clone)]
pub struct ObliqueFactor {
    pub rank: usize,
    /// Ascending in `|λ|`.
    pub lambdas: Vec<f64>,
    pub u_hat: DMatrix<C64>,
    /// `Σ (uᵢ†γ5ᶜuᵢ)/λᵢ` with `U = ŪÛ`.
    pub t0: C64,
}

impl ObliqueFactor {
    /// `Û Λ⁻¹ Û†`
    pub fn inverse(&self) -> DMatrix<C64> {
        let d = DMatrix::from_diagonal(&DVector::from_iterator(
            self.rank,
            self.lambdas.iter().map(|l| C64::new(1.0 / l, 0.0)),
        ));
        &self.u_hat * d * self.u_hat.adjoint()
    }
}

/// Factorizes the leading `rank` block given `g = Ū†γ5ᶜCŪ` and
/// `s = Ū†γ5ᶜŪ` for the full available `Ū`.
pub fn oblique_factor(g: &DMatrix<C64>, s: &DMatrix<C64>, rank: usize) -> Result<ObliqueFactor> {
    if rank > g.nrows() {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds the {} available coarse vectors",
            g.nrows()
        )));
    }
    if rank == 0 {
        return Ok(ObliqueFactor {
            rank,
            lambdas: Vec::new(),
            u_hat: DMatrix::zeros(0, 0),
            t0: ZERO,
        });
    }
    let gr = g.view((0, 0), (rank, rank)).into_owned();
    let gr = (&gr + gr.adjoint()) * C64::new(0.5, 0.0);
    let (vals, vecs) = dense_hermitian_eig(&gr)?;
    let mut idx: Vec<usize> = (0..rank).collect();
    idx.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()));
    let lambdas: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
    let u_hat = DMatrix::from_fn(rank, rank, |r, c| vecs[(r, idx[c])]);
    let max = lambdas.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    for (i, l) in lambdas.iter().enumerate() {
        if l.abs() < 1e-12 * max || *l == 0.0 {
            return Err(Error::SpuriousMode {
                index: i,
                value: l.abs(),
                threshold: 1e-12 * max,
            });
        }
    }
    let sr = s.view((0, 0), (rank, rank));
    let m = u_hat.adjoint() * sr * &u_hat;
    let t0 = (0..rank).map(|i| m[(i, i)] / lambdas[i]).sum();
    Ok(ObliqueFactor {
        rank,
        lambdas,
        u_hat,
        t0,
    })
}

/// `Ū†γ5ᶜCŪ` and `Ū†γ5ᶜŪ`.
pub fn coarse_projections<C: LinearOperator + ?Sized>(
    coarse: &C,
    gamma5: &Gamma5,
    ubar: &[Vec<C64>],
) -> (DMatrix<C64>, DMatrix<C64>) {
    let k = ubar.len();
    let cu: Vec<Vec<C64>> = ubar.iter().map(|u| coarse.apply_vec(u)).collect();
    let gu: Vec<Vec<C64>> = ubar.iter().map(|u| gamma5.apply(u)).collect();
    let g = DMatrix::from_fn(k, k, |i, j| dot(&gu[i], &cu[j]));
    let s = DMatrix::from_fn(k, k, |i, j| dot(&gu[i], &ubar[j]));
    (g, s)
}

fn check_oblique_inputs<A, C>(
    op: &A,
    prolongator: &Prolongator,
    coarse: &C,
    ubar: &[Vec<C64>],
) -> Result<()>
where
    A: LinearOperator + ?Sized,
    C: Gamma5Hermitian + ?Sized,
{
    if op.dim() != prolongator.fine_dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: prolongator.fine_dim(),
        });
    }
    if coarse.dim() != prolongator.coarse_dim() || coarse.gamma5() != prolongator.coarse_gamma5() {
        return Err(Error::Contract("coarse operator does not belong to the prolongator".into()));
    }
    if let Some(u) = ubar.iter().find(|u| u.len() != coarse.dim()) {
        return Err(Error::DimensionMismatch {
            expected: coarse.dim(),
            got: u.len(),
        });
    }
    Ok(())
}

/// Solves `A⁻¹_ξ (A W ūᵢ)` for each coarse vector.
fn solve_lifted<A, I>(
    op: &A,
    inv_op: &I,
    prolongator: &Prolongator,
    ubar: &[Vec<C64>],
    unconverged: &mut usize,
) -> Result<Vec<Vec<C64>>>
where
    A: LinearOperator + ?Sized,
    I: Inverter + ?Sized,
{
    ubar.iter()
        .map(|u| solve_counted(inv_op, &op.apply_vec(&prolongator.prolong(u)), unconverged))
        .collect()
}

/// Algorithm of the coarse oblique deflation. `ubar` holds the coarse
/// vectors spanning the deflation space, ordered so that the leading ones
/// are kept first; the right singular vectors `v = ±γ5ᶜx` of the coarse
/// operator make the projector spectral when `W` is square.
pub fn deflate_oblique_coarse<A, I, C>(
    op: &A,
    inv_op: &I,
    prolongator: &Prolongator,
    coarse: &C,
    ubar: &[Vec<C64>],
    rank: usize,
    probes: &ProbeSet,
) -> Result<TraceEstimate>
where
    A: LinearOperator + ?Sized,
    I: Inverter + ?Sized,
    C: Gamma5Hermitian + ?Sized,
{
    check_oblique_inputs(op, prolongator, coarse, ubar)?;
    if rank > ubar.len() {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds the {} available coarse vectors",
            ubar.len()
        )));
    }
    let ubar = &ubar[..rank];
    let g5c = prolongator.coarse_gamma5();
    let (g, s) = coarse_projections(coarse, g5c, ubar);
    let factor = oblique_factor(&g, &s, rank)?;
    let minv = factor.inverse();
    let mut unconverged = 0;
    let lifted = solve_lifted(op, inv_op, prolongator, ubar, &mut unconverged)?;
    let mut inversions = lifted.len();
    let samples = sample_probes(probes, |_, _, z| {
        let x = solve_counted(inv_op, z, &mut unconverged)?;
        inversions += 1;
        let mut corr = ZERO;
        if rank > 0 {
            let (a, b) = probe_coefficients(prolongator, g5c, ubar, &lifted, z);
            corr = oblique_correction(&a, &b, &minv, rank);
        }
        Ok(dot(z, &x) - corr)
    })?;
    TraceEstimate::from_samples(samples, factor.t0, inversions, unconverged)
}

/// `a = Y†z` with `Y = A⁻¹_ξ A W Ū` and `b = Ū†γ5ᶜW†z`.
fn probe_coefficients(
    prolongator: &Prolongator,
    g5c: &Gamma5,
    ubar: &[Vec<C64>],
    lifted: &[Vec<C64>],
    z: &[C64],
) -> (Vec<C64>, Vec<C64>) {
    let c = g5c.apply(&prolongator.restrict(z));
    let a = lifted.iter().map(|y| dot(y, z)).collect();
    let b = ubar.iter().map(|u| dot(u, &c)).collect();
    (a, b)
}

/// `a[:r]† M_r⁻¹ b[:r]`
fn oblique_correction(a: &[C64], b: &[C64], minv: &DMatrix<C64>, r: usize) -> C64 {
    let mut acc = ZERO;
    for i in 0..r {
        let mut row = ZERO;
        for j in 0..r {
            row += minv[(i, j)] * b[j];
        }
        acc += a[i].conj() * row;
    }
    acc
}

/// Stored products of one run of probe solves, enough to evaluate the
/// oblique deflation at any rank up to `k_max` without further solves.
#[derive(Debug, Clone)]
pub struct PosteriorAnalysis {
    pub rank_grid: Vec<usize>,
    /// `z†A⁻¹_ξz` per noise vector and slot.
    q: Vec<Vec<C64>>,
    /// `(A⁻¹_ξAWŪ)†z` per noise vector and slot, length `k_max`.
    a: Vec<Vec<Vec<C64>>>,
    /// `Ū†γ5ᶜW†z` per noise vector and slot.
    b: Vec<Vec<Vec<C64>>>,
    g: DMatrix<C64>,
    s: DMatrix<C64>,
    weight: f64,
    inversions: usize,
    unconverged: usize,
    /// Estimates per entry of `rank_grid`.
    pub estimates: Vec<TraceEstimate>,
}

impl PosteriorAnalysis {
    pub fn k_max(&self) -> usize {
        self.g.nrows()
    }

    /// Number of stored scalars.
    pub fn stored_entries(&self) -> usize {
        let per_probe: usize = self
            .q
            .iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((q, a), b)| q.len() + a.iter().map(Vec::len).sum::<usize>() + b.iter().map(Vec::len).sum::<usize>())
            .sum();
        per_probe + self.g.len() + self.s.len()
    }

    pub fn probe_count(&self) -> usize {
        self.q.iter().map(Vec::len).sum()
    }

    /// Evaluates the deflated estimate at rank `r` from the stored products.
    pub fn evaluate(&self, r: usize) -> Result<TraceEstimate> {
        let factor = oblique_factor(&self.g, &self.s, r)?;
        let minv = factor.inverse();
        let samples: Vec<C64> = self
            .q
            .iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((q, a), b)| {
                let mut acc = ZERO;
                for (slot, qv) in q.iter().enumerate() {
                    let corr = if r > 0 {
                        oblique_correction(&a[slot], &b[slot], &minv, r)
                    } else {
                        ZERO
                    };
                    acc += qv - corr;
                }
                acc * self.weight
            })
            .collect();
        TraceEstimate::from_samples(samples, factor.t0, self.inversions, self.unconverged)
    }
}

/// Solves every probe once, keeps only small products and evaluates the
/// oblique deflation for each rank in `rank_grid`.
pub fn posterior_rank_sweep<A, I, C>(
    op: &A,
    inv_op: &I,
    prolongator: &Prolongator,
    coarse: &C,
    ubar: &[Vec<C64>],
    probes: &ProbeSet,
    rank_grid: &[usize],
) -> Result<PosteriorAnalysis>
where
    A: LinearOperator + ?Sized,
    I: Inverter + ?Sized,
    C: Gamma5Hermitian + ?Sized,
{
    check_oblique_inputs(op, prolongator, coarse, ubar)?;
    let k_max = rank_grid.iter().copied().max().unwrap_or(0);
    if k_max > ubar.len() {
        return Err(Error::InvalidArgument(format!(
            "rank grid reaches {k_max} but only {} coarse vectors are available",
            ubar.len()
        )));
    }
    let ubar = &ubar[..k_max];
    let g5c = prolongator.coarse_gamma5();
    let (g, s) = coarse_projections(coarse, g5c, ubar);
    let mut unconverged = 0;
    let lifted = solve_lifted(op, inv_op, prolongator, ubar, &mut unconverged)?;
    let mut inversions = lifted.len();
    let mut q = Vec::with_capacity(probes.noise_count());
    let mut a = Vec::with_capacity(probes.noise_count());
    let mut b = Vec::with_capacity(probes.noise_count());
    for j in 0..probes.noise_count() {
        let (mut qj, mut aj, mut bj) = (Vec::new(), Vec::new(), Vec::new());
        for slot in 0..probes.slots() {
            let z = probes.probe(j, slot);
            let x = solve_counted(inv_op, &z, &mut unconverged)?;
            inversions += 1;
            qj.push(dot(&z, &x));
            let (av, bv) = probe_coefficients(prolongator, g5c, ubar, &lifted, &z);
            aj.push(av);
            bj.push(bv);
        }
        q.push(qj);
        a.push(aj);
        b.push(bj);
    }
    let mut out = PosteriorAnalysis {
        rank_grid: rank_grid.to_vec(),
        q,
        a,
        b,
        g,
        s,
        weight: probes.weight(),
        inversions,
        unconverged,
        estimates: Vec::new(),
    };
    out.estimates = rank_grid.iter().map(|&r| out.evaluate(r)).collect::<Result<_>>()?;
    Ok(out)
}

/// Truncated-solver bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct TsmCorrection {
    pub mean: C64,
    /// Variance of `mean`.
    pub variance: f64,
    pub samples: Vec<C64>,
}

/// Estimates `tr(A⁻¹_{ξ_high} − A⁻¹_{ξ_low})` from `s_corr` z4 noise
/// vectors; both solves use restarted GCR.
pub fn tsm_correction<A: LinearOperator>(
    op: &A,
    xi_low: f64,
    xi_high: f64,
    s_corr: usize,
    seed: u64,
) -> Result<TsmCorrection> {
    if xi_high > xi_low {
        return Err(Error::InvalidArgument(format!(
            "need xi_high <= xi_low (got {xi_high} > {xi_low})"
        )));
    }
    if s_corr == 0 {
        return Err(Error::InvalidArgument("s_corr must be at least 1".into()));
    }
    let low = TruncatedInverse::new(op, SolveConfig::with_tol(xi_low))?;
    let high = TruncatedInverse::new(op, SolveConfig::with_tol(xi_high))?;
    let noise = noise_batch(NoiseKind::Z4, op.dim(), s_corr, seed);
    let samples: Vec<C64> = noise
        .iter()
        .map(|x| {
            let (yh, _) = high.invert(x)?;
            let (yl, _) = low.invert(x)?;
            let d: Vec<C64> = yh.iter().zip(&yl).map(|(h, l)| h - l).collect();
            Ok(dot(x, &d))
        })
        .collect::<Result<_>>()?;
    let mean = samples.iter().sum::<C64>() / s_corr as f64;
    Ok(TsmCorrection {
        mean,
        variance: unbiased_variance(&samples) / s_corr as f64,
        samples,
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub rank: usize,
    pub hp_count: usize,
    pub variance: f64,
    pub jackknife_err: f64,
    pub t0_re: f64,
    pub t0_im: f64,
    pub estimate_re: f64,
    pub estimate_im: f64,
    pub inversions: usize,
}

impl ResultRow {
    pub fn new(rank: usize, hp_count: usize, e: &TraceEstimate) -> Self {
        Self {
            rank,
            hp_count,
            variance: e.variance,
            jackknife_err: e.jackknife_err,
            t0_re: e.t0.re,
            t0_im: e.t0.im,
            estimate_re: e.mean.re,
            estimate_im: e.mean.im,
            inversions: e.inversions,
        }
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
