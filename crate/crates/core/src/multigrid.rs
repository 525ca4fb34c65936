//! Adaptive two-grid machinery: null-vector setup, chirality-preserving
//! blocking, Galerkin coarse operators and the two-grid cycle.
//!
//! Prolongator columns are ordered block by block; inside a block the
//! `+1`-chirality columns come first. That order defines the coarse site
//! layout and the coarse `γ5`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{gcr, gcr_solve, Inverter, InversionStats, SolveConfig, SolveReport, Smoother};
use crate::lattice::{
    Boundary, Gamma5, Gamma5Hermitian, LatticeGeometry, LatticeOperator, SiteLayout,
};
use crate::linalg::{
    axpy, check_dim, dot, norm, normalize, orthogonalize, random_gaussian, LinearOperator,
    SparseMatrix, C64, ZERO,
};

/// Disjoint hypercubic blocks tiling a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockingScheme {
    block_dims: Vec<usize>,
    fine: LatticeGeometry,
    coarse: LatticeGeometry,
    block_of_site: Vec<usize>,
}

impl BlockingScheme {
    pub fn new(fine: &LatticeGeometry, block_dims: &[usize]) -> Result<Self> {
        if block_dims.len() != fine.ndim() {
            return Err(Error::InvalidGeometry(format!(
                "blocking {block_dims:?} does not match a {}-dimensional lattice",
                fine.ndim()
            )));
        }
        let mut coarse_dims = Vec::with_capacity(block_dims.len());
        for (&l, &b) in fine.dims().iter().zip(block_dims) {
            if b == 0 || l % b != 0 {
                return Err(Error::InvalidGeometry(format!(
                    "block extent {b} does not divide lattice extent {l}"
                )));
            }
            coarse_dims.push(l / b);
        }
        let coarse = LatticeGeometry::new(&coarse_dims, Boundary::Periodic)?;
        let block_of_site = (0..fine.site_count())
            .map(|s| {
                let c: Vec<usize> = fine
                    .coords(s)
                    .iter()
                    .zip(block_dims)
                    .map(|(x, b)| x / b)
                    .collect();
                coarse.site_index(&c)
            })
            .collect();
        Ok(Self {
            block_dims: block_dims.to_vec(),
            fine: fine.clone(),
            coarse,
            block_of_site,
        })
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    /// Number of blocks `m`.
    pub fn block_count(&self) -> usize {
        self.coarse.site_count()
    }

    pub fn block_of_site(&self, site: usize) -> usize {
        self.block_of_site[site]
    }

    pub fn fine_geometry(&self) -> &LatticeGeometry {
        &self.fine
    }

    /// The lattice formed by the blocks themselves.
    pub fn coarse_geometry(&self) -> &LatticeGeometry {
        &self.coarse
    }

    pub fn sites_of_block(&self, block: usize) -> Vec<usize> {
        (0..self.fine.site_count())
            .filter(|&s| self.block_of_site[s] == block)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NullVectors {
    pub vectors: Vec<Vec<C64>>,
    /// `‖A y‖ / ‖A y₀‖` at the end of each relaxation.
    pub residuals: Vec<f64>,
    /// Vectors whose relaxation collapsed to zero; these keep the random
    /// start instead.
    pub degenerate: Vec<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullVectorConfig {
    pub count: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NullVectorConfig {
    fn default() -> Self {
        Self {
            count: 8,
            tol: 1e-2,
            max_iter: 200,
        }
    }
}

fn relax_to_null<A: LinearOperator + ?Sized>(
    op: &A,
    y0: &[C64],
    cfg: &SolveConfig,
) -> Result<(Vec<C64>, SolveReport, f64)> {
    // A y = 0 from guess y0 is A d = A y0 with y = y0 − d
    let ay0 = op.apply_vec(y0);
    let (d, report) = gcr(op, &ay0, cfg)?;
    let y: Vec<C64> = y0.iter().zip(&d).map(|(a, b)| a - b).collect();
    let rel = norm(&op.apply_vec(&y)) / norm(&ay0);
    Ok((y, report, rel))
}

/// Relaxes `A y = 0` from `n` random starts. Each solve stops at relative
/// residual `tol` (against the starting residual) or after `max_iter`
/// iterations; results are normalized.
pub fn generate_null_vectors<A: LinearOperator + ?Sized>(
    op: &A,
    n: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<NullVectors> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one null vector".into()));
    }
    let cfg = SolveConfig {
        tol,
        max_iter,
        restart: 32,
        ..SolveConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = op.dim();
    let mut out = NullVectors {
        vectors: Vec::with_capacity(n),
        residuals: Vec::with_capacity(n),
        degenerate: Vec::with_capacity(n),
        seed,
    };
    for i in 0..n {
        let mut attempt = 0;
        let (mut y, rel, degenerate) = loop {
            let y0 = random_gaussian(&mut rng, dim);
            let (y, report, rel) = relax_to_null(op, &y0, &cfg)?;
            if report.breakdown.is_some() && report.iterations == 0 {
                attempt += 1;
                if attempt >= 3 {
                    return Err(Error::Breakdown(format!(
                        "null vector {i}: solver broke down on 3 random starts"
                    )));
                }
                continue;
            }
            if norm(&y) > 1e-8 * norm(&y0) {
                break (y, rel, false);
            }
            // relaxation annihilated the start (e.g. A = I): keep one
            // smoothing step instead, or the raw start if that collapses too
            let one = SolveConfig {
                max_iter: 1,
                ..cfg
            };
            let (y1, _, rel1) = relax_to_null(op, &y0, &one)?;
            log::warn!("null vector {i} degenerate after relaxation; regenerated");
            if norm(&y1) > 1e-8 * norm(&y0) {
                break (y1, rel1, true);
            }
            break (y0, 1.0, true);
        };
        normalize(&mut y);
        out.vectors.push(y);
        out.residuals.push(rel);
        out.degenerate.push(degenerate);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct Column {
    block: usize,
    chirality: i8,
    /// Fine indices of the support and the values there.
    support: Vec<usize>,
    values: Vec<C64>,
}

/// Orthonormal, chirality-preserving prolongator `V` with `γ5 V = V γ5ᶜ`.
#[derive(Debug, Clone)]
pub struct Prolongator {
    blocking: BlockingScheme,
    fine_dim: usize,
    columns: Vec<Column>,
    coarse_gamma5: Gamma5,
    coarse_layout: SiteLayout,
    dropped: usize,
}

/// Fine indices of `block` with the given chirality, ascending.
fn chiral_indices(
    blocking: &BlockingScheme,
    layout: &SiteLayout,
    gamma5: &Gamma5,
    block: usize,
    chirality: i8,
) -> Vec<usize> {
    blocking
        .sites_of_block(block)
        .into_iter()
        .flat_map(|s| layout.site_range(s))
        .filter(|&i| gamma5.sign(i) == chirality)
        .collect()
}

/// Blocks each null vector, splits it by chirality and orthonormalizes per
/// (block, chirality) with two passes of modified Gram-Schmidt. Columns whose
/// remaining norm falls below `1e-8` of their block piece are dropped.
pub fn build_prolongator<A: LatticeOperator + ?Sized>(
    op: &A,
    null_vectors: &NullVectors,
    blocking: &BlockingScheme,
) -> Result<Prolongator> {
    let layout = op.layout();
    let gamma5 = op.gamma5();
    if layout.geometry().dims() != blocking.fine_geometry().dims() {
        return Err(Error::InvalidGeometry(
            "blocking was built for a different lattice".into(),
        ));
    }
    for v in &null_vectors.vectors {
        check_dim(op.dim(), v.len())?;
    }
    let n = null_vectors.vectors.len();
    let mut columns = Vec::new();
    let mut counts = Vec::with_capacity(blocking.block_count());
    let mut dropped = 0;
    for block in 0..blocking.block_count() {
        let mut in_block = 0;
        for chirality in [1i8, -1] {
            let idx = chiral_indices(blocking, layout, gamma5, block, chirality);
            if n > idx.len() {
                return Err(Error::InvalidArgument(format!(
                    "{n} null vectors exceed the {} components of chirality {chirality:+} in block {block}",
                    idx.len()
                )));
            }
            let mut accepted: Vec<Vec<C64>> = Vec::new();
            for (k, y) in null_vectors.vectors.iter().enumerate() {
                let mut piece: Vec<C64> = idx.iter().map(|&i| y[i]).collect();
                let before = norm(&piece);
                let after = orthogonalize(&accepted, &mut piece);
                if before == 0.0 || after < 1e-8 * before {
                    log::warn!(
                        "block {block} chirality {chirality:+}: null vector {k} is rank deficient, column dropped"
                    );
                    dropped += 1;
                    continue;
                }
                normalize(&mut piece);
                accepted.push(piece);
            }
            if accepted.is_empty() {
                return Err(Error::EmptyBlock { block, chirality });
            }
            in_block += accepted.len();
            columns.extend(accepted.into_iter().map(|values| Column {
                block,
                chirality,
                support: idx.clone(),
                values,
            }));
        }
        counts.push(in_block);
    }
    let coarse_gamma5 = Gamma5::new(columns.iter().map(|c| c.chirality).collect())?;
    let coarse_layout = SiteLayout::from_counts(blocking.coarse_geometry().clone(), &counts)?;
    Ok(Prolongator {
        blocking: blocking.clone(),
        fine_dim: op.dim(),
        columns,
        coarse_gamma5,
        coarse_layout,
        dropped,
    })
}

impl Prolongator {
    pub fn fine_dim(&self) -> usize {
        self.fine_dim
    }

    pub fn coarse_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn blocking(&self) -> &BlockingScheme {
        &self.blocking
    }

    pub fn coarse_gamma5(&self) -> &Gamma5 {
        &self.coarse_gamma5
    }

    pub fn coarse_layout(&self) -> &SiteLayout {
        &self.coarse_layout
    }

    /// Columns removed as rank deficient during setup.
    pub fn dropped_columns(&self) -> usize {
        self.dropped
    }

    pub fn column_block(&self, j: usize) -> usize {
        self.columns[j].block
    }

    pub fn column_chirality(&self, j: usize) -> i8 {
        self.columns[j].chirality
    }

    /// Column `j` as a full fine vector.
    pub fn column(&self, j: usize) -> Vec<C64> {
        let mut v = vec![ZERO; self.fine_dim];
        let c = &self.columns[j];
        for (&i, &x) in c.support.iter().zip(&c.values) {
            v[i] = x;
        }
        v
    }

    /// `V w`
    pub fn prolong(&self, w: &[C64]) -> Vec<C64> {
        debug_assert_eq!(w.len(), self.coarse_dim());
        let mut v = vec![ZERO; self.fine_dim];
        for (c, &wj) in self.columns.iter().zip(w) {
            for (&i, &x) in c.support.iter().zip(&c.values) {
                v[i] += x * wj;
            }
        }
        v
    }

    /// `V† v`
    pub fn restrict(&self, v: &[C64]) -> Vec<C64> {
        debug_assert_eq!(v.len(), self.fine_dim);
        self.columns
            .iter()
            .map(|c| {
                c.support
                    .iter()
                    .zip(&c.values)
                    .fold(ZERO, |acc, (&i, x)| acc + x.conj() * v[i])
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.fine_dim, self.coarse_dim());
        for (j, c) in self.columns.iter().enumerate() {
            for (&i, &x) in c.support.iter().zip(&c.values) {
                m[(i, j)] = x;
            }
        }
        m
    }

    /// `‖V†V − I‖_max`
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, ca) in self.columns.iter().enumerate() {
            for (b, cb) in self.columns.iter().enumerate().skip(a) {
                if ca.block != cb.block || ca.chirality != cb.chirality {
                    continue;
                }
                let d = dot(&ca.values, &cb.values);
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - target).norm());
            }
        }
        worst
    }

    /// Checks `γ5 V = V γ5ᶜ` entry by entry; no arithmetic is involved.
    pub fn preserves_chirality(&self, fine_gamma5: &Gamma5) -> bool {
        self.columns.iter().all(|c| {
            c.support
                .iter()
                .zip(&c.values)
                .all(|(&i, x)| *x == ZERO || fine_gamma5.sign(i) == c.chirality)
        })
    }
}

/// Galerkin coarse operator `V†AV` with its coarse `γ5`.
#[derive(Debug, Clone)]
pub struct CoarseOperator {
    matrix: SparseMatrix,
    gamma5: Gamma5,
    layout: SiteLayout,
    level: usize,
}

impl CoarseOperator {
    pub fn level(&self) -> usize {
        self.level
    }

    /// `‖γ5ᶜ C γ5ᶜ − C†‖_max / ‖C‖_max`
    pub fn gamma5_hermiticity_defect(&self) -> f64 {
        let n = self.matrix.n_rows();
        let mut worst: f64 = 0.0;
        let dense_like: std::collections::HashMap<(usize, usize), C64> = (0..n)
            .flat_map(|r| self.matrix.row(r).map(move |(c, v)| ((r, c), v)))
            .collect();
        for (&(r, c), &v) in &dense_like {
            let lhs = v * (self.gamma5.sign(r) * self.gamma5.sign(c)) as f64;
            let rhs = dense_like.get(&(c, r)).copied().unwrap_or(ZERO).conj();
            worst = worst.max((lhs - rhs).norm());
        }
        worst / self.matrix.max_abs().max(f64::MIN_POSITIVE)
    }
}

impl LinearOperator for CoarseOperator {
    fn dim(&self) -> usize {
        self.matrix.n_rows()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.matrix.mul_vec(x, y)
    }
}

impl Gamma5Hermitian for CoarseOperator {
    fn gamma5(&self) -> &Gamma5 {
        &self.gamma5
    }
    fn apply_dagger(&self, x: &[C64], y: &mut [C64]) {
        self.matrix.mul_adjoint_vec(x, y)
    }
}

impl LatticeOperator for CoarseOperator {
    fn layout(&self) -> &SiteLayout {
        &self.layout
    }
    fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }
}

/// Assembles `V†AV` column by column, keeping couplings between a block, its
/// nearest-neighbor blocks and itself.
pub fn build_coarse_operator<A: LinearOperator + ?Sized>(
    op: &A,
    prolongator: &Prolongator,
    level: usize,
) -> Result<CoarseOperator> {
    check_dim(op.dim(), prolongator.fine_dim())?;
    let nc = prolongator.coarse_dim();
    let cg = prolongator.blocking().coarse_geometry();
    let mut triplets = Vec::new();
    for j in 0..nc {
        let av = op.apply_vec(&prolongator.column(j));
        let bj = prolongator.column_block(j);
        let mut near = vec![bj];
        for mu in 0..cg.ndim() {
            near.push(cg.neighbor(bj, mu, true).0);
            near.push(cg.neighbor(bj, mu, false).0);
        }
        for (i, col) in prolongator.columns.iter().enumerate() {
            if !near.contains(&col.block) {
                continue;
            }
            let v = col
                .support
                .iter()
                .zip(&col.values)
                .fold(ZERO, |acc, (&k, x)| acc + x.conj() * av[k]);
            if v != ZERO {
                triplets.push((i, j, v));
            }
        }
    }
    let matrix = SparseMatrix::from_triplets(nc, nc, triplets)?;
    let coarse = CoarseOperator {
        matrix,
        gamma5: prolongator.coarse_gamma5().clone(),
        layout: prolongator.coarse_layout().clone(),
        level,
    };
    let defect = coarse.gamma5_hermiticity_defect();
    if defect > 1e-10 {
        return Err(Error::Contract(format!(
            "coarse operator lost gamma5-Hermiticity (defect {defect:.3e})"
        )));
    }
    Ok(coarse)
}

/// `sin∠(range V, v) = sqrt(max(0, 1 − ‖V†v‖²))` for unit vectors `v`.
pub fn subspace_angles(prolongator: &Prolongator, vectors: &[Vec<C64>]) -> Vec<f64> {
    vectors
        .iter()
        .map(|v| {
            let p = norm(&prolongator.restrict(v));
            (1.0 - p * p).max(0.0).sqrt()
        })
        .collect()
}

/// Two-grid iteration used as an inverse: coarse-grid correction followed by
/// smoothing, repeated until `‖b − Ax‖ ≤ tol‖b‖` or `max_cycles`.
pub struct TwoGridInverter<'a, A: LinearOperator> {
    op: &'a A,
    prolongator: &'a Prolongator,
    coarse_inverter: Box<dyn Inverter + 'a>,
    smoother: Smoother<&'a A>,
    tol: f64,
    max_cycles: usize,
    applications: AtomicUsize,
    cycles: AtomicUsize,
    matvecs: AtomicUsize,
    unconverged: AtomicUsize,
}

impl<'a, A: LinearOperator> TwoGridInverter<'a, A> {
    pub fn new(
        op: &'a A,
        prolongator: &'a Prolongator,
        coarse_inverter: Box<dyn Inverter + 'a>,
        smoother: Smoother<&'a A>,
        tol: f64,
        max_cycles: usize,
    ) -> Result<Self> {
        check_dim(op.dim(), prolongator.fine_dim())?;
        check_dim(prolongator.coarse_dim(), coarse_inverter.dim())?;
        if !(tol > 0.0 && tol < 1.0) || max_cycles == 0 {
            return Err(Error::InvalidArgument(format!(
                "two-grid needs tol in (0,1) and max_cycles >= 1 (got {tol}, {max_cycles})"
            )));
        }
        Ok(Self {
            op,
            prolongator,
            coarse_inverter,
            smoother,
            tol,
            max_cycles,
            applications: AtomicUsize::new(0),
            cycles: AtomicUsize::new(0),
            matvecs: AtomicUsize::new(0),
            unconverged: AtomicUsize::new(0),
        })
    }

    pub fn coarse_stats(&self) -> InversionStats {
        self.coarse_inverter.stats()
    }

    /// Runs the cycle. `iterations` in the report counts cycles; `matvecs`
    /// counts fine-operator applications, smoothing included.
    pub fn solve(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)> {
        let n = self.op.dim();
        check_dim(n, b.len())?;
        let mut x = vec![ZERO; n];
        let mut report = SolveReport::default();
        let bnorm = norm(b);
        if bnorm == 0.0 {
            report.converged = true;
            return Ok((x, report));
        }
        let smooth_before = self.smoother.matvecs();
        let mut r = b.to_vec();
        let mut relres = 1.0;
        let mut best = relres;
        while report.iterations < self.max_cycles {
            report.iterations += 1;
            let (ec, _) = self.coarse_inverter.invert(&self.prolongator.restrict(&r))?;
            axpy(crate::linalg::ONE, &self.prolongator.prolong(&ec), &mut x);
            let ax = self.op.apply_vec(&x);
            report.matvecs += 1;
            let rc: Vec<C64> = b.iter().zip(&ax).map(|(bi, a)| bi - a).collect();
            let (s, _) = self.smoother.smooth(&rc);
            axpy(crate::linalg::ONE, &s, &mut x);
            let ax = self.op.apply_vec(&x);
            report.matvecs += 1;
            r = b.iter().zip(&ax).map(|(bi, a)| bi - a).collect();
            relres = norm(&r) / bnorm;
            if relres <= self.tol {
                break;
            }
            if relres > 10.0 * best {
                return Err(Error::Diverged {
                    cycles: report.iterations,
                    relres,
                });
            }
            best = best.min(relres);
        }
        report.matvecs += self.smoother.matvecs() - smooth_before;
        report.final_relres = relres;
        report.converged = relres <= self.tol;
        Ok((x, report))
    }
}

impl<A: LinearOperator> Inverter for TwoGridInverter<'_, A> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn invert(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)> {
        let (x, rep) = self.solve(b)?;
        self.applications.fetch_add(1, Ordering::Relaxed);
        self.cycles.fetch_add(rep.iterations, Ordering::Relaxed);
        self.matvecs.fetch_add(rep.matvecs, Ordering::Relaxed);
        if !rep.converged {
            self.unconverged.fetch_add(1, Ordering::Relaxed);
        }
        Ok((x, rep))
    }

    fn stats(&self) -> InversionStats {
        InversionStats {
            applications: self.applications.load(Ordering::Relaxed),
            iterations: self.cycles.load(Ordering::Relaxed),
            matvecs: self.matvecs.load(Ordering::Relaxed),
            unconverged: self.unconverged.load(Ordering::Relaxed),
        }
    }

    fn reset_stats(&self) {
        self.applications.store(0, Ordering::Relaxed);
        self.cycles.store(0, Ordering::Relaxed);
        self.matvecs.store(0, Ordering::Relaxed);
        self.unconverged.store(0, Ordering::Relaxed);
        self.coarse_inverter.reset_stats();
    }
}

/// Default coarse solve inside two-grid cycles: GCR to 1e-1. Near criticality
/// the coarse operator inherits the small singular values and GCR(32)
/// stagnates on it, so the restart is longer than the fine default.
pub fn coarse_solve_config() -> SolveConfig {
    SolveConfig {
        restart: 64,
        ..SolveConfig::with_tol(1e-1)
    }
}

/// One two-grid cycle from a zero guess, `z = e + M⁻¹(r − Ae)` with
/// `e = V C⁻¹ V† r`, exposed as an operator so it can precondition GCR.
pub struct TwoGridCycle<'a, A: LinearOperator> {
    op: &'a A,
    prolongator: &'a Prolongator,
    coarse_inverter: Box<dyn Inverter + 'a>,
    smoother: Smoother<&'a A>,
    matvecs: AtomicUsize,
}

impl<'a, A: LinearOperator> TwoGridCycle<'a, A> {
    pub fn new(
        op: &'a A,
        prolongator: &'a Prolongator,
        coarse_inverter: Box<dyn Inverter + 'a>,
        smoother: Smoother<&'a A>,
    ) -> Result<Self> {
        check_dim(op.dim(), prolongator.fine_dim())?;
        check_dim(prolongator.coarse_dim(), coarse_inverter.dim())?;
        Ok(Self {
            op,
            prolongator,
            coarse_inverter,
            smoother,
            matvecs: AtomicUsize::new(0),
        })
    }

    /// Fine matvecs spent so far, smoothing included.
    pub fn matvecs(&self) -> usize {
        self.matvecs.load(Ordering::Relaxed) + self.smoother.matvecs()
    }

    pub fn coarse_stats(&self) -> InversionStats {
        self.coarse_inverter.stats()
    }
}

impl<A: LinearOperator> LinearOperator for TwoGridCycle<'_, A> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let ec = match self.coarse_inverter.invert(&self.prolongator.restrict(x)) {
            Ok((ec, _)) => ec,
            Err(e) => {
                log::warn!("coarse solve failed inside cycle, smoothing only: {e}");
                vec![ZERO; self.prolongator.coarse_dim()]
            }
        };
        let mut z = self.prolongator.prolong(&ec);
        let az = self.op.apply_vec(&z);
        self.matvecs.fetch_add(1, Ordering::Relaxed);
        let rc: Vec<C64> = x.iter().zip(&az).map(|(a, b)| a - b).collect();
        let (s, _) = self.smoother.smooth(&rc);
        axpy(crate::linalg::ONE, &s, &mut z);
        y.copy_from_slice(&z);
    }
}

/// Flexible GCR preconditioned by one two-grid cycle per iteration. Unlike the
/// stationary iteration its residual never grows, which makes it the inner
/// solver of choice for eigensolves and trace estimation near criticality.
pub struct MultigridInverter<'a, A: LinearOperator> {
    op: &'a A,
    cycle: TwoGridCycle<'a, A>,
    config: SolveConfig,
    applications: AtomicUsize,
    iterations: AtomicUsize,
    matvecs: AtomicUsize,
    unconverged: AtomicUsize,
}

impl<'a, A: LinearOperator> MultigridInverter<'a, A> {
    pub fn new(op: &'a A, cycle: TwoGridCycle<'a, A>, config: SolveConfig) -> Result<Self> {
        config.validate()?;
        check_dim(op.dim(), cycle.dim())?;
        Ok(Self {
            op,
            cycle,
            config,
            applications: AtomicUsize::new(0),
            iterations: AtomicUsize::new(0),
            matvecs: AtomicUsize::new(0),
            unconverged: AtomicUsize::new(0),
        })
    }

    pub fn coarse_stats(&self) -> InversionStats {
        self.cycle.coarse_stats()
    }
}

impl<A: LinearOperator> Inverter for MultigridInverter<'_, A> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn invert(&self, b: &[C64]) -> Result<(Vec<C64>, SolveReport)> {
        let before = self.cycle.matvecs();
        let (x, mut rep) = gcr_solve(self.op, b, &self.config, Some(&self.cycle))?;
        rep.matvecs += self.cycle.matvecs() - before;
        self.applications.fetch_add(1, Ordering::Relaxed);
        self.iterations.fetch_add(rep.iterations, Ordering::Relaxed);
        self.matvecs.fetch_add(rep.matvecs, Ordering::Relaxed);
        if !rep.converged {
            self.unconverged.fetch_add(1, Ordering::Relaxed);
        }
        Ok((x, rep))
    }

    fn stats(&self) -> InversionStats {
        InversionStats {
            applications: self.applications.load(Ordering::Relaxed),
            iterations: self.iterations.load(Ordering::Relaxed),
            matvecs: self.matvecs.load(Ordering::Relaxed),
            unconverged: self.unconverged.load(Ordering::Relaxed),
        }
    }

    fn reset_stats(&self) {
        self.applications.store(0, Ordering::Relaxed);
        self.iterations.store(0, Ordering::Relaxed);
        self.matvecs.store(0, Ordering::Relaxed);
        self.unconverged.store(0, Ordering::Relaxed);
        self.cycle.coarse_inverter.reset_stats();
    }
}

/// One-shot two-grid solve.
pub fn two_grid_solve<'a, A: LinearOperator>(
    op: &'a A,
    prolongator: &'a Prolongator,
    coarse_inverter: Box<dyn Inverter + 'a>,
    smoother: Smoother<&'a A>,
    b: &[C64],
    tol: f64,
    max_cycles: usize,
) -> Result<(Vec<C64>, SolveReport)> {
    TwoGridInverter::new(op, prolongator, coarse_inverter, smoother, tol, max_cycles)?.solve(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub block_dims: Vec<usize>,
    pub null_vectors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetupConfig {
    pub null_tol: f64,
    pub null_max_iter: usize,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            null_tol: 1e-2,
            null_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Level {
    pub prolongator: Prolongator,
    pub coarse: CoarseOperator,
}

/// A stack of prolongators and coarse operators; level `l` coarsens the
/// operator of level `l − 1` (level 0 being the fine operator).
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    pub fn build<A: LatticeOperator>(
        op: &A,
        levels: &[LevelConfig],
        setup: &SetupConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut built: Vec<Level> = Vec::with_capacity(levels.len());
        for (l, cfg) in levels.iter().enumerate() {
            let level_seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(l as u64 + 1));
            let level = match built.last() {
                None => build_level(op, cfg, setup, level_seed, l + 1)?,
                Some(prev) => build_level(&prev.coarse, cfg, setup, level_seed, l + 1)?,
            };
            built.push(level);
        }
        Ok(Self { levels: built })
    }

    /// Writes `manifest.csv`, `level{L}_columns.csv` (`col,block,chirality`)
    /// and `level{L}_values.csv` (`col,site,spin,re,im`, nonzeros only).
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest)?;
        w.write_record([
            "level",
            "fine_dims",
            "block_dims",
            "fine_dim",
            "coarse_dim",
            "columns_file",
            "values_file",
        ])?;
        for (l, level) in self.levels.iter().enumerate() {
            let p = &level.prolongator;
            let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
            let cols = format!("level{}_columns.csv", l + 1);
            let vals = format!("level{}_values.csv", l + 1);
            w.write_record([
                (l + 1).to_string(),
                join(p.blocking.fine_geometry().dims()),
                join(p.blocking.block_dims()),
                p.fine_dim.to_string(),
                p.coarse_dim().to_string(),
                cols.clone(),
                vals.clone(),
            ])?;
            let mut cw = csv::Writer::from_path(dir.join(&cols))?;
            cw.write_record(["col", "block", "chirality"])?;
            for (j, c) in p.columns.iter().enumerate() {
                cw.write_record([j.to_string(), c.block.to_string(), c.chirality.to_string()])?;
            }
            cw.flush().map_err(|e| Error::io(dir.join(&cols), e))?;

            let path = dir.join(&vals);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = BufWriter::new(f);
            let fine_layout = fine_layout_of(self, l);
            writeln!(out, "col,site,spin,re,im").map_err(|e| Error::io(&path, e))?;
            for (j, c) in p.columns.iter().enumerate() {
                for (&i, x) in c.support.iter().zip(&c.values) {
                    let site = fine_layout.site_of(i);
                    let spin = i - fine_layout.site_range(site).start;
                    writeln!(out, "{j},{site},{spin},{:e},{:e}", x.re, x.im)
                        .map_err(|e| Error::io(&path, e))?;
                }
            }
            out.flush().map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&manifest, e))?;
        Ok(())
    }

    /// Rebuilds a dumped hierarchy over `op`; coarse operators are
    /// re-assembled from the loaded prolongators.
    pub fn load<A: LatticeOperator>(op: &A, dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.csv");
        let mut rdr = csv::Reader::from_path(&manifest)?;
        let mut levels: Vec<Level> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let perr = |msg: String| Error::Parse {
                path: manifest.clone(),
                line: k + 2,
                msg,
            };
            let parse_dims = |s: &str| -> Result<Vec<usize>> {
                s.split('x')
                    .map(|t| t.parse().map_err(|_| perr(format!("bad extent list '{s}'"))))
                    .collect()
            };
            let block_dims = parse_dims(&rec[2])?;
            let coarse_dim: usize = rec[4].parse().map_err(|_| perr("bad coarse_dim".into()))?;
            let level = {
                let (fine_layout, fine_g5, fine_dim) = match levels.last() {
                    None => (op.layout().clone(), op.gamma5().clone(), op.dim()),
                    Some(prev) => (
                        prev.coarse.layout().clone(),
                        prev.coarse.gamma5().clone(),
                        prev.coarse.dim(),
                    ),
                };
                let blocking = BlockingScheme::new(fine_layout.geometry(), &block_dims)?;
                let columns = read_columns(
                    &dir.join(&rec[5]),
                    &dir.join(&rec[6]),
                    &fine_layout,
                    coarse_dim,
                )?;
                for c in &columns {
                    if c.support.iter().any(|&i| fine_g5.sign(i) != c.chirality) {
                        return Err(perr("column mixes chiralities".into()));
                    }
                }
                let mut counts = vec![0usize; blocking.block_count()];
                for c in &columns {
                    counts[c.block] += 1;
                }
                let p = Prolongator {
                    coarse_gamma5: Gamma5::new(columns.iter().map(|c| c.chirality).collect())?,
                    coarse_layout: SiteLayout::from_counts(
                        blocking.coarse_geometry().clone(),
                        &counts,
                    )?,
                    blocking,
                    fine_dim,
                    columns,
                    dropped: 0,
                };
                let coarse = match levels.last() {
                    None => build_coarse_operator(op, &p, 1)?,
                    Some(prev) => build_coarse_operator(&prev.coarse, &p, levels.len() + 1)?,
                };
                Level {
                    prolongator: p,
                    coarse,
                }
            };
            levels.push(level);
        }
        Ok(Self { levels })
    }
}

fn fine_layout_of(h: &Hierarchy, level: usize) -> SiteLayout {
    if level == 0 {
        // level-1 prolongators act on the fine lattice with uniform spin dof
        let p = &h.levels[0].prolongator;
        let sites = p.blocking.fine_geometry().site_count();
        SiteLayout::uniform(p.blocking.fine_geometry().clone(), p.fine_dim / sites)
    } else {
        h.levels[level - 1].coarse.layout().clone()
    }
}

fn read_columns(
    cols_path: &Path,
    vals_path: &Path,
    layout: &SiteLayout,
    coarse_dim: usize,
) -> Result<Vec<Column>> {
    let mut columns: Vec<Column> = Vec::with_capacity(coarse_dim);
    let mut rdr = csv::Reader::from_path(cols_path)?;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let perr = |msg: &str| Error::Parse {
            path: cols_path.to_path_buf(),
            line: k + 2,
            msg: msg.into(),
        };
        let j: usize = rec[0].parse().map_err(|_| perr("bad column index"))?;
        if j != columns.len() {
            return Err(perr("columns out of order"));
        }
        columns.push(Column {
            block: rec[1].parse().map_err(|_| perr("bad block"))?,
            chirality: rec[2].parse().map_err(|_| perr("bad chirality"))?,
            support: Vec::new(),
            values: Vec::new(),
        });
    }
    if columns.len() != coarse_dim {
        return Err(Error::Parse {
            path: cols_path.to_path_buf(),
            line: 0,
            msg: format!("expected {coarse_dim} columns, found {}", columns.len()),
        });
    }
    let mut rdr = csv::Reader::from_path(vals_path)?;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let perr = |msg: &str| Error::Parse {
            path: vals_path.to_path_buf(),
            line: k + 2,
            msg: msg.into(),
        };
        let j: usize = rec[0].parse().map_err(|_| perr("bad column"))?;
        let site: usize = rec[1].parse().map_err(|_| perr("bad site"))?;
        let spin: usize = rec[2].parse().map_err(|_| perr("bad spin"))?;
        let re: f64 = rec[3].parse().map_err(|_| perr("bad re"))?;
        let im: f64 = rec[4].parse().map_err(|_| perr("bad im"))?;
        if j >= columns.len() || site >= layout.geometry().site_count() || spin >= layout.dof(site) {
            return Err(perr("index out of range"));
        }
        let c = &mut columns[j];
        c.support.push(layout.site_range(site).start + spin);
        c.values.push(C64::new(re, im));
    }
    Ok(columns)
}

fn build_level<A: LatticeOperator + ?Sized>(
    op: &A,
    cfg: &LevelConfig,
    setup: &SetupConfig,
    seed: u64,
    level: usize,
) -> Result<Level> {
    let blocking = BlockingScheme::new(op.layout().geometry(), &cfg.block_dims)?;
    let nv = generate_null_vectors(op, cfg.null_vectors, setup.null_tol, setup.null_max_iter, seed)?;
    let prolongator = build_prolongator(op, &nv, &blocking)?;
    let coarse = build_coarse_operator(op, &prolongator, level)?;
    Ok(Level {
        prolongator,
        coarse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::{make_smoother, truncated_inverse, DenseInverse};
    use crate::lattice::{build_lattice, generate_gauge, GaugeKind, WilsonOperator};
    use crate::linalg::{materialize, max_abs, sub, DenseOperator, ONE};

    fn wilson(dims: &[usize], mass: f64, beta: f64, seed: u64) -> WilsonOperator {
        let g = build_lattice(dims, Boundary::Periodic).unwrap();
        let kind = if beta.is_infinite() {
            GaugeKind::Unit
        } else {
            GaugeKind::RandomPhase { beta }
        };
        WilsonOperator::new(generate_gauge(&g, &kind, seed).unwrap(), mass).unwrap()
    }

    #[test]
    fn blocks_partition_the_lattice() {
        let g = build_lattice(&[8, 4], Boundary::Periodic).unwrap();
        let b = BlockingScheme::new(&g, &[2, 2]).unwrap();
        assert_eq!(b.block_count(), 8);
        let mut seen = vec![0usize; g.site_count()];
        for blk in 0..b.block_count() {
            let sites = b.sites_of_block(blk);
            assert_eq!(sites.len(), 4);
            for s in sites {
                seen[s] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(BlockingScheme::new(&g, &[3, 2]).is_err());
        assert!(BlockingScheme::new(&g, &[2]).is_err());
    }

    #[test]
    fn null_vectors_identity_is_flagged_degenerate() {
        let id = DenseOperator(DMatrix::identity(6, 6));
        let nv = generate_null_vectors(&id, 2, 1e-2, 200, 1).unwrap();
        assert!(nv.degenerate.iter().all(|&d| d));
        for v in &nv.vectors {
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
        assert!(generate_null_vectors(&id, 0, 1e-2, 200, 1).is_err());
    }

    #[test]
    fn null_vectors_are_seeded() {
        let op = wilson(&[8, 8], 0.0, 3.0, 2);
        let a = generate_null_vectors(&op, 3, 1e-2, 200, 5).unwrap();
        let b = generate_null_vectors(&op, 3, 1e-2, 200, 5).unwrap();
        let c = generate_null_vectors(&op, 3, 1e-2, 200, 6).unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(c.vectors.len(), 3);
        assert_ne!(a.vectors, c.vectors);
    }

    #[test]
    fn constant_vector_blocking() {
        let op = wilson(&[4, 4], 0.5, f64::INFINITY, 0);
        let nv = NullVectors {
            vectors: vec![vec![ONE; op.dim()]],
            residuals: vec![0.0],
            degenerate: vec![false],
            seed: 0,
        };
        let blocking = BlockingScheme::new(op.geometry(), &[2, 2]).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        assert_eq!(p.coarse_dim(), 8);
        let v = p.to_dense();
        let vtv = v.adjoint() * &v;
        assert!(max_abs(&(vtv - DMatrix::identity(8, 8))) < 1e-12);
        assert!(p.preserves_chirality(op.gamma5()));
        // exact placement identity γ5 V = V γ5ᶜ
        let g = op.gamma5();
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                let lhs = v[(i, j)] * g.sign(i) as f64;
                let rhs = v[(i, j)] * p.coarse_gamma5().sign(j) as f64;
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn too_many_null_vectors_rejected_and_empty_block_detected() {
        let op = wilson(&[4, 4], 0.5, f64::INFINITY, 0);
        let blocking = BlockingScheme::new(op.geometry(), &[2, 2]).unwrap();
        let nv = generate_null_vectors(&op, 5, 1e-2, 50, 1).unwrap();
        assert!(build_prolongator(&op, &nv, &blocking).is_err());
        // a null vector supported on spin 0 only leaves every − sector empty
        let mut v = vec![ZERO; op.dim()];
        for s in 0..16 {
            v[2 * s] = ONE;
        }
        let nv = NullVectors {
            vectors: vec![v],
            residuals: vec![0.0],
            degenerate: vec![false],
            seed: 0,
        };
        assert!(matches!(
            build_prolongator(&op, &nv, &blocking),
            Err(Error::EmptyBlock { chirality: -1, .. })
        ));
    }

    #[test]
    fn rank_deficient_columns_dropped() {
        let op = wilson(&[4, 4], 0.5, 2.0, 1);
        let blocking = BlockingScheme::new(op.geometry(), &[2, 2]).unwrap();
        let mut nv = generate_null_vectors(&op, 2, 1e-2, 50, 3).unwrap();
        let dup = nv.vectors[0].clone();
        nv.vectors.push(dup);
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        assert_eq!(p.dropped_columns(), 8);
        assert_eq!(p.coarse_dim(), 4 * 2 * 2);
        assert!(p.orthonormality_error() < 1e-12);
    }

    #[test]
    fn galerkin_identity_and_coarse_hermiticity() {
        let op = wilson(&[8, 8], -0.2, 2.5, 4);
        let blocking = BlockingScheme::new(op.geometry(), &[4, 4]).unwrap();
        let nv = generate_null_vectors(&op, 4, 1e-2, 200, 8).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        assert!(p.orthonormality_error() < 1e-12);
        let c = build_coarse_operator(&op, &p, 1).unwrap();
        assert!(c.gamma5_hermiticity_defect() <= 1e-12);
        let v = p.to_dense();
        let dense = materialize(&op).unwrap();
        let galerkin = v.adjoint() * dense * &v;
        let cd = c.matrix().to_dense().unwrap();
        assert!(max_abs(&(&galerkin - &cd)) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_gaussian(&mut rng, p.coarse_dim());
        let lhs = p.restrict(&op.apply_vec(&p.prolong(&w)));
        let rhs = c.apply_vec(&w);
        assert!(norm(&sub(&lhs, &rhs)) < 1e-12 * norm(&rhs));
        // sparsity: blocks couple to self and nearest neighbours only
        let cg = blocking.coarse_geometry();
        for r in 0..c.dim() {
            for (col, _) in c.matrix().row(r) {
                let (br, bc) = (p.column_block(r), p.column_block(col));
                let near = br == bc
                    || (0..2).any(|mu| {
                        cg.neighbor(bc, mu, true).0 == br || cg.neighbor(bc, mu, false).0 == br
                    });
                assert!(near);
            }
        }
    }

    #[test]
    fn identity_blocking_gives_similar_operator() {
        let op = wilson(&[4, 4], 0.3, 2.0, 5);
        let blocking = BlockingScheme::new(op.geometry(), &[1, 1]).unwrap();
        let nv = generate_null_vectors(&op, 1, 1e-2, 50, 2).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        assert_eq!(p.coarse_dim(), op.dim());
        let c = build_coarse_operator(&op, &p, 1).unwrap();
        let sa = materialize(&op).unwrap().singular_values();
        let sc = c.matrix().to_dense().unwrap().singular_values();
        let mut a: Vec<f64> = sa.iter().copied().collect();
        let mut b: Vec<f64> = sc.iter().copied().collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        // same eigenvalues: compare the Hermitian forms' spectra
        let ha = materialize(&crate::lattice::RightGamma5(&op)).unwrap().symmetric_eigen();
        let hc = materialize(&crate::lattice::RightGamma5(&c)).unwrap().symmetric_eigen();
        let mut ea: Vec<f64> = ha.eigenvalues.iter().copied().collect();
        let mut ec: Vec<f64> = hc.eigenvalues.iter().copied().collect();
        ea.sort_by(|x, y| x.partial_cmp(y).unwrap());
        ec.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in ea.iter().zip(&ec) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn heavy_coarse_operator_stays_well_conditioned() {
        let op = wilson(&[8, 8], 10.0, 1.0, 6);
        let blocking = BlockingScheme::new(op.geometry(), &[2, 2]).unwrap();
        let nv = generate_null_vectors(&op, 2, 1e-2, 50, 2).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        let c = build_coarse_operator(&op, &p, 1).unwrap();
        let smin = c.matrix().to_dense().unwrap().singular_values().min();
        assert!(smin >= 8.0, "{smin}");
    }

    #[test]
    fn angles_of_contained_and_orthogonal_vectors() {
        let op = wilson(&[4, 4], 0.2, 2.0, 7);
        let blocking = BlockingScheme::new(op.geometry(), &[2, 2]).unwrap();
        let nv = generate_null_vectors(&op, 2, 1e-2, 50, 3).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        let inside = p.column(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut outside = random_gaussian(&mut rng, op.dim());
        let cols: Vec<Vec<C64>> = (0..p.coarse_dim()).map(|j| p.column(j)).collect();
        orthogonalize(&cols, &mut outside);
        normalize(&mut outside);
        let s = subspace_angles(&p, &[inside, outside]);
        assert!(s[0] <= 1e-7);
        assert!((s[1] - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn two_grid_zero_rhs_and_invariant_subspace() {
        let op = wilson(&[4, 4], 0.4, 2.0, 8);
        let blocking = BlockingScheme::new(op.geometry(), &[1, 1]).unwrap();
        let nv = generate_null_vectors(&op, 1, 1e-2, 50, 2).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        let c = build_coarse_operator(&op, &p, 1).unwrap();
        let exact = DenseInverse::from_operator(&c).unwrap();
        let (x, rep) = two_grid_solve(
            &op,
            &p,
            Box::new(exact),
            make_smoother(&op, 2).unwrap(),
            &vec![ZERO; op.dim()],
            1e-8,
            10,
        )
        .unwrap();
        assert!(x.iter().all(|v| *v == ZERO));
        assert_eq!(rep.iterations, 0);

        // V spans everything, so one cycle with an exact coarse solve suffices
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_gaussian(&mut rng, op.dim());
        let exact = DenseInverse::from_operator(&c).unwrap();
        let (x, rep) = two_grid_solve(
            &op,
            &p,
            Box::new(exact),
            make_smoother(&op, 2).unwrap(),
            &b,
            1e-8,
            10,
        )
        .unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(norm(&sub(&op.apply_vec(&x), &b)) <= 1e-8 * norm(&b));
    }

    #[test]
    fn two_grid_converges_with_inexact_coarse_solves() {
        let op = wilson(&[8, 8], -0.1, 3.0, 9);
        let blocking = BlockingScheme::new(op.geometry(), &[4, 4]).unwrap();
        let nv = generate_null_vectors(&op, 4, 1e-2, 200, 4).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        let c = build_coarse_operator(&op, &p, 1).unwrap();
        let coarse_inv = truncated_inverse(&c, SolveConfig::with_tol(1e-1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_gaussian(&mut rng, op.dim());
        let (x, rep) = two_grid_solve(
            &op,
            &p,
            Box::new(coarse_inv),
            make_smoother(&op, 4).unwrap(),
            &b,
            1e-8,
            500,
        )
        .unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(norm(&sub(&op.apply_vec(&x), &b)) <= 1e-8 * norm(&b));
    }

    #[test]
    fn cycle_preconditioned_gcr_beats_plain_gcr() {
        let op = wilson(&[8, 8], -0.2, 3.0, 9);
        let blocking = BlockingScheme::new(op.geometry(), &[4, 4]).unwrap();
        let nv = generate_null_vectors(&op, 4, 1e-2, 200, 4).unwrap();
        let p = build_prolongator(&op, &nv, &blocking).unwrap();
        let c = build_coarse_operator(&op, &p, 1).unwrap();
        let cycle = TwoGridCycle::new(
            &op,
            &p,
            Box::new(DenseInverse::from_operator(&c).unwrap()),
            make_smoother(&op, 4).unwrap(),
        )
        .unwrap();
        let inv = MultigridInverter::new(&op, cycle, SolveConfig::with_tol(1e-10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_gaussian(&mut rng, op.dim());
        let (x, rep) = inv.invert(&b).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(norm(&sub(&op.apply_vec(&x), &b)) <= 1e-10 * norm(&b));
        let (_, plain) = gcr(&op, &b, &SolveConfig::with_tol(1e-10)).unwrap();
        assert!(rep.iterations < plain.iterations, "{rep:?} vs {plain:?}");
        let s = inv.stats();
        assert_eq!((s.applications, s.matvecs), (1, rep.matvecs));
        // every cycle costs one smoothing pass plus two fine products at most
        assert!(rep.matvecs <= rep.iterations * 6 + 2 * (rep.iterations / 32 + 1));
    }

    #[test]
    fn hierarchy_dump_load_roundtrip() {
        let op = wilson(&[8, 8], 0.1, 3.0, 10);
        let levels = [
            LevelConfig {
                block_dims: vec![2, 2],
                null_vectors: 2,
            },
            LevelConfig {
                block_dims: vec![2, 2],
                null_vectors: 2,
            },
        ];
        let h = Hierarchy::build(&op, &levels, &SetupConfig::default(), 3).unwrap();
        assert_eq!(h.levels.len(), 2);
        assert_eq!(h.levels[1].coarse.level(), 2);
        let dir = tempfile::tempdir().unwrap();
        h.dump(dir.path()).unwrap();
        let back = Hierarchy::load(&op, dir.path()).unwrap();
        for (a, b) in h.levels.iter().zip(&back.levels) {
            assert!(max_abs(&(a.prolongator.to_dense() - b.prolongator.to_dense())) < 1e-14);
            let da = a.coarse.matrix().to_dense().unwrap();
            let db = b.coarse.matrix().to_dense().unwrap();
            assert!(max_abs(&(da - db)) < 1e-12);
            assert_eq!(a.coarse.gamma5(), b.coarse.gamma5());
        }
    }
}
