//! Lattice geometry, U(1) gauge fields and the two-dimensional Wilson
//! operator.
//!
//! Sites are indexed lexicographically with the last coordinate running
//! fastest; the spin index runs fastest within a site. The last dimension is
//! the time direction for antiperiodic boundaries.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, materialize, LinearOperator, SparseMatrix, C64, ONE, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    AntiperiodicTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeGeometry {
    dims: Vec<usize>,
    boundary: Boundary,
    site_count: usize,
    strides: Vec<usize>,
}

impl LatticeGeometry {
    pub fn new(dims: &[usize], boundary: Boundary) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidGeometry("no dimensions given".into()));
        }
        if let Some(&d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidGeometry(format!(
                "extent {d} in {dims:?}; every extent must be at least 2"
            )));
        }
        let mut strides = vec![1usize; dims.len()];
        for mu in (0..dims.len() - 1).rev() {
            strides[mu] = strides[mu + 1] * dims[mu + 1];
        }
        Ok(Self {
            dims: dims.to_vec(),
            boundary,
            site_count: dims.iter().product(),
            strides,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn site_count(&self) -> usize {
        self.site_count
    }

    pub fn site_index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.strides)
            .map(|(c, s)| c * s)
            .sum()
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        self.dims
            .iter()
            .zip(&self.strides)
            .map(|(&d, &s)| (site / s) % d)
            .collect()
    }

    /// Neighbor one step along `mu` (forward or backward) and the boundary
    /// phase picked up by the hop.
    pub fn neighbor(&self, site: usize, mu: usize, forward: bool) -> (usize, f64) {
        let d = self.dims[mu];
        let c = (site / self.strides[mu]) % d;
        let (nc, wrapped) = if forward {
            ((c + 1) % d, c + 1 == d)
        } else {
            ((c + d - 1) % d, c == 0)
        };
        let nb = site - c * self.strides[mu] + nc * self.strides[mu];
        let phase = if wrapped
            && self.boundary == Boundary::AntiperiodicTime
            && mu == self.ndim() - 1
        {
            -1.0
        } else {
            1.0
        };
        (nb, phase)
    }
}

pub fn build_lattice(dims: &[usize], boundary: Boundary) -> Result<LatticeGeometry> {
    LatticeGeometry::new(dims, boundary)
}

/// Per-site degree-of-freedom layout: sites of a geometry, each owning a
/// contiguous range of vector components.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteLayout {
    geometry: LatticeGeometry,
    offsets: Vec<usize>,
}

impl SiteLayout {
    pub fn uniform(geometry: LatticeGeometry, dof: usize) -> Self {
        let offsets = (0..=geometry.site_count()).map(|s| s * dof).collect();
        Self { geometry, offsets }
    }

    pub fn from_counts(geometry: LatticeGeometry, counts: &[usize]) -> Result<Self> {
        check_dim(geometry.site_count(), counts.len())?;
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        Ok(Self { geometry, offsets })
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn site_range(&self, site: usize) -> Range<usize> {
        self.offsets[site]..self.offsets[site + 1]
    }

    pub fn dof(&self, site: usize) -> usize {
        self.offsets[site + 1] - self.offsets[site]
    }

    /// Site owning vector component `i`.
    pub fn site_of(&self, i: usize) -> usize {
        self.offsets.partition_point(|&o| o <= i) - 1
    }
}

/// Diagonal ±1 chirality operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gamma5 {
    signs: Vec<i8>,
}

impl Gamma5 {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("gamma5 entries must be ±1".into()));
        }
        Ok(Self { signs })
    }

    /// `diag(+1, −1)` repeated over `sites`.
    pub fn spin_basis(sites: usize) -> Self {
        Self {
            signs: (0..sites).flat_map(|_| [1i8, -1]).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn sign(&self, i: usize) -> i8 {
        self.signs[i]
    }

    pub fn apply_in_place(&self, x: &mut [C64]) {
        for (v, &s) in x.iter_mut().zip(&self.signs) {
            if s < 0 {
                *v = -*v;
            }
        }
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = x.to_vec();
        self.apply_in_place(&mut y);
        y
    }
}

/// An operator satisfying `γ5 A γ5 = A†` for its own `γ5`.
pub trait Gamma5Hermitian: LinearOperator {
    fn gamma5(&self) -> &Gamma5;

    /// `y = A† x = γ5 A γ5 x`
    fn apply_dagger(&self, x: &[C64], y: &mut [C64]) {
        let g = self.gamma5().apply(x);
        self.apply(&g, y);
        self.gamma5().apply_in_place(y);
    }

    /// `y = (A + iτγ5) x`
    fn apply_shifted(&self, tau: f64, x: &[C64], y: &mut [C64]) {
        self.apply(x, y);
        if tau != 0.0 {
            let g = self.gamma5();
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += C64::new(0.0, tau * g.sign(i) as f64) * x[i];
            }
        }
    }
}

/// Sparse lattice operator with an explicit matrix and a site layout. Both the
/// Wilson operator and every Galerkin coarse operator implement it.
pub trait LatticeOperator: Gamma5Hermitian {
    fn layout(&self) -> &SiteLayout;
    fn matrix(&self) -> &SparseMatrix;
}

impl<T: Gamma5Hermitian + ?Sized> Gamma5Hermitian for &T {
    fn gamma5(&self) -> &Gamma5 {
        (**self).gamma5()
    }
    fn apply_dagger(&self, x: &[C64], y: &mut [C64]) {
        (**self).apply_dagger(x, y)
    }
}

/// A dense matrix paired with its γ5; used for small test operators and
/// oracle checks.
#[derive(Debug, Clone)]
pub struct DenseGamma5Operator {
    matrix: nalgebra::DMatrix<C64>,
    gamma5: Gamma5,
}

impl DenseGamma5Operator {
    pub fn new(matrix: nalgebra::DMatrix<C64>, gamma5: Gamma5) -> Result<Self> {
        check_dim(matrix.nrows(), matrix.ncols())?;
        check_dim(matrix.nrows(), gamma5.dim())?;
        Ok(Self { matrix, gamma5 })
    }

    pub fn matrix(&self) -> &nalgebra::DMatrix<C64> {
        &self.matrix
    }
}

impl LinearOperator for DenseGamma5Operator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let r = &self.matrix * nalgebra::DVector::from_column_slice(x);
        y.copy_from_slice(r.as_slice());
    }
}

impl Gamma5Hermitian for DenseGamma5Operator {
    fn gamma5(&self) -> &Gamma5 {
        &self.gamma5
    }
}

impl<T: LatticeOperator + ?Sized> LatticeOperator for &T {
    fn layout(&self) -> &SiteLayout {
        (**self).layout()
    }
    fn matrix(&self) -> &SparseMatrix {
        (**self).matrix()
    }
}

/// `A + iτγ5`
#[derive(Debug, Clone, Copy)]
pub struct Shifted<A> {
    pub op: A,
    pub tau: f64,
}

impl<A: Gamma5Hermitian> LinearOperator for Shifted<A> {
    fn dim(&self) -> usize {
        self.op.dim()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.op.apply_shifted(self.tau, x, y)
    }
}

/// The Hermitian form `A γ5`.
#[derive(Debug, Clone, Copy)]
pub struct RightGamma5<A>(pub A);

impl<A: Gamma5Hermitian> LinearOperator for RightGamma5<A> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let g = self.0.gamma5().apply(x);
        self.0.apply(&g, y);
    }
}

/// The Hermitian form `γ5 A`.
#[derive(Debug, Clone, Copy)]
pub struct LeftGamma5<A>(pub A);

impl<A: Gamma5Hermitian> LinearOperator for LeftGamma5<A> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.0.apply(x, y);
        self.0.gamma5().apply_in_place(y);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GaugeKind {
    Unit,
    RandomPhase { beta: f64 },
    FromFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeField {
    geometry: LatticeGeometry,
    /// Link `U_mu(x)` at `site * ndim + mu`.
    links: Vec<C64>,
    beta: Option<f64>,
    seed: u64,
}

impl GaugeField {
    pub fn from_links(geometry: LatticeGeometry, links: Vec<C64>) -> Result<Self> {
        check_dim(geometry.site_count() * geometry.ndim(), links.len())?;
        if let Some((i, l)) = links
            .iter()
            .enumerate()
            .find(|(_, l)| (l.norm() - 1.0).abs() > 1e-8)
        {
            return Err(Error::InvalidArgument(format!(
                "link {i} has modulus {} (expected 1)",
                l.norm()
            )));
        }
        Ok(Self {
            geometry,
            links,
            beta: None,
            seed: 0,
        })
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geometry
    }

    pub fn link(&self, site: usize, mu: usize) -> C64 {
        self.links[site * self.geometry.ndim() + mu]
    }

    pub fn links(&self) -> &[C64] {
        &self.links
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.geometry.ndim();
        let mut out = String::new();
        let header: Vec<String> = (0..d).map(|m| format!("x{m}")).collect();
        writeln!(out, "{},mu,re,im", header.join(",")).unwrap();
        for site in 0..self.geometry.site_count() {
            let c = self.geometry.coords(site);
            let cs: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            for mu in 0..d {
                let l = self.link(site, mu);
                writeln!(out, "{},{mu},{:e},{:e}", cs.join(","), l.re, l.im).unwrap();
            }
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads the link CSV (`x0,..,x{D-1},mu,re,im`). Every link must be
    /// present exactly once with unit modulus.
    pub fn read_csv(geometry: &LatticeGeometry, path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let d = geometry.ndim();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut links = vec![None; geometry.site_count() * d];
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let mut expected: Vec<String> = (0..d).map(|m| format!("x{m}")).collect();
        expected.extend(["mu", "re", "im"].map(String::from));
        if header.trim().split(',').map(str::trim).ne(expected.iter().map(String::as_str)) {
            return Err(parse_err(1, format!("bad header, expected {}", expected.join(","))));
        }
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 3 {
                return Err(parse_err(lineno, format!("expected {} fields", d + 3)));
            }
            let mut coords = Vec::with_capacity(d);
            for (m, f) in fields[..d].iter().enumerate() {
                let c: usize = f
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad coordinate '{f}'")))?;
                if c >= geometry.dims()[m] {
                    return Err(parse_err(lineno, format!("coordinate {c} out of range")));
                }
                coords.push(c);
            }
            let mu: usize = fields[d]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad direction '{}'", fields[d])))?;
            if mu >= d {
                return Err(parse_err(lineno, format!("direction {mu} out of range")));
            }
            let re: f64 = fields[d + 1]
                .parse()
                .map_err(|_| parse_err(lineno, "bad real part".into()))?;
            let im: f64 = fields[d + 2]
                .parse()
                .map_err(|_| parse_err(lineno, "bad imaginary part".into()))?;
            let l = C64::new(re, im);
            if (l.norm() - 1.0).abs() > 1e-8 {
                return Err(parse_err(lineno, format!("link modulus {} is not 1", l.norm())));
            }
            let slot = &mut links[geometry.site_index(&coords) * d + mu];
            if slot.is_some() {
                return Err(parse_err(lineno, "duplicate link".into()));
            }
            *slot = Some(l);
        }
        let links: Option<Vec<C64>> = links.into_iter().collect();
        let links = links.ok_or_else(|| parse_err(0, "missing links".into()))?;
        GaugeField::from_links(geometry.clone(), links)
    }
}

/// Builds a U(1) gauge field. Random-phase links carry an i.i.d. Gaussian
/// phase of standard deviation `1/sqrt(beta)`.
pub fn generate_gauge(geometry: &LatticeGeometry, kind: &GaugeKind, seed: u64) -> Result<GaugeField> {
    let n = geometry.site_count() * geometry.ndim();
    let mut field = match kind {
        GaugeKind::Unit => GaugeField::from_links(geometry.clone(), vec![ONE; n])?,
        GaugeKind::RandomPhase { beta } => {
            if !(*beta > 0.0) {
                return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, 1.0 / beta.sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let links = (0..n)
                .map(|_| C64::from_polar(1.0, dist.sample(&mut rng)))
                .collect();
            let mut f = GaugeField::from_links(geometry.clone(), links)?;
            f.beta = Some(*beta);
            f
        }
        GaugeKind::FromFile { path } => GaugeField::read_csv(geometry, path)?,
    };
    field.seed = seed;
    Ok(field)
}

/// The Wilson operator on a U(1) background,
/// `A = (m + D) − ½ Σ_μ [(1 − γ_μ) U_μ(x) δ_{x+μ} + (1 + γ_μ) U_μ†(x−μ) δ_{x−μ}]`,
/// with `γ1 = σ1`, `γ2 = σ2` and `γ5 = σ3`.
#[derive(Debug, Clone)]
pub struct WilsonOperator {
    gauge: GaugeField,
    mass: f64,
    layout: SiteLayout,
    gamma5: Gamma5,
    matrix: SparseMatrix,
}

pub const SPIN_DIM: usize = 2;

fn gamma_matrix(mu: usize) -> [[C64; 2]; 2] {
    match mu {
        0 => [[ZERO, ONE], [ONE, ZERO]],
        _ => [[ZERO, C64::new(0.0, -1.0)], [C64::new(0.0, 1.0), ZERO]],
    }
}

impl WilsonOperator {
    pub fn new(gauge: GaugeField, mass: f64) -> Result<Self> {
        let geom = gauge.geometry().clone();
        let d = geom.ndim();
        if d > 2 {
            return Err(Error::InvalidGeometry(format!(
                "the two-spinor Wilson operator supports D <= 2, got D = {d}"
            )));
        }
        let n = geom.site_count() * SPIN_DIM;
        let mut t = Vec::with_capacity(n * (2 * d + 1) * SPIN_DIM);
        let diag = C64::new(mass + d as f64, 0.0);
        for site in 0..geom.site_count() {
            for s in 0..SPIN_DIM {
                t.push((site * SPIN_DIM + s, site * SPIN_DIM + s, diag));
            }
            for mu in 0..d {
                let g = gamma_matrix(mu);
                let (fwd, ph_f) = geom.neighbor(site, mu, true);
                let (bwd, ph_b) = geom.neighbor(site, mu, false);
                let u_f = gauge.link(site, mu) * ph_f;
                let u_b = gauge.link(bwd, mu).conj() * ph_b;
                for a in 0..SPIN_DIM {
                    for b in 0..SPIN_DIM {
                        let id = if a == b { ONE } else { ZERO };
                        let minus = (id - g[a][b]) * u_f * -0.5;
                        let plus = (id + g[a][b]) * u_b * -0.5;
                        if minus != ZERO {
                            t.push((site * SPIN_DIM + a, fwd * SPIN_DIM + b, minus));
                        }
                        if plus != ZERO {
                            t.push((site * SPIN_DIM + a, bwd * SPIN_DIM + b, plus));
                        }
                    }
                }
            }
        }
        let matrix = SparseMatrix::from_triplets(n, n, t)?;
        Ok(Self {
            layout: SiteLayout::uniform(geom.clone(), SPIN_DIM),
            gamma5: Gamma5::spin_basis(geom.site_count()),
            gauge,
            mass,
            matrix,
        })
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        self.gauge.geometry()
    }

    pub fn gauge(&self) -> &GaugeField {
        &self.gauge
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Same gauge background at a different bare mass.
    pub fn with_mass(&self, mass: f64) -> Result<Self> {
        Self::new(self.gauge.clone(), mass)
    }

    /// Checked product `A x`.
    pub fn apply_checked(&self, x: &[C64]) -> Result<Vec<C64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.apply_vec(x))
    }
}

pub fn build_wilson(gauge: GaugeField, mass: f64) -> Result<WilsonOperator> {
    WilsonOperator::new(gauge, mass)
}

impl LinearOperator for WilsonOperator {
    fn dim(&self) -> usize {
        self.matrix.n_rows()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.matrix.mul_vec(x, y)
    }
}

impl Gamma5Hermitian for WilsonOperator {
    fn gamma5(&self) -> &Gamma5 {
        &self.gamma5
    }
    fn apply_dagger(&self, x: &[C64], y: &mut [C64]) {
        self.matrix.mul_adjoint_vec(x, y)
    }
}

impl LatticeOperator for WilsonOperator {
    fn layout(&self) -> &SiteLayout {
        &self.layout
    }
    fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }
}

/// Dense copy of a lattice operator for oracle checks.
pub fn dense_materialize<A: LinearOperator + ?Sized>(op: &A) -> Result<nalgebra::DMatrix<C64>> {
    materialize(op)
}

/// Relative γ5-Hermiticity defect `‖γ5Aγ5x − A†x‖ / (‖A‖₁‖x‖)` on one vector.
pub fn gamma5_hermiticity_defect<A: LatticeOperator>(op: &A, x: &[C64]) -> f64 {
    let n = op.dim();
    let g = op.gamma5();
    let mut lhs = vec![ZERO; n];
    op.apply(&g.apply(x), &mut lhs);
    g.apply_in_place(&mut lhs);
    let mut rhs = vec![ZERO; n];
    op.matrix().mul_adjoint_vec(x, &mut rhs);
    let diff: f64 = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let norm_one = column_norm_one(op.matrix());
    diff / (norm_one * crate::linalg::norm(x)).max(f64::MIN_POSITIVE)
}

fn column_norm_one(m: &SparseMatrix) -> f64 {
    let mut cols = vec![0.0f64; m.n_cols()];
    for r in 0..m.n_rows() {
        for (c, v) in m.row(r) {
            cols[c] += v.norm();
        }
    }
    cols.into_iter().fold(0.0, f64::max)
}
