use std::fs;
use std::path::{Path, PathBuf};

use mgdeflate::eigen::ConvergenceTest;
use mgdeflate::lattice::{Boundary, GaugeKind};
use mgdeflate::multigrid::{LevelConfig, SetupConfig};
use mgdeflate::probing::{hp_vectors, NoiseKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs. Each section maps to one `[section]` table of the
/// TOML file and every key has a default, so an empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lattice: LatticeSection,
    pub gauge: GaugeSection,
    pub operator: OperatorSection,
    pub solver: SolverSection,
    pub multigrid: MultigridSection,
    pub eigen: EigenSection,
    pub probing: ProbingSection,
    pub trace: TraceSection,
    pub dump: DumpSection,
    pub solve: SolveSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    pub dims: Vec<usize>,
    pub boundary: Boundary,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self {
            dims: vec![8, 8],
            boundary: Boundary::Periodic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GaugeChoice {
    Unit,
    #[default]
    RandomPhase,
    FromFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaugeSection {
    pub kind: GaugeChoice,
    pub beta: f64,
    /// Link file for `kind = "from_file"`.
    pub path: String,
}

impl Default for GaugeSection {
    fn default() -> Self {
        Self {
            kind: GaugeChoice::RandomPhase,
            beta: 3.0,
            path: String::new(),
        }
    }
}

impl GaugeSection {
    pub fn kind(&self) -> GaugeKind {
        match self.kind {
            GaugeChoice::Unit => GaugeKind::Unit,
            GaugeChoice::RandomPhase => GaugeKind::RandomPhase { beta: self.beta },
            GaugeChoice::FromFile => GaugeKind::FromFile {
                path: PathBuf::from(&self.path),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    pub mass: f64,
    /// When positive, `mass` is ignored and tuned (densely) until
    /// `σ_min/σ_max` drops to this ratio.
    pub tune_ratio: f64,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            mass: 0.1,
            tune_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InverterChoice {
    /// Exact dense LU; small lattices only.
    Dense,
    /// Restarted GCR from a zero guess.
    #[default]
    Gcr,
    /// GCR preconditioned by one two-grid cycle over the first level.
    Multigrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub inverter: InverterChoice,
    /// ξ of the truncated inverse used inside eigensolves.
    pub tol: f64,
    /// Shift τ of the eigensolver.
    pub tau: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            inverter: InverterChoice::Gcr,
            tol: 1e-2,
            tau: 0.0,
            restart: 32,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoarseChoice {
    #[default]
    Dense,
    Gcr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultigridSection {
    /// Block extents per level; the number of levels is its length.
    pub block_dims: Vec<Vec<usize>>,
    pub null_vectors: Vec<usize>,
    pub null_tol: f64,
    pub null_max_iter: usize,
    pub smoother_iters: usize,
    /// Coarse solves inside the cycle and coarse eigensolves.
    pub coarse_solver: CoarseChoice,
}

impl Default for MultigridSection {
    fn default() -> Self {
        let setup = SetupConfig::default();
        Self {
            block_dims: vec![vec![4, 4]],
            null_vectors: vec![8],
            null_tol: setup.null_tol,
            null_max_iter: setup.null_max_iter,
            smoother_iters: 4,
            coarse_solver: CoarseChoice::Dense,
        }
    }
}

impl MultigridSection {
    pub fn levels(&self) -> Vec<LevelConfig> {
        self.block_dims
            .iter()
            .zip(&self.null_vectors)
            .map(|(b, &n)| LevelConfig {
                block_dims: b.clone(),
                null_vectors: n,
            })
            .collect()
    }

    pub fn setup(&self) -> SetupConfig {
        SetupConfig {
            null_tol: self.null_tol,
            null_max_iter: self.null_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenSection {
    pub k: usize,
    pub tol: f64,
    pub max_restarts: usize,
    pub test: ConvergenceTest,
    /// Budget of the inversion-free comparison run.
    pub max_matvecs: usize,
}

impl Default for EigenSection {
    fn default() -> Self {
        Self {
            k: 16,
            tol: 1e-2,
            max_restarts: 100,
            test: ConvergenceTest::RitzValue,
            max_matvecs: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbingSection {
    pub noise: NoiseKind,
    pub hp_counts: Vec<usize>,
    pub dilution: bool,
}

impl Default for ProbingSection {
    fn default() -> Self {
        Self {
            noise: NoiseKind::Z4,
            hp_counts: vec![1, 4],
            dilution: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Coarse oblique deflation from the coarse singular vectors.
    Oblique,
    /// Orthogonal deflation with fine singular vectors.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub ranks: Vec<usize>,
    pub noise_count: usize,
    /// Tolerance of the probe solves.
    pub solve_tol: f64,
    pub methods: Vec<Method>,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            ranks: vec![0, 8, 16],
            noise_count: 32,
            solve_tol: 1e-8,
            methods: vec![Method::Oblique, Method::Orthogonal],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSection {
    /// Number of exact smallest singular directions deflated.
    pub rank: usize,
    /// Probing vectors in the `HH†` mask.
    pub hp_count: usize,
}

impl Default for DumpSection {
    fn default() -> Self {
        Self { rank: 8, hp_count: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Unit vector at site 0, spin 0.
    #[default]
    Point,
    /// One noise vector of kind `probing.noise`.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub source: SourceKind,
    pub tol: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            source: SourceKind::Point,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub master: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { master: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `value` as a TOML value, falling back to a bare string so that
/// `--set probing.noise=z4` works without quoting.
fn parse_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `section.key=value` overrides in order
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| bad(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| bad(format!("override '{o}' is not of the form section.key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| bad(format!("override key '{key}' needs a section, e.g. trace.ranks")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let t = entry
                .as_table_mut()
                .ok_or_else(|| bad(format!("'{section}' is not a section")))?;
            t.insert(field.to_string(), parse_value(value.trim()));
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let dims = &self.lattice.dims;
        if dims.is_empty() || dims.iter().any(|&d| d < 2) {
            return Err(bad(format!("lattice.dims must have extents >= 2, got {dims:?}")));
        }
        if self.gauge.kind == GaugeChoice::FromFile && self.gauge.path.is_empty() {
            return Err(bad("gauge.path is required for kind = \"from_file\""));
        }
        if self.gauge.kind == GaugeChoice::RandomPhase && !(self.gauge.beta > 0.0) {
            return Err(bad("gauge.beta must be positive"));
        }
        if !(self.operator.tune_ratio >= 0.0 && self.operator.tune_ratio < 1.0) {
            return Err(bad("operator.tune_ratio must lie in [0, 1)"));
        }
        let s = &self.solver;
        if !(s.tol > 0.0 && s.tol < 1.0) || !(s.tau >= 0.0) || s.restart == 0 || s.max_iter == 0 {
            return Err(bad("solver needs tol in (0,1), tau >= 0, restart and max_iter >= 1"));
        }
        let mg = &self.multigrid;
        if mg.block_dims.len() != mg.null_vectors.len() {
            return Err(bad(format!(
                "multigrid.block_dims has {} levels but multigrid.null_vectors has {}",
                mg.block_dims.len(),
                mg.null_vectors.len()
            )));
        }
        let mut extents = dims.clone();
        for (l, b) in mg.block_dims.iter().enumerate() {
            if b.len() != extents.len() || b.iter().zip(&extents).any(|(&b, &e)| b == 0 || e % b != 0) {
                return Err(bad(format!(
                    "level {} block {b:?} does not tile lattice {extents:?}",
                    l + 1
                )));
            }
            extents = extents.iter().zip(b).map(|(e, b)| e / b).collect();
        }
        if mg.null_vectors.contains(&0) || mg.smoother_iters == 0 {
            return Err(bad("multigrid needs null_vectors and smoother_iters >= 1"));
        }
        if s.inverter == InverterChoice::Multigrid && mg.block_dims.is_empty() {
            return Err(bad("solver.inverter = \"multigrid\" needs at least one multigrid level"));
        }
        let e = &self.eigen;
        if e.k == 0 || !(e.tol > 0.0 && e.tol < 1.0) {
            return Err(bad("eigen needs k >= 1 and tol in (0,1)"));
        }
        let t = &self.trace;
        if t.noise_count < 2 {
            return Err(bad("trace.noise_count must be at least 2"));
        }
        if !(t.solve_tol > 0.0 && t.solve_tol < 1.0) {
            return Err(bad("trace.solve_tol must lie in (0,1)"));
        }
        if !(self.solve.tol > 0.0 && self.solve.tol < 1.0) {
            return Err(bad("solve.tol must lie in (0,1)"));
        }
        if t.methods.contains(&Method::Oblique) && mg.block_dims.is_empty() {
            return Err(bad("trace.methods = [\"oblique\"] needs at least one multigrid level"));
        }
        if t.ranks.is_empty() || self.probing.hp_counts.is_empty() {
            return Err(bad("trace.ranks and probing.hp_counts must not be empty"));
        }
        if let Some(&r) = t.ranks.iter().max().filter(|&&r| r > e.k) {
            return Err(bad(format!("rank {r} exceeds eigen.k = {}", e.k)));
        }
        let geometry = mgdeflate::lattice::build_lattice(dims, self.lattice.boundary)
            .map_err(|e| bad(e.to_string()))?;
        for &h in self.probing.hp_counts.iter().chain([&self.dump.hp_count]) {
            hp_vectors(&geometry, h).map_err(|e| bad(format!("probing: {e}")))?;
        }
        Ok(())
    }
}
