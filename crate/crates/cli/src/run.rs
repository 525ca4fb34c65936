use std::fs;
use std::path::Path;

use mgdeflate::eigen::{
    compare_eigensolvers, dense_svd_oracle, inexact_eigensolve, to_singular_triplets, tune_critical_mass, EigenConfig,
    EigenPairs, MassTuning, SingularTriplets,
};
use mgdeflate::krylov::{make_smoother, truncated_inverse, DenseInverse, Inverter, SolveConfig, SolverKind};
use mgdeflate::lattice::{build_lattice, generate_gauge, Gamma5Hermitian, Shifted, WilsonOperator};
use mgdeflate::linalg::{materialize, LinearOperator, C64, DENSE_LIMIT, ZERO};
use mgdeflate::multigrid::{
    coarse_solve_config, subspace_angles, Hierarchy, MultigridInverter, Prolongator, TwoGridCycle,
};
use mgdeflate::probing::{hp_vectors, noise_batch, ProbeSet, ProbingBasis};
use mgdeflate::trace::{deflate_orthogonal, posterior_rank_sweep, ResultRow};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{CoarseChoice, ExperimentConfig, InverterChoice, Method, SourceKind};
use crate::manifest::RunDir;
use crate::seeds::{Component, SeedSplitter};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO: &str = "run_info.csv";
pub const RESULTS: &str = "results.csv";
pub const RESULTS_ORTHOGONAL: &str = "results_orthogonal.csv";
pub const EIG_COMPARE: &str = "eig_compare.csv";
pub const INVERSE_ABS: &str = "inverse_abs.csv";
pub const DEFLATED_ABS: &str = "deflated_abs.csv";
pub const PROBED_ABS: &str = "probed_abs.csv";

/// Two spin components per site in two dimensions.
const SPIN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoRow {
    pub key: String,
    pub value: String,
}

fn info(key: &str, value: impl ToString) -> InfoRow {
    InfoRow {
        key: key.into(),
        value: value.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub i: usize,
    pub sine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub i: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRow {
    pub inverter: String,
    pub iterations: usize,
    pub relres: f64,
    pub matvecs: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRow {
    pub site: usize,
    pub spin: usize,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: usize,
    pub fine_dim: usize,
    pub coarse_dim: usize,
    pub dropped_columns: usize,
    pub orthonormality_error: f64,
    pub coarse_hermiticity_defect: f64,
}

/// Reads any CSV written by a runner back into its row type.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(err)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|x| x.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads a headerless square matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let err = |e: String| CliError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        rows.push(
            rec.iter()
                .map(|s| s.parse::<f64>().map_err(|e| err(e.to_string())))
                .collect::<Result<_, _>>()?,
        );
    }
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(err("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

pub struct Setup {
    pub op: WilsonOperator,
    pub tuning: Option<MassTuning>,
    pub seeds: SeedSplitter,
}

impl Setup {
    fn info(&self) -> Vec<InfoRow> {
        let mut rows = vec![info("mass", self.op.mass()), info("dim", self.op.dim())];
        if let Some(t) = &self.tuning {
            rows.push(info("critical_mass", t.critical));
            rows.push(info("sigma_min", t.sigma_min));
            rows.push(info("sigma_max", t.sigma_max));
        }
        for c in Component::ALL {
            rows.push(info(&format!("seed_{}", c.name()), self.seeds.seed(c, 0)));
        }
        rows
    }
}

pub fn build_operator(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let seeds = SeedSplitter::new(cfg.seeds.master);
    let geometry = build_lattice(&cfg.lattice.dims, cfg.lattice.boundary)?;
    let gauge = generate_gauge(&geometry, &cfg.gauge.kind(), seeds.seed(Component::Gauge, 0))?;
    let (mass, tuning) = if cfg.operator.tune_ratio > 0.0 {
        let t = tune_critical_mass(&gauge, cfg.operator.tune_ratio)?;
        (t.mass, Some(t))
    } else {
        (cfg.operator.mass, None)
    };
    Ok(Setup {
        op: WilsonOperator::new(gauge, mass)?,
        tuning,
        seeds,
    })
}

pub fn build_hierarchy(cfg: &ExperimentConfig, setup: &Setup) -> Result<Hierarchy, CliError> {
    Ok(Hierarchy::build(
        &setup.op,
        &cfg.multigrid.levels(),
        &cfg.multigrid.setup(),
        setup.seeds.seed(Component::NullVectors, 0),
    )?)
}

fn solve_config(cfg: &ExperimentConfig, tol: f64) -> SolveConfig {
    SolveConfig {
        tol,
        max_iter: cfg.solver.max_iter,
        restart: cfg.solver.restart,
        kind: SolverKind::Gcr,
    }
}

/// Inverter of a coarse operator: dense LU, or GCR at tolerance `tol` with
/// the long restart the near-critical coarse operator needs.
pub fn coarse_inverter<'a, C: LinearOperator + 'a>(
    cfg: &ExperimentConfig,
    coarse: C,
    tol: f64,
) -> Result<Box<dyn Inverter + 'a>, CliError> {
    Ok(match cfg.multigrid.coarse_solver {
        CoarseChoice::Dense => Box::new(DenseInverse::from_operator(&coarse)?),
        CoarseChoice::Gcr => Box::new(truncated_inverse(coarse, SolveConfig { tol, ..coarse_solve_config() })?),
    })
}

/// The configured inverse of `op` at tolerance `tol`. `level` is the first
/// prolongator with the matching coarse operator, needed for `multigrid`.
pub fn make_inverter<'a, A, C>(
    cfg: &ExperimentConfig,
    op: &'a A,
    level: Option<(&'a Prolongator, C)>,
    tol: f64,
) -> Result<Box<dyn Inverter + 'a>, CliError>
where
    A: LinearOperator,
    C: LinearOperator + 'a,
{
    Ok(match cfg.solver.inverter {
        InverterChoice::Dense => Box::new(DenseInverse::from_operator(op)?),
        InverterChoice::Gcr => Box::new(truncated_inverse(op, solve_config(cfg, tol))?),
        InverterChoice::Multigrid => {
            let (p, coarse) = level.ok_or_else(|| CliError::Config("multigrid inverter needs a hierarchy".into()))?;
            let cinv = coarse_inverter(cfg, coarse, coarse_solve_config().tol)?;
            let cycle = TwoGridCycle::new(op, p, cinv, make_smoother(op, cfg.multigrid.smoother_iters)?)?;
            Box::new(MultigridInverter::new(op, cycle, solve_config(cfg, tol))?)
        }
    })
}

fn eigen_config(cfg: &ExperimentConfig, seed: u64) -> EigenConfig {
    EigenConfig {
        tau: cfg.solver.tau,
        max_restarts: cfg.eigen.max_restarts,
        seed,
        test: cfg.eigen.test,
        ..EigenConfig::new(cfg.eigen.k, cfg.eigen.tol)
    }
}

/// Smallest singular triplets of the fine operator through the inexact
/// eigensolver on `γ5(A + iτγ5)⁻¹_ξ`.
fn fine_triplets(cfg: &ExperimentConfig, setup: &Setup, h: Option<&Hierarchy>) -> Result<(SingularTriplets, usize), CliError> {
    let op = &setup.op;
    let ecfg = eigen_config(cfg, setup.seeds.seed(Component::Eigensolver, 0));
    let shifted = Shifted { op, tau: cfg.solver.tau };
    let level = h.and_then(|h| h.levels.first());
    let coarse_shifted = level.map(|l| Shifted {
        op: &l.coarse,
        tau: cfg.solver.tau,
    });
    let inv = make_inverter(
        cfg,
        &shifted,
        level.map(|l| &l.prolongator).zip(coarse_shifted),
        cfg.solver.tol,
    )?;
    let pairs = inexact_eigensolve(op, &ecfg, &*inv)?;
    check_pairs(&pairs, "fine")?;
    Ok((to_singular_triplets(&pairs, op.gamma5())?, pairs.inversions))
}

/// Same on a coarse operator, with the coarse inverter.
fn coarse_triplets<C: Gamma5Hermitian>(
    cfg: &ExperimentConfig,
    coarse: &C,
    seed: u64,
) -> Result<(SingularTriplets, usize), CliError> {
    let mut ecfg = eigen_config(cfg, seed);
    ecfg.k = ecfg.k.min(coarse.dim());
    ecfg.max_basis = ecfg.max_basis.min(coarse.dim());
    if ecfg.max_basis < ecfg.k + 2 {
        return Err(CliError::Config(format!(
            "eigen.k = {} leaves no room in a coarse space of dimension {}",
            cfg.eigen.k,
            coarse.dim()
        )));
    }
    let shifted = Shifted {
        op: coarse,
        tau: cfg.solver.tau,
    };
    let inv = coarse_inverter(cfg, shifted, cfg.solver.tol)?;
    let pairs = inexact_eigensolve(coarse, &ecfg, &*inv)?;
    check_pairs(&pairs, "coarse")?;
    Ok((to_singular_triplets(&pairs, coarse.gamma5())?, pairs.inversions))
}

fn check_pairs(pairs: &EigenPairs, what: &str) -> Result<(), CliError> {
    if pairs.all_converged() {
        Ok(())
    } else {
        let n = pairs.converged.iter().filter(|&&c| c).count();
        Err(CliError::Failed(format!(
            "{what} eigensolve converged {n} of {} pairs",
            pairs.len()
        )))
    }
}

fn spectrum_rows(t: &SingularTriplets) -> Vec<SpectrumRow> {
    (0..t.len())
        .map(|i| SpectrumRow {
            i,
            sigma: t.sigmas[i],
            lambda: t.lambdas[i],
            residual: t.residuals[i],
        })
        .collect()
}

fn angle_rows(p: &Prolongator, vectors: &[Vec<C64>]) -> Vec<AngleRow> {
    subspace_angles(p, vectors)
        .into_iter()
        .enumerate()
        .map(|(i, sine)| AngleRow { i, sine })
        .collect()
}

pub fn probe_set(cfg: &ExperimentConfig, setup: &Setup, hp_count: usize) -> Result<ProbeSet, CliError> {
    let basis = ProbingBasis::new(setup.op.geometry(), SPIN, hp_count, cfg.probing.dilution)?;
    Ok(ProbeSet::generate(
        cfg.probing.noise,
        cfg.trace.noise_count,
        basis,
        setup.seeds.seed(Component::Noise, 0),
    )?)
}

/// Creates the output directory, writes the resolved config, runs `body`
/// and closes with a MANIFEST that records success or the failing stage.
pub fn with_run_dir<F>(cfg: &ExperimentConfig, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut RunDir) -> Result<(), CliError>,
{
    let mut dir = RunDir::create(&cfg.output.dir)?;
    dir.write_text(CONFIG_FILE, &cfg.to_toml())?;
    let outcome = body(&mut dir);
    dir.finish(outcome.as_ref().err())?;
    outcome
}

pub fn run_variance_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    with_run_dir(cfg, |dir| {
        dir.stage("operator");
        let setup = build_operator(cfg)?;
        let mut run_info = setup.info();
        dir.write_csv(RUN_INFO, &run_info)?;

        dir.stage("hierarchy");
        let h = build_hierarchy(cfg, &setup)?;

        dir.stage("fine eigensolve");
        let (fine, fine_inv) = fine_triplets(cfg, &setup, Some(&h))?;
        run_info.push(info("fine_eigensolve_inversions", fine_inv));
        dir.write_csv("spectrum_fine.csv", &spectrum_rows(&fine))?;

        for (l, level) in h.levels.iter().enumerate() {
            dir.stage(&format!("angles level {}", l + 1));
            let rows = if l == 0 {
                angle_rows(&level.prolongator, &fine.left)
            } else {
                let seed = setup.seeds.seed(Component::Eigensolver, l as u64 + 1);
                let (t, _) = coarse_triplets(cfg, &h.levels[l - 1].coarse, seed)?;
                angle_rows(&level.prolongator, &t.left)
            };
            dir.write_csv(&format!("angles_level{}.csv", l + 1), &rows)?;
        }

        let oblique = cfg.trace.methods.contains(&Method::Oblique);
        let coarse = if oblique {
            dir.stage("coarse eigensolve");
            let seed = setup.seeds.seed(Component::Eigensolver, 1);
            let (t, n) = coarse_triplets(cfg, &h.levels[0].coarse, seed)?;
            run_info.push(info("coarse_eigensolve_inversions", n));
            dir.write_csv("spectrum_coarse.csv", &spectrum_rows(&t))?;
            Some(t)
        } else {
            None
        };
        dir.write_csv(RUN_INFO, &run_info)?;

        let level = h.levels.first().map(|l| (&l.prolongator, &l.coarse));
        let inv = make_inverter(cfg, &setup.op, level, cfg.trace.solve_tol)?;
        let (mut rows, mut rows_orth) = (Vec::new(), Vec::new());
        for &hp in &cfg.probing.hp_counts {
            let probes = probe_set(cfg, &setup, hp)?;
            if let (Some(t), Some(l1)) = (&coarse, h.levels.first()) {
                dir.stage(&format!("oblique sweep hp={hp}"));
                let sweep = posterior_rank_sweep(
                    &setup.op,
                    &*inv,
                    &l1.prolongator,
                    &l1.coarse,
                    &t.right,
                    &probes,
                    &cfg.trace.ranks,
                )?;
                rows.extend(cfg.trace.ranks.iter().zip(&sweep.estimates).map(|(&r, e)| ResultRow::new(r, hp, e)));
                dir.write_csv(RESULTS, &rows)?;
            }
            if cfg.trace.methods.contains(&Method::Orthogonal) {
                for &r in &cfg.trace.ranks {
                    dir.stage(&format!("orthogonal deflation hp={hp} rank={r}"));
                    let e = deflate_orthogonal(&*inv, fine.left_basis(r), &probes)?;
                    rows_orth.push(ResultRow::new(r, hp, &e));
                }
                dir.write_csv(RESULTS_ORTHOGONAL, &rows_orth)?;
            }
        }
        Ok(())
    })
}

pub fn run_eigensolver_comparison(cfg: &ExperimentConfig) -> Result<(), CliError> {
    with_run_dir(cfg, |dir| {
        dir.stage("operator");
        let setup = build_operator(cfg)?;
        dir.write_csv(RUN_INFO, &setup.info())?;
        let h = if cfg.solver.inverter == InverterChoice::Multigrid {
            dir.stage("hierarchy");
            Some(build_hierarchy(cfg, &setup)?)
        } else {
            None
        };
        let level = h.as_ref().map(|h| (&h.levels[0].prolongator, &h.levels[0].coarse));
        let inv = make_inverter(cfg, &setup.op, level, cfg.solver.tol)?;
        dir.stage("comparison");
        let ecfg = EigenConfig {
            tau: 0.0,
            ..eigen_config(cfg, setup.seeds.seed(Component::Eigensolver, 0))
        };
        let rows = compare_eigensolvers(&setup.op, &ecfg, &*inv, cfg.eigen.max_matvecs)?;
        dir.write_csv(EIG_COMPARE, &rows)
    })
}

/// `(A⁻¹(I − UU†)) ⊙ HH†`-style mask: `(1/k) Σ_h h(x)h(y)` on the site
/// pair, restricted to equal spins when dilution is on.
pub fn probing_mask(cfg: &ExperimentConfig, setup: &Setup) -> Result<DMatrix<f64>, CliError> {
    let hp = hp_vectors(setup.op.geometry(), cfg.dump.hp_count)?;
    let n = setup.op.dim();
    let k = hp.len() as f64;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (x, a) = (i / SPIN, i % SPIN);
        let (y, b) = (j / SPIN, j % SPIN);
        if cfg.probing.dilution && a != b {
            return 0.0;
        }
        hp.iter().map(|h| (h[x] * h[y]) as f64).sum::<f64>() / k
    }))
}

pub fn dump_inverse_magnitudes(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dim = cfg.lattice.dims.iter().product::<usize>() * SPIN;
    if dim > DENSE_LIMIT {
        return Err(CliError::Config(format!(
            "dump-inverse materializes a dense {dim}x{dim} matrix; the limit is {DENSE_LIMIT}"
        )));
    }
    if cfg.dump.rank > dim {
        return Err(CliError::Config(format!("dump.rank {} exceeds dimension {dim}", cfg.dump.rank)));
    }
    with_run_dir(cfg, |dir| {
        dir.stage("operator");
        let setup = build_operator(cfg)?;
        dir.write_csv(RUN_INFO, &setup.info())?;

        dir.stage("dense inverse");
        let m = materialize(&setup.op)?;
        let ainv = DenseInverse::new(&m)?.inverse().clone();
        write_matrix_csv(&dir.path(INVERSE_ABS), &ainv.map(|z| z.norm()))?;
        dir.record(INVERSE_ABS);

        dir.stage("deflation");
        let (_, left, _) = dense_svd_oracle(&m)?.smallest(cfg.dump.rank);
        let mut proj = DMatrix::<C64>::identity(dim, dim);
        for u in &left {
            for i in 0..dim {
                for j in 0..dim {
                    proj[(i, j)] -= u[i] * u[j].conj();
                }
            }
        }
        let deflated = &ainv * proj;
        let deflated_abs = deflated.map(|z| z.norm());
        write_matrix_csv(&dir.path(DEFLATED_ABS), &deflated_abs)?;
        dir.record(DEFLATED_ABS);

        dir.stage("probing mask");
        let mask = probing_mask(cfg, &setup)?;
        write_matrix_csv(&dir.path(PROBED_ABS), &deflated_abs.component_mul(&mask.abs()))?;
        dir.record(PROBED_ABS);
        Ok(())
    })
}

pub fn run_solve(cfg: &ExperimentConfig) -> Result<(), CliError> {
    with_run_dir(cfg, |dir| {
        dir.stage("operator");
        let setup = build_operator(cfg)?;
        dir.write_csv(RUN_INFO, &setup.info())?;
        let h = if cfg.solver.inverter == InverterChoice::Multigrid {
            dir.stage("hierarchy");
            Some(build_hierarchy(cfg, &setup)?)
        } else {
            None
        };
        let level = h.as_ref().map(|h| (&h.levels[0].prolongator, &h.levels[0].coarse));
        let inv = make_inverter(cfg, &setup.op, level, cfg.solve.tol)?;
        let n = setup.op.dim();
        let b = match cfg.solve.source {
            SourceKind::Point => {
                let mut b = vec![ZERO; n];
                b[0] = C64::new(1.0, 0.0);
                b
            }
            SourceKind::Noise => noise_batch(cfg.probing.noise, n, 1, setup.seeds.seed(Component::Source, 0)).remove(0),
        };
        dir.stage("solve");
        let (x, rep) = inv.invert(&b)?;
        dir.write_csv(
            "solve.csv",
            &[SolveRow {
                inverter: format!("{:?}", cfg.solver.inverter).to_lowercase(),
                iterations: rep.iterations,
                relres: rep.final_relres,
                matvecs: rep.matvecs,
                converged: rep.converged,
            }],
        )?;
        let sol: Vec<SolutionRow> = x
            .iter()
            .enumerate()
            .map(|(i, z)| SolutionRow {
                site: i / SPIN,
                spin: i % SPIN,
                re: z.re,
                im: z.im,
            })
            .collect();
        dir.write_csv("solution.csv", &sol)?;
        if rep.converged {
            Ok(())
        } else {
            Err(CliError::Failed(format!(
                "solve stopped at relres {:.3e} after {} iterations",
                rep.final_relres, rep.iterations
            )))
        }
    })
}

pub fn run_hierarchy(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.multigrid.block_dims.is_empty() {
        return Err(CliError::Config("multigrid.block_dims is empty".into()));
    }
    with_run_dir(cfg, |dir| {
        dir.stage("operator");
        let setup = build_operator(cfg)?;
        dir.write_csv(RUN_INFO, &setup.info())?;
        dir.stage("hierarchy");
        let h = build_hierarchy(cfg, &setup)?;
        let sub = dir.path("hierarchy");
        h.dump(&sub)?;
        let mut names: Vec<String> = fs::read_dir(&sub)
            .map_err(|e| CliError::Io(format!("{}: {e}", sub.display())))?
            .filter_map(|e| e.ok())
            .map(|e| format!("hierarchy/{}", e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        for n in &names {
            dir.record(n);
        }
        let rows: Vec<LevelRow> = h
            .levels
            .iter()
            .enumerate()
            .map(|(l, level)| LevelRow {
                level: l + 1,
                fine_dim: level.prolongator.fine_dim(),
                coarse_dim: level.prolongator.coarse_dim(),
                dropped_columns: level.prolongator.dropped_columns(),
                orthonormality_error: level.prolongator.orthonormality_error(),
                coarse_hermiticity_defect: level.coarse.gamma5_hermiticity_defect(),
            })
            .collect();
        dir.write_csv("levels.csv", &rows)
    })
}
