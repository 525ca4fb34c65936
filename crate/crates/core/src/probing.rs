//! Noise vectors, spin dilution and hierarchical probing.
//!
//! Colors at level `i` are the classes of `x mod 2^i` taken per coordinate.
//! The label of a class interleaves coordinate bits (bit `b·D + d` of the
//! label is bit `b` of `x_d`), so the low `D(i−1)` bits of a level-`i` label
//! are the level-`(i−1)` label. Combined with natural-order Hadamard
//! indexing this makes the probing vectors exactly nested.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LatticeGeometry;
use crate::linalg::{random_gaussian, C64, ONE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Rademacher,
    #[default]
    Z4,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    pub kind: NoiseKind,
    pub seed: u64,
    pub values: Vec<C64>,
}

impl NoiseVector {
    pub fn generate(kind: NoiseKind, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            kind,
            seed,
            values: noise_values(kind, dim, &mut rng),
        }
    }
}

/// Entries with `E[x̄ᵢ xⱼ] = δᵢⱼ`.
pub fn noise_values<R: Rng + ?Sized>(kind: NoiseKind, dim: usize, rng: &mut R) -> Vec<C64> {
    match kind {
        NoiseKind::Rademacher => (0..dim)
            .map(|_| if rng.random::<bool>() { ONE } else { -ONE })
            .collect(),
        NoiseKind::Z4 => (0..dim)
            .map(|_| match rng.random_range(0..4u8) {
                0 => C64::new(1.0, 0.0),
                1 => C64::new(0.0, 1.0),
                2 => C64::new(-1.0, 0.0),
                _ => C64::new(0.0, -1.0),
            })
            .collect(),
        NoiseKind::Gaussian => random_gaussian(rng, dim),
    }
}

/// `s` independent noise vectors drawn from one stream.
pub fn noise_batch(kind: NoiseKind, dim: usize, s: usize, seed: u64) -> Vec<Vec<C64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s).map(|_| noise_values(kind, dim, &mut rng)).collect()
}

fn check_hp_level(geometry: &LatticeGeometry, level: usize) -> Result<()> {
    let period = 1usize
        .checked_shl(level as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("probing level {level} too large")))?;
    for &l in geometry.dims() {
        if l % period != 0 {
            return Err(Error::InvalidGeometry(format!(
                "extent {l} is not divisible by 2^{level} required for hierarchical probing"
            )));
        }
    }
    Ok(())
}

/// Level-`level` color of every site; `2^(D·level)` colors in total.
pub fn hp_colorings(geometry: &LatticeGeometry, level: usize) -> Result<Vec<usize>> {
    check_hp_level(geometry, level)?;
    let d = geometry.ndim();
    Ok((0..geometry.site_count())
        .map(|s| {
            let x = geometry.coords(s);
            let mut color = 0usize;
            for b in 0..level {
                for (k, xk) in x.iter().enumerate() {
                    color |= ((xk >> b) & 1) << (b * d + k);
                }
            }
            color
        })
        .collect())
}

/// Smallest level whose closing color count `2^(D·i)` reaches `count`.
pub fn hp_level_for(ndim: usize, count: usize) -> usize {
    let mut level = 0;
    while (1usize << (ndim * level)) < count {
        level += 1;
    }
    level
}

/// The first `count` hierarchical probing vectors over sites, entries ±1.
pub fn hp_vectors(geometry: &LatticeGeometry, count: usize) -> Result<Vec<Vec<i8>>> {
    if count == 0 || !count.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "probing vector count must be a power of two, got {count}"
        )));
    }
    if count > geometry.site_count() {
        return Err(Error::InvalidArgument(format!(
            "{count} probing vectors exceed {} sites",
            geometry.site_count()
        )));
    }
    let level = hp_level_for(geometry.ndim(), count);
    let colors = hp_colorings(geometry, level)?;
    Ok((0..count)
        .map(|j| {
            colors
                .iter()
                .map(|&c| if (j & c).count_ones() % 2 == 0 { 1 } else { -1 })
                .collect()
        })
        .collect())
}

/// One indicator pattern per spin component.
pub fn dilution_basis(spin_dim: usize) -> Result<Vec<Vec<bool>>> {
    if spin_dim == 0 {
        return Err(Error::InvalidArgument("spin_dim must be at least 1".into()));
    }
    Ok((0..spin_dim)
        .map(|s| (0..spin_dim).map(|t| s == t).collect())
        .collect())
}

/// `noise ⊙ (hp ⊗ pattern)` for a uniform `site × spin` layout.
pub fn sample_vectors(noise: &[C64], hp_vector: &[i8], dilution_pattern: &[bool]) -> Result<Vec<C64>> {
    let spin = dilution_pattern.len();
    if spin == 0 || hp_vector.len() * spin != noise.len() {
        return Err(Error::DimensionMismatch {
            expected: hp_vector.len() * spin,
            got: noise.len(),
        });
    }
    Ok(noise
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if dilution_pattern[i % spin] {
                x * hp_vector[i / spin] as f64
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect())
}

/// Hierarchical probing vectors crossed with dilution patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingBasis {
    pub spin_dim: usize,
    pub hp: Vec<Vec<i8>>,
    pub dilution: Vec<Vec<bool>>,
}

impl ProbingBasis {
    pub fn new(geometry: &LatticeGeometry, spin_dim: usize, hp_count: usize, dilute: bool) -> Result<Self> {
        let hp = hp_vectors(geometry, hp_count)?;
        let dilution = if dilute {
            dilution_basis(spin_dim)?
        } else {
            vec![vec![true; spin_dim]]
        };
        Ok(Self {
            spin_dim,
            hp,
            dilution,
        })
    }

    /// No probing, no dilution: probes are the raw noise.
    pub fn trivial(sites: usize, spin_dim: usize) -> Self {
        Self {
            spin_dim,
            hp: vec![vec![1; sites]],
            dilution: vec![vec![true; spin_dim]],
        }
    }

    pub fn dim(&self) -> usize {
        self.hp[0].len() * self.spin_dim
    }

    pub fn hp_count(&self) -> usize {
        self.hp.len()
    }

    pub fn slots(&self) -> usize {
        self.hp.len() * self.dilution.len()
    }

    /// Slot `j` combines hp vector `j / dilution.len()` with pattern
    /// `j % dilution.len()`.
    pub fn probe(&self, noise: &[C64], slot: usize) -> Vec<C64> {
        let nd = self.dilution.len();
        sample_vectors(noise, &self.hp[slot / nd], &self.dilution[slot % nd])
            .expect("probe shape checked at construction")
    }
}

/// Noise vectors together with the probing basis applied to each.
///
/// The quadratic forms of one noise vector's slots are combined with weight
/// `1 / hp_count`: dilution slots add up to the noise vector, while the hp
/// vectors are averaged so that each site keeps unit weight.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    noise: Vec<Vec<C64>>,
    basis: ProbingBasis,
}

impl ProbeSet {
    pub fn new(noise: Vec<Vec<C64>>, basis: ProbingBasis) -> Result<Self> {
        if noise.is_empty() {
            return Err(Error::InvalidArgument("probe set needs at least one noise vector".into()));
        }
        for v in &noise {
            if v.len() != basis.dim() {
                return Err(Error::DimensionMismatch {
                    expected: basis.dim(),
                    got: v.len(),
                });
            }
        }
        Ok(Self { noise, basis })
    }

    /// Each vector stands alone as one sample (no probing, no dilution).
    pub fn plain(vectors: Vec<Vec<C64>>) -> Result<Self> {
        let n = vectors.first().map_or(0, Vec::len);
        Self::new(vectors, ProbingBasis::trivial(n, 1))
    }

    pub fn generate(
        kind: NoiseKind,
        s: usize,
        basis: ProbingBasis,
        seed: u64,
    ) -> Result<Self> {
        Self::new(noise_batch(kind, basis.dim(), s, seed), basis)
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn noise_count(&self) -> usize {
        self.noise.len()
    }

    pub fn slots(&self) -> usize {
        self.basis.slots()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.basis.hp_count() as f64
    }

    pub fn basis(&self) -> &ProbingBasis {
        &self.basis
    }

    pub fn noise(&self, j: usize) -> &[C64] {
        &self.noise[j]
    }

    pub fn probe(&self, j: usize, slot: usize) -> Vec<C64> {
        self.basis.probe(&self.noise[j], slot)
    }

    /// Writes the probes of noise vector `j` as `slot,site,spin,re,im`.
    pub fn dump_csv(&self, j: usize, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let spin = self.basis.spin_dim;
        writeln!(w, "slot,site,spin,re,im").map_err(|e| Error::io(path, e))?;
        for slot in 0..self.slots() {
            for (i, x) in self.probe(j, slot).iter().enumerate() {
                writeln!(w, "{slot},{},{},{:e},{:e}", i / spin, i % spin, x.re, x.im)
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, Boundary};
    use crate::linalg::dot;
    use nalgebra::DMatrix;

    fn lat(d: &[usize]) -> LatticeGeometry {
        build_lattice(d, Boundary::Periodic).unwrap()
    }

    #[test]
    fn noise_alphabets() {
        let r = NoiseVector::generate(NoiseKind::Rademacher, 200, 1);
        assert!(r.values.iter().all(|x| x.im == 0.0 && x.re.abs() == 1.0));
        let z = NoiseVector::generate(NoiseKind::Z4, 200, 1);
        assert!(z.values.iter().all(|x| (x.norm() - 1.0).abs() == 0.0 && (x.re == 0.0 || x.im == 0.0)));
        assert_eq!(z, NoiseVector::generate(NoiseKind::Z4, 200, 1));
        let g = NoiseVector::generate(NoiseKind::Gaussian, 20000, 3);
        let m = g.values.iter().map(|x| x.norm_sqr()).sum::<f64>() / 20000.0;
        assert!((m - 1.0).abs() < 0.05);
    }

    #[test]
    fn colorings_level_one_and_zero() {
        let g = lat(&[8, 8]);
        let c0 = hp_colorings(&g, 0).unwrap();
        assert!(c0.iter().all(|&c| c == 0));
        let c1 = hp_colorings(&g, 1).unwrap();
        let mut distinct = c1.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        for s in 0..g.site_count() {
            for mu in 0..2 {
                assert_ne!(c1[s], c1[g.neighbor(s, mu, true).0]);
            }
        }
        assert!(hp_colorings(&lat(&[6, 8]), 2).is_err());
    }

    #[test]
    fn colorings_level_two_pairs_and_nesting() {
        let g = lat(&[8, 8]);
        let c2 = hp_colorings(&g, 2).unwrap();
        let c1 = hp_colorings(&g, 1).unwrap();
        let mut distinct = c2.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 16);
        for a in 0..g.site_count() {
            let xa = g.coords(a);
            assert_eq!(c2[a] & 3, c1[a]);
            for b in 0..g.site_count() {
                let xb = g.coords(b);
                let same_class = xa.iter().zip(&xb).all(|(p, q)| p % 4 == q % 4);
                assert_eq!(c2[a] == c2[b], same_class);
            }
            let shifted = g.site_index(&[(xa[0] + 4) % 8, xa[1]]);
            assert_eq!(c2[a], c2[shifted]);
        }
    }

    fn probe_sum(h: &[Vec<i8>]) -> DMatrix<f64> {
        let n = h[0].len();
        let mut m = DMatrix::zeros(n, n);
        for v in h {
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += (v[i] * v[j]) as f64;
                }
            }
        }
        m / h.len() as f64
    }

    #[test]
    fn closing_counts_annihilate_non_congruent_pairs() {
        let g = lat(&[8, 8]);
        for (count, period) in [(4usize, 2usize), (16, 4)] {
            let m = probe_sum(&hp_vectors(&g, count).unwrap());
            for a in 0..64 {
                for b in 0..64 {
                    let (xa, xb) = (g.coords(a), g.coords(b));
                    let congruent = xa.iter().zip(&xb).all(|(p, q)| p % period == q % period);
                    if congruent {
                        assert_eq!(m[(a, b)], 1.0);
                    } else {
                        assert!(m[(a, b)].abs() <= 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn hp_vectors_basic_contracts() {
        let g = lat(&[8, 8]);
        assert_eq!(hp_vectors(&g, 1).unwrap(), vec![vec![1i8; 64]]);
        let h16 = hp_vectors(&g, 16).unwrap();
        let h64 = hp_vectors(&g, 64).unwrap();
        assert_eq!(hp_vectors(&g, 4).unwrap()[..], h16[..4]);
        assert_eq!(h16[..], h64[..16]);
        for i in 0..16 {
            for j in 0..16 {
                let d: i32 = h16[i].iter().zip(&h16[j]).map(|(a, b)| (a * b) as i32).sum();
                assert_eq!(d, if i == j { 64 } else { 0 });
            }
        }
        assert!(hp_vectors(&g, 3).is_err());
        assert!(hp_vectors(&g, 128).is_err());
        assert!(hp_vectors(&lat(&[6, 6]), 16).is_err());
    }

    #[test]
    fn dilution_partitions_unity() {
        let d = dilution_basis(2).unwrap();
        assert_eq!(d, vec![vec![true, false], vec![false, true]]);
        assert!(dilution_basis(0).is_err());
        let noise = NoiseVector::generate(NoiseKind::Z4, 32, 5).values;
        let ones = vec![1i8; 16];
        let mut total = vec![C64::new(0.0, 0.0); 32];
        for p in &d {
            for (t, v) in total.iter_mut().zip(sample_vectors(&noise, &ones, p).unwrap()) {
                *t += v;
            }
        }
        assert_eq!(total, noise);
    }

    #[test]
    fn probes_keep_alphabet_and_trivial_probe_is_noise() {
        let g = lat(&[4, 4]);
        let noise = NoiseVector::generate(NoiseKind::Z4, 32, 2).values;
        let hp = hp_vectors(&g, 4).unwrap();
        let p = sample_vectors(&noise, &hp[3], &[true, true]).unwrap();
        assert!(p.iter().all(|x| (x.norm() - 1.0).abs() == 0.0));
        assert_eq!(ProbingBasis::trivial(16, 2).probe(&noise, 0), noise);
        assert!(sample_vectors(&noise, &hp[0], &[true]).is_err());
    }

    #[test]
    fn dilution_partition_identity_for_quadratic_forms() {
        let g = lat(&[4, 4]);
        let n = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = DMatrix::from_fn(n, n, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let noise = NoiseVector::generate(NoiseKind::Z4, n, 8).values;
        let basis = ProbingBasis::new(&g, 2, 4, true).unwrap();
        let bd = ProbingBasis::new(&g, 2, 4, false).unwrap();
        // Σ over dilution of p†Bp differs from the undiluted form only by
        // spin-off-diagonal terms; check against the explicit decomposition
        for h in 0..4 {
            let full = bd.probe(&noise, h);
            let bx = &b * nalgebra::DVector::from_vec(full.clone());
            let whole = dot(&full, bx.as_slice());
            let parts: C64 = (0..2)
                .map(|s| {
                    let p = basis.probe(&noise, 2 * h + s);
                    let bp = &b * nalgebra::DVector::from_vec(p.clone());
                    dot(&p, bp.as_slice())
                })
                .sum();
            let mut off = C64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if i % 2 != j % 2 {
                        off += full[i].conj() * b[(i, j)] * full[j];
                    }
                }
            }
            assert!((whole - parts - off).norm() < 1e-12);
        }
    }

    #[test]
    fn probe_dump_writes_all_slots() {
        let g = lat(&[4, 4]);
        let basis = ProbingBasis::new(&g, 2, 4, true).unwrap();
        let set = ProbeSet::generate(NoiseKind::Z4, 2, basis, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.csv");
        set.dump_csv(1, &path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        assert_eq!(rdr.records().count(), 8 * 32);
        assert_eq!(set.weight(), 0.25);
    }
}
