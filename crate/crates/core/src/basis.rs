//! Offline multiscale spaces.
//!
//! For every coarse neighborhood this module builds the snapshot space of
//! `kappa`-harmonic extensions of boundary deltas, solves the local spectral
//! problem in that space with the weight `kappa_tilde`, and multiplies the
//! resulting modes by the partition-of-unity function of the center node.
//!
//! Snapshot matrices are large (patch nodes x perimeter nodes) and are never
//! kept: a mode is stored by its perimeter coordinates and rebuilt on demand
//! as a harmonic extension, which is exact because every snapshot is harmonic.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, Par, Side};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fem::{assemble_on_patch, q1_mass, FemError, LocalDirichletSolver, LocalVector, PermeabilityField};
use crate::grid::{CoarseNeighborhood, GridHierarchy};

#[derive(Debug, Error)]
pub enum BasisError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("partition of unity has zero gradient on fine cell {cell}")]
    DegenerateWeight { cell: usize },
    #[error("weighted snapshot mass matrix of neighborhood {node} is not positive definite")]
    WeightNotSpd { node: usize },
    #[error("eigensolver failed on neighborhood {node}")]
    Eigen { node: usize },
    #[error("requested {requested} modes but the snapshot space has {available}")]
    TooManyModes { requested: usize, available: usize },
    #[error("spectrum cache: {0}")]
    Cache(String),
}

/// Standard multiscale functions `chi_i`, one per coarse node, each stored on
/// the node patch of its neighborhood.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    chi: Vec<LocalVector>,
}

impl PartitionOfUnity {
    pub fn get(&self, node: usize) -> &LocalVector {
        &self.chi[node]
    }

    pub fn len(&self) -> usize {
        self.chi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi.is_empty()
    }

    /// `sum_i chi_i` at every fine node.
    pub fn sum(&self, grids: &GridHierarchy) -> Vec<f64> {
        let mut out = vec![0.0; grids.fine_node_count()];
        for c in &self.chi {
            c.scatter_add(grids, 1.0, &mut out);
        }
        out
    }
}

/// Solves the element problems `-div(kappa grad chi) = 0` with data that is
/// linear along every coarse edge, 1 at one corner and 0 at the others.
pub fn compute_pou(grids: &GridHierarchy, kappa: &PermeabilityField) -> Result<PartitionOfUnity, BasisError> {
    let n = grids.n_fine() as f64;
    let mut chi: Vec<LocalVector> = (0..grids.coarse_node_count())
        .map(|id| LocalVector::zeros(grids.neighborhood(id).expect("valid id").patch))
        .collect();
    for ej in 0..grids.ny() {
        for ei in 0..grids.nx() {
            let patch = grids.element_patch(ei, ej);
            let solver = LocalDirichletSolver::new(grids, kappa, patch)?;
            let data = Mat::<f64>::from_fn(solver.boundary().len(), 4, |b, c| {
                let (ix, iy) = patch.lattice(solver.boundary()[b]);
                let s = (ix - patch.ix0) as f64 / n;
                let t = (iy - patch.iy0) as f64 / n;
                let fx = if c % 2 == 1 { s } else { 1.0 - s };
                let fy = if c / 2 == 1 { t } else { 1.0 - t };
                fx * fy
            });
            let ext = solver.harmonic_extensions(&data);
            for c in 0..4 {
                let node = grids.coarse_node(ei + c % 2, ej + c / 2);
                let target = &mut chi[node];
                for local in 0..patch.len() {
                    let (ix, iy) = patch.lattice(local);
                    let at = target.patch.local(ix, iy);
                    target.values[at] = ext[(local, c)];
                }
            }
        }
    }
    Ok(PartitionOfUnity { chi })
}

/// Cell weight `kappa_tilde = kappa * H^2 * sum_i |grad chi_i|^2`, gradients
/// taken at cell midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWeight {
    values: Vec<f64>,
}

impl SpectralWeight {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, cell: usize) -> f64 {
        self.values[cell]
    }
}

/// Midpoint gradient of a bilinear function from its corner values
/// (counterclockwise from the lower-left).
pub fn midpoint_gradient(v: [f64; 4], hx: f64, hy: f64) -> (f64, f64) {
    (((v[1] - v[0]) + (v[2] - v[3])) / (2.0 * hx), ((v[3] - v[0]) + (v[2] - v[1])) / (2.0 * hy))
}

pub fn compute_weight(
    grids: &GridHierarchy,
    kappa: &PermeabilityField,
    pou: &PartitionOfUnity,
) -> Result<SpectralWeight, BasisError> {
    let (hx, hy) = (grids.fine_hx(), grids.fine_hy());
    let mut grad2 = vec![0.0; grids.fine_cell_count()];
    for chi in &pou.chi {
        let p = chi.patch;
        for cy in p.iy0..p.iy1() - 1 {
            for cx in p.ix0..p.ix1() - 1 {
                let v = [chi.at(cx, cy), chi.at(cx + 1, cy), chi.at(cx + 1, cy + 1), chi.at(cx, cy + 1)];
                let (gx, gy) = midpoint_gradient(v, hx, hy);
                grad2[grids.fine_cell(cx, cy)] += gx * gx + gy * gy;
            }
        }
    }
    let h2 = grids.coarse_h() * grids.coarse_h();
    let mut values = Vec::with_capacity(grad2.len());
    for (cell, g) in grad2.into_iter().enumerate() {
        if g <= 0.0 {
            return Err(BasisError::DegenerateWeight { cell });
        }
        values.push(kappa.at(cell) * h2 * g);
    }
    Ok(SpectralWeight { values })
}

/// Harmonic snapshots of one neighborhood with the two Gram matrices of the
/// spectral problem in snapshot coordinates.
#[derive(Debug, Clone)]
pub struct SnapshotSpace {
    /// Snapshot `j` is column `j`; rows are patch-local nodes.
    pub vectors: Mat<f64>,
    /// `A_jk = a_omega(psi_j, psi_k)`.
    pub stiffness: Mat<f64>,
    /// `S_jk = (kappa_tilde psi_j, psi_k)_omega`.
    pub mass: Mat<f64>,
}

impl SnapshotSpace {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn compute_snapshots(grids: &GridHierarchy, solver: &LocalDirichletSolver, weight: &SpectralWeight) -> SnapshotSpace {
    let nb = solver.boundary().len();
    let vectors = solver.harmonic_extensions(&Mat::<f64>::identity(nb, nb));
    // Harmonic columns make A * P vanish on interior rows, so P^T A P is its
    // perimeter block.
    let ap = solver.stiffness().mul_dense(vectors.as_ref());
    let mut stiffness = Mat::<f64>::from_fn(nb, nb, |j, k| ap[(solver.boundary()[j], k)]);
    symmetrize(&mut stiffness);
    let local_mass = q1_mass(grids.fine_hx(), grids.fine_hy());
    let m = assemble_on_patch(grids, &solver.patch(), &local_mass, |c| weight.at(c));
    let mp = m.mul_dense(vectors.as_ref());
    let mut mass = vectors.transpose() * &mp;
    symmetrize(&mut mass);
    SnapshotSpace { vectors, stiffness, mass }
}

/// Eigenpairs of `A Psi = lambda S Psi`, ascending, `S`-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Column `k` holds the snapshot coordinates of mode `k`.
    pub coords: Mat<f64>,
    /// Diagonal shift added to `S` when its Cholesky factorization failed.
    pub shift: f64,
    /// `max |Psi^T S Psi - I|`.
    pub orthonormality_residual: f64,
    /// `max_k |Rayleigh(Psi_k) - lambda_k| / (1 + |lambda_k|)`.
    pub rayleigh_residual: f64,
}

impl LocalSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// The first eigenvalue not represented by `used` retained modes.
    pub fn next_eigenvalue(&self, used: usize) -> Option<f64> {
        self.eigenvalues.get(used).copied()
    }
}

pub fn solve_spectral(snap: &SnapshotSpace, node: usize) -> Result<LocalSpectrum, BasisError> {
    let n = snap.dim();
    let (a, s) = (&snap.stiffness, &snap.mass);
    let mut shift = 0.0;
    let l = match s.llt(Side::Lower) {
        Ok(llt) => llt.L().to_owned(),
        Err(_) => {
            let trace: f64 = (0..n).map(|i| s[(i, i)]).sum();
            shift = 1e-14 * trace;
            let shifted = Mat::<f64>::from_fn(n, n, |i, j| s[(i, j)] + if i == j { shift } else { 0.0 });
            shifted.llt(Side::Lower).map_err(|_| BasisError::WeightNotSpd { node })?.L().to_owned()
        }
    };
    let mut x = a.clone();
    solve_lower_triangular_in_place(l.as_ref(), x.as_mut(), Par::Seq);
    let mut c = x.transpose().to_owned();
    solve_lower_triangular_in_place(l.as_ref(), c.as_mut(), Par::Seq);
    symmetrize(&mut c);
    let evd = c.self_adjoint_eigen(Side::Lower).map_err(|_| BasisError::Eigen { node })?;
    let eigenvalues: Vec<f64> = (0..n).map(|k| evd.S()[k]).collect();
    let mut coords = evd.U().to_owned();
    solve_upper_triangular_in_place(l.transpose(), coords.as_mut(), Par::Seq);
    for k in 0..n {
        let col = coords.col(k);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            coords.col_mut(k).iter_mut().for_each(|v| *v = -*v);
        }
    }

    let sp = s * &coords;
    let gram = coords.transpose() * &sp;
    let ap = a * &coords;
    let mut orth: f64 = 0.0;
    let mut ray: f64 = 0.0;
    for k in 0..n {
        for j in 0..n {
            let target = if j == k { 1.0 } else { 0.0 };
            orth = orth.max((gram[(j, k)] - target).abs());
        }
        let num: f64 = (0..n).map(|i| coords[(i, k)] * ap[(i, k)]).sum();
        ray = ray.max((num / gram[(k, k)] - eigenvalues[k]).abs() / (1.0 + eigenvalues[k].abs()));
    }
    Ok(LocalSpectrum { eigenvalues, coords, shift, orthonormality_residual: orth, rayleigh_residual: ray })
}

/// Everything the online phase needs about one coarse neighborhood.
#[derive(Debug, Clone)]
pub struct NeighborhoodData {
    pub neighborhood: CoarseNeighborhood,
    /// Dirichlet solver on the neighborhood patch, reused for residual solves.
    pub solver: LocalDirichletSolver,
    pub chi: LocalVector,
    pub spectrum: LocalSpectrum,
}

impl NeighborhoodData {
    pub fn dim(&self) -> usize {
        self.spectrum.dim()
    }

    /// Modes `phi_k`, `k` in `range`, as patch columns.
    pub fn modes(&self, range: Range<usize>) -> Result<Mat<f64>, BasisError> {
        if range.end > self.dim() {
            return Err(BasisError::TooManyModes { requested: range.end, available: self.dim() });
        }
        let data = self.spectrum.coords.subcols(range.start, range.len()).to_owned();
        Ok(self.solver.harmonic_extensions(&data))
    }

    pub fn mode(&self, k: usize) -> Result<LocalVector, BasisError> {
        let m = self.modes(k..k + 1)?;
        Ok(LocalVector::new(self.solver.patch(), (0..m.nrows()).map(|i| m[(i, 0)]).collect()))
    }

    /// Offline basis functions `chi * phi_k`, zero on the domain boundary.
    pub fn offline_functions(&self, grids: &GridHierarchy, range: Range<usize>) -> Result<Vec<LocalVector>, BasisError> {
        let modes = self.modes(range)?;
        Ok((0..modes.ncols())
            .map(|c| {
                let values = (0..modes.nrows()).map(|i| self.chi.values[i] * modes[(i, c)]).collect();
                let mut v = LocalVector::new(self.chi.patch, values);
                v.zero_on_domain_boundary(grids);
                v
            })
            .collect())
    }
}

/// Offline data for every coarse neighborhood of a grid and coefficient.
#[derive(Debug, Clone)]
pub struct OfflineModel {
    pub grids: GridHierarchy,
    pub kappa: PermeabilityField,
    pub pou: PartitionOfUnity,
    pub weight: SpectralWeight,
    pub neighborhoods: Vec<NeighborhoodData>,
}

impl OfflineModel {
    pub fn build(grids: &GridHierarchy, kappa: &PermeabilityField) -> Result<Self, BasisError> {
        Self::build_inner(grids, kappa, None)
    }

    /// Like [`OfflineModel::build`], reusing spectra stored under `dir` when
    /// the grid and coefficient match.
    pub fn build_cached(grids: &GridHierarchy, kappa: &PermeabilityField, dir: &Path) -> Result<Self, BasisError> {
        fs::create_dir_all(dir).map_err(|e| BasisError::Cache(format!("{}: {e}", dir.display())))?;
        Self::build_inner(grids, kappa, Some(dir))
    }

    fn build_inner(grids: &GridHierarchy, kappa: &PermeabilityField, cache: Option<&Path>) -> Result<Self, BasisError> {
        let pou = compute_pou(grids, kappa)?;
        let weight = compute_weight(grids, kappa, &pou)?;
        let key = cache.map(|_| cache_key(grids, kappa));
        let neighborhoods = (0..grids.coarse_node_count())
            .into_par_iter()
            .map(|id| {
                let neighborhood = grids.neighborhood(id).expect("valid id");
                let solver = LocalDirichletSolver::new(grids, kappa, neighborhood.patch)?;
                let path = cache.zip(key.as_deref()).map(|(dir, key)| dir.join(format!("{key}-{id}.spec")));
                let cached = path.as_deref().and_then(|p| read_spectrum(p, solver.boundary().len()));
                let spectrum = match cached {
                    Some(s) => s,
                    None => {
                        let snap = compute_snapshots(grids, &solver, &weight);
                        let s = solve_spectral(&snap, id)?;
                        if let Some(p) = &path {
                            write_spectrum(p, &s)?;
                        }
                        s
                    }
                };
                Ok(NeighborhoodData { chi: pou.get(id).clone(), neighborhood, solver, spectrum })
            })
            .collect::<Result<Vec<_>, BasisError>>()?;
        Ok(OfflineModel { grids: grids.clone(), kappa: kappa.clone(), pou, weight, neighborhoods })
    }

    pub fn get(&self, node: usize) -> &NeighborhoodData {
        &self.neighborhoods[node]
    }
}

/// Hex SHA-256 of the grid geometry and every coefficient value.
pub fn cache_key(grids: &GridHierarchy, kappa: &PermeabilityField) -> String {
    let mut h = Sha256::new();
    let d = grids.domain();
    for v in [grids.nx(), grids.ny(), grids.n_fine()] {
        h.update((v as u64).to_le_bytes());
    }
    for v in [d.x0, d.y0, d.x1, d.y1] {
        h.update(v.to_le_bytes());
    }
    for v in kappa.values() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const CACHE_MAGIC: &[u8; 8] = b"GMSPEC1\0";

fn write_spectrum(path: &PathBuf, s: &LocalSpectrum) -> Result<(), BasisError> {
    let n = s.dim();
    let mut buf = Vec::with_capacity(8 * (n * n + n + 5));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in [s.shift, s.orthonormality_residual, s.rayleigh_residual] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &s.eigenvalues {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for k in 0..n {
        for i in 0..n {
            buf.extend_from_slice(&s.coords[(i, k)].to_le_bytes());
        }
    }
    // write-then-rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| BasisError::Cache(format!("{}: {e}", path.display())))
}

fn read_spectrum(path: &Path, expected_dim: usize) -> Option<LocalSpectrum> {
    let bytes = fs::read(path).ok()?;
    let n = expected_dim;
    if bytes.len() != 8 * (n * n + n + 5) || &bytes[..8] != CACHE_MAGIC {
        return None;
    }
    let mut words = bytes[8..].chunks_exact(8).map(|c| c.try_into().unwrap());
    if u64::from_le_bytes(words.next()?) as usize != n {
        return None;
    }
    let mut floats = words.map(f64::from_le_bytes);
    let shift = floats.next()?;
    let orthonormality_residual = floats.next()?;
    let rayleigh_residual = floats.next()?;
    let eigenvalues: Vec<f64> = floats.by_ref().take(n).collect();
    let rest: Vec<f64> = floats.collect();
    let coords = Mat::from_fn(n, n, |i, k| rest[k * n + i]);
    Some(LocalSpectrum { eigenvalues, coords, shift, orthonormality_residual, rayleigh_residual })
}
