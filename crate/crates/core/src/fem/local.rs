use faer::Mat;

use super::{assemble_on_patch, q1_energy, q1_stiffness, FemError, PermeabilityField};
use crate::grid::{GridHierarchy, NodePatch};
use crate::linalg::{CsrMatrix, SpdSolver};

/// A fine-grid function stored only on a rectangle of nodes; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVector {
    pub patch: NodePatch,
    pub values: Vec<f64>,
}

impl LocalVector {
    pub fn zeros(patch: NodePatch) -> Self {
        LocalVector { patch, values: vec![0.0; patch.len()] }
    }

    pub fn new(patch: NodePatch, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), patch.len());
        LocalVector { patch, values }
    }

    /// Restriction of a global nodal vector to `patch`.
    pub fn gather(grids: &GridHierarchy, patch: NodePatch, global: &[f64]) -> Self {
        let mut values = Vec::with_capacity(patch.len());
        for iy in patch.iy0..patch.iy1() {
            let row = grids.fine_node(patch.ix0, iy);
            values.extend_from_slice(&global[row..row + patch.nx]);
        }
        LocalVector { patch, values }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        if self.patch.contains(ix, iy) {
            self.values[self.patch.local(ix, iy)]
        } else {
            0.0
        }
    }

    /// `global += alpha * self`.
    pub fn scatter_add(&self, grids: &GridHierarchy, alpha: f64, global: &mut [f64]) {
        let p = self.patch;
        for (row, chunk) in self.values.chunks(p.nx).enumerate() {
            let start = grids.fine_node(p.ix0, p.iy0 + row);
            for (g, v) in global[start..start + p.nx].iter_mut().zip(chunk) {
                *g += alpha * v;
            }
        }
    }

    pub fn to_global(&self, grids: &GridHierarchy) -> Vec<f64> {
        let mut out = vec![0.0; grids.fine_node_count()];
        self.scatter_add(grids, 1.0, &mut out);
        out
    }

    /// Euclidean product of the nodal values over the common support.
    pub fn dot(&self, other: &LocalVector) -> f64 {
        let Some(common) = self.patch.intersect(&other.patch) else {
            return 0.0;
        };
        let mut sum = 0.0;
        for iy in common.iy0..common.iy1() {
            let a = self.patch.local(common.ix0, iy);
            let b = other.patch.local(common.ix0, iy);
            sum += self.values[a..a + common.nx]
                .iter()
                .zip(&other.values[b..b + common.nx])
                .map(|(x, y)| x * y)
                .sum::<f64>();
        }
        sum
    }

    /// Euclidean product against a global nodal vector.
    pub fn dot_global(&self, grids: &GridHierarchy, global: &[f64]) -> f64 {
        let p = self.patch;
        let mut sum = 0.0;
        for (row, chunk) in self.values.chunks(p.nx).enumerate() {
            let start = grids.fine_node(p.ix0, p.iy0 + row);
            sum += chunk.iter().zip(&global[start..start + p.nx]).map(|(x, y)| x * y).sum::<f64>();
        }
        sum
    }

    /// Copy of `self` on a larger patch.
    pub fn extended_to(&self, patch: NodePatch) -> LocalVector {
        assert!(patch.contains_patch(&self.patch));
        let mut out = LocalVector::zeros(patch);
        out.axpy(1.0, self);
        out
    }

    /// `self += alpha * other`; `other` must lie inside `self.patch`.
    pub fn axpy(&mut self, alpha: f64, other: &LocalVector) {
        assert!(self.patch.contains_patch(&other.patch));
        let o = other.patch;
        for (row, chunk) in other.values.chunks(o.nx).enumerate() {
            let start = self.patch.local(o.ix0, o.iy0 + row);
            for (s, v) in self.values[start..start + o.nx].iter_mut().zip(chunk) {
                *s += alpha * v;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Sets every node lying on the Dirichlet boundary of the domain to zero.
    pub fn zero_on_domain_boundary(&mut self, grids: &GridHierarchy) {
        let (mx, my) = (grids.fine_nodes_x() - 1, grids.fine_nodes_y() - 1);
        for local in 0..self.values.len() {
            let (ix, iy) = self.patch.lattice(local);
            if ix == 0 || iy == 0 || ix == mx || iy == my {
                self.values[local] = 0.0;
            }
        }
    }
}

/// Stiffness of a node rectangle with zero trace on its perimeter: the
/// Neumann patch matrix is kept for energy products, and the interior block is
/// factored once so that repeated right-hand sides are cheap.
#[derive(Debug, Clone)]
pub struct LocalDirichletSolver {
    patch: NodePatch,
    stiffness: CsrMatrix,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    coupling: CsrMatrix,
    factor: Option<SpdSolver>,
    /// `kappa` of the patch cells, row-major.
    cell_kappa: Vec<f64>,
    h: (f64, f64),
}

impl LocalDirichletSolver {
    pub fn new(grids: &GridHierarchy, kappa: &PermeabilityField, patch: NodePatch) -> Result<Self, FemError> {
        let local = q1_stiffness(grids.fine_hx(), grids.fine_hy());
        let stiffness = assemble_on_patch(grids, &patch, &local, |c| kappa.at(c));
        let (boundary, interior): (Vec<usize>, Vec<usize>) = (0..patch.len()).partition(|&l| patch.on_perimeter(l));
        let coupling = stiffness.submatrix(&interior, &boundary);
        let factor = if interior.is_empty() {
            None
        } else {
            Some(SpdSolver::new(stiffness.principal_submatrix(&interior))?)
        };
        let cell_kappa = (patch.iy0..patch.iy1() - 1)
            .flat_map(|cy| (patch.ix0..patch.ix1() - 1).map(move |cx| (cx, cy)))
            .map(|(cx, cy)| kappa.at(grids.fine_cell(cx, cy)))
            .collect();
        let h = (grids.fine_hx(), grids.fine_hy());
        Ok(LocalDirichletSolver { patch, stiffness, interior, boundary, coupling, factor, cell_kappa, h })
    }

    pub fn patch(&self) -> NodePatch {
        self.patch
    }

    /// Patch stiffness over every node of the rectangle (no boundary elimination).
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Local indices of the free nodes.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Local indices of the perimeter nodes, in patch order.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn has_empty_interior(&self) -> bool {
        self.interior.is_empty()
    }

    /// Solves `A_II x = rhs` for a functional given on the interior nodes.
    pub fn solve_interior(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.interior.len());
        match &self.factor {
            Some(f) => f.solve(rhs),
            None => Vec::new(),
        }
    }

    /// Dirichlet solve with zero trace; the returned flag is `false` when the
    /// interior is empty and the result is identically zero.
    pub fn solve(&self, rhs: &[f64]) -> (LocalVector, bool) {
        let x = self.solve_interior(rhs);
        let mut out = LocalVector::zeros(self.patch);
        for (&l, v) in self.interior.iter().zip(x) {
            out.values[l] = v;
        }
        (out, !self.has_empty_interior())
    }

    /// Discrete `kappa`-harmonic extension of perimeter data.
    pub fn harmonic_extension(&self, boundary_values: &[f64]) -> LocalVector {
        let g = Mat::<f64>::from_fn(self.boundary.len(), 1, |i, _| boundary_values[i]);
        let full = self.harmonic_extensions(&g);
        LocalVector::new(self.patch, (0..self.patch.len()).map(|i| full[(i, 0)]).collect())
    }

    /// Harmonic extensions of every column of `data` (perimeter nodes x k);
    /// rows of the result are patch-local nodes.
    pub fn harmonic_extensions(&self, data: &Mat<f64>) -> Mat<f64> {
        let k = data.ncols();
        assert_eq!(data.nrows(), self.boundary.len());
        let mut out = Mat::<f64>::zeros(self.patch.len(), k);
        for (b, &l) in self.boundary.iter().enumerate() {
            for c in 0..k {
                out[(l, c)] = data[(b, c)];
            }
        }
        if let Some(f) = &self.factor {
            let rhs = -self.coupling.mul_dense(data.as_ref());
            let x = f.solve_columns(rhs.as_ref());
            for (i, &l) in self.interior.iter().enumerate() {
                for c in 0..k {
                    out[(l, c)] = x[(i, c)];
                }
            }
        }
        out
    }

    /// Patch stiffness applied to a vector living on this patch.
    pub fn apply(&self, v: &LocalVector) -> LocalVector {
        assert_eq!(v.patch, self.patch);
        LocalVector::new(self.patch, self.stiffness.mul_vec(&v.values))
    }

    /// `a_omega(v, v)`, summed cell by cell from nodal differences so that
    /// near-constant values in high-`kappa` cells do not cancel.
    pub fn energy(&self, v: &LocalVector) -> f64 {
        assert_eq!(v.patch, self.patch);
        let p = self.patch;
        let mut sum = 0.0;
        for ly in 0..p.ny - 1 {
            for lx in 0..p.nx - 1 {
                let n0 = ly * p.nx + lx;
                let corners = [v.values[n0], v.values[n0 + 1], v.values[n0 + p.nx + 1], v.values[n0 + p.nx]];
                sum += self.cell_kappa[ly * (p.nx - 1) + lx] * q1_energy(corners, self.h.0, self.h.1);
            }
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{FineSystem, Source};

    fn channel_kappa(n: usize) -> PermeabilityField {
        let vals = (0..n * n).map(|c| if (c / n) % 5 == 2 { 1e4 } else { 1.0 }).collect();
        PermeabilityField::new(n, n, vals).unwrap()
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let g = GridHierarchy::unit_square(2, 2, 4).unwrap();
        let s = LocalDirichletSolver::new(&g, &channel_kappa(8), g.neighborhood(4).unwrap().patch).unwrap();
        let (v, ok) = s.solve(&vec![0.0; s.interior().len()]);
        assert!(ok);
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_interior_is_flagged() {
        let g = GridHierarchy::unit_square(1, 1, 1).unwrap();
        let k = PermeabilityField::constant(1, 1, 1.0).unwrap();
        let s = LocalDirichletSolver::new(&g, &k, g.element_patch(0, 0)).unwrap();
        let (v, ok) = s.solve(&[]);
        assert!(!ok && s.has_empty_interior());
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn whole_domain_patch_matches_global_solve() {
        let g = GridHierarchy::unit_square(2, 2, 4).unwrap();
        let k = channel_kappa(8);
        let f = Source::function(|x, y| 1.0 + x * y);
        let sys = FineSystem::new(&g, &k, &f).unwrap();
        let u = sys.solve_fine().unwrap();
        let patch = NodePatch { ix0: 0, iy0: 0, nx: 9, ny: 9 };
        let s = LocalDirichletSolver::new(&g, &k, patch).unwrap();
        let rhs: Vec<f64> = s.interior().iter().map(|&l| sys.load()[g.fine_node(l % 9, l / 9)]).collect();
        let (v, _) = s.solve(&rhs);
        for p in 0..u.len() {
            assert!((u.values[p] - v.values[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_patch_matches_independent_assembly() {
        // The patch problem on one coarse element, built from scratch as a
        // standalone 1x1 grid with the same fine cells.
        let g = GridHierarchy::unit_square(2, 2, 4).unwrap();
        let k = PermeabilityField::constant(8, 8, 1.0).unwrap();
        let patch = g.element_patch(1, 0);
        let s = LocalDirichletSolver::new(&g, &k, patch).unwrap();
        let load = crate::fem::assemble_load(&g, &Source::Constant(1.0));
        let rhs: Vec<f64> = s
            .interior()
            .iter()
            .map(|&l| {
                let (ix, iy) = patch.lattice(l);
                load[g.fine_node(ix, iy)]
            })
            .collect();
        let (v, _) = s.solve(&rhs);

        let sub = GridHierarchy::new(
            crate::grid::Domain { x0: 0.5, y0: 0.0, x1: 1.0, y1: 0.5 },
            1,
            1,
            4,
        )
        .unwrap();
        let reference = FineSystem::new(&sub, &PermeabilityField::constant(4, 4, 1.0).unwrap(), &Source::Constant(1.0))
            .unwrap()
            .solve_fine()
            .unwrap();
        for (a, b) in v.values.iter().zip(&reference.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn galerkin_identity() {
        let g = GridHierarchy::unit_square(3, 3, 4).unwrap();
        let k = channel_kappa(12);
        let s = LocalDirichletSolver::new(&g, &k, g.neighborhood(5).unwrap().patch).unwrap();
        let rhs: Vec<f64> = (0..s.interior().len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let (v, _) = s.solve(&rhs);
        let applied: f64 = s.interior().iter().zip(&rhs).map(|(&l, r)| v.values[l] * r).sum();
        let energy = s.energy(&v);
        assert!((energy - applied).abs() <= 1e-12 * energy);
    }

    #[test]
    fn energy_agrees_with_the_matrix_and_vanishes_on_constants() {
        let g = GridHierarchy::unit_square(3, 3, 4).unwrap();
        let s = LocalDirichletSolver::new(&g, &channel_kappa(12), g.neighborhood(5).unwrap().patch).unwrap();
        let v = LocalVector::new(s.patch(), (0..s.patch().len()).map(|i| ((i * 13) % 7) as f64).collect());
        let matrix = s.stiffness().bilinear(&v.values, &v.values);
        assert!((s.energy(&v) - matrix).abs() <= 1e-12 * matrix);
        let shifted = LocalVector::new(s.patch(), vec![1e8; s.patch().len()]);
        assert_eq!(s.energy(&shifted), 0.0);
    }

    #[test]
    fn harmonic_extension_of_ones_is_one() {
        let g = GridHierarchy::unit_square(2, 2, 5).unwrap();
        let s = LocalDirichletSolver::new(&g, &channel_kappa(10), g.neighborhood(4).unwrap().patch).unwrap();
        let v = s.harmonic_extension(&vec![1.0; s.boundary().len()]);
        assert!(v.values.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let av = s.apply(&v);
        assert!(av.values.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn local_vector_products() {
        let g = GridHierarchy::unit_square(2, 2, 2).unwrap();
        let a = LocalVector::new(NodePatch { ix0: 0, iy0: 0, nx: 3, ny: 2 }, (1..=6).map(f64::from).collect());
        let b = LocalVector::new(NodePatch { ix0: 1, iy0: 1, nx: 2, ny: 2 }, vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(a.dot(&b), 5.0 + 6.0);
        assert_eq!(a.dot(&b), b.dot(&a));
        let ga = a.to_global(&g);
        assert_eq!(b.dot_global(&g, &ga), 11.0);
        assert_eq!(LocalVector::gather(&g, b.patch, &ga).values, vec![5.0, 6.0, 0.0, 0.0]);
        let mut c = b.extended_to(NodePatch { ix0: 0, iy0: 0, nx: 5, ny: 5 });
        c.axpy(2.0, &a);
        assert_eq!(c.dot_global(&g, &vec![1.0; 25]), 4.0 + 42.0);
    }
}
