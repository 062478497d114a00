//! Fine-scale conforming Q1 finite elements for `-div(kappa grad u) = f` with
//! homogeneous Dirichlet data.
//!
//! The coefficient is constant on each fine cell, so element stiffness and
//! mass matrices are integrated exactly in closed form. Loads use a 2x2 Gauss
//! rule per cell. All global vectors live on *all* fine nodes; constrained
//! (boundary) entries are zero.

mod field;
mod local;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridHierarchy, NodePatch};
use crate::linalg::{backward_error, CsrMatrix, LinalgError, SpdSolver};

pub use field::PermeabilityField;
pub use local::{LocalDirichletSolver, LocalVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("field has {found} values, expected {expected}")]
    FieldSize { expected: usize, found: usize },
    #[error("kappa must be positive and finite (cell {cell} has {value})")]
    NonPositiveKappa { cell: usize, value: f64 },
    #[error("field is {found_x}x{found_y} cells but the grid has {grid_x}x{grid_y}")]
    FieldGridMismatch { found_x: usize, found_y: usize, grid_x: usize, grid_y: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("fine solve residual {0:e} exceeds 1e-12")]
    InaccurateSolve(f64),
    #[error("reference solution has zero norm")]
    ZeroReference,
}

/// Q1 stiffness matrix of an `hx x hy` cell with unit coefficient; local nodes
/// counterclockwise from the lower-left corner.
pub fn q1_stiffness(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    const CORNER: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];
    let d = |s: usize, t: usize| if s == t { 1.0 } else { -1.0 };
    let m = |s: usize, t: usize| if s == t { 1.0 / 3.0 } else { 1.0 / 6.0 };
    let mut k = [[0.0; 4]; 4];
    for (a, &(ax, ay)) in CORNER.iter().enumerate() {
        for (b, &(bx, by)) in CORNER.iter().enumerate() {
            k[a][b] = hy / hx * d(ax, bx) * m(ay, by) + hx / hy * m(ax, bx) * d(ay, by);
        }
    }
    k
}

/// Q1 consistent mass matrix of an `hx x hy` cell.
/// `int |grad u|^2` over one cell for bilinear `u` with the given corner
/// values (counterclockwise from the lower left), from edge differences.
pub fn q1_energy(u: [f64; 4], hx: f64, hy: f64) -> f64 {
    let (bottom, top) = (u[1] - u[0], u[2] - u[3]);
    let (left, right) = (u[3] - u[0], u[2] - u[1]);
    let ex = bottom * bottom + bottom * top + top * top;
    let ey = left * left + left * right + right * right;
    (hy / hx * ex + hx / hy * ey) / 3.0
}

pub fn q1_mass(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    const CORNER: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];
    let m = |s: usize, t: usize| if s == t { 1.0 / 3.0 } else { 1.0 / 6.0 };
    let mut k = [[0.0; 4]; 4];
    for (a, &(ax, ay)) in CORNER.iter().enumerate() {
        for (b, &(bx, by)) in CORNER.iter().enumerate() {
            k[a][b] = hx * hy * m(ax, bx) * m(ay, by);
        }
    }
    k
}

/// Assembles `sum_cells coeff(cell) * local` over the cells inside `patch`,
/// indexed by patch-local node numbers.
pub fn assemble_on_patch(
    grids: &GridHierarchy,
    patch: &NodePatch,
    local: &[[f64; 4]; 4],
    coeff: impl Fn(usize) -> f64,
) -> CsrMatrix {
    let mut trip = Vec::with_capacity((patch.nx - 1) * (patch.ny - 1) * 16);
    for cy in patch.iy0..patch.iy1() - 1 {
        for cx in patch.ix0..patch.ix1() - 1 {
            let c = coeff(grids.fine_cell(cx, cy));
            let nodes = [
                patch.local(cx, cy),
                patch.local(cx + 1, cy),
                patch.local(cx + 1, cy + 1),
                patch.local(cx, cy + 1),
            ];
            for a in 0..4 {
                for b in 0..4 {
                    trip.push((nodes[a], nodes[b], c * local[a][b]));
                }
            }
        }
    }
    CsrMatrix::from_triplets(patch.len(), patch.len(), &trip)
}

fn whole_grid_patch(grids: &GridHierarchy) -> NodePatch {
    NodePatch { ix0: 0, iy0: 0, nx: grids.fine_nodes_x(), ny: grids.fine_nodes_y() }
}

fn check_field(grids: &GridHierarchy, kappa: &PermeabilityField) -> Result<(), FemError> {
    if kappa.cells_x() != grids.fine_cells_x() || kappa.cells_y() != grids.fine_cells_y() {
        return Err(FemError::FieldGridMismatch {
            found_x: kappa.cells_x(),
            found_y: kappa.cells_y(),
            grid_x: grids.fine_cells_x(),
            grid_y: grids.fine_cells_y(),
        });
    }
    Ok(())
}

/// Global stiffness `a(phi_p, phi_q) = int kappa grad phi_p . grad phi_q` over all fine nodes.
pub fn assemble_stiffness(grids: &GridHierarchy, kappa: &PermeabilityField) -> Result<CsrMatrix, FemError> {
    check_field(grids, kappa)?;
    let local = q1_stiffness(grids.fine_hx(), grids.fine_hy());
    Ok(assemble_on_patch(grids, &whole_grid_patch(grids), &local, |c| kappa.at(c)))
}

/// Global mass matrix with an optional per-cell weight.
pub fn assemble_mass(grids: &GridHierarchy, weight: Option<&[f64]>) -> CsrMatrix {
    let local = q1_mass(grids.fine_hx(), grids.fine_hy());
    match weight {
        Some(w) => assemble_on_patch(grids, &whole_grid_patch(grids), &local, |c| w[c]),
        None => assemble_on_patch(grids, &whole_grid_patch(grids), &local, |_| 1.0),
    }
}

/// Right-hand side `f` of the elliptic problem.
#[derive(Clone)]
pub enum Source {
    Constant(f64),
    /// One value per fine cell, row-major.
    PerCell(Vec<f64>),
    /// Pointwise evaluation `f(x, y)`.
    Function(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl Source {
    pub fn function(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Source::Function(Arc::new(f))
    }
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::PerCell(v) => write!(f, "PerCell({} values)", v.len()),
            Source::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// Load vector `(f, phi_p)` over all fine nodes, 2x2 Gauss per cell.
pub fn assemble_load(grids: &GridHierarchy, source: &Source) -> Vec<f64> {
    let (hx, hy) = (grids.fine_hx(), grids.fine_hy());
    let g = 0.5 / 3f64.sqrt();
    let gauss = [0.5 - g, 0.5 + g];
    let mut load = vec![0.0; grids.fine_node_count()];
    let origin = grids.domain();
    for cy in 0..grids.fine_cells_y() {
        for cx in 0..grids.fine_cells_x() {
            let cell = grids.fine_cell(cx, cy);
            let nodes = grids.cell_nodes(cx, cy);
            let mut contrib = [0.0; 4];
            for &sy in &gauss {
                for &sx in &gauss {
                    let fval = match source {
                        Source::Constant(c) => *c,
                        Source::PerCell(v) => v[cell],
                        Source::Function(func) => {
                            func(origin.x0 + (cx as f64 + sx) * hx, origin.y0 + (cy as f64 + sy) * hy)
                        }
                    };
                    let shape = [(1.0 - sx) * (1.0 - sy), sx * (1.0 - sy), sx * sy, (1.0 - sx) * sy];
                    for a in 0..4 {
                        contrib[a] += 0.25 * hx * hy * fval * shape[a];
                    }
                }
            }
            for a in 0..4 {
                load[nodes[a]] += contrib[a];
            }
        }
    }
    for (p, v) in load.iter_mut().enumerate() {
        if grids.is_boundary_fine_node(p) {
            *v = 0.0;
        }
    }
    load
}

/// Nodal coefficients over all fine nodes; zero on the Dirichlet boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FineFunction {
    pub values: Vec<f64>,
}

impl FineFunction {
    pub fn zeros(n: usize) -> Self {
        FineFunction { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sub(&self, other: &FineFunction) -> FineFunction {
        FineFunction { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }
}

/// The assembled fine-grid problem: stiffness, L2 mass and load over all fine
/// nodes, plus the free (non-Dirichlet) node numbering.
#[derive(Debug, Clone)]
pub struct FineSystem {
    grids: GridHierarchy,
    kappa: PermeabilityField,
    stiffness: CsrMatrix,
    mass: CsrMatrix,
    load: Vec<f64>,
    free: Vec<usize>,
}

impl FineSystem {
    pub fn new(grids: &GridHierarchy, kappa: &PermeabilityField, source: &Source) -> Result<Self, FemError> {
        let stiffness = assemble_stiffness(grids, kappa)?;
        let mass = assemble_mass(grids, None);
        let load = assemble_load(grids, source);
        let free = (0..grids.fine_node_count()).filter(|&p| !grids.is_boundary_fine_node(p)).collect();
        Ok(FineSystem { grids: grids.clone(), kappa: kappa.clone(), stiffness, mass, load, free })
    }

    pub fn grids(&self) -> &GridHierarchy {
        &self.grids
    }

    pub fn kappa(&self) -> &PermeabilityField {
        &self.kappa
    }

    /// Stiffness over all fine nodes (Dirichlet rows not eliminated).
    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    /// Stiffness restricted to free nodes.
    pub fn free_stiffness(&self) -> CsrMatrix {
        self.stiffness.principal_submatrix(&self.free)
    }

    /// Solves the fine-scale Galerkin problem; this is the reference solution.
    /// Fails if the backward error exceeds `1e-12`.
    pub fn solve_fine(&self) -> Result<FineFunction, FemError> {
        let a = self.free_stiffness();
        let b: Vec<f64> = self.free.iter().map(|&p| self.load[p]).collect();
        let mut values = vec![0.0; self.grids.fine_node_count()];
        if b.iter().all(|&v| v == 0.0) {
            return Ok(FineFunction { values });
        }
        let solver = SpdSolver::new(a)?;
        let x = solver.solve(&b);
        // with kappa spanning many decades |b - Au| / |b| bottoms out near
        // eps |A| |u| / |b|, so the check is on the backward error
        let res = backward_error(solver.matrix(), &x, &b);
        if res > 1e-12 {
            return Err(FemError::InaccurateSolve(res));
        }
        for (&p, &v) in self.free.iter().zip(&x) {
            values[p] = v;
        }
        Ok(FineFunction { values })
    }

    /// `a(u, v)`.
    pub fn energy_product(&self, u: &FineFunction, v: &FineFunction) -> f64 {
        self.stiffness.bilinear(&u.values, &v.values)
    }

    pub fn energy_norm(&self, u: &FineFunction) -> f64 {
        self.energy_product(u, u).max(0.0).sqrt()
    }

    pub fn l2_norm(&self, u: &FineFunction) -> f64 {
        self.mass.bilinear(&u.values, &u.values).max(0.0).sqrt()
    }

    /// Relative errors `(e_a, e_2)` of `approx` against `reference`.
    pub fn error_pair(&self, reference: &FineFunction, approx: &FineFunction) -> Result<(f64, f64), FemError> {
        let (nv, nl) = (self.energy_norm(reference), self.l2_norm(reference));
        if nv == 0.0 || nl == 0.0 {
            return Err(FemError::ZeroReference);
        }
        let e = reference.sub(approx);
        Ok((self.energy_norm(&e) / nv, self.l2_norm(&e) / nl))
    }

    /// `A u` over all nodes.
    pub fn apply(&self, u: &FineFunction) -> Vec<f64> {
        self.stiffness.mul_vec(&u.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize, nf: usize) -> GridHierarchy {
        GridHierarchy::unit_square(n, n, nf).unwrap()
    }

    /// Independent stiffness: gradients of the four bilinear shape functions
    /// integrated with a 3x3 Gauss rule on the unit square.
    fn quadrature_stiffness() -> [[f64; 4]; 4] {
        let pts = [(0.5 - 0.5 * (0.6f64).sqrt(), 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + 0.5 * (0.6f64).sqrt(), 5.0 / 18.0)];
        let grad = |a: usize, x: f64, y: f64| -> (f64, f64) {
            match a {
                0 => (-(1.0 - y), -(1.0 - x)),
                1 => (1.0 - y, -x),
                2 => (y, x),
                _ => (-y, 1.0 - x),
            }
        };
        let mut k = [[0.0; 4]; 4];
        for &(x, wx) in &pts {
            for &(y, wy) in &pts {
                for a in 0..4 {
                    for b in 0..4 {
                        let (ga, gb) = (grad(a, x, y), grad(b, x, y));
                        k[a][b] += wx * wy * (ga.0 * gb.0 + ga.1 * gb.1);
                    }
                }
            }
        }
        k
    }

    #[test]
    fn unit_cell_stiffness() {
        let k = q1_stiffness(1.0, 1.0);
        let q = quadrature_stiffness();
        for a in 0..4 {
            for b in 0..4 {
                assert!((k[a][b] - q[a][b]).abs() < 1e-14);
            }
        }
        assert!((k[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((k[0][1] + 1.0 / 6.0).abs() < 1e-15);
        assert!((k[0][3] + 1.0 / 6.0).abs() < 1e-15);
        assert!((k[0][2] + 1.0 / 3.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn difference_energy_matches_element_matrix(
            u in proptest::array::uniform4(-10.0f64..10.0), hx in 0.01f64..2.0, hy in 0.01f64..2.0,
        ) {
            let k = q1_stiffness(hx, hy);
            let quad: f64 = (0..4).flat_map(|a| (0..4).map(move |b| (a, b))).map(|(a, b)| u[a] * k[a][b] * u[b]).sum();
            let e = q1_energy(u, hx, hy);
            proptest::prop_assert!(e >= 0.0);
            proptest::prop_assert!((e - quad).abs() <= 1e-12 * (1.0 + quad.abs()));
        }
    }

    #[test]
    fn stiffness_is_linear_in_kappa_and_symmetric() {
        let g = grid(2, 3);
        let vals: Vec<f64> = (0..g.fine_cell_count()).map(|c| 1.0 + (c % 7) as f64).collect();
        let k1 = PermeabilityField::new(6, 6, vals.clone()).unwrap();
        let k2 = PermeabilityField::new(6, 6, vals.iter().map(|v| 8.0 * v).collect()).unwrap();
        let a1 = assemble_stiffness(&g, &k1).unwrap();
        let a2 = assemble_stiffness(&g, &k2).unwrap();
        assert_eq!(a1.asymmetry(), 0.0);
        for r in 0..a1.nrows() {
            for c in 0..a1.ncols() {
                assert!((a2.get(r, c) - 8.0 * a1.get(r, c)).abs() <= 1e-13 * a2.get(r, r).abs());
            }
        }
    }

    #[test]
    fn dirichlet_eliminated_matrix_is_positive_definite() {
        // 2x2 fine cells: a single free node with diagonal 4 * 2/3.
        let g = GridHierarchy::unit_square(1, 1, 2).unwrap();
        let sys = FineSystem::new(&g, &PermeabilityField::constant(2, 2, 1.0).unwrap(), &Source::Constant(1.0)).unwrap();
        let a = sys.free_stiffness().to_dense();
        assert_eq!(a.nrows(), 1);
        assert!((a[(0, 0)] - 8.0 / 3.0).abs() < 1e-14);
        let eig = a.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        assert!(eig[0] > 0.0);
    }

    #[test]
    fn mismatched_field_rejected() {
        let g = grid(2, 2);
        let k = PermeabilityField::constant(3, 4, 1.0).unwrap();
        assert!(matches!(assemble_stiffness(&g, &k), Err(FemError::FieldGridMismatch { .. })));
    }

    #[test]
    fn load_vectors() {
        let g = grid(2, 4);
        assert!(assemble_load(&g, &Source::Constant(0.0)).iter().all(|&v| v == 0.0));
        let b = assemble_load(&g, &Source::Constant(1.0));
        let h2 = g.fine_h() * g.fine_h();
        for p in 0..g.fine_node_count() {
            if !g.is_boundary_fine_node(p) {
                assert!((b[p] - h2).abs() < 1e-15);
            } else {
                assert_eq!(b[p], 0.0);
            }
        }
        let f1 = Source::function(|x, y| x * y);
        let f2 = Source::function(|x, _| (3.0 * x).cos());
        let f12 = Source::function(|x, y| x * y + (3.0 * x).cos());
        let (b1, b2, b12) = (assemble_load(&g, &f1), assemble_load(&g, &f2), assemble_load(&g, &f12));
        for p in 0..b1.len() {
            assert!((b1[p] + b2[p] - b12[p]).abs() < 1e-15);
        }
    }

    fn sine_problem(n_fine: usize) -> (FineSystem, FineFunction) {
        let g = grid(4, n_fine);
        let n = g.fine_cells_x();
        let k = PermeabilityField::constant(n, n, 1.0).unwrap();
        let f = Source::function(|x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
        let sys = FineSystem::new(&g, &k, &f).unwrap();
        let u = sys.solve_fine().unwrap();
        (sys, u)
    }

    #[test]
    fn unit_coefficient_solve_has_small_plain_residual() {
        let (sys, u) = sine_problem(8);
        let x: Vec<f64> = sys.free_nodes().iter().map(|&p| u.values[p]).collect();
        let b: Vec<f64> = sys.free_nodes().iter().map(|&p| sys.load()[p]).collect();
        assert!(crate::linalg::relative_residual(&sys.free_stiffness(), &x, &b) <= 1e-12);
    }

    /// L2 error against `sin(pi x) sin(pi y)` with a 3x3 Gauss rule per cell.
    fn l2_error_to_exact(sys: &FineSystem, u: &FineFunction) -> f64 {
        let g = sys.grids();
        let (hx, hy) = (g.fine_hx(), g.fine_hy());
        let pts = [(0.5 - 0.5 * (0.6f64).sqrt(), 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + 0.5 * (0.6f64).sqrt(), 5.0 / 18.0)];
        let mut err = 0.0;
        for cy in 0..g.fine_cells_y() {
            for cx in 0..g.fine_cells_x() {
                let nodes = g.cell_nodes(cx, cy);
                for &(sx, wx) in &pts {
                    for &(sy, wy) in &pts {
                        let uh = u.values[nodes[0]] * (1.0 - sx) * (1.0 - sy)
                            + u.values[nodes[1]] * sx * (1.0 - sy)
                            + u.values[nodes[2]] * sx * sy
                            + u.values[nodes[3]] * (1.0 - sx) * sy;
                        let (x, y) = ((cx as f64 + sx) * hx, (cy as f64 + sy) * hy);
                        let ex = (PI * x).sin() * (PI * y).sin();
                        err += wx * wy * hx * hy * (uh - ex) * (uh - ex);
                    }
                }
            }
        }
        err.sqrt()
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        let errs: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&n| {
                let (sys, u) = sine_problem(n);
                l2_error_to_exact(&sys, &u)
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}, errors {errs:?}");
        }
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let g = grid(2, 3);
        let sys = FineSystem::new(&g, &PermeabilityField::constant(6, 6, 3.0).unwrap(), &Source::Constant(0.0)).unwrap();
        assert!(sys.solve_fine().unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn superposition() {
        let g = grid(2, 5);
        let vals: Vec<f64> = (0..100).map(|c| if c % 9 == 0 { 1e3 } else { 1.0 }).collect();
        let k = PermeabilityField::new(10, 10, vals).unwrap();
        let s1 = Source::function(|x, _| x);
        let s2 = Source::function(|_, y| 1.0 - y * y);
        let s12 = Source::function(|x, y| x + 1.0 - y * y);
        let u1 = FineSystem::new(&g, &k, &s1).unwrap().solve_fine().unwrap();
        let u2 = FineSystem::new(&g, &k, &s2).unwrap().solve_fine().unwrap();
        let u12 = FineSystem::new(&g, &k, &s12).unwrap().solve_fine().unwrap();
        let scale = u12.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for p in 0..u1.len() {
            assert!((u1.values[p] + u2.values[p] - u12.values[p]).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn error_pairs_and_energy() {
        let (sys, u) = sine_problem(4);
        assert_eq!(sys.error_pair(&u, &u).unwrap(), (0.0, 0.0));
        let (ea, e2) = sys.error_pair(&u, &FineFunction::zeros(u.len())).unwrap();
        assert!((ea - 1.0).abs() < 1e-15 && (e2 - 1.0).abs() < 1e-15);
        assert!(sys.error_pair(&FineFunction::zeros(u.len()), &u).is_err());

        // u^T A u against a direct per-cell evaluation of int kappa |grad u|^2
        let g = sys.grids();
        let k = q1_stiffness(g.fine_hx(), g.fine_hy());
        let mut direct = 0.0;
        for cy in 0..g.fine_cells_y() {
            for cx in 0..g.fine_cells_x() {
                let n = g.cell_nodes(cx, cy);
                let v: Vec<f64> = n.iter().map(|&p| u.values[p]).collect();
                for a in 0..4 {
                    for b in 0..4 {
                        direct += v[a] * k[a][b] * v[b];
                    }
                }
            }
        }
        let energy = sys.energy_product(&u, &u);
        assert!((energy - direct).abs() <= 1e-12 * energy);
    }
}
