//! Two-level structured grids: the coarse partition, its uniform refinement,
//! coarse neighborhoods and the four-coloring used for online enrichment.
//!
//! Everything is indexed row-major with `x` running fastest, both for coarse
//! nodes and for fine nodes/cells. File formats rely on this ordering.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid counts must be positive (nx={nx}, ny={ny}, n_fine={n_fine})")]
    NonPositiveCount { nx: usize, ny: usize, n_fine: usize },
    #[error("degenerate domain [{x0}, {x1}] x [{y0}, {y1}]")]
    DegenerateDomain { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("coarse node {id} out of range (grid has {count} coarse nodes)")]
    InvalidNode { id: usize, count: usize },
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Domain {
    pub const UNIT_SQUARE: Domain = Domain { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

impl Default for Domain {
    fn default() -> Self {
        Domain::UNIT_SQUARE
    }
}

/// Rectangle of fine-grid nodes `[ix0, ix0 + nx) x [iy0, iy0 + ny)`, used as
/// the support of local vectors. Local indices are row-major, x fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodePatch {
    pub ix0: usize,
    pub iy0: usize,
    pub nx: usize,
    pub ny: usize,
}

impl NodePatch {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ix1(&self) -> usize {
        self.ix0 + self.nx
    }

    pub fn iy1(&self) -> usize {
        self.iy0 + self.ny
    }

    pub fn contains(&self, ix: usize, iy: usize) -> bool {
        ix >= self.ix0 && ix < self.ix1() && iy >= self.iy0 && iy < self.iy1()
    }

    pub fn contains_patch(&self, other: &NodePatch) -> bool {
        other.ix0 >= self.ix0
            && other.ix1() <= self.ix1()
            && other.iy0 >= self.iy0
            && other.iy1() <= self.iy1()
    }

    /// Local index of the global lattice point `(ix, iy)`; caller guarantees containment.
    #[inline]
    pub fn local(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(self.contains(ix, iy));
        (iy - self.iy0) * self.nx + (ix - self.ix0)
    }

    /// Global lattice coordinates of a local index.
    #[inline]
    pub fn lattice(&self, local: usize) -> (usize, usize) {
        (self.ix0 + local % self.nx, self.iy0 + local / self.nx)
    }

    /// Whether a local node lies on the perimeter of the rectangle.
    pub fn on_perimeter(&self, local: usize) -> bool {
        let (lx, ly) = (local % self.nx, local / self.nx);
        lx == 0 || ly == 0 || lx + 1 == self.nx || ly + 1 == self.ny
    }

    pub fn intersect(&self, other: &NodePatch) -> Option<NodePatch> {
        let ix0 = self.ix0.max(other.ix0);
        let iy0 = self.iy0.max(other.iy0);
        let ix1 = self.ix1().min(other.ix1());
        let iy1 = self.iy1().min(other.iy1());
        (ix0 < ix1 && iy0 < iy1).then(|| NodePatch { ix0, iy0, nx: ix1 - ix0, ny: iy1 - iy0 })
    }

    /// Smallest patch containing both.
    pub fn union_hull(&self, other: &NodePatch) -> NodePatch {
        let ix0 = self.ix0.min(other.ix0);
        let iy0 = self.iy0.min(other.iy0);
        let ix1 = self.ix1().max(other.ix1());
        let iy1 = self.iy1().max(other.iy1());
        NodePatch { ix0, iy0, nx: ix1 - ix0, ny: iy1 - iy0 }
    }
}

/// Coarse grid `Nx x Ny` of rectangles, each split into `n_fine x n_fine` fine cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridHierarchy {
    domain: Domain,
    nx: usize,
    ny: usize,
    n_fine: usize,
}

impl GridHierarchy {
    pub fn new(domain: Domain, nx: usize, ny: usize, n_fine: usize) -> Result<Self, GridError> {
        if nx == 0 || ny == 0 || n_fine == 0 {
            return Err(GridError::NonPositiveCount { nx, ny, n_fine });
        }
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(GridError::DegenerateDomain {
                x0: domain.x0,
                y0: domain.y0,
                x1: domain.x1,
                y1: domain.y1,
            });
        }
        Ok(GridHierarchy { domain, nx, ny, n_fine })
    }

    /// Shorthand for the unit square.
    pub fn unit_square(nx: usize, ny: usize, n_fine: usize) -> Result<Self, GridError> {
        Self::new(Domain::UNIT_SQUARE, nx, ny, n_fine)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Coarse elements in x.
    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Coarse elements in y.
    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Fine cells per coarse cell per direction.
    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn coarse_hx(&self) -> f64 {
        self.domain.width() / self.nx as f64
    }

    pub fn coarse_hy(&self) -> f64 {
        self.domain.height() / self.ny as f64
    }

    /// Coarse mesh size `H`; the larger side for non-square elements.
    pub fn coarse_h(&self) -> f64 {
        self.coarse_hx().max(self.coarse_hy())
    }

    pub fn fine_hx(&self) -> f64 {
        self.coarse_hx() / self.n_fine as f64
    }

    pub fn fine_hy(&self) -> f64 {
        self.coarse_hy() / self.n_fine as f64
    }

    /// Fine mesh size `h`; the larger side for non-square cells.
    pub fn fine_h(&self) -> f64 {
        self.fine_hx().max(self.fine_hy())
    }

    pub fn fine_cells_x(&self) -> usize {
        self.nx * self.n_fine
    }

    pub fn fine_cells_y(&self) -> usize {
        self.ny * self.n_fine
    }

    pub fn fine_cell_count(&self) -> usize {
        self.fine_cells_x() * self.fine_cells_y()
    }

    pub fn fine_nodes_x(&self) -> usize {
        self.fine_cells_x() + 1
    }

    pub fn fine_nodes_y(&self) -> usize {
        self.fine_cells_y() + 1
    }

    pub fn fine_node_count(&self) -> usize {
        self.fine_nodes_x() * self.fine_nodes_y()
    }

    pub fn coarse_node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn coarse_element_count(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn fine_node(&self, ix: usize, iy: usize) -> usize {
        iy * self.fine_nodes_x() + ix
    }

    #[inline]
    pub fn fine_node_lattice(&self, id: usize) -> (usize, usize) {
        (id % self.fine_nodes_x(), id / self.fine_nodes_x())
    }

    #[inline]
    pub fn fine_cell(&self, cx: usize, cy: usize) -> usize {
        cy * self.fine_cells_x() + cx
    }

    #[inline]
    pub fn fine_cell_lattice(&self, id: usize) -> (usize, usize) {
        (id % self.fine_cells_x(), id / self.fine_cells_x())
    }

    pub fn fine_node_position(&self, id: usize) -> (f64, f64) {
        let (ix, iy) = self.fine_node_lattice(id);
        (
            self.domain.x0 + ix as f64 * self.fine_hx(),
            self.domain.y0 + iy as f64 * self.fine_hy(),
        )
    }

    pub fn fine_cell_center(&self, id: usize) -> (f64, f64) {
        let (cx, cy) = self.fine_cell_lattice(id);
        (
            self.domain.x0 + (cx as f64 + 0.5) * self.fine_hx(),
            self.domain.y0 + (cy as f64 + 0.5) * self.fine_hy(),
        )
    }

    pub fn is_boundary_fine_node(&self, id: usize) -> bool {
        let (ix, iy) = self.fine_node_lattice(id);
        ix == 0 || iy == 0 || ix + 1 == self.fine_nodes_x() || iy + 1 == self.fine_nodes_y()
    }

    /// Fine nodes of the four corners of fine cell `(cx, cy)`, counterclockwise
    /// from the lower-left corner.
    #[inline]
    pub fn cell_nodes(&self, cx: usize, cy: usize) -> [usize; 4] {
        let n0 = self.fine_node(cx, cy);
        let w = self.fine_nodes_x();
        [n0, n0 + 1, n0 + w + 1, n0 + w]
    }

    #[inline]
    pub fn coarse_node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    #[inline]
    pub fn coarse_node_lattice(&self, id: usize) -> (usize, usize) {
        (id % (self.nx + 1), id / (self.nx + 1))
    }

    #[inline]
    pub fn coarse_element(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coarse_element_lattice(&self, id: usize) -> (usize, usize) {
        (id % self.nx, id / self.nx)
    }

    pub fn coarse_node_position(&self, id: usize) -> (f64, f64) {
        let (i, j) = self.coarse_node_lattice(id);
        (
            self.domain.x0 + i as f64 * self.coarse_hx(),
            self.domain.y0 + j as f64 * self.coarse_hy(),
        )
    }

    /// Closed fine-node patch of coarse element `(i, j)`.
    pub fn element_patch(&self, i: usize, j: usize) -> NodePatch {
        let n = self.n_fine;
        NodePatch { ix0: i * n, iy0: j * n, nx: n + 1, ny: n + 1 }
    }

    pub fn is_interior_coarse_node(&self, id: usize) -> bool {
        let (i, j) = self.coarse_node_lattice(id);
        i > 0 && j > 0 && i < self.nx && j < self.ny
    }

    /// Coarse nodes that carry basis functions under the given convention.
    pub fn enrichable_nodes(&self, convention: DofConvention) -> Vec<usize> {
        (0..self.coarse_node_count())
            .filter(|&id| match convention {
                DofConvention::All => true,
                DofConvention::Interior => self.is_interior_coarse_node(id),
            })
            .collect()
    }

    /// The coarse neighborhood of a coarse node: the union of the coarse
    /// elements whose closure contains it.
    pub fn neighborhood(&self, node: usize) -> Result<CoarseNeighborhood, GridError> {
        if node >= self.coarse_node_count() {
            return Err(GridError::InvalidNode { id: node, count: self.coarse_node_count() });
        }
        let (i, j) = self.coarse_node_lattice(node);
        let ei0 = i.saturating_sub(1);
        let ei1 = i.min(self.nx - 1);
        let ej0 = j.saturating_sub(1);
        let ej1 = j.min(self.ny - 1);
        let mut elements = Vec::with_capacity(4);
        for ej in ej0..=ej1 {
            for ei in ei0..=ei1 {
                elements.push(self.coarse_element(ei, ej));
            }
        }
        let n = self.n_fine;
        let patch = NodePatch {
            ix0: ei0 * n,
            iy0: ej0 * n,
            nx: (ei1 - ei0 + 1) * n + 1,
            ny: (ej1 - ej0 + 1) * n + 1,
        };
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for local in 0..patch.len() {
            let (ix, iy) = patch.lattice(local);
            let id = self.fine_node(ix, iy);
            if patch.on_perimeter(local) {
                boundary.push(id);
            } else {
                interior.push(id);
            }
        }
        Ok(CoarseNeighborhood { center: node, lattice: (i, j), elements, patch, interior, boundary })
    }

    pub fn neighborhoods(&self) -> Vec<CoarseNeighborhood> {
        (0..self.coarse_node_count())
            .map(|id| self.neighborhood(id).expect("id in range"))
            .collect()
    }

    /// Lattice neighbors (edge-adjacent coarse nodes) of a coarse node.
    pub fn adjacent_coarse_nodes(&self, node: usize) -> Vec<usize> {
        let (i, j) = self.coarse_node_lattice(node);
        let mut out = Vec::with_capacity(4);
        if j > 0 {
            out.push(self.coarse_node(i, j - 1));
        }
        if i > 0 {
            out.push(self.coarse_node(i - 1, j));
        }
        if i < self.nx {
            out.push(self.coarse_node(i + 1, j));
        }
        if j < self.ny {
            out.push(self.coarse_node(i, j + 1));
        }
        out
    }

    /// Partition of the enrichable coarse nodes into four parity classes.
    pub fn four_coloring(&self, convention: DofConvention) -> Coloring {
        let mut colors: [Vec<usize>; 4] = Default::default();
        for id in self.enrichable_nodes(convention) {
            let (i, j) = self.coarse_node_lattice(id);
            colors[Parity::of(i, j).index()].push(id);
        }
        Coloring { colors }
    }
}

/// Which coarse nodes carry multiscale basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DofConvention {
    /// Only nodes in the interior of the domain.
    Interior,
    /// Every coarse node; functions of boundary nodes are cut to zero on the boundary.
    #[default]
    All,
}

impl DofConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            DofConvention::Interior => "interior",
            DofConvention::All => "all",
        }
    }
}

impl std::str::FromStr for DofConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "interior" => Ok(DofConvention::Interior),
            "all" => Ok(DofConvention::All),
            other => Err(format!("unknown dof convention '{other}' (expected interior|all)")),
        }
    }
}

/// `omega_i`: the coarse elements around a coarse node and the fine nodes it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseNeighborhood {
    /// Coarse node id.
    pub center: usize,
    /// Lattice coordinates of the center.
    pub lattice: (usize, usize),
    /// Coarse element ids whose closure contains the center.
    pub elements: Vec<usize>,
    /// Closed fine-node rectangle covering the neighborhood.
    pub patch: NodePatch,
    /// Global fine nodes strictly inside the neighborhood, in patch order.
    pub interior: Vec<usize>,
    /// Global fine nodes on the neighborhood boundary, in patch order.
    pub boundary: Vec<usize>,
}

/// Lattice parity class of a coarse node, `(x parity, y parity)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    OddOdd,
    OddEven,
    EvenOdd,
    EvenEven,
}

impl Parity {
    /// Sweep order of the sub-iterations.
    pub const ORDER: [Parity; 4] = [Parity::OddOdd, Parity::OddEven, Parity::EvenOdd, Parity::EvenEven];

    pub fn of(i: usize, j: usize) -> Parity {
        match (i % 2 == 1, j % 2 == 1) {
            (true, true) => Parity::OddOdd,
            (true, false) => Parity::OddEven,
            (false, true) => Parity::EvenOdd,
            (false, false) => Parity::EvenEven,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Parity::OddOdd => 0,
            Parity::OddEven => 1,
            Parity::EvenOdd => 2,
            Parity::EvenEven => 3,
        }
    }
}

/// Four sets of coarse nodes whose neighborhoods pairwise share no fine cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Coloring {
    pub colors: [Vec<usize>; 4],
}

impl Coloring {
    pub fn color(&self, parity: Parity) -> &[usize] {
        &self.colors[parity.index()]
    }

    /// Colors in sweep order, skipping none (empty colors are returned as empty slices).
    pub fn in_sweep_order(&self) -> impl Iterator<Item = (Parity, &[usize])> {
        Parity::ORDER.iter().map(move |&p| (p, self.color(p)))
    }

    pub fn len(&self) -> usize {
        self.colors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn production_scale_grids() {
        let g = GridHierarchy::unit_square(16, 16, 16).unwrap();
        assert_eq!((g.fine_cells_x(), g.fine_cells_y()), (256, 256));
        assert_eq!(g.coarse_node_count(), 289);
        assert_eq!(g.enrichable_nodes(DofConvention::Interior).len(), 225);

        let g = GridHierarchy::unit_square(8, 8, 32).unwrap();
        assert_eq!(g.fine_cell_count(), 256 * 256);
        assert_eq!(g.coarse_node_count(), 81);
        assert_eq!(g.enrichable_nodes(DofConvention::All).len(), 81);
    }

    #[test]
    fn minimal_grid() {
        let g = GridHierarchy::unit_square(1, 1, 1).unwrap();
        assert_eq!(g.coarse_element_count(), 1);
        assert_eq!(g.coarse_node_count(), 4);
        assert_eq!(g.fine_node_count(), 4);
        let interior: usize = (0..4).map(|i| g.neighborhood(i).unwrap().interior.len()).sum();
        assert_eq!(interior, 0);
        assert!(g.enrichable_nodes(DofConvention::Interior).is_empty());
    }

    #[test]
    fn rejects_zero_counts() {
        assert!(matches!(
            GridHierarchy::unit_square(0, 4, 4),
            Err(GridError::NonPositiveCount { .. })
        ));
        assert!(GridHierarchy::unit_square(4, 4, 0).is_err());
        let bad = Domain { x0: 0.0, y0: 0.0, x1: 0.0, y1: 1.0 };
        assert!(GridHierarchy::new(bad, 2, 2, 2).is_err());
    }

    #[test]
    fn refinement_is_exact() {
        let g = GridHierarchy::unit_square(4, 3, 5).unwrap();
        assert!((g.fine_hx() * 5.0 - g.coarse_hx()).abs() < 1e-15);
        // every coarse node position coincides with a fine node
        for id in 0..g.coarse_node_count() {
            let (i, j) = g.coarse_node_lattice(id);
            let f = g.fine_node(i * 5, j * 5);
            let (a, b) = (g.coarse_node_position(id), g.fine_node_position(f));
            assert!((a.0 - b.0).abs() < 1e-14 && (a.1 - b.1).abs() < 1e-14);
        }
    }

    #[test]
    fn index_maps_are_bijections() {
        let g = GridHierarchy::unit_square(3, 2, 3).unwrap();
        for id in 0..g.fine_node_count() {
            let (ix, iy) = g.fine_node_lattice(id);
            assert_eq!(g.fine_node(ix, iy), id);
        }
        for id in 0..g.fine_cell_count() {
            let (cx, cy) = g.fine_cell_lattice(id);
            assert_eq!(g.fine_cell(cx, cy), id);
        }
        for id in 0..g.coarse_node_count() {
            let (i, j) = g.coarse_node_lattice(id);
            assert_eq!(g.coarse_node(i, j), id);
        }
    }

    #[test]
    fn neighborhood_element_counts() {
        let g = GridHierarchy::unit_square(4, 4, 4).unwrap();
        for id in 0..g.coarse_node_count() {
            let nb = g.neighborhood(id).unwrap();
            let (i, j) = nb.lattice;
            let on_x = i == 0 || i == 4;
            let on_y = j == 0 || j == 4;
            let expected = match (on_x, on_y) {
                (true, true) => 1,
                (true, false) | (false, true) => 2,
                (false, false) => 4,
            };
            assert_eq!(nb.elements.len(), expected, "node {id}");
            // element set per the closure rule
            for e in 0..g.coarse_element_count() {
                let (ei, ej) = g.coarse_element_lattice(e);
                let touches = (ei == i || ei + 1 == i) && (ej == j || ej + 1 == j);
                assert_eq!(nb.elements.contains(&e), touches);
            }
        }
        assert!(matches!(g.neighborhood(25), Err(GridError::InvalidNode { .. })));
    }

    #[test]
    fn neighborhood_node_partition() {
        let g = GridHierarchy::unit_square(4, 4, 16).unwrap();
        let nb = g.neighborhood(g.coarse_node(2, 2)).unwrap();
        // perimeter of a 32 x 32 cell square
        assert_eq!(nb.boundary.len(), 4 * 32);
        assert_eq!(nb.interior.len(), 31 * 31);
        assert!(nb.interior.iter().all(|p| !nb.boundary.contains(p)));
        assert_eq!(nb.interior.len() + nb.boundary.len(), nb.patch.len());
        // interior nodes never touch the domain boundary
        for id in 0..g.coarse_node_count() {
            let nb = g.neighborhood(id).unwrap();
            assert!(nb.interior.iter().all(|&p| !g.is_boundary_fine_node(p)));
        }
    }

    #[test]
    fn coloring_of_interior_lattice() {
        let g = GridHierarchy::unit_square(4, 4, 2).unwrap();
        let c = g.four_coloring(DofConvention::Interior);
        let odd_odd: Vec<_> = c.color(Parity::OddOdd).iter().map(|&id| g.coarse_node_lattice(id)).collect();
        assert_eq!(odd_odd, vec![(1, 1), (3, 1), (1, 3), (3, 3)]);
        assert_eq!(c.len(), 9);
    }

    #[test]
    fn colors_are_cell_disjoint_and_cover() {
        for conv in [DofConvention::Interior, DofConvention::All] {
            let g = GridHierarchy::unit_square(5, 4, 3).unwrap();
            let c = g.four_coloring(conv);
            let mut all: Vec<usize> = c.colors.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, g.enrichable_nodes(conv));
            for color in &c.colors {
                for (a, &p) in color.iter().enumerate() {
                    for &q in &color[a + 1..] {
                        let ep = g.neighborhood(p).unwrap().elements;
                        let eq = g.neighborhood(q).unwrap().elements;
                        assert!(ep.iter().all(|e| !eq.contains(e)), "{p} and {q} overlap");
                    }
                }
            }
        }
    }

    #[test]
    fn patch_intersection() {
        let a = NodePatch { ix0: 0, iy0: 0, nx: 5, ny: 5 };
        let b = NodePatch { ix0: 4, iy0: 2, nx: 5, ny: 5 };
        assert_eq!(a.intersect(&b), Some(NodePatch { ix0: 4, iy0: 2, nx: 1, ny: 3 }));
        let c = NodePatch { ix0: 5, iy0: 0, nx: 2, ny: 2 };
        assert_eq!(a.intersect(&c), None);
        assert_eq!(a.union_hull(&c), NodePatch { ix0: 0, iy0: 0, nx: 7, ny: 5 });
        assert!(a.union_hull(&b).contains_patch(&b));
    }
}
