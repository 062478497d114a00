//! Generalized multiscale finite elements for `-div(kappa grad u) = f` on the
//! unit square with high-contrast `kappa`.
//!
//! The offline phase builds a coarse space from local spectral problems on
//! coarse neighborhoods ([`basis`]). The online phase adds Riesz
//! representatives of local residuals to it ([`enrich`]). Errors are measured
//! against a fine-grid Q1 solution ([`fem`]). [`harness`] drives experiments
//! from config files.
//!
//! ```
//! use gmsfem::harness::{run_experiment, RunConfig};
//!
//! let cfg = RunConfig::parse("coarse = 4x4\nfine = 8\nkappa = generated\ninitial_basis = 2\nmax_iters = 2\n").unwrap();
//! let out = run_experiment(&cfg).unwrap();
//! assert!(out.records.last().unwrap().e_a < out.records[0].e_a);
//! ```

pub mod basis;
pub mod enrich;
pub mod fem;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod solver;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/grids.md")]
pub mod grids {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fine-scale.md")]
pub mod fine_scale {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/offline.md")]
pub mod offline {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/online.md")]
pub mod online {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness_guide {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
