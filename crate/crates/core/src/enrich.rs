//! Enrichment policies.
//!
//! Offline adaptivity appends further eigenmodes where the indicators
//! `eta_i^2` are large. Online enrichment appends Riesz representatives of
//! local residuals, one color of non-overlapping neighborhoods at a time, so
//! the squared energy error drops by at least the sum of their `r_i^2`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use faer::{Mat, Side};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::OfflineModel;
use crate::fem::{FineFunction, FineSystem, LocalVector};
use crate::grid::{NodePatch, Parity};
use crate::solver::{
    error_estimate, residual_reports, total_residual, BasisKind, Candidate, CoarseSolution, MultiscaleSpace,
    ResidualReport, SolverError,
};

#[derive(Debug, Error)]
pub enum EnrichError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("bulk parameter theta must lie in (0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// `r_i^2 / |u|_V^2` at or below which a neighborhood is never enriched.
pub const NEGLIGIBLE_RESIDUAL: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    OfflineAdaptive,
    OnlineFull,
    OnlineThreshold,
    OnlineCumulative,
    OnlineReduced,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::OfflineAdaptive => "offline_adaptive",
            Mode::OnlineFull => "online_full",
            Mode::OnlineThreshold => "online_threshold",
            Mode::OnlineCumulative => "online_cumulative",
            Mode::OnlineReduced => "online_reduced",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "offline_adaptive" => Ok(Mode::OfflineAdaptive),
            "online_full" => Ok(Mode::OnlineFull),
            "online_threshold" => Ok(Mode::OnlineThreshold),
            "online_cumulative" => Ok(Mode::OnlineCumulative),
            "online_reduced" => Ok(Mode::OnlineReduced),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// How the mode window of the reduced online basis moves between sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowRule {
    /// Always the `n0` modes following the retained offline ones.
    Fixed,
    /// `n0` modes, shifted by `n0` every time the neighborhood is enriched.
    Slide,
    /// Starts at the `n0` modes following the retained offline ones and
    /// takes in the next `n0` every time the neighborhood is enriched.
    Grow,
}

impl FromStr for WindowRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "fixed" => Ok(WindowRule::Fixed),
            "slide" | "advance" => Ok(WindowRule::Slide),
            "grow" => Ok(WindowRule::Grow),
            other => Err(format!("unknown window rule '{other}' (expected fixed|slide|advance|grow)")),
        }
    }
}

impl WindowRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            WindowRule::Fixed => "fixed",
            WindowRule::Slide => "slide",
            WindowRule::Grow => "grow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentPolicy {
    pub mode: Mode,
    /// Bulk fraction for Dörfler marking.
    pub theta: f64,
    /// Threshold on `r_i` (threshold mode) or on `sqrt(sum r_i^2)` (stopping rule).
    pub tol: f64,
    /// Sweeps for online modes, marking steps for offline adaptivity.
    pub max_iterations: usize,
    pub basis_per_marked: usize,
    pub n0: usize,
    pub window: WindowRule,
    pub neighbors: bool,
}

impl Default for EnrichmentPolicy {
    fn default() -> Self {
        EnrichmentPolicy {
            mode: Mode::OnlineFull,
            theta: 0.7,
            tol: 0.0,
            max_iterations: 5,
            basis_per_marked: 1,
            n0: 40,
            window: WindowRule::Slide,
            neighbors: true,
        }
    }
}

impl EnrichmentPolicy {
    pub fn validate(&self) -> Result<(), EnrichError> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(EnrichError::InvalidTheta(self.theta));
        }
        if !(self.tol >= 0.0) {
            return Err(EnrichError::InvalidPolicy(format!("tol must be non-negative, got {}", self.tol)));
        }
        if self.mode == Mode::OfflineAdaptive && self.basis_per_marked == 0 {
            return Err(EnrichError::InvalidPolicy("basis_per_marked must be at least 1".into()));
        }
        Ok(())
    }

    /// Key-value pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("theta", format!("{:?}", self.theta)),
            ("tol", format!("{:?}", self.tol)),
            ("max_iters", self.max_iterations.to_string()),
            ("basis_per_marked", self.basis_per_marked.to_string()),
            ("n0", self.n0.to_string()),
            ("window", self.window.as_str().to_string()),
            ("neighbors", self.neighbors.to_string()),
        ]
    }

    /// Applies one key; returns `Ok(false)` if the key is not a policy key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim().parse().map_err(|_| format!("bad value '{v}' for {key}"))
        }
        match key {
            "mode" => self.mode = value.parse()?,
            "theta" => self.theta = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "max_iters" => self.max_iterations = num(key, value)?,
            "basis_per_marked" => self.basis_per_marked = num(key, value)?,
            "n0" => self.n0 = num(key, value)?,
            "window" => self.window = value.parse()?,
            "neighbors" => self.neighbors = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Indices of the smallest set of largest values whose sum reaches
/// `theta * sum(values)`; ties keep input order.
pub fn dorfler_mark(values: &[f64], theta: f64) -> Result<Vec<usize>, EnrichError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(EnrichError::InvalidTheta(theta));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let total: f64 = values.iter().sum();
    let target = theta * total;
    let mut sum = 0.0;
    let mut marked = Vec::new();
    for i in order {
        if !marked.is_empty() && sum >= target {
            break;
        }
        if total <= 0.0 {
            break;
        }
        sum += values[i];
        marked.push(i);
    }
    Ok(marked)
}

/// One enlargement of the space: a color of an online sweep or one offline
/// marking step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Sweep (online) or marking step (offline), starting at 1.
    pub iteration: usize,
    pub color: Option<Parity>,
    /// Dimension after the step.
    pub dof: usize,
    pub e_a: f64,
    pub e_2: f64,
    /// `sum_j r_j^2` over all enrichable neighborhoods before the step.
    pub residual_total: f64,
    /// `sum_j eta_j^2` before the step.
    pub estimator: f64,
    pub marked: Vec<usize>,
    /// `sum_{i in I} r_i^2`.
    pub marked_residual: f64,
    /// Squared energy errors before and after.
    pub error2_before: f64,
    pub error2_after: f64,
    pub onerp: Option<OnerpReport>,
    pub audit: Option<Audit>,
    pub wall_ms: f64,
}

/// Consistency checks recorded per step and sweep when auditing is enabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Audit {
    /// [`MultiscaleSpace::galerkin_defect`] for the current solution.
    pub galerkin: f64,
    /// Largest [`ResidualReport::riesz_defect`] among the reports at hand:
    /// those a step marked from, or those of the solution after a sweep.
    pub riesz: f64,
}

/// State after a full sweep (or the initial space for `iteration = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub iteration: usize,
    pub dof: usize,
    pub e_a: f64,
    pub e_2: f64,
    /// `sum_j r_j^2` for the current multiscale solution.
    pub residual_total: f64,
    /// `min_j lambda_{l_j + 1}` over enrichable neighborhoods.
    pub lambda_min: Option<f64>,
    pub audit: Option<Audit>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnerpReport {
    /// `min_{i in I} lambda_{n_i + 1}`.
    pub lambda_min: f64,
    /// `lambda_min * sum_{i in I} eta_i^2 / sum_j eta_j^2`, without `C_err`.
    pub ratio: f64,
    /// Measured `|u - u_ms|_V` before over after the step.
    pub decay: f64,
}

/// `Lambda_min^{(I)}` and the ratio of marked to total indicators, from
/// reports over all neighborhoods and the marked positions within them.
pub fn onerp_report(all: &[ResidualReport], marked: &[usize], decay: f64) -> Option<OnerpReport> {
    let lambda_min = marked.iter().filter_map(|&i| all[i].next_eigenvalue).fold(None, |m: Option<f64>, l| {
        Some(m.map_or(l, |m| m.min(l)))
    })?;
    let (total, _) = error_estimate(all);
    let part: f64 = marked.iter().filter_map(|&i| all[i].eta2()).sum();
    let ratio = if total > 0.0 { lambda_min * part / total } else { 0.0 };
    Some(OnerpReport { lambda_min, ratio, decay })
}

/// Flags a space as likely lacking the online error reduction property when
/// the per-sweep decay at high contrast is worse than at low contrast by more
/// than `factor`.
pub fn likely_non_onerp(decay_low_contrast: f64, decay_high_contrast: f64, factor: f64) -> bool {
    decay_high_contrast * factor < decay_low_contrast
}

/// A completed sweep as reported to [`Enricher::run_observed`].
#[derive(Debug, Clone, Copy)]
pub struct Progress<'t> {
    pub sweep: &'t SweepRecord,
    pub steps: &'t [StepRecord],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Tolerance,
    NothingMarked,
    AllRejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sweeps: Vec<SweepRecord>,
    pub steps: Vec<StepRecord>,
    pub stop: StopReason,
    /// Candidates dropped by the independence guard.
    pub rejected: usize,
}

/// A multiscale space with its current solution and the fine reference used
/// to measure errors.
pub struct Enricher<'a> {
    pub model: &'a OfflineModel,
    pub fine: &'a FineSystem,
    pub reference: &'a FineFunction,
    pub space: MultiscaleSpace,
    pub solution: CoarseSolution,
    /// Reduced-mode windows per coarse node: first mode and length beyond `n0`.
    pub windows: Vec<(usize, usize)>,
    reference_energy2: f64,
    timing: Option<Instant>,
    audit: bool,
}

impl<'a> Enricher<'a> {
    pub fn new(
        model: &'a OfflineModel,
        fine: &'a FineSystem,
        reference: &'a FineFunction,
        space: MultiscaleSpace,
    ) -> Result<Self, EnrichError> {
        let solution = space.solve()?;
        let windows = (0..fine.grids().coarse_node_count()).map(|n| (space.offline_modes_used(n), 0)).collect();
        let reference_energy2 = fine.energy_product(reference, reference);
        Ok(Enricher { model, fine, reference, space, solution, windows, reference_energy2, timing: None, audit: false })
    }

    /// Records wall-clock milliseconds since this call; otherwise `wall_ms` is 0.
    pub fn enable_timing(&mut self) {
        self.timing = Some(Instant::now());
    }

    /// Fills [`StepRecord::audit`] from now on.
    pub fn enable_audit(&mut self) {
        self.audit = true;
    }

    fn audit(&self, reports: &[ResidualReport]) -> Option<Audit> {
        self.audit.then(|| Audit {
            galerkin: self.space.galerkin_defect(self.fine, self.reference, &self.solution.u),
            riesz: reports.iter().map(ResidualReport::riesz_defect).fold(0.0, f64::max),
        })
    }

    fn wall_ms(&self) -> f64 {
        self.timing.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
    }

    pub fn reference_energy2(&self) -> f64 {
        self.reference_energy2
    }

    /// `|u - u_ms|_V^2`.
    pub fn error2(&self) -> f64 {
        let e = self.reference.sub(&self.solution.u);
        self.fine.energy_product(&e, &e).max(0.0)
    }

    pub fn errors(&self) -> (f64, f64) {
        self.fine.error_pair(self.reference, &self.solution.u).expect("reference checked nonzero")
    }

    /// Residual reports for every enrichable neighborhood.
    pub fn reports(&self) -> Vec<ResidualReport> {
        let nodes = self.space.enrichable_nodes();
        residual_reports(self.model, &self.space, self.fine, &self.solution.u, &nodes)
    }

    pub fn lambda_min(&self) -> Option<f64> {
        self.space
            .enrichable_nodes()
            .iter()
            .filter_map(|&n| self.model.get(n).spectrum.next_eigenvalue(self.space.offline_modes_used(n)))
            .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.min(l))))
    }

    pub fn sweep_record(&self, iteration: usize, reports: &[ResidualReport]) -> SweepRecord {
        let (e_a, e_2) = self.errors();
        SweepRecord {
            iteration,
            dof: self.space.dim(),
            e_a,
            e_2,
            residual_total: total_residual(reports),
            lambda_min: self.lambda_min(),
            audit: self.audit(reports),
            wall_ms: self.wall_ms(),
        }
    }

    /// Runs a policy to completion.
    pub fn run(&mut self, policy: &EnrichmentPolicy) -> Result<Trace, EnrichError> {
        self.run_observed(policy, &mut |_| {})
    }

    /// Like [`Enricher::run`], handing each sweep to `observe` together with
    /// the steps that produced it, as soon as it completes.
    pub fn run_observed(
        &mut self,
        policy: &EnrichmentPolicy,
        observe: &mut dyn FnMut(Progress<'_>),
    ) -> Result<Trace, EnrichError> {
        policy.validate()?;
        let mut reports = self.reports();
        let mut trace =
            Trace { sweeps: vec![self.sweep_record(0, &reports)], steps: Vec::new(), stop: StopReason::MaxIterations, rejected: 0 };
        observe(Progress { sweep: &trace.sweeps[0], steps: &[] });
        for it in 1..=policy.max_iterations {
            if total_residual(&reports).sqrt() < policy.tol && policy.mode != Mode::OnlineThreshold {
                trace.stop = StopReason::Tolerance;
                return Ok(trace);
            }
            let (steps, rejected) = match policy.mode {
                Mode::OfflineAdaptive => {
                    let step = self.offline_adapt_step(it, policy.theta, policy.basis_per_marked, &reports)?;
                    (vec![step], 0)
                }
                _ => self.online_sweep(it, policy, reports)?,
            };
            trace.rejected += rejected;
            let marked: usize = steps.iter().map(|s| s.marked.len()).sum();
            let grew = steps.last().is_some_and(|s| s.dof > trace.sweeps.last().unwrap().dof);
            let first = trace.steps.len();
            trace.steps.extend(steps);
            reports = self.reports();
            trace.sweeps.push(self.sweep_record(it, &reports));
            observe(Progress { sweep: trace.sweeps.last().unwrap(), steps: &trace.steps[first..] });
            if marked == 0 {
                trace.stop = StopReason::NothingMarked;
                return Ok(trace);
            }
            if !grew {
                trace.stop = StopReason::AllRejected;
                return Ok(trace);
            }
        }
        if total_residual(&reports).sqrt() < policy.tol && policy.mode != Mode::OnlineThreshold {
            trace.stop = StopReason::Tolerance;
        }
        Ok(trace)
    }

    /// Marks neighborhoods by bulk criterion on `eta_i^2` and appends their
    /// next offline modes.
    pub fn offline_adapt_step(
        &mut self,
        iteration: usize,
        theta: f64,
        basis_per_marked: usize,
        reports: &[ResidualReport],
    ) -> Result<StepRecord, EnrichError> {
        let eta2: Vec<f64> = reports.iter().map(|r| r.eta2().unwrap_or(0.0)).collect();
        let marked_pos = dorfler_mark(&eta2, theta)?;
        let requests: Vec<(usize, usize)> = marked_pos
            .iter()
            .map(|&i| reports[i].node)
            .filter(|&n| self.space.offline_modes_used(n) < self.model.get(n).dim())
            .map(|n| (n, basis_per_marked))
            .collect();
        let before = self.error2();
        self.space.add_offline(self.model, &requests)?;
        self.solution = self.space.solve()?;
        self.step_record(iteration, None, reports, &marked_pos, before)
    }

    fn step_record(
        &self,
        iteration: usize,
        color: Option<Parity>,
        reports: &[ResidualReport],
        marked_pos: &[usize],
        error2_before: f64,
    ) -> Result<StepRecord, EnrichError> {
        let (e_a, e_2) = self.errors();
        let error2_after = self.error2();
        let decay = if error2_after > 0.0 { (error2_before / error2_after).sqrt() } else { f64::INFINITY };
        Ok(StepRecord {
            iteration,
            color,
            dof: self.space.dim(),
            e_a,
            e_2,
            residual_total: total_residual(reports),
            estimator: error_estimate(reports).0,
            marked: marked_pos.iter().map(|&i| reports[i].node).collect(),
            marked_residual: marked_pos.iter().map(|&i| reports[i].squared_norm()).sum(),
            error2_before,
            error2_after,
            onerp: onerp_report(reports, marked_pos, decay),
            audit: self.audit(reports),
            wall_ms: self.wall_ms(),
        })
    }

    /// Four sub-iterations in the fixed color order. `reports` must belong to
    /// the current solution.
    pub fn online_sweep(
        &mut self,
        iteration: usize,
        policy: &EnrichmentPolicy,
        mut reports: Vec<ResidualReport>,
    ) -> Result<(Vec<StepRecord>, usize), EnrichError> {
        let coloring = self.fine.grids().four_coloring(self.space.convention());
        let mut steps = Vec::with_capacity(4);
        let mut rejected = 0;
        for (k, (parity, nodes)) in coloring.in_sweep_order().enumerate() {
            if k > 0 {
                reports = self.reports();
            }
            let pos: HashMap<usize, usize> = reports.iter().enumerate().map(|(i, r)| (r.node, i)).collect();
            let in_color: Vec<usize> = nodes.iter().map(|n| pos[n]).collect();
            // residuals at round-off level relative to |u|_V are treated as zero
            let floor = NEGLIGIBLE_RESIDUAL * self.reference_energy2;
            let in_color: Vec<usize> = in_color.into_iter().filter(|&i| reports[i].energy > floor).collect();
            let marked_pos: Vec<usize> = match policy.mode {
                Mode::OnlineThreshold => {
                    in_color.into_iter().filter(|&i| reports[i].norm() > policy.tol).collect()
                }
                Mode::OnlineCumulative => {
                    let r2: Vec<f64> = in_color.iter().map(|&i| reports[i].squared_norm()).collect();
                    let mut m: Vec<usize> = dorfler_mark(&r2, policy.theta)?.into_iter().map(|j| in_color[j]).collect();
                    // enrich in node order so that theta = 1 reproduces the full sweep exactly
                    m.sort_unstable();
                    m
                }
                _ => in_color,
            };
            let before = self.error2();
            if !marked_pos.is_empty() {
                let candidates: Vec<Candidate> = if policy.mode == Mode::OnlineReduced {
                    let centers: Vec<usize> = marked_pos.iter().map(|&i| reports[i].node).collect();
                    let vectors = self.reduced_candidates(&centers, policy.n0, policy.neighbors);
                    let mut out = Vec::new();
                    for (&c, v) in centers.iter().zip(vectors) {
                        match policy.window {
                            WindowRule::Fixed => {}
                            WindowRule::Slide => self.windows[c].0 += policy.n0,
                            WindowRule::Grow => self.windows[c].1 += policy.n0,
                        }
                        if let Some(v) = v {
                            out.push(Candidate { owner: c, kind: BasisKind::Online, ordinal: self.space.online_count(c), vector: v });
                        }
                    }
                    out
                } else {
                    marked_pos
                        .iter()
                        .map(|&i| Candidate {
                            owner: reports[i].node,
                            kind: BasisKind::Online,
                            ordinal: self.space.online_count(reports[i].node),
                            vector: reports[i].phi.clone(),
                        })
                        .collect()
                };
                let report = self.space.try_extend(candidates)?;
                rejected += report.rejected.len();
                self.solution = self.space.solve()?;
            }
            steps.push(self.step_record(iteration, Some(parity), &reports, &marked_pos, before)?);
        }
        Ok((steps, rejected))
    }

    /// Reduced online functions for the given centers using the current windows.
    pub fn reduced_candidates(&self, centers: &[usize], n0: usize, neighbors: bool) -> Vec<Option<LocalVector>> {
        let grids = self.fine.grids();
        let key = |j: usize| (j, self.windows[j].0, n0 + self.windows[j].1);
        let groups: Vec<Vec<(usize, usize, usize)>> = centers
            .iter()
            .map(|&c| {
                let mut g = vec![key(c)];
                if neighbors {
                    g.extend(grids.adjacent_coarse_nodes(c).into_iter().map(key));
                }
                g
            })
            .collect();
        let mut needed: Vec<(usize, usize, usize)> = groups.iter().flatten().copied().collect();
        needed.sort_unstable();
        needed.dedup();
        let blocks: HashMap<(usize, usize, usize), ModeBlock> = needed
            .par_iter()
            .map(|&(j, start, len)| ((j, start, len), ModeBlock::new(self.model, grids, j, start, len)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        groups
            .par_iter()
            .map(|g| {
                let bs: Vec<&ModeBlock> = g.iter().map(|key| &blocks[key]).collect();
                reduced_solve(self.fine, &self.solution.u, &bs)
            })
            .collect()
    }
}

/// Functions `chi_j * phi_k^{omega_j}` for one window of modes, with their
/// stiffness images, on the patch of `omega_j`.
pub struct ModeBlock {
    pub patch: NodePatch,
    pub w: Mat<f64>,
    pub aw: Mat<f64>,
}

impl ModeBlock {
    pub fn new(model: &OfflineModel, grids: &crate::grid::GridHierarchy, node: usize, start: usize, n0: usize) -> Self {
        let nd = model.get(node);
        let end = (start + n0).min(nd.dim());
        let start = start.min(end);
        let fs = nd.offline_functions(grids, start..end).expect("window clamped to the spectrum");
        let patch = nd.solver.patch();
        let w = Mat::<f64>::from_fn(patch.len(), fs.len(), |i, k| fs[k].values[i]);
        let aw = nd.solver.stiffness().mul_dense(w.as_ref());
        ModeBlock { patch, w, aw }
    }
}

fn rows_on(block: &ModeBlock, common: &NodePatch, m: &Mat<f64>) -> Mat<f64> {
    Mat::<f64>::from_fn(common.len(), m.ncols(), |r, c| {
        let (ix, iy) = common.lattice(r);
        m[(block.patch.local(ix, iy), c)]
    })
}

/// Galerkin projection of the local residual problem onto the span of the
/// given blocks; `None` if the span is empty or the residual vanishes on it.
pub fn reduced_solve(fine: &FineSystem, u_ms: &FineFunction, blocks: &[&ModeBlock]) -> Option<LocalVector> {
    let grids = fine.grids();
    let sizes: Vec<usize> = blocks.iter().map(|b| b.w.ncols()).collect();
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return None;
    }
    let offsets: Vec<usize> = sizes.iter().scan(0, |s, &k| {
        let o = *s;
        *s += k;
        Some(o)
    }).collect();
    let mut g = Mat::<f64>::zeros(n, n);
    for (a, ba) in blocks.iter().enumerate() {
        for (b, bb) in blocks.iter().enumerate().skip(a) {
            let Some(common) = ba.patch.intersect(&bb.patch) else { continue };
            if sizes[a] == 0 || sizes[b] == 0 {
                continue;
            }
            let wa = rows_on(ba, &common, &ba.w);
            let awb = rows_on(bb, &common, &bb.aw);
            let blk = wa.transpose() * &awb;
            for i in 0..sizes[a] {
                for j in 0..sizes[b] {
                    g[(offsets[a] + i, offsets[b] + j)] = blk[(i, j)];
                    g[(offsets[b] + j, offsets[a] + i)] = blk[(i, j)];
                }
            }
        }
    }
    // R(w) = (f, w) - a(u_ms, w) = w . (b - A u_ms)
    let mut rhs = vec![0.0; n];
    for (a, ba) in blocks.iter().enumerate() {
        let u = LocalVector::gather(grids, ba.patch, &u_ms.values);
        let b = LocalVector::gather(grids, ba.patch, fine.load());
        for k in 0..sizes[a] {
            let mut s = 0.0;
            for i in 0..ba.patch.len() {
                s += ba.w[(i, k)] * b.values[i] - ba.aw[(i, k)] * u.values[i];
            }
            rhs[offsets[a] + k] = s;
        }
    }
    let y = pseudo_solve(&g, &rhs)?;
    let mut hull = blocks[0].patch;
    for b in blocks {
        hull = hull.union_hull(&b.patch);
    }
    let mut out = LocalVector::zeros(hull);
    for (a, ba) in blocks.iter().enumerate() {
        for i in 0..ba.patch.len() {
            let (ix, iy) = ba.patch.lattice(i);
            let v: f64 = (0..sizes[a]).map(|k| ba.w[(i, k)] * y[offsets[a] + k]).sum();
            out.values[hull.local(ix, iy)] += v;
        }
    }
    if out.values.iter().all(|&v| v == 0.0) {
        None
    } else {
        Some(out)
    }
}

/// Minimum-norm solution of a symmetric positive semidefinite system,
/// discarding eigenvalues below `1e-12` of the largest.
fn pseudo_solve(g: &Mat<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let evd = g.self_adjoint_eigen(Side::Lower).ok()?;
    let top = (0..n).map(|k| evd.S()[k]).fold(0.0, f64::max);
    if !(top > 0.0) {
        return None;
    }
    let mut y = vec![0.0; n];
    for k in 0..n {
        let s = evd.S()[k];
        if s <= 1e-12 * top {
            continue;
        }
        let c: f64 = (0..n).map(|i| evd.U()[(i, k)] * rhs[i]).sum::<f64>() / s;
        for i in 0..n {
            y[i] += c * evd.U()[(i, k)];
        }
    }
    Some(y)
}
