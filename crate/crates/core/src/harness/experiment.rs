use super::{generate_field, plot_script, ConvergenceRecord, CsvWriter, FieldSpec, HarnessError, KappaSource, RecordLevel, RunConfig};
use crate::basis::OfflineModel;
use crate::enrich::{Enricher, Trace};
use crate::fem::{FineFunction, FineSystem, PermeabilityField};
use crate::grid::{Domain, GridHierarchy};
use crate::solver::MultiscaleSpace;

/// Everything that does not depend on the policy: grids, coefficient, fine
/// reference solution and local spectra.
pub struct Problem {
    pub grids: GridHierarchy,
    pub fine: FineSystem,
    pub reference: FineFunction,
    pub model: OfflineModel,
}

pub struct RunOutput {
    pub records: Vec<ConvergenceRecord>,
    pub trace: Trace,
    /// `||u||_a^2` of the fine reference solution.
    pub reference_energy2: f64,
}

impl RunConfig {
    pub fn resolve_kappa(&self) -> Result<PermeabilityField, HarnessError> {
        match &self.kappa {
            KappaSource::File(path) => Ok(PermeabilityField::read(path)?),
            KappaSource::Named(name) => generate_field(&FieldSpec::named(name, self.contrast)?, self.seed),
            KappaSource::Generated(spec) => {
                generate_field(&FieldSpec { contrast: self.contrast, ..spec.clone() }, self.seed)
            }
        }
    }
}

pub fn build_problem(cfg: &RunConfig) -> Result<Problem, HarnessError> {
    cfg.validate()?;
    let grids = GridHierarchy::new(Domain::UNIT_SQUARE, cfg.coarse.0, cfg.coarse.1, cfg.fine)?;
    let kappa = cfg.resolve_kappa()?;
    let source = cfg.source.to_source(&grids)?;
    let fine = FineSystem::new(&grids, &kappa, &source)?;
    let reference = fine.solve_fine()?;
    let model = match &cfg.cache_dir {
        Some(dir) => OfflineModel::build_cached(&grids, &kappa, dir)?,
        None => OfflineModel::build(&grids, &kappa)?,
    };
    Ok(Problem { grids, fine, reference, model })
}

/// Full pipeline: fine reference, offline spectra, policy loop, CSV and plot
/// script. On failure the CSV keeps the rows produced so far followed by an
/// error line.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    let mut csv = CsvWriter::create(&cfg.out)?;
    let result = build_problem(cfg).and_then(|p| run_on(&p, cfg, &mut csv));
    if let Err(e) = &result {
        csv.error(&e.to_string())?;
    }
    result
}

/// Runs the configured policy on a prepared problem, streaming rows to `csv`.
pub fn run_on(problem: &Problem, cfg: &RunConfig, csv: &mut CsvWriter) -> Result<RunOutput, HarnessError> {
    let (space, _) = MultiscaleSpace::with_offline(&problem.model, &problem.fine, cfg.dof_convention, cfg.initial_basis)
        .map_err(crate::enrich::EnrichError::from)?;
    let mut enricher = Enricher::new(&problem.model, &problem.fine, &problem.reference, space)?;
    if cfg.timing {
        enricher.enable_timing();
    }
    if cfg.audit {
        enricher.enable_audit();
    }
    let mut records = Vec::new();
    let mut sub = 0;
    let mut failure = None;
    let trace = enricher.run_observed(&cfg.policy, &mut |progress| {
        if failure.is_some() {
            return;
        }
        let rows: Vec<ConvergenceRecord> = match cfg.records {
            RecordLevel::Step if progress.sweep.iteration > 0 => progress
                .steps
                .iter()
                .map(|s| {
                    sub += 1;
                    ConvergenceRecord::from_step(sub, s)
                })
                .collect(),
            _ => vec![ConvergenceRecord::from_sweep(progress.sweep)],
        };
        for row in rows {
            if let Err(e) = csv.push(&row) {
                failure = Some(e);
                return;
            }
            records.push(row);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let plot = cfg.plot_path();
    let name = cfg.out.file_name().map_or_else(|| cfg.out.display().to_string(), |n| n.to_string_lossy().into_owned());
    let label = format!("{} ({} initial)", cfg.policy.mode, cfg.initial_basis);
    std::fs::write(&plot, plot_script(&[(label, name)], "error vs DOF")).map_err(|e| HarnessError::io(&plot, e))?;
    let reference_energy2 = problem.fine.energy_product(&problem.reference, &problem.reference);
    Ok(RunOutput { records, trace, reference_energy2 })
}
