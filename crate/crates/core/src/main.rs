use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmsfem::harness::{
    build_problem, generate_field, parse_csv, plot_script, run_experiment, FieldSpec, HarnessError, RunConfig,
};

#[derive(Parser)]
#[command(name = "gmsfem", about = "Multiscale FEM with spectral offline bases and residual-driven online enrichment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV and plot script.
    Run(RunArgs),
    /// Run the same experiment for several initial basis counts and plot them together.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated initial basis counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        counts: Vec<usize>,
    },
    /// Print min_i lambda_{l+1} over neighborhoods for l = 1..=max.
    Spectra {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 6)]
        max: usize,
    },
    /// Write a shipped field as a KAPPA v1 file.
    GenerateField {
        /// inclusions-and-channels | channels-8x8
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 1e4)]
        contrast: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one gnuplot script drawing several CSVs.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "error vs DOF")]
        title: String,
        csv: Vec<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coarse elements, `N` or `NXxNY`.
    #[arg(long)]
    coarse: Option<String>,
    /// Fine cells per coarse cell and direction.
    #[arg(long)]
    fine: Option<String>,
    /// KAPPA file, `named:<field>` or `generated`.
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    contrast: Option<String>,
    #[arg(long)]
    initial_basis: Option<String>,
    /// offline_adaptive | online_full | online_threshold | online_cumulative | online_reduced
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    n0: Option<String>,
    /// interior | all
    #[arg(long)]
    dof_convention: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Record wall-clock time per row.
    #[arg(long)]
    timing: bool,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::read(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("coarse", &self.coarse),
            ("fine", &self.fine),
            ("kappa", &self.kappa),
            ("contrast", &self.contrast),
            ("initial_basis", &self.initial_basis),
            ("mode", &self.mode),
            ("theta", &self.theta),
            ("tol", &self.tol),
            ("max_iters", &self.max_iters),
            ("n0", &self.n0),
            ("dof_convention", &self.dof_convention),
            ("out", &self.out),
            ("seed", &self.seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.timing {
            cfg.timing = true;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| HarnessError::Config(format!("--set expects key=value, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_records(cfg: &RunConfig, records: &[gmsfem::harness::ConvergenceRecord]) {
    println!("{:>5} {:>7} {:>12} {:>12} {:>12} {:>12}", "iter", "dof", "e_a", "e_2", "sum r^2", "lambda_min");
    for r in records {
        println!(
            "{:>5} {:>7} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            r.iteration, r.dof, r.e_a, r.e_2, r.residual_total, r.lambda_min
        );
    }
    println!("wrote {} and {}", cfg.out.display(), cfg.plot_path().display());
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let out = run_experiment(&cfg)?;
            print_records(&cfg, &out.records);
            println!("stopped: {:?}", out.trace.stop);
        }
        Command::Compare { run, counts } => {
            let base = run.config()?;
            let stem = base.out.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            let dir = base.out.parent().map(PathBuf::from).unwrap_or_default();
            let mut curves = Vec::new();
            for &k in &counts {
                let mut cfg = base.clone();
                cfg.initial_basis = k;
                cfg.out = dir.join(format!("{stem}-basis{k}.csv"));
                let out = run_experiment(&cfg)?;
                print_records(&cfg, &out.records);
                curves.push((format!("{k} initial basis"), format!("{stem}-basis{k}.csv")));
            }
            let plot = dir.join(format!("{stem}-compare.gp"));
            std::fs::write(&plot, plot_script(&curves, "initial basis comparison"))
                .map_err(|e| HarnessError::Io { path: plot.clone(), message: e.to_string() })?;
            println!("wrote {}", plot.display());
        }
        Command::Spectra { run, max } => {
            let cfg = run.config()?;
            let p = build_problem(&cfg)?;
            let nodes = p.grids.enrichable_nodes(cfg.dof_convention);
            for l in 1..=max {
                let lam = nodes
                    .iter()
                    .filter_map(|&n| p.model.get(n).spectrum.next_eigenvalue(l))
                    .fold(f64::INFINITY, f64::min);
                println!("{l} basis: Lambda_min = {lam:.6e}");
            }
        }
        Command::GenerateField { name, contrast, seed, out } => {
            let field = generate_field(&FieldSpec::named(&name, contrast)?, seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io { path: dir.into(), message: e.to_string() })?;
            }
            field.write(&out)?;
            println!("wrote {} ({}x{} cells, contrast {:e})", out.display(), field.cells_x(), field.cells_y(), field.contrast());
        }
        Command::Plot { out, title, csv } => {
            let mut curves = Vec::new();
            for path in &csv {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Io { path: path.clone(), message: e.to_string() })?;
                parse_csv(&text)?;
                let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                curves.push((label, path.display().to_string()));
            }
            std::fs::write(&out, plot_script(&curves, &title))
                .map_err(|e| HarnessError::Io { path: out.clone(), message: e.to_string() })?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
