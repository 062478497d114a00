use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{FieldSpec, HarnessError, SourceSpec};
use crate::enrich::EnrichmentPolicy;
use crate::grid::DofConvention;

/// Where the coefficient comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum KappaSource {
    /// A KAPPA v1 file, used as is.
    File(PathBuf),
    /// One of [`super::NAMED_FIELDS`], generated at the configured contrast and seed.
    Named(String),
    /// An explicit geometry; its `contrast` is replaced by the configured one.
    Generated(FieldSpec),
}

/// Granularity of the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordLevel {
    /// One row per sweep (online) or marking step (offline).
    Sweep,
    /// One row per color sub-iteration.
    Step,
}

impl FromStr for RecordLevel {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "sweep" => Ok(RecordLevel::Sweep),
            "step" => Ok(RecordLevel::Step),
            other => Err(HarnessError::Config(format!("unknown record level '{other}' (expected sweep|step)"))),
        }
    }
}

impl RecordLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordLevel::Sweep => "sweep",
            RecordLevel::Step => "step",
        }
    }
}

/// Everything one run needs. Serialized as flat `key = value` lines; `#`
/// starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub coarse: (usize, usize),
    pub fine: usize,
    pub kappa: KappaSource,
    /// Multiplier applied to the geometry of generated fields.
    pub contrast: f64,
    pub seed: u64,
    pub source: SourceSpec,
    pub initial_basis: usize,
    pub dof_convention: DofConvention,
    pub policy: EnrichmentPolicy,
    /// CSV path; the plot script is written next to it with extension `gp`.
    pub out: PathBuf,
    pub records: RecordLevel,
    /// Fill `wall_ms`; off by default so that outputs are reproducible.
    pub timing: bool,
    /// Record Galerkin and Riesz consistency defects in the trace.
    pub audit: bool,
    /// Directory for cached local spectra.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            coarse: (8, 8),
            fine: 32,
            kappa: KappaSource::Named("channels-8x8".into()),
            contrast: 1e4,
            seed: 0,
            source: SourceSpec::default(),
            initial_basis: 1,
            dof_convention: DofConvention::All,
            policy: EnrichmentPolicy::default(),
            out: PathBuf::from("out/run.csv"),
            records: RecordLevel::Sweep,
            timing: false,
            audit: false,
            cache_dir: None,
        }
    }
}

fn bad(key: &str, value: &str) -> HarnessError {
    HarnessError::Config(format!("bad value '{value}' for {key}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_dims(key: &str, value: &str) -> Result<(usize, usize), HarnessError> {
    match value.split_once('x') {
        Some((a, b)) => Ok((num(key, a.trim())?, num(key, b.trim())?)),
        None => {
            let n = num(key, value)?;
            Ok((n, n))
        }
    }
}

fn generated_spec<'g>(g: &'g mut Option<FieldSpec>, key: &str) -> Result<&'g mut FieldSpec, HarnessError> {
    g.as_mut().ok_or_else(|| HarnessError::Config(format!("{key} requires kappa = generated")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        let mut generated: Option<FieldSpec> = None;
        let mut cells_given = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "field_cells" => {
                    let (x, y) = parse_dims(key, value)?;
                    cells_given = true;
                    let g = generated_spec(&mut generated, key)?;
                    g.cells_x = x;
                    g.cells_y = y;
                }
                "background" => generated_spec(&mut generated, key)?.background = num(key, value)?,
                "shape" => {
                    let s = value.parse()?;
                    generated_spec(&mut generated, key)?.shapes.push(s);
                }
                "inclusions" => {
                    let inc = value.parse()?;
                    generated_spec(&mut generated, key)?.inclusions = Some(inc);
                }
                _ => {
                    if key == "kappa" && value == "generated" {
                        generated = Some(FieldSpec::constant(cfg.coarse.0 * cfg.fine, cfg.coarse.1 * cfg.fine, 1.0));
                    }
                    cfg.set(key, value)?;
                }
            }
        }
        if let Some(mut g) = generated {
            g.contrast = cfg.contrast;
            if !cells_given {
                (g.cells_x, g.cells_y) = (cfg.coarse.0 * cfg.fine, cfg.coarse.1 * cfg.fine);
            }
            cfg.kappa = KappaSource::Generated(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative input paths (a KAPPA or SOURCE file)
    /// are taken relative to the file's directory; `out` and `cache_dir`
    /// stay relative to the working directory.
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let KappaSource::File(p) = &mut cfg.kappa {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let SourceSpec::File(p) = &mut cfg.source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies one scalar key, as from the config file or a CLI flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        if self.policy.set(key, value).map_err(HarnessError::Config)? {
            return Ok(());
        }
        match key {
            "coarse" => self.coarse = parse_dims(key, value)?,
            "fine" => self.fine = num(key, value)?,
            "kappa" => {
                self.kappa = if let Some(name) = value.strip_prefix("named:") {
                    KappaSource::Named(name.to_string())
                } else if value == "generated" {
                    KappaSource::Generated(FieldSpec::constant(self.coarse.0 * self.fine, self.coarse.1 * self.fine, 1.0))
                } else {
                    KappaSource::File(PathBuf::from(value))
                }
            }
            "contrast" => {
                self.contrast = num(key, value)?;
                if let KappaSource::Generated(g) = &mut self.kappa {
                    g.contrast = self.contrast;
                }
            }
            "seed" => self.seed = num(key, value)?,
            "source" => self.source = value.parse()?,
            "initial_basis" => self.initial_basis = num(key, value)?,
            "dof_convention" => self.dof_convention = value.parse().map_err(HarnessError::Config)?,
            "out" => self.out = PathBuf::from(value),
            "records" => self.records = value.parse()?,
            "timing" => self.timing = num(key, value)?,
            "audit" => self.audit = num(key, value)?,
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            _ => return Err(HarnessError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.coarse.0 == 0 || self.coarse.1 == 0 || self.fine == 0 {
            return Err(HarnessError::Config("grid counts must be positive".into()));
        }
        if self.initial_basis == 0 {
            return Err(HarnessError::Config("initial_basis must be at least 1".into()));
        }
        if !(self.contrast >= 1.0) {
            return Err(HarnessError::Config(format!("contrast {} must be at least 1", self.contrast)));
        }
        self.policy.validate()?;
        Ok(())
    }

    /// Text form that [`RunConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").unwrap();
        kv("coarse", &format!("{}x{}", self.coarse.0, self.coarse.1));
        kv("fine", &self.fine);
        kv("contrast", &format!("{:?}", self.contrast));
        match &self.kappa {
            KappaSource::File(p) => kv("kappa", &p.display()),
            KappaSource::Named(n) => kv("kappa", &format!("named:{n}")),
            KappaSource::Generated(g) => {
                kv("kappa", &"generated");
                kv("field_cells", &format!("{}x{}", g.cells_x, g.cells_y));
                kv("background", &format!("{:?}", g.background));
                for shape in &g.shapes {
                    kv("shape", shape);
                }
                if let Some(inc) = &g.inclusions {
                    kv("inclusions", inc);
                }
            }
        }
        kv("seed", &self.seed);
        kv("source", &self.source);
        kv("initial_basis", &self.initial_basis);
        kv("dof_convention", &self.dof_convention.as_str());
        for (k, v) in self.policy.to_pairs() {
            kv(k, &v);
        }
        kv("out", &self.out.display());
        kv("records", &self.records.as_str());
        kv("timing", &self.timing);
        kv("audit", &self.audit);
        if let Some(dir) = &self.cache_dir {
            kv("cache_dir", &dir.display());
        }
        s
    }

    /// The plot script path derived from [`RunConfig::out`].
    pub fn plot_path(&self) -> PathBuf {
        self.out.with_extension("gp")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrich::{Mode, WindowRule};
    use crate::harness::Shape;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse(
            "# sample\ncoarse = 16x16\nfine = 16\nkappa = named:inclusions-and-channels # shipped\n\
             contrast = 1e6\nmode = online_cumulative\ntheta = 0.5\nsource = two-blob\n",
        )
        .unwrap();
        assert_eq!(cfg.coarse, (16, 16));
        assert_eq!(cfg.kappa, KappaSource::Named("inclusions-and-channels".into()));
        assert_eq!(cfg.contrast, 1e6);
        assert_eq!(cfg.policy.mode, Mode::OnlineCumulative);
        assert_eq!(cfg.source, SourceSpec::TwoBlob);
        assert!(RunConfig::parse("coarse 4").is_err());
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("initial_basis = 0").is_err());
        assert!(RunConfig::parse("shape = rect 0 0 1 1").is_err());
    }

    #[test]
    fn generated_geometry_round_trips() {
        let text = "coarse = 2x2\nfine = 4\nkappa = generated\nshape = rect 0 0.25 1 0.5\n\
                    shape = disk 0.5 0.5 0.1\ninclusions = 3 1 2 4\ncontrast = 50\n";
        let cfg = RunConfig::parse(text).unwrap();
        let KappaSource::Generated(g) = &cfg.kappa else { panic!("expected generated field") };
        assert_eq!((g.cells_x, g.cells_y), (8, 8));
        assert_eq!(g.contrast, 50.0);
        assert_eq!(g.shapes[1], Shape::Disk { cx: 0.5, cy: 0.5, r: 0.1 });
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn file_inputs_resolve_against_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "kappa = ../k.kappa\nsource = file:s.src\nout = o.csv\n").unwrap();
        let cfg = RunConfig::read(&path).unwrap();
        assert_eq!(cfg.kappa, KappaSource::File(dir.path().join("../k.kappa")));
        assert_eq!(cfg.source, SourceSpec::File(dir.path().join("s.src")));
        assert_eq!(cfg.out, PathBuf::from("o.csv"));
    }

    proptest! {
        #[test]
        fn text_round_trip(
            nx in 1usize..20, ny in 1usize..20, fine in 1usize..40,
            contrast in 1.0f64..1e8, seed in any::<u64>(), initial in 1usize..6,
            theta in 0.01f64..1.0, tol in 0.0f64..1.0, iters in 0usize..50, n0 in 1usize..80,
            mode in 0usize..5, window in 0usize..3, neighbors in any::<bool>(),
            all in any::<bool>(), step in any::<bool>(), timing in any::<bool>(), audit in any::<bool>(),
        ) {
            let mut cfg = RunConfig {
                coarse: (nx, ny),
                fine,
                contrast,
                seed,
                initial_basis: initial,
                dof_convention: if all { DofConvention::All } else { DofConvention::Interior },
                records: if step { RecordLevel::Step } else { RecordLevel::Sweep },
                timing,
                audit,
                kappa: KappaSource::File("data/fields/x.kappa".into()),
                source: SourceSpec::Constant(tol + 0.5),
                cache_dir: Some("cache".into()),
                ..RunConfig::default()
            };
            cfg.policy.mode = ["offline_adaptive", "online_full", "online_threshold", "online_cumulative", "online_reduced"][mode].parse().unwrap();
            cfg.policy.theta = theta;
            cfg.policy.tol = tol;
            cfg.policy.max_iterations = iters;
            cfg.policy.n0 = n0;
            cfg.policy.window = [WindowRule::Fixed, WindowRule::Slide, WindowRule::Grow][window];
            cfg.policy.neighbors = neighbors;
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
