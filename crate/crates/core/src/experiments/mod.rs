//! Experiment drivers behind the `ss` command line: each reads a [`Config`],
//! runs a seeded, order-independent computation and writes CSV files plus a
//! `manifest.txt` into its output directory.
//!
//! The manifest holds the effective configuration (defaults included) in
//! config syntax, so `ss <experiment> --config manifest.txt` repeats a run.

pub mod config;
pub mod entropy;
pub mod error_scaling;
pub mod fit;
pub mod tlb;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub use config::{Axis, Config};

use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::mechanics::PhysicsParams;
use crate::training::{synthesize, Dataset, FunctionId, SyntheticSpec, TrainSchedule};

pub const DEFAULT_SEED: u64 = 42;

/// Boltzmann constant in J/K, selected with `physics.boltzmann = si`.
pub const BOLTZMANN_SI: f64 = 1.380649e-23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Fit,
    ScaleSweep,
    TlbExpressivity,
    TlbHeatmap,
    ErrorScaling,
    Entropy,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Fit,
        Experiment::ScaleSweep,
        Experiment::TlbExpressivity,
        Experiment::TlbHeatmap,
        Experiment::ErrorScaling,
        Experiment::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fit => "fit",
            Experiment::ScaleSweep => "scale-sweep",
            Experiment::TlbExpressivity => "tlb-expressivity",
            Experiment::TlbHeatmap => "tlb-heatmap",
            Experiment::ErrorScaling => "error-scaling",
            Experiment::Entropy => "entropy",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::config("experiment", format!("unknown experiment `{s}`")))
    }
}

/// Collects the files a driver writes.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub wall_time: f64,
}

/// Resolves `run.seed`, `run.out` and `run.jobs`, runs the driver and writes
/// the manifest. Unknown configuration keys are rejected before any output
/// is written.
pub fn run_experiment(experiment: Experiment, cfg: &Config) -> Result<RunSummary> {
    let started = Instant::now();
    let seed: u64 = cfg.get("run.seed", DEFAULT_SEED)?;
    let out_dir = PathBuf::from(cfg.get("run.out", format!("out/{experiment}"))?);
    let jobs: usize = cfg.get("run.jobs", 0)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("run.jobs", e.to_string()))?;
    let plan = Plan::prepare(experiment, cfg, seed)?;
    cfg.finish()?;
    let mut out = Outputs::create(&out_dir)?;
    pool.install(|| plan.execute(&mut out))?;
    let wall_time = started.elapsed().as_secs_f64();
    let manifest = format!(
        "# experiment: {experiment}\n# version: ss-core {}\n# seed: {seed}\n# threads: {}\n# config source: {}\n# wall time (s): {wall_time:.3}\n# outputs: {}\n{}",
        env!("CARGO_PKG_VERSION"),
        pool.current_num_threads(),
        cfg.source(),
        out.files().join(", "),
        cfg.echo()
    );
    out.write("manifest.txt", &manifest)?;
    log::info!("{experiment} finished in {wall_time:.1} s; outputs in {}", out.dir().display());
    Ok(RunSummary {
        experiment,
        out_dir,
        files: out.files().to_vec(),
        wall_time,
    })
}

/// A fully configured driver, validated before anything runs.
enum Plan {
    Fit(fit::FitSetup),
    ScaleSweep(tlb::SweepSetup),
    Expressivity(tlb::ExpressivitySetup),
    Heatmap(tlb::HeatmapSetup),
    ErrorScaling(error_scaling::ErrorScalingSetup),
    Entropy(entropy::EntropySetup),
}

impl Plan {
    fn prepare(experiment: Experiment, cfg: &Config, seed: u64) -> Result<Self> {
        Ok(match experiment {
            Experiment::Fit => Plan::Fit(fit::FitSetup::from_config(cfg, seed)?),
            Experiment::ScaleSweep => Plan::ScaleSweep(tlb::SweepSetup::from_config(cfg, seed)?),
            Experiment::TlbExpressivity => Plan::Expressivity(tlb::ExpressivitySetup::from_config(cfg, seed)?),
            Experiment::TlbHeatmap => Plan::Heatmap(tlb::HeatmapSetup::from_config(cfg, seed)?),
            Experiment::ErrorScaling => Plan::ErrorScaling(error_scaling::ErrorScalingSetup::from_config(cfg, seed)?),
            Experiment::Entropy => Plan::Entropy(entropy::EntropySetup::from_config(cfg, seed)?),
        })
    }

    fn execute(&self, out: &mut Outputs) -> Result<()> {
        match self {
            Plan::Fit(s) => s.run()?.write(out),
            Plan::ScaleSweep(s) => s.run().write(out),
            Plan::Expressivity(s) => s.run().write(out),
            Plan::Heatmap(s) => s.run().write(out),
            Plan::ErrorScaling(s) => s.run()?.write(out),
            Plan::Entropy(s) => s.run()?.write(out),
        }
    }
}

/// `physics.*`; `physics.boltzmann` accepts a number or `si`.
pub fn physics_from(cfg: &Config, defaults: PhysicsParams) -> Result<PhysicsParams> {
    let boltzmann = boltzmann_from(cfg, defaults.boltzmann)?;
    let params = PhysicsParams {
        mass: cfg.get_positive("physics.mass", defaults.mass)?,
        stiffness: cfg.get_non_negative("physics.stiffness", defaults.stiffness)?,
        friction: cfg.get_non_negative("physics.friction", defaults.friction)?,
        temperature: cfg.get_non_negative("physics.temperature", defaults.temperature)?,
        boltzmann,
    };
    params.validate().map_err(|e| Error::config("physics", e.to_string()))?;
    Ok(params)
}

/// `physics.boltzmann`: a positive number or `si`.
pub fn boltzmann_from(cfg: &Config, default: f64) -> Result<f64> {
    let kb = match cfg.get_opt::<String>("physics.boltzmann")? {
        None => default,
        Some(s) if s.eq_ignore_ascii_case("si") => BOLTZMANN_SI,
        Some(s) => s
            .parse()
            .map_err(|_| Error::config("physics.boltzmann", format!("expected a number or `si`, got `{s}`")))?,
    };
    if !(kb > 0.0 && kb.is_finite()) {
        return Err(Error::config("physics.boltzmann", "must be positive"));
    }
    Ok(kb)
}

#[derive(Debug, Clone)]
pub struct DataDefaults {
    pub function: FunctionId,
    pub domain: Vec<(f64, f64)>,
    pub n_points: usize,
    pub noise_sigma: f64,
}

/// `data.file` or the synthetic `data.function`, `data.domain`,
/// `data.n_points`, `data.noise_sigma`. Returns the dataset and its domain.
pub fn dataset_from(cfg: &Config, defaults: &DataDefaults, seed: u64) -> Result<(Dataset, Vec<(f64, f64)>)> {
    if let Some(path) = cfg.get_opt::<String>("data.file")? {
        let ds = Dataset::read_csv(Path::new(&path)).map_err(|e| Error::config("data.file", e.to_string()))?;
        let bbox: Vec<(f64, f64)> = (0..ds.input_dim())
            .map(|k| {
                ds.inputs
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u[k]), hi.max(u[k])))
            })
            .collect();
        return Ok((ds, bbox));
    }
    let function: FunctionId = cfg.get("data.function", defaults.function)?;
    let spec = SyntheticSpec {
        function,
        domain: cfg.get_intervals("data.domain", &defaults.domain)?,
        n_points: cfg.get_count("data.n_points", defaults.n_points)?,
        noise_sigma: cfg.get_non_negative("data.noise_sigma", defaults.noise_sigma)?,
    };
    spec.validate().map_err(|e| Error::config("data", e.to_string()))?;
    let domain = spec.domain.clone();
    Ok((synthesize(&spec, seed)?, domain))
}

/// `lattice.sticks` (one count, or one per input axis) over `lattice.domain`,
/// which defaults to the data domain.
pub fn lattice_from(cfg: &Config, data_domain: &[(f64, f64)], default_sticks: usize, outputs: usize) -> Result<LatticeSpec> {
    let d = data_domain.len();
    let domain = cfg.get_intervals("lattice.domain", data_domain)?;
    let mut sticks: Vec<usize> = cfg.get_list("lattice.sticks", &[default_sticks])?;
    if sticks.len() == 1 && d > 1 {
        sticks = vec![sticks[0]; d];
    }
    if sticks.len() != d || domain.len() != d {
        return Err(Error::config("lattice", format!("lattice needs {d} axes to match the data")));
    }
    let lo: Vec<f64> = domain.iter().map(|r| r.0).collect();
    let hi: Vec<f64> = domain.iter().map(|r| r.1).collect();
    LatticeSpec::covering(&lo, &hi, &sticks, outputs).map_err(|e| Error::config("lattice", e.to_string()))
}

/// `schedule.*`, with `seed` driving the batch protocol.
pub fn schedule_from(cfg: &Config, defaults: TrainSchedule, seed: u64) -> Result<TrainSchedule> {
    Ok(TrainSchedule {
        epochs: cfg.get_count("schedule.epochs", defaults.epochs)?,
        batch_size: cfg.get_count("schedule.batch_size", defaults.batch_size)?,
        dt_epoch: cfg.get_positive("schedule.dt_epoch", defaults.dt_epoch)?,
        inner_steps: cfg.get_count("schedule.inner_steps", defaults.inner_steps)?,
        seed,
        replica: 0,
        steady_window: cfg.get_count("schedule.steady_window", defaults.steady_window)?,
        steady_rel_tol: cfg.get_positive("schedule.steady_rel_tol", defaults.steady_rel_tol)?,
    })
}

/// Mixes a base seed with an index into an independent seed.
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}
