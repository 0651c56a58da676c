//! `ss error-scaling`: integrated squared error of the lattice interpolant
//! against the stick count.
//!
//! The oracle path sets node heights to the function values. The optional
//! trained path fits noise-free samples at finite temperature and averages
//! the error over replicas.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::mechanics::PhysicsParams;
use crate::stats::{log_log_slope, mean, std_dev};
use crate::training::{approximation_error, oracle_fit, synthesize, train, FunctionId, SyntheticSpec, TrainSchedule};

use super::{derive_seed, fmt_f64, physics_from, schedule_from, Config, Outputs};

#[derive(Debug, Clone)]
pub struct TrainedPath {
    pub runs: usize,
    pub points_per_stick: usize,
    pub params: PhysicsParams,
    pub schedule: TrainSchedule,
}

#[derive(Debug, Clone)]
pub struct ErrorScalingSetup {
    pub functions: Vec<FunctionId>,
    pub sticks: Vec<usize>,
    pub domain: Vec<(f64, f64)>,
    pub quadrature: usize,
    pub trained: Option<TrainedPath>,
    pub seed: u64,
}

impl ErrorScalingSetup {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let functions: Vec<FunctionId> = cfg.get_list(
            "error.functions",
            &[FunctionId::Sin, FunctionId::Cos, FunctionId::Square, FunctionId::Exp],
        )?;
        let mut sticks: Vec<usize> = cfg.get_list("error.sticks", &[2, 4, 8, 16, 32])?;
        sticks.sort_unstable();
        sticks.dedup();
        if sticks.is_empty() || sticks[0] == 0 {
            return Err(Error::config("error.sticks", "stick counts must be >= 1"));
        }
        if functions.is_empty() {
            return Err(Error::config("error.functions", "at least one function is required"));
        }
        let domain = cfg.get_intervals("error.domain", &[(0.0, std::f64::consts::TAU)])?;
        if let Some(f) = functions.iter().find(|f| f.min_input_dim() > domain.len()) {
            return Err(Error::config("error.functions", format!("`{}` needs {} input axes", f.name(), f.min_input_dim())));
        }
        let quadrature = cfg.get_count("error.quadrature", 6)?;
        let trained = if cfg.get("error.trained", false)? {
            let params = physics_from(
                cfg,
                PhysicsParams {
                    mass: 1.0,
                    stiffness: 1.0,
                    friction: 10.0,
                    temperature: 1e-4,
                    boltzmann: 1.0,
                },
            )?;
            let schedule = schedule_from(
                cfg,
                TrainSchedule {
                    epochs: 1000,
                    batch_size: 16,
                    dt_epoch: 0.1,
                    inner_steps: 10,
                    steady_window: 100,
                    ..TrainSchedule::default()
                },
                seed,
            )?;
            let points_per_stick = cfg.get_count("error.points_per_stick", 10)?;
            let fewest = points_per_stick * sticks[0].pow(domain.len() as u32);
            schedule.validate(fewest).map_err(|e| Error::config("schedule", e.to_string()))?;
            Some(TrainedPath {
                runs: cfg.get_count("error.runs", 8)?,
                points_per_stick,
                params,
                schedule,
            })
        } else {
            None
        };
        Ok(Self {
            functions,
            sticks,
            domain,
            quadrature,
            trained,
            seed,
        })
    }

    fn lattice(&self, sticks: usize) -> Result<LatticeSpec> {
        let lo: Vec<f64> = self.domain.iter().map(|r| r.0).collect();
        let hi: Vec<f64> = self.domain.iter().map(|r| r.1).collect();
        LatticeSpec::covering(&lo, &hi, &vec![sticks; lo.len()], 1)
    }

    fn trained_error(&self, path: &TrainedPath, f: FunctionId, sticks: usize, replica: usize) -> Result<f64> {
        let spec = self.lattice(sticks)?;
        let data = synthesize(
            &SyntheticSpec {
                function: f,
                domain: self.domain.clone(),
                n_points: path.points_per_stick * spec.stick_count(),
                noise_sigma: 0.0,
            },
            derive_seed(self.seed, sticks as u64),
        )?;
        let schedule = TrainSchedule {
            replica: replica as u64,
            ..path.schedule
        };
        let report = train(&spec, &path.params, &data, &schedule)?;
        approximation_error(&spec, &report.final_state, |u| vec![f.eval(u)], self.quadrature)
    }

    pub fn run(&self) -> Result<ErrorScalingOutcome> {
        let mut rows = Vec::new();
        for &f in &self.functions {
            for &ns in &self.sticks {
                let spec = self.lattice(ns)?;
                let g = |u: &[f64]| vec![f.eval(u)];
                let e_oracle = approximation_error(&spec, &oracle_fit(&spec, g), g, self.quadrature)?;
                rows.push(ErrorRow {
                    function: f,
                    sticks: ns,
                    e_oracle,
                    e_trained_mean: f64::NAN,
                    e_trained_std: f64::NAN,
                });
            }
        }
        if let Some(path) = &self.trained {
            let jobs = rows.len() * path.runs;
            let errs: Vec<Result<f64>> = (0..jobs)
                .into_par_iter()
                .map(|j| {
                    let row = &rows[j / path.runs];
                    self.trained_error(path, row.function, row.sticks, j % path.runs)
                })
                .collect();
            for (i, row) in rows.iter_mut().enumerate() {
                let e: Vec<f64> = errs[i * path.runs..(i + 1) * path.runs]
                    .iter()
                    .filter_map(|r| r.as_ref().inspect_err(|e| log::warn!("{} N_s={}: {e}", row.function, row.sticks)).ok().copied())
                    .collect();
                if !e.is_empty() {
                    row.e_trained_mean = mean(&e);
                    row.e_trained_std = if e.len() > 1 { std_dev(&e) } else { 0.0 };
                }
            }
        }
        Ok(ErrorScalingOutcome { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub function: FunctionId,
    pub sticks: usize,
    pub e_oracle: f64,
    pub e_trained_mean: f64,
    pub e_trained_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFits {
    pub function: FunctionId,
    /// Log-log slope of `E_oracle` against `N_s`.
    pub oracle: f64,
    pub oracle_r_squared: f64,
    /// Same for `sqrt(E_oracle)`, the L2 norm of the residual.
    pub oracle_l2: f64,
    pub trained: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorScalingOutcome {
    pub rows: Vec<ErrorRow>,
}

impl ErrorScalingOutcome {
    pub fn fits(&self) -> Vec<SlopeFits> {
        let mut functions: Vec<FunctionId> = Vec::new();
        for r in &self.rows {
            if !functions.contains(&r.function) {
                functions.push(r.function);
            }
        }
        functions
            .into_iter()
            .map(|f| {
                let rows: Vec<&ErrorRow> = self.rows.iter().filter(|r| r.function == f).collect();
                let ns: Vec<f64> = rows.iter().map(|r| r.sticks as f64).collect();
                let slope = |y: Vec<f64>| log_log_slope(&ns, &y);
                let oracle = slope(rows.iter().map(|r| r.e_oracle).collect());
                let trained = if rows.iter().all(|r| r.e_trained_mean > 0.0) {
                    slope(rows.iter().map(|r| r.e_trained_mean).collect()).slope
                } else {
                    f64::NAN
                };
                SlopeFits {
                    function: f,
                    oracle: oracle.slope,
                    oracle_r_squared: oracle.r_squared,
                    oracle_l2: slope(rows.iter().map(|r| r.e_oracle.sqrt()).collect()).slope,
                    trained,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("f,N_s,E_oracle,E_trained_mean,E_trained_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.function,
                r.sticks,
                r.e_oracle,
                fmt_f64(r.e_trained_mean),
                fmt_f64(r.e_trained_std)
            );
        }
        out
    }

    pub fn fits_csv(&self) -> String {
        let mut out = String::from("f,slope_oracle,r_squared_oracle,slope_oracle_l2,slope_trained\n");
        for s in self.fits() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.function,
                fmt_f64(s.oracle),
                fmt_f64(s.oracle_r_squared),
                fmt_f64(s.oracle_l2),
                fmt_f64(s.trained)
            );
        }
        out
    }

    pub fn write(&self, out: &mut Outputs) -> Result<()> {
        out.write("error_scaling.csv", &self.to_csv())?;
        out.write("error_scaling_fits.csv", &self.fits_csv())
    }
}
