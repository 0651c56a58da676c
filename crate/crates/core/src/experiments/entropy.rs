//! `ss entropy`: entropy production and flux of the Gaussian state while a
//! lattice relaxes under a fixed set of springs.
//!
//! Moments start away from equilibrium (heights offset from the data, spread
//! over the target range, velocities thermal) and are propagated with RK4.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::langevin::{assemble_from_operator, LinearSde};
use crate::mechanics::{assemble_mass, MassMatrix, PhysicsParams, StiffnessOperator};
use crate::stats::spearman;
use crate::thermo::{entropy_rates, propagate_moments, MomentState};
use crate::training::{Dataset, FunctionId};

use super::{dataset_from, fmt_f64, lattice_from, physics_from, Config, DataDefaults, Outputs};

#[derive(Debug, Clone)]
pub struct EntropySetup {
    pub spec: LatticeSpec,
    pub dataset: Dataset,
    pub base: PhysicsParams,
    /// `(gamma, k)` pairs.
    pub settings: Vec<(f64, f64)>,
    pub t_end: f64,
    pub dt: f64,
    pub record_every: usize,
    /// Initial height offset above the midpoint of the targets.
    pub offset: f64,
    /// The transient ends once `Pi` drops below this fraction of its peak.
    pub transient_fraction: f64,
}

impl EntropySetup {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let defaults = DataDefaults {
            function: FunctionId::Zero,
            domain: vec![(0.0, 1.0)],
            n_points: 10,
            noise_sigma: 0.1,
        };
        let (dataset, domain) = dataset_from(cfg, &defaults, seed)?;
        let spec = lattice_from(cfg, &domain, 1, dataset.output_dim())?;
        let base = physics_from(
            cfg,
            PhysicsParams {
                mass: 1.0,
                stiffness: 1.0,
                friction: 10.0,
                temperature: 0.01,
                boltzmann: 1.0,
            },
        )?;
        let settings = cfg.get_pairs("entropy.settings", &[(5.0, 1.0), (10.0, 1.0), (20.0, 1.0), (10.0, 2.0)])?;
        if settings.iter().any(|&(g, k)| !(g >= 0.0 && k >= 0.0)) {
            return Err(Error::config("entropy.settings", "gamma and k must be non-negative"));
        }
        if base.thermal_energy() == 0.0 || settings.iter().any(|s| s.0 == 0.0) {
            return Err(Error::SingularBlock(
                "entropy rates need T > 0 and gamma > 0 (the velocity diffusion block is singular)".into(),
            ));
        }
        let t_end = cfg.get_positive("entropy.t_end", 60.0)?;
        let dt = cfg.get_positive("entropy.dt", 2e-3)?;
        if dt > t_end {
            return Err(Error::config("entropy.dt", "time step exceeds t_end"));
        }
        Ok(Self {
            spec,
            dataset,
            base,
            settings,
            t_end,
            dt,
            record_every: cfg.get_count("entropy.record_every", 10)?,
            offset: cfg.get("entropy.offset", 1.0)?,
            transient_fraction: cfg.get_positive("entropy.transient_fraction", 1e-2)?,
        })
    }

    fn initial_moments(&self, params: &PhysicsParams) -> Result<MomentState> {
        let m = self.spec.output_dim();
        let n = self.spec.node_count() * m;
        let ranges = self.dataset.target_range();
        let mut mean = DVector::zeros(2 * n);
        let mut cov = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            let (lo, hi) = ranges[i % m];
            mean[i] = 0.5 * (lo + hi) + self.offset;
            cov[(i, i)] = ((hi - lo).powi(2) / 12.0).max(f64::MIN_POSITIVE);
            cov[(n + i, n + i)] = params.thermal_energy() / params.mass;
        }
        MomentState::new(mean, cov)
    }

    fn run_setting(&self, gamma: f64, k: f64) -> Result<EntropyTrace> {
        let params = PhysicsParams {
            friction: gamma,
            stiffness: k,
            ..self.base
        };
        let m = self.spec.output_dim();
        let mass: MassMatrix = assemble_mass(&self.spec, &params)?;
        let all: Vec<usize> = (0..self.dataset.len()).collect();
        let batch = self.dataset.batch(&all, &self.dataset.weights(&self.spec)?);
        let op = StiffnessOperator::assemble(&self.spec, &params, &batch);
        let sde: LinearSde = assemble_from_operator(&self.spec, &params, Some(&op), &mass)?;
        let mut moments = self.initial_moments(&params)?;
        let steps = (self.t_end / self.dt).round() as usize;
        let mut rows = Vec::with_capacity(steps / self.record_every + 1);
        for step in 0..=steps {
            if step % self.record_every == 0 || step == steps {
                let rates = entropy_rates(&sde, &moments)?;
                rows.push(EntropyRow {
                    t: step as f64 * self.dt,
                    production: rates.production,
                    flux: rates.flux,
                    potential: moments.mean_potential(&op, m),
                    entropy: moments.gaussian_entropy()?,
                    kinetic: moments.mean_kinetic(&mass, m),
                });
            }
            if step < steps {
                moments = propagate_moments(&sde, &moments, self.dt).map_err(|_| Error::Blowup {
                    step,
                    time: step as f64 * self.dt,
                })?;
            }
        }
        Ok(EntropyTrace {
            gamma,
            k,
            rows,
            transient_fraction: self.transient_fraction,
        })
    }

    pub fn run(&self) -> Result<EntropyOutcome> {
        let traces = self
            .settings
            .iter()
            .map(|&(g, k)| self.run_setting(g, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(EntropyOutcome { traces })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyRow {
    pub t: f64,
    pub production: f64,
    pub flux: f64,
    pub potential: f64,
    pub entropy: f64,
    pub kinetic: f64,
}

#[derive(Debug, Clone)]
pub struct EntropyTrace {
    pub gamma: f64,
    pub k: f64,
    pub rows: Vec<EntropyRow>,
    pub transient_fraction: f64,
}

impl EntropyTrace {
    pub fn peak(&self) -> f64 {
        self.rows.iter().map(|r| r.production).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.rows.iter().map(|r| r.production).fold(f64::INFINITY, f64::min)
    }

    pub fn final_production(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.production)
    }

    /// Row range from the peak of `Pi` to its first drop below
    /// `transient_fraction * peak`.
    pub fn transient(&self) -> (usize, usize) {
        let peak = self.peak();
        let start = self.rows.iter().position(|r| r.production == peak).unwrap_or(0);
        let end = self.rows[start..]
            .iter()
            .position(|r| r.production < self.transient_fraction * peak)
            .map_or(self.rows.len(), |i| start + i);
        (start, end)
    }

    /// Rank correlation of `Pi` with the mean potential over the transient.
    pub fn transient_spearman(&self) -> f64 {
        let (a, b) = self.transient();
        if b - a < 3 {
            return f64::NAN;
        }
        let pi: Vec<f64> = self.rows[a..b].iter().map(|r| r.production).collect();
        let u: Vec<f64> = self.rows[a..b].iter().map(|r| r.potential).collect();
        spearman(&pi, &u)
    }

    pub fn file_name(&self) -> String {
        format!("entropy_gamma{}_k{}.csv", self.gamma, self.k)
    }

    /// `t,Pi,Phi,U_mean,S_gauss,K_mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,Pi,Phi,U_mean,S_gauss,K_mean\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.t, r.production, r.flux, r.potential, r.entropy, r.kinetic);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EntropyOutcome {
    pub traces: Vec<EntropyTrace>,
}

impl EntropyOutcome {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("gamma,k,peak_Pi,final_Pi,min_Pi,final_over_peak,spearman_transient,transient_t0,transient_t1\n");
        for t in &self.traces {
            let (a, b) = t.transient();
            let t1 = t.rows.get(b).or(t.rows.last()).map_or(f64::NAN, |r| r.t);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                t.gamma,
                t.k,
                t.peak(),
                t.final_production(),
                t.min(),
                t.final_production() / t.peak(),
                fmt_f64(t.transient_spearman()),
                t.rows[a].t,
                t1
            );
        }
        out
    }

    pub fn write(&self, out: &mut Outputs) -> Result<()> {
        for t in &self.traces {
            out.write(&t.file_name(), &t.to_csv())?;
        }
        out.write("entropy_summary.csv", &self.summary_csv())
    }
}
