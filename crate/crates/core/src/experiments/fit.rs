//! `ss fit`: trains the lattice, and optionally the two network baselines, on
//! one dataset.

use std::fmt::Write as _;

use crate::error::Result;
use crate::lattice::LatticeSpec;
use crate::mechanics::PhysicsParams;
use crate::mlp::{train_mlp, MlpParams, MlpReport, MlpSchedule};
use crate::training::{least_squares_fit, mse_loss, train, Dataset, FunctionId, TrainReport, TrainSchedule};

use super::{dataset_from, fmt_f64, lattice_from, physics_from, schedule_from, Config, DataDefaults, Outputs};

#[derive(Debug, Clone)]
pub struct FitSetup {
    pub spec: LatticeSpec,
    pub params: PhysicsParams,
    pub dataset: Dataset,
    pub schedule: TrainSchedule,
    /// `None` disables the network baselines.
    pub mlp: Option<(usize, MlpSchedule)>,
    pub seed: u64,
}

impl FitSetup {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let defaults = DataDefaults {
            function: FunctionId::QuadraticXy2,
            domain: vec![(0.0, 1.0), (0.0, 1.0)],
            n_points: 160,
            noise_sigma: 0.01,
        };
        let (dataset, domain) = dataset_from(cfg, &defaults, seed)?;
        let spec = lattice_from(cfg, &domain, 4, dataset.output_dim())?;
        let params = physics_from(
            cfg,
            PhysicsParams {
                mass: 1.0,
                stiffness: 1.0,
                friction: 10.0,
                temperature: 1e-3,
                boltzmann: 1.0,
            },
        )?;
        let schedule = schedule_from(
            cfg,
            TrainSchedule {
                epochs: 5000,
                batch_size: 16,
                dt_epoch: 0.1,
                inner_steps: 10,
                steady_window: 100,
                ..TrainSchedule::default()
            },
            seed,
        )?;
        schedule.validate(dataset.len()).map_err(|e| crate::Error::config("schedule", e.to_string()))?;
        let mlp = if cfg.get("mlp.enabled", true)? {
            let hidden = cfg.get_count("mlp.hidden", 16)?;
            let sched = MlpSchedule {
                lr: cfg.get_positive("mlp.lr", MlpSchedule::default().lr)?,
                epochs: cfg.get_count("mlp.epochs", schedule.epochs)?,
                batch_size: cfg.get_count("mlp.batch_size", schedule.batch_size)?,
                seed,
            };
            Some((hidden, sched))
        } else {
            None
        };
        Ok(Self {
            spec,
            params,
            dataset,
            schedule,
            mlp,
            seed,
        })
    }

    pub fn run(&self) -> Result<FitOutcome> {
        let oracle = least_squares_fit(&self.spec, &self.dataset)?;
        let oracle_loss = mse_loss(&self.spec, &oracle, &self.dataset)?;
        let ss = train(&self.spec, &self.params, &self.dataset, &self.schedule)?;
        let (mlp, mlpf) = match self.mlp {
            Some((hidden, sched)) => {
                let (d, m) = (self.dataset.input_dim(), self.dataset.output_dim());
                let init = MlpParams::init(d, hidden, m, true, self.seed)?;
                let fixed = MlpParams {
                    bias_trainable: false,
                    ..init.clone()
                };
                (
                    Some(train_mlp(init, &self.dataset, &sched)?),
                    Some(train_mlp(fixed, &self.dataset, &sched)?),
                )
            }
            None => (None, None),
        };
        Ok(FitOutcome {
            spec: self.spec.clone(),
            dataset: self.dataset.clone(),
            tail: self.schedule.steady_window,
            oracle_loss,
            ss,
            mlp,
            mlpf,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub spec: LatticeSpec,
    pub dataset: Dataset,
    /// Number of final epochs averaged into the tail loss.
    pub tail: usize,
    /// Full-data loss of the best lattice configuration.
    pub oracle_loss: f64,
    pub ss: TrainReport,
    pub mlp: Option<MlpReport>,
    pub mlpf: Option<MlpReport>,
}

pub fn tail_mean(losses: &[f64], tail: usize) -> f64 {
    let start = losses.len().saturating_sub(tail.max(1));
    let t = &losses[start..];
    t.iter().sum::<f64>() / t.len() as f64
}

impl FitOutcome {
    pub fn ss_tail_loss(&self) -> f64 {
        tail_mean(&self.ss.losses(), self.tail)
    }

    pub fn mlp_tail_loss(&self) -> Option<f64> {
        self.mlp.as_ref().map(|r| tail_mean(&r.losses(), self.tail))
    }

    pub fn mlpf_tail_loss(&self) -> Option<f64> {
        self.mlpf.as_ref().map(|r| tail_mean(&r.losses(), self.tail))
    }

    /// `model,last_loss,tail_loss,oracle_loss,diverged`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,last_loss,tail_loss,oracle_loss,diverged\n");
        let _ = writeln!(
            out,
            "ss,{},{},{},false",
            fmt_f64(self.ss.final_loss()),
            fmt_f64(self.ss_tail_loss()),
            fmt_f64(self.oracle_loss)
        );
        for (name, report) in [("mlp", &self.mlp), ("mlpf", &self.mlpf)] {
            if let Some(r) = report {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{}",
                    fmt_f64(r.final_loss()),
                    fmt_f64(tail_mean(&r.losses(), self.tail)),
                    fmt_f64(self.oracle_loss),
                    r.diverged
                );
            }
        }
        out
    }

    pub fn write(&self, out: &mut Outputs) -> Result<()> {
        out.write("dataset.csv", &self.dataset.to_csv())?;
        out.write("ss_train.csv", &self.ss.to_csv())?;
        out.write("ss_summary.txt", &format!("{}\n", self.ss.summary()))?;
        out.write("final_state.csv", &self.ss.final_state.to_csv(&self.spec))?;
        if let Some(r) = &self.mlp {
            out.write("mlp_train.csv", &r.to_csv())?;
        }
        if let Some(r) = &self.mlpf {
            out.write("mlpf_train.csv", &r.to_csv())?;
        }
        out.write("fit_summary.csv", &self.summary_csv())
    }
}
