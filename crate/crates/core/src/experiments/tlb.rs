//! Scale sweeps and the thermodynamic learning barrier.
//!
//! Every sweep point trains `n_trajectories` independent replicas of the
//! lattice at stiffness `k` (mass `mass_ratio * k`), records each replica's
//! tail loss and protocol work, and turns the works into a Jarzynski estimate.
//! Replica `r` uses the same initial-condition and noise streams at every
//! point, so differences between points are not masked by sampling noise.
//!
//! The barrier `deltaF_min` is the median of `|deltaF|` over the flat region
//! at the small-`k` end of a sweep.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::mechanics::PhysicsParams;
use crate::stats::{linear_fit, median, fit_through_origin, mean, std_dev, LineFit};
use crate::thermo::FreeEnergyEstimate;
use crate::training::{train, Dataset, FunctionId, TrainSchedule};

use super::fit::tail_mean;
use super::{boltzmann_from, dataset_from, derive_seed, fmt_f64, schedule_from, Axis, Config, DataDefaults, Outputs};

pub const DEFAULT_MAX_REL_SLOPE: f64 = 0.05;

/// Settings shared by all points of a sweep.
#[derive(Debug, Clone)]
pub struct SweepProtocol {
    pub dataset: Dataset,
    pub domain: Vec<(f64, f64)>,
    pub boltzmann: f64,
    /// `M = mass_ratio * k`.
    pub mass_ratio: f64,
    pub schedule: TrainSchedule,
    /// When set, the batch size is `min(N, batch_per_node * nodes)`.
    pub batch_per_node: Option<usize>,
    pub n_trajectories: usize,
    pub seed: u64,
}

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub sticks: usize,
    pub k: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl Cell {
    fn bootstrap_seed(&self, seed: u64) -> u64 {
        [self.k.to_bits(), self.gamma.to_bits(), self.temperature.to_bits(), self.sticks as u64]
            .into_iter()
            .fold(seed, derive_seed)
    }
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub cell: Cell,
    pub mass: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// `None` when no replica finished or the estimator is undefined.
    pub estimate: Option<FreeEnergyEstimate>,
}

impl PointResult {
    pub fn delta_f(&self) -> f64 {
        self.estimate.map_or(f64::NAN, |e| e.delta_f)
    }

    /// `|deltaF|` and its bootstrap band.
    pub fn magnitude(&self) -> Option<(f64, f64, f64)> {
        self.estimate.map(|e| {
            let (a, b) = (e.lo.abs(), e.hi.abs());
            let lo = if e.lo.signum() == e.hi.signum() { a.min(b) } else { 0.0 };
            (e.delta_f.abs(), lo, a.max(b))
        })
    }
}

pub const POINT_HEADER: &str = "k,M,loss_mean,loss_std,deltaF,deltaF_lo,deltaF_hi,mean_W,n_ok,n_failed";

fn point_row(p: &PointResult) -> String {
    let (lo, hi, w) = p.estimate.map_or((f64::NAN, f64::NAN, f64::NAN), |e| (e.lo, e.hi, e.mean_work));
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        p.cell.k,
        p.mass,
        fmt_f64(p.loss_mean),
        fmt_f64(p.loss_std),
        fmt_f64(p.delta_f()),
        fmt_f64(lo),
        fmt_f64(hi),
        fmt_f64(w),
        p.n_ok,
        p.n_failed
    )
}

impl SweepProtocol {
    fn lattice(&self, sticks: usize) -> Result<LatticeSpec> {
        let lo: Vec<f64> = self.domain.iter().map(|r| r.0).collect();
        let hi: Vec<f64> = self.domain.iter().map(|r| r.1).collect();
        LatticeSpec::covering(&lo, &hi, &vec![sticks; lo.len()], self.dataset.output_dim())
    }

    fn schedule_for(&self, spec: &LatticeSpec) -> TrainSchedule {
        let mut s = self.schedule;
        if let Some(b) = self.batch_per_node {
            s.batch_size = (b * spec.node_count()).min(self.dataset.len());
        }
        s
    }

    fn params_for(&self, cell: &Cell) -> PhysicsParams {
        PhysicsParams {
            mass: self.mass_ratio * cell.k,
            stiffness: cell.k,
            friction: cell.gamma,
            temperature: cell.temperature,
            boltzmann: self.boltzmann,
        }
    }

    /// Checks every cell up front so that a bad axis is a configuration error.
    pub fn validate(&self, cells: &[Cell]) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::config("sweep.n_trajectories", "must be >= 1"));
        }
        for cell in cells {
            let spec = self.lattice(cell.sticks).map_err(|e| Error::config("sweep.sticks", e.to_string()))?;
            self.schedule_for(&spec)
                .validate(self.dataset.len())
                .map_err(|e| Error::config("schedule", e.to_string()))?;
            let params = self.params_for(cell);
            params.validate().map_err(|e| Error::config("sweep", e.to_string()))?;
            if !(params.thermal_energy() > 0.0) {
                return Err(Error::config("sweep", "temperature must be positive for the free-energy estimate"));
            }
        }
        Ok(())
    }

    /// Runs all cells. Replicas of all cells are scheduled as one flat
    /// parallel loop; results are gathered in cell order.
    pub fn run(&self, cells: &[Cell]) -> Vec<PointResult> {
        let setups: Vec<Result<(LatticeSpec, PhysicsParams, TrainSchedule)>> = cells
            .iter()
            .map(|cell| {
                let spec = self.lattice(cell.sticks)?;
                let schedule = self.schedule_for(&spec);
                Ok((spec, self.params_for(cell), schedule))
            })
            .collect();
        let r = self.n_trajectories;
        let runs: Vec<Result<(f64, f64)>> = (0..cells.len() * r)
            .into_par_iter()
            .map(|job| {
                let (c, traj) = (job / r, job % r);
                let (spec, params, schedule) = setups[c].as_ref().map_err(|e| Error::InvalidParams(e.to_string()))?;
                let schedule = TrainSchedule {
                    replica: traj as u64,
                    ..*schedule
                };
                let report = train(spec, params, &self.dataset, &schedule)?;
                Ok((tail_mean(&report.losses(), schedule.steady_window), report.ledger.work))
            })
            .collect();

        cells
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let chunk = &runs[c * r..(c + 1) * r];
                let (ok, failed): (Vec<_>, Vec<_>) = chunk.iter().partition(|x| x.is_ok());
                if let Some(Err(e)) = failed.first() {
                    log::warn!("k={} gamma={} T={} N_s={}: {} of {r} replicas failed ({e})", cell.k, cell.gamma, cell.temperature, cell.sticks, failed.len());
                }
                let losses: Vec<f64> = ok.iter().map(|x| x.as_ref().expect("partitioned").0).collect();
                let works: Vec<f64> = ok.iter().map(|x| x.as_ref().expect("partitioned").1).collect();
                let params = self.params_for(cell);
                let estimate = if works.is_empty() {
                    None
                } else {
                    FreeEnergyEstimate::from_works(&works, params.thermal_energy(), cell.bootstrap_seed(self.seed))
                        .inspect_err(|e| log::warn!("k={}: {e}", cell.k))
                        .ok()
                };
                PointResult {
                    cell: *cell,
                    mass: params.mass,
                    loss_mean: if losses.is_empty() { f64::NAN } else { mean(&losses) },
                    loss_std: if losses.len() < 2 { f64::NAN } else { std_dev(&losses) },
                    n_ok: losses.len(),
                    n_failed: failed.len(),
                    estimate,
                }
            })
            .collect()
    }
}

/// Flat region at the small-`k` end of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    /// Median `|deltaF|` over the region.
    pub delta_f_min: f64,
    pub lo: f64,
    pub hi: f64,
    /// Number of sweep points in the region.
    pub points: usize,
    pub found: bool,
}

/// Grows a region from the smallest `k` while the fitted slope of
/// `ln|deltaF|` against `log10 k` stays below `max_rel_slope` in magnitude.
/// Without a flat pair at the bottom, reports the smallest-`k` value and
/// `found = false`.
pub fn extract_plateau(points: &[PointResult], max_rel_slope: f64) -> Plateau {
    let mut pts: Vec<(f64, (f64, f64, f64))> = points
        .iter()
        .filter_map(|p| p.magnitude().filter(|m| m.0 > 0.0).map(|m| (p.cell.k, m)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(_, first)) = pts.first() else {
        return Plateau {
            delta_f_min: f64::NAN,
            lo: f64::NAN,
            hi: f64::NAN,
            points: 0,
            found: false,
        };
    };
    let x: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect();
    let y: Vec<f64> = pts.iter().map(|p| (p.1).0.ln()).collect();
    let mut len = 1;
    while len < pts.len() && linear_fit(&x[..=len], &y[..=len]).slope.abs() < max_rel_slope {
        len += 1;
    }
    if len < 2 {
        return Plateau {
            delta_f_min: first.0,
            lo: first.1,
            hi: first.2,
            points: 1,
            found: false,
        };
    }
    let region = &pts[..len];
    let pick = |f: fn(&(f64, f64, f64)) -> f64| median(&region.iter().map(|p| f(&p.1)).collect::<Vec<_>>());
    Plateau {
        delta_f_min: pick(|m| m.0),
        lo: pick(|m| m.1),
        hi: pick(|m| m.2),
        points: len,
        found: true,
    }
}

/// True when no later value sits below any earlier one by more than their
/// combined half-widths.
pub fn monotone_within(values: &[f64], half_widths: &[f64]) -> bool {
    (0..values.len()).all(|i| (i + 1..values.len()).all(|j| values[j] + half_widths[j] >= values[i] - half_widths[i]))
}

/// Slope of `ln|deltaF|` against `log10 k` over points with `k <= k_max`.
pub fn bottom_slope(points: &[PointResult], k_max: f64) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.cell.k <= k_max)
        .filter_map(|p| p.magnitude().filter(|m| m.0 > 0.0).map(|m| (p.cell.k.log10(), m.0.ln())))
        .unzip();
    if x.len() < 2 {
        return f64::NAN;
    }
    linear_fit(&x, &y).slope
}

fn sweep_data_defaults() -> DataDefaults {
    DataDefaults {
        function: FunctionId::Cos,
        domain: vec![(0.0, std::f64::consts::TAU)],
        n_points: 20,
        noise_sigma: 0.0,
    }
}

fn bath_from(cfg: &Config, gamma: f64, temperature: f64) -> Result<(f64, f64)> {
    Ok((
        cfg.get_non_negative("physics.friction", gamma)?,
        cfg.get_positive("physics.temperature", temperature)?,
    ))
}

struct Common {
    protocol: SweepProtocol,
    k: Vec<f64>,
    max_rel_slope: f64,
}

fn common_from(
    cfg: &Config,
    seed: u64,
    schedule: TrainSchedule,
    k_axis: Axis,
    batch_per_node: Option<usize>,
) -> Result<Common> {
    let (dataset, domain) = dataset_from(cfg, &sweep_data_defaults(), seed)?;
    let domain = cfg.get_intervals("lattice.domain", &domain)?;
    let schedule = schedule_from(cfg, schedule, seed)?;
    let batch_per_node = match batch_per_node {
        Some(b) => Some(cfg.get_count("sweep.batch_per_node", b)?),
        None => cfg.get_opt::<usize>("sweep.batch_per_node")?,
    };
    let k = cfg.get_axis("sweep.k", k_axis)?;
    if k.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::config("sweep.k", "stiffness values must be positive"));
    }
    Ok(Common {
        protocol: SweepProtocol {
            dataset,
            domain,
            boltzmann: boltzmann_from(cfg, 1.0)?,
            mass_ratio: cfg.get_positive("sweep.mass_ratio", 1.0)?,
            schedule,
            batch_per_node,
            n_trajectories: cfg.get_count("sweep.n_trajectories", 256)?,
            seed,
        },
        k,
        max_rel_slope: cfg.get_positive("sweep.max_rel_slope", DEFAULT_MAX_REL_SLOPE)?,
    })
}

/// `ss scale-sweep`.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub protocol: SweepProtocol,
    pub cells: Vec<Cell>,
    pub max_rel_slope: f64,
}

impl SweepSetup {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let schedule = TrainSchedule {
            epochs: 400,
            batch_size: 4,
            dt_epoch: 0.1,
            inner_steps: 10,
            steady_window: 100,
            ..TrainSchedule::default()
        };
        let c = common_from(cfg, seed, schedule, Axis::Log { lo: 1e-3, hi: 1e2, n: 16 }, None)?;
        let (gamma, temperature) = bath_from(cfg, 0.1, 100.0)?;
        let sticks = cfg.get_count("lattice.sticks", 1)?;
        let cells: Vec<Cell> = c
            .k
            .iter()
            .map(|&k| Cell {
                sticks,
                k,
                gamma,
                temperature,
            })
            .collect();
        c.protocol.validate(&cells)?;
        Ok(Self {
            protocol: c.protocol,
            cells,
            max_rel_slope: c.max_rel_slope,
        })
    }

    pub fn run(&self) -> SweepOutcome {
        let mut points = self.protocol.run(&self.cells);
        points.sort_by(|a, b| a.cell.k.total_cmp(&b.cell.k));
        let plateau = extract_plateau(&points, self.max_rel_slope);
        SweepOutcome { points, plateau }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Sorted by `k`.
    pub points: Vec<PointResult>,
    pub plateau: Plateau,
}

impl SweepOutcome {
    /// Slope of `ln|deltaF|` per decade over the lowest two decades of `k`.
    pub fn bottom_two_decade_slope(&self) -> f64 {
        let k0 = self.points.first().map_or(f64::NAN, |p| p.cell.k);
        bottom_slope(&self.points, k0 * 100.0 * (1.0 + 1e-9))
    }

    /// Mean loss at the smallest `k` over mean loss at the largest.
    pub fn loss_ratio(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => a.loss_mean / b.loss_mean,
            _ => f64::NAN,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{POINT_HEADER}\n");
        for p in &self.points {
            let _ = writeln!(out, "{}", point_row(p));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "bottom_slope,loss_ratio,deltaF_min,deltaF_min_lo,deltaF_min_hi,plateau_points,plateau_found\n{},{},{},{},{},{},{}\n",
            fmt_f64(self.bottom_two_decade_slope()),
            fmt_f64(self.loss_ratio()),
            fmt_f64(self.plateau.delta_f_min),
            fmt_f64(self.plateau.lo),
            fmt_f64(self.plateau.hi),
            self.plateau.points,
            self.plateau.found
        )
    }

    pub fn write(&self, out: &mut Outputs) -> Result<()> {
        out.write("scale_sweep.csv", &self.to_csv())?;
        out.write("scale_sweep_summary.csv", &self.summary_csv())
    }
}

fn barrier_protocol_schedule() -> TrainSchedule {
    TrainSchedule {
        epochs: 40,
        batch_size: 4,
        dt_epoch: 1.0,
        inner_steps: 100,
        steady_window: 10,
        ..TrainSchedule::default()
    }
}

fn plateau_row(p: &Plateau) -> String {
    format!(
        "{},{},{},{},{}",
        fmt_f64(p.delta_f_min),
        fmt_f64(p.lo),
        fmt_f64(p.hi),
        p.points,
        p.found
    )
}

const PLATEAU_HEADER: &str = "deltaF_min,deltaF_min_lo,deltaF_min_hi,plateau_points,plateau_found";

/// `ss tlb-expressivity`: one sweep per stick count.
#[derive(Debug, Clone)]
pub struct ExpressivitySetup {
    pub protocol: SweepProtocol,
    pub sticks: Vec<usize>,
    pub k: Vec<f64>,
    pub gamma: f64,
    pub temperature: f64,
    pub max_rel_slope: f64,
}

impl ExpressivitySetup {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let c = common_from(cfg, seed, barrier_protocol_schedule(), Axis::Log { lo: 1e-7, hi: 1e-4, n: 7 }, Some(2))?;
        let (gamma, temperature) = bath_from(cfg, 1.0, 1.0)?;
        let sticks: Vec<usize> = cfg.get_list("sweep.sticks", &[1, 2, 4, 8])?;
        if sticks.is_empty() || sticks.contains(&0) {
            return Err(Error::config("sweep.sticks", "stick counts must be >= 1"));
        }
        let setup = Self {
            protocol: c.protocol,
            sticks,
            k: c.k,
            gamma,
            temperature,
            max_rel_slope: c.max_rel_slope,
        };
        setup.protocol.validate(&setup.cells())?;
        Ok(setup)
    }

    fn cells(&self) -> Vec<Cell> {
        self.sticks
            .iter()
            .flat_map(|&sticks| {
                self.k.iter().map(move |&k| Cell {
                    sticks,
                    k,
                    gamma: self.gamma,
                    temperature: self.temperature,
                })
            })
            .collect()
    }

    pub fn run(&self) -> ExpressivityOutcome {
        let points = self.protocol.run(&self.cells());
        let mut rows: Vec<(usize, Vec<PointResult>, Plateau)> = self
            .sticks
            .iter()
            .enumerate()
            .map(|(i, &ns)| {
                let mut sweep = points[i * self.k.len()..(i + 1) * self.k.len()].to_vec();
                sweep.sort_by(|a, b| a.cell.k.total_cmp(&b.cell.k));
                let plateau = extract_plateau(&sweep, self.max_rel_slope);
                (ns, sweep, plateau)
            })
            .collect();
        rows.sort_by_key(|r| r.0);
        ExpressivityOutcome { rows }
    }
}

#[derive(Debug, Clone)]
pub struct ExpressivityOutcome {
    /// `(N_s, sweep sorted by k, plateau)`, sorted by `N_s`.
    pub rows: Vec<(usize, Vec<PointResult>, Plateau)>,
}

impl ExpressivityOutcome {
    pub fn barriers(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.2.delta_f_min).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.rows.iter().map(|r| 0.5 * (r.2.hi - r.2.lo)).collect()
    }

    /// Log-log fit of `deltaF_min` against `N_s`.
    pub fn exponent_fit(&self) -> LineFit {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|r| r.2.delta_f_min > 0.0)
            .map(|r| ((r.0 as f64).ln(), r.2.delta_f_min.ln()))
            .unzip();
        linear_fit(&x, &y)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("N_s,{PLATEAU_HEADER}\n");
        for (ns, _, p) in &self.rows {
            let _ = writeln!(out, "{ns},{}", plateau_row(p));
        }
        out
    }

    pub fn sweeps_csv(&self) -> String {
        let mut out = format!("N_s,{POINT_HEADER}\n");
        for (ns, sweep, _) in &self.rows {
            for p in sweep {
                let _ = writeln!(out, "{ns},{}", point_row(p));
            }
        }
        out
    }

    pub fn write(&self, out: &mut Outputs) -> Result<()> {
        let fit = self.exponent_fit();
        out.write("tlb_expressivity.csv", &self.to_csv())?;
        out.write("tlb_expressivity_sweeps.csv", &self.sweeps_csv())?;
        out.write(
            "tlb_expressivity_fit.csv",
            &format!(
                "exponent,exponent_stderr,r_squared,monotone\n{},{},{},{}\n",
                fmt_f64(fit.slope),
                fmt_f64(fit.slope_stderr),
                fmt_f64(fit.r_squared),
                monotone_within(&self.barriers(), &self.half_widths())
            ),
        )
    }
}

/// `ss tlb-heatmap`: one sweep per `(gamma, T)` cell.
#[derive(Debug, Clone)]
pub struct HeatmapSetup {
    pub protocol: SweepProtocol,
    pub sticks: usize,
    pub k: Vec<f64>,
    pub gammas: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub max_rel_slope: f64,
}

impl HeatmapSetup {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<Self> {
        let c = common_from(cfg, seed, barrier_protocol_schedule(), Axis::Log { lo: 1e-8, hi: 1e-5, n: 4 }, None)?;
        let gammas = cfg.get_axis("sweep.gamma", Axis::Log { lo: 0.01, hi: 0.3, n: 6 })?;
        let temperatures = cfg.get_axis("sweep.temperature", Axis::Log { lo: 0.01, hi: 10.0, n: 6 })?;
        let setup = Self {
            protocol: c.protocol,
            sticks: cfg.get_count("lattice.sticks", 1)?,
            k: c.k,
            gammas,
            temperatures,
            max_rel_slope: c.max_rel_slope,
        };
        setup.protocol.validate(&setup.cells())?;
        Ok(setup)
    }

    fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &gamma in &self.gammas {
            for &temperature in &self.temperatures {
                for &k in &self.k {
                    cells.push(Cell {
                        sticks: self.sticks,
                        k,
                        gamma,
                        temperature,
                    });
                }
            }
        }
        cells
    }

    pub fn run(&self) -> HeatmapOutcome {
        let points = self.protocol.run(&self.cells());
        let mut cells: Vec<HeatmapCell> = points
            .chunks(self.k.len())
            .map(|chunk| {
                let mut sweep = chunk.to_vec();
                sweep.sort_by(|a, b| a.cell.k.total_cmp(&b.cell.k));
                HeatmapCell {
                    gamma: chunk[0].cell.gamma,
                    temperature: chunk[0].cell.temperature,
                    plateau: extract_plateau(&sweep, self.max_rel_slope),
                    sweep,
                }
            })
            .collect();
        cells.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.temperature.total_cmp(&b.temperature)));
        let mut gammas = self.gammas.clone();
        let mut temperatures = self.temperatures.clone();
        gammas.sort_by(f64::total_cmp);
        temperatures.sort_by(f64::total_cmp);
        HeatmapOutcome {
            gammas,
            temperatures,
            boltzmann: self.protocol.boltzmann,
            cells,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeatmapCell {
    pub gamma: f64,
    pub temperature: f64,
    pub sweep: Vec<PointResult>,
    pub plateau: Plateau,
}

#[derive(Debug, Clone)]
pub struct HeatmapOutcome {
    pub gammas: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub boltzmann: f64,
    /// Sorted by `gamma`, then `T`.
    pub cells: Vec<HeatmapCell>,
}

impl HeatmapOutcome {
    pub fn cell(&self, gamma_index: usize, temperature_index: usize) -> &HeatmapCell {
        &self.cells[gamma_index * self.temperatures.len() + temperature_index]
    }

    /// Monotone in `T` along every row and in `gamma` along every column,
    /// within the bootstrap bands. Returns `(in_temperature, in_gamma)`.
    pub fn monotone(&self) -> (bool, bool) {
        let line = |cells: Vec<&HeatmapCell>| {
            let v: Vec<f64> = cells.iter().map(|c| c.plateau.delta_f_min).collect();
            let h: Vec<f64> = cells.iter().map(|c| 0.5 * (c.plateau.hi - c.plateau.lo)).collect();
            monotone_within(&v, &h)
        };
        let (ng, nt) = (self.gammas.len(), self.temperatures.len());
        let in_t = (0..ng).all(|g| line((0..nt).map(|t| self.cell(g, t)).collect()));
        let in_g = (0..nt).all(|t| line((0..ng).map(|g| self.cell(g, t)).collect()));
        (in_t, in_g)
    }

    /// Fit of `deltaF_min` against `k_b T gamma` through the origin.
    pub fn proportionality(&self) -> (f64, f64) {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .cells
            .iter()
            .filter(|c| c.plateau.delta_f_min.is_finite())
            .map(|c| (self.boltzmann * c.temperature * c.gamma, c.plateau.delta_f_min))
            .unzip();
        fit_through_origin(&x, &y)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("gamma,T,{PLATEAU_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{}", c.gamma, c.temperature, plateau_row(&c.plateau));
        }
        out
    }

    pub fn sweeps_csv(&self) -> String {
        let mut out = format!("gamma,T,{POINT_HEADER}\n");
        for c in &self.cells {
            for p in &c.sweep {
                let _ = writeln!(out, "{},{},{}", c.gamma, c.temperature, point_row(p));
            }
        }
        out
    }

    pub fn write(&self, out: &mut Outputs) -> Result<()> {
        let (slope, r2) = self.proportionality();
        let (in_t, in_g) = self.monotone();
        out.write("tlb_heatmap.csv", &self.to_csv())?;
        out.write("tlb_heatmap_sweeps.csv", &self.sweeps_csv())?;
        out.write(
            "tlb_heatmap_fit.csv",
            &format!(
                "slope_vs_kTgamma,r_squared,monotone_T,monotone_gamma\n{},{},{in_t},{in_g}\n",
                fmt_f64(slope),
                fmt_f64(r2)
            ),
        )
    }
}
