//! First-order linear Langevin system `dz/dt = A z + b + B xi(t)` for
//! `z = (x, v)`, and its Euler-Maruyama integration.
//!
//! Noise comes from counter-based ChaCha streams keyed by `(seed, stream)`,
//! so every trajectory of an ensemble can be replayed on its own regardless
//! of how the ensemble is scheduled.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::mechanics::{MassMatrix, PhysicsParams, SpringBatch, StiffnessOperator};

pub const DEFAULT_TIME_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct LinearSde {
    drift: DMatrix<f64>,
    offset: DVector<f64>,
    diffusion: DVector<f64>,
}

impl LinearSde {
    /// General system; `diffusion` is the diagonal of `B`.
    ///
    /// The state is split in half: the first half are positions, the second
    /// half velocities.
    pub fn new(drift: DMatrix<f64>, offset: DVector<f64>, diffusion: DVector<f64>) -> Result<Self> {
        let n = drift.nrows();
        if drift.ncols() != n || offset.len() != n || diffusion.len() != n || n % 2 != 0 {
            return Err(Error::Shape(format!(
                "drift {}x{}, offset {}, diffusion {}: need a square even-sized system",
                drift.nrows(),
                drift.ncols(),
                offset.len(),
                diffusion.len()
            )));
        }
        if drift.iter().chain(offset.iter()).chain(diffusion.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("system has non-finite entries".into()));
        }
        Ok(Self {
            drift,
            offset,
            diffusion,
        })
    }

    /// Damped harmonic oscillator `m x'' = -k x - m gamma x' + noise`.
    pub fn single_dof(stiffness: f64, mass: f64, friction: f64, thermal_energy: f64) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::InvalidParams("mass must be positive".into()));
        }
        let drift = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -stiffness / mass, -friction]);
        let sigma = (2.0 * friction * thermal_energy / mass).sqrt();
        Self::new(drift, DVector::zeros(2), DVector::from_vec(vec![0.0, sigma]))
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    /// Number of position (equivalently velocity) coordinates.
    pub fn half(&self) -> usize {
        self.drift.nrows() / 2
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.drift
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn diffusion(&self) -> &DVector<f64> {
        &self.diffusion
    }

    /// One Euler-Maruyama step: `z + (A z + b) dt + B sqrt(dt) noise`.
    pub fn em_step(&self, z: &DVector<f64>, dt: f64, noise: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = z.clone();
        let mut scratch = DVector::zeros(z.len());
        self.em_step_in_place(&mut out, dt, noise, &mut scratch)?;
        Ok(out)
    }

    pub(crate) fn em_step_in_place(
        &self,
        z: &mut DVector<f64>,
        dt: f64,
        noise: &DVector<f64>,
        scratch: &mut DVector<f64>,
    ) -> Result<()> {
        scratch.copy_from(&self.offset);
        scratch.gemv(1.0, &self.drift, z, 1.0);
        let sqrt_dt = dt.sqrt();
        let mut finite = true;
        for i in 0..z.len() {
            z[i] += scratch[i] * dt + self.diffusion[i] * sqrt_dt * noise[i];
            finite &= z[i].is_finite();
        }
        if finite {
            Ok(())
        } else {
            Err(Error::Blowup { step: 0, time: 0.0 })
        }
    }
}

/// Builds `dx/dt = v`, `dv/dt = M^-1 (-K x + c) - gamma v` with velocity noise
/// `sigma = sqrt(2 gamma T k_b / M)`.
///
/// State ordering is node-major within each half, matching [`crate::lattice::GridState`].
/// `batch = None` means no springs are attached.
pub fn assemble_sde(
    spec: &LatticeSpec,
    params: &PhysicsParams,
    batch: Option<&SpringBatch>,
    mass: &MassMatrix,
) -> Result<LinearSde> {
    params.validate()?;
    let stiffness = batch.map(|b| StiffnessOperator::assemble(spec, params, b));
    assemble_from_operator(spec, params, stiffness.as_ref(), mass)
}

pub fn assemble_from_operator(
    spec: &LatticeSpec,
    params: &PhysicsParams,
    stiffness: Option<&StiffnessOperator>,
    mass: &MassMatrix,
) -> Result<LinearSde> {
    let nodes = spec.node_count();
    let m = spec.output_dim();
    if mass.dim() != nodes {
        return Err(Error::Shape("mass matrix does not match lattice".into()));
    }
    let n = nodes * m;
    let mut drift = DMatrix::zeros(2 * n, 2 * n);
    let mut offset = DVector::zeros(2 * n);
    for i in 0..n {
        drift[(i, n + i)] = 1.0;
        drift[(n + i, n + i)] = -params.friction;
    }
    if let Some(op) = stiffness {
        let h = mass.solve(&op.matrix);
        let c = DMatrix::from_row_slice(nodes, m, &op.offset);
        let g = mass.solve(&c);
        for a in 0..nodes {
            for b in 0..nodes {
                let hab = h[(a, b)];
                if hab != 0.0 {
                    for p in 0..m {
                        drift[(n + a * m + p, b * m + p)] = -hab;
                    }
                }
            }
            for p in 0..m {
                offset[n + a * m + p] = g[(a, p)];
            }
        }
    }
    let sigma = params.noise_amplitude();
    let mut diffusion = DVector::zeros(2 * n);
    for i in n..2 * n {
        diffusion[i] = sigma;
    }
    if !sigma.is_finite() {
        return Err(Error::InvalidParams("noise amplitude is not finite".into()));
    }
    LinearSde::new(drift, offset, diffusion)
}

/// Seeded Gaussian stream. Draws one standard normal per row with nonzero
/// diffusion, in row order; other rows get zero.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn fill(&mut self, diffusion: &DVector<f64>, noise: &mut DVector<f64>) {
        for (n, &b) in noise.iter_mut().zip(diffusion.iter()) {
            *n = if b != 0.0 {
                StandardNormal.sample(&mut self.rng)
            } else {
                0.0
            };
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeRun {
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub record_every: usize,
}

impl SdeRun {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParams(format!("time step must be positive, got {}", self.dt)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParams("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait Observer {
    fn observe(&mut self, step: usize, time: f64, z: &DVector<f64>);
}

impl<F: FnMut(usize, f64, &DVector<f64>)> Observer for F {
    fn observe(&mut self, step: usize, time: f64, z: &DVector<f64>) {
        self(step, time, z)
    }
}

/// Recorded `(time, state)` samples, starting with the initial state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl TrajectoryLog {
    pub fn last(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }
}

/// Integrates on the `(run.seed, 0)` noise stream.
pub fn integrate(sde: &LinearSde, z0: &DVector<f64>, run: &SdeRun, observers: &mut [&mut dyn Observer]) -> Result<TrajectoryLog> {
    let mut noise = NoiseStream::new(run.seed, 0);
    integrate_with(sde, z0, run, &mut noise, observers)
}

pub fn integrate_with(
    sde: &LinearSde,
    z0: &DVector<f64>,
    run: &SdeRun,
    noise: &mut NoiseStream,
    observers: &mut [&mut dyn Observer],
) -> Result<TrajectoryLog> {
    run.validate()?;
    if z0.len() != sde.dim() {
        return Err(Error::Shape(format!("state has {} entries, system {}", z0.len(), sde.dim())));
    }
    let mut log = TrajectoryLog::default();
    let mut z = z0.clone();
    let mut xi = DVector::zeros(z.len());
    let mut scratch = DVector::zeros(z.len());
    let record = |step: usize, z: &DVector<f64>, log: &mut TrajectoryLog, observers: &mut [&mut dyn Observer]| {
        let t = step as f64 * run.dt;
        log.times.push(t);
        log.states.push(z.clone());
        for o in observers.iter_mut() {
            o.observe(step, t, z);
        }
    };
    record(0, &z, &mut log, observers);
    for step in 1..=run.n_steps {
        noise.fill(&sde.diffusion, &mut xi);
        sde.em_step_in_place(&mut z, run.dt, &xi, &mut scratch)
            .map_err(|_| Error::Blowup {
                step,
                time: step as f64 * run.dt,
            })?;
        if step % run.record_every == 0 {
            record(step, &z, &mut log, observers);
        }
    }
    Ok(log)
}

/// Runs `n_trajectories` independent paths; trajectory `i` uses noise stream `i`.
/// Results are ordered by trajectory index.
pub fn sample_paths(sde: &LinearSde, z0: &DVector<f64>, run: &SdeRun, n_trajectories: usize) -> Result<Vec<TrajectoryLog>> {
    (0..n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut noise = NoiseStream::new(run.seed, i as u64);
            integrate_with(sde, z0, run, &mut noise, &mut [])
        })
        .collect()
}

/// Per-sample energy bookkeeping, written as `t,K,U,E_total,W_acc`.
#[derive(Debug, Clone)]
pub struct EnergyObserver<'a> {
    mass: &'a MassMatrix,
    stiffness: Option<&'a StiffnessOperator>,
    outputs: usize,
    /// Accumulated protocol work reported alongside each sample.
    pub work: f64,
    pub rows: Vec<EnergyRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub time: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub work: f64,
}

impl EnergyRow {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential
    }
}

impl<'a> EnergyObserver<'a> {
    pub fn new(mass: &'a MassMatrix, stiffness: Option<&'a StiffnessOperator>, outputs: usize) -> Self {
        Self {
            mass,
            stiffness,
            outputs,
            work: 0.0,
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,K,U,E_total,W_acc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.time, r.kinetic, r.potential, r.total(), r.work);
        }
        out
    }
}

impl Observer for EnergyObserver<'_> {
    fn observe(&mut self, _step: usize, time: f64, z: &DVector<f64>) {
        let n = z.len() / 2;
        let (x, v) = (&z.as_slice()[..n], &z.as_slice()[n..]);
        let kinetic = self.mass.kinetic_energy(v, self.outputs);
        let potential = self.stiffness.map_or(0.0, |op| op.energy(x));
        self.rows.push(EnergyRow {
            time,
            kinetic,
            potential,
            work: self.work,
        });
    }
}

/// Long-format CSV of several trajectories: `traj_id,t,K,U,E_total,W_acc`.
pub fn energy_logs_to_csv(logs: &[Vec<EnergyRow>]) -> String {
    let mut out = String::from("traj_id,t,K,U,E_total,W_acc\n");
    for (id, rows) in logs.iter().enumerate() {
        for r in rows {
            let _ = writeln!(out, "{id},{},{},{},{},{}", r.time, r.kinetic, r.potential, r.total(), r.work);
        }
    }
    out
}
