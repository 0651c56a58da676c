//! Protocol work, Jarzynski free-energy estimates, and exact entropy
//! production for the linear Langevin system via its Gaussian moments.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::langevin::LinearSde;
use crate::lattice::{GridState, LatticeSpec};
use crate::mechanics::{potential_energy, MassMatrix, PhysicsParams, SpringBatch, StiffnessOperator};

/// Work done on one trajectory by switching the spring potential.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WorkLedger {
    pub work: f64,
    pub n_switches: usize,
}

impl WorkLedger {
    /// Adds `U(x; new) - U(x; old)` at the current configuration. `old = None`
    /// is the spring-free potential, i.e. the initial attachment.
    pub fn record_switch(
        &mut self,
        spec: &LatticeSpec,
        state: &GridState,
        old: Option<&SpringBatch>,
        new: &SpringBatch,
        params: &PhysicsParams,
    ) -> Result<f64> {
        let before = match old {
            Some(b) => potential_energy(spec, state, params, b)?,
            None => 0.0,
        };
        let after = potential_energy(spec, state, params, new)?;
        let delta = after - before;
        self.add(delta);
        Ok(delta)
    }

    pub fn add(&mut self, delta: f64) {
        self.work += delta;
        self.n_switches += 1;
    }
}

fn log_mean_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + (sum / v.len() as f64).ln()
}

/// `Delta F = F_i - F_f = k_b T ln <exp(-W / k_b T)>`, by log-sum-exp.
pub fn jarzynski_free_energy(works: &[f64], thermal_energy: f64) -> Result<f64> {
    if works.is_empty() {
        return Err(Error::EstimatorUndefined("no trajectories".into()));
    }
    if !(thermal_energy > 0.0) {
        return Err(Error::EstimatorUndefined("temperature must be positive".into()));
    }
    if works.iter().any(|w| !w.is_finite()) {
        return Err(Error::EstimatorUndefined("non-finite work value".into()));
    }
    Ok(thermal_energy * log_mean_exp(works.iter().map(|w| -w / thermal_energy)))
}

/// Percentile bootstrap interval of the Jarzynski estimate.
pub fn bootstrap_interval(works: &[f64], thermal_energy: f64, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    jarzynski_free_energy(works, thermal_energy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = works.len();
    let mut draws = Vec::with_capacity(resamples);
    let mut sample = vec![0.0; n];
    for _ in 0..resamples.max(1) {
        for s in sample.iter_mut() {
            *s = works[rng.random_range(0..n)];
        }
        draws.push(jarzynski_free_energy(&sample, thermal_energy)?);
    }
    draws.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&draws, tail), quantile_sorted(&draws, 1.0 - tail)))
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Jarzynski summary over an ensemble of trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergyEstimate {
    pub n_traj: usize,
    pub mean_work: f64,
    pub delta_f: f64,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

impl FreeEnergyEstimate {
    pub const BOOTSTRAP_RESAMPLES: usize = 1000;

    pub fn from_works(works: &[f64], thermal_energy: f64, seed: u64) -> Result<Self> {
        let delta_f = jarzynski_free_energy(works, thermal_energy)?;
        let (lo, hi) = bootstrap_interval(works, thermal_energy, Self::BOOTSTRAP_RESAMPLES, 0.95, seed)?;
        Ok(Self {
            n_traj: works.len(),
            mean_work: works.iter().sum::<f64>() / works.len() as f64,
            delta_f,
            lo,
            hi,
            seed,
        })
    }

    /// Half-width of the 95% band, used as a 2-sigma proxy.
    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

impl fmt::Display for FreeEnergyEstimate {
    /// `n_traj,mean_W,deltaF,deltaF_boot_lo,deltaF_boot_hi,seed` header plus one row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_traj,mean_W,deltaF,deltaF_boot_lo,deltaF_boot_hi,seed")?;
        writeln!(
            f,
            "{},{},{},{},{},{}",
            self.n_traj, self.mean_work, self.delta_f, self.lo, self.hi, self.seed
        )
    }
}

/// Mean and covariance of the Gaussian state of a linear SDE.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape("covariance does not match mean".into()));
        }
        let scale = cov.abs().max().max(1.0);
        if (&cov - cov.transpose()).abs().max() > 1e-10 * scale {
            return Err(Error::Shape("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and (unbiased) covariance of an ensemble of states.
    pub fn from_samples(samples: &[DVector<f64>]) -> Self {
        let n = samples[0].len();
        let count = samples.len() as f64;
        let mut mean = DVector::zeros(n);
        for s in samples {
            mean += s;
        }
        mean /= count;
        let mut cov = DMatrix::zeros(n, n);
        for s in samples {
            let d = s - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= (count - 1.0).max(1.0);
        Self { mean, cov }
    }

    /// Gaussian differential entropy `1/2 ln det(2 pi e Theta)`.
    pub fn gaussian_entropy(&self) -> Result<f64> {
        let n = self.mean.len() as f64;
        let chol = Cholesky::new(self.cov.clone()).ok_or_else(|| Error::SingularBlock("covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(0.5 * log_det + 0.5 * n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
    }

    /// `<U>` for a quadratic spring potential: `U(mean) + 1/2 tr(K Theta_xx)` per output.
    pub fn mean_potential(&self, op: &StiffnessOperator, outputs: usize) -> f64 {
        let half = self.mean.len() / 2;
        let x: Vec<f64> = self.mean.rows(0, half).iter().copied().collect();
        let nodes = half / outputs;
        let mut trace = 0.0;
        for a in 0..nodes {
            for b in 0..nodes {
                for p in 0..outputs {
                    trace += op.matrix[(a, b)] * self.cov[(b * outputs + p, a * outputs + p)];
                }
            }
        }
        op.energy(&x) + 0.5 * trace
    }

    /// `<K> = 1/2 mean_v^T M mean_v + 1/2 tr(M Theta_vv)` per output.
    pub fn mean_kinetic(&self, mass: &MassMatrix, outputs: usize) -> f64 {
        let half = self.mean.len() / 2;
        let v: Vec<f64> = self.mean.rows(half, half).iter().copied().collect();
        let nodes = half / outputs;
        let m = mass.matrix();
        let mut trace = 0.0;
        for a in 0..nodes {
            for b in 0..nodes {
                for p in 0..outputs {
                    trace += m[(a, b)] * self.cov[(half + b * outputs + p, half + a * outputs + p)];
                }
            }
        }
        mass.kinetic_energy(&v, outputs) + 0.5 * trace
    }
}

const MOMENT_OVERFLOW: f64 = 1e150;

fn moment_rhs(sde: &LinearSde, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let a = sde.drift();
    let dmean = a * mean + sde.offset();
    let a_cov = a * cov;
    let mut dcov = &a_cov + a_cov.transpose();
    for (i, b) in sde.diffusion().iter().enumerate() {
        dcov[(i, i)] += b * b;
    }
    (dmean, dcov)
}

/// One RK4 step of `d<z>/dt = A<z> + b`, `dTheta/dt = A Theta + Theta A^T + 2D`
/// with `D = B B^T / 2`.
pub fn propagate_moments(sde: &LinearSde, moments: &MomentState, dt: f64) -> Result<MomentState> {
    let (m0, c0) = (&moments.mean, &moments.cov);
    let (k1m, k1c) = moment_rhs(sde, m0, c0);
    let (k2m, k2c) = moment_rhs(sde, &(m0 + &k1m * (dt / 2.0)), &(c0 + &k1c * (dt / 2.0)));
    let (k3m, k3c) = moment_rhs(sde, &(m0 + &k2m * (dt / 2.0)), &(c0 + &k2c * (dt / 2.0)));
    let (k4m, k4c) = moment_rhs(sde, &(m0 + &k3m * dt), &(c0 + &k3c * dt));
    let mean = m0 + (k1m + &k2m * 2.0 + &k3m * 2.0 + k4m) * (dt / 6.0);
    let cov = c0 + (k1c + &k2c * 2.0 + &k3c * 2.0 + k4c) * (dt / 6.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite() || v.abs() > MOMENT_OVERFLOW) {
        return Err(Error::Blowup { step: 0, time: dt });
    }
    Ok(MomentState { mean, cov })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyRates {
    /// Entropy production rate, in units of `k_b` per time.
    pub production: f64,
    /// Entropy flux out of the system.
    pub flux: f64,
}

impl EntropyRates {
    /// `dS/dt = production - flux`.
    pub fn entropy_change(&self) -> f64 {
        self.production - self.flux
    }
}

/// Entropy production and flux of the Gaussian state.
///
/// The time-reversal-even part of the drift is the position-position and
/// velocity-velocity blocks of `A` (here `Diag(0, -gamma I)`), and `b^q` is the
/// position part of `b`. `D` only has support on the velocity rows, so `D^-1`
/// and `Theta^-1` are used on that block:
///
/// ```text
/// Pi  = tr(D (Theta^-1)_vv + A^q) + tr(A^qT D^-1 A^q Theta_vv + A^q)
///       + (A^q <v> - b^q)^T D^-1 (A^q <v> - b^q)
/// Phi = Pi - tr(D (Theta^-1)_vv + A^q)
/// ```
///
/// With this sign convention `Pi - Phi` equals `d/dt (1/2 ln det Theta)`.
pub fn entropy_rates(sde: &LinearSde, moments: &MomentState) -> Result<EntropyRates> {
    let n = sde.half();
    let a = sde.drift();
    let diff = sde.diffusion();
    if diff.rows(0, n).iter().any(|&b| b != 0.0) {
        return Err(Error::SingularBlock("noise on position rows is not supported".into()));
    }
    if a.view((0, 0), (n, n)).iter().any(|&v| v != 0.0) || sde.offset().rows(0, n).iter().any(|&v| v != 0.0) {
        return Err(Error::SingularBlock("position drift must be dx/dt = v".into()));
    }
    let d_v: Vec<f64> = diff.rows(n, n).iter().map(|b| 0.5 * b * b).collect();
    if d_v.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::SingularBlock(
            "diffusion vanishes on a velocity row (needs T > 0 and gamma > 0)".into(),
        ));
    }
    let theta_inv = Cholesky::new(moments.cov.clone())
        .ok_or_else(|| Error::SingularBlock("covariance is not positive definite".into()))?
        .inverse();
    let q = a.view((n, n), (n, n)).into_owned();
    let theta_vv = moments.cov.view((n, n), (n, n));
    let mean_v = moments.mean.rows(n, n);

    let trace_q: f64 = q.trace();
    let d_theta_inv: f64 = (0..n).map(|i| d_v[i] * theta_inv[(n + i, n + i)]).sum();
    // tr(q^T D^-1 q Theta_vv)
    let mut quad = 0.0;
    let dinv_q = DMatrix::from_fn(n, n, |i, j| q[(i, j)] / d_v[i]);
    let qt_dinv_q = q.transpose() * dinv_q;
    for i in 0..n {
        for j in 0..n {
            quad += qt_dinv_q[(i, j)] * theta_vv[(j, i)];
        }
    }
    let drift_mean = &q * mean_v;
    let mean_term: f64 = drift_mean.iter().zip(&d_v).map(|(r, d)| r * r / d).sum();

    let reversible_part = d_theta_inv + trace_q;
    let flux = quad + trace_q + mean_term;
    Ok(EntropyRates {
        production: reversible_part + flux,
        flux,
    })
}
