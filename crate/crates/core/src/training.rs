//! Datasets, mini-batch scheduling and the training loop, in which the
//! lattice learns by dissipating the energy stored in its springs.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::langevin::{assemble_from_operator, NoiseStream};
use crate::lattice::{CellCoords, GridState, LatticeSpec, NodeWeights};
use crate::mechanics::{assemble_mass, PhysicsParams, SpringBatch, StiffnessOperator};
use crate::thermo::WorkLedger;

// Stream ids under one experiment seed.
const BATCH_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const INIT_STREAM_BASE: u64 = 1 << 32;
const NOISE_STREAM_BASE: u64 = 2 << 32;

/// Registry of target functions. One-dimensional functions act on `u_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionId {
    Zero,
    Linear,
    Cos,
    Sin,
    Square,
    Exp,
    /// `x^2 + x y^2`
    QuadraticXy2,
    /// `sin(pi x) cos(pi y)`
    SinCos,
    /// `exp(-((x - 1/2)^2 + (y - 1/2)^2) / 0.1)`
    GaussBump,
}

impl FunctionId {
    pub const ALL: [FunctionId; 9] = [
        FunctionId::Zero,
        FunctionId::Linear,
        FunctionId::Cos,
        FunctionId::Sin,
        FunctionId::Square,
        FunctionId::Exp,
        FunctionId::QuadraticXy2,
        FunctionId::SinCos,
        FunctionId::GaussBump,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionId::Zero => "zero",
            FunctionId::Linear => "linear_x",
            FunctionId::Cos => "cos_x",
            FunctionId::Sin => "sin_x",
            FunctionId::Square => "square_x",
            FunctionId::Exp => "exp_x",
            FunctionId::QuadraticXy2 => "quadratic_xy2",
            FunctionId::SinCos => "sin_cos_xy",
            FunctionId::GaussBump => "gauss_bump_xy",
        }
    }

    pub fn min_input_dim(self) -> usize {
        match self {
            FunctionId::QuadraticXy2 | FunctionId::SinCos | FunctionId::GaussBump => 2,
            _ => 1,
        }
    }

    pub fn eval(self, u: &[f64]) -> f64 {
        let x = u[0];
        match self {
            FunctionId::Zero => 0.0,
            FunctionId::Linear => 2.0 * x + 1.0,
            FunctionId::Cos => x.cos(),
            FunctionId::Sin => x.sin(),
            FunctionId::Square => x * x,
            FunctionId::Exp => x.exp(),
            FunctionId::QuadraticXy2 => x * x + x * u[1] * u[1],
            FunctionId::SinCos => (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * u[1]).cos(),
            FunctionId::GaussBump => (-((x - 0.5).powi(2) + (u[1] - 0.5).powi(2)) / 0.1).exp(),
        }
    }
}

impl FromStr for FunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        FunctionId::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .or(match s {
                "cos" => Some(FunctionId::Cos),
                "sin" => Some(FunctionId::Sin),
                "square" | "x2" => Some(FunctionId::Square),
                "exp" => Some(FunctionId::Exp),
                "linear" => Some(FunctionId::Linear),
                _ => None,
            })
            .ok_or_else(|| Error::UnknownFunction(s.to_string()))
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub function: FunctionId,
    /// Closed sampling interval per input axis.
    pub domain: Vec<(f64, f64)>,
    pub n_points: usize,
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domain.len() < self.function.min_input_dim() {
            return Err(Error::InvalidParams(format!(
                "{} needs {} input dimensions",
                self.function,
                self.function.min_input_dim()
            )));
        }
        if self.domain.iter().any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParams("sampling domain is empty".into()));
        }
        if self.n_points == 0 {
            return Err(Error::InvalidParams("need at least one data point".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParams("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub provenance: String,
}

/// Samples `f(u) + noise_sigma * N(0, 1)` at uniform random inputs.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let mut inputs = Vec::with_capacity(spec.n_points);
    let mut targets = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let u: Vec<f64> = spec.domain.iter().map(|&(a, b)| a + (b - a) * rng.random::<f64>()).collect();
        let eps: f64 = StandardNormal.sample(&mut rng);
        targets.push(vec![spec.function.eval(&u) + spec.noise_sigma * eps]);
        inputs.push(u);
    }
    Ok(Dataset {
        inputs,
        targets,
        provenance: format!("synthetic:{}:n={}:sigma={}:seed={seed}", spec.function, spec.n_points, spec.noise_sigma),
    })
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, provenance: impl Into<String>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Shape("dataset needs matching, non-empty inputs and targets".into()));
        }
        let (d, m) = (inputs[0].len(), targets[0].len());
        if inputs.iter().any(|u| u.len() != d) || targets.iter().any(|y| y.len() != m) {
            return Err(Error::Shape("ragged dataset".into()));
        }
        if inputs.iter().chain(&targets).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Shape("dataset contains non-finite values".into()));
        }
        Ok(Self {
            inputs,
            targets,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.targets[0].len()
    }

    /// Per-output `(min, max)` of the targets.
    pub fn target_range(&self) -> Vec<(f64, f64)> {
        (0..self.output_dim())
            .map(|p| {
                self.targets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y[p]), hi.max(y[p])))
            })
            .collect()
    }

    pub fn target_variance(&self) -> f64 {
        let m = self.output_dim();
        let n = self.len() as f64;
        (0..m)
            .map(|p| {
                let mean = self.targets.iter().map(|y| y[p]).sum::<f64>() / n;
                self.targets.iter().map(|y| (y[p] - mean).powi(2)).sum::<f64>() / n
            })
            .sum()
    }

    pub fn weights(&self, spec: &LatticeSpec) -> Result<Vec<NodeWeights>> {
        self.inputs.iter().map(|u| spec.interpolation_weights(u)).collect()
    }

    pub fn batch(&self, indices: &[usize], weights: &[NodeWeights]) -> SpringBatch {
        SpringBatch::from_parts(
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.targets[i].clone()).collect(),
            indices.iter().map(|&i| weights[i].clone()).collect(),
        )
    }

    /// CSV with header `u_1..u_d,y_1..y_m`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.input_dim())
            .map(|k| format!("u_{k}"))
            .chain((1..=self.output_dim()).map(|p| format!("y_{p}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (u, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = u.iter().chain(y).map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            file: source.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty dataset".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let d = cols.iter().filter(|c| c.starts_with("u_")).count();
        let m = cols.iter().filter(|c| c.starts_with("y_")).count();
        if d == 0 || m == 0 || d + m != cols.len() {
            return Err(err(1, format!("header must be u_1..u_d,y_1..y_m, got `{header}`")));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (i, line) in lines {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| err(i + 1, format!("bad number `{s}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != d + m {
                return Err(err(i + 1, format!("expected {} fields", d + m)));
            }
            inputs.push(vals[..d].to_vec());
            targets.push(vals[d..].to_vec());
        }
        Dataset::new(inputs, targets, format!("file:{source}"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

fn mse_with_weights(weights: &[NodeWeights], targets: &[Vec<f64>], positions: &[f64], outputs: usize) -> f64 {
    let total: f64 = weights
        .iter()
        .zip(targets)
        .map(|(w, y)| {
            let y_hat = w.apply(positions, outputs);
            y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    total / targets.len() as f64
}

/// `(1/N) sum_j sum_p (y_hat_p(u_j) - y_j^p)^2`.
pub fn mse_loss(spec: &LatticeSpec, state: &GridState, dataset: &Dataset) -> Result<f64> {
    spec.check_state(state)?;
    let weights = dataset.weights(spec)?;
    Ok(mse_with_weights(&weights, &dataset.targets, &state.positions, spec.output_dim()))
}

/// Shuffled mini-batches: every pass over the data is a fresh permutation cut
/// into batches of `batch_size` (the last batch of a pass may be shorter).
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new(n_points: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n_points {
            return Err(Error::InvalidParams(format!(
                "batch size {batch_size} must be in 1..={n_points}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Self {
            rng,
            order: (0..n_points).collect(),
            cursor: n_points,
            batch_size,
        })
    }

    pub fn batches_per_pass(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchSchedule {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Physical time evolved per epoch.
    pub dt_epoch: f64,
    /// Euler-Maruyama steps per epoch; 1 gives the coarse two-time-point epoch.
    pub inner_steps: usize,
    /// Seeds the batch sequence (the switching protocol).
    pub seed: u64,
    /// Selects the initial-condition and noise streams under `seed`.
    pub replica: u64,
    pub steady_window: usize,
    pub steady_rel_tol: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 16,
            dt_epoch: 0.1,
            inner_steps: 1,
            seed: 42,
            replica: 0,
            steady_window: 25,
            steady_rel_tol: 0.05,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParams("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_points {
            return Err(Error::InvalidParams(format!(
                "batch size {} must be in 1..={n_points}",
                self.batch_size
            )));
        }
        if !(self.dt_epoch > 0.0) || self.inner_steps == 0 {
            return Err(Error::InvalidParams("epoch duration and inner steps must be positive".into()));
        }
        if self.steady_window == 0 {
            return Err(Error::InvalidParams("steady-state window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn inner_dt(&self) -> f64 {
        self.dt_epoch / self.inner_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-dataset mean squared error after the epoch.
    pub loss: f64,
    /// Potential energy of the epoch's batch.
    pub potential: f64,
    pub kinetic: f64,
    /// Accumulated protocol work.
    pub work: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SteadyState {
    pub index: usize,
    pub reached: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub steady: SteadyState,
    pub steady_loss: f64,
    pub wall_time: f64,
    pub final_state: GridState,
    pub ledger: WorkLedger,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// `epoch,loss,U,K,W_acc`.
    pub fn to_csv(&self) -> String {
        report_csv(&self.records)
    }

    pub fn summary(&self) -> String {
        format!(
            "steady_epoch={},steady_reached={},steady_loss={},final_loss={},work={},switches={}",
            self.steady.index,
            self.steady.reached,
            self.steady_loss,
            self.final_loss(),
            self.ledger.work,
            self.ledger.n_switches
        )
    }
}

pub fn report_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,U,K,W_acc\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.loss, r.potential, r.kinetic, r.work);
    }
    out
}

/// Heights drawn uniformly over the target range, velocities zero.
pub fn random_init(spec: &LatticeSpec, dataset: &Dataset, rng: &mut impl Rng) -> GridState {
    let ranges = dataset.target_range();
    let m = spec.output_dim();
    let mut state = GridState::zeros(spec);
    for (i, x) in state.positions.iter_mut().enumerate() {
        let (lo, hi) = ranges[i % m];
        *x = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    state
}

/// Trains the lattice. Per epoch: switch to the next batch (recording the
/// switch work), evolve for `dt_epoch`, then log the full-dataset loss.
pub fn train(spec: &LatticeSpec, params: &PhysicsParams, dataset: &Dataset, schedule: &TrainSchedule) -> Result<TrainReport> {
    let mut stream = NoiseStream::new(schedule.seed, INIT_STREAM_BASE + schedule.replica);
    let init = random_init(spec, dataset, stream.rng());
    train_from(spec, params, dataset, schedule, init)
}

pub fn train_from(
    spec: &LatticeSpec,
    params: &PhysicsParams,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    initial: GridState,
) -> Result<TrainReport> {
    let started = Instant::now();
    params.validate()?;
    schedule.validate(dataset.len())?;
    spec.check_state(&initial)?;
    if dataset.output_dim() != spec.output_dim() {
        return Err(Error::Shape("dataset output dimension does not match lattice".into()));
    }
    let m = spec.output_dim();
    let n = spec.node_count() * m;
    let mass = assemble_mass(spec, params)?;
    let weights = dataset.weights(spec)?;
    let mut batches = BatchSchedule::new(dataset.len(), schedule.batch_size, schedule.seed)?;
    let mut noise = NoiseStream::new(schedule.seed, NOISE_STREAM_BASE + schedule.replica);
    let dt = schedule.inner_dt();

    let mut state = initial;
    let mut z = DVector::zeros(2 * n);
    let mut xi = DVector::zeros(2 * n);
    let mut scratch = DVector::zeros(2 * n);
    let mut ledger = WorkLedger::default();
    let mut previous: Option<(Vec<usize>, StiffnessOperator)> = None;
    let mut records = Vec::with_capacity(schedule.epochs);

    for epoch in 0..schedule.epochs {
        let mut indices = batches.next().expect("schedule is endless");
        indices.sort_unstable();
        let reuse = previous.as_ref().is_some_and(|(prev, _)| *prev == indices);
        let op = if reuse {
            previous.take().map(|(_, op)| op).expect("checked above")
        } else {
            let batch = dataset.batch(&indices, &weights);
            StiffnessOperator::assemble(spec, params, &batch)
        };
        let before = previous.as_ref().map_or(0.0, |(_, prev)| prev.energy(&state.positions));
        let after = op.energy(&state.positions);
        ledger.add(after - before);

        let sde = assemble_from_operator(spec, params, Some(&op), &mass)?;
        z.as_mut_slice()[..n].copy_from_slice(&state.positions);
        z.as_mut_slice()[n..].copy_from_slice(&state.velocities);
        for step in 0..schedule.inner_steps {
            noise.fill(sde.diffusion(), &mut xi);
            sde.em_step_in_place(&mut z, dt, &xi, &mut scratch).map_err(|_| Error::TrainingBlowup {
                epoch,
                source: Box::new(Error::Blowup {
                    step,
                    time: epoch as f64 * schedule.dt_epoch + (step + 1) as f64 * dt,
                }),
            })?;
        }
        state.positions.copy_from_slice(&z.as_slice()[..n]);
        state.velocities.copy_from_slice(&z.as_slice()[n..]);

        records.push(EpochRecord {
            epoch,
            loss: mse_with_weights(&weights, &dataset.targets, &state.positions, m),
            potential: op.energy(&state.positions),
            kinetic: mass.kinetic_energy(&state.velocities, m),
            work: ledger.work,
        });
        previous = Some((indices, op));
    }

    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let window = schedule.steady_window.min(losses.len() / 2).max(1);
    let steady = detect_steady_state(&losses, window, schedule.steady_rel_tol);
    let steady_loss = steady_state_loss(&losses, steady, window);
    Ok(TrainReport {
        records,
        steady,
        steady_loss,
        wall_time: started.elapsed().as_secs_f64(),
        final_state: state,
        ledger,
    })
}

/// Mean loss from the steady-state index on, or over the last window when
/// no steady state was detected.
pub fn steady_state_loss(losses: &[f64], steady: SteadyState, window: usize) -> f64 {
    let start = if steady.reached {
        steady.index
    } else {
        losses.len().saturating_sub(window)
    };
    let tail = &losses[start.min(losses.len().saturating_sub(1))..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// First epoch `i` where the windows `[i - w, i)` and `[i, i + w)` have means
/// within `rel_tol` of each other and variances within a factor of two.
/// Returns the trace length, not reached, if no such epoch exists.
pub fn detect_steady_state(trace: &[f64], window: usize, rel_tol: f64) -> SteadyState {
    let not_reached = SteadyState {
        index: trace.len(),
        reached: false,
    };
    if window == 0 || trace.len() < 2 * window {
        return not_reached;
    }
    let stats = |s: &[f64]| {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        (mean, var)
    };
    for i in window..=trace.len() - window {
        let (m1, v1) = stats(&trace[i - window..i]);
        let (m2, v2) = stats(&trace[i..i + window]);
        let scale = m1.abs().max(m2.abs());
        let rel = if scale > 0.0 { (m2 - m1).abs() / scale } else { 0.0 };
        let var_ok = if v1 == 0.0 && v2 == 0.0 {
            true
        } else if v1 == 0.0 || v2 == 0.0 {
            false
        } else {
            (0.5..=2.0).contains(&(v2 / v1))
        };
        if rel < rel_tol && var_ok {
            return SteadyState { index: i, reached: true };
        }
    }
    not_reached
}

/// Node heights set to the function values, velocities zero.
pub fn oracle_fit(spec: &LatticeSpec, f: impl Fn(&[f64]) -> Vec<f64>) -> GridState {
    let m = spec.output_dim();
    let mut state = GridState::zeros(spec);
    for node in 0..spec.node_count() {
        let y = f(&spec.node_position(node));
        state.positions[node * m..(node + 1) * m].copy_from_slice(&y[..m]);
    }
    state
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Newton iteration on P_n from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// `sum over cells of the integral of |f(u) - y_hat(u)|^2`, by tensor
/// Gauss-Legendre quadrature with `points_per_cell` nodes per axis.
pub fn approximation_error(
    spec: &LatticeSpec,
    state: &GridState,
    f: impl Fn(&[f64]) -> Vec<f64>,
    points_per_cell: usize,
) -> Result<f64> {
    spec.check_state(state)?;
    let d = spec.input_dim();
    let m = spec.output_dim();
    let rule = gauss_legendre(points_per_cell.max(1));
    let cell_volume: f64 = spec.spacing().iter().product();
    let cells: Vec<usize> = spec.nodes_per_dim().iter().map(|n| n - 1).collect();
    let n_cells: usize = cells.iter().product();
    let n_quad = rule.len().pow(d as u32);
    let mut total = 0.0;
    let mut cell = vec![0usize; d];
    let mut lambda = vec![0.0; d];
    let mut u = vec![0.0; d];
    for c in 0..n_cells {
        let mut rest = c;
        for k in (0..d).rev() {
            cell[k] = rest % cells[k];
            rest /= cells[k];
        }
        for q in 0..n_quad {
            let mut rest = q;
            let mut w = cell_volume;
            for k in (0..d).rev() {
                let (t, wk) = rule[rest % rule.len()];
                rest /= rule.len();
                lambda[k] = t;
                w *= wk;
                u[k] = spec.origin()[k] + (cell[k] as f64 + t) * spec.spacing()[k];
            }
            let y_hat = spec
                .weights_for(&CellCoords {
                    cell: cell.clone(),
                    lambda: lambda.clone(),
                })
                .apply(&state.positions, m);
            let y = f(&u);
            total += w * y_hat.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total)
}

/// Node heights minimizing the full-data squared error (minimum-norm
/// solution where some nodes carry no data).
pub fn least_squares_fit(spec: &LatticeSpec, dataset: &Dataset) -> Result<GridState> {
    let nodes = spec.node_count();
    let m = spec.output_dim();
    let weights = dataset.weights(spec)?;
    let mut gram: DMatrix<f64> = DMatrix::zeros(nodes, nodes);
    let mut rhs = DMatrix::zeros(nodes, m);
    for (w, y) in weights.iter().zip(&dataset.targets) {
        for &(a, wa) in &w.entries {
            for &(b, wb) in &w.entries {
                gram[(a, b)] += wa * wb;
            }
            for p in 0..m {
                rhs[(a, p)] += wa * y[p];
            }
        }
    }
    let svd = gram.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let sol = svd.solve(&rhs, tol).map_err(|e| Error::Shape(e.to_string()))?;
    let mut state = GridState::zeros(spec);
    for a in 0..nodes {
        for p in 0..m {
            state.positions[a * m + p] = sol[(a, p)];
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanics::potential_energy;
    use crate::stats::{linear_fit, log_log_slope};

    fn cos_data(n: usize, seed: u64) -> Dataset {
        synthesize(
            &SyntheticSpec {
                function: FunctionId::Cos,
                domain: vec![(0.0, std::f64::consts::TAU)],
                n_points: n,
                noise_sigma: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn synthesize_zero_and_cos() {
        let z = synthesize(
            &SyntheticSpec {
                function: FunctionId::Zero,
                domain: vec![(0.0, 1.0)],
                n_points: 10,
                noise_sigma: 0.0,
            },
            1,
        )
        .unwrap();
        assert!(z.targets.iter().all(|y| y[0] == 0.0));
        let c = cos_data(20, 4);
        for (u, y) in c.inputs.iter().zip(&c.targets) {
            assert_eq!(y[0], u[0].cos());
            assert!((0.0..=std::f64::consts::TAU).contains(&u[0]));
        }
        assert_eq!(c, cos_data(20, 4));
        assert_ne!(c, cos_data(20, 5));
    }

    #[test]
    fn synthesize_two_dimensional_surface() {
        let pi = std::f64::consts::PI;
        let ds = synthesize(
            &SyntheticSpec {
                function: FunctionId::QuadraticXy2,
                domain: vec![(-pi, pi), (-pi, pi)],
                n_points: 80,
                noise_sigma: 0.0,
            },
            7,
        )
        .unwrap();
        assert_eq!(ds.len(), 80);
        for (u, y) in ds.inputs.iter().zip(&ds.targets) {
            assert!(u.iter().all(|v| v.abs() <= pi));
            assert!((y[0] - (u[0] * u[0] + u[0] * u[1] * u[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_function_is_rejected() {
        assert!(matches!("tanh".parse::<FunctionId>(), Err(Error::UnknownFunction(_))));
        assert_eq!("cos_x".parse::<FunctionId>().unwrap(), FunctionId::Cos);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = cos_data(5, 1);
        let back = Dataset::from_csv(&ds.to_csv(), "mem").unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.targets, ds.targets);
        assert!(Dataset::from_csv("a,b\n1,2\n", "mem").is_err());
    }

    #[test]
    fn mse_identities() {
        let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[3], 1).unwrap();
        let ds = cos_data(12, 2);
        let mut state = GridState::zeros(&spec);
        state.positions = vec![0.3, -0.8, 0.1, 0.9];
        let loss = mse_loss(&spec, &state, &ds).unwrap();
        let mut naive = 0.0;
        for (u, y) in ds.inputs.iter().zip(&ds.targets) {
            naive += (spec.interpolate(&state, u).unwrap()[0] - y[0]).powi(2);
        }
        naive /= 12.0;
        assert!((loss - naive).abs() < 1e-14);
        let params = PhysicsParams {
            stiffness: 2.5,
            ..PhysicsParams::default()
        };
        let all: Vec<usize> = (0..12).collect();
        let batch = ds.batch(&all, &ds.weights(&spec).unwrap());
        let u = potential_energy(&spec, &state, &params, &batch).unwrap();
        assert!((u / loss - 2.5 * 12.0 / 2.0).abs() < 1e-10);

        let exact = oracle_fit(&LatticeSpec::covering(&[0.0], &[1.0], &[4], 1).unwrap(), |u| vec![2.0 * u[0] + 1.0]);
        let lin = synthesize(
            &SyntheticSpec {
                function: FunctionId::Linear,
                domain: vec![(0.0, 1.0)],
                n_points: 9,
                noise_sigma: 0.0,
            },
            0,
        )
        .unwrap();
        let lspec = LatticeSpec::covering(&[0.0], &[1.0], &[4], 1).unwrap();
        assert!(mse_loss(&lspec, &exact, &lin).unwrap() < 1e-28);
    }

    #[test]
    fn batches_cover_each_pass_exactly_once() {
        for (n, b) in [(20, 4), (23, 5), (16, 16), (7, 1)] {
            let mut sched = BatchSchedule::new(n, b, 9).unwrap();
            let passes = sched.batches_per_pass();
            assert_eq!(passes, n.div_ceil(b));
            for _ in 0..3 {
                let mut seen = vec![0; n];
                for _ in 0..passes {
                    for i in sched.next().unwrap() {
                        seen[i] += 1;
                    }
                }
                assert!(seen.iter().all(|&c| c == 1));
            }
        }
        let a: Vec<_> = BatchSchedule::new(30, 4, 1).unwrap().take(20).collect();
        let b: Vec<_> = BatchSchedule::new(30, 4, 1).unwrap().take(20).collect();
        assert_eq!(a, b);
        assert!(BatchSchedule::new(3, 4, 0).is_err());
    }

    #[test]
    fn steady_state_detection() {
        let flat = vec![2.0; 50];
        assert_eq!(detect_steady_state(&flat, 10, 0.01), SteadyState { index: 10, reached: true });
        let geometric: Vec<f64> = (0..100).map(|i| 0.9f64.powi(i)).collect();
        assert!(!detect_steady_state(&geometric, 10, 1e-6).reached);

        // exponential decay onto a noisy plateau at epoch ~150
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let knee = 150;
        let trace: Vec<f64> = (0..400)
            .map(|i| {
                let noise = 1.0 + 0.02 * rng.random_range(-1.0..1.0);
                if i < knee {
                    1.0 + 50.0 * (-(i as f64) / 30.0).exp()
                } else {
                    noise
                }
            })
            .collect();
        let window = 20;
        let s = detect_steady_state(&trace, window, 0.05);
        assert!(s.reached);
        assert!((s.index as i64 - knee as i64).abs() <= window as i64, "{s:?}");
    }

    #[test]
    fn oracle_fit_cases() {
        let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[8], 1).unwrap();
        let c = oracle_fit(&spec, |_| vec![1.5]);
        assert!(c.positions.iter().all(|&x| x == 1.5));
        let cosine = oracle_fit(&spec, |u| vec![u[0].cos()]);
        for node in 0..9 {
            assert_eq!(cosine.positions[node], spec.node_position(node)[0].cos());
        }
        let spec2 = LatticeSpec::covering(&[-1.0, 0.0], &[1.0, 2.0], &[3, 2], 1).unwrap();
        let plane = |u: &[f64]| vec![0.5 * u[0] - 2.0 * u[1] + 0.1];
        let s = oracle_fit(&spec2, plane);
        for u in [[0.1, 0.3], [-0.77, 1.99], [0.99, 0.01]] {
            assert!((spec2.interpolate(&s, &u).unwrap()[0] - plane(&u)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn approximation_error_closed_forms() {
        let spec = LatticeSpec::covering(&[0.0], &[1.0], &[1], 1).unwrap();
        let sq = |u: &[f64]| vec![u[0] * u[0]];
        let e = approximation_error(&spec, &oracle_fit(&spec, sq), sq, 4).unwrap();
        assert!((e - 1.0 / 30.0).abs() < 1e-14);

        let spec2 = LatticeSpec::covering(&[0.0, 0.0], &[1.0, 1.0], &[3, 3], 1).unwrap();
        let bilinear = |u: &[f64]| vec![u[0] * u[1] + u[0]];
        let e = approximation_error(&spec2, &oracle_fit(&spec2, bilinear), bilinear, 3).unwrap();
        assert!(e < 1e-28);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..8 {
            let rule = gauss_legendre(n);
            for deg in 0..2 * n {
                let got: f64 = rule.iter().map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert!((got - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn interpolation_error_orders() {
        // integrated squared error falls as N_s^-4; its square root as N_s^-2
        let tau = std::f64::consts::TAU;
        let counts = [8usize, 16, 32, 64];
        let fs: [fn(f64) -> f64; 4] = [f64::sin, f64::cos, |x| x * x, f64::exp];
        for f in fs {
            let errs: Vec<f64> = counts
                .iter()
                .map(|&s| {
                    let spec = LatticeSpec::covering(&[0.0], &[tau], &[s], 1).unwrap();
                    let g = |u: &[f64]| vec![f(u[0])];
                    approximation_error(&spec, &oracle_fit(&spec, g), g, 6).unwrap()
                })
                .collect();
            let ns: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let fit = log_log_slope(&ns, &errs);
            assert!((fit.slope + 4.0).abs() < 0.5, "{}", fit.slope);
            let norms: Vec<f64> = errs.iter().map(|e| e.sqrt()).collect();
            assert!((log_log_slope(&ns, &norms).slope + 2.0).abs() < 0.3);
        }
    }

    #[test]
    fn least_squares_beats_any_other_state() {
        let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[4], 1).unwrap();
        let ds = cos_data(40, 3);
        let best = least_squares_fit(&spec, &ds).unwrap();
        let l0 = mse_loss(&spec, &best, &ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut s = best.clone();
            for x in s.positions.iter_mut() {
                *x += 0.05 * rng.random_range(-1.0..1.0);
            }
            assert!(mse_loss(&spec, &s, &ds).unwrap() >= l0);
        }
    }

    fn one_stick_zero_data() -> (LatticeSpec, Dataset) {
        let spec = LatticeSpec::covering(&[0.0], &[1.0], &[1], 1).unwrap();
        let ds = synthesize(
            &SyntheticSpec {
                function: FunctionId::Zero,
                domain: vec![(0.0, 1.0)],
                n_points: 10,
                noise_sigma: 0.0,
            },
            3,
        )
        .unwrap();
        (spec, ds)
    }

    #[test]
    fn damped_stick_settles_on_the_optimal_line() {
        let (spec, ds) = one_stick_zero_data();
        let params = PhysicsParams {
            mass: 1.0,
            stiffness: 1.0,
            friction: 5.0,
            temperature: 1e-4,
            boltzmann: 1.0,
        };
        let schedule = TrainSchedule {
            epochs: 300,
            batch_size: 10,
            dt_epoch: 0.1,
            inner_steps: 10,
            ..TrainSchedule::default()
        };
        let init = GridState::from_parts(&spec, vec![1.0, -0.5], vec![0.0, 0.0]).unwrap();
        let report = train_from(&spec, &params, &ds, &schedule, init).unwrap();
        let floor = (params.thermal_energy() / params.stiffness).sqrt();
        for x in &report.final_state.positions {
            assert!(x.abs() < 3.0 * floor, "{x}");
        }
        assert!(report.final_loss() < report.records[0].loss);
    }

    #[test]
    fn no_springs_means_no_learning() {
        let ds = cos_data(20, 8);
        let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[2], 1).unwrap();
        let params = PhysicsParams {
            mass: 1.0,
            stiffness: 0.0,
            friction: 1.0,
            temperature: 0.01,
            boltzmann: 1.0,
        };
        let schedule = TrainSchedule {
            epochs: 400,
            batch_size: 5,
            dt_epoch: 0.1,
            inner_steps: 5,
            ..TrainSchedule::default()
        };
        let mut mean = vec![0.0; 400];
        let replicas = 32;
        for replica in 0..replicas {
            let report = train(&spec, &params, &ds, &TrainSchedule { replica, ..schedule }).unwrap();
            assert_eq!(report.ledger.work, 0.0);
            for (m, l) in mean.iter_mut().zip(report.losses()) {
                *m += l / replicas as f64;
            }
        }
        let epochs: Vec<f64> = (0..400).map(|e| e as f64).collect();
        let fit = linear_fit(&epochs, &mean);
        assert!(fit.slope + 1.96 * fit.slope_stderr >= 0.0, "{fit:?}");
    }

    #[test]
    fn training_is_deterministic_per_replica() {
        let ds = cos_data(20, 8);
        let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[2], 1).unwrap();
        let params = PhysicsParams {
            temperature: 0.1,
            ..PhysicsParams::default()
        };
        let s = TrainSchedule {
            epochs: 50,
            batch_size: 4,
            inner_steps: 3,
            ..TrainSchedule::default()
        };
        let a = train(&spec, &params, &ds, &s).unwrap();
        let b = train(&spec, &params, &ds, &s).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = train(&spec, &params, &ds, &TrainSchedule { replica: 1, ..s }).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn ledger_matches_switch_energies() {
        let ds = cos_data(12, 8);
        let spec = LatticeSpec::covering(&[0.0], &[std::f64::consts::TAU], &[3], 1).unwrap();
        let params = PhysicsParams {
            temperature: 0.0,
            ..PhysicsParams::default()
        };
        let s = TrainSchedule {
            epochs: 6,
            batch_size: 4,
            inner_steps: 2,
            ..TrainSchedule::default()
        };
        let report = train(&spec, &params, &ds, &s).unwrap();
        assert_eq!(report.ledger.n_switches, 6);

        // replay: attachment work at the initial state plus the jumps
        let mut init_stream = NoiseStream::new(s.seed, INIT_STREAM_BASE);
        let init = random_init(&spec, &ds, init_stream.rng());
        let w = ds.weights(&spec).unwrap();
        let first: Vec<usize> = {
            let mut b = BatchSchedule::new(12, 4, s.seed).unwrap().next().unwrap();
            b.sort_unstable();
            b
        };
        let u0 = potential_energy(&spec, &init, &params, &ds.batch(&first, &w)).unwrap();
        let short = train_from(&spec, &params, &ds, &TrainSchedule { epochs: 1, ..s }, init).unwrap();
        assert!((short.ledger.work - u0).abs() < 1e-12);
        assert!(report.records.iter().all(|r| r.work.is_finite()));
    }
}
