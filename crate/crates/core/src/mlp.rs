//! One-hidden-layer ReLU network trained by plain SGD, the comparison
//! baseline for the lattice. `bias_trainable = false` gives the fixed-bias
//! variant (MLPf), whose biases keep their random initial values.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::training::{report_csv, BatchSchedule, Dataset, EpochRecord};

const INIT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `h x d`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `m x h`
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub bias_trainable: bool,
}

impl MlpParams {
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize, bias_trainable: bool) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input_dim),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(output_dim, hidden),
            b2: DVector::zeros(output_dim),
            bias_trainable,
        }
    }

    /// Every parameter uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(input_dim: usize, hidden: usize, output_dim: usize, bias_trainable: bool, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(Error::InvalidParams("network dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let a1 = 1.0 / (input_dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let mut draw = |a: f64| rng.random_range(-a..a);
        let w1 = DMatrix::from_fn(hidden, input_dim, |_, _| draw(a1));
        let b1 = DVector::from_fn(hidden, |_, _| draw(a1));
        let w2 = DMatrix::from_fn(output_dim, hidden, |_, _| draw(a2));
        let b2 = DVector::from_fn(output_dim, |_, _| draw(a2));
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            bias_trainable,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.b1.len() != h || self.w2.ncols() != h || self.b2.len() != self.output_dim() {
            return Err(Error::Shape("inconsistent network shapes".into()));
        }
        let all = self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite network parameter".into()));
        }
        Ok(())
    }

    /// `W2 relu(W1 u + b1) + b2`.
    pub fn forward(&self, u: &[f64]) -> DVector<f64> {
        let hidden = (&self.w1 * DVector::from_column_slice(u) + &self.b1).map(|a| a.max(0.0));
        &self.w2 * hidden + &self.b2
    }

    pub fn loss(&self, dataset: &Dataset) -> f64 {
        self.batch_loss(dataset, &(0..dataset.len()).collect::<Vec<_>>())
    }

    fn batch_loss(&self, dataset: &Dataset, indices: &[usize]) -> f64 {
        let total: f64 = indices
            .iter()
            .map(|&i| {
                let y_hat = self.forward(&dataset.inputs[i]);
                y_hat.iter().zip(&dataset.targets[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        total / indices.len() as f64
    }

    /// Gradient of the batch mean squared error. Bias gradients are zero when
    /// biases are frozen.
    pub fn grad(&self, dataset: &Dataset, indices: &[usize]) -> MlpParams {
        let mut g = MlpParams::zeros(self.input_dim(), self.hidden(), self.output_dim(), self.bias_trainable);
        let scale = 2.0 / indices.len() as f64;
        for &i in indices {
            let u = DVector::from_column_slice(&dataset.inputs[i]);
            let pre = &self.w1 * &u + &self.b1;
            let act = pre.map(|a| a.max(0.0));
            let y_hat = &self.w2 * &act + &self.b2;
            let r = (y_hat - DVector::from_column_slice(&dataset.targets[i])) * scale;
            g.w2 += &r * act.transpose();
            g.b2 += &r;
            let mut delta = self.w2.transpose() * &r;
            for (dh, p) in delta.iter_mut().zip(pre.iter()) {
                if *p <= 0.0 {
                    *dh = 0.0;
                }
            }
            g.w1 += &delta * u.transpose();
            g.b1 += delta;
        }
        if !self.bias_trainable {
            g.b1.fill(0.0);
            g.b2.fill(0.0);
        }
        g
    }

    fn sgd_step(&mut self, g: &MlpParams, lr: f64) {
        self.w1 -= &g.w1 * lr;
        self.w2 -= &g.w2 * lr;
        if self.bias_trainable {
            self.b1 -= &g.b1 * lr;
            self.b2 -= &g.b2 * lr;
        }
    }

    /// All parameters in the order `w1, b1, w2, b2` (column-major matrices).
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter()).copied().collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> MlpParams {
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for v in out.w1.iter_mut().chain(out.b1.iter_mut()).chain(out.w2.iter_mut()).chain(out.b2.iter_mut()) {
            *v = it.next().expect("flat vector too short");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSchedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpSchedule {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 500,
            batch_size: 16,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpReport {
    /// Same layout as the lattice trainer. `U` is half the batch squared
    /// error; `K` and `W_acc` are zero.
    pub records: Vec<EpochRecord>,
    pub diverged: bool,
    pub params: MlpParams,
}

impl MlpReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        report_csv(&self.records)
    }
}

/// SGD with one mini-batch per epoch, drawn from the same schedule as the
/// lattice trainer. Stops early and flags divergence once the loss exceeds
/// `1e6` times its initial value.
pub fn train_mlp(initial: MlpParams, dataset: &Dataset, schedule: &MlpSchedule) -> Result<MlpReport> {
    initial.validate()?;
    if !(schedule.lr >= 0.0) || !schedule.lr.is_finite() {
        return Err(Error::InvalidParams("learning rate must be non-negative".into()));
    }
    if initial.input_dim() != dataset.input_dim() || initial.output_dim() != dataset.output_dim() {
        return Err(Error::Shape("network does not match dataset dimensions".into()));
    }
    let mut batches = BatchSchedule::new(dataset.len(), schedule.batch_size, schedule.seed)?;
    let mut params = initial;
    let initial_loss = params.loss(dataset);
    let mut records = Vec::with_capacity(schedule.epochs);
    let mut diverged = false;
    for epoch in 0..schedule.epochs {
        let indices = batches.next().expect("schedule is endless");
        let g = params.grad(dataset, &indices);
        params.sgd_step(&g, schedule.lr);
        let loss = params.loss(dataset);
        records.push(EpochRecord {
            epoch,
            loss,
            potential: 0.5 * params.batch_loss(dataset, &indices) * indices.len() as f64,
            kinetic: 0.0,
            work: 0.0,
        });
        if !loss.is_finite() || loss > 1e6 * initial_loss.max(f64::MIN_POSITIVE) {
            log::warn!("network training diverged at epoch {epoch}");
            diverged = true;
            break;
        }
    }
    Ok(MlpReport {
        records,
        diverged,
        params,
    })
}
