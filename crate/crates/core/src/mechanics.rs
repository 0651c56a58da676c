//! Mass matrix, spring potential and spring forces of the lattice.
//!
//! Each stick between nodes `a` and `b` contributes
//! `M/8 (v_a + v_b)^2 + M/24 (v_b - v_a)^2` to the kinetic energy, which is
//! the quadratic form of the block `[[M/3, M/6], [M/6, M/3]]`. The same
//! `nodes x nodes` matrix acts on every output coordinate.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::lattice::{GridState, LatticeSpec, NodeWeights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsParams {
    /// Mass of one stick.
    pub mass: f64,
    /// Spring constant.
    pub stiffness: f64,
    /// Friction coefficient, in inverse time.
    pub friction: f64,
    pub temperature: f64,
    pub boltzmann: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            stiffness: 1.0,
            friction: 1.0,
            temperature: 1.0,
            boltzmann: 1.0,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParams(what.to_string()));
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad("mass must be positive");
        }
        if !(self.stiffness >= 0.0 && self.stiffness.is_finite()) {
            return bad("stiffness must be non-negative");
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return bad("friction must be non-negative");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be non-negative");
        }
        if !(self.boltzmann > 0.0 && self.boltzmann.is_finite()) {
            return bad("Boltzmann constant must be positive");
        }
        Ok(())
    }

    /// Thermal energy `k_b T`.
    pub fn thermal_energy(&self) -> f64 {
        self.boltzmann * self.temperature
    }

    /// Velocity noise amplitude `sqrt(2 gamma T k_b / M)`.
    pub fn noise_amplitude(&self) -> f64 {
        (2.0 * self.friction * self.thermal_energy() / self.mass).sqrt()
    }
}

/// Symmetric positive definite `nodes x nodes` mass matrix.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    matrix: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
}

impl MassMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let cholesky = Cholesky::new(matrix.clone()).ok_or(Error::SingularMass)?;
        Ok(Self { matrix, cholesky })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Solves `M X = rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut e: Vec<f64> = SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    /// `1/2 sum_p v_p^T M v_p` for node-major velocities.
    pub fn kinetic_energy(&self, velocities: &[f64], outputs: usize) -> f64 {
        let n = self.dim();
        let mut total = 0.0;
        for p in 0..outputs {
            for a in 0..n {
                let va = velocities[a * outputs + p];
                if va == 0.0 {
                    continue;
                }
                let row: f64 = (0..n)
                    .map(|b| self.matrix[(a, b)] * velocities[b * outputs + p])
                    .sum();
                total += va * row;
            }
        }
        0.5 * total
    }
}

/// Assembles the mass matrix by summing the per-stick blocks over every edge.
pub fn assemble_mass(spec: &LatticeSpec, params: &PhysicsParams) -> Result<MassMatrix> {
    params.validate()?;
    let n = spec.node_count();
    let mut m = DMatrix::zeros(n, n);
    let diag = params.mass / 3.0;
    let off = params.mass / 6.0;
    for (a, b) in spec.edges() {
        m[(a, a)] += diag;
        m[(b, b)] += diag;
        m[(a, b)] += off;
        m[(b, a)] += off;
    }
    MassMatrix::from_matrix(m)
}

pub fn kinetic_energy(spec: &LatticeSpec, state: &GridState, mass: &MassMatrix) -> Result<f64> {
    spec.check_state(state)?;
    Ok(mass.kinetic_energy(&state.velocities, spec.output_dim()))
}

/// Data points attached to the lattice by springs.
#[derive(Debug, Clone)]
pub struct SpringBatch {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    weights: Vec<NodeWeights>,
}

impl SpringBatch {
    pub fn new(spec: &LatticeSpec, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Shape("a spring batch needs at least one point".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| t.len() != spec.output_dim()) {
            return Err(Error::Shape(format!(
                "target has {} components, lattice output dimension is {}",
                t.len(),
                spec.output_dim()
            )));
        }
        let weights = inputs
            .iter()
            .map(|u| spec.interpolation_weights(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            targets,
            weights,
        })
    }

    /// Builds a batch from precomputed weights, skipping the domain checks.
    pub(crate) fn from_parts(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, weights: Vec<NodeWeights>) -> Self {
        debug_assert!(!inputs.is_empty() && inputs.len() == targets.len() && targets.len() == weights.len());
        Self {
            inputs,
            targets,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn weights(&self) -> &[NodeWeights] {
        &self.weights
    }

    /// Sum of squared residuals `sum_j sum_p (y_hat_p(u_j) - y_j^p)^2`.
    pub fn squared_residual(&self, positions: &[f64], outputs: usize) -> f64 {
        self.weights
            .iter()
            .zip(&self.targets)
            .map(|(w, y)| {
                let y_hat = w.apply(positions, outputs);
                y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum()
    }
}

/// `U = k/2 sum_j sum_p (y_hat_p(u_j) - y_j^p)^2`.
pub fn potential_energy(spec: &LatticeSpec, state: &GridState, params: &PhysicsParams, batch: &SpringBatch) -> Result<f64> {
    spec.check_state(state)?;
    Ok(0.5 * params.stiffness * batch.squared_residual(&state.positions, spec.output_dim()))
}

/// Spring force `-dU/dx`, node-major `nodes x outputs`.
pub fn spring_force(spec: &LatticeSpec, state: &GridState, params: &PhysicsParams, batch: &SpringBatch) -> Result<Vec<f64>> {
    spec.check_state(state)?;
    let m = spec.output_dim();
    let mut force = vec![0.0; state.positions.len()];
    for (w, y) in batch.weights.iter().zip(&batch.targets) {
        let y_hat = w.apply(&state.positions, m);
        for &(node, wn) in &w.entries {
            for p in 0..m {
                force[node * m + p] -= params.stiffness * (y_hat[p] - y[p]) * wn;
            }
        }
    }
    Ok(force)
}

/// Linear form of the spring force for a fixed batch: `f = -K x + c`.
///
/// `K = k sum_j w_j w_j^T` is shared by all output coordinates; the offset
/// `c` is node-major like the state.
#[derive(Debug, Clone)]
pub struct StiffnessOperator {
    pub matrix: DMatrix<f64>,
    pub offset: Vec<f64>,
    /// `k/2 sum_j |y_j|^2`, the potential at `x = 0`.
    pub constant: f64,
    outputs: usize,
}

impl StiffnessOperator {
    pub fn assemble(spec: &LatticeSpec, params: &PhysicsParams, batch: &SpringBatch) -> Self {
        let n = spec.node_count();
        let m = spec.output_dim();
        let k = params.stiffness;
        let mut matrix = DMatrix::zeros(n, n);
        let mut offset = vec![0.0; n * m];
        let mut constant = 0.0;
        for (w, y) in batch.weights.iter().zip(&batch.targets) {
            for &(a, wa) in &w.entries {
                for &(b, wb) in &w.entries {
                    matrix[(a, b)] += k * wa * wb;
                }
                for p in 0..m {
                    offset[a * m + p] += k * wa * y[p];
                }
            }
            constant += 0.5 * k * y.iter().map(|v| v * v).sum::<f64>();
        }
        Self {
            matrix,
            offset,
            constant,
            outputs: m,
        }
    }

    pub fn force(&self, positions: &[f64]) -> Vec<f64> {
        let n = self.matrix.nrows();
        let m = self.outputs;
        let mut f = self.offset.clone();
        for a in 0..n {
            for b in 0..n {
                let kab = self.matrix[(a, b)];
                if kab != 0.0 {
                    for p in 0..m {
                        f[a * m + p] -= kab * positions[b * m + p];
                    }
                }
            }
        }
        f
    }

    /// `1/2 x^T K x - c^T x + constant`.
    pub fn energy(&self, positions: &[f64]) -> f64 {
        let f = self.force(positions);
        // x^T f = -x^T K x + c^T x
        let xf: f64 = positions.iter().zip(&f).map(|(x, f)| x * f).sum();
        let cx: f64 = positions.iter().zip(&self.offset).map(|(x, c)| x * c).sum();
        -0.5 * xf - 0.5 * cx + self.constant
    }

    pub fn max_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Largest explicit step allowed by `dt <= 0.1 min(1/gamma, sqrt(lambda_min(M) / lambda_max(K)))`.
pub fn stable_time_step(mass: &MassMatrix, stiffness: &StiffnessOperator, friction: f64) -> f64 {
    let lambda_min = mass.eigenvalues()[0];
    let kmax = stiffness.max_eigenvalue();
    let mut limit = f64::INFINITY;
    if friction > 0.0 {
        limit = limit.min(1.0 / friction);
    }
    if kmax > 0.0 {
        limit = limit.min((lambda_min / kmax).sqrt());
    }
    0.1 * limit
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(mass: f64, k: f64) -> PhysicsParams {
        PhysicsParams {
            mass,
            stiffness: k,
            ..PhysicsParams::default()
        }
    }

    /// Kinetic energy straight from the per-stick Lagrangian terms.
    fn lagrangian_kinetic(spec: &LatticeSpec, mass: f64, v: &[f64], m: usize) -> f64 {
        let mut k = 0.0;
        for (a, b) in spec.edges() {
            for p in 0..m {
                let (va, vb) = (v[a * m + p], v[b * m + p]);
                k += mass / 8.0 * (va + vb).powi(2) + mass / 24.0 * (vb - va).powi(2);
            }
        }
        k
    }

    /// Central-difference Hessian of the kinetic energy in the velocities.
    fn fd_hessian(spec: &LatticeSpec, mass: f64) -> DMatrix<f64> {
        let n = spec.node_count();
        let h = 1e-3;
        DMatrix::from_fn(n, n, |a, b| {
            let eval = |da: f64, db: f64| {
                let mut v = vec![0.0; n];
                v[a] += da;
                v[b] += db;
                lagrangian_kinetic(spec, mass, &v, 1)
            };
            (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h)
        })
    }

    #[test]
    fn one_stick_mass_block() {
        let spec = LatticeSpec::new(1, vec![2], vec![0.0], vec![1.0]).unwrap();
        let mm = assemble_mass(&spec, &params(2.0, 1.0)).unwrap();
        let fd = fd_hessian(&spec, 2.0);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 2.0 / 6.0, 2.0 / 6.0, 2.0 / 3.0]);
        assert!((mm.matrix() - &expect).abs().max() < 1e-14);
        assert!((fd - expect).abs().max() < 1e-9);
    }

    #[test]
    fn two_stick_tridiagonal() {
        let spec = LatticeSpec::new(1, vec![3], vec![0.0], vec![1.0]).unwrap();
        let mm = assemble_mass(&spec, &params(1.0, 1.0)).unwrap();
        let e = mm.matrix();
        assert!((e[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((e[(1, 1)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((e[(2, 2)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((e[(0, 1)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((e[(1, 2)] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(e[(0, 2)], 0.0);
        assert!((fd_hessian(&spec, 1.0) - e).abs().max() < 1e-9);
    }

    #[test]
    fn mass_matches_edge_enumeration_and_hessian_in_2d() {
        let spec = LatticeSpec::new(1, vec![3, 4], vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mm = assemble_mass(&spec, &params(1.5, 1.0)).unwrap();
        let e = mm.matrix();
        assert!((e - e.transpose()).abs().max() < 1e-15);
        // row sums: each incident stick contributes M/3 + M/6 = M/2
        for a in 0..spec.node_count() {
            let incident = spec.neighbours(a).len() as f64;
            let row: f64 = e.row(a).iter().sum();
            assert!((row - 0.75 * incident).abs() < 1e-13);
            for b in 0..spec.node_count() {
                if a != b && e[(a, b)] != 0.0 {
                    assert!(spec.neighbours(a).contains(&b));
                }
            }
        }
        assert!((fd_hessian(&spec, 1.5) - e).abs().max() < 1e-8);
    }

    #[test]
    fn mass_is_spd_up_to_64_nodes() {
        for dims in [vec![2], vec![64], vec![8, 8], vec![4, 4, 4], vec![2, 2, 2, 2, 2, 2], vec![2, 32]] {
            let spec = LatticeSpec::new(1, dims.clone(), vec![0.0; dims.len()], vec![1.0; dims.len()]).unwrap();
            let mm = assemble_mass(&spec, &params(1.0, 1.0)).unwrap();
            assert!(mm.eigenvalues()[0] > 0.0, "{dims:?}");
        }
    }

    #[test]
    fn kinetic_translation_and_rotation() {
        let spec = LatticeSpec::new(1, vec![2], vec![0.0], vec![1.0]).unwrap();
        let p = params(3.0, 1.0);
        let mm = assemble_mass(&spec, &p).unwrap();
        let w = 0.7;
        let mut state = GridState::zeros(&spec);
        assert_eq!(kinetic_energy(&spec, &state, &mm).unwrap(), 0.0);
        state.velocities = vec![w, w];
        assert!((kinetic_energy(&spec, &state, &mm).unwrap() - 3.0 * w * w / 2.0).abs() < 1e-14);
        state.velocities = vec![w, -w];
        assert!((kinetic_energy(&spec, &state, &mm).unwrap() - 3.0 * w * w / 6.0).abs() < 1e-14);
    }

    #[test]
    fn kinetic_shift_identity() {
        let spec = LatticeSpec::new(2, vec![3, 3], vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mm = assemble_mass(&spec, &params(1.2, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = 0.37;
        let mut shifted = v.clone();
        for node in 0..9 {
            shifted[node * 2 + 1] += c;
        }
        let ones = vec![1.0; 9];
        let vp: Vec<f64> = (0..9).map(|n| v[n * 2 + 1]).collect();
        let m = mm.matrix();
        let one_m_v: f64 = (0..9).map(|a| (0..9).map(|b| m[(a, b)] * vp[b]).sum::<f64>()).sum();
        let one_m_one: f64 = (0..9).map(|a| (0..9).map(|b| m[(a, b)] * ones[b]).sum::<f64>()).sum();
        let lhs = mm.kinetic_energy(&shifted, 2);
        let rhs = mm.kinetic_energy(&v, 2) + c * one_m_v + 0.5 * c * c * one_m_one;
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((lagrangian_kinetic(&spec, 1.2, &v, 2) - mm.kinetic_energy(&v, 2)).abs() < 1e-12);
    }

    fn random_instance(rng: &mut ChaCha8Rng, d: usize, m: usize) -> (LatticeSpec, GridState, SpringBatch) {
        let nodes: Vec<usize> = (0..d).map(|_| rng.random_range(2..5)).collect();
        let spacing: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..1.5)).collect();
        let spec = LatticeSpec::new(m, nodes, vec![0.0; d], spacing).unwrap();
        let hi = spec.upper();
        let n_pts = rng.random_range(1..12);
        let inputs: Vec<Vec<f64>> = (0..n_pts)
            .map(|_| hi.iter().map(|h| rng.random::<f64>() * h).collect())
            .collect();
        let targets: Vec<Vec<f64>> = (0..n_pts).map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let batch = SpringBatch::new(&spec, inputs, targets).unwrap();
        let len = spec.node_count() * m;
        let state = GridState::from_parts(
            &spec,
            (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
            vec![0.0; len],
        )
        .unwrap();
        (spec, state, batch)
    }

    #[test]
    fn potential_matches_naive_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (spec, state, batch) = random_instance(&mut rng, 2, 2);
            let p = params(1.0, 2.5);
            let mut naive = 0.0;
            for (u, y) in batch.inputs().iter().zip(batch.targets()) {
                let y_hat = spec.interpolate(&state, u).unwrap();
                for q in 0..2 {
                    naive += (y_hat[q] - y[q]).powi(2);
                }
            }
            naive *= 2.5 / 2.0;
            let u = potential_energy(&spec, &state, &p, &batch).unwrap();
            assert!((u - naive).abs() < 1e-12 * naive.max(1.0));
            let op = StiffnessOperator::assemble(&spec, &p, &batch);
            assert!((op.energy(&state.positions) - naive).abs() < 1e-10 * naive.max(1.0));
        }
    }

    #[test]
    fn single_spring_on_node() {
        let spec = LatticeSpec::new(2, vec![3], vec![0.0], vec![1.0]).unwrap();
        let batch = SpringBatch::new(&spec, vec![vec![1.0]], vec![vec![0.0, 0.5]]).unwrap();
        let mut state = GridState::zeros(&spec);
        let p = params(1.0, 4.0);
        state.positions[1 * 2 + 1] = 0.5 + 0.3;
        let u = potential_energy(&spec, &state, &p, &batch).unwrap();
        assert!((u - 4.0 * 0.09 / 2.0).abs() < 1e-14);
        let f = spring_force(&spec, &state, &p, &batch).unwrap();
        for (i, fi) in f.iter().enumerate() {
            if i == 3 {
                assert!((fi + 4.0 * 0.3).abs() < 1e-14);
            } else {
                assert_eq!(*fi, 0.0);
            }
        }
    }

    #[test]
    fn zero_residual_has_no_force() {
        let spec = LatticeSpec::new(1, vec![4], vec![0.0], vec![1.0]).unwrap();
        let state = GridState::from_parts(&spec, vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4]).unwrap();
        let batch = SpringBatch::new(&spec, vec![vec![0.5], vec![2.2]], vec![vec![0.5], vec![2.2]]).unwrap();
        let p = params(1.0, 3.0);
        assert!(potential_energy(&spec, &state, &p, &batch).unwrap() < 1e-28);
        assert!(spring_force(&spec, &state, &p, &batch).unwrap().iter().all(|f| f.abs() < 1e-14));
    }

    #[test]
    fn force_is_negative_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..24 {
            let d = 1 + trial % 2;
            let m = 1 + (trial / 2) % 2;
            let (spec, state, batch) = random_instance(&mut rng, d, m);
            let p = params(1.0, rng.random_range(0.1..5.0));
            let f = spring_force(&spec, &state, &p, &batch).unwrap();
            let h = 1e-5;
            for i in 0..f.len() {
                let mut plus = state.clone();
                let mut minus = state.clone();
                plus.positions[i] += h;
                minus.positions[i] -= h;
                let fd = -(potential_energy(&spec, &plus, &p, &batch).unwrap()
                    - potential_energy(&spec, &minus, &p, &batch).unwrap())
                    / (2.0 * h);
                assert!((fd - f[i]).abs() <= 1e-6f64.max(1e-6 * f[i].abs()), "{fd} vs {}", f[i]);
            }
            let op = StiffnessOperator::assemble(&spec, &p, &batch);
            let lin = op.force(&state.positions);
            for (a, b) in lin.iter().zip(&f) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn force_superposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (spec, s1, batch) = random_instance(&mut rng, 2, 2);
        let (_, s2_raw, _) = random_instance(&mut rng, 2, 2);
        let mut s2 = s1.clone();
        for (i, x) in s2.positions.iter_mut().enumerate() {
            *x = s2_raw.positions.get(i).copied().unwrap_or(0.3) * 0.5;
        }
        let p = params(1.0, 1.7);
        let zero = GridState::zeros(&spec);
        let f0 = spring_force(&spec, &zero, &p, &batch).unwrap();
        let lin = |s: &GridState| -> Vec<f64> {
            spring_force(&spec, s, &p, &batch).unwrap().iter().zip(&f0).map(|(a, b)| a - b).collect()
        };
        let (a, b) = (1.3, -0.4);
        let mut comb = s1.clone();
        for i in 0..comb.positions.len() {
            comb.positions[i] = a * s1.positions[i] + b * s2.positions[i];
        }
        let (l1, l2, lc) = (lin(&s1), lin(&s2), lin(&comb));
        for i in 0..lc.len() {
            assert!((lc[i] - (a * l1[i] + b * l2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_amplitude_formula() {
        let p = PhysicsParams {
            mass: 2.0,
            stiffness: 1.0,
            friction: 0.5,
            temperature: 3.0,
            boltzmann: 1.0,
        };
        assert!((p.noise_amplitude() - (2.0f64 * 0.5 * 3.0 / 2.0).sqrt()).abs() < 1e-15);
        assert!(PhysicsParams { mass: 0.0, ..p }.validate().is_err());
        assert!(PhysicsParams { friction: -1.0, ..p }.validate().is_err());
    }
}
