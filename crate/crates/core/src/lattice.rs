//! Regular grid of sticks: geometry, cell location and multilinear inference.
//!
//! Nodes are linearized row-major over the multi-index `(i_1, ..., i_d)`, so
//! the last axis varies fastest. The same order is used by [`GridState`] and
//! by the on-disk state format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Relative slack used to snap inputs onto nodes and onto the closed domain.
const SNAP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    output_dim: usize,
    nodes_per_dim: Vec<usize>,
    origin: Vec<f64>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl LatticeSpec {
    pub fn new(
        output_dim: usize,
        nodes_per_dim: Vec<usize>,
        origin: Vec<f64>,
        spacing: Vec<f64>,
    ) -> Result<Self> {
        let d = nodes_per_dim.len();
        if d == 0 {
            return Err(Error::InvalidLattice("input dimension must be >= 1".into()));
        }
        if output_dim == 0 {
            return Err(Error::InvalidLattice("output dimension must be >= 1".into()));
        }
        if origin.len() != d || spacing.len() != d {
            return Err(Error::InvalidLattice(format!(
                "origin has {} and spacing {} components, expected {d}",
                origin.len(),
                spacing.len()
            )));
        }
        if let Some(k) = nodes_per_dim.iter().position(|&n| n < 2) {
            return Err(Error::InvalidLattice(format!(
                "axis {k} has {} nodes; at least one stick per axis is required",
                nodes_per_dim[k]
            )));
        }
        if let Some(k) = spacing.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidLattice(format!(
                "spacing on axis {k} must be positive, got {}",
                spacing[k]
            )));
        }
        if let Some(k) = origin.iter().position(|o| !o.is_finite()) {
            return Err(Error::InvalidLattice(format!("origin on axis {k} is not finite")));
        }
        let mut strides = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * nodes_per_dim[k + 1];
        }
        Ok(Self {
            output_dim,
            nodes_per_dim,
            origin,
            spacing,
            strides,
        })
    }

    /// Grid spanning the closed box `[lo, hi]` with the given number of sticks per axis.
    pub fn covering(lo: &[f64], hi: &[f64], sticks_per_dim: &[usize], output_dim: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != sticks_per_dim.len() {
            return Err(Error::InvalidLattice("box and stick counts disagree in dimension".into()));
        }
        if let Some(k) = sticks_per_dim.iter().position(|&s| s == 0) {
            return Err(Error::InvalidLattice(format!("axis {k} needs at least one stick")));
        }
        let spacing = lo
            .iter()
            .zip(hi)
            .zip(sticks_per_dim)
            .map(|((a, b), &s)| (b - a) / s as f64)
            .collect();
        Self::new(
            output_dim,
            sticks_per_dim.iter().map(|s| s + 1).collect(),
            lo.to_vec(),
            spacing,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.nodes_per_dim.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn nodes_per_dim(&self) -> &[usize] {
        &self.nodes_per_dim
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of nodes, `prod N_k`.
    pub fn node_count(&self) -> usize {
        self.nodes_per_dim.iter().product()
    }

    /// Number of grid cells, `prod (N_k - 1)`.
    pub fn stick_count(&self) -> usize {
        self.nodes_per_dim.iter().map(|n| n - 1).product()
    }

    /// Upper corner of the covered box.
    pub fn upper(&self) -> Vec<f64> {
        (0..self.input_dim())
            .map(|k| self.origin[k] + (self.nodes_per_dim[k] - 1) as f64 * self.spacing[k])
            .collect()
    }

    pub fn node_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.input_dim());
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node_multi_index(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        self.strides
            .iter()
            .zip(&self.nodes_per_dim)
            .map(|(s, _)| {
                let i = rest / s;
                rest %= s;
                i
            })
            .collect()
    }

    /// Input-space position `r(i)` of a node.
    pub fn node_position(&self, index: usize) -> Vec<f64> {
        self.node_multi_index(index)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.origin[k] + i as f64 * self.spacing[k])
            .collect()
    }

    /// All sticks as node pairs `(a, a + e_b)`, ordered by lower node then axis.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for a in 0..self.node_count() {
            let multi = self.node_multi_index(a);
            for (b, &n) in self.nodes_per_dim.iter().enumerate() {
                if multi[b] + 1 < n {
                    edges.push((a, a + self.strides[b]));
                }
            }
        }
        edges
    }

    /// Nodes that share a stick with `index`.
    pub fn neighbours(&self, index: usize) -> Vec<usize> {
        let multi = self.node_multi_index(index);
        let mut out = Vec::with_capacity(2 * self.input_dim());
        for (b, &n) in self.nodes_per_dim.iter().enumerate() {
            if multi[b] > 0 {
                out.push(index - self.strides[b]);
            }
            if multi[b] + 1 < n {
                out.push(index + self.strides[b]);
            }
        }
        out
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        self.locate(u).is_ok()
    }

    /// Finds the cell containing `u` and its local coordinates.
    ///
    /// Cells are half-open per axis; points on the outer upper face are put
    /// in the last cell with `lambda = 1`.
    pub fn locate(&self, u: &[f64]) -> Result<CellCoords> {
        if u.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} components, lattice expects {}",
                u.len(),
                self.input_dim()
            )));
        }
        let mut cell = Vec::with_capacity(u.len());
        let mut lambda = Vec::with_capacity(u.len());
        for (k, &value) in u.iter().enumerate() {
            let last = (self.nodes_per_dim[k] - 1) as f64;
            let mut s = (value - self.origin[k]) / self.spacing[k];
            let nearest = s.round();
            if (s - nearest).abs() <= SNAP_EPS * nearest.abs().max(1.0) {
                s = nearest;
            }
            if !(s >= 0.0 && s <= last) {
                return Err(Error::OutOfDomain {
                    axis: k,
                    value,
                    lo: self.origin[k],
                    hi: self.origin[k] + last * self.spacing[k],
                });
            }
            let i = (s.floor() as usize).min(self.nodes_per_dim[k] - 2);
            cell.push(i);
            lambda.push(s - i as f64);
        }
        Ok(CellCoords { cell, lambda })
    }

    /// The `2^d` corner nodes of the enclosing cell with their multilinear weights.
    pub fn interpolation_weights(&self, u: &[f64]) -> Result<NodeWeights> {
        let coords = self.locate(u)?;
        Ok(self.weights_for(&coords))
    }

    pub fn weights_for(&self, coords: &CellCoords) -> NodeWeights {
        let d = self.input_dim();
        let base = self.node_index(&coords.cell);
        let mut entries = Vec::with_capacity(1 << d);
        for corner in 0..(1usize << d) {
            let mut node = base;
            let mut w = 1.0;
            for b in 0..d {
                if corner >> (d - 1 - b) & 1 == 1 {
                    node += self.strides[b];
                    w *= coords.lambda[b];
                } else {
                    w *= 1.0 - coords.lambda[b];
                }
            }
            if w != 0.0 {
                entries.push((node, w));
            }
        }
        NodeWeights { entries }
    }

    /// Multilinear prediction `y_hat(u)` from the node heights of `state`.
    pub fn interpolate(&self, state: &GridState, u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let w = self.interpolation_weights(u)?;
        Ok(w.apply(&state.positions, self.output_dim))
    }

    pub fn check_state(&self, state: &GridState) -> Result<()> {
        if state.nodes != self.node_count() || state.outputs != self.output_dim {
            return Err(Error::Shape(format!(
                "state is {}x{}, lattice needs {}x{}",
                state.nodes,
                state.outputs,
                self.node_count(),
                self.output_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellCoords {
    pub cell: Vec<usize>,
    pub lambda: Vec<f64>,
}

/// Sparse weights over nodes; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeWeights {
    pub entries: Vec<(usize, f64)>,
}

impl NodeWeights {
    /// Evaluates `sum_n w_n x_n` for a node-major `nodes x outputs` array.
    pub fn apply(&self, values: &[f64], outputs: usize) -> Vec<f64> {
        let mut y = vec![0.0; outputs];
        for &(node, w) in &self.entries {
            for (p, yp) in y.iter_mut().enumerate() {
                *yp += w * values[node * outputs + p];
            }
        }
        y
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }
}

/// Node heights and velocities, both `nodes x outputs` in node-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    nodes: usize,
    outputs: usize,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl GridState {
    pub fn zeros(spec: &LatticeSpec) -> Self {
        let n = spec.node_count() * spec.output_dim();
        Self {
            nodes: spec.node_count(),
            outputs: spec.output_dim(),
            positions: vec![0.0; n],
            velocities: vec![0.0; n],
        }
    }

    pub fn from_parts(spec: &LatticeSpec, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        let n = spec.node_count() * spec.output_dim();
        if positions.len() != n || velocities.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} positions and velocities, got {} and {}",
                positions.len(),
                velocities.len()
            )));
        }
        if positions.iter().chain(&velocities).any(|v| !v.is_finite()) {
            return Err(Error::Shape("state contains non-finite entries".into()));
        }
        Ok(Self {
            nodes: spec.node_count(),
            outputs: spec.output_dim(),
            positions,
            velocities,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn x(&self, node: usize, p: usize) -> f64 {
        self.positions[node * self.outputs + p]
    }

    pub fn v(&self, node: usize, p: usize) -> f64 {
        self.velocities[node * self.outputs + p]
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.velocities).all(|v| v.is_finite())
    }

    /// Serializes to CSV: `node_index,i_1..i_d,x_1..x_m,v_1..v_m`.
    pub fn to_csv(&self, spec: &LatticeSpec) -> String {
        let mut out = String::new();
        out.push_str("node_index");
        for k in 1..=spec.input_dim() {
            let _ = write!(out, ",i_{k}");
        }
        for p in 1..=self.outputs {
            let _ = write!(out, ",x_{p}");
        }
        for p in 1..=self.outputs {
            let _ = write!(out, ",v_{p}");
        }
        out.push('\n');
        for node in 0..self.nodes {
            let _ = write!(out, "{node}");
            for i in spec.node_multi_index(node) {
                let _ = write!(out, ",{i}");
            }
            for p in 0..self.outputs {
                let _ = write!(out, ",{}", self.x(node, p));
            }
            for p in 0..self.outputs {
                let _ = write!(out, ",{}", self.v(node, p));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(spec: &LatticeSpec, text: &str, source: &str) -> Result<Self> {
        let d = spec.input_dim();
        let m = spec.output_dim();
        let parse_err = |line: usize, message: String| Error::Parse {
            file: source.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty state file".into()))?;
        let columns = header.split(',').count();
        if columns != 1 + d + 2 * m {
            return Err(parse_err(1, format!("expected {} columns, found {columns}", 1 + d + 2 * m)));
        }
        let mut state = GridState::zeros(spec);
        let mut seen = vec![false; spec.node_count()];
        for (line_no, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != columns {
                return Err(parse_err(line_no + 1, format!("expected {columns} fields")));
            }
            let node: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(line_no + 1, format!("bad node index `{}`", fields[0])))?;
            if node >= spec.node_count() {
                return Err(parse_err(line_no + 1, format!("node {node} out of range")));
            }
            let value = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| parse_err(line_no + 1, format!("bad number `{s}`")))
            };
            for p in 0..m {
                state.positions[node * m + p] = value(fields[1 + d + p])?;
                state.velocities[node * m + p] = value(fields[1 + d + m + p])?;
            }
            seen[node] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(parse_err(0, format!("node {missing} missing from state file")));
        }
        Ok(state)
    }

    pub fn write_csv(&self, spec: &LatticeSpec, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(spec)).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(spec: &LatticeSpec, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(spec, &text, &path.display().to_string())
    }
}
