//! Define-by-run reverse-mode differentiation tape.
//!
//! Operations compute their forward value eagerly when recorded; `backward`
//! walks the node list in reverse, accumulating vector-Jacobian products
//! into every bound parameter leaf. The graph is rebuilt per minibatch, so a
//! tape is cheap, single-owner, and never shared.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::params::{ParamRole, ParamSet};
use super::LOG_CLAMP;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Adds a 1 x c bias row to every row of the first operand.
    AddRow(Var, Var),
    Sub(Var, Var),
    /// Element-wise product.
    Mul(Var, Var),
    Scale(Var, f64),
    RowSoftmax(Var),
    /// Element-wise ln, input clamped to [`LOG_CLAMP`].
    Log(Var),
    /// Full reduction to a 1x1 scalar.
    Sum(Var),
    /// Element-wise absolute value; subgradient 0 at 0.
    Abs(Var),
    Tanh(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Parameter leaves registered on a tape, resolvable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    entries: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Param(format!("no bound parameter named '{name}'")))
    }
}

/// Recording tape. See the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, Var)>,
    bound_role: Option<ParamRole>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var(id)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.node(v).value
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Registers every entry of a parameter set as a differentiable leaf.
    ///
    /// A tape differentiates exactly one parameter set; binding twice is a
    /// state error.
    pub fn bind(&mut self, params: &ParamSet) -> Result<BoundParams> {
        if self.bound_role.is_some() {
            return Err(Error::State("tape already has bound parameters"));
        }
        self.bound_role = Some(params.role());
        let mut entries = Vec::with_capacity(params.len());
        for (name, value) in params.iter() {
            let var = self.push(Op::Leaf, value.clone());
            entries.push((name.to_string(), var));
        }
        self.bound = entries.clone();
        Ok(BoundParams { entries })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a).value.matmul(&self.node(b).value).map_err(|e| {
            Error::Dim(format!("matmul node {}: {e}", self.nodes.len()))
        })?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a).value.add(&self.node(b).value).map_err(|e| {
            Error::Dim(format!("add node {}: {e}", self.nodes.len()))
        })?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// `a + bias` where `bias` is a 1 x c row added to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.node(a).value.add_row(&self.node(bias).value).map_err(|e| {
            Error::Dim(format!("add_row node {}: {e}", self.nodes.len()))
        })?;
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a).value.sub(&self.node(b).value).map_err(|e| {
            Error::Dim(format!("sub node {}: {e}", self.nodes.len()))
        })?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a).value.hadamard(&self.node(b).value).map_err(|e| {
            Error::Dim(format!("mul node {}: {e}", self.nodes.len()))
        })?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.node(a).value.scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.node(a).value.row_softmax();
        self.push(Op::RowSoftmax(a), value)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.node(a).value.map(|v| libm::log(v.max(LOG_CLAMP)));
        self.push(Op::Log(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.node(a).value.sum());
        self.push(Op::Sum(a), value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.node(a).value.map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.node(a).value.map(libm::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Backward pass from a scalar output, seeded with 1.
    ///
    /// Returns the gradient of the output with respect to the bound
    /// parameter set, in binding order.
    pub fn backward(&self, output: Var) -> Result<ParamSet> {
        let out = &self.node(output).value;
        if out.shape() != (1, 1) {
            return Err(Error::Dim(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        self.backward_seeded(output, &Matrix::scalar(1.0))
    }

    /// Backward pass with an explicit output seed (shape must match).
    pub fn backward_seeded(&self, output: Var, seed: &Matrix) -> Result<ParamSet> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape (no forward pass recorded)"));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::State("backward output is not a node of this tape"));
        }
        let role = self
            .bound_role
            .ok_or(Error::State("backward before binding a parameter set"))?;
        if seed.shape() != self.node(output).value.shape() {
            return Err(Error::Dim(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.node(output).value.shape()
            )));
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut out = ParamSet::new(role);
        for (name, var) in &self.bound {
            let grad = match &grads[var.0] {
                Some(g) => g.clone(),
                None => {
                    let m = &self.node(*var).value;
                    Matrix::zeros(m.rows(), m.cols())
                }
            };
            out.insert(name, grad)?;
        }
        Ok(out)
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let accum = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.add(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.node(*b).value.transpose())?;
                let db = self.node(*a).value.transpose().matmul(g)?;
                accum(grads, *a, da)?;
                accum(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone())?;
                accum(grads, *b, g.clone())?;
            }
            Op::AddRow(a, bias) => {
                accum(grads, *a, g.clone())?;
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        db.set(0, c, db.get(0, c) + g.get(r, c));
                    }
                }
                accum(grads, *bias, db)?;
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone())?;
                accum(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(&self.node(*b).value)?;
                let db = g.hadamard(&self.node(*a).value)?;
                accum(grads, *a, da)?;
                accum(grads, *b, db)?;
            }
            Op::Scale(a, s) => accum(grads, *a, g.scale(*s))?,
            Op::RowSoftmax(a) => {
                let y = &self.nodes[id].value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..y.cols() {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accum(grads, *a, da)?;
            }
            Op::Log(a) => {
                let x = &self.node(*a).value;
                let da = g.hadamard(&x.map(|v| if v >= LOG_CLAMP { 1.0 / v } else { 0.0 }))?;
                accum(grads, *a, da)?;
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                let shape = self.node(*a).value.shape();
                accum(grads, *a, Matrix::zeros(shape.0, shape.1).map(|_| gv))?;
            }
            Op::Abs(a) => {
                let x = &self.node(*a).value;
                let sign = x.map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accum(grads, *a, g.hadamard(&sign)?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let da = g.hadamard(&y.map(|v| 1.0 - v * v))?;
                accum(grads, *a, da)?;
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf node from its operands' cached values and
    /// checks the result is bit-identical to the cached value.
    pub fn replay_check(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => self.node(*a).value.matmul(&self.node(*b).value)?,
                Op::Add(a, b) => self.node(*a).value.add(&self.node(*b).value)?,
                Op::AddRow(a, b) => self.node(*a).value.add_row(&self.node(*b).value)?,
                Op::Sub(a, b) => self.node(*a).value.sub(&self.node(*b).value)?,
                Op::Mul(a, b) => self.node(*a).value.hadamard(&self.node(*b).value)?,
                Op::Scale(a, s) => self.node(*a).value.scale(*s),
                Op::RowSoftmax(a) => self.node(*a).value.row_softmax(),
                Op::Log(a) => self.node(*a).value.map(|v| libm::log(v.max(LOG_CLAMP))),
                Op::Sum(a) => Matrix::scalar(self.node(*a).value.sum()),
                Op::Abs(a) => self.node(*a).value.map(f64::abs),
                Op::Tanh(a) => self.node(*a).value.map(libm::tanh),
            };
            if recomputed != node.value {
                return Err(Error::State("replay mismatch: cached forward value differs"));
            }
            let _ = id;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // L = sum(W ⊙ W), W = [[1, 2]] → dL/dW = [[2, 4]]
        let mut params = ParamSet::new(ParamRole::Model);
        params
            .insert("w", Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let w = bound.var("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut params = ParamSet::new(ParamRole::Model);
        params
            .insert("w", Matrix::from_vec(1, 3, vec![2.0, 0.0, -3.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let w = bound.var("w").unwrap();
        let a = tape.abs(w);
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::new();
        let err = tape.backward_seeded(Var(0), &Matrix::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn double_bind_rejected() {
        let params = ParamSet::new(ParamRole::Model);
        let mut tape = Tape::new();
        tape.bind(&params).unwrap();
        assert!(matches!(tape.bind(&params), Err(Error::State(_))));
    }

    #[test]
    fn constant_leaves_get_no_gradient_entry() {
        let mut params = ParamSet::new(ParamRole::Model);
        params.insert("w", Matrix::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let w = bound.var("w").unwrap();
        let c = tape.constant(Matrix::scalar(5.0));
        let prod = tape.mul(w, c).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("w").unwrap().data(), &[5.0]);
    }

    #[test]
    fn replay_reproduces_cached_values() {
        let mut params = ParamSet::new(ParamRole::Model);
        params
            .insert("w", Matrix::from_vec(2, 2, vec![0.3, -1.2, 0.8, 2.5]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let w = bound.var("w").unwrap();
        let x = tape.constant(Matrix::from_vec(1, 2, vec![0.5, -0.25]).unwrap());
        let z = tape.matmul(x, w).unwrap();
        let p = tape.row_softmax(z);
        let lp = tape.log(p);
        let s = tape.sum(lp);
        let _ = tape.abs(s);
        tape.replay_check().unwrap();
    }
}
