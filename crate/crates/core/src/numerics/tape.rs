//! Reverse-mode tape over batched matrix values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use super::mat::{affine_forward, Mat};
use super::{axpy, dot};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Slice `offset..offset + rows*cols` of the flat parameter vector.
    Param { offset: usize },
    Input,
    Const,
    /// `x * w^T + b`, `w` is `out x in`, `b` is `1 x out`.
    Affine { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SqNorm(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Tape {
    n_params: usize,
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<f64>,
    inputs: Vec<(Var, Mat)>,
}

impl Gradients {
    /// Gradient with respect to the flat parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn input(&self, v: Var) -> Option<&Mat> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, m)| m)
    }
}

fn forward_op<'a>(op: &Op, val: impl Fn(Var) -> &'a Mat) -> Mat {
    match *op {
        Op::Param { .. } | Op::Input | Op::Const => unreachable!("leaves carry their own value"),
        Op::Affine { x, w, b } => {
            let wm = val(w);
            affine_forward(val(x), wm.as_slice(), b.map(|b| val(b).as_slice()), wm.rows())
        }
        Op::Tanh(a) => val(a).map(f64::tanh),
        Op::Sigmoid(a) => val(a).map(super::sigmoid),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Add(a, b) => val(a).zip_map(val(b), |x, y| x + y),
        Op::Sub(a, b) => val(a).zip_map(val(b), |x, y| x - y),
        Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y),
        Op::Scale(a, s) => val(a).map(|x| x * s),
        Op::Sum(a) => Mat::scalar(val(a).as_slice().iter().sum()),
        Op::SqNorm(a) => {
            let s = val(a).as_slice();
            Mat::scalar(dot(s, s))
        }
    }
}

impl Tape {
    /// A tape whose parameter leaves index into a flat vector of `n_params`.
    pub fn new(n_params: usize) -> Self {
        Tape {
            n_params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, children: &[Var]) -> Var {
        let value = forward_op(&op, |v| &self.nodes[v.0].value);
        let needs_grad = children.iter().any(|c| self.nodes[c.0].needs_grad);
        self.push(op, value, needs_grad)
    }

    /// Parameter leaf reading `rows*cols` entries of `params` from `offset`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let end = offset + rows * cols;
        if end > self.n_params || end > params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter slice {offset}..{end} outside of {} parameters",
                self.n_params.min(params.len())
            )));
        }
        let value = Mat::from_vec(rows, cols, params[offset..end].to_vec())?;
        Ok(self.push(Op::Param { offset }, value, true))
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(Op::Input, value, true)
    }

    /// Leaf that is skipped during `backward`.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Const, value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out_dim, in_dim) = self.shape(w);
        if self.shape(x).1 != in_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim,
                got: self.shape(x).1,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != (1, out_dim) {
                return Err(Error::DimensionMismatch {
                    expected: out_dim,
                    got: self.shape(b).0 * self.shape(b).1,
                });
            }
        }
        let mut children = vec![x, w];
        children.extend(b);
        Ok(self.push_op(Op::Affine { x, w, b }, &children))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push_op(Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push_op(Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push_op(Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push_op(Op::Log(a), &[a])
    }

    fn binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let (ra, ca) = self.shape(a);
            let (rb, cb) = self.shape(b);
            return Err(Error::DimensionMismatch {
                expected: ra * ca,
                got: rb * cb,
            });
        }
        Ok(self.push_op(op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push_op(Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push_op(Op::Sum(a), &[a])
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        self.push_op(Op::SqNorm(a), &[a])
    }

    /// Recomputes every node from the leaf values.
    pub fn replay(&self) -> Vec<Mat> {
        let mut values: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Param { .. } | Op::Input | Op::Const => node.value.clone(),
                ref op => forward_op(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values
    }

    /// Reverse sweep from a scalar `output`, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients> {
        let (rows, cols) = self.shape(output);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        if let Some(i) = self.nodes[..=output.0].iter().position(|n| !n.value.is_finite()) {
            return Err(Error::NonFinite(format!("forward pass (node {i})")));
        }

        let mut adj: Vec<Option<Mat>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Mat::scalar(seed));
        let mut params = vec![0.0; self.n_params];
        let mut inputs = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Param { offset } => {
                    let dst = &mut params[offset..offset + g.as_slice().len()];
                    for (d, s) in dst.iter_mut().zip(g.as_slice()) {
                        *d += s;
                    }
                }
                Op::Input => inputs.push((Var(i), g)),
                Op::Const => {}
                Op::Affine { x, w, b } => {
                    let xv = self.value(x);
                    let wv = self.value(w);
                    let (out_dim, in_dim) = wv.shape();
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Mat::zeros(xv.rows(), in_dim);
                        for r in 0..xv.rows() {
                            let gr = g.row(r);
                            let dst = dx.row_mut(r);
                            for (o, &go) in gr.iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, wv.row(o), dst);
                                }
                            }
                        }
                        accumulate(&mut adj, x, dx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = Mat::zeros(out_dim, in_dim);
                        for r in 0..xv.rows() {
                            let xr = xv.row(r);
                            for (o, &go) in g.row(r).iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, xr, dw.row_mut(o));
                                }
                            }
                        }
                        accumulate(&mut adj, w, dw);
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].needs_grad {
                            let mut db = Mat::zeros(1, out_dim);
                            for r in 0..g.rows() {
                                axpy(1.0, g.row(r), db.as_mut_slice());
                            }
                            accumulate(&mut adj, b, db);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    self.accumulate_if(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    self.accumulate_if(&mut adj, a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * y);
                    self.accumulate_if(&mut adj, a, d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(a), |g, x| g / x);
                    self.accumulate_if(&mut adj, a, d);
                }
                Op::Add(a, b) => {
                    self.accumulate_if(&mut adj, a, g.clone());
                    self.accumulate_if(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate_if(&mut adj, b, g.map(|v| -v));
                    self.accumulate_if(&mut adj, a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(b), |g, y| g * y);
                    let db = g.zip_map(self.value(a), |g, x| g * x);
                    self.accumulate_if(&mut adj, a, da);
                    self.accumulate_if(&mut adj, b, db);
                }
                Op::Scale(a, s) => {
                    self.accumulate_if(&mut adj, a, g.map(|v| v * s));
                }
                Op::Sum(a) => {
                    let s = g.as_slice()[0];
                    self.accumulate_if(&mut adj, a, self.value(a).map(|_| s));
                }
                Op::SqNorm(a) => {
                    let s = 2.0 * g.as_slice()[0];
                    self.accumulate_if(&mut adj, a, self.value(a).map(|x| s * x));
                }
            }
        }
        inputs.reverse();
        Ok(Gradients { params, inputs })
    }

    fn accumulate_if(&self, adj: &mut [Option<Mat>], v: Var, g: Mat) {
        if self.nodes[v.0].needs_grad {
            accumulate(adj, v, g);
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
