//! Reverse-mode differentiation over vector-valued primitives.
//!
//! A [`Tape`] borrows a flat parameter vector and records every primitive
//! applied to it. Nodes are appended in evaluation order, so a single reverse
//! sweep over the node list visits each recorded op exactly once.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::tensor::dot;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(Range<usize>),
    /// `w` is a `rows x cols` row-major matrix, `x` a vector of length `cols`.
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sum(Var),
    LogSoftmaxRows { x: Var, cols: usize },
    Gather { x: Var, idx: Vec<usize> },
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// Empty for `Param` nodes, whose value is read from the parameter slice.
    value: Vec<f64>,
}

/// Recording of primitive operations for one reverse sweep.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::Param(r) => &self.params[r.clone()],
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value)
    }

    /// A slice `offset..offset+len` of the parameter vector.
    pub fn param(&mut self, offset: usize, len: usize) -> Result<Var> {
        if offset + len > self.params.len() {
            return Err(Error::config(format!(
                "parameter slice {offset}..{} exceeds {} parameters",
                offset + len,
                self.params.len()
            )));
        }
        Ok(self.push(Op::Param(offset..offset + len), Vec::new()))
    }

    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.len() != rows * cols || xv.len() != cols {
            return Err(Error::config(format!(
                "matvec: matrix of {} entries ({rows}x{cols}) against vector of {}",
                wv.len(),
                xv.len()
            )));
        }
        let out = (0..rows).map(|r| dot(&wv[r * cols..(r + 1) * cols], xv)).collect();
        Ok(self.push(Op::MatVec { w, x, rows, cols }, out))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::config(format!("{what}: operand lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + k).collect();
        self.push(Op::AddConst(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = vec![self.value(a).iter().sum()];
        self.push(Op::Sum(a), out)
    }

    /// Treats `a` as a row-major matrix with `cols` columns and log-normalises each row.
    pub fn log_softmax_rows(&mut self, a: Var, cols: usize) -> Result<Var> {
        let val = self.value(a);
        if cols == 0 || val.len() % cols != 0 {
            return Err(Error::config(format!(
                "log_softmax_rows: {} entries not divisible into rows of {cols}",
                val.len()
            )));
        }
        let mut out = val.to_vec();
        for row in out.chunks_mut(cols) {
            crate::nn::tensor::log_softmax_in_place(row);
        }
        Ok(self.push(Op::LogSoftmaxRows { x: a, cols }, out))
    }

    /// Selects entries of `a` by flat index (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let val = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= val.len()) {
            return Err(Error::config(format!("gather index {bad} out of {}", val.len())));
        }
        let out = idx.iter().map(|&i| val[i]).collect();
        Ok(self.push(Op::Gather { x: a, idx }, out))
    }

    /// Concatenates scalar nodes into a vector.
    pub fn stack(&mut self, parts: Vec<Var>) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in &parts {
            let val = self.value(p);
            if val.len() != 1 {
                return Err(Error::config("stack expects scalar nodes"));
            }
            out.push(val[0]);
        }
        Ok(self.push(Op::Stack(parts), out))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// d(output)/d(params). `output` must be a scalar node.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>> {
        self.backward_seeded(output, 1.0)
    }

    /// `seed * d(output)/d(params)`; lets callers weight per-sample losses
    /// without recording the weighting on the tape.
    pub fn backward_seeded(&self, output: Var, seed: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_grad(output, seed, &mut grad)?;
        Ok(grad)
    }

    /// Adds `seed * d(output)/d(params)` into `grad`.
    pub fn accumulate_grad(&self, output: Var, seed: f64, grad: &mut [f64]) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar output, got length {}",
                self.value(output).len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::config("gradient buffer length differs from parameter count"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![seed]);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(r) => {
                    for (dst, gi) in grad[r.clone()].iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let mut gw = vec![0.0; rows * cols];
                    let mut gx = vec![0.0; *cols];
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let wrow = &wv[r * cols..(r + 1) * cols];
                        let gwrow = &mut gw[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            gwrow[c] += gr * xv[c];
                            gx[c] += gr * wrow[c];
                        }
                    }
                    accumulate(&mut adj, *w, gw);
                    accumulate(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| x * k).collect());
                }
                Op::AddConst(a) => accumulate(&mut adj, *a, g),
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::LogSoftmaxRows { x, cols } => {
                    // d/dz_j of Σ_k g_k (z_k − lse) = g_j − softmax_j · Σ_k g_k
                    let y = &self.nodes[i].value;
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in
                        g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols))
                    {
                        let total: f64 = gr.iter().sum();
                        if total == 0.0 && gr.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        for j in 0..*cols {
                            out[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::Gather { x, idx } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (&j, gi) in idx.iter().zip(&g) {
                        gx[j] += gi;
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::Stack(parts) => {
                    for (p, gi) in parts.iter().zip(&g) {
                        accumulate(&mut adj, *p, vec![*gi]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, gi) in existing.iter_mut().zip(&g) {
                *e += gi;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
