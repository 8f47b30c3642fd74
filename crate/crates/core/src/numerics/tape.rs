//! Dynamic reverse-mode tape.
//!
//! Each operation appends a node holding its output value and whatever it
//! needs to replay its adjoint. [`Tape::backward`] walks the nodes once in
//! reverse order. A tape built with [`Tape::inference`] records values only and
//! drops backward caches (attention probabilities in particular) as soon as
//! the producing operation returns.

use super::chunked::{self, ChunkGeometry};
use super::kernels::{self, Activation};
use super::meter::ScoreBuffer;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Value-only node on a tape without gradients.
    Detached,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MulConst(Var, Vec<f64>),
    Activate(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
        frozen_zero: bool,
    },
    ConcatCols(Vec<Var>),
    ChunkAttention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        geometry: ChunkGeometry,
        probs: ScoreBuffer,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        pos_weight: f64,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records adjoints.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. It participates in gradients when the tensor's
    /// `requires_grad` flag is set and the tape has gradients enabled.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled && t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Detached
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul")?;
        let (k2, n) = self.value(b).expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "row bias of shape {:?} does not match {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a, s), rg))
    }

    /// Multiplies row `i` of `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.rows() {
            return Err(Error::Dimension(format!(
                "{} row factors for {} rows",
                factors.len(),
                t.rows()
            )));
        }
        let d = t.last_dim();
        let out: Vec<f64> = t
            .data()
            .chunks(d)
            .zip(&factors)
            .flat_map(|(r, &f)| r.iter().map(move |x| x * f))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(a, factors), rg))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "{} constant factors for {} elements",
                factors.len(),
                self.value(a).len()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(a, factors), rg))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| act.apply(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Activate(a, act), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        check_norm_params(d, self.value(gamma), self.value(beta))?;
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(shape, y)?, op, rg))
    }

    /// Row lookup: output row `r` is row `index[r]` of `src`.
    ///
    /// With `frozen_zero`, gradients never flow into row 0 of `src` (the
    /// reserved padding/unknown embedding).
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>, frozen_zero: bool) -> Result<Var> {
        let t = self.value(src);
        let (rows, d) = (t.rows(), t.last_dim());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        if index.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in &index {
            out.extend_from_slice(t.row(i));
        }
        let n = index.len();
        let rg = self.any_grad(&[src]);
        let op = Op::Gather {
            src,
            index,
            frozen_zero,
        };
        Ok(self.push(Tensor::new(vec![n, d], out)?, op, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat of zero parts".into()));
        };
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat row counts differ: {rows} vs {}",
                    t.rows()
                )));
            }
            width += t.last_dim();
        }
        let mut out = vec![0.0; rows * width];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let d = t.last_dim();
            for r in 0..rows {
                out[r * width + offset..r * width + offset + d].copy_from_slice(t.row(r));
            }
            offset += d;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Multi-head attention where each query sees only the keys of its own
    /// `chunk`-row block.
    pub fn chunk_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        chunk: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, width) = self.value(q).expect_matrix("chunk_attention")?;
        for other in [k, v] {
            if self.shape(other) != [rows, width] {
                return Err(Error::Dimension(format!(
                    "attention inputs differ in shape: {:?} vs {:?}",
                    self.shape(q),
                    self.shape(other)
                )));
            }
        }
        let geometry = ChunkGeometry::new(rows, width, chunk, heads);
        let (out, probs) = chunked::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            geometry,
        )?;
        let rg = self.any_grad(&[q, k, v]);
        let value = Tensor::new(vec![rows, width], out)?;
        if !rg {
            drop(probs);
            return Ok(self.push(value, Op::Detached, false));
        }
        let op = Op::ChunkAttention {
            q,
            k,
            v,
            mask: mask.to_vec(),
            geometry,
            probs,
        };
        Ok(self.push(value, op, true))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.weighted_bce_with_logits(logits, targets, None, 1.0)
    }

    /// Binary cross-entropy averaged with per-element `weights` (all ones when
    /// `None`); `pos_weight` scales the positive-class term.
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: Option<&[f64]>,
        pos_weight: f64,
    ) -> Result<Var> {
        let z = self.value(logits);
        let weights = weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; z.len()]);
        let loss = bce_value(z.data(), targets, &weights, pos_weight)?;
        let rg = self.any_grad(&[logits]);
        let op = Op::Bce {
            logits,
            targets: targets.to_vec(),
            weights,
            pos_weight,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detached => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt_acc(g, val(b).data(), &mut da, m, n, k);
                    accumulate(grads, a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn_acc(val(a).data(), g, &mut db, m, k, n);
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if needs(x) {
                        accumulate(grads, x, g.to_vec());
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if needs(bias) {
                    let n = val(bias).len();
                    let mut db = vec![0.0; n];
                    for r in g.chunks(n) {
                        for (acc, x) in db.iter_mut().zip(r) {
                            *acc += x;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let da = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, da);
                }
                if needs(b) {
                    let db = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale(a, s) => {
                if needs(a) {
                    accumulate(grads, a, g.iter().map(|x| x * s).collect());
                }
            }
            Op::ScaleRows(a, factors) => {
                if needs(*a) {
                    let d = val(*a).last_dim();
                    let da = g
                        .chunks(d)
                        .zip(factors)
                        .flat_map(|(r, &f)| r.iter().map(move |x| x * f))
                        .collect();
                    accumulate(grads, *a, da);
                }
            }
            Op::MulConst(a, factors) => {
                if needs(*a) {
                    let da = g.iter().zip(factors).map(|(x, f)| x * f).collect();
                    accumulate(grads, *a, da);
                }
            }
            &Op::Activate(a, act) => {
                if needs(a) {
                    let da = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gi, &x)| gi * act.derivative(x))
                        .collect();
                    accumulate(grads, a, da);
                }
            }
            &Op::SoftmaxRows(a) => {
                if needs(a) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut da = vec![0.0; y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = kernels::dot(yr, gr);
                        for c in 0..n {
                            dr[c] = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(grads, a, da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gm = val(*gamma).data();
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let inv_d = 1.0 / d as f64;
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gm[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..d {
                            let dh = gr[c] * gm[c];
                            dr[c] = inv_std[r] * (dh - inv_d * sum_dh - hr[c] * inv_d * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather {
                src,
                index,
                frozen_zero,
            } => {
                if needs(*src) {
                    let d = val(*src).last_dim();
                    let mut ds = vec![0.0; val(*src).len()];
                    for (gr, &i) in g.chunks(d).zip(index) {
                        if *frozen_zero && i == 0 {
                            continue;
                        }
                        for (acc, x) in ds[i * d..(i + 1) * d].iter_mut().zip(gr) {
                            *acc += x;
                        }
                    }
                    accumulate(grads, *src, ds);
                }
            }
            Op::ConcatCols(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let d = val(p).last_dim();
                    if needs(p) {
                        let mut dp = vec![0.0; rows * d];
                        for r in 0..rows {
                            dp[r * d..(r + 1) * d]
                                .copy_from_slice(&g[r * width + offset..r * width + offset + d]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += d;
                }
            }
            Op::ChunkAttention {
                q,
                k,
                v,
                mask,
                geometry,
                probs,
            } => {
                let (dq, dk, dv) = chunked::backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    mask,
                    probs.as_slice(),
                    g,
                    *geometry,
                );
                for (x, dx) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(x) {
                        accumulate(grads, x, dx);
                    }
                }
            }
            Op::Bce {
                logits,
                targets,
                weights,
                pos_weight,
            } => {
                if needs(*logits) {
                    let total: f64 = weights.iter().sum();
                    let z = val(*logits).data();
                    let dz = z
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&zi, &ti), &wi)| {
                            g[0] * wi * kernels::bce_grad(zi, ti, *pos_weight) / total
                        })
                        .collect();
                    accumulate(grads, *logits, dz);
                }
            }
            &Op::Sum(a) => {
                if needs(a) {
                    accumulate(grads, a, vec![g[0]; val(a).len()]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

pub(crate) fn check_norm_params(d: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if d == 0 {
        return Err(Error::Dimension("layer norm over an empty dimension".into()));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer norm width {d} but gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

pub(crate) fn bce_value(z: &[f64], targets: &[f64], weights: &[f64], pos_weight: f64) -> Result<f64> {
    if z.len() != targets.len() || z.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "bce: {} logits, {} targets, {} weights",
            z.len(),
            targets.len(),
            weights.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract(format!("bce target {t} is not binary")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("bce weights sum to zero".into()));
    }
    let s: f64 = z
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&zi, &ti), &wi)| wi * kernels::bce_term(zi, ti, pos_weight))
        .sum();
    Ok(s / total)
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` did not contribute.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v` shaped like its value; zeros when `v` did
    /// not contribute to the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
