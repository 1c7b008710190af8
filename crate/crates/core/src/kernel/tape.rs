//! Reverse-mode differentiation over a linear record of primitive
//! applications. Nodes are appended in execution order, so walking the record
//! backwards is a valid topological order and visits every node once.

use rand::Rng;

use super::ops::{self, Mode};
use super::tensor::Tensor;
use crate::error::{Result, SituError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the per-annotator cross-entropies of one row are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotatorReduction {
    /// Minimum over annotators; the gradient follows the first minimiser.
    Min,
    /// Mean over annotators, i.e. one cross-entropy term per annotator label.
    Mean,
}

/// One supervised row of a logits matrix.
#[derive(Debug, Clone)]
pub struct CeRow<T> {
    pub row: usize,
    pub targets: Vec<usize>,
    pub weight: T,
}

/// One supervised row of a box matrix (`[n×4]`).
#[derive(Debug, Clone)]
pub struct L1Row<T> {
    pub row: usize,
    pub target: [T; 4],
    pub weight: T,
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    q_len: usize,
    kv_len: usize,
    heads: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SumAll(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    AttnWeights {
        q: Var,
        k: Var,
        dims: AttnDims,
    },
    AttnApply {
        w: Var,
        v: Var,
        dims: AttnDims,
    },
    HeadMean {
        w: Var,
        dims: AttnDims,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<CeRow<T>>,
        reduction: AnnotatorReduction,
        winners: Vec<usize>,
    },
    L1 {
        pred: Var,
        rows: Vec<L1Row<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], one slot per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: &[T]) {
    match slot {
        Some(t) => {
            for (a, &d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a);
        let bt = self.value(b);
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(SituError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let m = bt.shape()[1];
        let out = ops::matmul(self.value(a).data(), bt.data(), n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if self.value(bias).len() != m {
            return Err(SituError::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..n {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SituError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            ops::softmax_in_place(out.row_mut(r));
        }
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(SituError::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (y, cache) = ops::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: cache.xhat,
                rstd: cache.rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout. In eval mode (or at rate 0) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T, R>(self.value(x).len(), rate, rng);
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| SituError::shape("concat_cols", "no inputs"))?;
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows || self.shape(p).len() != 2 {
                return Err(SituError::shape(
                    "concat_cols",
                    format!("part {:?} does not have {} rows", self.shape(p), rows),
                ));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(SituError::shape(
                    "gather_rows",
                    format!("row {} out of range for {} rows", i, n),
                ));
            }
            data.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::matrix(indices.len(), d, data)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Post-softmax attention weights, rows laid out as
    /// `[batch][head][query]` and `kv_len` columns.
    ///
    /// `q` is `[batch*q_len × width]`, `k` is `[batch*kv_len × width]`.
    pub fn attention_weights(
        &mut self,
        q: Var,
        k: Var,
        batch: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qr, width) = self.dims2(q);
        let (kr, kw) = self.dims2(k);
        if batch == 0 || qr % batch != 0 || kr % batch != 0 || kw != width {
            return Err(SituError::shape(
                "attention",
                format!("Q {:?}, K {:?}, batch {}", self.shape(q), self.shape(k), batch),
            ));
        }
        let dims = AttnDims {
            batch,
            q_len: qr / batch,
            kv_len: kr / batch,
            heads,
        };
        let w = ops::attention_weights(
            self.value(q).data(),
            self.value(k).data(),
            batch,
            dims.q_len,
            dims.kv_len,
            width,
            heads,
            key_mask,
        )?;
        let out = Tensor::matrix(batch * heads * dims.q_len, dims.kv_len, w)?;
        let ng = self.needs(q) || self.needs(k);
        Ok(self.push(out, Op::AttnWeights { q, k, dims }, ng))
    }

    /// Applies weights from [`Tape::attention_weights`] to `v`
    /// (`[batch*kv_len × width]`), giving `[batch*q_len × width]`.
    pub fn attention_apply(&mut self, w: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (wr, kv_len) = self.dims2(w);
        let (vr, width) = self.dims2(v);
        if batch == 0
            || heads == 0
            || wr % (batch * heads) != 0
            || vr != batch * kv_len
            || width % heads != 0
        {
            return Err(SituError::shape(
                "attention_apply",
                format!("W {:?}, V {:?}, batch {}", self.shape(w), self.shape(v), batch),
            ));
        }
        let dims = AttnDims {
            batch,
            q_len: wr / (batch * heads),
            kv_len,
            heads,
        };
        let out = ops::attention_apply(
            self.value(w).data(),
            self.value(v).data(),
            batch,
            dims.q_len,
            kv_len,
            width,
            heads,
        );
        let t = Tensor::matrix(batch * dims.q_len, width, out)?;
        let ng = self.needs(w) || self.needs(v);
        Ok(self.push(t, Op::AttnApply { w, v, dims }, ng))
    }

    /// Averages attention weights over heads: `[batch*q_len × kv_len]`.
    pub fn head_mean(&mut self, w: Var, batch: usize, heads: usize) -> Result<Var> {
        let (wr, kv_len) = self.dims2(w);
        if batch == 0 || heads == 0 || wr % (batch * heads) != 0 {
            return Err(SituError::shape(
                "head_mean",
                format!("W {:?}, batch {}, heads {}", self.shape(w), batch, heads),
            ));
        }
        let q_len = wr / (batch * heads);
        let inv = T::one() / T::lit(heads as f64);
        let src = self.value(w);
        let mut out = vec![T::zero(); batch * q_len * kv_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let s = src.row((b * heads + h) * q_len + i);
                    let o = &mut out[(b * q_len + i) * kv_len..(b * q_len + i + 1) * kv_len];
                    for (x, &y) in o.iter_mut().zip(s) {
                        *x += y * inv;
                    }
                }
            }
        }
        let dims = AttnDims {
            batch,
            q_len,
            kv_len,
            heads,
        };
        let ng = self.needs(w);
        Ok(self.push(
            Tensor::matrix(batch * q_len, kv_len, out)?,
            Op::HeadMean { w, dims },
            ng,
        ))
    }

    /// Weighted sum over rows of per-row annotator cross-entropies.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        rows: Vec<CeRow<T>>,
        reduction: AnnotatorReduction,
    ) -> Result<Var> {
        let lt = self.value(logits);
        let (n, k) = (lt.rows(), lt.cols());
        let mut total = T::zero();
        let mut winners = Vec::with_capacity(rows.len());
        for r in &rows {
            if r.row >= n {
                return Err(SituError::shape(
                    "cross_entropy",
                    format!("row {} out of range for {} rows", r.row, n),
                ));
            }
            if r.targets.is_empty() {
                return Err(SituError::InvalidArgument(
                    "cross_entropy: empty annotator list".into(),
                ));
            }
            let row = lt.row(r.row);
            let lse = ops::log_sum_exp(row);
            let mut best = 0;
            let mut best_loss = T::infinity();
            let mut mean = T::zero();
            for (j, &t) in r.targets.iter().enumerate() {
                if t >= k {
                    return Err(SituError::InvalidArgument(format!(
                        "class index {} out of range for {} classes",
                        t, k
                    )));
                }
                let l = lse - row[t];
                if l < best_loss {
                    best_loss = l;
                    best = j;
                }
                mean += l;
            }
            let value = match reduction {
                AnnotatorReduction::Min => best_loss,
                AnnotatorReduction::Mean => mean / T::lit(r.targets.len() as f64),
            };
            total += r.weight * value;
            winners.push(best);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                rows,
                reduction,
                winners,
            },
            ng,
        ))
    }

    /// Weighted sum over rows of the L1 distance between a predicted box row
    /// and its target.
    pub fn l1(&mut self, pred: Var, rows: Vec<L1Row<T>>) -> Result<Var> {
        let pt = self.value(pred);
        if pt.cols() != 4 {
            return Err(SituError::shape(
                "l1",
                format!("expected [n×4] boxes, got {:?}", pt.shape()),
            ));
        }
        let mut total = T::zero();
        for r in &rows {
            if r.row >= pt.rows() {
                return Err(SituError::shape(
                    "l1",
                    format!("row {} out of range for {} rows", r.row, pt.rows()),
                ));
            }
            let d: T = pt
                .row(r.row)
                .iter()
                .zip(&r.target)
                .map(|(&a, &b)| (a - b).abs())
                .sum();
            total += r.weight * d;
        }
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(total), Op::L1 { pred, rows }, ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(SituError::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(shapes[output.0].clone(), vec![T::one()])?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads, &shapes);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        shapes: &[Vec<usize>],
    ) {
        let gd = g.data();
        let mut send = |v: Var, delta: &[T]| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], &shapes[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims2(*a);
                let m = self.value(*b).cols();
                if self.needs(*a) {
                    let da = ops::matmul_a_bt(gd, self.value(*b).data(), n, m, k);
                    send(*a, &da);
                }
                if self.needs(*b) {
                    let db = ops::matmul_at_b(self.value(*a).data(), gd, n, k, m);
                    send(*b, &db);
                }
            }
            Op::AddBias(x, b) => {
                send(*x, gd);
                if self.needs(*b) {
                    let m = g.cols();
                    let mut db = vec![T::zero(); m];
                    for r in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(*b, &db);
                }
            }
            Op::Add(a, b) => {
                send(*a, gd);
                send(*b, gd);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let da: Vec<T> = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    send(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    send(*b, &db);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<T> = gd.iter().map(|&v| v * *c).collect();
                send(*x, &d);
            }
            Op::SumAll(x) => {
                let d = vec![gd[0]; self.value(*x).len()];
                send(*x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<T> = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                send(*x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<T> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                send(*x, &d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dcols = g.cols();
                let rows = g.rows();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); dcols];
                    let mut db = vec![T::zero(); dcols];
                    for r in 0..rows {
                        for c in 0..dcols {
                            let gv = gd[r * dcols + c];
                            dg[c] += gv * xhat[r * dcols + c];
                            db[c] += gv;
                        }
                    }
                    send(*gamma, &dg);
                    send(*beta, &db);
                }
                if self.needs(*x) {
                    let dn = T::lit(dcols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..dcols {
                            let dh = gd[r * dcols + c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * dcols + c];
                        }
                        for c in 0..dcols {
                            let dh = gd[r * dcols + c] * gam[c];
                            let h = xhat[r * dcols + c];
                            dx[r * dcols + c] = rstd[r] * (dh - sum_dh / dn - h * sum_dh_h / dn);
                        }
                    }
                    send(*x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let d: Vec<T> = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                send(*x, &d);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        send(p, &d);
                    }
                    offset += c;
                }
            }
            Op::GatherRows { table, indices } => {
                let t = self.value(*table);
                let c = t.cols();
                let mut d = vec![T::zero(); t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[r * c + j];
                    }
                }
                send(*table, &d);
            }
            Op::AttnWeights { q, k, dims } => {
                let AttnDims {
                    batch,
                    q_len,
                    kv_len,
                    heads,
                } = *dims;
                let width = self.value(*q).cols();
                let dh = width / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let w = node.value.data();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut ds = vec![T::zero(); kv_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..q_len {
                            let base = ((b * heads + h) * q_len + i) * kv_len;
                            let wr = &w[base..base + kv_len];
                            let gr = &gd[base..base + kv_len];
                            let dot: T = wr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..kv_len {
                                ds[j] = wr[j] * (gr[j] - dot) * scale;
                            }
                            let qo = (b * q_len + i) * width + c0;
                            for (j, &dsj) in ds.iter().enumerate() {
                                if dsj == T::zero() {
                                    continue;
                                }
                                let ko = (b * kv_len + j) * width + c0;
                                for c in 0..dh {
                                    dq[qo + c] += dsj * kv[ko + c];
                                    dk[ko + c] += dsj * qv[qo + c];
                                }
                            }
                        }
                    }
                }
                send(*q, &dq);
                send(*k, &dk);
            }
            Op::AttnApply { w, v, dims } => {
                let AttnDims {
                    batch,
                    q_len,
                    kv_len,
                    heads,
                } = *dims;
                let width = self.value(*v).cols();
                let dh = width / heads;
                let wv = self.value(*w).data();
                let vv = self.value(*v).data();
                let mut dw = vec![T::zero(); wv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..q_len {
                            let base = ((b * heads + h) * q_len + i) * kv_len;
                            let go = (b * q_len + i) * width + c0;
                            let grow = &gd[go..go + dh];
                            for j in 0..kv_len {
                                let vo = (b * kv_len + j) * width + c0;
                                let vrow = &vv[vo..vo + dh];
                                dw[base + j] = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                                let wij = wv[base + j];
                                if wij != T::zero() {
                                    for c in 0..dh {
                                        dv[vo + c] += wij * grow[c];
                                    }
                                }
                            }
                        }
                    }
                }
                send(*w, &dw);
                send(*v, &dv);
            }
            Op::HeadMean { w, dims } => {
                let AttnDims {
                    batch,
                    q_len,
                    kv_len,
                    heads,
                } = *dims;
                let inv = T::one() / T::lit(heads as f64);
                let mut d = vec![T::zero(); batch * heads * q_len * kv_len];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..q_len {
                            let src = (b * q_len + i) * kv_len;
                            let dst = ((b * heads + h) * q_len + i) * kv_len;
                            for j in 0..kv_len {
                                d[dst + j] = gd[src + j] * inv;
                            }
                        }
                    }
                }
                send(*w, &d);
            }
            Op::CrossEntropy {
                logits,
                rows,
                reduction,
                winners,
            } => {
                let lt = self.value(*logits);
                let k = lt.cols();
                let mut d = vec![T::zero(); lt.len()];
                let mut probs = vec![T::zero(); k];
                for (r, &win) in rows.iter().zip(winners) {
                    probs.copy_from_slice(lt.row(r.row));
                    ops::softmax_in_place(&mut probs);
                    let scale = gd[0] * r.weight;
                    let o = r.row * k;
                    for (j, &p) in probs.iter().enumerate() {
                        d[o + j] += scale * p;
                    }
                    match reduction {
                        AnnotatorReduction::Min => d[o + r.targets[win]] -= scale,
                        AnnotatorReduction::Mean => {
                            let share = scale / T::lit(r.targets.len() as f64);
                            for &t in &r.targets {
                                d[o + t] -= share;
                            }
                        }
                    }
                }
                send(*logits, &d);
            }
            Op::L1 { pred, rows } => {
                let pt = self.value(*pred);
                let mut d = vec![T::zero(); pt.len()];
                for r in rows {
                    for (c, (&a, &b)) in pt.row(r.row).iter().zip(&r.target).enumerate() {
                        let s = if a > b {
                            T::one()
                        } else if a < b {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[r.row * 4 + c] += gd[0] * r.weight * s;
                    }
                }
                send(*pred, &d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_param_gradient_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![3.0]));
        let s = tape.sum_all(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        // z = 2x^2
        assert_eq!(g.wrt(x).data(), &[12.0]);
    }

    #[test]
    fn eval_dropout_returns_same_node() {
        let mut tape = Tape::<f32>::new();
        let mut rng = rand::rng();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
    }
}
