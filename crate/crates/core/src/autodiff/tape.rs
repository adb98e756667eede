use std::collections::HashMap;

use super::kernels::{self, gemm};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Softmax {
        x: Var,
        inv_t: F,
    },
    LogSoftmax {
        x: Var,
        inv_t: F,
    },
    AttentionSoftmax(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    RowCosine {
        a: Var,
        b: Var,
        dot: Vec<F>,
        na: Vec<F>,
        nb: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation so its adjoints can be replayed in reverse.
///
/// Calling [`Tape::backward`] more than once adds into the stored leaf
/// gradients (the second call doubles them) until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
    leaf_grads: HashMap<usize, Vec<F>>,
}

const COSINE_EPS: f64 = 1e-8;

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t`; the leaf is trainable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| F::of_f32(v)).collect();
        self.push(value, t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records `t` as a constant regardless of its flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| F::of_f32(v)).collect();
        self.push(value, t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_values(&mut self, shape: &[usize], value: Vec<F>) -> Result<Var> {
        self.leaf_values(shape, value, false)
    }

    pub fn variable_values(&mut self, shape: &[usize], value: Vec<F>) -> Result<Var> {
        self.leaf_values(shape, value, true)
    }

    fn leaf_values(&mut self, shape: &[usize], value: Vec<F>, rg: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("leaf", shape, &[value.len()]));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, rg))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// First element of `v`, as `f64`; handy for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0].as_f64()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::new(
            node.shape.clone(),
            node.value.iter().map(|x| x.as_f32()).collect(),
        )
        .expect("tape node shape is consistent")
    }

    /// Accumulated gradient of a trainable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of_f64(s);
        let value = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(value, shape, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::of_f64(c);
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(value, shape, Op::AddScalar(x), rg)
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, shape, Op::AddBias(x, bias), rg))
    }

    /// `x[..., k] · w[k, n]`, or `x · wᵀ` with `w[n, k]` when `trans_b`.
    pub fn matmul(&mut self, x: Var, w: Var, trans_b: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 {
            return Err(Error::shape("matmul", &xs, &ws));
        }
        let k = *xs.last().unwrap();
        let (wk, n) = if trans_b { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if k != wk {
            return Err(Error::shape("matmul", &xs, &ws));
        }
        let m = xs[..xs.len() - 1].iter().product();
        let mut value = vec![F::zero(); m * n];
        gemm(self.value(x), self.value(w), &mut value, m, k, n, false, trans_b, false);
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            value,
            shape,
            Op::MatMul {
                a: x,
                b: w,
                trans_b,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape("batch_matmul", &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if k != bk {
            return Err(Error::shape("batch_matmul", &as_, &bs));
        }
        let mut value = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut value[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            vec![batch, m, n],
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let mut value = vec![F::zero(); self.value(x).len()];
        kernels::permute(self.value(x), &shape, axes, &mut value);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            value,
            out_shape,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = F::of_f64(eps);
        let nf = F::of_f64(n as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / n;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut value = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                value[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(value, shape, Op::Gelu(x), rg)
    }

    /// Rows of `table[V, H]` selected by `ids`, giving `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", &ts, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for table with {} rows",
                ts[0]
            )));
        }
        let h = ts[1];
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            value.extend_from_slice(&tv[i * h..(i + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            value,
            vec![ids.len(), h],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x` viewed as `[rows, last]`, giving `[rows.len(), last]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let h = *xs.last().ok_or_else(|| Error::shape("gather_rows", &xs, &[]))?;
        let total = self.value(x).len().checked_div(h).unwrap_or(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::invalid(format!("row {bad} out of range ({total} rows)")));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            value.extend_from_slice(&xv[r * h..(r + 1) * h]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            value,
            vec![rows.len(), h],
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn check_softmax(&self, x: Var, temperature: f64) -> Result<usize> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        match self.shape(x).last() {
            Some(&k) if k > 0 => Ok(k),
            _ => Err(Error::invalid("softmax over an empty trailing axis")),
        }
    }

    /// `softmax(x / temperature)` over the trailing axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let k = self.check_softmax(x, temperature)?;
        let inv_t = F::of_f64(1.0 / temperature);
        let mut value = vec![F::zero(); self.value(x).len()];
        kernels::softmax_rows(self.value(x), k, inv_t, &mut value);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape, Op::Softmax { x, inv_t }, rg))
    }

    /// `log_softmax(x / temperature)` over the trailing axis.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let k = self.check_softmax(x, temperature)?;
        let inv_t = F::of_f64(1.0 / temperature);
        let mut value = vec![F::zero(); self.value(x).len()];
        kernels::log_softmax_rows(self.value(x), k, inv_t, &mut value);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape, Op::LogSoftmax { x, inv_t }, rg))
    }

    /// Softmax over the key axis of attention scores `[B, A, S, S]`.
    ///
    /// `key_mask[b * S + j]` false removes key `j` of sequence `b`: its
    /// probability is exactly zero for every query.
    pub fn attention_softmax(&mut self, scores: Var, key_mask: &[bool]) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 4 || s[2] != s[3] || key_mask.len() != s[0] * s[3] {
            return Err(Error::shape("attention_softmax", &s, &[key_mask.len()]));
        }
        let (heads, seq) = (s[1], s[3]);
        let xv = self.value(scores);
        let mut value = vec![F::zero(); xv.len()];
        for (r, (src, dst)) in xv.chunks(seq).zip(value.chunks_mut(seq)).enumerate() {
            let b = r / (heads * seq);
            let mask = &key_mask[b * seq..(b + 1) * seq];
            let max = src
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .fold(F::neg_infinity(), |m, (&v, _)| m.max(v));
            if max == F::neg_infinity() {
                continue;
            }
            let mut total = F::zero();
            for ((d, &v), &keep) in dst.iter_mut().zip(src).zip(mask) {
                if keep {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            let inv = F::one() / total;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.rg(scores);
        Ok(self.push(value, s, Op::AttentionSoftmax(scores), rg))
    }

    /// `out[r] = x[r, idx[r]]` for `x` viewed as `[idx.len(), K]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().unwrap_or(&0);
        if k == 0 || self.value(x).len() != idx.len() * k {
            return Err(Error::shape("pick", &xs, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::invalid(format!("class index {bad} out of range ({k})")));
        }
        let xv = self.value(x);
        let value = idx.iter().enumerate().map(|(r, &i)| xv[r * k + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            value,
            vec![idx.len()],
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![total], vec![], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let total: F = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(
            vec![total / F::of_f64(n as f64)],
            vec![],
            Op::Mean(x),
            rg,
        ))
    }

    /// Cosine similarity of matching rows of `a[N, H]` and `b[N, H]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let h = *self.shape(a).last().unwrap_or(&0);
        if h == 0 {
            return Err(Error::shape("row_cosine", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.len() / h;
        let eps = F::of_f64(COSINE_EPS);
        let mut dot = vec![F::zero(); rows];
        let mut na = vec![F::zero(); rows];
        let mut nb = vec![F::zero(); rows];
        let mut value = vec![F::zero(); rows];
        for r in 0..rows {
            let (x, y) = (&av[r * h..(r + 1) * h], &bv[r * h..(r + 1) * h]);
            dot[r] = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
            na[r] = x.iter().map(|&p| p * p).sum::<F>().sqrt();
            nb[r] = y.iter().map(|&q| q * q).sum::<F>().sqrt();
            value[r] = dot[r] / (na[r] * nb[r]).max(eps);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            vec![rows],
            Op::RowCosine { a, b, dot, na, nb },
            rg,
        ))
    }

    /// Multiplies by a fixed mask (already scaled by `1 / keep_prob`).
    pub fn dropout(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", self.shape(x), &[mask.len()]));
        }
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape, Op::Dropout { x, mask }, rg))
    }

    /// Propagates adjoints from the scalar `loss` back to every trainable leaf
    /// and adds them into the stored leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = self
                    .leaf_grads
                    .entry(i)
                    .or_insert_with(|| vec![F::zero(); dy.len()]);
                for (g, d) in g.iter_mut().zip(&dy) {
                    *g += *d;
                }
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[F], adj: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| add_into(g, dy));
                acc(*b, &|g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|g| {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                });
                acc(*b, &|g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &|g| {
                g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *s)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &|g| add_into(g, dy)),
            Op::AddBias(x, b) => {
                acc(*x, &|g| add_into(g, dy));
                let n = nodes[b.0].value.len();
                acc(*b, &|g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    // dA[m,k] = dY[m,n] · op(B)ᵀ
                    acc(*a, &|g| gemm(dy, bv, g, m, n, k, false, !*trans_b, true));
                }
                if rg(*b) {
                    if *trans_b {
                        // dB[n,k] = dYᵀ · A
                        acc(*b, &|g| gemm(dy, av, g, n, m, k, true, false, true));
                    } else {
                        // dB[k,n] = Aᵀ · dY
                        acc(*b, &|g| gemm(av, dy, g, k, m, n, true, false, true));
                    }
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (*m, *k, *n);
                for t in 0..*batch {
                    let dyt = &dy[t * m * n..(t + 1) * m * n];
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let bt = &bv[t * k * n..(t + 1) * k * n];
                    acc(*a, &|g| {
                        gemm(dyt, bt, &mut g[t * m * k..(t + 1) * m * k], m, n, k, false, !*trans_b, true)
                    });
                    acc(*b, &|g| {
                        let gt = &mut g[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(dyt, at, gt, n, m, k, true, false, true)
                        } else {
                            gemm(at, dyt, gt, k, m, n, true, false, true)
                        }
                    });
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let mut back = vec![F::zero(); dy.len()];
                kernels::permute(dy, &node.shape, &inverse, &mut back);
                acc(*x, &|g| add_into(g, &back));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = &nodes[gamma.0].value;
                let n = gv.len();
                let nf = F::of_f64(n as f64);
                acc(*gamma, &|g| {
                    for (dr, hr) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &|g| {
                    for dr in dy.chunks(n) {
                        add_into(g, dr);
                    }
                });
                acc(*x, &|g| {
                    for (r, (dr, hr)) in dy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let scale = inv_std[r] / nf;
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            g[r * n + j] += scale * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &|g| {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *g += d * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Embedding { table: x, ids: rows } | Op::GatherRows { x, rows } => {
                let h = *node.shape.last().unwrap_or(&0);
                acc(*x, &|g| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut g[src * h..(src + 1) * h], &dy[r * h..(r + 1) * h]);
                    }
                });
            }
            Op::Softmax { x, inv_t } => {
                let k = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &|g| {
                    for ((gr, dr), yr) in g.chunks_mut(k).zip(dy.chunks(k)).zip(y.chunks(k)) {
                        let dot: F = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..k {
                            gr[j] += *inv_t * yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, inv_t } => {
                let k = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &|g| {
                    for ((gr, dr), yr) in g.chunks_mut(k).zip(dy.chunks(k)).zip(y.chunks(k)) {
                        let total: F = dr.iter().copied().sum();
                        for j in 0..k {
                            gr[j] += *inv_t * (dr[j] - yr[j].exp() * total);
                        }
                    }
                });
            }
            Op::AttentionSoftmax(x) => {
                let k = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &|g| {
                    for ((gr, dr), yr) in g.chunks_mut(k).zip(dy.chunks(k)).zip(y.chunks(k)) {
                        let dot: F = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..k {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let k = *nodes[x.0].shape.last().unwrap();
                acc(*x, &|g| {
                    for (r, &i) in idx.iter().enumerate() {
                        g[r * k + i] += dy[r];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Mean(x) => {
                let n = F::of_f64(nodes[x.0].value.len() as f64);
                acc(*x, &|g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::RowCosine { a, b, dot, na, nb } => {
                let h = *nodes[a.0].shape.last().unwrap();
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let eps = F::of_f64(COSINE_EPS);
                let grad_side = |g: &mut [F], this: &[F], other: &[F], n_this: &[F]| {
                    for r in 0..dot.len() {
                        let denom = na[r] * nb[r];
                        let (x, y) = (&this[r * h..(r + 1) * h], &other[r * h..(r + 1) * h]);
                        let gr = &mut g[r * h..(r + 1) * h];
                        if denom > eps {
                            let c = dot[r] / denom;
                            let n2 = n_this[r] * n_this[r];
                            for j in 0..h {
                                gr[j] += dy[r] * (y[j] / denom - c * x[j] / n2);
                            }
                        } else {
                            for j in 0..h {
                                gr[j] += dy[r] * y[j] / eps;
                            }
                        }
                    }
                };
                acc(*a, &|g| grad_side(g, av, bv, na));
                acc(*b, &|g| grad_side(g, bv, av, nb));
            }
            Op::Dropout { x, mask } => acc(*x, &|g| {
                for ((g, &d), &m) in g.iter_mut().zip(dy).zip(mask) {
                    *g += d * m;
                }
            }),
        }
    }
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
