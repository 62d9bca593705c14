use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{matmul_into, softmax_in_place, ParamId, ParamStore, Tensor, PROB_CLAMP};
use crate::error::{bail, Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: ParamId, ids: Vec<usize>, cols: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Softmax { input: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { input: Var, start: usize },
    SelectRows { input: Var, rows: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    Dropout { input: Var, mask: Vec<f64> },
    Bce { probs: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be replayed in
/// exact reverse order.
///
/// Parameters are read from a [`ParamStore`] at record time and their
/// gradients are written back into the store by [`Tape::backward`]. Free
/// leaves created with [`Tape::leaf`] keep their gradients in the returned
/// [`Gradients`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    flops: u64,
    stochastic: bool,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the free leaves of a tape after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            flops: 0,
            stochastic: false,
            grad_enabled: true,
        }
    }

    /// A tape whose parameters do not require gradients. Values are
    /// computed identically; backward over it is a no-op for parameters.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operation count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// True once any stochastic op (active dropout) has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => bail!(Dimension, "expected a matrix, got shape {:?}", self.nodes[v.0].shape),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape,
                self.nodes[b.0].shape
            );
        }
        Ok(())
    }

    /// Records a tensor as a leaf. It is differentiable if the tensor
    /// requires grad and the tape has gradients enabled.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, rg)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_values(), Op::Leaf, false))
    }

    /// Records (once per tape) the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param(id),
            self.grad_enabled,
        );
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Row lookup into a rank-2 parameter table. Backward scatters into the
    /// looked-up rows only.
    pub fn gather(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = store.get(table);
        let (rows, cols) = t.dims2()?;
        if ids.is_empty() {
            bail!(Validation, "gather from {} with no ids", store.name(table));
        }
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    kind: "embedding",
                    id,
                    size: rows,
                });
            }
            value.extend_from_slice(t.row(id));
        }
        self.flops += value.len() as u64;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            cols,
        };
        Ok(self.push(vec![ids.len(), cols], value, op, self.grad_enabled))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let (n2, p) = self.dims2(b)?;
        if n != n2 {
            bail!(
                Dimension,
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.nodes[a.0].shape,
                self.nodes[b.0].shape
            );
        }
        let mut out = vec![0.0; m * p];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, n, p);
        self.flops += 2 * (m * n * p) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, p], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let out = transpose_values(&self.nodes[a.0].value, m, n);
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn elementwise2(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(a, b, what)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.flops += out.len() as u64;
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.flops += out.len() as u64;
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Scale(a, c), rg)
    }

    /// Adds a bias vector `[n]` to every row of `a` (`[m×n]` or `[n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.nodes[a.0].shape.last().expect("non-empty shape");
        if self.nodes[bias.0].value.len() != n || self.nodes[bias.0].shape.len() != 1 {
            bail!(
                Dimension,
                "bias {:?} does not fit rows of {:?}",
                self.nodes[bias.0].shape,
                self.nodes[a.0].shape
            );
        }
        let b = &self.nodes[bias.0].value;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % n])
            .collect();
        self.flops += out.len() as u64;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::AddBias(a, bias), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {} invalid for shape {:?}", axis, shape);
        }
        let mut out = self.nodes[a.0].value.clone();
        softmax_in_place(&mut out, &shape, axis);
        self.flops += 3 * out.len() as u64;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { input: a, axis }, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.flops += out.len() as u64;
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| 0.5 * x * (1.0 + math::tanh(gelu_inner(x))))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.nodes[a.0].shape.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.nodes[p.0].value.len() != n {
                bail!(
                    Dimension,
                    "layer norm affine {:?} does not fit {:?}",
                    self.nodes[p.0].shape,
                    self.nodes[a.0].shape
                );
            }
        }
        let x = &self.nodes[a.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = x.len() / n;
        let mut out = vec![0.0; x.len()];
        let mut normed = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..n {
                let h = (xr[c] - mean) * rs;
                normed[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        self.flops += 8 * x.len() as u64;
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            input: a,
            gamma,
            beta,
            normed,
            rstd,
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), out, op, rg))
    }

    /// Concatenation of rank-1 tensors, or of rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let rank = self.nodes[first.0].shape.len();
        if rank > 2 || axis >= rank {
            bail!(Dimension, "concat axis {} invalid for rank {}", axis, rank);
        }
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let ok = s.len() == rank && (rank == 1 || axis == 0 && s[1] == self.nodes[first.0].shape[1] || axis == 1 && s[0] == self.nodes[first.0].shape[0]);
            if !ok {
                bail!(
                    Dimension,
                    "concat along axis {}: {:?} incompatible with {:?}",
                    axis,
                    s,
                    self.nodes[first.0].shape
                );
            }
        }
        let (shape, out) = if rank == 1 || axis == 0 {
            let mut out = Vec::new();
            for p in parts {
                out.extend_from_slice(&self.nodes[p.0].value);
            }
            let shape = if rank == 1 {
                vec![out.len()]
            } else {
                let cols = self.nodes[first.0].shape[1];
                vec![out.len() / cols, cols]
            };
            (shape, out)
        } else {
            let rows = self.nodes[first.0].shape[0];
            let total: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    out.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
                }
            }
            (vec![rows, total], out)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if len == 0 || start + len > n {
            bail!(Dimension, "column slice {}..{} outside width {}", start, start + len, n);
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, len], out, Op::SliceCols { input: a, start }, rg))
    }

    /// Selected rows of a matrix (indices may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if rows.is_empty() {
            bail!(Dimension, "empty row selection");
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                bail!(Dimension, "row {} outside {} rows", r, m);
            }
            out.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Column means of a matrix, shape `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.flops += (m * n) as u64;
        let rg = self.rg(a);
        Ok(self.push(vec![1, n], out, Op::MeanRows(a), rg))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.flops += self.nodes[a.0].value.len() as u64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.nodes[a.0].shape, shape);
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by `1/(1-p)`. Identity when `rng` is `None` or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Config, "dropout rate {} outside [0, 1)", p);
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[a.0].value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.flops += out.len() as u64;
        let rg = self.rg(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Dropout { input: a, mask }, rg))
    }

    /// Summed binary cross entropy of probabilities against `{0,1}` labels.
    pub fn bce_loss(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = &self.nodes[probs.0].value;
        if p.len() != labels.len() {
            bail!(Dimension, "{} probabilities but {} labels", p.len(), labels.len());
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            bail!(Validation, "label {} is not in {{0, 1}}", bad);
        }
        let loss = p
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * math::ln(q) + (1.0 - y) * math::ln(1.0 - q))
            })
            .sum();
        self.flops += 4 * p.len() as u64;
        let rg = self.rg(probs);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar output. Parameter gradients are
    /// accumulated into `store`; free-leaf gradients are returned.
    pub fn backward(&self, output: Var, mut store: Option<&mut ParamStore>) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].shape
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    if let Some(s) = store.as_deref_mut() {
                        add_into(s.grad_slot(*id), &g);
                    }
                }
                Op::Gather { table, ids, cols } => {
                    if let Some(s) = store.as_deref_mut() {
                        let slot = s.grad_slot(*table);
                        for (i, &row) in ids.iter().enumerate() {
                            add_into(&mut slot[row * cols..(row + 1) * cols], &g[i * cols..(i + 1) * cols]);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let p = self.nodes[b.0].shape[1];
                    if self.rg(*a) {
                        let bt = transpose_values(&self.nodes[b.0].value, n, p);
                        let mut da = vec![0.0; m * n];
                        matmul_into(&g, &bt, &mut da, m, p, n);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let at = transpose_values(&self.nodes[a.0].value, m, n);
                        let mut db = vec![0.0; n * p];
                        matmul_into(&at, &g, &mut db, n, m, p);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    accumulate(&mut grads, *a, transpose_values(&g, n, m));
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = g.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = g.iter().zip(&self.nodes[a.0].value).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::AddBias(a, bias) => {
                    if self.rg(*bias) {
                        let n = self.nodes[bias.0].value.len();
                        let mut db = vec![0.0; n];
                        for (i, v) in g.iter().enumerate() {
                            db[i % n] += v;
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Softmax { input, axis } => {
                    let y = &node.value;
                    let shape = &node.shape;
                    let extent = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * extent * inner + i;
                            let dot: f64 = (0..extent).map(|e| y[base + e * inner] * g[base + e * inner]).sum();
                            for e in 0..extent {
                                let k = base + e * inner;
                                dx[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gv, &x)| gv * gelu_derivative(x))
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    normed,
                    rstd,
                } => {
                    let n = self.nodes[gamma.0].value.len();
                    let gam = &self.nodes[gamma.0].value;
                    let rows = g.len() / n;
                    if self.rg(*gamma) {
                        let mut dg = vec![0.0; n];
                        for (i, v) in g.iter().enumerate() {
                            dg[i % n] += v * normed[i];
                        }
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        let mut db = vec![0.0; n];
                        for (i, v) in g.iter().enumerate() {
                            db[i % n] += v;
                        }
                        accumulate(&mut grads, *beta, db);
                    }
                    if self.rg(*input) {
                        let mut dx = vec![0.0; g.len()];
                        for r in 0..rows {
                            let mut sum_g = 0.0;
                            let mut sum_gh = 0.0;
                            for c in 0..n {
                                let gh = g[r * n + c] * gam[c];
                                sum_g += gh;
                                sum_gh += gh * normed[r * n + c];
                            }
                            let nf = n as f64;
                            for c in 0..n {
                                let gh = g[r * n + c] * gam[c];
                                dx[r * n + c] = rstd[r] / nf * (nf * gh - sum_g - normed[r * n + c] * sum_gh);
                            }
                        }
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Concat { parts, axis } => {
                    let rank = node.shape.len();
                    if rank == 1 || *axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let len = self.nodes[p.0].value.len();
                            if self.rg(*p) {
                                accumulate(&mut grads, *p, g[offset..offset + len].to_vec());
                            }
                            offset += len;
                        }
                    } else {
                        let rows = node.shape[0];
                        let total = node.shape[1];
                        let mut col = 0;
                        for p in parts {
                            let c = self.nodes[p.0].shape[1];
                            if self.rg(*p) {
                                let mut d = Vec::with_capacity(rows * c);
                                for r in 0..rows {
                                    d.extend_from_slice(&g[r * total + col..r * total + col + c]);
                                }
                                accumulate(&mut grads, *p, d);
                            }
                            col += c;
                        }
                    }
                }
                Op::SliceCols { input, start } => {
                    let (m, n) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                    let len = node.shape[1];
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::SelectRows { input, rows } => {
                    let (m, n) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                    let mut d = vec![0.0; m * n];
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::MeanRows(a) => {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let inv = 1.0 / m as f64;
                    let mut d = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        d.extend(g.iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, vec![g[0]; self.nodes[a.0].value.len()]);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Dropout { input, mask } => {
                    accumulate(&mut grads, *input, g.iter().zip(mask).map(|(x, m)| x * m).collect());
                }
                Op::Bce { probs, labels } => {
                    let d = self.nodes[probs.0]
                        .value
                        .iter()
                        .zip(labels)
                        .map(|(&q, &y)| {
                            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
                                0.0
                            } else {
                                g[0] * (-y / q + (1.0 - y) / (1.0 - q))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &d),
        slot @ None => *slot = Some(d),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_values(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_derivative(x: f64) -> f64 {
    let t = math::tanh(gelu_inner(x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}
