use super::kernels;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use super::SetBatch;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds available through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    AddBroadcast,
    ElementwiseMul,
    Relu,
    Sigmoid,
    SoftmaxRows,
    Log,
    Exp,
    Square,
    Sum,
    Mean,
    ConcatCols,
    SliceCols { start: usize, end: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    LogSumExpCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    SetFeatureMap {
        table: Var,
        bias: Var,
        set: Box<SetBatch>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Parameters of one [`ParamSet`] recorded as leaves, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Define-by-run record of tensor operations. Rebuilt for every minibatch.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = a.dims(op)?;
    let (rb, cb) = b.dims(op)?;
    let r = ra.max(rb);
    let c = ca.max(cb);
    let ok = |x: usize, full: usize| x == full || x == 1;
    if !(ok(ra, r) && ok(rb, r) && ok(ca, c) && ok(cb, c)) {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok((r, c))
}

#[inline]
fn bidx(i: usize, j: usize, r: usize, c: usize) -> usize {
    (i % r) * c + (j % c)
}

/// Sums an `R×C` gradient down to a broadcast operand of shape `r×c`.
fn reduce_to(g: &[f64], rows: usize, cols: usize, r: usize, c: usize) -> Vec<f64> {
    if r == rows && c == cols {
        return g.to_vec();
    }
    let mut out = vec![0.0; r * c];
    for i in 0..rows {
        for j in 0..cols {
            out[bidx(i, j, r, c)] += g[i * cols + j];
        }
    }
    out
}

fn binary_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (r, c) = broadcast_dims(op, a, b)?;
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let (av, bv) = (a.values(), b.values());
    let mut out = Vec::with_capacity(r * c);
    if ra == r && ca == c && rb == r && cb == c {
        out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..r {
            for j in 0..c {
                out.push(f(av[bidx(i, j, ra, ca)], bv[bidx(i, j, rb, cb)]));
            }
        }
    }
    Ok(Tensor::from_parts(r, c, out))
}

fn unary_map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.rows(), x.cols(), x.values().iter().map(|&v| f(v)).collect())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("forward {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf tied to a parameter slot.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: params.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records every parameter of `params`; frozen sets become constants.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        let vars = params
            .ids()
            .map(|id| {
                if trainable {
                    self.param(params, id)
                } else {
                    self.constant(params.value(id).clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Records every parameter of `params`; only those accepted by `train` get gradients.
    pub fn bind_where(&mut self, params: &ParamSet, train: impl Fn(ParamId) -> bool) -> Bound {
        let vars = params
            .ids()
            .map(|id| {
                if train(id) {
                    self.param(params, id)
                } else {
                    self.constant(params.value(id).clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Generic entry point mirroring the op table.
    pub fn apply(&mut self, kind: OpKind, operands: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} operand(s), got {}",
                    operands.len()
                )))
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(operands[0], operands[1])
            }
            OpKind::AddBroadcast => {
                arity(2)?;
                self.add(operands[0], operands[1])
            }
            OpKind::ElementwiseMul => {
                arity(2)?;
                self.mul(operands[0], operands[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(operands[0])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(operands[0])
            }
            OpKind::SoftmaxRows => {
                arity(1)?;
                self.softmax_rows(operands[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.log(operands[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(operands[0])
            }
            OpKind::Square => {
                arity(1)?;
                self.square(operands[0])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(operands[0])
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(operands[0])
            }
            OpKind::ConcatCols => self.concat_cols(operands),
            OpKind::SliceCols { start, end } => {
                arity(1)?;
                self.slice_cols(operands[0], start, end)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims("matmul")?;
        let (k2, n) = bv.dims("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[av.shape(), bv.shape()]));
        }
        let out = kernels::matmul(av.values(), bv.values(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(m, n, out), Op::Matmul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_map("add_broadcast", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add_broadcast")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_map("sub_broadcast", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub_broadcast")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_map("elementwise_mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "elementwise_mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = unary_map(self.value(a), |x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = unary_map(self.value(a), |x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Offset(a), rg, "offset")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = unary_map(self.value(a), kernels::relu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = unary_map(self.value(a), kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = unary_map(self.value(a), kernels::softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg, "softplus")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, c) = x.dims("softmax_rows")?;
        let mut out = x.clone();
        if c > 0 {
            out.values_mut().chunks_exact_mut(c).for_each(kernels::softmax_in_place);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, c) = x.dims("log_softmax_rows")?;
        let mut out = x.clone();
        if c > 0 {
            out.values_mut()
                .chunks_exact_mut(c)
                .for_each(kernels::log_softmax_in_place);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg, "log_softmax_rows")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = unary_map(self.value(a), f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = unary_map(self.value(a), f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg, "exp")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = unary_map(self.value(a), |x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).values().iter().fold(0.0, |acc, v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("mean", &[x.shape()]));
        }
        let total = x.values().iter().fold(0.0, |acc, v| acc + v);
        let out = Tensor::scalar(total / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims("sum_cols")?;
        let out: Vec<f64> = (0..r)
            .map(|i| x.values()[i * c..(i + 1) * c].iter().fold(0.0, |acc, v| acc + v))
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(r, 1, out), Op::SumCols(a), rg, "sum_cols")
    }

    /// Row-wise log-sum-exp: `r×c → r×1`.
    pub fn log_sum_exp_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims("log_sum_exp_cols")?;
        if c == 0 {
            return Err(Error::shape("log_sum_exp_cols", &[x.shape()]));
        }
        let out: Vec<f64> = (0..r)
            .map(|i| kernels::log_sum_exp(&x.values()[i * c..(i + 1) * c]))
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(r, 1, out), Op::LogSumExpCols(a), rg, "log_sum_exp_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims("concat_cols")?;
            if pr != r {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.value(v).shape()).collect();
                return Err(Error::shape("concat_cols", &shapes));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(r, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims("concat_rows")?;
            if pc != c {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.value(v).shape()).collect();
                return Err(Error::shape("concat_rows", &shapes));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).values());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(rows, c, out),
            Op::ConcatRows(parts.to_vec()),
            rg,
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims("slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", &[x.shape(), &[start, end]]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x.values()[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(r, w, out), Op::SliceCols(a, start, end), rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims("slice_rows")?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", &[x.shape(), &[start, end]]));
        }
        let out = x.values()[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_parts(end - start, c, out),
            Op::SliceRows(a, start),
            rg,
            "slice_rows",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.values()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(c, r, out), Op::Transpose(a), rg, "transpose")
    }

    /// Permutation-invariant set aggregation, see [`SetBatch`].
    pub fn set_feature_map(&mut self, table: Var, bias: Var, set: SetBatch) -> Result<Var> {
        let (tv, bv) = (self.value(table), self.value(bias));
        let (tr, k) = tv.dims("set_feature_map")?;
        let (br, bk) = bv.dims("set_feature_map")?;
        let max_row = set.table_row.iter().copied().max().unwrap_or(0) as usize;
        if br != 1 || bk != k || (!set.table_row.is_empty() && max_row >= tr) || !set.is_consistent() {
            return Err(Error::shape("set_feature_map", &[tv.shape(), bv.shape()]));
        }
        let out = kernels::set_feature_map(tv.values(), bv.values(), &set);
        let rows = set.rows;
        let rg = self.rg(&[table, bias]);
        self.push(
            Tensor::from_parts(rows, k, out),
            Op::SetFeatureMap {
                table,
                bias,
                set: Box::new(set),
            },
            rg,
            "set_feature_map",
        )
    }

    /// Reverse pass from a scalar `loss`; returns per-node gradients.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Accumulates `d loss / d param` into `params`, consuming the tape.
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                params.accumulate(id, &g);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let (orows, ocols) = (out.rows(), out.cols());
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.requires_grad(*a) {
                    self.acc(grads, *a, kernels::matmul_nt(g, bv.values(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, kernels::matmul_tn(av.values(), g, m, k, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.acc(grads, *a, reduce_to(g, orows, ocols, av.rows(), av.cols()));
                }
                if self.requires_grad(*b) {
                    let mut gb = reduce_to(g, orows, ocols, bv.rows(), bv.cols());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ra, ca, rb, cb) = (av.rows(), av.cols(), bv.rows(), bv.cols());
                let mut ga = vec![0.0; orows * ocols];
                let mut gb = vec![0.0; orows * ocols];
                for i in 0..orows {
                    for j in 0..ocols {
                        let o = i * ocols + j;
                        ga[o] = g[o] * bv.values()[bidx(i, j, rb, cb)];
                        gb[o] = g[o] * av.values()[bidx(i, j, ra, ca)];
                    }
                }
                if self.requires_grad(*a) {
                    self.acc(grads, *a, reduce_to(&ga, orows, ocols, ra, ca));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, reduce_to(&gb, orows, ocols, rb, cb));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Offset(a) => self.acc(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).values();
                let d = g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 });
                self.acc(grads, *a, d.collect());
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out.values()).map(|(gi, y)| gi * y * (1.0 - y));
                self.acc(grads, *a, d.collect());
            }
            Op::Softplus(a) => {
                let x = self.value(*a).values();
                let d = g.iter().zip(x).map(|(gi, &xi)| gi * kernels::sigmoid(xi));
                self.acc(grads, *a, d.collect());
            }
            Op::SoftmaxRows(a) => {
                let y = out.values();
                let mut d = vec![0.0; y.len()];
                for i in 0..orows {
                    let r = i * ocols..(i + 1) * ocols;
                    let dot = g[r.clone()].iter().zip(&y[r.clone()]).fold(0.0, |acc, (gi, yi)| acc + gi * yi);
                    for o in r {
                        d[o] = y[o] * (g[o] - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.values();
                let mut d = vec![0.0; y.len()];
                for i in 0..orows {
                    let r = i * ocols..(i + 1) * ocols;
                    let gsum = g[r.clone()].iter().fold(0.0, |acc, v| acc + v);
                    for o in r {
                        d[o] = g[o] - y[o].exp() * gsum;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a).values();
                self.acc(grads, *a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
            }
            Op::Exp(a) => {
                self.acc(grads, *a, g.iter().zip(out.values()).map(|(gi, y)| gi * y).collect());
            }
            Op::Square(a) => {
                let x = self.value(*a).values();
                self.acc(grads, *a, g.iter().zip(x).map(|(gi, xi)| 2.0 * xi * gi).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let d = (0..x.len()).map(|o| g[o / c]).collect();
                self.acc(grads, *a, d);
            }
            Op::LogSumExpCols(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let y = out.values();
                let d = (0..x.len())
                    .map(|o| g[o / c] * (x.values()[o] - y[o / c]).exp())
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(orows * pc);
                        for i in 0..orows {
                            d.extend_from_slice(&g[i * ocols + offset..i * ocols + offset + pc]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        self.acc(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let c = x.cols();
                let w = end - start;
                let mut d = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    d[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => {
                let mut d = vec![0.0; g.len()];
                for i in 0..orows {
                    for j in 0..ocols {
                        d[j * orows + i] = g[i * ocols + j];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SetFeatureMap { table, bias, set } => {
                let (tv, bv) = (self.value(*table), self.value(*bias));
                let k = bv.cols();
                let mut dt = vec![0.0; tv.len()];
                let mut db = vec![0.0; k];
                for b in 0..set.rows {
                    let gb = &g[b * k..(b + 1) * k];
                    for s in 0..set.slots {
                        let idx = b * set.slots + s;
                        if !set.active[idx] {
                            continue;
                        }
                        let m = set.mult[idx];
                        let r = set.table_row[idx] as usize;
                        let trow = &tv.values()[r * k..(r + 1) * k];
                        let drow = &mut dt[r * k..(r + 1) * k];
                        for j in 0..k {
                            if m * trow[j] + bv.values()[j] > 0.0 {
                                drow[j] += gb[j] * m;
                                db[j] += gb[j];
                            }
                        }
                    }
                }
                self.acc(grads, *table, dt);
                self.acc(grads, *bias, db);
            }
        }
    }
}
