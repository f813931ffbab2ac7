use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        seq: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Insertion-ordered tape. Inputs always precede the nodes that consume them,
/// so a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gaussian_cdf(x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.detached())
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.last_dim();
        if tr.numel() != n {
            return Err(shape_err(op, tx, tr));
        }
        Ok(n)
    }

    /// `x + row`, broadcasting `row` over every trailing-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("add_row", x, row)?;
        let r = self.value(row).data();
        let mut out = self.value(x).detached();
        for chunk in out.data_mut().chunks_mut(n) {
            kernels::add_assign(chunk, r);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x ⊙ row` along the trailing axis (column scaling for matrices).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).detached();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, s) in chunk.iter_mut().zip(&r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).detached();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "layer_norm eps must be non-negative, got {eps}"
            )));
        }
        let n = self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        let tx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = tt.dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("embedding needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences of length `seq`, packed row-wise as `[groups·seq × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2("attention")?;
        if tk.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tv));
        }
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "attention: {rows}×{d} input is incompatible with seq {seq} and {heads} heads"
            )));
        }
        let groups = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(g * seq + i) * d + h * dh..][..dh];
                    let p = &mut probs[base + i * seq..base + (i + 1) * seq];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(g * seq + j) * d + h * dh..][..dh];
                        *pj = kernels::dot(qi, kj) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(g * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(g * seq + j) * d + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Averages consecutive blocks of `seq` rows: `[groups·seq × d] → [groups × d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = tx.dims2("mean_pool")?;
        if seq == 0 || rows % seq != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "mean_pool: {rows} rows do not split into sequences of {seq}"
            )));
        }
        let groups = rows / seq;
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let o = &mut out[g * d..(g + 1) * d];
            for i in 0..seq {
                kernels::add_assign(o, &tx.data()[(g * seq + i) * d..][..d]);
            }
            o.iter_mut().for_each(|v| *v /= seq as f64);
        }
        let out = Tensor::matrix(groups, d, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanPool { x, seq }, rg))
    }

    /// Scales each trailing-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = tx.detached();
        let mut norms = Vec::with_capacity(tx.numel() / n);
        for chunk in out.data_mut().chunks_mut(n) {
            let norm = kernels::dot(chunk, chunk).sqrt().max(1e-300);
            chunk.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Mean softmax cross-entropy of each logit row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: cols,
                });
            }
            let row = &tl.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar loss. Every differentiable leaf ends up
    /// with a gradient (zeros when the loss does not depend on it); fan-out
    /// contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul").unwrap();
                let n = val(*b).last_dim();
                if wants(*a) {
                    acc(*a, &mut |g| kernels::matmul_nt_acc(gout, val(*b).data(), m, n, k, g));
                }
                if wants(*b) {
                    acc(*b, &mut |g| kernels::matmul_tn_acc(val(*a).data(), gout, m, k, n, g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| kernels::add_assign(g, gout));
                acc(*b, &mut |g| kernels::add_assign(g, gout));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |g| {
                    for ((gi, go), bv) in g.iter_mut().zip(gout).zip(val(*b).data()) {
                        *gi += go * bv;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, go), av) in g.iter_mut().zip(gout).zip(val(*a).data()) {
                        *gi += go * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = val(*row).numel();
                acc(*x, &mut |g| kernels::add_assign(g, gout));
                acc(*row, &mut |g| {
                    for chunk in gout.chunks(n) {
                        kernels::add_assign(g, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let r = val(*row).data();
                let n = r.len();
                acc(*x, &mut |g| {
                    for (gc, oc) in g.chunks_mut(n).zip(gout.chunks(n)) {
                        for ((gi, go), s) in gc.iter_mut().zip(oc).zip(r) {
                            *gi += go * s;
                        }
                    }
                });
                acc(*row, &mut |g| {
                    for (xc, oc) in val(*x).data().chunks(n).zip(gout.chunks(n)) {
                        for ((gi, go), xv) in g.iter_mut().zip(oc).zip(xc) {
                            *gi += go * xv;
                        }
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * factor;
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2("transpose").unwrap();
                // gout is n×m
                let back = kernels::transpose(gout, n, m);
                acc(*x, &mut |g| kernels::add_assign(g, &back));
            }
            Op::Gelu(x) => {
                acc(*x, &mut |g| {
                    for ((gi, go), &xv) in g.iter_mut().zip(gout).zip(val(*x).data()) {
                        *gi += go * (gaussian_cdf(xv) + xv * gaussian_pdf(xv));
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let n = gv.len();
                acc(*gain, &mut |g| {
                    for (hc, oc) in xhat.chunks(n).zip(gout.chunks(n)) {
                        for ((gi, go), h) in g.iter_mut().zip(oc).zip(hc) {
                            *gi += go * h;
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for oc in gout.chunks(n) {
                        kernels::add_assign(g, oc);
                    }
                });
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; n];
                    for (r, ((gc, oc), hc)) in g
                        .chunks_mut(n)
                        .zip(gout.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        for c in 0..n {
                            dxhat[c] = oc[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = kernels::dot(&dxhat, hc) / n as f64;
                        for c in 0..n {
                            gc[c] += rstd[r] * (dxhat[c] - mean_d - hc[c] * mean_dh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).last_dim();
                acc(*table, &mut |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        kernels::add_assign(&mut g[id * d..(id + 1) * d], &gout[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                seq,
                heads,
                probs,
            } => {
                let (groups, seq, heads) = (*groups, *seq, *heads);
                let d = val(*q).last_dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let rows = groups * seq;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                for g in 0..groups {
                    for h in 0..heads {
                        let base = (g * heads + h) * seq * seq;
                        let col = |r: usize| (g * seq + r) * d + h * dh;
                        for i in 0..seq {
                            let p = &probs[base + i * seq..base + (i + 1) * seq];
                            let goi = &gout[col(i)..col(i) + dh];
                            for j in 0..seq {
                                dp[j] = kernels::dot(goi, &vd[col(j)..col(j) + dh]);
                                let dvj = &mut dv[col(j)..col(j) + dh];
                                for (a, b) in dvj.iter_mut().zip(goi) {
                                    *a += p[j] * b;
                                }
                            }
                            let inner = kernels::dot(p, &dp);
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let (ci, cj) = (col(i), col(j));
                                for c in 0..dh {
                                    dq[ci + c] += ds * kd[cj + c];
                                    dk[cj + c] += ds * qd[ci + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |g| kernels::add_assign(g, &dq));
                acc(*k, &mut |g| kernels::add_assign(g, &dk));
                acc(*v, &mut |g| kernels::add_assign(g, &dv));
            }
            Op::MeanPool { x, seq } => {
                let d = val(*x).last_dim();
                let seq = *seq;
                acc(*x, &mut |g| {
                    for (r, gr) in g.chunks_mut(d).enumerate() {
                        let go = &gout[(r / seq) * d..][..d];
                        for (a, b) in gr.iter_mut().zip(go) {
                            *a += b / seq as f64;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = nodes[idx].value.data();
                let n = y.len() / norms.len();
                acc(*x, &mut |g| {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let proj = kernels::dot(yr, gr);
                        for c in 0..n {
                            g[r * n + c] += (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let s = gout[0] / rows as f64;
                acc(*logits, &mut |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * cols + c] += s * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0] / n));
            }
        }
    }
}
