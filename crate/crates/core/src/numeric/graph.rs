use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows {
        x: Var,
        scale: f64,
    },
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    BlockScores {
        q: Var,
        k: Var,
        block: usize,
    },
    BlockMatMul {
        p: Var,
        v: Var,
        block: usize,
    },
    AppendToken {
        x: Var,
        token: Var,
        block: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMeanRows {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    SqDist(Var, Var),
    WeightedSum {
        x: Var,
        entries: Vec<(usize, usize, f64)>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are recorded in evaluation order, so
/// walking them backwards is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(msg()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        check(k == k2, || {
            format!("matmul inner dimensions {n}x{k} · {k2}x{m}")
        })?;
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::from_rows(n, m, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.dims(a) == self.dims(b), || {
            format!("add shapes {:?} vs {:?}", self.dims(a), self.dims(b))
        })?;
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1×m` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        check(self.value(bias).len() == c, || {
            format!("bias length {} for {c} columns", self.value(bias).len())
        })?;
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Multiplies every row of `a` elementwise by a `1×m` row vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        check(self.value(gain).len() == c, || {
            format!("gain length {} for {c} columns", self.value(gain).len())
        })?;
        let g = self.value(gain).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(g) {
                *x *= y;
            }
        }
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::MulRow(a, gain), &[a, gain]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::Scale(a, s), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::Relu(a), &[a]))
    }

    /// Row-wise `softmax(scale · x)`, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::Argument(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row, scale);
        }
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::SoftmaxRows { x, scale }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Per-row standardisation with population variance, no affine part.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let value = Tensor::from_rows(r, c, data)?;
        Ok(self.push(value, Op::LayerNormRows { x, inv_std }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of zero tensors".into())?;
        let rows = self.dims(parts[0]).0;
        check(parts.iter().all(|p| self.dims(*p).0 == rows), || {
            "concat row counts differ".into()
        })?;
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::from_rows(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        check(start + len <= c, || {
            format!("column slice {start}..{} of {c}", start + len)
        })?;
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let value = Tensor::from_rows(r, len, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Blockwise `Q_b · K_bᵀ`. `k` is split into blocks of `block` rows and
    /// `q` into the same number of equal blocks, so `q` may carry fewer rows
    /// per block than `k` (for example one query row per sequence). The
    /// result stacks the `q_rows×block` score matrices vertically.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        check(d == dk, || format!("block_scores widths {d} vs {dk}"))?;
        check(block > 0 && nk % block == 0, || {
            format!("{nk} rows not divisible into blocks of {block}")
        })?;
        let count = nk / block;
        check(count > 0 && nq % count == 0, || {
            format!("{nq} query rows for {count} blocks")
        })?;
        let qb = nq / count;
        let mut out = vec![0.0; nq * block];
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        for b in 0..count {
            gemm(
                qb,
                d,
                block,
                &qd[b * qb * d..(b + 1) * qb * d],
                false,
                &kd[b * block * d..(b + 1) * block * d],
                true,
                0.0,
                &mut out[b * qb * block..(b + 1) * qb * block],
            );
        }
        let value = Tensor::from_rows(nq, block, out)?;
        Ok(self.push(value, Op::BlockScores { q, k, block }, &[q, k]))
    }

    /// Blockwise `P_b · V_b` where `V_b` has `block` rows and `P_b` has
    /// `block` columns and an equal share of the rows of `p`.
    pub fn block_matmul(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let (np, l) = self.dims(p);
        let (nv, d) = self.dims(v);
        check(l == block && block > 0 && nv % block == 0, || {
            format!("block_matmul {np}x{l} · {nv}x{d} with block {block}")
        })?;
        let count = nv / block;
        check(count > 0 && np % count == 0, || {
            format!("{np} rows for {count} blocks")
        })?;
        let pb = np / count;
        let mut out = vec![0.0; np * d];
        let (pd, vd) = (self.value(p).data(), self.value(v).data());
        for b in 0..count {
            gemm(
                pb,
                block,
                d,
                &pd[b * pb * block..(b + 1) * pb * block],
                false,
                &vd[b * block * d..(b + 1) * block * d],
                false,
                0.0,
                &mut out[b * pb * d..(b + 1) * pb * d],
            );
        }
        let value = Tensor::from_rows(np, d, out)?;
        Ok(self.push(value, Op::BlockMatMul { p, v, block }, &[p, v]))
    }

    /// Appends the `1×d` token after every block of `block` rows.
    pub fn append_token(&mut self, x: Var, token: Var, block: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        check(self.value(token).len() == d, || {
            "token width differs from rows".into()
        })?;
        check(block > 0 && n % block == 0, || {
            format!("{n} rows not divisible into blocks of {block}")
        })?;
        let count = n / block;
        let mut data = Vec::with_capacity((n + count) * d);
        let (xd, td) = (self.value(x).data(), self.value(token).data());
        for b in 0..count {
            data.extend_from_slice(&xd[b * block * d..(b + 1) * block * d]);
            data.extend_from_slice(td);
        }
        let value = Tensor::from_rows(n + count, d, data)?;
        Ok(self.push(value, Op::AppendToken { x, token, block }, &[x, token]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(x);
        check(rows.iter().all(|&r| r < n), || {
            "row index out of range".into()
        })?;
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let value = Tensor::from_rows(rows.len(), d, data)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Row `g` of the output is the arithmetic mean of the rows listed in
    /// `groups[g]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.dims(x);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Loss(format!("group {g} has no rows to average")));
            }
            check(members.iter().all(|&r| r < n), || {
                "group row index out of range".into()
            })?;
        }
        let src = self.value(x);
        let mut data = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            let out = &mut data[g * d..(g + 1) * d];
            for &r in members {
                for (o, v) in out.iter_mut().zip(src.row(r)) {
                    *o += v;
                }
            }
            let count = members.len() as f64;
            out.iter_mut().for_each(|o| *o /= count);
        }
        let value = Tensor::from_rows(groups.len(), d, data)?;
        Ok(self.push(
            value,
            Op::GroupMeanRows {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[i, j] = ‖z_i − p_j‖²`.
    pub fn sq_dist(&mut self, z: Var, p: Var) -> Result<Var> {
        let (n, d) = self.dims(z);
        let (c, d2) = self.dims(p);
        check(d == d2, || format!("sq_dist widths {d} vs {d2}"))?;
        let (zv, pv) = (self.value(z), self.value(p));
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(
                    zv.row(i)
                        .iter()
                        .zip(pv.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum(),
                );
            }
        }
        let value = Tensor::from_rows(n, c, data)?;
        Ok(self.push(value, Op::SqDist(z, p), &[z, p]))
    }

    /// Scalar `Σ w · x[r, c]` over the listed entries.
    pub fn weighted_sum(&mut self, x: Var, entries: &[(usize, usize, f64)]) -> Result<Var> {
        let (n, d) = self.dims(x);
        check(entries.iter().all(|&(r, c, _)| r < n && c < d), || {
            "weighted_sum index out of range".into()
        })?;
        let src = self.value(x);
        let total = entries.iter().map(|&(r, c, w)| w * src.get(r, c)).sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                entries: entries.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), &[x]))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        check(self.value(root).len() == 1, || {
            "backward root must be a scalar".into()
        })?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| self.nodes[v.0].value.zeros_like()))
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        let (rows, cols) = (y.rows(), y.cols());
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = cols;
                if let Some(g) = self.buf(grads, *a) {
                    gemm(
                        n,
                        m,
                        k,
                        dy.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        1.0,
                        g.data_mut(),
                    );
                }
                if let Some(g) = self.buf(grads, *b) {
                    gemm(
                        k,
                        n,
                        m,
                        self.value(*a).data(),
                        true,
                        dy.data(),
                        false,
                        1.0,
                        g.data_mut(),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.buf(grads, *v) {
                        g.add_assign(dy);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(g) = self.buf(grads, *a) {
                    g.add_assign(dy);
                }
                if let Some(g) = self.buf(grads, *bias) {
                    let gd = g.data_mut();
                    for row in dy.data().chunks(cols) {
                        for (o, v) in gd.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulRow(a, gain) => {
                if let Some(g) = self.buf(grads, *a) {
                    let gv = self.value(*gain).data();
                    for (grow, drow) in g.data_mut().chunks_mut(cols).zip(dy.data().chunks(cols)) {
                        for ((o, d), s) in grow.iter_mut().zip(drow).zip(gv) {
                            *o += d * s;
                        }
                    }
                }
                if let Some(g) = self.buf(grads, *gain) {
                    let av = self.value(*a).data();
                    let gd = g.data_mut();
                    for (arow, drow) in av.chunks(cols).zip(dy.data().chunks(cols)) {
                        for ((o, d), x) in gd.iter_mut().zip(drow).zip(arow) {
                            *o += d * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.buf(grads, *a) {
                    for (o, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += s * d;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(g) = self.buf(grads, *a) {
                    for ((o, d), x) in g.data_mut().iter_mut().zip(dy.data()).zip(av) {
                        if *x > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, scale } => {
                if let Some(g) = self.buf(grads, *x) {
                    for ((grow, drow), yrow) in g
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(dy.data().chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, p)| d * p).sum();
                        for ((o, d), p) in grow.iter_mut().zip(drow).zip(yrow) {
                            *o += scale * p * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if let Some(g) = self.buf(grads, *x) {
                    for ((grow, drow), yrow) in g
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(dy.data().chunks(cols))
                        .zip(y.data().chunks(cols))
                    {
                        let total: f64 = drow.iter().sum();
                        for ((o, d), lp) in grow.iter_mut().zip(drow).zip(yrow) {
                            *o += d - lp.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                if let Some(g) = self.buf(grads, *x) {
                    let c = cols as f64;
                    for (((grow, drow), yrow), is) in g
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(dy.data().chunks(cols))
                        .zip(y.data().chunks(cols))
                        .zip(inv_std)
                    {
                        let mean_d = drow.iter().sum::<f64>() / c;
                        let mean_dy = drow.iter().zip(yrow).map(|(d, v)| d * v).sum::<f64>() / c;
                        for ((o, d), v) in grow.iter_mut().zip(drow).zip(yrow) {
                            *o += is * (d - mean_d - v * mean_dy);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.dims(*p).1;
                    if let Some(g) = self.buf(grads, *p) {
                        for (grow, drow) in
                            g.data_mut().chunks_mut(width).zip(dy.data().chunks(cols))
                        {
                            for (o, d) in grow.iter_mut().zip(&drow[offset..offset + width]) {
                                *o += d;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::SliceCols { x, start } => {
                let width = self.dims(*x).1;
                if let Some(g) = self.buf(grads, *x) {
                    for (grow, drow) in g.data_mut().chunks_mut(width).zip(dy.data().chunks(cols)) {
                        for (o, d) in grow[*start..*start + cols].iter_mut().zip(drow) {
                            *o += d;
                        }
                    }
                }
            }
            Op::BlockScores { q, k, block } => {
                let l = *block;
                let d = self.dims(*q).1;
                let count = self.dims(*k).0 / l;
                let qb = rows / count;
                let (qd, kd) = (self.value(*q).data(), self.value(*k).data());
                if let Some(g) = self.buf(grads, *q) {
                    let gd = g.data_mut();
                    for b in 0..count {
                        gemm(
                            qb,
                            l,
                            d,
                            &dy.data()[b * qb * l..(b + 1) * qb * l],
                            false,
                            &kd[b * l * d..(b + 1) * l * d],
                            false,
                            1.0,
                            &mut gd[b * qb * d..(b + 1) * qb * d],
                        );
                    }
                }
                if let Some(g) = self.buf(grads, *k) {
                    let gd = g.data_mut();
                    for b in 0..count {
                        gemm(
                            l,
                            qb,
                            d,
                            &dy.data()[b * qb * l..(b + 1) * qb * l],
                            true,
                            &qd[b * qb * d..(b + 1) * qb * d],
                            false,
                            1.0,
                            &mut gd[b * l * d..(b + 1) * l * d],
                        );
                    }
                }
            }
            Op::BlockMatMul { p, v, block } => {
                let l = *block;
                let d = cols;
                let count = self.dims(*v).0 / l;
                let pb = rows / count;
                let (pd, vd) = (self.value(*p).data(), self.value(*v).data());
                if let Some(g) = self.buf(grads, *p) {
                    let gd = g.data_mut();
                    for b in 0..count {
                        gemm(
                            pb,
                            d,
                            l,
                            &dy.data()[b * pb * d..(b + 1) * pb * d],
                            false,
                            &vd[b * l * d..(b + 1) * l * d],
                            true,
                            1.0,
                            &mut gd[b * pb * l..(b + 1) * pb * l],
                        );
                    }
                }
                if let Some(g) = self.buf(grads, *v) {
                    let gd = g.data_mut();
                    for b in 0..count {
                        gemm(
                            l,
                            pb,
                            d,
                            &pd[b * pb * l..(b + 1) * pb * l],
                            true,
                            &dy.data()[b * pb * d..(b + 1) * pb * d],
                            false,
                            1.0,
                            &mut gd[b * l * d..(b + 1) * l * d],
                        );
                    }
                }
            }
            Op::AppendToken { x, token, block } => {
                let l = *block;
                let d = cols;
                let count = rows / (l + 1);
                if let Some(g) = self.buf(grads, *x) {
                    let gd = g.data_mut();
                    for b in 0..count {
                        let src = &dy.data()[b * (l + 1) * d..(b * (l + 1) + l) * d];
                        for (o, s) in gd[b * l * d..(b + 1) * l * d].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                if let Some(g) = self.buf(grads, *token) {
                    let gd = g.data_mut();
                    for b in 0..count {
                        for (o, s) in gd.iter_mut().zip(dy.row(b * (l + 1) + l)) {
                            *o += s;
                        }
                    }
                }
            }
            Op::SelectRows { x, rows: picked } => {
                if let Some(g) = self.buf(grads, *x) {
                    let gd = g.data_mut();
                    for (i, &r) in picked.iter().enumerate() {
                        for (o, s) in gd[r * cols..(r + 1) * cols].iter_mut().zip(dy.row(i)) {
                            *o += s;
                        }
                    }
                }
            }
            Op::GroupMeanRows { x, groups } => {
                if let Some(g) = self.buf(grads, *x) {
                    let gd = g.data_mut();
                    for (gi, members) in groups.iter().enumerate() {
                        let w = 1.0 / members.len() as f64;
                        for &r in members {
                            for (o, s) in gd[r * cols..(r + 1) * cols].iter_mut().zip(dy.row(gi)) {
                                *o += w * s;
                            }
                        }
                    }
                }
            }
            Op::SqDist(z, p) => {
                let d = self.dims(*z).1;
                let (zv, pv) = (self.value(*z), self.value(*p));
                if let Some(g) = self.buf(grads, *z) {
                    let gd = g.data_mut();
                    for i in 0..rows {
                        for j in 0..cols {
                            let w = 2.0 * dy.get(i, j);
                            for ((o, a), b) in gd[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(zv.row(i))
                                .zip(pv.row(j))
                            {
                                *o += w * (a - b);
                            }
                        }
                    }
                }
                if let Some(g) = self.buf(grads, *p) {
                    let gd = g.data_mut();
                    for i in 0..rows {
                        for j in 0..cols {
                            let w = 2.0 * dy.get(i, j);
                            for ((o, a), b) in gd[j * d..(j + 1) * d]
                                .iter_mut()
                                .zip(zv.row(i))
                                .zip(pv.row(j))
                            {
                                *o -= w * (a - b);
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { x, entries } => {
                let s = dy.item();
                let width = self.dims(*x).1;
                if let Some(g) = self.buf(grads, *x) {
                    let gd = g.data_mut();
                    for &(r, c, w) in entries {
                        gd[r * width + c] += w * s;
                    }
                }
            }
            Op::Sum(x) => {
                let s = dy.item();
                if let Some(g) = self.buf(grads, *x) {
                    g.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
        }
    }
}

/// Stabilised in-place `softmax(scale · row)`.
pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (scale * (*v - max)).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{compare_gradients, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_rows(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_rows(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 4);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
        assert!(matches!(g.matmul(xv, xv), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a0, b0) = (rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 2));
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expected: f64 = b0.row(k).iter().sum();
                assert!((ga.get(i, k) - expected).abs() < 1e-12);
            }
        }
        // independent central-difference check of the same quantity
        let f = |p: &[Tensor]| {
            let mut g = Graph::new();
            let a = g.constant(p[0].clone());
            let b = g.constant(b0.clone());
            let c = g.matmul(a, b).unwrap();
            g.value(c).data().iter().sum::<f64>()
        };
        let opts = GradCheckOptions::default();
        let err = compare_gradients(&f, &[a0], std::slice::from_ref(ga), &opts).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x =
            g.constant(Tensor::from_rows(3, 2, vec![2.5, 2.5, 0.0, 3f64.ln(), 1e4, -1e4]).unwrap());
        let y = g.softmax_rows(x, 1.0).unwrap();
        let v = g.value(y);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.get(1, 0) - 0.25).abs() < 1e-12);
        assert!((v.get(1, 1) - 0.75).abs() < 1e-12);
        assert!(v.is_finite());
        assert!((v.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.softmax_rows(x, 0.0).is_err());
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, 5, 17));
        let y = g.layer_norm_rows(x, 0.0).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 17.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    /// Builds `Σ R ⊙ op(inputs)` for a random weight matrix `R` so that every
    /// output coordinate contributes to the checked scalar.
    fn check_op<F>(name: &str, inputs: Vec<Tensor>, seed: u64, op: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let build = |g: &mut Graph, vars: &[Var]| -> Var {
            let out = op(g, vars);
            let (r, c) = (g.value(out).rows(), g.value(out).cols());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<_> = (0..r)
                .flat_map(|i| (0..c).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, rng.random_range(-1.0..1.0)))
                .collect();
            g.weighted_sum(out, &entries).unwrap()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| t.zeros_like()))
            .collect();
        let f = |p: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.iter().map(|t| g.constant(t.clone())).collect();
            let root = build(&mut g, &vars);
            g.value(root).item()
        };
        let err = compare_gradients(&f, &inputs, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_passes_grad_check(seed in 0u64..10_000, n in 1usize..4, d in 1usize..5, block in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, n, d);
            let b = rand_tensor(&mut rng, d, n + 1);
            check_op("matmul", vec![a.clone(), b], seed, |g, v| g.matmul(v[0], v[1]).unwrap());
            let a2 = rand_tensor(&mut rng, n, d);
            check_op("add", vec![a.clone(), a2], seed, |g, v| g.add(v[0], v[1]).unwrap());
            let row = rand_tensor(&mut rng, 1, d);
            check_op("add_row", vec![a.clone(), row.clone()], seed, |g, v| g.add_row(v[0], v[1]).unwrap());
            check_op("mul_row", vec![a.clone(), row], seed, |g, v| g.mul_row(v[0], v[1]).unwrap());
            check_op("scale", vec![a.clone()], seed, |g, v| g.scale(v[0], -1.7).unwrap());
            check_op("relu", vec![a.clone()], seed, |g, v| g.relu(v[0]).unwrap());
            check_op("softmax", vec![a.clone()], seed, |g, v| g.softmax_rows(v[0], 0.6).unwrap());
            check_op("log_softmax", vec![a.clone()], seed, |g, v| g.log_softmax_rows(v[0]).unwrap());
            if d > 1 {
                // central-difference truncation grows like (ε/σ)²; keep each
                // row's spread far above ε by adding a ramp
                let wide = Tensor::from_rows(n, d, a.data().iter().enumerate().map(|(i, v)| v + (i % d) as f64).collect()).unwrap();
                check_op("layer_norm", vec![wide], seed, |g, v| g.layer_norm_rows(v[0], 1e-5).unwrap());
            }
            let c = rand_tensor(&mut rng, n, 2);
            check_op("concat", vec![a.clone(), c], seed, |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
            check_op("slice", vec![a.clone()], seed, |g, v| g.slice_cols(v[0], d / 2, d - d / 2).unwrap());
            let q = rand_tensor(&mut rng, n * block, d);
            let k = rand_tensor(&mut rng, n * block, d);
            check_op("block_scores", vec![q.clone(), k], seed, |g, v| g.block_scores(v[0], v[1], block).unwrap());
            let p = rand_tensor(&mut rng, n * block, block);
            check_op("block_matmul", vec![p, q.clone()], seed, |g, v| g.block_matmul(v[0], v[1], block).unwrap());
            // one query row per block
            let q1 = rand_tensor(&mut rng, n, d);
            check_op("block_scores_row", vec![q1, q.clone()], seed, |g, v| g.block_scores(v[0], v[1], block).unwrap());
            let p1 = rand_tensor(&mut rng, n, block);
            check_op("block_matmul_row", vec![p1, q.clone()], seed, |g, v| g.block_matmul(v[0], v[1], block).unwrap());
            let tok = rand_tensor(&mut rng, 1, d);
            check_op("append_token", vec![q.clone(), tok], seed, |g, v| g.append_token(v[0], v[1], block).unwrap());
            check_op("select_rows", vec![q.clone()], seed, |g, v| g.select_rows(v[0], &[0, n * block - 1, 0]).unwrap());
            let groups = vec![vec![0], (0..n * block).collect::<Vec<_>>()];
            check_op("group_mean", vec![q.clone()], seed, |g, v| g.group_mean_rows(v[0], &groups).unwrap());
            let protos = rand_tensor(&mut rng, 3, d);
            check_op("sq_dist", vec![q, protos], seed, |g, v| g.sq_dist(v[0], v[1]).unwrap());
        }

        #[test]
        fn softmax_rows_are_distributions(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(4, 9, (0..36).map(|_| rng.random_range(-50.0..50.0)).collect()).unwrap());
            let y = g.softmax_rows(x, scale).unwrap();
            for r in 0..4 {
                let row = g.value(y).row(r);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
