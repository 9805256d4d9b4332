use super::kernels::{col2im, gemm, im2col_into, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values averaged per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    BlendRows {
        a: Var,
        b: Var,
        mask: Vec<f64>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    GroupDot {
        f: Var,
        g: Var,
        group: usize,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Single-use record of a forward pass.
///
/// Ops append nodes; [`Tape::backward`] walks them in reverse once and
/// leaves gradients on the leaves. A consumed tape rejects further
/// `backward` calls.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_from(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub(crate) fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- elementwise

    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `x[.., j] + row[j]` for a bias vector matching the last dimension.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).to_vec();
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::AddScalar(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Natural log. Non-positive inputs produce `-inf`/NaN as in IEEE.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Multiplies by a constant mask of the same shape (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask_mul", self.shape(x), &[mask.len()]));
        }
        let value = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::MaskMul { x, mask }))
    }

    /// Row-wise `mask[r] * a[r] + (1 - mask[r]) * b[r]` with a constant mask.
    pub fn blend_rows(&mut self, a: Var, b: Var, mask: Vec<f64>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("blend_rows", self.shape(a), self.shape(b)));
        }
        let rows = self.shape(a).first().copied().unwrap_or(1);
        if mask.len() != rows {
            return Err(Error::shape("blend_rows", self.shape(a), &[mask.len()]));
        }
        let cols = self.value(a).len() / rows.max(1);
        let mut value = Vec::with_capacity(self.value(a).len());
        for (r, m) in mask.iter().enumerate() {
            let ra = &self.value(a)[r * cols..(r + 1) * cols];
            let rb = &self.value(b)[r * cols..(r + 1) * cols];
            value.extend(ra.iter().zip(rb).map(|(x, y)| m * x + (1.0 - m) * y));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::BlendRows { a, b, mask }))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut value);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a, b)))
    }

    /// Out[b, j] = f[b * group + j] · g[b] for `f: [B*group, D]`, `g: [B, D]`.
    pub fn group_dot(&mut self, f: Var, g: Var, group: usize) -> Result<Var> {
        let (sf, sg) = (self.shape(f), self.shape(g));
        if sf.len() != 2 || sg.len() != 2 || sf[1] != sg[1] || sf[0] != sg[0] * group {
            return Err(Error::shape("group_dot", sf, sg));
        }
        let (bsz, d) = (sg[0], sg[1]);
        let (fv, gv) = (self.value(f), self.value(g));
        let mut value = Vec::with_capacity(bsz * group);
        for b in 0..bsz {
            let gr = &gv[b * d..(b + 1) * d];
            for j in 0..group {
                let fr = &fv[(b * group + j) * d..(b * group + j + 1) * d];
                value.push(fr.iter().zip(gr).map(|(x, y)| x * y).sum());
            }
        }
        let rg = self.rg(f) || self.rg(g);
        Ok(self.push(vec![bsz, group], value, rg, Op::GroupDot { f, g, group }))
    }

    // ---------------------------------------------------------------- reductions / softmax

    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], rg, Op::Mean(x))
    }

    /// `x[r, idx[r]]` for a 2-D input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("pick", s, &[idx.len()]));
        }
        let n = s[1];
        let value = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| self.value(x)[r * n + i])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len()],
            value,
            rg,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    // ---------------------------------------------------------------- structure

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        let lead = lead.to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
        }
        let rows = numel(&lead);
        let widths: Vec<usize> = xs.iter().map(|&x| last_dim(self.shape(x))).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                value.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(shape, value, rg, Op::Concat(xs.to_vec())))
    }

    /// Columns `[start, end)` of a 2-D input.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, end]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut value = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            value.extend_from_slice(&self.value(x)[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, end - start], value, rg, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Row lookup `table[ids[i]]` producing `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!(
                "embedding: id {bad} out of range for table of {v} rows"
            )));
        }
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&self.value(table)[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Forward value is the one-hot argmax of each row of `soft` (lowest
    /// index on ties); the gradient passes to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let n = last_dim(self.shape(soft));
        let mut value = vec![0.0; self.value(soft).len()];
        for (r, row) in self.value(soft).chunks(n).enumerate() {
            value[r * n + argmax(row)] = 1.0;
        }
        let rg = self.rg(soft);
        self.push(self.shape(soft).to_vec(), value, rg, Op::StraightThrough(soft))
    }

    // ---------------------------------------------------------------- vision

    /// `x: [N, C, H, W]`, `w: [F, C, K, K]`, `b: [F]` -> `[N, F, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        // One image at a time keeps the unfolded patches cache-resident.
        let one = ConvGeom { n: 1, ..geom };
        let (p, patch) = (geom.positions(), geom.patch());
        let keep_cols = self.rg(w);
        let mut all_cols = Vec::with_capacity(if keep_cols { n * patch * p } else { 0 });
        let mut value = vec![0.0; n * f * p];
        let img = c * h * wd;
        let mut cols = vec![0.0; patch * p];
        for ni in 0..n {
            im2col_into(&self.value(x)[ni * img..(ni + 1) * img], &one, &mut cols);
            let out = &mut value[ni * f * p..(ni + 1) * f * p];
            gemm(f, patch, p, self.value(w), false, &cols, false, 0.0, out);
            for (fi, row) in out.chunks_mut(p).enumerate() {
                let bf = self.value(b)[fi];
                row.iter_mut().for_each(|v| *v += bf);
            }
            if keep_cols {
                all_cols.extend_from_slice(&cols);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        // Columns are only needed for the weight gradient.
        let cols = all_cols;
        Ok(self.push(
            vec![n, f, geom.ho, geom.wo],
            value,
            rg,
            Op::Conv2d { x, w, b, geom, cols },
        ))
    }

    /// Training-mode batch norm over `[N, C, H, W]` (or `[N, C]`).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (c, inner, n) = self.bn_dims(x, gamma, beta)?;
        let count = n * inner;
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0;
            for ni in 0..n {
                ss += xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Eval-mode batch norm: a fixed affine map from running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, _, _) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), &[running_mean.len()]));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, inv_std, false))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", s, self.shape(gamma)));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", s, self.shape(gamma)));
        }
        Ok((c, s[2..].iter().product(), s[0]))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut value = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let o = (ni * c + ci) * inner;
                for i in o..o + inner {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    value[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            s,
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`; odd edges are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2d", &s, &[2, 2]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    value.push(xv[best]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, ho, wo], value, rg, Op::MaxPool { x, argmax }))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d`loss` to every leaf that requires grad.
    ///
    /// A loss with no grad-requiring ancestors is a no-op. The tape is
    /// consumed either way.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads = std::mem::take(&mut self.grads);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = nodes[row.0].value.len();
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
            }),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G @ B^T, dB = A^T @ G
                acc(*a, &mut |d| gemm(m, n, k, g, false, bv, true, 1.0, d));
                acc(*b, &mut |d| gemm(k, m, n, av, true, g, false, 1.0, d));
            }
            Op::GroupDot { f, g: gv, group } => {
                let d = nodes[f.0].shape[1];
                let (fv, gvv) = (&nodes[f.0].value, &nodes[gv.0].value);
                let bsz = nodes[gv.0].shape[0];
                acc(*f, &mut |df| {
                    for b in 0..bsz {
                        for j in 0..*group {
                            let go = g[b * group + j];
                            let row = &mut df[(b * group + j) * d..(b * group + j + 1) * d];
                            for (r, y) in row.iter_mut().zip(&gvv[b * d..(b + 1) * d]) {
                                *r += go * y;
                            }
                        }
                    }
                });
                acc(*gv, &mut |dg| {
                    for b in 0..bsz {
                        let row = &mut dg[b * d..(b + 1) * d];
                        for j in 0..*group {
                            let go = g[b * group + j];
                            let fr = &fv[(b * group + j) * d..(b * group + j + 1) * d];
                            for (r, x) in row.iter_mut().zip(fr) {
                                *r += go * x;
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Log(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / v;
                    }
                });
            }
            Op::Softmax(x) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - y.exp() * s;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Pick { x, idx } => {
                let n = nodes[x.0].shape[1];
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * n + i] += g[r];
                    }
                });
            }
            Op::Concat(xs) => {
                let total = last_dim(&node.shape);
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = last_dim(&nodes[x.0].shape);
                    acc(x, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].shape[1];
                let w = node.shape[1];
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut d[r * cols + start..r * cols + start + w], gr);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::StraightThrough(soft) => acc(*soft, &mut |d| add_into(d, g)),
            Op::MaskMul { x, mask } => acc(*x, &mut |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::BlendRows { a, b, mask } => {
                let cols = node.value.len() / mask.len().max(1);
                acc(*a, &mut |d| {
                    for (r, m) in mask.iter().enumerate() {
                        for j in r * cols..(r + 1) * cols {
                            d[j] += m * g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (r, m) in mask.iter().enumerate() {
                        for j in r * cols..(r + 1) * cols {
                            d[j] += (1.0 - m) * g[j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let f = nodes[w.0].shape[0];
                let (n, p, patch) = (geom.n, geom.positions(), geom.patch());
                let one = ConvGeom { n: 1, ..*geom };
                let img = geom.c * geom.h * geom.w;
                acc(*b, &mut |db| {
                    for gn in g.chunks(f * p) {
                        for (fi, row) in gn.chunks(p).enumerate() {
                            db[fi] += row.iter().sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for (gn, cn) in g.chunks(f * p).zip(cols.chunks(patch * p)) {
                        gemm(f, p, patch, gn, false, cn, true, 1.0, dw);
                    }
                });
                let wv = &nodes[w.0].value;
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; patch * p];
                    for ni in 0..n {
                        gemm(patch, f, p, wv, true, &g[ni * f * p..(ni + 1) * f * p], false, 0.0, &mut dcols);
                        col2im(&dcols, &one, &mut dx[ni * img..(ni + 1) * img]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = &node.shape;
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (n * inner) as f64;
                let gam = &nodes[gamma.0].value;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * inner;
                        for j in o..o + inner {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*x, &mut |dx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let o = (ni * c + ci) * inner;
                            let k = gam[ci] * inv_std[ci];
                            for j in o..o + inner {
                                dx[j] += if *train {
                                    k * (g[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |d| {
                for (g, &i) in g.iter().zip(argmax) {
                    d[i] += g;
                }
            }),
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
