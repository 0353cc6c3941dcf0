use super::kernels::{dot, matmul_into, matmul_nt_into, matmul_tn_into, softmax_row, ConvGeom};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mean(Var),
    Sum(Var),
    RowSum(Var),
    RowL2Norm(Var),
    Reshape(Var),
    Transpose(Var),
    GatherColumns(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    AvgPool2x2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` is untracked or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn zero_if_none(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
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

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf (inputs, frozen statistics).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ` without materializing the transpose. Used for
    /// `features · weightsᵀ` where weights are stored one row per class node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let (k, n2) = self.dims2(b)?;
        if n != n2 {
            return Err(dim_err!("matmul_nt {m}x{n} by ({k}x{n2})ᵀ"));
        }
        let mut out = vec![0.0; m * k];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, n, k);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, k], out)?, Op::MatMulNT(a, b), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(t, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` bias to every row of a `B×n` matrix. This is the
    /// only broadcasting the tape supports.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(bias).numel() != c {
            return Err(dim_err!(
                "bias of length {} for {r}x{c} rows",
                self.value(bias).numel()
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRowBias(x, bias), tracked))
    }

    /// Per-filter bias for a `B×F×H×W` feature map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[_, f, h, w] = &shape[..] else {
            return Err(dim_err!("channel bias needs 4-D input, got {shape:?}"));
        };
        if self.value(bias).numel() != f {
            return Err(dim_err!("bias length {} for {f} channels", self.value(bias).numel()));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, plane) in data.chunks_mut(h * w).enumerate() {
            let bv = b[i % f];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddChannelBias(x, bias), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Scale(x, c), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Relu(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), tracked))
    }

    /// `B×n → [B]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        let data = self.value(x).data().chunks(c).map(|r| r.iter().sum()).collect();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::vector(data), Op::RowSum(x), tracked))
    }

    /// `B×n → [B]` Euclidean norms of the rows. The gradient at a zero row
    /// is taken to be zero.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .map(|r| dot(r, r).sqrt())
            .collect();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::vector(data), Op::RowL2Norm(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Transpose(x), tracked))
    }

    /// Selects columns of a `B×n` matrix in the given order; repeats allowed.
    pub fn gather_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index(format!("column {bad} out of range for width {c}")));
        }
        if cols.is_empty() {
            return Err(dim_err!("gather_columns with no columns"));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            data.extend(cols.iter().map(|&j| v[i * c + j]));
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, cols.len()], data)?,
            Op::GatherColumns(x, cols.to_vec()),
            tracked,
        ))
    }

    /// Selects rows of an `r×c` matrix in the given order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        if rows.is_empty() {
            return Err(dim_err!("gather_rows with no rows"));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(v.row(i));
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::GatherRows(x, rows.to_vec()),
            tracked,
        ))
    }

    /// Stacks matrices (or vectors, treated as single rows) of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat_rows of nothing"));
        };
        let width = |t: &Tensor| *t.shape().last().unwrap_or(&0);
        let c = width(self.value(first));
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if width(v) != c || v.ndim() > 2 {
                return Err(dim_err!("concat_rows width {} vs {c}", width(v)));
            }
            rows += v.numel() / c;
            data.extend_from_slice(v.data());
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(dim_err!("{} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(softmax_row(row));
        }
        let tracked = self.tracked_any(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Cross-correlation of `B×C×H×W` input with an `F×C×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)
            .map_err(Error::Dimension)?;
        let out = geom.forward(self.value(input).data(), self.value(kernel).data());
        let t = Tensor::new(vec![geom.batch, geom.filters, geom.oh, geom.ow], out)?;
        let tracked = self.tracked_any(&[input, kernel]);
        Ok(self.push(t, Op::Conv2d { input, kernel, geom }, tracked))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = &shape[..] else {
            return Err(dim_err!("avg_pool2x2 needs 4-D input, got {shape:?}"));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(dim_err!("input {h}x{w} too small to pool"));
        }
        let v = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &v[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x0) = (2 * oy, 2 * ox);
                    out[(plane * oh + oy) * ow + ox] = 0.25
                        * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0]
                            + src[(y + 1) * w + x0 + 1]);
                }
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::AvgPool2x2(x), tracked))
    }

    /// Reverse-mode sweep from a scalar. Nodes are visited once each, in
    /// reverse append order; gradients from shared subexpressions add up.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &g, &node.value, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, op: &Op, g: &[f64], out: &Tensor, grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = out.shape()[1];
                if tracked(*a) {
                    let ga = zero_if_none(&mut grads[a.0], m * k);
                    matmul_nt_into(g, val(*b), ga, m, n, k);
                }
                if tracked(*b) {
                    let gb = zero_if_none(&mut grads[b.0], k * n);
                    matmul_tn_into(val(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let k = out.shape()[1];
                if tracked(*a) {
                    let ga = zero_if_none(&mut grads[a.0], m * n);
                    matmul_into(g, val(*b), ga, m, k, n);
                }
                if tracked(*b) {
                    let gb = zero_if_none(&mut grads[b.0], k * n);
                    matmul_tn_into(g, val(*a), gb, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if tracked(*a) {
                    let ga = zero_if_none(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if tracked(*b) {
                    let gb = zero_if_none(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let vb = val(*b);
                    let ga = zero_if_none(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if tracked(*b) {
                    let va = val(*a);
                    let gb = zero_if_none(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if tracked(*x) {
                    let gx = zero_if_none(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if tracked(*bias) {
                    let c = numel(*bias);
                    let gb = zero_if_none(&mut grads[bias.0], c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::AddChannelBias(x, bias) => {
                if tracked(*x) {
                    let gx = zero_if_none(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if tracked(*bias) {
                    let f = numel(*bias);
                    let s = out.shape();
                    let plane = s[2] * s[3];
                    let gb = zero_if_none(&mut grads[bias.0], f);
                    for (i, p) in g.chunks(plane).enumerate() {
                        gb[i % f] += p.iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(x, c) => {
                if tracked(*x) {
                    let gx = zero_if_none(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Relu(x) => {
                if tracked(*x) {
                    let vx = val(*x);
                    let gx = zero_if_none(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Mean(x) | Op::Sum(x) => {
                if tracked(*x) {
                    let n = numel(*x);
                    let s = if matches!(op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    let gx = zero_if_none(&mut grads[x.0], n);
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::RowSum(x) => {
                if tracked(*x) {
                    let n = numel(*x);
                    let c = n / g.len();
                    let gx = zero_if_none(&mut grads[x.0], n);
                    for (row, &gi) in gx.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|a| *a += gi);
                    }
                }
            }
            Op::RowL2Norm(x) => {
                if tracked(*x) {
                    let n = numel(*x);
                    let c = n / g.len();
                    let vx = val(*x);
                    let norms = out.data();
                    let gx = zero_if_none(&mut grads[x.0], n);
                    for i in 0..g.len() {
                        if norms[i] > 0.0 {
                            let s = g[i] / norms[i];
                            for j in 0..c {
                                gx[i * c + j] += s * vx[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if tracked(*x) {
                    let gx = zero_if_none(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Transpose(x) => {
                if tracked(*x) {
                    let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                    let gx = zero_if_none(&mut grads[x.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::GatherColumns(x, cols) => {
                if tracked(*x) {
                    let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                    let gx = zero_if_none(&mut grads[x.0], r * c);
                    let k = cols.len();
                    for i in 0..r {
                        for (jj, &j) in cols.iter().enumerate() {
                            gx[i * c + j] += g[i * k + jj];
                        }
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                if tracked(*x) {
                    let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                    let gx = zero_if_none(&mut grads[x.0], r * c);
                    for (ii, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[ii * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel(p);
                    if tracked(p) {
                        let gp = zero_if_none(&mut grads[p.0], n);
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if tracked(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let s = g[0] / b as f64;
                    let gl = zero_if_none(&mut grads[logits.0], b * c);
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                if tracked(*input) {
                    let gi = zero_if_none(&mut grads[input.0], numel(*input));
                    geom.backward_input(g, val(*kernel), gi);
                }
                if tracked(*kernel) {
                    let gk = zero_if_none(&mut grads[kernel.0], numel(*kernel));
                    geom.backward_kernel(g, val(*input), gk);
                }
            }
            Op::AvgPool2x2(x) => {
                if tracked(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let gx = zero_if_none(&mut grads[x.0], numel(*x));
                    for plane in 0..s[0] * s[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = 0.25 * g[(plane * oh + oy) * ow + ox];
                                let base = plane * h * w;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    gx[base + (2 * oy + dy) * w + 2 * ox + dx] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
