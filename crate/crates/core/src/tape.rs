//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; vectors are `1×n` or `m×1`. Nodes are appended
//! in evaluation order, so a single reverse sweep over the node list is a valid
//! topological order for backpropagation. Parameters enter the tape through
//! [`Tape::param`] and share storage with the model via `Arc`.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskCols(Var, Arc<Vec<bool>>),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Option<Var>>),
    GatherRows(Var, Vec<usize>),
    LayerNormRows(Var, f64),
    MeanRowsMasked(Var, Arc<Vec<bool>>),
    TileRows(Var),
    Sum(Var),
    BceMean(Var, Arc<Matrix>),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Lower/upper clamp applied to probabilities inside the binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Matrix>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_raw(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Matrix>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Arc<Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(Arc::new(value), op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    /// Adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + &self.value(bias).row(0);
        self.push(v, Op::AddRow(a, bias), &[a, bias])
    }

    /// Multiplies row `i` of `a` by `s[i, 0]`, i.e. `diag(s) · a`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.value(s);
        self.push(v, Op::ScaleRows(a, s), &[a, s])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax where columns with `mask[j] == false` get exactly zero
    /// probability. At least one column must be unmasked.
    pub fn softmax_rows(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), mask.len(), "softmax mask width");
        let mut out = Matrix::zeros(x.dim());
        for (row, mut orow) in x.outer_iter().zip(out.outer_iter_mut()) {
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, o) in orow.iter_mut().enumerate() {
                if mask[j] {
                    *o = (row[j] - max).exp();
                    total += *o;
                }
            }
            orow.mapv_inplace(|v| v / total);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Zeroes every column `j` with `mask[j] == false`.
    pub fn mask_cols(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let mut v = self.value(a).clone();
        for (j, &m) in mask.iter().enumerate() {
            if !m {
                v.column_mut(j).fill(0.0);
            }
        }
        self.push(v, Op::MaskCols(a, mask), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end), &[a])
    }

    /// Row `i` of `a` as a `1×n` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(v, Op::Row(a, i), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks `1×width` rows; `None` entries become zero rows.
    pub fn stack_rows(&mut self, rows: &[Option<Var>], width: usize) -> Var {
        let mut v = Matrix::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                v.row_mut(i).assign(&self.value(*r).row(0));
            }
        }
        let inputs: Vec<Var> = rows.iter().flatten().copied().collect();
        self.push(v, Op::StackRows(rows.to_vec()), &inputs)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), idx);
        self.push(v, Op::GatherRows(table, idx.to_vec()), &[table])
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(out, Op::LayerNormRows(a, eps), &[a])
    }

    /// Mean over rows with `mask[i] == true`, giving a `1×n` row.
    pub fn mean_rows_masked(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let x = self.value(a);
        let count = mask.iter().filter(|m| **m).count().max(1) as f64;
        let mut out = Matrix::zeros((1, x.ncols()));
        for (i, row) in x.outer_iter().enumerate() {
            if mask[i] {
                out.row_mut(0).zip_mut_with(&row, |o, v| *o += v);
            }
        }
        out.mapv_inplace(|v| v / count);
        self.push(out, Op::MeanRowsMasked(a, mask), &[a])
    }

    pub fn tile_rows(&mut self, a: Var, m: usize) -> Var {
        let row = self.value(a).row(0).to_owned();
        let v = Matrix::from_shape_fn((m, row.len()), |(_, j)| row[j]);
        self.push(v, Op::TileRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Mean binary cross-entropy between probabilities `p` and 0/1 `target`
    /// of the same shape, with `p` clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn bce_mean(&mut self, p: Var, target: Arc<Matrix>) -> Var {
        let loss = bce_mean(self.value(p), &target);
        self.push(Matrix::from_elem((1, 1), loss), Op::BceMean(p, target), &[p])
    }

    /// Reverse sweep from the scalar node `out`, returning per-node gradients.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::ones((1, 1)));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient slot for `v`, zero-initialized on first use.
    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let dim = self.nodes[v.0].value.dim();
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(dim)))
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Row(a, i) => {
                if let Some(slot) = self.slot(grads, *a) {
                    let mut r = slot.row_mut(*i);
                    r += &g.row(0);
                }
                return;
            }
            Op::GatherRows(table, idx) => {
                if let Some(slot) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = slot.row_mut(i);
                        row += &g.row(r);
                    }
                }
                return;
            }
            _ => {}
        }
        let y = &node.value;
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulBt(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, g / bv);
                acc(*b, -(g * self.value(*a)) / (bv * bv));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::ScaleRows(a, s) => {
                acc(*a, g * self.value(*s));
                let ds = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*s, ds);
            }
            Op::Tanh(a) => acc(*a, g * &y.mapv(|t| 1.0 - t * t)),
            Op::Sigmoid(a) => acc(*a, g * &y.mapv(|t| t * (1.0 - t))),
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(y.dim());
                for ((yr, gr), mut dr) in y.outer_iter().zip(g.outer_iter()).zip(d.outer_iter_mut()) {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::MaskCols(a, mask) => {
                let mut d = g.clone();
                for (j, &m) in mask.iter().enumerate() {
                    if !m {
                        d.column_mut(j).fill(0.0);
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Matrix::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        acc(*r, g.slice(s![i..i + 1, ..]).to_owned());
                    }
                }
            }
            Op::Row(..) | Op::GatherRows(..) => unreachable!("handled in place above"),
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for i in 0..x.nrows() {
                    let xr = x.row(i);
                    let n = xr.len() as f64;
                    let mean = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let g_mean = gr.sum() / n;
                    let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..xr.len() {
                        d[[i, j]] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                acc(*a, d);
            }
            Op::MeanRowsMasked(a, mask) => {
                let count = mask.iter().filter(|m| **m).count().max(1) as f64;
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        d.row_mut(i).assign(&(&g.row(0) / count));
                    }
                }
                acc(*a, d);
            }
            Op::TileRows(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::Sum(a) => acc(*a, Matrix::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::BceMean(p, target) => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                let scale = g[[0, 0]] / n;
                let mut d = Matrix::zeros(pv.dim());
                ndarray::Zip::from(&mut d).and(pv).and(&**target).for_each(|d, &p, &t| {
                    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                        *d = scale * (-(t / p) + (1.0 - t) / (1.0 - p));
                    }
                });
                acc(*p, d);
            }
        }
    }
}

/// Gradients from one [`Tape::backward`] sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with clamped log arguments.
pub fn bce_mean(p: &Matrix, target: &Matrix) -> f64 {
    assert_eq!(p.dim(), target.dim(), "bce shape mismatch");
    let n = p.len() as f64;
    let total: f64 = p
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_masks_to_exact_zero() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0, 3.0], [0.5, -1.0, 9.0]]);
        let y = t.softmax_rows(a, Arc::new(vec![true, false, true]));
        let v = t.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 1]], 0.0);
        for row in v.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x0 = array![[0.3, -0.2, 0.1], [0.05, 0.4, -0.6]];
        let w = array![[0.2, -0.1], [0.7, 0.3], [-0.5, 0.25]];
        let mask = Arc::new(vec![true, true, false]);
        let build = |t: &mut Tape, x: Var| {
            let wv = t.constant(w.clone());
            let h = t.matmul(x, wv);
            let h = t.tanh(h);
            let hb = t.matmul_bt(h, h);
            let z = t.concat_cols(&[hb, x]);
            let z = t.slice_cols(z, 1, 4);
            let sm = t.softmax_rows(z, mask.clone());
            let ln = t.layer_norm_rows(x, 1e-5);
            let p = t.mul(sm, ln);
            let s = t.sigmoid(p);
            let r = t.mean_rows_masked(s, Arc::new(vec![true, false]));
            let tl = t.tile_rows(r, 2);
            let d = t.div(tl, s);
            let col = t.slice_cols(hb, 0, 1);
            let sc = t.scale_rows(d, col);
            let g = t.gather_rows(sc, &[1, 0, 1]);
            let r1 = t.row(g, 2);
            let r0 = t.row(x, 0);
            let rr = t.mul(r1, r0);
            let st = t.stack_rows(&[Some(rr), None, Some(r1)], 3);
            let a = t.sum(g);
            let b = t.sum(st);
            t.add(a, b)
        };
        let f = |x: &Matrix| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let out = build(&mut t, xv);
            t.value(out)[[0, 0]]
        };
        let mut t = Tape::new();
        let xv = t.param(Arc::new(x0.clone()));
        let out = build(&mut t, xv);
        let grads = t.backward(out);
        assert_close(grads.get(xv).unwrap(), &numeric_grad(f, &x0), 1e-6);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let p0 = array![[0.2, 0.9, 0.5, 0.01]];
        let y = Arc::new(array![[0.0, 1.0, 1.0, 0.0]]);
        let mut t = Tape::new();
        let pv = t.param(Arc::new(p0.clone()));
        let l = t.bce_mean(pv, y.clone());
        let grads = t.backward(l);
        let num = numeric_grad(|p| bce_mean(p, &y), &p0);
        assert_close(grads.get(pv).unwrap(), &num, 1e-6);
    }
}
