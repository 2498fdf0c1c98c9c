//! Minimal reverse-mode autodiff over `Array2<f64>` values.
//!
//! A `Graph` is a define-by-run tape: ops append nodes, `backward` walks the
//! tape in reverse and accumulates gradients into every node that requires
//! them. Training loops build a fresh graph per step, read parameter
//! gradients by node id, and drop the graph.
//!
//! Stop-gradient is expressed with [`Graph::detach`], which re-enters a value
//! as a constant leaf. This is what makes the primary-view gradient gate an
//! exact (not approximate) zero for the shared adapter matrix.

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    /// m×n plus a 1×n row broadcast over every row.
    AddRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Mean squared error over all elements; output is 1×1.
    Mse(NodeId, NodeId),
    /// Linear combination Σ kᵢ·xᵢ of same-shaped inputs.
    LinComb(Vec<(NodeId, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Re-enter `id`'s value as a constant leaf (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        let g = self.needs(a);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Hadamard(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = &self.nodes[a].value * k;
        let g = self.needs(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = &self.nodes[row].value;
        assert_eq!(r.nrows(), 1, "add_row expects a 1×n row");
        let v = &self.nodes[a].value + r;
        let g = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        let g = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|e| (e - mu) * inv);
        }
        let g = self.needs(a);
        self.push(v, Op::LayerNormRows(a), g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu);
        let g = self.needs(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        let g = self.needs(a);
        self.push(v, Op::SliceRows(a, start, len), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        let g = self.needs(a);
        self.push(v, Op::SliceCols(a, start, len), g)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = &self.nodes[a].value - &self.nodes[b].value;
        let n = d.len() as f64;
        let v = Array2::from_elem((1, 1), d.iter().map(|e| e * e).sum::<f64>() / n);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mse(a, b), g)
    }

    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let mut v: Array2<f64> = &self.nodes[terms[0].0].value * terms[0].1;
        for &(id, k) in &terms[1..] {
            v.scaled_add(k, &self.nodes[id].value);
        }
        let g = terms.iter().any(|&(id, _)| self.needs(id));
        self.push(v, Op::LinComb(terms.to_vec()), g)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non 1×1 node");
        v[(0, 0)]
    }

    /// Reverse pass from a 1×1 loss node. Returns one gradient slot per node;
    /// only nodes with `needs_grad` receive one.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Array2<f64>>>> {
        let lv = &self.nodes[loss].value;
        if lv.dim() != (1, 1) {
            return Err(Error::shape("backward expects a 1×1 loss node"));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv[(0, 0)])));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let gb = g.dot(&self.nodes[b].value.t());
                    self.add_grad(grads, a, gb);
                }
                if self.needs(b) {
                    let ga = self.nodes[a].value.t().dot(g);
                    self.add_grad(grads, b, ga);
                }
            }
            Op::Transpose(a) => self.add_grad(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, -g);
            }
            Op::Hadamard(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.add_grad(grads, a, g * &self.nodes[b].value);
                }
                if self.needs(b) {
                    self.add_grad(grads, b, g * &self.nodes[a].value);
                }
            }
            Op::Scale(a, k) => self.add_grad(grads, *a, g * *k),
            Op::AddRow(a, row) => {
                self.add_grad(grads, *a, g.clone());
                if self.needs(*row) {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(grads, *row, summed);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut gx = g * y;
                for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    for (r, &yv) in row.iter_mut().zip(yrow.iter()) {
                        *r -= dot * yv;
                    }
                }
                self.add_grad(grads, *a, gx);
            }
            Op::LayerNormRows(a) => {
                let x = &self.nodes[*a].value;
                let y = &self.nodes[id].value;
                let mut gx = Array2::zeros(x.raw_dim());
                for ((xrow, yrow), (grow, mut orow)) in x
                    .rows()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows().into_iter().zip(gx.rows_mut()))
                {
                    let n = xrow.len() as f64;
                    let mu = xrow.sum() / n;
                    let var = xrow.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gmean = grow.sum() / n;
                    let gydot = grow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(gv, yv)| gv * yv)
                        .sum::<f64>()
                        / n;
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *o = inv * (gv - gmean - yv * gydot);
                    }
                }
                self.add_grad(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let gx = g * &x.mapv(gelu_derivative);
                self.add_grad(grads, *a, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p].value.nrows();
                    if self.needs(p) {
                        let slice = g.slice(s![start..start + len, ..]).to_owned();
                        self.add_grad(grads, p, slice);
                    }
                    start += len;
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.needs(*a) {
                    let mut full = Array2::zeros(self.nodes[*a].value.raw_dim());
                    full.slice_mut(s![*start..*start + *len, ..]).assign(g);
                    self.add_grad(grads, *a, full);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p].value.ncols();
                    if self.needs(p) {
                        let slice = g.slice(s![.., start..start + len]).to_owned();
                        self.add_grad(grads, p, slice);
                    }
                    start += len;
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.needs(*a) {
                    let mut full = Array2::zeros(self.nodes[*a].value.raw_dim());
                    full.slice_mut(s![.., *start..*start + *len]).assign(g);
                    self.add_grad(grads, *a, full);
                }
            }
            Op::Mse(a, b) => {
                let d = &self.nodes[*a].value - &self.nodes[*b].value;
                let n = d.len() as f64;
                let coeff = 2.0 / n * g[(0, 0)];
                if self.needs(*a) {
                    self.add_grad(grads, *a, &d * coeff);
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, &d * (-coeff));
                }
            }
            Op::LinComb(terms) => {
                for &(p, k) in terms {
                    if self.needs(p) {
                        self.add_grad(grads, p, g * k);
                    }
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central finite differences of `f` at `x0`, perturbing one entry at a time.
    fn fd_grad(
        x0: &Array2<f64>,
        mut f: impl FnMut(&Array2<f64>) -> f64,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x0.raw_dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[(r, c)] += h;
            let mut xm = x0.clone();
            xm[(r, c)] -= h;
            g[(r, c)] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = 1.0_f64.max(x.abs()).max(y.abs());
            assert!(
                ((x - y) / denom).abs() < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    /// FD-check a scalar-valued graph builder against tape gradients.
    fn check_op(build: impl Fn(&mut Graph, NodeId) -> NodeId, rows: usize, cols: usize, tol: f64) {
        let mut r = rng::stream(42, "adcheck");
        let x0 = rng::normal_matrix(&mut r, rows, cols, 1.0);
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads[x].clone().unwrap();
        let numeric = fd_grad(
            &x0,
            |xv| {
                let mut g2 = Graph::new();
                let x2 = g2.param(xv.clone());
                let l = build(&mut g2, x2);
                g2.scalar(l)
            },
            1e-5,
        );
        assert_close(&analytic, &numeric, tol);
    }

    #[test]
    fn matmul_and_mse_gradients_match_fd() {
        let mut r = rng::stream(1, "w");
        let w = rng::normal_matrix(&mut r, 5, 4, 1.0);
        let tgt = rng::normal_matrix(&mut r, 3, 4, 1.0);
        check_op(
            move |g, x| {
                let w = g.constant(w.clone());
                let t = g.constant(tgt.clone());
                let y = g.matmul(x, w);
                g.mse(y, t)
            },
            3,
            5,
            1e-6,
        );
    }

    #[test]
    fn softmax_gradients_match_fd() {
        let mut r = rng::stream(2, "t");
        let tgt = rng::normal_matrix(&mut r, 4, 6, 1.0);
        check_op(
            move |g, x| {
                let t = g.constant(tgt.clone());
                let y = g.softmax_rows(x);
                g.mse(y, t)
            },
            4,
            6,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        let mut r = rng::stream(3, "t");
        let tgt = rng::normal_matrix(&mut r, 4, 8, 1.0);
        check_op(
            move |g, x| {
                let t = g.constant(tgt.clone());
                let y = g.layer_norm_rows(x);
                g.mse(y, t)
            },
            4,
            8,
            1e-5,
        );
    }

    #[test]
    fn gelu_gradients_match_fd() {
        let mut r = rng::stream(4, "t");
        let tgt = rng::normal_matrix(&mut r, 5, 5, 1.0);
        check_op(
            move |g, x| {
                let t = g.constant(tgt.clone());
                let y = g.gelu(x);
                g.mse(y, t)
            },
            5,
            5,
            1e-6,
        );
    }

    #[test]
    fn slicing_concat_and_broadcast_gradients_match_fd() {
        let mut r = rng::stream(5, "t");
        let row = rng::normal_matrix(&mut r, 1, 3, 1.0);
        let tgt = rng::normal_matrix(&mut r, 8, 3, 1.0);
        check_op(
            move |g, x| {
                // split rows, re-concatenate in swapped order, slice cols, add a row
                let top = g.slice_rows(x, 0, 4);
                let bot = g.slice_rows(x, 4, 4);
                let joined = g.concat_rows(&[bot, top]);
                let left = g.slice_cols(joined, 0, 3);
                let right = g.slice_cols(joined, 3, 3);
                let mixed = g.lin_comb(&[(left, 0.7), (right, 0.3)]);
                let rw = g.constant(row.clone());
                let y = g.add_row(mixed, rw);
                let t = g.constant(tgt.clone());
                g.mse(y, t)
            },
            8,
            6,
            1e-6,
        );
    }

    #[test]
    fn elementwise_ops_gradients_match_fd() {
        let mut r = rng::stream(6, "t");
        let other = rng::normal_matrix(&mut r, 4, 4, 1.0);
        let tgt = rng::normal_matrix(&mut r, 4, 4, 1.0);
        check_op(
            move |g, x| {
                let o = g.constant(other.clone());
                let p = g.hadamard(x, o);
                let q = g.scale(x, -0.5);
                let ssum = g.add(p, q);
                let d = g.sub(ssum, x);
                let xt = g.transpose(d);
                let y = g.transpose(xt);
                let t = g.constant(tgt.clone());
                g.mse(y, t)
            },
            4,
            4,
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut g = Graph::new();
        let x = g.param(Array2::from_elem((2, 2), 1.5));
        let d = g.detach(x);
        let frozen = g.scale(d, 3.0);
        let t = g.constant(Array2::zeros((2, 2)));
        let loss = g.mse(frozen, t);
        let grads = g.backward(loss).unwrap();
        assert!(grads[x].is_none(), "detached path leaked gradient");
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut g = Graph::new();
        let x = g.param(Array2::from_elem((1, 1), f64::INFINITY));
        let t = g.constant(Array2::zeros((1, 1)));
        let loss = g.mse(x, t);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn grad_accumulates_over_reused_nodes() {
        // loss = mse(x + x, 0) → d/dx = 8x/n... checked against FD
        check_op(
            |g, x| {
                let y = g.add(x, x);
                let t = g.constant(Array2::zeros((3, 3)));
                g.mse(y, t)
            },
            3,
            3,
            1e-6,
        );
    }
}
