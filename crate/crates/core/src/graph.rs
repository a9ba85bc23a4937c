//! Reverse-mode automatic differentiation over 2-D `f32` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParameterSet`]; [`Graph::backward`] walks the
//! tape in reverse and returns the gradients of a scalar with respect to
//! every bound parameter. Graphs built with [`Graph::inference`] skip the
//! bookkeeping needed for backward.

use std::borrow::Cow;

use crate::error::{invalid, Error, Result};
use crate::params::{Gradients, ParameterSet};
use crate::tensor::gemm;

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ChannelNorm(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    RowDot(Var, Var),
    L2NormalizeRows(Var),
    GraphMix {
        adj: Var,
        x: Var,
        nodes: usize,
    },
    TemporalConv {
        x: Var,
        w: Var,
        nodes: usize,
        kernel: usize,
        stride: usize,
    },
    ReplaceRows {
        x: Var,
        v: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        reduction: Reduction,
    },
    MseRows {
        pred: Var,
        target: Vec<f32>,
        mask: Vec<bool>,
    },
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f32]>,
    op: Op,
    needs_grad: bool,
    /// Op-specific cache for backward (normalized inputs, im2col buffers, probabilities).
    aux: Vec<f32>,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
    params: Option<&'a ParameterSet>,
}

impl<'a> Graph<'a> {
    /// Graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: None,
        }
    }

    /// Forward-only graph.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            params: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f32 {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.rows * n.cols, 1);
        n.value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f32]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad: needs_grad && self.record,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, Cow::Owned(data), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, rows: usize, cols: usize, data: &'a [f32]) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, Cow::Borrowed(data), Op::Constant, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Binds a parameter; its value is viewed as `rows × last-axis`.
    pub fn param(&mut self, params: &'a ParameterSet, name: &str) -> Result<Var> {
        match self.params {
            Some(p) if !std::ptr::eq(p, params) => {
                return Err(invalid!("a graph can bind parameters from one set only"))
            }
            _ => self.params = Some(params),
        }
        let i = params.index_of(name)?;
        let t = params.value_at(i);
        Ok(self.push(t.rows(), t.cols(), Cow::Borrowed(t.data()), Op::Param(i), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a),
            (m, k),
            false,
            self.value(b),
            (k2, n),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(&[a, b]);
        self.push(m, n, Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul_bt {m}x{k} by ({n}x{k2})ᵀ");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a),
            (m, k),
            false,
            self.value(b),
            (n, k2),
            true,
            &mut out,
            false,
        );
        let ng = self.ng(&[a, b]);
        self.push(m, n, Cow::Owned(out), Op::MatMulBt(a, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise shapes differ");
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(sa.0, sa.1, Cow::Owned(out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_row(&mut self, a: Var, r: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let ((m, n), (rr, rc)) = (self.shape(a), self.shape(r));
        assert!(rr == 1 && rc == n, "row broadcast of {rr}x{rc} onto {m}x{n}");
        let row = self.value(r);
        let out: Vec<f32> = self
            .value(a)
            .chunks_exact(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(row).map(|(x, y)| f(*x, *y)))
            .collect();
        let ng = self.ng(&[a, r]);
        self.push(m, n, Cow::Owned(out), op, ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.zip_row(a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.zip_row(a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f32> = self.value(a).iter().map(|x| f(*x)).collect();
        let ng = self.ng(&[a]);
        self.push(m, n, Cow::Owned(out), op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f32::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[a]);
        self.push(m, n, Cow::Owned(out), Op::SoftmaxRows(a), ng)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let mut inv = Vec::with_capacity(m);
        for r in 0..m {
            inv.push(normalize_strided(&mut out, r * n, 1, n));
        }
        let ng = self.ng(&[a]);
        let v = self.push(m, n, Cow::Owned(out), Op::LayerNormRows(a), ng);
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].aux = inv;
        }
        v
    }

    /// Zero-mean, unit-variance columns, statistics taken over all rows.
    pub fn channel_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let mut inv = Vec::with_capacity(n);
        for c in 0..n {
            inv.push(normalize_strided(&mut out, c, n, m));
        }
        debug_assert!(m > 0);
        let ng = self.ng(&[a]);
        let v = self.push(m, n, Cow::Owned(out), Op::ChannelNorm(a), ng);
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].aux = inv;
        }
        v
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "column slice out of range");
        let out: Vec<f32> = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(&[a]);
        self.push(m, len, Cow::Owned(out), Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "row slice out of range");
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(&[a]);
        self.push(len, n, Cow::Owned(out), Op::SliceRows(a, start), ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = self.shape(*p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(*p));
            m += pm;
        }
        let ng = self.ng(parts);
        self.push(m, n, Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = self.shape(*p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        self.push(m, n, Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = transpose(self.value(a), m, n);
        let ng = self.ng(&[a]);
        self.push(n, m, Cow::Owned(out), Op::Transpose(a), ng)
    }

    /// Column means, `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut acc = vec![0.0f64; n];
        for row in self.value(a).chunks_exact(n) {
            for (s, x) in acc.iter_mut().zip(row) {
                *s += *x as f64;
            }
        }
        let out = acc.into_iter().map(|s| (s / m as f64) as f32).collect();
        let ng = self.ng(&[a]);
        self.push(1, n, Cow::Owned(out), Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| *x as f64).sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, Cow::Owned(vec![s as f32]), Op::SumAll(a), ng)
    }

    /// Per-row dot products of two equally shaped matrices, `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let ((m, n), sb) = (self.shape(a), self.shape(b));
        assert_eq!((m, n), sb, "row_dot shapes differ");
        let out = self
            .value(a)
            .chunks_exact(n)
            .zip(self.value(b).chunks_exact(n))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(m, 1, Cow::Owned(out), Op::RowDot(a, b), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_exact_mut(n) {
            let norm = (row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32).max(1e-12);
            for x in row.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(&[a]);
        let v = self.push(m, n, Cow::Owned(out), Op::L2NormalizeRows(a), ng);
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].aux = norms;
        }
        v
    }

    /// Per-frame node mixing: for a `(T·K) × C` input laid out frame-major,
    /// each frame block `X_t` (`K × C`) becomes `adj · X_t`.
    pub fn graph_mix(&mut self, adj: Var, x: Var, nodes: usize) -> Var {
        let ((ar, ac), (m, c)) = (self.shape(adj), self.shape(x));
        assert!(ar == nodes && ac == nodes, "adjacency must be {nodes}x{nodes}");
        assert_eq!(m % nodes, 0, "rows must be a multiple of the node count");
        let mut out = vec![0.0; m * c];
        let (a, xv) = (self.value(adj), self.value(x));
        for (xt, ot) in xv.chunks_exact(nodes * c).zip(out.chunks_exact_mut(nodes * c)) {
            gemm(a, (nodes, nodes), false, xt, (nodes, c), false, ot, false);
        }
        let ng = self.ng(&[adj, x]);
        self.push(m, c, Cow::Owned(out), Op::GraphMix { adj, x, nodes }, ng)
    }

    /// Convolution along frames for a `(T·K) × C` input laid out frame-major.
    ///
    /// `w` is `(kernel·C) × C_out` with row index `d·C + c` for tap `d`. Zero
    /// padding of `(kernel − 1)/2` frames on both ends; output has
    /// `(T + 2p − kernel)/stride + 1` frames.
    pub fn temporal_conv(&mut self, x: Var, w: Var, nodes: usize, kernel: usize, stride: usize) -> Var {
        let ((m, c), (wr, co)) = (self.shape(x), self.shape(w));
        assert_eq!(wr, kernel * c, "temporal kernel must be {}x{co}", kernel * c);
        assert!(kernel % 2 == 1 && stride >= 1);
        assert_eq!(m % nodes, 0);
        let t_in = m / nodes;
        let t_out = conv_out_len(t_in, kernel, stride);
        let cols = im2col(self.value(x), t_in, nodes, c, kernel, stride);
        let mut out = vec![0.0; t_out * nodes * co];
        gemm(
            &cols,
            (t_out * nodes, kernel * c),
            false,
            self.value(w),
            (wr, co),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(&[x, w]);
        let v = self.push(
            t_out * nodes,
            co,
            Cow::Owned(out),
            Op::TemporalConv {
                x,
                w,
                nodes,
                kernel,
                stride,
            },
            ng,
        );
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].aux = cols;
        }
        v
    }

    /// Rows of `x` where `mask` is true are replaced by the `1 × n` row `v`.
    pub fn replace_rows(&mut self, x: Var, v: Var, mask: &[bool]) -> Var {
        let ((m, n), (vr, vc)) = (self.shape(x), self.shape(v));
        assert!(vr == 1 && vc == n && mask.len() == m, "replace_rows shape mismatch");
        let mut out = self.value(x).to_vec();
        let row = self.value(v).to_vec();
        for (i, r) in out.chunks_exact_mut(n).enumerate() {
            if mask[i] {
                r.copy_from_slice(&row);
            }
        }
        let ng = self.ng(&[x, v]);
        self.push(
            m,
            n,
            Cow::Owned(out),
            Op::ReplaceRows {
                x,
                v,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Softmax cross-entropy per row; rows whose target is `None` are ignored.
    /// Accumulates in `f64`. With no active row the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], reduction: Reduction) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::Shape(format!("{} targets for {m} rows", targets.len())));
        }
        let mut probs = vec![0.0f32; m * n];
        let mut total = 0.0f64;
        let mut active = 0usize;
        for (i, (row, t)) in self.value(logits).chunks_exact(n).zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(Error::IndexOutOfRange {
                    what: "classes",
                    index: t,
                    len: n,
                });
            }
            let lse = log_sum_exp(row);
            total += lse - row[t] as f64;
            active += 1;
            for (p, x) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (*x as f64 - lse).exp() as f32;
            }
        }
        let loss = match reduction {
            Reduction::Mean if active > 0 => total / active as f64,
            _ => total,
        };
        let ng = self.ng(&[logits]);
        let v = self.push(
            1,
            1,
            Cow::Owned(vec![loss as f32]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            ng,
        );
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].aux = probs;
        }
        Ok(v)
    }

    /// Mean squared error over the rows selected by `mask` (all columns).
    pub fn mse_rows(&mut self, pred: Var, target: &[f32], mask: &[bool]) -> Result<Var> {
        let (m, n) = self.shape(pred);
        if target.len() != m * n || mask.len() != m {
            return Err(Error::Shape("mse target or mask does not match prediction".into()));
        }
        let count = mask.iter().filter(|b| **b).count() * n;
        let mut total = 0.0f64;
        for (i, (p, t)) in self.value(pred).chunks_exact(n).zip(target.chunks_exact(n)).enumerate() {
            if mask[i] {
                total += p.iter().zip(t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(&[pred]);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![loss as f32]),
            Op::MseRows {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(invalid!("backward on an inference graph"));
        }
        let Some(params) = self.params else {
            return Err(invalid!("backward without a recorded forward pass over parameters"));
        };
        if loss.0 >= self.nodes.len() {
            return Err(invalid!("loss does not belong to this graph"));
        }
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::Shape(format!("loss must be 1x1, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = Gradients {
            param_len: params.len(),
            entries: Vec::new(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, grads[i].take()) {
                match out.entries.iter_mut().find(|(q, _)| q == p) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => out.entries.push((*p, g)),
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ((am, ak), (bk, bn)) = (self.shape(*a), self.shape(*b));
                if self.node(*a).needs_grad {
                    let ga = grad_slot(grads, self, *a);
                    gemm(g, (m, n), false, self.value(*b), (bk, bn), true, ga, true);
                }
                if self.node(*b).needs_grad {
                    let gb = grad_slot(grads, self, *b);
                    gemm(self.value(*a), (am, ak), true, g, (m, n), false, gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let ((am, ak), (bn, bk)) = (self.shape(*a), self.shape(*b));
                if self.node(*a).needs_grad {
                    let ga = grad_slot(grads, self, *a);
                    gemm(g, (m, n), false, self.value(*b), (bn, bk), false, ga, true);
                }
                if self.node(*b).needs_grad {
                    let gb = grad_slot(grads, self, *b);
                    gemm(g, (m, n), true, self.value(*a), (am, ak), false, gb, true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(s, d)| *s -= d));
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *r, |gr| {
                    for row in g.chunks_exact(n) {
                        add_into(gr, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((s, d), x) in ga.iter_mut().zip(g).zip(bv) {
                        *s += d * x;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((s, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *s += d * x;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                self.acc(grads, *a, |ga| {
                    for (gs, ds) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((s, d), x) in gs.iter_mut().zip(ds).zip(rv) {
                            *s += d * x;
                        }
                    }
                });
                self.acc(grads, *r, |gr| {
                    for (ds, xs) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for ((s, d), x) in gr.iter_mut().zip(ds).zip(xs) {
                            *s += d * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d)),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for ((s, d), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                    *s += d * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for ((s, d), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                    *s += d * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |ga| {
                for ((s, d), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                    if *y > 0.0 {
                        *s += d;
                    }
                }
            }),
            Op::Gelu(a) => {
                let xv = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((s, d), x) in ga.iter_mut().zip(g).zip(xv) {
                        *s += d * gelu_grad(*x);
                    }
                })
            }
            Op::SoftmaxRows(a) => self.acc(grads, *a, |ga| {
                for ((gs, ds), ys) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot: f32 = ds.iter().zip(ys).map(|(d, y)| d * y).sum();
                    for ((s, d), y) in gs.iter_mut().zip(ds).zip(ys) {
                        *s += y * (d - dot);
                    }
                }
            }),
            Op::LayerNormRows(a) => {
                let inv = &node.aux;
                self.acc(grads, *a, |ga| {
                    for (r, ((gs, ds), ys)) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .enumerate()
                    {
                        norm_backward(gs.iter_mut(), ds.iter(), ys.iter(), n, inv[r]);
                    }
                })
            }
            Op::ChannelNorm(a) => {
                let inv = &node.aux;
                self.acc(grads, *a, |ga| {
                    for c in 0..n {
                        norm_backward(
                            ga.iter_mut().skip(c).step_by(n),
                            g.iter().skip(c).step_by(n),
                            y.iter().skip(c).step_by(n),
                            m,
                            inv[c],
                        );
                    }
                })
            }
            Op::SliceCols(a, start) => {
                let pn = self.shape(*a).1;
                self.acc(grads, *a, |ga| {
                    for (gs, ds) in ga.chunks_exact_mut(pn).zip(g.chunks_exact(n)) {
                        add_into(&mut gs[*start..*start + n], ds);
                    }
                })
            }
            Op::SliceRows(a, start) => self.acc(grads, *a, |ga| add_into(&mut ga[start * n..(start + m) * n], g)),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p).0 * n;
                    self.acc(grads, *p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    self.acc(grads, *p, |gp| {
                        for (gs, ds) in gp.chunks_exact_mut(w).zip(g.chunks_exact(n)) {
                            add_into(gs, &ds[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Transpose(a) => {
                let t = transpose(g, m, n);
                self.acc(grads, *a, |ga| add_into(ga, &t));
            }
            Op::MeanRows(a) => {
                let rows = self.shape(*a).0 as f32;
                self.acc(grads, *a, |ga| {
                    for gs in ga.chunks_exact_mut(n) {
                        for (s, d) in gs.iter_mut().zip(g) {
                            *s += d / rows;
                        }
                    }
                })
            }
            Op::SumAll(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|s| *s += g[0])),
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let w = self.shape(*a).1;
                self.acc(grads, *a, |ga| {
                    for ((gs, bs), d) in ga.chunks_exact_mut(w).zip(bv.chunks_exact(w)).zip(g) {
                        gs.iter_mut().zip(bs).for_each(|(s, x)| *s += d * x);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((gs, as_), d) in gb.chunks_exact_mut(w).zip(av.chunks_exact(w)).zip(g) {
                        gs.iter_mut().zip(as_).for_each(|(s, x)| *s += d * x);
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let norms = &node.aux;
                self.acc(grads, *a, |ga| {
                    for (r, ((gs, ds), ys)) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .enumerate()
                    {
                        let dot: f32 = ds.iter().zip(ys).map(|(d, y)| d * y).sum();
                        for ((s, d), y) in gs.iter_mut().zip(ds).zip(ys) {
                            *s += (d - y * dot) / norms[r];
                        }
                    }
                })
            }
            Op::GraphMix { adj, x, nodes } => {
                let k = *nodes;
                let c = n;
                if self.node(*x).needs_grad {
                    let av = self.value(*adj);
                    let gx = grad_slot(grads, self, *x);
                    for (gt, dt) in gx.chunks_exact_mut(k * c).zip(g.chunks_exact(k * c)) {
                        gemm(av, (k, k), true, dt, (k, c), false, gt, true);
                    }
                }
                if self.node(*adj).needs_grad {
                    let xv = self.value(*x);
                    let ga = grad_slot(grads, self, *adj);
                    for (xt, dt) in xv.chunks_exact(k * c).zip(g.chunks_exact(k * c)) {
                        gemm(dt, (k, c), false, xt, (k, c), true, ga, true);
                    }
                }
            }
            Op::TemporalConv {
                x,
                w,
                nodes,
                kernel,
                stride,
            } => {
                let cols = &node.aux;
                let (wr, co) = self.shape(*w);
                if self.node(*w).needs_grad {
                    let gw = grad_slot(grads, self, *w);
                    gemm(cols, (m, wr), true, g, (m, co), false, gw, true);
                }
                if self.node(*x).needs_grad {
                    let mut dcols = vec![0.0; m * wr];
                    gemm(g, (m, co), false, self.value(*w), (wr, co), true, &mut dcols, false);
                    let (xm, c) = self.shape(*x);
                    let gx = grad_slot(grads, self, *x);
                    col2im_add(&dcols, gx, xm / nodes, *nodes, c, *kernel, *stride);
                }
            }
            Op::ReplaceRows { x, v, mask } => {
                self.acc(grads, *x, |gx| {
                    for (r, (gs, ds)) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        if !mask[r] {
                            add_into(gs, ds);
                        }
                    }
                });
                self.acc(grads, *v, |gv| {
                    for (r, ds) in g.chunks_exact(n).enumerate() {
                        if mask[r] {
                            add_into(gv, ds);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                let probs = &node.aux;
                let c = self.shape(*logits).1;
                let active = targets.iter().filter(|t| t.is_some()).count().max(1);
                let scale = match reduction {
                    Reduction::Mean => g[0] / active as f32,
                    Reduction::Sum => g[0],
                };
                self.acc(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * c..(r + 1) * c];
                        for (j, s) in row.iter_mut().enumerate() {
                            let p = probs[r * c + j] - if j == t { 1.0 } else { 0.0 };
                            *s += scale * p;
                        }
                    }
                });
            }
            Op::MseRows { pred, target, mask } => {
                let (pm, pn) = self.shape(*pred);
                let count = mask.iter().filter(|b| **b).count() * pn;
                if count == 0 {
                    return;
                }
                let pv = self.value(*pred);
                let k = 2.0 * g[0] / count as f32;
                self.acc(grads, *pred, |gp| {
                    for r in 0..pm {
                        if mask[r] {
                            for j in 0..pn {
                                let o = r * pn + j;
                                gp[o] += k * (pv[o] - target[o]);
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if self.nodes[v.0].needs_grad {
            f(grad_slot(grads, self, v));
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f32>>], graph: &Graph, v: Var) -> &'g mut [f32] {
    let len = graph.nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Normalizes `data[offset + i*stride]` for `i < count` in place and returns `1/σ`.
fn normalize_strided(data: &mut [f32], offset: usize, stride: usize, count: usize) -> f32 {
    let idx = |i: usize| offset + i * stride;
    let mean = (0..count).map(|i| data[idx(i)] as f64).sum::<f64>() / count as f64;
    let var = (0..count).map(|i| (data[idx(i)] as f64 - mean).powi(2)).sum::<f64>() / count as f64;
    let inv = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
    let mean = mean as f32;
    for i in 0..count {
        let x = &mut data[idx(i)];
        *x = (*x - mean) * inv;
    }
    inv
}

fn norm_backward<'x>(
    gx: impl Iterator<Item = &'x mut f32>,
    dy: impl Iterator<Item = &'x f32> + Clone,
    y: impl Iterator<Item = &'x f32> + Clone,
    count: usize,
    inv: f32,
) {
    let nf = count as f64;
    let mean_d = dy.clone().map(|d| *d as f64).sum::<f64>() / nf;
    let mean_dy = dy.clone().zip(y.clone()).map(|(d, y)| (*d * *y) as f64).sum::<f64>() / nf;
    let (mean_d, mean_dy) = (mean_d as f32, mean_dy as f32);
    for ((s, d), y) in gx.zip(dy).zip(y) {
        *s += inv * (d - mean_d - y * mean_dy);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    max + row.iter().map(|x| (*x as f64 - max).exp()).sum::<f64>().ln()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (t_in + 2 * pad - kernel) / stride + 1
}

fn im2col(x: &[f32], t_in: usize, nodes: usize, c: usize, kernel: usize, stride: usize) -> Vec<f32> {
    let pad = (kernel - 1) / 2;
    let t_out = conv_out_len(t_in, kernel, stride);
    let width = kernel * c;
    let mut cols = vec![0.0; t_out * nodes * width];
    for to in 0..t_out {
        for d in 0..kernel {
            let ti = (to * stride + d) as isize - pad as isize;
            if ti < 0 || ti as usize >= t_in {
                continue;
            }
            let ti = ti as usize;
            for k in 0..nodes {
                let src = &x[(ti * nodes + k) * c..(ti * nodes + k + 1) * c];
                let o = (to * nodes + k) * width + d * c;
                cols[o..o + c].copy_from_slice(src);
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f32], gx: &mut [f32], t_in: usize, nodes: usize, c: usize, kernel: usize, stride: usize) {
    let pad = (kernel - 1) / 2;
    let t_out = conv_out_len(t_in, kernel, stride);
    let width = kernel * c;
    for to in 0..t_out {
        for d in 0..kernel {
            let ti = (to * stride + d) as isize - pad as isize;
            if ti < 0 || ti as usize >= t_in {
                continue;
            }
            let ti = ti as usize;
            for k in 0..nodes {
                let o = (to * nodes + k) * width + d * c;
                add_into(
                    &mut gx[(ti * nodes + k) * c..(ti * nodes + k + 1) * c],
                    &dcols[o..o + c],
                );
            }
        }
    }
}
