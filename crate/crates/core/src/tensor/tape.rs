//! Reverse-mode differentiation over the small op set used by the trainable
//! tracking branch: matrix products, elementwise arithmetic, activations,
//! concatenation, norms and the three loss composites.

use super::{Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Adds a length-n row to every row of an m×n matrix.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Activation(Var, Activation),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    SquaredNorm(Var),
    Dice {
        pred: Var,
        gt: Tensor<f64>,
        eps: f64,
    },
    SmoothL1 {
        pred: Var,
        gt: Tensor<f64>,
        norm: Vec<f64>,
    },
    Contrastive {
        prev: Var,
        cur: Var,
        labels: Vec<f64>,
        margin: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor<f64>,
    op: Op,
}

/// Single-owner recording of a computation. Nodes are appended in
/// evaluation order, so ids are already a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor<f64> {
        &self.grads[v.0]
    }
}

fn dims2(t: &Tensor<f64>) -> Result<(usize, usize)> {
    t.as_matrix_dims()
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

    fn push(&mut self, value: Tensor<f64>, op: Op, name: &'static str) -> Result<Var> {
        let value = value.checked(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<f64>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = match av.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("matmul lhs must be 2-D, got {:?}", s))),
        };
        let (k2, n) = match bv.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("matmul rhs must be 2-D, got {:?}", s))),
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {}x{} * {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc((m, k, n), av.data(), (k, 1), bv.data(), (n, 1), &mut out, (n, 1));
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`; rank-1 `a` is treated as a single row and yields a row.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = dims2(av)?;
        let (n, k2) = match bv.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("matmul_bt rhs must be 2-D, got {:?}", s))),
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_bt inner dimensions differ: {}x{} * ({}x{})ᵀ",
                m, k, n, k2
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc((m, k, n), av.data(), (k, 1), bv.data(), (1, k), &mut out, (n, 1));
        let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
        self.push(Tensor::new(shape, out)?, Op::MatMulBt(a, b), "matmul_bt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let (m, n) = dims2(xv)?;
        if rv.len() != n {
            return Err(Error::shape(format!(
                "add_row: rows have {} entries, bias has {}",
                n,
                rv.len()
            )));
        }
        let mut out = xv.clone();
        for r in 0..m {
            for (o, b) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).activation(kind);
        self.push(out, Op::Activation(x, kind), "activation")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice(axis, start, len)?;
        self.push(out, Op::Slice { x, axis, start }, "slice")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).squared_norm();
        self.push(Tensor::scalar(s), Op::SquaredNorm(x), "squared_norm")
    }

    /// `1 − 2·Σ(p·g) / (Σp + Σg + eps)`.
    pub fn dice(&mut self, pred: Var, gt: Tensor<f64>, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "dice: prediction {:?} vs target {:?}",
                p.shape(),
                gt.shape()
            )));
        }
        let inter: f64 = p.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
        let denom = p.sum() + gt.sum() + eps;
        let loss = 1.0 - 2.0 * inter / denom;
        self.push(Tensor::scalar(loss), Op::Dice { pred, gt, eps }, "dice")
    }

    /// Mean smooth-L1 of `(pred − gt) / norm[col]` over an R×P matrix.
    pub fn smooth_l1(&mut self, pred: Var, gt: Tensor<f64>, norm: Vec<f64>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "smooth_l1: prediction {:?} vs target {:?}",
                p.shape(),
                gt.shape()
            )));
        }
        let (rows, cols) = dims2(p)?;
        if norm.len() != cols {
            return Err(Error::shape(format!(
                "smooth_l1: {} columns but {} normalizers",
                cols,
                norm.len()
            )));
        }
        if let Some(bad) = norm.iter().find(|&&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::usage(format!(
                "smooth_l1: normalizer must be positive, got {}",
                bad
            )));
        }
        let mut total = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let d = (p.data()[r * cols + c] - gt.data()[r * cols + c]) / norm[c];
                total += smooth_l1_value(d);
            }
        }
        let loss = total / (rows * cols) as f64;
        self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, gt, norm }, "smooth_l1")
    }

    /// Mean over all P×Q pairs of `y·d² + (1−y)·max(m − d, 0)²` where `d`
    /// is the Euclidean distance between row i of `prev` and row j of `cur`.
    pub fn contrastive(&mut self, prev: Var, cur: Var, labels: Vec<f64>, margin: f64) -> Result<Var> {
        let a = self.value(prev);
        let b = self.value(cur);
        let (p, da) = dims2(a)?;
        let (q, db) = dims2(b)?;
        if da != db {
            return Err(Error::shape(format!(
                "contrastive: descriptor widths {} and {} differ",
                da, db
            )));
        }
        if labels.len() != p * q {
            return Err(Error::shape(format!(
                "contrastive: {}×{} pairs but {} labels",
                p,
                q,
                labels.len()
            )));
        }
        let mut total = 0.0;
        for i in 0..p {
            for j in 0..q {
                let d = super::euclidean(&a.data()[i * da..(i + 1) * da], &b.data()[j * da..(j + 1) * da]);
                let y = labels[i * q + j];
                let hinge = (margin - d).max(0.0);
                total += y * d * d + (1.0 - y) * hinge * hinge;
            }
        }
        let loss = total / (p * q) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Contrastive {
                prev,
                cur,
                labels,
                margin,
            },
            "contrastive",
        )
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::usage("backward root is not on this tape"));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) => Tensor::new(n.value.shape().to_vec(), g),
                None => Ok(Tensor::zeros(n.value.shape().to_vec())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a))?;
                let (_, n) = dims2(val(*b))?;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |ga| gemm_acc((m, n, k), g, (n, 1), bd, (1, n), ga, (k, 1)));
                acc(*b, &mut |gb| gemm_acc((k, m, n), ad, (1, k), g, (n, 1), gb, (n, 1)));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = dims2(val(*a))?;
                let n = val(*b).shape()[0];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |ga| gemm_acc((m, n, k), g, (n, 1), bd, (k, 1), ga, (k, 1)));
                acc(*b, &mut |gb| gemm_acc((n, m, k), g, (1, n), ad, (k, 1), gb, (k, 1)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddRow(x, row) => {
                let n = val(*row).len();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += scale * gi;
                    }
                });
            }
            Op::Activation(x, kind) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * kind.derivative_from_output(*yi);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let out_block = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = val(p).shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * block..(o + 1) * block],
                                &g[o * out_block + offset..o * out_block + offset + block],
                            );
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = val(*x).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let src_block = src_shape[*axis] * inner;
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = o * src_block + start * inner;
                        add_into(
                            &mut gx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::SquaredNorm(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for (o, xi) in gx.iter_mut().zip(xd) {
                        *o += 2.0 * xi * g[0];
                    }
                });
            }
            Op::Dice { pred, gt, eps } => {
                let p = val(*pred);
                let inter: f64 = p.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
                let denom = p.sum() + gt.sum() + eps;
                let d2 = denom * denom;
                acc(*pred, &mut |gp| {
                    for (o, gk) in gp.iter_mut().zip(gt.data()) {
                        *o += g[0] * (-2.0 * (gk * denom - inter) / d2);
                    }
                });
            }
            Op::SmoothL1 { pred, gt, norm } => {
                let p = val(*pred);
                let (rows, cols) = dims2(p)?;
                let count = (rows * cols) as f64;
                acc(*pred, &mut |gp| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            let d = (p.data()[k] - gt.data()[k]) / norm[c];
                            gp[k] += g[0] * smooth_l1_slope(d) / norm[c] / count;
                        }
                    }
                });
            }
            Op::Contrastive {
                prev,
                cur,
                labels,
                margin,
            } => {
                let (a, b) = (val(*prev), val(*cur));
                let (p, w) = dims2(a)?;
                let (q, _) = dims2(b)?;
                let count = (p * q) as f64;
                let mut ga = vec![0.0; p * w];
                let mut gb = vec![0.0; q * w];
                for i in 0..p {
                    let ai = &a.data()[i * w..(i + 1) * w];
                    for j in 0..q {
                        let bj = &b.data()[j * w..(j + 1) * w];
                        let d = super::euclidean(ai, bj);
                        let y = labels[i * q + j];
                        // d(loss)/d(a_i − b_j)
                        let mut coeff = 2.0 * y;
                        if d < *margin && d > 0.0 {
                            coeff += -2.0 * (1.0 - y) * (margin - d) / d;
                        }
                        coeff *= g[0] / count;
                        if coeff == 0.0 {
                            continue;
                        }
                        for t in 0..w {
                            let diff = ai[t] - bj[t];
                            ga[i * w + t] += coeff * diff;
                            gb[j * w + t] -= coeff * diff;
                        }
                    }
                }
                acc(*prev, &mut |o| add_into(o, &ga));
                acc(*cur, &mut |o| add_into(o, &gb));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}


/// `c += a·b` for an `m×k` by `k×n` product; strides are (row, column).
fn gemm_acc(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
