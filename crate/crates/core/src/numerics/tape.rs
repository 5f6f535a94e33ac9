//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation with its forward value. Calling
//! [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints for every node that depends on a parameter leaf.

use alloc::format;
use alloc::vec::Vec;

use super::ops;
use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Recip(Var),
    RowSoftmax(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    L2NormRows(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, rstd: Vec<T> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Element(Var, usize, usize),
    MeanSquare(Var),
    Gate { m: Var, psi: Var, target: Var },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does
    /// not influence the loss through any parameter path.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// Adds the 1×cols row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let y = self.value(a).add_row(self.value(bias))?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(y, Op::AddRow(a, bias), rg))
    }

    /// Adds a fixed matrix (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Matrix<T>) -> Result<Var> {
        let y = self.value(a).add(c)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, s), rg)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape("scale_by expects a 1x1 scalar node".into()));
        }
        let y = self.value(a).scale(self.scalar(s));
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(y, Op::ScaleBy(a, s), rg))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| T::one() / v);
        let rg = self.rg(a);
        self.push(y, Op::Recip(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        let y = ops::row_softmax(self.value(a), tau)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::RowSoftmax(a, T::of(tau)), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = ops::sigmoid(self.value(a));
        let rg = self.rg(a);
        self.push(y, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = ops::gelu(self.value(a));
        let rg = self.rg(a);
        self.push(y, Op::Gelu(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (y, _) = ops::l2_normalize_rows(self.value(a), eps);
        let rg = self.rg(a);
        self.push(y, Op::L2NormRows(a, T::of(eps)), rg)
    }

    /// Row-wise layer norm with 1×cols scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xhat, rstd) = ops::layer_norm_rows(self.value(x), eps);
        let y = xhat.hadamard_row(self.value(gamma))?.add_row(self.value(beta))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Matrix::concat_cols(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let y = self.value(a).reshape(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(y, Op::Reshape(a), rg))
    }

    /// 1×1 node holding `a[r, c]`.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        if r >= rows || c >= cols {
            return Err(Error::Shape(format!("element ({r},{c}) of {rows}x{cols}")));
        }
        let y = Matrix::filled(1, 1, self.value(a).get(r, c));
        let rg = self.rg(a);
        Ok(self.push(y, Op::Element(a, r, c), rg))
    }

    /// Mean of squared entries, as a 1×1 node.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::of(v.len() as f64);
        let y = Matrix::filled(1, 1, v.data().iter().map(|&x| x * x).sum::<T>() / n);
        let rg = self.rg(a);
        self.push(y, Op::MeanSquare(a), rg)
    }

    /// Gated blend `(1 − ψ) ⊙ m + ψ ⊙ target`, clamped to the elementwise
    /// envelope of `m` and `target`.
    pub fn gate(&mut self, m: Var, psi: Var, target: Var) -> Result<Var> {
        let y = ops::gate_blend(self.value(m), self.value(psi), self.value(target))?;
        let rg = self.rg(m) || self.rg(psi) || self.rg(target);
        Ok(self.push(y, Op::Gate { m, psi, target }, rg))
    }

    /// Back-propagates `seed · ∂loss` from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward expects a scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, seed));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.matmul_nt(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(dy)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.matmul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, dy.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.hadamard(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, dy.hadamard(self.value(*a))?)?;
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, dy.clone())?;
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, dy.column_sums())?;
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                let g = dy.reshape(self.value(*a).rows(), self.value(*a).cols())?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.scale(*s))?,
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.scale(sv))?;
                }
                if self.rg(*s) {
                    let ds = dy.hadamard(self.value(*a))?.sum();
                    self.accumulate(grads, *s, Matrix::filled(1, 1, ds))?;
                }
            }
            Op::Recip(a) => {
                let g = dy.zip_map(y, |d, r| -d * r * r)?;
                self.accumulate(grads, *a, g)?;
            }
            Op::RowSoftmax(a, tau) => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - dot) / *tau;
                    }
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::Sigmoid(a) => {
                let g = dy.zip_map(y, |d, s| d * s * (T::one() - s))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Gelu(a) => {
                let g = dy.zip_map(self.value(*a), |d, x| d * ops::gelu_grad_scalar(x))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::L2NormRows(a, eps) => {
                let x = self.value(*a);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let out = g.row_mut(r);
                    if norm > *eps {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((o, &p), &d) in out.iter_mut().zip(yr).zip(dr) {
                            *o = (d - p * dot) / norm;
                        }
                    } else {
                        for (o, &d) in out.iter_mut().zip(dr) {
                            *o = d / *eps;
                        }
                    }
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, dy.hadamard(xhat)?.column_sums())?;
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, dy.column_sums())?;
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).row(0);
                    let n = T::of(xhat.cols() as f64);
                    let mut g = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let xh = xhat.row(r);
                        let dr = dy.row(r);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for ((&d, &gm), &h) in dr.iter().zip(gam).zip(xh) {
                            let dxh = d * gm;
                            mean_d += dxh;
                            mean_dx += dxh * h;
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for (((o, &d), &gm), &h) in g.row_mut(r).iter_mut().zip(dr).zip(gam).zip(xh) {
                            *o = rstd[r] * (d * gm - mean_d - h * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, g)?;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..dy.rows() {
                    g.row_mut(r)[*start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, dy.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::Element(a, r, c) => {
                let src = self.value(*a);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                g.set(*r, *c, dy.get(0, 0));
                self.accumulate(grads, *a, g)?;
            }
            Op::MeanSquare(a) => {
                let x = self.value(*a);
                let k = T::of(2.0) * dy.get(0, 0) / T::of(x.len() as f64);
                self.accumulate(grads, *a, x.scale(k))?;
            }
            Op::Gate { m, psi, target } => {
                let psi_v = self.value(*psi);
                if self.rg(*m) {
                    self.accumulate(grads, *m, dy.zip_map(psi_v, |d, p| d * (T::one() - p))?)?;
                }
                if self.rg(*psi) {
                    let diff = self.value(*target).sub(self.value(*m))?;
                    self.accumulate(grads, *psi, dy.hadamard(&diff)?)?;
                }
                if self.rg(*target) {
                    self.accumulate(grads, *target, dy.hadamard(psi_v)?)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(rows: usize, cols: usize, seed: f64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * 0.37 + seed).sin())
    }

    /// Central-difference check of d(loss)/d(x) where the loss is built by `f`.
    fn check(x: Matrix<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, xv);
        let loss = g.mean_square(out);
        let grads = g.backward(loss, 1.0).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.param(xp);
                let o = f(&mut g, v);
                let l = g.mean_square(o);
                g.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic.data()[i]).abs() / fd.abs().max(1.0);
            assert!(err < 1e-6, "coordinate {i}: fd {fd} vs analytic {}", analytic.data()[i]);
        }
    }

    #[test]
    fn matmul_adjoints() {
        let w = probe(3, 2, 0.4);
        check(probe(4, 3, 0.1), move |g, x| {
            let wv = g.constant(w.clone());
            g.matmul(x, wv).unwrap()
        });
        let a = probe(2, 4, 0.9);
        check(probe(4, 3, 0.2), move |g, x| {
            let av = g.constant(a.clone());
            g.matmul(av, x).unwrap()
        });
        let b = probe(5, 3, 1.1);
        check(probe(4, 3, 0.3), move |g, x| {
            let bv = g.constant(b.clone());
            let l = g.matmul_nt(x, bv).unwrap();
            let r = g.matmul_nt(bv, x).unwrap();
            let rt = g.reshape(r, 4, 5).unwrap();
            g.add(l, rt).unwrap()
        });
    }

    #[test]
    fn nonlinearity_adjoints() {
        check(probe(3, 4, 0.5), |g, x| g.row_softmax(x, 0.3).unwrap());
        check(probe(3, 4, 0.6), |g, x| g.sigmoid(x));
        check(probe(3, 4, 0.7), |g, x| g.gelu(x));
        check(probe(3, 4, 0.8), |g, x| g.l2_normalize_rows(x, 1e-12));
        check(probe(3, 4, 0.8).map(|v| v + 2.0), |g, x| g.recip(x));
    }

    #[test]
    fn layer_norm_adjoint() {
        let gamma = Matrix::from_fn(1, 5, |_, c| 1.0 + 0.1 * c as f64);
        let beta = Matrix::from_fn(1, 5, |_, c| 0.05 * c as f64);
        check(probe(3, 5, 0.2), move |g, x| {
            let gv = g.param(gamma.clone());
            let bv = g.param(beta.clone());
            g.layer_norm(x, gv, bv, 1e-5).unwrap()
        });
    }

    #[test]
    fn structural_adjoints() {
        check(probe(4, 6, 0.3), |g, x| {
            let a = g.slice_rows(x, 1, 2).unwrap();
            let b = g.slice_cols(a, 2, 3).unwrap();
            let c = g.slice_cols(x, 0, 2).unwrap();
            let c2 = g.slice_rows(c, 0, 2).unwrap();
            let cat = g.concat_cols(&[b, c2]).unwrap();
            let s = g.element(x, 3, 5).unwrap();
            let scaled = g.scale_by(cat, s).unwrap();
            let bias = g.slice_rows(x, 0, 1).unwrap();
            let bias = g.slice_cols(bias, 0, 5).unwrap();
            let with_bias = g.add_row(scaled, bias).unwrap();
            let prod = g.mul(with_bias, with_bias).unwrap();
            g.sub(prod, with_bias).unwrap()
        });
    }

    #[test]
    fn gate_adjoint() {
        let m = probe(3, 4, 0.9);
        let t = probe(3, 4, 2.1);
        check(probe(3, 4, 0.1), move |g, x| {
            let psi = g.sigmoid(x);
            let mv = g.param(m.clone());
            let tv = g.param(t.clone());
            g.gate(mv, psi, tv).unwrap()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(probe(2, 2, 0.0));
        let p = g.param(probe(2, 2, 1.0));
        let y = g.matmul(c, p).unwrap();
        let l = g.mean_square(y);
        let grads = g.backward(l, 1.0).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
