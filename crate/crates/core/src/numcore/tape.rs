//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its variables. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse insertion
//! order, which is a reverse topological order because a node can only refer
//! to nodes created before it.

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix<T>),
    AddConst(Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, T, T),
    HCat(Var, Var),
    SliceCols(Var, usize),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive operations with their saved values.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`; zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// True when some path connects `v` to the loss.
    pub fn reaches(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl<T: Scalar> Tape<T> {
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.as_slice()[0]
    }

    /// `x · wᵀ` for `x: (n, in)` and `w: (out, in)`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_t(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::MatMulT(x, w), rg))
    }

    /// `a + bias` with `bias: (1, cols)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let value = self.value(a).hadamard(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix<T>) -> Result<Var> {
        self.value(a).check_same_shape(&c, "mul_const")?;
        let value = self.value(a).hadamard(&c);
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix<T>) -> Result<Var> {
        self.value(a).check_same_shape(c, "add_const")?;
        let value = self.value(a).add(c);
        let rg = self.rg(a);
        Ok(self.push(value, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let src = self.value(a);
        if factors.len() != src.rows() {
            return Err(Error::shape("scale_rows", src.rows(), factors.len()));
        }
        let mut value = src.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= f;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScaleRows(a, factors), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hcat(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::HCat(a, b), rg))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start > end || end > src.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("range within 0..{}", src.cols()),
                format!("{start}..{end}"),
            ));
        }
        let value = src.slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean over rows of the per-row sum: `sum(a) / rows`.
    pub fn mean_rows_sum(&mut self, a: Var) -> Var {
        let n = self.value(a).rows().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", "1x1 loss", format!("{}x{}", shape.0, shape.1)));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let mut acc = |v: Var, delta: Matrix<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    acc(*x, g.matmul(wv).expect("matmul_t backward shapes"));
                }
                if self.rg(*w) {
                    acc(*w, g.t_matmul(xv).expect("matmul_t backward shapes"));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, g.sum_rows());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.hadamard(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.hadamard(self.value(*a)));
                }
            }
            Op::MulConst(a, c) => acc(*a, g.hadamard(c)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::ScaleRows(a, f) => {
                let mut d = g.clone();
                for (r, &fr) in f.iter().enumerate() {
                    for v in d.row_mut(r) {
                        *v *= fr;
                    }
                }
                acc(*a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (T::one() + x * (T::one() - s))
                });
                acc(*a, d);
            }
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x))),
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)),
            Op::Square(a) => {
                let two = T::lit(2.0);
                acc(*a, g.zip_map(self.value(*a), |gi, x| two * gi * x));
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gi, x| {
                    if x < *lo || x > *hi {
                        T::zero()
                    } else {
                        gi
                    }
                });
                acc(*a, d);
            }
            Op::HCat(a, b) => {
                let split = self.value(*a).cols();
                acc(*a, g.slice_cols(0, split));
                acc(*b, g.slice_cols(split, g.cols()));
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.as_slice()[0]));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix<f64> {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(scalar(3.0));
        let c = tape.constant(scalar(5.0));
        let y = tape.sum(c);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[0.0]);
        assert!(!g.reaches(x));
    }

    #[test]
    fn linear_gradient_broadcasts_vector() {
        // f(W) = sum(W v): dF/dW[i][j] = v[j]
        let mut tape = Tape::new();
        let w = tape.param(Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        let v = tape.constant(Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap());
        let wv = tape.matmul_t(v, w).unwrap();
        let f = tape.sum(wv);
        let g = tape.backward(f).unwrap().wrt(w);
        for r in 0..2 {
            assert_eq!(g.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::<f64>::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unused_branch_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.param(scalar(1.0));
        let b = tape.param(scalar(2.0));
        let _unused = tape.exp(b);
        let l = tape.square(a);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(b).as_slice(), &[0.0]);
        assert_eq!(g.wrt(a).as_slice(), &[2.0]);
    }

    #[test]
    fn slice_and_concat_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = tape.param(Matrix::from_rows(&[[3.0]]).unwrap());
        let c = tape.hcat(a, b).unwrap();
        let s = tape.slice_cols(c, 1, 3).unwrap();
        let sq = tape.square(s);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(a).as_slice(), &[0.0, 4.0]);
        assert_eq!(g.wrt(b).as_slice(), &[6.0]);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let silu = |x: f64| x * sigmoid(x);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            let mut tape = Tape::new();
            let v = tape.param(scalar(x));
            let y = tape.silu(v);
            let g = tape.backward(y).unwrap().wrt(v).as_slice()[0];
            assert!((g - fd).abs() < 1e-8, "silu'({x})");

            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "gelu'({x})");
        }
    }
}
