//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records each operation with the values it needs for the
//! backward pass. Leaves are constants or parameters; gradients are only
//! propagated through nodes that (transitively) depend on a parameter, so
//! large constant inputs never receive a gradient.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Norm floor for row normalization of (near-)zero rows.
pub const NORM_FLOOR: f64 = 1e-12;

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
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulT(Var, Var),
    Relu(Var),
    /// Elementwise product with a constant matrix.
    MulConst(Var, DenseMatrix<T>),
    SoftmaxRows(Var),
    /// Mean of `−log(max(p[row, class], floor))` over the listed targets.
    MaskedCrossEntropy {
        probs: Var,
        targets: Vec<(usize, usize)>,
    },
    /// Rows divided by `max(‖row‖, floor)`; stores the norms used.
    NormalizeRows(Var, Vec<T>),
    Scale(Var, T),
    Add(Var, Var),
    /// Prototype-alignment contrastive loss over a c×c cosine matrix.
    PrototypeContrast(ContrastSpec<T>),
}

#[derive(Clone, Debug)]
struct ContrastSpec<T> {
    cosines: Var,
    valid: Vec<bool>,
    tau: T,
    include_positive: bool,
}

struct Node<T> {
    value: DenseMatrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<DenseMatrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix<T>> {
        self.grads[v.0].take()
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

    pub fn value(&self, v: Var) -> &DenseMatrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    fn push(&mut self, value: DenseMatrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: DenseMatrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn parameter(&mut self, value: DenseMatrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn mul_const(&mut self, a: Var, mask: DenseMatrix<T>) -> Result<Var> {
        let value = self.value(a).hadamard(&mask)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::MulConst(a, mask), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// `targets` lists `(row, class)` pairs; the loss is their mean.
    pub fn masked_cross_entropy(
        &mut self,
        probs: Var,
        targets: Vec<(usize, usize)>,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Empty("cross-entropy mask"));
        }
        let p = self.value(probs);
        for &(r, c) in &targets {
            if r >= p.rows() || c >= p.cols() {
                return Err(Error::shape(
                    "masked_cross_entropy",
                    format!("targets within {:?}", p.shape()),
                    format!("({r}, {c})"),
                ));
            }
        }
        let floor = T::lit(PROB_FLOOR);
        let total: T = targets
            .iter()
            .map(|&(r, c)| -p[(r, c)].max(floor).ln())
            .sum();
        let loss = total / T::lit(targets.len() as f64);
        let ng = self.needs(probs);
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::MaskedCrossEntropy { probs, targets },
            ng,
        ))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let floor = T::lit(NORM_FLOOR);
        let norms: Vec<T> = (0..x.rows())
            .map(|i| x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(floor))
            .collect();
        let value = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] / norms[i]);
        let ng = self.needs(a);
        self.push(value, Op::NormalizeRows(a, norms), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Contrastive loss over a square matrix of cosines `C[j][q] = cos(p_j, p′_q)`.
    ///
    /// For each valid class `j` the positive pair `(j, j)` is contrasted against
    /// the other valid classes along its row and along its column, with logits
    /// `C / tau`. With `include_positive = false` the denominators exclude
    /// `q = j`. Requires at least two valid classes.
    pub fn prototype_contrast(
        &mut self,
        cosines: Var,
        valid: Vec<bool>,
        tau: T,
        include_positive: bool,
    ) -> Result<Var> {
        let c = self.value(cosines);
        if c.rows() != c.cols() || c.rows() != valid.len() {
            return Err(Error::shape(
                "prototype_contrast",
                format!("{0}x{0}", valid.len()),
                format!("{:?}", c.shape()),
            ));
        }
        if valid.iter().filter(|&&v| v).count() < 2 {
            return Err(Error::InvalidParam(
                "prototype contrast needs at least two valid classes".into(),
            ));
        }
        if tau <= T::zero() {
            return Err(Error::InvalidParam("temperature must be positive".into()));
        }
        let spec = ContrastSpec {
            cosines,
            valid,
            tau,
            include_positive,
        };
        let loss = contrast_forward_backward(c, &spec, None);
        let ng = self.needs(cosines);
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            Op::PrototypeContrast(spec),
            ng,
        ))
    }

    /// Reverse accumulation from a 1×1 `loss`. Only nodes that depend on a
    /// parameter receive gradients.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<DenseMatrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &DenseMatrix<T>,
        grads: &mut [Option<DenseMatrix<T>>],
    ) {
        let mut send = |v: Var, contrib: DenseMatrix<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.matmul_t(self.value(*b)).expect("shape"));
                }
                if self.needs(*b) {
                    send(*b, self.value(*a).t_matmul(g).expect("shape"));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                if self.needs(*a) {
                    send(*a, g.matmul(self.value(*b)).expect("shape"));
                }
                if self.needs(*b) {
                    send(*b, g.t_matmul(self.value(*a)).expect("shape"));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
                    if x[(i, j)] > T::zero() {
                        g[(i, j)]
                    } else {
                        T::zero()
                    }
                });
                send(*a, d);
            }
            Op::MulConst(a, mask) => send(*a, g.hadamard(mask).expect("shape")),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, (&p, &q)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                send(*a, d);
            }
            Op::MaskedCrossEntropy { probs, targets } => {
                let p = self.value(*probs);
                let floor = T::lit(PROB_FLOOR);
                let scale = g[(0, 0)] / T::lit(targets.len() as f64);
                let mut d = DenseMatrix::zeros(p.rows(), p.cols());
                for &(r, c) in targets {
                    let v = p[(r, c)];
                    if v > floor {
                        d[(r, c)] -= scale / v;
                    }
                }
                send(*probs, d);
            }
            Op::NormalizeRows(a, norms) => {
                let x = self.value(*a);
                let y = &node.value;
                let floor = T::lit(NORM_FLOOR);
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for (i, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    if n > floor {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (q - p * dot) / n;
                        }
                    } else {
                        for (o, &q) in d.row_mut(i).iter_mut().zip(gr) {
                            *o = q / n;
                        }
                    }
                }
                send(*a, d);
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::PrototypeContrast(spec) => {
                let c = self.value(spec.cosines);
                let mut d = DenseMatrix::zeros(c.rows(), c.cols());
                contrast_forward_backward(c, spec, Some(&mut d));
                send(spec.cosines, d.scale(g[(0, 0)]));
            }
        }
    }
}

/// Row softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Log-sum-exp of `logit(q)` over `q in idx`, plus softmax weights.
fn log_sum_exp<T: Scalar>(
    logits: impl Iterator<Item = (usize, T)> + Clone,
) -> (T, Vec<(usize, T)>) {
    let max = logits
        .clone()
        .map(|(_, v)| v)
        .fold(T::neg_infinity(), T::max);
    let exps: Vec<(usize, T)> = logits.map(|(q, v)| (q, (v - max).exp())).collect();
    let total: T = exps.iter().map(|&(_, e)| e).sum();
    let weights = exps.into_iter().map(|(q, e)| (q, e / total)).collect();
    (max + total.ln(), weights)
}

/// Returns the loss; with `grad` set, also writes `∂loss/∂C`.
fn contrast_forward_backward<T: Scalar>(
    c: &DenseMatrix<T>,
    spec: &ContrastSpec<T>,
    mut grad: Option<&mut DenseMatrix<T>>,
) -> T {
    let valid: Vec<usize> = (0..spec.valid.len()).filter(|&j| spec.valid[j]).collect();
    let inv_tau = T::one() / spec.tau;
    let norm = T::one() / T::lit(2.0 * valid.len() as f64);
    let mut total = T::zero();
    for &j in &valid {
        let positive = c[(j, j)] * inv_tau;
        let others = |q: &&usize| spec.include_positive || **q != j;
        let row = valid
            .iter()
            .filter(others)
            .map(|&q| (q, c[(j, q)] * inv_tau));
        let col = valid
            .iter()
            .filter(others)
            .map(|&q| (q, c[(q, j)] * inv_tau));
        let (row_lse, row_w) = log_sum_exp(row);
        let (col_lse, col_w) = log_sum_exp(col);
        total += (positive - row_lse) + (positive - col_lse);
        if let Some(d) = grad.as_deref_mut() {
            d[(j, j)] -= T::lit(2.0) * norm * inv_tau;
            for (q, w) in row_w {
                d[(j, q)] += norm * inv_tau * w;
            }
            for (q, w) in col_w {
                d[(q, j)] += norm * inv_tau * w;
            }
        }
    }
    -norm * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = crate::rng::seeded(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Max relative error between the tape gradient of `build` w.r.t. its
    /// single parameter and central finite differences.
    fn fd_check(param: DenseMatrix<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let eval = |p: &DenseMatrix<f64>| {
            let mut t = Tape::new();
            let v = t.parameter(p.clone());
            let l = build(&mut t, v);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let v = tape.parameter(param.clone());
        let loss = build(&mut tape, v);
        let grads = tape.backward(loss);
        let analytic = grads.get(v).unwrap().clone();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..param.as_slice().len() {
            let mut plus = param.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = param.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn scalar_matmul_rule() {
        let mut t = Tape::<f64>::new();
        let a = t.parameter(DenseMatrix::filled(1, 1, 2.0));
        let b = t.parameter(DenseMatrix::filled(1, 1, 3.0));
        let out = t.matmul(a, b).unwrap();
        let l = t.scale(out, 5.0);
        assert_eq!(t.scalar(out), 6.0);
        let g = t.backward(l);
        assert_eq!(g.get(a).unwrap()[(0, 0)], 15.0);
        assert_eq!(g.get(b).unwrap()[(0, 0)], 10.0);
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let b = rand_matrix(3, 2, 2);
        let w = rand_matrix(4, 2, 3);
        let err = fd_check(rand_matrix(4, 3, 1), |t, a| {
            let bv = t.constant(b.clone());
            let p = t.matmul(a, bv).unwrap();
            let m = t.mul_const(p, w.clone()).unwrap();
            sum_all(t, m)
        });
        assert!(err <= 1e-6, "rel err {err}");
        let a = rand_matrix(4, 3, 1);
        let err = fd_check(rand_matrix(3, 2, 2), |t, b| {
            let av = t.constant(a.clone());
            let p = t.matmul(av, b).unwrap();
            let m = t.mul_const(p, w.clone()).unwrap();
            sum_all(t, m)
        });
        assert!(err <= 1e-6, "rel err {err}");
    }

    fn sum_all(t: &mut Tape<f64>, v: Var) -> Var {
        let (r, c) = t.value(v).shape();
        let left = t.constant(DenseMatrix::filled(1, r, 1.0));
        let right = t.constant(DenseMatrix::filled(c, 1, 1.0));
        let s = t.matmul(left, v).unwrap();
        t.matmul(s, right).unwrap()
    }

    #[test]
    fn relu_subgradient() {
        let mut t = Tape::<f64>::new();
        let x = t.parameter(DenseMatrix::from_rows(&[[-1.0, 2.0]]));
        let r = t.relu(x);
        let ones = t.constant(DenseMatrix::filled(2, 1, 1.0));
        let l = t.matmul(r, ones).unwrap();
        let g = t.backward(l);
        assert_eq!(g.get(x).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_zero_row_is_uniform_and_stable() {
        let s = softmax_rows(&DenseMatrix::<f64>::zeros(1, 3));
        for &v in s.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = DenseMatrix::from_rows(&[[1e4, -1e4, 9999.0], [-1e4, -1e4, -1e4]]);
        let s = softmax_rows(&big);
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(DenseMatrix::filled(4, 3, 1.0 / 3.0));
        let l = t.masked_cross_entropy(p, vec![(0, 2), (3, 1)]).unwrap();
        assert!((t.scalar(l) - 3f64.ln()).abs() < 1e-12);
        let onehot = t.constant(DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let l = t
            .masked_cross_entropy(onehot, vec![(0, 1), (1, 0)])
            .unwrap();
        assert!(t.scalar(l) <= 1e-11);
        assert!(t.masked_cross_entropy(onehot, vec![]).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_fd() {
        let err = fd_check(rand_matrix(5, 3, 4), |t, x| {
            let s = t.softmax_rows(x);
            t.masked_cross_entropy(s, vec![(0, 1), (2, 0), (4, 2)])
                .unwrap()
        });
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn contrast_identity_prototypes() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(DenseMatrix::identity(2));
        let l = t
            .prototype_contrast(c, vec![true, true], 1.0, false)
            .unwrap();
        assert!((t.scalar(l) + 1.0).abs() < 1e-12);
        assert!(t
            .prototype_contrast(c, vec![true, false], 1.0, false)
            .is_err());
    }

    #[test]
    fn normalize_and_contrast_gradients_match_fd() {
        let other = rand_matrix(4, 3, 6);
        for include_positive in [false, true] {
            let err = fd_check(rand_matrix(4, 3, 5), |t, p| {
                let pn = t.normalize_rows(p);
                let q = t.constant(other.clone());
                let qn = t.normalize_rows(q);
                let c = t.matmul_t(pn, qn).unwrap();
                t.prototype_contrast(c, vec![true, true, false, true], 0.3, include_positive)
                    .unwrap()
            });
            assert!(err <= 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn constant_subgraphs_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(rand_matrix(3, 2, 1));
        let w = t.parameter(rand_matrix(2, 2, 2));
        let h = t.matmul(x, w).unwrap();
        let s = t.softmax_rows(h);
        let l = t.masked_cross_entropy(s, vec![(0, 0)]).unwrap();
        let g = t.backward(l);
        assert!(g.get(x).is_none());
        assert!(g.get(h).is_none());
        assert!(g.get(w).is_some());
    }
}
