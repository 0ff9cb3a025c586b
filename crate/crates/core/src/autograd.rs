//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every operation appends a node holding its value and enough cached state to
//! run its vector-Jacobian product. Nodes only reference earlier nodes, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::sparsemax::{sparsemax_backward, sparsemax_forward, SimplexProjection};

pub type Matrix = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on the tape.
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
    Detach,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    SparsemaxRows(Var, Vec<SimplexProjection>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Mask(Var, Matrix),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    RowNormalize(Var, Vec<f64>),
    SoftCrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
    },
    KlDiv {
        student: Var,
        teacher: Var,
        tau: f64,
        p: Array1<f64>,
        q: Array1<f64>,
        log_ratio: Array1<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Detach => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::SparsemaxRows(a, _)
            | Op::Gelu(a)
            | Op::Mask(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::RowNormalize(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv {
                student, teacher, ..
            } => vec![*student, *teacher],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Deliberate gradient faults, used only to check that gradient verification
/// localizes a broken backward rule.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection {
    /// Replace the sparsemax Jacobian on its support with the identity.
    pub sparsemax_identity_jacobian: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: FaultInjection,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; zeros if `v` did not influence the root.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.shapes[v.0]),
        }
    }
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: FaultInjection) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same value as `v`, but no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1 × c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + &self.value(b).row(0);
        self.push(value, Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let lsm = log_softmax_row(row.view());
            row.assign(&lsm.mapv(f64::exp));
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn sparsemax_rows(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let mut value = Matrix::zeros(input.dim());
        let mut projections = Vec::with_capacity(input.nrows());
        for (r, row) in input.rows().into_iter().enumerate() {
            let proj = sparsemax_forward(&row.to_vec())?;
            value
                .row_mut(r)
                .assign(&Array1::from_vec(proj.probabilities.clone()));
            projections.push(proj);
        }
        Ok(self.push(value, Op::SparsemaxRows(x, projections)))
    }

    /// Row-wise layer normalization with `1 × c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let cols = input.ncols() as f64;
        let mut xhat = Matrix::zeros(input.dim());
        let mut inv_std = Vec::with_capacity(input.nrows());
        for (r, row) in input.rows().into_iter().enumerate() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * istd));
            inv_std.push(istd);
        }
        let value = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Matrix) -> Var {
        let value = self.value(x) * &mask;
        self.push(value, Op::Mask(x, mask))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean over rows, producing a `1 × c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(x))
    }

    /// Scales each row to unit L2 norm. Fails on a zero row.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let mut value = input.clone();
        let mut norms = Vec::with_capacity(input.nrows());
        for (r, mut row) in value.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNormToken(r));
            }
            row /= norm;
            norms.push(norm);
        }
        Ok(self.push(value, Op::RowNormalize(x, norms)))
    }

    /// Mean over rows of `-sum_c t_rc log softmax(x_r)_c`; `targets` has the
    /// shape of `logits`. Produces a `1 × 1` scalar.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix) -> Result<Var> {
        let x = self.value(logits);
        if x.dim() != targets.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cross-entropy logits {:?} vs targets {:?}",
                x.dim(),
                targets.dim()
            )));
        }
        let rows = x.nrows() as f64;
        let mut probs = Matrix::zeros(x.dim());
        let mut loss = 0.0;
        for (r, row) in x.rows().into_iter().enumerate() {
            let lsm = log_softmax_row(row);
            loss -= lsm
                .iter()
                .zip(targets.row(r))
                .map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l })
                .sum::<f64>();
            probs.row_mut(r).assign(&lsm.mapv(f64::exp));
        }
        let value = Matrix::from_elem((1, 1), loss / rows);
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// `tau^2 * KL(softmax(student/tau) || softmax(teacher/tau))` for `1 × c`
    /// logit rows. Gradients flow to both arguments; detach the teacher to
    /// freeze it.
    pub fn kl_div(&mut self, student: Var, teacher: Var, tau: f64) -> Result<Var> {
        let s = self.value(student);
        let t = self.value(teacher);
        if s.dim() != t.dim() || s.nrows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "kl_div student {:?} vs teacher {:?}",
                s.dim(),
                t.dim()
            )));
        }
        let log_p = log_softmax_row(s.row(0).mapv(|v| v / tau).view());
        let log_q = log_softmax_row(t.row(0).mapv(|v| v / tau).view());
        let p = log_p.mapv(f64::exp);
        let q = log_q.mapv(f64::exp);
        let log_ratio = &log_p - &log_q;
        let kl = (&p * &log_ratio).sum();
        let value = Matrix::from_elem((1, 1), tau * tau * kl);
        Ok(self.push(
            value,
            Op::KlDiv {
                student,
                teacher,
                tau,
                p,
                q,
                log_ratio,
            },
        ))
    }

    /// `sum_i w_i * x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = Matrix::zeros(self.shape(terms[0].0));
        for (v, w) in terms {
            value.scaled_add(*w, self.value(*v));
        }
        self.push(value, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::ones(self.shape(root)));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.op.parents().iter().any(|p| p.0 >= i) {
                return Err(Error::GraphCycle(i));
            }
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::MatMul(a, b) => {
                    let ga = upstream.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&upstream);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = upstream.dot(self.value(*b));
                    let gb = upstream.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, upstream.clone());
                    acc(&mut grads, *b, upstream.clone());
                }
                Op::AddRow(x, b) => {
                    let gb = upstream.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, upstream.clone());
                }
                Op::Scale(x, f) => acc(&mut grads, *x, &upstream * *f),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = y.row(r).dot(&upstream.row(r));
                        let row = (&upstream.row(r) - dot) * &y.row(r);
                        g.row_mut(r).assign(&row);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::SparsemaxRows(x, projections) => {
                    let mut g = Matrix::zeros(node.value.dim());
                    for (r, proj) in projections.iter().enumerate() {
                        let up = upstream.row(r).to_vec();
                        let row = if self.fault.sparsemax_identity_jacobian {
                            let mut out = vec![0.0; up.len()];
                            for &j in &proj.support {
                                out[j] = up[j];
                            }
                            out
                        } else {
                            sparsemax_backward(proj, &up)?
                        };
                        g.row_mut(r).assign(&Array1::from_vec(row));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_row = self.value(*gamma).row(0).to_owned();
                    let g_gamma = (&upstream * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_beta = upstream.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &upstream * &gamma_row;
                    let cols = xhat.ncols() as f64;
                    let mut gx = Matrix::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let row = (&dh * cols - sum_dh - &h * sum_dh_h) * (inv_std[r] / cols);
                        gx.row_mut(r).assign(&row);
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, g_gamma);
                    acc(&mut grads, *beta, g_beta);
                }
                Op::Gelu(x) => {
                    let g = &upstream * &self.value(*x).mapv(gelu_grad);
                    acc(&mut grads, *x, g);
                }
                Op::Mask(x, m) => acc(&mut grads, *x, &upstream * m),
                Op::SliceCols(x, start) => {
                    let mut g = Matrix::zeros(self.shape(*x));
                    let len = upstream.ncols();
                    g.slice_mut(s![.., *start..*start + len]).assign(&upstream);
                    acc(&mut grads, *x, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let g = upstream.slice(s![.., offset..offset + w]).to_owned();
                        acc(&mut grads, *p, g);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        let g = upstream.slice(s![offset..offset + h, ..]).to_owned();
                        acc(&mut grads, *p, g);
                        offset += h;
                    }
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.shape(*x);
                    let row = upstream.row(0).mapv(|v| v / rows as f64);
                    let g = row.broadcast((rows, cols)).unwrap().to_owned();
                    acc(&mut grads, *x, g);
                }
                Op::RowNormalize(x, norms) => {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = y.row(r).dot(&upstream.row(r));
                        let row = (&upstream.row(r) - &(&y.row(r) * dot)) / norms[r];
                        g.row_mut(r).assign(&row);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::SoftCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = upstream[[0, 0]] / probs.nrows() as f64;
                    let mut g = Matrix::zeros(probs.dim());
                    for r in 0..probs.nrows() {
                        let mass = targets.row(r).sum();
                        let row = (&probs.row(r) * mass - &targets.row(r)) * scale;
                        g.row_mut(r).assign(&row);
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::KlDiv {
                    student,
                    teacher,
                    tau,
                    p,
                    q,
                    log_ratio,
                } => {
                    let up = upstream[[0, 0]];
                    let kl = (p * log_ratio).sum();
                    let gs = (p * &(log_ratio - kl)) * (tau * up);
                    let gt = (q - p) * (tau * up);
                    acc(&mut grads, *student, gs.insert_axis(Axis(0)));
                    acc(&mut grads, *teacher, gt.insert_axis(Axis(0)));
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(&mut grads, *v, &upstream * *w);
                    }
                }
            }
            grads[i] = Some(upstream);
        }

        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}
