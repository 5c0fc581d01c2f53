//! Reverse-mode differentiation on a recording tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its output value
//! and the identities of its inputs. Creation order is a topological order of
//! the graph, so the backward pass walks the nodes once in reverse, pushing
//! the output adjoint through a hand-written rule per operation and
//! accumulating into per-node gradient slots keyed by [`Var`].
//!
//! Every rule here is validated against central finite differences through
//! [`grad_check`]; new operations must come with the same check.

use std::sync::Arc;

use crate::error::{Result, SsamError};
use crate::scan;
use crate::tensor::{Scalar, Tensor};

/// Identity of a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    /// `[m, n] + [n]`, the bias pattern.
    AddRow(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    SumAll(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    /// `y = -exp(x)`; turns an unconstrained log-parameter into a strictly
    /// negative evolution coefficient.
    NegExp(Var),
    RmsNorm {
        x: Var,
        scale: Var,
        eps: F,
    },
    /// Depthwise causal convolution: `x [L, C]`, `weight [C, K]`, zero
    /// left-padding of `K - 1`.
    CausalDepthwiseConv {
        x: Var,
        weight: Var,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        b: Var,
        c: Var,
        a: Var,
        d_skip: Var,
    },
    SliceCols {
        x: Var,
        lo: usize,
        hi: usize,
    },
    /// Replace the given rows of `x` with `token`.
    MaskRows {
        x: Var,
        token: Var,
        rows: Arc<Vec<usize>>,
    },
    PrependRow {
        row: Var,
        x: Var,
    },
    DropFirstRow(Var),
    ReverseRows(Var),
    /// Mean squared error against a constant target over the selected rows
    /// (all rows when `rows` is `None`).
    MseVs {
        x: Var,
        target: Arc<Tensor<F>>,
        rows: Option<Arc<Vec<usize>>>,
    },
    /// Mean softmax cross-entropy of `[m, classes]` logits against integer labels.
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<usize>>,
    },
    /// Mean binary cross-entropy on logits against `{0, 1}` targets.
    BceWithLogits {
        logits: Var,
        targets: Arc<Tensor<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaf
/// gradients are retained; interior adjoints are consumed as the sweep passes.
pub struct Grads<F: Scalar> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Recording tape; see the module docs.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// -- stable elementwise primitives shared by forward and backward rules --

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

fn dsilu<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn softplus<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on both tails.
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// tanh-form GELU; the derivative below differentiates this exact expression.
fn gelu<F: Scalar>(x: F) -> F {
    let k = F::of_f64(GELU_K);
    let c = F::of_f64(GELU_C);
    let half = F::of_f64(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * x * (F::one() + t)
}

fn dgelu<F: Scalar>(x: F) -> F {
    let k = F::of_f64(GELU_K);
    let c = F::of_f64(GELU_C);
    let half = F::of_f64(0.5);
    let three = F::of_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (F::one() + three * c * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

fn logsumexp_row<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value (input or parameter).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).dims1()? != n {
            return Err(SsamError::Shape(format!(
                "bias {:?} against [{m}, {n}]",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        Ok(self.push(value, Op::SumAll(a)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(silu);
        Ok(self.push(value, Op::Silu(a)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        Ok(self.push(value, Op::Gelu(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(softplus);
        Ok(self.push(value, Op::Softplus(a)))
    }

    pub fn neg_exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| -v.exp());
        Ok(self.push(value, Op::NegExp(a)))
    }

    /// Row-wise RMS normalization with a learned per-column scale:
    /// `y = x / sqrt(mean(x^2) + eps) * scale`.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: F) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(scale).dims1()? != n {
            return Err(SsamError::Shape(format!(
                "norm scale {:?} against [{m}, {n}]",
                self.value(scale).shape()
            )));
        }
        let xs = self.value(x);
        let g = self.value(scale).data();
        let inv_n = F::of_f64(1.0 / n as f64);
        let mut out = Tensor::zeros([m, n]);
        for r in 0..m {
            let row = xs.row(r);
            let ms: F = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
            let inv_rms = F::one() / (ms + eps).sqrt();
            for i in 0..n {
                out.data_mut()[r * n + i] = row[i] * inv_rms * g[i];
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, scale, eps }))
    }

    pub fn causal_depthwise_conv(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (l, c) = self.value(x).dims2()?;
        let (cw, k) = self.value(weight).dims2()?;
        if cw != c {
            return Err(SsamError::Shape(format!(
                "conv weight {:?} against input [{l}, {c}]",
                self.value(weight).shape()
            )));
        }
        let value = causal_conv_forward(self.value(x), self.value(weight), l, c, k);
        Ok(self.push(value, Op::CausalDepthwiseConv { x, weight }))
    }

    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        b: Var,
        c: Var,
        a: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let input = scan::ScanInput {
            x: self.value(x),
            delta: self.value(delta),
            b: self.value(b),
            c: self.value(c),
            a: self.value(a),
            d_skip: self.value(d_skip),
        };
        let out = scan::selective_scan_ref(&input, None)?;
        Ok(self.push(
            out.y,
            Op::SelectiveScan {
                x,
                delta,
                b,
                c,
                a,
                d_skip,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if lo >= hi || hi > n {
            return Err(SsamError::Shape(format!(
                "column slice {lo}..{hi} of [{m}, {n}]"
            )));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros([m, hi - lo]);
        for r in 0..m {
            out.data_mut()[r * (hi - lo)..(r + 1) * (hi - lo)]
                .copy_from_slice(&src.row(r)[lo..hi]);
        }
        Ok(self.push(out, Op::SliceCols { x, lo, hi }))
    }

    pub fn mask_rows(&mut self, x: Var, token: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(token).dims1()? != n {
            return Err(SsamError::Shape(format!(
                "mask token {:?} against [{m}, {n}]",
                self.value(token).shape()
            )));
        }
        if rows.iter().any(|&r| r >= m) {
            return Err(SsamError::Shape(format!("masked row out of range 0..{m}")));
        }
        let tok = self.value(token).data().to_vec();
        let mut out = self.value(x).clone();
        for &r in rows.iter() {
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(&tok);
        }
        Ok(self.push(out, Op::MaskRows { x, token, rows }))
    }

    pub fn prepend_row(&mut self, row: Var, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(row).dims1()? != n {
            return Err(SsamError::Shape(format!(
                "prepended row {:?} against [{m}, {n}]",
                self.value(row).shape()
            )));
        }
        let mut data = Vec::with_capacity((m + 1) * n);
        data.extend_from_slice(self.value(row).data());
        data.extend_from_slice(self.value(x).data());
        let out = Tensor::new([m + 1, n], data)?;
        Ok(self.push(out, Op::PrependRow { row, x }))
    }

    pub fn drop_first_row(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if m == 0 {
            return Err(SsamError::Shape("cannot drop a row of an empty tensor".into()));
        }
        let out = Tensor::new([m - 1, n], self.value(x).data()[n..].to_vec())?;
        Ok(self.push(out, Op::DropFirstRow(x)))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let value = reverse_rows_tensor(self.value(x))?;
        Ok(self.push(value, Op::ReverseRows(x)))
    }

    pub fn mse_vs(
        &mut self,
        x: Var,
        target: Arc<Tensor<F>>,
        rows: Option<Arc<Vec<usize>>>,
    ) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if target.shape() != [m, n] {
            return Err(SsamError::Shape(format!(
                "mse target {:?} against [{m}, {n}]",
                target.shape()
            )));
        }
        let xv = self.value(x);
        let selected: Vec<usize> = match &rows {
            Some(r) => {
                if r.iter().any(|&i| i >= m) {
                    return Err(SsamError::Shape(format!("mse row out of range 0..{m}")));
                }
                r.as_ref().clone()
            }
            None => (0..m).collect(),
        };
        if selected.is_empty() {
            return Err(SsamError::Param("mse over an empty row selection".into()));
        }
        let count = F::of_f64((selected.len() * n) as f64);
        let mut acc = F::zero();
        for &r in &selected {
            for i in 0..n {
                let d = xv.data()[r * n + i] - target.data()[r * n + i];
                acc = acc + d * d;
            }
        }
        let value = Tensor::scalar(acc / count);
        Ok(self.push(value, Op::MseVs { x, target, rows }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let (m, classes) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(SsamError::Shape(format!(
                "{} labels for {m} logit rows",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(SsamError::Param(format!("label out of range 0..{classes}")));
        }
        let z = self.value(logits);
        let mut acc = F::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row(r);
            acc = acc + logsumexp_row(row) - row[label];
        }
        let value = Tensor::scalar(acc / F::of_f64(m as f64));
        Ok(self.push(value, Op::CrossEntropy { logits, labels }))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor<F>>) -> Result<Var> {
        if self.value(logits).shape() != targets.shape() {
            return Err(SsamError::Shape(format!(
                "bce targets {:?} against logits {:?}",
                targets.shape(),
                self.value(logits).shape()
            )));
        }
        let z = self.value(logits);
        let numel = F::of_f64(z.numel() as f64);
        let mut acc = F::zero();
        for (&zv, &yv) in z.data().iter().zip(targets.data()) {
            acc = acc + zv.max(F::zero()) - zv * yv + (-zv.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(acc / numel);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }))
    }

    /// Reverse sweep from a scalar `loss`. Each recorded operation is visited
    /// exactly once, in reverse creation (= reverse topological) order.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(SsamError::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), F::one()));

        for i in (0..=loss.0).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let gout = if is_leaf {
                continue;
            } else {
                match slots[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(i, &gout, &mut slots)?;
        }
        Ok(Grads { slots })
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &Tensor<F>,
        slots: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let acc = |slots: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>| -> Result<()> {
            match &mut slots[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(slots, *a, gout.clone())?;
                acc(slots, *b, gout.clone())?;
            }
            Op::AddRow(a, bias) => {
                acc(slots, *a, gout.clone())?;
                let (m, n) = gout.dims2()?;
                let mut gb = Tensor::zeros([n]);
                for r in 0..m {
                    for c in 0..n {
                        gb.data_mut()[c] = gb.data_mut()[c] + gout.data()[r * n + c];
                    }
                }
                acc(slots, *bias, gb)?;
            }
            Op::Mul(a, b) => {
                let ga = gout.mul(self.value(*b))?;
                let gb = gout.mul(self.value(*a))?;
                acc(slots, *a, ga)?;
                acc(slots, *b, gb)?;
            }
            Op::Matmul(a, b) => {
                let ga = gout.matmul(&self.value(*b).transpose2()?)?;
                let gb = self.value(*a).transpose2()?.matmul(gout)?;
                acc(slots, *a, ga)?;
                acc(slots, *b, gb)?;
            }
            Op::SumAll(a) => {
                let g = gout.data()[0];
                acc(slots, *a, Tensor::full(self.value(*a).shape().to_vec(), g))?;
            }
            Op::Silu(a) => {
                let g = self.value(*a).map(dsilu).mul(gout)?;
                acc(slots, *a, g)?;
            }
            Op::Gelu(a) => {
                let g = self.value(*a).map(dgelu).mul(gout)?;
                acc(slots, *a, g)?;
            }
            Op::Softplus(a) => {
                let g = self.value(*a).map(sigmoid).mul(gout)?;
                acc(slots, *a, g)?;
            }
            Op::NegExp(a) => {
                // y = -exp(x) so dy/dx = y.
                let g = self.nodes[i].value.mul(gout)?;
                acc(slots, *a, g)?;
            }
            Op::RmsNorm { x, scale, eps } => {
                let xs = self.value(*x);
                let g = self.value(*scale).data();
                let (m, n) = xs.dims2()?;
                let inv_n = F::of_f64(1.0 / n as f64);
                let mut gx = Tensor::zeros([m, n]);
                let mut gscale = Tensor::zeros([n]);
                for r in 0..m {
                    let row = xs.row(r);
                    let grow = gout.row(r);
                    let ms: F = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
                    let rms = (ms + *eps).sqrt();
                    let inv_rms = F::one() / rms;
                    // s = sum_j gout_j * scale_j * x_j
                    let mut s = F::zero();
                    for j in 0..n {
                        s = s + grow[j] * g[j] * row[j];
                    }
                    let coeff = s * inv_n * inv_rms * inv_rms * inv_rms;
                    for j in 0..n {
                        gx.data_mut()[r * n + j] = grow[j] * g[j] * inv_rms - row[j] * coeff;
                        gscale.data_mut()[j] = gscale.data_mut()[j] + grow[j] * row[j] * inv_rms;
                    }
                }
                acc(slots, *x, gx)?;
                acc(slots, *scale, gscale)?;
            }
            Op::CausalDepthwiseConv { x, weight } => {
                let xs = self.value(*x);
                let w = self.value(*weight);
                let (l, c) = xs.dims2()?;
                let (_, k) = w.dims2()?;
                let mut gx = Tensor::zeros([l, c]);
                let mut gw = Tensor::zeros([c, k]);
                for t in 0..l {
                    for ch in 0..c {
                        let go = gout.data()[t * c + ch];
                        if go == F::zero() {
                            continue;
                        }
                        for j in 0..k {
                            let src = t as isize - (k as isize - 1) + j as isize;
                            if src < 0 {
                                continue;
                            }
                            let src = src as usize;
                            gx.data_mut()[src * c + ch] =
                                gx.data_mut()[src * c + ch] + w.data()[ch * k + j] * go;
                            gw.data_mut()[ch * k + j] =
                                gw.data_mut()[ch * k + j] + xs.data()[src * c + ch] * go;
                        }
                    }
                }
                acc(slots, *x, gx)?;
                acc(slots, *weight, gw)?;
            }
            Op::SelectiveScan {
                x,
                delta,
                b,
                c,
                a,
                d_skip,
            } => {
                let input = scan::ScanInput {
                    x: self.value(*x),
                    delta: self.value(*delta),
                    b: self.value(*b),
                    c: self.value(*c),
                    a: self.value(*a),
                    d_skip: self.value(*d_skip),
                };
                let grads = scan::selective_scan_backward(&input, None, gout)?;
                acc(slots, *x, grads.dx)?;
                acc(slots, *delta, grads.ddelta)?;
                acc(slots, *b, grads.db)?;
                acc(slots, *c, grads.dc)?;
                acc(slots, *a, grads.da)?;
                acc(slots, *d_skip, grads.dd_skip)?;
            }
            Op::SliceCols { x, lo, hi } => {
                let (m, n) = self.value(*x).dims2()?;
                let w = hi - lo;
                let mut gx = Tensor::zeros([m, n]);
                for r in 0..m {
                    for j in 0..w {
                        gx.data_mut()[r * n + lo + j] = gout.data()[r * w + j];
                    }
                }
                acc(slots, *x, gx)?;
            }
            Op::MaskRows { x, token, rows } => {
                let (m, n) = gout.dims2()?;
                let mut gx = gout.clone();
                let mut gtok = Tensor::zeros([n]);
                for &r in rows.iter() {
                    for j in 0..n {
                        gtok.data_mut()[j] = gtok.data_mut()[j] + gout.data()[r * n + j];
                        gx.data_mut()[r * n + j] = F::zero();
                    }
                }
                let _ = m;
                acc(slots, *x, gx)?;
                acc(slots, *token, gtok)?;
            }
            Op::PrependRow { row, x } => {
                let (m1, n) = gout.dims2()?;
                let grow = Tensor::new([n], gout.data()[..n].to_vec())?;
                let gx = Tensor::new([m1 - 1, n], gout.data()[n..].to_vec())?;
                acc(slots, *row, grow)?;
                acc(slots, *x, gx)?;
            }
            Op::DropFirstRow(x) => {
                let (m, n) = gout.dims2()?;
                let mut data = vec![F::zero(); (m + 1) * n];
                data[n..].copy_from_slice(gout.data());
                acc(slots, *x, Tensor::new([m + 1, n], data)?)?;
            }
            Op::ReverseRows(x) => {
                acc(slots, *x, reverse_rows_tensor(gout)?)?;
            }
            Op::MseVs { x, target, rows } => {
                let g = gout.data()[0];
                let (m, n) = self.value(*x).dims2()?;
                let selected: Vec<usize> = match rows {
                    Some(r) => r.as_ref().clone(),
                    None => (0..m).collect(),
                };
                let count = F::of_f64((selected.len() * n) as f64);
                let two = F::of_f64(2.0);
                let xv = self.value(*x);
                let mut gx = Tensor::zeros([m, n]);
                for &r in &selected {
                    for j in 0..n {
                        let d = xv.data()[r * n + j] - target.data()[r * n + j];
                        gx.data_mut()[r * n + j] = two * d / count * g;
                    }
                }
                acc(slots, *x, gx)?;
            }
            Op::CrossEntropy { logits, labels } => {
                let g = gout.data()[0];
                let z = self.value(*logits);
                let (m, classes) = z.dims2()?;
                let inv_m = F::of_f64(1.0 / m as f64);
                let mut gz = Tensor::zeros([m, classes]);
                for (r, &label) in labels.iter().enumerate() {
                    let row = z.row(r);
                    let lse = logsumexp_row(row);
                    for j in 0..classes {
                        let p = (row[j] - lse).exp();
                        let delta = if j == label { F::one() } else { F::zero() };
                        gz.data_mut()[r * classes + j] = (p - delta) * inv_m * g;
                    }
                }
                acc(slots, *logits, gz)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let g = gout.data()[0];
                let z = self.value(*logits);
                let inv = F::of_f64(1.0 / z.numel() as f64);
                let mut gz = z.clone();
                for (gv, (&zv, &yv)) in gz
                    .data_mut()
                    .iter_mut()
                    .zip(z.data().iter().zip(targets.data()))
                {
                    *gv = (sigmoid(zv) - yv) * inv * g;
                }
                acc(slots, *logits, gz)?;
            }
        }
        Ok(())
    }
}

fn causal_conv_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    l: usize,
    c: usize,
    k: usize,
) -> Tensor<F> {
    let mut out = Tensor::zeros([l, c]);
    for t in 0..l {
        for ch in 0..c {
            let mut acc = F::zero();
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src >= 0 {
                    acc = acc + w.data()[ch * k + j] * x.data()[src as usize * c + ch];
                }
            }
            out.data_mut()[t * c + ch] = acc;
        }
    }
    out
}

fn reverse_rows_tensor<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = x.dims2()?;
    let mut out = Tensor::zeros([m, n]);
    for r in 0..m {
        out.data_mut()[(m - 1 - r) * n..(m - r) * n].copy_from_slice(x.row(r));
    }
    Ok(out)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, in 64-bit mode. Returns
/// `max_j |analytic_j - fd_j| / max(1, |fd_j|)`.
///
/// `build` must construct the same computation for any input value; it is
/// re-run twice per coordinate for the differences.
pub fn grad_check<B>(build: B, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(SsamError::Param(format!(
            "grad_check eps must lie in [1e-6, 1e-2], got {eps}"
        )));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(point.clone());
        let out = build(&mut tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(SsamError::Shape(format!(
                "grad_check target must be scalar, got {:?}",
                value.shape()
            )));
        }
        let value = value.data()[0];
        if !value.is_finite() {
            return Err(SsamError::Invariant(
                "grad_check: function value is not finite".into(),
            ));
        }
        Ok(value)
    };
    // Analytic gradient once.
    let mut tape = Tape::new();
    let vx = tape.input(x.clone());
    let out = build(&mut tape, vx)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(SsamError::Invariant(
            "grad_check: function value is not finite".into(),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(vx)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut max_err = 0.0f64;
    for j in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[j] += eps;
        let mut minus = x.clone();
        minus.data_mut()[j] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let err = (analytic.data()[j] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
