//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] walks it in
//! reverse and fills gradients for every tracked node. Gradients are handed
//! back to parameter tensors with [`Tape::accumulate_grads`], which *adds*
//! into `Tensor::grad` — callers zero gradients themselves. The tape is a
//! plain value and is dropped after use.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 values with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor literal contains {bad}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a scalar (one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: usize, rhs: usize, m: usize, k: usize, n: usize },
    AddRow { lhs: usize, bias: usize },
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, pad: usize },
    Relu { input: usize },
    Tanh { input: usize },
    Sigmoid { input: usize },
    Ln { input: usize },
    Clamp { input: usize, lo: f64, hi: f64 },
    OneMinus { input: usize },
    Neg { input: usize },
    Add { lhs: usize, rhs: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    MeanAll { input: usize },
    SumAll { input: usize },
    MeanRows { input: usize, cols: usize },
    Reshape { input: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
    /// True when a gradient must be computed for this node.
    tracked: bool,
}

/// Reverse-mode tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf holding a trainable parameter; gradients will be computed for it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Leaf holding input data; no gradient is propagated into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data_of(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` with respect to `v`.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data_of(a), self.data_of(b), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { lhs: a.0, rhs: b.0, m, k, n }, tracked))
    }

    /// Broadcast-adds a row vector `[n]` to every row of `[m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::dimension(format!("add_row {sa:?} + {sb:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut out = self.data_of(a).to_vec();
        let b = self.data_of(bias);
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] += b[c];
            }
        }
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(out, vec![m, n], Op::AddRow { lhs: a.0, bias: bias.0 }, tracked))
    }

    /// Fully-connected layer: `input·weight + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let mm = self.matmul(input, weight)?;
        self.add_row(mm, bias)
    }

    /// Naive 2-D convolution. `input [B,Ci,H,W]`, `weight [Co,Ci,kh,kw]`,
    /// `bias [Co]`, square stride and zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape_of(input).to_vec();
        let sw = self.shape_of(weight).to_vec();
        let sb = self.shape_of(bias).to_vec();
        if si.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::dimension(format!(
                "conv2d input {si:?} weight {sw:?} bias {sb:?}"
            )));
        }
        let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, wci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wci != ci || sb[0] != co {
            return Err(Error::dimension(format!(
                "conv2d channel mismatch: input {ci}, weight {wci}, bias {}",
                sb[0]
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}+{pad}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let x = self.data_of(input);
        let wt = self.data_of(weight);
        let bs = self.data_of(bias);
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bs[oc];
                        for ic in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * ci + ic) * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * co + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        Ok(self.push(
            out,
            vec![b, co, ho, wo],
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, pad },
            tracked,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::Relu { input: a.0 }, tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::Tanh { input: a.0 }, tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::Sigmoid { input: a.0 }, tracked)
    }

    /// Natural log. Inputs must be positive; pair with [`Tape::clamp`].
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data_of(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::contract(format!("ln of non-positive value {bad}")));
        }
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(out, shape, Op::Ln { input: a.0 }, tracked))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the range and is
    /// zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::Clamp { input: a.0, lo, hi }, tracked)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| 1.0 - x).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::OneMinus { input: a.0 }, tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| -x).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::Neg { input: a.0 }, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x + y, |lhs, rhs| Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x - y, |lhs, rhs| Op::Sub { lhs, rhs })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x * y, |lhs, rhs| Op::Mul { lhs, rhs })
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::dimension(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let out: Vec<f64> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, shape, op(a.0, b.0), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data_of(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape_of(a).to_vec();
        let tracked = self.tracked(a);
        self.push(out, shape, Op::Scale { input: a.0, factor }, tracked)
    }

    /// Mean of all elements; scalar output of shape `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.data_of(a).len() as f64;
        let s: f64 = self.data_of(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![s / n], vec![1], Op::MeanAll { input: a.0 }, tracked)
    }

    /// Sum of all elements; scalar output of shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data_of(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![s], vec![1], Op::SumAll { input: a.0 }, tracked)
    }

    /// Row means of a `[m×n]` tensor, output `[m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 {
            return Err(Error::dimension(format!("mean_rows on {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let x = self.data_of(a);
        let out: Vec<f64> = (0..m)
            .map(|r| x[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let tracked = self.tracked(a);
        Ok(self.push(out, vec![m], Op::MeanRows { input: a.0, cols: n }, tracked))
    }

    /// Reinterprets the elements under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data_of(a).len() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.shape_of(a)
            )));
        }
        let out = self.data_of(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(out, shape, Op::Reshape { input: a.0 }, tracked))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    ///
    /// `logits` is `[B×C]` with `C >= 2`; labels are class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape_of(logits);
        if s.len() != 2 {
            return Err(Error::dimension(format!("cross_entropy logits {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        if c < 2 {
            return Err(Error::contract(format!("cross_entropy needs C >= 2, got {c}")));
        }
        if labels.len() != b {
            return Err(Error::dimension(format!(
                "cross_entropy: {b} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for C={c}")));
        }
        let x = self.data_of(logits);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[label];
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![total / b as f64],
            vec![1],
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec() },
            tracked,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Fills `grad` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward on non-scalar loss of shape {:?}",
                node.shape
            )));
        }
        if !node.data[0].is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", node.data[0])));
        }
        for n in &mut self.nodes {
            n.grad = if n.tracked {
                Some(vec![0.0; n.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].tracked {
            // Loss independent of every parameter: nothing to propagate.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { lhs, rhs, m, k, n } => {
                    if self.nodes[lhs].tracked {
                        // dA = dC · Bᵀ
                        let bt = transpose(&self.nodes[rhs].data, k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        add_into(self.nodes[lhs].grad.as_mut().unwrap(), &da);
                    }
                    if self.nodes[rhs].tracked {
                        // dB = Aᵀ · dC
                        let at = transpose(&self.nodes[lhs].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        add_into(self.nodes[rhs].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::AddRow { lhs, bias } => {
                    let n = self.nodes[bias].data.len();
                    if self.nodes[lhs].tracked {
                        add_into(self.nodes[lhs].grad.as_mut().unwrap(), &grad);
                    }
                    if self.nodes[bias].tracked {
                        let g = self.nodes[bias].grad.as_mut().unwrap();
                        for (idx, &gv) in grad.iter().enumerate() {
                            g[idx % n] += gv;
                        }
                    }
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    self.conv2d_backward(i, input, weight, bias, stride, pad, &grad);
                }
                Op::Relu { input } => {
                    if self.nodes[input].tracked {
                        let xs = self.nodes[input].data.clone();
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &x) in xs.iter().enumerate() {
                            if x > 0.0 {
                                g[j] += grad[j];
                            }
                        }
                    }
                }
                Op::Tanh { input } => {
                    if self.nodes[input].tracked {
                        let ys = self.nodes[i].data.clone();
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &y) in ys.iter().enumerate() {
                            g[j] += grad[j] * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    if self.nodes[input].tracked {
                        let ys = self.nodes[i].data.clone();
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &y) in ys.iter().enumerate() {
                            g[j] += grad[j] * y * (1.0 - y);
                        }
                    }
                }
                Op::Ln { input } => {
                    if self.nodes[input].tracked {
                        let xs = self.nodes[input].data.clone();
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &x) in xs.iter().enumerate() {
                            g[j] += grad[j] / x;
                        }
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    if self.nodes[input].tracked {
                        let xs = self.nodes[input].data.clone();
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &x) in xs.iter().enumerate() {
                            if x > lo && x < hi {
                                g[j] += grad[j];
                            }
                        }
                    }
                }
                Op::OneMinus { input } | Op::Neg { input } => {
                    if self.nodes[input].tracked {
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &gv) in grad.iter().enumerate() {
                            g[j] -= gv;
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    for side in [lhs, rhs] {
                        if self.nodes[side].tracked {
                            add_into(self.nodes[side].grad.as_mut().unwrap(), &grad);
                        }
                    }
                }
                Op::Sub { lhs, rhs } => {
                    if self.nodes[lhs].tracked {
                        add_into(self.nodes[lhs].grad.as_mut().unwrap(), &grad);
                    }
                    if self.nodes[rhs].tracked {
                        let g = self.nodes[rhs].grad.as_mut().unwrap();
                        for (j, &gv) in grad.iter().enumerate() {
                            g[j] -= gv;
                        }
                    }
                }
                Op::Mul { lhs, rhs } => {
                    if self.nodes[lhs].tracked {
                        let other = self.nodes[rhs].data.clone();
                        let g = self.nodes[lhs].grad.as_mut().unwrap();
                        for (j, &gv) in grad.iter().enumerate() {
                            g[j] += gv * other[j];
                        }
                    }
                    if self.nodes[rhs].tracked {
                        let other = self.nodes[lhs].data.clone();
                        let g = self.nodes[rhs].grad.as_mut().unwrap();
                        for (j, &gv) in grad.iter().enumerate() {
                            g[j] += gv * other[j];
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if self.nodes[input].tracked {
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (j, &gv) in grad.iter().enumerate() {
                            g[j] += gv * factor;
                        }
                    }
                }
                Op::MeanAll { input } => {
                    if self.nodes[input].tracked {
                        let n = self.nodes[input].data.len() as f64;
                        let gv = grad[0] / n;
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for slot in g.iter_mut() {
                            *slot += gv;
                        }
                    }
                }
                Op::SumAll { input } => {
                    if self.nodes[input].tracked {
                        let gv = grad[0];
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for slot in g.iter_mut() {
                            *slot += gv;
                        }
                    }
                }
                Op::MeanRows { input, cols } => {
                    if self.nodes[input].tracked {
                        let g = self.nodes[input].grad.as_mut().unwrap();
                        for (r, &gv) in grad.iter().enumerate() {
                            let share = gv / cols as f64;
                            for c in 0..cols {
                                g[r * cols + c] += share;
                            }
                        }
                    }
                }
                Op::Reshape { input } => {
                    if self.nodes[input].tracked {
                        add_into(self.nodes[input].grad.as_mut().unwrap(), &grad);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if self.nodes[logits].tracked {
                        let x = self.nodes[logits].data.clone();
                        let b = labels.len();
                        let c = x.len() / b;
                        let g = self.nodes[logits].grad.as_mut().unwrap();
                        let upstream = grad[0] / b as f64;
                        for (r, &label) in labels.iter().enumerate() {
                            let row = &x[r * c..(r + 1) * c];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                            for j in 0..c {
                                let soft = (row[j] - max).exp() / sum;
                                let ind = if j == label { 1.0 } else { 0.0 };
                                g[r * c + j] += upstream * (soft - ind);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        out_idx: usize,
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        grad: &[f64],
    ) {
        let si = self.nodes[input].shape.clone();
        let sw = self.nodes[weight].shape.clone();
        let so = self.nodes[out_idx].shape.clone();
        let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (ho, wo) = (so[2], so[3]);
        let x = self.nodes[input].data.clone();
        let wt = self.nodes[weight].data.clone();

        let want_input = self.nodes[input].tracked;
        let want_weight = self.nodes[weight].tracked;
        let want_bias = self.nodes[bias].tracked;

        let mut dx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
        let mut dw = if want_weight { vec![0.0; wt.len()] } else { Vec::new() };
        let mut db = if want_bias { vec![0.0; co] } else { Vec::new() };

        for bi in 0..b {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = grad[((bi * co + oc) * ho + oy) * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        if want_bias {
                            db[oc] += go;
                        }
                        for ic in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * ci + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                    if want_weight {
                                        dw[wi] += go * x[xi];
                                    }
                                    if want_input {
                                        dx[xi] += go * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_input {
            add_into(self.nodes[input].grad.as_mut().unwrap(), &dx);
        }
        if want_weight {
            add_into(self.nodes[weight].grad.as_mut().unwrap(), &dw);
        }
        if want_bias {
            add_into(self.nodes[bias].grad.as_mut().unwrap(), &db);
        }
    }

    /// Adds tape gradients into the `grad` slots of `targets`.
    ///
    /// `leaves[i]` must be the param leaf created from `targets[i]`.
    pub fn accumulate_grads(&self, leaves: &[Var], targets: &mut [&mut Tensor]) -> Result<()> {
        if leaves.len() != targets.len() {
            return Err(Error::contract(format!(
                "{} leaves vs {} target tensors",
                leaves.len(),
                targets.len()
            )));
        }
        for (leaf, target) in leaves.iter().zip(targets.iter_mut()) {
            let grad = self.nodes[leaf.0].grad.as_ref().ok_or_else(|| {
                Error::contract("accumulate_grads before backward".to_string())
            })?;
            if grad.len() != target.numel() {
                return Err(Error::dimension(format!(
                    "grad of {} elements for tensor of {}",
                    grad.len(),
                    target.numel()
                )));
            }
            match &mut target.grad {
                Some(existing) => add_into(existing, grad),
                slot @ None => *slot = Some(grad.clone()),
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise softmax of a `[B×C]` tensor, as plain data.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::dimension(format!("softmax_rows on {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for r in 0..b {
        let row = &x[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[r * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[r * c + j] /= sum;
        }
    }
    Tensor::new(vec![b, c], out)
}

/// Argmax per row of a `[B×C]` tensor. Ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::dimension(format!("argmax_rows on {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    let x = logits.data();
    Ok((0..b)
        .map(|r| {
            let row = &x[r * c..(r + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_shape_mismatch_and_nonfinite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn linear_identity_weight_passes_input() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data_of(y), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_passes_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[0.0, 0.0]));
        let w = tape.constant(&t(&[2, 2], &[5.0, -1.0, 2.0, 9.0]));
        let b = tape.constant(&t(&[2], &[3.0, 4.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data_of(y), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_computed_matmul() {
        // [1,1]·[[2,3],[4,5]] + [1,1] = [7,9]
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(&t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = tape.constant(&t(&[2], &[1.0, 1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data_of(y), &[7.0, 9.0]);
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 3], &[0.0; 3]));
        let w = tape.constant(&t(&[2, 2], &[0.0; 4]));
        assert!(tape.matmul(x, w).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t(&[1, 10], &[0.7; 10]));
        let loss = tape.cross_entropy(logits, &[3]).unwrap();
        assert!((tape.data_of(loss)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut tape = Tape::new();
            let logits = tape.constant(&t(&[1, 3], &[0.0, 0.0, margin]));
            let loss = tape.cross_entropy(logits, &[2]).unwrap();
            let v = tape.data_of(loss)[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_scalar_softmax_oracle() {
        // -ln(e^3 / (e^1 + e^2 + e^3)) computed by hand
        let mut tape = Tape::new();
        let logits = tape.constant(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((tape.data_of(loss)[0] - expected).abs() < 1e-12);
        assert!((tape.data_of(loss)[0] - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t(&[1, 3], &[0.0; 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_nonnegative_always() {
        let mut tape = Tape::new();
        let logits = tape.constant(&t(&[2, 4], &[3.0, -2.0, 0.5, 1.0, -9.0, 4.0, 4.0, 4.0]));
        let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
        assert!(tape.data_of(loss)[0] >= 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(&t(&[3], &[2.0, -1.0, 0.5]));
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_sum_is_identity() {
        let mut tape = Tape::new();
        let w = tape.param(&t(&[3], &[1.0, -2.0, 0.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(w).unwrap(), &[1.0, -2.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut param = t(&[2], &[1.0, 2.0]).with_grad();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&param);
            let loss = tape.sum_all(w);
            tape.backward(loss).unwrap();
            tape.accumulate_grads(&[w], &mut [&mut param]).unwrap();
        }
        assert_eq!(param.grad.as_deref().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let logits = t(&[2, 5], &[0.3, -1.0, 2.2, 0.0, 1.1, 4.0, 4.0, 4.0, 4.0, 4.0]);
        let sm = softmax_rows(&logits).unwrap();
        for r in 0..2 {
            let sum: f64 = sm.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted_data: Vec<f64> = logits.data().iter().map(|x| x + 13.5).collect();
        let shifted = softmax_rows(&t(&[2, 5], &shifted_data)).unwrap();
        for (a, b) in sm.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn clamp_gradient_is_zero_outside_range() {
        let mut tape = Tape::new();
        let w = tape.param(&t(&[3], &[0.5, 2.0, -2.0]));
        let c = tape.clamp(w, 0.0, 1.0);
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(w).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn untracked_graph_skips_gradients() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 2.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad_of(x).is_none());
    }
}
