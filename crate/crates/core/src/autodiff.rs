//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every reachable parameter leaf. Constants never receive
//! gradients, which is how teacher-side quantities are detached: they are
//! evaluated on their own tape and enter the student tape as constants.
//!
//! Loss kernels that would otherwise expand into hundreds of tiny nodes
//! (focal loss, IoU loss, the masked L2 ratio terms, the contrastive
//! softmax) are fused into single nodes with hand-written adjoints.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One nonzero of a sparse linear map `out[out_index] += weight * in[in_index]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatherEntry {
    pub out_index: u32,
    pub in_index: u32,
    pub weight: f64,
}

/// A foreground cell for the IoU box loss: flat indices of the
/// `(left, top, right, bottom)` distance predictions and their targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouCell {
    pub index: [usize; 4],
    pub target: [f64; 4],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Softplus(Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Reshape(Var),
    Gather {
        input: Var,
        entries: Vec<GatherEntry>,
    },
    SigmoidFocal {
        logits: Var,
        targets: Tensor,
        alpha: f64,
        gamma: f64,
    },
    BceLogits {
        logits: Var,
        targets: Tensor,
        weights: Tensor,
    },
    IouLoss {
        boxes: Var,
        cells: Vec<IouCell>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        input: Var,
        target: Tensor,
        weights: Tensor,
        beta: f64,
    },
    MaskedL2 {
        input: Var,
        target: Tensor,
        weights: Tensor,
    },
    Contrastive {
        feats: Var,
        anchors: Tensor,
        positive: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of parameter leaves, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Direct inputs of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(a) | Op::Softplus(a) | Op::Scale(a, _) | Op::Reshape(a) => vec![*a],
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
            Op::Gather { input, .. } => vec![*input],
            Op::SigmoidFocal { logits, .. }
            | Op::BceLogits { logits, .. }
            | Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::IouLoss { boxes, .. } => vec![*boxes],
            Op::SmoothL1 { input, .. } | Op::MaskedL2 { input, .. } => vec![*input],
            Op::Contrastive { feats, .. } => vec![*feats],
        }
    }

    /// 2-D convolution over NCHW input with an `[out, in, k, k]` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, c, h, wd) = x.dims4();
        let (o, ci, k, k2) = w.dims4();
        assert_eq!(ci, c, "conv2d channel mismatch");
        assert_eq!(k, k2);
        assert_eq!(b.len(), o);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = c * k * k;
        let p = ho * wo;
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; kk * p];
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        for img in 0..n {
            geom.im2col(&x.data()[img * c * h * wd..(img + 1) * c * h * wd], &mut cols);
            let dst = &mut out[img * o * p..(img + 1) * o * p];
            gemm(o, kk, p, w.data(), (kk, 1), &cols, (p, 1), dst, 0.0);
            for oc in 0..o {
                let bv = b.data()[oc];
                for v in &mut dst[oc * p..(oc + 1) * p] {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `input [n, d] · weightᵀ [d, o] + bias [o]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, d) = x.dims2();
        let (o, d2) = w.dims2();
        assert_eq!(d, d2, "linear dim mismatch");
        let mut out = vec![0.0; n * o];
        if n > 0 {
            gemm(n, d, o, x.data(), (d, 1), w.data(), (1, d), &mut out, 0.0);
        }
        let b = self.value(bias).data();
        for row in out.chunks_mut(o.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            Tensor::from_vec(&[n, o], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    /// `Σ weight_i · term_i` over same-shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            let t = self.value(v);
            assert_eq!(t.shape(), acc.shape(), "weighted_sum shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * b;
            }
        }
        let rg = terms.iter().any(|t| self.rg(t.0));
        self.push(acc, Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Sparse linear map of `input` into a new tensor of `out_shape`.
    pub fn gather(&mut self, input: Var, entries: Vec<GatherEntry>, out_shape: &[usize]) -> Var {
        let x = self.value(input).data();
        let mut out = Tensor::zeros(out_shape);
        {
            let o = out.data_mut();
            for e in &entries {
                o[e.out_index as usize] += e.weight * x[e.in_index as usize];
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::Gather { input, entries }, rg)
    }

    /// Sum of sigmoid focal loss over every element; elements whose target
    /// is negative are ignored.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: Tensor, alpha: f64, gamma: f64) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| focal_value(z, t, alpha, gamma))
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            },
            rg,
        )
    }

    /// Weighted sum of binary cross-entropy with logits.
    pub fn bce_logits(&mut self, logits: Var, targets: Tensor, weights: Tensor) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        assert_eq!(x.shape(), weights.shape());
        let mut total = 0.0;
        for ((&z, &t), &w) in x.data().iter().zip(targets.data()).zip(weights.data()) {
            if w != 0.0 {
                total += w * (softplus(z) - t * z);
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                targets,
                weights,
            },
            rg,
        )
    }

    /// Sum of `-ln((I + 1) / (U + 1))` over the given cells.
    pub fn iou_loss(&mut self, boxes: Var, cells: Vec<IouCell>) -> Var {
        let x = self.value(boxes).data();
        let total: f64 = cells
            .iter()
            .map(|c| iou_terms(gather4(x, &c.index), c.target).loss)
            .sum();
        let rg = self.rg(boxes);
        self.push(Tensor::scalar(total), Op::IouLoss { boxes, cells }, rg)
    }

    /// Weighted softmax cross-entropy over the rows of `[r, k]` logits.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Var {
        let x = self.value(logits);
        let (r, k) = x.dims2();
        assert_eq!(labels.len(), r);
        assert_eq!(weights.len(), r);
        let mut total = 0.0;
        for i in 0..r {
            let row = &x.data()[i * k..(i + 1) * k];
            total += weights[i] * (log_sum_exp(row) - row[labels[i]]);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
            },
            rg,
        )
    }

    pub fn smooth_l1(&mut self, input: Var, target: Tensor, weights: Tensor, beta: f64) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape(), target.shape());
        assert_eq!(x.shape(), weights.shape());
        let mut total = 0.0;
        for ((&v, &t), &w) in x.data().iter().zip(target.data()).zip(weights.data()) {
            let d = (v - t).abs();
            total += w * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        let rg = self.rg(input);
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                input,
                target,
                weights,
                beta,
            },
            rg,
        )
    }

    /// `|| weights ⊙ (input − target) ||₂` over all elements.
    pub fn masked_l2(&mut self, input: Var, target: Tensor, weights: Tensor) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape(), target.shape(), "masked_l2 target shape");
        assert_eq!(x.shape(), weights.shape(), "masked_l2 weight shape");
        let mut sq = 0.0;
        for ((&v, &t), &w) in x.data().iter().zip(target.data()).zip(weights.data()) {
            if w != 0.0 {
                let r = w * (v - t);
                sq += r * r;
            }
        }
        let rg = self.rg(input);
        self.push(
            Tensor::scalar(sq.sqrt()),
            Op::MaskedL2 {
                input,
                target,
                weights,
            },
            rg,
        )
    }

    /// Weighted contrastive negative log-likelihood.
    ///
    /// Each row `f_i` of `feats [m, d]` is L2-normalized and scored against
    /// the unit-norm `anchors [a, d]` by dot product; the loss is
    /// `Σ_i w_i (logsumexp_a ⟨u_i, anchor_a⟩ − ⟨u_i, anchor_{positive_i}⟩)`.
    pub fn contrastive(
        &mut self,
        feats: Var,
        anchors: Tensor,
        positive: Vec<usize>,
        weights: Vec<f64>,
    ) -> Var {
        let f = self.value(feats);
        let (m, d) = f.dims2();
        let (a, d2) = anchors.dims2();
        assert_eq!(d, d2, "contrastive feature width");
        assert_eq!(positive.len(), m);
        assert_eq!(weights.len(), m);
        let mut total = 0.0;
        let mut scores = vec![0.0; a];
        for i in 0..m {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &f.data()[i * d..(i + 1) * d];
            let norm = l2(row);
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(row, &anchors.data()[j * d..(j + 1) * d]) / norm;
            }
            total += weights[i] * (log_sum_exp(&scores) - scores[positive[i]]);
        }
        let rg = self.rg(feats);
        self.push(
            Tensor::scalar(total),
            Op::Contrastive {
                feats,
                anchors,
                positive,
                weights,
            },
            rg,
        )
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn backprop_node(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, c, h, wd) = x.dims4();
                let (o, _, k, _) = w.dims4();
                let (_, _, ho, wo) = out.dims4();
                let geom = ConvGeom {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                let kk = c * k * k;
                let p = ho * wo;
                let need_x = self.rg(*input);
                let need_w = self.rg(*weight);
                let mut dw = vec![0.0; o * kk];
                let mut db = vec![0.0; o];
                let mut dx = if need_x { vec![0.0; x.len()] } else { vec![] };
                let mut cols = vec![0.0; kk * p];
                let mut dcols = vec![0.0; kk * p];
                for img in 0..n {
                    let go = &g.data()[img * o * p..(img + 1) * o * p];
                    for oc in 0..o {
                        db[oc] += go[oc * p..(oc + 1) * p].iter().sum::<f64>();
                    }
                    if need_w {
                        geom.im2col(&x.data()[img * c * h * wd..(img + 1) * c * h * wd], &mut cols);
                        gemm(o, p, kk, go, (p, 1), &cols, (1, p), &mut dw, 1.0);
                    }
                    if need_x {
                        gemm(kk, o, p, w.data(), (1, kk), go, (p, 1), &mut dcols, 0.0);
                        geom.col2im(&dcols, &mut dx[img * c * h * wd..(img + 1) * c * h * wd]);
                    }
                }
                self.acc(grads, *bias, Tensor::from_vec(&[o], db));
                if need_w {
                    self.acc(grads, *weight, Tensor::from_vec(w.shape(), dw));
                }
                if need_x {
                    self.acc(grads, *input, Tensor::from_vec(x.shape(), dx));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d) = x.dims2();
                let (o, _) = w.dims2();
                let mut db = vec![0.0; o];
                for row in g.data().chunks(o.max(1)) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                self.acc(grads, *bias, Tensor::from_vec(&[o], db));
                if n == 0 {
                    return;
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, g.data(), (1, o), x.data(), (d, 1), &mut dw, 0.0);
                    self.acc(grads, *weight, Tensor::from_vec(&[o, d], dw));
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, o, d, g.data(), (o, 1), w.data(), (d, 1), &mut dx, 0.0);
                    self.acc(grads, *input, Tensor::from_vec(&[n, d], dx));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (dv, &ov) in d.data_mut().iter_mut().zip(out.data()) {
                    if ov <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= sigmoid(xv);
                }
                self.acc(grads, *a, d);
            }
            Op::Scale(a, f) => {
                let mut d = g.clone();
                d.scale_assign(*f);
                self.acc(grads, *a, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let mut d = g.clone();
                    d.scale_assign(w);
                    self.acc(grads, v, d);
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape));
            }
            Op::Gather { input, entries } => {
                let mut d = Tensor::zeros(self.value(*input).shape());
                {
                    let dd = d.data_mut();
                    let gd = g.data();
                    for e in entries {
                        dd[e.in_index as usize] += e.weight * gd[e.out_index as usize];
                    }
                }
                self.acc(grads, *input, d);
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let up = g.item();
                let x = self.value(*logits);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| up * focal_grad(z, t, *alpha, *gamma))
                    .collect();
                self.acc(grads, *logits, Tensor::from_vec(x.shape(), d));
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
            } => {
                let up = g.item();
                let x = self.value(*logits);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights.data())
                    .map(|((&z, &t), &w)| up * w * (sigmoid(z) - t))
                    .collect();
                self.acc(grads, *logits, Tensor::from_vec(x.shape(), d));
            }
            Op::IouLoss { boxes, cells } => {
                let up = g.item();
                let x = self.value(*boxes);
                let mut d = Tensor::zeros(x.shape());
                for c in cells {
                    let terms = iou_terms(gather4(x.data(), &c.index), c.target);
                    for k in 0..4 {
                        d.data_mut()[c.index[k]] += up * terms.grad[k];
                    }
                }
                self.acc(grads, *boxes, d);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
            } => {
                let up = g.item();
                let x = self.value(*logits);
                let (r, k) = x.dims2();
                let mut d = vec![0.0; r * k];
                for i in 0..r {
                    let row = &x.data()[i * k..(i + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let s = (row[j] - lse).exp();
                        let t = if j == labels[i] { 1.0 } else { 0.0 };
                        d[i * k + j] = up * weights[i] * (s - t);
                    }
                }
                self.acc(grads, *logits, Tensor::from_vec(&[r, k], d));
            }
            Op::SmoothL1 {
                input,
                target,
                weights,
                beta,
            } => {
                let up = g.item();
                let x = self.value(*input);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights.data())
                    .map(|((&v, &t), &w)| {
                        let r = v - t;
                        let dr = if r.abs() < *beta { r / beta } else { r.signum() };
                        up * w * dr
                    })
                    .collect();
                self.acc(grads, *input, Tensor::from_vec(x.shape(), d));
            }
            Op::MaskedL2 {
                input,
                target,
                weights,
            } => {
                let norm = out.item();
                let x = self.value(*input);
                if norm == 0.0 {
                    return;
                }
                let up = g.item() / norm;
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights.data())
                    .map(|((&v, &t), &w)| up * w * w * (v - t))
                    .collect();
                self.acc(grads, *input, Tensor::from_vec(x.shape(), d));
            }
            Op::Contrastive {
                feats,
                anchors,
                positive,
                weights,
            } => {
                let up = g.item();
                let f = self.value(*feats);
                let (m, dim) = f.dims2();
                let (a, _) = anchors.dims2();
                let mut d = vec![0.0; m * dim];
                let mut scores = vec![0.0; a];
                let mut du = vec![0.0; dim];
                for i in 0..m {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let row = &f.data()[i * dim..(i + 1) * dim];
                    let norm = l2(row);
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(row, &anchors.data()[j * dim..(j + 1) * dim]) / norm;
                    }
                    let lse = log_sum_exp(&scores);
                    du.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..a {
                        let coeff = (scores[j] - lse).exp() - if j == positive[i] { 1.0 } else { 0.0 };
                        let an = &anchors.data()[j * dim..(j + 1) * dim];
                        for (u, &av) in du.iter_mut().zip(an) {
                            *u += coeff * av;
                        }
                    }
                    // project out the radial component of the unit vector
                    let radial = dot(&du, row) / (norm * norm);
                    let scale = up * weights[i] / norm;
                    for q in 0..dim {
                        d[i * dim + q] = scale * (du[q] - radial * row[q]);
                    }
                }
                self.acc(grads, *feats, Tensor::from_vec(&[m, dim], d));
            }
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with `(row, col)` strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let max_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(max_a < a.len() && max_b < b.len(), "gemm operand out of bounds");
    // SAFETY: the bounds of every operand were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn focal_value(z: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let pos = -alpha * (1.0 - p).powf(gamma) * log_p;
    let neg = -(1.0 - alpha) * p.powf(gamma) * log_q;
    t * pos + (1.0 - t) * neg
}

fn focal_grad(z: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let p = sigmoid(z);
    let q = 1.0 - p;
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let pos = alpha * gamma * q.powf(gamma) * p * log_p - alpha * q.powf(gamma + 1.0);
    let neg = -(1.0 - alpha) * (gamma * p.powf(gamma) * q * log_q - p.powf(gamma + 1.0));
    t * pos + (1.0 - t) * neg
}

fn gather4(x: &[f64], idx: &[usize; 4]) -> [f64; 4] {
    [x[idx[0]], x[idx[1]], x[idx[2]], x[idx[3]]]
}

struct IouTerms {
    loss: f64,
    grad: [f64; 4],
}

/// IoU loss between `(l, t, r, b)` distance boxes sharing an anchor point.
fn iou_terms(p: [f64; 4], q: [f64; 4]) -> IouTerms {
    let [l, t, r, b] = p;
    let [ql, qt, qr, qb] = q;
    let wi = l.min(ql) + r.min(qr);
    let hi = t.min(qt) + b.min(qb);
    let inter = wi * hi;
    let area_p = (l + r) * (t + b);
    let area_q = (ql + qr) * (qt + qb);
    let union = area_p + area_q - inter;
    let loss = -(inter + 1.0).ln() + (union + 1.0).ln();
    let di = [
        if l < ql { hi } else { 0.0 },
        if t < qt { wi } else { 0.0 },
        if r < qr { hi } else { 0.0 },
        if b < qb { wi } else { 0.0 },
    ];
    let dap = [t + b, l + r, t + b, l + r];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = -di[k] / (inter + 1.0) + (dap[k] - di[k]) / (union + 1.0);
    }
    IouTerms { loss, grad }
}
