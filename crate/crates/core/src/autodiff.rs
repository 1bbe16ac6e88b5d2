//! Reverse-mode gradient tape over volume operations.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation
//! order, so node inputs always precede the node itself; [`Tape::backward`]
//! walks them in reverse exactly once and consumes the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::convkit::{
    conv_backward, conv_forward, downsample_backward, downsample_forward, upsample_nearest, upsample_nearest_backward, ConvSpec, KernelSet,
};
use crate::error::{Error, Result};
use crate::kernel_matrix::concat_channels;
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv { spec: ConvSpec, x: Var, w: Var, b: Option<Var> },
    Downsample { x: Var, w: Var, b: Option<Var> },
    Upsample(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    LeakyRelu { x: Var, slope: T },
    L1 { pred: Var, target: Var },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } | Op::Downsample { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Upsample(x) | Op::Sum(x) | Op::LeakyRelu { x, .. } => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::L1 { pred, target } => vec![*pred, *target],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<Option<(Var, Vec<usize>)>>,
}

/// Parameter gradients indexed by registration slot. Slots that were
/// registered but never reached hold zeros.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!("variable {} does not belong to this tape", v.index)));
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        let inputs = op.inputs();
        for &v in &inputs {
            self.check(v)?;
        }
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.index].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value).expect("inputs have no dependencies")
    }

    /// Registers `value` as trainable parameter `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor<T>) -> Result<Var> {
        if self.params.get(slot).is_some_and(Option::is_some) {
            return Err(Error::Graph(format!("parameter slot {slot} registered twice")));
        }
        let shape = value.shape().to_vec();
        let v = self.push(Op::Param(slot), value)?;
        if self.params.len() <= slot {
            self.params.resize(slot + 1, None);
        }
        self.params[slot] = Some((v, shape));
        Ok(v)
    }

    fn kernel_set(&self, w: Var, b: Option<Var>) -> Result<KernelSet<T>> {
        Ok(KernelSet {
            weights: self.value(w)?.clone(),
            bias: match b {
                Some(b) => Some(self.value(b)?.data().to_vec()),
                None => None,
            },
        })
    }

    pub fn conv(&mut self, spec: &ConvSpec, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if spec.bias != b.is_some() {
            return Err(Error::shape("Tape::conv", "bias variable presence disagrees with spec"));
        }
        let ks = self.kernel_set(w, b)?;
        let y = conv_forward(spec, &ks, self.value(x)?)?;
        self.push(Op::Conv { spec: *spec, x, w, b }, y)
    }

    pub fn downsample(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ks = self.kernel_set(w, b)?;
        let y = downsample_forward(&ks, self.value(x)?)?;
        self.push(Op::Downsample { x, w, b }, y)
    }

    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let y = upsample_nearest(self.value(x)?)?;
        self.push(Op::Upsample(x), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a)?.add(self.value(b)?)?;
        self.push(Op::Add(a, b), y)
    }

    /// Concatenates `[C_i, B, H, W]` volumes along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&p| self.value(p).cloned()).collect::<Result<Vec<_>>>()?;
        let y = concat_channels(&values)?;
        self.push(Op::Concat(parts.to_vec()), y)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let slope = T::from_f64(slope);
        let y = self.value(x)?.map(|v| if v > T::zero() { v } else { v * slope });
        self.push(Op::LeakyRelu { x, slope }, y)
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = l1_loss(self.value(pred)?, self.value(target)?)?;
        self.push(Op::L1 { pred, target }, Tensor::new(&[1], vec![T::from_f64(loss)])?)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.sum();
        self.push(Op::Sum(x), Tensor::new(&[1], vec![T::from_f64(s)])?)
    }

    /// Backpropagates from the scalar `loss`. Consumes the tape so recorded
    /// activations are released once gradients exist.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape (no forward pass recorded)".into()));
        }
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::State("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}, expected a scalar", self.nodes[loss.index].value.shape())));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.index >= i) {
                return Err(Error::Graph(format!("node {i} depends on node {} which is not earlier: cycle", bad.index)));
            }
        }

        let n = loss.index + 1;
        self.nodes.truncate(n);
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(self.nodes[loss.index].value.shape(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];

        for i in (0..n).rev() {
            let node = self.nodes.pop().expect("one node per index");
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.index].requires_grad;
            let mut emit: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => param_grads[*slot] = Some(g),
                Op::Conv { spec, x, w, b } => {
                    let ks = self.kernel_set(*w, *b)?;
                    let cg = conv_backward(spec, &ks, &self.nodes[x.index].value, &g)?;
                    emit.push((*x, cg.input));
                    emit.push((*w, cg.weights));
                    if let Some(b) = b {
                        emit.push((*b, Tensor::new(&[cg.bias.len()], cg.bias)?));
                    }
                }
                Op::Downsample { x, w, b } => {
                    let ks = self.kernel_set(*w, *b)?;
                    let cg = downsample_backward(&ks, &self.nodes[x.index].value, &g)?;
                    emit.push((*x, cg.input));
                    emit.push((*w, cg.weights));
                    if let Some(b) = b {
                        emit.push((*b, Tensor::new(&[cg.bias.len()], cg.bias)?));
                    }
                }
                Op::Upsample(x) => emit.push((*x, upsample_nearest_backward(&g)?)),
                Op::Add(a, b) => {
                    emit.push((*a, g.clone()));
                    emit.push((*b, g));
                }
                Op::Concat(parts) => {
                    let g = g.as_contiguous();
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.index].value.shape().to_vec();
                        let len: usize = shape.iter().product();
                        emit.push((*p, Tensor::new(&shape, g.data()[offset..offset + len].to_vec())?));
                        offset += len;
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[x.index].value;
                    emit.push((*x, xv.zip_map(&g, |v, gv| if v > T::zero() { gv } else { gv * *slope })?));
                }
                Op::L1 { pred, target } => {
                    let scale = g.data()[0] / T::from_f64(self.nodes[pred.index].value.numel() as f64);
                    let sign = self.nodes[pred.index].value.zip_map(&self.nodes[target.index].value, |p, t| {
                        let d = p - t;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })?;
                    emit.push((*target, sign.scale(-T::one())));
                    emit.push((*pred, sign));
                }
                Op::Sum(x) => emit.push((*x, Tensor::full(self.nodes[x.index].value.shape(), g.data()[0]))),
            }
            for (v, gv) in emit {
                if !needs(&v) {
                    continue;
                }
                match &mut grads[v.index] {
                    Some(acc) => acc.axpy(T::one(), &gv)?,
                    slot @ None => *slot = Some(gv),
                }
            }
        }

        let grads = self
            .params
            .iter()
            .zip(param_grads)
            .map(|(reg, g)| match (reg, g) {
                (_, Some(g)) => g,
                (Some((_, shape)), None) => Tensor::zeros(shape),
                (None, None) => Tensor::zeros(&[0]),
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Mean absolute difference, accumulated in f64.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (p, t) = (pred.as_contiguous(), target.as_contiguous());
    let total: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(total / p.numel() as f64)
}
