//! Recording graph with reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly and appended to the graph together
//! with its operator and input handles, so node order is a topological order
//! by construction. `backward` walks the nodes in reverse and accumulates
//! vector-Jacobian products into every input that requires a gradient.

use std::fmt::Debug;
use std::sync::Arc;

use super::kernels::{self, MatmulDims};
use super::{Element, Mask, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator defined outside the tensor core (for example the selective
/// scan). Implementations must be pure: `forward` on identical inputs returns
/// bit-identical outputs.
pub trait CustomOp<T: Element>: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients for each input (`None` where the input is not differentiable).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;

    fn macs(&self, _inputs: &[&Tensor<T>]) -> u64 {
        0
    }
}

/// Read access to recorded values by node index.
trait Values<T: Element> {
    fn get(&self, i: usize) -> &Tensor<T>;
}

impl<T: Element> Values<T> for [Tensor<T>] {
    fn get(&self, i: usize) -> &Tensor<T> {
        &self[i]
    }
}

impl<T: Element> Values<T> for [Node<T>] {
    fn get(&self, i: usize) -> &Tensor<T> {
        &self[i].value
    }
}

#[derive(Clone, Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Softplus(Var),
    Gelu(Var),
    MatMul(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Softmax {
        x: Var,
        mask: Option<Mask>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Concat(Vec<Var>),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        smoothing: f64,
    },
    Custom {
        op: Arc<dyn CustomOp<T>>,
        inputs: Vec<Var>,
    },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(x, _) | Exp(x) | Softplus(x) | Gelu(x) | Sum(x) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Softmax { x, .. } | Slice { x, .. } | Permute { x, .. } | Reshape { x, .. } | Mean { x, .. } => vec![*x],
            Conv2d { x, kernel, .. } | DepthwiseConv2d { x, kernel, .. } => vec![*x, *kernel],
            Concat(xs) => xs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Mul(..) => "mul",
            Scale(..) => "scale",
            Exp(..) => "exp",
            Softplus(..) => "softplus",
            Gelu(..) => "gelu",
            MatMul(..) => "matmul",
            LayerNorm { .. } => "layer_norm",
            Softmax { .. } => "softmax",
            Conv2d { .. } => "conv2d",
            DepthwiseConv2d { .. } => "depthwise_conv2d",
            Slice { .. } => "slice_last",
            Concat(..) => "concat_last",
            Permute { .. } => "permute",
            Reshape { .. } => "reshape",
            Mean { .. } => "mean",
            Sum(..) => "sum",
            CrossEntropy { .. } => "cross_entropy",
            Custom { op, .. } => op.name(),
        }
    }

    /// Forward evaluation from the values of already-recorded nodes.
    fn eval<V: Values<T> + ?Sized>(&self, values: &V) -> Result<Tensor<T>> {
        use Op::*;
        let v = |x: &Var| values.get(x.0);
        match self {
            Leaf => unreachable!("leaves carry their value"),
            Add(a, b) => kernels::add(v(a), v(b)),
            Mul(a, b) => kernels::mul(v(a), v(b)),
            Scale(x, s) => Ok(v(x).map(|e| e * *s)),
            Exp(x) => Ok(v(x).map(T::exp)),
            Softplus(x) => Ok(kernels::softplus(v(x))),
            Gelu(x) => Ok(kernels::gelu(v(x))),
            MatMul(a, b) => kernels::matmul(v(a), v(b)),
            LayerNorm { x, gamma, beta, eps } => kernels::layer_norm(v(x), v(gamma), v(beta), *eps),
            Softmax { x, mask } => kernels::softmax(v(x), mask.as_ref()),
            Conv2d { x, kernel, stride, pad } => kernels::conv2d(v(x), v(kernel), *stride, *pad),
            DepthwiseConv2d { x, kernel, stride, pad } => kernels::depthwise_conv2d(v(x), v(kernel), *stride, *pad),
            Slice { x, start, len } => kernels::slice_last(v(x), *start, *len),
            Concat(xs) => kernels::concat_last(&xs.iter().map(v).collect::<Vec<_>>()),
            Permute { x, axes } => kernels::permute(v(x), axes),
            Reshape { x, shape } => v(x).reshape(shape.clone()),
            Mean { x, axes } => kernels::mean_axes(v(x), axes),
            Sum(x) => Ok(Tensor::scalar(v(x).sum())),
            CrossEntropy {
                logits,
                labels,
                smoothing,
            } => kernels::cross_entropy(v(logits), labels, *smoothing),
            Custom { op, inputs } => op.forward(&inputs.iter().map(v).collect::<Vec<_>>()),
        }
    }

    fn macs<V: Values<T> + ?Sized>(&self, values: &V) -> u64 {
        use Op::*;
        let v = |x: &Var| values.get(x.0);
        match self {
            MatMul(a, b) => {
                let d = kernels::matmul_dims(v(a).shape(), v(b).shape()).expect("validated");
                (d.batch * d.m * d.k * d.n) as u64
            }
            Conv2d { x, kernel, stride, pad } | DepthwiseConv2d { x, kernel, stride, pad } => {
                let dw = matches!(self, DepthwiseConv2d { .. });
                let g =
                    kernels::conv_geom("conv", v(x).shape(), v(kernel).shape(), dw, *stride, *pad).expect("validated");
                let per_out = g.k * g.k * if dw { 1 } else { g.cin };
                (g.batch * g.ho * g.wo * g.cout * per_out) as u64
            }
            Custom { op, inputs } => op.macs(&inputs.iter().map(v).collect::<Vec<_>>()),
            _ => 0,
        }
    }
}

#[derive(Debug)]
struct Node<T: Element> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by all recorded matmuls, convolutions
    /// and custom ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that requires a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = op.eval(self.nodes.as_slice())?;
        self.macs += op.macs(self.nodes.as_slice());
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(x, T::of(s)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softplus(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `x @ w (+ bias)` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        self.push(Op::Softmax { x, mask })
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d { x, kernel, stride, pad })
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::DepthwiseConv2d { x, kernel, stride, pad })
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { x, start, len })
    }

    /// Consecutive last-axis pieces; zero-width pieces come back as `None`.
    pub fn split_last(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Option<Var>>> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if widths.iter().sum::<usize>() != d {
            return Err(Error::shape(
                "split_last",
                format!("widths {widths:?} do not sum to last axis {d}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(if w == 0 {
                None
            } else {
                Some(self.slice_last(x, start, w)?)
            });
            start += w;
        }
        Ok(out)
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.push(Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.push(Op::Mean { x, axes: axes.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.into(),
            smoothing,
        })
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        self.push(Op::Custom {
            op,
            inputs: inputs.to_vec(),
        })
    }

    /// Re-evaluates every non-leaf node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => node.op.eval(values.as_slice())?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when replaying from the leaves reproduces every recorded value
    /// bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self.nodes.iter().zip(&replayed).all(|(n, r)| {
            n.value.shape() == r.shape() && n.value.data().iter().zip(r.data()).all(|(a, b)| a.to_bits_eq(*b))
        }))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss_value.shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.vjp(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[input.0];
                match slot {
                    Some(acc) => {
                        for (a, &c) in acc.iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    None => *slot = Some(contrib.to_vec()),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        use Op::*;
        let node = &self.nodes[i];
        let v = |x: &Var| &self.nodes[x.0].value;
        let out = &node.value;
        let gd = g.data();
        let like = |x: &Tensor<T>, data: Vec<T>| Tensor::from_parts(x.shape().to_vec(), data);
        Ok(match &node.op {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g.clone()), (*b, kernels::reduce_to_suffix(gd, v(b).shape()))],
            Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let bn = bv.numel();
                let ga = gd.iter().enumerate().map(|(k, &gk)| gk * bv.data()[k % bn]).collect();
                let gab: Vec<T> = gd.iter().zip(av.data()).map(|(&gk, &ak)| gk * ak).collect();
                vec![(*a, like(av, ga)), (*b, kernels::reduce_to_suffix(&gab, bv.shape()))]
            }
            Scale(x, s) => vec![(*x, g.map(|e| e * *s))],
            Exp(x) => vec![(*x, g.zip_map(out, |gk, y| gk * y)?)],
            Softplus(x) => vec![(*x, g.zip_map(v(x), |gk, xk| gk * kernels::sigmoid_scalar(xk))?)],
            Gelu(x) => vec![(*x, g.zip_map(v(x), |gk, xk| gk * kernels::gelu_grad_scalar(xk))?)],
            MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let d = kernels::matmul_dims(av.shape(), bv.shape())?;
                let (ga, gb) = matmul_backward(&d, av.data(), bv.data(), gd);
                vec![(*a, like(av, ga)), (*b, like(bv, gb))]
            }
            LayerNorm { x, gamma, beta, eps } => {
                let (xv, gv) = (v(x), v(gamma));
                let dim = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); dim];
                let mut dbeta = vec![T::zero(); dim];
                let inv_n = T::of(1.0 / dim as f64);
                for ((row, grow), dxrow) in xv.data().chunks(dim).zip(gd.chunks(dim)).zip(dx.chunks_mut(dim)) {
                    let (mean, rstd) = kernels::row_stats(row, *eps);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..dim {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gv.data()[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..dim {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gv.data()[j];
                        dxrow[j] = rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                vec![
                    (*x, like(xv, dx)),
                    (*gamma, like(gv, dgamma)),
                    (*beta, like(v(beta), dbeta)),
                ]
            }
            Softmax { x, .. } => {
                let t = out.last_dim();
                let mut dx = vec![T::zero(); out.numel()];
                for ((y, gr), d) in out.data().chunks(t).zip(gd.chunks(t)).zip(dx.chunks_mut(t)) {
                    let dot = y.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..t {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, like(out, dx))]
            }
            Conv2d { x, kernel, stride, pad } => {
                let (xv, kv) = (v(x), v(kernel));
                let geom = kernels::conv_geom("conv2d", xv.shape(), kv.shape(), false, *stride, *pad)?;
                let (dx, dk) = kernels::conv2d_backward(&geom, xv.data(), kv.data(), gd);
                vec![(*x, like(xv, dx)), (*kernel, like(kv, dk))]
            }
            DepthwiseConv2d { x, kernel, stride, pad } => {
                let (xv, kv) = (v(x), v(kernel));
                let geom = kernels::conv_geom("depthwise_conv2d", xv.shape(), kv.shape(), true, *stride, *pad)?;
                let (dx, dk) = kernels::depthwise_backward(&geom, xv.data(), kv.data(), gd);
                vec![(*x, like(xv, dx)), (*kernel, like(kv, dk))]
            }
            Slice { x, start, len } => {
                let xv = v(x);
                let d = xv.last_dim();
                let mut dx = vec![T::zero(); xv.numel()];
                for (drow, grow) in dx.chunks_mut(d).zip(gd.chunks(*len)) {
                    drow[*start..*start + *len].copy_from_slice(grow);
                }
                vec![(*x, like(xv, dx))]
            }
            Concat(xs) => {
                let total = out.last_dim();
                let mut start = 0;
                xs.iter()
                    .map(|x| {
                        let xv = v(x);
                        let w = xv.last_dim();
                        let data = gd
                            .chunks(total)
                            .flat_map(|r| r[start..start + w].iter().copied())
                            .collect();
                        start += w;
                        (*x, like(xv, data))
                    })
                    .collect()
            }
            Permute { x, axes } => {
                let inv = kernels::inverse_permutation(axes);
                vec![(*x, kernels::permute(g, &inv)?)]
            }
            Reshape { x, .. } => vec![(*x, like(v(x), gd.to_vec()))],
            Mean { x, axes } => {
                let xv = v(x);
                let (_, map) = kernels::reduction_plan(xv.shape(), axes)?;
                let count = T::of((xv.numel() / out.numel()) as f64);
                let dx = map.iter().map(|&o| gd[o] / count).collect();
                vec![(*x, like(xv, dx))]
            }
            Sum(x) => vec![(*x, Tensor::full(v(x).shape().to_vec(), gd[0]))],
            CrossEntropy {
                logits,
                labels,
                smoothing,
            } => {
                let lv = v(logits);
                let k = lv.last_dim();
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut dl = Vec::with_capacity(lv.numel());
                for (row, &label) in lv.data().chunks(k).zip(labels.iter()) {
                    let logp = kernels::log_softmax_row(row);
                    for (j, lp) in logp.into_iter().enumerate() {
                        let q: T = kernels::smoothed_target(j, label, k, *smoothing);
                        dl.push((lp.exp() - q) * scale);
                    }
                }
                vec![(*logits, like(lv, dl))]
            }
            Custom { op, inputs } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(v).collect();
                let grads = op.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!(
                            "{} returned {} grads for {} inputs",
                            op.name(),
                            grads.len(),
                            inputs.len()
                        ),
                    ));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(x, gr)| gr.map(|gr| (*x, gr)))
                    .collect()
            }
        })
    }
}

fn matmul_backward<T: Element>(d: &MatmulDims, a: &[T], b: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    use kernels::gemm;
    if d.shared_rhs {
        let rows = d.batch * d.m;
        let ga = gemm(g, b, rows, d.n, d.k, false, true);
        let gb = gemm(a, g, d.k, rows, d.n, true, false);
        return (ga, gb);
    }
    let (sa, sb, sg) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for bi in 0..d.batch {
        let (ab, bb, gg) = (
            &a[bi * sa..(bi + 1) * sa],
            &b[bi * sb..(bi + 1) * sb],
            &g[bi * sg..(bi + 1) * sg],
        );
        ga.extend(gemm(gg, bb, d.m, d.n, d.k, false, true));
        gb.extend(gemm(ab, gg, d.k, d.m, d.n, true, false));
    }
    (ga, gb)
}

/// Gradients of every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Result<&Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or(Error::NoGradient(v.0))
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Element> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Bitwise equality for both widths: compare through f64, which is
        // lossless for f32, and treat identical NaN payloads as equal.
        let (a, b) = (self.f64(), other.f64());
        a.to_bits() == b.to_bits()
    }
}
