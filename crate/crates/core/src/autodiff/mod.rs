//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value, so inputs always
//! precede the nodes that consume them. [`Tape::backward`] walks the nodes in
//! reverse creation order exactly once and returns a fresh [`Gradients`]; it
//! borrows the tape immutably, so calling it twice yields identical results.

mod kernels;
mod ops;

pub use ops::OpKind;

use crate::error::{Error, Result};
use crate::kan::{self, KanDims, SplineGrid};
use crate::special;
use crate::tensor::Tensor;
use kernels::ConvDims;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Relu(Var),
    Exp(Var),
    NegExp(Var),
    Log {
        x: Var,
        floor: f64,
    },
    Recip(Var),
    Silu(Var),
    ClampMax(Var, f64),
    Evidence(Var),
    Lgamma(Var),
    Digamma(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumChannels(Var),
    BroadcastChannels(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Kan {
        x: Var,
        base: Var,
        coef: Var,
        grid: SplineGrid,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar root with respect to every node that depends on a leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root through any leaf path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but zero-filled to `like`'s shape when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input treated as data: no gradient flows into or through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        OpKind::of(&self.nodes[v.0].op)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let kind = OpKind::of(&op);
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(root_val.shape(), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |x, y| x / y));
                }
                if self.wants(*b) {
                    let t = zip_map(g, out, |x, o| x * o);
                    accumulate(grads, *b, zip_map(&t, val(*b), |x, y| -x / y));
                }
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.wants(*a) {
                    let bt = kernels::transpose(val(*b).data(), k, n);
                    let ga = kernels::matmul(g.data(), &bt, m, n, k);
                    accumulate(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.wants(*b) {
                    let at = kernels::transpose(val(*a).data(), m, k);
                    let gb = kernels::matmul(&at, g.data(), k, m, n);
                    accumulate(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let ga = kernels::transpose(g.data(), r, c);
                accumulate(grads, *a, Tensor::new(val(*a).shape(), ga)?);
            }
            Op::Conv2d { x, w, b, dilation } => {
                let xs = val(*x);
                let ws = val(*w);
                let (c_in, h, wd) = xs.chw()?;
                let dims = ConvDims {
                    c_in,
                    c_out: ws.shape()[0],
                    h,
                    w: wd,
                    k: ws.shape()[2],
                    dilation: *dilation,
                };
                let (gx, gw, gb) = kernels::conv2d_backward(
                    g.data(),
                    xs.data(),
                    ws.data(),
                    dims,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::new(xs.shape(), gx)?);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, Tensor::new(ws.shape(), gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, Tensor::new(&[dims.c_out], gb)?);
                    }
                }
            }
            Op::AvgPool(a, k) => {
                let (c, h, w) = val(*a).chw()?;
                let ga = kernels::avgpool_backward(g.data(), c, h, w, *k);
                accumulate(grads, *a, Tensor::new(&[c, h, w], ga)?);
            }
            Op::Upsample(a, k) => {
                let (c, h, w) = val(*a).chw()?;
                let ga = kernels::upsample_backward(g.data(), c, h, w, *k);
                accumulate(grads, *a, Tensor::new(&[c, h, w], ga)?);
            }
            Op::Relu(a) => accumulate(
                grads,
                *a,
                zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, out, |gv, o| gv * o)),
            Op::NegExp(a) => accumulate(grads, *a, zip_map(g, out, |gv, o| -gv * o)),
            Op::Log { x, floor } => {
                let f = *floor;
                accumulate(
                    grads,
                    *x,
                    zip_map(g, val(*x), |gv, x| if x > f { gv / x } else { 0.0 }),
                )
            }
            Op::Recip(a) => accumulate(grads, *a, zip_map(g, out, |gv, o| -gv * o * o)),
            Op::Silu(a) => accumulate(
                grads,
                *a,
                zip_map(g, val(*a), |gv, x| gv * kan::silu_grad(x)),
            ),
            Op::ClampMax(a, c) => {
                let c = *c;
                accumulate(
                    grads,
                    *a,
                    zip_map(g, val(*a), |gv, x| if x < c { gv } else { 0.0 }),
                )
            }
            Op::Evidence(a) => accumulate(
                grads,
                *a,
                zip_map(
                    g,
                    val(*a),
                    |gv, x| if x > 0.0 { -gv * (-x).exp_m1() } else { 0.0 },
                ),
            ),
            Op::Lgamma(a) => {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                    *gv *= special::digamma(x)?;
                }
                accumulate(grads, *a, ga);
            }
            Op::Digamma(a) => {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(val(*a).data()) {
                    *gv *= special::trigamma(x)?;
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0; out.len()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(n)
                    .zip(out.data().chunks(n))
                    .zip(ga.chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape(), ga)?);
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n))
            }
            Op::SumChannels(a) => {
                let (c, h, w) = val(*a).chw()?;
                let mut ga = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    ga.extend_from_slice(g.data());
                }
                accumulate(grads, *a, Tensor::new(&[c, h, w], ga)?);
            }
            Op::BroadcastChannels(a) => {
                let (_, h, w) = val(*a).chw()?;
                let mut ga = vec![0.0; h * w];
                for plane in g.data().chunks(h * w) {
                    for (d, v) in ga.iter_mut().zip(plane) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, Tensor::new(&[1, h, w], ga)?);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshaped(val(*a).shape())?);
            }
            Op::Concat(parts) => {
                let (_, h, w) = out.chw()?;
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).shape()[0];
                    if self.wants(*p) {
                        let slice = g.data()[offset * h * w..(offset + c) * h * w].to_vec();
                        accumulate(grads, *p, Tensor::new(&[c, h, w], slice)?);
                    }
                    offset += c;
                }
            }
            Op::Kan {
                x,
                base,
                coef,
                grid,
            } => {
                let xs = val(*x);
                let dims = KanDims {
                    n: xs.shape()[0],
                    d_in: xs.shape()[1],
                    d_out: out.shape()[1],
                };
                let kg = kan::kan_backward_kernel(
                    g.data(),
                    xs.data(),
                    val(*base).data(),
                    val(*coef).data(),
                    &dims,
                    grid,
                    (self.wants(*x), self.wants(*base), self.wants(*coef)),
                );
                if let Some(d) = kg.x {
                    accumulate(grads, *x, Tensor::new(xs.shape(), d)?);
                }
                if let Some(d) = kg.base {
                    accumulate(grads, *base, Tensor::new(val(*base).shape(), d)?);
                }
                if let Some(d) = kg.coef {
                    accumulate(grads, *coef, Tensor::new(val(*coef).shape(), d)?);
                }
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![*a, *b]
        }
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::Kan { x, base, coef, .. } => vec![*x, *base, *coef],
        Op::Concat(parts) => parts.clone(),
        Op::Log { x, .. } => vec![*x],
        Op::AddScalar(a)
        | Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::AvgPool(a, _)
        | Op::Upsample(a, _)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::NegExp(a)
        | Op::Recip(a)
        | Op::Silu(a)
        | Op::ClampMax(a, _)
        | Op::Evidence(a)
        | Op::Lgamma(a)
        | Op::Digamma(a)
        | Op::Softmax(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumChannels(a)
        | Op::BroadcastChannels(a)
        | Op::Reshape(a) => vec![*a],
    }
}
