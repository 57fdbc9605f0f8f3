use super::kernels::{self, ConvDims};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kan::{self, KanDims, SplineGrid};
use crate::special;
use crate::tensor::Tensor;

/// The tape's fixed op vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    Scale,
    Matmul,
    Transpose,
    Conv2d,
    AvgPool,
    Upsample,
    Relu,
    Exp,
    NegExp,
    Log,
    Recip,
    Silu,
    ClampMax,
    Evidence,
    Lgamma,
    Digamma,
    Softmax,
    Sum,
    Mean,
    SumChannels,
    Broadcast,
    Reshape,
    Concat,
    Kan,
}

impl OpKind {
    pub(super) fn of(op: &Op) -> Self {
        match op {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::Upsample(..) => OpKind::Upsample,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::NegExp(..) => OpKind::NegExp,
            Op::Log { .. } => OpKind::Log,
            Op::Recip(..) => OpKind::Recip,
            Op::Silu(..) => OpKind::Silu,
            Op::ClampMax(..) => OpKind::ClampMax,
            Op::Evidence(..) => OpKind::Evidence,
            Op::Lgamma(..) => OpKind::Lgamma,
            Op::Digamma(..) => OpKind::Digamma,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumChannels(..) => OpKind::SumChannels,
            Op::BroadcastChannels(..) => OpKind::Broadcast,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Kan { .. } => OpKind::Kan,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar => "add_scalar",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool => "avgpool",
            OpKind::Upsample => "nearest_upsample",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::NegExp => "neg_exp",
            OpKind::Log => "log",
            OpKind::Recip => "recip",
            OpKind::Silu => "silu",
            OpKind::ClampMax => "clamp_max",
            OpKind::Evidence => "evidence",
            OpKind::Lgamma => "lgamma",
            OpKind::Digamma => "digamma",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumChannels => "sum_channels",
            OpKind::Broadcast => "broadcast",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat_channels",
            OpKind::Kan => "kan",
        }
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(OpKind::of(&op).name(), a, b)?;
        let value = super::zip_map(self.value(a), self.value(b), f);
        self.push(op, value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        self.push(Op::Matmul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("expected a matrix, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], kernels::transpose(self.value(a).data(), r, c))?;
        self.push(Op::Transpose(a), value)
    }

    /// Stride-1, zero-padded convolution of a C x H x W input with a
    /// `c_out x c_in x k x k` kernel, `k` in {1, 3}.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (c_in, h, wd) = self
            .value(x)
            .chw()
            .map_err(|_| Error::dim("conv2d", format!("input {:?}", self.shape(x))))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] || !(ws[2] == 1 || ws[2] == 3) {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {ws:?} does not fit input {:?}", self.shape(x)),
            ));
        }
        if dilation == 0 {
            return Err(Error::dim("conv2d", "dilation must be at least 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let dims = ConvDims {
            c_in,
            c_out: ws[0],
            h,
            w: wd,
            k: ws[2],
            dilation,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
        );
        let value = Tensor::new(&[dims.c_out, h, wd], data)?;
        self.push(Op::Conv2d { x, w, b, dilation }, value)
    }

    /// Average pooling over non-overlapping `k x k` windows.
    pub fn avgpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("avgpool", format!("window {k} on {h} x {w}")));
        }
        let data = kernels::avgpool_forward(self.value(x).data(), c, h, w, k);
        let value = Tensor::new(&[c, h / k, w / k], data)?;
        self.push(Op::AvgPool(x, k), value)
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        self.avgpool(x, 2)
    }

    /// Nearest-neighbour upsampling by `k`.
    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if k == 0 {
            return Err(Error::dim("nearest_upsample", "factor must be positive"));
        }
        let data = kernels::upsample_forward(self.value(x).data(), c, h, w, k);
        let value = Tensor::new(&[c, h * k, w * k], data)?;
        self.push(Op::Upsample(x, k), value)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.upsample(x, 2)
    }

    /// Subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `exp(-x)`.
    pub fn neg_exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::NegExp(a), |x| (-x).exp())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.ln_floored(a, 0.0)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, Op::Log { x: a, floor }, |x| x.max(floor).ln())
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), kan::silu)
    }

    pub fn clamp_max(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::ClampMax(a, c), |x| x.min(c))
    }

    /// Fused `exp(-relu(x)) + relu(x) - 1`, evaluated as `expm1(-r) + r` so
    /// small positive inputs do not cancel below zero.
    pub fn smooth_evidence(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Evidence(a), |x| {
            let r = x.max(0.0);
            (-r).exp_m1() + r
        })
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| special::lgamma(x))
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(self.shape(a), data)?;
        self.push(Op::Lgamma(a), value)
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| special::digamma(x))
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(self.shape(a), data)?;
        self.push(Op::Digamma(a), value)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Op::Softmax(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), value)
    }

    /// C x H x W -> 1 x H x W.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&src[ch * h * w..(ch + 1) * h * w]) {
                *o += v;
            }
        }
        let value = Tensor::new(&[1, h, w], out)?;
        self.push(Op::SumChannels(a), value)
    }

    /// 1 x H x W -> c x H x W by repetition.
    pub fn broadcast_channels(&mut self, a: Var, c: usize) -> Result<Var> {
        let (one, h, w) = self.value(a).chw()?;
        if one != 1 {
            return Err(Error::dim(
                "broadcast",
                format!("expected one channel, got {one}"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(&[c, h, w], out)?;
        self.push(Op::BroadcastChannels(a), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Concatenate C_i x H x W tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_channels", "nothing to concatenate"));
        };
        let (_, h, w) = self.value(first).chw()?;
        let mut data = Vec::new();
        let mut c_total = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("{ph} x {pw} does not match {h} x {w}"),
                ));
            }
            data.extend_from_slice(self.value(p).data());
            c_total += c;
        }
        let value = Tensor::new(&[c_total, h, w], data)?;
        self.push(Op::Concat(parts.to_vec()), value)
    }

    /// KAN layer on `N x d_in` tokens; `base` is `d_in x d_out`, `coef` is
    /// `d_in x d_out x grid.num_basis()`.
    pub fn kan(&mut self, x: Var, base: Var, coef: Var, grid: SplineGrid) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(base);
        let cs = self.shape(coef);
        if xs.len() != 2
            || bs.len() != 2
            || bs[0] != xs[1]
            || cs != [bs[0], bs[1], grid.num_basis()]
        {
            return Err(Error::dim(
                "kan",
                format!("tokens {xs:?}, base {bs:?}, coef {cs:?}"),
            ));
        }
        let dims = KanDims {
            n: xs[0],
            d_in: xs[1],
            d_out: bs[1],
        };
        let data = kan::kan_forward_kernel(
            self.value(x).data(),
            self.value(base).data(),
            self.value(coef).data(),
            &dims,
            &grid,
        );
        let value = Tensor::new(&[dims.n, dims.d_out], data)?;
        self.push(
            Op::Kan {
                x,
                base,
                coef,
                grid,
            },
            value,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = t.matmul(a, i).unwrap();
        close(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_and_softmax_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x).unwrap();
        close(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(z).unwrap();
        close(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            t.add(a, b),
            Err(Error::Dimension { op: "add", .. })
        ));
        let m = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            t.matmul(m, m),
            Err(Error::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
        let z = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(t.ln(z), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn identity_kernels_preserve_input() {
        let mut t = Tape::new();
        let img = Tensor::from_fn(&[1, 5, 6], |i| (i as f64 * 0.7).sin());
        let x = t.constant(img.clone());
        let mut k3 = Tensor::zeros(&[1, 1, 3, 3]);
        k3.data_mut()[4] = 1.0;
        let w3 = t.constant(k3);
        let y3 = t.conv2d(x, w3, None, 1).unwrap();
        close(t.value(y3).data(), img.data());
        let w1 = t.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y1 = t.conv2d(x, w1, None, 1).unwrap();
        close(t.value(y1).data(), img.data());
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        close(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        close(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.exp(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -0.2, 1.1]));
        let e = t.exp(x).unwrap();
        let m = t.mul(e, x).unwrap();
        let s = t.sum(m).unwrap();
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        let c = t.constant(Tensor::vector(vec![3.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        close(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn smooth_evidence_matches_composite() {
        let xs: Vec<f64> = (-40..=40)
            .map(|i| i as f64 * 0.25)
            .chain([1e-9, 1e-6])
            .collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs));
        let fused = t.smooth_evidence(x).unwrap();
        let r = t.relu(x).unwrap();
        let ne = t.neg_exp(r).unwrap();
        let s = t.add(ne, r).unwrap();
        let comp = t.add_scalar(s, -1.0).unwrap();
        for (a, b) in t.value(fused).data().iter().zip(t.value(comp).data()) {
            assert!((a - b).abs() < 1e-14);
            assert!(*a >= 0.0);
        }
    }
}
