//! Quick numerical self-test behind the `check` command: finite-difference
//! gradient checks for every tape op and the losses, plus evidential
//! invariants on random logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::euga::{euga_forward, EugaConfig, EugaVars};
use crate::evidential::{argmax_channels, generate, to_field, EvidenceGenerator};
use crate::gradcheck::{finite_diff_check, FD_STEP};
use crate::kan::SplineGrid;
use crate::losses::{loss_total, GroundTruth, LossConfig};
use crate::metrics::LabelMap;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: worst {:.3e} (tolerance {:.0e}, {} instances)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.3..3.0))
}

/// Scalar `sum(y * r)` with fixed random weights, so that symmetric
/// outputs (e.g. softmax rows) still have informative gradients.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = normal(&mut rng, t.shape(y));
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    t.sum(p)
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut ChaCha8Rng) -> Tensor>,
    Box<dyn Fn(&mut Tape, Var, &Tensor) -> Result<Var>>,
);

fn op_cases() -> Vec<Case> {
    fn case(
        name: &'static str,
        input: impl Fn(&mut ChaCha8Rng) -> Tensor + 'static,
        f: impl Fn(&mut Tape, Var, &Tensor) -> Result<Var> + 'static,
    ) -> Case {
        (name, Box::new(input), Box::new(f))
    }
    let n = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| normal(r, shape);
    let pos = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| positive(r, shape);
    // `aux` is an extra random tensor drawn with the same shape as the input.
    vec![
        case("add", n(&[3, 4]), |t, x, aux| {
            let c = t.constant(aux.clone());
            t.add(x, c)
        }),
        case("sub", n(&[3, 4]), |t, x, aux| {
            let c = t.constant(aux.clone());
            t.sub(c, x)
        }),
        case("mul", n(&[3, 4]), |t, x, aux| {
            let c = t.constant(aux.clone());
            t.mul(x, c)
        }),
        case("div", pos(&[3, 4]), |t, x, aux| {
            let c = t.constant(aux.clone());
            let a = t.div(c, x)?;
            let b = t.div(x, x)?;
            t.add(a, b)
        }),
        case("add_scalar+scale", n(&[5]), |t, x, _| {
            let a = t.add_scalar(x, 0.7)?;
            t.scale(a, -1.3)
        }),
        case("matmul", n(&[3, 4]), |t, x, aux| {
            let b = t.constant(aux.clone());
            let bt = t.transpose(b)?;
            let left = t.matmul(x, bt)?;
            let xt = t.transpose(x)?;
            let right = t.matmul(xt, x)?;
            let l = t.sum(left)?;
            let r = project(t, right, 5)?;
            t.add(l, r)
        }),
        case("conv2d 3x3", n(&[2, 6, 5]), |t, x, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let w = t.constant(normal(&mut rng, &[3, 2, 3, 3]));
            let b = t.constant(normal(&mut rng, &[3]));
            let mut acc = Vec::new();
            for d in [1, 2, 4] {
                acc.push(t.conv2d(x, w, Some(b), d)?);
            }
            t.concat_channels(&acc)
        }),
        case("conv2d weight", n(&[3, 2, 3, 3]), |t, w, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = t.constant(normal(&mut rng, &[2, 5, 6]));
            t.conv2d(x, w, None, 2)
        }),
        case("conv2d 1x1 + bias", n(&[4]), |t, b, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = t.leaf(normal(&mut rng, &[3, 4, 4]));
            let w = t.constant(normal(&mut rng, &[4, 3, 1, 1]));
            t.conv2d(x, w, Some(b), 1)
        }),
        case("avgpool2+upsample2", n(&[2, 4, 6]), |t, x, _| {
            let p = t.avgpool2(x)?;
            let u = t.upsample2(p)?;
            let p4 = t.avgpool(u, 2)?;
            t.add(p, p4)
        }),
        case("relu", n(&[12]), |t, x, _| t.relu(x)),
        case("exp", n(&[12]), |t, x, _| t.exp(x)),
        case("neg_exp", n(&[12]), |t, x, _| t.neg_exp(x)),
        case("log", pos(&[12]), |t, x, _| t.ln(x)),
        case("recip", pos(&[12]), |t, x, _| t.recip(x)),
        case("silu", n(&[12]), |t, x, _| t.silu(x)),
        case("clamp_max", n(&[12]), |t, x, _| t.clamp_max(x, 0.5)),
        case("smooth evidence", n(&[12]), |t, x, _| t.smooth_evidence(x)),
        case("lgamma", pos(&[12]), |t, x, _| t.lgamma(x)),
        case("digamma", pos(&[12]), |t, x, _| t.digamma(x)),
        case("softmax", n(&[3, 5]), |t, x, _| t.softmax(x)),
        case("mean", n(&[3, 5]), |t, x, _| {
            let m = t.mean(x)?;
            let sq = t.mul(x, x)?;
            let s = t.mean(sq)?;
            t.mul(m, s)
        }),
        case("sum_channels+broadcast", n(&[3, 2, 4]), |t, x, _| {
            let s = t.sum_channels(x)?;
            let b = t.broadcast_channels(s, 3)?;
            t.mul(b, x)
        }),
        case("reshape+concat", n(&[2, 3, 2]), |t, x, _| {
            let r = t.reshape(x, &[3, 2, 2])?;
            let sq = t.mul(r, r)?;
            t.concat_channels(&[r, sq])
        }),
        case(
            "kan input",
            |r| Tensor::from_fn(&[5, 3], |_| r.random_range(-3.5..3.5)),
            |t, x, _| {
                let grid = SplineGrid::new(-3.0, 3.0, 8, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let base = t.constant(normal(&mut rng, &[3, 2]));
                let coef = t.constant(normal(&mut rng, &[3, 2, grid.num_basis()]));
                t.kan(x, base, coef, grid)
            },
        ),
        case("kan coefficients", n(&[3, 2, 11]), |t, coef, _| {
            let grid = SplineGrid::new(-3.0, 3.0, 8, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = t.constant(Tensor::from_fn(&[6, 3], |_| rng.random_range(-3.0..3.0)));
            let base = t.constant(normal(&mut rng, &[3, 2]));
            t.kan(x, base, coef, grid)
        }),
        case("euga features", n(&[3, 8, 8]), |t, f, _| {
            euga_case(t, Some(f), None)
        }),
        case(
            "euga uncertainty",
            |r| Tensor::from_fn(&[1, 8, 8], |_| r.random_range(0.05..0.95)),
            |t, u, _| euga_case(t, None, Some(u)),
        ),
    ]
}

fn euga_case(t: &mut Tape, feats: Option<Var>, umap: Option<Var>) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = match feats {
        Some(f) => f,
        None => t.constant(normal(&mut rng, &[3, 8, 8])),
    };
    let u = match umap {
        Some(u) => u,
        None => t.constant(Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(0.0..1.0))),
    };
    let p = EugaVars {
        q_weight: t.leaf(normal(&mut rng, &[2, 1, 3, 3])),
        q_bias: t.leaf(normal(&mut rng, &[2])),
        k_weight: t.leaf(normal(&mut rng, &[2, 1, 3, 3])),
        k_bias: t.leaf(normal(&mut rng, &[2])),
    };
    let cfg = EugaConfig {
        rank: 2,
        token_stride: 2,
    };
    Ok(euga_forward(t, f, u, &p, &cfg)?.output)
}

/// Loss gradient w.r.t. logits through either generator.
fn loss_case(
    generator: EvidenceGenerator,
    epoch: usize,
) -> impl Fn(&mut Tape, Var, &Tensor) -> Result<Var> {
    move |t, x, _| {
        let (c, h, w) = t.value(x).chw()?;
        let labels = LabelMap::new(h, w, (0..h * w).map(|p| (p * 7 + 3) % c).collect());
        let gt = GroundTruth::from_labels(&labels, c);
        let e = generate(t, x, generator)?;
        let field = to_field(t, e)?;
        let cfg = LossConfig {
            total_epochs: 10,
            ..LossConfig::default()
        };
        Ok(loss_total(t, &field, &gt, epoch, &cfg)?.total)
    }
}

/// Worst relative error of every op and loss over `instances` random draws.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    let mut cases = op_cases();
    cases.push((
        "loss (smooth, epoch 0)",
        Box::new(|r| normal(r, &[2, 3, 3])),
        Box::new(loss_case(EvidenceGenerator::Smooth, 0)),
    ));
    cases.push((
        "loss (smooth, epoch 5)",
        Box::new(|r| normal(r, &[3, 2, 3])),
        Box::new(loss_case(EvidenceGenerator::Smooth, 5)),
    ));
    cases.push((
        "loss (exp, epoch 5)",
        Box::new(|r| normal(r, &[2, 3, 3])),
        Box::new(loss_case(EvidenceGenerator::Exp, 5)),
    ));
    for (i, (name, input, f)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64) << 20);
        let mut worst = 0.0f64;
        for k in 0..instances {
            let x = input(&mut rng);
            let aux = input(&mut rng);
            let proj_seed = seed.wrapping_add(k as u64);
            let err = finite_diff_check(
                |t, v| {
                    let y = f(t, v, &aux)?;
                    if t.value(y).is_scalar() {
                        Ok(y)
                    } else {
                        project(t, y, proj_seed)
                    }
                },
                &x,
                FD_STEP,
            )?;
            worst = worst.max(err);
        }
        out.push(Outcome {
            name: format!("gradient {name}"),
            worst,
            tolerance: OP_TOLERANCE,
            instances,
        });
    }
    Ok(out)
}

/// Largest violation of the evidential invariants over `count` random
/// logit vectors (0 means every invariant held exactly as required).
pub fn invariant_suite(count: usize, seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let c = rng.random_range(2..=6);
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let logits = Tensor::from_fn(&[c, 1, 1], |_| {
            scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        let mut t = Tape::new();
        let x = t.constant(logits.clone());
        let e = generate(&mut t, x, EvidenceGenerator::Smooth)?;
        let f = to_field(&mut t, e)?.values(&t);
        let mut bad = 0.0f64;
        let psum: f64 = f.prob.data().iter().sum();
        bad = bad.max((psum - 1.0).abs() / 1e-12);
        if f.evidence.data().iter().any(|&v| v < 0.0) {
            bad = f64::INFINITY;
        }
        for (a, ev) in f.alpha.data().iter().zip(f.evidence.data()) {
            if *a != ev + 1.0 {
                bad = f64::INFINITY;
            }
        }
        let u = f.uncertainty.item();
        if !(u > 0.0 && u <= 1.0) || (u - c as f64 / f.strength.item()).abs() > 1e-15 {
            bad = f64::INFINITY;
        }
        for (l, ev) in logits.data().iter().zip(f.evidence.data()) {
            if *l <= 0.0 && *ev != 0.0 {
                bad = f64::INFINITY;
            }
        }
        // argmax agreement is required only where the evidence maximum is unique
        let ev = f.evidence.data();
        let top = ev.iter().cloned().fold(f64::MIN, f64::max);
        if ev.iter().filter(|&&v| v == top).count() == 1
            && argmax_channels(&f.prob).labels()[0] != argmax_channels(&f.evidence).labels()[0]
        {
            bad = f64::INFINITY;
        }
        worst = worst.max(bad);
    }
    Ok(Outcome {
        name: "evidential invariants".into(),
        worst: worst.min(f64::MAX),
        tolerance: 1.0,
        instances: count,
    })
}
