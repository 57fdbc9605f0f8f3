//! Three-stage U-shaped evidential segmentation network.
//!
//! ```text
//! image ─ EEB(c1) ──────────────────────────── skip1 ─[EUGA(umap)]─┐
//!            └ pool ─ EEB(c2) ───────── skip2 ─┐                    │
//!                        └ pool ─ KAN tokens ─ up ─ cat ─ conv3 ─ up ─ cat ─ conv3 ─ conv1 → logits
//! ```
//!
//! EEB: parallel 3x3 convolutions at dilations 1, 2, 4, concatenated, fused
//! by a 1x1 convolution and rectified. The bottleneck flattens the pooled
//! stage-2 map into tokens and applies one KAN layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::euga::{euga_forward, EugaConfig, EugaVars};
use crate::evidential::EvidenceGenerator;
use crate::kan::{KanLayer, SplineGrid};
use crate::tensor::Tensor;

pub const EEB_DILATIONS: [usize; 3] = [1, 2, 4];

/// Parameter count of `NetConfig::default()`.
pub const DEFAULT_PARAM_COUNT: usize = 78_530;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub stage_channels: Vec<usize>,
    /// Spline intervals on the KAN grid.
    pub kan_grid: usize,
    pub kan_spline_order: usize,
    /// KAN grid spans `[-kan_range, kan_range]`.
    pub kan_range: f64,
    pub euga: EugaConfig,
    /// Route the shallowest skip through EUGA; otherwise a plain skip.
    pub use_euga: bool,
    pub generator: EvidenceGenerator,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            classes: 2,
            stage_channels: vec![16, 32, 64],
            kan_grid: 8,
            kan_spline_order: 3,
            kan_range: 3.0,
            euga: EugaConfig::default(),
            use_euga: true,
            generator: EvidenceGenerator::Smooth,
            seed: 7,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.stage_channels.len() != 3 {
            return Err(format!(
                "net.stage_channels needs exactly 3 entries, got {}",
                self.stage_channels.len()
            ));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err("channel counts must be positive".into());
        }
        if self.classes < 2 {
            return Err(format!("net.classes must be >= 2, got {}", self.classes));
        }
        if self.kan_grid == 0 || !(self.kan_range > 0.0) {
            return Err("KAN grid must have positive size and range".into());
        }
        if self.euga.rank == 0 || self.euga.token_stride == 0 {
            return Err("euga.rank and euga.token_stride must be positive".into());
        }
        Ok(())
    }

    pub fn spline_grid(&self) -> SplineGrid {
        SplineGrid::new(
            -self.kan_range,
            self.kan_range,
            self.kan_grid,
            self.kan_spline_order,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct EebIdx {
    branches: [ConvIdx; 3],
    fuse: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
struct EugaIdx {
    q: ConvIdx,
    k: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    enc1: EebIdx,
    enc2: EebIdx,
    kan_base: usize,
    kan_coef: usize,
    euga: Option<EugaIdx>,
    dec2: ConvIdx,
    dec1: ConvIdx,
    head: ConvIdx,
}

/// How the shallowest encoder features reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipRoute {
    Plain,
    Euga,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// Fan-in uniform weights, zero bias.
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvIdx {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| dist.sample(rng));
        ConvIdx {
            w: self.push(format!("{name}.weight"), w),
            b: self.push(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    fn eeb(&mut self, name: &str, c_in: usize, c_out: usize) -> EebIdx {
        let branches = [0, 1, 2]
            .map(|i| self.conv(&format!("{name}.dil{}", EEB_DILATIONS[i]), c_out, c_in, 3));
        let fuse = self.conv(&format!("{name}.fuse"), c_out, 3 * c_out, 1);
        EebIdx { branches, fuse }
    }
}

/// Network parameters plus the structure needed to run them.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// C x H x W.
    pub logits: Var,
    /// One handle per parameter, in declaration order.
    pub params: Vec<Var>,
    /// EUGA attention matrix, when the EUGA route is active.
    pub attention: Option<Var>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate().map_err(Error::Contract)?;
        let [c1, c2, c3] = [
            cfg.stage_channels[0],
            cfg.stage_channels[1],
            cfg.stage_channels[2],
        ];
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let enc1 = b.eeb("enc1", cfg.in_channels, c1);
        let enc2 = b.eeb("enc2", c1, c2);
        let kan = KanLayer::init(c2, c3, cfg.spline_grid(), &mut b.rng);
        let kan_base = b.push("tkb.base".into(), kan.base);
        let kan_coef = b.push("tkb.coef".into(), kan.coef);
        let euga = cfg.use_euga.then(|| EugaIdx {
            q: b.conv("euga.q", cfg.euga.rank, 1, 3),
            k: b.conv("euga.k", cfg.euga.rank, 1, 3),
        });
        let dec2 = b.conv("dec2", c2, c3 + c2, 3);
        let dec1 = b.conv("dec1", c1, c2 + c1, 3);
        let head = b.conv("head", cfg.classes, c1, 1);
        Ok(Network {
            layout: Layout {
                enc1,
                enc2,
                kan_base,
                kan_coef,
                euga,
                dec2,
                dec1,
                head,
            },
            params: b.params,
            cfg,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn skip_route(&self) -> SkipRoute {
        if self.layout.euga.is_some() {
            SkipRoute::Euga
        } else {
            SkipRoute::Plain
        }
    }

    /// Overwrites every parameter with `values` (declaration order).
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Mismatch(format!(
                    "{}: expected shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Places every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != self.cfg.in_channels {
            return Err(Error::dim(
                "net_forward",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::dim(
                "net_forward",
                format!("height and width must be divisible by 4, got {h} x {w}"),
            ));
        }
        if self.cfg.use_euga {
            self.cfg.euga.check(h, w)?;
        }
        Ok(())
    }

    /// Full forward pass with parameters bound as leaves.
    pub fn forward(&self, tape: &mut Tape, image: Var, umap: Var) -> Result<Forward> {
        let params = self.bind(tape, true);
        self.forward_bound(tape, image, umap, params)
    }

    /// Forward pass reusing parameter handles from [`Network::bind`].
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        image: Var,
        umap: Var,
        params: Vec<Var>,
    ) -> Result<Forward> {
        self.check_input(tape.value(image))?;
        let l = &self.layout;
        let p = &params;
        let conv = |tape: &mut Tape, x: Var, c: ConvIdx, dil: usize| {
            tape.conv2d(x, p[c.w], Some(p[c.b]), dil)
        };

        let enc1 = eeb_forward(tape, image, &l.enc1, p)?;
        let pool1 = tape.avgpool2(enc1)?;
        let enc2 = eeb_forward(tape, pool1, &l.enc2, p)?;
        let pool2 = tape.avgpool2(enc2)?;
        let bottleneck = self.tkb_forward(tape, pool2, p)?;

        let up2 = tape.upsample2(bottleneck)?;
        let cat2 = tape.concat_channels(&[up2, enc2])?;
        let dec2 = conv(tape, cat2, l.dec2, 1)?;
        let dec2 = tape.relu(dec2)?;

        let (skip1, attention) = match l.euga {
            Some(e) => {
                let vars = EugaVars {
                    q_weight: p[e.q.w],
                    q_bias: p[e.q.b],
                    k_weight: p[e.k.w],
                    k_bias: p[e.k.b],
                };
                let out = euga_forward(tape, enc1, umap, &vars, &self.cfg.euga)?;
                (out.output, Some(out.attention))
            }
            None => (enc1, None),
        };
        let up1 = tape.upsample2(dec2)?;
        let cat1 = tape.concat_channels(&[up1, skip1])?;
        let dec1 = conv(tape, cat1, l.dec1, 1)?;
        let dec1 = tape.relu(dec1)?;
        let raw = conv(tape, dec1, l.head, 1)?;
        let logits = center_channels(tape, raw)?;
        Ok(Forward {
            logits,
            params,
            attention,
        })
    }

    /// Tokenized KAN bottleneck: C x h x w -> (h w) x C tokens -> KAN -> C' x h x w.
    fn tkb_forward(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        let (c, h, w) = tape.value(x).chw()?;
        let flat = tape.reshape(x, &[c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let out = tape.kan(
            tokens,
            p[self.layout.kan_base],
            p[self.layout.kan_coef],
            self.cfg.spline_grid(),
        )?;
        let d_out = tape.shape(out)[1];
        let chans = tape.transpose(out)?;
        tape.reshape(chans, &[d_out, h, w])
    }
}

/// Subtracts the per-pixel mean over channels. Some class then always has a
/// nonnegative logit, so the smooth generator never goes flat on every class.
pub fn center_channels(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, _, _) = tape.value(x).chw()?;
    let total = tape.sum_channels(x)?;
    let mean = tape.scale(total, 1.0 / c as f64)?;
    let wide = tape.broadcast_channels(mean, c)?;
    tape.sub(x, wide)
}

fn eeb_forward(tape: &mut Tape, x: Var, idx: &EebIdx, p: &[Var]) -> Result<Var> {
    let mut branches = Vec::with_capacity(3);
    for (conv, dil) in idx.branches.iter().zip(EEB_DILATIONS) {
        branches.push(tape.conv2d(x, p[conv.w], Some(p[conv.b]), dil)?);
    }
    let cat = tape.concat_channels(&branches)?;
    let fused = tape.conv2d(cat, p[idx.fuse.w], Some(p[idx.fuse.b]), 1)?;
    tape.relu(fused)
}

/// Standalone evidence enhancement block: `weights` are the three dilated
/// branch kernels followed by the fuse kernel, each as (weight, bias).
pub fn eeb_forward_with(tape: &mut Tape, x: Var, weights: [(Var, Var); 4]) -> Result<Var> {
    let mut branches = Vec::with_capacity(3);
    for (&(w, b), dil) in weights[..3].iter().zip(EEB_DILATIONS) {
        branches.push(tape.conv2d(x, w, Some(b), dil)?);
    }
    let cat = tape.concat_channels(&branches)?;
    let fused = tape.conv2d(cat, weights[3].0, Some(weights[3].1), 1)?;
    tape.relu(fused)
}
