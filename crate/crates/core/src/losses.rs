//! Training objective: integrated cross-entropy, KL regulariser against the
//! uniform Dirichlet, and the uncertainty-fidelity term, combined with an
//! annealed KL weight.
//!
//! Every per-pixel term is averaged over the image so the weights do not
//! depend on resolution.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::evidential::EvidenceField;
use crate::metrics::LabelMap;
use crate::special;
use crate::tensor::Tensor;

/// Form of the uncertainty-fidelity term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UncertaintyTerm {
    /// `-(1 - p_gt) ln u`: nonnegative, zero when `u = 1` or `p_gt = 1`.
    Corrected,
    /// `(1 - p_gt) ln u` with the plain sign; rewards `u -> 0`.
    Literal,
    /// Term disabled.
    Off,
}

impl fmt::Display for UncertaintyTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UncertaintyTerm::Corrected => "corrected",
            UncertaintyTerm::Literal => "literal",
            UncertaintyTerm::Off => "off",
        })
    }
}

impl FromStr for UncertaintyTerm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "corrected" => Ok(UncertaintyTerm::Corrected),
            "literal" => Ok(UncertaintyTerm::Literal),
            "off" => Ok(UncertaintyTerm::Off),
            other => Err(format!(
                "unknown uncertainty term `{other}` (corrected|literal|off)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda2: f64,
    pub total_epochs: usize,
    pub kl_anneal_factor: f64,
    /// Floor applied inside every logarithm.
    pub eps_log: f64,
    pub uncertainty_term: UncertaintyTerm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda2: 0.5,
            total_epochs: 30,
            kl_anneal_factor: 10.0,
            eps_log: 1e-12,
            uncertainty_term: UncertaintyTerm::Corrected,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda2 >= 0.0) {
            return Err(format!("loss.lambda2 must be >= 0, got {}", self.lambda2));
        }
        if self.total_epochs < 1 {
            return Err("total epochs must be >= 1".into());
        }
        if !(self.eps_log > 0.0) {
            return Err(format!("loss.eps_log must be > 0, got {}", self.eps_log));
        }
        if !(self.kl_anneal_factor >= 0.0) {
            return Err("loss.kl_anneal_factor must be >= 0".into());
        }
        Ok(())
    }
}

/// One-hot labels for a C x H x W prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    onehot: Tensor,
    labels: LabelMap,
}

impl GroundTruth {
    pub fn new(onehot: Tensor) -> Result<Self> {
        let (c, h, w) = onehot.chw()?;
        let hw = h * w;
        let d = onehot.data();
        if d.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("one-hot entries must be 0 or 1".into()));
        }
        for p in 0..hw {
            let s: f64 = (0..c).map(|k| d[k * hw + p]).sum();
            if s != 1.0 {
                return Err(Error::Contract(format!("pixel {p} has {s} active classes")));
            }
        }
        let labels = LabelMap::from_onehot(&onehot);
        Ok(GroundTruth { onehot, labels })
    }

    pub fn from_labels(labels: &LabelMap, classes: usize) -> Self {
        let hw = labels.height() * labels.width();
        let mut onehot = Tensor::zeros(&[classes, labels.height(), labels.width()]);
        for (p, &l) in labels.labels().iter().enumerate() {
            onehot.data_mut()[l * hw + p] = 1.0;
        }
        GroundTruth {
            onehot,
            labels: labels.clone(),
        }
    }

    pub fn onehot(&self) -> &Tensor {
        &self.onehot
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }
}

fn check_shapes(tape: &Tape, field: &EvidenceField, gt: &GroundTruth) -> Result<usize> {
    let fs = tape.shape(field.alpha);
    if fs != gt.onehot.shape() {
        return Err(Error::dim(
            "loss",
            format!("field {fs:?} vs ground truth {:?}", gt.onehot.shape()),
        ));
    }
    Ok(fs[1] * fs[2])
}

/// Mean over pixels of `sum_c y_c (ln S - ln alpha_c)`.
pub fn loss_ice(tape: &mut Tape, field: &EvidenceField, gt: &GroundTruth, eps: f64) -> Result<Var> {
    let pixels = check_shapes(tape, field, gt)?;
    let ln_s = tape.ln_floored(field.strength, eps)?;
    let ln_s = tape.broadcast_channels(ln_s, field.classes)?;
    let ln_a = tape.ln_floored(field.alpha, eps)?;
    let diff = tape.sub(ln_s, ln_a)?;
    let y = tape.constant(gt.onehot.clone());
    let picked = tape.mul(diff, y)?;
    let total = tape.sum(picked)?;
    tape.scale(total, 1.0 / pixels as f64)
}

/// `y + (1 - y) * alpha`: the true class is pinned to 1 and receives no gradient.
pub fn adjusted_alpha(tape: &mut Tape, field: &EvidenceField, gt: &GroundTruth) -> Result<Var> {
    check_shapes(tape, field, gt)?;
    let keep = tape.constant(gt.onehot.map(|y| 1.0 - y));
    let y = tape.constant(gt.onehot.clone());
    let off = tape.mul(keep, field.alpha)?;
    tape.add(off, y)
}

/// Mean over pixels of KL(Dir(alpha_tilde) || Dir(1, ..., 1)).
pub fn loss_kl(tape: &mut Tape, alpha_tilde: Var) -> Result<Var> {
    let (c, h, w) = tape.value(alpha_tilde).chw()?;
    if let Some(&bad) = tape.value(alpha_tilde).data().iter().find(|&&a| a <= 0.0) {
        return Err(Error::Domain {
            op: "loss_kl",
            detail: format!("Dirichlet parameter {bad} is not positive"),
        });
    }
    if let Some(&low) = tape
        .value(alpha_tilde)
        .data()
        .iter()
        .find(|&&a| a < 1.0 - 1e-9)
    {
        return Err(Error::Contract(format!(
            "adjusted Dirichlet parameters must be >= 1, found {low}"
        )));
    }
    let s = tape.sum_channels(alpha_tilde)?;
    let lg_s = tape.lgamma(s)?;
    let lg_a = tape.lgamma(alpha_tilde)?;
    let lg_a = tape.sum_channels(lg_a)?;
    let norm = tape.sub(lg_s, lg_a)?;
    let norm = tape.add_scalar(norm, -special::lgamma(c as f64)?)?;

    let dg_a = tape.digamma(alpha_tilde)?;
    let dg_s = tape.digamma(s)?;
    let dg_s = tape.broadcast_channels(dg_s, c)?;
    let dg = tape.sub(dg_a, dg_s)?;
    let am1 = tape.add_scalar(alpha_tilde, -1.0)?;
    let cross = tape.mul(am1, dg)?;
    let cross = tape.sum_channels(cross)?;

    let per_pixel = tape.add(norm, cross)?;
    let total = tape.sum(per_pixel)?;
    tape.scale(total, 1.0 / (h * w) as f64)
}

/// Mean over pixels of the uncertainty-fidelity term, `p_gt` being the
/// expected probability at the true class.
pub fn loss_u(
    tape: &mut Tape,
    field: &EvidenceField,
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Result<Var> {
    let pixels = check_shapes(tape, field, gt)?;
    let sign = match cfg.uncertainty_term {
        UncertaintyTerm::Corrected => -1.0,
        UncertaintyTerm::Literal => 1.0,
        UncertaintyTerm::Off => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    let y = tape.constant(gt.onehot.clone());
    let p = tape.mul(field.prob, y)?;
    let p_gt = tape.sum_channels(p)?;
    let neg = tape.scale(p_gt, -1.0)?;
    let weight = tape.add_scalar(neg, 1.0)?;
    let ln_u = tape.ln_floored(field.uncertainty, cfg.eps_log)?;
    let term = tape.mul(weight, ln_u)?;
    let total = tape.sum(term)?;
    tape.scale(total, sign / pixels as f64)
}

/// KL weight `min(1, epoch * kl_anneal_factor / total_epochs)`.
pub fn lambda1(epoch: usize, cfg: &LossConfig) -> f64 {
    (epoch as f64 * cfg.kl_anneal_factor / cfg.total_epochs as f64).min(1.0)
}

/// The three terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ice: Var,
    pub kl: Var,
    pub u: Var,
    pub total: Var,
    pub lambda1: f64,
}

pub fn loss_total(
    tape: &mut Tape,
    field: &EvidenceField,
    gt: &GroundTruth,
    epoch: usize,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let ice = loss_ice(tape, field, gt, cfg.eps_log)?;
    let at = adjusted_alpha(tape, field, gt)?;
    let kl = loss_kl(tape, at)?;
    let u = loss_u(tape, field, gt, cfg)?;
    let l1 = lambda1(epoch, cfg);
    let wkl = tape.scale(kl, l1)?;
    let wu = tape.scale(u, cfg.lambda2)?;
    let total = tape.add(ice, wkl)?;
    let total = tape.add(total, wu)?;
    Ok(LossParts {
        ice,
        kl,
        u,
        total,
        lambda1: l1,
    })
}
