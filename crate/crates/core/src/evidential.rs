//! Evidence generation and the per-pixel Dirichlet quantities derived from it.
//!
//! For a C-class pixel with evidence `e`:
//! `alpha = e + 1`, `S = sum(alpha)`, `p = alpha / S`, `u = C / S`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::Tensor;

/// Logits above this are clamped before `exp` in the baseline generator.
pub const EXP_LOGIT_CAP: f64 = 10.0;

/// How raw logits become nonnegative evidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvidenceGenerator {
    /// `exp(-relu(x)) + relu(x) - 1`.
    Smooth,
    /// `exp(min(x, EXP_LOGIT_CAP))`, the conventional baseline.
    Exp,
}

impl fmt::Display for EvidenceGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvidenceGenerator::Smooth => "smooth",
            EvidenceGenerator::Exp => "exp",
        })
    }
}

impl FromStr for EvidenceGenerator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "smooth" => Ok(EvidenceGenerator::Smooth),
            "exp" => Ok(EvidenceGenerator::Exp),
            other => Err(format!("unknown evidence generator `{other}` (smooth|exp)")),
        }
    }
}

/// The smooth generator. Zero for `x <= 0`, slope `1 - exp(-x)` above.
pub fn evi_generate(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.smooth_evidence(logits)
}

pub fn generate(tape: &mut Tape, logits: Var, generator: EvidenceGenerator) -> Result<Var> {
    let e = match generator {
        EvidenceGenerator::Smooth => evi_generate(tape, logits)?,
        EvidenceGenerator::Exp => {
            let c = tape.clamp_max(logits, EXP_LOGIT_CAP)?;
            tape.exp(c)?
        }
    };
    if let Some(bad) = tape.value(e).data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Contract(format!(
            "generator produced negative evidence {bad}"
        )));
    }
    Ok(e)
}

/// Tape handles for every Dirichlet quantity of a C x H x W evidence map.
#[derive(Clone, Copy, Debug)]
pub struct EvidenceField {
    pub classes: usize,
    /// C x H x W
    pub evidence: Var,
    /// C x H x W
    pub alpha: Var,
    /// 1 x H x W
    pub strength: Var,
    /// 1 x H x W, in (0, 1]
    pub uncertainty: Var,
    /// C x H x W, sums to one over channels
    pub prob: Var,
}

pub fn to_field(tape: &mut Tape, evidence: Var) -> Result<EvidenceField> {
    let (classes, _, _) = tape.value(evidence).chw()?;
    if let Some(bad) = tape.value(evidence).data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Contract(format!(
            "evidence must be nonnegative, found {bad}"
        )));
    }
    let alpha = tape.add_scalar(evidence, 1.0)?;
    let strength = tape.sum_channels(alpha)?;
    let s_wide = tape.broadcast_channels(strength, classes)?;
    let prob = tape.div(alpha, s_wide)?;
    let inv = tape.recip(strength)?;
    let uncertainty = tape.scale(inv, classes as f64)?;
    Ok(EvidenceField {
        classes,
        evidence,
        alpha,
        strength,
        uncertainty,
        prob,
    })
}

/// Detached copy of a field's values.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldValues {
    pub evidence: Tensor,
    pub alpha: Tensor,
    pub strength: Tensor,
    pub uncertainty: Tensor,
    pub prob: Tensor,
}

impl EvidenceField {
    pub fn values(&self, tape: &Tape) -> FieldValues {
        FieldValues {
            evidence: tape.value(self.evidence).clone(),
            alpha: tape.value(self.alpha).clone(),
            strength: tape.value(self.strength).clone(),
            uncertainty: tape.value(self.uncertainty).clone(),
            prob: tape.value(self.prob).clone(),
        }
    }
}

/// Pixelwise argmax of the expected probabilities. Ties go to the lowest
/// class index.
pub fn predict_mask(tape: &Tape, field: &EvidenceField) -> LabelMap {
    argmax_channels(tape.value(field.prob))
}

pub fn argmax_channels(t: &Tensor) -> LabelMap {
    let (c, h, w) = t.chw().expect("C x H x W");
    let hw = h * w;
    let d = t.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, labels)
}
