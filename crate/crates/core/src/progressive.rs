//! Progressive inference: each pass's uncertainty map guides the next pass
//! until the mean absolute change drops to `epsilon`.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evidential::{generate, predict_mask, to_field, FieldValues};
use crate::metrics::LabelMap;
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgressiveConfig {
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for ProgressiveConfig {
    fn default() -> Self {
        ProgressiveConfig {
            epsilon: 0.01,
            max_iters: 5,
        }
    }
}

impl ProgressiveConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.epsilon > 0.0) {
            return Err(format!(
                "progressive.epsilon must be > 0, got {}",
                self.epsilon
            ));
        }
        if self.max_iters < 1 {
            return Err("progressive.max_iters must be >= 1".into());
        }
        Ok(())
    }
}

/// Single-channel uncertainty map and the iteration that produced it
/// (0 for the all-ones initial map).
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub values: Tensor,
    pub iteration: usize,
}

impl UncertaintyMap {
    pub fn initial(height: usize, width: usize) -> Self {
        UncertaintyMap {
            values: Tensor::ones(&[1, height, width]),
            iteration: 0,
        }
    }
}

/// Mean absolute elementwise difference.
pub fn convergence_delta(prev: &UncertaintyMap, next: &UncertaintyMap) -> Result<f64> {
    if prev.values.shape() != next.values.shape() {
        return Err(Error::dim(
            "convergence_delta",
            format!("{:?} vs {:?}", prev.values.shape(), next.values.shape()),
        ));
    }
    let a = prev.values.data();
    let b = next.values.data();
    let total: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: LabelMap,
    pub umap: UncertaintyMap,
    pub trace: Vec<TraceRow>,
    /// Every Dirichlet quantity of the final pass.
    pub field: FieldValues,
}

/// One inference pass under a fixed guidance map.
pub fn guided_pass(
    net: &Network,
    image: &Tensor,
    umap: &Tensor,
) -> Result<(LabelMap, FieldValues)> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let u = tape.constant(umap.clone());
    let params = net.bind(&mut tape, false);
    let out = net.forward_bound(&mut tape, x, u, params)?;
    let e = generate(&mut tape, out.logits, net.config().generator)?;
    let field = to_field(&mut tape, e)?;
    Ok((predict_mask(&tape, &field), field.values(&tape)))
}

pub fn progressive_segment(
    net: &Network,
    image: &Tensor,
    cfg: &ProgressiveConfig,
) -> Result<Segmentation> {
    cfg.validate().map_err(Error::Contract)?;
    let (_, h, w) = image.chw()?;
    let mut umap = UncertaintyMap::initial(h, w);
    let mut trace = Vec::new();
    let mut last = None;
    for iter in 1..=cfg.max_iters {
        let (mask, field) = guided_pass(net, image, &umap.values).map_err(|e| match e {
            Error::NonFinite { op } => {
                Error::Contract(format!("non-finite value from {op} at iteration {iter}"))
            }
            other => other,
        })?;
        let next = UncertaintyMap {
            values: field.uncertainty.clone(),
            iteration: iter,
        };
        if !next.values.all_finite() {
            return Err(Error::Contract(format!(
                "non-finite uncertainty at iteration {iter}"
            )));
        }
        let delta = convergence_delta(&umap, &next)?;
        trace.push(TraceRow { iter, delta });
        umap = next;
        last = Some((mask, field));
        if delta <= cfg.epsilon {
            break;
        }
    }
    let (mask, field) = last.expect("at least one iteration");
    Ok(Segmentation {
        mask,
        umap,
        trace,
        field,
    })
}
