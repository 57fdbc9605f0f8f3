//! Uncertainty-guided low-rank attention over shallow features.
//!
//! The uncertainty map is pooled to a token grid and passed through two
//! 3x3 convolutions giving `Q` (N x r) and `K` (r x N). The N x N attention
//! `softmax(Q K / sqrt(r))` therefore has rank at most `r` before the
//! softmax. It mixes average-pooled feature tokens, which are upsampled
//! (nearest) and added back onto the input features.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EugaConfig {
    pub rank: usize,
    pub token_stride: usize,
}

impl Default for EugaConfig {
    fn default() -> Self {
        EugaConfig {
            rank: 8,
            token_stride: 4,
        }
    }
}

impl EugaConfig {
    /// Checks the config against an H x W feature map.
    pub fn check(&self, height: usize, width: usize) -> Result<usize> {
        let s = self.token_stride;
        if s == 0 || height % s != 0 || width % s != 0 {
            return Err(Error::dim(
                "euga",
                format!("token stride {s} does not divide {height} x {width}"),
            ));
        }
        let tokens = (height / s) * (width / s);
        if self.rank == 0 || self.rank > tokens {
            return Err(Error::dim(
                "euga",
                format!("rank {} must be in 1..={tokens}", self.rank),
            ));
        }
        Ok(tokens)
    }
}

/// Tape handles of the two projection convolutions.
#[derive(Clone, Copy, Debug)]
pub struct EugaVars {
    /// r x 1 x 3 x 3
    pub q_weight: Var,
    /// r
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EugaOutput {
    /// Same shape as the input features.
    pub output: Var,
    /// N x N, rows sum to one.
    pub attention: Var,
    /// N x N pre-softmax scores `Q K` (unscaled).
    pub scores: Var,
}

pub fn euga_forward(
    tape: &mut Tape,
    features: Var,
    umap: Var,
    params: &EugaVars,
    cfg: &EugaConfig,
) -> Result<EugaOutput> {
    let (cf, h, w) = tape.value(features).chw()?;
    let (uc, uh, uw) = tape.value(umap).chw()?;
    if (uc, uh, uw) != (1, h, w) {
        return Err(Error::dim(
            "euga",
            format!(
                "uncertainty map {:?} vs features {cf} x {h} x {w}",
                tape.shape(umap)
            ),
        ));
    }
    if tape
        .value(umap)
        .data()
        .iter()
        .any(|&u| !(-1e-12..=1.0 + 1e-12).contains(&u))
    {
        return Err(Error::Contract("uncertainty map must lie in [0, 1]".into()));
    }
    let tokens = cfg.check(h, w)?;
    let r = cfg.rank;
    let s = cfg.token_stride;

    let u_low = tape.avgpool(umap, s)?;
    let q = tape.conv2d(u_low, params.q_weight, Some(params.q_bias), 1)?;
    let q = tape.reshape(q, &[r, tokens])?;
    let q = tape.transpose(q)?;
    let k = tape.conv2d(u_low, params.k_weight, Some(params.k_bias), 1)?;
    let k = tape.reshape(k, &[r, tokens])?;
    let scores = tape.matmul(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (r as f64).sqrt())?;
    let attention = tape.softmax(scaled)?;

    let v = tape.avgpool(features, s)?;
    let v = tape.reshape(v, &[cf, tokens])?;
    let at = tape.transpose(attention)?;
    let mixed = tape.matmul(v, at)?;
    let mixed = tape.reshape(mixed, &[cf, h / s, w / s])?;
    let up = tape.upsample(mixed, s)?;
    let output = tape.add(features, up)?;
    Ok(EugaOutput {
        output,
        attention,
        scores,
    })
}

/// Mean Shannon entropy (nats) of the rows of a row-stochastic matrix.
pub fn attention_entropy(a: &Tensor) -> f64 {
    let n = *a.shape().last().expect("matrix");
    let rows = a.len() / n;
    let total: f64 = a
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}
