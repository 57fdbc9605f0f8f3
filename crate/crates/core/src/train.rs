//! Training loop and batch evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evidential::{generate, to_field};
use crate::losses::{loss_total, LossConfig};
use crate::metrics::{MetricReport, MetricRow};
use crate::network::Network;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::progressive::{guided_pass, progressive_segment, ProgressiveConfig, TraceRow};
use crate::synth::{mix_seed, SegSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Forward passes per training step; the last one is differentiated.
    pub guidance_iters: usize,
    /// Differentiate through every guidance pass instead of detaching the
    /// fed-back uncertainty map.
    pub unroll_iters: bool,
    pub threads: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 1,
            lr: 1e-4,
            guidance_iters: 2,
            unroll_iters: false,
            threads: 1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 || self.guidance_iters == 0 || self.threads == 0
        {
            return Err("train.epochs, train.batch_size, train.guidance_iters and train.threads must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return Err(format!("train.lr must be > 0, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub ice: f64,
    pub kl: f64,
    pub u: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda1: f64,
    pub loss: LossValues,
    pub val_dice: f64,
}

pub const LOG_HEADER: &str = "epoch,lambda1,l_ice,l_kl,l_u,l_total,val_dice";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.6}",
            self.epoch,
            self.lambda1,
            self.loss.ice,
            self.loss.kl,
            self.loss.u,
            self.loss.total,
            self.val_dice
        )
    }
}

pub(crate) fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_gradients(
    net: &Network,
    sample: &SegSample,
    epoch: usize,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossValues)> {
    let (_, h, w) = sample.image.chw()?;
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let params = net.bind(&mut tape, true);
    let mut umap = Tensor::ones(&[1, h, w]);
    let u = if cfg.unroll_iters {
        let mut u = tape.constant(umap);
        for _ in 1..cfg.guidance_iters {
            let out = net.forward_bound(&mut tape, x, u, params.clone())?;
            let e = generate(&mut tape, out.logits, net.config().generator)?;
            u = to_field(&mut tape, e)?.uncertainty;
        }
        u
    } else {
        for _ in 1..cfg.guidance_iters {
            umap = guided_pass(net, &sample.image, &umap)?.1.uncertainty;
        }
        tape.constant(umap)
    };
    let out = net.forward_bound(&mut tape, x, u, params)?;
    let e = generate(&mut tape, out.logits, net.config().generator)?;
    let field = to_field(&mut tape, e)?;
    let parts = loss_total(&mut tape, &field, &sample.truth, epoch, loss_cfg)?;
    let grads = tape.backward(parts.total)?;
    let values = LossValues {
        ice: tape.value(parts.ice).item(),
        kl: tape.value(parts.kl).item(),
        u: tape.value(parts.u).item(),
        total: tape.value(parts.total).item(),
    };
    let g = out
        .params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
        .collect();
    Ok((g, values))
}

/// Trains in place. `on_epoch` sees each log row as it is produced.
pub fn train(
    net: &mut Network,
    train_set: &[SegSample],
    val_set: &[SegSample],
    loss_cfg: &LossConfig,
    prog: &ProgressiveConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate().map_err(Error::Contract)?;
    loss_cfg.validate().map_err(Error::Contract)?;
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let pool = pool(cfg.threads)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let values: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let mut state = AdamState::new(&values);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step,
                detail,
            };
            let shared: &Network = net;
            let results: Vec<Result<(Vec<Tensor>, LossValues)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| sample_gradients(shared, &train_set[i], epoch, loss_cfg, cfg))
                    .collect()
            });
            let mut acc: Option<Vec<Tensor>> = None;
            for r in results {
                let (g, l) = r.map_err(|e| match e {
                    Error::NonFinite { op } => diverged(format!("non-finite value from {op}")),
                    other => other,
                })?;
                if !l.total.is_finite() {
                    return Err(diverged(format!("loss is {}", l.total)));
                }
                sum.ice += l.ice;
                sum.kl += l.kl;
                sum.u += l.u;
                sum.total += l.total;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (at, gt) in a.iter_mut().zip(&g) {
                            for (x, y) in at.data_mut().iter_mut().zip(gt.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
                if !g.all_finite() {
                    return Err(diverged("non-finite gradient".into()));
                }
            }
            let mut refs: Vec<&mut Tensor> =
                net.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adam_step(&mut refs, &grads, &mut state, &adam)?;
        }
        let n = train_set.len() as f64;
        let val_dice = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(net, val_set, prog, cfg.threads)?
                .report
                .mean_dice()
        };
        let log = EpochLog {
            epoch,
            lambda1: crate::losses::lambda1(epoch, loss_cfg),
            loss: LossValues {
                ice: sum.ice / n,
                kl: sum.kl / n,
                u: sum.u / n,
                total: sum.total / n,
            },
            val_dice,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per-image progressive traces, same order as `report.rows`.
    pub traces: Vec<(String, Vec<TraceRow>)>,
}

pub const TRACE_HEADER: &str = "image_id,iter,delta";

impl Evaluation {
    pub fn trace_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for (id, rows) in &self.traces {
            for r in rows {
                out.push_str(&format!("{id},{},{:.9}\n", r.iter, r.delta));
            }
        }
        out
    }
}

/// Runs the progressive loop on every sample; output is sorted by image id
/// regardless of thread count.
pub fn evaluate(
    net: &Network,
    samples: &[SegSample],
    prog: &ProgressiveConfig,
    threads: usize,
) -> Result<Evaluation> {
    let pool = pool(threads)?;
    let results: Vec<Result<(MetricRow, Vec<TraceRow>)>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let seg = progressive_segment(net, &s.image, prog)?;
                let row = MetricRow::compute(&s.id, &seg.mask, s.labels(), &seg.umap.values)?;
                Ok((row, seg.trace))
            })
            .collect()
    });
    let mut pairs = results.into_iter().collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id));
    let (rows, traces): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .map(|(row, trace)| {
            let id = row.image_id.clone();
            (row, (id, trace))
        })
        .unzip();
    Ok(Evaluation {
        report: MetricReport::new(rows),
        traces,
    })
}
