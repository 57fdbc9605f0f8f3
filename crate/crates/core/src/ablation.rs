//! The 2 x 2 {EUGA on/off} x {SAEL on/off} comparison, each cell evaluated
//! clean and under Gaussian noise.

use crate::config::RunConfig;
use crate::error::Result;
use crate::evidential::EvidenceGenerator;
use crate::losses::UncertaintyTerm;
use crate::metrics::MetricReport;
use crate::network::{Network, SkipRoute};
use crate::synth::{add_noise, mix_seed, Corpus, NoiseSpec, SegSample};
use crate::train::{evaluate, train, EpochLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub euga: bool,
    pub sael: bool,
}

/// Row order of the comparison table.
pub const CELLS: [Cell; 4] = [
    Cell {
        euga: true,
        sael: true,
    },
    Cell {
        euga: true,
        sael: false,
    },
    Cell {
        euga: false,
        sael: true,
    },
    Cell {
        euga: false,
        sael: false,
    },
];

/// Turning SAEL off swaps in the exponential generator and the literal
/// uncertainty term.
pub fn cell_config(base: &RunConfig, cell: Cell) -> RunConfig {
    let mut cfg = base.clone();
    cfg.net.use_euga = cell.euga;
    if cell.sael {
        cfg.net.generator = EvidenceGenerator::Smooth;
        cfg.loss.uncertainty_term = UncertaintyTerm::Corrected;
    } else {
        cfg.net.generator = EvidenceGenerator::Exp;
        cfg.loss.uncertainty_term = UncertaintyTerm::Literal;
    }
    cfg
}

/// Aggregate metrics of one evaluated report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub dice: f64,
    pub iou: f64,
    pub assd: f64,
    pub ueo: f64,
    pub ueo_max: f64,
    pub mean_u: f64,
}

impl From<&MetricReport> for Summary {
    fn from(r: &MetricReport) -> Self {
        Summary {
            dice: r.mean_dice(),
            iou: r.mean_iou(),
            assd: r.mean_assd(),
            ueo: r.mean_ueo(),
            ueo_max: r.mean_ueo_max(),
            mean_u: r.mean_uncertainty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub route: SkipRoute,
    pub generator: EvidenceGenerator,
    pub uncertainty_term: UncertaintyTerm,
    pub clean: Summary,
    pub noisy: Summary,
    pub log: Vec<EpochLog>,
}

pub const ABLATION_HEADER: &str =
    "euga,sael,generator,uncertainty_term,dice,iou,assd,ueo@0.5,ueo_max,mean_u,\
noise_sigma,noisy_dice,noisy_ueo_max,noisy_mean_u";

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "undefined".into()
    }
}

impl CellResult {
    pub fn csv_row(&self, sigma: f64) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let c = &self.clean;
        let n = &self.noisy;
        [
            onoff(self.cell.euga).to_string(),
            onoff(self.cell.sael).to_string(),
            self.generator.to_string(),
            self.uncertainty_term.to_string(),
            num(c.dice),
            num(c.iou),
            num(c.assd),
            num(c.ueo),
            num(c.ueo_max),
            num(c.mean_u),
            format!("{sigma}"),
            num(n.dice),
            num(n.ueo_max),
            num(n.mean_u),
        ]
        .join(",")
    }
}

/// Noisy copies of `samples`, one derived seed per image.
pub fn noisy_set(samples: &[SegSample], spec: &NoiseSpec) -> Vec<SegSample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let per = NoiseSpec {
                seed: mix_seed(spec.seed, i as u64),
                ..*spec
            };
            add_noise(s, &per)
        })
        .collect()
}

/// Trains one cell from scratch and evaluates it on the test split.
pub fn run_cell(
    cfg: &RunConfig,
    cell: Cell,
    corpus: &Corpus,
    noise: &NoiseSpec,
) -> Result<(Network, CellResult)> {
    let mut net = Network::new(cfg.net.clone())?;
    let log = train(
        &mut net,
        &corpus.train,
        &corpus.val,
        &cfg.loss,
        &cfg.progressive,
        &cfg.train,
        |_| {},
    )?;
    let threads = cfg.train.threads;
    let clean = evaluate(&net, &corpus.test, &cfg.progressive, threads)?;
    let noisy = evaluate(
        &net,
        &noisy_set(&corpus.test, noise),
        &cfg.progressive,
        threads,
    )?;
    let result = CellResult {
        cell,
        route: net.skip_route(),
        generator: cfg.net.generator,
        uncertainty_term: cfg.loss.uncertainty_term,
        clean: Summary::from(&clean.report),
        noisy: Summary::from(&noisy.report),
        log,
    };
    Ok((net, result))
}

pub fn ablate(
    base: &RunConfig,
    corpus: &Corpus,
    noise: &NoiseSpec,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    let mut out = Vec::with_capacity(CELLS.len());
    for cell in CELLS {
        let (_, r) = run_cell(&cell_config(base, cell), cell, corpus, noise)?;
        on_cell(&r);
        out.push(r);
    }
    Ok(out)
}
