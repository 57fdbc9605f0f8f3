use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evseg::ablation::{ablate, noisy_set, ABLATION_HEADER};
use evseg::checkpoint;
use evseg::config::RunConfig;
use evseg::io::{self, Pgm};
use evseg::metrics::LabelMap;
use evseg::network::Network;
use evseg::progressive::progressive_segment;
use evseg::selfcheck::{gradient_suite, invariant_suite};
use evseg::synth::{synth_corpus, Corpus, NoiseSpec};
use evseg::train::{evaluate, train, LOG_HEADER, TRACE_HEADER};
use evseg::Error;

#[derive(Parser)]
#[command(name = "evseg", version, about = "Evidential segmentation with progressive uncertainty guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Corpus directory written by `synth`
    #[arg(long, conflicts_with = "synth")]
    corpus: Option<PathBuf>,
    /// Generate a synthetic corpus with this many training images
    #[arg(long)]
    synth: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `model.ckpt` and `train_log.csv`
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a corpus split
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Add Gaussian noise of this standard deviation first
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Segment one image (.f32 or .pgm)
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth label PGM; enables diff.pgm
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train and evaluate the EUGA x SAEL grid
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Noise level for the robustness columns
        #[arg(long, default_value_t = 0.4)]
        noise: f64,
    },
    /// Write a synthetic corpus to disk
    Synth {
        #[command(flatten)]
        common: Common,
        /// Training images; validation and test get a quarter each
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run the gradient and invariant self-test
    Check {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 10_000)]
        vectors: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::Domain { .. } => 3,
        Error::Mismatch(_) => 4,
        _ => 2,
    }
}

fn load_config(common: &Common) -> evseg::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config {
                line: 0,
                detail: format!("{}: {e}", p.display()),
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) -> evseg::Result<()> {
    if let Some(c) = &data.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    if let Some(n) = data.synth {
        cfg.data.corpus = None;
        cfg.data.synth_train = n;
    }
    cfg.validate()
}

fn corpus(cfg: &RunConfig) -> evseg::Result<Corpus> {
    match &cfg.data.corpus {
        Some(dir) => io::load_corpus(dir, cfg.net.classes),
        None => synth_corpus(&cfg.corpus_spec()),
    }
}

fn write(path: &Path, text: &str) -> evseg::Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Returns the process exit status on success paths.
fn run(cli: Cli) -> evseg::Result<u8> {
    match cli.command {
        Command::Train { common, data, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.sync();
            }
            apply_data(&mut cfg, &data)?;
            let corpus = corpus(&cfg)?;
            fs::create_dir_all(&cfg.out)?;
            let mut log = fs::File::create(cfg.out.join("train_log.csv"))?;
            writeln!(log, "{LOG_HEADER}")?;
            let mut net = Network::new(cfg.net.clone())?;
            let mut io_err = None;
            train(&mut net, &corpus.train, &corpus.val, &cfg.loss, &cfg.progressive, &cfg.train, |row| {
                println!("{}", row.csv_row());
                if let Err(e) = writeln!(log, "{}", row.csv_row()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            let path = cfg.out.join("model.ckpt");
            checkpoint::save(&path, &net)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
            split,
            noise,
        } => {
            let mut cfg = load_config(&common)?;
            apply_data(&mut cfg, &data)?;
            let expect = common.config.as_ref().map(|_| &cfg.net);
            let net = checkpoint::load(&ckpt, expect)?;
            let corpus = corpus(&cfg)?;
            let mut samples = match split.as_str() {
                "train" => corpus.train,
                "val" => corpus.val,
                "test" => corpus.test,
                other => {
                    return Err(Error::Config {
                        line: 0,
                        detail: format!("unknown split `{other}` (train|val|test)"),
                    })
                }
            };
            if let Some(sigma) = noise {
                let seed = cfg.noise.map_or(cfg.seed, |n| n.seed);
                let spec = NoiseSpec::new(sigma, seed).map_err(|e| Error::Config {
                    line: 0,
                    detail: e.to_string(),
                })?;
                samples = noisy_set(&samples, &spec);
            }
            let ev = evaluate(&net, &samples, &cfg.progressive, cfg.train.threads)?;
            fs::create_dir_all(&cfg.out)?;
            write(&cfg.out.join("metrics.csv"), &ev.report.to_csv())?;
            write(&cfg.out.join("traces.csv"), &ev.trace_csv())?;
            let r = &ev.report;
            println!(
                "images={} dice={:.6} iou={:.6} assd={:.6} ueo@0.5={:.6} ueo_max={:.6} mean_u={:.6}",
                r.rows.len(),
                r.mean_dice(),
                r.mean_iou(),
                r.mean_assd(),
                r.mean_ueo(),
                r.mean_ueo_max(),
                r.mean_uncertainty()
            );
        }
        Command::Predict {
            common,
            checkpoint: ckpt,
            image,
            mask,
        } => {
            let cfg = load_config(&common)?;
            let expect = common.config.as_ref().map(|_| &cfg.net);
            let net = checkpoint::load(&ckpt, expect)?;
            let img = io::load_image(&image, net.config().in_channels)?;
            let seg = progressive_segment(&net, &img, &cfg.progressive)?;
            let out = &cfg.out;
            fs::create_dir_all(out)?;
            io::write_pgm(&out.join("pred.pgm"), &io::labels_to_pgm(&seg.mask))?;
            let (h, w) = (seg.mask.height(), seg.mask.width());
            let u = seg.umap.values.data();
            io::write_pgm(
                &out.join("umap.pgm"),
                &Pgm {
                    width: w,
                    height: h,
                    maxval: 65535,
                    pixels: u.iter().map(|&v| (65535.0 * v as f32 as f64).round() as u16).collect(),
                },
            )?;
            io::write_f32(&out.join("umap.f32"), &seg.umap.values)?;
            let mut trace = format!("{TRACE_HEADER}\n");
            let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            for r in &seg.trace {
                trace.push_str(&format!("{id},{},{:.9}\n", r.iter, r.delta));
            }
            write(&out.join("trace.csv"), &trace)?;
            if let Some(m) = mask {
                let truth = io::pgm_to_labels(&io::read_pgm(&m)?, net.config().classes)?;
                let diff = seg.mask.disagreement(&truth)?;
                let labels = LabelMap::new(h, w, diff.cells().iter().map(|&d| if d { 255 } else { 0 }).collect());
                io::write_pgm(&out.join("diff.pgm"), &io::labels_to_pgm(&labels))?;
            }
            println!("iterations={} mean_u={:.6}", seg.trace.len(), seg.umap.values.mean());
        }
        Command::Ablate {
            common,
            data,
            epochs,
            noise,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.sync();
            }
            apply_data(&mut cfg, &data)?;
            let spec = NoiseSpec::new(noise, cfg.noise.map_or(cfg.seed, |n| n.seed)).map_err(|e| Error::Config {
                line: 0,
                detail: e.to_string(),
            })?;
            let corpus = corpus(&cfg)?;
            fs::create_dir_all(&cfg.out)?;
            let mut csv = format!("{ABLATION_HEADER}\n");
            println!("{ABLATION_HEADER}");
            ablate(&cfg, &corpus, &spec, |r| {
                println!("{}", r.csv_row(spec.sigma));
                csv.push_str(&r.csv_row(spec.sigma));
                csv.push('\n');
            })?;
            write(&cfg.out.join("ablation.csv"), &csv)?;
        }
        Command::Synth { common, n, size } => {
            let mut cfg = load_config(&common)?;
            cfg.data.synth_train = n;
            if let Some(s) = size {
                cfg.data.size = s;
            }
            cfg.validate()?;
            let corpus = synth_corpus(&cfg.corpus_spec())?;
            io::save_corpus(&cfg.out, &corpus)?;
            println!(
                "wrote {} train, {} val, {} test samples to {}",
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                cfg.out.display()
            );
        }
        Command::Check {
            instances,
            vectors,
            seed,
        } => {
            let mut failed = 0;
            let mut outcomes = gradient_suite(instances, seed)?;
            outcomes.push(invariant_suite(vectors, seed)?);
            for o in &outcomes {
                println!("{}", o.line());
                failed += usize::from(!o.passed());
            }
            if failed > 0 {
                eprintln!("{failed} self-check(s) failed");
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
