//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and unparseable
//! values are errors carrying the 1-based line number. `seed` drives the
//! network init, the corpus, and the training shuffle.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::NetConfig;
use crate::progressive::ProgressiveConfig;
use crate::synth::{CorpusSpec, NoiseSpec};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "EVSEG_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory written by `synth`; when absent a corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synth_train: usize,
    pub size: usize,
    pub blur_min: f64,
    pub blur_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synth_train: 64,
            size: 64,
            blur_min: 0.5,
            blur_max: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub progressive: ProgressiveConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub noise: Option<NoiseSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 7,
            out: PathBuf::from("runs"),
            net: NetConfig::default(),
            loss: LossConfig::default(),
            progressive: ProgressiveConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            noise: None,
        };
        cfg.sync();
        cfg
    }
}

fn parse<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        detail: format!(
            "{key}: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ),
    })
}

fn parse_with<T>(
    value: &str,
    line: usize,
    key: &str,
    f: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<T> {
    f(value).map_err(|detail| Error::Config {
        line,
        detail: format!("{key}: {detail}"),
    })
}

impl RunConfig {
    /// Copies the shared seed and epoch count into the member configs.
    pub fn sync(&mut self) {
        self.net.seed = self.seed;
        self.train.seed = self.seed;
        self.loss.total_epochs = self.train.epochs;
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            blur_range: (self.data.blur_min, self.data.blur_max),
            ..CorpusSpec::with_train(self.data.synth_train, self.data.size, self.seed)
        }
    }

    /// Applies `key = value` on top of the current settings.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let noise = || NoiseSpec {
            mean: 0.0,
            sigma: 0.4,
            seed: 0,
        };
        match key {
            "seed" => self.seed = parse(value, line, key)?,
            "out" => self.out = PathBuf::from(value),
            "net.in_channels" => self.net.in_channels = parse(value, line, key)?,
            "net.classes" => self.net.classes = parse(value, line, key)?,
            "net.stage_channels" => {
                self.net.stage_channels = value
                    .split(',')
                    .map(|v| parse(v.trim(), line, key))
                    .collect::<Result<_>>()?
            }
            "net.kan_grid" => self.net.kan_grid = parse(value, line, key)?,
            "net.kan_spline_order" => self.net.kan_spline_order = parse(value, line, key)?,
            "net.kan_range" => self.net.kan_range = parse(value, line, key)?,
            "net.use_euga" => self.net.use_euga = parse(value, line, key)?,
            "net.generator" => self.net.generator = parse_with(value, line, key, str::parse)?,
            "euga.rank" => self.net.euga.rank = parse(value, line, key)?,
            "euga.token_stride" => self.net.euga.token_stride = parse(value, line, key)?,
            "loss.lambda2" => self.loss.lambda2 = parse(value, line, key)?,
            "loss.kl_anneal_factor" => self.loss.kl_anneal_factor = parse(value, line, key)?,
            "loss.eps_log" => self.loss.eps_log = parse(value, line, key)?,
            "loss.uncertainty_term" => {
                self.loss.uncertainty_term = parse_with(value, line, key, str::parse)?
            }
            "progressive.epsilon" => self.progressive.epsilon = parse(value, line, key)?,
            "progressive.max_iters" => self.progressive.max_iters = parse(value, line, key)?,
            "train.epochs" => self.train.epochs = parse(value, line, key)?,
            "train.batch_size" => self.train.batch_size = parse(value, line, key)?,
            "train.lr" => self.train.lr = parse(value, line, key)?,
            "train.guidance_iters" => self.train.guidance_iters = parse(value, line, key)?,
            "train.unroll_iters" => self.train.unroll_iters = parse(value, line, key)?,
            "train.threads" => self.train.threads = parse(value, line, key)?,
            "data.corpus" => self.data.corpus = Some(PathBuf::from(value)),
            "data.synth" => self.data.synth_train = parse(value, line, key)?,
            "data.size" => self.data.size = parse(value, line, key)?,
            "data.blur_min" => self.data.blur_min = parse(value, line, key)?,
            "data.blur_max" => self.data.blur_max = parse(value, line, key)?,
            "noise.sigma" => self.noise.get_or_insert_with(noise).sigma = parse(value, line, key)?,
            "noise.mean" => self.noise.get_or_insert_with(noise).mean = parse(value, line, key)?,
            "noise.seed" => self.noise.get_or_insert_with(noise).seed = parse(value, line, key)?,
            _ => {
                return Err(Error::Config {
                    line,
                    detail: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                detail: format!("expected `key = value`, got `{content}`"),
            })?;
            self.set(key.trim(), value.trim(), line)?;
        }
        self.sync();
        self.validate()
    }

    /// Replaces the seed with `EVSEG_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config {
                line: 0,
                detail: format!("{SEED_ENV}: cannot parse `{v}` as a seed"),
            })?;
            self.sync();
        }
        Ok(())
    }

    /// Checks every member bound; `line` is 0 for these cross-field errors.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Error::Config { line: 0, detail };
        self.net.validate().map_err(fail)?;
        self.loss.validate().map_err(fail)?;
        self.progressive.validate().map_err(fail)?;
        self.train.validate().map_err(fail)?;
        if let Some(n) = &self.noise {
            n.validate().map_err(fail)?;
        }
        let d = &self.data;
        if d.size < 16 || d.size % 4 != 0 {
            return Err(fail(format!(
                "data.size must be a multiple of 4 and >= 16, got {}",
                d.size
            )));
        }
        if d.synth_train == 0 {
            return Err(fail("data.synth must be >= 1".into()));
        }
        if !(0.0 <= d.blur_min && d.blur_min <= d.blur_max) {
            return Err(fail(format!(
                "need 0 <= data.blur_min <= data.blur_max, got {} and {}",
                d.blur_min, d.blur_max
            )));
        }
        if let Some(p) = &d.corpus {
            if !p.is_dir() {
                return Err(fail(format!(
                    "data.corpus `{}` is not a directory",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Config lines describing a network, as echoed into checkpoints.
pub fn net_echo(net: &NetConfig) -> String {
    let mut s = String::new();
    let channels: Vec<String> = net.stage_channels.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(s, "seed = {}", net.seed);
    let _ = writeln!(s, "net.in_channels = {}", net.in_channels);
    let _ = writeln!(s, "net.classes = {}", net.classes);
    let _ = writeln!(s, "net.stage_channels = {}", channels.join(","));
    let _ = writeln!(s, "net.kan_grid = {}", net.kan_grid);
    let _ = writeln!(s, "net.kan_spline_order = {}", net.kan_spline_order);
    let _ = writeln!(s, "net.kan_range = {:?}", net.kan_range);
    let _ = writeln!(s, "net.use_euga = {}", net.use_euga);
    let _ = writeln!(s, "net.generator = {}", net.generator);
    let _ = writeln!(s, "euga.rank = {}", net.euga.rank);
    let _ = writeln!(s, "euga.token_stride = {}", net.euga.token_stride);
    s
}

/// Inverse of [`net_echo`].
pub fn parse_net_echo(text: &str) -> Result<NetConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            detail: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        if !(key == "seed" || key.starts_with("net.") || key.starts_with("euga.")) {
            return Err(Error::Config {
                line: i + 1,
                detail: format!("`{key}` is not a network key"),
            });
        }
        cfg.set(key, value.trim(), i + 1)?;
    }
    cfg.sync();
    cfg.net
        .validate()
        .map_err(|detail| Error::Config { line: 0, detail })?;
    Ok(cfg.net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::EvidenceGenerator;
    use crate::losses::UncertaintyTerm;

    #[test]
    fn parses_sections_and_comments() {
        let text = "# run\nseed = 11\nnet.use_euga=false\nnet.generator = exp  # baseline\n\
                    loss.uncertainty_term = literal\ntrain.epochs = 5\nnoise.sigma = 0.2\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.net.seed, 11);
        assert!(!cfg.net.use_euga);
        assert_eq!(cfg.net.generator, EvidenceGenerator::Exp);
        assert_eq!(cfg.loss.uncertainty_term, UncertaintyTerm::Literal);
        assert_eq!(cfg.loss.total_epochs, 5);
        assert_eq!(cfg.noise.unwrap().sigma, 0.2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("seed = 1\n\nnet.bogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        let e = RunConfig::parse("train.lr = fast\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = RunConfig::parse("seed 4\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = RunConfig::parse("noise.sigma = 0.9\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 0, .. }));
        assert!(RunConfig::parse("data.corpus = /definitely/not/here\n").is_err());
        assert!(RunConfig::parse("net.stage_channels = 8,16\n").is_err());
    }

    #[test]
    fn net_echo_roundtrip() {
        let net = NetConfig {
            stage_channels: vec![8, 12, 20],
            use_euga: false,
            generator: EvidenceGenerator::Exp,
            kan_range: 2.5,
            seed: 99,
            ..NetConfig::default()
        };
        assert_eq!(parse_net_echo(&net_echo(&net)).unwrap(), net);
        assert!(parse_net_echo("train.lr = 1\n").is_err());
    }
}
