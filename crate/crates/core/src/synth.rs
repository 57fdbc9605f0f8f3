//! Synthetic blob segmentation corpus and the Gaussian noise protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::metrics::LabelMap;
use crate::tensor::Tensor;

pub const MIN_FG_FRACTION: f64 = 0.05;
pub const MAX_FG_FRACTION: f64 = 0.6;
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.1, 0.4);

/// Image plus labels. `image` is 3 x H x W in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor,
    pub truth: GroundTruth,
    pub blur_width: f64,
}

impl SegSample {
    pub fn labels(&self) -> &LabelMap {
        self.truth.labels()
    }

    pub fn mask(&self) -> &Tensor {
        self.truth.onehot()
    }
}

/// Gaussian blur with edge clamping; `sigma == 0` is the identity.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[r * w + clampi(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let size = h.min(w) as f64;
    let blobs = rng.random_range(1..=3);
    let mut field = vec![0.0; h * w];
    for _ in 0..blobs {
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let parts = rng.random_range(1..=3);
        for _ in 0..parts {
            let oy = cy + rng.random_range(-0.1..0.1) * size;
            let ox = cx + rng.random_range(-0.1..0.1) * size;
            let s = rng.random_range(0.06..0.14) * size;
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - oy).powi(2) + (c as f64 - ox).powi(2);
                    field[r * w + c] += (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
    }
    field.iter().map(|&f| f > 0.5).collect()
}

/// Bright foreground blobs over a darker background, blurred by `blur_width`
/// (Gaussian sigma in pixels) and replicated to three channels.
pub fn gen_blob_sample(
    seed: u64,
    height: usize,
    width: usize,
    blur_width: f64,
) -> Result<SegSample> {
    if height < 16 || width < 16 {
        return Err(Error::Contract(format!(
            "sample must be at least 16 x 16, got {height} x {width}"
        )));
    }
    if !(blur_width >= 0.0) {
        return Err(Error::Contract(format!(
            "blur width must be >= 0, got {blur_width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = loop {
        let m = blob_mask(&mut rng, height, width);
        let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            break m;
        }
    };
    let bg_level = rng.random_range(0.1..0.4);
    let fg_level = rng.random_range(0.6..0.9);
    let sharp: Vec<f64> = fg
        .iter()
        .map(|&f| if f { fg_level } else { bg_level })
        .collect();
    let gray = gaussian_blur(&sharp, height, width, blur_width);
    let hw = height * width;
    let image = Tensor::from_fn(&[3, height, width], |i| gray[i % hw].clamp(0.0, 1.0));
    let labels = LabelMap::new(height, width, fg.iter().map(|&f| f as usize).collect());
    Ok(SegSample {
        id: format!("blob-{seed}"),
        image,
        truth: GroundTruth::from_labels(&labels, 2),
        blur_width,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub mean: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec {
            mean: 0.0,
            sigma,
            seed,
        };
        spec.validate().map_err(Error::Contract)?;
        Ok(spec)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let (lo, hi) = NOISE_SIGMA_RANGE;
        if !(lo..=hi).contains(&self.sigma) {
            return Err(format!(
                "noise sigma must lie in [{lo}, {hi}], got {}",
                self.sigma
            ));
        }
        if !self.mean.is_finite() {
            return Err("noise mean must be finite".into());
        }
        Ok(())
    }
}

/// The additive perturbation `add_noise` applies before clamping.
pub fn noise_field(spec: &NoiseSpec, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(spec.mean, spec.sigma).expect("validated sigma");
    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
}

/// `clamp(image + N(mean, sigma^2), 0, 1)`; labels untouched.
pub fn add_noise(sample: &SegSample, spec: &NoiseSpec) -> SegSample {
    let noise = noise_field(spec, sample.image.shape());
    let mut out = sample.clone();
    for (x, n) in out.image.data_mut().iter_mut().zip(noise.data()) {
        *x = (*x + n).clamp(0.0, 1.0);
    }
    out
}

/// Deterministic 64-bit mix used to derive per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    /// Blur widths are drawn uniformly from this range per sample.
    pub blur_range: (f64, f64),
    pub seed: u64,
}

impl CorpusSpec {
    /// `n` training images with quarter-size validation and test splits.
    pub fn with_train(n: usize, size: usize, seed: u64) -> Self {
        CorpusSpec {
            train: n,
            val: (n / 4).max(1),
            test: (n / 4).max(1),
            size,
            blur_range: (0.5, 2.0),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let (blo, bhi) = spec.blur_range;
    if !(0.0 <= blo && blo <= bhi) {
        return Err(Error::Contract(format!("bad blur range {blo}..{bhi}")));
    }
    let split = |name: &str, tag: u64, n: usize| -> Result<Vec<SegSample>> {
        (0..n)
            .map(|i| {
                let s = mix_seed(spec.seed, tag << 32 | i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let blur = if bhi > blo {
                    rng.random_range(blo..bhi)
                } else {
                    blo
                };
                let mut sample = gen_blob_sample(s, spec.size, spec.size, blur)?;
                sample.id = format!("{name}-{i:04}");
                Ok(sample)
            })
            .collect()
    };
    Ok(Corpus {
        train: split("train", 1, spec.train)?,
        val: split("val", 2, spec.val)?,
        test: split("test", 3, spec.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = gen_blob_sample(11, 32, 32, 1.0).unwrap();
        let b = gen_blob_sample(11, 32, 32, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, gen_blob_sample(12, 32, 32, 1.0).unwrap().image);
    }

    #[test]
    fn zero_blur_gives_hard_step_on_boundary() {
        let s = gen_blob_sample(3, 32, 32, 0.0).unwrap();
        let labels = s.labels().labels();
        let gray = s.image.channel(0);
        let fg: Vec<f64> = gray
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(g, _)| *g)
            .collect();
        let bg: Vec<f64> = gray
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(g, _)| *g)
            .collect();
        assert!(fg.iter().all(|&v| v == fg[0]));
        assert!(bg.iter().all(|&v| v == bg[0]));
        assert!((fg[0] - bg[0]).abs() >= 0.2);
    }

    #[test]
    fn channels_are_replicated_and_in_range() {
        let s = gen_blob_sample(5, 16, 24, 1.5).unwrap();
        assert_eq!(s.image.shape(), &[3, 16, 24]);
        assert_eq!(s.image.channel(0), s.image.channel(2));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(gen_blob_sample(5, 8, 24, 1.0).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let flat = vec![0.3; 20 * 10];
        assert!(gaussian_blur(&flat, 20, 10, 2.0)
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-15));
        let mut spike = vec![0.0; 21 * 21];
        spike[10 * 21 + 10] = 1.0;
        let b = gaussian_blur(&spike, 21, 21, 1.5);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_protocol() {
        let s = gen_blob_sample(9, 32, 32, 1.0).unwrap();
        let spec = NoiseSpec::new(0.3, 4).unwrap();
        let n = add_noise(&s, &spec);
        assert_eq!(n, add_noise(&s, &spec));
        assert_eq!(n.truth, s.truth);
        let field = noise_field(&spec, s.image.shape());
        for ((o, x), z) in n.image.data().iter().zip(s.image.data()).zip(field.data()) {
            assert_eq!(*o, (x + z).clamp(0.0, 1.0));
        }
        assert!(NoiseSpec::new(0.05, 0).is_err());
        assert!(NoiseSpec::new(0.5, 0).is_err());
    }

    #[test]
    fn corpus_ids_are_disjoint_and_stable() {
        let spec = CorpusSpec::with_train(8, 16, 21);
        let a = synth_corpus(&spec).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 2, 2));
        let mut ids: Vec<&str> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        assert_eq!(a, synth_corpus(&spec).unwrap());
        assert_ne!(a.train[0].image, a.val[0].image);
    }
}
