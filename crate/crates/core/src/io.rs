//! PGM (P5) and raw `.f32` image files, plus on-disk corpora.
//!
//! `.f32` layout: the six bytes `EVSEG1`, then u32 C, H, W (little-endian),
//! then C*H*W little-endian f32 values, channel-major.
//! 16-bit PGM samples are big-endian as the Netpbm format requires.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::metrics::LabelMap;
use crate::synth::{Corpus, SegSample};
use crate::tensor::Tensor;

pub const F32_MAGIC: &[u8; 6] = b"EVSEG1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            for &p in &self.pixels {
                out.extend_from_slice(&p.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pgm> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!(
                "not a binary PGM (magic `{}`)",
                fields[0]
            )));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PGM {what} `{s}`")))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        let maxval = num(&fields[3], "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format(format!("PGM raster truncated: need {need} bytes")))?;
        let pixels: Vec<u16> = if wide {
            raster
                .chunks(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if let Some(&p) = pixels.iter().find(|&&p| p as usize > maxval) {
            return Err(Error::Format(format!(
                "PGM sample {p} exceeds maxval {maxval}"
            )));
        }
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    fs::write(path, pgm.encode())?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    Pgm::decode(&fs::read(path)?)
}

/// 8-bit label image.
pub fn labels_to_pgm(labels: &LabelMap) -> Pgm {
    Pgm {
        width: labels.width(),
        height: labels.height(),
        maxval: 255,
        pixels: labels.labels().iter().map(|&l| l.min(255) as u16).collect(),
    }
}

pub fn pgm_to_labels(pgm: &Pgm, classes: usize) -> Result<LabelMap> {
    let labels: Vec<usize> = pgm.pixels.iter().map(|&p| p as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Format(format!("label {bad} outside 0..{classes}")));
    }
    Ok(LabelMap::new(pgm.height, pgm.width, labels))
}

/// One channel of a [0, 1] image as 16-bit samples.
pub fn plane_to_pgm16(plane: &[f64], height: usize, width: usize) -> Pgm {
    Pgm {
        width,
        height,
        maxval: 65535,
        pixels: plane
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect(),
    }
}

pub fn encode_f32(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(18 + 4 * t.len());
    out.extend_from_slice(F32_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 18 || &bytes[..6] != F32_MAGIC {
        return Err(Error::Format("missing EVSEG1 header".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let payload = &bytes[18..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "payload has {} bytes, header promises {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_f32(t)?)?;
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<Tensor> {
    decode_f32(&fs::read(path)?)
}

/// Loads an input image: `.f32` as stored, `.pgm` as gray scaled by maxval
/// and replicated to `channels`.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => read_f32(path),
        Some("pgm") => {
            let pgm = read_pgm(path)?;
            let hw = pgm.width * pgm.height;
            let scale = pgm.maxval as f64;
            Ok(Tensor::from_fn(&[channels, pgm.height, pgm.width], |i| {
                pgm.pixels[i % hw] as f64 / scale
            }))
        }
        _ => Err(Error::Format(format!(
            "unsupported image file {}",
            path.display()
        ))),
    }
}

pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: &str = "id,split,blur_width";

/// Writes `index.csv`, `<id>.f32`, `<id>_c<k>.pgm` per channel and
/// `<id>_mask.pgm` for every sample.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = fs::File::create(dir.join(INDEX_FILE))?;
    writeln!(index, "{INDEX_HEADER}")?;
    for (split, samples) in [
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("test", &corpus.test),
    ] {
        for s in samples {
            writeln!(index, "{},{split},{}", s.id, s.blur_width)?;
            write_f32(&dir.join(format!("{}.f32", s.id)), &s.image)?;
            let (c, h, w) = s.image.chw()?;
            for k in 0..c {
                write_pgm(
                    &dir.join(format!("{}_c{k}.pgm", s.id)),
                    &plane_to_pgm16(s.image.channel(k), h, w),
                )?;
            }
            write_pgm(
                &dir.join(format!("{}_mask.pgm", s.id)),
                &labels_to_pgm(s.labels()),
            )?;
        }
    }
    Ok(())
}

pub fn load_corpus(dir: &Path, classes: usize) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Format(format!(
            "{} must start with `{INDEX_HEADER}`",
            INDEX_FILE
        )));
    }
    let mut corpus = Corpus {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{} line {}: `{line}`", INDEX_FILE, n + 2));
        if cols.len() != 3 {
            return Err(bad());
        }
        let id = cols[0].to_string();
        let blur_width: f64 = cols[2].parse().map_err(|_| bad())?;
        let image = read_f32(&dir.join(format!("{id}.f32")))?;
        let labels = pgm_to_labels(&read_pgm(&dir.join(format!("{id}_mask.pgm")))?, classes)?;
        let (_, h, w) = image.chw()?;
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::Format(format!("{id}: mask and image sizes differ")));
        }
        let sample = SegSample {
            id,
            image,
            truth: GroundTruth::from_labels(&labels, classes),
            blur_width,
        };
        match cols[1] {
            "train" => corpus.train.push(sample),
            "val" => corpus.val.push(sample),
            "test" => corpus.test.push(sample),
            _ => return Err(bad()),
        }
    }
    Ok(corpus)
}
