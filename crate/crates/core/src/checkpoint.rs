//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `EVSEGCKP`, u32 version, u32 length plus
//! UTF-8 network config echo, u32 tensor count, then per tensor: u32 name
//! length, name, u32 ndim, u32 dims, f64 values.

use std::fs;
use std::path::Path;

use crate::config::{net_echo, parse_net_echo};
use crate::error::{Error, Result};
use crate::network::{NetConfig, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EVSEGCKP";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let echo = net_echo(net.config());
    put_u32(&mut out, echo.len());
    out.extend_from_slice(echo.as_bytes());
    put_u32(&mut out, net.params().len());
    for p in net.params() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

/// Rebuilds the network a checkpoint describes.
pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not an evseg checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Mismatch(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let cfg =
        parse_net_echo(&r.text()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut net = Network::new(cfg)?;
    let count = r.u32()?;
    if count != net.params().len() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {count} tensors, its config implies {}",
            net.params().len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for p in net.params() {
        let name = r.text()?;
        if name != p.name {
            return Err(Error::Mismatch(format!(
                "expected tensor `{}`, found `{name}`",
                p.name
            )));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(8 * n)?
            .chunks(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    net.set_params(values)?;
    Ok(net)
}

pub fn save(path: &Path, net: &Network) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

/// Loads a checkpoint; with `expect`, the stored architecture must match it.
pub fn load(path: &Path, expect: Option<&NetConfig>) -> Result<Network> {
    let net = decode(&fs::read(path)?)?;
    if let Some(want) = expect {
        let got = net.config();
        let same = NetConfig {
            seed: want.seed,
            ..got.clone()
        } == *want;
        if !same {
            return Err(Error::Mismatch(format!(
                "checkpoint network differs from config:\n--- checkpoint\n{}--- config\n{}",
                net_echo(got),
                net_echo(want)
            )));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::euga::EugaConfig;

    fn small() -> NetConfig {
        NetConfig {
            stage_channels: vec![4, 6, 8],
            euga: EugaConfig {
                rank: 2,
                token_stride: 4,
            },
            seed: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut net = Network::new(small()).unwrap();
        net.params_mut()[0].value.data_mut()[0] = std::f64::consts::PI;
        let back = decode(&encode(&net)).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let net = Network::new(small()).unwrap();
        let bytes = encode(&net);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(Error::Mismatch(_))));

        let dir = std::env::temp_dir().join(format!("evseg-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        save(&path, &net).unwrap();
        assert!(load(&path, Some(&small())).is_ok());
        let other = NetConfig {
            use_euga: false,
            ..small()
        };
        assert!(matches!(load(&path, Some(&other)), Err(Error::Mismatch(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
