//! "LFW1" weight files: u32 tensor count, then per tensor a u32 name length, the
//! name bytes, u32×4 dims and little-endian f32 data. Adam moments are stored as
//! `<name>#adam.m` / `<name>#adam.v` plus a scalar `adam.t` step counter.

use std::fs;
use std::path::Path;

use lidarflow_tensor::{AdamState, Dims, Tensor};

use super::params::NetworkParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFW1";
const STEP_NAME: &str = "adam.t";
/// Largest step counter an f32 holds exactly.
const MAX_STEP: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    /// One state per parameter tensor, in parameter order.
    pub adam: Option<Vec<AdamState<f32>>>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in t.dims().as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &Tensor<f32>)> =
        ck.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let step;
    if let Some(states) = &ck.adam {
        if states.len() != ck.params.len() {
            return Err(Error::Shape(format!(
                "{} optimizer states for {} parameters",
                states.len(),
                ck.params.len()
            )));
        }
        let t = states.first().map_or(0, |s| s.t);
        if states.iter().any(|s| s.t != t) || t > MAX_STEP {
            return Err(Error::Encode(format!("unencodable optimizer step {t}")));
        }
        for ((name, _), s) in ck.params.iter().zip(states) {
            entries.push((format!("{name}#adam.m"), &s.m));
            entries.push((format!("{name}#adam.v"), &s.v));
        }
        step = Tensor::scalar(t as f32);
        entries.push((STEP_NAME.to_string(), &step));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        put_tensor(&mut out, &name, t);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("missing LFW1 magic".into()));
    }
    let count = r.u32()?;
    let mut params = Vec::new();
    let mut moments: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut step = None;
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let d = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let n = d.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let n = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()));
        let Some(n) = n else {
            return Err(Error::Format(format!("tensor {name} has implausible dims {d:?}")));
        };
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(Dims::from(d), data)?;
        if name == STEP_NAME {
            step = Some(t.data().first().copied().unwrap_or(0.0) as u64);
        } else if name.contains('#') {
            moments.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let params = NetworkParams::from_named(params)?;
    let adam = match step {
        None if moments.is_empty() => None,
        None => return Err(Error::Format("optimizer moments without step counter".into())),
        Some(t) => {
            let mut states = Vec::with_capacity(params.len());
            let mut it = moments.into_iter();
            for (name, p) in params.iter() {
                let (Some((mn, m)), Some((vn, v))) = (it.next(), it.next()) else {
                    return Err(Error::Format(format!("missing optimizer state for {name}")));
                };
                if mn != format!("{name}#adam.m") || vn != format!("{name}#adam.v") {
                    return Err(Error::Format(format!("optimizer state out of order at {name}")));
                }
                if m.dims() != p.dims() || v.dims() != p.dims() {
                    return Err(Error::Format(format!("optimizer state dims differ for {name}")));
                }
                states.push(AdamState { m, v, t });
            }
            if it.next().is_some() {
                return Err(Error::Format("extra optimizer state entries".into()));
            }
            Some(states)
        }
    };
    Ok(Checkpoint { params, adam })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    #[test]
    fn golden_single_tensor() {
        let params =
            NetworkParams::from_named(vec![("a".into(), Tensor::scalar(1.0f32))]).unwrap();
        let bytes = encode_checkpoint(&Checkpoint { params, adam: None }).unwrap();
        let mut want = b"LFW1".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, b'a']);
        want.extend([1, 0, 0, 0].repeat(4));
        want.extend(1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::<f32>::init(&cfg, 2).unwrap();
        let mut adam: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| AdamState::new(t.dims()))
            .collect();
        for s in &mut adam {
            s.t = 17;
            s.m.data_mut()[0] = 0.5;
        }
        let ck = Checkpoint {
            params,
            adam: Some(adam),
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode_checkpoint(b"LFW0\0\0\0\0").is_err());
    }
}
