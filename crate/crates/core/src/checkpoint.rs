//! Binary network checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "BWN1" | u32 version | u32 len | JSON NetworkConfig
//! u32 num_params
//! per parameter: u32 name_len | name | u32 rank | u32 dims[rank] | f64 values
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::net::{NetError, Network, NetworkConfig};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BWN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(net.config()).expect("network config serializes");
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, net.params().len());
    for (_, p) in net.params().iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Format("bad magic, expected BWN1".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let len = r.u32("config length")?;
    let config: NetworkConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    let mut net = Network::build(&config, &mut stream(0, Stream::Init))?;
    let count = r.u32("parameter count")?;
    if count != net.params().len() {
        return Err(CheckpointError::Format(format!(
            "{count} parameters stored, configuration defines {}",
            net.params().len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("shape")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let id = net
            .params()
            .id_of(&name)
            .ok_or_else(|| CheckpointError::Format(format!("unknown parameter {name:?}")))?;
        let value = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        net.params_mut()
            .set_value(id, value)
            .map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(net)
}

pub fn save(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetNoise, NormVariant, Site};

    fn net() -> Network {
        let cfg = NetworkConfig {
            norm_variant: NormVariant::Bwrfn,
            insertion_points: vec![Site::PreConv, Site::L2],
            widths: vec![4, 6],
            embedding_dim: 5,
            num_speakers: 3,
            n_freq: 8,
            ..Default::default()
        };
        Network::build(&cfg, &mut stream(12, Stream::Init)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = net();
        let bytes = encode(&a);
        let b = decode(&bytes).unwrap();
        assert_eq!(encode(&b), bytes);
        let x = Tensor::from_fn(&[2, 1, 8, 9], |i| (i as f64 * 0.37).sin());
        let (la, lb) = (a.logits(&x, NetNoise::Mean).unwrap(), b.logits(&x, NetNoise::Mean).unwrap());
        assert!(la.data().iter().zip(lb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&net());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(CheckpointError::Format(_))));
    }
}
