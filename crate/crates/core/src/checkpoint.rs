//! Binary checkpoint container for [`MlpPolicy`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "NCGMM1"                 6-byte magic; the trailing digit is the format version
//! u32 meta_len             length of the metadata block
//! meta_len bytes           UTF-8 `key=value` lines (activation, init, seed, epoch, dev_loss)
//! u32 n_layers
//! n_layers x (u32, u32)    (out, in) per layer
//! u32 nu
//! nu x f64                 u_min
//! nu x f64                 u_max
//! u64 n_params
//! n_params x f64           per layer: weight row-major, then bias
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::io;
use crate::linalg::Matrix;
use crate::policy::{Dense, MlpPolicy, MlpShape, Policy};

const MAGIC_PREFIX: &[u8; 5] = b"NCGMM";
const VERSION: u8 = b'1';
pub const INIT_SCHEME: &str = "uniform-fan-avg";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: Option<usize>,
    pub dev_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: MlpPolicy,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(policy: MlpPolicy, meta: CheckpointMeta) -> Self {
        Self { policy, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.policy;
        let mut meta = format!("activation={}\ninit={}\nseed={}\n", p.activation().name(), INIT_SCHEME, self.meta.seed);
        if let Some(e) = self.meta.epoch {
            meta.push_str(&format!("epoch={e}\n"));
        }
        if let Some(l) = self.meta.dev_loss {
            meta.push_str(&format!("dev_loss={l:?}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let shapes = p.layer_shapes();
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for (o, i) in &shapes {
            out.extend_from_slice(&(*o as u32).to_le_bytes());
            out.extend_from_slice(&(*i as u32).to_le_bytes());
        }
        out.extend_from_slice(&(p.u_min().len() as u32).to_le_bytes());
        for v in p.u_min().iter().chain(p.u_max()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let params = p.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(6)?;
        if &magic[..5] != MAGIC_PREFIX {
            return Err(CheckpointError::Corrupt("missing NCGMM magic".into()));
        }
        if magic[5] != VERSION {
            return Err(CheckpointError::Version {
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: "NCGMM1".into(),
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
        let meta_map: BTreeMap<&str, &str> = meta_text
            .lines()
            .map(|l| l.split_once('=').ok_or_else(|| CheckpointError::Corrupt(format!("bad metadata line {l:?}"))))
            .collect::<Result<_, _>>()?;
        match meta_map.get("activation") {
            Some(&"gelu") => {}
            other => return Err(CheckpointError::Corrupt(format!("unknown activation {other:?}"))),
        }
        let parse_err = |k: &str| CheckpointError::Corrupt(format!("bad metadata value for {k}"));
        let meta = CheckpointMeta {
            seed: meta_map.get("seed").ok_or_else(|| parse_err("seed"))?.parse().map_err(|_| parse_err("seed"))?,
            epoch: meta_map.get("epoch").map(|v| v.parse().map_err(|_| parse_err("epoch"))).transpose()?,
            dev_loss: meta_map.get("dev_loss").map(|v| v.parse().map_err(|_| parse_err("dev_loss"))).transpose()?,
        };

        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(CheckpointError::Corrupt(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((r.u32()? as usize, r.u32()? as usize));
        }
        let nu = r.u32()? as usize;
        let u_min = r.f64s(nu)?;
        let u_max = r.f64s(nu)?;
        let n_params = r.u64()? as usize;
        let expected: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
        if n_params != expected {
            return Err(CheckpointError::Corrupt(format!(
                "parameter count {n_params} does not match shape table ({expected})"
            )));
        }
        let params = r.f64s(n_params)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut offset = 0;
        let mut layers = Vec::with_capacity(n_layers);
        for &(o, i) in &shapes {
            let weight = Matrix::from_row_major(o, i, params[offset..offset + o * i].to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            offset += o * i;
            let bias = params[offset..offset + o].to_vec();
            offset += o;
            layers.push(Dense { weight, bias });
        }
        let policy =
            MlpPolicy::from_layers(layers, u_min, u_max).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(Self { policy, meta })
    }

    /// Fails with a shape error unless the stored network has exactly `shape`.
    pub fn expect_shape(&self, shape: &MlpShape) -> Result<(), CheckpointError> {
        let found = self.policy.layer_shapes();
        let expected = shape.layer_shapes();
        if found != expected {
            return Err(CheckpointError::Shape { expected: format!("{expected:?}"), found: format!("{found:?}") });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
