//! Binary checkpoints: model configuration, parameters and momentum state.
//!
//! Layout (little-endian): `"MSCK"`, u32 version, u64 iteration, u32 length +
//! JSON model config, u32 parameter count, then per parameter (in name
//! order) u32 name length, UTF-8 name, u32 rows, u32 cols, `rows·cols` f64
//! values and `rows·cols` f64 velocities. Values are stored bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, RealMatrix};

const MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub iteration: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model)?;
        put_len(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        put_len(&mut out, self.params.len())?;
        for (name, value) in self.params.values() {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, value.rows())?;
            put_len(&mut out, value.cols())?;
            for x in value.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            let vel = self.params.velocity(name).expect("name from store");
            for x in vel.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let iteration = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos;
        let model: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Format {
                offset: cfg_at,
                msg: format!("model config: {e}"),
            })?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let value = RealMatrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
            let vel = RealMatrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
            params
                .insert(name.clone(), value)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: format!("duplicate parameter {name:?}"),
                })?;
            *params.velocity_mut(&name)? = vel;
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            model,
            iteration,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| contract("checkpoint field exceeds u32"))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: "truncated checkpoint".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.pos,
            msg: "parameter size overflows".into(),
        })?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
