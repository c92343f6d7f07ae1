//! Binary checkpoint: parameters, freeze mask and run metadata.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! "QIEM" | version | param count
//! per param (path order): path len | UTF-8 path | rank | dims... | f32 LE payload
//! freeze mask: one byte (0/1) per param, same order
//! metadata: byte length | UTF-8 `key=value` lines
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{self, Reader, Writer, MAGIC};
use crate::error::{Error, Result};
use crate::params::{FreezeMask, ParamStore};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub freeze: FreezeMask,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new<T: Real>(params: &ParamStore<T>, freeze: FreezeMask) -> Result<Self> {
        freeze.check(params)?;
        Ok(Checkpoint {
            params: params.cast(),
            freeze,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.len_u32(self.params.len());
        for (path, t) in self.params.iter() {
            w.str(path);
            w.len_u32(t.rank());
            for &d in t.shape() {
                w.len_u32(d);
            }
            for &v in t.data() {
                w.f32(v);
            }
        }
        for &f in self.freeze.flags() {
            w.bytes(&[f as u8]);
        }
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.str(&meta);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(FORMAT_VERSION)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let at = r.offset();
            let path = r.str()?;
            if last.as_deref().is_some_and(|l| l >= path.as_str()) {
                return Err(Error::Format {
                    offset: at,
                    message: format!("parameter {path} out of lexicographic order"),
                });
            }
            let rank = r.u32()? as usize;
            if rank == 0 {
                return r.fail(format!("parameter {path} has rank 0"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            if n == 0 {
                return r.fail(format!("parameter {path} has an empty shape {shape:?}"));
            }
            if r.remaining() / 4 < n {
                return r.fail(format!("truncated payload for {path}"));
            }
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            params.insert(path.clone(), Tensor::new(shape, data)?)?;
            last = Some(path);
        }
        let mask = r.take(count)?;
        let mut flags = Vec::with_capacity(count);
        for (i, &b) in mask.iter().enumerate() {
            match b {
                0 => flags.push(false),
                1 => flags.push(true),
                _ => {
                    return Err(Error::Format {
                        offset: r.offset() - count + i,
                        message: format!("freeze flag byte {b} is not 0 or 1"),
                    })
                }
            }
        }
        let meta_text = r.str()?;
        if r.remaining() != 0 {
            return r.fail("trailing bytes after metadata");
        }
        let meta = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Checkpoint {
            params,
            freeze: FreezeMask::from_flags(flags),
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}
