//! Versioned little-endian checkpoint: header, config snapshot, stub seeds,
//! step counter, named parameter blobs and optional Adam moments.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"M2RXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("checkpoint truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or(Error::Parse {
                offset: at,
                msg: format!("implausible length {n} for {what}"),
            })
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(8), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(FORMAT_VERSION);
        w.bytes(self.config.to_text().as_bytes());
        let m = &self.config.model;
        for seed in [m.init_seed, m.semantic_seed, m.proxy_seed] {
            w.u64(seed);
        }
        w.u64(self.step);
        w.u64(self.params.len() as u64);
        for p in self.params.iter() {
            w.bytes(p.name.as_bytes());
            w.u8(u8::from(p.requires_grad));
            w.u64(p.value.shape().len() as u64);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                w.u64(adam.step);
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    w.f64s(m);
                    w.f64s(v);
                }
            }
        }
        w.0
    }

    /// Decodes a checkpoint. Magic and version are checked before anything
    /// else is read.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(Error::Parse {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let config = RunConfig::parse(&r.string("config")?)?;
        let seeds_at = r.pos;
        let seeds = [r.u64("init seed")?, r.u64("semantic seed")?, r.u64("proxy seed")?];
        let m = &config.model;
        if seeds != [m.init_seed, m.semantic_seed, m.proxy_seed] {
            return Err(Error::Parse {
                offset: seeds_at,
                msg: "header seeds disagree with the stored config".into(),
            });
        }
        let step = r.u64("step")?;
        let count = r.len("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let requires_grad = r.u8("trainable flag")? != 0;
            let ndim = r.len("rank")?;
            let shape = (0..ndim).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f64s(numel, &name)?;
            params.insert(name, Tensor::new(shape, data)?, requires_grad)?;
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            _ => {
                let mut adam = Adam::new(&params);
                adam.step = r.u64("optimizer step")?;
                for (i, p) in params.iter().enumerate() {
                    adam.m[i] = r.f64s(p.value.numel(), "first moment")?;
                    adam.v[i] = r.f64s(p.value.numel(), "second moment")?;
                }
                Some(adam)
            }
        };
        if r.pos != buf.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
