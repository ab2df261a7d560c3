//! Single-file checkpoint container.
//!
//! Layout: magic `OGDC`, `u32` version, `u32` section count, then one
//! table entry per section (`u16` name length, name bytes, `u64` offset
//! from the start of the file, `u64` length), then the section payloads.
//! All integers are little-endian; tensors use the tensor binary format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::net::VaeNet;
use super::train::{Model, Quant};
use crate::codebook::CodebookSet;
use crate::error::{Error, Result};
use crate::ogdr::OgdrState;
use crate::tensor::{AdamState, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"OGDC";
pub const CKPT_VERSION: u32 = 1;

/// Named byte sections in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.push((name.to_string(), bytes));
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Format(format!("checkpoint has no {name:?} section")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let table_len: usize = self.sections.iter().map(|(n, _)| 2 + n.len() + 16).sum();
        let mut offset = (12 + table_len) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, bytes) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, bytes) in &self.sections {
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut table = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            table.push((name, r.u64()? as usize, r.u64()? as usize));
        }
        let sections = table
            .into_iter()
            .map(|(name, off, len)| {
                let body = off
                    .checked_add(len)
                    .and_then(|end| bytes.get(off..end))
                    .ok_or_else(|| Error::Format(format!("section {name:?} is truncated")))?;
                Ok((name, body.to_vec()))
            })
            .collect::<Result<_>>()?;
        Ok(Container { sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor<f32>>> {
        let n = self.u32()?;
        (0..n)
            .map(|_| {
                let (t, used) = Tensor::from_bytes(&self.bytes[self.pos..])?;
                self.pos += used;
                Ok(t)
            })
            .collect()
    }

    fn finish(&self, section: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("trailing bytes in {section:?} section")));
        }
        Ok(())
    }
}

fn tensors_bytes<'a>(ts: impl ExactSizeIterator<Item = &'a Tensor<f32>>) -> Vec<u8> {
    let mut out = (ts.len() as u32).to_le_bytes().to_vec();
    for t in ts {
        out.extend(t.to_bytes());
    }
    out
}

/// Complete training state at a step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of optimizer steps already applied.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.add("config", self.config.to_json().into_bytes());
        c.add("config_hash", self.config.hash().into_bytes());
        c.add("step", self.step.to_le_bytes().to_vec());

        let mut rng = self.rng.get_seed().to_vec();
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        c.add("rng", rng);

        c.add("net", tensors_bytes(self.model.net.params().iter()));
        let organizer: Vec<&Tensor<f32>> = match &self.model.quant {
            Quant::Organized(st) => std::iter::once(&st.w).chain(st.up.as_ref()).collect(),
            Quant::Codebook(_) => Vec::new(),
        };
        c.add("organizer", tensors_bytes(organizer.into_iter()));
        c.add("codebook", self.model.codebook().to_bytes());

        let mut adam = self.adam.step.to_le_bytes().to_vec();
        adam.extend(tensors_bytes(self.adam.m.iter()));
        adam.extend(tensors_bytes(self.adam.v.iter()));
        c.add("adam", adam);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let text = std::str::from_utf8(c.get("config")?)
            .map_err(|_| Error::Format("config section is not UTF-8".into()))?;
        let config = TrainConfig::from_json(text)?;
        if c.get("config_hash")? != config.hash().as_bytes() {
            return Err(Error::Format("config hash does not match config".into()));
        }
        let mut r = Reader::new(c.get("step")?);
        let step = r.u64()?;
        r.finish("step")?;

        let mut r = Reader::new(c.get("rng")?);
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        r.finish("rng")?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut r = Reader::new(c.get("net")?);
        let net = VaeNet::from_params(config.hidden, config.c, r.tensors()?)?;
        r.finish("net")?;
        let (cb, used) = CodebookSet::from_bytes(c.get("codebook")?)?;
        if used != c.get("codebook")?.len() {
            return Err(Error::Format("trailing bytes in \"codebook\" section".into()));
        }
        if cb.layout() != &config.layout()? {
            return Err(Error::Format("codebook layout does not match config".into()));
        }
        let mut r = Reader::new(c.get("organizer")?);
        let mut org = r.tensors()?.into_iter();
        r.finish("organizer")?;
        let quant = match (org.next(), org.next()) {
            (Some(w), up) => {
                let ocfg = config.ogdr_config()?;
                if w.shape() != [ocfg.expanded(), ocfg.c] {
                    return Err(Error::shape("checkpoint W", w.shape(), &[ocfg.expanded(), ocfg.c]));
                }
                Quant::Organized(OgdrState { w, up, cb, step })
            }
            (None, _) => Quant::Codebook(cb),
        };
        let model = Model { net, quant };

        let mut r = Reader::new(c.get("adam")?);
        let adam_step = r.u64()?;
        let m = r.tensors()?;
        let v = r.tensors()?;
        r.finish("adam")?;
        let params = model.params();
        let fits = |ts: &[Tensor<f32>]| {
            ts.len() == params.len() && ts.iter().zip(&params).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        let mut adam = AdamState::new(&params);
        adam.m = m;
        adam.v = v;
        adam.step = adam_step;
        Ok(Checkpoint {
            config,
            step,
            rng,
            model,
            adam,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
