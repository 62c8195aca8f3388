//! `FORC` checkpoints: a magic, a version and tagged sections.
//!
//! ```text
//! "FORC" | version u32 | sections u32 | { tag [u8; 4] | len u64 | payload }*
//! HCFG  head configuration (JSON)
//! PARM  count u32 | { name | trainable u8 | rank u32 | dims u64* | f64* }*
//! ADAM  t u64 | { m f64* | v f64* } per parameter, in PARM order
//! RNGS  root seed u64 | next epoch u64
//! CDIG  32-byte digest of the training configuration
//! ```
//!
//! Values are stored as `f64`, so a round trip is bit-exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{init_sum_clip, ClipLinears, HeadConfig, LinearWeights, SumClipParams};
use crate::io::{create, open, write_all, BinReader, FORMAT_VERSION};
use crate::numerics::{AdamConfig, AdamState, Tensor};
use crate::rng::SeedTree;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FORC";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: SumClipParams,
    pub adam: AdamState,
    pub seed: u64,
    pub next_epoch: usize,
    pub digest: [u8; 32],
}

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.params.store;
        let hcfg = serde_json::to_vec(&self.params.config).map_err(|e| Error::Contract(e.to_string()))?;

        let mut parm = Vec::new();
        put_u32(&mut parm, store.len() as u32);
        for (_, p) in store.iter() {
            put_u32(&mut parm, p.name.len() as u32);
            parm.extend_from_slice(p.name.as_bytes());
            parm.push(p.trainable as u8);
            put_u32(&mut parm, p.tensor.shape().len() as u32);
            for &d in p.tensor.shape() {
                put_u64(&mut parm, d as u64);
            }
            put_f64s(&mut parm, p.tensor.data());
        }

        let mut adam = Vec::new();
        put_u64(&mut adam, self.adam.t);
        let c = &self.adam.config;
        put_f64s(&mut adam, &[c.beta1, c.beta2, c.eps, c.weight_decay]);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut adam, m.data());
            put_f64s(&mut adam, v.data());
        }

        let mut rngs = Vec::new();
        put_u64(&mut rngs, self.seed);
        put_u64(&mut rngs, self.next_epoch as u64);

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, 5);
        section(&mut out, b"HCFG", &hcfg);
        section(&mut out, b"PARM", &parm);
        section(&mut out, b"ADAM", &adam);
        section(&mut out, b"RNGS", &rngs);
        section(&mut out, b"CDIG", &self.digest);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut w = create(path)?;
        write_all(&mut w, path, &bytes)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        open(path)?.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&raw, path)
    }

    pub fn from_bytes(raw: &[u8], path: &Path) -> Result<Self> {
        let fmt = |d: &str| Error::format(path, d.to_string());
        let mut r = BinReader::new(raw, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let n = r.u32("section count")?;
        let mut sections: HashMap<[u8; 4], Vec<u8>> = HashMap::new();
        for _ in 0..n {
            let tag = r.bytes::<4>("section tag")?;
            let len = r.u64("section length")? as usize;
            if len > raw.len() {
                return Err(fmt("section length exceeds file size"));
            }
            sections.insert(tag, r.vec(len, "section payload")?);
        }
        r.expect_eof()?;
        let take = |tag: &[u8; 4]| {
            sections
                .get(tag)
                .ok_or_else(|| fmt(&format!("missing section {}", String::from_utf8_lossy(tag))))
        };

        let config: HeadConfig =
            serde_json::from_slice(take(b"HCFG")?).map_err(|e| fmt(&format!("head config: {e}")))?;

        let mut pr = BinReader::new(take(b"PARM")?.as_slice(), path);
        let count = pr.u32("parameter count")? as usize;
        let mut tensors: Vec<(String, bool, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let len = pr.u32("name length")? as usize;
            let name = pr.vec(len, "name")?;
            let name = String::from_utf8(name).map_err(|_| fmt("parameter name is not UTF-8"))?;
            let trainable = pr.bytes::<1>("trainable flag")?[0] != 0;
            let rank = pr.u32("rank")? as usize;
            let shape = (0..rank).map(|_| pr.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| pr.bytes::<8>("values").map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| fmt(&e.to_string()))?;
            tensors.push((name, trainable, t));
        }
        pr.expect_eof()?;
        let params = rebuild(&config, &tensors).map_err(|e| fmt(&format!("parameters: {e}")))?;

        let mut ar = BinReader::new(take(b"ADAM")?.as_slice(), path);
        let t = ar.u64("adam step")?;
        let mut f = || ar.bytes::<8>("adam state").map(f64::from_le_bytes);
        let adam_cfg = AdamConfig {
            beta1: f()?,
            beta2: f()?,
            eps: f()?,
            weight_decay: f()?,
        };
        let mut adam = AdamState::new(&params.store, adam_cfg);
        adam.t = t;
        for (m, v) in adam.m.iter_mut().zip(adam.v.iter_mut()) {
            for x in m.data_mut() {
                *x = f()?;
            }
            for x in v.data_mut() {
                *x = f()?;
            }
        }
        ar.expect_eof()?;

        let mut rr = BinReader::new(take(b"RNGS")?.as_slice(), path);
        let seed = rr.u64("seed")?;
        let next_epoch = rr.u64("epoch")? as usize;
        let digest: [u8; 32] = take(b"CDIG")?.as_slice().try_into().map_err(|_| fmt("digest must be 32 bytes"))?;
        Ok(Checkpoint {
            params,
            adam,
            seed,
            next_epoch,
            digest,
        })
    }
}

/// Recreates the head layout from `config` and fills it from named tensors.
fn rebuild(config: &HeadConfig, tensors: &[(String, bool, Tensor)]) -> Result<SumClipParams> {
    let by_name: HashMap<&str, (bool, &Tensor)> = tensors.iter().map(|(n, tr, t)| (n.as_str(), (*tr, t))).collect();
    let lw = |n: &str| -> Result<LinearWeights> {
        let w = by_name
            .get(format!("attn.{n}.weight").as_str())
            .ok_or_else(|| Error::Contract(format!("missing attn.{n}.weight")))?;
        Ok(LinearWeights {
            weight: w.1.clone(),
            bias: by_name.get(format!("attn.{n}.bias").as_str()).map(|b| b.1.clone()),
        })
    };
    let reference = ClipLinears {
        q: lw("q")?,
        k: lw("k")?,
        v: lw("v")?,
        c: lw("c")?,
    };
    let mut params = init_sum_clip(config, &reference, SeedTree::new(0))?;
    if params.store.len() != tensors.len() {
        return Err(Error::Contract(format!(
            "expected {} parameters, found {}",
            params.store.len(),
            tensors.len()
        )));
    }
    let ids: Vec<_> = params.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let (trainable, t) = by_name.get(name.as_str()).ok_or_else(|| Error::Contract(format!("missing {name}")))?;
        let p = params.store.get_mut(id);
        if p.tensor.shape() != t.shape() {
            return Err(Error::Contract(format!("{name} has shape {:?}, expected {:?}", t.shape(), p.tensor.shape())));
        }
        p.tensor = (*t).clone();
        params.store.set_trainable(id, *trainable);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::tests::random_linears;

    fn sample() -> Checkpoint {
        let cfg = HeadConfig {
            n_queries: 3,
            decoder_layers: 1,
            decoder_heads: 2,
            ..Default::default()
        };
        let params = init_sum_clip(&cfg, &random_linears(4, 3, 2), SeedTree::new(9)).unwrap();
        let mut adam = AdamState::new(&params.store, AdamConfig::default());
        adam.t = 17;
        for (i, m) in adam.m.iter_mut().enumerate() {
            m.data_mut().iter_mut().for_each(|x| *x = 0.1 / (i + 1) as f64);
        }
        Checkpoint {
            params,
            adam,
            seed: 42,
            next_epoch: 3,
            digest: [7; 32],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.forc");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.forc");
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }
}
