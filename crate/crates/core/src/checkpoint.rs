//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TXSP" | u32 version | u32 len + config text
//! | u32 count | count x (u32 len + name | u32 rank | rank x u64 extent | f64 values)
//! | u64 epoch | 32-byte rng seed | u64 rng stream | u128 rng word position
//! | u64 FNV-1a hash of everything before it
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TXSP";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: Vec<(String, Tensor)>,
    pub epoch: u64,
    pub rng: RngState,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!("file truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &Config, epoch: u64, rng: RngState) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Checkpoint {
            config,
            params: model.store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            epoch,
            rng,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let h = fnv1a(&out);
        out.extend_from_slice(&h.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Corrupt("bad magic bytes, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        if bytes.len() < 8 + 8 {
            return Err(Error::Corrupt("file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let text = r.string("config snapshot")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("parameter `{name}` has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()));
            let Some(n) = n else {
                return Err(Error::Corrupt(format!("parameter `{name}` has implausible shape {shape:?}")));
            };
            let raw = r.take(n * 8, "parameter values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        let epoch = r.u64("epoch")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} unexpected bytes before the checksum",
                body.len() as isize - r.pos as isize
            )));
        }
        if fnv1a(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let config = Config::parse(&text).map_err(|e| Error::Corrupt(format!("config snapshot: {e}")))?;
        Ok(Checkpoint {
            config,
            params,
            epoch,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model described by the snapshot and installs the stored weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter `{name}`")))?;
            let p = model.store.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Model, Config) {
        let mut cfg = Config::default();
        cfg.model.backbone.fpn_channels = 8;
        cfg.model.rpn.head_hidden = 8;
        (Model::new(cfg.model.clone(), 4).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, cfg) = small();
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(3));
        let c = Checkpoint::from_model(&model, &cfg, 7, rng);
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let m2 = back.to_model().unwrap();
        for (a, b) in model.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_damage() {
        let (model, cfg) = small();
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(3));
        let bytes = Checkpoint::from_model(&model, &cfg, 0, rng).encode();
        let e = Checkpoint::decode(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(e, Error::Corrupt(_)), "{e}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad).unwrap_err(), Error::Version { found: 9, .. }));
        let mut bad = bytes.clone();
        let k = bad.len() - 100;
        bad[k] ^= 1;
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn rng_state_resumes() {
        use rand::RngCore;
        let mut a = ChaCha8Rng::seed_from_u64(11);
        a.next_u64();
        let s = RngState::capture(&a);
        let mut b = s.restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
