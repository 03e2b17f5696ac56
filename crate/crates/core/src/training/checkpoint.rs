//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "USGANCKP"
//! version  u32      CHECKPOINT_FORMAT_VERSION
//! order    u8       b'L'
//! sections, each { tag 4 bytes, length u64, payload }, in this order:
//!   CONF  training configuration as JSON
//!   GENP  generator parameter container
//!   DISP  critic parameter container
//!   GOPT  generator Adam state: t u64, m container, v container
//!   DOPT  critic Adam state, same layout
//!   PROG  step u64, epoch u64, batch_in_epoch u64
//!   RNGS  seed 32 bytes, stream u64, word position u128
//! ```
//!
//! Parameter containers are the model's own format. Every integer is
//! little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Adam;
use super::{TrainConfig, TrainError, TrainState};
use crate::model::{DiscriminatorParams, GeneratorParams, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"USGANCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 7] = [b"CONF", b"GENP", b"DISP", b"GOPT", b"DOPT", b"PROG", b"RNGS"];

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn adam_bytes(opt: &Adam) -> Vec<u8> {
    let m = opt.m.to_bytes();
    let mut out = opt.t.to_le_bytes().to_vec();
    out.extend((m.len() as u64).to_le_bytes());
    out.extend(m);
    out.extend(opt.v.to_bytes());
    out
}

fn adam_from(bytes: &[u8], params: &ParamSet, beta1: f64, beta2: f64, what: &str) -> Result<Adam, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let t = r.u64()?;
    let m_len = r.u64()? as usize;
    let m = ParamSet::from_bytes(r.take(m_len)?)?;
    let v = ParamSet::from_bytes(r.rest())?;
    for (moment, name) in [(&m, "first"), (&v, "second")] {
        let same = moment.len() == params.len()
            && moment.iter().zip(params.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(bad(format!("{what} {name}-moment manifest does not match the parameters")));
        }
    }
    Ok(Adam { beta1, beta2, t, m, v })
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut progress = Vec::with_capacity(24);
        for v in [self.step, self.epoch, self.batch_in_epoch] {
            progress.extend(v.to_le_bytes());
        }
        let mut rng = self.rng.get_seed().to_vec();
        rng.extend(self.rng.get_stream().to_le_bytes());
        rng.extend(self.rng.get_word_pos().to_le_bytes());
        let payloads = [
            serde_json::to_vec(&self.config).expect("config serializes"),
            self.generator.to_bytes(),
            self.discriminator.to_bytes(),
            adam_bytes(&self.g_opt),
            adam_bytes(&self.d_opt),
            progress,
            rng,
        ];
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.push(b'L');
        for (tag, payload) in SECTIONS.iter().zip(payloads) {
            out.extend(tag.iter());
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        if r.take(1)? != b"L" {
            return Err(bad("unsupported byte order marker"));
        }
        let mut sections = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let found = r.take(4)?;
            if found != tag {
                return Err(bad(format!(
                    "expected section {}, found {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(found)
                )));
            }
            let len = r.u64()? as usize;
            sections.push(r.take(len)?);
        }
        if !r.rest().is_empty() {
            return Err(bad("trailing bytes after last section"));
        }
        let config: TrainConfig =
            serde_json::from_slice(sections[0]).map_err(|e| bad(format!("configuration section: {e}")))?;
        config.validate()?;
        let generator = GeneratorParams::from_bytes(sections[1], &config.model)?;
        let discriminator = DiscriminatorParams::from_bytes(sections[2], &config.model)?;
        let g_opt = adam_from(sections[3], generator.params(), config.beta1, config.beta2, "generator optimizer")?;
        let d_opt = adam_from(sections[4], discriminator.params(), config.beta1, config.beta2, "critic optimizer")?;
        let mut p = Reader { bytes: sections[5], pos: 0 };
        let (step, epoch, batch_in_epoch) = (p.u64()?, p.u64()?, p.u64()?);
        let mut q = Reader { bytes: sections[6], pos: 0 };
        let seed: [u8; 32] = q.take(32)?.try_into().unwrap();
        let stream = q.u64()?;
        let word_pos = u128::from_le_bytes(q.take(16)?.try_into().unwrap());
        if !p.rest().is_empty() || !q.rest().is_empty() {
            return Err(bad("oversized progress or RNG section"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self { config, generator, discriminator, g_opt, d_opt, step, epoch, batch_in_epoch, rng })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("ckpt.partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| TrainError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TrainError::Checkpoint(msg) => TrainError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}
