//! Named parameter collections and their binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "USGPARAM"
//! version  u32      PARAM_FORMAT_VERSION
//! order    u8       b'L'
//! count    u32      number of arrays
//! manifest count × { name_len u32, name utf-8, rank u32, dims u64 × rank }
//! payload  count × (f64 little-endian × product(dims)), in manifest order
//! ```

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

pub const PARAM_MAGIC: &[u8; 8] = b"USGPARAM";
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Ordered map from layer name to parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    arrays: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }

    /// Record every array on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        BoundParams {
            vars: self.arrays.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.count() * 8);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
        out.push(b'L');
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != PARAM_MAGIC {
            return Err(ModelError::Format("bad parameter container magic".into()));
        }
        let version = r.u32()?;
        if version != PARAM_FORMAT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported parameter container version {version} (expected {PARAM_FORMAT_VERSION})"
            )));
        }
        if r.take(1)? != b"L" {
            return Err(ModelError::Format("unsupported byte order marker".into()));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ModelError::Format("layer name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            manifest.push((name, shape));
        }
        let mut set = ParamSet::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| ModelError::Format("array too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            set.insert(name, Tensor::new(shape, data));
        }
        if !r.is_empty() {
            return Err(ModelError::Format("trailing bytes after parameter payload".into()));
        }
        Ok(set)
    }

    /// Check names, order and shapes against an expected layout.
    pub fn check_layout(&self, layout: &[LayerSpec]) -> Result<(), ModelError> {
        if self.len() != layout.len() {
            return Err(ModelError::Format(format!(
                "parameter manifest has {} arrays, configuration expects {}",
                self.len(),
                layout.len()
            )));
        }
        for ((name, t), spec) in self.iter().zip(layout) {
            if name != spec.name {
                return Err(ModelError::Format(format!("expected layer {:?}, found {name:?}", spec.name)));
            }
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Format(format!(
                    "layer {name} has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, looked up by layer name.
pub struct BoundParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

/// How a freshly built array is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self { name: name.into(), shape, init }
    }
}

/// Materialize a layout, drawing weights from one seeded stream in layout order.
pub fn initialize(layout: &[LayerSpec], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for spec in layout {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::FanIn(fan_in) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n = spec.shape.iter().product();
                Tensor::new(spec.shape.clone(), (0..n).map(|_| normal.sample(&mut rng)).collect())
            }
        };
        set.insert(spec.name.clone(), t);
    }
    set
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format("truncated parameter container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
