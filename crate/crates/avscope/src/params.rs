//! Named parameter storage with deterministic initialization and a binary
//! checkpoint format.
//!
//! Every parameter is seeded from (store seed, parameter name), so two stores
//! built from the same seed and architecture are bit-identical regardless of
//! registration order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::axis::AxisRole;
use crate::error::{Error, Result};
use crate::tensor::AxisTaggedTensor;

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVSC";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a 64-bit hash; stable across platforms and releases.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for (seed, label); independent labels give independent
/// streams.
pub fn rng_stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a64(label.as_bytes());
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// RNG for (seed, label, index); used for per-step and per-example streams.
pub fn rng_substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    rng_stream(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), label)
}

/// Name to tensor map holding every trainable parameter.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    seed: u64,
    entries: BTreeMap<String, AxisTaggedTensor>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, entries: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AxisTaggedTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&AxisTaggedTensor> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, t: AxisTaggedTensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut AxisTaggedTensor> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Apply an in-place update to one parameter's data.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut [f64])) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        f(t.data_mut());
        Ok(())
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    fn generic_axes(extents: &[usize]) -> Vec<(AxisRole, usize)> {
        extents
            .iter()
            .enumerate()
            .map(|(i, &e)| (AxisRole::Generic(i as u8), e))
            .collect()
    }

    /// Register a tensor initialized U(-s, s) with s = sqrt(1 / fan_in).
    /// Idempotent: an existing entry is validated against the extents.
    pub fn ensure_uniform(&mut self, name: &str, extents: &[usize], fan_in: usize) -> Result<()> {
        self.ensure_uniform_scaled(name, extents, fan_in, 1.0)
    }

    /// `ensure_uniform` with the init range shrunk by `gain`. Residual-branch
    /// output layers use a small gain so a deep stack starts near identity;
    /// full-scale init lets every block's common-mode output compound and
    /// washes out per-position differences after a few layers.
    pub fn ensure_uniform_scaled(
        &mut self,
        name: &str,
        extents: &[usize],
        fan_in: usize,
        gain: f64,
    ) -> Result<()> {
        if let Some(t) = self.entries.get(name) {
            let have: Vec<usize> = t.axes().iter().map(|&(_, e)| e).collect();
            if have != extents {
                return Err(Error::shape(format!(
                    "parameter '{name}' registered with extents {have:?}, requested {extents:?}"
                )));
            }
            return Ok(());
        }
        let scale = gain * (1.0 / fan_in as f64).sqrt();
        let mut rng = rng_stream(self.seed, name);
        let n: usize = extents.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let t = AxisTaggedTensor::from_vec(&Self::generic_axes(extents), data)?;
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    /// Register a tensor filled with a constant (biases, norm gains).
    pub fn ensure_const(&mut self, name: &str, extents: &[usize], value: f64) -> Result<()> {
        if let Some(t) = self.entries.get(name) {
            let have: Vec<usize> = t.axes().iter().map(|&(_, e)| e).collect();
            if have != extents {
                return Err(Error::shape(format!(
                    "parameter '{name}' registered with extents {have:?}, requested {extents:?}"
                )));
            }
            return Ok(());
        }
        let t = AxisTaggedTensor::fill(&Self::generic_axes(extents), value)?;
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    // ── checkpoint io ────────────────────────────────────────────────────────
    //
    // Layout: magic "AVSC", version u32 LE, then per parameter (sorted by
    // name): name_len u32 LE, name bytes, rank u32 LE, extents u64 LE each,
    // data f64 LE. Round trips are bit-exact.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &(_, e) in t.axes() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let fail = |msg: &str| Error::Format { path: path.display().to_string(), message: msg.to_string() };
        if bytes.len() < 8 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let mut pos = 8usize;
        let mut entries = BTreeMap::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(fail("truncated record"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("non-utf8 parameter name"))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = extents.iter().product();
            let raw = take(&mut pos, n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = AxisTaggedTensor::from_vec(&Self::generic_axes(&extents), data)?;
            entries.insert(name, t);
        }
        Ok(Self { seed: 0, entries })
    }

    /// Overwrite this store's data with a checkpoint's values. Every
    /// checkpoint entry must match a registered parameter's extents; the
    /// registered axis roles are kept.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let loaded = Self::load(path)?;
        for (name, t) in loaded.entries {
            let cur = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if cur.numel() != t.numel() {
                return Err(Error::shape(format!(
                    "checkpoint parameter '{name}' has {} scalars, model expects {}",
                    t.numel(),
                    cur.numel()
                )));
            }
            cur.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
