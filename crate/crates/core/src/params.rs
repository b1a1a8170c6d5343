//! Named parameter store, initialization, and binary checkpoint I/O.
//!
//! Parameters are master [`Tensor`]s keyed by dotted path (for example
//! `can.speech.gru.layer0.fw.w_ih_z`). Iteration order is lexicographic,
//! which makes binding, gradient collection, optimizer updates, and the
//! checkpoint layout deterministic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, Value};
use crate::tensor::Tensor;

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSTE";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic (expected \"MSTE\")")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

/// Ordered map of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), tensor).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Lexicographic iteration over `(name, tensor)`.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Inserts every parameter into `graph` as a trainable leaf, in
    /// lexicographic order.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        let map = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.variable(tensor.clone())))
            .collect();
        BoundParams { map }
    }

    /// Writes the checkpoint: magic `MSTE`, version `u32` LE, then per
    /// parameter in lexicographic name order: name length (`u32` LE),
    /// UTF-8 name, rank (`u32` LE), dims (`u64` LE each), and the raw
    /// element data as little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ParamError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, tensor) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &x in tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ParamError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ParamError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ParamError::BadVersion(version));
        }
        let mut out = ParameterSet::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ParamError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut dim_buf = [0u8; 8];
                r.read_exact(&mut dim_buf)?;
                shape.push(u64::from_le_bytes(dim_buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for slot in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *slot = f64::from_le_bytes(buf);
            }
            if out.params.contains_key(&name) {
                return Err(ParamError::DuplicateName(name));
            }
            out.params.insert(name, Tensor::new(shape, data));
        }
        Ok(out)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ParamError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Graph-bound view of a [`ParameterSet`] for one forward/backward pass.
pub struct BoundParams<'g> {
    map: BTreeMap<String, Value<'g>>,
}

impl<'g> BoundParams<'g> {
    /// Fetches a bound parameter; panics on unknown names (wiring bug).
    pub fn get(&self, name: &str) -> Value<'g> {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value<'g>)> {
        self.map.iter()
    }

    /// Clones every accumulated gradient, keyed by parameter name.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.map.iter().map(|(n, v)| (n.clone(), v.grad())).collect()
    }
}

// ---------------------------------------------------------------------------
// Initialization helpers. All randomness flows through the caller's RNG so
// builds are reproducible per seed.
// ---------------------------------------------------------------------------

/// Uniform in `[-limit, limit]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data)
}

/// Glorot/Xavier uniform for a `[fan_in, fan_out]` weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, vec![fan_in, fan_out], limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_set() -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("b.w", Tensor::from_rows(&[vec![1.5, -2.25], vec![0.0, 1e-300]]));
        ps.insert("a.bias", Tensor::from_vec(vec![0.25, -0.5, 3.0]));
        ps.insert("c", Tensor::scalar(42.0));
        ps
    }

    #[test]
    fn iteration_is_lexicographic() {
        let ps = sample_set();
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, vec!["a.bias", "b.w", "c"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut ps = sample_set();
        ps.insert("c", Tensor::scalar(1.0));
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let ps = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        ps.save(&path).unwrap();
        let loaded = ParameterSet::load(&path).unwrap();
        assert_eq!(loaded.len(), ps.len());
        for (name, tensor) in ps.iter() {
            let got = loaded.get(name).unwrap();
            assert_eq!(got.shape(), tensor.shape());
            // Bit-exact comparison.
            for (a, b) in got.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {name}");
            }
        }
        // Same bytes when saved again.
        let mut buf1 = Vec::new();
        ps.write_to(&mut buf1).unwrap();
        let mut buf2 = Vec::new();
        loaded.write_to(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn checkpoint_layout_starts_with_magic_and_version() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MSTE");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        // First record is "a.bias": name length then the name itself.
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 6);
        assert_eq!(&buf[12..18], b"a.bias");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        let err = ParameterSet::read_from(&mut &buf[..]).unwrap_err();
        assert!(matches!(err, ParamError::BadMagic));
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParameterSet::read_from(&mut &buf[..]).is_err());
    }

    #[test]
    fn bind_exposes_trainable_values() {
        let ps = sample_set();
        let g = Graph::new(0);
        let bound = ps.bind(&g);
        let w = bound.get("b.w");
        let loss = w.mul(w).sum_all();
        loss.backward().unwrap();
        let grads = bound.grads();
        assert!(grads["b.w"].data()[0] != 0.0);
        assert_eq!(grads["a.bias"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(glorot(&mut r1, 4, 5), glorot(&mut r2, 4, 5));
    }
}
