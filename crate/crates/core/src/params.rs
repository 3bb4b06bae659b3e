//! Named network parameters, He-uniform initialization, and the versioned
//! binary checkpoint format (magic, layer name, shape, little-endian f32
//! payload per entry).

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const VERSION: u32 = 1;

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<F>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn values(&self) -> &[ArrayD<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<F>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Order-sensitive fingerprint of the exact parameter bytes.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for x in v.iter() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// He-uniform tensor: bound sqrt(6 / fan_in) with fan_in = C_in * kh * kw.
pub fn he_uniform<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let bound = (6.0f64 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        F::from_f64(rng.gen_range(-bound..bound))
    })
}

/// Writes a ParamSet to the checkpoint format.
pub fn save_checkpoint(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, v) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(v.ndim() as u32)?;
        for &d in v.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &x in v.iter() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let fmt = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("bad checkpoint magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        if name_len > 4096 {
            return Err(fmt(format!("unreasonable layer name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fmt("layer name is not UTF-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        if ndim > 8 {
            return Err(fmt(format!("unreasonable tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f32::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| fmt(format!("bad tensor shape: {e}")))?;
        out.push(name, arr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut p = ParamSet::<f32>::new();
        p.push("enc0.conv0.w", he_uniform(&[4, 1, 3, 3], 9, &mut rng));
        p.push("enc0.conv0.b", ArrayD::zeros(IxDyn(&[4])));
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.len(), q.len());
        for ((na, va), (nb, vb)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.shape(), vb.shape());
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT0000").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let t: ArrayD<f64> = he_uniform(&[8, 4, 3, 3], 36, &mut rng);
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(t.iter().all(|v| v.abs() < bound));
        // Not degenerate.
        assert!(t.iter().any(|v| v.abs() > bound * 0.5));
    }
}
