//! `CRKSEG01` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CRKSEG01"
//! count        u32
//! count × {
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u8
//!   dims       rank × u32
//!   values     numel × f32, row-major
//! }
//! ```
//!
//! Batch-norm buffers sit next to parameters under `<layer>.running_mean` and
//! `<layer>.running_var`; optimizer state uses the `optim.` prefix.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRKSEG01";
const OPTIM_PREFIX: &str = "optim.";

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint("too many tensors for a u32 count".into()))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Checkpoint(format!("rank of {name} exceeds 255")))?;
        w.write_all(&name_len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension of {name} exceeds u32")))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file while reading {what}: {e}")))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a CRKSEG01 checkpoint",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "tensor count")?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("tensor #{i} has a non-UTF-8 name")))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            read_exact(&mut r, &mut b4, "dims")?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut r, &mut raw, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

impl<T: Float> Model<T> {
    /// Parameters (store order) followed by buffers (sorted by name), as f32.
    pub fn state_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .chain(self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())))
            .collect()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.state_entries())
    }

    /// Loads every parameter and buffer from `path`. `optim.*` entries are
    /// ignored; any other unknown name, a shape mismatch or a missing tensor
    /// is an error naming the first offending tensor.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        self.load_entries(&entries, |_| true)
    }

    /// Loads only `encoder.*` tensors; other entries in the file are ignored.
    pub fn load_encoder(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        let encoder: Vec<_> = entries
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .collect();
        self.load_entries(&encoder, |n| n.starts_with("encoder."))
    }

    fn load_entries(
        &mut self,
        entries: &[(String, Tensor<f32>)],
        wanted: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let mut staged_params = Vec::new();
        let mut staged_buffers = BTreeMap::new();
        let mut seen = HashSet::new();
        for (name, t) in entries {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            let expected = if let Some(id) = self.params.id(name) {
                self.params.get(id).value.shape().to_vec()
            } else if let Some(b) = self.buffers.get(name) {
                b.shape().to_vec()
            } else {
                return Err(Error::Checkpoint(format!(
                    "unexpected tensor {name} (not part of this architecture)"
                )));
            };
            if t.shape() != expected.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {expected:?}",
                    t.shape()
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("tensor {name} appears twice")));
            }
            match self.params.id(name) {
                Some(id) => staged_params.push((id, t.cast::<T>())),
                None => {
                    staged_buffers.insert(name.clone(), t.cast::<T>());
                }
            }
        }
        let missing = self
            .params
            .iter()
            .map(|p| p.name.as_str())
            .chain(self.buffers.keys().map(String::as_str))
            .filter(|n| wanted(n))
            .find(|n| !seen.contains(n));
        if let Some(name) = missing {
            return Err(Error::Checkpoint(format!("checkpoint is missing tensor {name}")));
        }
        for (id, v) in staged_params {
            self.params.get_mut(id).value = v;
        }
        self.buffers.extend(staged_buffers);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPT!\0\0\0\0").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("not a CRKSEG01"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let t = Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        write_checkpoint(&path, &[("a".into(), t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::build(&ModelConfig::reduced()).unwrap();
        let mut entries = model.state_entries();
        entries[3].1 = Tensor::zeros([1]);
        let bad = entries[3].0.clone();
        write_checkpoint(&path, &entries).unwrap();
        let mut fresh = Model::<f32>::build(&ModelConfig::reduced()).unwrap();
        let err = fresh.load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains(&bad), "{err}");
    }
}
