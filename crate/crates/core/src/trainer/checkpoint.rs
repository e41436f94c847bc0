//! Checkpoint container: fixed magic bytes, format version, config blob,
//! tensor table (name, shape, offset) and raw little-endian f32 payloads.
//! Serialization is canonical, so save -> load -> save is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MX36";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed training iterations.
    pub iteration: u64,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    pub tensors: Vec<CheckpointTensor>,
}

fn truncated(what: &str) -> Error {
    Error::CheckpointTruncated(what.to_string())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated(what))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&self.opt_g_step.to_le_bytes())?;
        w.write_all(&self.opt_d_step.to_le_bytes())?;
        let config_json =
            serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(&(config_json.len() as u64).to_le_bytes())?;
        w.write_all(&config_json)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        let mut offset = 0u64;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += t.data.len() as u64;
        }
        w.write_all(&offset.to_le_bytes())?; // total payload length in floats
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic bytes")?;
        if magic != MAGIC {
            return Err(Error::CheckpointMagic);
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let iteration = read_u64(&mut r, "iteration")?;
        let opt_g_step = read_u64(&mut r, "optimizer step")?;
        let opt_d_step = read_u64(&mut r, "optimizer step")?;
        let config_len = read_u64(&mut r, "config length")? as usize;
        let mut config_json = vec![0u8; config_len];
        read_exact(&mut r, &mut config_json, "config blob")?;
        let config: Config = serde_json::from_slice(&config_json)
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let count = read_u64(&mut r, "tensor count")? as usize;
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::CheckpointTruncated("non-utf8 tensor name".into()))?;
            let rank = read_u32(&mut r, "tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, "tensor dim")? as usize);
            }
            let offset = read_u64(&mut r, "tensor offset")?;
            meta.push((name, shape, offset));
        }
        let payload_len = read_u64(&mut r, "payload length")? as usize;
        let mut payload = vec![0u8; payload_len * 4];
        read_exact(&mut r, &mut payload, "tensor payload")?;
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in meta {
            let numel: usize = shape.iter().product();
            let start = offset as usize;
            if start + numel > floats.len() {
                return Err(truncated(&format!("payload of {name}")));
            }
            tensors.push(CheckpointTensor {
                name,
                shape,
                data: floats[start..start + numel].to_vec(),
            });
        }
        Ok(Checkpoint {
            config,
            iteration,
            opt_g_step,
            opt_d_step,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: Config::default(),
            iteration: 42,
            opt_g_step: 42,
            opt_d_step: 43,
            tensors: vec![
                CheckpointTensor {
                    name: "block1/embed/weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, 0.25, -0.125, 9.0],
                },
                CheckpointTensor {
                    name: "disc/patch_head/bias".into(),
                    shape: vec![1],
                    data: vec![0.75],
                },
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.tensors[0].data, ck.tensors[0].data);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p).unwrap_err(),
            Error::CheckpointMagic
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        sample().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 99;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p).unwrap_err(),
            Error::CheckpointVersion { found: 99, .. }
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        sample().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            Checkpoint::load(&p).unwrap_err(),
            Error::CheckpointTruncated(_)
        ));
    }
}
