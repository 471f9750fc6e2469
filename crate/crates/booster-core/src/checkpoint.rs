//! On-disk formats for model parameters and the frame signal.
//!
//! Containers are named-tensor files: magic, version, entry table, then an
//! FNV-1a trailer over everything preceding it. A bad magic/length is a
//! Format error; a hash mismatch is Corruption. All payloads are f32 LE, so
//! save/load round trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::signal::BoosterSignal;
use std::fs;
use std::path::Path;

const CONTAINER_MAGIC: &[u8; 4] = b"BSTC";
const SIGNAL_MAGIC: &[u8; 4] = b"BSIG";
const VERSION: u32 = 1;

/// Optimizer state rides in the same container under this prefix.
pub const VELOCITY_PREFIX: &str = "velocity.";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.entries.push(Entry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let nb = e.name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            let numel: usize = e.shape.iter().product();
            if numel != e.data.len() {
                return Err(Error::shape(format!(
                    "container entry '{}': shape {:?} vs {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&fnv1a(&buf).to_le_bytes());
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = fs::read(path)?;
        if bytes.len() < 20 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::format(format!("{}: not a tensor container", path.display())));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::corruption(format!(
                "{}: checksum mismatch, file is damaged",
                path.display()
            )));
        }
        let mut r = Reader { b: body, pos: 4, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "{}: unsupported container version {}",
                path.display(),
                version
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(format!("{}: entry name is not UTF-8", path.display())))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        Ok(Container { entries })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::format(format!("{}: truncated container", self.path.display())));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Model parameters (and nothing else) as a container.
pub fn model_to_container(model: &Model) -> Container {
    let mut c = Container::new();
    for (name, p) in model.param_names().iter().zip(model.params()) {
        c.push(name.clone(), p.shape().to_vec(), p.data().to_vec());
    }
    c
}

/// Load parameters by name; every model parameter must be present.
pub fn apply_container(model: &mut Model, c: &Container) -> Result<()> {
    for name in model.param_names().to_vec() {
        let e = c
            .get(&name)
            .ok_or_else(|| Error::format(format!("checkpoint is missing tensor '{}'", name)))?;
        model.set_param(&name, e.data.clone())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// signal file
// ---------------------------------------------------------------------------

pub fn save_signal(path: &Path, s: &BoosterSignal) -> Result<()> {
    let (c, hf, wf) = s.canvas_dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(SIGNAL_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [s.width() as u32, c as u32, hf as u32, wf as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.frame_data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&fnv1a(&buf).to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_signal(path: &Path) -> Result<BoosterSignal> {
    let bytes = fs::read(path)?;
    if bytes.len() < 32 || &bytes[..4] != SIGNAL_MAGIC {
        return Err(Error::format(format!("{}: not a signal file", path.display())));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::corruption(format!("{}: checksum mismatch", path.display())));
    }
    let rd = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as usize;
    let version = rd(4);
    if version != VERSION as usize {
        return Err(Error::format(format!(
            "{}: unsupported signal version {}",
            path.display(),
            version
        )));
    }
    let (width, c, hf, wf) = (rd(8), rd(12), rd(16), rd(20));
    if hf < 2 * width || wf < 2 * width {
        return Err(Error::format(format!(
            "{}: frame smaller than its own border",
            path.display()
        )));
    }
    let numel = c * hf * wf;
    let payload = &body[24..];
    if payload.len() != numel * 4 {
        return Err(Error::format(format!(
            "{}: payload {} bytes, header wants {}",
            path.display(),
            payload.len(),
            numel * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    BoosterSignal::from_frame(width, c, (hf - 2 * width, wf - 2 * width), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let mut c = Container::new();
        c.push("a", vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e7]);
        c.push("b.weight", vec![3], vec![0.1, 0.2, 0.3]);
        c.write(&p).unwrap();
        let back = Container::read(&p).unwrap();
        assert_eq!(back.entries.len(), 2);
        for (orig, got) in c.entries.iter().zip(&back.entries) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.shape, got.shape);
            let ob: Vec<u32> = orig.data.iter().map(|v| v.to_bits()).collect();
            let gb: Vec<u32> = got.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ob, gb);
        }
    }

    #[test]
    fn flipped_byte_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let mut c = Container::new();
        c.push("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        c.write(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Container::read(&p), Err(Error::Corruption(_))));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        fs::write(&p, b"NOPE____________________").unwrap();
        assert!(matches!(Container::read(&p), Err(Error::Format(_))));
    }

    #[test]
    fn model_save_load_preserves_params() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = Model::build("cnn-small", (1, 12, 12), 10, 3).unwrap();
        model_to_container(&m).write(&p).unwrap();
        let mut m2 = Model::build("cnn-small", (1, 12, 12), 10, 4).unwrap();
        assert_ne!(m.params()[0].data(), m2.params()[0].data());
        apply_container(&mut m2, &Container::read(&p).unwrap()).unwrap();
        for (a, b) in m.params().iter().zip(m2.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn signal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.sig");
        let s = BoosterSignal::random(3, 1, (8, 8), 77);
        save_signal(&p, &s).unwrap();
        let back = load_signal(&p).unwrap();
        assert_eq!(back.width(), 3);
        assert_eq!(back.canvas_dims(), s.canvas_dims());
        assert_eq!(back.frame_data(), s.frame_data());
    }
}
