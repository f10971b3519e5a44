//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "MIRLCKPT"
//! version u32      currently 1
//! config  u64 length + UTF-8 bytes (resolved run config, may be empty)
//! step    u64
//! rng     u32 count, then per stream: u32 name len, name, 4 x u64 state
//! tensors u32 count, then per tensor:
//!           u32 name len, name
//!           u8  dtype tag (0 = f64)
//!           u32 ndim, then u64 per dim
//!           u64 payload byte length, f64 LE values
//!           u32 crc32 of the payload bytes
//! moments u8 flag; when 1: u64 optimizer step, then a tensor section of
//!           m.<name> / v.<name> entries
//! ```
//!
//! Every tensor payload is checksummed, so corruption surfaces as a
//! structured error instead of silently wrong weights. The same container
//! (with empty config / rng sections) doubles as the named-tensor format
//! for extractor weights.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::diffcore::ParamStore;
use crate::{MirlError, Result};

const MAGIC: &[u8; 8] = b"MIRLCKPT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub rng_states: Vec<(String, [u64; 4])>,
    pub tensors: Vec<NamedTensor>,
    pub moments: Option<Moments>,
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub t: u64,
    pub tensors: Vec<NamedTensor>,
}

fn crc32(data: &[u8]) -> u32 {
    // standard reflected CRC-32 (polynomial 0xEDB88320)
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(MirlError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| MirlError::Checkpoint("invalid UTF-8 in name".into()))
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor_section(w: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        write_string(w, name)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(data.len() * 8);
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
        w.write_all(&payload)?;
        w.write_all(&crc32(&payload).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor_section(r: &mut Reader) -> Result<Vec<NamedTensor>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(MirlError::Checkpoint(format!(
                "tensor {name}: unsupported dtype tag {dtype}"
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let bytes = r.u64()? as usize;
        let payload = r.take(bytes)?;
        let stored_crc = r.u32()?;
        if crc32(payload) != stored_crc {
            return Err(MirlError::Checkpoint(format!(
                "tensor {name}: checksum mismatch (corrupt file)"
            )));
        }
        if bytes % 8 != 0 || shape.iter().product::<usize>() * 8 != bytes {
            return Err(MirlError::Checkpoint(format!(
                "tensor {name}: payload does not match shape {shape:?}"
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.config_text.len() as u64).to_le_bytes())?;
    w.write_all(ckpt.config_text.as_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&(ckpt.rng_states.len() as u32).to_le_bytes())?;
    for (name, state) in &ckpt.rng_states {
        write_string(&mut w, name)?;
        for s in state {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    write_tensor_section(&mut w, &ckpt.tensors)?;
    match &ckpt.moments {
        Some(m) => {
            w.write_all(&[1u8])?;
            w.write_all(&m.t.to_le_bytes())?;
            write_tensor_section(&mut w, &m.tensors)?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(MirlError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MirlError::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let clen = r.u64()? as usize;
    let config_text = String::from_utf8(r.take(clen)?.to_vec())
        .map_err(|_| MirlError::Checkpoint("invalid UTF-8 config blob".into()))?;
    let step = r.u64()?;
    let rng_count = r.u32()? as usize;
    let mut rng_states = Vec::with_capacity(rng_count);
    for _ in 0..rng_count {
        let name = r.string()?;
        let mut state = [0u64; 4];
        for s in &mut state {
            *s = r.u64()?;
        }
        rng_states.push((name, state));
    }
    let tensors = read_tensor_section(&mut r)?;
    let moments = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            Some(Moments {
                t,
                tensors: read_tensor_section(&mut r)?,
            })
        }
        other => {
            return Err(MirlError::Checkpoint(format!(
                "bad moments flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        config_text,
        step,
        rng_states,
        tensors,
        moments,
    })
}

/// Read only the tensor section of a container, by name.
pub fn read_named_tensors(path: &Path) -> Result<HashMap<String, (Vec<usize>, Vec<f64>)>> {
    let ckpt = load_checkpoint(path)?;
    Ok(ckpt
        .tensors
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect())
}

/// Write a bare named-tensor container (no config, rng or moments).
pub fn write_named_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            tensors: tensors.to_vec(),
            ..Checkpoint::default()
        },
    )
}

impl Checkpoint {
    /// Capture a parameter store, prefixing every name with `prefix`.
    pub fn push_store(&mut self, store: &ParamStore, prefix: &str) {
        for p in store.iter() {
            self.tensors
                .push((format!("{prefix}{}", p.name), p.shape.clone(), p.value.clone()));
        }
    }

    /// Restore a parameter store, requiring exactly matching names and
    /// shapes under `prefix`; the error names the first mismatching tensor.
    pub fn apply_store(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let mut by_name: HashMap<&str, &NamedTensor> = HashMap::new();
        for t in &self.tensors {
            if let Some(rest) = t.0.strip_prefix(prefix) {
                by_name.insert(rest, t);
            }
        }
        for p in store.iter_mut() {
            let Some((_, shape, data)) = by_name.remove(p.name.as_str()) else {
                return Err(MirlError::Checkpoint(format!(
                    "tensor {prefix}{} missing from checkpoint",
                    p.name
                )));
            };
            if *shape != p.shape {
                return Err(MirlError::Checkpoint(format!(
                    "tensor {prefix}{} has shape {shape:?}, model expects {:?}",
                    p.name, p.shape
                )));
            }
            p.value.copy_from_slice(data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("mirl-ckpt-{}-{name}", std::process::id()))
    }

    #[test]
    fn roundtrip_preserves_everything_bit_exactly() {
        let mut store = ParamStore::new();
        store.insert("a.weight", vec![2, 2], vec![0.1, -0.2, 0.3, 1e-300]).unwrap();
        store.insert("b.bias", vec![3], vec![f64::MIN_POSITIVE, 1.5, -0.0]).unwrap();
        let mut ckpt = Checkpoint {
            config_text: "seed = 7\n".into(),
            step: 42,
            rng_states: vec![("mask".into(), [1, 2, 3, 4])],
            tensors: Vec::new(),
            moments: Some(Moments {
                t: 9,
                tensors: vec![("m.a.weight".into(), vec![4], vec![0.5; 4])],
            }),
        };
        ckpt.push_store(&store, "");
        let path = tmp("roundtrip");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.step, 42);
        assert_eq!(back.rng_states, ckpt.rng_states);
        assert_eq!(back.tensors.len(), 2);
        for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            // exact bit equality, including -0.0 and subnormals
            for (x, y) in a.2.iter().zip(&b.2) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.moments.as_ref().unwrap().t, 9);

        let mut store2 = store.clone();
        store2.get_mut("a.weight").unwrap().value.fill(0.0);
        back.apply_store(&mut store2, "").unwrap();
        assert_eq!(store2.get("a.weight").unwrap().value, store.get("a.weight").unwrap().value);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corruption_is_detected_by_checksum() {
        let ckpt = Checkpoint {
            tensors: vec![("w".into(), vec![2], vec![1.0, 2.0])],
            ..Checkpoint::default()
        };
        let path = tmp("corrupt");
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xFF; // flip a payload byte
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn mismatched_shape_names_the_tensor() {
        let ckpt = Checkpoint {
            tensors: vec![("w".into(), vec![2], vec![1.0, 2.0])],
            ..Checkpoint::default()
        };
        let path = tmp("mismatch");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let mut store = ParamStore::new();
        store.insert("w", vec![3], vec![0.0; 3]).unwrap();
        let err = back.apply_store(&mut store, "").unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");

        let mut store = ParamStore::new();
        store.insert("other", vec![2], vec![0.0; 2]).unwrap();
        let err = back.apply_store(&mut store, "").unwrap_err();
        assert!(err.to_string().contains("other"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("magic");
        std::fs::write(&path, b"NOTACKPT000000000").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
