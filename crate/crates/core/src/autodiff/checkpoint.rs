//! Binary parameter checkpoints.
//!
//! Layout: magic `XMF1`, then for each parameter in sorted name order:
//! name length (u16 LE), UTF-8 name, rank (u8), dims (u32 LE each),
//! values (f64 LE each).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XMF1";

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in store.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("rank too large for {name}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut store = ParamStore::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut v = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut v)?;
            values.push(f64::from_le_bytes(v));
        }
        store.insert(name, Tensor::new(shape, values, true)?);
    }
    Ok(store)
}

/// Check that `store` holds exactly the names and shapes of `reference`.
pub fn validate_against(store: &ParamStore, reference: &ParamStore) -> Result<()> {
    if store.len() != reference.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} != expected {}",
            store.len(),
            reference.len()
        )));
    }
    for (name, t) in reference.iter() {
        match store.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(s) if s.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert(
            "layer.w",
            Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.25e-7, 1.0, f64::MIN_POSITIVE, 9.9], true)
                .unwrap(),
        );
        store.insert("layer.b", Tensor::new(vec![3], vec![0.0, -0.0, 42.0], true).unwrap());
        let dir = std::env::temp_dir().join("xmf_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.values().iter().zip(t.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        validate_against(&loaded, &store).unwrap();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("xmf_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(vec![2, 2]).with_requires_grad(true));
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(vec![2, 3]).with_requires_grad(true));
        assert!(validate_against(&a, &b).is_err());
    }
}
