//! Little-endian binary encoding for parameter tables and other artifacts.

use std::path::Path;

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }

    pub fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }

    pub fn f64(&mut self, x: f64) {
        self.bytes(&x.to_le_bytes());
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        self.buf.reserve(xs.len() * 8);
        for &x in xs {
            self.f64(x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape.len() as u32);
        for &d in &t.shape {
            self.u64(d as u64);
        }
        self.f64s(&t.data);
    }
}

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    /// `what` names the artifact in truncation errors.
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("{} truncated", self.what)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        Tensor::new(shape, self.f64s(n)?)
    }
}

/// Name-indexed tensor table: count, then (name, trainable flag, tensor).
pub fn write_params(w: &mut ByteWriter, store: &ParamStore) {
    w.u64(store.len() as u64);
    for (_, p) in store.iter() {
        w.str(&p.name);
        w.u8(p.trainable as u8);
        w.tensor(&p.tensor);
    }
}

pub fn read_params(r: &mut ByteReader) -> Result<ParamStore> {
    let n = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let t = r.tensor()?;
        let id = store.add(name, t)?;
        store.get_mut(id).trainable = trainable;
    }
    Ok(store)
}

/// Copies every tensor of `src` into the same-named parameter of `dst`.
/// Names missing from `dst` are an error, as is any shape disagreement.
pub fn copy_params(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for (_, p) in src.iter() {
        let id = dst
            .id(&p.name)
            .ok_or_else(|| Error::Incompatible(format!("unknown parameter {}", p.name)))?;
        let target = dst.value_mut(id);
        if target.shape != p.tensor.shape {
            return Err(Error::Dimension(format!(
                "parameter {}: stored shape {:?}, model expects {:?}",
                p.name, p.tensor.shape, target.shape
            )));
        }
        target.data.clone_from(&p.tensor.data);
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a sibling temporary file and rename so readers never observe a
/// partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Stable within one build; used for cache keys and version stamps.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    use std::hash::{DefaultHasher, Hasher};
    let mut h = DefaultHasher::new();
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_bitwise() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![1.5, -0.0]).unwrap()).unwrap();
        let b = s.add("b.w", Tensor::full(&[2, 3], f64::MIN_POSITIVE)).unwrap();
        s.get_mut(b).trainable = false;
        let mut w = ByteWriter::new();
        write_params(&mut w, &s);
        let back = read_params(&mut ByteReader::new(&w.buf, "params")).unwrap();
        for ((_, x), (_, y)) in s.iter().zip(back.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.trainable, y.trainable);
            assert_eq!(x.tensor.shape, y.tensor.shape);
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.tensor), bits(&y.tensor));
        }
    }

    #[test]
    fn copy_reports_the_mismatched_parameter() {
        let mut a = ParamStore::new();
        a.add("layer.w", Tensor::zeros(&[4, 4])).unwrap();
        let mut b = ParamStore::new();
        b.add("layer.w", Tensor::zeros(&[4, 8])).unwrap();
        let err = copy_params(&mut a, &b).unwrap_err();
        assert!(err.to_string().contains("layer.w"), "{err}");
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut w = ByteWriter::new();
        w.tensor(&Tensor::zeros(&[3]));
        assert!(ByteReader::new(&w.buf[..10], "t").tensor().is_err());
    }
}
