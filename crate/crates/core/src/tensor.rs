//! Dense row-major tensors of up to four axes plus the `SMLT` binary format.
//!
//! Axis convention for rank-4 tensors is (batch, channel, height, width).
//! Images are stored rank-2 as (height, width); displacement fields rank-3
//! as (2, height, width).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SMLT_MAGIC: &[u8; 4] = b"SMLT";
pub const SMLT_VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.len() <= MAX_RANK, "bad rank {}", shape.len());
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn at2(&self, y: usize, x: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[y * self.shape[1] + x]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        debug_assert_eq!(self.rank(), 4);
        let (ch, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn set2(&mut self, y: usize, x: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        self.data[y * w + x] = v;
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Serialize in the `SMLT` format: magic, u32 version, u32 rank,
    /// u32 dims, then f32 elements, all little-endian.
    pub fn write_smlt<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(SMLT_MAGIC)?;
        out.write_all(&SMLT_VERSION.to_le_bytes())?;
        out.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_smlt<R: Read>(input: &mut R) -> Result<Self> {
        let err = |reason: &str| Error::format("<stream>", reason);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| Error::io("<stream>", e))?;
        if &magic != SMLT_MAGIC {
            return Err(err("bad magic, expected SMLT"));
        }
        let mut buf4 = [0u8; 4];
        let mut read_u32 = |input: &mut R| -> Result<u32> {
            input.read_exact(&mut buf4).map_err(|e| Error::io("<stream>", e))?;
            Ok(u32::from_le_bytes(buf4))
        };
        let version = read_u32(input)?;
        if version != SMLT_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(err(&format!("bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            input.read_exact(&mut buf).map_err(|e| Error::io("<stream>", e))?;
            data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
        }
        Tensor::new(&shape, data)
    }

    pub fn save_smlt(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_smlt(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load_smlt(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_smlt(&mut r).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

/// Elementwise a + b (shapes must match).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_element_count_must_agree() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
    }

    #[test]
    fn smlt_round_trip() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32 * 0.25 - 1.0);
        let mut buf = Vec::new();
        t.write_smlt(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SMLT");
        let back = Tensor::<f32>::read_smlt(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn smlt_rejects_bad_magic_and_version() {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        let mut buf = Vec::new();
        t.write_smlt(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor::<f32>::read_smlt(&mut bad.as_slice()).is_err());

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(Tensor::<f32>::read_smlt(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn smlt_f64_saves_as_f32() {
        let t = Tensor::<f64>::from_fn(&[3], |i| i as f64 + 0.5);
        let mut buf = Vec::new();
        t.write_smlt(&mut buf).unwrap();
        let back = Tensor::<f32>::read_smlt(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data(), &[0.5f32, 1.5, 2.5]);
    }
}
