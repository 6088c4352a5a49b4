//! Dense rank-4 tensors and the `LGBP` binary container.
//!
//! The on-disk layout of a single tensor record is:
//!
//! ```text
//! "LGBP" | version 0x01 | dtype 0x00 (f32) | rank | pad 0x00 | rank x u32 LE extents | f32 LE payload
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"LGBP";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

/// Dense (batch, channel, height, width) array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Tensor { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    /// A 1x1x1x1 tensor.
    pub fn scalar(v: T) -> Self {
        Tensor { dims: [1, 1, 1, 1], data: vec![v] }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [b, c, y, x]: [usize; 4]) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Contiguous (height x width) plane of one batch item and channel.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("expected a scalar, got dims {:?}", self.dims)));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        // `v * 0` is NaN exactly for non-finite `v`; lane sums keep this vectorized.
        let mut acc = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder().iter().all(|v| v.is_finite());
        for c in chunks {
            for i in 0..8 {
                acc[i] += c[i] * T::zero();
            }
        }
        tail && acc.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// Channels `[start, start + count)` of every batch item.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims;
        if start + count > c {
            return Err(Error::shape(format!("channels {start}..{} of {c}", start + count)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * count * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + count * hw]);
        }
        Tensor::new([b, count, h, w], data)
    }
}

/// Untyped record read from or written to an `LGBP` file. Any rank is allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub extents: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        TensorRecord {
            extents: t.dims().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// Interprets the record as a rank-4 tensor; lower ranks are left-padded with 1.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.extents.len() > 4 {
            return Err(Error::Format(format!("rank {} exceeds 4", self.extents.len())));
        }
        let mut dims = [1usize; 4];
        let off = 4 - self.extents.len();
        dims[off..].copy_from_slice(&self.extents);
        Tensor::new(dims, self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.extents.len() > u8::MAX as usize {
            return Err(Error::invalid("rank too large"));
        }
        let n: usize = self.extents.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "extents {:?} need {n} values, got {}",
                self.extents,
                self.data.len()
            )));
        }
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, DTYPE_F32, self.extents.len() as u8, 0])?;
        for &e in &self.extents {
            let e = u32::try_from(e).map_err(|_| Error::invalid("extent exceeds u32"))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if head[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", head[4])));
        }
        if head[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {:#04x}", head[5])));
        }
        Self::read_body(r, head[6] as usize)
    }

    pub(crate) fn read_body(r: &mut impl Read, rank: usize) -> Result<Self> {
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            extents.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = extents.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(TensorRecord { extents, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }
}

pub fn save_tensor<T: Scalar>(path: &std::path::Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    TensorRecord::from_tensor(t).write_to(&mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_record(path: &std::path::Path) -> Result<TensorRecord> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    TensorRecord::read_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn header_layout_is_exact() {
        let rec = TensorRecord { extents: vec![2, 3], data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
        let bytes = rec.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LGBP");
        assert_eq!(&bytes[4..8], &[0x01, 0x00, 2, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn rejects_foreign_dtype() {
        let mut bytes = TensorRecord { extents: vec![1], data: vec![0.5] }.to_bytes().unwrap();
        bytes[5] = 0x01;
        assert!(matches!(TensorRecord::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn lower_rank_pads_leading_dims() {
        let rec = TensorRecord { extents: vec![3, 2], data: vec![0.0; 6] };
        let t: Tensor<f32> = rec.to_tensor().unwrap();
        assert_eq!(t.dims(), [1, 1, 3, 2]);
    }

    proptest! {
        #[test]
        fn record_roundtrip(dims in proptest::collection::vec(1usize..5, 0..5), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
            let rec = TensorRecord { extents: dims, data };
            let bytes = rec.to_bytes().unwrap();
            let back = TensorRecord::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
