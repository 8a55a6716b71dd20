//! Dense row-major `f64` tensors and the `BSFT` binary container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"BSFT" | version: u16 | rank: u16 | extents: rank x u64 | data: numel x f64
//! ```

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

pub const BSFT_MAGIC: &[u8; 4] = b"BSFT";
pub const BSFT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for call sites that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape("dims4", &self.shape, &[0, 0, 0, 0])),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Channel slice `[start, start+len)` of a rank-4 tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(Error::shape("narrow_channels", &self.shape, &[start + len]));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor::from_parts(vec![b, len, h, w], out))
    }

    /// Sample `index` of the batch axis, keeping a leading extent of one.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_parts(shape, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Stack equal-shape tensors with a leading extent of one along axis 0.
    pub fn cat_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cat_batch of nothing".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut total = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("cat_batch", &first.shape, &t.shape));
            }
            total += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        shape[0] = total;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn write_bsft<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BSFT_MAGIC)?;
        w.write_all(&BSFT_VERSION.to_le_bytes())?;
        let rank = u16::try_from(self.shape.len())
            .map_err(|_| Error::InvalidArgument("rank exceeds u16".into()))?;
        w.write_all(&rank.to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_bsft<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BSFT_MAGIC {
            return Err(Error::MalformedHeader(format!("bad tensor magic {magic:?}")));
        }
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let version = u16::from_le_bytes(u16buf);
        if version != BSFT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported tensor container version {version}"
            )));
        }
        r.read_exact(&mut u16buf)?;
        let rank = u16::from_le_bytes(u16buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n = numel(&shape);
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}
