//! Dense 32-bit float tensors, rank 1 to 4, row-major with the channel axis
//! innermost. Images are `H x W x C`, conv kernels are `kh x kw x cin x cout`.
//!
//! The on-disk interchange format is DTNS (little-endian):
//!   magic `DTNS` | version `0x01` | rank u8 | rank * dims u32 | data f32

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DTNS_MAGIC: [u8; 4] = *b"DTNS";
pub const DTNS_VERSION: u8 = 0x01;

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_dims(&dims)?;
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} imply {} elements, got {}", dims, numel, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let numel: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; numel] }
    }

    /// Rank-1 single-element tensor, the shape of every reduced scalar.
    pub fn scalar(value: f32) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Height of a rank-3 image tensor.
    pub fn h(&self) -> usize {
        debug_assert_eq!(self.rank(), 3);
        self.dims[0]
    }

    /// Width of a rank-3 image tensor.
    pub fn w(&self) -> usize {
        debug_assert_eq!(self.rank(), 3);
        self.dims[1]
    }

    /// Channel count of a rank-3 image tensor.
    pub fn c(&self) -> usize {
        debug_assert_eq!(self.rank(), 3);
        self.dims[2]
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.dims[1] + x) * self.dims[2] + ch]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn write_dtns(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&DTNS_MAGIC)?;
        w.write_all(&[DTNS_VERSION, self.rank() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one DTNS-encoded tensor. `base_offset` shifts reported error
    /// offsets so nested containers (DWGT) can point into the outer file.
    pub fn read_dtns(r: &mut CountingReader<impl Read>, base_offset: u64) -> Result<Tensor> {
        let err_at = |r: &CountingReader<_>, details: String| -> Error {
            Error::format(base_offset + r.position(), details)
        };

        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic, base_offset)?;
        if magic != DTNS_MAGIC {
            return Err(Error::format(base_offset, format!("bad magic {:02x?}, want \"DTNS\"", magic)));
        }
        let mut header = [0u8; 2];
        r.read_exact_at(&mut header, base_offset)?;
        if header[0] != DTNS_VERSION {
            return Err(Error::format(base_offset + 4, format!("unsupported version 0x{:02x}", header[0])));
        }
        let rank = header[1] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(base_offset + 5, format!("rank {} outside 1..=4", rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 4];
            r.read_exact_at(&mut buf, base_offset)?;
            dims.push(u32::from_le_bytes(buf) as usize);
        }
        validate_dims(&dims).map_err(|e| err_at(r, e.to_string()))?;
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact_at(&mut buf, base_offset)?;
            data.push(f32::from_le_bytes(buf));
        }
        Ok(Tensor { dims, data })
    }

    pub fn save_dtns(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_dtns(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_dtns(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut r = CountingReader::new(BufReader::new(File::open(path)?));
        let t = Tensor::read_dtns(&mut r, 0)?;
        if r.read_one_byte()?.is_some() {
            return Err(Error::format(r.position() - 1, "trailing bytes after tensor data".to_string()));
        }
        Ok(t)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape("tensor", format!("rank {} outside 1..=4", dims.len())));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("zero-sized dim in {:?}", dims)));
    }
    let mut numel: usize = 1;
    for &d in dims {
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| Error::shape("tensor", format!("dims {:?} overflow element budget", dims)))?;
    }
    Ok(())
}

/// Reader wrapper that tracks the byte position for format error reports.
pub struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    /// read_exact that reports truncation at the absolute byte offset.
    pub fn read_exact_at(&mut self, buf: &mut [u8], base_offset: u64) -> Result<()> {
        let start = self.pos;
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                self.pos = start + filled as u64;
                return Err(Error::format(
                    base_offset + self.pos,
                    format!("unexpected end of input, wanted {} more bytes", buf.len() - filled),
                ));
            }
            filled += n;
            self.pos += n as u64;
        }
        Ok(())
    }

    /// Returns None at EOF, one byte otherwise.
    pub fn read_one_byte(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        let n = self.inner.read(&mut b)?;
        if n == 0 {
            return Ok(None);
        }
        self.pos += 1;
        Ok(Some(b[0]))
    }
}
