//! Dense row-major tensors and the binary tensor container.
//!
//! Container layout: 8-byte magic, a little-endian `u32` header length, the
//! UTF-8 header `dtype=f32;shape=d0,d1,...`, then the float32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 8] = b"SDGTNSR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return invalid(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Dimensions of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => invalid(format!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => invalid(format!("expected a rank-2 tensor, got shape {:?}", self.shape)),
        }
    }

    /// Rows `idx` of the leading axis, stacked in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| Error::InvalidArgument("scalar has no rows".into()))?;
        let stride = self.data.len() / lead.max(1);
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= lead {
                return invalid(format!("row {i} out of range for {lead} rows"));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    /// Values rounded through float32, the container's storage precision.
    pub fn round_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
        self
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn header(t: &Tensor) -> String {
    let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
    format!("dtype=f32;shape={}", dims.join(","))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let h = header(t);
    w.write_all(MAGIC)?;
    w.write_all(&(h.len() as u32).to_le_bytes())?;
    w.write_all(h.as_bytes())?;
    let mut payload = Vec::with_capacity(t.data.len() * 4);
    for &v in &t.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated tensor {what}")),
        _ => Error::Io(e),
    })
}

fn parse_header(h: &str) -> Result<Vec<usize>> {
    let mut dtype = None;
    let mut shape = None;
    for field in h.split(';') {
        match field.split_once('=') {
            Some(("dtype", v)) => dtype = Some(v),
            Some(("shape", "")) => shape = Some(vec![]),
            Some(("shape", v)) => {
                let dims = v
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension {d:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
            }
            _ => return Err(Error::Format(format!("unrecognized header field {field:?}"))),
        }
    }
    match (dtype, shape) {
        (Some("f32"), Some(shape)) => Ok(shape),
        (Some(d), Some(_)) => Err(Error::Format(format!("unsupported dtype {d:?}"))),
        _ => Err(Error::Format(format!("incomplete header {h:?}"))),
    }
}

/// Reads one tensor; `Ok(None)` on a clean end of stream.
pub fn read_tensor_opt<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut magic[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    if filled == 0 {
        return Ok(None);
    }
    if filled < 8 || &magic != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let mut len = [0u8; 4];
    read_exact_or_format(r, &mut len, "header length")?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut h = vec![0u8; len];
    read_exact_or_format(r, &mut h, "header")?;
    let h = String::from_utf8(h).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let shape = parse_header(&h)?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact_or_format(r, &mut payload, "payload")?;
    let data = payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    Ok(Some(Tensor { shape, data }))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    read_tensor_opt(r)?.ok_or_else(|| Error::Format("empty tensor stream".into()))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    save_all(path, std::slice::from_ref(t))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    if read_tensor_opt(&mut r)?.is_some() {
        return Err(Error::Format(format!("{} holds more than one tensor", path.display())));
    }
    Ok(t)
}

/// Concatenated containers, used for checkpoints.
pub fn save_all(path: &Path, ts: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in ts {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_all(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_tensor_opt(&mut r)? {
        out.push(t);
    }
    Ok(out)
}
