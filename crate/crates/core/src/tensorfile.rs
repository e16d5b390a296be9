//! `.nrit` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | field                                  |
//! |----------------|----------------------------------------|
//! | 4              | magic `NRIT`                           |
//! | 2 (`u16`)      | version, currently 1                   |
//! | 1 (`u8`)       | dtype tag: 0 = f32, 1 = f64, 2 = i32   |
//! | 1 (`u8`)       | rank                                   |
//! | 8 × rank       | extents (`u64` each)                   |
//! | payload        | row-major elements                     |
//!
//! Records are self-delimiting, so several can be concatenated in one file
//! (checkpoints do this).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NRIT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Data(format!(
                "tensor shape {shape:?} with {} elements",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Data(format!("rank {} too large", shape.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_array(a: &Array) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: TensorData::F64(a.data().to_vec()),
        }
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Tensor::new(shape, TensorData::I32(data))
    }

    /// Converts float payloads to an [`Array`].
    pub fn to_array(&self) -> Result<Array> {
        let data = match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(_) => {
                return Err(Error::Data("expected a float tensor, found i32".into()))
            }
        };
        Array::new(self.shape.clone(), data)
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            _ => Err(Error::Data("expected an i32 tensor".into())),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.data.tag(), self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)
    }

    /// Reads one record; `Ok(None)` at a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        match read_exact_or_eof(r, &mut magic)? {
            false => return Ok(None),
            true if &magic != MAGIC => return Err(Error::Data(format!("bad magic {magic:?}"))),
            true => {}
        }
        let mut head = [0u8; 4];
        r.read_exact(&mut head).map_err(truncated)?;
        let version = u16::from_le_bytes([head[0], head[1]]);
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported tensor file version {version}"
            )));
        }
        let (tag, rank) = (head[2], head[3] as usize);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            shape.push(
                usize::try_from(u64::from_le_bytes(b))
                    .map_err(|_| Error::Data("extent overflow".into()))?,
            );
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Data("element count overflow".into()))?;
        let width = match tag {
            0 | 2 => 4,
            1 => 8,
            _ => return Err(Error::Data(format!("unknown dtype tag {tag}"))),
        };
        let mut bytes = vec![0u8; count * width];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = match tag {
            0 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Some(Tensor { shape, data }))
    }
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Data("truncated tensor record".into())
    } else {
        Error::Io(e)
    }
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Data("truncated tensor record".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save(path: &Path, tensor: &Tensor) -> Result<()> {
    save_all(path, std::slice::from_ref(tensor))
}

pub fn save_all(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        t.write_to(&mut buf)?;
    }
    write_atomic(path, &buf)
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut all = load_all(path)?;
    match all.len() {
        1 => Ok(all.pop().unwrap()),
        n => Err(Error::Data(format!(
            "{}: expected one tensor, found {n}",
            path.display()
        ))),
    }
}

pub fn load_all(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    let mut cursor = io::Cursor::new(bytes);
    let mut out = Vec::new();
    while let Some(t) = Tensor::read_from(&mut cursor)? {
        out.push(t);
    }
    Ok(out)
}
