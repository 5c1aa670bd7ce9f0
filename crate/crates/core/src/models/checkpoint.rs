//! `CBK1` checkpoint files: the resolved config text, named `f32` tensors
//! and an optional optimizer-state section with the same tensor encoding.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

const MAGIC: &[u8; 4] = b"CBK1";
const VERSION: u32 = 1;
const MAX_TEXT: u32 = 1 << 24;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: NamedTensors,
    pub optimizer: Option<NamedTensors>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        write_checkpoint(&mut w, path, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        read_checkpoint(r, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put(w: &mut impl Write, path: &Path, b: &[u8]) -> Result<()> {
    w.write_all(b).map_err(|e| Error::io(path, e))
}

fn put_u32(w: &mut impl Write, path: &Path, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimensionOverflow { path: path.to_path_buf() })?;
    put(w, path, &v.to_le_bytes())
}

fn put_tensors(w: &mut impl Write, path: &Path, tensors: &NamedTensors) -> Result<()> {
    put_u32(w, path, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, path, name.len())?;
        put(w, path, name.as_bytes())?;
        put_u32(w, path, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, path, d)?;
        }
        let mut raw = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        put(w, path, &raw)?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, path: &Path, ck: &Checkpoint) -> Result<()> {
    put(w, path, MAGIC)?;
    put(w, path, &VERSION.to_le_bytes())?;
    put_u32(w, path, ck.config_text.len())?;
    put(w, path, ck.config_text.as_bytes())?;
    put_tensors(w, path, &ck.tensors)?;
    match &ck.optimizer {
        None => put(w, path, &[0]),
        Some(opt) => {
            put(w, path, &[1])?;
            put_tensors(w, path, opt)
        }
    }
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Truncated { path: self.path.to_path_buf() }
            } else {
                Error::io(self.path, e)
            }
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), detail: detail.into() }
    }

    fn text(&mut self, max: u32) -> Result<String> {
        let n = self.u32()?;
        if n > max {
            return Err(self.format(format!("string of {n} bytes")));
        }
        let mut b = vec![0u8; n as usize];
        self.fill(&mut b)?;
        String::from_utf8(b).map_err(|_| self.format("invalid UTF-8"))
    }

    fn tensors(&mut self) -> Result<NamedTensors> {
        let n = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..n {
            let name = self.text(4096)?;
            let rank = self.u32()?;
            if rank > MAX_RANK {
                return Err(self.format(format!("tensor {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(self.u32()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= 1 << 32)
                .ok_or_else(|| Error::DimensionOverflow { path: self.path.to_path_buf() })?;
            let mut raw = vec![0u8; count * 4];
            self.fill(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            out.push((name, Tensor::new(dims, data)?));
        }
        Ok(out)
    }
}

pub fn read_checkpoint(r: impl Read, path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { inner: r, path };
    let mut magic = [0u8; 4];
    r.fill(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "CBK1" });
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(r.format(format!("version {v}")));
    }
    let config_text = r.text(MAX_TEXT)?;
    let tensors = r.tensors()?;
    let mut flag = [0u8; 1];
    r.fill(&mut flag)?;
    let optimizer = match flag[0] {
        0 => None,
        1 => Some(r.tensors()?),
        f => return Err(r.format(format!("optimizer flag {f}"))),
    };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(r.format("trailing bytes"));
    }
    Ok(Checkpoint { config_text, tensors, optimizer })
}
