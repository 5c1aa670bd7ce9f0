//! Little-endian binary volume (`CBV1`) and projection (`CBP1`) files.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Unit, Volume};
use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, VolumeGrid};
use crate::projector::ProjectionStack;
use crate::scalar::Real;

const VOLUME_MAGIC: &[u8; 4] = b"CBV1";
const PROJECTION_MAGIC: &[u8; 4] = b"CBP1";
const VERSION: u32 = 1;
/// Refuse payloads above 2^32 values.
const MAX_VALUES: u64 = 1 << 32;

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| self.err(e))?;
        Ok(b)
    }

    fn err(&self, e: io::Error) -> Error {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated { path: self.path.to_path_buf() }
        } else {
            Error::io(self.path, e)
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner.read_exact(&mut raw).map_err(|e| self.err(e))?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn magic(&mut self, expected: &'static [u8; 4]) -> Result<()> {
        let m: [u8; 4] = self.bytes()?;
        if &m != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: std::str::from_utf8(expected).expect("ascii"),
            });
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format { path: self.path.to_path_buf(), detail: format!("version {v}") });
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format { path: self.path.to_path_buf(), detail: "trailing bytes".into() }),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

fn count(path: &Path, dims: &[u32]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidDimensions { path: path.to_path_buf(), detail: format!("{dims:?}") });
    }
    let n = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    match n {
        Some(n) if n <= MAX_VALUES => Ok(n as usize),
        _ => Err(Error::DimensionOverflow { path: path.to_path_buf() }),
    }
}

fn put(w: &mut impl Write, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn put_f32s<T: Real>(w: &mut impl Write, path: &Path, vals: &[T]) -> Result<()> {
    let mut raw = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        raw.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    put(w, path, &raw)
}

fn as_u32(path: &Path, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::DimensionOverflow { path: path.to_path_buf() })
}

pub fn write_volume<T: Real>(w: &mut impl Write, path: &Path, v: &Volume<T>) -> Result<()> {
    put(w, path, VOLUME_MAGIC)?;
    let g = v.grid;
    for x in [VERSION, as_u32(path, g.nx)?, as_u32(path, g.ny)?, as_u32(path, g.nz)?] {
        put(w, path, &x.to_le_bytes())?;
    }
    put(w, path, &(g.voxel_mm as f32).to_le_bytes())?;
    put(w, path, &v.unit.code().to_le_bytes())?;
    put_f32s(w, path, v.values())
}

pub fn read_volume(r: impl Read, path: &Path) -> Result<Volume<f32>> {
    let mut r = Reader { inner: r, path };
    r.magic(VOLUME_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let n = count(path, &dims)?;
    let voxel = r.f32()?;
    let code = r.u32()?;
    let unit = Unit::from_code(code)
        .ok_or_else(|| Error::Format { path: path.to_path_buf(), detail: format!("unit code {code}") })?;
    let grid = VolumeGrid::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, voxel as f64)
        .map_err(|e| Error::InvalidDimensions { path: path.to_path_buf(), detail: e.to_string() })?;
    let values = r.f32s(n)?;
    r.expect_eof()?;
    Volume::new(grid, unit, values)
}

pub fn write_projections<T: Real>(w: &mut impl Write, path: &Path, p: &ProjectionStack<T>) -> Result<()> {
    let g = &p.geometry;
    put(w, path, PROJECTION_MAGIC)?;
    for x in [VERSION, as_u32(path, g.n_views())?, as_u32(path, g.det_rows)?, as_u32(path, g.det_cols)?] {
        put(w, path, &x.to_le_bytes())?;
    }
    for x in [g.det_pixel_mm, g.sid_mm, g.sdd_mm] {
        put(w, path, &(x as f32).to_le_bytes())?;
    }
    let angles: Vec<f64> = g.angles_deg.clone();
    put_f32s(w, path, &angles)?;
    put_f32s(w, path, p.data())
}

pub fn read_projections(r: impl Read, path: &Path) -> Result<ProjectionStack<f32>> {
    let mut r = Reader { inner: r, path };
    r.magic(PROJECTION_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let n = count(path, &dims)?;
    let pitch = r.f32()?;
    let sid = r.f32()?;
    let sdd = r.f32()?;
    let angles: Vec<f64> = r.f32s(dims[0] as usize)?.into_iter().map(f64::from).collect();
    let geometry = ConeBeamGeometry::new(sid as f64, sdd as f64, dims[1] as usize, dims[2] as usize, pitch as f64, angles)
        .map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })?;
    let data = r.f32s(n)?;
    r.expect_eof()?;
    ProjectionStack::new(geometry, data)
        .map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn save_volume<T: Real>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_volume(&mut w, path, v)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    let path = path.as_ref();
    read_volume(open(path)?, path)
}

pub fn save_projections<T: Real>(path: impl AsRef<Path>, p: &ProjectionStack<T>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_projections(&mut w, path, p)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_projections(path: impl AsRef<Path>) -> Result<ProjectionStack<f32>> {
    let path = path.as_ref();
    read_projections(open(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;
    use crate::geometry::equiangular_angles;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    fn volume_bytes() -> Vec<u8> {
        let g = VolumeGrid::new(3, 4, 5, 2.5).unwrap();
        let v = generate_phantom::<f32>(1, &g);
        let mut buf = Vec::new();
        write_volume(&mut buf, p(), &v).unwrap();
        buf
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let g = VolumeGrid::new(3, 4, 5, 2.5).unwrap();
        let mut v = generate_phantom::<f32>(1, &g);
        v.values_mut()[7] = -0.123_456_79;
        let mut buf = Vec::new();
        write_volume(&mut buf, p(), &v).unwrap();
        assert_eq!(buf.len(), 4 + 4 * 4 + 4 + 4 + 60 * 4);
        let back = read_volume(&buf[..], p()).unwrap();
        assert_eq!(back, v);
        assert!(back.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let b = volume_bytes();
        assert_eq!(&b[..4], b"CBV1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 2.5);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 0);
    }

    #[test]
    fn distinct_errors() {
        let mut b = volume_bytes();
        b[0] = b'X';
        assert!(matches!(read_volume(&b[..], p()), Err(Error::BadMagic { .. })));

        let b = volume_bytes();
        assert!(matches!(read_volume(&b[..b.len() - 3], p()), Err(Error::Truncated { .. })));

        let mut b = volume_bytes();
        b[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_volume(&b[..], p()), Err(Error::InvalidDimensions { .. })));

        let mut b = volume_bytes();
        for off in [8, 12, 16] {
            b[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(read_volume(&b[..], p()), Err(Error::DimensionOverflow { .. })));
    }

    #[test]
    fn projection_round_trip() {
        let g = ConeBeamGeometry::new(160.0, 400.0, 3, 5, 1.25, equiangular_angles(4).unwrap()).unwrap();
        let data: Vec<f32> = (0..g.n_pixels()).map(|i| i as f32 * 0.37 - 2.0).collect();
        let s = ProjectionStack::new(g, data).unwrap();
        let mut buf = Vec::new();
        write_projections(&mut buf, p(), &s).unwrap();
        assert_eq!(&buf[..4], b"CBP1");
        let back = read_projections(&buf[..], p()).unwrap();
        assert_eq!(back, s);

        buf[1] = b'Z';
        assert!(matches!(read_projections(&buf[..], p()), Err(Error::BadMagic { .. })));
    }
}
