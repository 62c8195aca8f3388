//! Binary feature (`FORF`) and embedding (`FORE`) files.
//!
//! All integers and floats are little-endian; values are stored as `f32`.
//!
//! ```text
//! FORF: "FORF" | version u32 | images u32 | { image_id u64 | K u32 | C_e u32 | K·C_e f32 }*
//! FORE: "FORE" | version u32 | C_o u32 | rows u64 | { image_id u64 | C_o f32 }*
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::FeatureMap;
use crate::numerics::Tensor;

pub const FEATURES_MAGIC: &[u8; 4] = b"FORF";
pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"FORE";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct BinReader<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> BinReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        BinReader {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }

    pub(crate) fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(&self.path, format!("truncated while reading {what}"))
            } else {
                Error::io(&self.path, e)
            }
        })?;
        Ok(buf)
    }

    pub(crate) fn vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(&self.path, format!("truncated while reading {what}"))
            } else {
                Error::io(&self.path, e)
            }
        })?;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let buf = self.vec(n * 4, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.bytes::<4>("magic")?;
        if &m != expect {
            return Err(Error::format(
                &self.path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(expect)),
            ));
        }
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(&self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(&self.path, "trailing bytes after payload")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_all(w: &mut impl Write, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

/// Rounds every value to the nearest `f32`, matching what a file round trip yields.
pub fn round_to_f32(t: &Tensor) -> Tensor {
    t.map(|x| x as f32 as f64)
}

pub fn write_features(path: &Path, images: &[FeatureMap]) -> Result<()> {
    let mut w = create(path)?;
    let count = u32::try_from(images.len()).map_err(|_| Error::Config("too many images for FORF".into()))?;
    let mut header = Vec::with_capacity(12);
    header.extend_from_slice(FEATURES_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&count.to_le_bytes());
    write_all(&mut w, path, &header)?;
    for fm in images {
        let mut rec = Vec::with_capacity(16 + fm.x.len() * 4);
        rec.extend_from_slice(&fm.image_id.to_le_bytes());
        rec.extend_from_slice(&(fm.tokens() as u32).to_le_bytes());
        rec.extend_from_slice(&(fm.width() as u32).to_le_bytes());
        rec.extend(f32_bytes(fm.x.data().iter().map(|&v| v as f32)));
        write_all(&mut w, path, &rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Streaming reader over a `FORF` file.
pub struct FeatureReader {
    r: BinReader<BufReader<File>>,
    remaining: u32,
    failed: bool,
}

impl FeatureReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut r = BinReader::new(open(path)?, path);
        r.magic(FEATURES_MAGIC)?;
        let remaining = r.u32("image count")?;
        Ok(FeatureReader {
            r,
            remaining,
            failed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.remaining as usize
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }

    fn next_image(&mut self) -> Result<FeatureMap> {
        let id = self.r.u64("image id")?;
        let ctx = |e: Error| Error::Image {
            image_id: id,
            source: Box::new(e),
        };
        let k = self.r.u32("token count").map_err(ctx)? as usize;
        let c = self.r.u32("channel count").map_err(ctx)? as usize;
        if k == 0 || c == 0 {
            return Err(ctx(Error::format(self.r.path(), "empty feature map")));
        }
        let vals = self.r.f32s(k * c, "features").map_err(ctx)?;
        let x = Tensor::matrix(k, c, vals.into_iter().map(f64::from).collect()).map_err(ctx)?;
        FeatureMap::new(id, x).map_err(ctx)
    }
}

impl Iterator for FeatureReader {
    type Item = Result<FeatureMap>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        self.remaining -= 1;
        let item = self.next_image();
        if item.is_err() {
            self.failed = true;
        } else if self.remaining == 0 {
            if let Err(e) = self.r.expect_eof() {
                self.failed = true;
                return Some(Err(e));
            }
        }
        Some(item)
    }
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureMap>> {
    FeatureReader::open(path)?.collect()
}

/// Flat table of `(image_id, embedding)` rows, grouped by image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRows {
    pub dim: usize,
    pub ids: Vec<u64>,
    pub values: Vec<f32>,
}

impl EmbeddingRows {
    pub fn new(dim: usize) -> Self {
        EmbeddingRows {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends every row of `t` under `image_id`.
    pub fn push_block(&mut self, image_id: u64, t: &Tensor) -> Result<()> {
        if t.cols() != self.dim {
            return Err(Error::dim("EmbeddingRows", format!("width {} vs {}", t.cols(), self.dim)));
        }
        for r in 0..t.rows() {
            self.ids.push(image_id);
            self.values.extend(t.row(r).iter().map(|&v| v as f32));
        }
        Ok(())
    }

    pub(crate) fn write_payload(&self, w: &mut impl Write, path: &Path) -> Result<()> {
        write_all(w, path, &(self.dim as u32).to_le_bytes())?;
        write_all(w, path, &(self.ids.len() as u64).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = Vec::with_capacity(8 + self.dim * 4);
            rec.extend_from_slice(&id.to_le_bytes());
            rec.extend(f32_bytes(self.row(i).iter().copied()));
            write_all(w, path, &rec)?;
        }
        Ok(())
    }

    pub(crate) fn read_payload<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        let dim = r.u32("embedding width")? as usize;
        let n = r.u64("row count")? as usize;
        if dim == 0 && n > 0 {
            return Err(Error::format(r.path(), "zero embedding width"));
        }
        let mut out = EmbeddingRows::new(dim);
        for _ in 0..n {
            out.ids.push(r.u64("row image id")?);
            out.values.extend(r.f32s(dim, "row values")?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        write_all(&mut w, path, EMBEDDINGS_MAGIC)?;
        write_all(&mut w, path, &FORMAT_VERSION.to_le_bytes())?;
        self.write_payload(&mut w, path)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::new(open(path)?, path);
        r.magic(EMBEDDINGS_MAGIC)?;
        let out = Self::read_payload(&mut r)?;
        r.expect_eof()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip_and_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.forf");
        let a = FeatureMap::new(3, Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 8.0]).unwrap()).unwrap();
        let b = FeatureMap::new(9, Tensor::matrix(1, 2, vec![0.1f32 as f64, 2.0]).unwrap()).unwrap();
        write_features(&p, &[a.clone(), b.clone()]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FORF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + (16 + 16) + (16 + 8));
        assert_eq!(read_features(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.forf");
        let a = FeatureMap::new(1, Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        write_features(&p, &[a]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_features(&p).unwrap_err();
        assert!(matches!(err, Error::Image { image_id: 1, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.fore");
        let mut rows = EmbeddingRows::new(2);
        rows.push_block(4, &Tensor::matrix(2, 2, vec![0.6, 0.8, 1.0, 0.0]).unwrap()).unwrap();
        rows.save(&p).unwrap();
        assert_eq!(EmbeddingRows::load(&p).unwrap(), rows);
        let empty = EmbeddingRows::new(2);
        empty.save(&p).unwrap();
        assert!(EmbeddingRows::load(&p).unwrap().is_empty());
    }
}
