//! Flat exact index over per-image embedding blocks.
//!
//! `FORI` files hold the `FORE` payload followed by an offset table:
//! `images u64 | { image_id u64 | first row u64 | rows u64 }*`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{create, open, write_all, BinReader, EmbeddingRows, FORMAT_VERSION};

pub const INDEX_MAGIC: &[u8; 4] = b"FORI";
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBlock {
    pub image_id: u64,
    pub start: usize,
    pub len: usize,
}

/// Immutable after construction; queries are plain reads.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    rows: EmbeddingRows,
    blocks: Vec<ImageBlock>,
}

fn dot(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}

impl EmbeddingIndex {
    /// Checks that rows are unit-norm and grouped into blocks of strictly
    /// increasing image id.
    pub fn build(rows: EmbeddingRows) -> Result<Self> {
        let mut blocks: Vec<ImageBlock> = Vec::new();
        for i in 0..rows.len() {
            let n = rows.row(i).iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::DegenerateRow { row: i, norm: n });
            }
            let id = rows.ids[i];
            match blocks.last_mut() {
                Some(b) if b.image_id == id => b.len += 1,
                Some(b) if b.image_id > id => {
                    return Err(Error::Contract(format!(
                        "row {i}: image {id} follows image {}; rows must be grouped by ascending image id",
                        b.image_id
                    )))
                }
                _ => blocks.push(ImageBlock {
                    image_id: id,
                    start: i,
                    len: 1,
                }),
            }
        }
        Ok(EmbeddingIndex { rows, blocks })
    }

    pub fn dim(&self) -> usize {
        self.rows.dim
    }

    pub fn n_images(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn blocks(&self) -> &[ImageBlock] {
        &self.blocks
    }

    pub fn rows(&self) -> &EmbeddingRows {
        &self.rows
    }

    fn unit_query(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(Error::dim("image_score", format!("query width {} vs index width {}", e.len(), self.dim())));
        }
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < crate::numerics::DEGENERATE_NORM {
            return Err(Error::DegenerateRow { row: 0, norm: n });
        }
        if (n - 1.0).abs() > UNIT_TOL {
            log::warn!("query has norm {n}; normalizing");
            return Ok(e.iter().map(|x| x / n).collect());
        }
        Ok(e.to_vec())
    }

    /// Maximum cosine similarity over each image's rows, in ascending image id.
    pub fn image_score(&self, e: &[f64]) -> Result<Vec<(u64, f64)>> {
        let q = self.unit_query(e)?;
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                let best = (b.start..b.start + b.len)
                    .map(|r| dot(self.rows.row(r), &q))
                    .fold(f64::NEG_INFINITY, f64::max);
                (b.image_id, best)
            })
            .collect())
    }

    /// The `k` best images by descending score; ties go to the smaller image id.
    pub fn topk(&self, e: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
        let mut scores = self.image_score(e)?;
        rank(&mut scores);
        scores.truncate(k);
        Ok(scores)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        write_all(&mut w, path, INDEX_MAGIC)?;
        write_all(&mut w, path, &FORMAT_VERSION.to_le_bytes())?;
        self.rows.write_payload(&mut w, path)?;
        let mut table = Vec::with_capacity(8 + 24 * self.blocks.len());
        table.extend_from_slice(&(self.blocks.len() as u64).to_le_bytes());
        for b in &self.blocks {
            table.extend_from_slice(&b.image_id.to_le_bytes());
            table.extend_from_slice(&(b.start as u64).to_le_bytes());
            table.extend_from_slice(&(b.len as u64).to_le_bytes());
        }
        write_all(&mut w, path, &table)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::new(open(path)?, path);
        r.magic(INDEX_MAGIC)?;
        let rows = EmbeddingRows::read_payload(&mut r)?;
        let n = r.u64("offset table size")? as usize;
        let mut stored = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            stored.push(ImageBlock {
                image_id: r.u64("block image id")?,
                start: r.u64("block start")? as usize,
                len: r.u64("block length")? as usize,
            });
        }
        r.expect_eof()?;
        let idx = Self::build(rows).map_err(|e| Error::format(path, e.to_string()))?;
        if idx.blocks != stored {
            return Err(Error::format(path, "offset table does not match the rows"));
        }
        Ok(idx)
    }
}

/// Sorts by descending score, then ascending image id.
pub fn rank(scores: &mut [(u64, f64)]) {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn unit_rows(ids: &[(u64, usize)], dim: usize, seed: u64) -> EmbeddingRows {
        let mut rng = SeedTree::new(seed).rng();
        let mut rows = EmbeddingRows::new(dim);
        for &(id, n) in ids {
            let mut data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for r in data.chunks_mut(dim) {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter_mut().for_each(|x| *x /= norm);
            }
            rows.push_block(id, &Tensor::matrix(n, dim, data).unwrap()).unwrap();
        }
        rows
    }

    #[test]
    fn exact_row_scores_one_and_orthogonal_scores_zero() {
        let mut rows = EmbeddingRows::new(2);
        rows.push_block(1, &Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        rows.push_block(5, &Tensor::matrix(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap()).unwrap();
        let idx = EmbeddingIndex::build(rows).unwrap();
        let s = idx.image_score(&[1.0, 0.0]).unwrap();
        assert_eq!(s, vec![(1, 0.0), (5, 1.0)]);
        assert_eq!(idx.topk(&[1.0, 0.0], 1).unwrap(), vec![(5, 1.0)]);
        assert_eq!(idx.topk(&[1.0, 0.0], 10).unwrap().len(), 2);
        // Scaled query is normalized.
        assert_eq!(idx.topk(&[3.0, 0.0], 1).unwrap(), vec![(5, 1.0)]);
    }

    #[test]
    fn ties_break_by_image_id() {
        let mut rows = EmbeddingRows::new(2);
        for id in [3, 7, 9] {
            rows.push_block(id, &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        }
        let idx = EmbeddingIndex::build(rows).unwrap();
        let ids: Vec<u64> = idx.topk(&[1.0, 0.0], 3).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![3, 7, 9]);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut rows = EmbeddingRows::new(2);
        rows.push_block(1, &Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.0]).unwrap()).unwrap();
        assert!(matches!(EmbeddingIndex::build(rows), Err(Error::DegenerateRow { row: 1, .. })));
        let mut rows = EmbeddingRows::new(2);
        rows.push_block(4, &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        rows.push_block(2, &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(EmbeddingIndex::build(rows).is_err());
    }

    #[test]
    fn empty_index_and_round_trip() {
        let idx = EmbeddingIndex::build(EmbeddingRows::new(4)).unwrap();
        assert!(idx.topk(&[1.0, 0.0, 0.0, 0.0], 5).unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.fori");
        idx.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p).unwrap(), idx);

        let idx = EmbeddingIndex::build(unit_rows(&[(1, 3), (2, 1), (10, 4)], 5, 3)).unwrap();
        idx.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p).unwrap(), idx);
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(EmbeddingIndex::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn builds_large_index_quickly() {
        let rows = unit_rows(&(0..2000).map(|i| (i, 50)).collect::<Vec<_>>(), 32, 1);
        let t = std::time::Instant::now();
        let idx = EmbeddingIndex::build(rows).unwrap();
        assert_eq!(idx.n_rows(), 100_000);
        assert!(t.elapsed().as_secs_f64() < 1.0, "{:?}", t.elapsed());
    }
}
