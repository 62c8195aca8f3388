//! AP@k and per-split mean AP reports.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::index::EmbeddingIndex;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::text_table::{Split, TextTable};
use crate::training::LabelRecord;

pub const DEFAULT_K: usize = 50;

/// Average precision over the first `k` ranks, normalized by
/// `min(|positives|, k)`. `None` when there are no positives.
pub fn ap_at_k(ranking: &[u64], positives: &HashSet<u64>, k: usize) -> Option<f64> {
    if positives.is_empty() || k == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().take(k).enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / positives.len().min(k) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub name: String,
    pub split: Split,
    pub positives: usize,
    /// AP@k ×100; absent when the category has no positive image.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub checkpoint_digest: Option<String>,
    pub map_base: Option<f64>,
    pub map_novel: Option<f64>,
    pub map_all: Option<f64>,
    pub categories: Vec<CategoryAp>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Ranks every image for each base and novel category and reports AP@k.
pub fn evaluate(index: &EmbeddingIndex, table: &TextTable, labels: &[LabelRecord], k: usize, exec: Exec) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("eval.k must be at least 1".into()));
    }
    let missing: BTreeSet<String> = labels
        .iter()
        .flat_map(|l| &l.categories)
        .filter(|c| table.get(c).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCategories(missing.into_iter().collect()));
    }
    let mut positives: HashMap<&str, HashSet<u64>> = HashMap::new();
    for l in labels {
        for c in &l.categories {
            positives.entry(c.as_str()).or_default().insert(l.image_id);
        }
    }
    let cats: Vec<_> = table
        .entries()
        .iter()
        .filter(|e| matches!(e.split, Split::Base | Split::Novel))
        .collect();
    let empty = HashSet::new();
    let per_cat = exec.map(&cats, |e| -> Result<CategoryAp> {
        let pos = positives.get(e.name.as_str()).unwrap_or(&empty);
        let ranking: Vec<u64> = index.topk(&e.embedding, k)?.into_iter().map(|(id, _)| id).collect();
        Ok(CategoryAp {
            name: e.name.clone(),
            split: e.split,
            positives: pos.len(),
            ap: ap_at_k(&ranking, pos, k).map(|a| 100.0 * a),
        })
    });
    let categories = per_cat.into_iter().collect::<Result<Vec<_>>>()?;
    let skipped = categories.iter().filter(|c| c.ap.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} categories have no positive image and are left out of the means");
    }
    let split_mean = |s: Option<Split>| {
        mean(categories.iter().filter(|c| s.is_none_or(|s| c.split == s)).filter_map(|c| c.ap))
    };
    Ok(EvalReport {
        k,
        checkpoint_digest: None,
        map_base: split_mean(Some(Split::Base)),
        map_novel: split_mean(Some(Split::Novel)),
        map_all: split_mean(None),
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::EmbeddingRows;
    use crate::numerics::Tensor;
    use crate::text_table::TextEntry;

    fn set(ids: &[u64]) -> HashSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn ap_hand_values() {
        let ap = ap_at_k(&[10, 11, 12, 13], &set(&[10, 12]), 50).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        let ranking: Vec<u64> = (0..60).collect();
        assert_eq!(ap_at_k(&ranking, &(0..70).collect(), 50), Some(1.0));
        assert_eq!(ap_at_k(&ranking[10..], &set(&[1, 2]), 50), Some(0.0));
        assert_eq!(ap_at_k(&ranking, &set(&[]), 50), None);
    }

    fn one_hot_table() -> TextTable {
        let e = |i: usize| (0..4).map(|j| (i == j) as u8 as f64).collect::<Vec<_>>();
        TextTable::new(vec![
            TextEntry {
                name: "b0".into(),
                split: Split::Base,
                embedding: e(0),
            },
            TextEntry {
                name: "b1".into(),
                split: Split::Base,
                embedding: e(1),
            },
            TextEntry {
                name: "n0".into(),
                split: Split::Novel,
                embedding: e(2),
            },
            TextEntry {
                name: "p0".into(),
                split: Split::Pseudo,
                embedding: e(3),
            },
        ])
        .unwrap()
    }

    #[test]
    fn perfect_oracle_scores_100() {
        let t = one_hot_table();
        let mut rows = EmbeddingRows::new(4);
        let mut labels = Vec::new();
        for id in 0..30u64 {
            let c = ["b0", "b1", "n0"][id as usize % 3];
            rows.push_block(id, &Tensor::matrix(1, 4, t.embedding(c).unwrap().to_vec()).unwrap()).unwrap();
            labels.push(LabelRecord {
                image_id: id,
                categories: vec![c.to_string()],
                neg_categories: vec![],
                labeled: true,
            });
        }
        let idx = EmbeddingIndex::build(rows).unwrap();
        let r = evaluate(&idx, &t, &labels, 50, Exec::Sequential).unwrap();
        assert_eq!((r.map_base, r.map_novel, r.map_all), (Some(100.0), Some(100.0), Some(100.0)));
        assert_eq!(r.categories.len(), 3);
        let again = evaluate(&idx, &t, &labels, 50, Exec::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());

        labels[0].categories.push("zebra".into());
        assert!(matches!(evaluate(&idx, &t, &labels, 50, Exec::Sequential), Err(Error::MissingCategories(v)) if v == ["zebra"]));
    }
}
