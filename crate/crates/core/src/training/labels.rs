//! Label records, semi-supervised splits and negative sampling.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{TargetSet, TargetSource};
use crate::rng::SeedTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: u64,
    pub categories: Vec<String>,
    /// Categories annotated as absent.
    #[serde(default)]
    pub neg_categories: Vec<String>,
    #[serde(default = "yes")]
    pub labeled: bool,
}

fn yes() -> bool {
    true
}

impl LabelRecord {
    pub fn validate(&self) -> Result<()> {
        let pos: HashSet<&str> = self.categories.iter().map(String::as_str).collect();
        if pos.len() != self.categories.len() {
            return Err(Error::Contract(format!("image {} repeats a category", self.image_id)));
        }
        if let Some(n) = self.neg_categories.iter().find(|n| pos.contains(n.as_str())) {
            return Err(Error::Contract(format!("image {}: {n:?} is both positive and negative", self.image_id)));
        }
        if !self.labeled && !self.categories.is_empty() {
            return Err(Error::Contract(format!("unlabeled image {} carries categories", self.image_id)));
        }
        Ok(())
    }
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut w = crate::io::create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let recs: Vec<LabelRecord> = crate::pseudo_labels::read_jsonl(path)?;
    for r in &recs {
        r.validate().map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(recs)
}

/// Number of labeled images for `fraction` of `n`: floor, but at least one.
pub fn labeled_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).max(1).min(n)
}

/// Flags a uniformly random `fraction` of `records` as labeled. Unlabeled
/// records lose their annotations.
pub fn make_semi_split(records: &[LabelRecord], fraction: f64, fold_seed: u64) -> Result<Vec<LabelRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("train.labeled_fraction {fraction} outside (0, 1]")));
    }
    if records.is_empty() {
        return Err(Error::Config("no records to split into labeled and unlabeled".into()));
    }
    let n_labeled = labeled_count(fraction, records.len());
    let mut rng = SeedTree::new(fold_seed).child("semi_split").rng();
    let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, records.len(), n_labeled).into_iter().collect();
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if chosen.contains(&i) {
                LabelRecord {
                    labeled: true,
                    ..r.clone()
                }
            } else {
                LabelRecord {
                    image_id: r.image_id,
                    categories: Vec::new(),
                    neg_categories: Vec::new(),
                    labeled: false,
                }
            }
        })
        .collect())
}

/// Sampling weight per vocabulary entry: one plus the number of labeled images containing it.
pub fn category_frequencies(records: &[LabelRecord], vocabulary: &[String]) -> Vec<f64> {
    let mut counts: HashMap<&str, f64> = HashMap::new();
    for r in records.iter().filter(|r| r.labeled) {
        for c in &r.categories {
            *counts.entry(c.as_str()).or_default() += 1.0;
        }
    }
    vocabulary.iter().map(|v| 1.0 + counts.get(v.as_str()).copied().unwrap_or(0.0)).collect()
}

/// Supervised targets of `record` with its annotated negatives topped up by
/// frequency-weighted samples from `vocabulary` until there are `min_total`.
///
/// Returns whether the vocabulary was too small to reach `min_total`.
pub fn sample_federated_negatives(
    record: &LabelRecord,
    vocabulary: &[String],
    weights: &[f64],
    min_total: usize,
    rng: &mut impl Rng,
) -> Result<(TargetSet, bool)> {
    if vocabulary.len() != weights.len() {
        return Err(Error::dim("sample_federated_negatives", "one weight per vocabulary entry"));
    }
    let positives: HashSet<&str> = record.categories.iter().map(String::as_str).collect();
    let mut negatives: Vec<String> = record.neg_categories.clone();
    let taken: HashSet<String> = negatives.iter().cloned().collect();
    let need = min_total.saturating_sub(negatives.len());
    let mut short = false;
    if need > 0 {
        let pool: Vec<usize> = (0..vocabulary.len())
            .filter(|&i| !positives.contains(vocabulary[i].as_str()) && !taken.contains(&vocabulary[i]))
            .collect();
        short = pool.len() < need;
        let picked: Vec<usize> = pool
            .choose_multiple_weighted(rng, need.min(pool.len()), |&i| weights[i])
            .map_err(|e| Error::Config(format!("negative sampling weights: {e}")))?
            .copied()
            .collect();
        negatives.extend(picked.into_iter().map(|i| vocabulary[i].clone()));
    }
    Ok((TargetSet::new(record.categories.clone(), negatives, TargetSource::Supervised)?, short))
}

/// Pseudo targets with `m` uniformly sampled vocabulary negatives (all of
/// them when `m` is `None`).
pub fn sample_pseudo_negatives(
    positives: &[String],
    vocabulary: &[String],
    m: Option<usize>,
    rng: &mut impl Rng,
) -> Result<TargetSet> {
    let pos: HashSet<&str> = positives.iter().map(String::as_str).collect();
    let pool: Vec<&String> = vocabulary.iter().filter(|v| !pos.contains(v.as_str())).collect();
    let negatives: Vec<String> = match m {
        None => pool.into_iter().cloned().collect(),
        Some(m) => pool.choose_multiple(rng, m.min(pool.len())).map(|s| (*s).clone()).collect(),
    };
    TargetSet::new(positives.to_vec(), negatives, TargetSource::Pseudo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, cats: &[&str], neg: &[&str]) -> LabelRecord {
        LabelRecord {
            image_id: id,
            categories: cats.iter().map(|s| s.to_string()).collect(),
            neg_categories: neg.iter().map(|s| s.to_string()).collect(),
            labeled: true,
        }
    }

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn semi_split_counts_and_folds() {
        let recs: Vec<_> = (0..2000).map(|i| rec(i, &["c1"], &["c2"])).collect();
        let all = make_semi_split(&recs, 1.0, 0).unwrap();
        assert!(all.iter().all(|r| r.labeled));
        let some = make_semi_split(&recs, 0.01, 0).unwrap();
        assert_eq!(some.iter().filter(|r| r.labeled).count(), 20);
        assert!(some.iter().filter(|r| !r.labeled).all(|r| r.categories.is_empty() && r.validate().is_ok()));
        assert_eq!(labeled_count(0.29, 100), 29);
        assert_eq!(labeled_count(1e-6, 10), 1);
        let folds: HashSet<Vec<u64>> = (0..5)
            .map(|s| {
                make_semi_split(&recs, 0.05, s).unwrap().iter().filter(|r| r.labeled).map(|r| r.image_id).collect()
            })
            .collect();
        assert_eq!(folds.len(), 5);
        assert!(make_semi_split(&recs, 0.0, 0).is_err());
        assert!(make_semi_split(&recs, 1.5, 0).is_err());
        assert!(make_semi_split(&[], 0.5, 0).is_err());
    }

    #[test]
    fn negatives_top_up_and_stay_disjoint() {
        let v = vocab(30);
        let w = vec![1.0; 30];
        let r = rec(0, &["c0", "c1"], &["c2"]);
        let (t, short) = sample_federated_negatives(&r, &v, &w, 0, &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(t.negatives, vec!["c2"]);
        assert!(!short);
        let (t, short) = sample_federated_negatives(&r, &v, &w, 10, &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(t.negatives.len(), 10);
        assert!(!short);
        let (t, short) = sample_federated_negatives(&r, &v, &w, 50, &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(t.negatives.len(), 28);
        assert!(short);

        let mut rng = SeedTree::new(1).rng();
        for _ in 0..10_000 {
            let (t, _) = sample_federated_negatives(&r, &v, &w, 5, &mut rng).unwrap();
            assert!(t.negatives.iter().all(|n| n != "c0" && n != "c1"));
        }
    }

    #[test]
    fn frequent_categories_are_sampled_more() {
        let v = vocab(3);
        let recs: Vec<_> = (0..50).map(|i| rec(i, &["c1"], &[])).collect();
        let w = category_frequencies(&recs, &v);
        assert_eq!(w, vec![1.0, 51.0, 1.0]);
        let mut rng = SeedTree::new(2).rng();
        let mut hits = 0;
        for _ in 0..1000 {
            let (t, _) = sample_federated_negatives(&rec(0, &[], &[]), &v, &w, 1, &mut rng).unwrap();
            hits += (t.negatives[0] == "c1") as usize;
        }
        assert!(hits > 900, "{hits}");
    }

    #[test]
    fn pseudo_negatives() {
        let v = vocab(10);
        let pos = vec!["c3".to_string()];
        let t = sample_pseudo_negatives(&pos, &v, Some(4), &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(t.negatives.len(), 4);
        assert!(!t.negatives.contains(&"c3".to_string()));
        let t = sample_pseudo_negatives(&pos, &v, None, &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(t.negatives.len(), 9);
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let recs = vec![rec(1, &["a"], &["b"]), rec(2, &[], &[])];
        write_labels(&p, &recs).unwrap();
        assert_eq!(read_labels(&p).unwrap(), recs);
        std::fs::write(&p, "{\"image_id\":1,\"categories\":[\"a\"],\"neg_categories\":[\"a\"],\"labeled\":true}\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Format { .. })));
    }
}
