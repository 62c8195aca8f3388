//! Open-vocabulary pseudo-labels from the frozen Cluster-CLIP branch.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{cluster_clip_head, ClusterConfig, EmbeddingSet, FeatureMap};
use crate::numerics::{l2_normalize_rows, matmul_t, softmax_rows, AttentionParams, ParamStore, Tensor};
use crate::par::Exec;
use crate::text_table::TextTable;

pub const DEFAULT_THRESHOLD: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoConfig {
    pub threshold: f64,
    pub temperature: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            threshold: DEFAULT_THRESHOLD,
            temperature: 1.0,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("pseudo threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("pseudo temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub image_id: u64,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelRecord {
    pub fn names(&self) -> Vec<&str> {
        self.labels.iter().map(|l| l.name.as_str()).collect()
    }
}

/// Normalized vocabulary matrix, built once and shared across images.
#[derive(Clone, Debug)]
pub struct PseudoScorer {
    names: Vec<String>,
    vocab: Tensor,
    temperature: f64,
}

impl PseudoScorer {
    pub fn new(vocabulary: &TextTable, temperature: f64) -> Result<Self> {
        if vocabulary.is_empty() {
            return Err(Error::Config("pseudo vocabulary is empty".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("pseudo temperature {temperature} must be positive")));
        }
        Ok(PseudoScorer {
            names: vocabulary.entries().iter().map(|e| e.name.clone()).collect(),
            vocab: l2_normalize_rows(&vocabulary.full_matrix())?,
            temperature,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Per-category score: softmax over categories for each representative,
    /// then the maximum over representatives.
    pub fn score(&self, emb: &EmbeddingSet) -> Result<Vec<f64>> {
        if emb.y.cols() != self.vocab.cols() {
            return Err(Error::dim(
                "score_categories",
                format!("embedding width {} vs vocabulary width {}", emb.y.cols(), self.vocab.cols()),
            ));
        }
        let y = if emb.normalized { emb.y.clone() } else { l2_normalize_rows(&emb.y)? };
        let s = matmul_t(&y, false, &self.vocab, true)?.scale(1.0 / self.temperature);
        let p = softmax_rows(&s);
        let mut best = vec![0.0f64; self.names.len()];
        for r in 0..p.rows() {
            for (b, &v) in best.iter_mut().zip(p.row(r)) {
                *b = b.max(v);
            }
        }
        Ok(best)
    }

    pub fn assign(&self, image_id: u64, scores: &[f64], threshold: f64) -> PseudoLabelRecord {
        assign_pseudo_labels(image_id, &self.names, scores, threshold)
    }
}

pub fn score_categories(emb: &EmbeddingSet, vocabulary: &TextTable, temperature: f64) -> Result<Vec<f64>> {
    PseudoScorer::new(vocabulary, temperature)?.score(emb)
}

/// Keeps exactly the categories scoring strictly above `threshold`, in vocabulary order.
pub fn assign_pseudo_labels(image_id: u64, names: &[String], scores: &[f64], threshold: f64) -> PseudoLabelRecord {
    let labels = names
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s > threshold)
        .map(|(n, &s)| PseudoLabel {
            name: n.clone(),
            score: s,
        })
        .collect();
    PseudoLabelRecord { image_id, labels }
}

/// Drops vocabulary entries whose name matches a novel category, ignoring case.
pub fn filter_vocabulary<S: AsRef<str>>(table: &TextTable, exclude_novel: bool, novel_names: &[S]) -> TextTable {
    if !exclude_novel {
        return table.clone();
    }
    let novel: HashSet<String> = novel_names.iter().map(|n| n.as_ref().to_lowercase()).collect();
    table.retain(|e| !novel.contains(&e.name.to_lowercase()))
}

const CHUNK: usize = 256;

/// Pseudo-labels every image of `features`, returning records sorted by image id.
pub fn pseudo_label_dataset<I>(
    features: I,
    store: &ParamStore,
    attn: &AttentionParams,
    cluster: &ClusterConfig,
    vocabulary: &TextTable,
    cfg: &PseudoConfig,
    exec: Exec,
) -> Result<Vec<PseudoLabelRecord>>
where
    I: IntoIterator<Item = Result<FeatureMap>>,
{
    cfg.validate()?;
    let scorer = PseudoScorer::new(vocabulary, cfg.temperature)?;
    let label_one = |fm: &FeatureMap| -> Result<PseudoLabelRecord> {
        let emb = cluster_clip_head(fm, store, attn, cluster)?;
        let scores = scorer.score(&emb)?;
        Ok(scorer.assign(fm.image_id, &scores, cfg.threshold))
    };
    let mut out = Vec::new();
    let mut chunk = Vec::with_capacity(CHUNK);
    let mut iter = features.into_iter().peekable();
    while iter.peek().is_some() {
        chunk.clear();
        for fm in iter.by_ref().take(CHUNK) {
            chunk.push(fm?);
        }
        for (fm, r) in chunk.iter().zip(exec.map(&chunk, label_one)) {
            out.push(r.map_err(|e| Error::Image {
                image_id: fm.image_id,
                source: Box::new(e),
            })?);
        }
    }
    out.sort_by_key(|r| r.image_id);
    Ok(out)
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut sorted: Vec<&PseudoLabelRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.image_id);
    let mut w = crate::io::create(path)?;
    for r in sorted {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    read_jsonl(path)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = crate::io::open(path)?;
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
