//! Category names with their text embeddings.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
    Pseudo,
    NoObject,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
            Split::Pseudo => "pseudo",
            Split::NoObject => "no_object",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEntry {
    pub name: String,
    pub split: Split,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextTable {
    entries: Vec<TextEntry>,
    dim: usize,
    index: HashMap<String, usize>,
}

const UNIT_TOL: f64 = 1e-6;

impl TextTable {
    /// Validates names and widths; embeddings must already be unit-norm.
    pub fn new(entries: Vec<TextEntry>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.embedding.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.len() != dim || dim == 0 {
                return Err(Error::dim("TextTable", format!("entry {:?} has width {}", e.name, e.embedding.len())));
            }
            let n = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Contract(format!("embedding of {:?} has norm {n}", e.name)));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate category name {:?}", e.name)));
            }
        }
        if entries.iter().filter(|e| e.split == Split::NoObject).count() > 1 {
            return Err(Error::Config("more than one no_object entry".into()));
        }
        Ok(TextTable { entries, dim, index })
    }

    /// Like [`TextTable::new`] but L2-normalizes every embedding first.
    pub fn normalized(mut entries: Vec<TextEntry>) -> Result<Self> {
        for e in &mut entries {
            let n = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n >= crate::numerics::tensor::DEGENERATE_NORM) {
                return Err(Error::Contract(format!("embedding of {:?} is zero", e.name)));
            }
            e.embedding.iter_mut().for_each(|x| *x /= n);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<TextEntry> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::normalized(entries).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.entries).expect("entries serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TextEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TextEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn embedding(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(|e| e.embedding.as_slice())
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn names(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn no_object(&self) -> Option<&TextEntry> {
        self.entries.iter().find(|e| e.split == Split::NoObject)
    }

    /// Categories usable as pseudo-labels: every named category, including
    /// base and novel ones (a large open vocabulary overlaps the dataset's).
    pub fn pseudo_vocabulary(&self) -> TextTable {
        self.retain(|e| e.split != Split::NoObject)
    }

    pub fn retain(&self, keep: impl Fn(&TextEntry) -> bool) -> TextTable {
        let entries: Vec<_> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        TextTable {
            dim: self.dim,
            entries,
            index,
        }
    }

    /// Embeddings of `names`, one row each.
    pub fn matrix(&self, names: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for n in names {
            data.extend_from_slice(self.embedding(n)?);
        }
        Tensor::matrix(names.len(), self.dim, data)
    }

    /// All embeddings in table order.
    pub fn full_matrix(&self) -> Tensor {
        let data = self.entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        Tensor::matrix(self.entries.len(), self.dim, data).expect("validated widths")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, split: Split, e: Vec<f64>) -> TextEntry {
        TextEntry {
            name: name.into(),
            split,
            embedding: e,
        }
    }

    #[test]
    fn loader_normalizes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(
            &path,
            r#"[{"name":"cat","split":"base","embedding":[3,4]},{"name":"dog","split":"novel","embedding":[0,2]}]"#,
        )
        .unwrap();
        let t = TextTable::load(&path).unwrap();
        assert_eq!(t.embedding("cat").unwrap(), &[0.6, 0.8]);
        assert_eq!(t.names(Split::Novel), vec!["dog"]);
        t.save(&path).unwrap();
        assert_eq!(TextTable::load(&path).unwrap(), t);
    }

    #[test]
    fn duplicates_and_bad_norms_are_rejected() {
        let dup = vec![entry("a", Split::Base, vec![1.0, 0.0]), entry("a", Split::Novel, vec![0.0, 1.0])];
        assert!(TextTable::new(dup).is_err());
        assert!(TextTable::new(vec![entry("a", Split::Base, vec![2.0, 0.0])]).is_err());
        assert!(TextTable::normalized(vec![entry("a", Split::Base, vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn unknown_category_lookup() {
        let t = TextTable::new(vec![entry("a", Split::Base, vec![1.0, 0.0])]).unwrap();
        assert!(matches!(t.embedding("zebra"), Err(Error::UnknownCategory(_))));
    }
}
