//! Synthetic stand-in for a frozen backbone and text encoder.
//!
//! Every category owns a unit prototype in token space. Objects are runs of
//! noisy prototype tokens; the remaining tokens are background. The reference
//! pooling linears are fixed random maps, and a category's text embedding is
//! its prototype pushed through the value and output projections, so the
//! training-free heads recognise objects without any fitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::labels::{write_labels, LabelRecord};
use crate::error::{Error, Result};
use crate::heads::{ClipLinears, FeatureMap, LinearWeights};
use crate::io::{round_to_f32, write_features};
use crate::numerics::{matmul, Tensor};
use crate::rng::SeedTree;
use crate::text_table::{Split, TextEntry, TextTable};

/// First image id of the evaluation split; training ids start at 0.
pub const EVAL_ID_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub n_distractor: usize,
    pub tokens: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_tokens: usize,
    pub max_object_tokens: usize,
    /// Per-coordinate standard deviation added to object tokens.
    pub object_noise: f64,
    /// Per-coordinate standard deviation of background tokens.
    pub background_noise: f64,
    /// Length of the shared background direction in every background token.
    pub background_strength: f64,
    /// Gain of the reference query and key projections.
    pub attn_gain: f64,
    /// Only a random subset of absent base categories is annotated as negative.
    pub federated: bool,
    pub federated_negative_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_train: 2000,
            n_eval: 500,
            n_base: 48,
            n_novel: 17,
            n_distractor: 200,
            tokens: 64,
            embed_dim: 64,
            out_dim: 32,
            min_objects: 1,
            max_objects: 3,
            min_object_tokens: 4,
            max_object_tokens: 10,
            object_noise: 0.15,
            background_noise: 0.15,
            background_strength: 0.5,
            attn_gain: 3.0,
            federated: false,
            federated_negative_rate: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSplit {
    Train,
    Eval,
}

impl std::str::FromStr for DataSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DataSplit::Train),
            "eval" => Ok(DataSplit::Eval),
            _ => Err(Error::Config(format!("unknown split {s:?}, expected train or eval"))),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("data.{field}: {why}")));
        if self.n_base + self.n_novel + self.n_distractor < 2 {
            return bad("n_base", "need at least two categories in total");
        }
        if self.n_base + self.n_novel == 0 {
            return bad("n_base", "images need at least one base or novel category");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive");
        }
        if self.out_dim == 0 || self.out_dim > self.embed_dim {
            return bad("out_dim", "must be in 1..=embed_dim");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("min_objects", "need 1 <= min_objects <= max_objects");
        }
        if self.max_objects > self.n_base + self.n_novel {
            return bad("max_objects", "exceeds the number of base and novel categories");
        }
        if self.min_object_tokens == 0 || self.min_object_tokens > self.max_object_tokens {
            return bad("min_object_tokens", "need 1 <= min_object_tokens <= max_object_tokens");
        }
        if self.max_objects * self.max_object_tokens > self.tokens {
            return bad("tokens", "too few tokens for max_objects * max_object_tokens");
        }
        for (name, v) in [
            ("object_noise", self.object_noise),
            ("background_noise", self.background_noise),
            ("background_strength", self.background_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be finite and nonnegative");
            }
        }
        if !(self.attn_gain > 0.0) {
            return bad("attn_gain", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.federated_negative_rate) {
            return bad("federated_negative_rate", "must be in [0, 1]");
        }
        Ok(())
    }

    pub fn n_images(&self, split: DataSplit) -> usize {
        match split {
            DataSplit::Train => self.n_train,
            DataSplit::Eval => self.n_eval,
        }
    }
}

/// Category prototypes, background direction, reference linears and text table.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub prototypes: Tensor,
    pub background: Vec<f64>,
    pub reference: ClipLinears,
    pub table: TextTable,
}

#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub split: DataSplit,
    pub features: Vec<FeatureMap>,
    pub labels: Vec<LabelRecord>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random `rows×cols` matrix with orthonormal columns (`rows ≥ cols`).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut t = Tensor::zeros(&[rows, cols]);
    for (c, b) in basis.iter().enumerate() {
        for (r, &x) in b.iter().enumerate() {
            t.data_mut()[r * cols + c] = x;
        }
    }
    t
}

fn category_name(split: Split, i: usize) -> String {
    match split {
        Split::Base => format!("base_{i:03}"),
        Split::Novel => format!("novel_{i:03}"),
        _ => format!("pseudo_{i:03}"),
    }
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let root = SeedTree::new(config.seed);
        let d = config.embed_dim;
        let n_cat = config.n_base + config.n_novel + config.n_distractor;

        let mut rng = root.child("prototypes").rng();
        let protos: Vec<Vec<f64>> = (0..n_cat).map(|_| unit_vector(d, &mut rng)).collect();
        let prototypes = Tensor::from_rows(&protos)?;
        let background = unit_vector(d, &mut rng);

        let mut rng = root.child("reference").rng();
        let lw = |w: Tensor| LinearWeights { weight: w, bias: None };
        let q = orthonormal_columns(d, d, &mut rng).scale(config.attn_gain);
        let k = orthonormal_columns(d, d, &mut rng).scale(config.attn_gain);
        let v = orthonormal_columns(d, d, &mut rng);
        let c = orthonormal_columns(d, config.out_dim, &mut rng);
        let reference = ClipLinears {
            q: lw(q),
            k: lw(k),
            v: lw(v),
            c: lw(c),
        };

        let text = matmul(&matmul(&prototypes, &reference.v.weight)?, &reference.c.weight)?;
        let mut entries = Vec::with_capacity(n_cat);
        for i in 0..n_cat {
            let (split, j) = if i < config.n_base {
                (Split::Base, i)
            } else if i < config.n_base + config.n_novel {
                (Split::Novel, i - config.n_base)
            } else {
                (Split::Pseudo, i - config.n_base - config.n_novel)
            };
            entries.push(TextEntry {
                name: category_name(split, j),
                split,
                embedding: text.row(i).to_vec(),
            });
        }
        let table = TextTable::normalized(entries)?;
        Ok(SynthWorld {
            config: config.clone(),
            prototypes,
            background,
            reference,
            table,
        })
    }

    fn id_offset(split: DataSplit) -> u64 {
        match split {
            DataSplit::Train => 0,
            DataSplit::Eval => EVAL_ID_OFFSET,
        }
    }

    pub fn generate(&self, split: DataSplit) -> Result<SynthSplit> {
        let cfg = &self.config;
        let stream = SeedTree::new(cfg.seed).child("images").child(match split {
            DataSplit::Train => "train",
            DataSplit::Eval => "eval",
        });
        let n_present = cfg.n_base + cfg.n_novel;
        let mut features = Vec::with_capacity(cfg.n_images(split));
        let mut labels = Vec::with_capacity(cfg.n_images(split));
        for n in 0..cfg.n_images(split) {
            let image_id = Self::id_offset(split) + n as u64;
            let mut rng = stream.index(n as u64).rng();
            let (x, present) = self.image(&mut rng, n_present);
            features.push(FeatureMap::new(image_id, round_to_f32(&x))?);

            let is_base = |c: &usize| *c < cfg.n_base;
            let name = |c: usize| self.table.entries()[c].name.clone();
            let mut categories: Vec<usize> = match split {
                DataSplit::Train => present.iter().copied().filter(is_base).collect(),
                DataSplit::Eval => present.clone(),
            };
            categories.sort_unstable();
            let mut negatives: Vec<usize> = (0..cfg.n_base).filter(|c| !present.contains(c)).collect();
            if cfg.federated {
                negatives.retain(|_| rng.gen_bool(cfg.federated_negative_rate));
            }
            labels.push(LabelRecord {
                image_id,
                categories: categories.into_iter().map(name).collect(),
                neg_categories: negatives.into_iter().map(name).collect(),
                labeled: true,
            });
        }
        Ok(SynthSplit {
            split,
            features,
            labels,
        })
    }

    fn image(&self, rng: &mut ChaCha8Rng, n_present: usize) -> (Tensor, Vec<usize>) {
        let cfg = &self.config;
        let (k, d) = (cfg.tokens, cfg.embed_dim);
        let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let cats: Vec<usize> = rand::seq::index::sample(rng, n_present, n_obj).into_vec();
        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(rng);
        let mut owner: Vec<Option<usize>> = vec![None; k];
        let mut next = 0;
        for &c in &cats {
            let len = rng.gen_range(cfg.min_object_tokens..=cfg.max_object_tokens);
            for &s in &slots[next..next + len] {
                owner[s] = Some(c);
            }
            next += len;
        }
        let mut x = Tensor::zeros(&[k, d]);
        for (t, o) in owner.iter().enumerate() {
            let row = x.row_mut(t);
            match o {
                Some(c) => {
                    for (v, p) in row.iter_mut().zip(self.prototypes.row(*c)) {
                        *v = p + cfg.object_noise * gaussian(rng);
                    }
                }
                None => {
                    for (v, b) in row.iter_mut().zip(&self.background) {
                        *v = cfg.background_strength * b + cfg.background_noise * gaussian(rng);
                    }
                }
            }
        }
        (x, cats)
    }
}

/// Everything needed to rebuild the reference branch for one generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: DataSplit,
    pub config: SynthConfig,
    pub reference: ClipLinears,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

pub struct SynthPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub text_table: PathBuf,
    pub manifest: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path, split: DataSplit) -> Self {
        let tag = match split {
            DataSplit::Train => "train",
            DataSplit::Eval => "eval",
        };
        SynthPaths {
            features: dir.join(format!("{tag}_features.forf")),
            labels: dir.join(format!("{tag}_labels.jsonl")),
            text_table: dir.join("text_table.json"),
            manifest: dir.join(format!("{tag}_manifest.json")),
        }
    }
}

/// Generates one split and writes its feature, label, text-table and manifest files.
pub fn synth_generate(config: &SynthConfig, split: DataSplit, out_dir: &Path) -> Result<SynthPaths> {
    let world = SynthWorld::new(config)?;
    let data = world.generate(split)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = SynthPaths::in_dir(out_dir, split);
    write_features(&paths.features, &data.features)?;
    write_labels(&paths.labels, &data.labels)?;
    world.table.save(&paths.text_table)?;
    Manifest {
        split,
        config: config.clone(),
        reference: world.reference.clone(),
    }
    .save(&paths.manifest)?;
    Ok(paths)
}
