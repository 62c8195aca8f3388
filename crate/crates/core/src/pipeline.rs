//! File-level pipeline stages, one per executable subcommand, plus an
//! in-memory experiment driver used by the benchmarks and end-to-end tests.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::ClusterConfig;
use crate::io::{read_features, EmbeddingRows, FeatureReader};
use crate::par::Exec;
use crate::pseudo_labels::{pseudo_label_dataset, write_pseudo_labels, PseudoConfig, PseudoLabelRecord};
use crate::retrieval::{embed_reference, embed_sum_clip, evaluate, EmbeddingIndex, EvalReport, ReferenceHead};
use crate::text_table::TextTable;
use crate::training::{
    read_labels, synth_generate, Checkpoint, DataSplit, EpochMetrics, Manifest, SynthPaths, SynthSplit,
    SynthWorld, TrainData, Trainer,
};

/// Generates the requested splits (both when `split` is `None`).
pub fn gen_synth(cfg: &RunConfig, out_dir: &Path, split: Option<DataSplit>) -> Result<Vec<SynthPaths>> {
    cfg.data.validate()?;
    let splits = match split {
        Some(s) => vec![s],
        None => vec![DataSplit::Train, DataSplit::Eval],
    };
    splits.into_iter().map(|s| synth_generate(&cfg.data, s, out_dir)).collect()
}

pub struct PseudoLabelJob<'a> {
    pub features: &'a Path,
    pub text_table: &'a Path,
    /// Manifest that carries the frozen reference weights.
    pub reference: &'a Path,
    pub cluster: ClusterConfig,
    pub pseudo: PseudoConfig,
    pub out: &'a Path,
}

pub fn pseudo_label(job: &PseudoLabelJob<'_>, exec: Exec) -> Result<Vec<PseudoLabelRecord>> {
    job.pseudo.validate()?;
    let manifest = Manifest::load(job.reference)?;
    let (store, attn) = manifest.reference.frozen()?;
    let table = TextTable::load(job.text_table)?;
    let vocab = table.pseudo_vocabulary();
    let reader = FeatureReader::open(job.features)?;
    let records = pseudo_label_dataset(reader, &store, &attn, &job.cluster, &vocab, &job.pseudo, exec)?;
    write_pseudo_labels(job.out, &records)?;
    Ok(records)
}

pub struct TrainJob<'a> {
    pub features: &'a Path,
    pub labels: &'a Path,
    pub pseudo: &'a Path,
    pub text_table: &'a Path,
    pub reference: &'a Path,
    pub checkpoint: &'a Path,
    pub metrics: &'a Path,
    pub resume: Option<&'a Path>,
    /// Stop (and checkpoint) once this many epochs have completed.
    pub stop_after: Option<usize>,
}

/// Trains and writes the checkpoint plus one metrics line per epoch. When
/// resuming, new metric lines are appended to the existing log.
pub fn train(cfg: &RunConfig, job: &TrainJob<'_>, exec: Exec) -> Result<Checkpoint> {
    cfg.validate()?;
    let features = read_features(job.features)?;
    let labels = read_labels(job.labels)?;
    let pseudo = crate::pseudo_labels::read_pseudo_labels(job.pseudo)?;
    let table = TextTable::load(job.text_table)?;
    let manifest = Manifest::load(job.reference)?;
    let data = TrainData {
        features: &features,
        labels: &labels,
        pseudo: &pseudo,
        table: &table,
        pseudo_vocabulary: table.pseudo_vocabulary().entries().iter().map(|e| e.name.clone()).collect(),
    };
    let mut trainer = Trainer::new(cfg.settings(), data, exec)?;
    let mut ckpt = match job.resume {
        Some(p) => Checkpoint::load(p)?,
        None => trainer.init(&manifest.reference)?,
    };
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(job.resume.is_some())
        .truncate(job.resume.is_none())
        .open(job.metrics)
        .map_err(|e| Error::io(job.metrics, e))?;
    trainer.run(&mut ckpt, job.stop_after, |m: &EpochMetrics, _| {
        let line = serde_json::to_string(m).map_err(|e| Error::format(job.metrics, e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(job.metrics, e))
    })?;
    ckpt.save(job.checkpoint)?;
    Ok(ckpt)
}

pub fn embed(features: &Path, checkpoint: &Path, out: &Path, exec: Exec) -> Result<EmbeddingRows> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let features = read_features(features)?;
    let rows = embed_sum_clip(&features, &ckpt.params, exec)?;
    rows.save(out)?;
    Ok(rows)
}

pub fn build_index(embeddings: &Path, out: &Path) -> Result<EmbeddingIndex> {
    let index = EmbeddingIndex::build(EmbeddingRows::load(embeddings)?)?;
    index.save(out)?;
    Ok(index)
}

pub fn query(index: &Path, text_table: &Path, category: &str, k: usize) -> Result<Vec<(u64, f64)>> {
    let index = EmbeddingIndex::load(index)?;
    let table = TextTable::load(text_table)?;
    index.topk(table.embedding(category)?, k)
}

pub struct EvalJob<'a> {
    pub index: &'a Path,
    pub text_table: &'a Path,
    pub labels: &'a Path,
    pub k: usize,
    /// Recorded in the report as the SHA-256 of the file.
    pub checkpoint: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn eval(job: &EvalJob<'_>, exec: Exec) -> Result<EvalReport> {
    let index = EmbeddingIndex::load(job.index)?;
    let table = TextTable::load(job.text_table)?;
    let labels = read_labels(job.labels)?;
    let mut report = evaluate(&index, &table, &labels, job.k, exec)?;
    if let Some(p) = job.checkpoint {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        report.checkpoint_digest = Some(hex::encode(Sha256::digest(&bytes)));
    }
    if let Some(out) = job.out {
        report.save(out)?;
    }
    Ok(report)
}

/// Mean-AP summary of one evaluated head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub base: f64,
    pub novel: f64,
}

impl Scores {
    fn of(r: &EvalReport) -> Self {
        Scores {
            base: r.map_base.unwrap_or(f64::NAN),
            novel: r.map_novel.unwrap_or(f64::NAN),
        }
    }
}

/// Generated train/eval splits with precomputed pseudo-labels, kept in memory
/// so that many training variants can share them.
pub struct Experiment {
    pub config: RunConfig,
    pub world: SynthWorld,
    pub train: SynthSplit,
    pub eval: SynthSplit,
    pub pseudo: Vec<PseudoLabelRecord>,
    pub exec: Exec,
}

impl Experiment {
    pub fn prepare(config: RunConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let world = SynthWorld::new(&config.data)?;
        let train = world.generate(DataSplit::Train)?;
        let eval = world.generate(DataSplit::Eval)?;
        let (store, attn) = world.reference.frozen()?;
        let pseudo = pseudo_label_dataset(
            train.features.iter().cloned().map(Ok),
            &store,
            &attn,
            &config.cluster,
            &world.table.pseudo_vocabulary(),
            &config.pseudo,
            exec,
        )?;
        Ok(Experiment {
            config,
            world,
            train,
            eval,
            pseudo,
            exec,
        })
    }

    fn score(&self, rows: EmbeddingRows) -> Result<EvalReport> {
        evaluate(&EmbeddingIndex::build(rows)?, &self.world.table, &self.eval.labels, self.config.eval.k, self.exec)
    }

    /// Untrained Cluster-CLIP on the evaluation split.
    pub fn zero_shot(&self) -> Result<Scores> {
        let rows = embed_reference(
            &self.eval.features,
            &self.world.reference,
            ReferenceHead::Cluster,
            &self.config.cluster,
            self.config.head.include_mean_token,
            self.exec,
        )?;
        Ok(Scores::of(&self.score(rows)?))
    }

    /// Trains with `cfg` (which must share this experiment's data settings)
    /// and evaluates the final head.
    pub fn train_and_eval(&self, cfg: &RunConfig) -> Result<Scores> {
        if cfg.data != self.config.data {
            return Err(Error::Config("training config must use the experiment's data section".into()));
        }
        cfg.validate()?;
        let data = TrainData {
            features: &self.train.features,
            labels: &self.train.labels,
            pseudo: &self.pseudo,
            table: &self.world.table,
            pseudo_vocabulary: self.world.table.pseudo_vocabulary().entries().iter().map(|e| e.name.clone()).collect(),
        };
        let mut trainer = Trainer::new(cfg.settings(), data, self.exec)?;
        let mut ckpt = trainer.init(&self.world.reference)?;
        trainer.run(&mut ckpt, None, |_, _| Ok(()))?;
        let rows = embed_sum_clip(&self.eval.features, &ckpt.params, self.exec)?;
        Ok(Scores::of(&self.score(rows)?))
    }
}
