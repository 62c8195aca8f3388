//! Mini-batch fine-tuning of the SUM-CLIP head.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::labels::{
    category_frequencies, make_semi_split, sample_federated_negatives, sample_pseudo_negatives, LabelRecord,
};
use crate::error::{Error, Result};
use crate::heads::{init_sum_clip, ClipLinears, FeatureMap, HeadConfig, SumClipParams};
use crate::matching::{combined_loss, contributes, ImageTargets, LossConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::par::Exec;
use crate::pseudo_labels::PseudoLabelRecord;
use crate::rng::SeedTree;
use crate::text_table::{Split, TextTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub labeled_fraction: f64,
    pub fold_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 25,
            lr_drop_epoch: 15,
            lr_drop_factor: 0.1,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            labeled_fraction: 1.0,
            fold_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr {} must be positive", self.lr));
        }
        if self.lr_drop_epoch > self.epochs {
            return bad(format!("train.lr_drop_epoch {} exceeds train.epochs {}", self.lr_drop_epoch, self.epochs));
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("train.lr_drop_factor must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("train.labeled_fraction {} outside (0, 1]", self.labeled_fraction));
        }
        Ok(())
    }
}

/// Step schedule: `lr` before the drop epoch, `lr · factor` from it on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_drop_factor
    }
}

/// Everything that influences the trajectory of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("settings serialize");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_sup: Option<f64>,
    pub loss_pse: Option<f64>,
    pub lr: f64,
}

/// Read-only training data.
pub struct TrainData<'a> {
    pub features: &'a [FeatureMap],
    pub labels: &'a [LabelRecord],
    pub pseudo: &'a [PseudoLabelRecord],
    pub table: &'a TextTable,
    /// Categories eligible as pseudo-negatives.
    pub pseudo_vocabulary: Vec<String>,
}

struct Prepared<'a> {
    fm: &'a FeatureMap,
    label: Option<LabelRecord>,
    pseudo: Option<Vec<String>>,
}

pub struct Trainer<'a> {
    settings: RunSettings,
    items: Vec<Prepared<'a>>,
    table: &'a TextTable,
    base_vocabulary: Vec<String>,
    base_weights: Vec<f64>,
    pseudo_vocabulary: Vec<String>,
    exec: Exec,
    pub short_negative_pools: usize,
    pub dropped_targets: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(settings: RunSettings, data: TrainData<'a>, exec: Exec) -> Result<Self> {
        settings.validate()?;
        let split = make_semi_split(data.labels, settings.train.labeled_fraction, settings.train.fold_seed)?;
        let labels: HashMap<u64, LabelRecord> = split.into_iter().map(|r| (r.image_id, r)).collect();
        let pseudo: HashMap<u64, Vec<String>> =
            data.pseudo.iter().map(|r| (r.image_id, r.names().into_iter().map(String::from).collect())).collect();
        let base_vocabulary: Vec<String> = data.table.names(Split::Base).into_iter().map(String::from).collect();
        let labeled: Vec<LabelRecord> = labels.values().filter(|r| r.labeled).cloned().collect();
        let base_weights = category_frequencies(&labeled, &base_vocabulary);
        for l in labels.values() {
            for c in l.categories.iter().chain(&l.neg_categories) {
                data.table.embedding(c)?;
            }
        }
        for c in pseudo.values().flatten().chain(&data.pseudo_vocabulary) {
            data.table.embedding(c)?;
        }
        if data.table.no_object().is_some_and(|e| data.pseudo_vocabulary.contains(&e.name)) {
            return Err(Error::Config("the no-object entry cannot be a pseudo category".into()));
        }
        let mut items: Vec<Prepared> = data
            .features
            .iter()
            .map(|fm| Prepared {
                fm,
                label: labels.get(&fm.image_id).filter(|l| l.labeled).cloned(),
                pseudo: pseudo.get(&fm.image_id).cloned(),
            })
            .collect();
        items.sort_by_key(|p| p.fm.image_id);
        Ok(Trainer {
            settings,
            items,
            table: data.table,
            base_vocabulary,
            base_weights,
            pseudo_vocabulary: data.pseudo_vocabulary,
            exec,
            short_negative_pools: 0,
            dropped_targets: 0,
        })
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    pub fn init(&self, reference: &ClipLinears) -> Result<Checkpoint> {
        let params = init_sum_clip(&self.settings.head, reference, SeedTree::new(self.settings.train.seed))?;
        let adam = AdamState::new(&params.store, self.settings.train.adam);
        Ok(Checkpoint {
            params,
            adam,
            seed: self.settings.train.seed,
            next_epoch: 0,
            digest: self.settings.digest(),
        })
    }

    /// Indices of images that carry a loss component under the current settings.
    fn eligible(&self, n_queries: usize) -> Vec<usize> {
        let l = &self.settings.loss;
        (0..self.items.len())
            .filter(|&i| {
                let it = &self.items[i];
                let sup = it.label.as_ref().is_some_and(|r| {
                    l.gamma_sup > 0.0 && (!r.categories.is_empty() || l.w_noobj > 0.0) && n_queries > 0
                });
                let pse = it
                    .pseudo
                    .as_ref()
                    .is_some_and(|p| l.gamma_pse > 0.0 && (!p.is_empty() || l.w_noobj > 0.0) && n_queries > 0);
                sup || pse
            })
            .collect()
    }

    fn targets(&self, it: &Prepared, seed: SeedTree) -> Result<(ImageTargets, bool)> {
        let l = &self.settings.loss;
        let mut rng = seed.rng();
        let mut short = false;
        let supervised = match &it.label {
            Some(r) if l.gamma_sup > 0.0 => {
                let (t, s) = sample_federated_negatives(r, &self.base_vocabulary, &self.base_weights, l.min_negatives, &mut rng)?;
                short = s;
                Some(t)
            }
            _ => None,
        };
        let pseudo = match &it.pseudo {
            Some(p) if l.gamma_pse > 0.0 => {
                let m = (!l.full_pseudo_pool).then_some(l.pseudo_negatives);
                Some(sample_pseudo_negatives(p, &self.pseudo_vocabulary, m, &mut rng)?)
            }
            _ => None,
        };
        Ok((
            ImageTargets {
                image_id: it.fm.image_id,
                supervised,
                pseudo,
            },
            short,
        ))
    }

    /// Runs one epoch in place and returns its metrics.
    pub fn run_epoch(&mut self, ckpt: &mut Checkpoint) -> Result<EpochMetrics> {
        let epoch = ckpt.next_epoch;
        let cfg = self.settings.train.clone();
        let lr = lr_at(epoch, &cfg);
        let root = SeedTree::new(ckpt.seed);
        let n_queries = ckpt.params.n_queries();
        let mut order = self.eligible(n_queries);
        if order.is_empty() {
            return Err(Error::Config("no training image carries a loss component".into()));
        }
        order.shuffle(&mut root.child("shuffle").index(epoch as u64).rng());

        let (mut sum_sup, mut n_sup, mut sum_pse, mut n_pse) = (0.0, 0usize, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let target_seed = root.child("targets").index(epoch as u64);
            let mut prepared = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let it = &self.items[i];
                let (t, short) = self.targets(it, target_seed.index(it.fm.image_id))?;
                self.short_negative_pools += short as usize;
                prepared.push((it.fm, t));
            }
            let l = &self.settings.loss;
            if !prepared.iter().any(|(_, t)| {
                contributes(&t.supervised, l.gamma_sup, n_queries, l.w_noobj)
                    || contributes(&t.pseudo, l.gamma_pse, n_queries, l.w_noobj)
            }) {
                continue;
            }
            let batch: Vec<(&FeatureMap, &ImageTargets)> = prepared.iter().map(|(f, t)| (*f, t)).collect();
            let dropout_seed = root.child("dropout").index(epoch as u64).index(b as u64);
            let out = combined_loss(&batch, &ckpt.params, self.table, l, true, dropout_seed, self.exec)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param_norm: ckpt.params.store.global_norm(),
                });
            }
            self.dropped_targets += out.dropped_targets;
            if let Some(s) = out.sup {
                sum_sup += s * out.n_sup as f64;
                n_sup += out.n_sup;
            }
            if let Some(p) = out.pse {
                sum_pse += p * out.n_pse as f64;
                n_pse += out.n_pse;
            }
            let store = &mut ckpt.params.store;
            store.zero_grads();
            store.accumulate(&out.grads, 1.0);
            adam_step(store, &mut ckpt.adam, lr)?;
            store.zero_grads();
        }
        ckpt.next_epoch += 1;
        Ok(EpochMetrics {
            epoch,
            loss_sup: (n_sup > 0).then(|| sum_sup / n_sup as f64),
            loss_pse: (n_pse > 0).then(|| sum_pse / n_pse as f64),
            lr,
        })
    }

    /// Trains from `ckpt` until `epochs` are done, or until `stop_after`
    /// epochs have completed. `on_epoch` sees every finished epoch.
    pub fn run(
        &mut self,
        ckpt: &mut Checkpoint,
        stop_after: Option<usize>,
        mut on_epoch: impl FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
    ) -> Result<()> {
        if ckpt.digest != self.settings.digest() {
            return Err(Error::Config("checkpoint was written with a different training configuration".into()));
        }
        let end = stop_after.map_or(self.settings.train.epochs, |s| s.min(self.settings.train.epochs));
        while ckpt.next_epoch < end {
            let m = self.run_epoch(ckpt)?;
            log::info!(
                "epoch {} lr {:.3e} sup {:?} pse {:?}",
                m.epoch,
                m.lr,
                m.loss_sup,
                m.loss_pse
            );
            on_epoch(&m, ckpt)?;
        }
        if self.short_negative_pools > 0 {
            log::warn!(
                "{} supervised pools had fewer negatives than loss.min_negatives",
                self.short_negative_pools
            );
        }
        if self.dropped_targets > 0 {
            log::warn!("{} targets exceeded the query count and were dropped", self.dropped_targets);
        }
        Ok(())
    }
}

/// Convenience wrapper: fresh run to completion, returning the final state and metrics.
pub fn train_run(
    settings: RunSettings,
    data: TrainData<'_>,
    reference: &ClipLinears,
    exec: Exec,
) -> Result<(SumClipParams, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(settings, data, exec)?;
    let mut ckpt = trainer.init(reference)?;
    let mut metrics = Vec::new();
    trainer.run(&mut ckpt, None, |m, _| {
        metrics.push(m.clone());
        Ok(())
    })?;
    Ok((ckpt.params, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::ClusterConfig;
    use crate::pseudo_labels::{pseudo_label_dataset, PseudoConfig};
    use crate::training::{DataSplit, SynthConfig, SynthSplit, SynthWorld};

    struct World {
        world: SynthWorld,
        train: SynthSplit,
        pseudo: Vec<PseudoLabelRecord>,
    }

    fn world() -> World {
        let cfg = SynthConfig {
            n_train: 24,
            n_eval: 4,
            n_base: 5,
            n_novel: 2,
            n_distractor: 3,
            tokens: 12,
            embed_dim: 8,
            out_dim: 4,
            max_objects: 2,
            min_object_tokens: 2,
            max_object_tokens: 4,
            ..Default::default()
        };
        let world = SynthWorld::new(&cfg).unwrap();
        let train = world.generate(DataSplit::Train).unwrap();
        let (store, attn) = world.reference.frozen().unwrap();
        let pseudo = pseudo_label_dataset(
            train.features.iter().cloned().map(Ok),
            &store,
            &attn,
            &ClusterConfig {
                n_clusters: 4,
                ..Default::default()
            },
            &world.table.pseudo_vocabulary(),
            &PseudoConfig {
                threshold: 0.05,
                temperature: 0.1,
            },
            Exec::Sequential,
        )
        .unwrap();
        World { world, train, pseudo }
    }

    fn settings(epochs: usize) -> RunSettings {
        RunSettings {
            head: HeadConfig {
                n_queries: 4,
                decoder_layers: 1,
                decoder_heads: 2,
                ..Default::default()
            },
            loss: LossConfig {
                pseudo_negatives: 4,
                min_negatives: 3,
                ..Default::default()
            },
            train: TrainConfig {
                lr: 1e-2,
                epochs,
                lr_drop_epoch: epochs.min(2),
                batch_size: 5,
                seed: 3,
                ..Default::default()
            },
        }
    }

    fn data<'a>(w: &'a World, labels: &'a [LabelRecord]) -> TrainData<'a> {
        TrainData {
            features: &w.train.features,
            labels,
            pseudo: &w.pseudo,
            table: &w.world.table,
            pseudo_vocabulary: w.world.table.pseudo_vocabulary().entries().iter().map(|e| e.name.clone()).collect(),
        }
    }

    fn bytes(p: &SumClipParams) -> Vec<u64> {
        p.store.iter().flat_map(|(_, p)| p.tensor.data().iter().map(|x| x.to_bits())).collect()
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-5);
        assert_eq!(lr_at(14, &cfg), 1e-5);
        assert!((lr_at(15, &cfg) - 1e-6).abs() < 1e-20);
        let flat = TrainConfig {
            lr_drop_factor: 1.0,
            ..cfg
        };
        assert!((0..25).all(|e| lr_at(e, &flat) == 1e-5));
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let w = world();
        let s = settings(0);
        let init = init_sum_clip(&s.head, &w.world.reference, SeedTree::new(s.train.seed)).unwrap();
        let (params, metrics) = train_run(s, data(&w, &w.train.labels), &w.world.reference, Exec::Sequential).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(bytes(&params), bytes(&init));
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let w = world();
        let s = settings(2);
        let init = init_sum_clip(&s.head, &w.world.reference, SeedTree::new(s.train.seed)).unwrap();
        let (params, metrics) = train_run(s, data(&w, &w.train.labels), &w.world.reference, Exec::Sequential).unwrap();
        assert_eq!(metrics.len(), 2);
        let mut moved = 0;
        for ((_, a), (_, b)) in init.store.iter().zip(params.store.iter()) {
            let same = a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if a.name.starts_with("attn.") {
                assert!(same, "{} changed", a.name);
            } else if !same {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn resume_is_step_identical() {
        let w = world();
        let (straight, m_straight) =
            train_run(settings(3), data(&w, &w.train.labels), &w.world.reference, Exec::Sequential).unwrap();

        let mut first = Trainer::new(settings(3), data(&w, &w.train.labels), Exec::Sequential).unwrap();
        let mut ckpt = first.init(&w.world.reference).unwrap();
        let mut metrics = Vec::new();
        first
            .run(&mut ckpt, Some(1), |m, _| {
                metrics.push(m.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(ckpt.next_epoch, 1);
        let raw = ckpt.to_bytes().unwrap();
        let mut restored = Checkpoint::from_bytes(&raw, std::path::Path::new("mem")).unwrap();
        let mut second = Trainer::new(settings(3), data(&w, &w.train.labels), Exec::Sequential).unwrap();
        second
            .run(&mut restored, None, |m, _| {
                metrics.push(m.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(bytes(&restored.params), bytes(&straight));
        assert_eq!(metrics, m_straight);

        let mut other = settings(3);
        other.loss.w_noobj = 0.2;
        let mut third = Trainer::new(other, data(&w, &w.train.labels), Exec::Sequential).unwrap();
        let mut c = Checkpoint::from_bytes(&raw, std::path::Path::new("mem")).unwrap();
        assert!(matches!(third.run(&mut c, None, |_, _| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn unlabeled_records_never_reach_the_supervised_loss() {
        let w = world();
        let mut s = settings(2);
        s.train.labeled_fraction = 0.25;
        let split = make_semi_split(&w.train.labels, 0.25, s.train.fold_seed).unwrap();
        let labeled: std::collections::HashSet<u64> = split.iter().filter(|r| r.labeled).map(|r| r.image_id).collect();
        assert_eq!(labeled.len(), 6);
        // Rewrite the categories of every record that will be unlabeled.
        let base: Vec<String> = w.world.table.names(Split::Base).into_iter().map(String::from).collect();
        let scrambled: Vec<LabelRecord> = w
            .train
            .labels
            .iter()
            .map(|r| {
                if labeled.contains(&r.image_id) {
                    r.clone()
                } else {
                    LabelRecord {
                        categories: base.clone(),
                        neg_categories: vec![],
                        ..r.clone()
                    }
                }
            })
            .collect();
        for gamma_pse in [0.0, 1.0] {
            s.loss.gamma_pse = gamma_pse;
            let (a, ma) = train_run(s.clone(), data(&w, &w.train.labels), &w.world.reference, Exec::Sequential).unwrap();
            let (b, mb) = train_run(s.clone(), data(&w, &scrambled), &w.world.reference, Exec::Sequential).unwrap();
            assert_eq!(bytes(&a), bytes(&b));
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let w = world();
        let (a, ma) = train_run(settings(2), data(&w, &w.train.labels), &w.world.reference, Exec::Sequential).unwrap();
        let (b, mb) = train_run(settings(2), data(&w, &w.train.labels), &w.world.reference, Exec::Parallel).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(ma, mb);
    }

    #[test]
    fn unknown_pseudo_category_is_rejected() {
        let w = world();
        let mut pseudo = w.pseudo.clone();
        pseudo[0].labels.push(crate::pseudo_labels::PseudoLabel {
            name: "not_a_category".into(),
            score: 0.9,
        });
        let d = TrainData {
            pseudo: &pseudo,
            ..data(&w, &w.train.labels)
        };
        assert!(matches!(Trainer::new(settings(1), d, Exec::Sequential), Err(Error::UnknownCategory(_))));
    }
}
