//! Cosine-softmax class probabilities, matching costs and the weighted
//! cross-entropy objective.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian_assign, Assignment};
use crate::error::{Error, Result};
use crate::heads::{sum_clip_forward, EmbeddingSet, FeatureMap, SumClipParams};
use crate::numerics::{l2_normalize_rows, matmul_t, softmax_rows, Gradients, Graph, Tensor, Var};
use crate::par::Exec;
use crate::rng::SeedTree;
use crate::text_table::TextTable;

/// Added inside the logarithm so a zero probability stays finite.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma_sup: f64,
    pub gamma_pse: f64,
    /// Weight of unmatched queries predicting no-object.
    pub w_noobj: f64,
    pub temperature: f64,
    /// Sampled pseudo-vocabulary negatives per image; ignored with `full_pseudo_pool`.
    pub pseudo_negatives: usize,
    pub full_pseudo_pool: bool,
    /// Lower bound on the supervised pool's negatives after federated sampling.
    pub min_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_sup: 1.0,
            gamma_pse: 1.0,
            w_noobj: 0.1,
            temperature: 0.01,
            pseudo_negatives: 64,
            full_pseudo_pool: false,
            min_negatives: 50,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_sup >= 0.0 && self.gamma_pse >= 0.0) || self.gamma_sup + self.gamma_pse <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with a positive sum, got sup={} pse={}",
                self.gamma_sup, self.gamma_pse
            )));
        }
        if !(0.0..=1.0).contains(&self.w_noobj) {
            return Err(Error::Config(format!("loss.w_noobj {} outside [0, 1]", self.w_noobj)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("loss.temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSource {
    Supervised,
    Pseudo,
}

/// Categories present in one image plus the negatives sharing its softmax pool.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    pub categories: Vec<String>,
    pub source: TargetSource,
    pub negatives: Vec<String>,
}

impl TargetSet {
    pub fn new(categories: Vec<String>, negatives: Vec<String>, source: TargetSource) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &categories {
            if !seen.insert(c.as_str()) {
                return Err(Error::Contract(format!("duplicate target category {c:?}")));
            }
        }
        let mut neg_seen = HashSet::new();
        for n in &negatives {
            if seen.contains(n.as_str()) {
                return Err(Error::Contract(format!("{n:?} is both a target and a negative")));
            }
            if !neg_seen.insert(n.as_str()) {
                return Err(Error::Contract(format!("duplicate negative {n:?}")));
            }
        }
        Ok(TargetSet {
            categories,
            source,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Named pool classes: targets first (so target `j` is column `j`), then negatives.
    pub fn pool(&self) -> Vec<&str> {
        self.categories.iter().chain(&self.negatives).map(String::as_str).collect()
    }

    /// Sum of loss weights over `n_queries` queries.
    pub fn total_weight(&self, n_queries: usize, w_noobj: f64) -> f64 {
        let matched = self.len().min(n_queries);
        matched as f64 + (n_queries - matched) as f64 * w_noobj
    }
}

/// Softmax over `pool` of `cos(ŷ_i, e_c) / τ`, one row per embedding.
pub fn class_probabilities(y: &EmbeddingSet, pool: &[&str], table: &TextTable, temperature: f64) -> Result<Tensor> {
    if pool.is_empty() {
        return Err(Error::Config("class pool is empty".into()));
    }
    let e = l2_normalize_rows(&table.matrix(pool)?)?;
    let yn = if y.normalized { y.y.clone() } else { l2_normalize_rows(&y.y)? };
    Ok(softmax_rows(&matmul_t(&yn, false, &e, true)?.scale(1.0 / temperature)))
}

/// Recorded variant: `classes` are fixed unit rows, `no_object` a trainable row
/// appended as the last pool column.
pub fn pool_probabilities(g: &mut Graph, y: Var, classes: &Tensor, no_object: Var, temperature: f64) -> Result<Var> {
    let yn = g.l2_normalize_rows(y)?;
    let no = g.l2_normalize_rows(no_object)?;
    let e = if classes.rows() == 0 {
        no
    } else {
        let c = g.constant(classes.clone());
        g.concat_rows(&[c, no])?
    };
    let s = g.matmul_t(yn, false, e, true)?;
    let s = g.scale(s, 1.0 / temperature);
    Ok(g.softmax_rows(s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    /// `C[j, i] = -p_i(target_j)` over the kept targets.
    pub cost: Tensor,
    /// Pool columns of the kept targets, in target order.
    pub targets: Vec<usize>,
    /// Targets dropped because there were more of them than queries.
    pub dropped: usize,
}

/// Matching costs for targets at pool columns `target_cols`. When there are
/// more targets than queries, only the targets with the highest best-query
/// probability are kept.
pub fn build_cost_matrix(probs: &Tensor, target_cols: &[usize]) -> Result<CostMatrix> {
    let (n, pool) = (probs.rows(), probs.cols());
    if let Some(&c) = target_cols.iter().find(|&&c| c >= pool) {
        return Err(Error::dim("build_cost_matrix", format!("target column {c} outside pool of {pool}")));
    }
    let mut kept: Vec<usize> = target_cols.to_vec();
    let mut dropped = 0;
    if kept.len() > n {
        let best = |c: usize| (0..n).map(|i| probs.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| best(kept[b]).total_cmp(&best(kept[a])).then(a.cmp(&b)));
        order.truncate(n);
        order.sort_unstable();
        dropped = kept.len() - n;
        kept = order.into_iter().map(|j| target_cols[j]).collect();
    }
    let mut data = Vec::with_capacity(kept.len() * n);
    for &c in &kept {
        data.extend((0..n).map(|i| -probs.get(i, c)));
    }
    Ok(CostMatrix {
        cost: Tensor::matrix(kept.len(), n, data)?,
        targets: kept,
        dropped,
    })
}

/// Flat indices and weights of the loss terms, or `None` when every weight is zero.
fn loss_terms(
    n: usize,
    pool: usize,
    targets: &[usize],
    assignment: &Assignment,
    no_object_col: Option<usize>,
    w_noobj: f64,
) -> Result<Option<(Vec<usize>, Vec<f64>)>> {
    if assignment.pairs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "assignment covers {} of {} targets",
            assignment.pairs.len(),
            targets.len()
        )));
    }
    let mut matched = vec![false; n];
    let (mut idx, mut w) = (Vec::new(), Vec::new());
    for &(j, i) in &assignment.pairs {
        if i >= n || j >= targets.len() || matched[i] {
            return Err(Error::Contract(format!("invalid assignment pair ({j}, {i})")));
        }
        matched[i] = true;
        idx.push(i * pool + targets[j]);
        w.push(1.0);
    }
    if let Some(no) = no_object_col {
        if w_noobj > 0.0 {
            for i in (0..n).filter(|&i| !matched[i]) {
                idx.push(i * pool + no);
                w.push(w_noobj);
            }
        }
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Ok(None);
    }
    Ok(Some((idx, w.into_iter().map(|x| x / total).collect())))
}

/// Weighted mean of `-log p` over matched targets (weight 1) and unmatched
/// queries predicting no-object (weight `w_noobj`). Zero when no term has weight.
pub fn set_prediction_loss(
    probs: &Tensor,
    targets: &[usize],
    assignment: &Assignment,
    no_object_col: Option<usize>,
    w_noobj: f64,
) -> Result<f64> {
    Ok(
        match loss_terms(probs.rows(), probs.cols(), targets, assignment, no_object_col, w_noobj)? {
            None => 0.0,
            Some((idx, w)) => idx.iter().zip(&w).map(|(&k, w)| -w * (probs.data()[k] + LOG_EPS).ln()).sum(),
        },
    )
}

/// Recorded variant of [`set_prediction_loss`]; `None` when every weight is zero.
pub fn set_prediction_loss_var(
    g: &mut Graph,
    probs: Var,
    targets: &[usize],
    assignment: &Assignment,
    no_object_col: Option<usize>,
    w_noobj: f64,
) -> Result<Option<Var>> {
    let (n, pool) = (g.value(probs).rows(), g.value(probs).cols());
    let Some((idx, w)) = loss_terms(n, pool, targets, assignment, no_object_col, w_noobj)? else {
        return Ok(None);
    };
    let picked = g.pick(probs, idx)?;
    let logp = g.log(picked, LOG_EPS);
    Ok(Some(g.dot_const(logp, w.into_iter().map(|x| -x).collect())?))
}

/// Matches `targets` against the head output `y` and records the loss.
pub fn match_and_loss(
    g: &mut Graph,
    y: Var,
    no_object: Var,
    targets: &TargetSet,
    table: &TextTable,
    cfg: &LossConfig,
) -> Result<(Option<Var>, usize)> {
    let pool = targets.pool();
    let classes = table.matrix(&pool)?;
    let probs = pool_probabilities(g, y, &classes, no_object, cfg.temperature)?;
    let cols: Vec<usize> = (0..targets.len()).collect();
    let cm = build_cost_matrix(g.value(probs), &cols)?;
    let assignment = hungarian_assign(&cm.cost)?;
    let loss = set_prediction_loss_var(g, probs, &cm.targets, &assignment, Some(pool.len()), cfg.w_noobj)?;
    Ok((loss, cm.dropped))
}

/// Supervised and pseudo targets of one image; either may be absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTargets {
    pub image_id: u64,
    pub supervised: Option<TargetSet>,
    pub pseudo: Option<TargetSet>,
}

/// Per-image coefficients of the two loss components within a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentWeights {
    pub sup: f64,
    pub pse: f64,
}

#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub sup: Option<f64>,
    pub pse: Option<f64>,
    pub weighted: f64,
    pub grads: Gradients,
    pub dropped: usize,
}

/// Forward, match and backward for one image.
pub fn image_loss(
    params: &SumClipParams,
    fm: &FeatureMap,
    targets: &ImageTargets,
    table: &TextTable,
    cfg: &LossConfig,
    weights: ComponentWeights,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ImageLoss> {
    let mut g = Graph::new();
    let x = g.constant(fm.x.clone());
    let y = sum_clip_forward(&mut g, params, x, training, rng)?;
    let no_object = g.param(&params.store, params.no_object);
    let mut dropped = 0;
    let mut component = |g: &mut Graph, t: &Option<TargetSet>, w: f64| -> Result<(Option<f64>, Option<Var>)> {
        match t {
            Some(t) if w > 0.0 => {
                let (l, d) = match_and_loss(g, y, no_object, t, table, cfg)?;
                dropped += d;
                Ok((l.map(|v| g.value(v).item()), l.map(|v| g.scale(v, w))))
            }
            _ => Ok((None, None)),
        }
    };
    let (sup, sup_var) = component(&mut g, &targets.supervised, weights.sup)?;
    let (pse, pse_var) = component(&mut g, &targets.pseudo, weights.pse)?;
    let total = match (sup_var, pse_var) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    };
    let n_params = params.store.len();
    let (weighted, grads) = match total {
        Some(t) => (g.value(t).item(), g.backward(t, n_params)?),
        None => (0.0, Gradients::new(n_params)),
    };
    Ok(ImageLoss {
        sup,
        pse,
        weighted,
        grads,
        dropped,
    })
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    /// Mean supervised loss over contributing images.
    pub sup: Option<f64>,
    pub pse: Option<f64>,
    pub grads: Gradients,
    pub dropped_targets: usize,
    pub n_sup: usize,
    pub n_pse: usize,
}

/// Whether a component of `t` carries any loss weight.
pub fn contributes(t: &Option<TargetSet>, gamma: f64, n_queries: usize, w_noobj: f64) -> bool {
    gamma > 0.0 && t.as_ref().is_some_and(|t| t.total_weight(n_queries, w_noobj) > 0.0)
}

/// `γ_sup · mean L_sup + γ_pse · mean L_pse` over a batch, each mean taken
/// over the images carrying that component. Gradients are reduced in batch
/// order, so the result does not depend on `exec`.
pub fn combined_loss(
    batch: &[(&FeatureMap, &ImageTargets)],
    params: &SumClipParams,
    table: &TextTable,
    cfg: &LossConfig,
    training: bool,
    seed: SeedTree,
    exec: Exec,
) -> Result<BatchLoss> {
    let n = params.n_queries();
    let n_sup = batch.iter().filter(|(_, t)| contributes(&t.supervised, cfg.gamma_sup, n, cfg.w_noobj)).count();
    let n_pse = batch.iter().filter(|(_, t)| contributes(&t.pseudo, cfg.gamma_pse, n, cfg.w_noobj)).count();
    if n_sup + n_pse == 0 {
        return Err(Error::Contract("batch has no image with a contributing loss component".into()));
    }
    let weights = ComponentWeights {
        sup: if n_sup > 0 { cfg.gamma_sup / n_sup as f64 } else { 0.0 },
        pse: if n_pse > 0 { cfg.gamma_pse / n_pse as f64 } else { 0.0 },
    };
    let results = exec.map(batch, |(fm, t)| {
        let mut rng = seed.index(fm.image_id).rng();
        image_loss(params, fm, t, table, cfg, weights, training, &mut rng).map_err(|e| Error::Image {
            image_id: fm.image_id,
            source: Box::new(e),
        })
    });
    let mut out = BatchLoss {
        loss: 0.0,
        sup: None,
        pse: None,
        grads: Gradients::new(params.store.len()),
        dropped_targets: 0,
        n_sup,
        n_pse,
    };
    let (mut sum_sup, mut sum_pse) = (0.0, 0.0);
    for r in results {
        let r = r?;
        out.loss += r.weighted;
        out.grads.add_scaled(&r.grads, 1.0);
        out.dropped_targets += r.dropped;
        sum_sup += r.sup.unwrap_or(0.0);
        sum_pse += r.pse.unwrap_or(0.0);
    }
    out.sup = (n_sup > 0).then(|| sum_sup / n_sup as f64);
    out.pse = (n_pse > 0).then(|| sum_pse / n_pse as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{init_sum_clip, ClipLinears, FreezeMask, HeadConfig, LinearWeights};
    use crate::numerics::{grad_check, ParamStore};
    use crate::text_table::{Split, TextEntry};
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: &[(&str, Vec<f64>)]) -> TextTable {
        TextTable::normalized(
            rows.iter()
                .map(|(n, e)| TextEntry {
                    name: n.to_string(),
                    split: if *n == "no_object" { Split::NoObject } else { Split::Base },
                    embedding: e.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn es(rows: usize, cols: usize, d: Vec<f64>) -> EmbeddingSet {
        EmbeddingSet {
            image_id: 0,
            y: Tensor::matrix(rows, cols, d).unwrap(),
            normalized: false,
        }
    }

    #[test]
    fn probabilities_hand_values() {
        let t = table(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let p = class_probabilities(&es(1, 2, vec![2.0, 0.0]), &["a", "b"], &t, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        let p = class_probabilities(&es(1, 2, vec![1.0, 1.0]), &["a", "b"], &t, 1.0).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12);
        assert!(matches!(
            class_probabilities(&es(1, 2, vec![1.0, 1.0]), &["a", "zebra"], &t, 1.0),
            Err(Error::UnknownCategory(_))
        ));
    }

    #[test]
    fn cost_matrix_cases() {
        let probs = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.7, 0.6, 0.3, 0.1, 0.2, 0.2, 0.6]).unwrap();
        let cm = build_cost_matrix(&probs, &[]).unwrap();
        assert_eq!(cm.cost.shape(), &[0, 3]);
        let a = hungarian_assign(&cm.cost).unwrap();
        assert!(a.pairs.is_empty() && a.cost == 0.0);

        let cm = build_cost_matrix(&probs, &[0]).unwrap();
        assert_eq!(hungarian_assign(&cm.cost).unwrap().queries(), vec![1]);

        let flat = Tensor::full(&[4, 3], 1.0 / 3.0);
        let cm = build_cost_matrix(&flat, &[0, 1]).unwrap();
        assert_eq!(hungarian_assign(&cm.cost).unwrap().queries(), vec![0, 1]);

        // Two queries, three targets: the target whose best probability is lowest goes.
        let p2 = Tensor::matrix(2, 3, vec![0.5, 0.1, 0.4, 0.2, 0.05, 0.75]).unwrap();
        let cm = build_cost_matrix(&p2, &[0, 1, 2]).unwrap();
        assert_eq!(cm.targets, vec![0, 2]);
        assert_eq!(cm.dropped, 1);
    }

    #[test]
    fn loss_analytic_values() {
        let probs = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let a = hungarian_assign(&build_cost_matrix(&probs, &[0]).unwrap().cost).unwrap();
        let l = set_prediction_loss(&probs, &[0], &a, Some(1), 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-10);

        // With w_noobj = 0 the unmatched queries do not matter.
        let p1 = Tensor::matrix(2, 2, vec![0.8, 0.2, 0.3, 0.7]).unwrap();
        let p2 = Tensor::matrix(2, 2, vec![0.8, 0.2, 0.9, 0.1]).unwrap();
        let a = Assignment {
            pairs: vec![(0, 0)],
            cost: -0.8,
        };
        assert_eq!(
            set_prediction_loss(&p1, &[0], &a, Some(1), 0.0).unwrap(),
            set_prediction_loss(&p2, &[0], &a, Some(1), 0.0).unwrap()
        );
        // Weighted mean: (1·ln(1/0.8) + 0.5·ln(1/0.7)) / 1.5.
        let l = set_prediction_loss(&p1, &[0], &a, Some(1), 0.5).unwrap();
        assert!((l - ((1.0f64 / 0.8).ln() + 0.5 * (1.0f64 / 0.7).ln()) / 1.5).abs() < 1e-10);

        let perfect = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(set_prediction_loss(&perfect, &[0], &a, Some(1), 0.1).unwrap() < 1e-10);

        let none = Assignment::empty();
        assert_eq!(set_prediction_loss(&p1, &[], &none, Some(1), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn recorded_loss_matches_plain() {
        let probs = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.7, 0.6, 0.3, 0.1, 0.2, 0.2, 0.6]).unwrap();
        let cm = build_cost_matrix(&probs, &[0, 1]).unwrap();
        let a = hungarian_assign(&cm.cost).unwrap();
        let plain = set_prediction_loss(&probs, &cm.targets, &a, Some(2), 0.1).unwrap();
        let mut g = Graph::new();
        let p = g.constant(probs);
        let v = set_prediction_loss_var(&mut g, p, &cm.targets, &a, Some(2), 0.1).unwrap().unwrap();
        assert!((g.value(v).item() - plain).abs() < 1e-14);
    }

    #[test]
    fn target_set_validation() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert!(TargetSet::new(s(&["a", "a"]), vec![], TargetSource::Pseudo).is_err());
        assert!(TargetSet::new(s(&["a"]), s(&["a"]), TargetSource::Supervised).is_err());
        let t = TargetSet::new(s(&["a"]), s(&["b"]), TargetSource::Supervised).unwrap();
        assert_eq!(t.pool(), vec!["a", "b"]);
        assert_eq!(t.total_weight(3, 0.5), 2.0);
        assert!(LossConfig {
            gamma_sup: 0.0,
            gamma_pse: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn small_setup(seed: u64) -> (SumClipParams, TextTable, Vec<FeatureMap>) {
        let mut rng = SeedTree::new(seed).rng();
        let mut lw = |i: usize, o: usize| LinearWeights {
            weight: Tensor::matrix(i, o, (0..i * o).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap(),
            bias: Some(Tensor::new(vec![o], (0..o).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap()),
        };
        let lin = ClipLinears {
            q: lw(4, 4),
            k: lw(4, 4),
            v: lw(4, 4),
            c: lw(4, 3),
        };
        let cfg = HeadConfig {
            n_queries: 3,
            decoder_layers: 1,
            decoder_heads: 2,
            dropout: 0.0,
            ..Default::default()
        };
        let mut p = init_sum_clip(&cfg, &lin, SeedTree::new(seed)).unwrap();
        p.apply_freeze(&FreezeMask::none());
        let t = table(&[
            ("a", vec![1.0, 0.2, 0.0]),
            ("b", vec![0.0, 1.0, 0.3]),
            ("c", vec![0.3, 0.0, 1.0]),
            ("d", vec![-1.0, 0.5, 0.5]),
        ]);
        let mut rng = SeedTree::new(seed + 1).rng();
        let images = (0..3)
            .map(|i| {
                FeatureMap::new(i, Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                    .unwrap()
            })
            .collect();
        (p, t, images)
    }

    fn targets(image_id: u64, sup: Option<(&[&str], &[&str])>, pse: Option<(&[&str], &[&str])>) -> ImageTargets {
        let mk = |(c, n): (&[&str], &[&str]), s| {
            TargetSet::new(c.iter().map(|x| x.to_string()).collect(), n.iter().map(|x| x.to_string()).collect(), s)
                .unwrap()
        };
        ImageTargets {
            image_id,
            supervised: sup.map(|x| mk(x, TargetSource::Supervised)),
            pseudo: pse.map(|x| mk(x, TargetSource::Pseudo)),
        }
    }

    #[test]
    fn combined_loss_gradient_check() {
        let (p, t, images) = small_setup(3);
        let tg = [
            targets(0, Some((&["a"], &["b"])), Some((&["c", "d"], &["a"]))),
            targets(1, None, Some((&["b"], &["d"]))),
            targets(2, Some((&["a", "b", "c", "d"], &[])), None),
        ];
        let batch: Vec<_> = images.iter().zip(tg.iter()).collect();
        let cfg = LossConfig {
            temperature: 1.0,
            gamma_pse: 2.0,
            ..Default::default()
        };
        let f = |s: &ParamStore| -> Result<(f64, Gradients)> {
            let mut q = p.clone();
            q.store = s.clone();
            let b = combined_loss(&batch, &q, &t, &cfg, false, SeedTree::new(0), Exec::Sequential)?;
            Ok((b.loss, b.grads))
        };
        let r = grad_check(f, &p.store, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let b = combined_loss(&batch, &p, &t, &cfg, false, SeedTree::new(0), Exec::Sequential).unwrap();
        assert_eq!(b.dropped_targets, 1);
        assert!((b.loss - (b.sup.unwrap() + 2.0 * b.pse.unwrap())).abs() < 1e-12);
        let par = combined_loss(&batch, &p, &t, &cfg, false, SeedTree::new(0), Exec::Parallel).unwrap();
        assert_eq!(par.loss.to_bits(), b.loss.to_bits());
        assert_eq!(par.grads, b.grads);
    }

    #[test]
    fn gamma_zero_reproduces_single_component() {
        let (p, t, images) = small_setup(5);
        let tg = [targets(0, Some((&["a"], &["b"])), Some((&["c"], &["d"])))];
        let batch: Vec<_> = images.iter().zip(tg.iter()).collect();
        let both = LossConfig {
            temperature: 1.0,
            ..Default::default()
        };
        let run = |cfg: &LossConfig| combined_loss(&batch, &p, &t, cfg, false, SeedTree::new(0), Exec::Sequential).unwrap();
        let b = run(&both);
        let sup = run(&LossConfig {
            gamma_pse: 0.0,
            ..both.clone()
        });
        let pse = run(&LossConfig {
            gamma_sup: 0.0,
            ..both.clone()
        });
        assert!((sup.loss - b.sup.unwrap()).abs() < 1e-12 && sup.pse.is_none());
        assert!((pse.loss - b.pse.unwrap()).abs() < 1e-12 && pse.sup.is_none());

        let empty = [targets(0, None, Some((&["c"], &[])))];
        let batch: Vec<_> = images.iter().zip(empty.iter()).collect();
        let err = combined_loss(
            &batch,
            &p,
            &t,
            &LossConfig {
                gamma_pse: 0.0,
                ..both
            },
            false,
            SeedTree::new(0),
            Exec::Sequential,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn loss_is_order_invariant_and_nonnegative(
            n in 2usize..5,
            t in 1usize..3,
            raw in prop::collection::vec(0.01f64..1.0, 20),
            w in 0.0f64..1.0,
            shift in 0usize..4,
        ) {
            let pool = t + 1;
            let mut d: Vec<f64> = raw.iter().cycle().take(n * pool).copied().collect();
            for r in 0..n {
                let s: f64 = d[r * pool..(r + 1) * pool].iter().sum();
                d[r * pool..(r + 1) * pool].iter_mut().for_each(|x| *x /= s);
            }
            let probs = Tensor::matrix(n, pool, d).unwrap();
            let cols: Vec<usize> = (0..t).collect();
            let loss = |probs: &Tensor, cols: &[usize]| {
                let cm = build_cost_matrix(probs, cols).unwrap();
                let a = hungarian_assign(&cm.cost).unwrap();
                set_prediction_loss(probs, &cm.targets, &a, Some(pool - 1), w).unwrap()
            };
            let base = loss(&probs, &cols);
            prop_assert!(base >= 0.0);
            let rev: Vec<usize> = cols.iter().rev().copied().collect();
            prop_assert!((loss(&probs, &rev) - base).abs() < 1e-9);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let rotated = probs.select_rows(&perm);
            prop_assert!((loss(&rotated, &cols) - base).abs() < 1e-9);
        }
    }
}
