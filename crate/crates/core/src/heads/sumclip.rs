use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipLinears, EmbeddingSet, FeatureMap};
use crate::error::{Error, Result};
use crate::numerics::{
    dropout, ffn, multi_head_attention, xavier_uniform, AttentionParams, FfnParams, Graph, Linear, ParamId,
    ParamStore, Tensor, Var,
};
use crate::rng::SeedTree;

/// Parameter groups that can be frozen together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FreezeGroup {
    Q,
    K,
    V,
    C,
    Decoder,
    Queries,
}

impl FreezeGroup {
    pub fn of(name: &str) -> Option<FreezeGroup> {
        if name.starts_with("attn.q.") {
            Some(FreezeGroup::Q)
        } else if name.starts_with("attn.k.") {
            Some(FreezeGroup::K)
        } else if name.starts_with("attn.v.") {
            Some(FreezeGroup::V)
        } else if name.starts_with("attn.c.") {
            Some(FreezeGroup::C)
        } else if name.starts_with("decoder.") || name == "positional" {
            Some(FreezeGroup::Decoder)
        } else if name == "queries" {
            Some(FreezeGroup::Queries)
        } else {
            None
        }
    }

    fn name(self) -> &'static str {
        match self {
            FreezeGroup::Q => "q",
            FreezeGroup::K => "k",
            FreezeGroup::V => "v",
            FreezeGroup::C => "c",
            FreezeGroup::Decoder => "decoder",
            FreezeGroup::Queries => "queries",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask(pub BTreeSet<FreezeGroup>);

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask(BTreeSet::new())
    }

    /// The last-attention linears, frozen by default.
    pub fn qkvc() -> Self {
        FreezeMask([FreezeGroup::Q, FreezeGroup::K, FreezeGroup::V, FreezeGroup::C].into())
    }

    pub fn contains(&self, g: FreezeGroup) -> bool {
        self.0.contains(&g)
    }
}

impl Default for FreezeMask {
    fn default() -> Self {
        Self::qkvc()
    }
}

impl std::str::FromStr for FreezeMask {
    type Err = Error;

    /// Comma-separated groups; `o` is accepted for the output projection `c`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(FreezeMask::none());
        }
        let mut set = BTreeSet::new();
        for part in s.split(',') {
            let g = match part.trim() {
                "q" => FreezeGroup::Q,
                "k" => FreezeGroup::K,
                "v" => FreezeGroup::V,
                "c" | "o" => FreezeGroup::C,
                "decoder" => FreezeGroup::Decoder,
                "queries" => FreezeGroup::Queries,
                other => return Err(Error::Config(format!("unknown freeze group {other:?}"))),
            };
            set.insert(g);
        }
        Ok(FreezeMask(set))
    }
}

impl std::fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.0.iter().map(|g| g.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_queries: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Heads of the final pooling attention.
    pub attn_heads: usize,
    /// Decoder feed-forward width; `0` means twice the embedding width.
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub attn_bias: bool,
    /// Append the token mean to keys/values of the pooled CLIP head.
    pub include_mean_token: bool,
    /// Size of a learned positional table added to the decoder memory; `0` disables it.
    pub positional_tokens: usize,
    pub freeze: FreezeMask,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            n_queries: 50,
            decoder_layers: 2,
            decoder_heads: 8,
            attn_heads: 1,
            ffn_hidden: 0,
            dropout: 0.1,
            attn_bias: true,
            include_mean_token: false,
            positional_tokens: 0,
            freeze: FreezeMask::default(),
        }
    }
}

impl HeadConfig {
    pub fn ffn_width(&self, embed_dim: usize) -> usize {
        if self.ffn_hidden == 0 {
            2 * embed_dim
        } else {
            self.ffn_hidden
        }
    }
}

/// DETR-style post-norm decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FfnParams,
    pub norms: [(ParamId, ParamId); 3],
}

impl DecoderLayerParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut attn = |name: &str, rng: &mut _| -> Result<AttentionParams> {
            Ok(AttentionParams {
                q: Linear::init(store, &format!("{prefix}.{name}.q"), d, d, true, true, rng)?,
                k: Linear::init(store, &format!("{prefix}.{name}.k"), d, d, true, true, rng)?,
                v: Linear::init(store, &format!("{prefix}.{name}.v"), d, d, true, true, rng)?,
                c: Linear::init(store, &format!("{prefix}.{name}.out"), d, d, true, true, rng)?,
                heads,
            })
        };
        let self_attn = attn("self_attn", rng)?;
        let cross_attn = attn("cross_attn", rng)?;
        let ffn = FfnParams {
            lin1: Linear::init(store, &format!("{prefix}.ffn.lin1"), d, hidden, true, true, rng)?,
            lin2: Linear::init(store, &format!("{prefix}.ffn.lin2"), hidden, d, true, true, rng)?,
        };
        let mut norm = |i: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{prefix}.norm{i}.gain"), Tensor::full(&[d], 1.0), true)?,
                store.add(format!("{prefix}.norm{i}.bias"), Tensor::zeros(&[d]), true)?,
            ))
        };
        let norms = [norm(1)?, norm(2)?, norm(3)?];
        self_attn.validate(store)?;
        Ok(DecoderLayerParams {
            self_attn,
            cross_attn,
            ffn,
            norms,
        })
    }
}

/// Self-attention, cross-attention to `memory`, feed-forward; each sublayer
/// followed by dropout, residual add and layer norm.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    queries: Var,
    memory: Var,
    p: &DecoderLayerParams,
    dropout_ratio: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let norm = |g: &mut Graph, x: Var, (gain, bias): (ParamId, ParamId)| {
        let gain = g.param(store, gain);
        let bias = g.param(store, bias);
        g.layer_norm(x, gain, bias)
    };
    let sa = multi_head_attention(g, store, queries, queries, &p.self_attn)?;
    let sa = dropout(g, sa, dropout_ratio, training, rng)?;
    let t = g.add(queries, sa)?;
    let t = norm(g, t, p.norms[0])?;

    let ca = multi_head_attention(g, store, t, memory, &p.cross_attn)?;
    let ca = dropout(g, ca, dropout_ratio, training, rng)?;
    let t = g.add(t, ca)?;
    let t = norm(g, t, p.norms[1])?;

    let f = ffn(g, store, t, &p.ffn, dropout_ratio, training, rng)?;
    let f = dropout(g, f, dropout_ratio, training, rng)?;
    let t = g.add(t, f)?;
    norm(g, t, p.norms[2])
}

/// Trainable head state: learnable queries, decoder stack, the pooling
/// attention linears and the no-object class embedding used by the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SumClipParams {
    pub store: ParamStore,
    pub queries: ParamId,
    pub decoder: Vec<DecoderLayerParams>,
    pub attn: AttentionParams,
    pub positional: Option<ParamId>,
    pub no_object: ParamId,
    pub config: HeadConfig,
}

impl SumClipParams {
    pub fn embed_dim(&self) -> usize {
        self.store.get(self.queries).tensor.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.attn.c.out_dim(&self.store)
    }

    pub fn n_queries(&self) -> usize {
        self.store.get(self.queries).tensor.rows()
    }

    /// Sets `trainable` on every parameter according to `mask`.
    pub fn apply_freeze(&mut self, mask: &FreezeMask) {
        let ids: Vec<_> = self.store.iter().map(|(id, p)| (id, FreezeGroup::of(&p.name))).collect();
        for (id, group) in ids {
            let frozen = group.is_some_and(|g| mask.contains(g));
            self.store.set_trainable(id, !frozen);
        }
        self.config.freeze = mask.clone();
    }

    /// Names of trainable parameters, in store order.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.as_str())
            .collect()
    }
}

/// Builds a SUM-CLIP head: queries, decoder layers, positional table and
/// no-object embedding are Xavier-uniform; the pooling linears are copied
/// from `reference`.
pub fn init_sum_clip(config: &HeadConfig, reference: &ClipLinears, seed: SeedTree) -> Result<SumClipParams> {
    reference.validate()?;
    if config.n_queries == 0 {
        return Err(Error::Config("head.queries must be at least 1".into()));
    }
    let d = reference.embed_dim();
    if config.decoder_layers > 0 && (config.decoder_heads == 0 || d % config.decoder_heads != 0) {
        return Err(Error::Config(format!(
            "embedding width {d} is not divisible by {} decoder heads",
            config.decoder_heads
        )));
    }
    crate::numerics::layers::check_dropout_ratio(config.dropout)?;
    let mut rng = seed.child("init_sum_clip").rng();
    let mut store = ParamStore::new();
    let queries = store.add("queries", xavier_uniform(config.n_queries, d, &mut rng), true)?;
    let hidden = config.ffn_width(d);
    let decoder = (0..config.decoder_layers)
        .map(|i| DecoderLayerParams::init(&mut store, &format!("decoder.{i}"), d, hidden, config.decoder_heads, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let positional = if config.positional_tokens > 0 {
        Some(store.add("positional", xavier_uniform(config.positional_tokens, d, &mut rng), true)?)
    } else {
        None
    };
    let attn = reference.register(&mut store, config.attn_heads, true, config.attn_bias)?;
    attn.validate(&store)?;
    let no_object = store.add("no_object", xavier_uniform(1, reference.out_dim(), &mut rng), true)?;
    let mut p = SumClipParams {
        store,
        queries,
        decoder,
        attn,
        positional,
        no_object,
        config: config.clone(),
    };
    p.apply_freeze(&config.freeze);
    Ok(p)
}

/// Records the head on `g` for token matrix `x`; returns the `N×C_o` output.
pub fn sum_clip_forward(g: &mut Graph, params: &SumClipParams, x: Var, training: bool, rng: &mut impl Rng) -> Result<Var> {
    let store = &params.store;
    if g.value(x).cols() != params.embed_dim() {
        return Err(Error::dim(
            "sum_clip_head",
            format!("feature width {} vs head width {}", g.value(x).cols(), params.embed_dim()),
        ));
    }
    let memory = match params.positional {
        Some(pos) => {
            let pv = g.param(store, pos);
            if g.value(pv).rows() != g.value(x).rows() {
                return Err(Error::dim("sum_clip_head", "positional table size differs from token count"));
            }
            g.add(x, pv)?
        }
        None => x,
    };
    let mut q = g.param(store, params.queries);
    for layer in &params.decoder {
        q = decoder_layer(g, store, q, memory, layer, params.config.dropout, training, rng)?;
    }
    multi_head_attention(g, store, q, x, &params.attn)
}

/// Pure evaluation of the head on one image.
pub fn sum_clip_head(fm: &FeatureMap, params: &SumClipParams, training: bool, rng: &mut impl Rng) -> Result<EmbeddingSet> {
    if fm.tokens() == 0 {
        return Err(Error::EmptyFeatures(fm.image_id));
    }
    let mut g = Graph::new();
    let x = g.constant(fm.x.clone());
    let y = sum_clip_forward(&mut g, params, x, training, rng)?;
    Ok(EmbeddingSet {
        image_id: fm.image_id,
        y: g.value(y).clone(),
        normalized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{clip_pool_head, tests::random_linears};
    use super::*;
    use crate::numerics::{grad_check, Gradients};

    fn fm(k: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = SeedTree::new(seed).rng();
        FeatureMap::new(seed, Tensor::matrix(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .unwrap()
    }

    fn small_config(n: usize, layers: usize) -> HeadConfig {
        HeadConfig {
            n_queries: n,
            decoder_layers: layers,
            decoder_heads: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_case_matches_pooled_head() {
        let lin = random_linears(6, 4, 3);
        let image = fm(5, 6, 1);
        let mut p = init_sum_clip(&small_config(1, 0), &lin, SeedTree::new(0)).unwrap();
        p.store.get_mut(p.queries).tensor = image.x.mean_rows();
        let mut rng = SeedTree::new(0).rng();
        let a = sum_clip_head(&image, &p, false, &mut rng).unwrap().y;
        let (store, attn) = lin.frozen().unwrap();
        let b = clip_pool_head(&image, &store, &attn, false).unwrap().y;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_zero_queries_pool_independently() {
        let lin = random_linears(4, 3, 5);
        let image = fm(7, 4, 2);
        let p = init_sum_clip(&small_config(3, 0), &lin, SeedTree::new(1)).unwrap();
        let mut rng = SeedTree::new(0).rng();
        let all = sum_clip_head(&image, &p, false, &mut rng).unwrap().y;
        for i in 0..3 {
            let mut single = init_sum_clip(&small_config(1, 0), &lin, SeedTree::new(1)).unwrap();
            single.store.get_mut(single.queries).tensor = p.store.get(p.queries).tensor.select_rows(&[i]);
            let one = sum_clip_head(&image, &single, false, &mut rng).unwrap().y;
            for (x, y) in all.row(i).iter().zip(one.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_shape_and_freeze() {
        let lin = random_linears(16, 8, 1);
        let cfg = HeadConfig::default();
        let p = init_sum_clip(&cfg, &lin, SeedTree::new(2)).unwrap();
        let mut rng = SeedTree::new(0).rng();
        let y = sum_clip_head(&fm(9, 16, 3), &p, false, &mut rng).unwrap();
        assert_eq!(y.y.shape(), &[50, 8]);
        for (_, param) in p.store.iter() {
            let frozen = param.name.starts_with("attn.");
            assert_eq!(param.trainable, !frozen, "{}", param.name);
        }
        let mut none = cfg.clone();
        none.freeze = "none".parse().unwrap();
        let p = init_sum_clip(&none, &lin, SeedTree::new(2)).unwrap();
        assert!(p.store.iter().all(|(_, x)| x.trainable));
    }

    #[test]
    fn table_variants_parse() {
        let m: FreezeMask = "q,k,v,o".parse().unwrap();
        assert_eq!(m, FreezeMask::qkvc());
        assert_eq!(m.to_string(), "q,k,v,c");
        let m: FreezeMask = "v,c".parse().unwrap();
        assert!(m.contains(FreezeGroup::V) && !m.contains(FreezeGroup::Q));
        assert!("x".parse::<FreezeMask>().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let lin = random_linears(8, 4, 1);
        let a = init_sum_clip(&small_config(4, 2), &lin, SeedTree::new(9)).unwrap();
        let b = init_sum_clip(&small_config(4, 2), &lin, SeedTree::new(9)).unwrap();
        assert_eq!(a.store, b.store);
        let c = init_sum_clip(&small_config(4, 2), &lin, SeedTree::new(10)).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn mismatched_reference_is_rejected() {
        let mut lin = random_linears(8, 4, 1);
        lin.c.weight = Tensor::zeros(&[5, 4]);
        assert!(init_sum_clip(&small_config(2, 1), &lin, SeedTree::new(0)).is_err());
    }

    fn zero_out_projections(p: &mut SumClipParams) {
        for layer in p.decoder.clone() {
            for lin in [layer.self_attn.c, layer.cross_attn.c, layer.ffn.lin2] {
                for id in lin.param_ids() {
                    let shape = p.store.get(id).tensor.shape().to_vec();
                    p.store.get_mut(id).tensor = Tensor::zeros(&shape);
                }
            }
        }
    }

    #[test]
    fn zero_output_projections_leave_residual_path() {
        let lin = random_linears(4, 3, 1);
        let mut p = init_sum_clip(&small_config(3, 1), &lin, SeedTree::new(0)).unwrap();
        zero_out_projections(&mut p);
        // standardized rows are a fixed point of the three layer norms
        let q = Tensor::from_rows(&[
            vec![1.0, -1.0, 1.0, -1.0],
            vec![2f64.sqrt(), 0.0, -(2f64.sqrt()), 0.0],
            vec![-1.0, -1.0, 1.0, 1.0],
        ])
        .unwrap();
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let mem = g.constant(fm(5, 4, 1).x);
        let mut rng = SeedTree::new(0).rng();
        let out = decoder_layer(&mut g, &p.store, qv, mem, &p.decoder[0], 0.0, false, &mut rng).unwrap();
        for (a, b) in g.value(out).data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn decoder_output_depends_on_memory() {
        let lin = random_linears(4, 3, 1);
        let p = init_sum_clip(&small_config(3, 1), &lin, SeedTree::new(0)).unwrap();
        let mut rng = SeedTree::new(0).rng();
        let run = |m: Tensor, rng: &mut _| {
            let mut g = Graph::new();
            let q = g.param(&p.store, p.queries);
            let mv = g.constant(m);
            let out = decoder_layer(&mut g, &p.store, q, mv, &p.decoder[0], 0.0, false, rng).unwrap();
            g.value(out).clone()
        };
        let a = run(fm(5, 4, 1).x, &mut rng);
        let b = run(fm(5, 4, 2).x, &mut rng);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn decoder_layer_gradient() {
        let lin = random_linears(4, 3, 1);
        let mut p = init_sum_clip(&small_config(3, 1), &lin, SeedTree::new(4)).unwrap();
        p.apply_freeze(&FreezeMask::none());
        let image = fm(5, 4, 7);
        let f = |s: &ParamStore| -> Result<(f64, Gradients)> {
            let mut g = Graph::new();
            let q = g.param(s, p.queries);
            let m = g.constant(image.x.clone());
            let mut rng = SeedTree::new(0).rng();
            let out = decoder_layer(&mut g, s, q, m, &p.decoder[0], 0.0, false, &mut rng)?;
            let w = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?);
            let prod = g.mul(out, w)?;
            let l = g.sum(prod);
            Ok((g.value(l).item(), g.backward(l, s.len())?))
        };
        let r = grad_check(f, &p.store, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn dropout_in_training_changes_output_deterministically() {
        let lin = random_linears(8, 4, 1);
        let mut cfg = small_config(4, 2);
        cfg.dropout = 0.3;
        let p = init_sum_clip(&cfg, &lin, SeedTree::new(0)).unwrap();
        let image = fm(6, 8, 3);
        let eval = sum_clip_head(&image, &p, false, &mut SeedTree::new(1).rng()).unwrap();
        let t1 = sum_clip_head(&image, &p, true, &mut SeedTree::new(1).rng()).unwrap();
        let t2 = sum_clip_head(&image, &p, true, &mut SeedTree::new(1).rng()).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, eval);
    }
}
