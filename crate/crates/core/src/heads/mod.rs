//! Image heads that turn a backbone token grid into a set of embeddings.
//!
//! * [`clip_pool_head`]: one embedding, the mean token attending over all tokens.
//! * [`dense_clip_head`]: one embedding per token through the value/output path.
//! * [`cluster_clip_head`]: dense embeddings aggregated by K-Means.
//! * [`sum_clip_head`]: learnable queries refined by a decoder stack, then the
//!   pooling attention with those queries.

pub mod kmeans;
mod sumclip;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, ClusterConfig, KMeansInit, KMeansResult};
pub use sumclip::{
    decoder_layer, init_sum_clip, sum_clip_forward, sum_clip_head, DecoderLayerParams, FreezeGroup, FreezeMask,
    HeadConfig, SumClipParams,
};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, multi_head_attention, AttentionParams, Graph, Linear, ParamStore, Tensor};
use crate::rng::SeedTree;

/// Backbone output for one image: `K` tokens of width `C_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub image_id: u64,
    pub x: Tensor,
}

impl FeatureMap {
    pub fn new(image_id: u64, x: Tensor) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() == 0 {
            return Err(Error::EmptyFeatures(image_id));
        }
        if !x.is_finite() {
            return Err(Error::Contract(format!("image {image_id} has non-finite features")));
        }
        Ok(FeatureMap { image_id, x })
    }

    pub fn tokens(&self) -> usize {
        self.x.rows()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }
}

/// Output of a head: `N` embeddings of width `C_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub image_id: u64,
    pub y: Tensor,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }

    pub fn normalize(self) -> Result<Self> {
        if self.normalized {
            return Ok(self);
        }
        Ok(EmbeddingSet {
            image_id: self.image_id,
            y: l2_normalize_rows(&self.y)?,
            normalized: true,
        })
    }
}

/// Weights of CLIP's final attention-pooling layer as plain tensors
/// (`in×out` weights plus optional biases). This is how reference weights are
/// shipped between the generator, pseudo-labeler and trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLinears {
    pub q: LinearWeights,
    pub k: LinearWeights,
    pub v: LinearWeights,
    pub c: LinearWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearWeights {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearWeights {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl ClipLinears {
    pub fn embed_dim(&self) -> usize {
        self.q.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.c.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let ce = self.q.in_dim();
        let ok = self.k.in_dim() == ce
            && self.v.in_dim() == ce
            && self.q.out_dim() == self.k.out_dim()
            && self.c.in_dim() == self.v.out_dim();
        if !ok {
            return Err(Error::dim("ClipLinears", "q/k/v/c shapes are inconsistent"));
        }
        Ok(())
    }

    /// Registers the four linears in `store` under `attn.{q,k,v,c}`.
    pub fn register(&self, store: &mut ParamStore, heads: usize, trainable: bool, with_bias: bool) -> Result<AttentionParams> {
        self.validate()?;
        let mut reg = |name: &str, lw: &LinearWeights| {
            let bias = if with_bias {
                Some(lw.bias.clone().unwrap_or_else(|| Tensor::zeros(&[lw.out_dim()])))
            } else {
                None
            };
            Linear::from_tensors(store, &format!("attn.{name}"), lw.weight.clone(), bias, trainable)
        };
        let p = AttentionParams {
            q: reg("q", &self.q)?,
            k: reg("k", &self.k)?,
            v: reg("v", &self.v)?,
            c: reg("c", &self.c)?,
            heads,
        };
        Ok(p)
    }

    /// Frozen parameter set for the training-free heads.
    pub fn frozen(&self) -> Result<(ParamStore, AttentionParams)> {
        let mut store = ParamStore::new();
        let p = self.register(&mut store, 1, false, true)?;
        Ok((store, p))
    }
}

/// Single-query attention pooling: the token mean attends over the tokens.
///
/// When `include_mean_token` is set the mean is also appended to the
/// keys/values, as real CLIP does.
pub fn clip_pool_head(
    fm: &FeatureMap,
    store: &ParamStore,
    attn: &AttentionParams,
    include_mean_token: bool,
) -> Result<EmbeddingSet> {
    if fm.tokens() == 0 {
        return Err(Error::EmptyFeatures(fm.image_id));
    }
    let mut g = Graph::new();
    let x = g.constant(fm.x.clone());
    let mean = g.mean_rows(x);
    let kv = if include_mean_token { g.concat_rows(&[mean, x])? } else { x };
    let y = multi_head_attention(&mut g, store, mean, kv, attn)?;
    Ok(EmbeddingSet {
        image_id: fm.image_id,
        y: g.value(y).clone(),
        normalized: false,
    })
}

/// Per-token `c(v(x_i))`.
pub fn dense_clip_head(fm: &FeatureMap, store: &ParamStore, attn: &AttentionParams) -> Result<EmbeddingSet> {
    if fm.tokens() == 0 {
        return Err(Error::EmptyFeatures(fm.image_id));
    }
    let mut g = Graph::new();
    let x = g.constant(fm.x.clone());
    let v = attn.v.forward(&mut g, store, x)?;
    let y = attn.c.forward(&mut g, store, v)?;
    Ok(EmbeddingSet {
        image_id: fm.image_id,
        y: g.value(y).clone(),
        normalized: false,
    })
}

/// Dense embeddings clustered with K-Means; one mean embedding per cluster.
///
/// The K-Means stream is derived from `cfg.seed` and the image id, so the
/// result does not depend on the order images are processed in.
pub fn cluster_clip_head(
    fm: &FeatureMap,
    store: &ParamStore,
    attn: &AttentionParams,
    cfg: &ClusterConfig,
) -> Result<EmbeddingSet> {
    let dense = dense_clip_head(fm, store, attn)?;
    let per_image = ClusterConfig {
        seed: SeedTree::new(cfg.seed).index(fm.image_id).seed(),
        ..*cfg
    };
    let r = kmeans(&dense.y, &per_image)?;
    Ok(EmbeddingSet {
        image_id: fm.image_id,
        y: r.centers,
        normalized: false,
    })
}
