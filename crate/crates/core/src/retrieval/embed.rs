//! Offline embedding of a dataset with one of the heads.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::{
    clip_pool_head, cluster_clip_head, dense_clip_head, sum_clip_head, ClipLinears, ClusterConfig, EmbeddingSet,
    FeatureMap, SumClipParams,
};
use crate::io::EmbeddingRows;
use crate::par::Exec;
use crate::rng::SeedTree;

/// Training-free heads built from the reference pooling weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceHead {
    Clip,
    Dense,
    Cluster,
}

impl FromStr for ReferenceHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(ReferenceHead::Clip),
            "dense" => Ok(ReferenceHead::Dense),
            "cluster" => Ok(ReferenceHead::Cluster),
            _ => Err(Error::Config(format!("unknown head {s:?}, expected clip, dense or cluster"))),
        }
    }
}

fn collect(features: &[FeatureMap], dim: usize, exec: Exec, f: impl Fn(&FeatureMap) -> Result<EmbeddingSet> + Sync + Send) -> Result<EmbeddingRows> {
    let mut order: Vec<&FeatureMap> = features.iter().collect();
    order.sort_by_key(|f| f.image_id);
    if order.windows(2).any(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::Contract("duplicate image id in features".into()));
    }
    let sets = exec.map(&order, |fm| {
        f(fm).and_then(EmbeddingSet::normalize).map_err(|e| Error::Image {
            image_id: fm.image_id,
            source: Box::new(e),
        })
    });
    let mut rows = EmbeddingRows::new(dim);
    for s in sets {
        let s = s?;
        rows.push_block(s.image_id, &s.y)?;
    }
    Ok(rows)
}

/// SUM-CLIP in evaluation mode: `N` unit rows per image, ascending image id.
pub fn embed_sum_clip(features: &[FeatureMap], params: &SumClipParams, exec: Exec) -> Result<EmbeddingRows> {
    let d = params.embed_dim();
    collect(features, params.out_dim(), exec, |fm| {
        if fm.width() != d {
            return Err(Error::dim("embed_dataset", format!("feature width {} vs head width {d}", fm.width())));
        }
        let mut rng = SeedTree::new(0).rng();
        sum_clip_head(fm, params, false, &mut rng)
    })
}

pub fn embed_reference(
    features: &[FeatureMap],
    linears: &ClipLinears,
    head: ReferenceHead,
    cluster: &ClusterConfig,
    include_mean_token: bool,
    exec: Exec,
) -> Result<EmbeddingRows> {
    let (store, attn) = linears.frozen()?;
    let d = linears.embed_dim();
    collect(features, linears.out_dim(), exec, |fm| {
        if fm.width() != d {
            return Err(Error::dim("embed_dataset", format!("feature width {} vs head width {d}", fm.width())));
        }
        match head {
            ReferenceHead::Clip => clip_pool_head(fm, &store, &attn, include_mean_token),
            ReferenceHead::Dense => dense_clip_head(fm, &store, &attn),
            ReferenceHead::Cluster => cluster_clip_head(fm, &store, &attn, cluster),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{init_sum_clip, tests::random_linears, HeadConfig};
    use crate::numerics::Tensor;

    #[test]
    fn identical_images_get_identical_blocks() {
        let lin = random_linears(4, 3, 1);
        let cfg = HeadConfig {
            n_queries: 5,
            decoder_layers: 1,
            decoder_heads: 2,
            ..Default::default()
        };
        let p = init_sum_clip(&cfg, &lin, SeedTree::new(0)).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let feats = vec![FeatureMap::new(8, x.clone()).unwrap(), FeatureMap::new(2, x).unwrap()];
        let rows = embed_sum_clip(&feats, &p, Exec::Parallel).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.ids[0], 2);
        assert_eq!(rows.values[..15], rows.values[15..]);
        let bad = vec![FeatureMap::new(1, Tensor::zeros(&[3, 5])).unwrap()];
        assert!(matches!(embed_sum_clip(&bad, &p, Exec::Sequential), Err(Error::Image { image_id: 1, .. })));
        let dense = embed_reference(&feats, &lin, ReferenceHead::Dense, &ClusterConfig::default(), false, Exec::Sequential).unwrap();
        assert_eq!(dense.len(), 6);
    }
}
