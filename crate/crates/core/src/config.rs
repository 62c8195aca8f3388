//! Run configuration: a line-oriented `section.key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Values are numbers,
//! booleans, or strings (optionally double-quoted). Every key has a default,
//! unknown keys are rejected, and cross-field checks run before any work.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::{ClusterConfig, FreezeMask, HeadConfig};
use crate::matching::LossConfig;
use crate::pseudo_labels::PseudoConfig;
use crate::retrieval::DEFAULT_K;
use crate::training::{RunSettings, SynthConfig, TrainConfig};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "FOR_SEED";

const REFERENCE_PROFILE: &str = include_str!("../profiles/reference.conf");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: DEFAULT_K }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub head: HeadConfig,
    pub cluster: ClusterConfig,
    pub pseudo: PseudoConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text on top of the defaults. Does not validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `section.key = value`", n + 1)));
            };
            cfg.set(key.trim(), unquote(value.trim()))
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let Some((section, field)) = key.split_once('.') else {
            return Err(Error::Config(format!("key {key:?} has no section")));
        };
        let unknown = || Err(Error::Config(format!("unknown key {key:?}")));
        match section {
            "data" => {
                let d = &mut self.data;
                match field {
                    "seed" => d.seed = parse(key, v)?,
                    "n_train" => d.n_train = parse(key, v)?,
                    "n_eval" => d.n_eval = parse(key, v)?,
                    "n_base" => d.n_base = parse(key, v)?,
                    "n_novel" => d.n_novel = parse(key, v)?,
                    "n_distractor" => d.n_distractor = parse(key, v)?,
                    "tokens" => d.tokens = parse(key, v)?,
                    "embed_dim" => d.embed_dim = parse(key, v)?,
                    "out_dim" => d.out_dim = parse(key, v)?,
                    "min_objects" => d.min_objects = parse(key, v)?,
                    "max_objects" => d.max_objects = parse(key, v)?,
                    "min_object_tokens" => d.min_object_tokens = parse(key, v)?,
                    "max_object_tokens" => d.max_object_tokens = parse(key, v)?,
                    "object_noise" => d.object_noise = parse(key, v)?,
                    "background_noise" => d.background_noise = parse(key, v)?,
                    "background_strength" => d.background_strength = parse(key, v)?,
                    "attn_gain" => d.attn_gain = parse(key, v)?,
                    "federated" => d.federated = parse_bool(key, v)?,
                    "federated_negative_rate" => d.federated_negative_rate = parse(key, v)?,
                    _ => return unknown(),
                }
            }
            "head" => {
                let h = &mut self.head;
                match field {
                    "queries" | "n_queries" => h.n_queries = parse(key, v)?,
                    "decoder_layers" => h.decoder_layers = parse(key, v)?,
                    "decoder_heads" => h.decoder_heads = parse(key, v)?,
                    "attn_heads" => h.attn_heads = parse(key, v)?,
                    "ffn_hidden" => h.ffn_hidden = parse(key, v)?,
                    "dropout" => h.dropout = parse(key, v)?,
                    "attn_bias" => h.attn_bias = parse_bool(key, v)?,
                    "include_mean_token" => h.include_mean_token = parse_bool(key, v)?,
                    "positional_tokens" => h.positional_tokens = parse(key, v)?,
                    "freeze" => h.freeze = v.parse::<FreezeMask>()?,
                    _ => return unknown(),
                }
            }
            "cluster" => {
                let c = &mut self.cluster;
                match field {
                    "n_clusters" | "clusters" => c.n_clusters = parse(key, v)?,
                    "max_iters" => c.max_iters = parse(key, v)?,
                    "init" => c.init = v.parse()?,
                    "seed" => c.seed = parse(key, v)?,
                    _ => return unknown(),
                }
            }
            "pseudo" => match field {
                "threshold" => self.pseudo.threshold = parse(key, v)?,
                "temperature" => self.pseudo.temperature = parse(key, v)?,
                _ => return unknown(),
            },
            "loss" => {
                let l = &mut self.loss;
                match field {
                    "gamma_sup" => l.gamma_sup = parse(key, v)?,
                    "gamma_pse" => l.gamma_pse = parse(key, v)?,
                    "w_noobj" => l.w_noobj = parse(key, v)?,
                    "temperature" => l.temperature = parse(key, v)?,
                    "pseudo_negatives" => l.pseudo_negatives = parse(key, v)?,
                    "full_pseudo_pool" => l.full_pseudo_pool = parse_bool(key, v)?,
                    "min_negatives" => l.min_negatives = parse(key, v)?,
                    _ => return unknown(),
                }
            }
            "train" => {
                let t = &mut self.train;
                match field {
                    "lr" => t.lr = parse(key, v)?,
                    "epochs" => t.epochs = parse(key, v)?,
                    "lr_drop_epoch" => t.lr_drop_epoch = parse(key, v)?,
                    "lr_drop_factor" => t.lr_drop_factor = parse(key, v)?,
                    "batch_size" => t.batch_size = parse(key, v)?,
                    "seed" => t.seed = parse(key, v)?,
                    "beta1" => t.adam.beta1 = parse(key, v)?,
                    "beta2" => t.adam.beta2 = parse(key, v)?,
                    "eps" => t.adam.eps = parse(key, v)?,
                    "weight_decay" => t.adam.weight_decay = parse(key, v)?,
                    "labeled_fraction" => t.labeled_fraction = parse(key, v)?,
                    "fold_seed" => t.fold_seed = parse(key, v)?,
                    _ => return unknown(),
                }
            }
            "eval" => match field {
                "k" | "topk" => self.eval.k = parse(key, v)?,
                _ => return unknown(),
            },
            _ => return Err(Error::Config(format!("unknown section in key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pseudo.validate()?;
        self.settings().validate()?;
        let h = &self.head;
        if h.n_queries == 0 {
            return Err(Error::Config("head.queries must be at least 1".into()));
        }
        if h.decoder_layers > 0 && (h.decoder_heads == 0 || self.data.embed_dim % h.decoder_heads != 0) {
            return Err(Error::Config(format!(
                "data.embed_dim {} is not divisible by head.decoder_heads {}",
                self.data.embed_dim, h.decoder_heads
            )));
        }
        if h.attn_heads == 0 || self.data.embed_dim % h.attn_heads != 0 {
            return Err(Error::Config(format!(
                "data.embed_dim {} is not divisible by head.attn_heads {}",
                self.data.embed_dim, h.attn_heads
            )));
        }
        if !(0.0..1.0).contains(&h.dropout) {
            return Err(Error::Config(format!("head.dropout {} outside [0, 1)", h.dropout)));
        }
        if self.cluster.n_clusters == 0 || self.cluster.n_clusters > self.data.tokens {
            return Err(Error::Config(format!(
                "cluster.n_clusters {} must be in 1..=data.tokens ({})",
                self.cluster.n_clusters, self.data.tokens
            )));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }

    /// The synthetic profile used for the forgetting and semi-supervised
    /// experiments, shipped as `profiles/reference.conf`.
    pub fn reference_profile() -> Self {
        let cfg = Self::parse(REFERENCE_PROFILE).expect("reference profile parses");
        cfg.validate().expect("reference profile is valid");
        cfg
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            head: self.head.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let h = &self.head;
        let c = &self.cluster;
        let l = &self.loss;
        let t = &self.train;
        let lines: Vec<(&str, String)> = vec![
            ("data.seed", d.seed.to_string()),
            ("data.n_train", d.n_train.to_string()),
            ("data.n_eval", d.n_eval.to_string()),
            ("data.n_base", d.n_base.to_string()),
            ("data.n_novel", d.n_novel.to_string()),
            ("data.n_distractor", d.n_distractor.to_string()),
            ("data.tokens", d.tokens.to_string()),
            ("data.embed_dim", d.embed_dim.to_string()),
            ("data.out_dim", d.out_dim.to_string()),
            ("data.min_objects", d.min_objects.to_string()),
            ("data.max_objects", d.max_objects.to_string()),
            ("data.min_object_tokens", d.min_object_tokens.to_string()),
            ("data.max_object_tokens", d.max_object_tokens.to_string()),
            ("data.object_noise", format!("{:?}", d.object_noise)),
            ("data.background_noise", format!("{:?}", d.background_noise)),
            ("data.background_strength", format!("{:?}", d.background_strength)),
            ("data.attn_gain", format!("{:?}", d.attn_gain)),
            ("data.federated", d.federated.to_string()),
            ("data.federated_negative_rate", format!("{:?}", d.federated_negative_rate)),
            ("head.queries", h.n_queries.to_string()),
            ("head.decoder_layers", h.decoder_layers.to_string()),
            ("head.decoder_heads", h.decoder_heads.to_string()),
            ("head.attn_heads", h.attn_heads.to_string()),
            ("head.ffn_hidden", h.ffn_hidden.to_string()),
            ("head.dropout", format!("{:?}", h.dropout)),
            ("head.attn_bias", h.attn_bias.to_string()),
            ("head.include_mean_token", h.include_mean_token.to_string()),
            ("head.positional_tokens", h.positional_tokens.to_string()),
            ("head.freeze", h.freeze.to_string()),
            ("cluster.n_clusters", c.n_clusters.to_string()),
            ("cluster.max_iters", c.max_iters.to_string()),
            ("cluster.init", c.init.to_string()),
            ("cluster.seed", c.seed.to_string()),
            ("pseudo.threshold", format!("{:?}", self.pseudo.threshold)),
            ("pseudo.temperature", format!("{:?}", self.pseudo.temperature)),
            ("loss.gamma_sup", format!("{:?}", l.gamma_sup)),
            ("loss.gamma_pse", format!("{:?}", l.gamma_pse)),
            ("loss.w_noobj", format!("{:?}", l.w_noobj)),
            ("loss.temperature", format!("{:?}", l.temperature)),
            ("loss.pseudo_negatives", l.pseudo_negatives.to_string()),
            ("loss.full_pseudo_pool", l.full_pseudo_pool.to_string()),
            ("loss.min_negatives", l.min_negatives.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr_drop_epoch", t.lr_drop_epoch.to_string()),
            ("train.lr_drop_factor", format!("{:?}", t.lr_drop_factor)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.beta1", format!("{:?}", t.adam.beta1)),
            ("train.beta2", format!("{:?}", t.adam.beta2)),
            ("train.eps", format!("{:?}", t.adam.eps)),
            ("train.weight_decay", format!("{:?}", t.adam.weight_decay)),
            ("train.labeled_fraction", format!("{:?}", t.labeled_fraction)),
            ("train.fold_seed", t.fold_seed.to_string()),
            ("eval.k", self.eval.k.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::parse("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.lr, 1e-5);
        assert_eq!(cfg.train.epochs, 25);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.head.n_queries, 50);
        assert_eq!(cfg.pseudo.threshold, 5e-4);
        assert_eq!(cfg.cluster.n_clusters, 50);
        assert_eq!(cfg.eval.k, 50);
    }

    #[test]
    fn parses_values_and_comments() {
        let text = "# comment\n\nloss.gamma_pse = 0\nhead.freeze = \"q,k\"\ndata.federated = true\ntrain.lr=3e-4\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.loss.gamma_pse, 0.0);
        assert_eq!(cfg.head.freeze.to_string(), "q,k");
        assert!(cfg.data.federated);
        assert_eq!(cfg.train.lr, 3e-4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in ["train.learning_rate = 1", "nosection = 1", "model.x = 1", "train.epochs = many", "garbage"] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}");
            assert!(err.to_string().contains("line 1"), "{err}");
        }
    }

    #[test]
    fn cross_field_checks_name_the_fields() {
        let cfg = RunConfig::parse("head.decoder_heads = 7").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("data.embed_dim") && msg.contains("head.decoder_heads"), "{msg}");
        let cfg = RunConfig::parse("train.lr_drop_epoch = 30").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("train.lr_drop_epoch"));
        let cfg = RunConfig::parse("data.embed_dim = 0").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("data.embed_dim"));
    }

    #[test]
    fn reference_profile_loads() {
        let cfg = RunConfig::reference_profile();
        assert_eq!(cfg.data.seed, 7);
        assert_eq!((cfg.data.n_train, cfg.data.n_eval), (2000, 500));
        assert_eq!((cfg.data.n_base, cfg.data.n_novel, cfg.data.n_distractor), (48, 17, 200));
    }

    #[test]
    fn text_form_round_trips() {
        let mut cfg = RunConfig::parse("data.object_noise = 0.25\ntrain.lr = 1e-3\nhead.freeze = none").unwrap();
        cfg.loss.gamma_pse = 0.0;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
