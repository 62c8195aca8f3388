//! Synthetic data, label handling and the fine-tuning loop.

pub mod checkpoint;
pub mod labels;
pub mod synth;
pub mod trainer;

pub use labels::{
    category_frequencies, labeled_count, make_semi_split, read_labels, sample_federated_negatives,
    sample_pseudo_negatives, write_labels, LabelRecord,
};
pub use synth::{synth_generate, DataSplit, Manifest, SynthConfig, SynthPaths, SynthSplit, SynthWorld, EVAL_ID_OFFSET};
pub use checkpoint::Checkpoint;
pub use trainer::{lr_at, train_run, EpochMetrics, RunSettings, TrainConfig, TrainData, Trainer};
