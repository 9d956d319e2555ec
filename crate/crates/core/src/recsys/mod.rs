//! Downstream next-item recommender and evaluation metrics.

pub mod metrics;
pub mod model;

pub use metrics::{gr_metric, paired_t_test, rank_of, GrMetric, PairedTTest, RankMetrics};
pub use model::{
    adapt, eval_topk, last_item_examples, rec_train, target_ranks, window_examples, Adapter, RecConfig, RecEpoch, RecModel,
};
