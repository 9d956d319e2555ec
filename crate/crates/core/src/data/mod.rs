//! Corpus ingestion, preparation and the synthetic generator.

pub mod corpus;
pub mod prep;
pub mod synth;

pub use corpus::{load_corpus, Corpus, Item, ItemId, Session};
pub use prep::{
    cold_split, cold_split_with_items, extract_meta_pairs, filter_corpus, filter_meta_pairs, split_sessions,
    MetaPair, Splits, MAX_ORDER,
};
pub use synth::{synth_generate, SynthConfig, TransitionSpec};
