//! Unified triplet data: concepts, tokenization, synthetic scenes and JSONL storage.

pub mod concept;
pub mod dataset;
pub mod sample;
pub mod scene;
pub mod tokenizer;

pub use concept::{
    batch_concepts, build_concept, sample_negatives, ConceptDictionary, ConceptSet, FrequencyTier,
};
pub use dataset::{load_jsonl, Corpus, LoadedSample, SampleRecord, SpecRegistry};
pub use sample::{Image, Source, UnifiedSample};
pub use scene::{generate_scene, render_scene, Scene, SceneSpec};
pub use tokenizer::{TokenSeq, Vocab};
