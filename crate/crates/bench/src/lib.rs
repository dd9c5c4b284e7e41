//! Fixtures shared by the benchmarks.

use qexpand_core::synth::{generate_corpus, Corpus, Stage, SynthConfig};
use qexpand_core::{Benchmark, LAttQe, LAttQeConfig};

/// Desk-scale synthetic corpus: 200 classes, 64 dimensions, 2000 distractors.
pub fn corpus() -> Corpus {
    generate_corpus(&SynthConfig {
        seed: 7,
        sigma: 0.17,
        ..SynthConfig::default()
    })
    .expect("default synthetic config is valid")
}

pub fn test_benchmark(corpus: &Corpus) -> Benchmark {
    corpus
        .benchmark(Stage::Test)
        .expect("synthetic corpus has a test stage")
}

/// Untrained desk-config model.
pub fn model(seed: u64) -> LAttQe<f32> {
    LAttQe::new(LAttQeConfig::default(), seed).expect("default model config is valid")
}
