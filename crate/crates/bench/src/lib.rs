//! Fixtures shared by the benchmarks.

use mavgram_core::data::{Generator, SynthProfile, NUM_CLASSES};
use mavgram_core::pipeline::{prepare_waves, ModelSpec, Prepared};

/// `count` canonicalized source-profile samples cycling through the classes.
pub fn prepared(spec: &ModelSpec, count: usize) -> Vec<Prepared> {
    let g = Generator::new(SynthProfile::source(), 1).expect("valid profile");
    (0..count)
        .map(|i| {
            let class = i % NUM_CLASSES;
            let (a, v) = g.sample(class, i / NUM_CLASSES).expect("sample");
            prepare_waves(&a, &v, class, &spec.geometry).expect("canonical")
        })
        .collect()
}
