//! Shared builders for the criterion benchmarks.

use dmad_core::lora::LoraConfig;
use dmad_core::metrics::{Label, ScoreRecord};
use dmad_core::model::{Detector, DetectorMode, PairSample};
use dmad_core::rng::stream;
use dmad_core::Tensor;
use rand::Rng;

pub fn desk_model(seed: u64) -> Detector {
    Detector::build(
        dmad_core::ViTConfig::default(),
        LoraConfig::default(),
        DetectorMode::Differential,
        seed,
    )
    .expect("default configs are valid")
}

pub fn random_image(side: usize, seed: u64) -> Tensor {
    let mut r = stream(seed, &[0xbe]);
    Tensor::new(
        vec![1, side, side],
        (0..side * side).map(|_| r.gen::<f64>()).collect(),
    )
    .expect("finite pixels")
}

pub fn random_pair(side: usize, seed: u64) -> PairSample {
    PairSample::new(
        format!("bench-{seed}"),
        random_image(side, seed),
        random_image(side, seed + 1),
        Label::Morph,
        "bench",
    )
}

pub fn random_scores(n: usize, seed: u64) -> Vec<ScoreRecord> {
    let mut r = stream(seed, &[0x5c]);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::BonaFide } else { Label::Morph };
            ScoreRecord::new(format!("s{i}"), label, r.gen::<f64>(), "bench").unwrap()
        })
        .collect()
}
