#![allow(dead_code)]

use tdla_core::remap::compact;
use tdla_core::synth::{generate_corpus, LayoutFamily, SynthPageSpec};
use tdla_net::loss::encode_targets;
use tdla_net::{init_detector, Detector, ModelConfig, TrainData};

/// Compact-taxonomy synthetic pages from the toy renderer.
pub fn toy_data(pages: usize, seed: u64, family: LayoutFamily) -> TrainData {
    let (d, images) = generate_corpus(&SynthPageSpec::toy(family), pages, seed).unwrap();
    TrainData { dataset: compact(&d), images }
}

pub fn toy_detector(data: &TrainData, seed: u64) -> Detector {
    init_detector(&data.dataset, ModelConfig::toy(0), seed).unwrap()
}

pub fn targets(det: &Detector, data: &TrainData, page: usize) -> tdla_core::assignment::GtTargets {
    encode_targets(&data.dataset.pages[page], &det.class_ids, &det.codec).unwrap()
}
