#![allow(dead_code)]

use mlvtg::data::{generate_synthetic, GroundingSample, RunConfig, SynthSpec};
use mlvtg::model::{Model, Registries};
use mlvtg::train::Trainer;

/// A model small enough to train for dozens of steps in well under a second.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        d_model: 8,
        d_inner: 8,
        blocks: 1,
        d_state: 4,
        d_llm: 8,
        max_len: 64,
        batch_size: 2,
        lr: 1e-3,
        ..RunConfig::default()
    }
}

pub fn tiny_data(n: usize) -> Vec<GroundingSample> {
    generate_synthetic(&SynthSpec {
        n_samples: n,
        video_len: (8, 12),
        query_len: (3, 5),
        d_video: 6,
        d_query: 5,
        ..SynthSpec::default()
    })
    .unwrap()
    .samples
}

pub fn trainer(cfg: &RunConfig, data: &[GroundingSample]) -> Trainer {
    let (dv, dq) = (data[0].video.cols(), data[0].query.cols());
    Trainer::new(Model::new(cfg, dv, dq, None, &Registries::default()).unwrap())
}
