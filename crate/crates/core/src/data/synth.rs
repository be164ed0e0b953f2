//! Seeded synthetic grounding data.
//!
//! Each sample picks a concept from a fixed bank. Every clip is standard
//! Gaussian noise; clips inside the ground-truth span additionally carry
//! `signal_strength · SIGNAL_NORM · u_c`. Query tokens carry
//! `QUERY_NORM · q_c` plus noise regardless of strength.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::quantize;
use super::GroundingSample;
use crate::error::{Error, Result};
use crate::metrics::Span;
use crate::numerics::{randn, Tensor};

pub const SIGNAL_NORM: f64 = 4.0;
pub const QUERY_NORM: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Inclusive clip-count range.
    pub video_len: (usize, usize),
    pub query_len: (usize, usize),
    pub d_video: usize,
    pub d_query: usize,
    pub n_concepts: usize,
    pub signal_strength: f64,
    /// Seconds per clip.
    pub clip_len: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 32,
            video_len: (24, 40),
            query_len: (6, 10),
            d_video: 32,
            d_query: 24,
            n_concepts: 8,
            signal_strength: 1.0,
            clip_len: 2.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synth spec: {m}")));
        if self.video_len.0 < 2 || self.video_len.0 > self.video_len.1 {
            return bad("video_len needs 2 ≤ min ≤ max");
        }
        if self.query_len.0 < 1 || self.query_len.0 > self.query_len.1 {
            return bad("query_len needs 1 ≤ min ≤ max");
        }
        if self.d_video == 0 || self.d_query == 0 || self.n_concepts == 0 {
            return bad("dimensions and concept count must be positive");
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return bad("signal_strength must be finite and ≥ 0");
        }
        if !(self.clip_len.is_finite() && self.clip_len > 0.0) {
            return bad("clip_len must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<GroundingSample>,
    /// Concept index per sample.
    pub concepts: Vec<usize>,
    /// Unit concept directions, `[n_concepts×d_video]`.
    pub video_bank: Tensor,
    /// Unit concept directions, `[n_concepts×d_query]`.
    pub query_bank: Tensor,
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn([rows, cols], 1.0, rng);
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let video_bank = unit_rows(spec.n_concepts, spec.d_video, &mut rng);
    let query_bank = unit_rows(spec.n_concepts, spec.d_query, &mut rng);
    let width = (spec.n_samples.max(1) - 1).to_string().len();
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut concepts = Vec::with_capacity(spec.n_samples);
    for n in 0..spec.n_samples {
        let c = rng.random_range(0..spec.n_concepts);
        let lv = rng.random_range(spec.video_len.0..=spec.video_len.1);
        let lq = rng.random_range(spec.query_len.0..=spec.query_len.1);
        let min_len = (lv / 5).max(1);
        let max_len = (lv / 2).max(min_len);
        let len = rng.random_range(min_len..=max_len);
        let start = rng.random_range(0..=lv - len);

        let mut video = randn([lv, spec.d_video], 1.0, &mut rng);
        let shift = spec.signal_strength * SIGNAL_NORM;
        for i in start..start + len {
            for (v, u) in video.row_mut(i).iter_mut().zip(video_bank.row(c)) {
                *v += shift * u;
            }
        }
        let mut query = randn([lq, spec.d_query], 1.0, &mut rng);
        for j in 0..lq {
            for (v, u) in query.row_mut(j).iter_mut().zip(query_bank.row(c)) {
                *v += QUERY_NORM * u;
            }
        }
        let saliency = (0..lv)
            .map(|i| {
                let inside = (start..start + len).contains(&i);
                rng.random_range(0..2u8) + if inside { 3 } else { 0 }
            })
            .collect();
        samples.push(GroundingSample {
            sample_id: format!("syn{n:0width$}"),
            video: quantize(&video),
            query: quantize(&query),
            spans: vec![Span {
                st: start as f64 / lv as f64,
                ed: (start + len) as f64 / lv as f64,
            }],
            saliency,
            duration: lv as f64 * spec.clip_len,
            clip_len: spec.clip_len,
        });
        concepts.push(c);
    }
    Ok(SynthDataset {
        samples,
        concepts,
        video_bank,
        query_bank,
    })
}
