//! Samples, synthetic generation, on-disk formats and run configuration.
//!
//! A dataset directory holds `annotations.jsonl` plus one `MLVF` file per
//! feature matrix, referenced by relative path from each annotation line.

mod annotations;
mod config;
mod features;
mod synth;

use std::path::Path;

pub use annotations::{
    format_annotations, parse_annotations, read_annotations, write_annotations, Annotation, MAX_SALIENCY,
};
pub use config::RunConfig;
pub use features::{
    decode_features, encode_features, quantize, read_features, write_atomic as write_bytes_atomic, write_features,
};
pub use synth::{generate_synthetic, SynthDataset, SynthSpec, QUERY_NORM, SIGNAL_NORM};

use crate::error::{Error, Result};
use crate::metrics::Span;
use crate::numerics::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub sample_id: String,
    /// `[L_v×D_v]`
    pub video: Tensor,
    /// `[L_q×D_q]`
    pub query: Tensor,
    /// Normalized to `[0, 1]`.
    pub spans: Vec<Span>,
    /// One label in 0..=4 per clip.
    pub saliency: Vec<u8>,
    pub duration: f64,
    pub clip_len: f64,
}

impl GroundingSample {
    pub fn clips(&self) -> usize {
        self.video.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Load(format!("sample {}: {m}", self.sample_id)));
        if self.video.rank() != 2 || self.query.rank() != 2 {
            return bad("features must be matrices".into());
        }
        let lv = self.video.rows();
        if lv == 0 || self.query.rows() == 0 {
            return bad("empty video or query".into());
        }
        if self.saliency.len() != lv {
            return bad(format!("{} saliency labels for {lv} clips", self.saliency.len()));
        }
        if self.saliency.iter().any(|&s| s > MAX_SALIENCY) {
            return bad(format!("saliency labels must be ≤ {MAX_SALIENCY}"));
        }
        let expected = lv as f64 * self.clip_len;
        if (expected - self.duration).abs() > 0.5 * self.clip_len {
            return bad(format!(
                "{lv} clips of {}s do not cover duration {}s",
                self.clip_len, self.duration
            ));
        }
        if let Some(s) = self.spans.iter().find(|s| !(0.0 <= s.st && s.st < s.ed && s.ed <= 1.0)) {
            return bad(format!("span [{}, {}] outside [0, 1]", s.st, s.ed));
        }
        if !(self.video.is_finite() && self.query.is_finite()) {
            return bad("non-finite features".into());
        }
        Ok(())
    }

    fn annotation(&self) -> Annotation {
        Annotation {
            sample_id: self.sample_id.clone(),
            duration: self.duration,
            clip_len: self.clip_len,
            spans: self.spans.iter().map(|s| [s.st * self.duration, s.ed * self.duration]).collect(),
            saliency: self.saliency.clone(),
            video_feat: format!("{FEATURES_DIR}/{}_v.mlvf", self.sample_id),
            query_feat: format!("{FEATURES_DIR}/{}_q.mlvf", self.sample_id),
        }
    }
}

/// Writes features and `annotations.jsonl` under `dir`.
///
/// Spans go to disk in seconds, so the normalized values read back are
/// `(st·duration)/duration`, equal to the originals up to rounding.
pub fn write_dataset(dir: &Path, samples: &[GroundingSample]) -> Result<()> {
    let feat_dir = dir.join(FEATURES_DIR);
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut anns = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let a = s.annotation();
        write_features(&dir.join(&a.video_feat), &s.video)?;
        write_features(&dir.join(&a.query_feat), &s.query)?;
        anns.push(a);
    }
    write_annotations(&dir.join(ANNOTATIONS_FILE), &anns)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<GroundingSample>> {
    let anns = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let mut out = Vec::with_capacity(anns.len());
    for a in anns {
        let s = GroundingSample {
            video: read_features(&dir.join(&a.video_feat))?,
            query: read_features(&dir.join(&a.query_feat))?,
            spans: a.normalized_spans(),
            saliency: a.saliency,
            duration: a.duration,
            clip_len: a.clip_len,
            sample_id: a.sample_id,
        };
        s.validate()?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Load(format!("no samples in {}", dir.display())));
    }
    let (dv, dq) = (out[0].video.cols(), out[0].query.cols());
    if let Some(s) = out.iter().find(|s| s.video.cols() != dv || s.query.cols() != dq) {
        return Err(Error::Load(format!(
            "sample {} has feature dims ({}, {}), expected ({dv}, {dq})",
            s.sample_id,
            s.video.cols(),
            s.query.cols()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = generate_synthetic(&SynthSpec {
            n_samples: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds.samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in back.iter().zip(&ds.samples) {
            assert_eq!(a.video, b.video);
            assert_eq!(a.query, b.query);
            assert_eq!(a.saliency, b.saliency);
            assert_eq!((a.duration, a.clip_len), (b.duration, b.clip_len));
            for (x, y) in a.spans.iter().zip(&b.spans) {
                assert!((x.st - y.st).abs() < 1e-15 && (x.ed - y.ed).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_feature_file_is_a_data_error() {
        let ds = generate_synthetic(&SynthSpec {
            n_samples: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds.samples).unwrap();
        std::fs::remove_file(dir.path().join("features/syn1_q.mlvf")).unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().is_data_error());
    }

    #[test]
    fn mismatched_saliency_length_is_rejected() {
        let mut s = generate_synthetic(&SynthSpec {
            n_samples: 1,
            ..SynthSpec::default()
        })
        .unwrap()
        .samples
        .remove(0);
        s.saliency.pop();
        assert!(matches!(s.validate(), Err(Error::Load(_))));
    }
}
