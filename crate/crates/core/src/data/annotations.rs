//! JSON-lines annotations. Times are in seconds on disk and normalized to
//! `[0, 1]` by [`Annotation::normalized_spans`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Span;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub sample_id: String,
    pub duration: f64,
    pub clip_len: f64,
    /// `[start, end]` pairs in seconds.
    pub spans: Vec<[f64; 2]>,
    pub saliency: Vec<u8>,
    pub video_feat: String,
    pub query_feat: String,
}

pub const MAX_SALIENCY: u8 = 4;

impl Annotation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration must be > 0, got {}", self.duration));
        }
        if !(self.clip_len.is_finite() && self.clip_len > 0.0) {
            return Err(format!("clip_len must be > 0, got {}", self.clip_len));
        }
        for &[st, ed] in &self.spans {
            if !(st.is_finite() && ed.is_finite()) || st < 0.0 || ed <= st {
                return Err(format!("span [{st}, {ed}] needs 0 ≤ st < ed"));
            }
            if ed > self.duration {
                return Err(format!("span [{st}, {ed}] ends after duration {}", self.duration));
            }
        }
        if let Some(bad) = self.saliency.iter().find(|&&s| s > MAX_SALIENCY) {
            return Err(format!("saliency label {bad} above {MAX_SALIENCY}"));
        }
        Ok(())
    }

    pub fn normalized_spans(&self) -> Vec<Span> {
        self.spans
            .iter()
            .map(|&[st, ed]| Span {
                st: st / self.duration,
                ed: ed / self.duration,
            })
            .collect()
    }
}

/// Parses JSON lines; blank lines are skipped. Line numbers in errors are
/// 1-based.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(line).map_err(|e| Error::Annotation {
            line: i + 1,
            reason: e.to_string(),
        })?;
        a.validate().map_err(|reason| Error::Annotation { line: i + 1, reason })?;
        out.push(a);
    }
    Ok(out)
}

pub fn format_annotations(items: &[Annotation]) -> Result<String> {
    let mut s = String::new();
    for a in items {
        s.push_str(&serde_json::to_string(a)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn write_annotations(path: &Path, items: &[Annotation]) -> Result<()> {
    super::features::write_atomic(path, format_annotations(items)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"sample_id":"v1","duration":150.0,"clip_len":2.0,"spans":[[63.0,132.0]],"saliency":[0,3],"video_feat":"features/v1_v.mlvf","query_feat":"features/v1_q.mlvf"}"#;

    #[test]
    fn minimal_line_round_trips() {
        let parsed = parse_annotations(MINIMAL).unwrap();
        let text = format_annotations(&parsed).unwrap();
        assert_eq!(text.trim_end(), MINIMAL);
        assert_eq!(parse_annotations(&text).unwrap(), parsed);
    }

    #[test]
    fn seconds_convert_to_normalized_time() {
        let a = &parse_annotations(MINIMAL).unwrap()[0];
        let s = a.normalized_spans()[0];
        assert!((s.st - 0.42).abs() < 1e-15);
        assert!((s.ed - 0.88).abs() < 1e-15);
    }

    #[test]
    fn reversed_span_is_rejected_with_line() {
        let text = format!("{MINIMAL}\n\n{}", MINIMAL.replace("[63.0,132.0]", "[70.0,70.0]"));
        match parse_annotations(&text) {
            Err(Error::Annotation { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("st < ed"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace(r#""clip_len":2.0,"#, "");
        match parse_annotations(&text) {
            Err(Error::Annotation { line: 1, reason }) => assert!(reason.contains("clip_len"), "{reason}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn float_fields_round_trip_exactly() {
        let mut a = parse_annotations(MINIMAL).unwrap().remove(0);
        a.duration = 0.1 + 0.2;
        a.clip_len = 1.0 / 3.0;
        a.spans = vec![[std::f64::consts::E / 10.0, 0.3]];
        let back = parse_annotations(&format_annotations(std::slice::from_ref(&a)).unwrap()).unwrap();
        assert_eq!(back[0].duration.to_bits(), a.duration.to_bits());
        assert_eq!(back[0], a);
    }
}
