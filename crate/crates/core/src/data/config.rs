use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LossWeights;

/// Every tunable of a run. Missing keys take their defaults, unknown keys
/// are rejected. Strategy fields (`gate`, `ssm_mode`, `frozen_arch`) are
/// registry names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input feature widths; `None` means "take them from the dataset".
    pub d_video: Option<usize>,
    pub d_query: Option<usize>,
    pub d_model: usize,
    pub d_inner: usize,
    pub blocks: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub max_len: usize,
    pub d_llm: usize,
    pub layer_index: u32,
    pub frozen_arch: String,
    pub use_aligner: bool,
    pub use_refiner: bool,
    pub refiner_residual: bool,
    pub gate: String,
    pub ssm_mode: String,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fps: f64,
    pub loss: LossWeights,
    pub margin: f64,
    pub temperature: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub very_good: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d_video: None,
            d_query: None,
            d_model: 16,
            d_inner: 32,
            blocks: 4,
            d_state: 8,
            conv_width: 3,
            max_len: 512,
            d_llm: 64,
            layer_index: 20,
            frozen_arch: "mamba_block".into(),
            use_aligner: true,
            use_refiner: true,
            refiner_residual: true,
            gate: "silu".into(),
            ssm_mode: "selective_recurrent".into(),
            dropout: 0.1,
            lr: 1e-4,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            fps: 0.5,
            loss: LossWeights::default(),
            margin: 0.2,
            temperature: 0.07,
            nms_iou: 0.7,
            top_k: 10,
            very_good: 3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("blocks", self.blocks),
            ("d_state", self.d_state),
            ("conv_width", self.conv_width),
            ("max_len", self.max_len),
            ("d_llm", self.d_llm),
            ("batch_size", self.batch_size),
            ("top_k", self.top_k),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("config: {k} must be positive")));
        }
        if matches!(self.d_video, Some(0)) || matches!(self.d_query, Some(0)) {
            return Err(Error::Invalid("config: feature widths must be positive".into()));
        }
        let reals = [
            ("lr", self.lr, false),
            ("fps", self.fps, false),
            ("temperature", self.temperature, false),
            ("margin", self.margin, true),
        ];
        for (k, v, zero_ok) in reals {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::Invalid(format!("config: {k} = {v} out of range")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("config: dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Invalid(format!("config: nms_iou {} not in (0, 1]", self.nms_iou)));
        }
        if self.very_good > 4 {
            return Err(Error::Invalid("config: very_good must be ≤ 4".into()));
        }
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::features::write_atomic(path, self.to_json()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let mut c = RunConfig {
            lr: 1.0 / 3.0,
            d_video: Some(7),
            ..RunConfig::default()
        };
        c.loss.lambda_f = 0.1 + 0.2;
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"epochs": 3, "gate": "sigmoid"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.gate, "sigmoid");
        assert_eq!(c.d_model, 16);
    }

    #[test]
    fn unknown_key_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"epoch": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"d_model": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dropout": 1.0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"lambda_f": -1, "lambda_reg": 1, "lambda_inter": 1, "lambda_intra": 1}}"#).is_err());
    }
}
