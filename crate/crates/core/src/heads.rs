//! Localization and highlight heads, span decoding and the training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{interval_iou, Prediction, Span};
use crate::nn::Linear;
use crate::numerics::{kernels::sigmoid_scalar, Graph, ParamId, ParamStore, Tensor, Var};

pub const HEAD_WIDTH: usize = 3;

/// Shortest span emitted by [`decode_spans`].
pub const MIN_SPAN: f64 = 1e-6;

/// Two parallel convolution stacks over the video rows: one regresses
/// non-negative (start, end) distances, the other a foreground logit.
#[derive(Debug, Clone, Copy)]
pub struct TlHead {
    pub reg1: Linear,
    pub reg2: Linear,
    pub cls1: Linear,
    pub cls2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct TlVars {
    /// `[L_v×2]`, softplus-positive.
    pub offsets: Var,
    /// `[L_v×1]`.
    pub fg_logits: Var,
}

impl TlHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = HEAD_WIDTH;
        Ok(Self {
            reg1: Linear::init(store, "heads.tl.reg1", w * d, d, true, rng)?,
            reg2: Linear::init(store, "heads.tl.reg2", w * d, 2, true, rng)?,
            cls1: Linear::init(store, "heads.tl.cls1", w * d, d, true, rng)?,
            cls2: Linear::init(store, "heads.tl.cls2", w * d, 1, true, rng)?,
        })
    }

    fn branch(g: &mut Graph, store: &ParamStore, x: Var, a: &Linear, b: &Linear) -> Result<Var> {
        let u = g.unfold(x, HEAD_WIDTH)?;
        let h = a.forward(g, store, u)?;
        let h = g.silu(h);
        let u = g.unfold(h, HEAD_WIDTH)?;
        b.forward(g, store, u)
    }

    /// Runs on rows `boundary..` of `z`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, boundary: usize) -> Result<TlVars> {
        let rows = g.shape(z)[0];
        if boundary >= rows {
            return Err(Error::Invalid(format!("boundary {boundary} leaves no video rows in {rows}")));
        }
        let video = g.slice_rows(z, boundary, rows)?;
        let raw = Self::branch(g, store, video, &self.reg1, &self.reg2)?;
        Ok(TlVars {
            offsets: g.softplus(raw),
            fg_logits: Self::branch(g, store, video, &self.cls1, &self.cls2)?,
        })
    }
}

/// `saliency_i = τ·cos(V_i, S)` with `τ = exp(log_tau)`.
#[derive(Debug, Clone, Copy)]
pub struct HdHead {
    pub log_tau: ParamId,
}

impl HdHead {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            log_tau: store.add("heads.hd.log_tau", Tensor::full([1], 10f64.ln()), false)?,
        })
    }

    /// `v`: `[L_v×D]`, `s`: `[1×D]`; returns `[L_v×1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v: Var, s: Var) -> Result<Var> {
        let nv = g.normalize_rows(v)?;
        let ns = g.normalize_rows(s)?;
        let cos = g.matmul_bt(nv, ns)?;
        let lt = g.param(store, self.log_tau);
        let tau = g.exp(lt);
        g.mul(cos, tau)
    }
}

/// Spans `(t_i − d_st, t_i + d_ed)` around clip centres `t_i = (i + ½)/L_v`,
/// clamped to `[0, 1]`, scored by `sigmoid(logit)`, suppressed at IoU ≥
/// `nms_iou` and cut to `top_k`.
pub fn decode_spans(offsets: &Tensor, fg_logits: &[f64], top_k: usize, nms_iou: f64) -> Result<Vec<Prediction>> {
    let [lv, two] = offsets.dims2("decode_spans")?;
    if two != 2 || fg_logits.len() != lv {
        return Err(Error::Dimension {
            op: "decode_spans",
            left: offsets.shape().to_vec(),
            right: vec![fg_logits.len()],
        });
    }
    if top_k == 0 {
        return Err(Error::Invalid("top_k must be ≥ 1".into()));
    }
    let candidates = (0..lv)
        .map(|i| {
            let t = (i as f64 + 0.5) / lv as f64;
            let mut st = (t - offsets.at2(i, 0)).clamp(0.0, 1.0);
            let mut ed = (t + offsets.at2(i, 1)).clamp(0.0, 1.0);
            if ed - st < MIN_SPAN {
                if st > 1.0 - MIN_SPAN {
                    st = 1.0 - MIN_SPAN;
                    ed = 1.0;
                } else {
                    ed = st + MIN_SPAN;
                }
            }
            Prediction {
                span: Span { st, ed },
                confidence: sigmoid_scalar(fg_logits[i]),
            }
        })
        .collect();
    let mut kept = nms(candidates, nms_iou);
    kept.truncate(top_k);
    Ok(kept)
}

/// Greedy 1-D non-maximum suppression. Output is sorted by confidence
/// (stable for ties) and no two kept spans overlap with IoU ≥ `iou`.
pub fn nms(mut candidates: Vec<Prediction>, iou: f64) -> Vec<Prediction> {
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Prediction> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| interval_iou(k.span, c.span) < iou) {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_reg: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 4.0,
            lambda_reg: 1.0,
            lambda_inter: 1.0,
            lambda_intra: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_f, self.lambda_reg, self.lambda_inter, self.lambda_intra];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be finite and ≥ 0, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Hinge margin between foreground and background saliency.
    pub margin: f64,
    /// Contrastive temperature between sentence and foreground features.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margin: 0.2,
            temperature: 0.07,
        }
    }
}

/// Ground truth for one sample in normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub spans: Vec<Span>,
    pub saliency: Vec<u8>,
}

/// Clip `i` is foreground when its centre lies in some span.
pub fn clip_labels(spans: &[Span], clips: usize) -> Vec<bool> {
    (0..clips)
        .map(|i| {
            let t = (i as f64 + 0.5) / clips as f64;
            spans.iter().any(|s| s.contains(t))
        })
        .collect()
}

/// Regression targets `(t_i − st, ed − t_i)` for each foreground clip, from
/// the first span that contains it.
pub fn offset_targets(spans: &[Span], clips: usize) -> Vec<(usize, [f64; 2])> {
    (0..clips)
        .filter_map(|i| {
            let t = (i as f64 + 0.5) / clips as f64;
            spans.iter().find(|s| s.contains(t)).map(|s| (i, [t - s.st, s.ed - t]))
        })
        .collect()
}

/// Head outputs of one sample on the tape.
#[derive(Debug, Clone, Copy)]
pub struct SampleHeads {
    pub tl: TlVars,
    /// `[L_v×1]`
    pub saliency: Var,
    /// Projected clips, `[L_v×D]`.
    pub video: Var,
    /// `[1×D]`
    pub sentence: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub l_f: T,
    pub l_reg: T,
    pub l_inter: T,
    pub l_intra: T,
}

impl LossTerms<Var> {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        LossTerms {
            total: g.value(self.total).item(),
            l_f: g.value(self.l_f).item(),
            l_reg: g.value(self.l_reg).item(),
            l_inter: g.value(self.l_inter).item(),
            l_intra: g.value(self.l_intra).item(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub terms: LossTerms<Var>,
    /// Samples whose labels had no foreground clip.
    pub no_foreground: usize,
}

fn ones(shape: [usize; 2]) -> Tensor {
    Tensor::ones(shape)
}

/// Composite loss averaged over the batch. L_f, L_reg and L_intra are
/// per-sample means; L_inter is InfoNCE between each sentence vector and
/// the mean foreground clip feature of every sample in the batch.
pub fn batch_loss(g: &mut Graph, heads: &[SampleHeads], targets: &[&Targets], cfg: &LossConfig) -> Result<BatchLoss> {
    if heads.len() != targets.len() || heads.is_empty() {
        return Err(Error::Invalid(format!(
            "batch has {} outputs and {} targets",
            heads.len(),
            targets.len()
        )));
    }
    cfg.weights.validate()?;
    let batch = heads.len() as f64;
    let zero = g.constant(Tensor::scalar(0.0));
    let (mut l_f, mut l_reg, mut l_intra) = (zero, zero, zero);
    let mut no_foreground = 0;
    let mut anchors = Vec::new();
    let mut positives = Vec::new();

    for (h, t) in heads.iter().zip(targets) {
        let lv = g.shape(h.tl.fg_logits)[0];
        let labels = clip_labels(&t.spans, lv);
        let fg: Vec<usize> = (0..lv).filter(|&i| labels[i]).collect();
        let bg: Vec<usize> = (0..lv).filter(|&i| !labels[i]).collect();
        if fg.is_empty() {
            no_foreground += 1;
        } else {
            let y = Tensor::from_fn([lv, 1], |i| labels[i] as u8 as f64);
            let bce = g.bce_with_logits(h.tl.fg_logits, y)?;
            let bce = g.mean(bce);
            l_f = g.add(l_f, bce)?;

            let tgt = offset_targets(&t.spans, lv);
            let nf = tgt.len();
            let tgt_t = Tensor::new([nf, 2], tgt.iter().flat_map(|(_, o)| *o).collect())?;
            let pred = g.select_rows(h.tl.offsets, &fg)?;
            let tgt_v = g.constant(tgt_t);
            let diff = g.sub(pred, tgt_v)?;
            let l1 = g.abs(diff);
            let l1 = g.sum(l1);
            let lo = g.minimum(pred, tgt_v)?;
            let hi = g.maximum(pred, tgt_v)?;
            let sum2 = g.constant(ones([2, 1]));
            let inter = g.matmul(lo, sum2)?;
            let union = g.matmul(hi, sum2)?;
            let inv = g.recip(union);
            let iou = g.mul(inter, inv)?;
            let giou = g.rsub_scalar(1.0, iou);
            let giou = g.sum(giou);
            let reg = g.add(l1, giou)?;
            let reg = g.scale(reg, 1.0 / nf as f64);
            l_reg = g.add(l_reg, reg)?;

            let fg_feats = g.select_rows(h.video, &fg)?;
            positives.push(g.mean_rows(fg_feats)?);
            anchors.push(h.sentence);
        }
        if !fg.is_empty() && !bg.is_empty() {
            let s_fg = g.select_rows(h.saliency, &fg)?;
            let s_bg = g.select_rows(h.saliency, &bg)?;
            let row = g.constant(ones([1, bg.len()]));
            let col = g.constant(ones([fg.len(), 1]));
            let a = g.matmul(s_fg, row)?;
            let s_bg_t = g.transpose(s_bg)?;
            let b = g.matmul(col, s_bg_t)?;
            let gap = g.sub(a, b)?;
            let short = g.rsub_scalar(cfg.margin, gap);
            let hinge = g.relu(short);
            let hinge = g.mean(hinge);
            l_intra = g.add(l_intra, hinge)?;
        }
    }

    let l_inter = if anchors.is_empty() {
        zero
    } else {
        let m = anchors.len();
        let s = g.concat_rows(&anchors)?;
        let p = g.concat_rows(&positives)?;
        let s = g.normalize_rows(s)?;
        let p = g.normalize_rows(p)?;
        let sim = g.matmul_bt(s, p)?;
        let logits = g.scale(sim, 1.0 / cfg.temperature);
        let lsm = g.log_softmax_rows(logits)?;
        let diag = g.mul_const(lsm, Tensor::identity(m))?;
        let total = g.sum(diag);
        g.scale(total, -1.0 / m as f64)
    };

    let l_f = g.scale(l_f, 1.0 / batch);
    let l_reg = g.scale(l_reg, 1.0 / batch);
    let l_intra = g.scale(l_intra, 1.0 / batch);
    let w = cfg.weights;
    let parts = [
        g.scale(l_f, w.lambda_f),
        g.scale(l_reg, w.lambda_reg),
        g.scale(l_inter, w.lambda_inter),
        g.scale(l_intra, w.lambda_intra),
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(BatchLoss {
        terms: LossTerms {
            total,
            l_f,
            l_reg,
            l_inter,
            l_intra,
        },
        no_foreground,
    })
}
