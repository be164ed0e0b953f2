//! The full grounding network: frontend → aligner → refiner → heads, with
//! the aligner and refiner individually switchable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{Aligner, AlignerConfig, GateRegistry};
use crate::data::{GroundingSample, RunConfig};
use crate::error::{Error, Result};
use crate::frontend::{FeaturePair, Frontend, FrontendConfig};
use crate::heads::{decode_spans, HdHead, SampleHeads, TlHead};
use crate::metrics::{EvalRecord, Prediction};
use crate::nn::Ctx;
use crate::numerics::{cosine_matrix, Graph, ParamStore, Tensor, Var};
use crate::refiner::{ArchRegistry, FrozenBlock, FrozenBlockFile, Refiner};
use crate::ssm::ScanRegistry;

/// Every name-selectable strategy, builtin ones pre-registered.
#[derive(Clone, Default)]
pub struct Registries {
    pub scans: ScanRegistry,
    pub gates: GateRegistry,
    pub archs: ArchRegistry,
}

impl std::fmt::Debug for Registries {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registries")
            .field("scans", &self.scans.names())
            .field("gates", &self.gates.names())
            .field("archs", &self.archs.names())
            .finish()
    }
}

// Independent RNG streams so toggling one component leaves the others'
// initial weights unchanged.
const STREAM_FRONTEND: u64 = 0;
const STREAM_ALIGNER: u64 = 1;
const STREAM_HEADS: u64 = 2;
const STREAM_REFINER: u64 = 3;
const STREAM_SURROGATE: u64 = 4;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Surrogate frozen block implied by a config, for runs without a file.
pub fn default_surrogate(cfg: &RunConfig, archs: &ArchRegistry) -> Result<FrozenBlockFile> {
    let arch = archs.get(&cfg.frozen_arch)?;
    let mut rng = stream_rng(cfg.seed, STREAM_SURROGATE);
    Ok(FrozenBlockFile::surrogate(arch.as_ref(), cfg.d_llm, cfg.layer_index, &mut rng))
}

/// Names of the stages reported by [`Model::taps`], in order.
pub const TAP_NAMES: [&str; 3] = ["projection", "aligner", "refiner"];

#[derive(Debug, Clone)]
pub struct Model {
    /// Feature widths are always resolved.
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub aligner: Option<Aligner>,
    pub refiner: Option<Refiner>,
    pub tl: TlHead,
    pub hd: HdHead,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub heads: SampleHeads,
    /// Projected query tokens, `[L_q×D]`.
    pub query: Var,
    pub tokens: Var,
    pub aligned: Var,
    pub refined: Var,
    pub boundary: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub predictions: Vec<Prediction>,
    pub saliency: Vec<f64>,
}

impl Model {
    /// `frozen` defaults to the config's surrogate when `None`; it is ignored
    /// when the refiner is disabled.
    pub fn new(
        cfg: &RunConfig,
        d_video: usize,
        d_query: usize,
        frozen: Option<&FrozenBlockFile>,
        reg: &Registries,
    ) -> Result<Self> {
        cfg.validate()?;
        for (want, got, what) in [(cfg.d_video, d_video, "video"), (cfg.d_query, d_query, "query")] {
            if let Some(w) = want.filter(|&w| w != got) {
                return Err(Error::Load(format!("config expects {what} features of width {w}, data has {got}")));
            }
        }
        let cfg = RunConfig {
            d_video: Some(d_video),
            d_query: Some(d_query),
            ..cfg.clone()
        };
        let mut store = ParamStore::new();
        let frontend = Frontend::new(
            &mut store,
            FrontendConfig {
                d_video,
                d_query,
                d_model: cfg.d_model,
                max_len: cfg.max_len,
            },
            &mut stream_rng(cfg.seed, STREAM_FRONTEND),
        )?;
        let aligner = if cfg.use_aligner {
            let acfg = AlignerConfig {
                d_model: cfg.d_model,
                d_inner: cfg.d_inner,
                d_state: cfg.d_state,
                conv_width: cfg.conv_width,
                blocks: cfg.blocks,
            };
            Some(Aligner::new(
                &mut store,
                acfg,
                reg.scans.get(&cfg.ssm_mode)?,
                reg.gates.get(&cfg.gate)?,
                &mut stream_rng(cfg.seed, STREAM_ALIGNER),
            )?)
        } else {
            None
        };
        let mut heads_rng = stream_rng(cfg.seed, STREAM_HEADS);
        let tl = TlHead::new(&mut store, cfg.d_model, &mut heads_rng)?;
        let hd = HdHead::new(&mut store)?;
        let refiner = if cfg.use_refiner {
            let owned;
            let file = match frozen {
                Some(f) => f,
                None => {
                    owned = default_surrogate(&cfg, &reg.archs)?;
                    &owned
                }
            };
            let block = FrozenBlock::install(&mut store, file, &reg.archs, Some(cfg.d_llm))?;
            Some(Refiner::new(
                &mut store,
                cfg.d_model,
                block,
                cfg.refiner_residual,
                &mut stream_rng(cfg.seed, STREAM_REFINER),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            frontend,
            aligner,
            refiner,
            tl,
            hd,
        })
    }

    pub fn d_video(&self) -> usize {
        self.frontend.cfg.d_video
    }

    pub fn d_query(&self) -> usize {
        self.frontend.cfg.d_query
    }

    /// True when no refiner is present or its block is intact.
    pub fn verify_frozen(&self) -> bool {
        self.refiner.as_ref().is_none_or(|r| r.verify_frozen(&self.store))
    }

    pub fn check_sample(&self, s: &GroundingSample) -> Result<()> {
        if s.video.cols() != self.d_video() || s.query.cols() != self.d_query() {
            return Err(Error::Load(format!(
                "sample {} has feature widths ({}, {}) but the model expects ({}, {})",
                s.sample_id,
                s.video.cols(),
                s.query.cols(),
                self.d_video(),
                self.d_query()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, pair: &FeaturePair, ctx: &mut Ctx) -> Result<ForwardVars> {
        let store = &self.store;
        let front = self.frontend.forward(g, store, pair, ctx)?;
        let tokens = front.tokens.z;
        let aligned = match &self.aligner {
            Some(a) => a.forward(g, store, tokens)?,
            None => tokens,
        };
        let refined = match &self.refiner {
            Some(r) => r.refine(g, store, aligned)?,
            None => aligned,
        };
        let boundary = front.tokens.boundary;
        let tl = self.tl.forward(g, store, refined, boundary)?;
        let saliency = self.hd.forward(g, store, front.video, front.sentence)?;
        Ok(ForwardVars {
            heads: SampleHeads {
                tl,
                saliency,
                video: front.video,
                sentence: front.sentence,
            },
            query: front.query,
            tokens,
            aligned,
            refined,
            boundary,
        })
    }

    pub fn predict(&self, s: &GroundingSample) -> Result<SamplePrediction> {
        self.check_sample(s)?;
        let pair = FeaturePair::new(s.video.clone(), s.query.clone())?;
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, &pair, &mut Ctx::eval())?;
        let logits = g.value(out.heads.tl.fg_logits).data().to_vec();
        let predictions = decode_spans(g.value(out.heads.tl.offsets), &logits, self.cfg.top_k, self.cfg.nms_iou)?;
        let saliency = g.value(out.heads.saliency).data().to_vec();
        if !saliency.iter().all(|v| v.is_finite()) || !predictions.iter().all(|p| p.confidence.is_finite()) {
            return Err(Error::Numeric {
                what: format!("prediction for {}", s.sample_id),
                step: 0,
            });
        }
        Ok(SamplePrediction { predictions, saliency })
    }

    pub fn eval_records(&self, samples: &[GroundingSample]) -> Result<Vec<EvalRecord>> {
        samples
            .iter()
            .map(|s| {
                let p = self.predict(s)?;
                Ok(EvalRecord {
                    query_id: s.sample_id.clone(),
                    predictions: p.predictions,
                    gt_spans: s.spans.clone(),
                    gt_saliency: s.saliency.clone(),
                    pred_saliency: p.saliency,
                })
            })
            .collect()
    }

    /// `(query rows, video rows)` at three taps: after projection, after the
    /// aligner and after the refiner. A disabled stage repeats its input.
    pub fn taps(&self, s: &GroundingSample) -> Result<[(Tensor, Tensor); 3]> {
        self.check_sample(s)?;
        let pair = FeaturePair::new(s.video.clone(), s.query.clone())?;
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, &pair, &mut Ctx::eval())?;
        let split = |t: &Tensor| -> Result<(Tensor, Tensor)> {
            Ok((t.slice_rows(0, out.boundary)?, t.slice_rows(out.boundary, t.rows())?))
        };
        Ok([
            (g.value(out.query).clone(), g.value(out.heads.video).clone()),
            split(g.value(out.aligned))?,
            split(g.value(out.refined))?,
        ])
    }

    /// `L_q×L_v` cosine similarity at each of [`Model::taps`].
    pub fn similarity_taps(&self, s: &GroundingSample) -> Result<[Tensor; 3]> {
        let [a, b, c] = self.taps(s)?;
        Ok([
            cosine_matrix(&a.0, &a.1)?,
            cosine_matrix(&b.0, &b.1)?,
            cosine_matrix(&c.0, &c.1)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            d_model: 8,
            d_inner: 8,
            blocks: 2,
            d_state: 3,
            d_llm: 12,
            max_len: 64,
            ..RunConfig::default()
        }
    }

    fn data() -> Vec<GroundingSample> {
        generate_synthetic(&SynthSpec {
            n_samples: 3,
            d_video: 6,
            d_query: 5,
            video_len: (8, 12),
            query_len: (3, 5),
            ..SynthSpec::default()
        })
        .unwrap()
        .samples
    }

    #[test]
    fn ablation_variants_share_initial_weights() {
        let reg = Registries::default();
        let full = Model::new(&tiny_cfg(), 6, 5, None, &reg).unwrap();
        let bare = Model::new(
            &RunConfig {
                use_aligner: false,
                use_refiner: false,
                ..tiny_cfg()
            },
            6,
            5,
            None,
            &reg,
        )
        .unwrap();
        assert!(bare.aligner.is_none() && bare.refiner.is_none());
        for (_, p) in bare.store.iter() {
            let id = full.store.id(&p.name).unwrap();
            assert_eq!(full.store.value(id), &p.value, "{}", p.name);
        }
    }

    #[test]
    fn prediction_shapes_and_ranges() {
        let model = Model::new(&tiny_cfg(), 6, 5, None, &Registries::default()).unwrap();
        for s in data() {
            let p = model.predict(&s).unwrap();
            assert_eq!(p.saliency.len(), s.clips());
            assert!(!p.predictions.is_empty() && p.predictions.len() <= 10);
            for w in p.predictions.windows(2) {
                assert!(w[0].confidence >= w[1].confidence);
            }
            for q in &p.predictions {
                assert!(0.0 <= q.span.st && q.span.st < q.span.ed && q.span.ed <= 1.0);
            }
            let taps = model.similarity_taps(&s).unwrap();
            for t in &taps {
                assert_eq!(t.shape(), &[s.query.rows(), s.clips()]);
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_load_error() {
        let model = Model::new(&tiny_cfg(), 7, 5, None, &Registries::default()).unwrap();
        assert!(matches!(model.predict(&data()[0]), Err(Error::Load(_))));
        let cfg = RunConfig {
            d_video: Some(9),
            ..tiny_cfg()
        };
        assert!(matches!(Model::new(&cfg, 6, 5, None, &Registries::default()), Err(Error::Load(_))));
    }

    #[test]
    fn unknown_strategy_names_are_reported() {
        let cfg = RunConfig {
            gate: "tanh".into(),
            ..tiny_cfg()
        };
        assert!(matches!(
            Model::new(&cfg, 6, 5, None, &Registries::default()),
            Err(Error::Unknown { .. })
        ));
    }
}
