//! Projection of both modalities into the shared space, sentence pooling and
//! the positional/type embeddings that produce the joint token sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Ffn};
use crate::numerics::{randn, Graph, ParamId, ParamStore, Tensor, Var};

/// Raw features of one sample: `[L_v×D_in_v]` clips and `[L_q×D_in_q]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub video: Tensor,
    pub query: Tensor,
}

impl FeaturePair {
    pub fn new(video: Tensor, query: Tensor) -> Result<Self> {
        for (what, t) in [("video", &video), ("query", &query)] {
            let [rows, _] = t.dims2("feature pair")?;
            if rows == 0 {
                return Err(Error::Invalid(format!("{what} features are empty")));
            }
            if !t.is_finite() {
                return Err(Error::Invalid(format!("{what} features contain non-finite values")));
            }
        }
        Ok(Self { video, query })
    }

    pub fn video_len(&self) -> usize {
        self.video.rows()
    }

    pub fn query_len(&self) -> usize {
        self.query.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub d_video: usize,
    pub d_query: usize,
    pub d_model: usize,
    pub max_len: usize,
}

/// Joint sequence `Z = [Q̃; Ṽ]`: rows `0..boundary` are query tokens.
#[derive(Debug, Clone, Copy)]
pub struct SharedTokens {
    pub z: Var,
    pub boundary: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FrontendOutput {
    /// Projected clips, `[L_v×D]`.
    pub video: Var,
    /// Projected tokens, `[L_q×D]`.
    pub query: Var,
    /// Pooling weights, `[1×L_q]`.
    pub pool_weights: Var,
    /// Sentence vector, `[1×D]`.
    pub sentence: Var,
    pub tokens: SharedTokens,
}

#[derive(Debug, Clone)]
pub struct Frontend {
    pub cfg: FrontendConfig,
    pub video_ffn: Ffn,
    pub query_ffn: Ffn,
    /// Pooling direction, `[1×D]`.
    pub pool: ParamId,
    pub pos_video: ParamId,
    pub pos_query: ParamId,
    pub type_video: ParamId,
    pub type_query: ParamId,
}

impl Frontend {
    pub fn new(store: &mut ParamStore, cfg: FrontendConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            cfg,
            video_ffn: Ffn::new(store, "frontend.video", cfg.d_video, d, rng)?,
            query_ffn: Ffn::new(store, "frontend.query", cfg.d_query, d, rng)?,
            pool: store.add("frontend.pool", randn([1, d], 0.02, rng), false)?,
            pos_video: store.add("frontend.pos_video", randn([cfg.max_len, d], 0.02, rng), false)?,
            pos_query: store.add("frontend.pos_query", randn([cfg.max_len, d], 0.02, rng), false)?,
            type_video: store.add("frontend.type_video", randn([1, d], 0.02, rng), false)?,
            type_query: store.add("frontend.type_query", randn([1, d], 0.02, rng), false)?,
        })
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, pair: &FeaturePair, ctx: &mut Ctx) -> Result<(Var, Var)> {
        let video = g.constant(pair.video.clone());
        let query = g.constant(pair.query.clone());
        let v = self.video_ffn.forward(g, store, video, ctx)?;
        let q = self.query_ffn.forward(g, store, query, ctx)?;
        Ok((v, q))
    }

    /// `M = softmax(w·Qᵀ)`, `S = M·Q`. Returns `(S, M)`.
    pub fn attentive_pool(&self, g: &mut Graph, store: &ParamStore, q: Var) -> Result<(Var, Var)> {
        let w = g.param(store, self.pool);
        let logits = g.matmul_bt(w, q)?;
        let m = g.softmax_rows(logits)?;
        let s = g.matmul(m, q)?;
        Ok((s, m))
    }

    pub fn embed_and_concat(&self, g: &mut Graph, store: &ParamStore, v: Var, q: Var) -> Result<SharedTokens> {
        let (lv, lq) = (g.shape(v)[0], g.shape(q)[0]);
        let max = self.cfg.max_len;
        if let Some(&len) = [lv, lq].iter().find(|&&l| l > max) {
            return Err(Error::Capacity { len, max });
        }
        let add_embeddings = |g: &mut Graph, x: Var, len: usize, pos: ParamId, ty: ParamId| -> Result<Var> {
            let table = g.param(store, pos);
            let pos = g.slice_rows(table, 0, len)?;
            let ty = g.param(store, ty);
            let x = g.add(x, pos)?;
            g.add(x, ty)
        };
        let q_tilde = add_embeddings(g, q, lq, self.pos_query, self.type_query)?;
        let v_tilde = add_embeddings(g, v, lv, self.pos_video, self.type_video)?;
        Ok(SharedTokens {
            z: g.concat_rows(&[q_tilde, v_tilde])?,
            boundary: lq,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pair: &FeaturePair, ctx: &mut Ctx) -> Result<FrontendOutput> {
        let (video, query) = self.project(g, store, pair, ctx)?;
        let (sentence, pool_weights) = self.attentive_pool(g, store, query)?;
        let tokens = self.embed_and_concat(g, store, video, query)?;
        Ok(FrontendOutput {
            video,
            query,
            pool_weights,
            sentence,
            tokens,
        })
    }
}
