//! Stack of bidirectional gated state-space blocks over the joint sequence.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, SsmLayer};
use crate::numerics::{randn, Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::ScanStrategy;

/// Elementwise gate mixing the two scan directions:
/// `y = γ(g)·y_fwd + (1 − γ(g))·y_bwd`.
pub trait Gate: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, g: &mut Graph, x: Var) -> Var;
    fn eval(&self, x: f64) -> f64;
}

pub struct SiluGate;
pub struct SigmoidGate;

impl Gate for SiluGate {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.silu(x)
    }

    fn eval(&self, x: f64) -> f64 {
        crate::numerics::kernels::silu_scalar(x)
    }
}

impl Gate for SigmoidGate {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.sigmoid(x)
    }

    fn eval(&self, x: f64) -> f64 {
        crate::numerics::kernels::sigmoid_scalar(x)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    Silu,
    Sigmoid,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::Silu => "silu",
            GateKind::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone)]
pub struct GateRegistry {
    entries: Vec<Arc<dyn Gate>>,
}

impl Default for GateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl GateRegistry {
    pub fn builtin() -> Self {
        Self {
            entries: vec![Arc::new(SiluGate), Arc::new(SigmoidGate)],
        }
    }

    pub fn register(&mut self, gate: Arc<dyn Gate>) {
        self.entries.retain(|g| g.name() != gate.name());
        self.entries.push(gate);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Gate>> {
        self.entries
            .iter()
            .find(|g| g.name() == name)
            .cloned()
            .ok_or_else(|| Error::Unknown {
                kind: "gate",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|g| g.name()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignerConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone)]
pub struct AlignerBlock {
    pub norm: LayerNorm,
    pub w_x: Linear,
    pub w_g: Linear,
    /// Causal depthwise kernel, `[width×D_inner]`, shared by both directions.
    pub conv: ParamId,
    pub ssm_f: SsmLayer,
    pub ssm_b: SsmLayer,
    pub out_proj: Linear,
}

/// Intermediate values of one block forward.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub normed: Var,
    pub x: Var,
    pub gate_pre: Var,
    pub x_fwd: Var,
    pub x_bwd: Var,
    pub y_fwd: Var,
    pub y_bwd: Var,
    pub gate: Var,
    pub fused: Var,
    pub out: Var,
}

impl AlignerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AlignerConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, di) = (cfg.d_model, cfg.d_inner);
        let conv = Tensor::from_fn([cfg.conv_width, di], |k| {
            let lag = k / di;
            if lag == 0 {
                1.0 + 0.1 * randn([1], 1.0, rng).item()
            } else {
                0.1 * randn([1], 1.0, rng).item()
            }
        });
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            w_x: Linear::init(store, &format!("{name}.w_x"), d, di, false, rng)?,
            w_g: Linear::init(store, &format!("{name}.w_g"), d, di, false, rng)?,
            conv: store.add(format!("{name}.conv"), conv, false)?,
            ssm_f: SsmLayer::new(store, &format!("{name}.ssm_f"), di, cfg.d_state, rng)?,
            ssm_b: SsmLayer::new(store, &format!("{name}.ssm_b"), di, cfg.d_state, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), di, d, false, 0.02, rng)?,
        })
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scan: &Arc<dyn ScanStrategy>,
        gate: &dyn Gate,
        z: Var,
    ) -> Result<BlockTrace> {
        let normed = self.norm.forward(g, store, z)?;
        let x = self.w_x.forward(g, store, normed)?;
        let gate_pre = self.w_g.forward(g, store, normed)?;
        let kernel = g.param(store, self.conv);
        let conv = g.conv1d(x, kernel, true)?;
        let x_fwd = g.silu(conv);
        let x_bwd = g.reverse_rows(x_fwd)?;
        let y_fwd = self.ssm_f.forward(g, store, scan, x_fwd)?;
        let y_rev = self.ssm_b.forward(g, store, scan, x_bwd)?;
        let y_bwd = g.reverse_rows(y_rev)?;
        let gate_v = gate.forward(g, gate_pre);
        let diff = g.sub(y_fwd, y_bwd)?;
        let mixed = g.mul(gate_v, diff)?;
        let fused = g.add(mixed, y_bwd)?;
        let delta = self.out_proj.forward(g, store, fused)?;
        let out = g.add(z, delta)?;
        Ok(BlockTrace {
            normed,
            x,
            gate_pre,
            x_fwd,
            x_bwd,
            y_fwd,
            y_bwd,
            gate: gate_v,
            fused,
            out,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scan: &Arc<dyn ScanStrategy>,
        gate: &dyn Gate,
        z: Var,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, store, scan, gate, z)?.out)
    }
}

#[derive(Clone)]
pub struct Aligner {
    pub cfg: AlignerConfig,
    pub blocks: Vec<AlignerBlock>,
    pub scan: Arc<dyn ScanStrategy>,
    pub gate: Arc<dyn Gate>,
}

impl fmt::Debug for Aligner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Aligner")
            .field("cfg", &self.cfg)
            .field("scan", &self.scan.name())
            .field("gate", &self.gate.name())
            .finish()
    }
}

impl Aligner {
    pub fn new(
        store: &mut ParamStore,
        cfg: AlignerConfig,
        scan: Arc<dyn ScanStrategy>,
        gate: Arc<dyn Gate>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::Invalid("aligner needs at least one block".into()));
        }
        if cfg.conv_width == 0 {
            return Err(Error::Invalid("conv width must be ≥ 1".into()));
        }
        let blocks = (0..cfg.blocks)
            .map(|k| AlignerBlock::new(store, &format!("aligner.{k}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            blocks,
            scan,
            gate,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        self.blocks
            .iter()
            .try_fold(z, |z, b| b.forward(g, store, &self.scan, self.gate.as_ref(), z))
    }
}
