//! Interchangeable scan implementations, registered by name and selected at
//! runtime from configuration.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{SelectiveProj, SsmParams, StateMatrix};
use super::scan::{ssm_backward, ssm_scan_kernel, ssm_scan_parallel, ssm_scan_recurrent};
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsmMode {
    LtiRecurrent,
    LtiKernel,
    SelectiveRecurrent,
    SelectiveParallelScan,
}

impl SsmMode {
    pub const ALL: [SsmMode; 4] = [
        SsmMode::LtiRecurrent,
        SsmMode::LtiKernel,
        SsmMode::SelectiveRecurrent,
        SsmMode::SelectiveParallelScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SsmMode::LtiRecurrent => "lti_recurrent",
            SsmMode::LtiKernel => "lti_kernel",
            SsmMode::SelectiveRecurrent => "selective_recurrent",
            SsmMode::SelectiveParallelScan => "selective_parallel_scan",
        }
    }

    pub fn is_selective(self) -> bool {
        matches!(self, SsmMode::SelectiveRecurrent | SsmMode::SelectiveParallelScan)
    }
}

impl fmt::Display for SsmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub trait ScanStrategy: Send + Sync {
    fn mode(&self) -> SsmMode;

    fn name(&self) -> &'static str {
        self.mode().name()
    }

    /// Runs the scan. Implementations reject parameter sets that do not fit
    /// their mode.
    fn scan(&self, params: &SsmParams, x: &Tensor) -> Result<Tensor>;
}

fn require(mode: SsmMode, params: &SsmParams) -> Result<()> {
    if mode.is_selective() != params.is_selective() {
        return Err(Error::UnsupportedMode(format!(
            "{mode} given {} parameters",
            if params.is_selective() { "selective" } else { "time-invariant" }
        )));
    }
    Ok(())
}

pub struct LtiRecurrent;
pub struct LtiKernel;
pub struct SelectiveRecurrent;
pub struct SelectiveParallelScan;

impl ScanStrategy for LtiRecurrent {
    fn mode(&self) -> SsmMode {
        SsmMode::LtiRecurrent
    }

    fn scan(&self, params: &SsmParams, x: &Tensor) -> Result<Tensor> {
        require(self.mode(), params)?;
        ssm_scan_recurrent(params, x)
    }
}

impl ScanStrategy for LtiKernel {
    fn mode(&self) -> SsmMode {
        SsmMode::LtiKernel
    }

    fn scan(&self, params: &SsmParams, x: &Tensor) -> Result<Tensor> {
        require(self.mode(), params)?;
        ssm_scan_kernel(params, x)
    }
}

impl ScanStrategy for SelectiveRecurrent {
    fn mode(&self) -> SsmMode {
        SsmMode::SelectiveRecurrent
    }

    fn scan(&self, params: &SsmParams, x: &Tensor) -> Result<Tensor> {
        require(self.mode(), params)?;
        ssm_scan_recurrent(params, x)
    }
}

impl ScanStrategy for SelectiveParallelScan {
    fn mode(&self) -> SsmMode {
        SsmMode::SelectiveParallelScan
    }

    fn scan(&self, params: &SsmParams, x: &Tensor) -> Result<Tensor> {
        require(self.mode(), params)?;
        ssm_scan_parallel(params, x)
    }
}

/// Name → strategy table.
#[derive(Clone)]
pub struct ScanRegistry {
    entries: Vec<Arc<dyn ScanStrategy>>,
}

impl Default for ScanRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ScanRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(LtiRecurrent));
        r.register(Arc::new(LtiKernel));
        r.register(Arc::new(SelectiveRecurrent));
        r.register(Arc::new(SelectiveParallelScan));
        r
    }

    /// Adds a strategy, replacing any existing one with the same name.
    pub fn register(&mut self, strategy: Arc<dyn ScanStrategy>) {
        self.entries.retain(|s| s.name() != strategy.name());
        self.entries.push(strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ScanStrategy>> {
        self.entries
            .iter()
            .find(|s| s.name() == name)
            .cloned()
            .ok_or_else(|| Error::Unknown {
                kind: "scan strategy",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn for_mode(&self, mode: SsmMode) -> Result<Arc<dyn ScanStrategy>> {
        self.get(mode.name())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|s| s.name()).collect()
    }
}

/// Graph handles of the tensors making up an [`SsmParams`].
#[derive(Debug, Clone, Copy)]
pub struct SsmVars {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    /// `[W_Δ, b_Δ, W_B, W_C]`
    pub selective: Option<[Var; 4]>,
}

struct ScanOp {
    strategy: Arc<dyn ScanStrategy>,
}

fn params_from(inputs: &[&Tensor]) -> Result<SsmParams> {
    let a = match inputs[1].rank() {
        3 => StateMatrix::Dense(inputs[1].clone()),
        _ => StateMatrix::Diagonal(inputs[1].clone()),
    };
    let selective = if inputs.len() == 8 {
        Some(SelectiveProj {
            w_delta: inputs[4].clone(),
            delta_bias: inputs[5].clone(),
            w_b: inputs[6].clone(),
            w_c: inputs[7].clone(),
        })
    } else {
        None
    };
    let p = SsmParams {
        a,
        b: inputs[2].clone(),
        c: inputs[3].clone(),
        selective,
    };
    p.validate()?;
    Ok(p)
}

impl CustomOp for ScanOp {
    fn name(&self) -> &str {
        self.strategy.name()
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let params = params_from(inputs)?;
        let g = ssm_backward(&params, inputs[0], grad)?;
        let mut out = vec![Some(g.x), Some(g.a), Some(g.b), Some(g.c)];
        if let Some(s) = g.selective {
            out.extend([Some(s.w_delta), Some(s.delta_bias), Some(s.w_b), Some(s.w_c)]);
        }
        Ok(out)
    }
}

/// Records a scan on the tape. The forward value comes from `strategy`; the
/// backward pass is the shared reverse-time adjoint.
pub fn scan_on_graph(g: &mut Graph, strategy: &Arc<dyn ScanStrategy>, x: Var, ssm: &SsmVars) -> Result<Var> {
    let mut inputs = vec![x, ssm.a, ssm.b, ssm.c];
    if let Some(sel) = ssm.selective {
        inputs.extend(sel);
    }
    let values: Vec<&Tensor> = inputs.iter().map(|&v| g.value(v)).collect();
    let params = params_from(&values)?;
    let y = strategy.scan(&params, values[0])?;
    Ok(g.custom(
        Arc::new(ScanOp {
            strategy: strategy.clone(),
        }),
        &inputs,
        y,
    ))
}
