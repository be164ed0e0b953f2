use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-channel state matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum StateMatrix {
    /// `[D×N]`: channel `d` uses `diag(A[d,:])`.
    Diagonal(Tensor),
    /// `[D×N×N]`: one full matrix per channel.
    Dense(Tensor),
}

/// Projections that make the step size and the input/output maps depend on
/// the current input.
///
/// With input row `x_t ∈ R^D`:
/// `Δ_t = softplus(x_t·W_Δ + b_Δ)` (one step per channel),
/// `B_t[d,n] = B[d,n] + (x_t·W_B)[n]`, `C_t[d,n] = C[d,n] + (x_t·W_C)[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProj {
    /// `[D×D]`
    pub w_delta: Tensor,
    /// `[D]`
    pub delta_bias: Tensor,
    /// `[D×N]`
    pub w_b: Tensor,
    /// `[D×N]`
    pub w_c: Tensor,
}

/// State-space parameters for `D` independent channels with state size `N`.
///
/// Without `selective` the system is time-invariant:
/// `h_t = A h_{t−1} + B x_t`, `y_t = C h_t`. With it, the recurrence is
/// discretized per step: `h_t = exp(Δ_t A) h_{t−1} + Δ_t B_t x_t`,
/// `y_t = C_t h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a: StateMatrix,
    /// `[D×N]`
    pub b: Tensor,
    /// `[D×N]`
    pub c: Tensor,
    pub selective: Option<SelectiveProj>,
}

impl SsmParams {
    pub fn diagonal(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let p = Self {
            a: StateMatrix::Diagonal(a),
            b,
            c,
            selective: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dense(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let p = Self {
            a: StateMatrix::Dense(a),
            b,
            c,
            selective: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_selective(mut self, proj: SelectiveProj) -> Result<Self> {
        self.selective = Some(proj);
        self.validate()?;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.b.rows()
    }

    pub fn state_size(&self) -> usize {
        self.b.cols()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.a, StateMatrix::Diagonal(_))
    }

    pub fn is_selective(&self) -> bool {
        self.selective.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let [d, n] = self.b.dims2("ssm params (B)")?;
        let check = |what: &str, t: &Tensor, want: Vec<usize>| -> Result<()> {
            if t.shape() == want.as_slice() {
                Ok(())
            } else {
                Err(Error::Invalid(format!(
                    "ssm {what} has shape {:?}, expected {want:?}",
                    t.shape()
                )))
            }
        };
        check("C", &self.c, vec![d, n])?;
        match &self.a {
            StateMatrix::Diagonal(a) => check("A", a, vec![d, n])?,
            StateMatrix::Dense(a) => check("A", a, vec![d, n, n])?,
        }
        if let Some(s) = &self.selective {
            if !self.is_diagonal() {
                return Err(Error::UnsupportedMode(
                    "selective projections require a diagonal state matrix".into(),
                ));
            }
            check("W_delta", &s.w_delta, vec![d, d])?;
            check("delta_bias", &s.delta_bias, vec![d])?;
            check("W_B", &s.w_b, vec![d, n])?;
            check("W_C", &s.w_c, vec![d, n])?;
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<[usize; 2]> {
        let [l, d] = x.dims2("ssm scan")?;
        if d != self.channels() {
            return Err(Error::Dimension {
                op: "ssm scan",
                left: x.shape().to_vec(),
                right: self.b.shape().to_vec(),
            });
        }
        Ok([l, d])
    }
}
