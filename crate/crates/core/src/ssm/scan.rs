//! Forward and backward passes of the state-space recurrence in its
//! sequential, convolution-kernel and prefix-scan forms.

use super::assoc::{inclusive_scan, Affine};
use super::params::{SsmParams, StateMatrix};
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, sigmoid_scalar, softplus_scalar};
use crate::numerics::Tensor;

/// Input-dependent quantities of a selective scan, materialized per step.
pub(crate) struct SelectiveSteps {
    /// Pre-activation of the step size, `[L×D]`.
    pub pre: Tensor,
    /// `softplus(pre)`, `[L×D]`.
    pub delta: Tensor,
    /// `x·W_B`, `[L×N]`.
    pub b_sel: Tensor,
    /// `x·W_C`, `[L×N]`.
    pub c_sel: Tensor,
}

pub(crate) fn selective_steps(params: &SsmParams, x: &Tensor) -> Result<SelectiveSteps> {
    let s = params
        .selective
        .as_ref()
        .ok_or_else(|| Error::UnsupportedMode("time-invariant parameters have no selective steps".into()))?;
    let mut pre = kernels::matmul(x, &s.w_delta)?;
    let d = pre.cols();
    for (k, v) in pre.data_mut().iter_mut().enumerate() {
        *v += s.delta_bias.data()[k % d];
    }
    let delta = pre.map(softplus_scalar);
    Ok(SelectiveSteps {
        pre,
        delta,
        b_sel: kernels::matmul(x, &s.w_b)?,
        c_sel: kernels::matmul(x, &s.w_c)?,
    })
}

fn diag_a(params: &SsmParams) -> Result<&Tensor> {
    match &params.a {
        StateMatrix::Diagonal(a) => Ok(a),
        StateMatrix::Dense(_) => Err(Error::UnsupportedMode(
            "this scan requires a diagonal state matrix".into(),
        )),
    }
}

fn finite_or(step: usize, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric {
            what: "ssm state".into(),
            step,
        })
    }
}

/// Impulse response `K[k] = C·A^k·B` for `k < len`, one column per channel:
/// the result is `[len×D]`, directly usable as a causal [`conv1d`] kernel.
///
/// [`conv1d`]: crate::numerics::conv1d
pub fn ssm_kernel(params: &SsmParams, len: usize) -> Result<Tensor> {
    if params.is_selective() {
        return Err(Error::UnsupportedMode(
            "the convolution kernel exists only for time-invariant parameters".into(),
        ));
    }
    if len == 0 {
        return Err(Error::Invalid("kernel length must be ≥ 1".into()));
    }
    params.validate()?;
    let (d, n) = (params.channels(), params.state_size());
    let mut k = Tensor::zeros([len, d]);
    for ch in 0..d {
        let mut v: Vec<f64> = params.b.row(ch).to_vec();
        let c = params.c.row(ch);
        for step in 0..len {
            k.set2(step, ch, c.iter().zip(&v).map(|(a, b)| a * b).sum());
            v = match &params.a {
                StateMatrix::Diagonal(a) => v.iter().zip(a.row(ch)).map(|(x, a)| a * x).collect(),
                StateMatrix::Dense(a) => {
                    let m = &a.data()[ch * n * n..(ch + 1) * n * n];
                    (0..n)
                        .map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum())
                        .collect()
                }
            };
        }
    }
    Ok(k)
}

/// Convolution-form evaluation: causal convolution of `x` with
/// [`ssm_kernel`]. Quadratic in the sequence length.
pub fn ssm_scan_kernel(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let [l, _] = params.check_input(x)?;
    if l == 0 {
        return Ok(x.clone());
    }
    let k = ssm_kernel(params, l)?;
    kernels::conv1d(x, &k, true)
}

/// Sequential recurrence, the reference realization of every mode.
pub fn ssm_scan_recurrent(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let [l, d] = params.check_input(x)?;
    params.validate()?;
    let n = params.state_size();
    let mut y = Tensor::zeros([l, d]);
    match (&params.a, &params.selective) {
        (StateMatrix::Diagonal(a), None) => {
            let mut h = vec![0.0; d * n];
            for t in 0..l {
                let mut ok = true;
                for ch in 0..d {
                    let xv = x.at2(t, ch);
                    let (ar, br, cr) = (a.row(ch), params.b.row(ch), params.c.row(ch));
                    let hs = &mut h[ch * n..(ch + 1) * n];
                    let mut acc = 0.0;
                    for i in 0..n {
                        hs[i] = ar[i] * hs[i] + br[i] * xv;
                        acc += cr[i] * hs[i];
                    }
                    ok &= acc.is_finite();
                    y.set2(t, ch, acc);
                }
                finite_or(t, ok && h.iter().all(|v| v.is_finite()))?;
            }
        }
        (StateMatrix::Dense(a), None) => {
            let mut h = vec![0.0; d * n];
            let mut next = vec![0.0; n];
            for t in 0..l {
                for ch in 0..d {
                    let m = &a.data()[ch * n * n..(ch + 1) * n * n];
                    let hs = &mut h[ch * n..(ch + 1) * n];
                    let xv = x.at2(t, ch);
                    for i in 0..n {
                        next[i] = (0..n).map(|j| m[i * n + j] * hs[j]).sum::<f64>()
                            + params.b.at2(ch, i) * xv;
                    }
                    hs.copy_from_slice(&next);
                    let out: f64 = params.c.row(ch).iter().zip(hs.iter()).map(|(c, h)| c * h).sum();
                    y.set2(t, ch, out);
                }
                finite_or(t, h.iter().all(|v| v.is_finite()))?;
            }
        }
        (StateMatrix::Diagonal(a), Some(_)) => {
            let st = selective_steps(params, x)?;
            let mut h = vec![0.0; d * n];
            for t in 0..l {
                let (bs, cs) = (st.b_sel.row(t), st.c_sel.row(t));
                let mut ok = true;
                for ch in 0..d {
                    let dt = st.delta.at2(t, ch);
                    let xv = x.at2(t, ch);
                    let (ar, br, cr) = (a.row(ch), params.b.row(ch), params.c.row(ch));
                    let hs = &mut h[ch * n..(ch + 1) * n];
                    let mut acc = 0.0;
                    for i in 0..n {
                        hs[i] = (dt * ar[i]).exp() * hs[i] + dt * (br[i] + bs[i]) * xv;
                        acc += (cr[i] + cs[i]) * hs[i];
                    }
                    ok &= acc.is_finite();
                    y.set2(t, ch, acc);
                }
                finite_or(t, ok && h.iter().all(|v| v.is_finite()))?;
            }
        }
        (StateMatrix::Dense(_), Some(_)) => unreachable!("rejected by validate"),
    }
    Ok(y)
}

/// The same map as [`ssm_scan_recurrent`], computed per (channel, state)
/// chain with an associative prefix scan over `(multiplier, increment)`
/// pairs. Requires a diagonal state matrix.
pub fn ssm_scan_parallel(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let [l, d] = params.check_input(x)?;
    params.validate()?;
    let a = diag_a(params)?;
    let n = params.state_size();
    let steps = match params.selective {
        Some(_) => Some(selective_steps(params, x)?),
        None => None,
    };
    let mut y = Tensor::zeros([l, d]);
    let mut chain = vec![Affine::IDENTITY; l];
    for ch in 0..d {
        for i in 0..n {
            let (a_di, b_di, c_di) = (a.at2(ch, i), params.b.at2(ch, i), params.c.at2(ch, i));
            for (t, slot) in chain.iter_mut().enumerate() {
                let xv = x.at2(t, ch);
                *slot = match &steps {
                    Some(s) => {
                        let dt = s.delta.at2(t, ch);
                        Affine {
                            mul: (dt * a_di).exp(),
                            add: dt * (b_di + s.b_sel.at2(t, i)) * xv,
                        }
                    }
                    None => Affine {
                        mul: a_di,
                        add: b_di * xv,
                    },
                };
            }
            inclusive_scan(&mut chain);
            for (t, h) in chain.iter().enumerate() {
                let c = match &steps {
                    Some(s) => c_di + s.c_sel.at2(t, i),
                    None => c_di,
                };
                let cur = y.at2(t, ch);
                y.set2(t, ch, cur + c * h.add);
            }
        }
    }
    if let Some(t) = (0..l).find(|&t| !y.row(t).iter().all(|v| v.is_finite())) {
        return finite_or(t, false).map(|_| y);
    }
    Ok(y)
}

/// Hidden-state trajectory `h_1..h_L` of a diagonal system, each `[D×N]`.
pub fn ssm_states(params: &SsmParams, x: &Tensor) -> Result<Vec<Tensor>> {
    let [l, d] = params.check_input(x)?;
    params.validate()?;
    let a = diag_a(params)?;
    let n = params.state_size();
    let steps = match params.selective {
        Some(_) => Some(selective_steps(params, x)?),
        None => None,
    };
    let mut h = Tensor::zeros([d, n]);
    let mut out = Vec::with_capacity(l);
    for t in 0..l {
        for ch in 0..d {
            let xv = x.at2(t, ch);
            for i in 0..n {
                let (mul, inc) = match &steps {
                    Some(s) => {
                        let dt = s.delta.at2(t, ch);
                        ((dt * a.at2(ch, i)).exp(), dt * (params.b.at2(ch, i) + s.b_sel.at2(t, i)) * xv)
                    }
                    None => (a.at2(ch, i), params.b.at2(ch, i) * xv),
                };
                let v = mul * h.at2(ch, i) + inc;
                h.set2(ch, i, v);
            }
        }
        finite_or(t, h.is_finite())?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Gradients of a scan with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmGrads {
    pub x: Tensor,
    /// Same layout as the state matrix (`[D×N]` or `[D×N×N]`).
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub selective: Option<SelectiveGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveGrads {
    pub w_delta: Tensor,
    pub delta_bias: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
}

/// Reverse-time adjoint of the recurrence. `grad_y` is `∂loss/∂y`, `[L×D]`.
pub fn ssm_backward(params: &SsmParams, x: &Tensor, grad_y: &Tensor) -> Result<SsmGrads> {
    let [l, d] = params.check_input(x)?;
    if grad_y.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "ssm_backward",
            left: x.shape().to_vec(),
            right: grad_y.shape().to_vec(),
        });
    }
    params.validate()?;
    let n = params.state_size();
    match (&params.a, &params.selective) {
        (StateMatrix::Dense(a), None) => dense_backward(params, a, x, grad_y, l, d, n),
        (StateMatrix::Diagonal(a), sel) => {
            let steps = match sel {
                Some(_) => Some(selective_steps(params, x)?),
                None => None,
            };
            diag_backward(params, a, steps.as_ref(), x, grad_y, l, d, n)
        }
        (StateMatrix::Dense(_), Some(_)) => unreachable!("rejected by validate"),
    }
}

#[allow(clippy::too_many_arguments)]
fn diag_backward(
    params: &SsmParams,
    a: &Tensor,
    steps: Option<&SelectiveSteps>,
    x: &Tensor,
    gy: &Tensor,
    l: usize,
    d: usize,
    n: usize,
) -> Result<SsmGrads> {
    // Per-step multiplier, input coefficient and readout for (t, ch, i).
    let mul = |t: usize, ch: usize, i: usize| match steps {
        Some(s) => (s.delta.at2(t, ch) * a.at2(ch, i)).exp(),
        None => a.at2(ch, i),
    };
    let b_t = |t: usize, ch: usize, i: usize| match steps {
        Some(s) => params.b.at2(ch, i) + s.b_sel.at2(t, i),
        None => params.b.at2(ch, i),
    };
    let c_t = |t: usize, ch: usize, i: usize| match steps {
        Some(s) => params.c.at2(ch, i) + s.c_sel.at2(t, i),
        None => params.c.at2(ch, i),
    };
    let dt = |t: usize, ch: usize| steps.map_or(1.0, |s| s.delta.at2(t, ch));

    // Forward states, h[t] for t = 0..L (h[0] is the zero initial state).
    let mut hs = vec![0.0; (l + 1) * d * n];
    for t in 0..l {
        for ch in 0..d {
            let xv = x.at2(t, ch);
            for i in 0..n {
                let prev = hs[(t * d + ch) * n + i];
                hs[((t + 1) * d + ch) * n + i] = mul(t, ch, i) * prev + dt(t, ch) * b_t(t, ch, i) * xv;
            }
        }
    }

    let mut gx = Tensor::zeros([l, d]);
    let mut ga = Tensor::zeros([d, n]);
    let mut gb = Tensor::zeros([d, n]);
    let mut gc = Tensor::zeros([d, n]);
    let mut gdelta = Tensor::zeros([l, d]);
    let mut gbsel = Tensor::zeros([l, n]);
    let mut gcsel = Tensor::zeros([l, n]);
    // carry = Ā_{t+1} ⊙ λ_{t+1}
    let mut carry = vec![0.0; d * n];
    for t in (0..l).rev() {
        for ch in 0..d {
            let g = gy.at2(t, ch);
            let xv = x.at2(t, ch);
            let step = dt(t, ch);
            for i in 0..n {
                let k = ch * n + i;
                let h = hs[((t + 1) * d + ch) * n + i];
                let hprev = hs[(t * d + ch) * n + i];
                let lam = carry[k] + c_t(t, ch, i) * g;
                let gh_c = g * h;
                gc.data_mut()[k] += gh_c;
                gcsel.data_mut()[t * n + i] += gh_c;
                let m = mul(t, ch, i);
                let bt = b_t(t, ch, i);
                let g_mul = lam * hprev;
                match steps {
                    Some(_) => {
                        ga.data_mut()[k] += g_mul * m * step;
                        gdelta.data_mut()[t * d + ch] += g_mul * m * a.at2(ch, i) + lam * bt * xv;
                    }
                    None => ga.data_mut()[k] += g_mul,
                }
                let g_in = lam * step * xv;
                gb.data_mut()[k] += g_in;
                gbsel.data_mut()[t * n + i] += g_in;
                gx.data_mut()[t * d + ch] += lam * step * bt;
                carry[k] = m * lam;
            }
        }
    }

    let selective = match (steps, &params.selective) {
        (Some(s), Some(proj)) => {
            let gpre = gdelta.zip_map(&s.pre, |g, p| g * sigmoid_scalar(p))?;
            let w_delta = kernels::matmul_at_b(x, &gpre)?;
            let mut delta_bias = Tensor::zeros([d]);
            for t in 0..l {
                for ch in 0..d {
                    delta_bias.data_mut()[ch] += gpre.at2(t, ch);
                }
            }
            let w_b = kernels::matmul_at_b(x, &gbsel)?;
            let w_c = kernels::matmul_at_b(x, &gcsel)?;
            gx.add_assign(&kernels::matmul_a_bt(&gpre, &proj.w_delta)?);
            gx.add_assign(&kernels::matmul_a_bt(&gbsel, &proj.w_b)?);
            gx.add_assign(&kernels::matmul_a_bt(&gcsel, &proj.w_c)?);
            Some(SelectiveGrads {
                w_delta,
                delta_bias,
                w_b,
                w_c,
            })
        }
        _ => None,
    };
    Ok(SsmGrads {
        x: gx,
        a: ga,
        b: gb,
        c: gc,
        selective,
    })
}

fn dense_backward(
    params: &SsmParams,
    a: &Tensor,
    x: &Tensor,
    gy: &Tensor,
    l: usize,
    d: usize,
    n: usize,
) -> Result<SsmGrads> {
    let mut gx = Tensor::zeros([l, d]);
    let mut ga = Tensor::zeros([d, n, n]);
    let mut gb = Tensor::zeros([d, n]);
    let mut gc = Tensor::zeros([d, n]);
    for ch in 0..d {
        let m = &a.data()[ch * n * n..(ch + 1) * n * n];
        let (b, c) = (params.b.row(ch), params.c.row(ch));
        let mut hs = vec![vec![0.0; n]; l + 1];
        for t in 0..l {
            let xv = x.at2(t, ch);
            for i in 0..n {
                hs[t + 1][i] = (0..n).map(|j| m[i * n + j] * hs[t][j]).sum::<f64>() + b[i] * xv;
            }
        }
        // carry = Aᵀ λ_{t+1}
        let mut carry = vec![0.0; n];
        for t in (0..l).rev() {
            let g = gy.at2(t, ch);
            let lam: Vec<f64> = (0..n).map(|i| carry[i] + c[i] * g).collect();
            for i in 0..n {
                gc.data_mut()[ch * n + i] += g * hs[t + 1][i];
                gb.data_mut()[ch * n + i] += lam[i] * x.at2(t, ch);
                for j in 0..n {
                    ga.data_mut()[ch * n * n + i * n + j] += lam[i] * hs[t][j];
                }
            }
            gx.data_mut()[t * d + ch] = lam.iter().zip(b).map(|(l, b)| l * b).sum();
            carry = (0..n).map(|j| (0..n).map(|i| m[i * n + j] * lam[i]).sum()).collect();
        }
    }
    Ok(SsmGrads {
        x: gx,
        a: ga,
        b: gb,
        c: gc,
        selective: None,
    })
}
