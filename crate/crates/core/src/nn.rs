//! Parameterized building blocks shared by the model components.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{randn, Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::{scan_on_graph, ScanStrategy, SsmVars};

/// Per-forward settings: whether dropout is active and the key that makes
/// its masks reproducible.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub train: bool,
    pub dropout: f64,
    key: u64,
    site: u64,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            key: 0,
            site: 0,
        }
    }

    /// Training context. Masks depend only on `(seed, step, sample)` and the
    /// order of dropout sites, never on global RNG state.
    pub fn train(dropout: f64, seed: u64, step: u64, sample: u64) -> Self {
        let key = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(sample.wrapping_mul(0x94D0_49BB_1331_11EB));
        Self {
            train: true,
            dropout,
            key,
            site: 0,
        }
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        self.site += 1;
        ChaCha8Rng::seed_from_u64(self.key ^ self.site.wrapping_mul(0xD6E8_FEB8_6659_FD93))
    }

    /// Inverted dropout; identity outside training or when the rate is 0.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let p = self.dropout.min(0.99);
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.next_rng();
        let mask = Tensor::from_fn(g.shape(x).to_vec(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        g.mul_const(x, mask)
    }
}

/// `x·W (+ b)` with `W` stored `[in×out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), randn([fan_in, fan_out], std, rng), false)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([fan_out]), false)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// Glorot-style default scale.
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, fan_in, fan_out, bias, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(id) => {
                let b = g.param(store, id);
                let b = g.reshape(b, &[1, store.value(id).len()])?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([dim]), false)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// `linear → SiLU → dropout → linear`.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), d_in, d_out, true, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), d_out, d_out, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = ctx.dropout(g, h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Diagonal state-space layer with `A = −exp(a_log)` and input-dependent
/// step size. In the time-invariant modes the step is fixed at
/// `softplus(b_Δ)` and the system is discretized once per forward:
/// `Ā = exp(Δ·A)`, `B̄ = Δ·B`.
#[derive(Debug, Clone, Copy)]
pub struct SsmLayer {
    pub a_log: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
}

impl SsmLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state: usize, rng: &mut impl Rng) -> Result<Self> {
        let a_log = Tensor::from_fn([channels, state], |k| ((k % state) as f64 + 1.0).ln());
        // Step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus.
        let delta_bias = Tensor::from_fn([channels], |_| {
            let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        let inner_std = (1.0 / channels as f64).sqrt();
        Ok(Self {
            a_log: store.add(format!("{name}.a_log"), a_log, false)?,
            b: store.add(format!("{name}.b"), randn([channels, state], 1.0, rng), false)?,
            c: store.add(format!("{name}.c"), randn([channels, state], (1.0 / state as f64).sqrt(), rng), false)?,
            w_delta: store.add(format!("{name}.w_delta"), randn([channels, channels], 0.1 * inner_std, rng), false)?,
            delta_bias: store.add(format!("{name}.delta_bias"), delta_bias, false)?,
            w_b: store.add(format!("{name}.w_b"), randn([channels, state], inner_std, rng), false)?,
            w_c: store.add(format!("{name}.w_c"), randn([channels, state], inner_std, rng), false)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 7] {
        [self.a_log, self.b, self.c, self.w_delta, self.delta_bias, self.w_b, self.w_c]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, strategy: &Arc<dyn ScanStrategy>, x: Var) -> Result<Var> {
        let a_log = g.param(store, self.a_log);
        let a = g.exp(a_log);
        let a = g.neg(a);
        let b = g.param(store, self.b);
        let c = g.param(store, self.c);
        let delta_bias = g.param(store, self.delta_bias);
        let vars = if strategy.mode().is_selective() {
            SsmVars {
                a,
                b,
                c,
                selective: Some([
                    g.param(store, self.w_delta),
                    delta_bias,
                    g.param(store, self.w_b),
                    g.param(store, self.w_c),
                ]),
            }
        } else {
            let channels = store.value(self.delta_bias).len();
            let dt = g.softplus(delta_bias);
            let dt = g.reshape(dt, &[channels, 1])?;
            let da = g.mul(a, dt)?;
            let a_bar = g.exp(da);
            let b_bar = g.mul(b, dt)?;
            SsmVars {
                a: a_bar,
                b: b_bar,
                c,
                selective: None,
            }
        };
        scan_on_graph(g, strategy, x, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::ssm::{ScanRegistry, SsmMode};

    #[test]
    fn dropout_masks_are_reproducible_and_scaled() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([20, 10]));
        let a = Ctx::train(0.5, 1, 2, 3).dropout(&mut g, x).unwrap();
        let b = Ctx::train(0.5, 1, 2, 3).dropout(&mut g, x).unwrap();
        let c = Ctx::train(0.5, 1, 2, 4).dropout(&mut g, x).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let e = Ctx::eval().dropout(&mut g, x).unwrap();
        assert_eq!(e, x);
    }

    #[test]
    fn initial_step_sizes_lie_in_range() {
        let mut store = ParamStore::new();
        let layer = SsmLayer::new(&mut store, "s", 16, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for &v in store.value(layer.delta_bias).data() {
            let dt = crate::numerics::kernels::softplus_scalar(v);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn ssm_layer_gradients_in_every_mode() {
        for mode in SsmMode::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::new();
            let layer = SsmLayer::new(&mut store, "s", 3, 2, &mut rng).unwrap();
            // Larger steps than the default so every parameter matters numerically.
            for v in store.get_mut(layer.delta_bias).value.data_mut() {
                *v = 0.3;
            }
            let x = randn([6, 3], 1.0, &mut rng);
            let w = randn([6, 3], 1.0, &mut rng);
            let strategy = ScanRegistry::builtin().for_mode(mode).unwrap();
            let ids: Vec<_> = if mode.is_selective() {
                layer.ids().to_vec()
            } else {
                vec![layer.a_log, layer.b, layer.c, layer.delta_bias]
            };
            let report = grad_check(&mut store, &ids, 1e-6, |g, s| {
                let xv = g.constant(x.clone());
                let y = layer.forward(g, s, &strategy, xv)?;
                let y = g.mul_const(y, w.clone())?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{mode}: {report:?}");
        }
    }
}
