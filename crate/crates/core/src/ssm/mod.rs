//! Discrete state-space layers: parameters, the three equivalent evaluation
//! forms, the reverse-time adjoint and the named scan strategies.

mod assoc;
mod params;
mod scan;
mod strategy;

pub use assoc::{inclusive_scan, Affine};
pub use params::{SelectiveProj, SsmParams, StateMatrix};
pub use scan::{
    ssm_backward, ssm_kernel, ssm_scan_kernel, ssm_scan_parallel, ssm_scan_recurrent, ssm_states, SelectiveGrads,
    SsmGrads,
};
pub use strategy::{
    scan_on_graph, LtiKernel, LtiRecurrent, ScanRegistry, ScanStrategy, SelectiveParallelScan, SelectiveRecurrent,
    SsmMode, SsmVars,
};

use rand::Rng;

use crate::numerics::{randn, Tensor};

/// Random stable diagonal system: entries of `A` in `(−0.95, 0.95)`.
pub fn random_diagonal(d: usize, n: usize, rng: &mut impl Rng) -> SsmParams {
    let a = Tensor::from_fn([d, n], |_| rng.random_range(-0.95..0.95));
    let b = randn([d, n], 1.0, rng);
    let c = randn([d, n], 1.0, rng);
    SsmParams::diagonal(a, b, c).expect("consistent shapes")
}

/// Random selective system with `A = −exp(·)` so every step decays.
pub fn random_selective(d: usize, n: usize, rng: &mut impl Rng) -> SsmParams {
    let a = Tensor::from_fn([d, n], |_| -rng.random_range(0.2f64..2.0));
    let b = randn([d, n], 1.0, rng);
    let c = randn([d, n], 1.0, rng);
    let proj = SelectiveProj {
        w_delta: randn([d, d], 0.3, rng),
        delta_bias: randn([d], 0.5, rng),
        w_b: randn([d, n], 0.3, rng),
        w_c: randn([d, n], 0.3, rng),
    };
    SsmParams::diagonal(a, b, c)
        .and_then(|p| p.with_selective(proj))
        .expect("consistent shapes")
}
