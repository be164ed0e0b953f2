//! Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
//! Exits non-zero when any criterion fails.

use std::path::Path;
use std::time::Instant;

use mlvtg::aligner::{Aligner, AlignerConfig, GateRegistry};
use mlvtg::bench::{run_bench, BenchConfig, BenchRegistry, CountingAlloc};
use mlvtg::checkpoint::{load_checkpoint, save_checkpoint, to_container};
use mlvtg::data::{
    decode_features, encode_features, generate_synthetic, quantize, read_annotations, read_features,
    write_annotations, Annotation, GroundingSample, RunConfig, SynthSpec,
};
use mlvtg::frontend::FeaturePair;
use mlvtg::heads::{batch_loss, Targets};
use mlvtg::metrics::{
    average_precision, evaluate, hd_map, hit_at_1, interval_iou, mean_ap, mean_iou, recall_at_1, top5_map,
    EvalRecord, Prediction, Span,
};
use mlvtg::model::{Model, Registries};
use mlvtg::nn::Ctx;
use mlvtg::numerics::{grad_check, randn, Graph, ParamStore, Tensor, Var};
use mlvtg::refiner::{ArchRegistry, FrozenBlockFile, FROZEN_PREFIX};
use mlvtg::ssm::{random_diagonal, random_selective, ssm_scan_kernel, ssm_scan_parallel, ssm_scan_recurrent};
use mlvtg::ssm::{scan_on_graph, ScanRegistry, SsmMode, SsmVars};
use mlvtg::train::{loss_config, Trainer};
use mlvtg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const SSM_TOL: f64 = 1e-8;
const SSM_BUDGET_S: f64 = 10.0;
const GRAD_TOL: f64 = 1e-4;
/// Central-difference step for multi-layer checks.
const WHOLE_NETWORK_STEP: f64 = 1e-4;
const METRIC_TOL: f64 = 1e-12;
const MIN_METRIC_CASES: usize = 20;
const FREEZE_STEPS: usize = 50;
const OVERFIT_MIN: f64 = 0.9;
const OVERFIT_BUDGET_S: f64 = 15.0 * 60.0;
const FIXTURE_LR: f64 = 3e-3;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ATTENTION_SLOPE: (f64, f64) = (1.7, 2.3);
const ALIGNER_SLOPE: (f64, f64) = (0.8, 1.3);
const BENCH_BUDGET_S: f64 = 5.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn criterion(name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail} ({:.1} s)", start.elapsed().as_secs_f64());
    pass
}

fn info(line: &str) {
    println!("       {line}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ssm_form_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut r = rng(1000 + i);
        let (n, d, l) = (r.random_range(1..=8), r.random_range(1..=4), r.random_range(1..=64));
        let p = random_diagonal(d, n, &mut r);
        let x = randn([l, d], 1.0, &mut r);
        worst = worst.max(ssm_scan_recurrent(&p, &x)?.max_abs_diff(&ssm_scan_kernel(&p, &x)?));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < SSM_TOL && secs < SSM_BUDGET_S,
        format!("100 LTI instances, max |Δ| = {worst:.2e} (tol {SSM_TOL:e}), {secs:.3} s (budget {SSM_BUDGET_S} s)"),
    )
}

fn parallel_scan_equivalence() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut r = rng(2000 + i);
        let (n, d, l) = (r.random_range(1..=8), r.random_range(1..=4), r.random_range(1..=64));
        let p = random_selective(d, n, &mut r);
        let x = randn([l, d], 1.0, &mut r);
        worst = worst.max(ssm_scan_recurrent(&p, &x)?.max_abs_diff(&ssm_scan_parallel(&p, &x)?));
    }
    outcome(
        worst < SSM_TOL,
        format!("100 selective instances, max |Δ| = {worst:.2e} (tol {SSM_TOL:e})"),
    )
}

/// Contracts `v` with fixed random weights so every element gets its own
/// upstream gradient.
fn contract(g: &mut Graph, v: Var) -> Result<Var> {
    let w = randn(g.shape(v).to_vec(), 1.0, &mut rng(99));
    let p = g.mul_const(v, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn c(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> (&'static str, Vec<Vec<usize>>, OpFn) {
        (name, shapes.iter().map(|s| s.to_vec()).collect(), Box::new(f))
    }
    let targets = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
    vec![
        c("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        c("matmul_bt", &[&[3, 4], &[2, 4]], |g, v| g.matmul_bt(v[0], v[1])),
        c("add", &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1])),
        c("sub", &[&[3, 4], &[1, 4]], |g, v| g.sub(v[0], v[1])),
        c("mul", &[&[3, 4], &[3, 1]], |g, v| g.mul(v[0], v[1])),
        c("minimum", &[&[3, 3], &[3, 3]], |g, v| g.minimum(v[0], v[1])),
        c("maximum", &[&[3, 3], &[3, 3]], |g, v| g.maximum(v[0], v[1])),
        c("exp", &[&[2, 5]], |g, v| Ok(g.exp(v[0]))),
        c("log", &[&[2, 5]], |g, v| {
            let e = g.exp(v[0]);
            Ok(g.log(e))
        }),
        c("silu", &[&[2, 5]], |g, v| Ok(g.silu(v[0]))),
        c("sigmoid", &[&[2, 5]], |g, v| Ok(g.sigmoid(v[0]))),
        c("softplus", &[&[2, 5]], |g, v| Ok(g.softplus(v[0]))),
        c("abs", &[&[2, 5]], |g, v| Ok(g.abs(v[0]))),
        c("relu", &[&[2, 5]], |g, v| Ok(g.relu(v[0]))),
        c("recip", &[&[2, 5]], |g, v| {
            let e = g.exp(v[0]);
            Ok(g.recip(e))
        }),
        c("square", &[&[2, 5]], |g, v| Ok(g.square(v[0]))),
        c("scale/neg/add_scalar/rsub_scalar", &[&[2, 3]], |g, v| {
            let a = g.scale(v[0], 1.7);
            let b = g.neg(a);
            let c = g.add_scalar(b, 0.3);
            Ok(g.rsub_scalar(2.0, c))
        }),
        c("softmax_rows", &[&[3, 6]], |g, v| g.softmax_rows(v[0])),
        c("log_softmax_rows", &[&[3, 6]], |g, v| g.log_softmax_rows(v[0])),
        c("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2])),
        c("conv1d causal", &[&[7, 3], &[3, 3]], |g, v| g.conv1d(v[0], v[1], true)),
        c("conv1d centred", &[&[7, 3], &[4, 3]], |g, v| g.conv1d(v[0], v[1], false)),
        c("unfold", &[&[5, 2]], |g, v| g.unfold(v[0], 3)),
        c("reverse_rows", &[&[5, 3]], |g, v| g.reverse_rows(v[0])),
        c("slice_rows", &[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 4)),
        c("concat_rows", &[&[2, 3], &[3, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        c("select_rows", &[&[5, 3]], |g, v| g.select_rows(v[0], &[4, 0, 4])),
        c("transpose", &[&[2, 3]], |g, v| g.transpose(v[0])),
        c("reshape", &[&[2, 3]], |g, v| g.reshape(v[0], &[3, 2])),
        c("mean_rows", &[&[4, 3]], |g, v| g.mean_rows(v[0])),
        c("normalize_rows", &[&[4, 3]], |g, v| g.normalize_rows(v[0])),
        c("mean", &[&[4, 3]], |g, v| Ok(g.mean(v[0]))),
        c("bce_with_logits", &[&[4]], move |g, v| g.bce_with_logits(v[0], targets.clone())),
    ]
}

fn check_op(shapes: &[Vec<usize>], f: &OpFn) -> Result<f64> {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), randn(s.clone(), 1.0, &mut r), false))
        .collect::<Result<_>>()?;
    let ids2 = ids.clone();
    let report = grad_check(&mut store, &ids, 1e-5, |g, s| {
        let vars: Vec<Var> = ids2.iter().map(|&i| g.param(s, i)).collect();
        let out = f(g, &vars)?;
        contract(g, out)
    })?;
    Ok(report.max_rel_err)
}

fn check_scans() -> Result<f64> {
    let mut worst = 0.0f64;
    let reg = ScanRegistry::builtin();
    for (k, mode) in SsmMode::ALL.into_iter().enumerate() {
        let mut r = rng(30 + k as u64);
        let p = if mode.is_selective() {
            random_selective(2, 3, &mut r)
        } else {
            random_diagonal(2, 3, &mut r)
        };
        let mlvtg::ssm::StateMatrix::Diagonal(a) = &p.a else {
            unreachable!("random systems are diagonal")
        };
        let mut store = ParamStore::new();
        let mut ids = vec![
            store.add("a", a.clone(), false)?,
            store.add("b", p.b.clone(), false)?,
            store.add("c", p.c.clone(), false)?,
        ];
        if let Some(s) = &p.selective {
            ids.push(store.add("w_delta", s.w_delta.clone(), false)?);
            ids.push(store.add("delta_bias", s.delta_bias.clone(), false)?);
            ids.push(store.add("w_b", s.w_b.clone(), false)?);
            ids.push(store.add("w_c", s.w_c.clone(), false)?);
        }
        let x_id = store.add("x", randn([8, 2], 1.0, &mut r), false)?;
        let strategy = reg.for_mode(mode)?;
        let mut all = ids.clone();
        all.push(x_id);
        let report = grad_check(&mut store, &all, 1e-6, |g, s| {
            let v: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
            let vars = SsmVars {
                a: v[0],
                b: v[1],
                c: v[2],
                selective: (v.len() == 7).then(|| [v[3], v[4], v[5], v[6]]),
            };
            let x = g.param(s, x_id);
            let y = scan_on_graph(g, &strategy, x, &vars)?;
            contract(g, y)
        })?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

fn pipeline_samples() -> Result<Vec<GroundingSample>> {
    Ok(generate_synthetic(&SynthSpec {
        n_samples: 2,
        video_len: (8, 8),
        query_len: (4, 4),
        d_video: 6,
        d_query: 5,
        ..SynthSpec::default()
    })?
    .samples)
}

/// Whole network and loss, K = 2 blocks, D = 8, joint length 12.
fn check_pipeline() -> Result<(f64, usize, usize)> {
    let data = pipeline_samples()?;
    let cfg = RunConfig {
        d_model: 8,
        d_inner: 8,
        blocks: 2,
        d_state: 2,
        d_llm: 8,
        max_len: 16,
        dropout: 0.0,
        ..RunConfig::default()
    };
    let model = Model::new(&cfg, 6, 5, None, &Registries::default())?;
    let mut store = model.store.clone();
    let ids: Vec<_> = store.ids().collect();
    let loss = loss_config(&cfg);
    let report = grad_check(&mut store, &ids, WHOLE_NETWORK_STEP, |g, s| {
        let m = Model {
            store: s.clone(),
            ..model.clone()
        };
        let mut heads = Vec::new();
        let mut targets = Vec::new();
        for smp in &data {
            let pair = FeaturePair::new(smp.video.clone(), smp.query.clone())?;
            let out = m.forward(g, &pair, &mut Ctx::eval())?;
            heads.push(out.heads);
            targets.push(Targets {
                spans: smp.spans.clone(),
                saliency: smp.saliency.clone(),
            });
        }
        let refs: Vec<&Targets> = targets.iter().collect();
        Ok(batch_loss(g, &heads, &refs, &loss)?.terms.total)
    })?;
    Ok((report.max_rel_err, report.checked, report.skipped_frozen))
}

fn gradient_suite() -> Result<Outcome> {
    let mut worst = ("", 0.0f64);
    let cases = op_cases();
    for (name, shapes, f) in &cases {
        let e = check_op(shapes, f)?;
        if e > worst.1 {
            worst = (name, e);
        }
    }
    let scan = check_scans()?;
    let aligner = check_aligner()?;
    let (pipe, checked, frozen) = check_pipeline()?;
    let pass = worst.1 < GRAD_TOL && scan < GRAD_TOL && aligner < GRAD_TOL && pipe < GRAD_TOL;
    outcome(
        pass,
        format!(
            "{} graph ops worst {:.1e} ({}), 4 scan modes {scan:.1e}, aligner stack {aligner:.1e}, \
             full pipeline {pipe:.1e} over {checked} scalars with {frozen} frozen tensors skipped (tol {GRAD_TOL:e})",
            cases.len(),
            worst.1,
            worst.0
        ),
    )
}

fn aligner(d: usize, blocks: usize, mode: SsmMode, gate: &str, seed: u64) -> Result<(ParamStore, Aligner)> {
    let mut store = ParamStore::new();
    let a = Aligner::new(
        &mut store,
        AlignerConfig {
            d_model: d,
            d_inner: d,
            d_state: 2,
            conv_width: 3,
            blocks,
        },
        ScanRegistry::builtin().for_mode(mode)?,
        GateRegistry::builtin().get(gate)?,
        &mut rng(seed),
    )?;
    Ok((store, a))
}

fn check_aligner() -> Result<f64> {
    let (mut store, a) = aligner(8, 2, SsmMode::SelectiveRecurrent, "silu", 11)?;
    let mut r = rng(12);
    for b in &a.blocks {
        store.get_mut(b.out_proj.w).value = randn([8, 8], 0.3, &mut r);
    }
    let z_val = randn([12, 8], 1.0, &mut r);
    let ids: Vec<_> = store.ids().collect();
    let report = grad_check(&mut store, &ids, WHOLE_NETWORK_STEP, |g, s| {
        let z = g.constant(z_val.clone());
        let y = a.forward(g, s, z)?;
        contract(g, y)
    })?;
    Ok(report.max_rel_err)
}

fn fixture_spec() -> SynthSpec {
    SynthSpec {
        n_samples: 32,
        signal_strength: 1.0,
        seed: 7,
        ..SynthSpec::default()
    }
}

fn fixture_config(seed: u64, use_aligner: bool, use_refiner: bool) -> RunConfig {
    RunConfig {
        lr: FIXTURE_LR,
        seed,
        use_aligner,
        use_refiner,
        ..RunConfig::default()
    }
}

fn new_trainer(cfg: &RunConfig, data: &[GroundingSample]) -> Result<Trainer> {
    let (dv, dq) = (data[0].video.cols(), data[0].query.cols());
    Ok(Trainer::new(Model::new(cfg, dv, dq, None, &Registries::default())?))
}

fn freeze_invariant(data: &[GroundingSample]) -> Result<Outcome> {
    let cfg = RunConfig {
        batch_size: 4,
        ..fixture_config(0, true, true)
    };
    let mut t = new_trainer(&cfg, data)?;
    let adapters: Vec<(String, Tensor)> = t
        .model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("refiner.") && !p.name.starts_with(FROZEN_PREFIX))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let mut control = t.clone();
    let frozen_ids: Vec<_> = control.model.store.iter().filter(|(_, p)| p.frozen).map(|(id, _)| id).collect();
    for &id in &frozen_ids {
        control.model.store.set_frozen(id, false);
    }
    let run = |t: &mut Trainer| -> Result<()> {
        while t.step < FREEZE_STEPS as u64 {
            let batch = t.next_batch(data);
            t.train_step(&batch)?;
            t.epoch += 1;
        }
        Ok(())
    };
    run(&mut t)?;
    run(&mut control)?;
    let intact = t.model.verify_frozen();
    let moved = adapters
        .iter()
        .filter(|(n, v)| t.model.store.value(t.model.store.id(n).expect("adapter")).max_abs_diff(v) > 0.0)
        .count();
    let control_flips = !control.model.verify_frozen();
    outcome(
        intact && moved == adapters.len() && control_flips,
        format!(
            "after {} steps verify_frozen = {intact}, {moved}/{} adapter tensors changed; \
             unfrozen control verify_frozen = {}",
            t.step,
            adapters.len(),
            !control_flips
        ),
    )
}

fn gating_identities() -> Result<Outcome> {
    let mut cases = 0;
    let mut ok = true;
    for mode in SsmMode::ALL {
        for seed in 0..5u64 {
            let (mut store, a) = aligner(4, 1, mode, "silu", seed)?;
            let b = &a.blocks[0];
            let z_val = randn([9, 4], 1.0, &mut rng(100 + seed));

            let shape = store.value(b.w_g.w).shape().to_vec();
            store.get_mut(b.w_g.w).value = Tensor::zeros(shape);
            let mut g = Graph::no_grad();
            let z = g.constant(z_val.clone());
            let t = b.forward_traced(&mut g, &store, &a.scan, a.gate.as_ref(), z)?;
            let gate_zero = g.value(t.gate).data().iter().all(|&v| v == 0.0);
            ok &= gate_zero && bitwise(g.value(t.fused), g.value(t.y_bwd));

            let shape = store.value(b.out_proj.w).shape().to_vec();
            store.get_mut(b.out_proj.w).value = Tensor::zeros(shape);
            let mut g = Graph::no_grad();
            let z = g.constant(z_val.clone());
            let out = a.forward(&mut g, &store, z)?;
            ok &= bitwise(g.value(out), &z_val);
            cases += 2;
        }
    }
    outcome(
        ok,
        format!("{cases} cases over 4 scan modes: gate 0 ⇒ fused = backward branch, zero out_proj ⇒ identity, bitwise"),
    )
}

fn bitwise(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn scaling_shape() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = BenchConfig::default();
    let report = run_bench(&cfg, &BenchRegistry::builtin(), |_| {})?;
    let summary = report.summary()?;
    let fit = |name: &str| summary.fits.iter().find(|f| f.component == name).expect("component fitted");
    let (al, at) = (fit("aligner_block"), fit("attention_baseline"));
    for r in &report.rows {
        info(&format!(
            "{:>18} L={:<5} median {:>9.3} ms  peak {:>11} B",
            r.component, r.l, r.median_ms, r.peak_bytes
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    let pass = within(at.time_slope, ATTENTION_SLOPE)
        && within(al.time_slope, ALIGNER_SLOPE)
        && al.peak_bytes_at_largest < at.peak_bytes_at_largest
        && secs < BENCH_BUDGET_S;
    outcome(
        pass,
        format!(
            "time slope attention {:.3} in {ATTENTION_SLOPE:?}, aligner {:.3} in {ALIGNER_SLOPE:?}; \
             peak at L={} aligner {} B < attention {} B; memory slopes {:.2}/{:.2}; {secs:.0} s (budget {BENCH_BUDGET_S} s)",
            at.time_slope,
            al.time_slope,
            al.largest_l,
            al.peak_bytes_at_largest,
            at.peak_bytes_at_largest,
            al.memory_slope,
            at.memory_slope
        ),
    )
}

fn train_fixture(cfg: &RunConfig, data: &[GroundingSample]) -> Result<(Trainer, f64, f64)> {
    let mut t = new_trainer(cfg, data)?;
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        t.run_epoch(data, |r| {
            first.get_or_insert(r.terms.total);
            last = r.terms.total;
            Ok(())
        })?;
    }
    Ok((t, first.unwrap_or(f64::NAN), last))
}

fn overfit_fixture(data: &[GroundingSample], full0: &mut Option<Trainer>) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = fixture_config(0, true, true);
    let (t, first, last) = train_fixture(&cfg, data)?;
    let m = evaluate(&t.model.eval_records(data)?, cfg.very_good);
    let secs = start.elapsed().as_secs_f64();
    info(&format!(
        "loss step 1 {first:.4} → step {} {last:.4}; R1@0.5 {:.3}, mIoU {:.3}, HD mAP {:.3}",
        t.step, m.r1_05, m.miou, m.hd_map
    ));
    *full0 = Some(t);
    outcome(
        m.r1_07 >= OVERFIT_MIN && m.hit_1 >= OVERFIT_MIN && secs < OVERFIT_BUDGET_S && last <= first,
        format!(
            "32 samples, {} epochs, batch {}, lr {FIXTURE_LR:e}: R1@0.7 {:.3}, HIT@1 {:.3} (≥ {OVERFIT_MIN}); \
             {secs:.0} s (budget {OVERFIT_BUDGET_S} s)",
            cfg.epochs, cfg.batch_size, m.r1_07, m.hit_1
        ),
    )
}

fn ablation_direction(data: &[GroundingSample], full0: Option<Trainer>) -> Result<Outcome> {
    let variants = [("full", true, true), ("aligner-only", true, false), ("neither", false, false)];
    let held_out: Vec<GroundingSample> = generate_synthetic(&SynthSpec {
        n_samples: 64,
        ..fixture_spec()
    })?
    .samples
    .split_off(32);
    let mut means = Vec::new();
    let mut full0 = full0;
    for (name, al, rf) in variants {
        let mut train_scores = Vec::new();
        let mut held_scores = Vec::new();
        for seed in ABLATION_SEEDS {
            let cfg = fixture_config(seed, al, rf);
            let t = match (name, seed, full0.take()) {
                ("full", 0, Some(t)) => t,
                _ => train_fixture(&cfg, data)?.0,
            };
            train_scores.push(recall_at_1(&t.model.eval_records(data)?, 0.7));
            held_scores.push(recall_at_1(&t.model.eval_records(&held_out)?, 0.7));
        }
        let mean = train_scores.iter().sum::<f64>() / train_scores.len() as f64;
        let held = held_scores.iter().sum::<f64>() / held_scores.len() as f64;
        info(&format!(
            "{name:>12}: training R1@0.7 per seed {train_scores:.3?} mean {mean:.3}; held-out mean {held:.3} (not graded)"
        ));
        means.push((name, mean));
    }
    let monotone = means.windows(2).all(|w| w[0].1 >= w[1].1);
    outcome(
        monotone,
        format!(
            "training-set R1@0.7 over seeds {ABLATION_SEEDS:?}: {}",
            means.iter().map(|(n, m)| format!("{n} {m:.3}")).collect::<Vec<_>>().join(" ≥ ")
        ),
    )
}

// Brute-force metric oracles, written independently of the library.

fn oracle_iou(a: Span, b: Span) -> f64 {
    let mut pts = [a.st, a.ed, b.st, b.ed];
    pts.sort_by(f64::total_cmp);
    let (mut inter, mut union) = (0.0, 0.0);
    for w in pts.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let (in_a, in_b) = (a.st <= mid && mid <= a.ed, b.st <= mid && mid <= b.ed);
        if in_a && in_b {
            inter += w[1] - w[0];
        }
        if in_a || in_b {
            union += w[1] - w[0];
        }
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn oracle_best_iou(p: Span, gts: &[Span]) -> f64 {
    let mut best = 0.0;
    for &g in gts {
        let v = oracle_iou(p, g);
        if v > best {
            best = v;
        }
    }
    best
}

/// AP as the mean over relevant items of the best precision at or below
/// each hit's rank.
fn oracle_ap(hits: &[bool], relevant: usize) -> f64 {
    if relevant == 0 {
        return 0.0;
    }
    let prec = |j: usize| hits[..=j].iter().filter(|&&h| h).count() as f64 / (j + 1) as f64;
    let mut total = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            total += (k..hits.len()).map(prec).fold(0.0, f64::max);
        }
    }
    total / relevant as f64
}

fn oracle_span_ap(preds: &[Prediction], gts: &[Span], tau: f64) -> f64 {
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for p in preds {
        let mut pick: Option<usize> = None;
        for j in 0..gts.len() {
            let v = oracle_iou(p.span, gts[j]);
            if used[j] || v < tau {
                continue;
            }
            if pick.is_none_or(|k| v > oracle_iou(p.span, gts[k])) {
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            used[j] = true;
        }
        hits.push(pick.is_some());
    }
    oracle_ap(&hits, gts.len())
}

fn oracle_ranking(scores: &[f64]) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..scores.len() {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("untaken index");
        taken[b] = true;
        out.push(b);
    }
    out
}

fn oracle_relevance(r: &EvalRecord, vg: u8) -> Vec<bool> {
    oracle_ranking(&r.pred_saliency).iter().map(|&i| r.gt_saliency[i] >= vg).collect()
}

fn oracle_top5(r: &EvalRecord, vg: u8) -> f64 {
    let rel = oracle_relevance(r, vg);
    let top: Vec<bool> = rel.into_iter().take(5).collect();
    let n = top.iter().filter(|&&h| h).count();
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..top.len() {
        if top[k] {
            sum += top[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
        }
    }
    sum / n as f64
}

fn dyadic_span(r: &mut ChaCha8Rng) -> Span {
    let a = r.random_range(0..16u32);
    let b = r.random_range(a + 1..=16u32);
    Span::new(a as f64 / 16.0, b as f64 / 16.0).expect("ordered")
}

fn metric_case(seed: u64) -> EvalRecord {
    let mut r = rng(seed);
    let gts: Vec<Span> = (0..r.random_range(1..=3)).map(|_| dyadic_span(&mut r)).collect();
    let mut preds: Vec<Prediction> = (0..r.random_range(1..=6))
        .map(|_| Prediction {
            span: dyadic_span(&mut r),
            confidence: r.random_range(0..8u32) as f64 / 8.0,
        })
        .collect();
    preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let clips = r.random_range(3..=10);
    EvalRecord {
        query_id: format!("case{seed}"),
        predictions: preds,
        gt_spans: gts,
        gt_saliency: (0..clips).map(|_| r.random_range(0..=4u8)).collect(),
        pred_saliency: (0..clips).map(|_| r.random_range(0..4u32) as f64 / 4.0).collect(),
    }
}

fn metrics_oracles() -> Result<Outcome> {
    let hand = interval_iou(Span::new(0.0, 10.0)?, Span::new(5.0, 15.0)?);
    let mut worst = (hand - 1.0 / 3.0).abs();
    let mut note = |name: &'static str, got: f64, want: f64, counts: &mut Vec<(&'static str, usize)>| {
        worst = worst.max((got - want).abs());
        match counts.iter_mut().find(|(n, _)| *n == name) {
            Some((_, c)) => *c += 1,
            None => counts.push((name, 1)),
        }
    };
    let mut counts = Vec::new();
    let records: Vec<EvalRecord> = (0..24).map(|s| metric_case(500 + s)).collect();
    let taus = [0.3, 0.5, 0.7];
    for rec in &records {
        let one = std::slice::from_ref(rec);
        for &p in &rec.predictions {
            for &g in &rec.gt_spans {
                note("interval_iou", interval_iou(p.span, g), oracle_iou(p.span, g), &mut counts);
            }
        }
        let top = rec.predictions[0].span;
        for tau in taus {
            let want = if oracle_best_iou(top, &rec.gt_spans) >= tau { 1.0 } else { 0.0 };
            note("recall_at_1", recall_at_1(one, tau), want, &mut counts);
            note(
                "average_precision",
                average_precision(&rec.predictions, &rec.gt_spans, tau),
                oracle_span_ap(&rec.predictions, &rec.gt_spans, tau),
                &mut counts,
            );
        }
        note("mean_iou", mean_iou(one), oracle_best_iou(top, &rec.gt_spans), &mut counts);
        let rank = oracle_ranking(&rec.pred_saliency);
        let hit = if rec.gt_saliency[rank[0]] >= 3 { 1.0 } else { 0.0 };
        note("hit_at_1", hit_at_1(one, 3), hit, &mut counts);
        let rel = oracle_relevance(rec, 3);
        let n_rel = rel.iter().filter(|&&h| h).count();
        note("hd_map", hd_map(one, 3), oracle_ap(&rel, n_rel), &mut counts);
        note("top5_map", top5_map(one, 3), oracle_top5(rec, 3), &mut counts);
    }
    for k in 0..MIN_METRIC_CASES {
        let subset = &records[..=k + 3];
        let grid = mean_ap(subset, &[0.5, 0.75]);
        let want: f64 = [0.5, 0.75]
            .iter()
            .map(|&tau| {
                subset.iter().map(|r| oracle_span_ap(&r.predictions, &r.gt_spans, tau)).sum::<f64>() / subset.len() as f64
            })
            .sum::<f64>()
            / 2.0;
        note("mean_ap", grid.average, want, &mut counts);
    }
    let fewest = counts.iter().map(|&(_, c)| c).min().unwrap_or(0);
    outcome(
        worst <= METRIC_TOL && fewest >= MIN_METRIC_CASES && counts.len() == 8,
        format!(
            "{} metrics, ≥ {fewest} cases each, max |Δ| = {worst:.1e} (tol {METRIC_TOL:e}); IoU([0,10],[5,15]) = {hand}",
            counts.len()
        ),
    )
}

fn serialization() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| mlvtg::Error::io("tempdir", e))?;
    let mut checks = Vec::new();

    let golden = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden.mlvf"));
    let g = read_features(golden)?;
    let want = [1.0, -2.5, 0.15625, 0.003f32 as f64, 65504.0, -0.0];
    let golden_ok = g.shape() == [2, 3]
        && bitwise(&g, &Tensor::new([2, 3], want.to_vec())?)
        && encode_features(&g)? == std::fs::read(golden).map_err(|e| mlvtg::Error::io(golden, e))?;
    checks.push(("golden little-endian features", golden_ok));

    let mut r = rng(42);
    let features_ok = (0..20).all(|i| {
        let t = quantize(&randn([1 + i % 5, 1 + i % 7], 3.0, &mut r));
        encode_features(&t).and_then(|b| decode_features(&b)).is_ok_and(|back| bitwise(&back, &t))
    });
    checks.push(("random feature files", features_ok));

    let data = generate_synthetic(&SynthSpec {
        n_samples: 6,
        ..fixture_spec()
    })?;
    let anns: Vec<Annotation> = data
        .samples
        .iter()
        .map(|s| Annotation {
            sample_id: s.sample_id.clone(),
            duration: s.duration,
            clip_len: s.clip_len,
            spans: s.spans.iter().map(|sp| [sp.st * s.duration, sp.ed * s.duration]).collect(),
            saliency: s.saliency.clone(),
            video_feat: format!("features/{}_v.mlvf", s.sample_id),
            query_feat: format!("features/{}_q.mlvf", s.sample_id),
        })
        .collect();
    let ann_path = dir.path().join("a.jsonl");
    write_annotations(&ann_path, &anns)?;
    checks.push(("annotations", read_annotations(&ann_path)? == anns));

    let cfg = RunConfig {
        d_model: 8,
        d_inner: 8,
        blocks: 1,
        d_llm: 8,
        batch_size: 3,
        ..fixture_config(0, true, true)
    };
    let mut t = new_trainer(&cfg, &data.samples)?;
    t.run_epoch(&data.samples, |_| Ok(()))?;
    let ck = dir.path().join("ck.mlvg");
    save_checkpoint(&ck, &t)?;
    let back = load_checkpoint(&ck, &Registries::default())?;
    let bytes = std::fs::read(&ck).map_err(|e| mlvtg::Error::io(&ck, e))?;
    let params_ok = t
        .model
        .store
        .iter()
        .zip(back.model.store.iter())
        .all(|((_, a), (_, b))| a.name == b.name && a.frozen == b.frozen && bitwise(&a.value, &b.value));
    checks.push(("checkpoint", params_ok && to_container(&back).encode()? == bytes));

    let archs = ArchRegistry::builtin();
    let mut blocks_ok = true;
    for name in archs.names() {
        let arch = archs.get(name)?;
        let f = FrozenBlockFile::surrogate(arch.as_ref(), 16, 20, &mut rng(3));
        let p = dir.path().join(format!("{name}.mlvg"));
        f.save(&p)?;
        let back = FrozenBlockFile::load(&p)?;
        blocks_ok &= back.to_container()?.encode()? == f.to_container()?.encode()?
            && back.tensors.iter().zip(&f.tensors).all(|(a, b)| a.0 == b.0 && bitwise(&a.1, &b.1));
    }
    checks.push(("frozen blocks", blocks_ok));

    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} formats exact: {}", checks.len(), checks.iter().map(|c| c.0).collect::<Vec<_>>().join(", "))
        } else {
            format!("mismatch in {}", failed.join(", "))
        },
    )
}

fn main() {
    assert!(CountingAlloc::is_installed());
    let data = match generate_synthetic(&fixture_spec()) {
        Ok(d) => d.samples,
        Err(e) => {
            println!("[FAIL] fixture generation: {e}");
            std::process::exit(1);
        }
    };
    let mut full0 = None;
    let scaling = criterion("scaling shape", scaling_shape);
    let results = [
        criterion("ssm form equivalence", ssm_form_equivalence),
        criterion("parallel scan equivalence", parallel_scan_equivalence),
        criterion("gradient suite", gradient_suite),
        criterion("freeze invariant", || freeze_invariant(&data)),
        criterion("gating and residual identities", gating_identities),
        scaling,
        criterion("overfit fixture", || overfit_fixture(&data, &mut full0)),
        criterion("metrics oracle suite", metrics_oracles),
        criterion("ablation direction", || ablation_direction(&data, full0.take())),
        criterion("serialization round trips", serialization),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
