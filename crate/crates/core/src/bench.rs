//! Time and peak-allocation benchmark of the aligner block against a
//! single-head softmax attention layer across sequence lengths.
//!
//! Peak bytes come from [`CountingAlloc`], which the host binary must
//! install as its `#[global_allocator]`; [`run_bench`] refuses to run
//! otherwise.

use std::alloc::{GlobalAlloc, Layout, System};
use std::hint::black_box;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerBlock, AlignerConfig, Gate, GateRegistry};
use crate::error::{Error, Result};
use crate::numerics::kernels::{matmul_a_bt, softmax_rows_inplace};
use crate::numerics::{matmul, randn, Graph, ParamStore, Tensor};
use crate::ssm::{ScanRegistry, ScanStrategy};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator that tracks live and peak heap bytes.
pub struct CountingAlloc;

fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

impl CountingAlloc {
    pub fn current() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    pub fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current level and returns it.
    pub fn reset_peak() -> usize {
        let now = CURRENT.load(Ordering::Relaxed);
        PEAK.store(now, Ordering::Relaxed);
        now
    }

    /// Whether this allocator is the process's global allocator.
    pub fn is_installed() -> bool {
        let before = Self::current();
        let v: Vec<u8> = black_box(Vec::with_capacity(4096));
        let during = Self::current();
        drop(v);
        during >= before + 4096
    }
}

pub trait BenchComponent {
    fn name(&self) -> &'static str;
    /// `[L×D] → [L×D]`.
    fn forward(&self, z: &Tensor) -> Result<Tensor>;
}

/// `softmax(QKᵀ/√D)·V` with learned projections; materializes the full
/// `L×L` score matrix.
#[derive(Debug, Clone)]
pub struct AttentionBaseline {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionBaseline {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            wq: randn([d, d], std, rng),
            wk: randn([d, d], std, rng),
            wv: randn([d, d], std, rng),
        }
    }

    fn dims(&self, z: &Tensor) -> Result<usize> {
        let [_, d] = z.dims2("attention")?;
        if d != self.wq.rows() {
            return Err(Error::Dimension {
                op: "attention",
                left: z.shape().to_vec(),
                right: self.wq.shape().to_vec(),
            });
        }
        Ok(d)
    }

    /// Row-stochastic attention matrix, `[L×L]`.
    pub fn weights(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.dims(z)?;
        let q = matmul(z, &self.wq)?;
        let k = matmul(z, &self.wk)?;
        let mut s = matmul_a_bt(&q, &k)?;
        let scale = 1.0 / (d as f64).sqrt();
        let l = s.rows();
        s.data_mut().iter_mut().for_each(|v| *v *= scale);
        softmax_rows_inplace(s.data_mut(), l);
        Ok(s)
    }
}

impl BenchComponent for AttentionBaseline {
    fn name(&self) -> &'static str {
        "attention_baseline"
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let a = self.weights(z)?;
        let v = matmul(z, &self.wv)?;
        matmul(&a, &v)
    }
}

/// One aligner block evaluated without a gradient tape.
pub struct AlignerBlockBench {
    store: ParamStore,
    block: AlignerBlock,
    scan: Arc<dyn ScanStrategy>,
    gate: Arc<dyn Gate>,
}

impl AlignerBlockBench {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cfg = AlignerConfig {
            d_model: d,
            d_inner: 2 * d,
            d_state: 8,
            conv_width: 3,
            blocks: 1,
        };
        let mut store = ParamStore::new();
        let block = AlignerBlock::new(&mut store, "bench", &cfg, rng)?;
        Ok(Self {
            store,
            block,
            scan: ScanRegistry::builtin().get("selective_recurrent")?,
            gate: GateRegistry::builtin().get("silu")?,
        })
    }
}

impl BenchComponent for AlignerBlockBench {
    fn name(&self) -> &'static str {
        "aligner_block"
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let x = g.constant(z.clone());
        let y = self.block.forward(&mut g, &self.store, &self.scan, self.gate.as_ref(), x)?;
        Ok(g.value(y).clone())
    }
}

pub type BenchFactory = fn(d: usize, seed: u64) -> Result<Box<dyn BenchComponent>>;

#[derive(Clone)]
pub struct BenchRegistry {
    entries: Vec<(&'static str, BenchFactory)>,
}

impl Default for BenchRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

fn make_aligner(d: usize, seed: u64) -> Result<Box<dyn BenchComponent>> {
    Ok(Box::new(AlignerBlockBench::new(d, &mut ChaCha8Rng::seed_from_u64(seed))?))
}

fn make_attention(d: usize, seed: u64) -> Result<Box<dyn BenchComponent>> {
    Ok(Box::new(AttentionBaseline::new(d, &mut ChaCha8Rng::seed_from_u64(seed))))
}

impl BenchRegistry {
    pub fn builtin() -> Self {
        Self {
            entries: vec![("aligner_block", make_aligner), ("attention_baseline", make_attention)],
        }
    }

    pub fn register(&mut self, name: &'static str, factory: BenchFactory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, d: usize, seed: u64) -> Result<Box<dyn BenchComponent>> {
        let (_, f) = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Unknown {
                kind: "bench component",
                name: name.to_string(),
                known: self.names().join(", "),
            })?;
        f(d, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub d_model: usize,
    pub seed: u64,
    pub components: Vec<String>,
    /// Shortest timed sample; faster forwards are repeated inside one sample.
    pub min_sample_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096, 8192],
            repeats: 9,
            warmup: 3,
            d_model: 64,
            seed: 0,
            components: vec!["aligner_block".into(), "attention_baseline".into()],
            min_sample_ms: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub component: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub peak_bytes: u64,
    pub inner_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub threads_used: usize,
}

impl Environment {
    pub fn detect() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads_used: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Sorted by `(component, L)`.
    pub rows: Vec<BenchRow>,
    pub environment: Environment,
    pub config: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub component: String,
    pub time_slope: f64,
    pub memory_slope: f64,
    pub largest_l: usize,
    pub peak_bytes_at_largest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub fits: Vec<ComponentFit>,
    pub environment: Environment,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Invalid("slope fit needs ≥ 2 paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("component,L,median_ms,peak_bytes\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.component, r.l, r.median_ms, r.peak_bytes));
        }
        s
    }

    pub fn rows_for<'a>(&'a self, component: &'a str) -> impl Iterator<Item = &'a BenchRow> + 'a {
        self.rows.iter().filter(move |r| r.component == component)
    }

    pub fn summary(&self) -> Result<BenchSummary> {
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.component.as_str()).collect();
        names.dedup();
        let fits = names
            .into_iter()
            .map(|name| {
                let rows: Vec<&BenchRow> = self.rows_for(name).collect();
                let ls: Vec<f64> = rows.iter().map(|r| r.l as f64).collect();
                let ts: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
                let ms: Vec<f64> = rows.iter().map(|r| r.peak_bytes.max(1) as f64).collect();
                let last = rows.last().expect("component has rows");
                Ok(ComponentFit {
                    component: name.to_string(),
                    time_slope: loglog_slope(&ls, &ts)?,
                    memory_slope: loglog_slope(&ls, &ms)?,
                    largest_l: last.l,
                    peak_bytes_at_largest: last.peak_bytes,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BenchSummary {
            fits,
            environment: self.environment.clone(),
        })
    }
}

/// Times every configured component at every length on seeded random input.
/// Each row reports the median, p10 and p90 of `repeats` timed samples
/// taken after `warmup` untimed forwards, and the peak heap growth of one
/// forward.
pub fn run_bench(cfg: &BenchConfig, registry: &BenchRegistry, mut progress: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    if cfg.repeats < 5 || cfg.warmup < 1 {
        return Err(Error::Invalid(format!(
            "bench needs repeats ≥ 5 and warmup ≥ 1, got {} and {}",
            cfg.repeats, cfg.warmup
        )));
    }
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) || cfg.d_model == 0 {
        return Err(Error::Invalid("bench lengths and d_model must be positive".into()));
    }
    if !CountingAlloc::is_installed() {
        return Err(Error::Invalid("CountingAlloc is not the global allocator; peak bytes would be 0".into()));
    }
    let mut names = cfg.components.clone();
    names.sort();
    names.dedup();
    let mut lengths = cfg.lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    let mut rows = Vec::new();
    for name in &names {
        let comp = registry.build(name, cfg.d_model, cfg.seed)?;
        for &l in &lengths {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ l as u64);
            let z = randn([l, cfg.d_model], 1.0, &mut rng);

            let base = CountingAlloc::reset_peak();
            let out = comp.forward(&z)?;
            let peak = (CountingAlloc::peak() - base) as u64;
            if !out.is_finite() {
                return Err(Error::Numeric {
                    what: format!("{name} output at L={l}"),
                    step: 0,
                });
            }
            drop(out);

            let t0 = Instant::now();
            for _ in 0..cfg.warmup {
                black_box(comp.forward(black_box(&z))?);
            }
            let per_call_ms = t0.elapsed().as_secs_f64() * 1e3 / cfg.warmup as f64;
            let inner = if per_call_ms >= cfg.min_sample_ms {
                1
            } else {
                (cfg.min_sample_ms / per_call_ms.max(1e-6)).ceil() as usize
            };
            let mut samples = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                for _ in 0..inner {
                    black_box(comp.forward(black_box(&z))?);
                }
                samples.push(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
            }
            samples.sort_by(f64::total_cmp);
            let row = BenchRow {
                component: name.clone(),
                l,
                median_ms: percentile(&samples, 0.5),
                p10_ms: percentile(&samples, 0.1),
                p90_ms: percentile(&samples, 0.9),
                peak_bytes: peak,
                inner_iters: inner,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(BenchReport {
        rows,
        environment: Environment::detect(),
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Explicit double loop over query and key positions.
    fn attention_oracle(a: &AttentionBaseline, z: &Tensor) -> Tensor {
        let (l, d) = (z.rows(), z.cols());
        let proj = |w: &Tensor| {
            Tensor::from_fn([l, d], |k| {
                let (i, j) = (k / d, k % d);
                (0..d).map(|p| z.at2(i, p) * w.at2(p, j)).sum()
            })
        };
        let (q, kk, v) = (proj(&a.wq), proj(&a.wk), proj(&a.wv));
        let mut out = Tensor::zeros([l, d]);
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|p| q.at2(i, p) * kk.at2(j, p)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..l {
                for p in 0..d {
                    let cur = out.at2(i, p);
                    out.set2(i, p, cur + e[j] / total * v.at2(j, p));
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AttentionBaseline::new(3, &mut rng);
        let z = randn([4, 3], 1.0, &mut rng);
        let diff = a.forward(&z).unwrap().max_abs_diff(&attention_oracle(&a, &z));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AttentionBaseline::new(5, &mut rng);
        let z = randn([1, 5], 1.0, &mut rng);
        let want = matmul(&z, &a.wv).unwrap();
        assert!(a.forward(&z).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AttentionBaseline::new(4, &mut rng);
        let w = a.weights(&randn([9, 4], 3.0, &mut rng)).unwrap();
        for i in 0..9 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slope_of_power_law_is_its_exponent() {
        let xs = [512.0, 1024.0, 2048.0, 4096.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 1.7).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!((percentile(&v, 0.1), percentile(&v, 0.5), percentile(&v, 0.9)), (1.0, 5.0, 9.0));
    }

    #[test]
    fn registry_builds_both_components() {
        let reg = BenchRegistry::builtin();
        let z = randn([6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        for name in reg.names() {
            let c = reg.build(name, 8, 0).unwrap();
            assert_eq!(c.name(), name);
            assert_eq!(c.forward(&z).unwrap().shape(), &[6, 8]);
        }
        assert!(matches!(reg.build("mlp", 8, 0), Err(Error::Unknown { .. })));
    }

    #[test]
    fn run_bench_validates_its_preconditions() {
        let cfg = BenchConfig {
            repeats: 3,
            ..BenchConfig::default()
        };
        assert!(run_bench(&cfg, &BenchRegistry::builtin(), |_| {}).is_err());
    }
}
