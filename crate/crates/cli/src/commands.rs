use std::fmt::Write as _;
use std::path::Path;

use mlvtg::bench::{run_bench, BenchConfig, BenchRegistry};
use mlvtg::checkpoint::{config_path, load_checkpoint};
use mlvtg::data::{generate_synthetic, read_dataset, write_bytes_atomic, write_dataset, RunConfig, SynthSpec};
use mlvtg::metrics::evaluate;
use mlvtg::model::{default_surrogate, Model, Registries, TAP_NAMES};
use mlvtg::numerics::Tensor;
use mlvtg::refiner::FrozenBlockFile;
use mlvtg::train::{run_training, Trainer, CHECKPOINT_FILE, LOG_FILE};
use mlvtg::{Error, Result};
use serde_json::json;

use crate::manifest::write_manifest;
use crate::{
    BenchArgs, Cli, Command, ConfigOverrides, EvalArgs, GenDataArgs, InspectArgs, SurrogateArgs, TrainArgs,
};

pub const SURROGATE_FILE: &str = "frozen_block.mlvg";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::MakeSurrogate(a) => make_surrogate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Inspect(a) => inspect(cli, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes_atomic(path, text.as_bytes())
}

/// The run config from `--config` (or defaults) with `--seed` applied.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = &self.gate {
            cfg.gate = v.clone();
        }
        if let Some(v) = &self.ssm_mode {
            cfg.ssm_mode = v.clone();
        }
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.blocks {
            cfg.blocks = v;
        }
        if self.no_aligner {
            cfg.use_aligner = false;
        }
        if self.no_refiner {
            cfg.use_refiner = false;
        }
    }

    /// True when anything other than `--epochs` was given.
    fn touches_model(&self) -> bool {
        self.lr.is_some()
            || self.batch_size.is_some()
            || self.dropout.is_some()
            || self.gate.is_some()
            || self.ssm_mode.is_some()
            || self.d_model.is_some()
            || self.blocks.is_some()
            || self.no_aligner
            || self.no_refiner
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let file_cfg = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let defaults = SynthSpec::default();
    let seed = cli.seed.or(file_cfg.as_ref().map(|c| c.seed)).unwrap_or(defaults.seed);
    let clip_len = file_cfg.as_ref().map_or(defaults.clip_len, |c| 1.0 / c.fps);
    let spec = SynthSpec {
        n_samples: a.n_samples,
        video_len: a.video_len,
        query_len: a.query_len,
        d_video: a.d_video,
        d_query: a.d_query,
        n_concepts: a.n_concepts,
        signal_strength: a.signal_strength,
        clip_len,
        seed,
    };
    let ds = generate_synthetic(&spec)?;
    create_dir(&a.out_dir)?;
    write_dataset(&a.out_dir, &ds.samples)?;
    write_text(&a.out_dir.join("synth_spec.json"), &serde_json::to_string_pretty(&spec)?)?;
    let mut files = vec!["annotations.jsonl".to_string(), "synth_spec.json".to_string()];
    for s in &ds.samples {
        files.push(format!("features/{}_v.mlvf", s.sample_id));
        files.push(format!("features/{}_q.mlvf", s.sample_id));
    }
    eprintln!("wrote {} samples to {}", ds.samples.len(), a.out_dir.display());
    write_manifest(&a.out_dir, "gen-data", seed, &files)
}

fn make_surrogate(cli: &Cli, a: &SurrogateArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(v) = &a.arch {
        cfg.frozen_arch = v.clone();
    }
    if let Some(v) = a.d_llm {
        cfg.d_llm = v;
    }
    if let Some(v) = a.layer_index {
        cfg.layer_index = v;
    }
    if cfg.d_llm == 0 {
        return Err(Error::Invalid("d_llm must be positive".into()));
    }
    let file = default_surrogate(&cfg, &Registries::default().archs)?;
    create_dir(&a.out_dir)?;
    file.save(&a.out_dir.join(SURROGATE_FILE))?;
    write_manifest(&a.out_dir, "make-surrogate", cfg.seed, &[SURROGATE_FILE.to_string()])
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let reg = Registries::default();
    let data = read_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            if a.overrides.touches_model() || a.frozen.is_some() || cli.config.is_some() || cli.seed.is_some() {
                return Err(Error::Invalid(
                    "a resumed run takes its config from the checkpoint; only --epochs may be given".into(),
                ));
            }
            let mut t = load_checkpoint(ckpt, &reg)?;
            if let Some(e) = a.overrides.epochs {
                t.model.cfg.epochs = e;
            }
            t
        }
        None => {
            let mut cfg = base_config(cli)?;
            a.overrides.apply(&mut cfg);
            let frozen = a.frozen.as_deref().map(FrozenBlockFile::load).transpose()?;
            if let Some(f) = &frozen {
                cfg.frozen_arch = reg.archs.by_tag(f.arch_tag)?.name().to_string();
                cfg.d_llm = f.d_llm;
                cfg.layer_index = f.layer_index;
            }
            let (dv, dq) = (data[0].video.cols(), data[0].query.cols());
            Trainer::new(Model::new(&cfg, dv, dq, frozen.as_ref(), &reg)?)
        }
    };
    for s in &data {
        trainer.model.check_sample(s)?;
    }
    let epochs = trainer.model.cfg.epochs as u64;
    let seed = trainer.model.cfg.seed;
    let result = run_training(&mut trainer, &data, &a.out_dir, epochs, |t| {
        eprintln!("epoch {}/{epochs} step {}", t.epoch, t.step);
        Ok(())
    });
    if trainer.no_foreground > 0 {
        eprintln!("warning: {} samples had no foreground clip", trainer.no_foreground);
    }
    // The last good checkpoint is listed even when training aborts.
    let ckpt = a.out_dir.join(CHECKPOINT_FILE);
    let cfg_name = config_path(Path::new(CHECKPOINT_FILE)).display().to_string();
    let files: Vec<String> = [CHECKPOINT_FILE.to_string(), cfg_name, LOG_FILE.to_string()]
        .into_iter()
        .filter(|f| a.out_dir.join(f).exists())
        .collect();
    if ckpt.exists() {
        write_manifest(&a.out_dir, "train", seed, &files)?;
    }
    result.map(|_| ())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut trainer = load_checkpoint(&a.checkpoint, &Registries::default())?;
    let cfg = &mut trainer.model.cfg;
    if let Some(p) = &cli.config {
        let file = RunConfig::load(p)?;
        cfg.nms_iou = file.nms_iou;
        cfg.top_k = file.top_k;
        cfg.very_good = file.very_good;
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    let very_good = cfg.very_good;
    let data = read_dataset(&a.data)?;
    let records = trainer.model.eval_records(&data)?;
    let report = evaluate(&records, very_good);
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    let mut lines = String::new();
    for r in &records {
        let line = json!({
            "query_id": r.query_id,
            "predictions": r.predictions,
            "pred_saliency": r.pred_saliency,
        });
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    write_text(&a.out_dir.join("predictions.jsonl"), &lines)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_manifest(
        &a.out_dir,
        "eval",
        seed,
        &["metrics.json".to_string(), "predictions.jsonl".to_string()],
    )
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<BenchConfig>(&text)?
        }
        None => BenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = &a.lengths {
        cfg.lengths = v.clone();
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = a.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = &a.components {
        cfg.components = v.clone();
    }
    let report = run_bench(&cfg, &BenchRegistry::builtin(), |row| {
        eprintln!("{:>20} L={:<6} median {:.3} ms", row.component, row.l, row.median_ms);
    })?;
    let summary = report.summary()?;
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("bench.csv"), &report.csv())?;
    write_text(&a.out_dir.join("bench_report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&a.out_dir.join("bench_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    for f in &summary.fits {
        println!(
            "{}: time slope {:.3}, memory slope {:.3}, peak {} bytes at L={}",
            f.component, f.time_slope, f.memory_slope, f.peak_bytes_at_largest, f.largest_l
        );
    }
    let files = ["bench.csv", "bench_report.json", "bench_summary.json"].map(String::from);
    write_manifest(&a.out_dir, "bench", cfg.seed, &files)
}

/// Row-per-line CSV with shortest round-trip formatting.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        for (j, v) in t.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint, &Registries::default())?;
    let seed = cli.seed.unwrap_or(trainer.model.cfg.seed);
    let data = read_dataset(&a.data)?;
    let sample = data
        .iter()
        .find(|s| s.sample_id == a.sample_id)
        .ok_or_else(|| Error::Load(format!("no sample `{}` in {}", a.sample_id, a.data.display())))?;
    let taps = trainer.model.taps(sample)?;
    let sims = trainer.model.similarity_taps(sample)?;
    create_dir(&a.out_dir)?;
    let mut files = Vec::new();
    for ((name, (q, v)), sim) in TAP_NAMES.iter().zip(&taps).zip(&sims) {
        for (file, t) in [
            (format!("sim_{name}.csv"), sim),
            (format!("tap_{name}_query.csv"), q),
            (format!("tap_{name}_video.csv"), v),
        ] {
            write_text(&a.out_dir.join(&file), &matrix_csv(t))?;
            files.push(file);
        }
    }
    eprintln!(
        "{}: {}×{} similarity at {}",
        sample.sample_id,
        sims[0].rows(),
        sims[0].cols(),
        TAP_NAMES.join(", ")
    );
    write_manifest(&a.out_dir, "inspect", seed, &files)
}
