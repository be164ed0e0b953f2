//! Training checkpoints in the flagged `MLVG` container: every parameter
//! (trainable ones as exact f64, frozen ones as f32 like the frozen-block
//! file), Adam moments under `adam.m.*`/`adam.v.*`, counters under `meta.*`,
//! and the run config as JSON next to the file.

use std::path::{Path, PathBuf};

use crate::container::{Container, Dtype, Section, VERSION_FLAGGED};
use crate::data::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Registries};
use crate::numerics::Tensor;
use crate::refiner::{FrozenBlockFile, FROZEN_PREFIX};
use crate::train::Trainer;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const META: [&str; 4] = ["meta.step", "meta.epoch", "meta.adam_step", "meta.no_foreground"];

/// `checkpoint.mlvg` → `checkpoint.json`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn exact(name: String, tensor: Tensor) -> Section {
    Section {
        name,
        tensor,
        trainable: false,
        dtype: Dtype::F64,
    }
}

pub fn to_container(t: &Trainer) -> Container {
    let store = &t.model.store;
    let mut sections: Vec<Section> = store
        .iter()
        .map(|(_, p)| Section {
            name: p.name.clone(),
            tensor: p.value.clone(),
            trainable: !p.frozen,
            dtype: if p.frozen { Dtype::F32 } else { Dtype::F64 },
        })
        .collect();
    for (id, m, v) in t.opt.moments() {
        let name = &store.get(id).name;
        sections.push(exact(format!("{ADAM_M}{name}"), m.clone()));
        sections.push(exact(format!("{ADAM_V}{name}"), v.clone()));
    }
    let counters = [t.step, t.epoch, t.opt.steps_taken(), t.no_foreground];
    for (name, v) in META.iter().zip(counters) {
        sections.push(exact(name.to_string(), Tensor::scalar(v as f64)));
    }
    let block = t.model.refiner.as_ref().map(|r| &r.block);
    Container {
        version: VERSION_FLAGGED,
        arch: block.map_or(0, |b| b.arch.tag()),
        d_llm: block.map_or(0, |b| b.d_llm as u32),
        layer_index: block.map_or(0, |b| b.layer_index),
        sections,
    }
}

/// Writes the container and its config atomically, config last.
pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    let bytes = to_container(t).encode()?;
    crate::data::write_bytes_atomic(path, &bytes)?;
    t.model.cfg.save(&config_path(path))
}

fn counter(c: &Container, name: &str) -> Result<u64> {
    let s = c
        .section(name)
        .ok_or_else(|| Error::Load(format!("checkpoint lacks {name}")))?;
    let v = s.tensor.data().first().copied().unwrap_or(f64::NAN);
    if s.tensor.len() != 1 || v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Load(format!("{name} is not a counter")));
    }
    Ok(v as u64)
}

pub fn from_container(c: &Container, cfg: &RunConfig, reg: &Registries) -> Result<Trainer> {
    let (d_video, d_query) = match (cfg.d_video, cfg.d_query) {
        (Some(v), Some(q)) => (v, q),
        _ => return Err(Error::Load("checkpoint config lacks feature widths".into())),
    };
    let frozen = cfg.use_refiner.then(|| FrozenBlockFile {
        arch_tag: c.arch,
        d_llm: c.d_llm as usize,
        layer_index: c.layer_index,
        tensors: c
            .sections
            .iter()
            .filter_map(|s| s.name.strip_prefix(FROZEN_PREFIX).map(|n| (n.to_string(), s.tensor.clone())))
            .collect(),
    });
    let model = Model::new(cfg, d_video, d_query, frozen.as_ref(), reg)?;
    let mut t = Trainer::new(model);
    let mut seen = 0;
    let ids: Vec<_> = t.model.store.ids().collect();
    for id in ids {
        let p = t.model.store.get(id);
        let s = c
            .section(&p.name)
            .ok_or_else(|| Error::Load(format!("checkpoint lacks parameter {}", p.name)))?;
        if s.tensor.shape() != p.value.shape() {
            return Err(Error::Load(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                p.name,
                s.tensor.shape(),
                p.value.shape()
            )));
        }
        if s.trainable == p.frozen {
            return Err(Error::Load(format!("parameter {}: trainable flag disagrees with the model", p.name)));
        }
        let value = s.tensor.clone();
        t.model.store.get_mut(id).value = value;
        seen += 1;
    }
    let mut moments = Vec::new();
    for s in &c.sections {
        if let Some(name) = s.name.strip_prefix(ADAM_M) {
            let id = t
                .model
                .store
                .id(name)
                .ok_or_else(|| Error::Load(format!("moment for unknown parameter {name}")))?;
            let v = c
                .section(&format!("{ADAM_V}{name}"))
                .ok_or_else(|| Error::Load(format!("missing second moment of {name}")))?;
            moments.push((id, s.tensor.clone(), v.tensor.clone()));
        } else if !(s.name.starts_with(ADAM_V) || META.contains(&s.name.as_str())) {
            if t.model.store.id(&s.name).is_none() {
                return Err(Error::Load(format!("checkpoint has unexpected section {}", s.name)));
            }
        }
    }
    debug_assert_eq!(seen, t.model.store.len());
    t.opt.restore(counter(c, "meta.adam_step")?, moments);
    t.step = counter(c, "meta.step")?;
    t.epoch = counter(c, "meta.epoch")?;
    t.no_foreground = counter(c, "meta.no_foreground")?;
    if !t.model.verify_frozen() {
        return Err(Error::Load("restored frozen block fails verification".into()));
    }
    Ok(t)
}

pub fn load_checkpoint(path: &Path, reg: &Registries) -> Result<Trainer> {
    let cfg = RunConfig::load(&config_path(path))?;
    let c = Container::read(path)?;
    from_container(&c, &cfg, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn setup(use_refiner: bool) -> (Trainer, Vec<crate::data::GroundingSample>) {
        let cfg = RunConfig {
            d_model: 8,
            d_inner: 8,
            blocks: 1,
            d_state: 2,
            d_llm: 8,
            max_len: 32,
            batch_size: 2,
            lr: 1e-3,
            use_refiner,
            ..RunConfig::default()
        };
        let data = generate_synthetic(&SynthSpec {
            n_samples: 4,
            d_video: 5,
            d_query: 4,
            video_len: (6, 9),
            query_len: (2, 3),
            ..SynthSpec::default()
        })
        .unwrap()
        .samples;
        let model = Model::new(&cfg, 5, 4, None, &Registries::default()).unwrap();
        (Trainer::new(model), data)
    }

    #[test]
    fn round_trip_restores_exact_state() {
        for use_refiner in [true, false] {
            let (mut t, data) = setup(use_refiner);
            t.run_epoch(&data, |_| Ok(())).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.mlvg");
            save_checkpoint(&path, &t).unwrap();
            let back = load_checkpoint(&path, &Registries::default()).unwrap();
            assert_eq!((back.step, back.epoch), (t.step, t.epoch));
            for (id, p) in t.model.store.iter() {
                assert_eq!(back.model.store.get(id).value, p.value, "{}", p.name);
                assert_eq!(back.model.store.get(id).frozen, p.frozen);
            }
            let a: Vec<_> = t.opt.moments().map(|(i, m, v)| (i, m.clone(), v.clone())).collect();
            let b: Vec<_> = back.opt.moments().map(|(i, m, v)| (i, m.clone(), v.clone())).collect();
            assert_eq!(a, b);
            assert_eq!(to_container(&back).encode().unwrap(), std::fs::read(&path).unwrap());
        }
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let (t, _) = setup(true);
        let c = to_container(&t);
        let cfg = RunConfig {
            d_video: Some(6),
            ..t.model.cfg.clone()
        };
        match from_container(&c, &cfg, &Registries::default()) {
            Err(Error::Load(m)) => assert!(m.contains("frontend.video"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
