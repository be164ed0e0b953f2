//! Trainable adapters around a frozen pre-trained block.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;
use std::path::Path;
use std::sync::Arc;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Section, VERSION_PLAIN};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, SsmLayer};
use crate::numerics::{randn, Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::{ScanRegistry, ScanStrategy, SsmMode};

/// Named parameter shapes and forward computation of a frozen block.
pub trait FrozenArchitecture: Send + Sync {
    fn name(&self) -> &'static str;
    /// Architecture tag stored in block files.
    fn tag(&self) -> u8;
    fn shapes(&self, d_llm: usize) -> Vec<(String, Vec<usize>)>;
    /// Seeded random weights standing in for real pre-trained ones.
    fn surrogate(&self, d_llm: usize, rng: &mut dyn rand::RngCore) -> Vec<(String, Tensor)>;
    fn forward(&self, g: &mut Graph, store: &ParamStore, block: &FrozenBlock, x: Var) -> Result<Var>;
}

/// `y = x + x·W + b`.
pub struct LinearResidual;

impl FrozenArchitecture for LinearResidual {
    fn name(&self) -> &'static str {
        "linear_residual"
    }

    fn tag(&self) -> u8 {
        1
    }

    fn shapes(&self, d: usize) -> Vec<(String, Vec<usize>)> {
        vec![("w".into(), vec![d, d]), ("b".into(), vec![d])]
    }

    fn surrogate(&self, d: usize, rng: &mut dyn rand::RngCore) -> Vec<(String, Tensor)> {
        vec![
            ("w".into(), randn([d, d], 0.5 / (d as f64).sqrt(), rng)),
            ("b".into(), randn([d], 0.05, rng)),
        ]
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, block: &FrozenBlock, x: Var) -> Result<Var> {
        let lin = Linear {
            w: block.id("w")?,
            b: Some(block.id("b")?),
        };
        let y = lin.forward(g, store, x)?;
        g.add(x, y)
    }
}

/// Pre-norm gated selective state-space block with an inner width of
/// `2·d_llm` and a residual connection.
pub struct MambaBlock;

const MAMBA_STATE: usize = 8;
const MAMBA_CONV: usize = 4;

impl FrozenArchitecture for MambaBlock {
    fn name(&self) -> &'static str {
        "mamba_block"
    }

    fn tag(&self) -> u8 {
        2
    }

    fn shapes(&self, d: usize) -> Vec<(String, Vec<usize>)> {
        let (di, n) = (2 * d, MAMBA_STATE);
        vec![
            ("norm.gain".into(), vec![d]),
            ("norm.bias".into(), vec![d]),
            ("in_x.w".into(), vec![d, di]),
            ("in_z.w".into(), vec![d, di]),
            ("conv".into(), vec![MAMBA_CONV, di]),
            ("ssm.a_log".into(), vec![di, n]),
            ("ssm.b".into(), vec![di, n]),
            ("ssm.c".into(), vec![di, n]),
            ("ssm.w_delta".into(), vec![di, di]),
            ("ssm.delta_bias".into(), vec![di]),
            ("ssm.w_b".into(), vec![di, n]),
            ("ssm.w_c".into(), vec![di, n]),
            ("out.w".into(), vec![di, d]),
        ]
    }

    fn surrogate(&self, d: usize, rng: &mut dyn rand::RngCore) -> Vec<(String, Tensor)> {
        let mut store = ParamStore::new();
        let di = 2 * d;
        let mut rng = rng;
        let ssm = SsmLayer::new(&mut store, "ssm", di, MAMBA_STATE, &mut rng).expect("fresh store");
        let ssm_names = ["a_log", "b", "c", "w_delta", "delta_bias", "w_b", "w_c"];
        let mut out: Vec<(String, Tensor)> = vec![
            ("norm.gain".into(), Tensor::ones([d])),
            ("norm.bias".into(), Tensor::zeros([d])),
            ("in_x.w".into(), randn([d, di], (1.0 / d as f64).sqrt(), &mut rng)),
            ("in_z.w".into(), randn([d, di], (1.0 / d as f64).sqrt(), &mut rng)),
            ("conv".into(), randn([MAMBA_CONV, di], 0.5, &mut rng)),
        ];
        for (name, id) in ssm_names.iter().zip(ssm.ids()) {
            out.push((format!("ssm.{name}"), store.value(id).clone()));
        }
        out.push(("out.w".into(), randn([di, d], 0.5 / (di as f64).sqrt(), &mut rng)));
        out
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, block: &FrozenBlock, x: Var) -> Result<Var> {
        let norm = LayerNorm {
            gain: block.id("norm.gain")?,
            bias: block.id("norm.bias")?,
        };
        let in_x = Linear {
            w: block.id("in_x.w")?,
            b: None,
        };
        let in_z = Linear {
            w: block.id("in_z.w")?,
            b: None,
        };
        let out = Linear {
            w: block.id("out.w")?,
            b: None,
        };
        let ssm = SsmLayer {
            a_log: block.id("ssm.a_log")?,
            b: block.id("ssm.b")?,
            c: block.id("ssm.c")?,
            w_delta: block.id("ssm.w_delta")?,
            delta_bias: block.id("ssm.delta_bias")?,
            w_b: block.id("ssm.w_b")?,
            w_c: block.id("ssm.w_c")?,
        };
        let h = norm.forward(g, store, x)?;
        let xi = in_x.forward(g, store, h)?;
        let z = in_z.forward(g, store, h)?;
        let kernel = g.param(store, block.id("conv")?);
        let xi = g.conv1d(xi, kernel, true)?;
        let xi = g.silu(xi);
        let y = ssm.forward(g, store, &block.scan, xi)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let y = out.forward(g, store, y)?;
        g.add(x, y)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenArch {
    LinearResidual,
    #[default]
    MambaBlock,
}

impl FrozenArch {
    pub fn name(self) -> &'static str {
        match self {
            FrozenArch::LinearResidual => "linear_residual",
            FrozenArch::MambaBlock => "mamba_block",
        }
    }
}

#[derive(Clone)]
pub struct ArchRegistry {
    entries: Vec<Arc<dyn FrozenArchitecture>>,
}

impl Default for ArchRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ArchRegistry {
    pub fn builtin() -> Self {
        Self {
            entries: vec![Arc::new(LinearResidual), Arc::new(MambaBlock)],
        }
    }

    pub fn register(&mut self, arch: Arc<dyn FrozenArchitecture>) {
        self.entries.retain(|a| a.name() != arch.name() && a.tag() != arch.tag());
        self.entries.push(arch);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|a| a.name()).collect()
    }

    fn known(&self) -> String {
        self.names().join(", ")
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FrozenArchitecture>> {
        self.entries
            .iter()
            .find(|a| a.name() == name)
            .cloned()
            .ok_or_else(|| Error::Unknown {
                kind: "frozen architecture",
                name: name.to_string(),
                known: self.known(),
            })
    }

    pub fn by_tag(&self, tag: u8) -> Result<Arc<dyn FrozenArchitecture>> {
        self.entries
            .iter()
            .find(|a| a.tag() == tag)
            .cloned()
            .ok_or_else(|| Error::Unknown {
                kind: "frozen architecture tag",
                name: tag.to_string(),
                known: self.known(),
            })
    }
}

/// Weights of a frozen block as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBlockFile {
    pub arch_tag: u8,
    pub d_llm: usize,
    pub layer_index: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl FrozenBlockFile {
    pub fn surrogate(arch: &dyn FrozenArchitecture, d_llm: usize, layer_index: u32, rng: &mut dyn rand::RngCore) -> Self {
        let tensors = arch
            .surrogate(d_llm, rng)
            .into_iter()
            .map(|(n, t)| (n, t.map(|v| v as f32 as f64)))
            .collect();
        Self {
            arch_tag: arch.tag(),
            d_llm,
            layer_index,
            tensors,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            version: VERSION_PLAIN,
            arch: self.arch_tag,
            d_llm: u32::try_from(self.d_llm).map_err(|_| Error::Invalid("d_llm exceeds u32".into()))?,
            layer_index: self.layer_index,
            sections: self
                .tensors
                .iter()
                .map(|(n, t)| Section::frozen_f32(n.clone(), t.clone()))
                .collect(),
        })
    }

    pub fn from_container(c: Container) -> Self {
        Self {
            arch_tag: c.arch,
            d_llm: c.d_llm as usize,
            layer_index: c.layer_index,
            tensors: c.sections.into_iter().map(|s| (s.name, s.tensor)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_container(Container::read(path)?))
    }

    /// Checks names and shapes against the architecture for `d_llm`.
    pub fn validate(&self, arch: &dyn FrozenArchitecture, expected_d_llm: Option<usize>) -> Result<()> {
        if let Some(d) = expected_d_llm {
            if d != self.d_llm {
                return Err(Error::Load(format!(
                    "frozen block has d_llm {}, expected {d}",
                    self.d_llm
                )));
            }
        }
        let want = arch.shapes(self.d_llm);
        let have: BTreeMap<&str, &[usize]> = self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        if have.len() != self.tensors.len() {
            return Err(Error::Load("frozen block has duplicate section names".into()));
        }
        for (name, shape) in &want {
            match have.get(name.as_str()) {
                None => return Err(Error::Load(format!("frozen block is missing section {name}"))),
                Some(s) if *s != shape.as_slice() => {
                    return Err(Error::Load(format!(
                        "frozen block section {name} has shape {s:?}, expected {shape:?}"
                    )))
                }
                _ => {}
            }
        }
        if want.len() != have.len() {
            let extra: Vec<_> = have.keys().filter(|k| !want.iter().any(|(n, _)| n == *k)).collect();
            return Err(Error::Load(format!("frozen block has unexpected sections {extra:?}")));
        }
        Ok(())
    }
}

/// A frozen block installed into a parameter store.
#[derive(Clone)]
pub struct FrozenBlock {
    pub arch: Arc<dyn FrozenArchitecture>,
    pub d_llm: usize,
    /// Provenance only; does not change computation.
    pub layer_index: u32,
    pub params: Vec<(String, ParamId)>,
    pub checksum: u64,
    scan: Arc<dyn ScanStrategy>,
}

impl fmt::Debug for FrozenBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrozenBlock")
            .field("arch", &self.arch.name())
            .field("d_llm", &self.d_llm)
            .field("layer_index", &self.layer_index)
            .field("checksum", &format_args!("{:016x}", self.checksum))
            .finish()
    }
}

pub const FROZEN_PREFIX: &str = "refiner.frozen.";

impl FrozenBlock {
    /// Adds the file's weights to `store` as frozen parameters.
    pub fn install(
        store: &mut ParamStore,
        file: &FrozenBlockFile,
        archs: &ArchRegistry,
        expected_d_llm: Option<usize>,
    ) -> Result<Self> {
        let arch = archs.by_tag(file.arch_tag).map_err(|e| Error::Load(e.to_string()))?;
        file.validate(arch.as_ref(), expected_d_llm)?;
        let params = file
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), store.add(format!("{FROZEN_PREFIX}{n}"), t.clone(), true)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut block = Self {
            arch,
            d_llm: file.d_llm,
            layer_index: file.layer_index,
            params,
            checksum: 0,
            scan: ScanRegistry::builtin().for_mode(SsmMode::SelectiveRecurrent)?,
        };
        block.checksum = block.current_checksum(store);
        Ok(block)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::Load(format!("frozen block has no parameter {name}")))
    }

    /// FNV-1a over names, shapes, frozen flags and exact f64 bits.
    pub fn current_checksum(&self, store: &ParamStore) -> u64 {
        let mut h = FnvHasher::default();
        for (name, id) in &self.params {
            let p = store.get(*id);
            h.write(name.as_bytes());
            h.write_u8(p.frozen as u8);
            for &e in p.value.shape() {
                h.write_u64(e as u64);
            }
            for &v in p.value.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// True iff every weight is still marked frozen and unchanged since load.
    pub fn verify_frozen(&self, store: &ParamStore) -> bool {
        self.params.iter().all(|(_, id)| store.get(*id).frozen) && self.current_checksum(store) == self.checksum
    }

    pub fn to_file(&self, store: &ParamStore) -> FrozenBlockFile {
        FrozenBlockFile {
            arch_tag: self.arch.tag(),
            d_llm: self.d_llm,
            layer_index: self.layer_index,
            tensors: self
                .params
                .iter()
                .map(|(n, id)| (n.clone(), store.value(*id).clone()))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.arch.forward(g, store, self, x)
    }
}

pub fn load_frozen_block(
    path: &Path,
    store: &mut ParamStore,
    archs: &ArchRegistry,
    expected_d_llm: Option<usize>,
) -> Result<FrozenBlock> {
    let file = FrozenBlockFile::load(path)?;
    FrozenBlock::install(store, &file, archs, expected_d_llm)
}

/// `F_L2(F_frozen(F_L1(Z)))`, optionally added to `Z`.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub l1: Linear,
    pub block: FrozenBlock,
    pub l2: Linear,
    pub residual: bool,
}

impl Refiner {
    pub fn new(store: &mut ParamStore, d_model: usize, block: FrozenBlock, residual: bool, rng: &mut impl Rng) -> Result<Self> {
        let d_llm = block.d_llm;
        Ok(Self {
            l1: Linear::init(store, "refiner.l1", d_model, d_llm, true, rng)?,
            l2: Linear::new(store, "refiner.l2", d_llm, d_model, true, 0.02, rng)?,
            block,
            residual,
        })
    }

    pub fn refine(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, z)?;
        let h = self.block.forward(g, store, h)?;
        let out = self.l2.forward(g, store, h)?;
        if self.residual {
            g.add(z, out)
        } else {
            Ok(out)
        }
    }

    pub fn verify_frozen(&self, store: &ParamStore) -> bool {
        self.block.verify_frozen(store)
    }
}
