//! Learner archetypes and their knowledge addressing.
//!
//! Fast and detailed learners are VGG-style stacks described by triplets
//! `(step, modules, dim)`; organized learners are bottleneck-residual stacks
//! described by a stem triplet plus hierarchical triplets
//! `(step, 1..blocks, (c, d, e))`. Every convolution belongs to exactly one
//! addressable knowledge module, which is the unit of crossover.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColonyError, Result};
use crate::nn::{
    BatchNorm, Conv2d, ConvGeom, LayerSpec, Linear, Network, ParameterBlock, Projection, Scalar,
    Tensor,
};
use crate::seed;

pub const INPUT_SHAPE: [usize; 3] = [1, 32, 32];
pub const CLASSES: usize = 10;
pub const DEFAULT_WIDTH: f64 = 0.125;
/// Hidden width of the VGG-style classifier head.
pub const HEAD_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchetypeKind {
    Fast,
    Detailed,
    Organized,
}

impl ArchetypeKind {
    pub const ALL: [ArchetypeKind; 3] = [
        ArchetypeKind::Fast,
        ArchetypeKind::Detailed,
        ArchetypeKind::Organized,
    ];

    /// Model type code used in family records (VGG16 / VGG19 / ResNet50).
    pub fn code(self) -> u16 {
        match self {
            ArchetypeKind::Fast => 16,
            ArchetypeKind::Detailed => 19,
            ArchetypeKind::Organized => 50,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        ArchetypeKind::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchetypeKind::Fast => "fast",
            ArchetypeKind::Detailed => "detailed",
            ArchetypeKind::Organized => "organized",
        }
    }
}

impl fmt::Display for ArchetypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchetypeKind {
    type Err = ColonyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fast" | "16" | "vgg16" => Ok(ArchetypeKind::Fast),
            "detailed" | "19" | "vgg19" => Ok(ArchetypeKind::Detailed),
            "organized" | "50" | "resnet50" => Ok(ArchetypeKind::Organized),
            other => Err(ColonyError::Input(format!("unknown archetype {other}"))),
        }
    }
}

/// `(a, b, c)`: learning step, module count (or index), knowledge dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub a: u8,
    pub b: u8,
    pub c: u32,
}

impl Triplet {
    pub const fn new(a: u8, b: u8, c: u32) -> Self {
        Triplet { a, b, c }
    }
}

/// `(a, 1..blocks, (c, d, e))` for one residual learning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualStage {
    pub a: u8,
    pub blocks: u8,
    pub dims: [u32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Topology {
    Plain(Vec<Triplet>),
    Residual {
        stem: Triplet,
        stages: Vec<ResidualStage>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub kind: ArchetypeKind,
    pub topology: Topology,
    pub width: f64,
    pub input: [usize; 3],
    pub classes: usize,
}

const FAST: [Triplet; 5] = [
    Triplet::new(1, 2, 64),
    Triplet::new(2, 2, 128),
    Triplet::new(3, 3, 256),
    Triplet::new(4, 3, 512),
    Triplet::new(5, 3, 512),
];

const DETAILED: [Triplet; 5] = [
    Triplet::new(1, 2, 64),
    Triplet::new(2, 2, 128),
    Triplet::new(3, 4, 256),
    Triplet::new(4, 4, 512),
    Triplet::new(5, 4, 512),
];

const ORGANIZED_STEM: Triplet = Triplet::new(1, 2, 64);
const ORGANIZED: [ResidualStage; 4] = [
    ResidualStage { a: 2, blocks: 3, dims: [64, 64, 256] },
    ResidualStage { a: 3, blocks: 4, dims: [128, 128, 512] },
    ResidualStage { a: 4, blocks: 6, dims: [256, 256, 1024] },
    ResidualStage { a: 5, blocks: 3, dims: [512, 512, 2048] },
];

pub fn check_width(width: f64) -> Result<()> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(ColonyError::Config(format!("width {width} outside (0, 1]")));
    }
    Ok(())
}

/// Channel count for knowledge dimension `c` at width `w`: `max(8, round(c·w))`.
pub fn channels(c: u32, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(8)
}

pub fn spec_for(kind: ArchetypeKind, width: f64) -> Result<ArchetypeSpec> {
    check_width(width)?;
    let topology = match kind {
        ArchetypeKind::Fast => Topology::Plain(FAST.to_vec()),
        ArchetypeKind::Detailed => Topology::Plain(DETAILED.to_vec()),
        ArchetypeKind::Organized => Topology::Residual {
            stem: ORGANIZED_STEM,
            stages: ORGANIZED.to_vec(),
        },
    };
    Ok(ArchetypeSpec {
        kind,
        topology,
        width,
        input: INPUT_SHAPE,
        classes: CLASSES,
    })
}

impl ArchetypeSpec {
    pub fn triplets(&self) -> Option<&[Triplet]> {
        match &self.topology {
            Topology::Plain(t) => Some(t),
            Topology::Residual { .. } => None,
        }
    }

    /// Number of main-path convolutions (projection shortcuts excluded).
    pub fn conv_layer_count(&self) -> usize {
        match &self.topology {
            Topology::Plain(t) => t.iter().map(|t| t.b as usize).sum(),
            Topology::Residual { stages, .. } => {
                1 + stages.iter().map(|s| 3 * s.blocks as usize).sum::<usize>()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Addresses

/// Canonical knowledge address: `"3.3.256"` or `"4.2.(-,256,-)"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum KnowledgeAddress {
    Plain { step: u8, module: u8, dim: u32 },
    Residual { step: u8, block: u8, dims: [Option<u32>; 3] },
}

impl KnowledgeAddress {
    pub fn plain(step: u8, module: u8, dim: u32) -> Self {
        KnowledgeAddress::Plain { step, module, dim }
    }

    pub fn residual(step: u8, block: u8, dims: [Option<u32>; 3]) -> Self {
        KnowledgeAddress::Residual { step, block, dims }
    }

    pub fn step(&self) -> u8 {
        match self {
            KnowledgeAddress::Plain { step, .. } | KnowledgeAddress::Residual { step, .. } => *step,
        }
    }

    /// Module index within the step (or residual block index).
    pub fn ordinal(&self) -> u8 {
        match self {
            KnowledgeAddress::Plain { module, .. } => *module,
            KnowledgeAddress::Residual { block, .. } => *block,
        }
    }
}

impl fmt::Display for KnowledgeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnowledgeAddress::Plain { step, module, dim } => write!(f, "{step}.{module}.{dim}"),
            KnowledgeAddress::Residual { step, block, dims } => {
                let d: Vec<String> = dims
                    .iter()
                    .map(|d| d.map_or_else(|| "-".to_string(), |v| v.to_string()))
                    .collect();
                write!(f, "{step}.{block}.({})", d.join(","))
            }
        }
    }
}

impl From<KnowledgeAddress> for String {
    fn from(a: KnowledgeAddress) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for KnowledgeAddress {
    type Error = ColonyError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for KnowledgeAddress {
    type Err = ColonyError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ColonyError::Address(format!("malformed knowledge address {s:?}"));
        let compact: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| if c == '\u{2212}' { '-' } else { c })
            .collect();
        // tuple form: (a, b, c) or (a, b, (c, d, e))
        let body = match compact.strip_prefix('(').and_then(|b| b.strip_suffix(')')) {
            Some(b) => b.replacen(',', ".", 2),
            None => compact,
        };
        let mut parts = body.splitn(3, '.');
        let step: u8 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let ordinal: u8 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let rest = parts.next().ok_or_else(bad)?;
        if let Some(inner) = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
            let dims: Vec<Option<u32>> = inner
                .split(',')
                .map(|d| match d {
                    "-" => Ok(None),
                    v => v.parse().map(Some).map_err(|_| bad()),
                })
                .collect::<Result<_>>()?;
            let dims: [Option<u32>; 3] = dims.try_into().map_err(|_| bad())?;
            Ok(KnowledgeAddress::Residual { step, block: ordinal, dims })
        } else {
            let dim = rest.parse().map_err(|_| bad())?;
            Ok(KnowledgeAddress::Plain { step, module: ordinal, dim })
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitPosition {
    /// The single convolution of a plain module (or the residual stem).
    Single,
    /// Position 0, 1 or 2 inside a bottleneck.
    Bottleneck(u8),
    Projection,
}

/// One convolution with its bias and attached batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvUnit {
    pub position: UnitPosition,
    pub geom: ConvGeom,
    /// Unscaled input/output knowledge dimensions.
    pub knowledge_dims: (u32, u32),
    pub weight: String,
    pub bias: Option<String>,
    pub bn: Option<BatchNorm>,
}

impl ConvUnit {
    /// Trainable block ids owned by this unit.
    pub fn block_ids(&self) -> Vec<String> {
        let mut ids = vec![self.weight.clone()];
        ids.extend(self.bias.clone());
        if let Some(bn) = &self.bn {
            ids.push(bn.gamma.clone());
            ids.push(bn.beta.clone());
        }
        ids
    }

    pub fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(self.weight.clone(), self.geom.weight_shape())];
        if let Some(b) = &self.bias {
            out.push((b.clone(), vec![self.geom.out_ch]));
        }
        if let Some(bn) = &self.bn {
            out.push((bn.gamma.clone(), vec![bn.channels]));
            out.push((bn.beta.clone(), vec![bn.channels]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeModule {
    pub address: KnowledgeAddress,
    /// The module named by its step's triplet: the closing module of a plain
    /// step, the first identity block of a residual step.
    pub anchor: bool,
    pub units: Vec<ConvUnit>,
}

impl KnowledgeModule {
    pub fn block_ids(&self) -> Vec<String> {
        self.units.iter().flat_map(ConvUnit::block_ids).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcEntry {
    pub name: String,
    pub weight: String,
    pub bias: String,
    pub shape: [usize; 2],
}

/// Partition of a network's parameter blocks into knowledge modules
/// (step-major, module-minor) and the fully-connected head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleManifest {
    pub modules: Vec<KnowledgeModule>,
    pub fully_connected: Vec<FcEntry>,
}

impl ModuleManifest {
    pub fn conv_block_ids(&self) -> Vec<String> {
        self.modules.iter().flat_map(KnowledgeModule::block_ids).collect()
    }

    pub fn fc_block_ids(&self) -> Vec<String> {
        self.fully_connected
            .iter()
            .flat_map(|f| [f.weight.clone(), f.bias.clone()])
            .collect()
    }

    pub fn module(&self, step: u8, ordinal: u8) -> Option<&KnowledgeModule> {
        self.modules
            .iter()
            .find(|m| m.address.step() == step && m.address.ordinal() == ordinal)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

struct Blueprint {
    layers: Vec<LayerSpec>,
    blocks: Vec<(String, Vec<usize>, Init)>,
    buffers: Vec<(String, usize)>,
    manifest: ModuleManifest,
}

impl Blueprint {
    fn new() -> Self {
        Blueprint {
            layers: Vec::new(),
            blocks: Vec::new(),
            buffers: Vec::new(),
            manifest: ModuleManifest {
                modules: Vec::new(),
                fully_connected: Vec::new(),
            },
        }
    }

    fn conv_unit(
        &mut self,
        prefix: &str,
        position: UnitPosition,
        geom: ConvGeom,
        knowledge_dims: (u32, u32),
        with_bias: bool,
        with_bn: bool,
    ) -> ConvUnit {
        let weight = format!("{prefix}.weight");
        let fan_in = geom.in_ch * geom.kernel * geom.kernel;
        self.blocks
            .push((weight.clone(), geom.weight_shape(), Init::HeUniform { fan_in }));
        let bias = with_bias.then(|| {
            let id = format!("{prefix}.bias");
            self.blocks.push((id.clone(), vec![geom.out_ch], Init::Zeros));
            id
        });
        let bn = with_bn.then(|| {
            let bn = BatchNorm::under(&format!("{prefix}.bn"), geom.out_ch);
            self.blocks.push((bn.gamma.clone(), vec![geom.out_ch], Init::Ones));
            self.blocks.push((bn.beta.clone(), vec![geom.out_ch], Init::Zeros));
            self.buffers.push((bn.running_mean.clone(), geom.out_ch));
            self.buffers.push((bn.running_var.clone(), geom.out_ch));
            bn
        });
        ConvUnit {
            position,
            geom,
            knowledge_dims,
            weight,
            bias,
            bn,
        }
    }

    fn push_conv(&mut self, unit: &ConvUnit) {
        self.layers.push(LayerSpec::Conv2d(Conv2d {
            geom: unit.geom,
            weight: unit.weight.clone(),
            bias: unit.bias.clone(),
        }));
        if let Some(bn) = &unit.bn {
            self.layers.push(LayerSpec::BatchNorm(bn.clone()));
        }
    }

    fn fc(&mut self, name: &str, inputs: usize, outputs: usize) {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        self.blocks
            .push((weight.clone(), vec![outputs, inputs], Init::HeUniform { fan_in: inputs }));
        self.blocks.push((bias.clone(), vec![outputs], Init::Zeros));
        self.layers.push(LayerSpec::FullyConnected(Linear {
            inputs,
            outputs,
            weight: weight.clone(),
            bias: bias.clone(),
        }));
        self.manifest.fully_connected.push(FcEntry {
            name: name.to_string(),
            weight,
            bias,
            shape: [outputs, inputs],
        });
    }
}

fn blueprint(spec: &ArchetypeSpec) -> Result<Blueprint> {
    check_width(spec.width)?;
    let w = spec.width;
    let mut bp = Blueprint::new();
    let mut ch = spec.input[0];
    let mut kdim = spec.input[0] as u32;
    let mut side = spec.input[1];
    match &spec.topology {
        Topology::Plain(triplets) => {
            for t in triplets {
                let out = channels(t.c, w);
                for m in 1..=t.b {
                    let unit = bp.conv_unit(
                        &format!("s{}.m{m}", t.a),
                        UnitPosition::Single,
                        ConvGeom::same3x3(ch, out),
                        (kdim, t.c),
                        true,
                        false,
                    );
                    bp.push_conv(&unit);
                    bp.layers.push(LayerSpec::Relu);
                    bp.manifest.modules.push(KnowledgeModule {
                        address: KnowledgeAddress::plain(t.a, m, t.c),
                        anchor: m == t.b,
                        units: vec![unit],
                    });
                    ch = out;
                    kdim = t.c;
                }
                bp.layers.push(LayerSpec::MaxPool { size: 2 });
                side /= 2;
            }
            if side == 0 {
                return Err(ColonyError::Config("input too small for five pooling steps".into()));
            }
            bp.layers.push(LayerSpec::Flatten);
            let flat = ch * side * side;
            bp.fc("fc1", flat, HEAD_WIDTH);
            bp.layers.push(LayerSpec::Relu);
            bp.fc("fc2", HEAD_WIDTH, HEAD_WIDTH);
            bp.layers.push(LayerSpec::Relu);
            bp.fc("fc3", HEAD_WIDTH, spec.classes);
        }
        Topology::Residual { stem, stages } => {
            let out = channels(stem.c, w);
            let unit = bp.conv_unit(
                &format!("s{}.m1", stem.a),
                UnitPosition::Single,
                ConvGeom::same3x3(ch, out),
                (kdim, stem.c),
                false,
                true,
            );
            bp.push_conv(&unit);
            bp.layers.push(LayerSpec::Relu);
            bp.layers.push(LayerSpec::MaxPool { size: 2 });
            bp.manifest.modules.push(KnowledgeModule {
                address: KnowledgeAddress::plain(stem.a, 1, stem.c),
                anchor: true,
                units: vec![unit],
            });
            ch = out;
            kdim = stem.c;
            side /= 2;
            for st in stages {
                let [c, d, e] = st.dims;
                let (cc, dc, ec) = (channels(c, w), channels(d, w), channels(e, w));
                for b in 1..=st.blocks {
                    let stride = if st.a >= 3 && b == 1 { 2 } else { 1 };
                    let prefix = format!("s{}.r{b}", st.a);
                    // node index of the block input, used by the skip connection
                    let skip_from = bp.layers.len();
                    let u0 = bp.conv_unit(
                        &format!("{prefix}.c1"),
                        UnitPosition::Bottleneck(0),
                        ConvGeom::pointwise(ch, cc, stride),
                        (kdim, c),
                        false,
                        true,
                    );
                    bp.push_conv(&u0);
                    bp.layers.push(LayerSpec::Relu);
                    let u1 = bp.conv_unit(
                        &format!("{prefix}.c2"),
                        UnitPosition::Bottleneck(1),
                        ConvGeom::same3x3(cc, dc),
                        (c, d),
                        false,
                        true,
                    );
                    bp.push_conv(&u1);
                    bp.layers.push(LayerSpec::Relu);
                    let u2 = bp.conv_unit(
                        &format!("{prefix}.c3"),
                        UnitPosition::Bottleneck(2),
                        ConvGeom::pointwise(dc, ec, 1),
                        (d, e),
                        false,
                        true,
                    );
                    bp.push_conv(&u2);
                    let mut units = vec![u0, u1, u2];
                    let projection = if stride != 1 || ch != ec {
                        let p = bp.conv_unit(
                            &format!("{prefix}.proj"),
                            UnitPosition::Projection,
                            ConvGeom::pointwise(ch, ec, stride),
                            (kdim, e),
                            false,
                            true,
                        );
                        let proj = Projection {
                            conv: Conv2d {
                                geom: p.geom,
                                weight: p.weight.clone(),
                                bias: None,
                            },
                            bn: p.bn.clone().expect("projection bn"),
                        };
                        units.push(p);
                        Some(proj)
                    } else {
                        None
                    };
                    bp.layers.push(LayerSpec::ResidualAdd {
                        from: skip_from,
                        projection,
                    });
                    bp.layers.push(LayerSpec::Relu);
                    bp.manifest.modules.push(KnowledgeModule {
                        address: KnowledgeAddress::residual(st.a, b, [Some(c), Some(d), Some(e)]),
                        anchor: b == st.blocks.min(2),
                        units,
                    });
                    ch = ec;
                    kdim = e;
                    if stride == 2 {
                        side = side.div_ceil(2);
                    }
                }
            }
            bp.layers.push(LayerSpec::GlobalAvgPool);
            bp.fc("fc1", ch, spec.classes);
        }
    }
    bp.layers.push(LayerSpec::Softmax);
    Ok(bp)
}

/// Ordered knowledge-module manifest of a spec (no network is built).
pub fn enumerate_modules(spec: &ArchetypeSpec) -> Result<ModuleManifest> {
    Ok(blueprint(spec)?.manifest)
}

/// Build a freshly initialized network. Conv and FC weights are He-uniform
/// (`±sqrt(6 / fan_in)`), biases and BN shifts zero, BN scales one.
pub fn build<F: Scalar>(spec: &ArchetypeSpec, seed: u64) -> Result<Network<F>> {
    let bp = blueprint(spec)?;
    let mut rng = seed::rng(seed);
    let params = bp
        .blocks
        .iter()
        .map(|(id, shape, init)| {
            let len: usize = shape.iter().product();
            let data: Vec<F> = match *init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
                        .collect()
                }
                Init::Zeros => vec![F::ZERO; len],
                Init::Ones => vec![F::ONE; len],
            };
            Ok(ParameterBlock::new(id.clone(), Tensor::from_vec(shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let buffers = bp
        .buffers
        .iter()
        .map(|(id, n)| {
            let v = if id.ends_with("running_var") { F::ONE } else { F::ZERO };
            (id.clone(), Tensor::filled(&[*n], v))
        })
        .collect();
    Network::new(bp.layers, params, buffers, spec.input, spec.classes)
}

/// Units selected by an address (wildcard positions excluded).
pub fn resolve_units<'m>(
    manifest: &'m ModuleManifest,
    addr: &KnowledgeAddress,
) -> Result<Vec<&'m ConvUnit>> {
    let missing = || ColonyError::Address(format!("{addr} is not in the manifest"));
    let module = manifest
        .module(addr.step(), addr.ordinal())
        .ok_or_else(missing)?;
    match (addr, &module.address) {
        (KnowledgeAddress::Plain { dim, .. }, KnowledgeAddress::Plain { dim: own, .. }) => {
            if dim != own {
                return Err(missing());
            }
            Ok(module.units.iter().collect())
        }
        (
            KnowledgeAddress::Residual { dims, .. },
            KnowledgeAddress::Residual { dims: own, .. },
        ) => {
            if dims.iter().all(Option::is_none) {
                return Err(ColonyError::Address(format!(
                    "{addr} is ambiguous: every dimension is a wildcard"
                )));
            }
            for (want, have) in dims.iter().zip(own) {
                if want.is_some() && want != have {
                    return Err(missing());
                }
            }
            if dims.iter().all(Option::is_some) {
                return Ok(module.units.iter().collect());
            }
            Ok(module
                .units
                .iter()
                .filter(|u| matches!(u.position, UnitPosition::Bottleneck(p) if dims[p as usize].is_some()))
                .collect())
        }
        _ => Err(missing()),
    }
}

/// Parameter block ids addressed by `addr`.
pub fn resolve(spec: &ArchetypeSpec, addr: &KnowledgeAddress) -> Result<Vec<String>> {
    let manifest = enumerate_modules(spec)?;
    Ok(resolve_units(&manifest, addr)?
        .into_iter()
        .flat_map(ConvUnit::block_ids)
        .collect())
}
