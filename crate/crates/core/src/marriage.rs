//! Marriage operators: knowledge-module crossover between two parents,
//! cross-architecture compatibility discovery, mutation and head reset.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{agent_id, Agent, AgentStatus};
use crate::error::{ColonyError, Result};
use crate::nn::{LayerSpec, Network};
use crate::seed::{self, ColonyRng};
use crate::zoo::{self, ArchetypeSpec, ConvUnit, KnowledgeAddress, ModuleManifest, UnitPosition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarriageConfig {
    pub crossover_probability: f64,
    /// Fraction of conv coordinates perturbed.
    pub mutation_rate: f64,
    /// Perturbation std as a fraction of the block's weight std.
    pub mutation_scale: f64,
    pub seed: u64,
}

impl Default for MarriageConfig {
    fn default() -> Self {
        MarriageConfig {
            crossover_probability: 0.5,
            mutation_rate: 0.01,
            mutation_scale: 0.1,
            seed: 0,
        }
    }
}

impl MarriageConfig {
    pub fn with_seed(seed: u64) -> Self {
        MarriageConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.crossover_probability) {
            return Err(ColonyError::Config(format!(
                "crossover probability {} outside [0, 1]",
                self.crossover_probability
            )));
        }
        if !unit.contains(&self.mutation_rate) {
            return Err(ColonyError::Config(format!(
                "mutation rate {} outside [0, 1]",
                self.mutation_rate
            )));
        }
        if !(self.mutation_scale >= 0.0 && self.mutation_scale.is_finite()) {
            return Err(ColonyError::Config(format!(
                "mutation scale {} must be finite and non-negative",
                self.mutation_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompatibilityPair {
    pub addr_a: KnowledgeAddress,
    pub addr_b: KnowledgeAddress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarriageKind {
    Intra,
    Inter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Import {
    /// Address in the child's own manifest that was overwritten.
    pub target: KnowledgeAddress,
    /// Address in the other parent it was copied from.
    pub source: KnowledgeAddress,
}

/// Provenance of one knowledge module of one child.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossoverEntry {
    pub child: usize,
    pub module: KnowledgeAddress,
    /// 0 for parent A, 1 for parent B: the parent whose module the child kept.
    pub parent: usize,
    /// Sub-blocks overwritten from the other parent (inter-marriage only).
    pub imports: Vec<Import>,
}

pub type MutationLog = BTreeMap<String, usize>;

#[derive(Debug, Clone)]
pub struct MarriageOutcome {
    pub event_id: String,
    pub kind: MarriageKind,
    pub parents: [String; 2],
    pub children: Vec<Agent>,
    pub crossover: Vec<CrossoverEntry>,
    /// Per child, perturbed coordinate count per block.
    pub mutation: Vec<MutationLog>,
}

fn event_id(kind: MarriageKind, a: &Agent, b: &Agent, cfg: &MarriageConfig) -> String {
    let text = format!(
        "{kind:?}/{}/{}/{}/{}/{}/{}",
        a.id,
        b.id,
        cfg.seed,
        cfg.crossover_probability,
        cfg.mutation_rate,
        cfg.mutation_scale
    );
    seed::content_hash(text.as_bytes())[..16].to_string()
}

/// Child network of `spec` whose conv modules start as a copy of `parent`
/// and whose fully-connected head is freshly initialized from `child_seed`.
fn child_network(
    spec: &ArchetypeSpec,
    manifest: &ModuleManifest,
    parent: &Network<f32>,
    child_seed: u64,
) -> Result<Network<f32>> {
    let mut net: Network<f32> = zoo::build(spec, child_seed)?;
    for id in manifest.conv_block_ids() {
        let values = parent
            .block(&id)
            .ok_or_else(|| ColonyError::Marriage(format!("parent lacks block {id}")))?
            .values
            .clone();
        net.set_values(&id, values)?;
    }
    Ok(net)
}

fn copy_blocks(dst: &mut Network<f32>, src: &Network<f32>, ids: &[String]) -> Result<()> {
    for id in ids {
        let values = src
            .block(id)
            .ok_or_else(|| ColonyError::Marriage(format!("source lacks block {id}")))?
            .values
            .clone();
        dst.set_values(id, values)?;
    }
    Ok(())
}

/// Copy a conv unit across architectures: the kernel always, the bias and the
/// attached batch-norm affine parameters only when both sides carry them.
fn copy_unit(
    dst: &mut Network<f32>,
    dst_unit: &ConvUnit,
    src: &Network<f32>,
    src_unit: &ConvUnit,
) -> Result<()> {
    let mut pairs = vec![(dst_unit.weight.clone(), src_unit.weight.clone())];
    if let (Some(d), Some(s)) = (&dst_unit.bias, &src_unit.bias) {
        pairs.push((d.clone(), s.clone()));
    }
    if let (Some(d), Some(s)) = (&dst_unit.bn, &src_unit.bn) {
        pairs.push((d.gamma.clone(), s.gamma.clone()));
        pairs.push((d.beta.clone(), s.beta.clone()));
    }
    for (d, s) in pairs {
        let values = src
            .block(&s)
            .ok_or_else(|| ColonyError::Marriage(format!("source lacks block {s}")))?
            .values
            .clone();
        dst.set_values(&d, values)?;
    }
    Ok(())
}

/// Same-archetype marriage: each conv module comes from parent A with
/// probability `p_c`, otherwise from parent B. One child.
pub fn intra_marry(a: &Agent, b: &Agent, cfg: &MarriageConfig) -> Result<MarriageOutcome> {
    cfg.validate()?;
    if a.kind != b.kind || a.width != b.width {
        return Err(ColonyError::Marriage(format!(
            "intra-marriage needs equal archetypes, got {}@{} and {}@{} (use inter-marriage)",
            a.kind, a.width, b.kind, b.width
        )));
    }
    let spec = a.spec();
    let manifest = zoo::enumerate_modules(&spec)?;
    let event = event_id(MarriageKind::Intra, a, b, cfg);
    let child_seed = seed::derive(cfg.seed, "child/0");
    let mut net = child_network(&spec, &manifest, &a.network, child_seed)?;

    let mut rng = seed::stream(cfg.seed, "crossover");
    let mut crossover = Vec::with_capacity(manifest.modules.len());
    for module in &manifest.modules {
        let from_a = rng.random_bool(cfg.crossover_probability);
        if !from_a {
            copy_blocks(&mut net, &b.network, &module.block_ids())?;
        }
        crossover.push(CrossoverEntry {
            child: 0,
            module: module.address.clone(),
            parent: usize::from(!from_a),
            imports: Vec::new(),
        });
    }
    net.reset_running_stats();
    let mutation = mutate_with(&mut net, cfg, &mut seed::stream(cfg.seed, "mutation/0"));
    let child = Agent {
        id: agent_id(a.kind, child_seed, &event),
        kind: a.kind,
        width: a.width,
        seed: child_seed,
        status: AgentStatus::Child,
        history: Vec::new(),
        network: net,
    };
    Ok(MarriageOutcome {
        event_id: event,
        kind: MarriageKind::Intra,
        parents: [a.id.clone(), b.id.clone()],
        children: vec![child],
        crossover,
        mutation: vec![mutation],
    })
}

/// A single conv unit reachable by a (possibly wildcard) address.
struct Slot<'m> {
    address: KnowledgeAddress,
    unit: &'m ConvUnit,
    step: u8,
    ordinal: u8,
    anchor: bool,
}

fn slots(manifest: &ModuleManifest) -> Vec<Slot<'_>> {
    let mut out = Vec::new();
    for module in &manifest.modules {
        let (step, ordinal) = (module.address.step(), module.address.ordinal());
        for unit in &module.units {
            let address = match (&module.address, unit.position) {
                (KnowledgeAddress::Plain { .. }, _) => module.address.clone(),
                (KnowledgeAddress::Residual { dims, .. }, UnitPosition::Bottleneck(p)) => {
                    let mut only = [None; 3];
                    only[p as usize] = dims[p as usize];
                    KnowledgeAddress::residual(step, ordinal, only)
                }
                // shortcuts are only reachable through the full module address
                (KnowledgeAddress::Residual { .. }, _) => continue,
            };
            out.push(Slot {
                address,
                unit,
                step,
                ordinal,
                anchor: module.anchor,
            });
        }
    }
    out
}

fn compatible(x: &ConvUnit, y: &ConvUnit) -> bool {
    x.geom == y.geom && x.knowledge_dims == y.knowledge_dims
}

fn pairs_for(ma: &ModuleManifest, mb: &ModuleManifest) -> Vec<CompatibilityPair> {
    let sb = slots(mb);
    slots(ma)
        .into_iter()
        .filter_map(|sa| {
            sb.iter()
                .filter(|s| compatible(sa.unit, s.unit))
                .min_by_key(|s| {
                    (
                        s.anchor != sa.anchor,
                        s.step,
                        s.ordinal.abs_diff(sa.ordinal),
                        s.ordinal,
                    )
                })
                .map(|s| CompatibilityPair {
                    addr_a: sa.address.clone(),
                    addr_b: s.address.clone(),
                })
        })
        .collect()
}

/// Pair every conv unit of A with at most one shape-identical unit of B.
///
/// Candidates must agree on kernel geometry and on unscaled knowledge
/// dimensions, so the pairing does not depend on the width factor. Among
/// candidates the preference is: same anchor status (the module a step's
/// triplet names), then the earliest step, then the nearest module ordinal,
/// then the lower ordinal. Output follows A's manifest order.
pub fn discover_compatible_pairs(
    spec_a: &ArchetypeSpec,
    spec_b: &ArchetypeSpec,
) -> Vec<CompatibilityPair> {
    if spec_a.width != spec_b.width {
        return Vec::new();
    }
    match (zoo::enumerate_modules(spec_a), zoo::enumerate_modules(spec_b)) {
        (Ok(ma), Ok(mb)) => pairs_for(&ma, &mb),
        _ => Vec::new(),
    }
}

fn single_unit<'m>(manifest: &'m ModuleManifest, addr: &KnowledgeAddress) -> Result<&'m ConvUnit> {
    match zoo::resolve_units(manifest, addr)?.as_slice() {
        [u] => Ok(u),
        _ => Err(ColonyError::Marriage(format!("{addr} does not name a single conv unit"))),
    }
}

/// Cross-archetype marriage producing one child per parent archetype.
///
/// Child A starts from parent A. For each compatibility pair, with
/// probability `p_c` child A's unit at `addr_a` is overwritten by parent B's
/// unit at `addr_b`. Child B independently draws one coin per distinct
/// `addr_b`, importing from the first A address paired with it.
pub fn inter_marry(a: &Agent, b: &Agent, cfg: &MarriageConfig) -> Result<MarriageOutcome> {
    cfg.validate()?;
    if a.kind == b.kind {
        return Err(ColonyError::Marriage(format!(
            "inter-marriage needs distinct archetypes, both parents are {} (use intra-marriage)",
            a.kind
        )));
    }
    if a.width != b.width {
        return Err(ColonyError::Marriage(format!(
            "parent widths differ: {} vs {}",
            a.width, b.width
        )));
    }
    let (spec_a, spec_b) = (a.spec(), b.spec());
    let (ma, mb) = (zoo::enumerate_modules(&spec_a)?, zoo::enumerate_modules(&spec_b)?);
    let pairs = pairs_for(&ma, &mb);
    let event = event_id(MarriageKind::Inter, a, b, cfg);
    let seeds = [seed::derive(cfg.seed, "child/0"), seed::derive(cfg.seed, "child/1")];
    let mut net_a = child_network(&spec_a, &ma, &a.network, seeds[0])?;
    let mut net_b = child_network(&spec_b, &mb, &b.network, seeds[1])?;

    let mut rng = seed::stream(cfg.seed, "crossover");
    let mut imports: [BTreeMap<(u8, u8), Vec<Import>>; 2] = Default::default();
    for pair in &pairs {
        if rng.random_bool(cfg.crossover_probability) {
            let dst = single_unit(&ma, &pair.addr_a)?;
            let src = single_unit(&mb, &pair.addr_b)?;
            copy_unit(&mut net_a, dst, &b.network, src)?;
            imports[0]
                .entry((pair.addr_a.step(), pair.addr_a.ordinal()))
                .or_default()
                .push(Import {
                    target: pair.addr_a.clone(),
                    source: pair.addr_b.clone(),
                });
        }
    }
    let mut seen_b: Vec<&KnowledgeAddress> = Vec::new();
    for pair in &pairs {
        if seen_b.contains(&&pair.addr_b) {
            continue;
        }
        seen_b.push(&pair.addr_b);
        if rng.random_bool(cfg.crossover_probability) {
            let dst = single_unit(&mb, &pair.addr_b)?;
            let src = single_unit(&ma, &pair.addr_a)?;
            copy_unit(&mut net_b, dst, &a.network, src)?;
            imports[1]
                .entry((pair.addr_b.step(), pair.addr_b.ordinal()))
                .or_default()
                .push(Import {
                    target: pair.addr_b.clone(),
                    source: pair.addr_a.clone(),
                });
        }
    }

    let mut crossover = Vec::new();
    for (child, manifest) in [&ma, &mb].into_iter().enumerate() {
        for module in &manifest.modules {
            let key = (module.address.step(), module.address.ordinal());
            crossover.push(CrossoverEntry {
                child,
                module: module.address.clone(),
                parent: child,
                imports: imports[child].remove(&key).unwrap_or_default(),
            });
        }
    }

    let mut children = Vec::with_capacity(2);
    let mut mutation = Vec::with_capacity(2);
    for (i, (mut net, parent)) in [(net_a, a), (net_b, b)].into_iter().enumerate() {
        net.reset_running_stats();
        mutation.push(mutate_with(
            &mut net,
            cfg,
            &mut seed::stream(cfg.seed, &format!("mutation/{i}")),
        ));
        children.push(Agent {
            id: agent_id(parent.kind, seeds[i], &event),
            kind: parent.kind,
            width: parent.width,
            seed: seeds[i],
            status: AgentStatus::Child,
            history: Vec::new(),
            network: net,
        });
    }
    Ok(MarriageOutcome {
        event_id: event,
        kind: MarriageKind::Inter,
        parents: [a.id.clone(), b.id.clone()],
        children,
        crossover,
        mutation,
    })
}

/// Parameter ids of every convolution and batch norm, in layer order.
fn conv_block_ids(net: &Network<f32>) -> Vec<String> {
    net.layers()
        .iter()
        .filter(|l| {
            matches!(
                l,
                LayerSpec::Conv2d(_) | LayerSpec::BatchNorm(_) | LayerSpec::ResidualAdd { .. }
            )
        })
        .flat_map(|l| l.parameter_ids().into_iter().map(str::to_string))
        .collect()
}

/// Perturb conv blocks: each coordinate is selected with probability
/// `mutation_rate` and receives N(0, (mutation_scale·std(block))²) noise.
/// Fully-connected blocks are left alone.
pub fn mutate(net: &mut Network<f32>, cfg: &MarriageConfig) -> MutationLog {
    mutate_with(net, cfg, &mut seed::stream(cfg.seed, "mutation"))
}

pub fn mutate_with(net: &mut Network<f32>, cfg: &MarriageConfig, rng: &mut ColonyRng) -> MutationLog {
    let mut log = MutationLog::new();
    for id in conv_block_ids(net) {
        let block = net.block_mut(&id).expect("layer ids exist in the store");
        let (_, std) = block.values.mean_std();
        let sigma = cfg.mutation_scale * std;
        let noise = Normal::new(0.0, sigma).unwrap_or_else(|_| Normal::new(0.0, 0.0).unwrap());
        let mut count = 0;
        if cfg.mutation_rate > 0.0 {
            for v in block.values.data_mut() {
                if rng.random_bool(cfg.mutation_rate) {
                    count += 1;
                    if sigma > 0.0 {
                        *v += noise.sample(rng) as f32;
                    }
                }
            }
        }
        log.insert(id, count);
    }
    log
}
