//! Colony genealogy: agents, tasks, family records and the lineage DAG,
//! persisted as a line-delimited JSON manifest plus binary weight files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentStatus, TrainingEntry};
use crate::error::{ColonyError, Result};
use crate::marriage::{CrossoverEntry, MarriageKind, MarriageOutcome, MutationLog};
use crate::nn::{Network, Tensor};
use crate::seed;
use crate::zoo::{self, ArchetypeKind};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "colony.jsonl";
pub const WEIGHTS_DIR: &str = "weights";
const WEIGHT_MAGIC: &[u8; 4] = b"CWB1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub dataset: String,
    pub classes: usize,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, dataset: impl Into<String>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(ColonyError::Input(format!("task needs at least 2 classes, got {classes}")));
        }
        Ok(TaskSpec {
            id: id.into(),
            dataset: dataset.into(),
            classes,
        })
    }
}

/// `(p, q, r, s, t)`: parent type codes, child type code, data size, epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub p: u16,
    pub q: u16,
    pub r: u16,
    pub s: usize,
    pub t: u32,
}

impl FamilyRecord {
    pub fn new(p: u16, q: u16, r: u16, s: usize, t: u32) -> Result<Self> {
        for code in [p, q, r] {
            if ArchetypeKind::from_code(code).is_none() {
                return Err(ColonyError::Registry(format!("unknown model type code {code}")));
            }
        }
        if r != p && r != q {
            return Err(ColonyError::Registry(format!(
                "child type {r} is neither parent type ({p}, {q})"
            )));
        }
        if s == 0 || t == 0 {
            return Err(ColonyError::Registry(format!(
                "data size and epochs must be positive, got s={s}, t={t}"
            )));
        }
        Ok(FamilyRecord { p, q, r, s, t })
    }

    /// Short label such as `16_19_16`.
    pub fn triple(&self) -> String {
        format!("{}_{}_{}", self.p, self.q, self.r)
    }
}

impl std::fmt::Display for FamilyRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = if self.s.is_multiple_of(1000) {
            format!("{}k", self.s / 1000)
        } else {
            self.s.to_string()
        };
        write!(f, "F({}, {}, {}, {s}, {})", self.p, self.q, self.r, self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub event: String,
    pub child: String,
    #[serde(flatten)]
    pub record: FamilyRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineageEdge {
    pub parent: String,
    pub child: String,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub kind: MarriageKind,
    pub parents: [String; 2],
    pub children: Vec<String>,
    pub crossover: Vec<CrossoverEntry>,
    pub mutation: Vec<MutationLog>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ancestor {
    pub id: String,
    /// Marriage event that produced this ancestor; `None` for founders.
    pub event: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    agents: Vec<Agent>,
    index: BTreeMap<String, usize>,
    tasks: Vec<TaskSpec>,
    events: Vec<EventRecord>,
    families: Vec<FamilyEntry>,
    edges: Vec<LineageEdge>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agent(&self, id: &str) -> Result<&Agent> {
        self.index
            .get(id)
            .map(|&i| &self.agents[i])
            .ok_or_else(|| ColonyError::Lookup(id.to_string()))
    }

    pub fn agent_mut(&mut self, id: &str) -> Result<&mut Agent> {
        match self.index.get(id) {
            Some(&i) => Ok(&mut self.agents[i]),
            None => Err(ColonyError::Lookup(id.to_string())),
        }
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn families(&self) -> &[FamilyEntry] {
        &self.families
    }

    pub fn edges(&self) -> &[LineageEdge] {
        &self.edges
    }

    pub fn add_task(&mut self, task: TaskSpec) -> Result<()> {
        if self.tasks.iter().any(|t| t.id == task.id) {
            return Err(ColonyError::Registry(format!("duplicate task {}", task.id)));
        }
        self.tasks.push(task);
        Ok(())
    }

    fn insert(&mut self, agent: Agent) -> Result<&Agent> {
        if self.index.contains_key(&agent.id) {
            return Err(ColonyError::Registry(format!("duplicate agent id {}", agent.id)));
        }
        self.index.insert(agent.id.clone(), self.agents.len());
        self.agents.push(agent);
        Ok(self.agents.last().expect("just pushed"))
    }

    pub fn register_founder(&mut self, kind: ArchetypeKind, width: f64, seed: u64) -> Result<&Agent> {
        self.insert(Agent::founder(kind, width, seed)?)
    }

    /// Register a founder built elsewhere (for instance, one already trained).
    pub fn register(&mut self, agent: Agent) -> Result<&Agent> {
        if agent.status != AgentStatus::Founder {
            return Err(ColonyError::Registry(format!(
                "{} is a child; admit it through its marriage outcome",
                agent.id
            )));
        }
        self.insert(agent)
    }

    /// Register the children of a marriage together with its logs and
    /// lineage edges. Returns the child ids.
    pub fn admit(&mut self, outcome: MarriageOutcome) -> Result<Vec<String>> {
        if self.events.iter().any(|e| e.id == outcome.event_id) {
            return Err(ColonyError::Registry(format!(
                "duplicate marriage event {}",
                outcome.event_id
            )));
        }
        for parent in &outcome.parents {
            self.agent(parent)?;
        }
        if outcome.parents[0] == outcome.parents[1] {
            return Err(ColonyError::Registry("an agent cannot marry itself".into()));
        }
        for child in &outcome.children {
            if self.index.contains_key(&child.id) {
                return Err(ColonyError::Registry(format!("duplicate agent id {}", child.id)));
            }
        }
        let ids: Vec<String> = outcome.children.iter().map(|c| c.id.clone()).collect();
        for child in &ids {
            for parent in &outcome.parents {
                self.edges.push(LineageEdge {
                    parent: parent.clone(),
                    child: child.clone(),
                    event: outcome.event_id.clone(),
                });
            }
        }
        self.events.push(EventRecord {
            id: outcome.event_id,
            kind: outcome.kind,
            parents: outcome.parents,
            children: ids.clone(),
            crossover: outcome.crossover,
            mutation: outcome.mutation,
        });
        for child in outcome.children {
            self.insert(child)?;
        }
        Ok(ids)
    }

    /// One family record per child of an admitted marriage event. `t` gives
    /// the training epochs for a child of each archetype.
    pub fn record_marriage(
        &mut self,
        event: &str,
        s: usize,
        t: impl Fn(ArchetypeKind) -> u32,
    ) -> Result<Vec<FamilyRecord>> {
        let ev = self
            .events
            .iter()
            .find(|e| e.id == event)
            .ok_or_else(|| ColonyError::Lookup(format!("marriage event {event}")))?;
        if self.families.iter().any(|f| f.event == event) {
            return Err(ColonyError::Registry(format!("family records for {event} already exist")));
        }
        let p = self.agent(&ev.parents[0])?.kind.code();
        let q = self.agent(&ev.parents[1])?.kind.code();
        let mut entries = Vec::new();
        for child in &ev.children {
            let kind = self.agent(child)?.kind;
            entries.push(FamilyEntry {
                event: event.to_string(),
                child: child.clone(),
                record: FamilyRecord::new(p, q, kind.code(), s, t(kind))?,
            });
        }
        let records = entries.iter().map(|e| e.record).collect();
        self.families.extend(entries);
        Ok(records)
    }

    pub fn family_of(&self, child: &str) -> Option<&FamilyEntry> {
        self.families.iter().find(|f| f.child == child)
    }

    pub fn record_training(&mut self, id: &str, entry: TrainingEntry) -> Result<()> {
        self.agent_mut(id)?.history.push(entry);
        Ok(())
    }

    fn parents_of(&self, id: &str) -> Vec<&LineageEdge> {
        self.edges.iter().filter(|e| e.child == id).collect()
    }

    /// Transitive ancestors of `id`, every ancestor listed after its own parents.
    pub fn lineage_of(&self, id: &str) -> Result<Vec<Ancestor>> {
        self.agent(id)?;
        let mut order = Vec::new();
        let mut done = BTreeSet::new();
        let mut on_path = BTreeSet::new();
        for edge in self.parents_of(id) {
            self.visit(&edge.parent, &mut done, &mut on_path, &mut order)?;
        }
        Ok(order)
    }

    fn visit(
        &self,
        id: &str,
        done: &mut BTreeSet<String>,
        on_path: &mut BTreeSet<String>,
        order: &mut Vec<Ancestor>,
    ) -> Result<()> {
        if done.contains(id) {
            return Ok(());
        }
        if !on_path.insert(id.to_string()) {
            return Err(ColonyError::Registry(format!("lineage cycle through {id}")));
        }
        let parents = self.parents_of(id);
        for edge in &parents {
            self.visit(&edge.parent, done, on_path, order)?;
        }
        on_path.remove(id);
        done.insert(id.to_string());
        order.push(Ancestor {
            id: id.to_string(),
            event: parents.first().map(|e| e.event.clone()),
        });
        Ok(())
    }

    /// Write `colony.jsonl` and one weight file per agent under `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let weights = dir.join(WEIGHTS_DIR);
        fs::create_dir_all(&weights).map_err(|e| ColonyError::io(&weights, e))?;
        let mut lines = vec![serde_json::json!({ "colony_format": FORMAT_VERSION }).to_string()];
        let push = |lines: &mut Vec<String>, r: Record| {
            lines.push(serde_json::to_string(&r).expect("records serialize"));
        };
        for task in &self.tasks {
            push(&mut lines, Record::Task(task.clone()));
        }
        for agent in &self.agents {
            let bytes = encode_weights(&agent.network);
            let hash = seed::content_hash(&bytes);
            let path = weights.join(format!("{hash}.cwb"));
            if !path.exists() {
                fs::write(&path, &bytes).map_err(|e| ColonyError::io(&path, e))?;
            }
            push(
                &mut lines,
                Record::Agent(AgentMeta {
                    id: agent.id.clone(),
                    kind: agent.kind,
                    width: agent.width,
                    seed: agent.seed,
                    status: agent.status,
                    history: agent.history.clone(),
                    weights: hash,
                }),
            );
        }
        for event in &self.events {
            push(&mut lines, Record::Event(event.clone()));
        }
        for family in &self.families {
            push(&mut lines, Record::Family(family.clone()));
        }
        for edge in &self.edges {
            push(&mut lines, Record::Edge(edge.clone()));
        }
        let manifest = dir.join(MANIFEST_FILE);
        let mut file = fs::File::create(&manifest).map_err(|e| ColonyError::io(&manifest, e))?;
        for line in lines {
            writeln!(file, "{line}").map_err(|e| ColonyError::io(&manifest, e))?;
        }
        Ok(())
    }

    /// Load a registry written by [`Registry::persist`]. Nothing is returned
    /// unless the whole colony loads cleanly.
    pub fn load(dir: impl AsRef<Path>) -> Result<Registry> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).map_err(|e| ColonyError::io(&manifest, e))?;
        let load_err = |line: usize, message: String| ColonyError::Load {
            position: format!("{MANIFEST_FILE} line {line}"),
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| load_err(1, "empty manifest".into()))?;
        let header: serde_json::Value =
            serde_json::from_str(header).map_err(|e| load_err(1, e.to_string()))?;
        match header.get("colony_format").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(load_err(1, format!("unsupported colony_format {v}"))),
            None => return Err(load_err(1, "missing colony_format header".into())),
        }

        let mut reg = Registry::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| load_err(n, e.to_string()))?;
            let wrap = |e: ColonyError| match e {
                ColonyError::Load { .. } => e,
                other => load_err(n, other.to_string()),
            };
            match record {
                Record::Task(t) => reg.add_task(t).map_err(wrap)?,
                Record::Agent(meta) => {
                    let path = dir.join(WEIGHTS_DIR).join(format!("{}.cwb", meta.weights));
                    let bytes = fs::read(&path).map_err(|e| load_err(n, format!("{}: {e}", path.display())))?;
                    let file_pos = format!("{WEIGHTS_DIR}/{}.cwb", meta.weights);
                    if seed::content_hash(&bytes) != meta.weights {
                        return Err(ColonyError::Load {
                            position: format!("{file_pos} byte 0"),
                            message: format!("content hash mismatch (referenced from {MANIFEST_FILE} line {n})"),
                        });
                    }
                    let spec = zoo::spec_for(meta.kind, meta.width).map_err(wrap)?;
                    let mut network: Network<f32> = zoo::build(&spec, meta.seed).map_err(wrap)?;
                    decode_weights_into(&bytes, &mut network, &file_pos)?;
                    reg.insert(Agent {
                        id: meta.id,
                        kind: meta.kind,
                        width: meta.width,
                        seed: meta.seed,
                        status: meta.status,
                        history: meta.history,
                        network,
                    })
                    .map_err(wrap)?;
                }
                Record::Event(e) => {
                    if reg.events.iter().any(|x| x.id == e.id) {
                        return Err(load_err(n, format!("duplicate event {}", e.id)));
                    }
                    reg.events.push(e);
                }
                Record::Family(f) => {
                    FamilyRecord::new(f.record.p, f.record.q, f.record.r, f.record.s, f.record.t)
                        .map_err(wrap)?;
                    reg.families.push(f);
                }
                Record::Edge(e) => {
                    for id in [&e.parent, &e.child] {
                        if !reg.index.contains_key(id) {
                            return Err(load_err(n, format!("edge references unknown agent {id}")));
                        }
                    }
                    reg.edges.push(e);
                }
            }
        }
        for agent in &reg.agents {
            let parents = reg.parents_of(&agent.id).len();
            let expected = match agent.status {
                AgentStatus::Founder => 0,
                AgentStatus::Child => 2,
            };
            if parents != expected {
                return Err(ColonyError::Load {
                    position: MANIFEST_FILE.into(),
                    message: format!("{} has {parents} parent edges, expected {expected}", agent.id),
                });
            }
        }
        for agent in &reg.agents {
            reg.lineage_of(&agent.id).map_err(|e| ColonyError::Load {
                position: MANIFEST_FILE.into(),
                message: e.to_string(),
            })?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentMeta {
    id: String,
    kind: ArchetypeKind,
    width: f64,
    seed: u64,
    status: AgentStatus,
    history: Vec<TrainingEntry>,
    weights: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Task(TaskSpec),
    Agent(AgentMeta),
    Event(EventRecord),
    Family(FamilyEntry),
    Edge(LineageEdge),
}

/// Serialize parameter blocks and buffers (sorted by id) in the CWB1 layout.
pub fn encode_weights(net: &Network<f32>) -> Vec<u8> {
    let mut blocks: Vec<(&str, &Tensor<f32>)> = net
        .parameters()
        .map(|p| (p.id.as_str(), &p.values))
        .chain(net.buffers())
        .collect();
    blocks.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (id, t) in blocks {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> ColonyError {
        ColonyError::Load {
            position: format!("{} byte {}", self.file, self.pos),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decode a CWB1 payload into `net`, which must have exactly the same blocks.
pub fn decode_weights_into(bytes: &[u8], net: &mut Network<f32>, file: &str) -> Result<()> {
    let mut c = Cursor { bytes, pos: 0, file };
    if c.take(4, "magic")? != WEIGHT_MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic, expected CWB1"));
    }
    let count = c.u32("block count")? as usize;
    let expected: BTreeSet<String> = net
        .parameter_ids()
        .map(str::to_string)
        .chain(net.buffers().map(|(id, _)| id.to_string()))
        .collect();
    if count != expected.len() {
        return Err(c.fail(format!("{count} blocks, network has {}", expected.len())));
    }
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let start = c.pos;
        let len = c.u32("address length")? as usize;
        let id = match std::str::from_utf8(c.take(len, "address")?) {
            Ok(id) => id.to_string(),
            Err(_) => return Err(c.fail("address is not UTF-8")),
        };
        if !expected.contains(&id) || !seen.insert(id.clone()) {
            c.pos = start;
            return Err(c.fail(format!("unexpected or repeated block {id}")));
        }
        let ndim = c.u32("dimension count")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(c.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| c.fail("block too large"))?, "block data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| c.fail(e.to_string()))?;
        let applied = if net.block(&id).is_some() {
            net.set_values(&id, tensor)
        } else {
            net.set_buffer(&id, tensor)
        };
        applied.map_err(|e| {
            c.pos = start;
            c.fail(e.to_string())
        })?;
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes after last block"));
    }
    Ok(())
}
