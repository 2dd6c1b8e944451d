//! Colony members.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Network;
use crate::seed;
use crate::zoo::{self, ArchetypeKind, ArchetypeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentStatus {
    Founder,
    Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEntry {
    pub task: String,
    pub epochs: u32,
    pub data_size: usize,
    /// Wall-clock training time.
    #[serde(default)]
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: String,
    pub kind: ArchetypeKind,
    pub width: f64,
    pub seed: u64,
    pub status: AgentStatus,
    pub history: Vec<TrainingEntry>,
    pub network: Network<f32>,
}

/// `<kind-code>-<seed>-<8 hex digits of the event hash>`.
pub fn agent_id(kind: ArchetypeKind, seed: u64, event: &str) -> String {
    let hash = seed::content_hash(event.as_bytes());
    format!("{}-{seed}-{}", kind.code(), &hash[..8])
}

impl Agent {
    /// Fresh founder with a newly initialized network.
    pub fn founder(kind: ArchetypeKind, width: f64, seed: u64) -> Result<Agent> {
        let spec = zoo::spec_for(kind, width)?;
        let network = zoo::build(&spec, seed)?;
        Ok(Agent {
            id: agent_id(kind, seed, &format!("founder/{}/{width}/{seed}", kind.code())),
            kind,
            width,
            seed,
            status: AgentStatus::Founder,
            history: Vec::new(),
            network,
        })
    }

    pub fn spec(&self) -> ArchetypeSpec {
        zoo::spec_for(self.kind, self.width).expect("agent width validated at construction")
    }
}
