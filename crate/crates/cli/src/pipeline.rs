//! Colony stages: found, train, marry, evaluate, and the full run.

use std::path::Path;

use colony_core::agent::{Agent, TrainingEntry};
use colony_core::eval::evaluate_agent;
use colony_core::marriage::{inter_marry, intra_marry, MarriageConfig, MarriageKind};
use colony_core::registry::{FamilyRecord, Registry, TaskSpec};
use colony_core::train::fit;
use colony_core::zoo::ArchetypeKind;
use colony_core::{seed, ColonyError, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::report::{self, ReportSummary};
use crate::workspace::{self, Dataset, EvalRecord};

/// Seed of founder `j` of an archetype.
pub fn founder_seed(base: u64, kind: ArchetypeKind, j: usize) -> u64 {
    seed::derive(base, &format!("founder/{}/{j}", kind.name()))
}

pub fn marriage_config(cfg: &RunConfig, a: &Agent, b: &Agent) -> MarriageConfig {
    MarriageConfig {
        seed: seed::derive(cfg.seed, &format!("marriage/{}/{}", a.id, b.id)),
        ..cfg.marriage
    }
}

/// Train `agent` on the fit split for `epochs`; the shuffle seed is named
/// after the agent and its training round so reruns repeat exactly.
pub fn train_agent(agent: &mut Agent, data: &Dataset, cfg: &RunConfig, epochs: u32) -> Result<TrainingEntry> {
    let label = format!("train/{}/{}", agent.id, agent.history.len());
    let tc = cfg.train_settings().train_config(epochs, seed::derive(cfg.seed, &label));
    let report = fit(&mut agent.network, &data.fit, &tc)?;
    Ok(TrainingEntry {
        task: data.task_id(),
        epochs,
        data_size: data.fit.len(),
        seconds: report.seconds,
    })
}

/// Training seconds accumulated since the agent was born.
pub fn training_seconds(agent: &Agent) -> f64 {
    agent.history.iter().map(|h| h.seconds).sum()
}

pub fn evaluate(agent: &Agent, family: Option<FamilyRecord>, data: &Dataset) -> Result<EvalRecord> {
    let train = evaluate_agent(agent, &data.fit)?;
    let valid = if data.valid.is_empty() {
        train.clone()
    } else {
        evaluate_agent(agent, &data.valid)?
    };
    let test = evaluate_agent(agent, &data.test)?;
    Ok(EvalRecord::new(
        agent.id.clone(),
        family,
        &train,
        &valid,
        &test,
        training_seconds(agent),
    ))
}

/// Marry two registered agents and record one family per child.
pub fn marry(
    registry: &mut Registry,
    a: &str,
    b: &str,
    kind: MarriageKind,
    cfg: &RunConfig,
    s: usize,
) -> Result<Vec<String>> {
    let (pa, pb) = (registry.agent(a)?, registry.agent(b)?);
    let mcfg = marriage_config(cfg, pa, pb);
    let outcome = match kind {
        MarriageKind::Intra => intra_marry(pa, pb, &mcfg)?,
        MarriageKind::Inter => inter_marry(pa, pb, &mcfg)?,
    };
    let event = outcome.event_id.clone();
    let ids = registry.admit(outcome)?;
    let schedule = cfg.schedule();
    registry.record_marriage(&event, s, |k| schedule.of(k))?;
    Ok(ids)
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| ColonyError::Config(format!("worker pool: {e}")))
}

/// Inter-marriage pairs in roster order.
pub const INTER_PAIRS: [(ArchetypeKind, ArchetypeKind); 3] = [
    (ArchetypeKind::Fast, ArchetypeKind::Detailed),
    (ArchetypeKind::Fast, ArchetypeKind::Organized),
    (ArchetypeKind::Detailed, ArchetypeKind::Organized),
];

/// Found and train the founders, run the three intra and three inter
/// marriages, fine-tune and evaluate the nine children, then write the
/// report. Registry and evaluations are saved after every stage.
pub fn run_paper(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<ReportSummary> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    let data = workspace::ingest(cfg)?;
    workspace::save_manifest(out, &data)?;
    log(&format!(
        "split: {} fit / {} valid / {} test images",
        data.fit.len(),
        data.valid.len(),
        data.test.len()
    ));
    let pool = pool(cfg)?;
    let schedule = cfg.schedule();
    let mut registry = Registry::new();
    registry.add_task(TaskSpec::new(data.task_id(), data.manifest.provenance.source.clone(), 10)?)?;

    let mut founders = Vec::new();
    for kind in ArchetypeKind::ALL {
        for j in 0..cfg.founders_per_archetype {
            founders.push(Agent::founder(kind, cfg.width, founder_seed(cfg.seed, kind, j))?);
        }
    }
    let founders: Vec<(Agent, TrainingEntry)> = pool.install(|| {
        founders
            .into_par_iter()
            .map(|mut agent| {
                let epochs = schedule.of(agent.kind);
                let entry = train_agent(&mut agent, &data, cfg, epochs)?;
                Ok((agent, entry))
            })
            .collect::<Result<_>>()
    })?;
    let mut by_kind: Vec<Vec<String>> = vec![Vec::new(); ArchetypeKind::ALL.len()];
    for (mut agent, entry) in founders {
        log(&format!(
            "founder {} trained {} epochs in {:.1}s",
            agent.id, entry.epochs, entry.seconds
        ));
        agent.history.push(entry);
        by_kind[kind_index(agent.kind)].push(agent.id.clone());
        registry.register(agent)?;
    }
    workspace::save_registry(out, &registry)?;

    let s = data.train_size();
    let mut children = Vec::new();
    for kind in ArchetypeKind::ALL {
        let ids = &by_kind[kind_index(kind)];
        children.extend(marry(&mut registry, &ids[0], &ids[1], MarriageKind::Intra, cfg, s)?);
    }
    for (p, q) in INTER_PAIRS {
        let (a, b) = (&by_kind[kind_index(p)][0], &by_kind[kind_index(q)][0]);
        children.extend(marry(&mut registry, a, b, MarriageKind::Inter, cfg, s)?);
    }
    workspace::save_registry(out, &registry)?;

    let jobs: Vec<(Agent, FamilyRecord)> = children
        .iter()
        .map(|id| {
            let family = registry
                .family_of(id)
                .ok_or_else(|| ColonyError::State(format!("child {id} has no family record")))?
                .record;
            Ok((registry.agent(id)?.clone(), family))
        })
        .collect::<Result<_>>()?;
    let results: Vec<(Agent, TrainingEntry, EvalRecord)> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(mut child, family)| {
                let entry = train_agent(&mut child, &data, cfg, family.t)?;
                child.history.push(entry.clone());
                let record = evaluate(&child, Some(family), &data)?;
                Ok((child, entry, record))
            })
            .collect::<Result<_>>()
    })?;
    let mut evals = Vec::new();
    for (child, entry, record) in results {
        log(&format!(
            "{} child {}: fine-tuned {} epochs in {:.1}s, test macro-F1 {:.4}",
            record.family.map(|f| f.to_string()).unwrap_or_default(),
            child.id,
            entry.epochs,
            entry.seconds,
            record.test_macro_f1
        ));
        workspace::save_eval(out, &record)?;
        let id = child.id.clone();
        *registry.agent_mut(&id)? = child;
        evals.push(record);
    }
    workspace::save_registry(out, &registry)?;
    report::write_report(out, &evals, cfg)
}

fn kind_index(kind: ArchetypeKind) -> usize {
    ArchetypeKind::ALL.iter().position(|&k| k == kind).expect("kind listed in ALL")
}

/// Evaluate one registered agent and store its record.
pub fn evaluate_registered(out: &Path, registry: &Registry, id: &str, data: &Dataset) -> Result<EvalRecord> {
    let agent = registry.agent(id)?;
    let record = evaluate(agent, registry.family_of(id).map(|f| f.record), data)?;
    workspace::save_eval(out, &record)?;
    Ok(record)
}
