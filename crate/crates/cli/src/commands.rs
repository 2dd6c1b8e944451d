//! Command-line surface of the `colony` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use colony_core::dq::AccuracyGrid;
use colony_core::marriage::MarriageKind;
use colony_core::registry::TaskSpec;
use colony_core::zoo::ArchetypeKind;
use colony_core::{ColonyError, Result};

use crate::config::RunConfig;
use crate::pipeline;
use crate::report;
use crate::workspace;

#[derive(Debug, Parser)]
#[command(name = "colony", version, about = "Grow, marry and score a colony of CNN agents")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (also holds the split, registry and evaluations).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Channel width factor in (0, 1].
    #[arg(long, global = true)]
    pub width: Option<f64>,
    /// Use the procedural digit fixture instead of MNIST.
    #[arg(long, global = true)]
    pub synthetic: bool,
    /// Fixture size with --synthetic.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// MNIST directory; defaults to $COLONY_DATA_DIR.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the train/test split and write its manifest.
    Ingest,
    /// Register new untrained founders.
    Found {
        /// fast | detailed | organized (or 16 | 19 | 50)
        #[arg(long)]
        kind: ArchetypeKind,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train a registered agent on the split's training portion.
    Train {
        #[arg(long)]
        agent: String,
        /// Defaults to the archetype's configured epochs.
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Marry two registered agents.
    Marry {
        a: String,
        b: String,
        #[arg(long, conflicts_with = "inter", required_unless_present = "inter")]
        intra: bool,
        #[arg(long)]
        inter: bool,
    },
    /// Evaluate agents on the train, validation and test splits.
    Eval {
        #[arg(long, required_unless_present = "all")]
        agent: Option<String>,
        /// Every agent with a family record.
        #[arg(long)]
        all: bool,
    },
    /// Diversity-quality scores of an accuracy grid (default: the bundled reference grid).
    Dq {
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Write tables, dq.json and ROC plots from stored evaluations.
    Report,
    /// Run the whole pipeline end to end.
    RunPaper,
}

impl GlobalArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(width) = self.width {
            cfg.width = width;
        }
        if self.synthetic {
            cfg.synthetic = true;
        }
        if let Some(n) = self.n {
            cfg.synthetic_n = n;
        }
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = Some(dir.clone());
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Execute a parsed command; progress lines go to `log`.
pub fn execute(cli: &Cli, log: &mut dyn FnMut(&str)) -> Result<()> {
    let cfg = cli.global.run_config()?;
    let out = cfg.out.clone();
    match &cli.command {
        Command::Ingest => {
            let data = workspace::ingest(&cfg)?;
            workspace::save_manifest(&out, &data)?;
            log(&format!(
                "{}: {} train ({} fit, {} valid), {} test",
                data.manifest.provenance.source,
                data.manifest.train,
                data.fit.len(),
                data.valid.len(),
                data.manifest.test
            ));
        }
        Command::Found { kind, count } => {
            let mut registry = workspace::open_registry(&out)?;
            let existing = registry.agents().iter().filter(|a| a.kind == *kind).count();
            for j in existing..existing + count {
                let agent = registry.register_founder(*kind, cfg.width, pipeline::founder_seed(cfg.seed, *kind, j))?;
                log(&agent.id);
            }
            workspace::save_registry(&out, &registry)?;
        }
        Command::Train { agent, epochs } => {
            let data = workspace::load_dataset(&out)?;
            let mut registry = workspace::open_registry(&out)?;
            if !registry.tasks().iter().any(|t| t.id == data.task_id()) {
                registry.add_task(TaskSpec::new(data.task_id(), data.manifest.provenance.source.clone(), 10)?)?;
            }
            let mut member = registry.agent(agent)?.clone();
            let epochs = epochs.unwrap_or_else(|| {
                registry
                    .family_of(agent)
                    .map_or(cfg.schedule().of(member.kind), |f| f.record.t)
            });
            let entry = pipeline::train_agent(&mut member, &data, &cfg, epochs)?;
            log(&format!("{agent}: {} epochs in {:.1}s", entry.epochs, entry.seconds));
            member.history.push(entry);
            *registry.agent_mut(agent)? = member;
            workspace::save_registry(&out, &registry)?;
        }
        Command::Marry { a, b, intra, .. } => {
            let data = workspace::load_dataset(&out)?;
            let mut registry = workspace::open_registry(&out)?;
            let kind = if *intra {
                MarriageKind::Intra
            } else {
                MarriageKind::Inter
            };
            for id in pipeline::marry(&mut registry, a, b, kind, &cfg, data.train_size())? {
                let family = registry.family_of(&id).map(|f| f.record.to_string()).unwrap_or_default();
                log(&format!("{id} {family}"));
            }
            workspace::save_registry(&out, &registry)?;
        }
        Command::Eval { agent, all } => {
            let data = workspace::load_dataset(&out)?;
            let registry = workspace::open_registry(&out)?;
            let ids: Vec<String> = if *all {
                registry.families().iter().map(|f| f.child.clone()).collect()
            } else {
                agent.iter().cloned().collect()
            };
            for id in ids {
                let record = pipeline::evaluate_registered(&out, &registry, &id, &data)?;
                log(&format!(
                    "{id}: train {:.4} valid {:.4} test {:.4}",
                    record.train_macro_f1, record.valid_macro_f1, record.test_macro_f1
                ));
            }
        }
        Command::Dq { grid } => {
            let (grid, reference) = match grid {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| ColonyError::io(path, e))?;
                    (AccuracyGrid::from_csv(&text)?, false)
                }
                None => (AccuracyGrid::reference(), true),
            };
            let doc = report::dq_document(&grid, &cfg.kde, reference)?;
            workspace::create_dir(&out)?;
            workspace::write_json(&out.join(report::DQ_JSON), &doc)?;
            log(&serde_json::to_string_pretty(&doc).map_err(|e| ColonyError::State(e.to_string()))?);
        }
        Command::Report => {
            let evals = workspace::load_evals(&out)?;
            let summary = report::write_report(&out, &evals, &cfg)?;
            log_summary(&summary, log);
        }
        Command::RunPaper => {
            let summary = pipeline::run_paper(&cfg, log)?;
            log_summary(&summary, log);
        }
    }
    Ok(())
}

fn log_summary(summary: &report::ReportSummary, log: &mut dyn FnMut(&str)) {
    for (family, f1) in &summary.families {
        log(&format!("{family}: test macro-F1 {f1:.4}"));
    }
    if let Some(c) = &summary.collective {
        log(&format!(
            "collective ({} members): test accuracy {:.4}, macro-F1 {:.4}",
            c.members, c.test_accuracy, c.test_macro_f1
        ));
    }
    log(&format!("{} ROC plots written", summary.plots));
}

/// Process exit code for an error: 2 for file problems, 3 for marriage
/// precondition failures, 1 otherwise.
pub fn exit_code(err: &ColonyError) -> i32 {
    match err {
        ColonyError::Io { .. } | ColonyError::Parse { .. } | ColonyError::Load { .. } => 2,
        ColonyError::Marriage(_) => 3,
        _ => 1,
    }
}

/// Single-line `error[kind]: message` rendering.
pub fn error_line(err: &ColonyError) -> String {
    let text = err.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {text}", err.kind())
}
