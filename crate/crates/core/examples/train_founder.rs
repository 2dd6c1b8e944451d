//! Train one founder on the MNIST 10k/2k split and print test macro-F1 per epoch.
//!
//! `cargo run --release -p colony-core --example train_founder -- fast 3 [sgd|adam] [lr]`

use colony_core::agent::Agent;
use colony_core::data::{carve_validation, constrained_split, MnistFiles};
use colony_core::eval::evaluate_agent;
use colony_core::nn::UpdateRule;
use colony_core::train::{fit, TrainConfig};
use colony_core::zoo::{ArchetypeKind, DEFAULT_WIDTH};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind: ArchetypeKind = args.first().map_or("fast", String::as_str).parse()?;
    let epochs: u32 = args.get(1).map_or(Ok(3), |s| s.parse())?;
    let adam = args.get(2).is_some_and(|s| s == "adam");
    let (rule, default_lr) = if adam {
        (
            UpdateRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            1e-3,
        )
    } else {
        (UpdateRule::SgdMomentum { momentum: 0.9 }, 0.01)
    };
    let learning_rate: f64 = args.get(3).map_or(Ok(default_lr), |s| s.parse())?;
    let dir = std::env::var("COLONY_DATA_DIR").map_err(|_| "set COLONY_DATA_DIR to the MNIST directory")?;

    let (full, prov) = MnistFiles::under(dir).load()?;
    let split = constrained_split(&full, 10_000, 2_000, 0, prov)?;
    let (fit_set, _) = carve_validation(&split.train, 0.1, 0)?;
    let mut agent = Agent::founder(kind, DEFAULT_WIDTH, 1)?;
    // one epoch per call so each epoch can be scored
    for e in 0..epochs {
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate,
            rule,
            seed: e as u64,
            ..TrainConfig::default()
        };
        let report = fit(&mut agent.network, &fit_set, &cfg)?;
        let eval = evaluate_agent(&agent, &split.test)?;
        println!(
            "epoch {e}: loss {:.4} in {:.1}s, test macro-F1 {:.4}, accuracy {:.4}",
            report.epoch_loss[0],
            report.seconds,
            eval.row.average,
            eval.confusion.accuracy()
        );
    }
    Ok(())
}
