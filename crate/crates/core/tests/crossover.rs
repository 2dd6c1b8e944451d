use std::time::Instant;

use colony_core::agent::Agent;
use colony_core::marriage::{inter_marry, intra_marry, mutate_with, MarriageConfig};
use colony_core::nn::Tensor;
use colony_core::seed;
use colony_core::zoo::{enumerate_modules, resolve_units, ArchetypeKind, DEFAULT_WIDTH};

fn filled(kind: ArchetypeKind, width: f64, value: f32, seed: u64) -> Agent {
    let mut agent = Agent::founder(kind, width, seed).unwrap();
    let ids: Vec<String> = agent.network.parameter_ids().map(str::to_string).collect();
    for id in ids {
        let shape = agent.network.block(&id).unwrap().values.shape().to_vec();
        agent.network.set_values(&id, Tensor::filled(&shape, value)).unwrap();
    }
    agent
}

fn pre_mutation(seed: u64) -> MarriageConfig {
    MarriageConfig {
        mutation_rate: 0.0,
        ..MarriageConfig::with_seed(seed)
    }
}

/// Value every element of `ids` holds in `agent`, if they all agree.
fn uniform_value(agent: &Agent, ids: &[String]) -> Option<f32> {
    let first = agent.network.block(&ids[0]).unwrap().values.data()[0];
    ids.iter()
        .all(|id| agent.network.block(id).unwrap().values.data().iter().all(|&v| v == first))
        .then_some(first)
}

#[test]
fn intra_inheritance_frequency_is_unbiased() {
    let start = Instant::now();
    let zero = filled(ArchetypeKind::Fast, DEFAULT_WIDTH, 0.0, 1);
    let one = filled(ArchetypeKind::Fast, DEFAULT_WIDTH, 1.0, 2);
    let manifest = enumerate_modules(&zero.spec()).unwrap();
    let mut from_a = vec![0usize; manifest.modules.len()];
    let trials = 1000;
    for t in 0..trials {
        let out = intra_marry(&zero, &one, &pre_mutation(seed::derive(77, &format!("trial/{t}")))).unwrap();
        let child = &out.children[0];
        for (m, module) in manifest.modules.iter().enumerate() {
            // bitwise equal to one parent's module
            let v = uniform_value(child, &module.block_ids()).expect("module mixes parents");
            assert!(v == 0.0 || v == 1.0);
            assert_eq!(out.crossover[m].parent, v as usize);
            if v == 0.0 {
                from_a[m] += 1;
            }
        }
    }
    for (module, count) in manifest.modules.iter().zip(&from_a) {
        let freq = *count as f64 / trials as f64;
        println!("{}: parent-A frequency {freq:.3}", module.address);
        assert!((0.46..=0.54).contains(&freq), "{}: {freq}", module.address);
    }
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn inter_children_follow_their_logs() {
    for (ka, kb) in [
        (ArchetypeKind::Fast, ArchetypeKind::Organized),
        (ArchetypeKind::Fast, ArchetypeKind::Detailed),
        (ArchetypeKind::Detailed, ArchetypeKind::Organized),
    ] {
        let a = filled(ka, 1.0 / 16.0, 0.0, 1);
        let b = filled(kb, 1.0 / 16.0, 1.0, 2);
        let parents = [&a, &b];
        let out = inter_marry(&a, &b, &pre_mutation(5)).unwrap();
        assert_eq!(out.children.len(), 2);
        assert_eq!(out.children[0].kind, ka);
        assert_eq!(out.children[1].kind, kb);
        let mut imported = 0;
        for entry in &out.crossover {
            let child = &out.children[entry.child];
            let own = enumerate_modules(&parents[entry.child].spec()).unwrap();
            let other = enumerate_modules(&parents[1 - entry.child].spec()).unwrap();
            let own_value = entry.child as f32;
            let other_value = 1.0 - own_value;
            let module = own.modules.iter().find(|m| m.address == entry.module).unwrap();
            let mut overwritten = Vec::new();
            for import in &entry.imports {
                let targets = resolve_units(&own, &import.target).unwrap();
                let sources = resolve_units(&other, &import.source).unwrap();
                assert_eq!(targets.len(), 1);
                let (t, s) = (targets[0], sources[0]);
                // weight always; bias and norm only where both sides carry them
                overwritten.push(t.weight.clone());
                if let (Some(b), Some(_)) = (&t.bias, &s.bias) {
                    overwritten.push(b.clone());
                }
                if let (Some(bn), Some(_)) = (&t.bn, &s.bn) {
                    overwritten.extend([bn.gamma.clone(), bn.beta.clone()]);
                }
            }
            imported += entry.imports.len();
            for id in module.block_ids() {
                let expect = if overwritten.contains(&id) { other_value } else { own_value };
                let values = child.network.block(&id).unwrap().values.data();
                assert!(values.iter().all(|&v| v == expect), "{id}");
            }
        }
        assert!(imported > 0, "{ka} x {kb}: seed 5 exchanged nothing");
    }
}

#[test]
fn mutation_count_stays_in_binomial_band() {
    // 100 -> 100 3x3 modules: 90,000 coordinates per weight block
    let width = 100.0 / 512.0;
    let agent = Agent::founder(ArchetypeKind::Fast, width, 3).unwrap();
    assert_eq!(agent.network.block("s5.m2.weight").unwrap().values.len(), 90_000);
    let cfg = MarriageConfig::with_seed(0);
    for s in 0..20 {
        let mut net = agent.network.clone();
        let log = mutate_with(&mut net, &cfg, &mut seed::rng(s));
        let count = log["s5.m2.weight"];
        assert!((600..=1200).contains(&count), "seed {s}: {count}");
        let changed = net
            .block("s5.m2.weight")
            .unwrap()
            .values
            .data()
            .iter()
            .zip(agent.network.block("s5.m2.weight").unwrap().values.data())
            .filter(|(x, y)| x != y)
            .count();
        assert!(changed <= count);
        assert!(!log.contains_key("fc1.weight"));
    }
}
