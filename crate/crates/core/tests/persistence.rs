use std::time::Instant;

use colony_core::agent::{AgentStatus, TrainingEntry};
use colony_core::marriage::{inter_marry, intra_marry, MarriageConfig};
use colony_core::registry::{Registry, TaskSpec};
use colony_core::zoo::ArchetypeKind;
use colony_core::ColonyError;

const W: f64 = 1.0 / 16.0;

fn founder(reg: &mut Registry, kind: ArchetypeKind, seed: u64) -> String {
    reg.register_founder(kind, W, seed).unwrap().id.clone()
}

fn intra(reg: &mut Registry, a: &str, b: &str, seed: u64) -> Vec<String> {
    let out = intra_marry(reg.agent(a).unwrap(), reg.agent(b).unwrap(), &MarriageConfig::with_seed(seed)).unwrap();
    let event = out.event_id.clone();
    let ids = reg.admit(out).unwrap();
    reg.record_marriage(&event, 10_000, |_| 3).unwrap();
    ids
}

fn inter(reg: &mut Registry, a: &str, b: &str, seed: u64) -> Vec<String> {
    let out = inter_marry(reg.agent(a).unwrap(), reg.agent(b).unwrap(), &MarriageConfig::with_seed(seed)).unwrap();
    let event = out.event_id.clone();
    let ids = reg.admit(out).unwrap();
    reg.record_marriage(&event, 10_000, |k| if k == ArchetypeKind::Organized { 7 } else { 3 })
        .unwrap();
    ids
}

/// Founders, their children, and grandchildren across all three archetypes.
fn three_generations() -> (Registry, Vec<String>) {
    let mut reg = Registry::new();
    reg.add_task(TaskSpec::new("mnist-10000", "train-images-idx3-ubyte", 10).unwrap())
        .unwrap();
    let f = [
        founder(&mut reg, ArchetypeKind::Fast, 1),
        founder(&mut reg, ArchetypeKind::Fast, 2),
        founder(&mut reg, ArchetypeKind::Organized, 3),
        founder(&mut reg, ArchetypeKind::Detailed, 4),
    ];
    reg.record_training(
        &f[0],
        TrainingEntry {
            task: "mnist-10000".into(),
            epochs: 3,
            data_size: 9000,
            seconds: 1.5,
        },
    )
    .unwrap();
    let g2a = intra(&mut reg, &f[0], &f[1], 10);
    let g2b = inter(&mut reg, &f[2], &f[3], 11);
    let g3 = inter(&mut reg, &g2a[0], &g2b[0], 12);
    let mut leaves = g3.clone();
    leaves.extend(intra(&mut reg, &g2a[0], &f[0], 13));
    (reg, leaves)
}

#[test]
fn three_generation_round_trip_is_lossless() {
    let start = Instant::now();
    let (reg, leaves) = three_generations();
    let dir = tempfile::tempdir().unwrap();
    reg.persist(dir.path()).unwrap();
    let back = Registry::load(dir.path()).unwrap();

    assert_eq!(back.tasks(), reg.tasks());
    assert_eq!(back.edges(), reg.edges());
    assert_eq!(back.families(), reg.families());
    assert_eq!(back.events(), reg.events());
    assert_eq!(back.agents().len(), reg.agents().len());
    for a in reg.agents() {
        let b = back.agent(&a.id).unwrap();
        assert_eq!((a.kind, a.width, a.seed, a.status), (b.kind, b.width, b.seed, b.status));
        assert_eq!(a.history, b.history);
        let ids: Vec<&str> = a.network.parameter_ids().collect();
        assert_eq!(ids, b.network.parameter_ids().collect::<Vec<_>>());
        for id in ids {
            let (x, y) = (a.network.block(id).unwrap(), b.network.block(id).unwrap());
            let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x.values.data()), bits(y.values.data()), "{id}");
        }
        assert!(a.network.buffers().eq(b.network.buffers()));
        assert_eq!(reg.lineage_of(&a.id).unwrap(), back.lineage_of(&a.id).unwrap());
    }
    // grandchildren reach all four founders through two marriages
    let lineage = back.lineage_of(&leaves[0]).unwrap();
    let founders = lineage
        .iter()
        .filter(|x| back.agent(&x.id).unwrap().status == AgentStatus::Founder)
        .count();
    assert_eq!(founders, 4);
    assert_eq!(lineage.len(), 6);
    for child in back.agents().iter().filter(|a| a.status == AgentStatus::Child) {
        assert_eq!(back.edges().iter().filter(|e| e.child == child.id).count(), 2);
        let family = back.family_of(&child.id).unwrap().record;
        assert!(family.r == family.p || family.r == family.q);
    }
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn corrupted_weight_file_is_reported_with_position() {
    let (reg, _) = three_generations();
    let dir = tempfile::tempdir().unwrap();
    reg.persist(dir.path()).unwrap();
    let weights = dir.path().join("weights");
    let file = std::fs::read_dir(&weights).unwrap().next().unwrap().unwrap().path();
    let mut bytes = std::fs::read(&file).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&file, bytes).unwrap();
    match Registry::load(dir.path()) {
        Err(ColonyError::Load { position, .. }) => assert!(position.starts_with("weights/"), "{position}"),
        other => panic!("expected load error, got {:?}", other.err()),
    }
}

#[test]
fn tampered_lineage_line_is_reported() {
    let (reg, _) = three_generations();
    let dir = tempfile::tempdir().unwrap();
    reg.persist(dir.path()).unwrap();
    let path = dir.path().join("colony.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let edge = lines.iter().position(|l| l.contains("\"edge\"")).unwrap();
    lines[edge] = "{\"record\":\"edge\",\"parent\":".into();
    std::fs::write(&path, lines.join("\n")).unwrap();
    match Registry::load(dir.path()) {
        Err(ColonyError::Load { position, .. }) => assert_eq!(position, format!("colony.jsonl line {}", edge + 1)),
        other => panic!("expected load error, got {:?}", other.err()),
    }
}
