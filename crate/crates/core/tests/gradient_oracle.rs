use std::time::Instant;

use colony_core::data::{synthetic_fixture, to_batch, LabeledImage};
use colony_core::nn::{finite_diff_check, Network};
use colony_core::zoo::{build, spec_for, ArchetypeKind};

fn batch4() -> (colony_core::nn::Tensor<f64>, Vec<usize>) {
    let images = synthetic_fixture(10, 5).unwrap();
    let refs: Vec<&LabeledImage> = images.iter().take(4).collect();
    let labels = refs.iter().map(|x| x.label as usize).collect();
    (to_batch(&refs).unwrap().cast::<f64>(), labels)
}

#[test]
fn archetype_gradients_match_central_differences() {
    let (batch, labels) = batch4();
    let start = Instant::now();
    for kind in ArchetypeKind::ALL {
        let net: Network<f64> = build::<f32>(&spec_for(kind, 1.0 / 16.0).unwrap(), 11).unwrap().cast();
        let report = finite_diff_check(&net, &batch, &labels, 1e-6).unwrap();
        println!(
            "{kind}: max rel error {:.3e} over {} coordinates ({} kinks skipped, worst {:?})",
            report.max_rel_error, report.checked, report.skipped_kinks, report.worst
        );
        assert!(report.checked >= 150, "{kind}: only {} coordinates checked", report.checked);
        assert!(report.max_rel_error < 1e-4, "{kind}: {:?}", report);
    }
    assert!(start.elapsed().as_secs() < 60);
}
