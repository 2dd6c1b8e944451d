//! Central-difference gradient oracle.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::index;

use super::layer::LayerSpec;
use super::network::{Cache, Network, Trace};
use super::tensor::Tensor;
use crate::error::{ColonyError, Result};
use crate::seed;

pub const MIN_SAMPLED_COORDINATES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crosses a ReLU or max-pool switch.
    pub skipped_kinks: usize,
    /// Block id and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Fingerprint of every piecewise-linear switch (ReLU sign, max-pool winner).
fn kink_signature(net: &Network<f64>, trace: &Trace<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            LayerSpec::Relu => {
                for &v in trace.acts[i].data() {
                    (v > 0.0).hash(&mut h);
                }
            }
            LayerSpec::MaxPool { .. } => {
                if let Cache::Pool(arg) = &trace.caches[i] {
                    arg.hash(&mut h);
                }
            }
            _ => {}
        }
    }
    h.finish()
}

/// Compare analytic gradients of `net` against central differences on a
/// sampled set of parameter coordinates (all of them when there are fewer
/// than [`MIN_SAMPLED_COORDINATES`]).
///
/// Coordinates where the perturbed forward passes change any ReLU sign or
/// max-pool winner are excluded; the loss is not differentiable there.
pub fn finite_diff_check(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(ColonyError::Input(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mode = net.mode;
    let (_, grads, trace) = net.gradients(batch, labels, mode)?;
    let base_sig = kink_signature(net, &trace);

    // Every block gets at least one coordinate; the rest are drawn uniformly.
    let blocks: Vec<(String, usize)> = net
        .parameters()
        .map(|p| (p.id.clone(), p.values.len()))
        .collect();
    let total: usize = blocks.iter().map(|(_, n)| n).sum();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= MIN_SAMPLED_COORDINATES {
        for (b, (_, n)) in blocks.iter().enumerate() {
            coords.extend((0..*n).map(|i| (b, i)));
        }
    } else {
        let mut rng = seed::rng(0x6772_6164);
        for (b, (_, n)) in blocks.iter().enumerate() {
            coords.push((b, index::sample(&mut rng, *n, 1).index(0)));
        }
        let extra = MIN_SAMPLED_COORDINATES.saturating_sub(coords.len());
        let offsets: Vec<usize> = blocks
            .iter()
            .scan(0, |acc, (_, n)| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect();
        for flat in index::sample(&mut rng, total, extra.min(total)).iter() {
            let b = offsets.partition_point(|&o| o <= flat) - 1;
            let c = (b, flat - offsets[b]);
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
    }

    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for (b, i) in coords {
        let id = &blocks[b].0;
        let original = net.block(id).unwrap().values.data()[i];
        let mut eval = |value: f64| -> Result<(f64, u64)> {
            probe.block_mut(id).unwrap().values.data_mut()[i] = value;
            let t = probe.run(batch, mode)?;
            let loss = super::ops::cross_entropy(t.logits(), labels);
            Ok((loss, kink_signature(&probe, &t)))
        };
        let (plus, sig_plus) = eval(original + eps)?;
        let (minus, sig_minus) = eval(original - eps)?;
        probe.block_mut(id).unwrap().values.data_mut()[i] = original;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * eps);
        let analytic = grads[id][i];
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((id.clone(), i));
        }
    }
    Ok(report)
}
