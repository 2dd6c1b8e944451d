//! Per-class F1, one-vs-rest ROC, and the colony's collective decision.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::data::{self, LabeledImage};
use crate::error::{ColonyError, Result};
use crate::nn::Mode;

pub const EVAL_BATCH: usize = 256;

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(labels: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(ColonyError::Input(format!(
                "{} labels but {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in labels.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(ColonyError::Input(format!("label pair ({t}, {p}) out of range")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGridRow {
    pub f1: Vec<f64>,
    /// Macro average of `f1`.
    pub average: f64,
    /// Classes whose precision and recall denominators were both zero.
    pub degenerate: Vec<usize>,
}

impl AccuracyGridRow {
    pub fn from_f1(f1: Vec<f64>) -> Self {
        let average = f1.iter().sum::<f64>() / f1.len().max(1) as f64;
        AccuracyGridRow {
            f1,
            average,
            degenerate: Vec::new(),
        }
    }
}

/// `F1_c = 2·P·R / (P + R)`; any zero denominator yields 0.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Result<AccuracyGridRow> {
    if cm.total() == 0 {
        return Err(ColonyError::Input("confusion matrix is empty".into()));
    }
    let k = cm.classes();
    let mut f1 = Vec::with_capacity(k);
    let mut degenerate = Vec::new();
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        if predicted == 0 && actual == 0 {
            degenerate.push(c);
        }
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mut row = AccuracyGridRow::from_f1(f1);
    row.degenerate = degenerate;
    Ok(row)
}

/// Per-sample class scores with their true labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub classes: usize,
    /// Row-major `n × classes`.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(classes: usize, scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if classes == 0 || scores.len() != classes * labels.len() {
            return Err(ColonyError::Input(format!(
                "{} scores for {} samples of {classes} classes",
                scores.len(),
                labels.len()
            )));
        }
        Ok(ScoreMatrix {
            classes,
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(false positive rate, true positive rate)` from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold sweep over class `c`'s score, equal scores taken as one step.
pub fn roc_one_vs_rest(scores: &ScoreMatrix, c: usize) -> Result<RocCurve> {
    if c >= scores.classes {
        return Err(ColonyError::Input(format!("class {c} out of range")));
    }
    let mut pairs: Vec<(f64, bool)> = (0..scores.len())
        .map(|i| (scores.row(i)[c], scores.labels[i] == c))
        .collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ColonyError::Evaluation(format!(
            "class {c} needs both positives and negatives ({pos} / {neg})"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count space, normalized once at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        class: c,
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveMode {
    Majority,
    #[default]
    F1WeightedSoft,
}

impl FromStr for CollectiveMode {
    type Err = ColonyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(CollectiveMode::Majority),
            "f1-weighted-soft" | "soft" => Ok(CollectiveMode::F1WeightedSoft),
            other => Err(ColonyError::Input(format!("unknown collective mode {other}"))),
        }
    }
}

/// Combine member score vectors into one label.
///
/// Majority: plurality of member argmaxes, ties broken by summed scores and
/// then by the lowest label. F1-weighted-soft: `argmax_c Σ_m F1_m(c)·s_m(c)`,
/// lowest label on ties.
pub fn collective_decide(scores: &[&[f64]], weights: &[&[f64]], mode: CollectiveMode) -> Result<usize> {
    let Some(first) = scores.first() else {
        return Err(ColonyError::Input("collective decision needs at least one member".into()));
    };
    let k = first.len();
    if scores.iter().any(|s| s.len() != k) || weights.len() != scores.len() || weights.iter().any(|w| w.len() != k) {
        return Err(ColonyError::Input("member score and weight vectors must all have the class count".into()));
    }
    let mut summed = vec![0.0; k];
    for s in scores {
        for (t, &v) in summed.iter_mut().zip(s.iter()) {
            *t += v;
        }
    }
    match mode {
        CollectiveMode::Majority => {
            let mut votes = vec![0usize; k];
            for s in scores {
                votes[argmax(s)] += 1;
            }
            let top = *votes.iter().max().expect("k > 0");
            let mut best: Option<usize> = None;
            for c in (0..k).filter(|&c| votes[c] == top) {
                if best.is_none_or(|b| summed[c] > summed[b]) {
                    best = Some(c);
                }
            }
            Ok(best.expect("at least one top label"))
        }
        CollectiveMode::F1WeightedSoft => {
            let mut total = vec![0.0; k];
            for (s, w) in scores.iter().zip(weights) {
                for c in 0..k {
                    total[c] += w[c] * s[c];
                }
            }
            Ok(argmax(&total))
        }
    }
}

/// Colony decision for one image: each member scores it in eval mode and
/// its grid row supplies the per-class weights.
pub fn collective_predict(
    members: &[(&Agent, &AccuracyGridRow)],
    image: &LabeledImage,
    mode: CollectiveMode,
) -> Result<usize> {
    if members.is_empty() {
        return Err(ColonyError::Input("collective decision needs at least one member".into()));
    }
    let batch = data::to_batch(&[image])?;
    let mut scores = Vec::with_capacity(members.len());
    for (agent, _) in members {
        let probs = agent.network.forward(&batch, Mode::Eval)?;
        scores.push(probs.data().iter().map(|&v| v as f64).collect::<Vec<f64>>());
    }
    let s: Vec<&[f64]> = scores.iter().map(Vec::as_slice).collect();
    let w: Vec<&[f64]> = members.iter().map(|(_, r)| r.f1.as_slice()).collect();
    collective_decide(&s, &w, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub scores: ScoreMatrix,
    pub row: AccuracyGridRow,
}

/// Softmax scores of `agent` over `images` (eval mode, batched).
pub fn score_images(agent: &Agent, images: &[LabeledImage]) -> Result<ScoreMatrix> {
    let classes = agent.network.classes();
    let mut scores = Vec::with_capacity(images.len() * classes);
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let probs = agent.network.forward(&data::to_batch(&refs)?, Mode::Eval)?;
        scores.extend(probs.data().iter().map(|&v| v as f64));
    }
    ScoreMatrix::new(classes, scores, images.iter().map(|x| x.label as usize).collect())
}

pub fn evaluate_agent(agent: &Agent, images: &[LabeledImage]) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(ColonyError::Input("cannot evaluate on an empty split".into()));
    }
    let scores = score_images(agent, images)?;
    let confusion = ConfusionMatrix::from_predictions(&scores.labels, &scores.predictions(), scores.classes)?;
    let row = per_class_f1(&confusion)?;
    Ok(Evaluation {
        confusion,
        scores,
        row,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal() {
        let labels: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let cm = ConfusionMatrix::from_predictions(&labels, &labels, 10).unwrap();
        let row = per_class_f1(&cm).unwrap();
        assert!(row.f1.iter().all(|&f| f == 1.0));
        assert_eq!(row.average, 1.0);
    }

    #[test]
    fn hand_computed_f1() {
        // class 0: TP 8, FP 2, FN 4
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![vec![8, 4], vec![2, 6]];
        let row = per_class_f1(&cm).unwrap();
        let (p, r) = (0.8, 8.0 / 12.0);
        assert!((row.f1[0] - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!((row.f1[0] - 0.7273).abs() < 1e-4);
    }

    #[test]
    fn absent_class_flagged() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1], &[0, 1], 3).unwrap();
        let row = per_class_f1(&cm).unwrap();
        assert_eq!(row.f1[2], 0.0);
        assert_eq!(row.degenerate, vec![2]);
        assert!(per_class_f1(&ConfusionMatrix::new(3)).is_err());
    }

    fn two_class(scores: &[(f64, usize)]) -> ScoreMatrix {
        let s = scores.iter().flat_map(|&(v, _)| [1.0 - v, v]).collect();
        ScoreMatrix::new(2, s, scores.iter().map(|x| x.1).collect()).unwrap()
    }

    #[test]
    fn auc_extremes() {
        let sep = two_class(&[(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]);
        assert_eq!(roc_one_vs_rest(&sep, 1).unwrap().auc, 1.0);
        let flat = two_class(&[(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]);
        let roc = roc_one_vs_rest(&flat, 1).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        let one = two_class(&[(0.5, 1), (0.4, 1)]);
        assert!(matches!(roc_one_vs_rest(&one, 1), Err(ColonyError::Evaluation(_))));
    }

    #[test]
    fn auc_matches_pair_count_on_six_points() {
        let pts = [(0.9, 1), (0.7, 0), (0.7, 1), (0.4, 1), (0.3, 0), (0.1, 0)];
        let roc = roc_one_vs_rest(&two_class(&pts), 1).unwrap();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for &(sp, lp) in &pts {
            for &(sn, ln) in &pts {
                if lp == 1 && ln == 0 {
                    pairs += 1.0;
                    wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((roc.auc - wins / pairs).abs() < 1e-9);
    }

    #[test]
    fn collective_modes() {
        let ones = [1.0; 2];
        let a = [0.6, 0.4];
        let b = [0.4, 0.6];
        for mode in [CollectiveMode::Majority, CollectiveMode::F1WeightedSoft] {
            assert_eq!(collective_decide(&[&a, &b], &[&ones, &ones], mode).unwrap(), 0);
            assert_eq!(collective_decide(&[&b, &b], &[&ones, &ones], mode).unwrap(), 1);
        }
        assert!(collective_decide(&[], &[], CollectiveMode::Majority).is_err());
    }

    #[test]
    fn weak_member_outvoted_on_digit_zero() {
        // weights from the published per-class F1 of digit 0
        let mut w = [[0.9; 10]; 3];
        w[0][0] = 0.95;
        w[1][0] = 0.49;
        w[2][0] = 0.97;
        let mut strong = [0.02; 10];
        strong[0] = 0.82;
        let mut dissent = [0.02; 10];
        dissent[6] = 0.82;
        let scores: [&[f64]; 3] = [&strong, &dissent, &strong];
        let weights: Vec<&[f64]> = w.iter().map(|r| r.as_slice()).collect();
        assert_eq!(collective_decide(&scores, &weights, CollectiveMode::F1WeightedSoft).unwrap(), 0);
    }
}
