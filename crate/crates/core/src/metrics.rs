//! Evaluation suite: prediction combination, accuracy, expected calibration
//! error, entropy-based diversity, FGSM and Gaussian input corruption, and
//! the entropy-threshold uncertainty filter.
//!
//! Conventions: accuracies and discard rates are percentages, calibration
//! error lives in [0,1], diversity in [0,100]. Entropy is natural-log
//! Shannon entropy; where a score is normalized it is divided by ln(c).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::network::{ForwardOpts, Network};
use crate::saliency::percentile;

/// How member outputs are merged into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    AvgSoftmax,
    MajorityVote,
}

/// Which ensemble-classified subset a score is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Correct,
    Wrong,
}

/// Combined predictions over one batch: the averaged softmax rows are kept
/// in both modes (calibration needs probabilities); only the predicted
/// class depends on the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    classes: usize,
    labels: Vec<usize>,
    per_model_logits: Vec<Vec<f64>>,
    probs: Vec<f64>,
    preds: Vec<usize>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

impl PredictionBatch {
    /// Builds the batch from per-model logits, each of length n*classes in
    /// row-major order.
    pub fn from_logits(
        per_model_logits: Vec<Vec<f64>>,
        classes: usize,
        labels: Vec<usize>,
        mode: CombineMode,
    ) -> Result<PredictionBatch> {
        if per_model_logits.is_empty() {
            return Err(Error::invalid("combine", "no models to combine"));
        }
        if classes == 0 || labels.is_empty() {
            return Err(Error::invalid("combine", "empty batch or zero classes"));
        }
        let n = labels.len();
        for (m, logits) in per_model_logits.iter().enumerate() {
            if logits.len() != n * classes {
                return Err(Error::invalid(
                    "combine",
                    format!(
                        "model {m} emitted {} values for {n} samples of {classes} classes",
                        logits.len()
                    ),
                ));
            }
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|&(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row,
            });
        }
        let models = per_model_logits.len();
        let mut probs = vec![0.0; n * classes];
        let mut votes: Vec<Vec<usize>> = vec![Vec::with_capacity(models); n];
        for logits in &per_model_logits {
            for i in 0..n {
                let row = softmax_row(&logits[i * classes..(i + 1) * classes]);
                votes[i].push(argmax(&row));
                for (j, p) in row.iter().enumerate() {
                    probs[i * classes + j] += p / models as f64;
                }
            }
        }
        let preds = (0..n)
            .map(|i| {
                let avg_row = &probs[i * classes..(i + 1) * classes];
                match mode {
                    CombineMode::AvgSoftmax => argmax(avg_row),
                    CombineMode::MajorityVote => {
                        let mut counts = vec![0usize; classes];
                        for &v in &votes[i] {
                            counts[v] += 1;
                        }
                        // Highest vote count; ties fall back to the larger
                        // averaged-softmax probability, then the lower index.
                        let mut best = 0usize;
                        for j in 1..classes {
                            let better = counts[j] > counts[best]
                                || (counts[j] == counts[best] && avg_row[j] > avg_row[best]);
                            if better {
                                best = j;
                            }
                        }
                        best
                    }
                }
            })
            .collect();
        Ok(PredictionBatch {
            classes,
            labels,
            per_model_logits,
            probs,
            preds,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn preds(&self) -> &[usize] {
        &self.preds
    }

    pub fn models(&self) -> usize {
        self.per_model_logits.len()
    }

    /// Averaged softmax probabilities, row-major [n, classes].
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn correct(&self) -> Vec<bool> {
        self.preds
            .iter()
            .zip(&self.labels)
            .map(|(p, l)| p == l)
            .collect()
    }

    /// Percent of samples whose combined prediction matches the label.
    pub fn accuracy_pct(&self) -> f64 {
        let hits = self
            .preds
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        100.0 * hits as f64 / self.labels.len() as f64
    }

    /// Max averaged probability per sample.
    pub fn confidences(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.prob_row(i)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Shannon entropy of the combined probability row per sample.
    pub fn entropies(&self) -> Vec<f64> {
        (0..self.len()).map(|i| entropy(self.prob_row(i))).collect()
    }
}

/// Runs every model on the batch and merges the outputs.
pub fn combine(
    models: &[Network],
    x: &Tensor,
    labels: &[usize],
    mode: CombineMode,
) -> Result<PredictionBatch> {
    if models.is_empty() {
        return Err(Error::invalid("combine", "no models to combine"));
    }
    let classes = models[0].spec().classes();
    if let Some(m) = models.iter().find(|m| m.spec().classes() != classes) {
        return Err(Error::invalid(
            "combine",
            format!(
                "class counts differ: {} vs {}",
                classes,
                m.spec().classes()
            ),
        ));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for model in models {
        let logits = model.forward_batch(x, &ForwardOpts::default())?;
        per_model.push(logits.data().to_vec());
    }
    PredictionBatch::from_logits(per_model, classes, labels.to_vec(), mode)
}

/// Expected calibration error over Z equal-width confidence bins on (0,1]:
/// a confidence c lands in the bin with ((z-1)/Z, z/Z] containing it.
pub fn ece(preds: &PredictionBatch, z: usize) -> Result<f64> {
    if z == 0 {
        return Err(Error::invalid("ece", "need at least one bin"));
    }
    if preds.is_empty() {
        return Err(Error::invalid("ece", "empty prediction set"));
    }
    let n = preds.len();
    let conf = preds.confidences();
    let correct = preds.correct();
    let mut count = vec![0usize; z];
    let mut acc_sum = vec![0.0; z];
    let mut conf_sum = vec![0.0; z];
    for i in 0..n {
        let idx = ((conf[i] * z as f64).ceil() as usize).clamp(1, z) - 1;
        count[idx] += 1;
        acc_sum[idx] += if correct[i] { 1.0 } else { 0.0 };
        conf_sum[idx] += conf[i];
    }
    let mut total = 0.0;
    for b in 0..z {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        total += (c / n as f64) * ((acc_sum[b] / c) - (conf_sum[b] / c)).abs();
    }
    Ok(total)
}

/// Mean normalized entropy (0..100) of the averaged-logits softmax over the
/// ensemble-correct or ensemble-wrong samples.
pub fn diversity_score(preds: &PredictionBatch, subset: Subset) -> Result<f64> {
    let models = preds.models();
    if models < 2 {
        return Err(Error::invalid(
            "diversity_score",
            "need at least two models",
        ));
    }
    let c = preds.classes();
    let correct = preds.correct();
    let mut total = 0.0;
    let mut taken = 0usize;
    for i in 0..preds.len() {
        let keep = match subset {
            Subset::Correct => correct[i],
            Subset::Wrong => !correct[i],
        };
        if !keep {
            continue;
        }
        let mut avg = vec![0.0; c];
        for logits in &preds.per_model_logits {
            for (j, v) in logits[i * c..(i + 1) * c].iter().enumerate() {
                avg[j] += v / models as f64;
            }
        }
        let p = softmax_row(&avg);
        total += entropy(&p) / (c as f64).ln() * 100.0;
        taken += 1;
    }
    if taken == 0 {
        return Err(Error::Metric(format!(
            "no {} samples to score",
            match subset {
                Subset::Correct => "correctly classified",
                Subset::Wrong => "misclassified",
            }
        )));
    }
    Ok(total / taken as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient-sign input corruption: x' = clip(x + eps * sign(dL/dx), 0, 1),
/// where L is the negative log-likelihood of the ensemble's averaged
/// softmax. Zero gradient leaves a pixel untouched.
pub fn fgsm(models: &[Network], x: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::invalid("fgsm", "no models to attack"));
    }
    if eps < 0.0 {
        return Err(Error::invalid("fgsm", format!("negative step {eps}")));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec())?;
    let mut avg = None;
    for model in models {
        let (logits, _) = model.forward_on(&mut tape, xid, &ForwardOpts::default())?;
        let probs = tape.softmax(logits)?;
        avg = Some(match avg {
            None => probs,
            Some(acc) => tape.add(acc, probs)?,
        });
    }
    let avg = tape.scale_const(avg.expect("at least one model"), 1.0 / models.len() as f64);
    let loss = tape.nll_probs(avg, labels)?;
    tape.backward(loss)?;
    let grad = tape.grad(xid);
    let data = x
        .data()
        .iter()
        .zip(grad)
        .map(|(v, g)| (v + eps * sign(*g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Additive Gaussian pixel noise clipped back to [0,1].
pub fn gaussian_corrupt(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::invalid("gaussian_corrupt", format!("negative sigma {sigma}")));
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::invalid("gaussian_corrupt", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x
        .data()
        .iter()
        .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Outcome of the entropy filter: overall accuracy, accuracy on the
/// retained samples (absent when everything was discarded), percent
/// discarded, and the threshold that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub accuracy_all_pct: f64,
    pub accuracy_filtered_pct: Option<f64>,
    pub discarded_pct: f64,
    pub threshold: f64,
}

/// Applies a fixed entropy threshold: samples with entropy strictly above
/// it are discarded.
pub fn filter_at_threshold(
    threshold: f64,
    entropies: &[f64],
    correct: &[bool],
) -> Result<FilterOutcome> {
    if entropies.is_empty() || entropies.len() != correct.len() {
        return Err(Error::invalid(
            "uncertainty_filter",
            "entropies and correctness flags must be non-empty and aligned",
        ));
    }
    let n = entropies.len() as f64;
    let hits_all = correct.iter().filter(|&&c| c).count() as f64;
    let mut kept = 0.0;
    let mut kept_hits = 0.0;
    for (e, &c) in entropies.iter().zip(correct) {
        if *e <= threshold {
            kept += 1.0;
            if c {
                kept_hits += 1.0;
            }
        }
    }
    Ok(FilterOutcome {
        accuracy_all_pct: 100.0 * hits_all / n,
        accuracy_filtered_pct: (kept > 0.0).then(|| 100.0 * kept_hits / kept),
        discarded_pct: 100.0 * (n - kept) / n,
        threshold,
    })
}

/// Thresholds at the 75th percentile of the development-set entropies of
/// correctly classified samples, then filters the evaluation batch.
pub fn uncertainty_filter(dev_correct_entropies: &[f64], eval: &PredictionBatch) -> Result<FilterOutcome> {
    if dev_correct_entropies.is_empty() {
        return Err(Error::invalid(
            "uncertainty_filter",
            "no development-set entropies to derive the threshold from",
        ));
    }
    let threshold = percentile(dev_correct_entropies, 75.0)?;
    filter_at_threshold(threshold, &eval.entropies(), &eval.correct())
}

/// Total member parameters over base parameters.
pub fn overhead(ensemble: &[Network], base: &Network) -> f64 {
    let total: usize = ensemble.iter().map(Network::param_count).sum();
    total as f64 / base.param_count() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::mlp;
    use crate::autodiff::gradcheck::central_diff;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn single_model_combination_is_its_softmax() {
        let logits = vec![vec![2.0, -1.0, 0.5, 0.0, 0.0, 3.0]];
        let batch =
            PredictionBatch::from_logits(logits.clone(), 3, vec![0, 2], CombineMode::AvgSoftmax)
                .unwrap();
        for i in 0..2 {
            let expect = softmax_row(&logits[0][i * 3..(i + 1) * 3]);
            for (a, b) in batch.prob_row(i).iter().zip(&expect) {
                approx(*a, *b, 1e-15);
            }
        }
    }

    #[test]
    fn opposed_saturated_models_average_to_half() {
        let a = vec![50.0, -50.0];
        let b = vec![-50.0, 50.0];
        let batch =
            PredictionBatch::from_logits(vec![a, b], 2, vec![0], CombineMode::AvgSoftmax).unwrap();
        approx(batch.prob_row(0)[0], 0.5, 1e-9);
        approx(batch.prob_row(0)[1], 0.5, 1e-9);
        approx(batch.prob_row(0).iter().sum::<f64>(), 1.0, 1e-9);
    }

    #[test]
    fn majority_vote_takes_the_modal_class() {
        let m0 = vec![5.0, 0.0];
        let m1 = vec![4.0, 0.0];
        let m2 = vec![0.0, 9.0];
        let batch =
            PredictionBatch::from_logits(vec![m0, m1, m2], 2, vec![1], CombineMode::MajorityVote)
                .unwrap();
        assert_eq!(batch.preds(), &[0]);
    }

    #[test]
    fn vote_ties_break_by_average_confidence() {
        // One vote each; model 1 is much more confident in class 1.
        let m0 = vec![1.0, 0.0];
        let m1 = vec![0.0, 8.0];
        let batch =
            PredictionBatch::from_logits(vec![m0, m1], 2, vec![0], CombineMode::MajorityVote)
                .unwrap();
        assert_eq!(batch.preds(), &[1]);
    }

    #[test]
    fn calibration_error_of_uniformly_overconfident_set() {
        let row = vec![0.95f64.ln(), 0.05f64.ln()];
        let logits: Vec<f64> = (0..20).flat_map(|_| row.clone()).collect();
        let batch =
            PredictionBatch::from_logits(vec![logits], 2, vec![0; 20], CombineMode::AvgSoftmax)
                .unwrap();
        approx(ece(&batch, 10).unwrap(), 0.05, 1e-9);
    }

    #[test]
    fn calibrated_bins_give_zero_error() {
        // Ten samples at confidence 0.8, eight of them correct.
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            logits.extend_from_slice(&[0.8f64.ln(), 0.2f64.ln()]);
            labels.push(if i < 8 { 0 } else { 1 });
        }
        let batch =
            PredictionBatch::from_logits(vec![logits], 2, labels, CombineMode::AvgSoftmax).unwrap();
        approx(ece(&batch, 10).unwrap(), 0.0, 1e-9);
    }

    #[test]
    fn one_bin_collapses_to_accuracy_vs_confidence() {
        let logits = vec![
            0.9f64.ln(),
            0.1f64.ln(),
            0.6f64.ln(),
            0.4f64.ln(),
            0.7f64.ln(),
            0.3f64.ln(),
        ];
        let batch =
            PredictionBatch::from_logits(vec![logits], 2, vec![0, 1, 0], CombineMode::AvgSoftmax)
                .unwrap();
        // accuracy 2/3, mean confidence (0.9 + 0.6 + 0.7)/3
        let expect = (2.0f64 / 3.0 - (0.9 + 0.6 + 0.7) / 3.0).abs();
        approx(ece(&batch, 1).unwrap(), expect, 1e-9);
        let single = PredictionBatch::from_logits(
            vec![vec![0.9f64.ln(), 0.1f64.ln()]],
            2,
            vec![1],
            CombineMode::AvgSoftmax,
        )
        .unwrap();
        approx(ece(&single, 15).unwrap(), 0.9, 1e-9);
        assert!(ece(&single, 0).is_err());
    }

    #[test]
    fn diversity_extremes() {
        let sat = vec![100.0, 0.0, 0.0, 100.0, 0.0, 0.0];
        let batch = PredictionBatch::from_logits(
            vec![sat.clone(), sat],
            3,
            vec![0, 0],
            CombineMode::AvgSoftmax,
        )
        .unwrap();
        assert!(diversity_score(&batch, Subset::Correct).unwrap() < 1e-6);

        let opposed_a = vec![10.0, -10.0];
        let opposed_b = vec![-10.0, 10.0];
        let batch = PredictionBatch::from_logits(
            vec![opposed_a, opposed_b],
            2,
            vec![0],
            CombineMode::AvgSoftmax,
        )
        .unwrap();
        let score = diversity_score(
            &batch,
            if batch.correct()[0] { Subset::Correct } else { Subset::Wrong },
        )
        .unwrap();
        approx(score, 100.0, 1e-9);
    }

    #[test]
    fn diversity_is_shift_invariant_and_needs_two_models() {
        let a = vec![1.0, 2.0, -0.5, 0.0, 1.0, 2.0];
        let b = vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0];
        let shift = 3.7;
        let batch = PredictionBatch::from_logits(
            vec![a.clone(), b.clone()],
            3,
            vec![1, 2],
            CombineMode::AvgSoftmax,
        )
        .unwrap();
        let shifted = PredictionBatch::from_logits(
            vec![
                a.iter().map(|v| v + shift).collect(),
                b.iter().map(|v| v + shift).collect(),
            ],
            3,
            vec![1, 2],
            CombineMode::AvgSoftmax,
        )
        .unwrap();
        for s in [Subset::Correct, Subset::Wrong] {
            match (diversity_score(&batch, s), diversity_score(&shifted, s)) {
                (Ok(x), Ok(y)) => approx(x, y, 1e-9),
                (Err(_), Err(_)) => {}
                other => panic!("shift changed subset availability: {other:?}"),
            }
        }
        let solo = PredictionBatch::from_logits(vec![a], 3, vec![1, 2], CombineMode::AvgSoftmax)
            .unwrap();
        assert!(diversity_score(&solo, Subset::Correct).is_err());
    }

    #[test]
    fn empty_subset_is_an_error() {
        let good = vec![9.0, 0.0];
        let batch = PredictionBatch::from_logits(
            vec![good.clone(), good],
            2,
            vec![0],
            CombineMode::AvgSoftmax,
        )
        .unwrap();
        assert!(diversity_score(&batch, Subset::Correct).is_ok());
        let err = diversity_score(&batch, Subset::Wrong).unwrap_err();
        assert!(matches!(err, Error::Metric(_)));
    }

    #[test]
    fn zero_step_attack_returns_the_input() {
        let spec = mlp(4, &[5], 3);
        let net = Network::build(&spec, 1);
        let x = Tensor::new(vec![2, 4], vec![0.3, 0.6, 0.2, 0.8, 0.5, 0.1, 0.9, 0.4]).unwrap();
        let adv = fgsm(&[net], &x, &[0, 2], 0.0).unwrap();
        assert_eq!(adv.data(), x.data());
        assert!(fgsm(&[], &x, &[0, 2], 0.1).is_err());
    }

    #[test]
    fn attack_direction_matches_finite_differences() {
        let spec = mlp(4, &[6], 3);
        let nets = vec![Network::build(&spec, 1), Network::build(&spec, 2)];
        let x = Tensor::new(vec![1, 4], vec![0.31, 0.62, 0.23, 0.84]).unwrap();
        let labels = [1usize];
        let eps = 0.01;
        let adv = fgsm(&nets, &x, &labels, eps).unwrap();
        let loss_at = |vals: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xid = tape.leaf(vals.to_vec(), vec![1, 4]).unwrap();
            let mut avg = None;
            for net in &nets {
                let (logits, _) = net.forward_on(&mut tape, xid, &ForwardOpts::default()).unwrap();
                let probs = tape.softmax(logits).unwrap();
                avg = Some(match avg {
                    None => probs,
                    Some(acc) => tape.add(acc, probs).unwrap(),
                });
            }
            let avg = tape.scale_const(avg.unwrap(), 0.5);
            let loss = tape.nll_probs(avg, &labels).unwrap();
            tape.value(loss)[0]
        };
        let mut f = |vals: &[f64]| loss_at(vals);
        let fd = central_diff(&mut f, x.data(), 1e-6);
        for i in 0..4 {
            let moved = adv.data()[i] - x.data()[i];
            assert!(moved.abs() <= eps + 1e-15);
            if fd[i].abs() > 1e-9 {
                approx(moved, eps * sign(fd[i]), 1e-15);
            }
        }
    }

    #[test]
    fn attack_never_leaves_the_unit_box() {
        let spec = mlp(3, &[4], 2);
        let net = Network::build(&spec, 5);
        let x = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.5, 0.99, 0.01, 0.02]).unwrap();
        let adv = fgsm(&[net], &x, &[0, 1], 0.25).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - b).abs() <= 0.25 + 1e-15);
        }
        assert!(fgsm(&[Network::build(&mlp(3, &[4], 2), 5)], &x, &[0, 1], -0.1).is_err());
    }

    #[test]
    fn gaussian_noise_is_seeded_and_clipped() {
        let x = Tensor::new(vec![1, 8], vec![0.0, 0.1, 0.5, 0.9, 1.0, 0.3, 0.7, 0.2]).unwrap();
        let a = gaussian_corrupt(&x, 0.3, 7).unwrap();
        let b = gaussian_corrupt(&x, 0.3, 7).unwrap();
        assert!(a.bits_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = gaussian_corrupt(&x, 0.3, 8).unwrap();
        assert!(a.data() != c.data());
        assert!(gaussian_corrupt(&x, -0.1, 0).is_err());
    }

    #[test]
    fn hand_built_filter_case() {
        let out = filter_at_threshold(
            0.5,
            &[0.1, 0.2, 0.9, 0.95],
            &[true, true, false, true],
        )
        .unwrap();
        approx(out.accuracy_all_pct, 75.0, 1e-12);
        approx(out.discarded_pct, 50.0, 1e-12);
        approx(out.accuracy_filtered_pct.unwrap(), 100.0, 1e-12);
    }

    #[test]
    fn lenient_threshold_discards_nothing() {
        let logits = vec![vec![2.0, 0.0, 1.0, 0.3, 0.2, 0.1]];
        let batch =
            PredictionBatch::from_logits(logits, 3, vec![0, 2], CombineMode::AvgSoftmax).unwrap();
        let out = uncertainty_filter(&[10.0, 10.0, 10.0, 10.0], &batch).unwrap();
        approx(out.discarded_pct, 0.0, 1e-12);
        approx(out.accuracy_filtered_pct.unwrap(), out.accuracy_all_pct, 1e-12);
    }

    #[test]
    fn discarding_everything_leaves_filtered_accuracy_undefined() {
        let out = filter_at_threshold(1e-6, &[0.5, 0.7], &[true, false]).unwrap();
        approx(out.discarded_pct, 100.0, 1e-12);
        assert!(out.accuracy_filtered_pct.is_none());
    }

    #[test]
    fn lower_thresholds_never_discard_less() {
        let entropies = [0.05, 0.3, 0.31, 0.6, 0.61, 0.9];
        let correct = [true; 6];
        let mut last = 0.0;
        for t in [1.0, 0.7, 0.5, 0.2, 0.01] {
            let out = filter_at_threshold(t, &entropies, &correct).unwrap();
            assert!(out.discarded_pct >= last);
            last = out.discarded_pct;
        }
    }

    #[test]
    fn filter_threshold_uses_the_percentile_rule() {
        let h = [0.1, 0.2, 0.3, 0.4];
        let logits = vec![vec![5.0, 0.0]];
        let batch =
            PredictionBatch::from_logits(logits, 2, vec![0], CombineMode::AvgSoftmax).unwrap();
        let out = uncertainty_filter(&h, &batch).unwrap();
        approx(out.threshold, percentile(&h, 75.0).unwrap(), 0.0);
    }

    #[test]
    fn parameter_overhead_ratios() {
        let spec = mlp(4, &[8], 3);
        let base = Network::build(&spec, 0);
        approx(overhead(&[base.clone()], &base), 1.0, 0.0);
        let five: Vec<Network> = (0..5).map(|s| Network::build(&spec, s)).collect();
        approx(overhead(&five, &base), 5.0, 0.0);
    }
}
