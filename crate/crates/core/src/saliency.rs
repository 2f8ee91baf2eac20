//! Scaling-vector training, gradient saliency, percentile thresholds, and
//! the index sets of retained neurons.
//!
//! Saliency of a scaling entry is the absolute dataset-averaged gradient of
//! the loss with respect to it. Gradients are accumulated batch-wise as
//! signed sums and divided by the total sample count before the absolute
//! value is taken, so the result is independent of the batch split. The
//! normalized values are then ranked against a percentile threshold; only
//! strictly greater entries survive.

use crate::autodiff::{Reduction, SgdOptimizer, Tape, Tensor};
use crate::data::{shuffled_batches, Dataset};
use crate::diversity::{penalty_on_tape, KernelSpec};
use crate::error::{Error, Result};
use crate::network::{partition_batch, ForwardOpts, Network, ScalingSet};

/// Normalization and thresholding scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    PerLayer,
}

/// Normalized saliency values, one vector per prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    layers: Vec<Vec<f64>>,
    scope: Scope,
}

impl SaliencyMap {
    /// Normalizes raw nonnegative magnitudes: globally they sum to one,
    /// per-layer each layer sums to one. A zero-sum pool cannot be ranked.
    pub fn from_raw(raw: Vec<Vec<f64>>, scope: Scope) -> Result<SaliencyMap> {
        for (l, layer) in raw.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::invalid("saliency", format!("layer {l} has no neurons")));
            }
            if layer.iter().any(|&v| v < 0.0 || v.is_nan()) {
                return Err(Error::invalid(
                    "saliency",
                    format!("layer {l} holds a negative or NaN magnitude"),
                ));
            }
        }
        let mut layers = raw;
        match scope {
            Scope::Global => {
                let total: f64 = layers.iter().flatten().sum();
                if total == 0.0 {
                    return Err(Error::DegenerateSaliency(
                        "all gradient magnitudes are zero".into(),
                    ));
                }
                for layer in &mut layers {
                    for v in layer {
                        *v /= total;
                    }
                }
            }
            Scope::PerLayer => {
                for (l, layer) in layers.iter_mut().enumerate() {
                    let total: f64 = layer.iter().sum();
                    if total == 0.0 {
                        return Err(Error::DegenerateSaliency(format!(
                            "layer {l} has all-zero gradient magnitudes"
                        )));
                    }
                    for v in layer {
                        *v /= total;
                    }
                }
            }
        }
        Ok(SaliencyMap { layers, scope })
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }
}

/// Threshold(s) produced by [`threshold`].
#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    Global(f64),
    PerLayer(Vec<f64>),
}

/// Sorted retained output-neuron indices per prunable layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    layers: Vec<Vec<usize>>,
}

impl IndexSets {
    pub fn new(layers: Vec<Vec<usize>>) -> IndexSets {
        IndexSets { layers }
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn kept(&self, layer: usize) -> &[usize] {
        &self.layers[layer]
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn is_subset_of(&self, other: &IndexSets) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.iter().all(|i| b.contains(i)))
    }
}

/// p-th percentile with linear interpolation between the two closest order
/// statistics, for 0 <= p < 100.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile", "no values to rank"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("percentile", "NaN in value pool"));
    }
    if !(0.0..100.0).contains(&p) {
        return Err(Error::invalid("percentile", format!("p {p} outside [0, 100)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let j = rank.floor() as usize;
    let frac = rank - j as f64;
    if frac == 0.0 || j + 1 == sorted.len() {
        Ok(sorted[j])
    } else {
        Ok(sorted[j] + frac * (sorted[j + 1] - sorted[j]))
    }
}

fn check_protected(map: &SaliencyMap, protected: Option<&[Vec<bool>]>) -> Result<()> {
    if let Some(prot) = protected {
        if prot.len() != map.layers.len()
            || prot
                .iter()
                .zip(&map.layers)
                .any(|(p, l)| p.len() != l.len())
        {
            return Err(Error::invalid(
                "saliency",
                "protected mask shapes do not match the saliency map",
            ));
        }
    }
    Ok(())
}

fn pool<'a>(layer: &'a [f64], prot: Option<&'a [bool]>) -> impl Iterator<Item = (usize, f64)> + 'a {
    layer
        .iter()
        .copied()
        .enumerate()
        .filter(move |&(j, _)| prot.map_or(true, |p| !p[j]))
}

/// Percentile threshold(s) over the saliency pool. Protected neurons are
/// excluded from the pool before the percentile is taken.
pub fn threshold(
    map: &SaliencyMap,
    p: f64,
    scope: Scope,
    protected: Option<&[Vec<bool>]>,
) -> Result<Thresholds> {
    check_protected(map, protected)?;
    match scope {
        Scope::Global => {
            let values: Vec<f64> = map
                .layers
                .iter()
                .enumerate()
                .flat_map(|(l, layer)| {
                    pool(layer, protected.map(|pr| pr[l].as_slice())).map(|(_, v)| v)
                })
                .collect();
            Ok(Thresholds::Global(percentile(&values, p)?))
        }
        Scope::PerLayer => {
            let mut ths = Vec::with_capacity(map.layers.len());
            for (l, layer) in map.layers.iter().enumerate() {
                let values: Vec<f64> = pool(layer, protected.map(|pr| pr[l].as_slice()))
                    .map(|(_, v)| v)
                    .collect();
                if values.is_empty() {
                    return Err(Error::invalid(
                        "threshold",
                        format!("layer {l} has no unprotected neurons"),
                    ));
                }
                ths.push(percentile(&values, p)?);
            }
            Ok(Thresholds::PerLayer(ths))
        }
    }
}

/// Keeps the strictly-above-threshold neurons per layer. A layer that would
/// come out empty keeps its single highest-saliency candidate instead (ties
/// resolved toward the lowest index). Protected neurons never qualify.
pub fn select_indices(
    map: &SaliencyMap,
    th: &Thresholds,
    protected: Option<&[Vec<bool>]>,
) -> Result<IndexSets> {
    check_protected(map, protected)?;
    if let Thresholds::PerLayer(v) = th {
        if v.len() != map.layers.len() {
            return Err(Error::invalid(
                "select_indices",
                format!("{} thresholds for {} layers", v.len(), map.layers.len()),
            ));
        }
    }
    let mut layers = Vec::with_capacity(map.layers.len());
    for (l, layer) in map.layers.iter().enumerate() {
        let th_l = match th {
            Thresholds::Global(t) => *t,
            Thresholds::PerLayer(v) => v[l],
        };
        let prot = protected.map(|pr| pr[l].as_slice());
        let kept: Vec<usize> = pool(layer, prot)
            .filter(|&(_, v)| v > th_l)
            .map(|(j, _)| j)
            .collect();
        if kept.is_empty() {
            let best = pool(layer, prot)
                .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                    Some((_, bv)) if v <= bv => acc,
                    _ => Some((j, v)),
                })
                .ok_or_else(|| {
                    Error::invalid(
                        "select_indices",
                        format!("layer {l} has no unprotected neurons"),
                    )
                })?;
            layers.push(vec![best.0]);
        } else {
            layers.push(kept);
        }
    }
    Ok(IndexSets { layers })
}

/// Options for [`train_scaling`].
#[derive(Debug, Clone)]
pub struct ScalingTrainCfg {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub kernel: KernelSpec,
    pub batch: usize,
    pub seed: u64,
    pub head: usize,
}

impl Default for ScalingTrainCfg {
    fn default() -> Self {
        ScalingTrainCfg {
            epochs: 10,
            lr: 0.01,
            lambda: 0.0,
            kernel: KernelSpec::default(),
            batch: 32,
            seed: 0,
            head: 0,
        }
    }
}

/// Trains the scaling sets on frozen network weights: each batch is split
/// among the members, every member's classification loss plus the pairwise
/// diversity penalty is minimized by plain gradient descent on the scaling
/// entries alone. Returns the per-epoch mean objective.
pub fn train_scaling(
    net: &Network,
    sets: &mut [ScalingSet],
    data: &Dataset,
    cfg: &ScalingTrainCfg,
) -> Result<Vec<f64>> {
    if sets.is_empty() {
        return Err(Error::invalid("train_scaling", "no scaling sets given"));
    }
    if data.is_empty() {
        return Err(Error::invalid("train_scaling", "empty dataset"));
    }
    let n = sets.len();
    if n == 1 && cfg.lambda > 0.0 {
        log::warn!("diversity penalty needs at least two members; skipping it");
    }
    let use_penalty = cfg.lambda > 0.0 && n >= 2;
    let mut opt = SgdOptimizer::new(cfg.lr, 0.0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(data.len(), cfg.batch, cfg.seed.wrapping_add(epoch as u64))?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let parts = partition_batch(batch.len(), n)?;
            let mut tape = Tape::new();
            let mut total = None;
            let mut binds_all = Vec::with_capacity(n);
            let mut scaling_ids = Vec::with_capacity(n);
            for (set, part) in sets.iter().zip(&parts) {
                let rows: Vec<usize> = part.iter().map(|&j| batch[j]).collect();
                let (x, y) = data.gather(&rows)?;
                let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec())?;
                let opts = ForwardOpts {
                    scaling: Some(set),
                    mask: None,
                    head: cfg.head,
                };
                let (logits, binds) = net.forward_on(&mut tape, xid, &opts)?;
                let loss = tape.cross_entropy(logits, &y, Reduction::Mean)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss)?,
                });
                scaling_ids.push(binds.scaling.clone());
                binds_all.push(binds);
            }
            let mut objective = total.expect("at least one member");
            if use_penalty {
                let pen = penalty_on_tape(&mut tape, &scaling_ids, cfg.lambda, &cfg.kernel)?;
                objective = tape.add(objective, pen)?;
            }
            epoch_loss += tape.value(objective)[0];
            tape.backward(objective)?;
            for (set, binds) in sets.iter_mut().zip(&binds_all) {
                for v in &mut set.vectors {
                    v.zero_grad();
                }
                binds.accumulate_scaling_grads(&tape, set);
            }
            let mut params: Vec<&mut Tensor> = sets
                .iter_mut()
                .flat_map(|s| s.vectors.iter_mut())
                .collect();
            opt.step(&mut params, None)?;
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    Ok(history)
}

/// Default chunk size for the saliency sweep over the dataset.
const SALIENCY_BATCH: usize = 128;

/// Dataset-averaged absolute scaling gradients, normalized per `scope`.
pub fn compute_saliency(
    net: &Network,
    set: &ScalingSet,
    data: &Dataset,
    scope: Scope,
) -> Result<SaliencyMap> {
    compute_saliency_opts(net, set, data, scope, None, 0, SALIENCY_BATCH)
}

/// As [`compute_saliency`] with an explicit forward mask, head, and chunk
/// size. The signed per-batch gradient sums are additive, so any chunking
/// yields the same averages up to rounding.
pub fn compute_saliency_opts(
    net: &Network,
    set: &ScalingSet,
    data: &Dataset,
    scope: Scope,
    mask: Option<&[Vec<f64>]>,
    head: usize,
    chunk: usize,
) -> Result<SaliencyMap> {
    if data.is_empty() {
        return Err(Error::invalid("compute_saliency", "empty dataset"));
    }
    if chunk == 0 {
        return Err(Error::invalid("compute_saliency", "chunk size must be positive"));
    }
    let widths = net.prunable_widths();
    let mut accum: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    let indices: Vec<usize> = (0..data.len()).collect();
    for rows in indices.chunks(chunk) {
        let (x, y) = data.gather(rows)?;
        let mut tape = Tape::new();
        let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec())?;
        let opts = ForwardOpts {
            scaling: Some(set),
            mask,
            head,
        };
        let (logits, binds) = net.forward_on(&mut tape, xid, &opts)?;
        let loss = tape.cross_entropy(logits, &y, Reduction::Sum)?;
        tape.backward(loss)?;
        for (acc, &sid) in accum.iter_mut().zip(&binds.scaling) {
            for (a, g) in acc.iter_mut().zip(tape.grad(sid)) {
                *a += g;
            }
        }
    }
    let n = data.len() as f64;
    for layer in &mut accum {
        for v in layer {
            *v = (*v / n).abs();
        }
    }
    SaliencyMap::from_raw(accum, scope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::mlp;
    use crate::network::{init_scaling_sets, InitDist, Network};
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn raw_magnitudes_normalize_to_unit_sum() {
        let map = SaliencyMap::from_raw(vec![vec![3.0, 1.0]], Scope::Global).unwrap();
        assert_eq!(map.layers()[0], vec![0.75, 0.25]);
        let map = SaliencyMap::from_raw(vec![vec![1.0, 2.0], vec![5.0]], Scope::Global).unwrap();
        let total: f64 = map.layers().iter().flatten().sum();
        approx(total, 1.0, 1e-9);
        let per = SaliencyMap::from_raw(vec![vec![1.0, 3.0], vec![5.0]], Scope::PerLayer).unwrap();
        approx(per.layers()[0].iter().sum::<f64>(), 1.0, 1e-12);
        approx(per.layers()[1].iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn all_zero_magnitudes_cannot_be_ranked() {
        let err = SaliencyMap::from_raw(vec![vec![0.0, 0.0]], Scope::Global).unwrap_err();
        assert!(matches!(err, Error::DegenerateSaliency(_)));
        let err =
            SaliencyMap::from_raw(vec![vec![1.0], vec![0.0, 0.0]], Scope::PerLayer).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn percentile_interpolates_between_order_statistics() {
        approx(percentile(&[0.1, 0.2, 0.3, 0.4], 50.0).unwrap(), 0.25, 1e-12);
        approx(percentile(&[0.4, 0.1, 0.3, 0.2], 50.0).unwrap(), 0.25, 1e-12);
        approx(percentile(&[0.1, 0.2, 0.3, 0.4], 0.0).unwrap(), 0.1, 0.0);
        assert!(percentile(&[1.0], 100.0).is_err());
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn zero_percent_keeps_everything_above_the_minimum() {
        let map = SaliencyMap::from_raw(vec![vec![1.0, 2.0, 3.0, 4.0]], Scope::Global).unwrap();
        let th = threshold(&map, 0.0, Scope::Global, None).unwrap();
        let sets = select_indices(&map, &th, None).unwrap();
        assert_eq!(sets.kept(0), &[1, 2, 3]);
    }

    #[test]
    fn strictly_greater_selection() {
        let map = SaliencyMap::from_raw(vec![vec![3.0, 1.0]], Scope::Global).unwrap();
        let sets = select_indices(&map, &Thresholds::Global(0.5), None).unwrap();
        assert_eq!(sets.kept(0), &[0]);
    }

    #[test]
    fn empty_layer_falls_back_to_single_best() {
        let map = SaliencyMap::from_raw(vec![vec![1.0, 1.0, 1.0]], Scope::Global).unwrap();
        let sets = select_indices(&map, &Thresholds::Global(0.9), None).unwrap();
        assert_eq!(sets.kept(0), &[0]);
    }

    #[test]
    fn per_layer_half_keeps_three_eight_sixty_on_lenet_widths() {
        let raw: Vec<Vec<f64>> = [6usize, 16, 120]
            .iter()
            .map(|&w| (0..w).map(|j| (j + 1) as f64).collect())
            .collect();
        let map = SaliencyMap::from_raw(raw, Scope::PerLayer).unwrap();
        let th = threshold(&map, 50.0, Scope::PerLayer, None).unwrap();
        let sets = select_indices(&map, &th, None).unwrap();
        assert_eq!(sets.counts(), vec![3, 8, 60]);
        assert_eq!(sets.total(), 71);
    }

    #[test]
    fn thirty_percent_on_sixty_four_keeps_forty_five() {
        let raw = vec![(0..64).map(|j| (j + 1) as f64).collect::<Vec<f64>>()];
        let map = SaliencyMap::from_raw(raw, Scope::Global).unwrap();
        let th = threshold(&map, 30.0, Scope::Global, None).unwrap();
        let sets = select_indices(&map, &th, None).unwrap();
        assert_eq!(sets.total(), 45);
    }

    #[test]
    fn per_layer_thresholds_differ_across_disjoint_ranges() {
        let raw = vec![vec![1.0, 2.0, 3.0], vec![100.0, 200.0, 300.0]];
        let map = SaliencyMap::from_raw(raw, Scope::PerLayer).unwrap();
        match threshold(&map, 50.0, Scope::PerLayer, None).unwrap() {
            Thresholds::PerLayer(ths) => {
                assert_eq!(ths.len(), 2);
                approx(ths[0], ths[1], 1e-12);
            }
            other => panic!("expected per-layer thresholds, got {other:?}"),
        }
        // Unnormalized pools with disjoint ranges give different thresholds.
        let a = percentile(&[1.0, 2.0, 3.0], 50.0).unwrap();
        let b = percentile(&[100.0, 200.0, 300.0], 50.0).unwrap();
        assert!(a < b);
    }

    #[test]
    fn protected_neurons_leave_pool_and_selection() {
        let raw = vec![vec![10.0, 4.0, 3.0, 2.0, 1.0]];
        let map = SaliencyMap::from_raw(raw, Scope::PerLayer).unwrap();
        let prot = vec![vec![true, false, false, false, false]];
        let th = threshold(&map, 50.0, Scope::PerLayer, Some(&prot)).unwrap();
        let sets = select_indices(&map, &th, Some(&prot)).unwrap();
        assert!(!sets.kept(0).contains(&0), "protected neuron selected");
        // Median of the four unprotected values sits between 3 and 4 (of
        // the raw 4,3,2,1), so two survive the strict comparison.
        assert_eq!(sets.kept(0), &[1, 2]);
        let none = vec![vec![true; 5]];
        assert!(threshold(&map, 50.0, Scope::PerLayer, Some(&none)).is_err());
        assert!(select_indices(&map, &Thresholds::Global(0.0), Some(&none)).is_err());
    }

    #[test]
    fn rescaling_all_raw_inputs_keeps_the_same_indices() {
        let raw: Vec<f64> = (0..17).map(|j| ((j * 7919) % 23 + 1) as f64).collect();
        let scaled: Vec<f64> = raw.iter().map(|v| v * 2.3).collect();
        let a = SaliencyMap::from_raw(vec![raw], Scope::Global).unwrap();
        let b = SaliencyMap::from_raw(vec![scaled], Scope::Global).unwrap();
        for p in [0.0, 37.0, 80.0] {
            let ta = threshold(&a, p, Scope::Global, None).unwrap();
            let tb = threshold(&b, p, Scope::Global, None).unwrap();
            assert_eq!(
                select_indices(&a, &ta, None).unwrap(),
                select_indices(&b, &tb, None).unwrap()
            );
        }
    }

    fn toy_data(n: usize) -> Dataset {
        let mut features = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let t = (i / 2) as f64 * 0.01;
            features.push(c as f64 + t);
            features.push(1.0 - c as f64 - t);
            labels.push(c);
        }
        Dataset::new(features, labels, vec![2], 2).unwrap()
    }

    #[test]
    fn chunked_saliency_matches_single_pass() {
        let spec = mlp(2, &[8, 6], 2);
        let net = Network::build(&spec, 21);
        let data = toy_data(32);
        let sets = init_scaling_sets(&net, 1, InitDist::Normal { mean: 1.0, std: 0.2 }, 4).unwrap();
        let one = compute_saliency_opts(&net, &sets[0], &data, Scope::Global, None, 0, 32).unwrap();
        let five = compute_saliency_opts(&net, &sets[0], &data, Scope::Global, None, 0, 5).unwrap();
        for (a, b) in one.layers().iter().flatten().zip(five.layers().iter().flatten()) {
            approx(*a, *b, 1e-9);
        }
        let total: f64 = one.layers().iter().flatten().sum();
        approx(total, 1.0, 1e-9);
    }

    #[test]
    fn member_index_does_not_change_saliency() {
        let spec = mlp(2, &[6], 2);
        let net = Network::build(&spec, 3);
        let data = toy_data(8);
        let sets = init_scaling_sets(&net, 1, InitDist::Normal { mean: 1.0, std: 0.1 }, 9).unwrap();
        let relabeled = ScalingSet {
            member: 7,
            vectors: sets[0].vectors.clone(),
        };
        let a = compute_saliency(&net, &sets[0], &data, Scope::Global).unwrap();
        let b = compute_saliency(&net, &relabeled, &data, Scope::Global).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leave_sets_bitwise_unchanged() {
        let spec = mlp(2, &[6], 2);
        let net = Network::build(&spec, 3);
        let data = toy_data(8);
        let mut sets =
            init_scaling_sets(&net, 2, InitDist::Normal { mean: 1.0, std: 0.1 }, 9).unwrap();
        let before = sets.clone();
        let cfg = ScalingTrainCfg {
            epochs: 0,
            ..Default::default()
        };
        let history = train_scaling(&net, &mut sets, &data, &cfg).unwrap();
        assert!(history.is_empty());
        for (a, b) in sets.iter().zip(&before) {
            for (va, vb) in a.vectors.iter().zip(&b.vectors) {
                assert!(va.bits_eq(vb));
            }
        }
    }

    #[test]
    fn separable_toy_loss_decreases_and_weights_stay_frozen() {
        let spec = mlp(2, &[6], 2);
        let net = Network::build(&spec, 5);
        let snapshot = net.clone();
        let data = toy_data(16);
        let mut sets =
            init_scaling_sets(&net, 1, InitDist::Normal { mean: 1.0, std: 0.2 }, 2).unwrap();
        let cfg = ScalingTrainCfg {
            epochs: 5,
            lr: 0.01,
            batch: 16,
            ..Default::default()
        };
        let history = train_scaling(&net, &mut sets, &data, &cfg).unwrap();
        assert_eq!(history.len(), 5);
        for w in history.windows(2) {
            assert!(w[1] < w[0], "loss went {} -> {}", w[0], w[1]);
        }
        for key in net.param_keys() {
            assert!(net.param(key).bits_eq(snapshot.param(key)));
        }
    }

    #[test]
    fn single_member_with_penalty_matches_plain_run() {
        let spec = mlp(2, &[6], 2);
        let net = Network::build(&spec, 5);
        let data = toy_data(8);
        let init =
            init_scaling_sets(&net, 1, InitDist::Normal { mean: 1.0, std: 0.2 }, 2).unwrap();
        let mut a = init.clone();
        let mut b = init;
        let plain = ScalingTrainCfg {
            epochs: 2,
            batch: 4,
            ..Default::default()
        };
        let with_lambda = ScalingTrainCfg {
            lambda: 0.5,
            ..plain.clone()
        };
        let ha = train_scaling(&net, &mut a, &data, &plain).unwrap();
        let hb = train_scaling(&net, &mut b, &data, &with_lambda).unwrap();
        assert_eq!(ha, hb);
        for (sa, sb) in a.iter().zip(&b) {
            for (va, vb) in sa.vectors.iter().zip(&sb.vectors) {
                assert!(va.bits_eq(vb));
            }
        }
    }

    #[test]
    fn diversity_penalty_separates_members() {
        let spec = mlp(2, &[12], 2);
        let net = Network::build(&spec, 5);
        let data = toy_data(16);
        let init =
            init_scaling_sets(&net, 2, InitDist::Normal { mean: 1.0, std: 0.05 }, 2).unwrap();
        let mut plain_sets = init.clone();
        let mut div_sets = init;
        let plain = ScalingTrainCfg {
            epochs: 6,
            lr: 0.05,
            batch: 16,
            ..Default::default()
        };
        let with_lambda = ScalingTrainCfg {
            lambda: 1.0,
            ..plain.clone()
        };
        train_scaling(&net, &mut plain_sets, &data, &plain).unwrap();
        train_scaling(&net, &mut div_sets, &data, &with_lambda).unwrap();
        let gap = |sets: &[ScalingSet]| -> f64 {
            sets[0].vectors[0]
                .data()
                .iter()
                .zip(sets[1].vectors[0].data())
                .map(|(a, b)| (a - b).abs())
                .sum()
        };
        assert!(
            gap(&div_sets) > gap(&plain_sets),
            "penalty should push members apart: {} vs {}",
            gap(&div_sets),
            gap(&plain_sets)
        );
    }

    proptest! {
        #[test]
        fn higher_percentile_selects_a_subset(
            values in proptest::collection::vec(1.0f64..100.0, 4..40),
            p1 in 0.0f64..99.0,
            p2 in 0.0f64..99.0,
        ) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let map = SaliencyMap::from_raw(vec![values], Scope::Global).unwrap();
            let th_lo = threshold(&map, lo, Scope::Global, None).unwrap();
            let th_hi = threshold(&map, hi, Scope::Global, None).unwrap();
            let keep_lo = select_indices(&map, &th_lo, None).unwrap();
            let keep_hi = select_indices(&map, &th_hi, None).unwrap();
            prop_assert!(keep_hi.is_subset_of(&keep_lo));
        }
    }
}
