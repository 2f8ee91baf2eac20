//! Task-incremental engine: per-task active-neuron masks derived from
//! saliency, a growing record of past-task neurons, masked forwards through
//! per-task heads, and gradient freezing that makes forgetting impossible
//! bitwise rather than approximately.
//!
//! Ownership rule: an output neuron owns its incoming weight column/channel
//! block and its bias entry. Once the neuron enters the past-active record,
//! everything it owns is frozen. Weights that feed from a frozen neuron
//! into a currently-active one stay trainable because the downstream
//! neuron owns them.

use crate::autodiff::{Reduction, SgdOptimizer, Tape, Tensor};
use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{
    derive_seed, init_scaling_sets, ForwardOpts, InitDist, Network, ParamKey, ParamLoc,
};
use crate::saliency::{
    compute_saliency_opts, select_indices, threshold, IndexSets, ScalingTrainCfg, Scope,
    train_scaling,
};

/// Per-task train/dev/test split with task-local labels.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Ordered sequence of disjoint tasks.
pub type TaskStream = Vec<TaskData>;

/// One bit per output neuron of every prunable backbone layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    layers: Vec<Vec<bool>>,
}

impl BinaryMask {
    pub fn new(layers: Vec<Vec<bool>>) -> BinaryMask {
        BinaryMask { layers }
    }

    pub fn empty(sizes: &[usize]) -> BinaryMask {
        BinaryMask {
            layers: sizes.iter().map(|&s| vec![false; s]).collect(),
        }
    }

    pub fn from_index_sets(sizes: &[usize], kept: &IndexSets) -> Result<BinaryMask> {
        if kept.layers().len() != sizes.len() {
            return Err(Error::invalid(
                "mask",
                format!("{} index sets for {} layers", kept.layers().len(), sizes.len()),
            ));
        }
        let mut layers: Vec<Vec<bool>> = sizes.iter().map(|&s| vec![false; s]).collect();
        for (l, idx) in kept.layers().iter().enumerate() {
            for &j in idx {
                if j >= sizes[l] {
                    return Err(Error::invalid(
                        "mask",
                        format!("index {j} out of range for layer {l} of size {}", sizes[l]),
                    ));
                }
                layers[l][j] = true;
            }
        }
        Ok(BinaryMask { layers })
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Elementwise OR.
    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert_eq!(self.sizes(), other.sizes());
        BinaryMask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x || *y).collect())
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| *x || !*y))
    }

    /// 0.0/1.0 vectors for the forward pass.
    pub fn as_scale_vectors(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

/// Record of every allocated task's active-neuron mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLedger {
    layer_sizes: Vec<usize>,
    tasks: Vec<BinaryMask>,
}

impl MaskLedger {
    pub fn new(layer_sizes: Vec<usize>) -> MaskLedger {
        MaskLedger {
            layer_sizes,
            tasks: Vec::new(),
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn owned(&self, t: usize) -> Result<&BinaryMask> {
        self.tasks.get(t).ok_or(Error::UnknownTask(t))
    }

    /// Union of every earlier task's active mask; empty for the first task.
    pub fn owned_before(&self, t: usize) -> BinaryMask {
        let mut acc = BinaryMask::empty(&self.layer_sizes);
        for mask in self.tasks.iter().take(t) {
            acc = acc.union(mask);
        }
        acc
    }

    /// Neurons the task-t forward may use: its own mask plus all past ones.
    pub fn active(&self, t: usize) -> Result<BinaryMask> {
        Ok(self.owned(t)?.union(&self.owned_before(t)))
    }

    pub fn push(&mut self, mask: BinaryMask) -> Result<usize> {
        if mask.sizes() != self.layer_sizes {
            return Err(Error::invalid(
                "ledger",
                format!(
                    "mask sizes {:?} do not match ledger layers {:?}",
                    mask.sizes(),
                    self.layer_sizes
                ),
            ));
        }
        self.tasks.push(mask);
        Ok(self.tasks.len() - 1)
    }

    /// Storage cost for M tasks: extra full-precision values (heads beyond
    /// the one the base network already has) and mask bits (one per output
    /// neuron per task).
    pub fn memory_account(&self, head_params: usize, m: usize) -> (usize, usize) {
        if m == 0 {
            return (0, 0);
        }
        let bits = m * self.layer_sizes.iter().sum::<usize>();
        let floats = (m - 1) * head_params;
        (floats, bits)
    }
}

/// Soft extraction ranks every neuron and then cedes already-owned ones to
/// the past record; hard extraction competes only over free neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionMode {
    Soft,
    Hard,
}

/// Turns a selection into the task's active mask: hard selections are
/// already disjoint from the past record; soft selections drop past-owned
/// neurons, possibly emptying a layer (the forward still reaches past
/// neurons there).
pub fn mask_from_selection(
    sizes: &[usize],
    kept: &IndexSets,
    prior: &BinaryMask,
    mode: ExtractionMode,
) -> Result<BinaryMask> {
    let raw = BinaryMask::from_index_sets(sizes, kept)?;
    match mode {
        ExtractionMode::Hard => Ok(raw),
        ExtractionMode::Soft => Ok(BinaryMask {
            layers: raw
                .layers
                .iter()
                .zip(prior.layers())
                .map(|(a, p)| a.iter().zip(p).map(|(x, y)| *x && !*y).collect())
                .collect(),
        }),
    }
}

/// Settings for [`allocate_task`].
#[derive(Debug, Clone)]
pub struct TaskAllocCfg {
    pub p: f64,
    pub scope: Scope,
    pub mode: ExtractionMode,
    pub mask_epochs: usize,
    pub mask_lr: f64,
    pub batch: usize,
    pub init: InitDist,
    pub seed: u64,
}

impl Default for TaskAllocCfg {
    fn default() -> Self {
        TaskAllocCfg {
            p: 50.0,
            scope: Scope::PerLayer,
            mode: ExtractionMode::Hard,
            mask_epochs: 10,
            mask_lr: 0.01,
            batch: 32,
            init: InitDist::Normal { mean: 0.0, std: 1.0 },
            seed: 0,
        }
    }
}

/// Claims neurons for the next task: adds its head, trains a fresh scaling
/// set on the task data (all neurons active), ranks saliency, and records
/// the resulting mask in the ledger. Returns the task index.
pub fn allocate_task(
    net: &mut Network,
    ledger: &mut MaskLedger,
    train: &Dataset,
    cfg: &TaskAllocCfg,
) -> Result<usize> {
    let t = ledger.num_tasks();
    let expected_heads = t.max(1);
    if net.num_heads() != expected_heads {
        return Err(Error::invalid(
            "allocate_task",
            format!(
                "network has {} heads before task {t}; expected {expected_heads}",
                net.num_heads()
            ),
        ));
    }
    let prior = ledger.owned_before(t);
    if cfg.mode == ExtractionMode::Hard {
        for (l, layer) in prior.layers().iter().enumerate() {
            if layer.iter().all(|&b| b) {
                return Err(Error::CapacityExhausted { task: t, layer: l });
            }
        }
    }
    if t > 0 {
        let idx = net.add_head(derive_seed(cfg.seed, 1000 + t as u64));
        debug_assert_eq!(idx, t);
    }
    let mut sets = init_scaling_sets(net, 1, cfg.init, derive_seed(cfg.seed, 2000 + t as u64))?;
    let train_cfg = ScalingTrainCfg {
        epochs: cfg.mask_epochs,
        lr: cfg.mask_lr,
        lambda: 0.0,
        kernel: Default::default(),
        batch: cfg.batch,
        seed: derive_seed(cfg.seed, 3000 + t as u64),
        head: t,
    };
    train_scaling(net, &mut sets, train, &train_cfg)?;
    let map = compute_saliency_opts(net, &sets[0], train, cfg.scope, None, t, 128)?;
    let protected: Option<Vec<Vec<bool>>> = match cfg.mode {
        ExtractionMode::Hard => Some(prior.layers().to_vec()),
        ExtractionMode::Soft => None,
    };
    let th = threshold(&map, cfg.p, cfg.scope, protected.as_deref())?;
    let kept = select_indices(&map, &th, protected.as_deref())?;
    let mask = mask_from_selection(ledger.layer_sizes(), &kept, &prior, cfg.mode)?;
    ledger.push(mask)
}

/// Forward through head `t` with every prunable layer's output multiplied
/// by the union of the task's mask and the past record.
pub fn masked_forward(net: &Network, ledger: &MaskLedger, t: usize, x: &Tensor) -> Result<Tensor> {
    let active = ledger.active(t)?;
    let masks = active.as_scale_vectors();
    net.forward_batch(
        x,
        &ForwardOpts {
            scaling: None,
            mask: Some(&masks),
            head: t,
        },
    )
}

/// Settings for [`train_task`].
#[derive(Debug, Clone)]
pub struct TaskTrainCfg {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TaskTrainCfg {
    fn default() -> Self {
        TaskTrainCfg {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch: 32,
            seed: 0,
        }
    }
}

/// Per-element 0/1 gradient mask for one trainable parameter: backbone
/// entries follow the owning output neuron's task-mask bit, head entries
/// are free.
fn grad_mask_for(net: &Network, key: ParamKey, owned: &BinaryMask) -> Option<Vec<f64>> {
    let prunable_pos = |layer_idx: usize| -> usize {
        net.backbone[..layer_idx]
            .iter()
            .filter(|l| l.spec.is_prunable())
            .count()
    };
    match key.loc {
        ParamLoc::Head(_, _) => None,
        ParamLoc::Backbone(i) => {
            let l = prunable_pos(i);
            let bits = &owned.layers()[l];
            let tensor = net.param(key);
            let shape = tensor.shape();
            let mask = match shape {
                // Linear weight [in, out]: column c belongs to neuron c.
                [rows, cols] => {
                    let mut m = Vec::with_capacity(rows * cols);
                    for _ in 0..*rows {
                        for c in 0..*cols {
                            m.push(if bits[c] { 1.0 } else { 0.0 });
                        }
                    }
                    m
                }
                // Conv weight [c_out, c_in, k, k]: block o belongs to
                // channel o.
                [c_out, c_in, kh, kw] => {
                    let block = c_in * kh * kw;
                    let mut m = Vec::with_capacity(c_out * block);
                    for o in 0..*c_out {
                        let v = if bits[o] { 1.0 } else { 0.0 };
                        m.extend(std::iter::repeat(v).take(block));
                    }
                    m
                }
                // Bias [out].
                [out] => (0..*out).map(|j| if bits[j] { 1.0 } else { 0.0 }).collect(),
                other => unreachable!("unexpected parameter shape {other:?}"),
            };
            Some(mask)
        }
    }
}

/// Trains head `t` and the task's own neurons; everything owned by other
/// tasks (or by no task) is frozen bitwise, weights and optimizer state
/// alike. Returns the per-epoch mean loss.
pub fn train_task(
    net: &mut Network,
    ledger: &MaskLedger,
    t: usize,
    train: &Dataset,
    cfg: &TaskTrainCfg,
) -> Result<Vec<f64>> {
    let owned = ledger.owned(t)?.clone();
    let active = ledger.active(t)?;
    let masks = active.as_scale_vectors();
    let keys = net.trainable_keys(t);
    let grad_masks: Vec<Option<Vec<f64>>> = keys
        .iter()
        .map(|&k| grad_mask_for(net, k, &owned))
        .collect();
    let mut opt = SgdOptimizer::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(train.len(), cfg.batch, derive_seed(cfg.seed, epoch as u64))?;
        let mut epoch_loss = 0.0;
        for rows in &batches {
            let (x, y) = train.gather(rows)?;
            let mut tape = Tape::new();
            let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec())?;
            let opts = ForwardOpts {
                scaling: None,
                mask: Some(&masks),
                head: t,
            };
            let (logits, binds) = net.forward_on(&mut tape, xid, &opts)?;
            let loss = tape.cross_entropy(logits, &y, Reduction::Mean)?;
            epoch_loss += tape.value(loss)[0];
            tape.backward(loss)?;
            net.zero_grads();
            binds.accumulate_param_grads(&tape, net);
            let mut tensors = net.trainable_tensors_mut(t);
            debug_assert_eq!(tensors.len(), keys.len());
            let mask_refs: Vec<Option<&[f64]>> =
                grad_masks.iter().map(|m| m.as_deref()).collect();
            opt.step(&mut tensors, Some(&mask_refs))?;
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    Ok(history)
}

/// Lower-triangular accuracy record: entry (i, j) is the task-j test
/// accuracy measured right after finishing task i.
#[derive(Debug, Clone, PartialEq)]
pub struct RMatrix {
    m: usize,
    entries: Vec<Option<f64>>,
}

impl RMatrix {
    pub fn new(m: usize) -> RMatrix {
        RMatrix {
            m,
            entries: vec![None; m * m],
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.m || j >= self.m {
            return Err(Error::invalid(
                "r_matrix",
                format!("entry ({i}, {j}) outside {0}x{0}", self.m),
            ));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(
                "r_matrix",
                format!("accuracy {value} outside [0, 1]"),
            ));
        }
        self.entries[i * self.m + j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.m + j]
    }
}

/// Mean of R over i >= j: every measurement taken at or after its task
/// finished, M(M+1)/2 entries in total.
pub fn cl_accuracy(r: &RMatrix) -> Result<f64> {
    let m = r.size();
    if m == 0 {
        return Err(Error::invalid("cl_accuracy", "empty matrix"));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..=i {
            total += r.get(i, j).ok_or_else(|| {
                Error::invalid("cl_accuracy", format!("entry ({i}, {j}) was never filled"))
            })?;
        }
    }
    Ok(total / (m * (m + 1) / 2) as f64)
}
