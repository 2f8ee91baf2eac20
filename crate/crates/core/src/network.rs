//! Sequential network with a shared backbone and one or more classifier
//! heads, plus the per-member scaling vectors and the batch partitioning
//! used when several members train side by side.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{ArchSpec, LayerSpec};
use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};

/// Derives a fresh seed from a base seed and a stream tag so that distinct
/// pipeline stages never share a generator state (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A resolved layer together with its parameters (present only for
/// prunable kinds).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Identifies one parameter tensor inside a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub loc: ParamLoc,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamLoc {
    Backbone(usize),
    /// (head index, layer index within that head)
    Head(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Trainable scaling vectors of one ensemble member / task: one vector per
/// prunable backbone layer, entry j scaling output neuron/channel j.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSet {
    pub member: usize,
    pub vectors: Vec<Tensor>,
}

/// Distribution the scaling vectors are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitDist {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Per-forward options. `scaling` multiplies each prunable layer's output
/// by the member's vector; `mask` multiplies by a 0/1 vector (continual
/// mode); `head` selects the classifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    pub scaling: Option<&'a ScalingSet>,
    pub mask: Option<&'a [Vec<f64>]>,
    pub head: usize,
}

/// Tape ids of everything registered during one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    pub input: ValueId,
    pub params: Vec<(ParamKey, ValueId)>,
    /// One id per prunable backbone layer, present when scaling was applied.
    pub scaling: Vec<ValueId>,
}

impl Bindings {
    /// Adds the tape gradients of every parameter onto the network's
    /// gradient buffers.
    pub fn accumulate_param_grads(&self, tape: &Tape, net: &mut Network) {
        for &(key, id) in &self.params {
            net.param_mut(key).accumulate_grad(tape.grad(id));
        }
    }

    /// Adds the tape gradients of the scaling leaves onto the set's buffers.
    pub fn accumulate_scaling_grads(&self, tape: &Tape, set: &mut ScalingSet) {
        debug_assert_eq!(self.scaling.len(), set.vectors.len());
        for (&id, vec) in self.scaling.iter().zip(&mut set.vectors) {
            vec.accumulate_grad(tape.grad(id));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ArchSpec,
    pub backbone: Vec<Layer>,
    pub heads: Vec<Vec<Layer>>,
}

fn init_layer(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Layer {
    let (weight, bias) = match spec {
        LayerSpec::Linear { in_dim, out_dim, bias } => {
            let bound = 1.0 / (*in_dim as f64).sqrt();
            let w: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let b = bias.then(|| {
                Tensor::new(
                    vec![*out_dim],
                    (0..*out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
                .unwrap()
            });
            (Some(Tensor::new(vec![*in_dim, *out_dim], w).unwrap()), b)
        }
        LayerSpec::Conv2d {
            c_in,
            c_out,
            k,
            bias,
            ..
        } => {
            let fan_in = c_in * k * k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..c_out * c_in * k * k)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let b = bias.then(|| {
                Tensor::new(
                    vec![*c_out],
                    (0..*c_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
                .unwrap()
            });
            (
                Some(Tensor::new(vec![*c_out, *c_in, *k, *k], w).unwrap()),
                b,
            )
        }
        _ => (None, None),
    };
    Layer {
        spec: spec.clone(),
        weight,
        bias,
    }
}

fn layers_from_supply(specs: &[LayerSpec], supply: &mut std::vec::IntoIter<Tensor>) -> Result<Vec<Layer>> {
    let mut out = Vec::with_capacity(specs.len());
    for ls in specs {
        let (w_shape, b_shape) = match ls {
            LayerSpec::Linear { in_dim, out_dim, bias } => {
                (Some(vec![*in_dim, *out_dim]), bias.then(|| vec![*out_dim]))
            }
            LayerSpec::Conv2d { c_in, c_out, k, bias, .. } => {
                (Some(vec![*c_out, *c_in, *k, *k]), bias.then(|| vec![*c_out]))
            }
            _ => (None, None),
        };
        let mut grab = |shape: Vec<usize>| -> Result<Tensor> {
            let t = supply
                .next()
                .ok_or_else(|| Error::invalid("from_param_tensors", "fewer tensors than the spec declares"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_param_tensors",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let weight = w_shape.map(&mut grab).transpose()?;
        let bias = b_shape.map(&mut grab).transpose()?;
        out.push(Layer {
            spec: ls.clone(),
            weight,
            bias,
        });
    }
    Ok(out)
}

impl Network {
    /// Initializes backbone and one head with the uniform fan-in scheme,
    /// drawing parameters in declaration order from a seeded stream.
    pub fn build(spec: &ArchSpec, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = spec.backbone.iter().map(|l| init_layer(l, &mut rng)).collect();
        let head = spec.head.iter().map(|l| init_layer(l, &mut rng)).collect();
        Network {
            spec: spec.clone(),
            backbone,
            heads: vec![head],
        }
    }

    /// Assembles a network from explicit layers (used by extraction and
    /// model loading). Callers guarantee the tensors match the specs.
    pub(crate) fn from_layers(spec: ArchSpec, backbone: Vec<Layer>, heads: Vec<Vec<Layer>>) -> Network {
        Network {
            spec,
            backbone,
            heads,
        }
    }

    /// Rebuilds a network from parameter tensors in declaration order
    /// (backbone first, then each head in turn, weight before bias within a
    /// layer). Every shape is checked against the spec so a corrupted or
    /// reordered dump is rejected instead of silently misassigned.
    pub fn from_param_tensors(spec: &ArchSpec, n_heads: usize, tensors: Vec<Tensor>) -> Result<Network> {
        if n_heads == 0 {
            return Err(Error::invalid("from_param_tensors", "a network has at least one head"));
        }
        let mut supply = tensors.into_iter();
        let backbone = layers_from_supply(&spec.backbone, &mut supply)?;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            heads.push(layers_from_supply(&spec.head, &mut supply)?);
        }
        if supply.next().is_some() {
            return Err(Error::invalid(
                "from_param_tensors",
                "more tensors supplied than the spec declares",
            ));
        }
        Ok(Network::from_layers(spec.clone(), backbone, heads))
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Appends a fresh head initialized from the template spec.
    pub fn add_head(&mut self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head: Vec<Layer> = self.spec.head.iter().map(|l| init_layer(l, &mut rng)).collect();
        self.heads.push(head);
        self.heads.len() - 1
    }

    pub fn prunable_widths(&self) -> Vec<usize> {
        self.spec.prunable_widths()
    }

    /// Total trainable parameters across backbone and every head.
    pub fn param_count(&self) -> usize {
        self.param_keys()
            .iter()
            .map(|&k| self.param(k).numel())
            .sum()
    }

    /// All parameter keys in declaration order: backbone first, then heads.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            if l.weight.is_some() {
                keys.push(ParamKey {
                    loc: ParamLoc::Backbone(i),
                    kind: ParamKind::Weight,
                });
            }
            if l.bias.is_some() {
                keys.push(ParamKey {
                    loc: ParamLoc::Backbone(i),
                    kind: ParamKind::Bias,
                });
            }
        }
        for (h, head) in self.heads.iter().enumerate() {
            for (i, l) in head.iter().enumerate() {
                if l.weight.is_some() {
                    keys.push(ParamKey {
                        loc: ParamLoc::Head(h, i),
                        kind: ParamKind::Weight,
                    });
                }
                if l.bias.is_some() {
                    keys.push(ParamKey {
                        loc: ParamLoc::Head(h, i),
                        kind: ParamKind::Bias,
                    });
                }
            }
        }
        keys
    }

    /// Keys of the parameters touched when training with head `head`:
    /// backbone plus that head only.
    pub fn trainable_keys(&self, head: usize) -> Vec<ParamKey> {
        self.param_keys()
            .into_iter()
            .filter(|k| match k.loc {
                ParamLoc::Backbone(_) => true,
                ParamLoc::Head(h, _) => h == head,
            })
            .collect()
    }

    fn layer_of(&self, loc: ParamLoc) -> &Layer {
        match loc {
            ParamLoc::Backbone(i) => &self.backbone[i],
            ParamLoc::Head(h, i) => &self.heads[h][i],
        }
    }

    fn layer_of_mut(&mut self, loc: ParamLoc) -> &mut Layer {
        match loc {
            ParamLoc::Backbone(i) => &mut self.backbone[i],
            ParamLoc::Head(h, i) => &mut self.heads[h][i],
        }
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        let l = self.layer_of(key.loc);
        match key.kind {
            ParamKind::Weight => l.weight.as_ref().expect("key points at missing weight"),
            ParamKind::Bias => l.bias.as_ref().expect("key points at missing bias"),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        let l = self.layer_of_mut(key.loc);
        match key.kind {
            ParamKind::Weight => l.weight.as_mut().expect("key points at missing weight"),
            ParamKind::Bias => l.bias.as_mut().expect("key points at missing bias"),
        }
    }

    pub fn zero_grads(&mut self) {
        for key in self.param_keys() {
            self.param_mut(key).zero_grad();
        }
    }

    /// Mutable references to the parameters touched when training with
    /// head `head`, in the same order as [`Network::trainable_keys`].
    pub fn trainable_tensors_mut(&mut self, head: usize) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.backbone.iter_mut() {
            if let Some(w) = layer.weight.as_mut() {
                out.push(w);
            }
            if let Some(b) = layer.bias.as_mut() {
                out.push(b);
            }
        }
        for layer in self.heads[head].iter_mut() {
            if let Some(w) = layer.weight.as_mut() {
                out.push(w);
            }
            if let Some(b) = layer.bias.as_mut() {
                out.push(b);
            }
        }
        out
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        cur: ValueId,
        layer: &Layer,
        loc: ParamLoc,
        binds: &mut Bindings,
    ) -> Result<ValueId> {
        match &layer.spec {
            LayerSpec::Linear { .. } => {
                let w = layer.weight.as_ref().unwrap();
                let wid = tape.leaf(w.data().to_vec(), w.shape().to_vec())?;
                binds.params.push((
                    ParamKey {
                        loc,
                        kind: ParamKind::Weight,
                    },
                    wid,
                ));
                let mut out = tape.matmul(cur, wid)?;
                if let Some(b) = &layer.bias {
                    let bid = tape.leaf(b.data().to_vec(), b.shape().to_vec())?;
                    binds.params.push((
                        ParamKey {
                            loc,
                            kind: ParamKind::Bias,
                        },
                        bid,
                    ));
                    out = tape.add_bias(out, bid)?;
                }
                Ok(out)
            }
            LayerSpec::Conv2d { stride, pad, .. } => {
                let w = layer.weight.as_ref().unwrap();
                let wid = tape.leaf(w.data().to_vec(), w.shape().to_vec())?;
                binds.params.push((
                    ParamKey {
                        loc,
                        kind: ParamKind::Weight,
                    },
                    wid,
                ));
                let bid = match &layer.bias {
                    Some(b) => {
                        let id = tape.leaf(b.data().to_vec(), b.shape().to_vec())?;
                        binds.params.push((
                            ParamKey {
                                loc,
                                kind: ParamKind::Bias,
                            },
                            id,
                        ));
                        Some(id)
                    }
                    None => None,
                };
                tape.conv2d(cur, wid, bid, *stride, *pad)
            }
            LayerSpec::Relu => Ok(tape.relu(cur)),
            LayerSpec::MaxPool { k } => tape.maxpool2d(cur, *k),
            LayerSpec::Flatten => tape.flatten(cur),
        }
    }

    /// Runs the network on an already-registered input leaf. Returns the
    /// logits id plus the bindings of every parameter/scaling leaf created.
    pub fn forward_on(&self, tape: &mut Tape, x: ValueId, opts: &ForwardOpts) -> Result<(ValueId, Bindings)> {
        let widths = self.prunable_widths();
        if let Some(set) = opts.scaling {
            if set.vectors.len() != widths.len()
                || set
                    .vectors
                    .iter()
                    .zip(&widths)
                    .any(|(v, &w)| v.numel() != w)
            {
                return Err(Error::invalid(
                    "forward",
                    format!(
                        "scaling set has lengths {:?}, prunable widths are {:?}",
                        set.vectors.iter().map(Tensor::numel).collect::<Vec<_>>(),
                        widths
                    ),
                ));
            }
        }
        if let Some(masks) = opts.mask {
            if masks.len() != widths.len()
                || masks.iter().zip(&widths).any(|(m, &w)| m.len() != w)
            {
                return Err(Error::invalid(
                    "forward",
                    format!(
                        "mask set has lengths {:?}, prunable widths are {:?}",
                        masks.iter().map(Vec::len).collect::<Vec<_>>(),
                        widths
                    ),
                ));
            }
        }
        let head = self
            .heads
            .get(opts.head)
            .ok_or(Error::UnknownTask(opts.head))?;

        let mut binds = Bindings {
            input: x,
            ..Default::default()
        };
        let mut cur = x;
        let mut prunable = 0usize;
        for (i, layer) in self.backbone.iter().enumerate() {
            cur = self.apply_layer(tape, cur, layer, ParamLoc::Backbone(i), &mut binds)?;
            if layer.spec.is_prunable() {
                if let Some(set) = opts.scaling {
                    let v = &set.vectors[prunable];
                    let sid = tape.leaf(v.data().to_vec(), v.shape().to_vec())?;
                    binds.scaling.push(sid);
                    cur = tape.scale(cur, sid)?;
                }
                if let Some(masks) = opts.mask {
                    let m = &masks[prunable];
                    let mid = tape.leaf(m.clone(), vec![m.len()])?;
                    cur = tape.scale(cur, mid)?;
                }
                prunable += 1;
            }
        }
        for (i, layer) in head.iter().enumerate() {
            cur = self.apply_layer(tape, cur, layer, ParamLoc::Head(opts.head, i), &mut binds)?;
        }
        Ok((cur, binds))
    }

    /// Convenience forward over a batch tensor on a throwaway tape.
    pub fn forward_batch(&self, x: &Tensor, opts: &ForwardOpts) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec())?;
        let (logits, _) = self.forward_on(&mut tape, xid, opts)?;
        Tensor::new(tape.shape(logits).to_vec(), tape.value(logits).to_vec())
    }
}

/// Draws N scaling sets, one vector per prunable backbone layer, from the
/// given distribution. Head layers get no vector.
pub fn init_scaling_sets(net: &Network, n: usize, dist: InitDist, seed: u64) -> Result<Vec<ScalingSet>> {
    if n < 1 {
        return Err(Error::invalid("init_scaling_sets", "need at least one member"));
    }
    let widths = net.prunable_widths();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw: Box<dyn FnMut(&mut ChaCha8Rng) -> f64> = match dist {
        InitDist::Normal { mean, std } => {
            let normal = Normal::new(mean, std)
                .map_err(|e| Error::invalid("init_scaling_sets", e.to_string()))?;
            Box::new(move |r| normal.sample(r))
        }
        InitDist::Uniform { lo, hi } => {
            if !(lo < hi) {
                return Err(Error::invalid("init_scaling_sets", "uniform needs lo < hi"));
            }
            Box::new(move |r| r.gen_range(lo..hi))
        }
    };
    let mut sets = Vec::with_capacity(n);
    for member in 0..n {
        let vectors = widths
            .iter()
            .map(|&w| {
                Tensor::new(vec![w], (0..w).map(|_| draw(&mut rng)).collect()).unwrap()
            })
            .collect();
        sets.push(ScalingSet { member, vectors });
    }
    Ok(sets)
}

/// Splits a batch of `batch` samples among `members` sub-batches of size
/// ceil(batch/members). Short sub-batches are padded with the earliest
/// samples they do not already hold, so no sub-batch sees a sample twice
/// and every sample lands somewhere.
pub fn partition_batch(batch: usize, members: usize) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || members == 0 {
        return Err(Error::invalid(
            "partition_batch",
            format!("batch {batch}, members {members}: both must be positive"),
        ));
    }
    let chunk = batch.div_ceil(members);
    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(members);
    for i in 0..members {
        let lo = (i * chunk).min(batch);
        let hi = ((i + 1) * chunk).min(batch);
        parts.push((lo..hi).collect());
    }
    for part in parts.iter_mut() {
        let mut cand = 0usize;
        while part.len() < chunk {
            if !part.contains(&cand) {
                part.push(cand);
            }
            cand += 1;
        }
    }
    Ok(parts)
}
