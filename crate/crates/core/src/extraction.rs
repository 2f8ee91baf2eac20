//! Physical extraction of sub-networks: slice kept output neurons/channels
//! out of each prunable layer, propagate the cut to the next layer's input
//! side, and remap channel indices to flattened feature indices across
//! flatten boundaries. The original network is never modified.

use crate::arch::{ArchSpec, LayerSpec};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Layer, Network, ScalingSet};
use crate::saliency::{compute_saliency, select_indices, threshold, IndexSets, Scope};

/// Kept input/output indices of one prunable layer, in that layer's native
/// coordinates (features for linear, channels for conv).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIo {
    pub kept_in: Vec<usize>,
    pub kept_out: Vec<usize>,
}

/// Slicing plan for a whole network: one [`LayerIo`] per prunable backbone
/// layer plus the feature indices surviving into the head's first linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetBlueprint {
    layers: Vec<LayerIo>,
    head_input: Vec<usize>,
}

enum Carry {
    Channels(Vec<usize>),
    Features(Vec<usize>),
}

impl Carry {
    fn features(self, op: &str) -> Result<Vec<usize>> {
        match self {
            Carry::Features(f) => Ok(f),
            Carry::Channels(_) => Err(Error::Blueprint(format!(
                "{op}: expected flat features, found channels; flatten is missing"
            ))),
        }
    }

    fn channels(self, op: &str) -> Result<Vec<usize>> {
        match self {
            Carry::Channels(c) => Ok(c),
            Carry::Features(_) => Err(Error::Blueprint(format!(
                "{op}: expected channels, found flat features"
            ))),
        }
    }
}

fn check_sorted_in_range(kept: &[usize], width: usize, what: &str) -> Result<()> {
    if kept.is_empty() {
        return Err(Error::Blueprint(format!("{what}: empty index set")));
    }
    for w in kept.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Blueprint(format!(
                "{what}: indices must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let last = *kept.last().unwrap();
    if last >= width {
        return Err(Error::Blueprint(format!(
            "{what}: index {last} out of range for width {width}"
        )));
    }
    Ok(())
}

impl SubnetBlueprint {
    /// Derives the plan from per-layer kept-output sets: the first prunable
    /// layer keeps its full input, later ones inherit the previous layer's
    /// kept outputs, with channel indices spread to `k*H*W + s` features
    /// across flatten.
    pub fn from_index_sets(spec: &ArchSpec, sets: &IndexSets) -> Result<SubnetBlueprint> {
        let widths = spec.prunable_widths();
        if sets.layers().len() != widths.len() {
            return Err(Error::Blueprint(format!(
                "{} index sets for {} prunable layers",
                sets.layers().len(),
                widths.len()
            )));
        }
        let shapes = spec.backbone_shapes();
        let mut carry = match spec.input.as_slice() {
            [d] => Carry::Features((0..*d).collect()),
            [c, _, _] => Carry::Channels((0..*c).collect()),
            other => {
                return Err(Error::Blueprint(format!(
                    "unsupported input shape {other:?}"
                )))
            }
        };
        let mut layers = Vec::with_capacity(widths.len());
        let mut prunable = 0usize;
        for (i, layer) in spec.backbone.iter().enumerate() {
            match layer {
                LayerSpec::Linear { in_dim, out_dim, .. } => {
                    let kept_in = carry.features(&format!("backbone layer {i}"))?;
                    check_sorted_in_range(&kept_in, *in_dim, &format!("backbone layer {i} input"))?;
                    let kept_out = sets.kept(prunable).to_vec();
                    check_sorted_in_range(&kept_out, *out_dim, &format!("backbone layer {i} output"))?;
                    carry = Carry::Features(kept_out.clone());
                    layers.push(LayerIo { kept_in, kept_out });
                    prunable += 1;
                }
                LayerSpec::Conv2d { c_in, c_out, .. } => {
                    let kept_in = carry.channels(&format!("backbone layer {i}"))?;
                    check_sorted_in_range(&kept_in, *c_in, &format!("backbone layer {i} input"))?;
                    let kept_out = sets.kept(prunable).to_vec();
                    check_sorted_in_range(&kept_out, *c_out, &format!("backbone layer {i} output"))?;
                    carry = Carry::Channels(kept_out.clone());
                    layers.push(LayerIo { kept_in, kept_out });
                    prunable += 1;
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
                LayerSpec::Flatten => {
                    carry = flatten_carry(carry, &shapes[i]);
                }
            }
        }
        // Walk head prefixes (relu/flatten) to land in the first linear's
        // input coordinates.
        let after_backbone = shapes.last().expect("shapes include the input").clone();
        for layer in &spec.head {
            match layer {
                LayerSpec::Flatten => carry = flatten_carry(carry, &after_backbone),
                LayerSpec::Relu => {}
                LayerSpec::Linear { .. } => break,
                LayerSpec::Conv2d { .. } | LayerSpec::MaxPool { .. } => {
                    return Err(Error::Blueprint(
                        "head may only hold linear, relu, and flatten layers".into(),
                    ))
                }
            }
        }
        let head_input = carry.features("head")?;
        Ok(SubnetBlueprint { layers, head_input })
    }

    pub fn layers(&self) -> &[LayerIo] {
        &self.layers
    }

    pub fn head_input(&self) -> &[usize] {
        &self.head_input
    }

    /// Backbone-plus-one-head parameter count implied by the plan.
    pub fn param_count(&self, spec: &ArchSpec) -> usize {
        let mut total = 0usize;
        let mut prunable = 0usize;
        for layer in &spec.backbone {
            match layer {
                LayerSpec::Linear { bias, .. } => {
                    let io = &self.layers[prunable];
                    total += io.kept_in.len() * io.kept_out.len()
                        + if *bias { io.kept_out.len() } else { 0 };
                    prunable += 1;
                }
                LayerSpec::Conv2d { k, bias, .. } => {
                    let io = &self.layers[prunable];
                    total += io.kept_out.len() * io.kept_in.len() * k * k
                        + if *bias { io.kept_out.len() } else { 0 };
                    prunable += 1;
                }
                _ => {}
            }
        }
        let mut first_linear = true;
        for layer in &spec.head {
            if let LayerSpec::Linear { in_dim, out_dim, bias } = layer {
                let fan_in = if first_linear { self.head_input.len() } else { *in_dim };
                first_linear = false;
                total += fan_in * out_dim + if *bias { *out_dim } else { 0 };
            }
        }
        total
    }
}

fn flatten_carry(carry: Carry, pre_shape: &[usize]) -> Carry {
    match carry {
        Carry::Channels(chs) => {
            let hw: usize = pre_shape[1..].iter().product();
            let mut feats = Vec::with_capacity(chs.len() * hw);
            for &k in &chs {
                for s in 0..hw {
                    feats.push(k * hw + s);
                }
            }
            Carry::Features(feats)
        }
        flat => flat,
    }
}

fn slice_linear(layer: &Layer, kept_in: &[usize], kept_out: &[usize]) -> Layer {
    let (in_dim, out_dim, bias_flag) = match layer.spec {
        LayerSpec::Linear { in_dim, out_dim, bias } => (in_dim, out_dim, bias),
        _ => unreachable!("slice_linear on non-linear layer"),
    };
    debug_assert_eq!(layer.weight.as_ref().unwrap().shape(), &[in_dim, out_dim]);
    let w = layer.weight.as_ref().unwrap().data();
    let mut data = Vec::with_capacity(kept_in.len() * kept_out.len());
    for &r in kept_in {
        for &c in kept_out {
            data.push(w[r * out_dim + c]);
        }
    }
    let weight = Tensor::new(vec![kept_in.len(), kept_out.len()], data).unwrap();
    let bias = layer.bias.as_ref().map(|b| {
        Tensor::new(
            vec![kept_out.len()],
            kept_out.iter().map(|&c| b.data()[c]).collect(),
        )
        .unwrap()
    });
    Layer {
        spec: LayerSpec::Linear {
            in_dim: kept_in.len(),
            out_dim: kept_out.len(),
            bias: bias_flag,
        },
        weight: Some(weight),
        bias,
    }
}

fn slice_conv(layer: &Layer, kept_in: &[usize], kept_out: &[usize]) -> Layer {
    let (c_in, k, stride, pad, bias_flag) = match layer.spec {
        LayerSpec::Conv2d {
            c_in,
            k,
            stride,
            pad,
            bias,
            ..
        } => (c_in, k, stride, pad, bias),
        _ => unreachable!("slice_conv on non-conv layer"),
    };
    let w = layer.weight.as_ref().unwrap().data();
    let kk = k * k;
    let mut data = Vec::with_capacity(kept_out.len() * kept_in.len() * kk);
    for &o in kept_out {
        for &i in kept_in {
            let base = (o * c_in + i) * kk;
            data.extend_from_slice(&w[base..base + kk]);
        }
    }
    let weight = Tensor::new(vec![kept_out.len(), kept_in.len(), k, k], data).unwrap();
    let bias = layer.bias.as_ref().map(|b| {
        Tensor::new(
            vec![kept_out.len()],
            kept_out.iter().map(|&o| b.data()[o]).collect(),
        )
        .unwrap()
    });
    Layer {
        spec: LayerSpec::Conv2d {
            c_in: kept_in.len(),
            c_out: kept_out.len(),
            k,
            stride,
            pad,
            bias: bias_flag,
        },
        weight: Some(weight),
        bias,
    }
}

/// Copies the kept slices of every layer into a smaller standalone network.
/// Weight values are taken verbatim from the original; the head keeps its
/// full output width and loses only the input rows that were pruned away.
pub fn extract_subnetwork(net: &Network, blueprint: &SubnetBlueprint) -> Result<Network> {
    let spec = net.spec();
    if blueprint.layers.len() != spec.prunable_widths().len() {
        return Err(Error::Blueprint(format!(
            "blueprint covers {} prunable layers, network has {}",
            blueprint.layers.len(),
            spec.prunable_widths().len()
        )));
    }
    // Re-validate against this network's dimensions.
    let mut prunable = 0usize;
    for layer in &spec.backbone {
        match layer {
            LayerSpec::Linear { in_dim, out_dim, .. } => {
                let io = &blueprint.layers[prunable];
                check_sorted_in_range(&io.kept_in, *in_dim, "linear input")?;
                check_sorted_in_range(&io.kept_out, *out_dim, "linear output")?;
                prunable += 1;
            }
            LayerSpec::Conv2d { c_in, c_out, .. } => {
                let io = &blueprint.layers[prunable];
                check_sorted_in_range(&io.kept_in, *c_in, "conv input")?;
                check_sorted_in_range(&io.kept_out, *c_out, "conv output")?;
                prunable += 1;
            }
            _ => {}
        }
    }

    let mut backbone = Vec::with_capacity(net.backbone.len());
    let mut idx = 0usize;
    for layer in &net.backbone {
        match &layer.spec {
            LayerSpec::Linear { .. } => {
                let io = &blueprint.layers[idx];
                backbone.push(slice_linear(layer, &io.kept_in, &io.kept_out));
                idx += 1;
            }
            LayerSpec::Conv2d { .. } => {
                let io = &blueprint.layers[idx];
                backbone.push(slice_conv(layer, &io.kept_in, &io.kept_out));
                idx += 1;
            }
            _ => backbone.push(layer.clone()),
        }
    }

    let mut heads = Vec::with_capacity(net.heads.len());
    for head in &net.heads {
        let mut new_head = Vec::with_capacity(head.len());
        let mut first_linear = true;
        for layer in head {
            match &layer.spec {
                LayerSpec::Linear { in_dim, out_dim, .. } => {
                    if first_linear {
                        check_sorted_in_range(&blueprint.head_input, *in_dim, "head input")?;
                        let full_out: Vec<usize> = (0..*out_dim).collect();
                        new_head.push(slice_linear(layer, &blueprint.head_input, &full_out));
                        first_linear = false;
                    } else {
                        new_head.push(layer.clone());
                    }
                }
                _ => new_head.push(layer.clone()),
            }
        }
        heads.push(new_head);
    }

    let new_spec = ArchSpec {
        input: spec.input.clone(),
        backbone: backbone.iter().map(|l| l.spec.clone()).collect(),
        head: heads[0].iter().map(|l| l.spec.clone()).collect(),
    };
    Ok(Network::from_layers(new_spec, backbone, heads))
}

/// 0/1 scale vectors that zero every non-kept output neuron; multiplying
/// them in during a forward pass is the reference behavior extraction must
/// reproduce.
pub fn zero_one_masks(widths: &[usize], sets: &IndexSets) -> Result<Vec<Vec<f64>>> {
    if widths.len() != sets.layers().len() {
        return Err(Error::Blueprint(format!(
            "{} index sets for {} layers",
            sets.layers().len(),
            widths.len()
        )));
    }
    let mut masks = Vec::with_capacity(widths.len());
    for (l, (&w, kept)) in widths.iter().zip(sets.layers()).enumerate() {
        let mut m = vec![0.0; w];
        for &j in kept {
            if j >= w {
                return Err(Error::Blueprint(format!(
                    "layer {l}: kept index {j} out of range for width {w}"
                )));
            }
            m[j] = 1.0;
        }
        masks.push(m);
    }
    Ok(masks)
}

/// Runs the per-member pipeline (saliency, threshold, selection, slicing)
/// against the same frozen original and returns the extracted members.
pub fn extract_ensemble(
    net: &Network,
    sets: &[ScalingSet],
    p: f64,
    scope: Scope,
    data: &Dataset,
) -> Result<Vec<Network>> {
    let mut members = Vec::with_capacity(sets.len());
    for set in sets {
        let map = compute_saliency(net, set, data, scope)?;
        let th = threshold(&map, p, scope, None)?;
        let kept = select_indices(&map, &th, None)?;
        let plan = SubnetBlueprint::from_index_sets(net.spec(), &kept)?;
        members.push(extract_subnetwork(net, &plan)?);
    }
    Ok(members)
}

/// Index sets and blueprint for one member; exposed so callers can persist
/// the plan alongside the extracted weights.
pub fn plan_member(
    net: &Network,
    set: &ScalingSet,
    p: f64,
    scope: Scope,
    data: &Dataset,
) -> Result<(IndexSets, SubnetBlueprint)> {
    let map = compute_saliency(net, set, data, scope)?;
    let th = threshold(&map, p, scope, None)?;
    let kept = select_indices(&map, &th, None)?;
    let plan = SubnetBlueprint::from_index_sets(net.spec(), &kept)?;
    Ok((kept, plan))
}
