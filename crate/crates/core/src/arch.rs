//! Architecture descriptions: layer specs, shape propagation, named
//! presets and the canonical text form used by the model container.

use crate::error::{Error, Result};

/// Fully resolved layer. Linear and conv2d are "prunable": they own output
/// neurons/channels that scaling vectors and masks attach to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        k: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output neurons (linear) or channels (conv); None for shape-preserving
    /// layers.
    pub fn out_units(&self) -> Option<usize> {
        match self {
            LayerSpec::Linear { out_dim, .. } => Some(*out_dim),
            LayerSpec::Conv2d { c_out, .. } => Some(*c_out),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Linear { in_dim, out_dim, bias } => {
                in_dim * out_dim + if *bias { *out_dim } else { 0 }
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                k,
                bias,
                ..
            } => c_out * c_in * k * k + if *bias { *c_out } else { 0 },
            _ => 0,
        }
    }
}

/// Unresolved layer as written in configs: output sizes only, input sizes
/// inferred by shape propagation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    Linear { out: usize, bias: bool },
    Conv2d { out: usize, k: usize, stride: usize, pad: usize, bias: bool },
    Relu,
    MaxPool { k: usize },
    Flatten,
}

/// Resolved architecture: per-sample input shape, shared backbone, and the
/// head template (classifier layers, never output-pruned). Networks may
/// carry several heads built from the same template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input: Vec<usize>,
    pub backbone: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
}

fn shape_after(shape: &[usize], desc: &LayerDesc, pos: &str, idx: usize) -> Result<(LayerSpec, Vec<usize>)> {
    let err = |msg: String| Error::Architecture(format!("{pos} layer {idx}: {msg}"));
    match desc {
        LayerDesc::Linear { out, bias } => match shape {
            [d] => Ok((
                LayerSpec::Linear {
                    in_dim: *d,
                    out_dim: *out,
                    bias: *bias,
                },
                vec![*out],
            )),
            other => Err(err(format!(
                "linear needs a flat input, got {other:?}; insert flatten after the previous layer"
            ))),
        },
        LayerDesc::Conv2d {
            out,
            k,
            stride,
            pad,
            bias,
        } => match shape {
            [c, h, w] => {
                if *stride < 1 {
                    return Err(err("conv2d stride must be >= 1".into()));
                }
                if *k > h + 2 * pad || *k > w + 2 * pad {
                    return Err(err(format!(
                        "kernel {k} larger than padded input {}x{}",
                        h + 2 * pad,
                        w + 2 * pad
                    )));
                }
                let ho = (h + 2 * pad - k) / stride + 1;
                let wo = (w + 2 * pad - k) / stride + 1;
                Ok((
                    LayerSpec::Conv2d {
                        c_in: *c,
                        c_out: *out,
                        k: *k,
                        stride: *stride,
                        pad: *pad,
                        bias: *bias,
                    },
                    vec![*out, ho, wo],
                ))
            }
            other => Err(err(format!("conv2d needs a c×h×w input, got {other:?}"))),
        },
        LayerDesc::Relu => Ok((LayerSpec::Relu, shape.to_vec())),
        LayerDesc::MaxPool { k } => match shape {
            [c, h, w] => {
                if *k < 1 || h < k || w < k {
                    return Err(err(format!("maxpool window {k} does not fit {h}x{w}")));
                }
                Ok((LayerSpec::MaxPool { k: *k }, vec![*c, (h - k) / k + 1, (w - k) / k + 1]))
            }
            other => Err(err(format!("maxpool needs a c×h×w input, got {other:?}"))),
        },
        LayerDesc::Flatten => {
            let flat: usize = shape.iter().product();
            Ok((LayerSpec::Flatten, vec![flat]))
        }
    }
}

impl ArchSpec {
    /// Infers every in-dimension by walking the layer chain from the input
    /// shape. Incompatible adjacent layers abort with the offending pair.
    pub fn resolve(input: Vec<usize>, backbone: &[LayerDesc], head: &[LayerDesc]) -> Result<Self> {
        if input.is_empty() || input.len() == 2 || input.len() > 3 {
            return Err(Error::Architecture(format!(
                "input shape must be [d] or [c,h,w], got {input:?}"
            )));
        }
        let mut shape = input.clone();
        let mut rb = Vec::with_capacity(backbone.len());
        for (i, d) in backbone.iter().enumerate() {
            let (spec, next) = shape_after(&shape, d, "backbone", i)?;
            rb.push(spec);
            shape = next;
        }
        if head.is_empty() {
            return Err(Error::Architecture("head needs at least one linear layer".into()));
        }
        let mut rh = Vec::with_capacity(head.len());
        for (i, d) in head.iter().enumerate() {
            if matches!(d, LayerDesc::Conv2d { .. } | LayerDesc::MaxPool { .. }) {
                return Err(Error::Architecture(format!(
                    "head layer {i}: only linear/relu/flatten layers are allowed in the head"
                )));
            }
            let (spec, next) = shape_after(&shape, d, "head", i)?;
            rh.push(spec);
            shape = next;
        }
        if !matches!(rh.last(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::Architecture("head must end with a linear layer".into()));
        }
        Ok(ArchSpec {
            input,
            backbone: rb,
            head: rh,
        })
    }

    /// Sample shape after each backbone layer, starting with the input.
    /// Index i+1 holds the output shape of backbone layer i.
    pub fn backbone_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input.clone()];
        let mut cur = self.input.clone();
        for l in &self.backbone {
            cur = match l {
                LayerSpec::Linear { out_dim, .. } => vec![*out_dim],
                LayerSpec::Conv2d {
                    c_out,
                    k,
                    stride,
                    pad,
                    ..
                } => {
                    let (h, w) = (cur[1], cur[2]);
                    vec![
                        *c_out,
                        (h + 2 * pad - k) / stride + 1,
                        (w + 2 * pad - k) / stride + 1,
                    ]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { k } => vec![cur[0], (cur[1] - k) / k + 1, (cur[2] - k) / k + 1],
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        shapes
    }

    /// Output neuron/channel count of every prunable backbone layer.
    pub fn prunable_widths(&self) -> Vec<usize> {
        self.backbone.iter().filter_map(|l| l.out_units()).collect()
    }

    /// Class count (out-dimension of the head's final linear layer).
    pub fn classes(&self) -> usize {
        match self.head.last() {
            Some(LayerSpec::Linear { out_dim, .. }) => *out_dim,
            _ => unreachable!("resolve() guarantees a linear head tail"),
        }
    }

    /// Parameters of backbone plus one head.
    pub fn param_count(&self) -> usize {
        self.backbone
            .iter()
            .chain(&self.head)
            .map(LayerSpec::param_count)
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.iter().map(LayerSpec::param_count).sum()
    }

    /// Stable text form embedded in model files. One line per layer.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        s.push_str("input ");
        s.push_str(
            &self
                .input
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x"),
        );
        s.push('\n');
        for (prefix, layers) in [("backbone", &self.backbone), ("head", &self.head)] {
            for l in layers {
                s.push_str(prefix);
                s.push(' ');
                match l {
                    LayerSpec::Linear { in_dim, out_dim, bias } => {
                        s.push_str(&format!("linear {in_dim} {out_dim} {}", if *bias { "b" } else { "n" }))
                    }
                    LayerSpec::Conv2d {
                        c_in,
                        c_out,
                        k,
                        stride,
                        pad,
                        bias,
                    } => s.push_str(&format!(
                        "conv2d {c_in} {c_out} {k} {stride} {pad} {}",
                        if *bias { "b" } else { "n" }
                    )),
                    LayerSpec::Relu => s.push_str("relu"),
                    LayerSpec::MaxPool { k } => s.push_str(&format!("maxpool {k}")),
                    LayerSpec::Flatten => s.push_str("flatten"),
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let bad = |line: &str, why: &str| {
            Error::Architecture(format!("canonical text line {line:?}: {why}"))
        };
        let mut input: Option<Vec<usize>> = None;
        let mut backbone = Vec::new();
        let mut head = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            if tag == "input" {
                let dims = parts
                    .next()
                    .ok_or_else(|| bad(line, "missing dimensions"))?
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(line, "bad dimension")))
                    .collect::<Result<Vec<_>>>()?;
                input = Some(dims);
                continue;
            }
            let dst: &mut Vec<LayerSpec> = match tag {
                "backbone" => &mut backbone,
                "head" => &mut head,
                _ => return Err(bad(line, "unknown section")),
            };
            let kind = parts.next().ok_or_else(|| bad(line, "missing layer kind"))?;
            let mut num = |what: &str| -> Result<usize> {
                parts
                    .next()
                    .ok_or_else(|| bad(line, what))?
                    .parse::<usize>()
                    .map_err(|_| bad(line, what))
            };
            let spec = match kind {
                "linear" => {
                    let (i, o) = (num("in_dim")?, num("out_dim")?);
                    let b = parts.next() == Some("b");
                    LayerSpec::Linear {
                        in_dim: i,
                        out_dim: o,
                        bias: b,
                    }
                }
                "conv2d" => {
                    let (ci, co, k, st, pd) = (
                        num("c_in")?,
                        num("c_out")?,
                        num("k")?,
                        num("stride")?,
                        num("pad")?,
                    );
                    let b = parts.next() == Some("b");
                    LayerSpec::Conv2d {
                        c_in: ci,
                        c_out: co,
                        k,
                        stride: st,
                        pad: pd,
                        bias: b,
                    }
                }
                "relu" => LayerSpec::Relu,
                "maxpool" => LayerSpec::MaxPool { k: num("k")? },
                "flatten" => LayerSpec::Flatten,
                _ => return Err(bad(line, "unknown layer kind")),
            };
            dst.push(spec);
        }
        let input = input.ok_or_else(|| Error::Architecture("canonical text has no input line".into()))?;
        if head.is_empty() {
            return Err(Error::Architecture("canonical text has no head layers".into()));
        }
        Ok(ArchSpec {
            input,
            backbone,
            head,
        })
    }
}

/// Plain MLP: each hidden width becomes linear+relu, classifier on top.
pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> ArchSpec {
    let mut backbone = Vec::new();
    for &h in hidden {
        backbone.push(LayerDesc::Linear { out: h, bias: true });
        backbone.push(LayerDesc::Relu);
    }
    ArchSpec::resolve(
        vec![input_dim],
        &backbone,
        &[LayerDesc::Linear {
            out: classes,
            bias: true,
        }],
    )
    .expect("mlp preset always resolves")
}

/// Two 5×5 conv blocks and a 120-wide linear layer; prunable widths
/// (6, 16, 120).
pub fn lenet5(input: Vec<usize>, classes: usize) -> Result<ArchSpec> {
    let conv = |out| LayerDesc::Conv2d {
        out,
        k: 5,
        stride: 1,
        pad: 0,
        bias: true,
    };
    ArchSpec::resolve(
        input,
        &[
            conv(6),
            LayerDesc::Relu,
            LayerDesc::MaxPool { k: 2 },
            conv(16),
            LayerDesc::Relu,
            LayerDesc::MaxPool { k: 2 },
            LayerDesc::Flatten,
            LayerDesc::Linear { out: 120, bias: true },
            LayerDesc::Relu,
        ],
        &[LayerDesc::Linear {
            out: classes,
            bias: true,
        }],
    )
}

/// VGG11 with every width halved: conv widths
/// 32,64,128,128,256,256,256,256 (sum 1376) and a 2048-wide two-layer
/// classifier head.
pub fn half_vgg11(input: Vec<usize>, classes: usize) -> Result<ArchSpec> {
    let conv = |out| LayerDesc::Conv2d {
        out,
        k: 3,
        stride: 1,
        pad: 1,
        bias: true,
    };
    let pool = LayerDesc::MaxPool { k: 2 };
    let backbone = vec![
        conv(32),
        LayerDesc::Relu,
        pool.clone(),
        conv(64),
        LayerDesc::Relu,
        pool.clone(),
        conv(128),
        LayerDesc::Relu,
        conv(128),
        LayerDesc::Relu,
        pool.clone(),
        conv(256),
        LayerDesc::Relu,
        conv(256),
        LayerDesc::Relu,
        pool.clone(),
        conv(256),
        LayerDesc::Relu,
        conv(256),
        LayerDesc::Relu,
        pool,
        LayerDesc::Flatten,
    ];
    ArchSpec::resolve(
        input,
        &backbone,
        &[
            LayerDesc::Linear { out: 2048, bias: true },
            LayerDesc::Relu,
            LayerDesc::Linear { out: 2048, bias: true },
            LayerDesc::Relu,
            LayerDesc::Linear {
                out: classes,
                bias: true,
            },
        ],
    )
}
