//! Wengert-list tape. Values are stored in a flat arena; every op appends a
//! record and `backward` replays the records in reverse.

use crate::diversity;
use crate::error::{Error, Result};

/// Index of a value in the tape arena.
pub type ValueId = usize;

/// Batch reduction used by loss ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

struct Slot {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    Matmul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        a: ValueId,
        bias: ValueId,
        out: ValueId,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        out: ValueId,
        dims: ConvDims,
    },
    // out[.., j, ..spatial] = a[.., j, ..spatial] * s[j]; `rows` are leading
    // batch entries, `inner` the trailing spatial extent per neuron/channel.
    Scale {
        a: ValueId,
        s: ValueId,
        out: ValueId,
        rows: usize,
        units: usize,
        inner: usize,
    },
    Relu {
        x: ValueId,
        out: ValueId,
    },
    MaxPool {
        x: ValueId,
        out: ValueId,
        argmax: Vec<usize>,
    },
    Flatten {
        x: ValueId,
        out: ValueId,
    },
    Softmax {
        x: ValueId,
        out: ValueId,
        rows: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: ValueId,
        out: ValueId,
        labels: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
    NllProbs {
        probs: ValueId,
        out: ValueId,
        labels: Vec<usize>,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    ScaleConst {
        a: ValueId,
        c: f64,
        out: ValueId,
    },
    SumAll {
        a: ValueId,
        out: ValueId,
    },
    RecipShift {
        a: ValueId,
        eps: f64,
        out: ValueId,
    },
    Mmd2Rbf {
        u: ValueId,
        v: ValueId,
        out: ValueId,
    },
}

/// Define-by-run tape. Ops compute eagerly; `backward` runs once.
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            slots: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: impl FnOnce(ValueId) -> Op) -> ValueId {
        let id = self.slots.len();
        let grad = vec![0.0; data.len()];
        self.slots.push(Slot { data, shape, grad });
        let rec = op(id);
        self.ops.push(rec);
        id
    }

    /// Registers an input or parameter value. Gradients accumulate into the
    /// tape slot and are read back with [`Tape::grad`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(self.push(data, shape, |_| Op::Leaf))
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.slots[id].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.slots[id].shape
    }

    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.slots[id].grad
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (&self.slots[a].data, &self.slots[b].data);
            for i in 0..m {
                for t in 0..k {
                    let av = da[i * k + t];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[t * n..(t + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        Ok(self.push(out, vec![m, n], |id| Op::Matmul { a, b, out: id, m, k, n }))
    }

    /// Adds a bias vector to every row of a 2-D value.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut out = self.slots[a].data.clone();
        {
            let bv = &self.slots[bias].data;
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += bv[c];
                }
            }
        }
        Ok(self.push(out, sa, |id| Op::AddBias {
            a,
            bias,
            out: id,
            rows,
            cols,
        }))
    }

    /// Batched cross-correlation. x: [B,C_in,H,W], w: [C_out,C_in,k,k],
    /// bias: [C_out] when present.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, k) = (sw[0], sw[2]);
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: sb.to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        {
            let dx = &self.slots[x].data;
            let dw = &self.slots[w].data;
            for b in 0..batch {
                for co in 0..c_out {
                    let base_acc = if let Some(bid) = bias {
                        self.slots[bid].data[co]
                    } else {
                        0.0
                    };
                    for oi in 0..h_out {
                        for oj in 0..w_out {
                            let mut acc = base_acc;
                            for ci in 0..c_in {
                                for u in 0..k {
                                    let yi = (oi * stride + u) as isize - pad as isize;
                                    if yi < 0 || yi >= h as isize {
                                        continue;
                                    }
                                    for v in 0..k {
                                        let xj = (oj * stride + v) as isize - pad as isize;
                                        if xj < 0 || xj >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((b * c_in + ci) * h + yi as usize) * wd + xj as usize;
                                        let wi = ((co * c_in + ci) * k + u) * k + v;
                                        acc += dx[xi] * dw[wi];
                                    }
                                }
                            }
                            out[((b * c_out + co) * h_out + oi) * w_out + oj] = acc;
                        }
                    }
                }
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        Ok(self.push(out, vec![batch, c_out, h_out, w_out], |id| Op::Conv2d {
            x,
            w,
            bias,
            out: id,
            dims,
        }))
    }

    /// Multiplies one value per neuron/channel of `a` across any trailing
    /// spatial extent. Accepted `a` shapes: [n], [B,n], [B,C,H,W]; `s` must
    /// have one entry per unit of the scaled axis.
    pub fn scale(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        let (sa, ss) = (self.shape(a).to_vec(), self.shape(s).to_vec());
        if ss.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale",
                lhs: sa,
                rhs: ss,
            });
        }
        let (rows, units, inner) = match sa.len() {
            1 => (1, sa[0], 1),
            2 => (sa[0], sa[1], 1),
            4 => (sa[0], sa[1], sa[2] * sa[3]),
            _ => {
                return Err(Error::invalid(
                    "scale",
                    format!("unsupported operand shape {:?}", sa),
                ))
            }
        };
        if units != ss[0] {
            return Err(Error::ShapeMismatch {
                op: "scale",
                lhs: sa,
                rhs: ss,
            });
        }
        let mut out = self.slots[a].data.clone();
        {
            let sv = &self.slots[s].data;
            for r in 0..rows {
                for u in 0..units {
                    let base = (r * units + u) * inner;
                    let f = sv[u];
                    for t in 0..inner {
                        out[base + t] *= f;
                    }
                }
            }
        }
        Ok(self.push(out, sa, |id| Op::Scale {
            a,
            s,
            out: id,
            rows,
            units,
            inner,
        }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self.slots[x].data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.slots[x].shape.clone();
        self.push(out, shape, |id| Op::Relu { x, out: id })
    }

    /// Non-overlapping k×k max pooling (stride = k). Ties keep the first
    /// element in row-major scan order.
    pub fn maxpool2d(&mut self, x: ValueId, k: usize) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid(
                "maxpool2d",
                format!("expected 4-d input, got {:?}", sx),
            ));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if k < 1 || h < k || w < k {
            return Err(Error::invalid(
                "maxpool2d",
                format!("window {k} does not fit input {h}x{w}"),
            ));
        }
        let (h_out, w_out) = ((h - k) / k + 1, (w - k) / k + 1);
        let mut out = vec![0.0; batch * c * h_out * w_out];
        let mut argmax = vec![0usize; out.len()];
        {
            let dx = &self.slots[x].data;
            for b in 0..batch {
                for ch in 0..c {
                    for oi in 0..h_out {
                        for oj in 0..w_out {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for u in 0..k {
                                for v in 0..k {
                                    let idx = ((b * c + ch) * h + oi * k + u) * w + oj * k + v;
                                    if dx[idx] > best {
                                        best = dx[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((b * c + ch) * h_out + oi) * w_out + oj;
                            out[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, vec![batch, c, h_out, w_out], |id| Op::MaxPool {
            x,
            out: id,
            argmax,
        }))
    }

    /// Reshapes [B,...] to [B, prod(...)]. Row-major layout is unchanged.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::invalid("flatten", "scalar input"));
        }
        let batch = sx[0];
        let rest: usize = sx[1..].iter().product();
        let data = self.slots[x].data.clone();
        Ok(self.push(data, vec![batch, rest], |id| Op::Flatten { x, out: id }))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::invalid(
                "softmax",
                format!("expected 2-d logits, got {:?}", sx),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![0.0; rows * cols];
        {
            let dx = &self.slots[x].data;
            for r in 0..rows {
                let row = &dx[r * cols..(r + 1) * cols];
                softmax_row(row, &mut out[r * cols..(r + 1) * cols]);
            }
        }
        Ok(self.push(out, sx, |id| Op::Softmax {
            x,
            out: id,
            rows,
            cols,
        }))
    }

    /// Softmax cross-entropy against integer labels, reduced over the batch.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<ValueId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if rows == 0 {
            return Err(Error::invalid("cross_entropy", "empty batch"));
        }
        for (row, &l) in labels.iter().enumerate() {
            if l >= cols {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: cols,
                    row,
                });
            }
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        {
            let dx = &self.slots[logits].data;
            for r in 0..rows {
                let row = &dx[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let prow = &mut probs[r * cols..(r + 1) * cols];
                for (p, &v) in prow.iter_mut().zip(row) {
                    *p = (v - m).exp();
                    sum += *p;
                }
                for p in prow.iter_mut() {
                    *p /= sum;
                }
                total += sum.ln() - (row[labels[r]] - m);
            }
        }
        let value = match reduction {
            Reduction::Mean => total / rows as f64,
            Reduction::Sum => total,
        };
        let labels = labels.to_vec();
        Ok(self.push(vec![value], vec![1], |id| Op::CrossEntropy {
            logits,
            out: id,
            labels,
            probs,
            reduction,
        }))
    }

    /// Mean over the batch of −ln p[label]. `probs` rows must be strictly
    /// positive at the label positions (softmax output always is).
    pub fn nll_probs(&mut self, probs: ValueId, labels: &[usize]) -> Result<ValueId> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "nll_probs",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if rows == 0 {
            return Err(Error::invalid("nll_probs", "empty batch"));
        }
        for (row, &l) in labels.iter().enumerate() {
            if l >= cols {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: cols,
                    row,
                });
            }
        }
        let mut total = 0.0;
        {
            let dp = &self.slots[probs].data;
            for (r, &l) in labels.iter().enumerate() {
                total -= dp[r * cols + l].ln();
            }
        }
        let value = total / rows as f64;
        let labels = labels.to_vec();
        Ok(self.push(vec![value], vec![1], |id| Op::NllProbs {
            probs,
            out: id,
            labels,
        }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.slots[a]
            .data
            .iter()
            .zip(&self.slots[b].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, sa, |id| Op::Add { a, b, out: id }))
    }

    pub fn scale_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let out: Vec<f64> = self.slots[a].data.iter().map(|&v| v * c).collect();
        let shape = self.slots[a].shape.clone();
        self.push(out, shape, |id| Op::ScaleConst { a, c, out: id })
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let total: f64 = self.slots[a].data.iter().sum();
        self.push(vec![total], vec![1], |id| Op::SumAll { a, out: id })
    }

    /// Elementwise 1/(x + eps).
    pub fn recip_shift(&mut self, a: ValueId, eps: f64) -> ValueId {
        let out: Vec<f64> = self.slots[a].data.iter().map(|&v| 1.0 / (v + eps)).collect();
        let shape = self.slots[a].shape.clone();
        self.push(out, shape, |id| Op::RecipShift { a, eps, out: id })
    }

    /// Squared maximum mean discrepancy between two equal-length vectors
    /// under the RBF kernel whose bandwidth is the vector length.
    pub fn mmd2_rbf(&mut self, u: ValueId, v: ValueId) -> Result<ValueId> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if su.len() != 1 || sv.len() != 1 || su[0] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "mmd2_rbf",
                lhs: su,
                rhs: sv,
            });
        }
        if su[0] < 2 {
            return Err(Error::invalid("mmd2_rbf", "vectors need at least 2 entries"));
        }
        let value = diversity::mmd2_rbf_value(&self.slots[u].data, &self.slots[v].data);
        Ok(self.push(vec![value], vec![1], |id| Op::Mmd2Rbf { u, v, out: id }))
    }

    /// Seeds the scalar `loss` with gradient 1 and replays every recorded op
    /// in reverse. May be called once per tape.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward", "tape already replayed"));
        }
        if self.slots[loss].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.slots[loss].shape),
            ));
        }
        self.backward_done = true;
        self.slots[loss].grad[0] = 1.0;
        // Ops are moved out so the replay can mutate slots without aliasing.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.apply_backward(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn take_grad(&mut self, id: ValueId) -> Vec<f64> {
        std::mem::take(&mut self.slots[id].grad)
    }

    fn put_grad(&mut self, id: ValueId, g: Vec<f64>) {
        self.slots[id].grad = g;
    }

    fn apply_backward(&mut self, op: &Op) {
        // Gradients of the op output are moved out of the arena so the
        // borrow checker allows accumulating into input slots.
        match op {
            Op::Leaf => {}
            &Op::Matmul { a, b, out, m, k, n } => {
                let g = self.take_grad(out);
                {
                    let bd = &self.slots[b].data;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                ga[i * k + t] += gv * bd[t * n + j];
                            }
                        }
                    }
                    for (dst, src) in self.slots[a].grad.iter_mut().zip(&ga) {
                        *dst += *src;
                    }
                }
                {
                    let ad = &self.slots[a].data;
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for t in 0..k {
                            let av = ad[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[t * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    for (dst, src) in self.slots[b].grad.iter_mut().zip(&gb) {
                        *dst += *src;
                    }
                }
                self.put_grad(out, g);
            }
            &Op::AddBias {
                a,
                bias,
                out,
                rows,
                cols,
            } => {
                let g = self.take_grad(out);
                for (dst, src) in self.slots[a].grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        self.slots[bias].grad[c] += g[r * cols + c];
                    }
                }
                self.put_grad(out, g);
            }
            Op::Conv2d { x, w, bias, out, dims } => {
                let (x, w, bias, out) = (*x, *w, *bias, *out);
                let &ConvDims {
                    batch,
                    c_in,
                    h,
                    w: wd,
                    c_out,
                    k,
                    stride,
                    pad,
                    h_out,
                    w_out,
                } = dims;
                let g = self.take_grad(out);
                let mut gx = vec![0.0; batch * c_in * h * wd];
                let mut gw = vec![0.0; c_out * c_in * k * k];
                let mut gb = vec![0.0; c_out];
                {
                    let dx = &self.slots[x].data;
                    let dw = &self.slots[w].data;
                    for b in 0..batch {
                        for co in 0..c_out {
                            for oi in 0..h_out {
                                for oj in 0..w_out {
                                    let gv = g[((b * c_out + co) * h_out + oi) * w_out + oj];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    gb[co] += gv;
                                    for ci in 0..c_in {
                                        for u in 0..k {
                                            let yi = (oi * stride + u) as isize - pad as isize;
                                            if yi < 0 || yi >= h as isize {
                                                continue;
                                            }
                                            for v in 0..k {
                                                let xj = (oj * stride + v) as isize - pad as isize;
                                                if xj < 0 || xj >= wd as isize {
                                                    continue;
                                                }
                                                let xi = ((b * c_in + ci) * h + yi as usize) * wd
                                                    + xj as usize;
                                                let wi = ((co * c_in + ci) * k + u) * k + v;
                                                gx[xi] += gv * dw[wi];
                                                gw[wi] += gv * dx[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (dst, src) in self.slots[x].grad.iter_mut().zip(&gx) {
                    *dst += *src;
                }
                for (dst, src) in self.slots[w].grad.iter_mut().zip(&gw) {
                    *dst += *src;
                }
                if let Some(bid) = bias {
                    for (dst, src) in self.slots[bid].grad.iter_mut().zip(&gb) {
                        *dst += *src;
                    }
                }
                self.put_grad(out, g);
            }
            &Op::Scale {
                a,
                s,
                out,
                rows,
                units,
                inner,
            } => {
                let g = self.take_grad(out);
                {
                    let sv = self.slots[s].data.clone();
                    let ad = &self.slots[a].data;
                    let mut gs = vec![0.0; units];
                    for r in 0..rows {
                        for u in 0..units {
                            let base = (r * units + u) * inner;
                            for t in 0..inner {
                                gs[u] += g[base + t] * ad[base + t];
                            }
                        }
                    }
                    for r in 0..rows {
                        for u in 0..units {
                            let base = (r * units + u) * inner;
                            for t in 0..inner {
                                self.slots[a].grad[base + t] += g[base + t] * sv[u];
                            }
                        }
                    }
                    for (dst, src) in self.slots[s].grad.iter_mut().zip(&gs) {
                        *dst += *src;
                    }
                }
                self.put_grad(out, g);
            }
            &Op::Relu { x, out } => {
                let g = self.take_grad(out);
                {
                    let xd = &self.slots[x].data;
                    let xg: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    for (dst, src) in self.slots[x].grad.iter_mut().zip(&xg) {
                        *dst += *src;
                    }
                }
                self.put_grad(out, g);
            }
            Op::MaxPool { x, out, argmax } => {
                let (x, out) = (*x, *out);
                let g = self.take_grad(out);
                for (o, &src_idx) in argmax.iter().enumerate() {
                    self.slots[x].grad[src_idx] += g[o];
                }
                self.put_grad(out, g);
            }
            &Op::Flatten { x, out } => {
                let g = self.take_grad(out);
                for (dst, src) in self.slots[x].grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
                self.put_grad(out, g);
            }
            &Op::Softmax { x, out, rows, cols } => {
                let g = self.take_grad(out);
                {
                    let p = &self.slots[out].data;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[r * cols + j] * p[r * cols + j];
                        }
                        for j in 0..cols {
                            gx[r * cols + j] = p[r * cols + j] * (g[r * cols + j] - dot);
                        }
                    }
                    for (dst, src) in self.slots[x].grad.iter_mut().zip(&gx) {
                        *dst += *src;
                    }
                }
                self.put_grad(out, g);
            }
            Op::CrossEntropy {
                logits,
                out,
                labels,
                probs,
                reduction,
            } => {
                let (logits, out) = (*logits, *out);
                let rows = labels.len();
                let cols = probs.len() / rows;
                let coef = match reduction {
                    Reduction::Mean => self.slots[out].grad[0] / rows as f64,
                    Reduction::Sum => self.slots[out].grad[0],
                };
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let indicator = if labels[r] == j { 1.0 } else { 0.0 };
                        gx[r * cols + j] = coef * (probs[r * cols + j] - indicator);
                    }
                }
                for (dst, src) in self.slots[logits].grad.iter_mut().zip(&gx) {
                    *dst += *src;
                }
            }
            Op::NllProbs { probs, out, labels } => {
                let (probs, out) = (*probs, *out);
                let rows = labels.len();
                let cols = self.slots[probs].data.len() / rows;
                let coef = self.slots[out].grad[0] / rows as f64;
                for (r, &l) in labels.iter().enumerate() {
                    let p = self.slots[probs].data[r * cols + l];
                    self.slots[probs].grad[r * cols + l] -= coef / p;
                }
            }
            &Op::Add { a, b, out } => {
                let g = self.take_grad(out);
                for (dst, src) in self.slots[a].grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
                for (dst, src) in self.slots[b].grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
                self.put_grad(out, g);
            }
            &Op::ScaleConst { a, c, out } => {
                let g = self.take_grad(out);
                for (dst, src) in self.slots[a].grad.iter_mut().zip(&g) {
                    *dst += c * *src;
                }
                self.put_grad(out, g);
            }
            &Op::SumAll { a, out } => {
                let g = self.slots[out].grad[0];
                for dst in self.slots[a].grad.iter_mut() {
                    *dst += g;
                }
            }
            &Op::RecipShift { a, eps, out } => {
                let g = self.take_grad(out);
                {
                    let ad = &self.slots[a].data;
                    let ga: Vec<f64> = ad
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| {
                            let d = v + eps;
                            -gv / (d * d)
                        })
                        .collect();
                    for (dst, src) in self.slots[a].grad.iter_mut().zip(&ga) {
                        *dst += *src;
                    }
                }
                self.put_grad(out, g);
            }
            &Op::Mmd2Rbf { u, v, out } => {
                let g = self.slots[out].grad[0];
                let (gu, gv) =
                    diversity::mmd2_rbf_grad(&self.slots[u].data, &self.slots[v].data);
                for (dst, src) in self.slots[u].grad.iter_mut().zip(&gu) {
                    *dst += g * *src;
                }
                for (dst, src) in self.slots[v].grad.iter_mut().zip(&gv) {
                    *dst += g * *src;
                }
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
