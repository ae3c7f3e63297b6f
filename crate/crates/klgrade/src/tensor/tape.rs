//! Reverse-mode autodiff on a linear tape.
//!
//! A forward pass appends nodes; `backward` sweeps the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! `requires_grad` leaf. All loops are serial with a fixed iteration order,
//! so gradients are bit-identical across runs.

use super::{sigmoid, softmax_rows, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: ValueId, w: ValueId, b: ValueId, stride: usize, pad: (usize, usize) },
    Dense { x: ValueId, w: ValueId, b: ValueId },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    GlobalAvgPool { x: ValueId },
    Reshape { x: ValueId },
    ConcatChannels { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f64 },
    MeanAll { x: ValueId },
    SoftmaxCrossEntropy { logits: ValueId, labels: Vec<usize> },
    MseLoss { pred: ValueId, targets: Vec<f64> },
    BceWithLogits { logits: ValueId, targets: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { data, shape, op, needs_grad });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a rank-1 singleton node.
    pub fn item(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last `backward` pass; `None` if the node does not
    /// require gradients.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Insert a tensor as a leaf. Its data is copied; its `requires_grad`
    /// flag decides whether `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Insert raw data as a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, Op::Leaf, false)
    }

    // ───────────────────────── forward ops ─────────────────────────

    /// 2-D convolution, NCHW layout, zero "same" padding.
    ///
    /// For stride 1 the output keeps the spatial size; for stride `s` the
    /// output is `ceil(extent / s)` with the padding split evenly (extra on
    /// the bottom/right).
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
    ) -> Result<ValueId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(shape_err(
                "conv2d",
                format!("want x[N,C,H,W] w[Co,Ci,Kh,Kw] b[Co], got x{xs:?} w{ws:?} b{bs:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1".into()));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci || bs[0] != co {
            return Err(shape_err(
                "conv2d",
                format!("channel mismatch: x has {ci} channels, w expects {wci}, b has {}", bs[0]),
            ));
        }
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + kh).saturating_sub(h) / 2;
        let pad_w = ((ow - 1) * stride + kw).saturating_sub(wd) / 2;
        let out = conv2d_forward(
            self.data(x),
            (n, ci, h, wd),
            self.data(w),
            (co, kh, kw),
            self.data(b),
            stride,
            (pad_h, pad_w),
            (oh, ow),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out,
            vec![n, co, oh, ow],
            Op::Conv2d { x, w, b, stride, pad: (pad_h, pad_w) },
            needs,
        ))
    }

    /// Fully connected layer: `x[N,F] · w[F,G] + b[G]`.
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(shape_err(
                "dense",
                format!("want x[N,F] w[F,G] b[G], got x{xs:?} w{ws:?} b{bs:?}"),
            ));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; n * g];
        for row in 0..n {
            let orow = &mut out[row * g..(row + 1) * g];
            orow.copy_from_slice(bd);
            let xrow = &xd[row * f..(row + 1) * f];
            for (k, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[k * g..(k + 1) * g];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, vec![n, g], Op::Dense { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Relu { x }, needs)
    }

    pub fn sigmoid_op(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Sigmoid { x }, needs)
    }

    /// `[N,C,H,W] -> [N,C]`, mean over each spatial plane.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("want 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = self.data(x);
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = xd[i * plane..(i + 1) * plane].iter().sum();
            *o = s / plane as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(out, vec![n, c], Op::GlobalAvgPool { x }, needs))
    }

    /// Collapse all dims after the first: `[N,...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(shape_err("flatten", "rank-0 input".into()));
        }
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, vec![xs[0], rest])
    }

    /// Same data, new shape (row-major layout is unchanged).
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let out = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(out, shape, Op::Reshape { x }, needs))
    }

    /// Concatenate along the channel axis: `[N,C1,H,W] ++ [N,C2,H,W]`.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(shape_err(
                "concat_channels",
                format!("incompatible shapes {sa:?} and {sb:?}"),
            ));
        }
        let (n, c1, c2, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (c1 + c2) * plane);
        for i in 0..n {
            out.extend_from_slice(&ad[i * c1 * plane..(i + 1) * c1 * plane]);
            out.extend_from_slice(&bd[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![n, c1 + c2, sa[2], sa[3]], Op::ConcatChannels { a, b }, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        which: &'static str,
    ) -> Result<ValueId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                which,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<f64> = match which {
            "add" => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            "sub" => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
            _ => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        };
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let op = match which {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(out, shape, op, needs))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Scale { x, c }, needs)
    }

    /// Mean of all elements; returns a scalar node.
    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![s / n], vec![1], Op::MeanAll { x }, needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
    ) -> Result<ValueId, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(shape_err("cross_entropy", format!("want logits[N,K], got {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{n} logit rows but {} labels", labels.len()),
            ));
        }
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
        }
        let ld = self.data(logits);
        let mut total = 0.0;
        for (row, &label) in ld.chunks_exact(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![total / n as f64],
            vec![1],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            needs,
        ))
    }

    /// Mean squared error against fixed targets.
    pub fn mse_loss(&mut self, pred: ValueId, targets: &[f64]) -> Result<ValueId, TensorError> {
        let numel = self.data(pred).len();
        if numel != targets.len() {
            return Err(shape_err(
                "mse_loss",
                format!("{numel} predictions but {} targets", targets.len()),
            ));
        }
        if numel == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let pd = self.data(pred);
        let total: f64 = pd.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
        let needs = self.needs(pred);
        Ok(self.push(
            vec![total / numel as f64],
            vec![1],
            Op::MseLoss { pred, targets: targets.to_vec() },
            needs,
        ))
    }

    /// Mean binary cross-entropy on logits, computed in the stable
    /// `max(z,0) - z*t + ln(1 + exp(-|z|))` form.
    pub fn bce_with_logits(
        &mut self,
        logits: ValueId,
        targets: &[f64],
    ) -> Result<ValueId, TensorError> {
        let numel = self.data(logits).len();
        if numel != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{numel} logits but {} targets", targets.len()),
            ));
        }
        if numel == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let ld = self.data(logits);
        let total: f64 = ld
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let needs = self.needs(logits);
        Ok(self.push(
            vec![total / numel as f64],
            vec![1],
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            needs,
        ))
    }

    // ───────────────────────── backward ─────────────────────────

    /// Populate gradients of every `requires_grad`-reachable node for a
    /// scalar loss. Unused leaves that require gradients get exact zeros.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        for (slot, node) in self.grads.iter_mut().zip(&self.nodes) {
            *slot = if node.needs_grad { Some(vec![0.0; node.data.len()]) } else { None };
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(idx, x, w, b, stride, pad, &g),
                Op::Dense { x, w, b } => self.dense_backward(idx, x, w, b, &g),
                Op::Relu { x } => {
                    if let Some(gx) = self.grads[x.0].as_mut() {
                        let xd = &self.nodes[x.0].data;
                        for ((gi, &xi), &go) in gx.iter_mut().zip(xd).zip(&g) {
                            if xi > 0.0 {
                                *gi += go;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if let Some(gx) = self.grads[x.0].as_mut() {
                        let yd = &self.nodes[idx].data;
                        for ((gi, &yi), &go) in gx.iter_mut().zip(yd).zip(&g) {
                            *gi += go * yi * (1.0 - yi);
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if let Some(gx) = self.grads[x.0].as_mut() {
                        let xs = &self.nodes[x.0].shape;
                        let plane = xs[2] * xs[3];
                        let inv = 1.0 / plane as f64;
                        for (i, &go) in g.iter().enumerate() {
                            for gi in &mut gx[i * plane..(i + 1) * plane] {
                                *gi += go * inv;
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(gx) = self.grads[x.0].as_mut() {
                        for (gi, &go) in gx.iter_mut().zip(&g) {
                            *gi += go;
                        }
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (n, c1, c2, plane) = {
                        let sa = &self.nodes[a.0].shape;
                        let sb = &self.nodes[b.0].shape;
                        (sa[0], sa[1], sb[1], sa[2] * sa[3])
                    };
                    let step = (c1 + c2) * plane;
                    if let Some(ga) = self.grads[a.0].as_mut() {
                        for i in 0..n {
                            let src = &g[i * step..i * step + c1 * plane];
                            for (gi, &go) in ga[i * c1 * plane..(i + 1) * c1 * plane].iter_mut().zip(src) {
                                *gi += go;
                            }
                        }
                    }
                    if let Some(gb) = self.grads[b.0].as_mut() {
                        for i in 0..n {
                            let src = &g[i * step + c1 * plane..(i + 1) * step];
                            for (gi, &go) in gb[i * c2 * plane..(i + 1) * c2 * plane].iter_mut().zip(src) {
                                *gi += go;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for side in [a, b] {
                        if let Some(gs) = self.grads[side.0].as_mut() {
                            for (gi, &go) in gs.iter_mut().zip(&g) {
                                *gi += go;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(ga) = self.grads[a.0].as_mut() {
                        for (gi, &go) in ga.iter_mut().zip(&g) {
                            *gi += go;
                        }
                    }
                    if let Some(gb) = self.grads[b.0].as_mut() {
                        for (gi, &go) in gb.iter_mut().zip(&g) {
                            *gi -= go;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.grads[a.0].is_some() {
                        let bd = self.nodes[b.0].data.clone();
                        let ga = self.grads[a.0].as_mut().unwrap();
                        for ((gi, &bv), &go) in ga.iter_mut().zip(&bd).zip(&g) {
                            *gi += go * bv;
                        }
                    }
                    if self.grads[b.0].is_some() {
                        let ad = self.nodes[a.0].data.clone();
                        let gb = self.grads[b.0].as_mut().unwrap();
                        for ((gi, &av), &go) in gb.iter_mut().zip(&ad).zip(&g) {
                            *gi += go * av;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(gx) = self.grads[x.0].as_mut() {
                        for (gi, &go) in gx.iter_mut().zip(&g) {
                            *gi += go * c;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if let Some(gx) = self.grads[x.0].as_mut() {
                        let inv = g[0] / gx.len() as f64;
                        for gi in gx.iter_mut() {
                            *gi += inv;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    if self.grads[logits.0].is_some() {
                        let k = self.nodes[logits.0].shape[1];
                        let n = labels.len();
                        let probs = softmax_rows(&self.nodes[logits.0].data, k);
                        let gl = self.grads[logits.0].as_mut().unwrap();
                        let scale = g[0] / n as f64;
                        for (row, &label) in (0..n).zip(&labels) {
                            for j in 0..k {
                                let delta = if j == label { 1.0 } else { 0.0 };
                                gl[row * k + j] += scale * (probs[row * k + j] - delta);
                            }
                        }
                    }
                }
                Op::MseLoss { pred, targets } => {
                    if self.grads[pred.0].is_some() {
                        let pd = self.nodes[pred.0].data.clone();
                        let gp = self.grads[pred.0].as_mut().unwrap();
                        let scale = 2.0 * g[0] / targets.len() as f64;
                        for ((gi, &pv), &tv) in gp.iter_mut().zip(&pd).zip(&targets) {
                            *gi += scale * (pv - tv);
                        }
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    if self.grads[logits.0].is_some() {
                        let ld = self.nodes[logits.0].data.clone();
                        let gl = self.grads[logits.0].as_mut().unwrap();
                        let scale = g[0] / targets.len() as f64;
                        for ((gi, &zv), &tv) in gl.iter_mut().zip(&ld).zip(&targets) {
                            *gi += scale * (sigmoid(zv) - tv);
                        }
                    }
                }
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn conv2d_backward(
        &mut self,
        out: usize,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: (usize, usize),
        g: &[f64],
    ) {
        let (n, ci, h, wd) = {
            let s = &self.nodes[x.0].shape;
            (s[0], s[1], s[2], s[3])
        };
        let (co, kh, kw) = {
            let s = &self.nodes[w.0].shape;
            (s[0], s[2], s[3])
        };
        let (oh, ow) = {
            let s = &self.nodes[out].shape;
            (s[2], s[3])
        };
        let dims = ConvDims { n, ci, h, w: wd, co, kh, kw, oh, ow, stride, pad };

        if self.grads[b.0].is_some() {
            let gb = self.grads[b.0].as_mut().unwrap();
            let plane = oh * ow;
            for img in 0..n {
                for c in 0..co {
                    let base = (img * co + c) * plane;
                    gb[c] += g[base..base + plane].iter().sum::<f64>();
                }
            }
        }
        if self.grads[w.0].is_some() {
            let xd = &self.nodes[x.0].data;
            let mut gw = self.grads[w.0].take().unwrap();
            conv2d_grad_w(xd, g, &mut gw, &dims);
            self.grads[w.0] = Some(gw);
        }
        if self.grads[x.0].is_some() {
            let wdta = &self.nodes[w.0].data;
            let mut gx = self.grads[x.0].take().unwrap();
            conv2d_grad_x(wdta, g, &mut gx, &dims);
            self.grads[x.0] = Some(gx);
        }
        let _ = ci;
    }

    fn dense_backward(&mut self, _out: usize, x: ValueId, w: ValueId, b: ValueId, g: &[f64]) {
        let (n, f) = {
            let s = &self.nodes[x.0].shape;
            (s[0], s[1])
        };
        let gdim = self.nodes[w.0].shape[1];
        if self.grads[b.0].is_some() {
            let gb = self.grads[b.0].as_mut().unwrap();
            for row in g.chunks_exact(gdim) {
                for (bi, &gv) in gb.iter_mut().zip(row) {
                    *bi += gv;
                }
            }
        }
        if self.grads[w.0].is_some() {
            let xd = &self.nodes[x.0].data;
            let gw = self.grads[w.0].as_mut().unwrap();
            for row in 0..n {
                let grow = &g[row * gdim..(row + 1) * gdim];
                let xrow = &xd[row * f..(row + 1) * f];
                for (k, &xv) in xrow.iter().enumerate() {
                    if xv != 0.0 {
                        let wrow = &mut gw[k * gdim..(k + 1) * gdim];
                        for (wi, &gv) in wrow.iter_mut().zip(grow) {
                            *wi += xv * gv;
                        }
                    }
                }
            }
        }
        if self.grads[x.0].is_some() {
            let wd = &self.nodes[w.0].data;
            let mut gx = self.grads[x.0].take().unwrap();
            for row in 0..n {
                let grow = &g[row * gdim..(row + 1) * gdim];
                let xrow = &mut gx[row * f..(row + 1) * f];
                for (k, xi) in xrow.iter_mut().enumerate() {
                    let wrow = &wd[k * gdim..(k + 1) * gdim];
                    let mut acc = 0.0;
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        acc += wv * gv;
                    }
                    *xi += acc;
                }
            }
            self.grads[x.0] = Some(gx);
        }
    }
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: (usize, usize),
}

/// Valid output-column range for a kernel column: `0 <= ox*s + off < w`.
#[inline]
fn ox_range(off: isize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_num = w as isize - 1 - off;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_num / s).min(ow as isize - 1);
    if hi < lo {
        (1, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    (pad_h, pad_w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; n * co * oh * ow];
    let oplane = oh * ow;
    let iplane = h * w;
    for img in 0..n {
        for c_out in 0..co {
            let out_plane = &mut out[(img * co + c_out) * oplane..(img * co + c_out + 1) * oplane];
            out_plane.iter_mut().for_each(|v| *v = b[c_out]);
            for c_in in 0..ci {
                let x_plane = &x[(img * ci + c_in) * iplane..(img * ci + c_in + 1) * iplane];
                let w_base = ((c_out * ci) + c_in) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[w_base + ky * kw + kx];
                        let off_x = kx as isize - pad_w as isize;
                        let (ox_lo, ox_hi) = ox_range(off_x, stride, w, ow);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                            let o_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            let ix0 = (ox_lo as isize * stride as isize + off_x) as usize;
                            if stride == 1 {
                                let xs = &x_row[ix0..ix0 + (ox_hi - ox_lo + 1)];
                                for (o, &xv) in o_row[ox_lo..=ox_hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                let mut ix = ix0;
                                for o in o_row[ox_lo..=ox_hi].iter_mut() {
                                    *o += wv * x_row[ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_grad_w(x: &[f64], g: &[f64], gw: &mut [f64], d: &ConvDims) {
    let oplane = d.oh * d.ow;
    let iplane = d.h * d.w;
    for img in 0..d.n {
        for c_out in 0..d.co {
            let g_plane = &g[(img * d.co + c_out) * oplane..(img * d.co + c_out + 1) * oplane];
            for c_in in 0..d.ci {
                let x_plane = &x[(img * d.ci + c_in) * iplane..(img * d.ci + c_in + 1) * iplane];
                let w_base = ((c_out * d.ci) + c_in) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let off_x = kx as isize - d.pad.1 as isize;
                        let (ox_lo, ox_hi) = ox_range(off_x, d.stride, d.w, d.ow);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad.0 as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                            let g_row = &g_plane[oy * d.ow..(oy + 1) * d.ow];
                            let ix0 = (ox_lo as isize * d.stride as isize + off_x) as usize;
                            if d.stride == 1 {
                                let xs = &x_row[ix0..ix0 + (ox_hi - ox_lo + 1)];
                                for (&gv, &xv) in g_row[ox_lo..=ox_hi].iter().zip(xs) {
                                    acc += gv * xv;
                                }
                            } else {
                                let mut ix = ix0;
                                for &gv in g_row[ox_lo..=ox_hi].iter() {
                                    acc += gv * x_row[ix];
                                    ix += d.stride;
                                }
                            }
                        }
                        gw[w_base + ky * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn conv2d_grad_x(wt: &[f64], g: &[f64], gx: &mut [f64], d: &ConvDims) {
    let oplane = d.oh * d.ow;
    let iplane = d.h * d.w;
    for img in 0..d.n {
        for c_out in 0..d.co {
            let g_plane = &g[(img * d.co + c_out) * oplane..(img * d.co + c_out + 1) * oplane];
            for c_in in 0..d.ci {
                let gx_plane = &mut gx[(img * d.ci + c_in) * iplane..(img * d.ci + c_in + 1) * iplane];
                let w_base = ((c_out * d.ci) + c_in) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wt[w_base + ky * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let off_x = kx as isize - d.pad.1 as isize;
                        let (ox_lo, ox_hi) = ox_range(off_x, d.stride, d.w, d.ow);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad.0 as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let gx_row =
                                &mut gx_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                            let g_row = &g_plane[oy * d.ow..(oy + 1) * d.ow];
                            let ix0 = (ox_lo as isize * d.stride as isize + off_x) as usize;
                            if d.stride == 1 {
                                let xs = &mut gx_row[ix0..ix0 + (ox_hi - ox_lo + 1)];
                                for (xv, &gv) in xs.iter_mut().zip(&g_row[ox_lo..=ox_hi]) {
                                    *xv += wv * gv;
                                }
                            } else {
                                let mut ix = ix0;
                                for &gv in g_row[ox_lo..=ox_hi].iter() {
                                    gx_row[ix] += wv * gv;
                                    ix += d.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
