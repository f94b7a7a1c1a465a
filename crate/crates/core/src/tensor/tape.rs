use super::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use super::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        c_out: usize,
        cols: Vec<f64>,
    },
    Pool2d {
        input: Var,
        mode: PoolMode,
        window: usize,
        stride: usize,
        dims: [usize; 3],
        // flat input index feeding each output (max mode only)
        argmax: Vec<usize>,
    },
    ChannelPool {
        input: Var,
        mode: PoolMode,
        channels: usize,
        argmax: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    SoftmaxRows {
        input: Var,
        cols: usize,
    },
    Sigmoid {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: Option<usize>,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: Option<usize>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Mean {
        inputs: Vec<Var>,
    },
    Sum {
        input: Var,
    },
    Pick {
        input: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in evaluation order, so every node's inputs
/// precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad)
    }

    fn emit(&mut self, shape: &[usize], values: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let mut t = Tensor::new(shape, values).expect("op produced consistent shape");
        t.requires_grad = self.needs_grad(inputs);
        self.push(t, op)
    }

    /// 2-D cross-correlation with zero padding over an `[h, w, c_in]` input.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let [h, w, c_in] = rank3(OP, is)?;
        let &[k, k2, kc, c_out] = ks else {
            return Err(TensorError::dim(OP, format!("kernel must be [k,k,c_in,c_out], got {ks:?}")));
        };
        if k != k2 {
            return Err(TensorError::dim(OP, format!("kernel must be square, got {k}x{k2}")));
        }
        if kc != c_in {
            return Err(TensorError::dim(OP, format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if bs != [c_out] {
            return Err(TensorError::dim(OP, format!("bias must be [{c_out}], got {bs:?}")));
        }
        if stride == 0 {
            return Err(TensorError::param(OP, "stride must be >= 1"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(TensorError::dim(OP, format!("kernel {k} exceeds padded input {h}x{w} (+{padding})")));
        }
        let geom = ConvGeometry {
            h,
            w,
            c_in,
            k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.value(input).values(), &geom);
        let pixels = geom.out_pixels();
        let mut out = vec![0.0; pixels * c_out];
        gemm(pixels, geom.patch_len(), c_out, &cols, false, self.value(kernel).values(), false, &mut out, false);
        let b = self.value(bias).values();
        for row in out.chunks_exact_mut(c_out) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        Ok(self.emit(
            &[geom.out_h, geom.out_w, c_out],
            out,
            &[input, kernel, bias],
            Op::Conv2d { input, kernel, bias, geom, c_out, cols },
        ))
    }

    /// Spatial pooling with a square window and no padding.
    pub fn pool2d(&mut self, input: Var, window: usize, stride: usize, mode: PoolMode) -> Result<Var> {
        const OP: &str = "pool2d";
        if window == 0 || stride == 0 {
            return Err(TensorError::param(OP, format!("window {window} and stride {stride} must be >= 1")));
        }
        let [h, w, c] = rank3(OP, self.shape(input))?;
        if window > h || window > w {
            return Err(TensorError::dim(OP, format!("window {window} exceeds input {h}x{w}")));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(input).values();
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; out.len()];
        }
        let scale = 1.0 / (window * window) as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let o = (oy * ow + ox) * c + ch;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut acc = 0.0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                            // strict comparison keeps the first maximum in scan order
                            if x[i] > best {
                                best = x[i];
                                best_at = i;
                            }
                            acc += x[i];
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            out[o] = best;
                            argmax[o] = best_at;
                        }
                        PoolMode::Avg => out[o] = acc * scale,
                    }
                }
            }
        }
        Ok(self.emit(
            &[oh, ow, c],
            out,
            &[input],
            Op::Pool2d { input, mode, window, stride, dims: [h, w, c], argmax },
        ))
    }

    /// Reduces the channel axis of an `[h, w, c]` tensor to `[h, w, 1]`.
    pub fn channel_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let [h, w, c] = rank3("channel_pool", self.shape(input))?;
        let x = self.value(input).values();
        let mut out = Vec::with_capacity(h * w);
        let mut argmax = Vec::new();
        for (p, px) in x.chunks_exact(c).enumerate() {
            match mode {
                PoolMode::Max => {
                    let (mut best_at, mut best) = (0, px[0]);
                    for (i, &v) in px.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            best_at = i;
                        }
                    }
                    out.push(best);
                    argmax.push(p * c + best_at);
                }
                PoolMode::Avg => out.push(px.iter().sum::<f64>() / c as f64),
            }
        }
        Ok(self.emit(&[h, w, 1], out, &[input], Op::ChannelPool { input, mode, channels: c, argmax }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = rank2("matmul", self.shape(a))?;
        let [k2, n] = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::dim("matmul", format!("inner dimensions differ: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).values(), false, self.value(b).values(), false, &mut out, false);
        Ok(self.emit(&[m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let [rows, cols] = rank2("transpose", self.shape(input))?;
        let x = self.value(input).values();
        let out = transpose_flat(rows, cols, x);
        Ok(self.emit(&[cols, rows], out, &[input], Op::Transpose { input, rows, cols }))
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by subtracting each
    /// row's maximum.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let [_, cols] = rank2("softmax_rows", self.shape(input))?;
        let mut out = self.value(input).values().to_vec();
        out.chunks_exact_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(input).to_vec();
        Ok(self.emit(&shape, out, &[input], Op::SoftmaxRows { input, cols }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).values().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(input).to_vec();
        self.emit(&shape, out, &[input], Op::Sigmoid { input })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).values().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.emit(&shape, out, &[input], Op::Relu { input })
    }

    /// Elementwise product. `b` may also be `[.., 1]` against `a` of `[.., c]`,
    /// broadcasting along the trailing (channel) axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let out = self.zip_broadcast(a, b, broadcast, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, &[a, b], Op::Mul { a, b, broadcast }))
    }

    /// Elementwise sum with the same broadcasting rule as [`Tape::mul`].
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let out = self.zip_broadcast(a, b, broadcast, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.emit(&shape, out, &[a, b], Op::Add { a, b, broadcast }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).values().iter().map(|x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        self.emit(&shape, out, &[input], Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != self.value(input).numel() {
            return Err(TensorError::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let out = self.value(input).values().to_vec();
        Ok(self.emit(shape, out, &[input], Op::Reshape { input }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let Some(&first) = inputs.first() else {
            return Err(TensorError::contract(OP, "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim(OP, format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::dim(OP, format!("shape {s:?} incompatible with {base:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).values()[o * len..][..len]);
            }
        }
        Ok(self.emit(&out_shape, out, inputs, Op::Concat { inputs: inputs.to_vec(), outer, chunks }))
    }

    /// Elementwise mean over same-shaped tensors.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::contract("mean", "empty input list"));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(TensorError::dim("mean", format!("{:?} vs {shape:?}", self.shape(v))));
            }
            out.iter_mut().zip(self.value(v).values()).for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / inputs.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.emit(&shape, out, inputs, Op::Mean { inputs: inputs.to_vec() }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).values().iter().sum();
        self.emit(&[1], vec![s], &[input], Op::Sum { input })
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input).values();
        let Some(&v) = x.get(index) else {
            return Err(TensorError::contract("pick", format!("index {index} out of {}", x.len())));
        };
        Ok(self.emit(&[1], vec![v], &[input], Op::Pick { input, index }))
    }

    /// `-log softmax(logits)[label]` via log-sum-exp with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits).values();
        if label >= x.len() {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("label {label} out of range for {} classes", x.len()),
            ));
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[label];
        let probs = x.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.emit(&[1], vec![loss], &[logits], Op::CrossEntropy { logits, label, probs }))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Option<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        let r = sa.len();
        if r == sb.len() && sb[r - 1] == 1 && sa[..r - 1] == sb[..r - 1] {
            return Ok(Some(sa[r - 1]));
        }
        Err(TensorError::dim(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
    }

    fn zip_broadcast(&self, a: Var, b: Var, broadcast: Option<usize>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (self.value(a).values(), self.value(b).values());
        match broadcast {
            None => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            Some(c) => x.iter().enumerate().map(|(i, &p)| f(p, y[i / c])).collect(),
        }
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every tensor with
    /// `requires_grad` carries `∂loss/∂tensor` (zeros when unreachable);
    /// gradients from previous sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.grad = if node.tensor.requires_grad {
                Some(g.unwrap_or_else(|| vec![0.0; node.tensor.numel()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.tensor.values();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, c_out, cols } => {
                let (pixels, plen, c_out) = (geom.out_pixels(), geom.patch_len(), *c_out);
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm(plen, pixels, c_out, cols, true, g, false, dk, true);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(c_out) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let mut dcols = vec![0.0; pixels * plen];
                    gemm(pixels, c_out, plen, g, false, self.value(*kernel).values(), true, &mut dcols, false);
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::Pool2d { input, mode, window, stride, dims, argmax } => {
                let Some(dx) = self.slot(grads, *input) else { return };
                match mode {
                    PoolMode::Max => argmax.iter().zip(g).for_each(|(&src, d)| dx[src] += d),
                    PoolMode::Avg => {
                        let [_, w, c] = *dims;
                        let ow = self.nodes[i].tensor.shape()[1];
                        let scale = 1.0 / (window * window) as f64;
                        for (o, d) in g.iter().enumerate() {
                            let (oy, ox, ch) = (o / c / ow, (o / c) % ow, o % c);
                            for dy in 0..*window {
                                for dx_ in 0..*window {
                                    dx[((oy * stride + dy) * w + ox * stride + dx_) * c + ch] += d * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelPool { input, mode, channels, argmax } => {
                let Some(dx) = self.slot(grads, *input) else { return };
                match mode {
                    PoolMode::Max => argmax.iter().zip(g).for_each(|(&src, d)| dx[src] += d),
                    PoolMode::Avg => {
                        let inv = 1.0 / *channels as f64;
                        for (px, d) in dx.chunks_exact_mut(*channels).zip(g) {
                            px.iter_mut().for_each(|v| *v += d * inv);
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.slot(grads, *a) {
                    gemm(*m, *n, *k, g, false, self.value(*b).values(), true, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(*k, *m, *n, self.value(*a).values(), true, g, false, db, true);
                }
            }
            Op::Transpose { input, rows, cols } => {
                if let Some(dx) = self.slot(grads, *input) {
                    let t = transpose_flat(*cols, *rows, g);
                    dx.iter_mut().zip(t).for_each(|(d, v)| *d += v);
                }
            }
            Op::SoftmaxRows { input, cols } => {
                let Some(dx) = self.slot(grads, *input) else { return };
                for ((dxr, yr), gr) in dx.chunks_exact_mut(*cols).zip(out.chunks_exact(*cols)).zip(g.chunks_exact(*cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (gv - dot);
                    }
                }
            }
            Op::Sigmoid { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, y), gv) in dx.iter_mut().zip(out).zip(g) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Relu { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    let x = self.value(*input).values();
                    for ((d, &xv), gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (x, y) = (self.value(*a).values(), self.value(*b).values());
                if let Some(da) = self.slot(grads, *a) {
                    match broadcast {
                        None => da.iter_mut().zip(g).zip(y).for_each(|((d, gv), yv)| *d += gv * yv),
                        Some(c) => da.iter_mut().zip(g).enumerate().for_each(|(i, (d, gv))| *d += gv * y[i / c]),
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    match broadcast {
                        None => db.iter_mut().zip(g).zip(x).for_each(|((d, gv), xv)| *d += gv * xv),
                        Some(c) => g.iter().zip(x).enumerate().for_each(|(i, (gv, xv))| db[i / c] += gv * xv),
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(db) = self.slot(grads, *b) {
                    match broadcast {
                        None => db.iter_mut().zip(g).for_each(|(d, gv)| *d += gv),
                        Some(c) => g.iter().enumerate().for_each(|(i, gv)| db[i / c] += gv),
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
                }
            }
            Op::Reshape { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &len) in inputs.iter().zip(chunks) {
                    if let Some(dx) = self.slot(grads, v) {
                        for o in 0..*outer {
                            let src = &g[o * total + start..][..len];
                            dx[o * len..][..len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    start += len;
                }
            }
            Op::Mean { inputs } => {
                let inv = 1.0 / inputs.len() as f64;
                for &v in inputs {
                    if let Some(dx) = self.slot(grads, v) {
                        dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * inv);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Pick { input, index } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx[*index] += g[0];
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if let Some(dx) = self.slot(grads, *logits) {
                    for (j, (d, p)) in dx.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - target);
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let t = &self.nodes[v.0].tensor;
        if !t.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; t.numel()]).as_mut_slice())
    }
}

fn rank3(op: &'static str, s: &[usize]) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(s).map_err(|_| TensorError::dim(op, format!("expected [h,w,c], got {s:?}")))
}

fn rank2(op: &'static str, s: &[usize]) -> Result<[usize; 2]> {
    <[usize; 2]>::try_from(s).map_err(|_| TensorError::dim(op, format!("expected a matrix, got {s:?}")))
}

fn transpose_flat(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}
