use crate::kernels::{self, ConvGeom};
use crate::scalar::{gemm, ROW_MAJOR, TRANSPOSED};
use crate::{conv_out_size, conv_transpose_out_size, Float, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    AvgPool(Var, usize),
    GlobalAvgPool(Var),
    ExpandChannels(Var),
    Reshape(Var),
    SliceBatch(Var, usize),
    ConcatBatch(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Values are computed eagerly when an op is recorded; [`Tape::backward`]
/// then walks the records in reverse. Nodes that cannot reach a trainable
/// leaf are skipped during backward, so frozen sub-networks cost only their
/// forward pass and the input gradients they propagate.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    kink_tol: T,
    kinks: usize,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a leaf (parameter or input) of the tape.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient buffers. A
    /// parameter used at several places receives the sum over its uses.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let t = store.get_mut(id);
                t.grad_mut().iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_tol: T::zero(),
            kinks: 0,
        }
    }

    /// Inputs to ReLU, leaky ReLU, abs and sqrt whose magnitude is within
    /// `tol` of the kink are counted in [`Tape::kinks`].
    pub fn with_kink_tolerance(tol: T) -> Self {
        Tape {
            kink_tol: tol,
            ..Self::new()
        }
    }

    pub fn kinks(&self) -> usize {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    fn count_kinks(&mut self, x: Var) {
        let tol = self.kink_tol;
        self.kinks += self.data(x).iter().filter(|v| v.abs() <= tol).count();
    }

    /// Input leaf; `requires_grad` makes its gradient available through
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter by value. It participates in backward only if the
    /// stored tensor currently requires grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Param(id), t.requires_grad())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.affine(x, T::one(), s)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            ROW_MAJOR(k),
            self.data(b),
            ROW_MAJOR(n),
            T::zero(),
            &mut out,
            ROW_MAJOR(n),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), needs))
    }

    /// `x: [n, f] + b: [f]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::mismatch("add_row_bias", sx, sb));
        }
        let f = sb[0];
        let bias = self.data(b).to_vec();
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bias[i % f]).collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddRowBias(x, b), needs))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(TensorError::mismatch(op, &[channels], self.shape(b)));
            }
        }
        Ok(())
    }

    /// 2-D convolution with zero padding. `x: [n, c, h, w]`,
    /// `w: [cout, c, kh, kw]`, optional `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        self.check_bias("conv2d", b, sw[0])?;
        let (oh, ow) = match (
            conv_out_size(sx[2], sw[2], stride, pad),
            conv_out_size(sx[3], sw[3], stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(TensorError::mismatch("conv2d", &sx, &sw)),
        };
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(self.data(x), sx[0], self.data(w), sw[0], b.map(|b| self.data(b)), &geom);
        let value = Tensor::new(vec![sx[0], sw[0], oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`] in `x`).
    /// `x: [n, cin, h, w]`, `w: [cin, cout, kh, kw]`, optional `b: [cout]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(TensorError::mismatch("conv_transpose2d", &sx, &sw));
        }
        self.check_bias("conv_transpose2d", b, sw[1])?;
        let (h, w_) = match (
            conv_transpose_out_size(sx[2], sw[2], stride, pad, output_pad),
            conv_transpose_out_size(sx[3], sw[3], stride, pad, output_pad),
        ) {
            (Some(h), Some(w_)) => (h, w_),
            _ => return Err(TensorError::mismatch("conv_transpose2d", &sx, &sw)),
        };
        let geom = ConvGeom {
            c: sw[1],
            h,
            w: w_,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: sx[2],
            ow: sx[3],
        };
        debug_assert_eq!(conv_out_size(h, sw[2], stride, pad), Some(sx[2]));
        let out =
            kernels::conv_transpose2d_forward(self.data(x), sx[0], self.data(w), sx[1], b.map(|b| self.data(b)), &geom);
        let value = Tensor::new(vec![sx[0], sw[1], h, w_], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    /// Normalizes every `(sample, channel)` plane to zero mean and unit
    /// variance. No affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::invalid(
                "instance_norm",
                format!("expected [n, c, h, w], got {sx:?}"),
            ));
        }
        let (y, inv_std) = kernels::instance_norm_forward(self.data(x), sx[2] * sx[3], eps);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(sx, y)?, Op::InstanceNorm { x, inv_std }, needs))
    }

    /// ReLU; the derivative at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.count_kinks(x);
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.count_kinks(x);
        self.unary(
            x,
            Op::LeakyRelu(x, slope),
            |v| if v > T::zero() { v } else { slope * v },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.count_kinks(x);
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.count_kinks(x);
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.data(x).len().max(1) as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Mean over all but the leading axis: `[n, ...] -> [n]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.is_empty() || sx[0] == 0 {
            return Err(TensorError::invalid(
                "mean_per_sample",
                format!("no batch axis in {sx:?}"),
            ));
        }
        let n = sx[0];
        let per = self.data(x).len() / n;
        let count = T::of(per.max(1) as f64);
        let data = self
            .data(x)
            .chunks(per.max(1))
            .take(n)
            .map(|c| c.iter().copied().sum::<T>() / count)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n], data)?, Op::MeanPerSample(x), needs))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let a = self.abs(x);
        self.sum(a)
    }

    /// Sum of squares.
    pub fn sq_l2_norm(&mut self, x: Var) -> Var {
        let s = self.square(x);
        self.sum(s)
    }

    /// Non-overlapping `k x k` average pooling on `[n, c, h, w]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || !sx[2].is_multiple_of(k) || !sx[3].is_multiple_of(k) {
            return Err(TensorError::invalid(
                "avg_pool2d",
                format!("{sx:?} not divisible into {k}x{k} windows"),
            ));
        }
        let out = kernels::avg_pool_forward(self.data(x), sx[0] * sx[1], sx[2], sx[3], k);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![sx[0], sx[1], sx[2] / k, sx[3] / k], out)?,
            Op::AvgPool(x, k),
            needs,
        ))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::invalid(
                "global_avg_pool",
                format!("expected [n, c, h, w], got {sx:?}"),
            ));
        }
        let plane = sx[2] * sx[3];
        let count = T::of(plane.max(1) as f64);
        let data = self
            .data(x)
            .chunks(plane.max(1))
            .map(|c| c.iter().copied().sum::<T>() / count)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![sx[0], sx[1]], data)?, Op::GlobalAvgPool(x), needs))
    }

    /// Repeats a single-channel `[n, 1, h, w]` map across `c` channels.
    pub fn expand_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != 1 {
            return Err(TensorError::mismatch(
                "expand_channels",
                &sx,
                &[sx.first().copied().unwrap_or(0), c],
            ));
        }
        let plane = sx[2] * sx[3];
        let mut data = Vec::with_capacity(sx[0] * c * plane);
        for src in self.data(x).chunks(plane.max(1)) {
            for _ in 0..c {
                data.extend_from_slice(src);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![sx[0], c, sx[2], sx[3]], data)?,
            Op::ExpandChannels(x),
            needs,
        ))
    }

    /// Items `start..start + len` along the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + len > sx[0] {
            return Err(TensorError::invalid(
                "slice_batch",
                format!("{start}..{} out of range for {sx:?}", start + len),
            ));
        }
        let per: usize = sx[1..].iter().product();
        let data = self.data(x)[start * per..(start + len) * per].to_vec();
        let mut shape = sx;
        shape[0] = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceBatch(x, start), needs))
    }

    /// Concatenation along the leading axis; trailing shapes must agree.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::invalid("concat_batch", "no inputs".to_string()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.is_empty() {
            return Err(TensorError::invalid("concat_batch", "scalar input".to_string()));
        }
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || sp[1..] != s0[1..] {
                return Err(TensorError::mismatch("concat_batch", &s0, sp));
            }
            n += sp[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = s0;
        shape[0] = n;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatBatch(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.data(x).to_vec())
            .map_err(|_| TensorError::mismatch("reshape", self.shape(x), shape))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();
        if self.needs(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    params.push((id, i));
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        let map1 = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            // f(input, output, upstream)
            self.data(x)
                .iter()
                .zip(y)
                .zip(g)
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect()
        };
        match node.op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    acc(a, g.iter().zip(self.data(b)).map(|(&gi, &bi)| gi * bi).collect());
                }
                if self.needs(b) {
                    acc(b, g.iter().zip(self.data(a)).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Affine(x, s) => acc(x, g.iter().map(|&v| v * s).collect()),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        ROW_MAJOR(n),
                        self.data(b),
                        TRANSPOSED(n),
                        T::zero(),
                        &mut da,
                        ROW_MAJOR(k),
                    );
                    acc(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.data(a),
                        TRANSPOSED(k),
                        g,
                        ROW_MAJOR(n),
                        T::zero(),
                        &mut db,
                        ROW_MAJOR(n),
                    );
                    acc(b, db);
                }
            }
            Op::AddRowBias(x, b) => {
                acc(x, g.to_vec());
                if self.needs(b) {
                    let f = self.shape(b)[0];
                    let mut db = vec![T::zero(); f];
                    for row in g.chunks(f) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    acc(b, db);
                }
            }
            Op::Conv2d { x, w, b, ref geom } => {
                let n = self.shape(x)[0];
                let cout = self.shape(w)[0];
                let need = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv2d_backward(self.data(x), n, self.data(w), cout, g, geom, need);
                if let Some(dx) = cg.dx {
                    acc(x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, ref geom } => {
                let n = self.shape(x)[0];
                let cin = self.shape(x)[1];
                let need = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv_transpose2d_backward(self.data(x), n, self.data(w), cin, g, geom, need);
                if let Some(dx) = cg.dx {
                    acc(x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(b, db);
                }
            }
            Op::InstanceNorm { x, ref inv_std } => {
                let s = self.shape(x);
                acc(x, kernels::instance_norm_backward(y, inv_std, g, s[2] * s[3]));
            }
            Op::Relu(x) => acc(x, map1(x, &|xi, _, gi| if xi > T::zero() { gi } else { T::zero() })),
            Op::LeakyRelu(x, slope) => acc(x, map1(x, &|xi, _, gi| if xi > T::zero() { gi } else { gi * slope })),
            Op::Tanh(x) => acc(x, map1(x, &|_, yi, gi| gi * (T::one() - yi * yi))),
            Op::Sigmoid(x) => acc(x, map1(x, &|_, yi, gi| gi * yi * (T::one() - yi))),
            Op::Abs(x) => acc(
                x,
                map1(x, &|xi, _, gi| {
                    if xi > T::zero() {
                        gi
                    } else if xi < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(x) => acc(x, map1(x, &|xi, _, gi| gi * (xi + xi))),
            Op::Sqrt(x) => acc(
                x,
                map1(x, &|_, yi, gi| if yi > T::zero() { gi / (yi + yi) } else { T::zero() }),
            ),
            Op::Log(x) => acc(x, map1(x, &|xi, _, gi| gi / xi)),
            Op::Sum(x) => acc(x, vec![g[0]; self.data(x).len()]),
            Op::Mean(x) => {
                let n = self.data(x).len();
                acc(x, vec![g[0] / T::of(n.max(1) as f64); n]);
            }
            Op::MeanPerSample(x) => {
                let n = self.shape(x)[0];
                let per = self.data(x).len() / n;
                let scale = T::one() / T::of(per.max(1) as f64);
                let mut dx = Vec::with_capacity(n * per);
                for &gi in g {
                    dx.extend(std::iter::repeat_n(gi * scale, per));
                }
                acc(x, dx);
            }
            Op::AvgPool(x, k) => {
                let s = self.shape(x);
                acc(x, kernels::avg_pool_backward(g, s[0] * s[1], s[2], s[3], k));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let scale = T::one() / T::of(plane.max(1) as f64);
                let mut dx = Vec::with_capacity(self.data(x).len());
                for &gi in g {
                    dx.extend(std::iter::repeat_n(gi * scale, plane));
                }
                acc(x, dx);
            }
            Op::ExpandChannels(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let c = node.value.shape()[1];
                let mut dx = vec![T::zero(); self.data(x).len()];
                for (i, dst) in dx.chunks_mut(plane.max(1)).enumerate() {
                    for ch in 0..c {
                        let src = &g[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                acc(x, dx);
            }
            Op::Reshape(x) => acc(x, g.to_vec()),
            Op::SliceBatch(x, start) => {
                let mut dx = vec![T::zero(); self.data(x).len()];
                let off = start * (dx.len() / self.shape(x)[0]);
                dx[off..off + g.len()].copy_from_slice(g);
                acc(x, dx);
            }
            Op::ConcatBatch(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
        }
    }
}

fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
