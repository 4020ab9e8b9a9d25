//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass (one sample) in
//! execution order, which is already a topological order. [`Graph::backward`]
//! walks the record once in reverse.

use std::sync::Arc;

use crate::autodiff::conv::{self, ConvGeom, Triple};
use crate::autodiff::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Concat {
        parts: Vec<Var>,
    },
    NarrowChannels {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SliceFlat {
        x: Var,
        offset: usize,
    },
    MeanSpatial {
        x: Var,
    },
    UpsampleNearest {
        x: Var,
        factors: Triple,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[u8]>,
        probs: Vec<T>,
    },
    SoftDice {
        probs: Var,
        labels: Arc<[u8]>,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded forward pass of a single sample.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Gradients of the leaves reached by one backward pass.
pub struct Gradients<T> {
    leaves: Vec<(Var, Option<ParamId>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a leaf; `None` if the leaf does not require grad or was
    /// not reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.iter().find(|(l, _, _)| *l == v).map(|(_, _, g)| g.as_slice())
    }

    /// Adds `scale * grad` into the accumulated gradient of every reached
    /// parameter and marks the store's gradients as populated.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, scale: T) {
        for (_, param, g) in &self.leaves {
            if let Some(id) = param {
                store.accumulate_grad(*id, g, scale);
            }
        }
        store.mark_grads_ready();
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf { param: None })
    }

    /// Free leaf that receives a gradient (used by tests and probes).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf { param: None })
    }

    /// Leaf bound to a stored parameter. Non-trainable parameters enter the
    /// graph as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), p.trainable, Op::Leaf { param: Some(id) })
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: Triple, pad: Triple) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let geom = conv::conv3d_geom(self.value(x), self.value(w), bias, stride, pad)?;
        let out = conv::conv3d_forward(self.value(x), self.value(w), bias, stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::Conv3d { x, w, b, geom }))
    }

    /// Transposed convolution; `w` is `[Cin, Cout, kd, kh, kw]`, no padding.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: Triple) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let geom = conv::conv_transpose3d_geom(self.value(x), self.value(w), bias, stride)?;
        let out = conv::conv_transpose3d_forward(self.value(x), self.value(w), bias, stride)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::ConvTranspose3d { x, w, b, geom }))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_volume("instance_norm input")?;
        let c = xv.channels();
        let vox = xv.voxels();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Dimension(format!(
                "instance_norm affine shapes {:?}/{:?} do not match {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if vox < 2 {
            return Err(Error::Dimension(format!(
                "instance_norm needs at least 2 voxels per channel, input {:?}",
                xv.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("instance_norm eps must be positive, got {eps}")));
        }
        let eps = T::lit(eps);
        let n = T::from_usize(vox).unwrap();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            let src = &xv.data()[ch * vox..(ch + 1) * vox];
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            let xh = &mut xhat[ch * vox..(ch + 1) * vox];
            let o = &mut out[ch * vox..(ch + 1) * vox];
            for i in 0..vox {
                xh[i] = (src[i] - mean) * is;
                o[i] = g[ch] * xh[i] + bt[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// `max(x, slope * x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { s * v });
        let rg = self.rg(x);
        self.push(out, rg, Op::LeakyRelu { x, slope: s })
    }

    /// Which side of the kink every leaky ReLU input lies on, in recording
    /// order. Finite differences are only valid while this pattern holds.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_channels needs at least one part".into()));
        };
        let spatial = self.value(first).shape()[1..].to_vec();
        let mut channels = 0;
        for (i, &p) in parts.iter().enumerate() {
            let s = self.value(p).shape();
            if s.len() < 2 || s[1..] != spatial[..] {
                return Err(Error::Dimension(format!(
                    "concat_channels: part {i} has shape {s:?}, expected spatial extents {spatial:?}"
                )));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * spatial.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&spatial);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if len == 0 || start + len > s[0] {
            return Err(Error::Dimension(format!(
                "channel range {start}..{} out of bounds for shape {s:?}",
                start + len
            )));
        }
        let per: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::NarrowChannels { x, start }))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.value(x).shape()[0];
        let total: usize = sizes.iter().sum();
        if total != c || sizes.contains(&0) {
            return Err(Error::Dimension(format!(
                "split sizes {sizes:?} (sum {total}) do not partition {c} channels"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.narrow_channels(x, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Softmax over the leading (channel) axis at every voxel.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.shape()[0];
        let vox = xv.len() / k;
        let mut out = vec![T::zero(); xv.len()];
        softmax_into(xv.data(), k, vox, &mut out);
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::Softmax { x }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale { x, factor: f })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same node has one shape")
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// The `offset..offset + prod(shape)` range of the flattened `x`, reshaped.
    pub fn slice_flat(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(x).len();
        if n == 0 || offset + n > len {
            return Err(Error::Dimension(format!(
                "flat slice {offset}..{} out of bounds for {len} elements",
                offset + n
            )));
        }
        let data = self.value(x).data()[offset..offset + n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), rg, Op::SliceFlat { x, offset }))
    }

    /// Per-channel spatial mean: `[C, D, H, W] -> [C, 1, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_volume("mean_spatial input")?;
        let c = xv.channels();
        let vox = xv.voxels();
        let n = T::from_usize(vox).unwrap();
        let data = xv.data().chunks(vox).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, 1, 1, 1], data), rg, Op::MeanSpatial { x }))
    }

    /// Nearest-neighbour upsampling by integer factors per spatial axis.
    pub fn upsample_nearest(&mut self, x: Var, factors: Triple) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_volume("upsample_nearest input")?;
        if factors.contains(&0) {
            return Err(Error::Config(format!("upsample factors must be positive, got {factors:?}")));
        }
        let c = xv.channels();
        let [d, h, w] = xv.spatial();
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut out = vec![T::zero(); c * od * oh * ow];
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let src = ((ch * d + z / fd) * h + y / fh) * w;
                    let dst = ((ch * od + z) * oh + y) * ow;
                    for xx in 0..ow {
                        out[dst + xx] = xv.data()[src + xx / fw];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, od, oh, ow], out),
            rg,
            Op::UpsampleNearest { x, factors },
        ))
    }

    /// Mean over voxels of `-log softmax(logits)[label]`, computed from
    /// max-shifted logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.shape()[0];
        let vox = lv.len() / k;
        check_labels(labels, k, vox)?;
        let mut probs = vec![T::zero(); lv.len()];
        softmax_into(lv.data(), k, vox, &mut probs);
        let mut total = T::zero();
        for (v, &lab) in labels.iter().enumerate() {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(lv.data()[c * vox + v]);
            }
            let lse = (0..k).map(|c| (lv.data()[c * vox + v] - m).exp()).sum::<T>().ln() + m;
            total += lse - lv.data()[lab as usize * vox + v];
        }
        let loss = total / T::from_usize(vox).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                probs,
            },
        ))
    }

    /// Soft Dice loss averaged over the foreground channels `1..K` of `probs`:
    /// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
    pub fn soft_dice_loss(&mut self, probs: Var, labels: &[u8], eps: f64) -> Result<Var> {
        let pv = self.value(probs);
        let k = pv.shape()[0];
        let vox = pv.len() / k;
        check_labels(labels, k, vox)?;
        if k < 2 {
            return Err(Error::Dimension("soft Dice needs at least one foreground channel".into()));
        }
        let eps = T::lit(eps);
        let mut loss = T::zero();
        for c in 1..k {
            let (inter, psum, gsum) = dice_terms(&pv.data()[c * vox..(c + 1) * vox], labels, c);
            loss += T::one() - (T::lit(2.0) * inter + eps) / (psum + gsum + eps);
        }
        loss /= T::from_usize(k - 1).unwrap();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftDice {
                probs,
                labels: labels.into(),
                eps,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = Vec::new();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { param } = self.nodes[i].op {
                leaves.push((Var(i), param, g));
            } else {
                self.backprop(i, &g, &mut grads);
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    /// Backward followed by accumulation of `scale * grad` into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>, scale: f64) -> Result<()> {
        let g = self.backward(loss)?;
        g.accumulate_into(store, T::lit(scale));
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv3d { x, w, b, geom } => {
                let (gx, gw, gb) = three_slots(nodes, grads, *x, *w, *b);
                conv::conv3d_backward(val(*x), val(*w), geom, g, gx, gw, gb);
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let (gx, gw, gb) = three_slots(nodes, grads, *x, *w, *b);
                conv::conv_transpose3d_backward(val(*x), val(*w), geom, g, gx, gw, gb);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let vox = xhat.len() / c;
                let n = T::from_usize(vox).unwrap();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let gy = &g[ch * vox..(ch + 1) * vox];
                    let xh = &xhat[ch * vox..(ch + 1) * vox];
                    dbeta[ch] = gy.iter().copied().sum();
                    dgamma[ch] = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        let gy = &g[ch * vox..(ch + 1) * vox];
                        let xh = &xhat[ch * vox..(ch + 1) * vox];
                        let mean_g = dbeta[ch] / n;
                        let mean_gx = dgamma[ch] / n;
                        let k = gam[ch] * inv_std[ch];
                        for (j, d) in gx[ch * vox..(ch + 1) * vox].iter_mut().enumerate() {
                            *d += k * (gy[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    add_into(gg, &dgamma);
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    add_into(gb, &dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &gy) in gx.iter_mut().zip(xv).zip(g) {
                        *d += if v > T::zero() { gy } else { *slope * gy };
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if let Some(gp) = slot(nodes, grads, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::NarrowChannels { x, start } => {
                let per: usize = val(*x).shape()[1..].iter().product();
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(&mut gx[start * per..start * per + g.len()], g);
                }
            }
            Op::Softmax { x } => {
                let p = nodes[i].value.data();
                let k = nodes[i].value.shape()[0];
                let vox = p.len() / k;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for v in 0..vox {
                        let dot = (0..k).map(|c| g[c * vox + v] * p[c * vox + v]).sum::<T>();
                        for c in 0..k {
                            gx[c * vox + v] += p[c * vox + v] * (g[c * vox + v] - dot);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &gy), &q) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gy * q;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, &gy), &p) in gb.iter_mut().zip(g).zip(av) {
                        *d += gy * p;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &gy) in gx.iter_mut().zip(g) {
                        *d += *factor * gy;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::SliceFlat { x, offset } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(&mut gx[*offset..*offset + g.len()], g);
                }
            }
            Op::MeanSpatial { x } => {
                let vox = val(*x).voxels();
                let n = T::from_usize(vox).unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (ch, chunk) in gx.chunks_mut(vox).enumerate() {
                        let share = g[ch] / n;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::UpsampleNearest { x, factors } => {
                let [c, d, h, w] = [val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2], val(*x).shape()[3]];
                let [fd, fh, fw] = *factors;
                let (od, oh, ow) = (d * fd, h * fh, w * fw);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                let dst = ((ch * d + z / fd) * h + y / fh) * w;
                                let src = ((ch * od + z) * oh + y) * ow;
                                for xx in 0..ow {
                                    gx[dst + xx / fw] += g[src + xx];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[0];
                let vox = labels.len();
                let scale = g[0] / T::from_usize(vox).unwrap();
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for c in 0..k {
                        for v in 0..vox {
                            let target = if labels[v] as usize == c { T::one() } else { T::zero() };
                            gl[c * vox + v] += scale * (probs[c * vox + v] - target);
                        }
                    }
                }
            }
            Op::SoftDice { probs, labels, eps } => {
                let pv = val(*probs).data();
                let k = val(*probs).shape()[0];
                let vox = labels.len();
                let per_class = g[0] / T::from_usize(k - 1).unwrap();
                let two = T::lit(2.0);
                if let Some(gp) = slot(nodes, grads, *probs) {
                    for c in 1..k {
                        let (inter, psum, gsum) = dice_terms(&pv[c * vox..(c + 1) * vox], labels, c);
                        let den = psum + gsum + *eps;
                        let num = two * inter + *eps;
                        for v in 0..vox {
                            let gt = if labels[v] as usize == c { T::one() } else { T::zero() };
                            let d = -(two * gt * den - num) / (den * den);
                            gp[c * vox + v] += per_class * d;
                        }
                    }
                }
            }
        }
    }
}

fn check_labels(labels: &[u8], k: usize, vox: usize) -> Result<()> {
    if labels.len() != vox {
        return Err(Error::Dimension(format!(
            "{} labels for {vox} voxels",
            labels.len()
        )));
    }
    if let Some((idx, &lab)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= k) {
        return Err(Error::Label(format!(
            "label {lab} at voxel {idx} is not below the class count {k}"
        )));
    }
    Ok(())
}

fn dice_terms<T: Real>(p: &[T], labels: &[u8], class: usize) -> (T, T, T) {
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (&pv, &l) in p.iter().zip(labels) {
        psum += pv;
        if l as usize == class {
            inter += pv;
            gsum += T::one();
        }
    }
    (inter, psum, gsum)
}

/// Max-shifted softmax over `k` channel planes of `vox` voxels each.
pub(crate) fn softmax_into<T: Real>(x: &[T], k: usize, vox: usize, out: &mut [T]) {
    for v in 0..vox {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(x[c * vox + v]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = (x[c * vox + v] - m).exp();
            out[c * vox + v] = e;
            z += e;
        }
        for c in 0..k {
            out[c * vox + v] /= z;
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

type Slots<'a, T> = (Option<&'a mut [T]>, Option<&'a mut [T]>, Option<&'a mut [T]>);

/// Disjoint gradient buffers for the (input, weight, bias) triple of a conv.
fn three_slots<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Slots<'a, T> {
    for v in [Some(x), Some(w), b].into_iter().flatten() {
        let _ = slot(nodes, grads, v);
    }
    let want = |v: Var| nodes[v.0].requires_grad;
    let mut gx = None;
    let mut gw = None;
    let mut gb = None;
    for (idx, entry) in grads.iter_mut().enumerate() {
        if idx == x.0 && want(x) {
            gx = entry.as_deref_mut();
        } else if idx == w.0 && want(w) {
            gw = entry.as_deref_mut();
        } else if b.is_some_and(|b| idx == b.0 && want(b)) {
            gb = entry.as_deref_mut();
        }
    }
    (gx, gw, gb)
}
