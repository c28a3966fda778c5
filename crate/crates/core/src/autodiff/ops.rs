use super::kernels::{self, ConvGeometry};
use super::{BufferId, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Stride, zero padding and channel groups of a convolution, ordered
/// (spectral, height, width). 2D convolutions ignore the first component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    /// Stride 1 with `(k - 1) / 2` padding on every axis.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self::new([1, 1, 1], kernel.map(|k| (k - 1) / 2))
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new([1, 1, 1], [0, 0, 0])
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

fn conv_geometry(x: &[usize], w: &[usize], spec: ConvSpec, two_d: bool) -> Result<ConvGeometry> {
    let rank = if two_d { 4 } else { 5 };
    if x.len() != rank || w.len() != rank {
        return Err(Error::Shape(format!(
            "convolution expects rank-{rank} input and kernel, got {x:?} and {w:?}"
        )));
    }
    if spec.groups == 0 || spec.stride.contains(&0) {
        return Err(Error::Contract("stride and groups must be at least 1".into()));
    }
    let (input, kernel, stride, padding) = if two_d {
        (
            [1, x[2], x[3]],
            [1, w[2], w[3]],
            [1, spec.stride[1], spec.stride[2]],
            [0, spec.padding[1], spec.padding[2]],
        )
    } else {
        ([x[2], x[3], x[4]], [w[2], w[3], w[4]], spec.stride, spec.padding)
    };
    let (cin, cout) = (x[1], w[0]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::dim("channels", spec.groups, cin, "channels must divide into groups"));
    }
    if w[1] != cin / spec.groups {
        return Err(Error::dim("channels", cin / spec.groups, w[1], "kernel input channels"));
    }
    for a in 0..3 {
        if kernel[a] > input[a] + 2 * padding[a] {
            return Err(Error::dim(
                AXES[a],
                input[a] + 2 * padding[a],
                kernel[a],
                "kernel extent exceeds padded input",
            ));
        }
    }
    Ok(ConvGeometry {
        batch: x[0],
        in_channels: cin,
        out_channels: cout,
        groups: spec.groups,
        input,
        kernel,
        stride,
        padding,
    })
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl Graph<'_> {
    /// 3D convolution without bias: input `[B, Cin, D, H, W]`, kernel
    /// `[Cout, Cin / groups, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        self.conv(x, w, spec, false)
    }

    /// 2D convolution without bias: input `[B, Cin, H, W]`, kernel
    /// `[Cout, Cin / groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        self.conv(x, w, spec, true)
    }

    fn conv(&mut self, x: Var, w: Var, spec: ConvSpec, two_d: bool) -> Result<Var> {
        let geom = conv_geometry(self.shape(x), self.shape(w), spec, two_d)?;
        let out = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let [od, oh, ow] = geom.output();
        let shape = if two_d {
            vec![geom.batch, geom.out_channels, oh, ow]
        } else {
            vec![geom.batch, geom.out_channels, od, oh, ow]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.record(
            value,
            vec![x, w],
            Box::new(move |a| {
                let (dx, dw) = kernels::conv_backward(
                    &geom,
                    a.inputs[0].data(),
                    a.inputs[1].data(),
                    a.grad.data(),
                    a.needs[0],
                    a.needs[1],
                );
                vec![
                    dx.map(|d| Tensor::new(a.inputs[0].shape().to_vec(), d).expect("shape")),
                    dw.map(|d| Tensor::new(a.inputs[1].shape().to_vec(), d).expect("shape")),
                ]
            }),
        ))
    }

    /// Batch normalization over axis 1 of an input of rank >= 2.
    ///
    /// In train mode the batch statistics normalize the input and the
    /// running statistics move toward them with momentum [`BN_MOMENTUM`];
    /// the running variance uses the unbiased estimate. Eval mode normalizes
    /// with the running statistics.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, running_mean: BufferId, running_var: BufferId) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch_norm needs [B, C, ...], got {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (v, what) in [(scale, "scale"), (shift, "shift")] {
            if self.value(v).len() != channels {
                return Err(Error::dim("channels", channels, self.value(v).len(), format!("batch_norm {what}")));
            }
        }
        let n = batch * inner;
        let xv = self.value(x).data();
        let gamma = self.value(scale).data().to_vec();
        let beta = self.value(shift).data().to_vec();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        match self.mode() {
            Mode::Train => {
                for c in 0..channels {
                    let chan = || (0..batch).flat_map(move |b| {
                        let off = (b * channels + c) * inner;
                        off..off + inner
                    });
                    let mut m = chan().map(|i| xv[i]).sum::<f64>() / n as f64;
                    // second pass removes the rounding error of the first
                    m += chan().map(|i| xv[i] - m).sum::<f64>() / n as f64;
                    let v = chan().map(|i| (xv[i] - m) * (xv[i] - m)).sum::<f64>() / n as f64;
                    mean[c] = m;
                    var[c] = v;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(self.store().buffer(running_mean).data());
                var.copy_from_slice(self.store().buffer(running_var).data());
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gamma[c] * h + beta[c];
                }
            }
        }
        let train = self.mode() == Mode::Train;
        if train {
            let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            let store = self.store_mut();
            for (r, m) in store.buffer_mut(running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.buffer_mut(running_var).data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        let value = Tensor::new(shape.clone(), out)?;
        Ok(self.record(
            value,
            vec![x, scale, shift],
            Box::new(move |a| {
                let g = a.grad.data();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * inner;
                        for i in off..off + inner {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * inner;
                            let k = gamma[c] * inv_std[c];
                            for i in off..off + inner {
                                dx[i] = if train {
                                    k * (g[i] - dbeta[c] / n as f64 - xhat[i] * dgamma[c] / n as f64)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    Tensor::new(shape.clone(), dx).expect("shape")
                });
                vec![
                    dx,
                    Some(Tensor::new(vec![channels], dgamma).expect("shape")),
                    Some(Tensor::new(vec![channels], dbeta).expect("shape")),
                ]
            }),
        ))
    }

    /// Elementwise `max(x, slope * x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Contract(format!("leaky slope must lie in (0, 1), got {slope}")));
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        Ok(self.record(
            Tensor::new(shape, out)?,
            vec![x],
            Box::new(move |a| {
                let d: Vec<f64> = a
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(a.grad.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                vec![Some(Tensor::new(a.inputs[0].shape().to_vec(), d).expect("shape"))]
            }),
        ))
    }

    /// Mean over the spectral axis: `[B, C, D, H, W] -> [B, C, H, W]`.
    pub fn spectral_avg(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 || shape[2] == 0 {
            return Err(Error::Shape(format!("spectral_avg expects [B, C, D>=1, H, W], got {shape:?}")));
        }
        let (bc, d, hw) = (shape[0] * shape[1], shape[2], shape[3] * shape[4]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; bc * hw];
        for p in 0..bc {
            let o = &mut out[p * hw..(p + 1) * hw];
            for z in 0..d {
                kernels::axpy(1.0, &xv[(p * d + z) * hw..(p * d + z + 1) * hw], o);
            }
            o.iter_mut().for_each(|v| *v /= d as f64);
        }
        let out_shape = vec![shape[0], shape[1], shape[3], shape[4]];
        Ok(self.record(
            Tensor::new(out_shape, out)?,
            vec![x],
            Box::new(move |a| {
                let g = a.grad.data();
                let mut dx = vec![0.0; bc * d * hw];
                let inv = 1.0 / d as f64;
                for p in 0..bc {
                    for z in 0..d {
                        let dst = &mut dx[(p * d + z) * hw..(p * d + z + 1) * hw];
                        kernels::axpy(inv, &g[p * hw..(p + 1) * hw], dst);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xv[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        Ok(self.record(
            Tensor::new(shape.clone(), out)?,
            vec![x],
            Box::new(move |a| {
                let y = a.output.data();
                let g = a.grad.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let s: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// Mean negative log-likelihood over labeled pixels.
    ///
    /// `logits` is `[B, K, H, W]`; `labels` holds `B * H * W` entries with 0
    /// for unlabeled pixels and `1..=K` for classes.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[u16]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("logits must be [B, K, H, W], got {shape:?}")));
        }
        let (batch, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if labels.len() != batch * hw {
            return Err(Error::dim("pixels", batch * hw, labels.len(), "label patch size"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > k) {
            return Err(Error::Contract(format!("label {bad} exceeds class count {k}")));
        }
        let count = labels.iter().filter(|&&l| l != 0).count();
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let xv = self.value(logits).data();
        // per labeled pixel: (offset of class 0, class index, softmax probabilities)
        let mut saved: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(count);
        let mut total = 0.0;
        for b in 0..batch {
            for p in 0..hw {
                let label = labels[b * hw + p];
                if label == 0 {
                    continue;
                }
                let base = b * k * hw + p;
                let m = (0..k).map(|c| xv[base + c * hw]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (xv[base + c * hw] - m).exp()).sum();
                let logz = m + z.ln();
                let target = label as usize - 1;
                total += logz - xv[base + target * hw];
                let probs = (0..k).map(|c| (xv[base + c * hw] - logz).exp()).collect();
                saved.push((base, target, probs));
            }
        }
        let loss = total / count as f64;
        Ok(self.record(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |a| {
                let scale = a.grad.data()[0] / count as f64;
                let mut dx = vec![0.0; batch * k * hw];
                for (base, target, probs) in &saved {
                    for (c, p) in probs.iter().enumerate() {
                        let t = if c == *target { 1.0 } else { 0.0 };
                        dx[base + c * hw] = scale * (p - t);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// `sum_j weights[indices[j]] * inputs[j]`, accumulated in order.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, indices: &[usize]) -> Result<Var> {
        if inputs.is_empty() || inputs.len() != indices.len() {
            return Err(Error::Contract("weighted_sum needs one index per input".into()));
        }
        let shape = self.shape(inputs[0]).to_vec();
        let wlen = self.value(weights).len();
        for &v in inputs {
            same_shape(&shape, self.shape(v), "weighted_sum")?;
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= wlen) {
            return Err(Error::Contract(format!("weight index {i} out of range {wlen}")));
        }
        let w = self.value(weights).data().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (&v, &i) in inputs.iter().zip(indices) {
            let wi = w[i];
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wi * x;
            }
        }
        let mut parents = inputs.to_vec();
        parents.push(weights);
        let indices = indices.to_vec();
        Ok(self.record(
            Tensor::new(shape.clone(), out)?,
            parents,
            Box::new(move |a| {
                let g = a.grad.data();
                let n = indices.len();
                let mut grads: Vec<Option<Tensor>> = (0..n)
                    .map(|j| {
                        a.needs[j].then(|| {
                            let wi = w[indices[j]];
                            Tensor::new(shape.clone(), g.iter().map(|v| wi * v).collect()).expect("shape")
                        })
                    })
                    .collect();
                let dw = a.needs[n].then(|| {
                    let mut dw = vec![0.0; w.len()];
                    for (j, &i) in indices.iter().enumerate() {
                        dw[i] += kernels::dot(g, a.inputs[j].data());
                    }
                    Tensor::new(a.inputs[n].shape().to_vec(), dw).expect("shape")
                });
                grads.push(dw);
                grads
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::new(shape, out)?,
            vec![a, b],
            Box::new(|a| vec![a.needs[0].then(|| a.grad.clone()), a.needs[1].then(|| a.grad.clone())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::new(shape.clone(), out)?,
            vec![a, b],
            Box::new(move |a| {
                let g = a.grad.data();
                let prod = |o: &Tensor| {
                    Tensor::new(shape.clone(), g.iter().zip(o.data()).map(|(g, v)| g * v).collect()).expect("shape")
                };
                vec![a.needs[0].then(|| prod(a.inputs[1])), a.needs[1].then(|| prod(a.inputs[0]))]
            }),
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(
            Tensor::scalar(s),
            vec![x],
            Box::new(|a| vec![Some(Tensor::full(a.inputs[0].shape().to_vec(), a.grad.data()[0]))]),
        )
    }

    /// Concatenate along axis 1. All other extents must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::Shape(format!("concat needs [B, C, ...], got {base:?}")));
        }
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {base:?}")));
            }
            channels.push(s[1]);
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let batch = base[0];
        let inner: usize = base[2..].iter().product();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (&v, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = base.clone();
        shape[1] = total;
        Ok(self.record(
            Tensor::new(shape, out)?,
            xs.to_vec(),
            Box::new(move |a| {
                let g = a.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(channels.len());
                for (j, &c) in channels.iter().enumerate() {
                    if a.needs[j] {
                        let mut d = Vec::with_capacity(batch * c * inner);
                        for b in 0..batch {
                            let start = (b * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + c * inner]);
                        }
                        grads.push(Some(Tensor::new(a.inputs[j].shape().to_vec(), d).expect("shape")));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                grads
            }),
        ))
    }

    /// Add a per-channel bias to `[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("bias needs [B, C, ...], got {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        if self.value(bias).len() != channels {
            return Err(Error::dim("channels", channels, self.value(bias).len(), "bias length"));
        }
        let inner: usize = shape[2..].iter().product();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * inner;
                out[off..off + inner].iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        Ok(self.record(
            Tensor::new(shape, out)?,
            vec![x, bias],
            Box::new(move |a| {
                let g = a.grad.data();
                let mut db = vec![0.0; channels];
                for b in 0..batch {
                    for (c, d) in db.iter_mut().enumerate() {
                        let off = (b * channels + c) * inner;
                        *d += g[off..off + inner].iter().sum::<f64>();
                    }
                }
                vec![
                    a.needs[0].then(|| a.grad.clone()),
                    Some(Tensor::new(vec![channels], db).expect("shape")),
                ]
            }),
        ))
    }
}
