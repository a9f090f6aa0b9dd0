//! Reverse-mode differentiation over a per-forward-pass graph.
//!
//! Each forward pass builds a fresh [`Tape`]; `backward` walks it in
//! reverse and accumulates parameter gradients into the [`ParamSet`]s the
//! graph was built from. Node values are plain dense tensors; there is no
//! graph caching between passes.

use std::sync::Arc;

use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param {
        set: usize,
        block: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
    },
    BiasLastDim {
        input: NodeId,
        bias: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        alpha: f64,
    },
    Sigmoid {
        input: NodeId,
    },
    SoftClamp {
        input: NodeId,
        margin: f64,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    SoftmaxPairs {
        input: NodeId,
    },
    SuperpixelPool {
        input: NodeId,
        labels: Arc<Vec<u32>>,
        counts: Vec<u32>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Mean {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    NegLogMeanChannel {
        input: NodeId,
        channel: usize,
        floor: f64,
    },
    Reshape {
        input: NodeId,
    },
}

/// Computation graph for one forward pass.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// A constant (non-differentiable) input node.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    /// A parameter node reading from block `id` of parameter set `set`
    /// (the index the set will have in the slice passed to `backward`).
    pub fn param(&mut self, set: usize, id: ParamId, params: &ParamSet) -> NodeId {
        let value = params.get(id).value.clone();
        self.push(
            value,
            Op::Param {
                set,
                block: id.0,
            },
        )
    }

    /// 2-D convolution: input HxWxC, kernel khxkwxCxF -> output HoxWoxF
    /// with Ho = floor((H + 2*pad - kh)/stride) + 1.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let ishape = self.values[input.0].shape().to_vec();
        let kshape = self.values[kernel.0].shape().to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                "input HxWxC and kernel khxkwxCxF",
                format!("input {:?}, kernel {:?}", ishape, kshape),
            ));
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        let (kh, kw, kc, f) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg("conv2d", format!("kernel dims must be odd, got {kh}x{kw}")));
        }
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel channels {c}"),
                format!("kernel {:?} against input {:?}", kshape, ishape),
            ));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input at least {kh}x{kw}"),
                format!("{}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let patches = im2col(self.values[input.0].data(), h, w, c, kh, kw, stride, pad);
        let mut out = vec![0.0; ho * wo * f];
        matmul(&patches, self.values[kernel.0].data(), ho * wo, kh * kw * c, f, &mut out);

        let value = Tensor::new(vec![ho, wo, f], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Fully connected map: input [R,I] (or [I]) times weight [I,O].
    pub fn linear(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let ishape = self.values[input.0].shape().to_vec();
        let wshape = self.values[weight.0].shape().to_vec();
        if wshape.len() != 2 {
            return Err(Error::shape("linear", "weight [I,O]", format!("{:?}", wshape)));
        }
        let (rows, in_dim) = match ishape.len() {
            1 => (1, ishape[0]),
            2 => (ishape[0], ishape[1]),
            _ => {
                return Err(Error::shape("linear", "input [I] or [R,I]", format!("{:?}", ishape)));
            }
        };
        if in_dim != wshape[0] {
            return Err(Error::shape(
                "linear",
                format!("input inner dim {}", wshape[0]),
                format!("{:?}", ishape),
            ));
        }
        let out_dim = wshape[1];
        let mut out = vec![0.0; rows * out_dim];
        matmul(
            self.values[input.0].data(),
            self.values[weight.0].data(),
            rows,
            in_dim,
            out_dim,
            &mut out,
        );
        let oshape = if ishape.len() == 1 {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Linear { input, weight }))
    }

    /// Adds a bias vector along the last dimension.
    pub fn bias_last_dim(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.values[input.0].shape().to_vec();
        let bshape = self.values[bias.0].shape().to_vec();
        let last = *ishape.last().unwrap_or(&0);
        if bshape.len() != 1 || bshape[0] != last {
            return Err(Error::shape(
                "bias_last_dim",
                format!("bias [{last}]"),
                format!("{:?}", bshape),
            ));
        }
        let b = self.values[bias.0].data().to_vec();
        let mut out = self.values[input.0].data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[i % last];
        }
        let value = Tensor::new(ishape, out)?;
        Ok(self.push(value, Op::BiasLastDim { input, bias }))
    }

    /// Leaky rectifier; `alpha = 0` is plain relu.
    pub fn leaky_relu(&mut self, input: NodeId, alpha: f64) -> NodeId {
        let data: Vec<f64> = self.values[input.0]
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * x })
            .collect();
        let value = Tensor::new(self.values[input.0].shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LeakyRelu { input, alpha })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.leaky_relu(input, 0.0)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let data: Vec<f64> = self.values[input.0]
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::new(self.values[input.0].shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid { input })
    }

    /// Smooth clamp onto [0,1]: identity on [margin, 1-margin], quadratic
    /// easing onto the flats outside, C1 everywhere.
    pub fn soft_clamp(&mut self, input: NodeId, margin: f64) -> Result<NodeId> {
        if !(margin > 0.0 && margin <= 0.5) {
            return Err(Error::arg("soft_clamp", format!("margin must be in (0, 0.5], got {margin}")));
        }
        let data: Vec<f64> = self.values[input.0]
            .data()
            .iter()
            .map(|&z| soft_clamp_value(z, margin))
            .collect();
        let value = Tensor::new(self.values[input.0].shape().to_vec(), data).expect("same shape");
        Ok(self.push(value, Op::SoftClamp { input, margin }))
    }

    /// 2x2 max pooling with stride 2 over HxWxC; H and W must be even.
    pub fn max_pool_2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.values[input.0].shape().to_vec();
        if ishape.len() != 3 || ishape[0] % 2 != 0 || ishape[1] % 2 != 0 {
            return Err(Error::shape(
                "max_pool_2x2",
                "HxWxC with even H, W",
                format!("{:?}", ishape),
            ));
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.values[input.0].data();
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0u32; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = (oy * wo + ox) * c + ch;
                    out[oidx] = best;
                    argmax[oidx] = best_idx as u32;
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, c], out)?;
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }))
    }

    /// Two-class softmax over the last dimension, which must have size 2.
    pub fn softmax_pairs(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.values[input.0].shape().to_vec();
        if ishape.last() != Some(&2) {
            return Err(Error::shape("softmax_pairs", "last dim 2", format!("{:?}", ishape)));
        }
        let src = self.values[input.0].data();
        let mut out = vec![0.0; src.len()];
        for pair in 0..src.len() / 2 {
            let (z0, z1) = (src[pair * 2], src[pair * 2 + 1]);
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let denom = e0 + e1;
            out[pair * 2] = e0 / denom;
            out[pair * 2 + 1] = e1 / denom;
        }
        let value = Tensor::new(ishape, out)?;
        Ok(self.push(value, Op::SoftmaxPairs { input }))
    }

    /// Mean of each feature channel over every pixel of each labeled region:
    /// input HxWxC with a label raster of len H*W -> output [regions, C].
    pub fn superpixel_pool(
        &mut self,
        input: NodeId,
        labels: Arc<Vec<u32>>,
        regions: usize,
    ) -> Result<NodeId> {
        let ishape = self.values[input.0].shape().to_vec();
        if ishape.len() != 3 || ishape[0] * ishape[1] != labels.len() {
            return Err(Error::shape(
                "superpixel_pool",
                format!("HxWxC with H*W == {}", labels.len()),
                format!("{:?}", ishape),
            ));
        }
        let c = ishape[2];
        let mut counts = vec![0u32; regions];
        for &l in labels.iter() {
            if l as usize >= regions {
                return Err(Error::arg(
                    "superpixel_pool",
                    format!("label {l} out of range for {regions} regions"),
                ));
            }
            counts[l as usize] += 1;
        }
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::Degenerate("superpixel label with zero pixels".into()));
        }
        let src = self.values[input.0].data();
        let mut out = vec![0.0; regions * c];
        for (pix, &l) in labels.iter().enumerate() {
            let base = pix * c;
            let obase = l as usize * c;
            for ch in 0..c {
                out[obase + ch] += src[base + ch];
            }
        }
        for (l, chunk) in out.chunks_mut(c).enumerate() {
            let inv = 1.0 / counts[l] as f64;
            for v in chunk {
                *v *= inv;
            }
        }
        let value = Tensor::new(vec![regions, c], out)?;
        Ok(self.push(
            value,
            Op::SuperpixelPool {
                input,
                labels,
                counts,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "add",
                format!("{:?}", self.values[a.0].shape()),
                format!("{:?}", self.values[b.0].shape()),
            ));
        }
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let data: Vec<f64> = self.values[input.0].data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(self.values[input.0].shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { input, factor })
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let n = self.values[input.0].len().max(1);
        let m = self.values[input.0].data().iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(m), Op::Mean { input })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.values[input.0].data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// Mean absolute difference between two same-shape nodes, as a scalar.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "l1_mean",
                format!("{:?}", self.values[a.0].shape()),
                format!("{:?}", self.values[b.0].shape()),
            ));
        }
        let n = self.values[a.0].len().max(1);
        let s: f64 = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let value = Tensor::scalar(s / n as f64);
        Ok(self.push(value, Op::L1Mean { a, b }))
    }

    /// Mean over pairs of -log(max(p[channel], floor)) for a [.., 2] node of
    /// probability pairs.
    pub fn neg_log_mean_channel(&mut self, input: NodeId, channel: usize, floor: f64) -> Result<NodeId> {
        let ishape = self.values[input.0].shape();
        if ishape.last() != Some(&2) || channel > 1 {
            return Err(Error::shape(
                "neg_log_mean_channel",
                "probability pairs [.., 2] and channel in {0, 1}",
                format!("{:?} channel {channel}", ishape),
            ));
        }
        let src = self.values[input.0].data();
        let pairs = src.len() / 2;
        let s: f64 = (0..pairs)
            .map(|i| -(src[i * 2 + channel].max(floor)).ln())
            .sum();
        let value = Tensor::scalar(s / pairs.max(1) as f64);
        Ok(self.push(
            value,
            Op::NegLogMeanChannel {
                input,
                channel,
                floor,
            },
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.values[input.0].len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elems", self.values[input.0].len()),
                format!("{:?}", shape),
            ));
        }
        let value = Tensor::new(shape.to_vec(), self.values[input.0].data().to_vec())?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// Backward pass from a scalar output node, seeding with 1.0.
    pub fn backward(&self, output: NodeId, sets: &mut [&mut ParamSet]) -> Result<()> {
        if self.values[output.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar output",
                format!("{:?}", self.values[output.0].shape()),
            ));
        }
        self.backward_seeded(output, Tensor::scalar(1.0), sets)
    }

    /// Backward pass seeding the output node with an explicit cotangent.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor, sets: &mut [&mut ParamSet]) -> Result<()> {
        if seed.shape() != self.values[output.0].shape() {
            return Err(Error::shape(
                "backward_seeded",
                format!("{:?}", self.values[output.0].shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed);

        for i in (0..self.values.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Const => {}
                Op::Param { set, block } => {
                    let target = &mut sets[*set].blocks_mut()[*block].gradient;
                    for (t, s) in target.data_mut().iter_mut().zip(g.data()) {
                        *t += s;
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let ishape = self.values[input.0].shape();
                    let kshape = self.values[kernel.0].shape();
                    let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
                    let (kh, kw, f) = (kshape[0], kshape[1], kshape[3]);
                    let ho = (h + 2 * pad - kh) / stride + 1;
                    let wo = (w + 2 * pad - kw) / stride + 1;
                    let k = kh * kw * c;
                    let rows = ho * wo;

                    let patches = im2col(self.values[input.0].data(), h, w, c, kh, kw, *stride, *pad);

                    // dKernel = patches^T . dOut
                    let mut dkernel = vec![0.0; k * f];
                    matmul_at(&patches, g.data(), rows, k, f, &mut dkernel);
                    accumulate(&mut grads, kernel.0, Tensor::new(kshape.to_vec(), dkernel)?);

                    // dInput = col2im(dOut . kernel^T)
                    let mut dpatches = vec![0.0; rows * k];
                    matmul_bt(g.data(), self.values[kernel.0].data(), rows, f, k, &mut dpatches);
                    let dinput = col2im(&dpatches, h, w, c, kh, kw, *stride, *pad);
                    accumulate(&mut grads, input.0, Tensor::new(ishape.to_vec(), dinput)?);
                }
                Op::Linear { input, weight } => {
                    let ishape = self.values[input.0].shape();
                    let wshape = self.values[weight.0].shape();
                    let (rows, in_dim) = if ishape.len() == 1 {
                        (1, ishape[0])
                    } else {
                        (ishape[0], ishape[1])
                    };
                    let out_dim = wshape[1];
                    let mut dinput = vec![0.0; rows * in_dim];
                    matmul_bt(g.data(), self.values[weight.0].data(), rows, out_dim, in_dim, &mut dinput);
                    let mut dweight = vec![0.0; in_dim * out_dim];
                    matmul_at(
                        self.values[input.0].data(),
                        g.data(),
                        rows,
                        in_dim,
                        out_dim,
                        &mut dweight,
                    );
                    accumulate(&mut grads, input.0, Tensor::new(ishape.to_vec(), dinput)?);
                    accumulate(&mut grads, weight.0, Tensor::new(wshape.to_vec(), dweight)?);
                }
                Op::BiasLastDim { input, bias } => {
                    let last = self.values[bias.0].len();
                    let mut dbias = vec![0.0; last];
                    for (i, v) in g.data().iter().enumerate() {
                        dbias[i % last] += v;
                    }
                    accumulate(&mut grads, bias.0, Tensor::new(vec![last], dbias)?);
                    accumulate(&mut grads, input.0, g);
                }
                Op::LeakyRelu { input, alpha } => {
                    let data: Vec<f64> = self.values[input.0]
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &dg)| if x > 0.0 { dg } else { alpha * dg })
                        .collect();
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), data)?,
                    );
                }
                Op::Sigmoid { input } => {
                    let data: Vec<f64> = self.values[i]
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &dg)| dg * y * (1.0 - y))
                        .collect();
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), data)?,
                    );
                }
                Op::SoftClamp { input, margin } => {
                    let data: Vec<f64> = self.values[input.0]
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&z, &dg)| dg * soft_clamp_slope(z, *margin))
                        .collect();
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), data)?,
                    );
                }
                Op::MaxPool2x2 { input, argmax } => {
                    let mut dinput = vec![0.0; self.values[input.0].len()];
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        dinput[src_idx as usize] += g.data()[o];
                    }
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), dinput)?,
                    );
                }
                Op::SoftmaxPairs { input } => {
                    let y = self.values[i].data();
                    let mut dinput = vec![0.0; y.len()];
                    for pair in 0..y.len() / 2 {
                        let (y0, y1) = (y[pair * 2], y[pair * 2 + 1]);
                        let (g0, g1) = (g.data()[pair * 2], g.data()[pair * 2 + 1]);
                        let coupling = y0 * y1;
                        dinput[pair * 2] = coupling * (g0 - g1);
                        dinput[pair * 2 + 1] = coupling * (g1 - g0);
                    }
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), dinput)?,
                    );
                }
                Op::SuperpixelPool {
                    input,
                    labels,
                    counts,
                } => {
                    let c = self.values[input.0].shape()[2];
                    let mut dinput = vec![0.0; self.values[input.0].len()];
                    for (pix, &l) in labels.iter().enumerate() {
                        let inv = 1.0 / counts[l as usize] as f64;
                        let gbase = l as usize * c;
                        let base = pix * c;
                        for ch in 0..c {
                            dinput[base + ch] += g.data()[gbase + ch] * inv;
                        }
                    }
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), dinput)?,
                    );
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Scale { input, factor } => {
                    let data: Vec<f64> = g.data().iter().map(|&x| x * factor).collect();
                    accumulate(&mut grads, input.0, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Mean { input } => {
                    let n = self.values[input.0].len().max(1);
                    let dv = g.item() / n as f64;
                    accumulate(&mut grads, input.0, Tensor::filled(self.values[input.0].shape(), dv));
                }
                Op::Sum { input } => {
                    accumulate(&mut grads, input.0, Tensor::filled(self.values[input.0].shape(), g.item()));
                }
                Op::L1Mean { a, b } => {
                    let n = self.values[a.0].len().max(1);
                    let scale = g.item() / n as f64;
                    let da: Vec<f64> = self.values[a.0]
                        .data()
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(&x, &y)| scale * (x - y).signum() * if x == y { 0.0 } else { 1.0 })
                        .collect();
                    let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, a.0, Tensor::new(self.values[a.0].shape().to_vec(), da)?);
                    accumulate(&mut grads, b.0, Tensor::new(self.values[b.0].shape().to_vec(), db)?);
                }
                Op::NegLogMeanChannel {
                    input,
                    channel,
                    floor,
                } => {
                    let src = self.values[input.0].data();
                    let pairs = src.len() / 2;
                    let scale = g.item() / pairs.max(1) as f64;
                    let mut dinput = vec![0.0; src.len()];
                    for pair in 0..pairs {
                        let p = src[pair * 2 + channel];
                        if p > *floor {
                            dinput[pair * 2 + channel] = -scale / p;
                        }
                    }
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), dinput)?,
                    );
                }
                Op::Reshape { input } => {
                    accumulate(
                        &mut grads,
                        input.0,
                        Tensor::new(self.values[input.0].shape().to_vec(), g.data().to_vec())?,
                    );
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: usize, contribution: Tensor) {
    match &mut grads[node] {
        Some(existing) => {
            for (t, s) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *t += s;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn soft_clamp_value(z: f64, m: f64) -> f64 {
    if z <= -m {
        0.0
    } else if z < m {
        (z + m) * (z + m) / (4.0 * m)
    } else if z <= 1.0 - m {
        z
    } else if z < 1.0 + m {
        1.0 - (1.0 - z + m) * (1.0 - z + m) / (4.0 * m)
    } else {
        1.0
    }
}

fn soft_clamp_slope(z: f64, m: f64) -> f64 {
    if z <= -m {
        0.0
    } else if z < m {
        (z + m) / (2.0 * m)
    } else if z <= 1.0 - m {
        1.0
    } else if z < 1.0 + m {
        (1.0 - z + m) / (2.0 * m)
    } else {
        0.0
    }
}

/// out[m,n] += a[m,k] . b[k,n]
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[k,n] += a^T[k,m] . b[m,n]  (a given as [m,k])
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] . b^T[n,k]  (b given as [k,n])
fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// Extract convolution patches: [ho*wo, kh*kw*c] row per output pixel.
#[allow(clippy::too_many_arguments)]
fn im2col(input: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * c;
    let mut patches = vec![0.0; ho * wo * k];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * k;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = row + (ky * kw + kx) * c;
                    patches[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    patches
}

/// Scatter-add patch gradients back onto the input raster.
#[allow(clippy::too_many_arguments)]
fn col2im(dpatches: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * c;
    let mut dinput = vec![0.0; h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * k;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = row + (ky * kw + kx) * c;
                    for ch in 0..c {
                        dinput[dst + ch] += dpatches[src + ch];
                    }
                }
            }
        }
    }
    dinput
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    /// Direct six-nested-loop convolution, kept deliberately independent of
    /// the im2col path above.
    #[allow(clippy::too_many_arguments)]
    pub fn naive_conv(
        input: &[f64],
        h: usize,
        w: usize,
        c: usize,
        kernel: &[f64],
        kh: usize,
        kw: usize,
        f: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; ho * wo * f];
        for oy in 0..ho {
            for ox in 0..wo {
                for of in 0..f {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ch in 0..c {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[(iy as usize * w + ix as usize) * c + ch];
                                let kv = kernel[((ky * kw + kx) * c + ch) * f + of];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[(oy * wo + ox) * f + of] = acc;
                }
            }
        }
        out
    }

    fn rand_tensor(shape: &[usize], rng: &mut SeedStream) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_scalar_multiply() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let k = t.input(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap());
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_zero_kernel_zero_output() {
        let mut rng = SeedStream::new(1, 99);
        let mut t = Tape::new();
        let x = t.input(rand_tensor(&[6, 6, 3], &mut rng));
        let k = t.input(Tensor::zeros(&[3, 3, 3, 4]));
        let y = t.conv2d(x, k, 1, 1).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = SeedStream::new(42, 7);
        for trial in 0..20 {
            let c = 1 + trial % 3;
            let f = 1 + trial % 4;
            let (h, w) = (5 + trial % 12, 5 + (trial * 3) % 12);
            let stride = 1 + trial % 2;
            let pad = trial % 2;
            let x = rand_tensor(&[h, w, c], &mut rng);
            let k = rand_tensor(&[3, 3, c, f], &mut rng);
            let expected = naive_conv(x.data(), h, w, c, k.data(), 3, 3, f, stride, pad);
            let mut t = Tape::new();
            let xi = t.input(x);
            let ki = t.input(k);
            let y = t.conv2d(xi, ki, stride, pad).unwrap();
            for (a, b) in t.value(y).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[4, 4, 2]));
        let k = t.input(Tensor::zeros(&[3, 3, 3, 1]));
        let err = t.conv2d(x, k, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 3, 3, 1]") && msg.contains("[4, 4, 2]"), "{msg}");
    }

    #[test]
    fn relu_example() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax_pairs(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_pairs_sum_to_one() {
        let mut rng = SeedStream::new(5, 1);
        let mut t = Tape::new();
        let x = t.input(rand_tensor(&[4, 4, 2], &mut rng));
        let y = t.softmax_pairs(x).unwrap();
        for pair in t.value(y).data().chunks(2) {
            assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_example_with_grad_routing() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.max_pool_2x2(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        // route gradient: build a param so backward has somewhere to land
        let mut params = ParamSet::new();
        let pid = params.register("x", Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut t = Tape::new();
        let xp = t.param(0, pid, &params);
        let y = t.max_pool_2x2(xp).unwrap();
        let s = t.sum(y);
        t.backward(s, &mut [&mut params]).unwrap();
        assert_eq!(params.get(pid).gradient.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn superpixel_pool_means() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 10.0, 20.0]).unwrap());
        let labels = Arc::new(vec![0u32, 0, 1, 1]);
        let y = t.superpixel_pool(x, labels, 2).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 15.0]);
    }

    #[test]
    fn soft_clamp_identity_in_bulk_and_bounded() {
        let m = 0.05;
        assert_eq!(soft_clamp_value(0.5, m), 0.5);
        assert_eq!(soft_clamp_value(0.1, m), 0.1);
        assert_eq!(soft_clamp_value(-2.0, m), 0.0);
        assert_eq!(soft_clamp_value(3.0, m), 1.0);
        for i in 0..200 {
            let z = -0.5 + i as f64 * 0.01;
            let v = soft_clamp_value(z, m);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
