//! Minimal reverse-mode differentiation over 4-D `(batch, channel, y, x)`
//! tensors.
//!
//! A [`Recorder`] evaluates layers eagerly and keeps whatever each one needs
//! for its adjoint. [`backward`] replays the finished [`Graph`] in reverse,
//! starting from the gradient of a scalar with respect to the last node.

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w || data.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "tensor of {} values cannot have shape {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    /// Stacks per-item channel planes: `items[b][ch]` is one `h`x`w` plane.
    pub fn from_planes(h: usize, w: usize, items: &[Vec<&[f64]>]) -> Result<Self> {
        let n = items.len();
        let c = items.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * c * h * w);
        for item in items {
            if item.len() != c {
                return Err(Error::DimensionMismatch("ragged channel count".into()));
            }
            for plane in item {
                if plane.len() != h * w {
                    return Err(Error::DimensionMismatch(format!(
                        "plane of {} values, expected {h}x{w}",
                        plane.len()
                    )));
                }
                data.extend_from_slice(plane);
            }
        }
        Tensor::new(n, c, h, w, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, item: usize, channel: usize) -> &[f64] {
        let hw = self.h * self.w;
        let at = (item * self.c + channel) * hw;
        &self.data[at..at + hw]
    }

    pub fn plane_mut(&mut self, item: usize, channel: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let at = (item * self.c + channel) * hw;
        &mut self.data[at..at + hw]
    }

    fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// One named, shaped array of learnable values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        ParamBlock {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Per-channel running mean and variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Whether normalization layers use batch statistics (and report them) or
/// frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch statistics observed by one normalization layer in training mode;
/// the variance is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Scale {
        x: usize,
        s: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Dense {
        x: usize,
        weight: usize,
        bias: usize,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Graph {
    fingerprint: u64,
    mode: Mode,
    nodes: Vec<Node>,
    batch_stats: Vec<BatchStats>,
}

impl Graph {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes.last().expect("graph has no nodes").value
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }
}

/// c (m x n) = a (m x k) . b (k x n) + beta . c, all with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, col: usize| (r - 1) * rs + (col - 1) * cs;
    assert!(k == 0 || a.len() > last(rsa, csa, m, k));
    assert!(k == 0 || b.len() > last(rsb, csb, k, n));
    assert!(c.len() > last(rsc, csc, m, n));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let (ho, wo) = (
        conv_out_size(h, k, stride, pad),
        conv_out_size(w, k, stride, pad),
    );
    let p = ho * wo;
    for ci in 0..cin {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix >= 0 && (ix as usize) < w {
                            line[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let (ho, wo) = (
        conv_out_size(h, k, stride, pad),
        conv_out_size(w, k, stride, pad),
    );
    let p = ho * wo;
    for ci in 0..cin {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            line[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for bilinear upsampling with half-pixel centres.
fn upsample_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Records layers against a fixed set of parameters.
pub struct Recorder<'p> {
    blocks: &'p [ParamBlock],
    stats: &'p [RunningStats],
    graph: Graph,
}

impl<'p> Recorder<'p> {
    pub fn new(
        fingerprint: u64,
        mode: Mode,
        blocks: &'p [ParamBlock],
        stats: &'p [RunningStats],
    ) -> Self {
        Recorder {
            blocks,
            stats,
            graph: Graph {
                fingerprint,
                mode,
                nodes: Vec::new(),
                batch_stats: Vec::new(),
            },
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.graph.nodes.push(Node { op, value });
        NodeId(self.graph.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.graph.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    /// Square convolution; `weight` has shape `[cout, cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let wb = &self.blocks[weight];
        let (cout, cin, k) = (wb.shape[0], wb.shape[1], wb.shape[2]);
        let xv = &self.graph.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        assert_eq!(
            c, cin,
            "conv `{}` expects {cin} input channels, got {c}",
            wb.name
        );
        let (ho, wo) = (
            conv_out_size(h, k, stride, pad),
            conv_out_size(w, k, stride, pad),
        );
        let (kk, p) = (cin * k * k, ho * wo);
        let mut cols = vec![0.0; n * kk * p];
        let mut out = Tensor::zeros(n, cout, ho, wo);
        for b in 0..n {
            let col_b = &mut cols[b * kk * p..(b + 1) * kk * p];
            im2col(
                &xv.data[b * xv.item_len()..(b + 1) * xv.item_len()],
                cin,
                h,
                w,
                k,
                stride,
                pad,
                col_b,
            );
            let out_b = &mut out.data[b * cout * p..(b + 1) * cout * p];
            gemm(
                cout,
                kk,
                p,
                &wb.data,
                (kk, 1),
                col_b,
                (p, 1),
                0.0,
                out_b,
                (p, 1),
            );
            if let Some(bi) = bias {
                for (co, &bv) in self.blocks[bi].data.iter().enumerate() {
                    out_b[co * p..(co + 1) * p]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        self.push(
            Op::Conv {
                x: x.0,
                weight,
                bias,
                k,
                stride,
                pad,
                cols,
            },
            out,
        )
    }

    /// Per-channel normalization; `layer` indexes the running statistics.
    pub fn batch_norm(&mut self, x: NodeId, gamma: usize, beta: usize, layer: usize) -> NodeId {
        let xv = &self.graph.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let batch = self.graph.mode == Mode::Train;
        let (g, bt) = (&self.blocks[gamma].data, &self.blocks[beta].data);
        let mut xhat = vec![0.0; xv.data.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = Tensor::zeros(n, c, h, w);
        let mut seen = BatchStats {
            layer,
            mean: vec![0.0; c],
            var: vec![0.0; c],
        };
        for ch in 0..c {
            let planes = || (0..n).map(move |b| (b * c + ch) * hw);
            let (mean, var) = if batch {
                let mean = planes()
                    .map(|at| xv.data[at..at + hw].iter().sum::<f64>())
                    .sum::<f64>()
                    / m;
                let var = planes()
                    .map(|at| {
                        xv.data[at..at + hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / m;
                seen.mean[ch] = mean;
                seen.var[ch] = if m > 1.0 { var * m / (m - 1.0) } else { var };
                (mean, var)
            } else {
                (self.stats[layer].mean[ch], self.stats[layer].var[ch])
            };
            let inv = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = inv;
            for at in planes() {
                for i in at..at + hw {
                    let xh = (xv.data[i] - mean) * inv;
                    xhat[i] = xh;
                    out.data[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if batch {
            self.graph.batch_stats.push(seen);
        }
        self.push(
            Op::BatchNorm {
                x: x.0,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            out,
        )
    }

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let xv = &self.graph.nodes[x.0].value;
        let mut out = xv.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        self.push(op, out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Relu { x: x.0 }, |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.map(x, Op::LeakyRelu { x: x.0, slope }, |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Tanh { x: x.0 }, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sigmoid { x: x.0 }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.map(x, Op::Scale { x: x.0, s }, |v| v * s)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.graph.nodes[a.0].value, &self.graph.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add of mismatched tensors");
        let mut out = av.clone();
        out.data.iter_mut().zip(&bv.data).for_each(|(o, v)| *o += v);
        self.push(Op::Add { a: a.0, b: b.0 }, out)
    }

    /// Fully connected layer over the flattened item; `weight` is `[out, in]`.
    pub fn dense(&mut self, x: NodeId, weight: usize, bias: usize) -> NodeId {
        let xv = &self.graph.nodes[x.0].value;
        let wb = &self.blocks[weight];
        let (fo, fi) = (wb.shape[0], wb.shape[1]);
        let n = xv.n;
        assert_eq!(
            xv.item_len(),
            fi,
            "dense `{}` expects {fi} inputs, got {}",
            wb.name,
            xv.item_len()
        );
        let mut out = Tensor::zeros(n, fo, 1, 1);
        for b in 0..n {
            out.data[b * fo..(b + 1) * fo].copy_from_slice(&self.blocks[bias].data);
        }
        gemm(
            n,
            fi,
            fo,
            &xv.data,
            (fi, 1),
            &wb.data,
            (1, fi),
            1.0,
            &mut out.data,
            (fo, 1),
        );
        self.push(
            Op::Dense {
                x: x.0,
                weight,
                bias,
            },
            out,
        )
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        if factor == 1 {
            return self.scale(x, 1.0);
        }
        let xv = &self.graph.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let (ty, tx) = (upsample_taps(h, factor), upsample_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Tensor::zeros(n, c, ho, wo);
        for b in 0..n {
            for ch in 0..c {
                let src = xv.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                        dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        self.push(Op::Upsample { x: x.0, factor }, out)
    }

    /// Seals the recording; a non-finite activation anywhere is divergence.
    pub fn finish(self) -> Result<Graph> {
        for (i, node) in self.graph.nodes.iter().enumerate() {
            if node.value.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: 0,
                    reason: format!("non-finite activation at node {i}"),
                    last_good: None,
                });
            }
        }
        Ok(self.graph)
    }
}

/// Gradients of a scalar with respect to every parameter block and every
/// input node (in recording order).
#[derive(Clone, Debug)]
pub struct Backward {
    pub params: Vec<Vec<f64>>,
    pub inputs: Vec<Tensor>,
}

/// Reverse pass from the last recorded node given `upstream`, the gradient
/// with respect to that node's value.
pub fn backward(
    graph: &Graph,
    fingerprint: u64,
    blocks: &[ParamBlock],
    upstream: &Tensor,
) -> Result<Backward> {
    if graph.fingerprint != fingerprint {
        return Err(Error::DetachedGraph(
            "graph was recorded against different parameters".into(),
        ));
    }
    let last = graph
        .nodes
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::DetachedGraph("empty graph".into()))?;
    if graph.nodes[last].value.shape() != upstream.shape() {
        return Err(Error::DetachedGraph(format!(
            "upstream shape {:?} does not match output {:?}",
            upstream.shape(),
            graph.nodes[last].value.shape()
        )));
    }
    let mut pgrad: Vec<Vec<f64>> = blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
    let mut grads: Vec<Option<Vec<f64>>> = (0..graph.nodes.len()).map(|_| None).collect();
    grads[last] = Some(upstream.data.clone());

    fn acc(grads: &mut [Option<Vec<f64>>], at: usize, len: usize) -> &mut Vec<f64> {
        grads[at].get_or_insert_with(|| vec![0.0; len])
    }

    for idx in (0..graph.nodes.len()).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &graph.nodes[idx];
        match &node.op {
            Op::Input => {
                grads[idx] = Some(g);
            }
            Op::Conv {
                x,
                weight,
                bias,
                k,
                stride,
                pad,
                cols,
            } => {
                let xv = &graph.nodes[*x].value;
                let [n, cin, h, w] = xv.shape();
                let [_, cout, ho, wo] = node.value.shape();
                let (kk, p) = (cin * k * k, ho * wo);
                let wdata = &blocks[*weight].data;
                let mut dcols = vec![0.0; kk * p];
                let dx = acc(&mut grads, *x, xv.data.len());
                for b in 0..n {
                    let g_b = &g[b * cout * p..(b + 1) * cout * p];
                    let col_b = &cols[b * kk * p..(b + 1) * kk * p];
                    gemm(
                        cout,
                        p,
                        kk,
                        g_b,
                        (p, 1),
                        col_b,
                        (1, p),
                        1.0,
                        &mut pgrad[*weight],
                        (kk, 1),
                    );
                    gemm(
                        kk,
                        cout,
                        p,
                        wdata,
                        (1, kk),
                        g_b,
                        (p, 1),
                        0.0,
                        &mut dcols,
                        (p, 1),
                    );
                    let item = cin * h * w;
                    col2im(
                        &dcols,
                        cin,
                        h,
                        w,
                        *k,
                        *stride,
                        *pad,
                        &mut dx[b * item..(b + 1) * item],
                    );
                    if let Some(bi) = bias {
                        for co in 0..cout {
                            pgrad[*bi][co] += g_b[co * p..(co + 1) * p].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let [n, c, h, w] = node.value.shape();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gm = &blocks[*gamma].data;
                let mut sums = vec![(0.0, 0.0); c];
                for b in 0..n {
                    for (ch, s) in sums.iter_mut().enumerate() {
                        let at = (b * c + ch) * hw;
                        for i in at..at + hw {
                            s.0 += g[i];
                            s.1 += g[i] * xhat[i];
                        }
                    }
                }
                for (ch, &(sdy, sdyx)) in sums.iter().enumerate() {
                    pgrad[*gamma][ch] += sdyx;
                    pgrad[*beta][ch] += sdy;
                }
                let dx = acc(&mut grads, *x, n * c * hw);
                for b in 0..n {
                    for ch in 0..c {
                        let at = (b * c + ch) * hw;
                        let (sdy, sdyx) = sums[ch];
                        let coef = gm[ch] * inv_std[ch];
                        for i in at..at + hw {
                            dx[i] += if *batch {
                                coef / m * (m * g[i] - sdy - xhat[i] * sdyx)
                            } else {
                                coef * g[i]
                            };
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = &graph.nodes[*x].value.data;
                let dx = acc(&mut grads, *x, xv.len());
                for i in 0..xv.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &graph.nodes[*x].value.data;
                let dx = acc(&mut grads, *x, xv.len());
                for i in 0..xv.len() {
                    dx[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
            Op::Tanh { x } => {
                let y = &node.value.data;
                let dx = acc(&mut grads, *x, y.len());
                for i in 0..y.len() {
                    dx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value.data;
                let dx = acc(&mut grads, *x, y.len());
                for i in 0..y.len() {
                    dx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Scale { x, s } => {
                let dx = acc(&mut grads, *x, g.len());
                dx.iter_mut().zip(&g).for_each(|(d, v)| *d += s * v);
            }
            Op::Add { a, b } => {
                acc(&mut grads, *a, g.len())
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(d, v)| *d += v);
                acc(&mut grads, *b, g.len())
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(d, v)| *d += v);
            }
            Op::Dense { x, weight, bias } => {
                let xv = &graph.nodes[*x].value;
                let (fo, fi) = (blocks[*weight].shape[0], blocks[*weight].shape[1]);
                let n = xv.n;
                gemm(
                    fo,
                    n,
                    fi,
                    &g,
                    (1, fo),
                    &xv.data,
                    (fi, 1),
                    1.0,
                    &mut pgrad[*weight],
                    (fi, 1),
                );
                for b in 0..n {
                    for o in 0..fo {
                        pgrad[*bias][o] += g[b * fo + o];
                    }
                }
                let dx = acc(&mut grads, *x, xv.data.len());
                gemm(
                    n,
                    fo,
                    fi,
                    &g,
                    (fo, 1),
                    &blocks[*weight].data,
                    (fi, 1),
                    1.0,
                    dx,
                    (fi, 1),
                );
            }
            Op::Upsample { x, factor } => {
                let xv = &graph.nodes[*x].value;
                let [n, c, h, w] = xv.shape();
                let (ty, tx) = (upsample_taps(h, *factor), upsample_taps(w, *factor));
                let wo = w * factor;
                let dx = acc(&mut grads, *x, xv.data.len());
                for b in 0..n {
                    for ch in 0..c {
                        let at = (b * c + ch) * h * w;
                        let src = node.value.plane(b, ch).len();
                        let gp = &g[(b * c + ch) * src..(b * c + ch + 1) * src];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let v = gp[oy * wo + ox];
                                dx[at + y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                                dx[at + y0 * w + x1] += v * (1.0 - fy) * fx;
                                dx[at + y1 * w + x0] += v * fy * (1.0 - fx);
                                dx[at + y1 * w + x1] += v * fy * fx;
                            }
                        }
                    }
                }
            }
        }
    }

    if pgrad.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite gradient".into(),
            last_good: None,
        });
    }
    let inputs = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::Input))
        .map(|(i, n)| {
            let [a, b, c, d] = n.value.shape();
            let data = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; n.value.data.len()]);
            Tensor {
                n: a,
                c: b,
                h: c,
                w: d,
                data,
            }
        })
        .collect();
    Ok(Backward {
        params: pgrad,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-amp..amp)).collect()
    }

    /// A tiny net touching every op: conv, bn, relu, conv(stride 2), leaky,
    /// upsample, add, tanh, scale, dense, sigmoid.
    fn tiny(blocks: &[ParamBlock], stats: &[RunningStats], x: &Tensor, mode: Mode) -> Graph {
        let mut r = Recorder::new(7, mode, blocks, stats);
        let i = r.input(x.clone());
        let c1 = r.conv2d(i, 0, None, 1, 1);
        let b1 = r.batch_norm(c1, 1, 2, 0);
        let a1 = r.relu(b1);
        let c2 = r.conv2d(a1, 3, Some(4), 2, 1);
        let a2 = r.leaky_relu(c2, 0.2);
        let u = r.upsample(a2, 2);
        let s = r.add(u, b1);
        let t = r.tanh(s);
        let t = r.scale(t, 1.5);
        let d = r.dense(t, 5, 6);
        r.sigmoid(d);
        r.finish().unwrap()
    }

    fn tiny_params(rng: &mut ChaCha8Rng) -> Vec<ParamBlock> {
        vec![
            ParamBlock::new("c1", vec![2, 1, 3, 3], rand_vec(rng, 18, 0.6)),
            ParamBlock::new(
                "g1",
                vec![2],
                rand_vec(rng, 2, 1.0).iter().map(|v| v + 1.5).collect(),
            ),
            ParamBlock::new("b1", vec![2], rand_vec(rng, 2, 0.3)),
            ParamBlock::new("c2", vec![2, 2, 3, 3], rand_vec(rng, 36, 0.5)),
            ParamBlock::new("c2b", vec![2], rand_vec(rng, 2, 0.3)),
            ParamBlock::new("d", vec![3, 2 * 8 * 8], rand_vec(rng, 3 * 128, 0.2)),
            ParamBlock::new("db", vec![3], rand_vec(rng, 3, 0.2)),
        ]
    }

    #[test]
    fn tiny_network_parameter_and_input_gradients() {
        let stats = vec![RunningStats {
            mean: vec![0.1, -0.2],
            var: vec![0.8, 1.3],
        }];
        for (seed, mode) in
            (0..6u64).map(|s| (s, if s % 2 == 0 { Mode::Train } else { Mode::Eval }))
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks = tiny_params(&mut rng);
            let x = Tensor::new(2, 1, 8, 8, rand_vec(&mut rng, 128, 1.0)).unwrap();
            let weights = rand_vec(&mut rng, 6, 1.0);
            let loss = |b: &[ParamBlock], x: &Tensor| -> f64 {
                let g = tiny(b, &stats, x, mode);
                g.output()
                    .data
                    .iter()
                    .zip(&weights)
                    .map(|(a, w)| a * w)
                    .sum()
            };
            let graph = tiny(&blocks, &stats, &x, mode);
            let up = Tensor::new(2, 3, 1, 1, weights.clone()).unwrap();
            let back = backward(&graph, 7, &blocks, &up).unwrap();
            for bi in 0..blocks.len() {
                let numeric = central_difference(&blocks[bi].data, 1e-4, |v| {
                    let mut b = blocks.clone();
                    b[bi].data.copy_from_slice(v);
                    loss(&b, &x)
                });
                let err = max_relative_error(&back.params[bi], &numeric);
                assert!(err < 1e-3, "block {} mode {mode:?}: {err}", blocks[bi].name);
            }
            let numeric = central_difference(x.data(), 1e-4, |v| {
                loss(&blocks, &Tensor::new(2, 1, 8, 8, v.to_vec()).unwrap())
            });
            assert!(max_relative_error(back.inputs[0].data(), &numeric) < 1e-3);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blocks = tiny_params(&mut rng);
        let stats = vec![RunningStats::new(2)];
        let x = Tensor::new(1, 1, 8, 8, rand_vec(&mut rng, 64, 1.0)).unwrap();
        let graph = tiny(&blocks, &stats, &x, Mode::Train);
        let back = backward(&graph, 7, &blocks, &Tensor::zeros(1, 3, 1, 1)).unwrap();
        assert!(back.params.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_fingerprint_or_shape_is_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blocks = tiny_params(&mut rng);
        let stats = vec![RunningStats::new(2)];
        let x = Tensor::new(1, 1, 8, 8, rand_vec(&mut rng, 64, 1.0)).unwrap();
        let graph = tiny(&blocks, &stats, &x, Mode::Train);
        let up = Tensor::zeros(1, 3, 1, 1);
        assert!(matches!(
            backward(&graph, 8, &blocks, &up),
            Err(Error::DetachedGraph(_))
        ));
        assert!(matches!(
            backward(&graph, 7, &blocks, &Tensor::zeros(1, 2, 1, 1)),
            Err(Error::DetachedGraph(_))
        ));
    }

    #[test]
    fn batch_norm_scale_gradient_two_pixels() {
        // One channel holding two pixels a, b: xhat = ±d / sqrt(d² + eps)
        // with d = (a - b) / 2, so dL/dgamma = (u0 - u1) · d / sqrt(d² + eps).
        let (a, b) = (0.9, -0.3);
        let blocks = vec![
            ParamBlock::new("g", vec![1], vec![1.0]),
            ParamBlock::new("b", vec![1], vec![0.0]),
        ];
        let stats = vec![RunningStats::new(1)];
        let mut r = Recorder::new(1, Mode::Train, &blocks, &stats);
        let i = r.input(Tensor::new(1, 1, 1, 2, vec![a, b]).unwrap());
        r.batch_norm(i, 0, 1, 0);
        let graph = r.finish().unwrap();
        let (u0, u1) = (0.7, -1.1);
        let back = backward(
            &graph,
            1,
            &blocks,
            &Tensor::new(1, 1, 1, 2, vec![u0, u1]).unwrap(),
        )
        .unwrap();
        let d: f64 = (a - b) / 2.0;
        let expected = (u0 - u1) * d / (d * d + BN_EPS).sqrt();
        assert!((back.params[0][0] - expected).abs() < 1e-12);
        assert!((back.params[1][0] - (u0 + u1)).abs() < 1e-12);
        // Unbiased running-variance estimate of two samples.
        assert!((graph.batch_stats()[0].var[0] - 2.0 * d * d).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let blocks = vec![ParamBlock::new(
            "c",
            vec![3, 2, 3, 3],
            rand_vec(&mut rng, 54, 1.0),
        )];
        let x = Tensor::new(1, 2, 5, 6, rand_vec(&mut rng, 60, 1.0)).unwrap();
        let mut r = Recorder::new(0, Mode::Eval, &blocks, &[]);
        let i = r.input(x.clone());
        r.conv2d(i, 0, None, 2, 1);
        let g = r.finish().unwrap();
        let out = g.output();
        assert_eq!(out.shape(), [1, 3, 3, 3]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                    s += blocks[0].data[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.plane(0, ci)[iy as usize * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.plane(0, co)[oy * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_activation_is_divergence() {
        let blocks = vec![ParamBlock::new("c", vec![1, 1, 1, 1], vec![f64::INFINITY])];
        let mut r = Recorder::new(0, Mode::Eval, &blocks, &[]);
        let i = r.input(Tensor::new(1, 1, 2, 2, vec![1.0; 4]).unwrap());
        r.conv2d(i, 0, None, 1, 0);
        assert!(matches!(r.finish(), Err(Error::Divergence { .. })));
    }
}
