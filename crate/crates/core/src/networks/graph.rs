//! Reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse
//! and accumulates gradients. Nodes whose inputs are all constants are
//! skipped during the backward walk.

use super::tensor::{matmul, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, shape: ConvShape },
    Linear { x: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: T },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    PixelShuffle { x: Var, r: usize },
    AvgPool2(Var),
    Upsample2(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Tile(Var),
    Clamp01(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Geometry of one convolution.
#[derive(Clone, Copy, Debug)]
struct ConvShape {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Target number of column-matrix entries per tile.
const TILE: usize = 1 << 17;

impl ConvShape {
    fn kk(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Output rows per tile.
    fn rows_per_tile(&self) -> usize {
        (TILE / (self.kk() * self.wo)).clamp(1, self.ho)
    }
}

/// Column matrix `[Ci*k*k, (oy1-oy0)*Wo]` of output rows `oy0..oy1` of one
/// item, with zero padding.
fn im2col<T: Real>(x: &[T], s: &ConvShape, oy0: usize, oy1: usize, out: &mut [T]) {
    let ConvShape { c, h, w, k, stride, pad, wo, .. } = *s;
    let p = (oy1 - oy0) * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[((ci * k + ky) * k + kx) * p..][..p];
                // Output columns whose source column lies inside the image.
                let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
                let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
                for oy in oy0..oy1 {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * stride + kx - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[start + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a column-matrix gradient for rows `oy0..oy1` back onto the input.
fn col2im<T: Real>(cols: &[T], s: &ConvShape, oy0: usize, oy1: usize, dx: &mut [T]) {
    let ConvShape { c, h, w, k, stride, pad, wo, .. } = *s;
    let p = (oy1 - oy0) * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut plane[iy as usize * w + ix as usize];
                            *d = *d + row[(oy - oy0) * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out (Co x Ho*Wo) = W * cols` for one item, tile by tile.
fn conv_item<T: Real>(x: &[T], wt: &[T], s: &ConvShape, buf: &mut Vec<T>, out: &mut [T]) {
    let (kk, p, rows) = (s.kk(), s.ho * s.wo, s.rows_per_tile());
    let mut oy = 0;
    while oy < s.ho {
        let oy1 = (oy + rows).min(s.ho);
        let pc = (oy1 - oy) * s.wo;
        buf.resize(kk * pc, T::zero());
        im2col(x, s, oy, oy1, buf);
        // SAFETY: A is Co x kk, B is kk x pc, C addresses columns
        // oy*wo .. oy*wo+pc of the Co x p output.
        unsafe {
            T::gemm_raw(
                s.co,
                kk,
                pc,
                T::one(),
                wt.as_ptr(),
                kk as isize,
                1,
                buf.as_ptr(),
                pc as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(oy * s.wo),
                p as isize,
                1,
            );
        }
        oy = oy1;
    }
}

/// `dW (Co x kk) += gout * cols^T` for one item.
fn conv_weight_grad_item<T: Real>(x: &[T], gout: &[T], s: &ConvShape, buf: &mut Vec<T>, tr: &mut Vec<T>, dw: &mut [T]) {
    let (kk, p, rows) = (s.kk(), s.ho * s.wo, s.rows_per_tile());
    let mut oy = 0;
    while oy < s.ho {
        let oy1 = (oy + rows).min(s.ho);
        let pc = (oy1 - oy) * s.wo;
        buf.resize(kk * pc, T::zero());
        im2col(x, s, oy, oy1, buf);
        tr.resize(kk * pc, T::zero());
        for r in 0..kk {
            for (j, &v) in buf[r * pc..(r + 1) * pc].iter().enumerate() {
                tr[j * kk + r] = v;
            }
        }
        // SAFETY: A is the Co x pc slice of gout (row stride p), B is the
        // pc x kk transposed tile, C is Co x kk.
        unsafe {
            T::gemm_raw(
                s.co,
                pc,
                kk,
                T::one(),
                gout.as_ptr().add(oy * s.wo),
                p as isize,
                1,
                tr.as_ptr(),
                kk as isize,
                1,
                T::one(),
                dw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        oy = oy1;
    }
}

/// Input gradient of a strided convolution through tiled column gradients.
fn conv_input_grad_item<T: Real>(gout: &[T], wt: &[T], s: &ConvShape, buf: &mut Vec<T>, dx: &mut [T]) {
    let (kk, p, rows) = (s.kk(), s.ho * s.wo, s.rows_per_tile());
    let mut oy = 0;
    while oy < s.ho {
        let oy1 = (oy + rows).min(s.ho);
        let pc = (oy1 - oy) * s.wo;
        buf.resize(kk * pc, T::zero());
        // SAFETY: A is W^T (kk x Co), B is the Co x pc slice of gout.
        unsafe {
            T::gemm_raw(
                kk,
                s.co,
                pc,
                T::one(),
                wt.as_ptr(),
                1,
                kk as isize,
                gout.as_ptr().add(oy * s.wo),
                p as isize,
                1,
                T::zero(),
                buf.as_mut_ptr(),
                pc as isize,
                1,
            );
        }
        col2im(buf, s, oy, oy1, dx);
        oy = oy1;
    }
}

/// `[Co, Ci, k, k]` weights to the rotated, channel-swapped `[Ci, Co, k, k]`
/// weights whose stride-1 convolution of the output gradient is the input
/// gradient.
fn flip_weights<T: Real>(w: &[T], co: usize, ci: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    out[((i * co + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] = w[((o * ci + i) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

fn conv_forward<T: Real>(x: &Tensor<T>, wt: &[T], bias: Option<&[T]>, s: &ConvShape, n: usize) -> Tensor<T> {
    let p = s.ho * s.wo;
    let mut out = Tensor::zeros([n, s.co, s.ho, s.wo]);
    let mut buf = Vec::new();
    let od = out.data_mut();
    for i in 0..n {
        let item = &mut od[i * s.co * p..(i + 1) * s.co * p];
        conv_item(x.item(i), wt, s, &mut buf, item);
        if let Some(bv) = bias {
            for (c, plane) in item.chunks_mut(p).enumerate() {
                for v in plane {
                    *v = *v + bv[c];
                }
            }
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// 2-D convolution with zero padding. `w` is `[Co, Ci, k, k]`, `b` is `[Co, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, c, h, wd] = self.value(x).shape();
        let [co, wci, k, k2] = self.value(w).shape();
        assert!(
            wci == c && k == k2,
            "conv weight {:?} does not fit input {:?}",
            self.value(w).shape(),
            self.value(x).shape()
        );
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv input smaller than kernel");
        let shape = ConvShape {
            c,
            h,
            w: wd,
            co,
            k,
            stride,
            pad,
            ho: conv_out(h, k, stride, pad),
            wo: conv_out(wd, k, stride, pad),
        };
        let out = conv_forward(self.value(x), self.value(w).data(), b.map(|b| self.value(b).data()), &shape, n);
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, shape }, grad)
    }

    /// `x [N, F, 1, 1]` times `w [O, F, 1, 1]` transposed, plus `b [O, 1, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let n = self.value(x).shape()[0];
        let f = self.value(x).item_len();
        let [o, wf, _, _] = self.value(w).shape();
        assert_eq!(wf * self.value(w).shape()[2] * self.value(w).shape()[3], f, "linear weight does not fit input");
        let mut out = Tensor::zeros([n, o, 1, 1]);
        matmul(false, true, n, o, f, self.value(x).data(), self.value(w).data(), out.data_mut(), false);
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(&bv) {
                    *v = *v + bb;
                }
            }
        }
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, grad)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = *v * slope;
            }
        }
        let g = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let mut out = self.value(a).clone();
        for (v, &w) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v = *v * w;
        }
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), g)
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [n, _, h, w] = self.value(parts[0]).shape();
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).item(s));
            }
        }
        let out = Tensor::from_vec([n, c_total, h, w], data).expect("concat size");
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), g)
    }

    /// `[N, C*r*r, H, W]` to `[N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let [n, cr, h, w] = self.value(x).shape();
        assert_eq!(cr % (r * r), 0, "pixel shuffle channel count");
        let c = cr / (r * r);
        let mut out = Tensor::zeros([n, c, h * r, w * r]);
        let src = self.value(x).data();
        let od = out.data_mut();
        for_each_shuffle(n, c, h, w, r, |o, i| od[o] = src[i]);
        let g = self.needs(x);
        self.push(out, Op::PixelShuffle { x, r }, g)
    }

    /// 2x2 average pooling; sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        assert!(h % 2 == 0 && w % 2 == 0, "avg pool needs even sizes");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        for (pi, o) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let plane = &src[pi * h * w..(pi + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    o[y * wo + xx] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let g = self.needs(x);
        self.push(out, Op::AvgPool2(x), g)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let src = self.value(x).data();
        for (pi, o) in out.data_mut().chunks_mut(4 * h * w).enumerate() {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    o[y * 2 * w + xx] = src[pi * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let g = self.needs(x);
        self.push(out, Op::Upsample2(x), g)
    }

    /// Softmax across channels at each pixel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let p = h * w;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for s in 0..n {
            let base = s * c * p;
            for i in 0..p {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(d[base + ch * p + i]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (d[base + ch * p + i] - m).exp();
                    d[base + ch * p + i] = e;
                    z = z + e;
                }
                for ch in 0..c {
                    d[base + ch * p + i] = d[base + ch * p + i] / z;
                }
            }
        }
        let g = self.needs(x);
        self.push(out, Op::Softmax(x), g)
    }

    /// Spatial mean to `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let p = (h * w) as f64;
        let data =
            self.value(x).data().chunks(h * w).map(|pl| T::of(pl.iter().map(|v| v.f64()).sum::<f64>() / p)).collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pool size");
        let g = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x), g)
    }

    /// Broadcasts `[N, C, 1, 1]` to `[N, C, h, w]`.
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Var {
        let [n, c, one, one2] = self.value(x).shape();
        assert!(one == 1 && one2 == 1, "tile expects a [N, C, 1, 1] input");
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::from_vec([n, c, h, w], data).expect("tile size");
        let g = self.needs(x);
        self.push(out, Op::Tile(x), g)
    }

    /// Clamps into `[0, 1]`; the gradient passes only strictly inside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
        let g = self.needs(x);
        self.push(out, Op::Clamp01(x), g)
    }

    /// Reverse pass from explicit output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            last = last.max(v.0);
            accumulate(&mut grads, v, g);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, shape } => {
                let n = gout.shape()[0];
                let (co, p) = (shape.co, shape.ho * shape.wo);
                let gd = gout.data();
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let mut buf = Vec::new();
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.value(*w).shape());
                    let mut tr = Vec::new();
                    for s in 0..n {
                        conv_weight_grad_item(
                            xv.item(s),
                            &gd[s * co * p..(s + 1) * co * p],
                            shape,
                            &mut buf,
                            &mut tr,
                            dw.data_mut(),
                        );
                    }
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(self.value(b).shape());
                    for s in 0..n {
                        for c in 0..co {
                            let sum: T = gd[(s * co + c) * p..(s * co + c + 1) * p].iter().copied().sum();
                            db.data_mut()[c] = db.data_mut()[c] + sum;
                        }
                    }
                    accumulate(grads, b, db);
                }
                if self.needs(*x) {
                    let dx = if shape.stride == 1 && shape.pad < shape.k {
                        let flipped = flip_weights(wv, co, shape.c, shape.k);
                        let pad = shape.k - 1 - shape.pad;
                        let back = ConvShape {
                            c: co,
                            h: shape.ho,
                            w: shape.wo,
                            co: shape.c,
                            k: shape.k,
                            stride: 1,
                            pad,
                            ho: conv_out(shape.ho, shape.k, 1, pad),
                            wo: conv_out(shape.wo, shape.k, 1, pad),
                        };
                        debug_assert_eq!((back.ho, back.wo), (shape.h, shape.w));
                        conv_forward(gout, &flipped, None, &back, n)
                    } else {
                        let mut dx = Tensor::zeros(xv.shape());
                        let l = xv.item_len();
                        for s in 0..n {
                            conv_input_grad_item(
                                &gd[s * co * p..(s + 1) * co * p],
                                wv,
                                shape,
                                &mut buf,
                                &mut dx.data_mut()[s * l..(s + 1) * l],
                            );
                        }
                        dx
                    };
                    accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let n = self.value(*x).shape()[0];
                let f = self.value(*x).item_len();
                let o = self.value(*w).shape()[0];
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(self.value(*w).shape());
                    matmul(true, false, o, f, n, gout.data(), self.value(*x).data(), dw.data_mut(), false);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(self.value(b).shape());
                    for row in gout.data().chunks(o) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(grads, b, db);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    matmul(false, false, n, f, o, gout.data(), self.value(*w).data(), dx.data_mut(), false);
                    accumulate(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = gout.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v < T::zero() {
                        *d = *d * *slope;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, gout.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let mut d = gout.clone();
                        for (g, &o) in d.data_mut().iter_mut().zip(self.value(other).data()) {
                            *g = *g * o;
                        }
                        accumulate(grads, v, d);
                    }
                }
            }
            Op::Concat(parts) => {
                let n = gout.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let l = self.value(p).item_len();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * l);
                        for s in 0..n {
                            d.extend_from_slice(&gout.item(s)[offset..offset + l]);
                        }
                        accumulate(grads, p, Tensor::from_vec(self.value(p).shape(), d).expect("concat grad"));
                    }
                    offset += l;
                }
            }
            Op::PixelShuffle { x, r } => {
                let [n, cr, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([n, cr, h, w]);
                let gd = gout.data();
                let dd = dx.data_mut();
                for_each_shuffle(n, cr / (r * r), h, w, *r, |o, i| dd[i] = gd[o]);
                accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.value(*x).shape();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let quarter = T::of(0.25);
                for (pi, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = gout.data()[pi * ho * wo + (y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let gd = gout.data();
                for (pi, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut plane[(y / 2) * w + xx / 2];
                            *d = *d + gd[pi * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = node.value.shape();
                let p = h * w;
                let y = node.value.data();
                let gd = gout.data();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let dd = dx.data_mut();
                for s in 0..n {
                    let base = s * c * p;
                    for i in 0..p {
                        let dot: T = (0..c).map(|ch| y[base + ch * p + i] * gd[base + ch * p + i]).sum();
                        for ch in 0..c {
                            let k = base + ch * p + i;
                            dd[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let p = shape[2] * shape[3];
                let inv = T::of(1.0 / p as f64);
                let mut data = Vec::with_capacity(shape.iter().product());
                for &g in gout.data() {
                    data.extend(std::iter::repeat_n(g * inv, p));
                }
                accumulate(grads, *x, Tensor::from_vec(shape, data).expect("pool grad"));
            }
            Op::Tile(x) => {
                let shape = self.value(*x).shape();
                let p = gout.shape()[2] * gout.shape()[3];
                let data = gout.data().chunks(p).map(|c| c.iter().copied().sum()).collect();
                accumulate(grads, *x, Tensor::from_vec(shape, data).expect("tile grad"));
            }
            Op::Clamp01(x) => {
                let mut dx = gout.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if !(v > T::zero() && v < T::one()) {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

/// Calls `f(out_index, in_index)` for every element of a pixel shuffle.
fn for_each_shuffle(n: usize, c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h * r, w * r);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let o = ((s * c + ch) * ho + y * r + i) * wo + x * r + j;
                            let inp = ((s * c * r * r + src_c) * h + y) * w + x;
                            f(o, inp);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(r * f(inputs)))/d(inputs) against central differences,
    /// with `r` a fixed random projection of the output.
    fn gradcheck(shapes: &[[usize; 4]], seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&s| rand_tensor(&mut rng, s)).collect();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let proj = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), g.value(out).shape());
        let objective = |ins: &[Tensor<f64>]| {
            let (g, _, out) = eval(ins);
            g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let grads = g.backward(vec![(out, proj.clone())]);
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            let mut probe = inputs.clone();
            let mut num = Vec::new();
            for k in 0..inputs[i].len() {
                let orig = probe[i].data()[k];
                probe[i].data_mut()[k] = orig + h;
                let up = objective(&probe);
                probe[i].data_mut()[k] = orig - h;
                let down = objective(&probe);
                probe[i].data_mut()[k] = orig;
                num.push((up - down) / (2.0 * h));
            }
            let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / norm < 1e-6, "input {i}: relative error {}", diff / norm);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [2, 3, 7, 6]);
        let w = rand_tensor(&mut rng, [4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, [4, 1, 1, 1]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let out = g.conv2d(xv, wv, Some(bv), stride, pad);
            let [_, _, ho, wo] = g.value(out).shape();
            for s in 0..2 {
                for co in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[co];
                            for ci in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                            acc += w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                                * x.data()[((s * 3 + ci) * 7 + iy as usize) * 6 + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = g.value(out).data()[((s * 4 + co) * ho + oy) * wo + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        gradcheck(&[[2, 3, 6, 5], [4, 3, 3, 3], [4, 1, 1, 1]], 1, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
        gradcheck(&[[1, 2, 6, 6], [3, 2, 3, 3]], 2, |g, v| g.conv2d(v[0], v[1], None, 2, 1));
        gradcheck(&[[2, 4, 3, 3], [2, 4, 1, 1], [2, 1, 1, 1]], 3, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0));
    }

    #[test]
    fn linear_gradients() {
        gradcheck(&[[3, 5, 1, 1], [4, 5, 1, 1], [4, 1, 1, 1]], 4, |g, v| g.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn elementwise_gradients() {
        gradcheck(&[[2, 3, 4, 4]], 5, |g, v| g.leaky_relu(v[0], 0.2));
        gradcheck(&[[2, 3, 4, 4], [2, 3, 4, 4]], 6, |g, v| g.add(v[0], v[1]));
        gradcheck(&[[2, 3, 4, 4], [2, 3, 4, 4]], 7, |g, v| g.mul(v[0], v[1]));
        gradcheck(&[[2, 3, 4, 4]], 8, |g, v| g.mul(v[0], v[0]));
        gradcheck(&[[2, 3, 4, 4]], 9, |g, v| g.clamp01(v[0]));
    }

    #[test]
    fn layout_gradients() {
        gradcheck(&[[2, 3, 4, 4], [2, 2, 4, 4]], 10, |g, v| g.concat(&[v[0], v[1]]));
        gradcheck(&[[2, 8, 3, 2]], 11, |g, v| g.pixel_shuffle(v[0], 2));
        gradcheck(&[[2, 3, 4, 6]], 12, |g, v| g.avg_pool2(v[0]));
        gradcheck(&[[2, 3, 3, 2]], 13, |g, v| g.upsample2(v[0]));
        gradcheck(&[[2, 3, 4, 5]], 14, |g, v| g.global_avg_pool(v[0]));
        gradcheck(&[[2, 3, 1, 1]], 15, |g, v| g.tile(v[0], 3, 4));
        gradcheck(&[[2, 4, 3, 3]], 16, |g, v| g.softmax(v[0]));
    }

    #[test]
    fn composite_chain_gradients() {
        gradcheck(&[[1, 2, 4, 4], [4, 2, 3, 3], [2, 1, 1, 1]], 17, |g, v| {
            let c = g.conv2d(v[0], v[1], None, 1, 1);
            let a = g.leaky_relu(c, 0.1);
            let p = g.avg_pool2(a);
            let u = g.upsample2(p);
            let s = g.pixel_shuffle(u, 2);
            let cat = g.concat(&[s, s]);
            g.softmax(cat)
        });
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.pixel_shuffle(x, 2);
        assert_eq!(g.value(y).shape(), [1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let x = g.input(Tensor::full([1, 1, 2, 2], 3.0));
        let y = g.mul(c, x);
        let grads = g.backward(vec![(y, Tensor::full([1, 1, 2, 2], 1.0))]);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.constant(rand_tensor(&mut rng, [2, 5, 3, 3]).cast());
        let y = g.softmax(x);
        let v = g.value(y);
        for s in 0..2 {
            for i in 0..9 {
                let sum: f32 = (0..5).map(|c| v.data()[(s * 5 + c) * 9 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
