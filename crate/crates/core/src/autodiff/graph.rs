use std::sync::Arc;

use super::tensor::Tensor;
use crate::rendering::RenderTensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
    },
    AvgPool {
        input: Var,
        kh: usize,
        kw: usize,
    },
    Upsample {
        input: Var,
        fh: usize,
        fw: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid {
        input: Var,
    },
    StripePool {
        input: Var,
        parts: usize,
    },
    PartLinear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Render {
        texture: Var,
        rt: Arc<RenderTensor>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    SubConst {
        a: Var,
    },
    MulConst {
        a: Var,
        c: Arc<Vec<f64>>,
    },
    Scale {
        a: Var,
        s: f64,
    },
    AddScalar {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SqNorm {
        a: Var,
    },
    L2Norm {
        a: Var,
    },
    L1Norm {
        a: Var,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as ops are recorded;
/// [`Graph::backward`] walks the tape once in reverse.
///
/// Shape mismatches inside the tape are programming errors and panic;
/// user-facing modules validate shapes before recording.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient data, zeros when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents and strides describe in-bounds views of the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize, out: &mut [f64]) {
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn stripe_bounds(h: usize, parts: usize, k: usize) -> (usize, usize) {
    (k * h / parts, (k + 1) * h / parts)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; gradients are kept only when `requires_grad`.
    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data[0]
    }

    /// Same-padded (odd `k`) or 1×1 stride-1 convolution of a `C × H × W`
    /// input with an `O × C × k × k` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        assert_eq!(xs.len(), 3, "conv input must be C x H x W");
        assert_eq!(ws.len(), 4, "conv weight must be O x C x k x k");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv channel mismatch");
        assert_eq!(ws[3], k);
        assert!(k % 2 == 1, "kernel size must be odd");
        assert_eq!(self.shape(bias), &[o]);
        let pad = k / 2;
        let (oh, ow) = (h, w);
        let x = &self.value(input).data;
        let cols = if k == 1 {
            x.clone()
        } else {
            im2col(x, c, h, w, k, pad, oh, ow)
        };
        let wd = &self.value(weight).data;
        let bd = &self.value(bias).data;
        let mut out = vec![0.0; o * oh * ow];
        for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(bd[oc]);
        }
        let ckk = c * k * k;
        gemm(
            o,
            ckk,
            oh * ow,
            wd,
            (ckk as isize, 1),
            &cols,
            ((oh * ow) as isize, 1),
            1.0,
            &mut out,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            Tensor::new(vec![o, oh, ow], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            needs,
        )
    }

    /// Non-overlapping average pooling by `kh × kw`.
    pub fn avg_pool(&mut self, input: Var, kh: usize, kw: usize) -> Var {
        let s = self.shape(input).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(
            h % kh == 0 && w % kw == 0,
            "pool {}x{} does not divide {}x{}",
            kh,
            kw,
            h,
            w
        );
        let (oh, ow) = (h / kh, w / kw);
        let x = &self.value(input).data;
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (kh * kw) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        let row = (ch * h + oy * kh + dy) * w + ox * kw;
                        acc += x[row..row + kw].iter().sum::<f64>();
                    }
                    out[(ch * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new(vec![c, oh, ow], out), Op::AvgPool { input, kh, kw }, needs)
    }

    /// Nearest-neighbour upsampling by `fh × fw`.
    pub fn upsample(&mut self, input: Var, fh: usize, fw: usize) -> Var {
        let s = self.shape(input).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * fh, w * fw);
        let x = &self.value(input).data;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let src = &x[(ch * h + oy / fh) * w..(ch * h + oy / fh + 1) * w];
                let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / fw];
                }
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Upsample { input, fh, fw }, needs)
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[1..], sb[1..], "concat shape mismatch");
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Concat { a, b }, needs)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let t = self.value(input);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = t.shape.clone();
        let needs = self.needs(input);
        self.push(Tensor::new(shape, data), Op::LeakyRelu { input, slope }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = t.shape.clone();
        let needs = self.needs(input);
        self.push(Tensor::new(shape, data), Op::Sigmoid { input }, needs)
    }

    /// Splits a `C × H × W` map into `parts` horizontal stripes and averages
    /// each, giving `parts × C`. Stripe `k` spans rows `⌊kH/p⌋..⌊(k+1)H/p⌋`.
    pub fn stripe_pool(&mut self, input: Var, parts: usize) -> Var {
        let s = self.shape(input).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(
            parts >= 1 && h >= parts,
            "cannot split {} rows into {} stripes",
            h,
            parts
        );
        let x = &self.value(input).data;
        let mut out = vec![0.0; parts * c];
        for k in 0..parts {
            let (r0, r1) = stripe_bounds(h, parts, k);
            let norm = 1.0 / ((r1 - r0) * w) as f64;
            for ch in 0..c {
                let sum: f64 = x[(ch * h + r0) * w..(ch * h + r1) * w].iter().sum();
                out[k * c + ch] = sum * norm;
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new(vec![parts, c], out), Op::StripePool { input, parts }, needs)
    }

    /// Independent affine map per part: `(p × d_in) → (p × d_out)` with
    /// weight `p × d_out × d_in` and bias `p × d_out`.
    pub fn part_linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let (p, din) = (xs[0], xs[1]);
        assert_eq!(ws[0], p, "part count mismatch");
        assert_eq!(ws[2], din, "part linear input mismatch");
        let dout = ws[1];
        assert_eq!(self.shape(bias), &[p, dout]);
        let (x, wd, bd) = (
            &self.value(input).data,
            &self.value(weight).data,
            &self.value(bias).data,
        );
        let mut out = bd.clone();
        for part in 0..p {
            let xi = &x[part * din..(part + 1) * din];
            for o in 0..dout {
                let row = &wd[(part * dout + o) * din..(part * dout + o + 1) * din];
                out[part * dout + o] += row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            Tensor::new(vec![p, dout], out),
            Op::PartLinear { input, weight, bias },
            needs,
        )
    }

    /// Renders a planar `3 × h_t × w_t` texture over a planar background.
    pub fn render(&mut self, texture: Var, rt: Arc<RenderTensor>, background: &[f64]) -> Var {
        let (ht, wt) = rt.texture_dims();
        let (hy, wy) = rt.image_dims();
        assert_eq!(self.shape(texture), &[3, ht, wt], "texture shape mismatch");
        assert_eq!(background.len(), 3 * hy * wy, "background shape mismatch");
        let mut out = background.to_vec();
        rt.apply_planar(&self.value(texture).data, &mut out);
        let needs = self.needs(texture);
        self.push(Tensor::new(vec![3, hy, wy], out), Op::Render { texture, rt }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, sign: f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + sign * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let op = if sign > 0.0 { Op::Add { a, b } } else { Op::Sub { a, b } };
        self.push(Tensor::new(shape, data), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, -1.0)
    }

    /// `a - c` for a constant `c` of the same length.
    pub fn sub_const(&mut self, a: Var, c: &[f64]) -> Var {
        assert_eq!(self.value(a).len(), c.len(), "sub_const length mismatch");
        let data = self.value(a).data.iter().zip(c).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::SubConst { a }, needs)
    }

    /// Elementwise product with a constant.
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Var {
        assert_eq!(self.value(a).len(), c.len(), "mul_const length mismatch");
        let data = self.value(a).data.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::MulConst { a, c }, needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Scale { a, s }, needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::AddScalar { a }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::Sum { a }, needs)
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().map(|x| x * x).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::SqNorm { a }, needs)
    }

    /// Unsquared Euclidean norm; its gradient at zero is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::L2Norm { a }, needs)
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().map(|x| x.abs()).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::L1Norm { a }, needs)
    }

    /// `Σ_rows Σ_c −target · log softmax(logits)` over a `rows × C` matrix.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Arc<Vec<f64>>) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2, "logits must be rows x classes");
        assert_eq!(target.len(), s[0] * s[1], "target shape mismatch");
        let cols = s[1];
        let l = &self.value(logits).data;
        let mut total = 0.0;
        for (row, q) in l.chunks(cols).zip(target.chunks(cols)) {
            let lse = log_sum_exp(row);
            for (x, t) in row.iter().zip(q) {
                if *t != 0.0 {
                    total -= t * (x - lse);
                }
            }
        }
        let needs = self.needs(logits);
        self.push(Tensor::scalar(total), Op::SoftCrossEntropy { logits, target }, needs)
    }

    /// Gradients of the scalar `root` with respect to every node that needs
    /// them. Leaf gradients are retained; interior ones are released.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => {
                let xs = self.shape(input);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(weight);
                let (o, k) = (ws[0], ws[2]);
                let ckk = c * k * k;
                let hw = h * w;
                let x = &self.value(input).data;
                if self.needs(bias) {
                    let db: Vec<f64> = g.chunks(hw).map(|ch| ch.iter().sum()).collect();
                    accumulate(&mut grads[bias.0], db);
                }
                if self.needs(weight) {
                    let cols = if k == 1 {
                        x.clone()
                    } else {
                        im2col(x, c, h, w, k, pad, h, w)
                    };
                    let mut dw = vec![0.0; o * ckk];
                    // dW = dY · colsᵀ
                    gemm(o, hw, ckk, g, (hw as isize, 1), &cols, (1, hw as isize), 0.0, &mut dw);
                    accumulate(&mut grads[weight.0], dw);
                }
                if self.needs(input) {
                    let wd = &self.value(weight).data;
                    let mut dcols = vec![0.0; ckk * hw];
                    // dcols = Wᵀ · dY
                    gemm(ckk, o, hw, wd, (1, ckk as isize), g, (hw as isize, 1), 0.0, &mut dcols);
                    let dx = if k == 1 {
                        dcols
                    } else {
                        let mut dx = vec![0.0; c * hw];
                        col2im(&dcols, c, h, w, k, pad, h, w, &mut dx);
                        dx
                    };
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::AvgPool { input, kh, kw } => {
                let s = self.shape(input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / kh, w / kw);
                let norm = 1.0 / (kh * kw) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            dx[(ch * h + y) * w + x] = g[(ch * oh + y / kh) * ow + x / kw] * norm;
                        }
                    }
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::Upsample { input, fh, fw } => {
                let s = self.shape(input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * fh, w * fw);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(ch * h + oy / fh) * w + ox / fw] += g[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::Concat { a, b } => {
                let na = self.value(a).len();
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g[..na].to_vec());
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], g[na..].to_vec());
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.value(input).data;
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                accumulate(&mut grads[input.0], dx);
            }
            Op::Sigmoid { input } => {
                let dx = out.data.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                accumulate(&mut grads[input.0], dx);
            }
            Op::StripePool { input, parts } => {
                let s = self.shape(input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for k in 0..parts {
                    let (r0, r1) = stripe_bounds(h, parts, k);
                    let norm = 1.0 / ((r1 - r0) * w) as f64;
                    for ch in 0..c {
                        let v = g[k * c + ch] * norm;
                        dx[(ch * h + r0) * w..(ch * h + r1) * w].fill(v);
                    }
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::PartLinear { input, weight, bias } => {
                let xs = self.shape(input);
                let (p, din) = (xs[0], xs[1]);
                let dout = self.shape(weight)[1];
                let x = &self.value(input).data;
                let wd = &self.value(weight).data;
                if self.needs(bias) {
                    accumulate(&mut grads[bias.0], g.to_vec());
                }
                if self.needs(weight) {
                    let mut dw = vec![0.0; p * dout * din];
                    for part in 0..p {
                        for o in 0..dout {
                            let gv = g[part * dout + o];
                            let row = &mut dw[(part * dout + o) * din..(part * dout + o + 1) * din];
                            for (d, xv) in row.iter_mut().zip(&x[part * din..(part + 1) * din]) {
                                *d = gv * xv;
                            }
                        }
                    }
                    accumulate(&mut grads[weight.0], dw);
                }
                if self.needs(input) {
                    let mut dx = vec![0.0; p * din];
                    for part in 0..p {
                        for o in 0..dout {
                            let gv = g[part * dout + o];
                            let row = &wd[(part * dout + o) * din..(part * dout + o + 1) * din];
                            for (d, wv) in dx[part * din..(part + 1) * din].iter_mut().zip(row) {
                                *d += gv * wv;
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Render { texture, ref rt } => {
                let mut dt = vec![0.0; self.value(texture).len()];
                rt.transpose_planar(g, &mut dt);
                accumulate(&mut grads[texture.0], dt);
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Add { .. }) { 1.0 } else { -1.0 };
                if self.needs(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| sign * v).collect());
                }
            }
            Op::SubConst { a } | Op::AddScalar { a } => {
                accumulate(&mut grads[a.0], g.to_vec());
            }
            Op::MulConst { a, ref c } => {
                accumulate(&mut grads[a.0], g.iter().zip(c.iter()).map(|(x, y)| x * y).collect());
            }
            Op::Scale { a, s } => {
                accumulate(&mut grads[a.0], g.iter().map(|v| v * s).collect());
            }
            Op::Sum { a } => {
                accumulate(&mut grads[a.0], vec![g[0]; self.value(a).len()]);
            }
            Op::SqNorm { a } => {
                let x = &self.value(a).data;
                accumulate(&mut grads[a.0], x.iter().map(|v| 2.0 * v * g[0]).collect());
            }
            Op::L2Norm { a } => {
                let x = &self.value(a).data;
                let norm = out.data[0];
                let dx = if norm > 0.0 {
                    x.iter().map(|v| v / norm * g[0]).collect()
                } else {
                    vec![0.0; x.len()]
                };
                accumulate(&mut grads[a.0], dx);
            }
            Op::L1Norm { a } => {
                let x = &self.value(a).data;
                let dx = x
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            g[0]
                        } else if v < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[a.0], dx);
            }
            Op::SoftCrossEntropy { logits, ref target } => {
                let cols = self.shape(logits)[1];
                let l = &self.value(logits).data;
                let mut dx = vec![0.0; l.len()];
                for ((row, q), d) in l.chunks(cols).zip(target.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let lse = log_sum_exp(row);
                    let mass: f64 = q.iter().sum();
                    for ((x, t), dv) in row.iter().zip(q).zip(d.iter_mut()) {
                        *dv = g[0] * ((x - lse).exp() * mass - t);
                    }
                }
                accumulate(&mut grads[logits.0], dx);
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| (x - lse).exp()).collect()
}
