//! Differentiable primitives recorded on a [`Graph`].

use super::graph::{Backward, Graph, Var};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups,
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.padding - kernel) / spec.stride + 1
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn of(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Self {
        assert_eq!(x.rank(), 4, "conv2d expects NCHW input");
        assert_eq!(w.rank(), 4, "conv2d expects OIHW weights");
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        assert!(c % spec.groups == 0 && o % spec.groups == 0);
        assert_eq!(cg, c / spec.groups, "conv2d weight/input channel mismatch");
        ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho: conv_output_size(h, kh, spec),
            wo: conv_output_size(wd, kw, spec),
            spec,
        }
    }

    fn cin_g(&self) -> usize {
        self.c / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.o / self.spec.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

fn im2col(src: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, s, pad) = (g.h as isize, g.w as isize, g.spec.stride as isize, g.spec.padding as isize);
    let p = g.p();
    for c in 0..g.cin_g() {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - pad;
                        *d = if ix < 0 || ix >= w { 0.0 } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let (h, w, s, pad) = (g.h as isize, g.w as isize, g.spec.stride as isize, g.spec.padding as isize);
    let p = g.p();
    for c in 0..g.cin_g() {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvBackward {
    spec: ConvSpec,
    has_bias: bool,
}

impl Backward for ConvBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = ConvGeom::of(x, w, self.spec);
        let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut cols = vec![0.0; k * p];
        let mut dcols = vec![0.0; k * p];
        let in_plane = g.h * g.w;
        for n in 0..g.n {
            for gi in 0..g.spec.groups {
                let x_off = (n * g.c + gi * cin_g) * in_plane;
                let y_off = (n * g.o + gi * cout_g) * p;
                let dy = &grad.data()[y_off..y_off + cout_g * p];
                let wg = &w.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
                if let Some(dw) = dw.as_mut() {
                    let src: &[f64] = if g.is_pointwise() {
                        &x.data()[x_off..x_off + k * p]
                    } else {
                        im2col(&x.data()[x_off..x_off + cin_g * in_plane], &g, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw.data_mut()[gi * cout_g * k..(gi + 1) * cout_g * k];
                    gemm(cout_g, p, k, dy, false, src, true, dwg, 1.0);
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[x_off..x_off + cin_g * in_plane];
                    if g.is_pointwise() {
                        gemm(k, cout_g, p, wg, true, dy, false, dst, 1.0);
                    } else {
                        gemm(k, cout_g, p, wg, true, dy, false, &mut dcols, 0.0);
                        col2im(&dcols, &g, dst);
                    }
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; g.o];
                for n in 0..g.n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let off = (n * g.o + o) * p;
                        *acc += grad.data()[off..off + p].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![g.o], db)
            }));
        }
        out
    }
}

/// Row-wise matrix product `x · wᵀ` over the last axis of `x`.
fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (o, i) = (w.dim(0), w.dim(1));
    assert_eq!(*x.shape().last().unwrap(), i, "linear input width mismatch");
    let m = x.len() / i;
    let mut out = vec![0.0; m * o];
    if let Some(b) = b {
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(m, i, o, x.data(), false, w.data(), true, &mut out, if b.is_some() { 1.0 } else { 0.0 });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    Tensor::new(shape, out)
}

struct LinearBackward {
    has_bias: bool,
}

impl Backward for LinearBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (o, i) = (w.dim(0), w.dim(1));
        let m = x.len() / i;
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; m * i];
            gemm(m, o, i, grad.data(), false, w.data(), false, &mut d, 0.0);
            Tensor::new(x.shape().to_vec(), d)
        });
        let dw = needs[1].then(|| {
            let mut d = vec![0.0; o * i];
            gemm(o, m, i, grad.data(), true, x.data(), false, &mut d, 0.0);
            Tensor::new(vec![o, i], d)
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; o];
                for row in grad.data().chunks(o) {
                    for (a, g) in db.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                Tensor::new(vec![o], db)
            }));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Relu6,
    Gelu,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Relu6 => x.clamp(0.0, 6.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => f64::from(x > 0.0),
            Unary::Relu6 => f64::from(x > 0.0 && x < 6.0),
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
        }
    }
}

struct UnaryBackward(Unary);

impl Backward for UnaryBackward {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(out.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        vec![Some(Tensor::new(out.shape().to_vec(), d))]
    }
}

struct AddBackward;

impl Backward for AddBackward {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

/// `x [.., C] * gamma [C]` or `x [.., C] + bias [C]` style broadcasts over
/// the trailing axes. `mul` selects multiplication.
struct TrailingBroadcastBackward {
    mul: bool,
}

impl Backward for TrailingBroadcastBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, p) = (inputs[0], inputs[1]);
        let width = p.len();
        let dx = needs[0].then(|| {
            if self.mul {
                let d = grad
                    .data()
                    .chunks(width)
                    .flat_map(|row| row.iter().zip(p.data()).map(|(g, a)| g * a))
                    .collect();
                Tensor::new(x.shape().to_vec(), d)
            } else {
                grad.clone()
            }
        });
        let dp = needs[1].then(|| {
            let mut d = vec![0.0; width];
            for (gr, xr) in grad.data().chunks(width).zip(x.data().chunks(width)) {
                for j in 0..width {
                    d[j] += if self.mul { gr[j] * xr[j] } else { gr[j] };
                }
            }
            Tensor::new(p.shape().to_vec(), d)
        });
        vec![dx, dp]
    }
}

struct ReshapeBackward;

impl Backward for ReshapeBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshape(inputs[0].shape()))]
    }
}

struct ConcatBackward;

impl Backward for ConcatBackward {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let n = out.dim(0);
        let total = out.dim(1);
        let mut offset = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(x, &need)| {
                let width = x.dim(1);
                let res = need.then(|| {
                    let mut d = Vec::with_capacity(n * width);
                    for row in 0..n {
                        let start = row * total + offset;
                        d.extend_from_slice(&grad.data()[start..start + width]);
                    }
                    Tensor::new(vec![n, width], d)
                });
                offset += width;
                res
            })
            .collect()
    }
}

struct AvgPoolBackward {
    k: usize,
}

impl Backward for AvgPoolBackward {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let (ho, wo) = (out.dim(2), out.dim(3));
        let planes = x.dim(0) * x.dim(1);
        let scale = 1.0 / (self.k * self.k) as f64;
        let mut d = vec![0.0; x.len()];
        for pl in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad.data()[(pl * ho + oy) * wo + ox] * scale;
                    for dy in 0..self.k {
                        let row = (pl * h + oy * self.k + dy) * w + ox * self.k;
                        for v in &mut d[row..row + self.k] {
                            *v += g;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d))]
    }
}

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let mut d = vec![0.0; inputs[0].len()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d))]
    }
}

struct GlobalAvgPoolBackward;

impl Backward for GlobalAvgPoolBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let hw = x.dim(2) * x.dim(3);
        let scale = 1.0 / hw as f64;
        let d = grad
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), d))]
    }
}

/// Channel layout helper: channel is axis 1, everything after it is spatial.
fn channel_layout(x: &Tensor) -> (usize, usize, usize) {
    let n = x.dim(0);
    let c = x.dim(1);
    let spatial = x.len() / (n * c);
    (n, c, spatial)
}

struct BatchNormTrainBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNormTrainBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, sp) = channel_layout(x);
        let m = (n * sp) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    sum_dy[ch] += grad.data()[i];
                    sum_dy_xhat[ch] += grad.data()[i] * self.xhat[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * sp;
                    let k = gamma.data()[ch] * self.inv_std[ch] / m;
                    for i in off..off + sp {
                        d[i] = k * (m * grad.data()[i] - sum_dy[ch] - self.xhat[i] * sum_dy_xhat[ch]);
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), d)
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new(vec![c], sum_dy_xhat)),
            needs[2].then(|| Tensor::new(vec![c], sum_dy)),
        ]
    }
}

struct BatchNormEvalBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNormEvalBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, sp) = channel_layout(x);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                let k = gamma.data()[ch] * self.inv_std[ch];
                for i in off..off + sp {
                    let g = grad.data()[i];
                    dgamma[ch] += g * self.xhat[i];
                    dbeta[ch] += g;
                    dx[i] = g * k;
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::new(vec![c], dgamma)),
            needs[2].then(|| Tensor::new(vec![c], dbeta)),
        ]
    }
}

/// Batch statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Unbiased variance estimate (biased when the batch has one element).
    pub var: Tensor,
}

struct LayerNormBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for LayerNormBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.len();
        let rows = x.len() / c;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; x.len()];
        for r in 0..rows {
            let off = r * c;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for j in 0..c {
                let g = grad.data()[off + j];
                let xh = self.xhat[off + j];
                dgamma[j] += g * xh;
                dbeta[j] += g;
                let dxh = g * gamma.data()[j];
                s1 += dxh;
                s2 += dxh * xh;
            }
            let cf = c as f64;
            for j in 0..c {
                let dxh = grad.data()[off + j] * gamma.data()[j];
                dx[off + j] = self.inv_std[r] / cf * (cf * dxh - s1 - self.xhat[off + j] * s2);
            }
        }
        vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::new(vec![c], dgamma)),
            needs[2].then(|| Tensor::new(vec![c], dbeta)),
        ]
    }
}

struct MaskBackward {
    mask: Vec<f64>,
}

impl Backward for MaskBackward {
    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = grad.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        vec![Some(Tensor::new(out.shape().to_vec(), d))]
    }
}

struct NchwToTokensBackward;

impl Backward for NchwToTokensBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, c, hw) = channel_layout(x);
        let mut d = vec![0.0; x.len()];
        for b in 0..n {
            for t in 0..hw {
                for ch in 0..c {
                    d[(b * c + ch) * hw + t] = grad.data()[(b * hw + t) * c + ch];
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d))]
    }
}

struct PrependTokenBackward;

impl Backward for PrependTokenBackward {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, t, c) = (x.dim(0), x.dim(1), x.dim(2));
        let dx = needs[0].then(|| {
            let mut d = Vec::with_capacity(x.len());
            for b in 0..n {
                let start = (b * (t + 1) + 1) * c;
                d.extend_from_slice(&grad.data()[start..start + t * c]);
            }
            Tensor::new(x.shape().to_vec(), d)
        });
        let dcls = needs[1].then(|| {
            let mut d = vec![0.0; c];
            for b in 0..n {
                let start = b * (t + 1) * c;
                for j in 0..c {
                    d[j] += grad.data()[start + j];
                }
            }
            Tensor::new(vec![c], d)
        });
        debug_assert_eq!(out.dim(1), t + 1);
        vec![dx, dcls]
    }
}

struct MeanTokensBackward {
    skip: usize,
}

impl Backward for MeanTokensBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, t, c) = (x.dim(0), x.dim(1), x.dim(2));
        let scale = 1.0 / (t - self.skip) as f64;
        let mut d = vec![0.0; x.len()];
        for b in 0..n {
            for tok in self.skip..t {
                for j in 0..c {
                    d[(b * t + tok) * c + j] = grad.data()[b * c + j] * scale;
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), d))]
    }
}

struct AttentionBackward {
    heads: usize,
    /// Softmax probabilities, `[n, heads, t, t]`.
    probs: Vec<f64>,
}

fn head_slice(x: &Tensor, b: usize, h: usize, hd: usize) -> Vec<f64> {
    let (t, c) = (x.dim(1), x.dim(2));
    let mut out = Vec::with_capacity(t * hd);
    for tok in 0..t {
        let start = (b * t + tok) * c + h * hd;
        out.extend_from_slice(&x.data()[start..start + hd]);
    }
    out
}

fn head_scatter(dst: &mut [f64], part: &[f64], b: usize, h: usize, t: usize, c: usize, hd: usize) {
    for tok in 0..t {
        let start = (b * t + tok) * c + h * hd;
        for j in 0..hd {
            dst[start + j] += part[tok * hd + j];
        }
    }
}

impl Backward for AttentionBackward {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, t, c) = (q.dim(0), q.dim(1), q.dim(2));
        let hd = c / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dp = vec![0.0; t * t];
        let mut part = vec![0.0; t * hd];
        for b in 0..n {
            for h in 0..self.heads {
                let p = &self.probs[((b * self.heads + h) * t) * t..((b * self.heads + h) * t + t) * t];
                let qh = head_slice(q, b, h, hd);
                let kh = head_slice(k, b, h, hd);
                let vh = head_slice(v, b, h, hd);
                let doh = head_slice(grad, b, h, hd);
                // dV = Pᵀ dO
                gemm(t, t, hd, p, true, &doh, false, &mut part, 0.0);
                head_scatter(&mut dv, &part, b, h, t, c, hd);
                // dP = dO Vᵀ, then softmax backward into dS (in place).
                gemm(t, hd, t, &doh, false, &vh, true, &mut dp, 0.0);
                for r in 0..t {
                    let row_p = &p[r * t..(r + 1) * t];
                    let row_d = &mut dp[r * t..(r + 1) * t];
                    let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pp) in row_d.iter_mut().zip(row_p) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                gemm(t, t, hd, &dp, false, &kh, false, &mut part, 0.0);
                head_scatter(&mut dq, &part, b, h, t, c, hd);
                gemm(t, t, hd, &dp, true, &qh, false, &mut part, 0.0);
                head_scatter(&mut dk, &part, b, h, t, c, hd);
            }
        }
        let shape = q.shape().to_vec();
        vec![
            needs[0].then(|| Tensor::new(shape.clone(), dq)),
            needs[1].then(|| Tensor::new(shape.clone(), dk)),
            needs[2].then(|| Tensor::new(shape, dv)),
        ]
    }
}

impl Graph {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let g = ConvGeom::of(xv, wv, spec);
        let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
        let mut out = vec![0.0; g.n * g.o * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut cols = vec![0.0; k * p];
        let in_plane = g.h * g.w;
        for n in 0..g.n {
            for gi in 0..spec.groups {
                let x_off = (n * g.c + gi * cin_g) * in_plane;
                let y_off = (n * g.o + gi * cout_g) * p;
                let dst = &mut out[y_off..y_off + cout_g * p];
                let beta = if let Some(bias) = &bias {
                    for (oc, row) in dst.chunks_mut(p).enumerate() {
                        row.fill(bias[gi * cout_g + oc]);
                    }
                    1.0
                } else {
                    0.0
                };
                let wg = &wv.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
                if g.is_pointwise() {
                    gemm(cout_g, k, p, wg, false, &xv.data()[x_off..x_off + k * p], false, dst, beta);
                } else {
                    im2col(&xv.data()[x_off..x_off + cin_g * in_plane], &g, &mut cols);
                    gemm(cout_g, k, p, wg, false, &cols, false, dst, beta);
                }
            }
        }
        let value = Tensor::new(vec![g.n, g.o, g.ho, g.wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            inputs,
            Box::new(ConvBackward {
                spec,
                has_bias: b.is_some(),
            }),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            inputs,
            Box::new(LinearBackward {
                has_bias: b.is_some(),
            }),
        )
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, vec![x], Box::new(UnaryBackward(kind)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, vec![a, b], Box::new(AddBackward))
    }

    /// `x [.., C] * gamma [C]`.
    pub fn mul_trailing(&mut self, x: Var, gamma: Var) -> Var {
        let p = self.value(gamma).data().to_vec();
        let d = self
            .value(x)
            .data()
            .chunks(p.len())
            .flat_map(|row| row.iter().zip(&p).map(|(a, b)| a * b).collect::<Vec<_>>())
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), d);
        self.push(value, vec![x, gamma], Box::new(TrailingBroadcastBackward { mul: true }))
    }

    /// `x [N, ..] + p [..]`, broadcasting `p` over the leading axis.
    pub fn add_trailing(&mut self, x: Var, p: Var) -> Var {
        let pv = self.value(p).data().to_vec();
        let d = self
            .value(x)
            .data()
            .chunks(pv.len())
            .flat_map(|row| row.iter().zip(&pv).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), d);
        self.push(value, vec![x, p], Box::new(TrailingBroadcastBackward { mul: false }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, vec![x], Box::new(ReshapeBackward))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).dim(0);
        let rest = self.value(x).len() / n;
        self.reshape(x, &[n, rest])
    }

    /// Concatenates `[N, Fi]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rank(), 2, "concat expects [N, F] tensors");
                assert_eq!(v.dim(0), n, "concat batch mismatch");
                v.dim(1)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                d.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![n, total], d), parts.to_vec(), Box::new(ConcatBackward))
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let value = avg_pool_values(self.value(x), k);
        self.push(value, vec![x], Box::new(AvgPoolBackward { k }))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let spec = ConvSpec::new(stride, padding);
        let (ho, wo) = (conv_output_size(h, k, spec), conv_output_size(w, k, spec));
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for pl in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (pl * h + iy as usize) * w + ix as usize;
                            if xv.data()[idx] > best {
                                best = xv.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out);
        self.push(value, vec![x], Box::new(MaxPoolBackward { argmax }))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.dim(2) * xv.dim(3);
        let d = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![n, c], d), vec![x], Box::new(GlobalAvgPoolBackward))
    }

    /// Batch normalization over every axis except the channel axis (1).
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update running estimates; in eval mode `running` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        train: bool,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (n, c, sp) = channel_layout(xv);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let count = n * sp;
        let (mean, var_biased, stats) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * sp;
                    mean[ch] += xv.data()[off..off + sp].iter().sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * sp;
                    var[ch] += xv.data()[off..off + sp]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            let biased: Vec<f64> = var.iter().map(|v| v / count as f64).collect();
            let unbiased: Vec<f64> = if count > 1 {
                var.iter().map(|v| v / (count - 1) as f64).collect()
            } else {
                biased.clone()
            };
            let stats = BatchStats {
                mean: Tensor::new(vec![c], mean.clone()),
                var: Tensor::new(vec![c], unbiased),
            };
            (mean, biased, Some(stats))
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec(), None)
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                for i in off..off + sp {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        let op: Box<dyn Backward> = if train {
            Box::new(BatchNormTrainBackward { xhat, inv_std })
        } else {
            Box::new(BatchNormEvalBackward { xhat, inv_std })
        };
        (self.push(value, vec![x, gamma, beta], op), stats)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let c = gv.len();
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            inv_std[r] = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * inv_std[r];
                xhat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        self.push(value, vec![x, gamma, beta], Box::new(LayerNormBackward { xhat, inv_std }))
    }

    /// Elementwise multiplication by a fixed mask (inverted dropout).
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let d = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), d);
        self.push(value, vec![x], Box::new(MaskBackward { mask }))
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, hw) = channel_layout(xv);
        let mut d = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                for t in 0..hw {
                    d[(b * hw + t) * c + ch] = xv.data()[(b * c + ch) * hw + t];
                }
            }
        }
        self.push(Tensor::new(vec![n, hw, c], d), vec![x], Box::new(NchwToTokensBackward))
    }

    /// `[N, T, C]` with `token [C]` prepended to every sequence.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Var {
        let xv = self.value(x);
        let (n, t, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let tv = self.value(token).data();
        let mut d = Vec::with_capacity(n * (t + 1) * c);
        for b in 0..n {
            d.extend_from_slice(tv);
            d.extend_from_slice(&xv.data()[b * t * c..(b + 1) * t * c]);
        }
        self.push(Tensor::new(vec![n, t + 1, c], d), vec![x, token], Box::new(PrependTokenBackward))
    }

    /// Mean over tokens `skip..T` of `[N, T, C]`.
    pub fn mean_tokens(&mut self, x: Var, skip: usize) -> Var {
        let xv = self.value(x);
        let (n, t, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert!(t > skip);
        let mut d = vec![0.0; n * c];
        for b in 0..n {
            for tok in skip..t {
                for j in 0..c {
                    d[b * c + j] += xv.data()[(b * t + tok) * c + j];
                }
            }
        }
        let scale = 1.0 / (t - skip) as f64;
        d.iter_mut().for_each(|v| *v *= scale);
        self.push(Tensor::new(vec![n, c], d), vec![x], Box::new(MeanTokensBackward { skip }))
    }

    /// Multi-head scaled dot-product attention over `[N, T, C]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, t, c) = (qv.dim(0), qv.dim(1), qv.dim(2));
        assert_eq!(c % heads, 0);
        let hd = c / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; n * heads * t * t];
        let mut out = vec![0.0; qv.len()];
        let mut part = vec![0.0; t * hd];
        for b in 0..n {
            for h in 0..heads {
                let qh = head_slice(qv, b, h, hd);
                let kh = head_slice(kv, b, h, hd);
                let vh = head_slice(vv, b, h, hd);
                let p = &mut probs[((b * heads + h) * t) * t..((b * heads + h) * t + t) * t];
                gemm(t, hd, t, &qh, false, &kh, true, p, 0.0);
                for row in p.chunks_mut(t) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - max).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
                gemm(t, t, hd, p, false, &vh, false, &mut part, 0.0);
                head_scatter(&mut out, &part, b, h, t, c, hd);
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out);
        self.push(value, vec![q, k, v], Box::new(AttentionBackward { heads, probs }))
    }
}

/// Non-overlapping average pooling on a plain tensor.
pub fn avg_pool_values(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for pl in 0..n * c {
        for oy in 0..ho {
            for dy in 0..k {
                let row = &x.data()[(pl * h + oy * k + dy) * w..(pl * h + oy * k + dy + 1) * w];
                let dst = &mut out[(pl * ho + oy) * wo..(pl * ho + oy + 1) * wo];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d += row[ox * k..ox * k + k].iter().sum::<f64>() * scale;
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Row-wise softmax of a `[N, K]` tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let k = x.dim(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    //! Central-difference checks for every primitive, against a scalar
    //! objective `sum(w_i * y_i)` with fixed random weights.
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a graph via `f` on the given leaf values; returns the scalar
    /// objective and the analytic gradient of every leaf.
    fn objective(
        leaves: &[Tensor],
        f: &dyn Fn(&mut Graph, &[Var]) -> Var,
        probe: &Tensor,
    ) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let y = g.value(out);
        assert_eq!(y.len(), probe.len());
        let value: f64 = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let seed = Tensor::new(y.shape().to_vec(), probe.data().to_vec());
        let grads = g.backward(out, seed);
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        (value, gs)
    }

    fn check(leaves: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let out_shape = g.value(out).shape().to_vec();
        let probe = random(&out_shape, &mut rng);
        let (_, analytic) = objective(&leaves, f, &probe);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for idx in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[idx] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[idx] -= h;
                let numeric = (objective(&plus, f, &probe).0 - objective(&minus, f, &probe).0) / (2.0 * h);
                let a = analytic[li].data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "leaf {li} index {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [ConvSpec::new(1, 1), ConvSpec::new(2, 1), ConvSpec::new(1, 0)] {
            let x = random(&[2, 2, 5, 5], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            check(vec![x, w, b], &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec));
        }
    }

    #[test]
    fn pointwise_and_grouped_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 4, 3, 3], &mut rng);
        let w = random(&[3, 4, 1, 1], &mut rng);
        check(vec![x, w], &|g, v| g.conv2d(v[0], v[1], None, ConvSpec::new(1, 0)));
        let x = random(&[1, 4, 4, 4], &mut rng);
        let w = random(&[4, 1, 3, 3], &mut rng);
        check(vec![x, w], &|g, v| g.conv2d(v[0], v[1], None, ConvSpec::grouped(2, 1, 4)));
    }

    #[test]
    fn linear_and_unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[2, 4], &mut rng);
        let b = random(&[2], &mut rng);
        check(vec![x.clone(), w, b], &|g, v| g.linear(v[0], v[1], Some(v[2])));
        for kind in [Unary::Gelu, Unary::Sigmoid, Unary::Relu] {
            check(vec![x.clone()], &move |g, v| g.unary(v[0], kind));
        }
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[4, 3, 2, 2], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let rm = random(&[3], &mut rng);
        let rv = Tensor::full(&[3], 0.7);
        for train in [true, false] {
            let (rm, rv) = (rm.clone(), rv.clone());
            check(vec![x.clone(), gamma.clone(), beta.clone()], &move |g, v| {
                g.batch_norm(v[0], v[1], v[2], (&rm, &rv), train, 1e-5).0
            });
        }
        let x = random(&[2, 3, 5], &mut rng);
        let gamma = random(&[5], &mut rng);
        let beta = random(&[5], &mut rng);
        check(vec![x, gamma, beta], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6));
    }

    #[test]
    fn pooling_and_shape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 2, 4, 4], &mut rng);
        check(vec![x.clone()], &|g, v| g.avg_pool(v[0], 2));
        check(vec![x.clone()], &|g, v| g.max_pool(v[0], 3, 2, 1));
        check(vec![x.clone()], &|g, v| g.global_avg_pool(v[0]));
        check(vec![x.clone()], &|g, v| {
            let t = g.nchw_to_tokens(v[0]);
            g.mean_tokens(t, 1)
        });
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 2], &mut rng);
        check(vec![a, b], &|g, v| g.concat(&[v[0], v[1]]));
        let x = random(&[2, 3, 4], &mut rng);
        let cls = random(&[4], &mut rng);
        let pos = random(&[4, 4], &mut rng);
        let gamma = random(&[4], &mut rng);
        check(vec![x, cls, pos, gamma], &|g, v| {
            let t = g.prepend_token(v[0], v[1]);
            let t = g.add_trailing(t, v[2]);
            g.mul_trailing(t, v[3])
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&[2, 3, 4], &mut rng);
        let k = random(&[2, 3, 4], &mut rng);
        let v = random(&[2, 3, 4], &mut rng);
        check(vec![q, k, v], &|g, x| g.attention(x[0], x[1], x[2], 2));
    }

    #[test]
    fn fault_names_the_scope() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![1e300]));
        let w = g.input(Tensor::new(vec![1, 1], vec![1e300]));
        assert!(g.fault().is_none());
        g.set_scope("stage.fc");
        g.linear(x, w, None);
        assert_eq!(g.fault(), Some("stage.fc"));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -500.0, 0.0, 500.0]);
        let s = softmax_rows(&t);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
