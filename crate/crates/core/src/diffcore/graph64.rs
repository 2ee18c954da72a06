//! Forward-only f64 twin of [`Graph`](super::graph::Graph).
//!
//! The finite-difference oracle needs loss evaluations whose rounding noise
//! sits well below the gradients it resolves; f32 forward values cap central
//! differences near 1e-5 absolute, drowning small gradient components. This
//! evaluator runs the same pipeline builders (via [`GraphOps`]) entirely in
//! f64. It has no backward pass: gradients always come from the f32 engine
//! this oracle is checking.

use crate::error::{Error, Result};

use super::graph::GraphOps;
use super::kernels as kn;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId64(usize);

struct Value64 {
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Default)]
pub struct Graph64 {
    nodes: Vec<Value64>,
}

impl Graph64 {
    pub fn new() -> Self {
        Graph64 { nodes: Vec::new() }
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>) -> NodeId64 {
        self.nodes.push(Value64 { dims, data });
        NodeId64(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId64) -> &Value64 {
        &self.nodes[id.0]
    }

    fn unary(&mut self, x: NodeId64, f: impl Fn(f64) -> f64) -> NodeId64 {
        let n = self.node(x);
        let dims = n.dims.clone();
        let data = n.data.iter().map(|&v| f(v)).collect();
        self.push(dims, data)
    }

    fn binary(&mut self, op: &'static str, a: NodeId64, b: NodeId64, f: impl Fn(f64, f64) -> f64) -> Result<NodeId64> {
        if self.node(a).dims != self.node(b).dims {
            return Err(Error::shape(op, format!("dims {:?} vs {:?}", self.node(a).dims, self.node(b).dims)));
        }
        let dims = self.node(a).dims.clone();
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(dims, data))
    }

    fn image_dims(&self, op: &'static str, x: NodeId64) -> Result<(usize, usize, usize)> {
        let d = &self.node(x).dims;
        if d.len() != 3 {
            return Err(Error::shape(op, format!("want rank 3, got {:?}", d)));
        }
        Ok((d[0], d[1], d[2]))
    }
}

impl GraphOps for Graph64 {
    type Id = NodeId64;

    fn leaf(&mut self, value: Tensor) -> NodeId64 {
        let data = value.data().iter().map(|&v| v as f64).collect();
        self.push(value.dims().to_vec(), data)
    }

    fn constant(&mut self, value: Tensor) -> NodeId64 {
        self.leaf(value)
    }

    fn scalar_const(&mut self, value: f64) -> NodeId64 {
        self.push(vec![1], vec![value])
    }

    fn dims(&self, id: NodeId64) -> &[usize] {
        &self.node(id).dims
    }

    fn scalar_value(&self, id: NodeId64) -> f64 {
        self.node(id).data[0]
    }

    fn conv2d(&mut self, x: NodeId64, k: NodeId64, b: NodeId64, stride: usize) -> Result<NodeId64> {
        // Reuses the f32 shape validation by probing dims only.
        let (h, w, _cin) = self.image_dims("conv2d", x)?;
        let kd = self.node(k).dims.clone();
        if kd.len() != 4 || self.node(b).dims.len() != 1 || (stride != 1 && stride != 2) {
            return Err(Error::shape("conv2d", format!("kernel dims {:?}, stride {}", kd, stride)));
        }
        let (kh, kw, cin, cout) = (kd[0], kd[1], kd[2], kd[3]);
        if self.node(x).dims[2] != cin || self.node(b).dims[0] != cout || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs kernel {:?}", self.node(x).dims, kd),
            ));
        }
        let (pad_h, pad_w) = ((kh - 1) / 2, (kw - 1) / 2);
        let oh = (h + 2 * pad_h - kh) / stride + 1;
        let ow = (w + 2 * pad_w - kw) / stride + 1;
        let xd = &self.node(x).data;
        let kdat = &self.node(k).data;
        let bd = &self.node(b).data;
        let mut out = vec![0.0f64; oh * ow * cout];
        let mut acc = vec![0.0f64; cout];
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xrow = &xd[((iy as usize * w) + ix as usize) * cin..][..cin];
                        let krow = &kdat[((ky * kw + kx) * cin) * cout..][..cin * cout];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let ks = &krow[ci * cout..][..cout];
                            for (a, &kv) in acc.iter_mut().zip(ks) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
                out[(oy * ow + ox) * cout..][..cout].copy_from_slice(&acc);
            }
        }
        Ok(self.push(vec![oh, ow, cout], out))
    }

    fn upsample2(&mut self, x: NodeId64) -> Result<NodeId64> {
        let (h, w, c) = self.image_dims("nearest_upsample2", x)?;
        let xd = &self.node(x).data;
        let ow = 2 * w;
        let mut out = vec![0.0f64; 4 * h * w * c];
        for y in 0..h {
            for xcol in 0..w {
                for ch in 0..c {
                    let v = xd[(y * w + xcol) * c + ch];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[((2 * y + dy) * ow + 2 * xcol + dx) * c + ch] = v;
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![2 * h, 2 * w, c], out))
    }

    fn downsample_avg2(&mut self, x: NodeId64) -> Result<NodeId64> {
        let (h, w, c) = self.image_dims("downsample_avg2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("downsample_avg2", format!("want even sides, got {}x{}", h, w)));
        }
        let xd = &self.node(x).data;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f64; oh * ow * c];
        for y in 0..oh {
            for xcol in 0..ow {
                for ch in 0..c {
                    let mut a = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            a += xd[((2 * y + dy) * w + 2 * xcol + dx) * c + ch];
                        }
                    }
                    out[(y * ow + xcol) * c + ch] = a * 0.25;
                }
            }
        }
        Ok(self.push(vec![oh, ow, c], out))
    }

    fn gaussian_blur(&mut self, x: NodeId64, taps: &[f32], valid: bool) -> Result<NodeId64> {
        let (h, w, c) = self.image_dims("gaussian_blur", x)?;
        let t = taps.len();
        if t % 2 == 0 || (valid && (h < t || w < t)) {
            return Err(Error::shape("gaussian_blur", format!("{}-tap window on {}x{}", t, h, w)));
        }
        let r = t / 2;
        let (oh, ow) = if valid { (h - t + 1, w - t + 1) } else { (h, w) };
        let xd = &self.node(x).data;
        let mut mid = vec![0.0f64; h * ow * c];
        for y in 0..h {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut a = 0.0;
                    for (ti, &tap) in taps.iter().enumerate() {
                        let ix = if valid { (ox + ti) as isize } else { ox as isize + ti as isize - r as isize };
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        a += tap as f64 * xd[(y * w + ix as usize) * c + ch];
                    }
                    mid[(y * ow + ox) * c + ch] = a;
                }
            }
        }
        let mut out = vec![0.0f64; oh * ow * c];
        for oy in 0..oh {
            for xcol in 0..ow {
                for ch in 0..c {
                    let mut a = 0.0;
                    for (ti, &tap) in taps.iter().enumerate() {
                        let iy = if valid { (oy + ti) as isize } else { oy as isize + ti as isize - r as isize };
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        a += tap as f64 * mid[(iy as usize * ow + xcol) * c + ch];
                    }
                    out[(oy * ow + xcol) * c + ch] = a;
                }
            }
        }
        Ok(self.push(vec![oh, ow, c], out))
    }

    fn hflip(&mut self, x: NodeId64) -> Result<NodeId64> {
        let (h, w, c) = self.image_dims("hflip", x)?;
        let xd = &self.node(x).data;
        let mut out = vec![0.0f64; h * w * c];
        for y in 0..h {
            for xcol in 0..w {
                for ch in 0..c {
                    out[(y * w + (w - 1 - xcol)) * c + ch] = xd[(y * w + xcol) * c + ch];
                }
            }
        }
        Ok(self.push(vec![h, w, c], out))
    }

    fn add(&mut self, a: NodeId64, b: NodeId64) -> Result<NodeId64> {
        self.binary("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: NodeId64, b: NodeId64) -> Result<NodeId64> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: NodeId64, b: NodeId64) -> Result<NodeId64> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    fn div(&mut self, a: NodeId64, b: NodeId64) -> Result<NodeId64> {
        self.binary("div", a, b, |x, y| x / y)
    }

    fn scalar_mul(&mut self, x: NodeId64, c: f32) -> NodeId64 {
        self.unary(x, |v| c as f64 * v)
    }

    fn scalar_add(&mut self, x: NodeId64, c: f32) -> NodeId64 {
        self.unary(x, |v| c as f64 + v)
    }

    fn tanh(&mut self, x: NodeId64) -> NodeId64 {
        self.unary(x, f64::tanh)
    }

    fn sigmoid(&mut self, x: NodeId64) -> NodeId64 {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    fn abs(&mut self, x: NodeId64) -> NodeId64 {
        self.unary(x, f64::abs)
    }

    fn square(&mut self, x: NodeId64) -> NodeId64 {
        self.unary(x, |v| v * v)
    }

    fn sqrt_eps(&mut self, x: NodeId64) -> NodeId64 {
        self.unary(x, |v| (v + kn::SQRT_EPS as f64).sqrt())
    }

    fn clamp01(&mut self, x: NodeId64) -> NodeId64 {
        self.unary(x, |v| v.clamp(0.0, 1.0))
    }

    fn pow_weight(&mut self, x: NodeId64, w: f32) -> NodeId64 {
        self.unary(x, |v| if v > 0.0 { v.powf(w as f64) } else { 0.0 })
    }

    fn mean_reduce(&mut self, x: NodeId64) -> NodeId64 {
        let n = self.node(x);
        let v = n.data.iter().sum::<f64>() / n.data.len() as f64;
        self.push(vec![1], vec![v])
    }

    fn sum_reduce(&mut self, x: NodeId64) -> NodeId64 {
        let v = self.node(x).data.iter().sum::<f64>();
        self.push(vec![1], vec![v])
    }
}
