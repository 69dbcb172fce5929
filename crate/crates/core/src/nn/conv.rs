use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};
use rand::Rng;

use super::{join, Layer, Param, Tensor};

/// Upper bound on im2col buffer size, in floats.
const MAX_COLS: usize = 1 << 22;

/// 3D convolution with "same"-style padding `k / 2` on every axis.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Param,
    in_c: usize,
    out_c: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    cache: Option<Tensor>,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let k: usize = kernel.iter().product();
        Conv3d {
            weight: Param::kaiming(vec![out_c, in_c, kernel[0], kernel[1], kernel[2]], in_c * k, rng),
            bias: Param::zeros(vec![out_c]),
            in_c,
            out_c,
            kernel,
            stride,
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn output_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        let mut o = [0; 3];
        for i in 0..3 {
            o[i] = (s[i] + 2 * self.pad[i] - self.kernel[i]) / self.stride[i] + 1;
        }
        o
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    fn k_len(&self) -> usize {
        self.in_c * self.kernel.iter().product::<usize>()
    }

    fn planes_per_chunk(&self, out: [usize; 3]) -> usize {
        (MAX_COLS / (self.k_len() * out[1] * out[2]).max(1)).clamp(1, out[0])
    }

    fn im2col(&self, x: &[f32], ins: [usize; 3], outs: [usize; 3], z0: usize, z1: usize, cols: &mut [f32]) {
        let [d, h, w] = ins;
        let [_, oh, ow] = outs;
        let [kd, kh, kw] = self.kernel;
        let p = (z1 - z0) * oh * ow;
        for ci in 0..self.in_c {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let r = ((ci * kd + a) * kh + b) * kw + c;
                        let dst = &mut cols[r * p..(r + 1) * p];
                        let mut idx = 0;
                        for oz in z0..z1 {
                            let iz = (oz * self.stride[0] + a) as isize - self.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                dst[idx..idx + oh * ow].fill(0.0);
                                idx += oh * ow;
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * self.stride[1] + b) as isize - self.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    dst[idx..idx + ow].fill(0.0);
                                    idx += ow;
                                    continue;
                                }
                                let row = ((ci * d + iz as usize) * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = (ox * self.stride[2] + c) as isize - self.pad[2] as isize;
                                    dst[idx] = if ix < 0 || ix >= w as isize {
                                        0.0
                                    } else {
                                        x[row + ix as usize]
                                    };
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], ins: [usize; 3], outs: [usize; 3], z0: usize, z1: usize, dx: &mut [f32]) {
        let [d, h, w] = ins;
        let [_, oh, ow] = outs;
        let [kd, kh, kw] = self.kernel;
        let p = (z1 - z0) * oh * ow;
        for ci in 0..self.in_c {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let r = ((ci * kd + a) * kh + b) * kw + c;
                        let src = &cols[r * p..(r + 1) * p];
                        let mut idx = 0;
                        for oz in z0..z1 {
                            let iz = (oz * self.stride[0] + a) as isize - self.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                idx += oh * ow;
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * self.stride[1] + b) as isize - self.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    idx += ow;
                                    continue;
                                }
                                let row = ((ci * d + iz as usize) * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = (ox * self.stride[2] + c) as isize - self.pad[2] as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dx[row + ix as usize] += src[idx];
                                    }
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn weight_view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.out_c, self.k_len()), &self.weight.value).expect("weight shape")
    }

    fn run(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_c, "conv: channel mismatch");
        let ins = x.spatial();
        let outs = self.output_spatial(ins);
        let s_out: usize = outs.iter().product();
        let mut y = Tensor::zeros([x.batch(), self.out_c, outs[0], outs[1], outs[2]]);
        let w = self.weight_view();
        let kl = self.k_len();
        let ohw = outs[1] * outs[2];
        for n in 0..x.batch() {
            let xs = x.sample(n);
            let ys = y.sample_mut(n);
            if self.pointwise() {
                let xv = ArrayView2::from_shape((self.in_c, s_out), xs).expect("shape");
                let mut yv = ArrayViewMut2::from_shape((self.out_c, s_out), &mut *ys).expect("shape");
                general_mat_mul(1.0, &w, &xv, 0.0, &mut yv);
            } else {
                let chunk = self.planes_per_chunk(outs);
                let mut cols = vec![0.0f32; kl * chunk * ohw];
                let mut z0 = 0;
                while z0 < outs[0] {
                    let z1 = (z0 + chunk).min(outs[0]);
                    let p = (z1 - z0) * ohw;
                    self.im2col(xs, ins, outs, z0, z1, &mut cols[..kl * p]);
                    let cv = ArrayView2::from_shape((kl, p), &cols[..kl * p]).expect("shape");
                    let mut yv = ArrayViewMut2::from_shape((self.out_c, p).strides((s_out, 1)), &mut ys[z0 * ohw..])
                        .expect("shape");
                    general_mat_mul(1.0, &w, &cv, 0.0, &mut yv);
                    z0 = z1;
                }
            }
            for (o, &b) in self.bias.value.iter().enumerate() {
                ys[o * s_out..(o + 1) * s_out].iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }
}

impl Layer for Conv3d {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.run(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without forward_train");
        let ins = x.spatial();
        let outs = self.output_spatial(ins);
        assert_eq!(g.spatial(), outs, "conv backward: gradient shape");
        let s_out: usize = outs.iter().product();
        let kl = self.k_len();
        let ohw = outs[1] * outs[2];
        let mut dx = Tensor::zeros(x.shape);
        let mut dw = vec![0.0f32; self.weight.len()];
        let mut db = vec![0.0f32; self.out_c];
        {
            let w = self.weight_view();
            let mut dwv = ArrayViewMut2::from_shape((self.out_c, kl), &mut dw[..]).expect("shape");
            for n in 0..x.batch() {
                let xs = x.sample(n);
                let gs = g.sample(n);
                for o in 0..self.out_c {
                    db[o] += gs[o * s_out..(o + 1) * s_out].iter().sum::<f32>();
                }
                if self.pointwise() {
                    let xv = ArrayView2::from_shape((self.in_c, s_out), xs).expect("shape");
                    let gv = ArrayView2::from_shape((self.out_c, s_out), gs).expect("shape");
                    general_mat_mul(1.0, &gv, &xv.t(), 1.0, &mut dwv);
                    let mut dxv = ArrayViewMut2::from_shape((self.in_c, s_out), dx.sample_mut(n)).expect("shape");
                    general_mat_mul(1.0, &w.t(), &gv, 0.0, &mut dxv);
                    continue;
                }
                let chunk = self.planes_per_chunk(outs);
                let mut cols = vec![0.0f32; kl * chunk * ohw];
                let mut dcols = vec![0.0f32; kl * chunk * ohw];
                let mut z0 = 0;
                while z0 < outs[0] {
                    let z1 = (z0 + chunk).min(outs[0]);
                    let p = (z1 - z0) * ohw;
                    self.im2col(xs, ins, outs, z0, z1, &mut cols[..kl * p]);
                    let cv = ArrayView2::from_shape((kl, p), &cols[..kl * p]).expect("shape");
                    let gv = ArrayView2::from_shape((self.out_c, p).strides((s_out, 1)), &gs[z0 * ohw..]).expect("shape");
                    general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut dwv);
                    {
                        let mut dcv = ArrayViewMut2::from_shape((kl, p), &mut dcols[..kl * p]).expect("shape");
                        general_mat_mul(1.0, &w.t(), &gv, 0.0, &mut dcv);
                    }
                    self.col2im(&dcols[..kl * p], ins, outs, z0, z1, dx.sample_mut(n));
                    z0 = z1;
                }
            }
        }
        for (a, b) in self.weight.grad.iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in self.bias.grad.iter_mut().zip(db) {
            *a += b;
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: Param,
    pub bias: Param,
    in_c: usize,
    out_c: usize,
    cache: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        ConvTranspose3d {
            weight: Param::kaiming(vec![in_c, out_c, 2, 2, 2], in_c, rng),
            bias: Param::zeros(vec![out_c]),
            in_c,
            out_c,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    fn run(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_c, "convtranspose: channel mismatch");
        let [d, h, w] = x.spatial();
        let s = d * h * w;
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut y = Tensor::zeros([x.batch(), self.out_c, od, oh, ow]);
        let wv = ArrayView2::from_shape((self.in_c, self.out_c * 8), &self.weight.value).expect("shape");
        let mut y8 = vec![0.0f32; self.out_c * 8 * s];
        for n in 0..x.batch() {
            let xv = ArrayView2::from_shape((self.in_c, s), x.sample(n)).expect("shape");
            {
                let mut yv = ArrayViewMut2::from_shape((self.out_c * 8, s), &mut y8[..]).expect("shape");
                general_mat_mul(1.0, &wv.t(), &xv, 0.0, &mut yv);
            }
            let ys = y.sample_mut(n);
            for o in 0..self.out_c {
                let b = self.bias.value[o];
                for k in 0..8 {
                    let (a, bb, c) = (k >> 2, (k >> 1) & 1, k & 1);
                    let src = &y8[(o * 8 + k) * s..(o * 8 + k + 1) * s];
                    for z in 0..d {
                        for yy in 0..h {
                            let base = ((o * od + 2 * z + a) * oh + 2 * yy + bb) * ow + c;
                            let srow = (z * h + yy) * w;
                            for xx in 0..w {
                                ys[base + 2 * xx] = src[srow + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        y
    }
}

impl Layer for ConvTranspose3d {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.run(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.cache.take().expect("convtranspose backward without forward_train");
        let [d, h, w] = x.spatial();
        let s = d * h * w;
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut dx = Tensor::zeros(x.shape);
        let mut g8 = vec![0.0f32; self.out_c * 8 * s];
        let mut dw = vec![0.0f32; self.weight.len()];
        {
            let wv = ArrayView2::from_shape((self.in_c, self.out_c * 8), &self.weight.value).expect("shape");
            let mut dwv = ArrayViewMut2::from_shape((self.in_c, self.out_c * 8), &mut dw[..]).expect("shape");
            for n in 0..x.batch() {
                let gs = g.sample(n);
                for o in 0..self.out_c {
                    let plane = &gs[o * od * oh * ow..(o + 1) * od * oh * ow];
                    self.bias.grad[o] += plane.iter().sum::<f32>();
                    for k in 0..8 {
                        let (a, bb, c) = (k >> 2, (k >> 1) & 1, k & 1);
                        let dst = &mut g8[(o * 8 + k) * s..(o * 8 + k + 1) * s];
                        for z in 0..d {
                            for yy in 0..h {
                                let base = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                                let drow = (z * h + yy) * w;
                                for xx in 0..w {
                                    dst[drow + xx] = plane[base + 2 * xx];
                                }
                            }
                        }
                    }
                }
                let gv = ArrayView2::from_shape((self.out_c * 8, s), &g8[..]).expect("shape");
                let xv = ArrayView2::from_shape((self.in_c, s), x.sample(n)).expect("shape");
                general_mat_mul(1.0, &xv, &gv.t(), 1.0, &mut dwv);
                let mut dxv = ArrayViewMut2::from_shape((self.in_c, s), dx.sample_mut(n)).expect("shape");
                general_mat_mul(1.0, &wv, &gv, 0.0, &mut dxv);
            }
        }
        for (a, b) in self.weight.grad.iter_mut().zip(dw) {
            *a += b;
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
