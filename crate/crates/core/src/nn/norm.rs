use super::{join, Layer, Param, Tensor, LEAKY_SLOPE};

const NORM_EPS: f32 = 1e-5;

/// Per-sample, per-channel normalization over the spatial axes with a learned affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
    channels: usize,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::zeros(vec![channels]),
            channels,
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Tensor, Vec<f32>) {
        assert_eq!(x.channels(), self.channels, "instance norm: channel mismatch");
        let s = x.spatial_len();
        let mut xhat = Tensor::zeros(x.shape);
        let mut y = Tensor::zeros(x.shape);
        let mut inv = Vec::with_capacity(x.batch() * self.channels);
        for n in 0..x.batch() {
            for c in 0..self.channels {
                let src = x.plane(n, c);
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
                let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s as f64;
                let istd = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
                inv.push(istd);
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                let mean = mean as f32;
                let xh = xhat.plane_mut(n, c);
                for (o, &v) in xh.iter_mut().zip(src) {
                    *o = (v - mean) * istd;
                }
                let xh = xhat.plane(n, c).to_vec();
                for (o, v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                    *o = v * g + b;
                }
            }
        }
        (y, xhat, inv)
    }
}

impl Layer for InstanceNorm {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.normalize(x).0
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (y, xhat, inv) = self.normalize(x);
        self.cache = Some((xhat, inv));
        y
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let (xhat, inv) = self.cache.take().expect("norm backward without forward_train");
        let s = g.spatial_len() as f32;
        let mut dx = Tensor::zeros(g.shape);
        for n in 0..g.batch() {
            for c in 0..self.channels {
                let gp = g.plane(n, c);
                let xh = xhat.plane(n, c);
                let gamma = self.gamma.value[c];
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for (&gv, &xv) in gp.iter().zip(xh) {
                    sum_g += gv as f64;
                    sum_gx += (gv * xv) as f64;
                }
                self.gamma.grad[c] += sum_gx as f32;
                self.beta.grad[c] += sum_g as f32;
                let k = gamma * inv[n * self.channels + c] / s;
                let (sg, sgx) = (sum_g as f32, sum_gx as f32);
                for ((o, &gv), &xv) in dx.plane_mut(n, c).iter_mut().zip(gp).zip(xh) {
                    *o = k * (s * gv - sg - xv * sgx);
                }
            }
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug, Default)]
pub struct LeakyRelu {
    cache: Option<Vec<bool>>,
}

impl LeakyRelu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for LeakyRelu {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= LEAKY_SLOPE
            }
        });
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.data.iter().map(|&v| v >= 0.0).collect());
        self.forward(x)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let mask = self.cache.take().expect("relu backward without forward_train");
        let mut dx = g.clone();
        for (v, pos) in dx.data.iter_mut().zip(mask) {
            if !pos {
                *v *= LEAKY_SLOPE;
            }
        }
        dx
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Mean over all spatial positions, producing a `[n, c, 1, 1, 1]` tensor.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    cache: Option<[usize; 5]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = Tensor::zeros([x.batch(), x.channels(), 1, 1, 1]);
        let s = x.spatial_len() as f32;
        for n in 0..x.batch() {
            for c in 0..x.channels() {
                y.data[n * x.channels() + c] = x.plane(n, c).iter().sum::<f32>() / s;
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.shape);
        self.forward(x)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let shape = self.cache.take().expect("pool backward without forward_train");
        let mut dx = Tensor::zeros(shape);
        let s = dx.spatial_len() as f32;
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                let v = g.data[n * shape[1] + c] / s;
                dx.plane_mut(n, c).fill(v);
            }
        }
        dx
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}
