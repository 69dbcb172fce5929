use rand::Rng;

use super::{join, Conv3d, InstanceNorm, Layer, LeakyRelu, Param, Tensor};

/// Convolution, instance norm, leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
    act: LeakyRelu,
}

impl ConvNormAct {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, kernel: [usize; 3], stride: [usize; 3], rng: &mut R) -> Self {
        ConvNormAct {
            conv: Conv3d::new(in_c, out_c, kernel, stride, rng),
            norm: InstanceNorm::new(out_c),
            act: LeakyRelu::new(),
        }
    }
}

impl Layer for ConvNormAct {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.act.forward(&self.norm.forward(&self.conv.forward(x)))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv.forward_train(x);
        let h = self.norm.forward_train(&h);
        self.act.forward_train(&h)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.act.backward(g);
        let g = self.norm.backward(&g);
        self.conv.backward(&g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// Basic residual block: two convolutions with a projection shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv3d,
    norm1: InstanceNorm,
    act1: LeakyRelu,
    conv2: Conv3d,
    norm2: InstanceNorm,
    skip: Option<(Conv3d, InstanceNorm)>,
    act_out: LeakyRelu,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, kernel: [usize; 3], stride: [usize; 3], rng: &mut R) -> Self {
        let skip = (in_c != out_c || stride != [1, 1, 1])
            .then(|| (Conv3d::new(in_c, out_c, [1, 1, 1], stride, rng), InstanceNorm::new(out_c)));
        ResidualBlock {
            conv1: Conv3d::new(in_c, out_c, kernel, stride, rng),
            norm1: InstanceNorm::new(out_c),
            act1: LeakyRelu::new(),
            conv2: Conv3d::new(out_c, out_c, kernel, [1, 1, 1], rng),
            norm2: InstanceNorm::new(out_c),
            skip,
            act_out: LeakyRelu::new(),
        }
    }
}

impl Layer for ResidualBlock {
    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.act1.forward(&self.norm1.forward(&self.conv1.forward(x)));
        let mut h = self.norm2.forward(&self.conv2.forward(&h));
        match &self.skip {
            Some((c, n)) => h.add_assign(&n.forward(&c.forward(x))),
            None => h.add_assign(x),
        }
        self.act_out.forward(&h)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward_train(x);
        let h = self.norm1.forward_train(&h);
        let h = self.act1.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        let mut h = self.norm2.forward_train(&h);
        match &mut self.skip {
            Some((c, n)) => {
                let s = c.forward_train(x);
                h.add_assign(&n.forward_train(&s));
            }
            None => h.add_assign(x),
        }
        self.act_out.forward_train(&h)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.act_out.backward(g);
        let gs = match &mut self.skip {
            Some((c, n)) => {
                let t = n.backward(&g);
                c.backward(&t)
            }
            None => g.clone(),
        };
        let h = self.norm2.backward(&g);
        let h = self.conv2.backward(&h);
        let h = self.act1.backward(&h);
        let h = self.norm1.backward(&h);
        let mut gx = self.conv1.backward(&h);
        gx.add_assign(&gs);
        gx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        if let Some((c, n)) = &self.skip {
            c.visit_params(&join(prefix, "skip_conv"), f);
            n.visit_params(&join(prefix, "skip_norm"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        if let Some((c, n)) = &mut self.skip {
            c.visit_params_mut(&join(prefix, "skip_conv"), f);
            n.visit_params_mut(&join(prefix, "skip_norm"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        check_layer(
            ResidualBlock::new(2, 2, [3, 3, 3], [1, 1, 1], &mut rng),
            random_tensor([1, 2, 3, 3, 3], 1),
            2,
            5e-2,
        );
        check_layer(
            ResidualBlock::new(2, 3, [3, 3, 3], [2, 2, 2], &mut rng),
            random_tensor([2, 2, 4, 4, 4], 3),
            4,
            5e-2,
        );
    }

    #[test]
    fn strided_block_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = ResidualBlock::new(1, 4, [3, 3, 3], [2, 2, 2], &mut rng);
        assert_eq!(b.forward(&Tensor::zeros([1, 1, 8, 6, 4])).shape, [1, 4, 4, 3, 2]);
        let c = ConvNormAct::new(1, 2, [1, 3, 3], [1, 2, 2], &mut rng);
        assert_eq!(c.forward(&Tensor::zeros([1, 1, 1, 8, 4])).shape, [1, 2, 1, 4, 2]);
    }
}
