//! 3D encoder–decoder backbone with a softmax regression head.

use rand::Rng;

use crate::error::Result;
use crate::model::config::NetworkConfig;
use crate::nn::{
    conv3d_backward, conv3d_forward, maxpool2_backward, maxpool2_forward, relu_backward_inplace, relu_inplace,
    resize_trilinear, resize_trilinear_backward, softmax_channels, softmax_channels_backward, Param, Real, Tensor,
};

/// Cubic convolution layer with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl<T: Real> Conv<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k * k;
        Self {
            weight: Param::he_normal(format!("{name}.weight"), &[cout, cin, k, k, k], fan_in, rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv3d_forward(x, &self.weight.value, Some(&self.bias.value), self.cout, self.k)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        conv3d_backward(
            x,
            &self.weight.value,
            dy,
            self.k,
            &mut self.weight.grad,
            Some(&mut self.bias.grad),
            need_dx,
        )
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Two 3³ convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv<T> {
    pub a: Conv<T>,
    pub b: Conv<T>,
}

struct DoubleConvCache<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Real> DoubleConv<T> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv::new(&format!("{name}.0"), cin, cout, 3, rng),
            b: Conv::new(&format!("{name}.1"), cout, cout, 3, rng),
        }
    }

    fn forward(&self, input: Tensor<T>) -> DoubleConvCache<T> {
        let mut mid = self.a.forward(&input);
        relu_inplace(&mut mid);
        let mut out = self.b.forward(&mid);
        relu_inplace(&mut out);
        DoubleConvCache { input, mid, out }
    }

    fn backward(&mut self, cache: &DoubleConvCache<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        relu_backward_inplace(&cache.out, &mut dy);
        let mut dmid = self.b.backward(&cache.mid, &dy, true).expect("dx requested");
        relu_backward_inplace(&cache.mid, &mut dmid);
        self.a.backward(&cache.input, &dmid, need_dx)
    }
}

/// Backbone parameters: `depth` encoder stages, a bottleneck, `depth`
/// decoder stages and a 1×1×1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: NetworkConfig,
    pub encoder: Vec<DoubleConv<T>>,
    pub bottleneck: DoubleConv<T>,
    /// Indexed by resolution level, finest first.
    pub decoder: Vec<DoubleConv<T>>,
    pub head: Conv<T>,
}

/// Dense features exposed to the heads and the attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureBundle<T> {
    /// Last decoder features, `F0` channels at full resolution.
    pub final_dense: Tensor<T>,
    /// First encoder stage output, `F0` channels at full resolution.
    pub enc1: Tensor<T>,
    /// Second encoder stage output, `2·F0` channels at half resolution.
    pub enc2: Tensor<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct UNetForward<T> {
    encoder: Vec<DoubleConvCache<T>>,
    pool_args: Vec<Vec<u32>>,
    bottleneck: DoubleConvCache<T>,
    /// Finest first; absent when only the encoder was run.
    decoder: Vec<DoubleConvCache<T>>,
    pub dram: Option<Tensor<T>>,
}

impl<T: Real> UNetForward<T> {
    pub fn bundle(&self) -> DenseFeatureBundle<T> {
        DenseFeatureBundle {
            final_dense: self.final_dense().clone(),
            enc1: self.encoder[0].out.clone(),
            enc2: self.encoder[1].out.clone(),
        }
    }

    pub fn final_dense(&self) -> &Tensor<T> {
        &self.decoder.first().expect("decoder was run").out
    }

    pub fn enc1(&self) -> &Tensor<T> {
        &self.encoder[0].out
    }

    pub fn enc2(&self) -> &Tensor<T> {
        &self.encoder[1].out
    }

    /// Bottleneck output, `2^depth·F0` channels at `1/2^depth` resolution.
    pub fn bottleneck(&self) -> &Tensor<T> {
        &self.bottleneck.out
    }
}

impl<T: Real> UNet<T> {
    pub fn new(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let encoder = (0..depth)
            .map(|s| {
                let cin = if s == 0 { config.in_channels } else { config.width(s - 1) };
                DoubleConv::new(&format!("enc{s}"), cin, config.width(s), rng)
            })
            .collect();
        let bottleneck = DoubleConv::new("bottleneck", config.width(depth - 1), config.width(depth), rng);
        let decoder = (0..depth)
            .map(|s| DoubleConv::new(&format!("dec{s}"), config.width(s + 1) + config.width(s), config.width(s), rng))
            .collect();
        let head = Conv::new("head", config.width(0), config.num_classes, 1, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for dc in self.encoder.iter().chain([&self.bottleneck]).chain(&self.decoder) {
            out.extend(dc.a.params());
            out.extend(dc.b.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for dc in self
            .encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoder.iter_mut())
        {
            out.extend(dc.a.params_mut());
            out.extend(dc.b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn run_encoder(&self, x: &Tensor<T>) -> Result<UNetForward<T>> {
        self.config.check_dims(x.dims())?;
        let mut encoder = Vec::with_capacity(self.config.depth);
        let mut pool_args = Vec::with_capacity(self.config.depth);
        let mut input = x.clone();
        for stage in &self.encoder {
            let cache = stage.forward(input);
            let (pooled, arg) = maxpool2_forward(&cache.out);
            encoder.push(cache);
            pool_args.push(arg);
            input = pooled;
        }
        let bottleneck = self.bottleneck.forward(input);
        Ok(UNetForward {
            encoder,
            pool_args,
            bottleneck,
            decoder: Vec::new(),
            dram: None,
        })
    }

    /// Encoder and bottleneck only (the low-resolution CAM path).
    pub fn forward_encoder(&self, x: &Tensor<T>) -> Result<UNetForward<T>> {
        self.run_encoder(x)
    }

    /// Full pass producing dense features and the softmax map.
    pub fn forward(&self, x: &Tensor<T>) -> Result<UNetForward<T>> {
        let mut fwd = self.run_encoder(x)?;
        let mut below = fwd.bottleneck.out.clone();
        let mut decoder = Vec::with_capacity(self.config.depth);
        for s in (0..self.config.depth).rev() {
            let skip = &fwd.encoder[s].out;
            let up = resize_trilinear(&below, skip.dims());
            let cat = Tensor::concat(&[&up, skip])?;
            let cache = self.decoder[s].forward(cat);
            below = cache.out.clone();
            decoder.push(cache);
        }
        decoder.reverse();
        let logits = self.head.forward(&decoder[0].out);
        fwd.decoder = decoder;
        fwd.dram = Some(softmax_channels(&logits));
        Ok(fwd)
    }

    /// Accumulates parameter gradients for upstream gradients on the
    /// softmax map, the final dense features and/or the bottleneck output.
    pub fn backward(
        &mut self,
        fwd: &UNetForward<T>,
        d_dram: Option<&Tensor<T>>,
        d_final_dense: Option<&Tensor<T>>,
        d_bottleneck: Option<&Tensor<T>>,
    ) {
        let depth = self.config.depth;
        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; depth];
        let mut d_below: Option<Tensor<T>> = d_bottleneck.cloned();

        if !fwd.decoder.is_empty() && (d_dram.is_some() || d_final_dense.is_some()) {
            let fd = &fwd.decoder[0].out;
            let mut d_fd = Tensor::zeros(fd.channels(), fd.dims());
            if let Some(dd) = d_dram {
                let dram = fwd.dram.as_ref().expect("dram present with decoder");
                let d_logits = softmax_channels_backward(dram, dd);
                let dx = self.head.backward(fd, &d_logits, true).expect("dx requested");
                d_fd.add_assign(&dx);
            }
            if let Some(extra) = d_final_dense {
                d_fd.add_assign(extra);
            }
            let mut d_out = d_fd;
            for s in 0..depth {
                let cache = &fwd.decoder[s];
                let d_cat = self.decoder[s].backward(cache, d_out, true).expect("dx requested");
                let up_ch = self.config.width(s + 1);
                let mut parts = d_cat.split(&[up_ch, self.config.width(s)]);
                let d_skip_s = parts.pop().expect("two parts");
                let d_up = parts.pop().expect("two parts");
                d_skip[s] = Some(d_skip_s);
                let below_dims = if s + 1 < depth {
                    fwd.decoder[s + 1].out.dims()
                } else {
                    fwd.bottleneck.out.dims()
                };
                let d_b = resize_trilinear_backward(&d_up, below_dims);
                if s + 1 < depth {
                    d_out = d_b;
                } else {
                    match d_below.as_mut() {
                        Some(acc) => acc.add_assign(&d_b),
                        None => d_below = Some(d_b),
                    }
                    d_out = Tensor::zeros(0, [0; 3]);
                }
            }
        }

        let Some(d_bott) = d_below else { return };
        let mut d_pooled = self.bottleneck.backward(&fwd.bottleneck, d_bott, true).expect("dx requested");
        for s in (0..depth).rev() {
            let cache = &fwd.encoder[s];
            let mut d_out = maxpool2_backward(&d_pooled, &fwd.pool_args[s], cache.out.dims());
            if let Some(ds) = d_skip[s].take() {
                d_out.add_assign(&ds);
            }
            match self.encoder[s].backward(cache, d_out, s > 0) {
                Some(dx) => d_pooled = dx,
                None => break,
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            cin: c.cin,
            cout: c.cout,
            k: c.k,
        };
        let dc = |d: &DoubleConv<T>| DoubleConv { a: conv(&d.a), b: conv(&d.b) };
        UNet {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(dc).collect(),
            bottleneck: dc(&self.bottleneck),
            decoder: self.decoder.iter().map(dc).collect(),
            head: conv(&self.head),
        }
    }
}
