//! Stateful layers: each owns its parameters, gradient buffers and the
//! forward cache its backward pass needs.

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2d, avg_pool2d_backward, batch_norm_backward, batch_norm_cached, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, linear, linear_backward, max_pool2d, max_pool2d_backward, relu, relu_backward,
    BatchNormCache, BatchNormParams, ConvParams, LinearParams, Mode, Pool2d,
};
use crate::rng::Rng;
use crate::tensor::{concat_channels, split_channels, Shape, Tensor};

fn missing_cache(what: &str) -> Error {
    Error::Domain(format!("{what}: backward called without a training forward"))
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub params: ConvParams,
    grad_kernels: Tensor,
    grad_bias: Tensor,
    input: Option<Tensor>,
}

impl ConvLayer {
    pub fn new(params: ConvParams) -> Self {
        ConvLayer {
            grad_kernels: Tensor::zeros(params.kernels.shape()),
            grad_bias: Tensor::zeros(params.bias.shape()),
            params,
            input: None,
        }
    }

    pub fn he(out: usize, inp: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        ConvLayer::new(ConvParams::he_init(out, inp, kernel, stride, pad, rng))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub params: BatchNormParams,
    grad_gamma: Tensor,
    grad_beta: Tensor,
    cache: Option<BatchNormCache>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            params: BatchNormParams::new(channels),
            grad_gamma: Tensor::vector(vec![0.0; channels]),
            grad_beta: Tensor::vector(vec![0.0; channels]),
            cache: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub params: LinearParams,
    grad_weight: Tensor,
    grad_bias: Tensor,
    input: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(params: LinearParams) -> Self {
        LinearLayer {
            grad_weight: Tensor::zeros(params.weight.shape()),
            grad_bias: Tensor::zeros(params.bias.shape()),
            params,
            input: None,
        }
    }
}

/// A dense block: layer `i` sees the concatenation of the block input and
/// the outputs of layers `0..i`.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<Sequential>,
    in_channels: usize,
    growth_rate: usize,
}

impl DenseBlock {
    pub fn new(in_channels: usize, growth_rate: usize, layers: Vec<Sequential>) -> Self {
        DenseBlock {
            layers,
            in_channels,
            growth_rate,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if input.shape().c != self.in_channels {
            return Err(Error::shape(format!(
                "dense block expects {} channels, input has {}",
                self.in_channels,
                input.shape().c
            )));
        }
        let mut features = input.clone();
        for layer in &mut self.layers {
            let out = layer.forward(&features, mode)?;
            features = concat_channels(&[&features, &out])?;
        }
        Ok(features)
    }

    /// Walks the layers in reverse. The leading band of the running gradient
    /// belongs to the features layer `i` consumed, and layer `i`'s input
    /// gradient is added onto it, so every band collects one contribution
    /// per downstream consumer.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let k = self.growth_rate;
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let lead = self.in_channels + i * k;
            let mut bands = split_channels(&grad, &[lead, k])?;
            let own = bands.pop().expect("two bands");
            let mut rest = bands.pop().expect("two bands");
            rest.add_assign(&layer.backward(&own)?)?;
            grad = rest;
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Relu {
        input: Option<Tensor>,
    },
    MaxPool {
        pool: Pool2d,
        input_shape: Option<Shape>,
        argmax: Vec<usize>,
    },
    AvgPool {
        window: usize,
        stride: usize,
        input_shape: Option<Shape>,
    },
    GlobalAvgPool {
        input_shape: Option<Shape>,
    },
    Linear(LinearLayer),
    DenseBlock(DenseBlock),
    Sequential(Sequential),
}

impl Layer {
    pub fn relu() -> Layer {
        Layer::Relu { input: None }
    }

    pub fn max_pool(pool: Pool2d) -> Layer {
        Layer::MaxPool {
            pool,
            input_shape: None,
            argmax: Vec::new(),
        }
    }

    pub fn avg_pool(window: usize, stride: usize) -> Layer {
        Layer::AvgPool {
            window,
            stride,
            input_shape: None,
        }
    }

    pub fn global_avg_pool() -> Layer {
        Layer::GlobalAvgPool { input_shape: None }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(l) => l.params.output_shape(input),
            Layer::BatchNorm(l) => {
                if input.c != l.params.channels() {
                    return Err(Error::shape(format!(
                        "batch_norm has {} channels, input has {}",
                        l.params.channels(),
                        input.c
                    )));
                }
                Ok(input)
            }
            Layer::Relu { .. } => Ok(input),
            Layer::MaxPool { pool, .. } => pool.output_shape(input),
            Layer::AvgPool { window, stride, .. } => Pool2d::new((*window, *window), *stride).output_shape(input),
            Layer::GlobalAvgPool { .. } => Ok(Shape::new(input.n, input.c, 1, 1)),
            Layer::Linear(l) => {
                if input.c * input.plane() != l.params.in_features() {
                    return Err(Error::shape(format!(
                        "linear expects {} features, input {input} has {}",
                        l.params.in_features(),
                        input.c * input.plane()
                    )));
                }
                Ok(Shape::new(input.n, l.params.out_features(), 1, 1))
            }
            Layer::DenseBlock(b) => {
                if input.c != b.in_channels {
                    return Err(Error::shape(format!(
                        "dense block expects {} channels, input has {}",
                        b.in_channels, input.c
                    )));
                }
                let mut c = input.c;
                for (i, l) in b.layers.iter().enumerate() {
                    let out = l.output_shape(Shape::new(input.n, c, input.h, input.w))?;
                    if out.c != b.growth_rate || (out.h, out.w) != (input.h, input.w) {
                        return Err(Error::shape(format!(
                            "dense layer {i} emits {out}, expected {} channels at {}x{}",
                            b.growth_rate, input.h, input.w
                        )));
                    }
                    c += out.c;
                }
                Ok(Shape::new(input.n, c, input.h, input.w))
            }
            Layer::Sequential(s) => s.output_shape(input),
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let train = mode == Mode::Train;
        match self {
            Layer::Conv(l) => {
                let out = conv2d(input, &l.params)?;
                l.input = train.then(|| input.clone());
                Ok(out)
            }
            Layer::BatchNorm(l) => {
                let (out, cache) = batch_norm_cached(input, &mut l.params, mode)?;
                l.cache = train.then_some(cache);
                Ok(out)
            }
            Layer::Relu { input: cached } => {
                *cached = train.then(|| input.clone());
                Ok(relu(input))
            }
            Layer::MaxPool {
                pool,
                input_shape,
                argmax,
            } => {
                let (out, idx) = max_pool2d(input, *pool)?;
                *input_shape = Some(input.shape());
                *argmax = idx;
                Ok(out)
            }
            Layer::AvgPool {
                window,
                stride,
                input_shape,
            } => {
                *input_shape = Some(input.shape());
                avg_pool2d(input, (*window, *window), *stride)
            }
            Layer::GlobalAvgPool { input_shape } => {
                *input_shape = Some(input.shape());
                global_avg_pool(input)
            }
            Layer::Linear(l) => {
                let out = linear(input, &l.params)?;
                l.input = train.then(|| input.clone());
                Ok(out)
            }
            Layer::DenseBlock(b) => b.forward(input, mode),
            Layer::Sequential(s) => s.forward(input, mode),
        }
    }

    /// Propagates `grad_out` to the layer input, adding parameter gradients
    /// into the layer's buffers.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => {
                let input = l.input.as_ref().ok_or_else(|| missing_cache("conv"))?;
                let g = conv2d_backward(input, &l.params, grad_out)?;
                l.grad_kernels.add_assign(&g.kernels)?;
                l.grad_bias.add_assign(&g.bias)?;
                Ok(g.input)
            }
            Layer::BatchNorm(l) => {
                let cache = l.cache.as_ref().ok_or_else(|| missing_cache("batch_norm"))?;
                let g = batch_norm_backward(cache, &l.params.gamma, grad_out)?;
                l.grad_gamma.add_assign(&g.gamma)?;
                l.grad_beta.add_assign(&g.beta)?;
                Ok(g.input)
            }
            Layer::Relu { input } => {
                let input = input.as_ref().ok_or_else(|| missing_cache("relu"))?;
                relu_backward(input, grad_out)
            }
            Layer::MaxPool {
                input_shape, argmax, ..
            } => {
                let s = input_shape.ok_or_else(|| missing_cache("max_pool"))?;
                max_pool2d_backward(s, argmax, grad_out)
            }
            Layer::AvgPool {
                window,
                stride,
                input_shape,
            } => {
                let s = input_shape.ok_or_else(|| missing_cache("avg_pool"))?;
                avg_pool2d_backward(s, (*window, *window), *stride, grad_out)
            }
            Layer::GlobalAvgPool { input_shape } => {
                let s = input_shape.ok_or_else(|| missing_cache("global_avg_pool"))?;
                global_avg_pool_backward(s, grad_out)
            }
            Layer::Linear(l) => {
                let input = l.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
                let g = linear_backward(input, &l.params, grad_out)?;
                l.grad_weight.add_assign(&g.weight)?;
                l.grad_bias.add_assign(&g.bias)?;
                Ok(g.input)
            }
            Layer::DenseBlock(b) => b.backward(grad_out),
            Layer::Sequential(s) => s.backward(grad_out),
        }
    }

    /// Visits `(value, grad)` pairs of every trainable tensor in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.params.kernels, &mut l.grad_kernels);
                f(&mut l.params.bias, &mut l.grad_bias);
            }
            Layer::BatchNorm(l) => {
                f(&mut l.params.gamma, &mut l.grad_gamma);
                f(&mut l.params.beta, &mut l.grad_beta);
            }
            Layer::Linear(l) => {
                f(&mut l.params.weight, &mut l.grad_weight);
                f(&mut l.params.bias, &mut l.grad_bias);
            }
            Layer::DenseBlock(b) => b.layers.iter_mut().for_each(|l| l.visit_params(f)),
            Layer::Sequential(s) => s.visit_params(f),
            Layer::Relu { .. } | Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }

    /// Visits every persisted tensor: parameters, then batch-norm running
    /// statistics, layer by layer.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        match self {
            Layer::Conv(l) => {
                f(&mut l.params.kernels);
                f(&mut l.params.bias);
            }
            Layer::BatchNorm(l) => {
                f(&mut l.params.gamma);
                f(&mut l.params.beta);
                f(&mut l.params.running_mean);
                f(&mut l.params.running_var);
            }
            Layer::Linear(l) => {
                f(&mut l.params.weight);
                f(&mut l.params.bias);
            }
            Layer::DenseBlock(b) => b.layers.iter_mut().for_each(|l| l.visit_state(f)),
            Layer::Sequential(s) => s.visit_state(f),
            Layer::Relu { .. } | Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }

    pub fn visit_batch_norm(&mut self, f: &mut dyn FnMut(&mut BatchNormParams)) {
        match self {
            Layer::BatchNorm(l) => f(&mut l.params),
            Layer::DenseBlock(b) => b.layers.iter_mut().for_each(|l| l.visit_batch_norm(f)),
            Layer::Sequential(s) => s.visit_batch_norm(f),
            _ => {}
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |v, _| n += v.len());
        n
    }
}

/// Named layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<(String, Layer)>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) {
        self.layers.push((name.into(), layer));
    }

    pub fn with(mut self, name: impl Into<String>, layer: Layer) -> Self {
        self.push(name, layer);
        self
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut s = input;
        for (name, l) in &self.layers {
            s = l.output_shape(s).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        }
        Ok(s)
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = input.clone();
        for (name, l) in &mut self.layers {
            x = l.forward(&x, mode).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
                other => other,
            })?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        for (_, l) in &mut self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for (_, l) in &mut self.layers {
            l.visit_state(f);
        }
    }

    pub fn visit_batch_norm(&mut self, f: &mut dyn FnMut(&mut BatchNormParams)) {
        for (_, l) in &mut self.layers {
            l.visit_batch_norm(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |v, _| n += v.len());
        n
    }
}

/// BN-ReLU-Conv(1x1, `bottleneck * k`) then BN-ReLU-Conv(3x3, pad 1, `k`).
pub fn dense_layer(in_channels: usize, growth_rate: usize, bottleneck: usize, rng: &mut Rng) -> Sequential {
    let mid = bottleneck * growth_rate;
    Sequential::new()
        .with("bn1", Layer::BatchNorm(BatchNormLayer::new(in_channels)))
        .with("relu1", Layer::relu())
        .with("conv1", Layer::Conv(ConvLayer::he(mid, in_channels, 1, 1, 0, rng)))
        .with("bn2", Layer::BatchNorm(BatchNormLayer::new(mid)))
        .with("relu2", Layer::relu())
        .with("conv2", Layer::Conv(ConvLayer::he(growth_rate, mid, 3, 1, 1, rng)))
}

pub fn dense_block(
    in_channels: usize,
    layers: usize,
    growth_rate: usize,
    bottleneck: usize,
    rng: &mut Rng,
) -> DenseBlock {
    let layers = (0..layers)
        .map(|i| dense_layer(in_channels + i * growth_rate, growth_rate, bottleneck, rng))
        .collect();
    DenseBlock::new(in_channels, growth_rate, layers)
}

/// Output width of a transition: `floor(theta * C)`, at least one channel.
pub fn transition_channels(in_channels: usize, theta: f64) -> Result<usize> {
    let out = (theta * in_channels as f64).floor() as usize;
    if out < 1 {
        return Err(Error::config(format!(
            "compression {theta} leaves no channels out of {in_channels}"
        )));
    }
    Ok(out)
}

/// BN-ReLU-Conv(1x1) to `floor(theta * C)` channels, then 2x2 average pool, stride 2.
pub fn transition(in_channels: usize, theta: f64, rng: &mut Rng) -> Result<Sequential> {
    let out = transition_channels(in_channels, theta)?;
    Ok(Sequential::new()
        .with("bn", Layer::BatchNorm(BatchNormLayer::new(in_channels)))
        .with("relu", Layer::relu())
        .with("conv", Layer::Conv(ConvLayer::he(out, in_channels, 1, 1, 0, rng)))
        .with("pool", Layer::avg_pool(2, 2)))
}

pub fn dense_layer_forward(input: &Tensor, layer: &mut Sequential, mode: Mode) -> Result<Tensor> {
    layer.forward(input, mode)
}

pub fn dense_block_forward(input: &Tensor, block: &mut DenseBlock, mode: Mode) -> Result<Tensor> {
    block.forward(input, mode)
}

pub fn transition_forward(input: &Tensor, layer: &mut Sequential, mode: Mode) -> Result<Tensor> {
    layer.forward(input, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    fn collect_params(s: &mut Sequential) -> Vec<Tensor> {
        let mut out = Vec::new();
        s.visit_params(&mut |v, _| out.push(v.clone()));
        out
    }

    #[test]
    fn dense_layer_contract() {
        let mut rng = Rng::new(3);
        for c_in in [1, 5, 12] {
            let mut l = dense_layer(c_in, 4, 4, &mut rng);
            let x = Tensor::normal(Shape::new(2, c_in, 6, 5), 1.0, &mut rng);
            let y = dense_layer_forward(&x, &mut l, Mode::Train).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 4, 6, 5));
        }
    }

    #[test]
    fn dense_layer_gradcheck() {
        let mut rng = Rng::new(4);
        let mut layer = Layer::Sequential(dense_layer(3, 4, 2, &mut rng));
        let x = Tensor::normal(Shape::new(2, 3, 8, 8), 1.0, &mut rng);
        let w = Tensor::normal(Shape::new(2, 4, 8, 8), 1.0, &mut rng);
        layer.forward(&x, Mode::Train).unwrap();
        let gx = layer.backward(&w).unwrap();
        let mut probe = layer.clone();
        let fd = finite_difference_gradient(|x| probe.forward(x, Mode::Train)?.dot(&w), &x, 1e-5).unwrap();
        assert!(max_relative_error(&gx, &fd).unwrap() < 1e-4);
    }

    #[test]
    fn block_channels_and_identity() {
        let mut rng = Rng::new(5);
        let mut empty = dense_block(7, 0, 4, 4, &mut rng);
        let x = Tensor::normal(Shape::new(1, 7, 4, 4), 1.0, &mut rng);
        assert_eq!(dense_block_forward(&x, &mut empty, Mode::Train).unwrap(), x);

        let b = dense_block(64, 6, 32, 4, &mut rng);
        assert_eq!(b.out_channels(), 256);
        let layer = Layer::DenseBlock(b);
        assert_eq!(
            layer.output_shape(Shape::new(1, 64, 56, 56)).unwrap(),
            Shape::new(1, 256, 56, 56)
        );

        let mut small = dense_block(8, 5, 4, 4, &mut rng);
        let x = Tensor::normal(Shape::new(1, 8, 6, 6), 1.0, &mut rng);
        assert_eq!(dense_block_forward(&x, &mut small, Mode::Train).unwrap().shape().c, 28);
    }

    #[test]
    fn ablating_a_layer_changes_only_its_band_and_downstream_inputs() {
        let mut rng = Rng::new(6);
        let block = dense_block(8, 5, 4, 4, &mut rng);
        let x = Tensor::normal(Shape::new(1, 8, 6, 6), 1.0, &mut rng);
        let mut base = Layer::DenseBlock(block.clone());
        let y0 = base.forward(&x, Mode::Infer).unwrap();
        let mut ablated = block.clone();
        ablated.layers[3].visit_params(&mut |v, _| v.fill(0.0));
        let mut ab = Layer::DenseBlock(ablated);
        let y1 = ab.forward(&x, Mode::Infer).unwrap();
        // Layer 3 writes channels 8 + 3*4 .. 8 + 4*4; layer 4 consumes them.
        let bands = |t: &Tensor| split_channels(t, &[20, 4, 4]).unwrap();
        let (b0, b1) = (bands(&y0), bands(&y1));
        assert_eq!(b0[0], b1[0]);
        assert_ne!(b0[1], b1[1]);
        assert!(b1[1].data().iter().all(|&v| v == 0.0));
        assert_ne!(b0[2], b1[2], "layer 4 must see layer 3's output");
    }

    #[test]
    fn block_backward_gradcheck() {
        let mut rng = Rng::new(7);
        let mut layer = Layer::DenseBlock(dense_block(2, 3, 2, 2, &mut rng));
        let x = Tensor::normal(Shape::new(2, 2, 5, 5), 1.0, &mut rng);
        let w = Tensor::normal(Shape::new(2, 8, 5, 5), 1.0, &mut rng);
        layer.forward(&x, Mode::Train).unwrap();
        let gx = layer.backward(&w).unwrap();
        let mut probe = layer.clone();
        let fd = finite_difference_gradient(|x| probe.forward(x, Mode::Train)?.dot(&w), &x, 1e-5).unwrap();
        assert!(max_relative_error(&gx, &fd).unwrap() < 1e-4);
    }

    #[test]
    fn transition_shapes_and_constant_input() {
        let mut rng = Rng::new(8);
        let t = transition(256, 0.5, &mut rng).unwrap();
        assert_eq!(
            t.output_shape(Shape::new(1, 256, 56, 56)).unwrap(),
            Shape::new(1, 128, 28, 28)
        );
        let t1 = transition(10, 1.0, &mut rng).unwrap();
        assert_eq!(
            t1.output_shape(Shape::new(1, 10, 7, 7)).unwrap(),
            Shape::new(1, 10, 3, 3)
        );
        assert!(matches!(transition(1, 0.5, &mut rng), Err(Error::Config(_))));

        // Infer-mode BN with default statistics is (x)/sqrt(1+eps); with a
        // constant positive input the 1x1 conv output is constant per channel.
        let mut t = transition(3, 1.0, &mut rng).unwrap();
        let x = Tensor::full(Shape::new(1, 3, 4, 4), 2.0);
        let y = transition_forward(&x, &mut t, Mode::Infer).unwrap();
        let v = 2.0 / (1.0 + 1e-5f64).sqrt();
        let Layer::Conv(conv) = &t.layers[2].1 else { panic!() };
        for o in 0..3 {
            let expect: f64 =
                (0..3).map(|i| conv.params.kernels.at(o, i, 0, 0) * v).sum::<f64>() + conv.params.bias.data()[o];
            for &got in y.plane(0, o) {
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_grad_and_visit_order_stable() {
        let mut rng = Rng::new(9);
        let mut s = dense_layer(3, 2, 2, &mut rng);
        let a = collect_params(&mut s);
        let b = collect_params(&mut s.clone());
        assert_eq!(a, b);
        s.forward(&Tensor::normal(Shape::new(2, 3, 3, 3), 1.0, &mut rng), Mode::Train)
            .unwrap();
        s.backward(&Tensor::full(Shape::new(2, 2, 3, 3), 1.0)).unwrap();
        let mut nonzero = false;
        s.visit_params(&mut |_, g| nonzero |= g.data().iter().any(|&v| v != 0.0));
        assert!(nonzero);
        s.zero_grad();
        s.visit_params(&mut |_, g| assert!(g.data().iter().all(|&v| v == 0.0)));
    }
}
