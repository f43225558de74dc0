//! Densely connected networks: configurations, construction, shape
//! traces and checkpoints.

pub mod checkpoint;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{out_extent, BatchNormParams, LinearParams, Mode, Pool2d};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{
    dense_block, dense_block_forward, dense_layer, dense_layer_forward, transition, transition_channels,
    transition_forward, BatchNormLayer, ConvLayer, DenseBlock, Layer, LinearLayer, Sequential,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub compression: f64,
    pub init_channels: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub bottleneck_width: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        DenseNetConfig::densenet121()
    }
}

impl DenseNetConfig {
    fn table(block_layers: Vec<usize>) -> Self {
        DenseNetConfig {
            growth_rate: 32,
            block_layers,
            compression: 0.5,
            init_channels: 64,
            num_classes: 1000,
            input_size: (224, 224),
            input_channels: 3,
            bottleneck_width: 4,
        }
    }

    pub fn densenet121() -> Self {
        DenseNetConfig::table(vec![6, 12, 24, 16])
    }

    pub fn densenet169() -> Self {
        DenseNetConfig::table(vec![6, 12, 32, 32])
    }

    pub fn densenet201() -> Self {
        DenseNetConfig::table(vec![6, 12, 48, 32])
    }

    pub fn densenet264() -> Self {
        DenseNetConfig::table(vec![6, 12, 64, 48])
    }

    /// Small single-channel network that trains on a CPU in minutes.
    pub fn micro() -> Self {
        DenseNetConfig {
            growth_rate: 8,
            block_layers: vec![2, 2],
            compression: 0.5,
            init_channels: 16,
            num_classes: 2,
            input_size: (64, 64),
            input_channels: 1,
            bottleneck_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("growth_rate", self.growth_rate),
            ("init_channels", self.init_channels),
            ("num_classes", self.num_classes),
            ("input height", self.input_size.0),
            ("input width", self.input_size.1),
            ("input_channels", self.input_channels),
            ("bottleneck_width", self.bottleneck_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(Error::config(
                "block_layers must be a non-empty list of positive counts",
            ));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(format!(
                "compression {} outside (0, 1]",
                self.compression
            )));
        }
        Ok(())
    }
}

/// One row of the shape trace: a top-level layer and its output extents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TraceEntry {
    fn new(name: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        TraceEntry {
            name: name.into(),
            channels,
            height,
            width,
        }
    }
}

fn named(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Shape(format!("{name}: {e}"))
}

/// Shape trace derived from the configuration by extent arithmetic alone,
/// without building any layer.
pub fn shape_trace(cfg: &DenseNetConfig) -> Result<Vec<TraceEntry>> {
    cfg.validate()?;
    let (mut h, mut w) = cfg.input_size;
    let mut trace = Vec::new();
    h = out_extent(h, 7, 2, 3).map_err(named("stem.conv"))?;
    w = out_extent(w, 7, 2, 3).map_err(named("stem.conv"))?;
    let mut c = cfg.init_channels;
    trace.push(TraceEntry::new("stem.conv", c, h, w));
    h = out_extent(h, 3, 2, 1).map_err(named("stem.pool"))?;
    w = out_extent(w, 3, 2, 1).map_err(named("stem.pool"))?;
    trace.push(TraceEntry::new("stem.pool", c, h, w));
    let blocks = cfg.block_layers.len();
    for (i, &layers) in cfg.block_layers.iter().enumerate() {
        c += layers * cfg.growth_rate;
        trace.push(TraceEntry::new(format!("block{}", i + 1), c, h, w));
        if i + 1 < blocks {
            let name = format!("transition{}", i + 1);
            c = transition_channels(c, cfg.compression)?;
            h = out_extent(h, 2, 2, 0).map_err(named(&name))?;
            w = out_extent(w, 2, 2, 0).map_err(named(&name))?;
            trace.push(TraceEntry::new(name, c, h, w));
        }
    }
    trace.push(TraceEntry::new("global_pool", c, 1, 1));
    trace.push(TraceEntry::new("classifier", cfg.num_classes, 1, 1));
    Ok(trace)
}

/// Trainable parameter count by channel arithmetic. Convolutions and the
/// classifier carry a bias; each batch norm has a scale and a shift.
pub fn count_params(cfg: &DenseNetConfig) -> Result<usize> {
    cfg.validate()?;
    let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
    let bn = |c: usize| 2 * c;
    let k = cfg.growth_rate;
    let mid = cfg.bottleneck_width * k;
    let mut c = cfg.init_channels;
    let mut total = conv(c, cfg.input_channels, 7) + bn(c);
    let blocks = cfg.block_layers.len();
    for (b, &layers) in cfg.block_layers.iter().enumerate() {
        for _ in 0..layers {
            total += bn(c) + conv(mid, c, 1) + bn(mid) + conv(k, mid, 3);
            c += k;
        }
        if b + 1 < blocks {
            let out = transition_channels(c, cfg.compression)?;
            total += bn(c) + conv(out, c, 1);
            c = out;
        }
    }
    total += bn(c) + cfg.num_classes * c + cfg.num_classes;
    Ok(total)
}

/// Stem: 7x7 stride-2 conv (pad 3), BN, ReLU, 3x3 stride-2 max pool (pad 1).
pub fn stem(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Vec<(String, Layer)> {
    vec![
        (
            "stem.conv".into(),
            Layer::Conv(ConvLayer::he(out_channels, in_channels, 7, 2, 3, rng)),
        ),
        ("stem.bn".into(), Layer::BatchNorm(BatchNormLayer::new(out_channels))),
        ("stem.relu".into(), Layer::relu()),
        ("stem.pool".into(), Layer::max_pool(Pool2d::new((3, 3), 2).padded(1))),
    ]
}

/// A built network: the composition `g_N(...g_1(x))` of its top-level layers.
#[derive(Debug, Clone)]
pub struct Network {
    config: DenseNetConfig,
    body: Sequential,
    trace: Vec<TraceEntry>,
}

const TRACED_SKIP: [&str; 4] = ["stem.bn", "stem.relu", "final.bn", "final.relu"];

pub fn build_densenet(cfg: &DenseNetConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut body = Sequential::new();
    for (name, layer) in stem(cfg.input_channels, cfg.init_channels, &mut rng) {
        body.push(name, layer);
    }
    let mut c = cfg.init_channels;
    let blocks = cfg.block_layers.len();
    for (i, &layers) in cfg.block_layers.iter().enumerate() {
        let block = dense_block(c, layers, cfg.growth_rate, cfg.bottleneck_width, &mut rng);
        c = block.out_channels();
        body.push(format!("block{}", i + 1), Layer::DenseBlock(block));
        if i + 1 < blocks {
            let t = transition(c, cfg.compression, &mut rng)?;
            c = transition_channels(c, cfg.compression)?;
            body.push(format!("transition{}", i + 1), Layer::Sequential(t));
        }
    }
    body.push("final.bn", Layer::BatchNorm(BatchNormLayer::new(c)));
    body.push("final.relu", Layer::relu());
    body.push("global_pool", Layer::global_avg_pool());
    body.push(
        "classifier",
        Layer::Linear(LinearLayer::new(LinearParams::he_init(c, cfg.num_classes, &mut rng))),
    );

    let (h, w) = cfg.input_size;
    let mut shape = Shape::new(1, cfg.input_channels, h, w);
    let mut trace = Vec::new();
    for (name, layer) in &body.layers {
        shape = layer.output_shape(shape).map_err(named(name))?;
        if !TRACED_SKIP.contains(&name.as_str()) {
            trace.push(TraceEntry::new(name.clone(), shape.c, shape.h, shape.w));
        }
    }
    Ok(Network {
        config: cfg.clone(),
        body,
        trace,
    })
}

impl Network {
    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn body_mut(&mut self) -> &mut Sequential {
        &mut self.body
    }

    /// Logits of shape `(N, num_classes, 1, 1)`.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = input.shape();
        let (h, w) = self.config.input_size;
        if (s.c, s.h, s.w) != (self.config.input_channels, h, w) {
            return Err(Error::shape(format!(
                "network expects {}x{}x{} inputs, got {s}",
                self.config.input_channels, h, w
            )));
        }
        self.body.forward(input, mode)
    }

    /// Back-propagates a logit gradient from the last training forward,
    /// accumulating parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        self.body.backward(grad_logits)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &mut Tensor)) {
        self.body.visit_params(f)
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.body.visit_state(f)
    }

    pub fn visit_batch_norm(&mut self, f: &mut dyn FnMut(&mut BatchNormParams)) {
        self.body.visit_batch_norm(f)
    }

    pub fn zero_grad(&mut self) {
        self.body.zero_grad()
    }

    pub fn param_count(&mut self) -> usize {
        self.body.param_count()
    }

    pub fn state_tensors(&mut self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_state(&mut |t| out.push(t.clone()));
        out
    }

    /// Overwrites parameters and running statistics in visiting order.
    pub fn load_state(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut it = tensors.iter();
        let mut err = None;
        let mut count = 0;
        self.visit_state(&mut |t| {
            count += 1;
            match it.next() {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) if err.is_none() => {
                    err = Some(Error::shape(format!(
                        "state tensor {} has shape {}, expected {}",
                        count - 1,
                        src.shape(),
                        t.shape()
                    )))
                }
                None if err.is_none() => err = Some(Error::shape("checkpoint has too few tensors")),
                _ => {}
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::shape(format!("checkpoint has more than {count} tensors")));
        }
        Ok(())
    }

    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(&self.config)?,
            tensors: self.state_tensors(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
        let cfg: DenseNetConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut net = build_densenet(&cfg, 0)?;
        net.load_state(&ckpt.tensors)?;
        Ok(net)
    }
}
