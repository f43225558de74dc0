//! Seeded finite-difference checks of every backward pass, shared by the
//! test suite and the command line.

use crate::densenet::{build_densenet, DenseNetConfig};
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::losses::{
    detection_loss, detection_loss_backward, mask_loss, mask_loss_backward, AnchorPrediction, AnchorTarget, LossConfig,
};
use crate::nn::{
    avg_pool2d, avg_pool2d_backward, batch_norm_backward, batch_norm_cached, conv2d, conv2d_backward, global_avg_pool,
    global_avg_pool_backward, linear, linear_backward, max_pool2d, max_pool2d_backward, relu, relu_backward,
    upsample_nearest, upsample_nearest_backward, BatchNormParams, ConvParams, LinearParams, Mode, Pool2d,
};
use crate::pipeline::classifier::softmax_cross_entropy;
use crate::pipeline::detector::{DetectorBatch, DetectorConfig, MiniDetector};
use crate::pipeline::TrainConfig;
use crate::rng::{derive_seed, Rng};
use crate::roi::{roi_align, roi_align_backward, roi_pool, roi_pool_backward, RoIBox, RoiSpec};
use crate::synth::{generate_dataset, Case, DatasetSpec};
use crate::tensor::{finite_difference_gradient, max_relative_error, Shape, Tensor};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const SUITE_SEED: u64 = 0x6772_6164;

type Pairs = Vec<(Tensor, Tensor)>;
type CheckFn = fn(&mut Rng, f64) -> Result<Pairs>;

struct Check {
    name: &'static str,
    tolerance: f64,
    eps: f64,
    run: CheckFn,
}

const CHECKS: [Check; 15] = [
    Check {
        name: "conv2d",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_conv,
    },
    Check {
        name: "batch_norm",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_batch_norm,
    },
    Check {
        name: "relu",
        tolerance: OP_TOLERANCE,
        eps: 1e-6,
        run: check_relu,
    },
    Check {
        name: "max_pool2d",
        tolerance: OP_TOLERANCE,
        eps: 1e-6,
        run: check_max_pool,
    },
    Check {
        name: "avg_pool2d",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_avg_pool,
    },
    Check {
        name: "global_avg_pool",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_global_pool,
    },
    Check {
        name: "upsample_nearest",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_upsample,
    },
    Check {
        name: "linear",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_linear,
    },
    Check {
        name: "roi_align",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_roi_align,
    },
    Check {
        name: "roi_pool",
        tolerance: OP_TOLERANCE,
        eps: 1e-6,
        run: check_roi_pool,
    },
    Check {
        name: "detection_loss",
        tolerance: OP_TOLERANCE,
        eps: 1e-6,
        run: check_detection_loss,
    },
    Check {
        name: "mask_loss",
        tolerance: OP_TOLERANCE,
        eps: 1e-6,
        run: check_mask_loss,
    },
    Check {
        name: "softmax_cross_entropy",
        tolerance: OP_TOLERANCE,
        eps: 1e-5,
        run: check_cross_entropy,
    },
    Check {
        name: "micro_densenet",
        tolerance: NETWORK_TOLERANCE,
        eps: 1e-5,
        run: check_network,
    },
    Check {
        name: "mini_detector",
        tolerance: NETWORK_TOLERANCE,
        eps: 1e-5,
        run: check_detector,
    },
];

pub fn op_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Seeded instances per operation.
    pub cases: usize,
    /// Replaces every operation's default step.
    pub eps: Option<f64>,
    /// Test hook: corrupts the analytic gradient of the named operation.
    pub broken: Option<String>,
    /// Restricts the run to these operations; empty runs all.
    pub only: Vec<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            cases: 5,
            eps: None,
            broken: None,
            only: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub eps: f64,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<OpReport>> {
    if opts.cases == 0 {
        return Err(Error::config("gradcheck needs at least one case per operation"));
    }
    if let Some(eps) = opts.eps {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::config(format!("eps must be positive and finite, got {eps}")));
        }
    }
    for name in opts.only.iter().chain(&opts.broken) {
        if !CHECKS.iter().any(|c| c.name == name) {
            return Err(Error::config(format!("unknown operation {name:?}")));
        }
    }
    let mut out = Vec::new();
    for (k, check) in CHECKS.iter().enumerate() {
        if !opts.only.is_empty() && !opts.only.iter().any(|n| n == check.name) {
            continue;
        }
        let eps = opts.eps.unwrap_or(check.eps);
        let broken = opts.broken.as_deref() == Some(check.name);
        let mut worst = 0.0f64;
        for case in 0..opts.cases {
            let mut rng = Rng::new(derive_seed(derive_seed(SUITE_SEED, k as u64), case as u64));
            for (analytic, fd) in (check.run)(&mut rng, eps)? {
                let analytic = if broken {
                    analytic.map(|v| 1.5 * v + 0.1)
                } else {
                    analytic
                };
                worst = worst.max(max_relative_error(&analytic, &fd)?);
            }
        }
        out.push(OpReport {
            op: check.name,
            cases: opts.cases,
            eps,
            max_relative_error: worst,
            tolerance: check.tolerance,
        });
    }
    Ok(out)
}

fn uniform(rng: &mut Rng, shape: Shape) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn check_conv(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let (k, stride, pad) = [(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 2, 1)][rng.below(4)];
    let p = ConvParams::new(
        uniform(rng, Shape::new(3, 2, k, k)),
        uniform(rng, Shape::new(1, 3, 1, 1)),
        stride,
        pad,
    )?;
    let x = uniform(rng, Shape::new(2, 2, 5, 6));
    let g = uniform(rng, p.output_shape(x.shape())?);
    let grads = conv2d_backward(&x, &p, &g)?;
    let fd_x = finite_difference_gradient(|t| conv2d(t, &p)?.dot(&g), &x, eps)?;
    let fd_k = finite_difference_gradient(
        |t| {
            conv2d(
                &x,
                &ConvParams {
                    kernels: t.clone(),
                    ..p.clone()
                },
            )?
            .dot(&g)
        },
        &p.kernels,
        eps,
    )?;
    let fd_b = finite_difference_gradient(
        |t| {
            conv2d(
                &x,
                &ConvParams {
                    bias: t.clone(),
                    ..p.clone()
                },
            )?
            .dot(&g)
        },
        &p.bias,
        eps,
    )?;
    Ok(vec![(grads.input, fd_x), (grads.kernels, fd_k), (grads.bias, fd_b)])
}

fn check_batch_norm(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let x = Tensor::uniform(Shape::new(3, 2, 3, 3), -2.0, 2.0, rng);
    let mut p = BatchNormParams::new(2);
    p.gamma = Tensor::uniform(p.gamma.shape(), 0.5, 1.5, rng);
    p.beta = uniform(rng, p.beta.shape());
    let g = uniform(rng, x.shape());
    let (_, cache) = batch_norm_cached(&x, &mut p.clone(), Mode::Train)?;
    let grads = batch_norm_backward(&cache, &p.gamma, &g)?;
    let out = |x: &Tensor, p: &BatchNormParams| batch_norm_cached(x, &mut p.clone(), Mode::Train).map(|r| r.0);
    let fd_x = finite_difference_gradient(|t| out(t, &p)?.dot(&g), &x, eps)?;
    let fd_g = finite_difference_gradient(
        |t| {
            out(
                &x,
                &BatchNormParams {
                    gamma: t.clone(),
                    ..p.clone()
                },
            )?
            .dot(&g)
        },
        &p.gamma,
        eps,
    )?;
    let fd_b = finite_difference_gradient(
        |t| {
            out(
                &x,
                &BatchNormParams {
                    beta: t.clone(),
                    ..p.clone()
                },
            )?
            .dot(&g)
        },
        &p.beta,
        eps,
    )?;
    Ok(vec![(grads.input, fd_x), (grads.gamma, fd_g), (grads.beta, fd_b)])
}

fn check_relu(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    // Keep every input a step away from the kink.
    let x = uniform(rng, Shape::new(2, 3, 4, 4)).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let g = uniform(rng, x.shape());
    let fd = finite_difference_gradient(|t| relu(t).dot(&g), &x, eps)?;
    Ok(vec![(relu_backward(&x, &g)?, fd)])
}

fn check_max_pool(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let pool = [
        Pool2d::new((2, 2), 2),
        Pool2d::new((3, 3), 2).padded(1),
        Pool2d::new((3, 2), 1),
    ][rng.below(3)];
    let x = uniform(rng, Shape::new(2, 2, 6, 7));
    let (y, arg) = max_pool2d(&x, pool)?;
    let g = uniform(rng, y.shape());
    let fd = finite_difference_gradient(|t| max_pool2d(t, pool)?.0.dot(&g), &x, eps)?;
    Ok(vec![(max_pool2d_backward(x.shape(), &arg, &g)?, fd)])
}

fn check_avg_pool(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let (window, stride) = [((2, 2), 2), ((3, 2), 1), ((2, 3), 2)][rng.below(3)];
    let x = uniform(rng, Shape::new(2, 2, 6, 7));
    let y = avg_pool2d(&x, window, stride)?;
    let g = uniform(rng, y.shape());
    let fd = finite_difference_gradient(|t| avg_pool2d(t, window, stride)?.dot(&g), &x, eps)?;
    Ok(vec![(avg_pool2d_backward(x.shape(), window, stride, &g)?, fd)])
}

fn check_global_pool(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let x = uniform(rng, Shape::new(2, 3, 4, 5));
    let g = uniform(rng, Shape::new(2, 3, 1, 1));
    let fd = finite_difference_gradient(|t| global_avg_pool(t)?.dot(&g), &x, eps)?;
    Ok(vec![(global_avg_pool_backward(x.shape(), &g)?, fd)])
}

fn check_upsample(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let factor = 2 + rng.below(2);
    let x = uniform(rng, Shape::new(1, 2, 3, 4));
    let g = uniform(rng, Shape::new(1, 2, 3 * factor, 4 * factor));
    let fd = finite_difference_gradient(|t| upsample_nearest(t, factor).dot(&g), &x, eps)?;
    Ok(vec![(upsample_nearest_backward(x.shape(), factor, &g)?, fd)])
}

fn check_linear(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let p = LinearParams::new(
        uniform(rng, Shape::new(3, 5, 1, 1)),
        uniform(rng, Shape::new(1, 3, 1, 1)),
    )?;
    let x = uniform(rng, Shape::new(4, 5, 1, 1));
    let g = uniform(rng, Shape::new(4, 3, 1, 1));
    let grads = linear_backward(&x, &p, &g)?;
    let fd_x = finite_difference_gradient(|t| linear(t, &p)?.dot(&g), &x, eps)?;
    let fd_w = finite_difference_gradient(
        |t| {
            linear(
                &x,
                &LinearParams {
                    weight: t.clone(),
                    ..p.clone()
                },
            )?
            .dot(&g)
        },
        &p.weight,
        eps,
    )?;
    let fd_b = finite_difference_gradient(
        |t| {
            linear(
                &x,
                &LinearParams {
                    bias: t.clone(),
                    ..p.clone()
                },
            )?
            .dot(&g)
        },
        &p.bias,
        eps,
    )?;
    Ok(vec![(grads.input, fd_x), (grads.weight, fd_w), (grads.bias, fd_b)])
}

fn random_rois(rng: &mut Rng, batch: usize, count: usize, h: f64, w: f64) -> Vec<RoIBox> {
    (0..count)
        .map(|i| {
            let x1 = rng.range(-1.0, w - 1.0);
            let y1 = rng.range(-1.0, h - 1.0);
            RoIBox::new(i % batch, x1, y1, x1 + rng.range(0.0, 4.0), y1 + rng.range(0.0, 4.0))
        })
        .collect()
}

fn check_roi_align(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let f = uniform(rng, Shape::new(2, 2, 6, 7));
    let rois = random_rois(rng, 2, 3, 6.0, 7.0);
    let spec = RoiSpec::new(1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3))?;
    let g = uniform(rng, Shape::new(3, 2, spec.out_h, spec.out_w));
    let fd = finite_difference_gradient(|t| roi_align(t, &rois, &spec)?.dot(&g), &f, eps)?;
    Ok(vec![(roi_align_backward(f.shape(), &rois, &spec, &g)?, fd)])
}

fn check_roi_pool(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let f = uniform(rng, Shape::new(2, 2, 6, 7));
    let rois = random_rois(rng, 2, 3, 6.0, 7.0);
    let spec = RoiSpec::new(1 + rng.below(3), 1 + rng.below(3), 1)?;
    let (y, arg) = roi_pool(&f, &rois, &spec)?;
    let g = uniform(rng, y.shape());
    let fd = finite_difference_gradient(|t| roi_pool(t, &rois, &spec)?.0.dot(&g), &f, eps)?;
    Ok(vec![(roi_pool_backward(f.shape(), &arg, &g)?, fd)])
}

fn check_detection_loss(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let n = 10;
    let cfg = LossConfig {
        n_cls: n,
        n_box: 4,
        ..LossConfig::default()
    };
    let mut x = Vec::with_capacity(5 * n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        x.push(rng.range(0.05, 0.95));
        for _ in 0..4 {
            x.push(rng.range(-3.0, 3.0));
        }
        targets.push(if rng.uniform() < 0.5 {
            AnchorTarget::object([
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
            ])
        } else {
            AnchorTarget::background()
        });
    }
    let x = Tensor::from_vec(Shape::new(1, 5 * n, 1, 1), x)?;
    let unpack = |t: &Tensor| -> Vec<AnchorPrediction> {
        t.data()
            .chunks(5)
            .map(|c| AnchorPrediction {
                p: c[0],
                t: [c[1], c[2], c[3], c[4]],
            })
            .collect()
    };
    let grads = detection_loss_backward(&unpack(&x), &targets, &cfg)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| std::iter::once(g.p).chain(g.t)).collect();
    let fd = finite_difference_gradient(
        |t| {
            let (c, b) = detection_loss(&unpack(t), &targets, &cfg)?;
            Ok(c + b)
        },
        &x,
        eps,
    )?;
    Ok(vec![(Tensor::from_vec(x.shape(), analytic)?, fd)])
}

fn check_mask_loss(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let m = 4 + rng.below(4);
    let cfg = LossConfig {
        mask_size: m,
        ..LossConfig::default()
    };
    let pred = Tensor::uniform(Shape::new(1, 1, m, m), 0.05, 0.95, rng);
    let target = Mask::from_bits(m, m, (0..m * m).map(|_| rng.uniform() < 0.5).collect())?;
    let fd = finite_difference_gradient(|t| mask_loss(t, &target, &cfg), &pred, eps)?;
    Ok(vec![(mask_loss_backward(&pred, &target, &cfg)?, fd)])
}

fn check_cross_entropy(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let x = Tensor::normal(Shape::new(4, 3, 1, 1), 2.0, rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
    let (_, analytic) = softmax_cross_entropy(&x, &labels)?;
    let fd = finite_difference_gradient(|t| Ok(softmax_cross_entropy(t, &labels)?.0), &x, eps)?;
    Ok(vec![(analytic, fd)])
}

/// Central difference of `loss` in the flat parameter coordinates `picks`
/// of a model reached through `visit`.
fn sampled_parameter_gradient<M>(
    model: &mut M,
    picks: &[(usize, usize)],
    eps: f64,
    visit: fn(&mut M, &mut dyn FnMut(&mut Tensor, &mut Tensor)),
    mut loss: impl FnMut(&mut M) -> Result<f64>,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(picks.len());
    for &(t, i) in picks {
        let bump = |model: &mut M, delta: f64| {
            let mut k = 0;
            visit(model, &mut |w, _| {
                if k == t {
                    w.data_mut()[i] += delta;
                }
                k += 1;
            });
        };
        bump(model, eps);
        let up = loss(model)?;
        bump(model, -2.0 * eps);
        let down = loss(model)?;
        bump(model, eps);
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::from_vec(Shape::new(1, out.len(), 1, 1), out)
}

fn pick_parameters(grads: &[Tensor], count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let t = rng.below(grads.len());
            (t, rng.below(grads[t].len()))
        })
        .collect()
}

/// The micro topology (k = 8, blocks [2, 2]) on a 16x16 input, so the
/// input-gradient sweep stays cheap.
fn check_network(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let cfg = DenseNetConfig {
        input_size: (16, 16),
        ..DenseNetConfig::micro()
    };
    let mut net = build_densenet(&cfg, rng.next_u64())?;
    let x = Tensor::normal(Shape::new(2, 1, 16, 16), 1.0, rng);
    let w = Tensor::normal(Shape::new(2, cfg.num_classes, 1, 1), 1.0, rng);
    net.zero_grad();
    net.forward(&x, Mode::Train)?;
    let gx = net.backward(&w)?;
    let mut grads = Vec::new();
    net.visit_params(&mut |_, g| grads.push(g.clone()));
    let picks = pick_parameters(&grads, 20, rng);
    let analytic: Vec<f64> = picks.iter().map(|&(t, i)| grads[t].data()[i]).collect();
    let mut probe = net.clone();
    let fd_x = finite_difference_gradient(|t| probe.forward(t, Mode::Train)?.dot(&w), &x, eps)?;
    let fd_p = sampled_parameter_gradient(
        &mut net,
        &picks,
        eps,
        |n, f| n.visit_params(f),
        |n| n.forward(&x, Mode::Train)?.dot(&w),
    )?;
    Ok(vec![
        (gx, fd_x),
        (Tensor::from_vec(Shape::new(1, picks.len(), 1, 1), analytic)?, fd_p),
    ])
}

fn detector_cases() -> Result<Vec<Case>> {
    let spec = DatasetSpec {
        count: 5,
        benign_count: 2,
        malignant_count: 3,
        master_seed: 11,
        ..DatasetSpec::default()
    };
    let d = generate_dataset(&spec)?;
    Ok(d.train.into_iter().chain(d.validation).collect())
}

/// Total detector loss on ground-truth rois, at five sampled parameters.
fn check_detector(rng: &mut Rng, eps: f64) -> Result<Pairs> {
    let cases = detector_cases()?;
    let a = rng.below(cases.len());
    let b = (a + 1 + rng.below(cases.len() - 1)) % cases.len();
    let batch = DetectorBatch::from_cases(&[&cases[a], &cases[b]])?;
    let cfg = DetectorConfig {
        head_channels: 8,
        mask_channels: 4,
        ..DetectorConfig::default()
    };
    let mut det = MiniDetector::new(&cfg, rng.next_u64())?;
    let train = TrainConfig::default();
    det.zero_grad();
    det.loss(&batch, &train, 0, true)?;
    let mut grads = Vec::new();
    det.visit_params(&mut |_, g| grads.push(g.clone()));
    let picks = pick_parameters(&grads, 5, rng);
    let analytic: Vec<f64> = picks.iter().map(|&(t, i)| grads[t].data()[i]).collect();
    let fd = sampled_parameter_gradient(
        &mut det,
        &picks,
        eps,
        |d, f| d.visit_params(f),
        |d| {
            let (c, bx, m) = d.loss(&batch, &train, 0, false)?;
            Ok(c + bx + m)
        },
    )?;
    Ok(vec![(
        Tensor::from_vec(Shape::new(1, picks.len(), 1, 1), analytic)?,
        fd,
    )])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_hook_fails_only_its_op() {
        let opts = GradcheckOptions {
            cases: 1,
            broken: Some("relu".into()),
            only: vec!["relu".into(), "linear".into()],
            ..GradcheckOptions::default()
        };
        let r = run_gradcheck(&opts).unwrap();
        assert_eq!(r.len(), 2);
        assert!(!r.iter().find(|o| o.op == "relu").unwrap().passed());
        assert!(r.iter().find(|o| o.op == "linear").unwrap().passed());
    }

    #[test]
    fn options_are_validated() {
        let bad = |o: GradcheckOptions| run_gradcheck(&o).is_err();
        assert!(bad(GradcheckOptions {
            cases: 0,
            ..GradcheckOptions::default()
        }));
        assert!(bad(GradcheckOptions {
            eps: Some(0.0),
            ..GradcheckOptions::default()
        }));
        assert!(bad(GradcheckOptions {
            only: vec!["nope".into()],
            ..GradcheckOptions::default()
        }));
    }

    #[test]
    fn eps_override_is_reported() {
        let opts = GradcheckOptions {
            cases: 1,
            eps: Some(1e-3),
            only: vec!["avg_pool2d".into()],
            ..GradcheckOptions::default()
        };
        let r = run_gradcheck(&opts).unwrap();
        assert_eq!(r[0].eps, 1e-3);
        assert!(r[0].passed());
    }
}
