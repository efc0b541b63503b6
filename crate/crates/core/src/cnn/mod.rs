//! Lightweight per-view CNN.
//!
//! conv 3x3 (16) -> ReLU -> maxpool 9x9/2 -> batchnorm -> conv 3x3 (32) ->
//! ReLU -> maxpool 9x9/8 -> batchnorm -> dense 1024 + ReLU -> dense 2 ->
//! softmax. Class 1 is bona fide, class 0 attack.
//!
//! The model is generic over the float type: training runs in `f32`, the
//! gradient checks run the identical code in `f64`.

mod checkpoint;
pub mod layers;
mod train;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    predict_view, read_train_log, train_view, write_train_log, EpochLog, Sample, TrainConfig, TrainedView,
    ViewPrediction,
};

use layers::{BnCache, ConvShape};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const CLASSES: usize = 2;

pub trait Real: Float + FromPrimitive + Send + Sync + std::fmt::Debug + 'static {}
impl<T: Float + FromPrimitive + Send + Sync + std::fmt::Debug + 'static> Real for T {}

#[inline]
fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("finite constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// Layer sizes. [`ArchConfig::standard`] is the published network; smaller
/// settings exist for gradient checks and quick experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub pool1: PoolSpec,
    pub pool2: PoolSpec,
    pub hidden: usize,
}

impl ArchConfig {
    pub fn standard(input_size: usize, in_channels: usize) -> Self {
        Self {
            input_size,
            in_channels,
            conv1_filters: 16,
            conv2_filters: 32,
            kernel: 3,
            pool1: PoolSpec { window: 9, stride: 2 },
            pool2: PoolSpec { window: 9, stride: 8 },
            hidden: 1024,
        }
    }

    pub fn shapes(&self) -> Result<LayerShapes> {
        let pool = |d: usize, p: PoolSpec, layer: &'static str| {
            layers::pooled_extent(d, p.window, p.stride).ok_or_else(|| Error::Shape {
                layer,
                message: format!("{d}x{d} input smaller than {0}x{0} pool window", p.window),
            })
        };
        if self.kernel % 2 == 0 || self.input_size == 0 || self.in_channels == 0 {
            return Err(Error::Shape { layer: "conv1", message: "invalid kernel, input size or channel count".into() });
        }
        let s = self.input_size;
        let p1 = pool(s, self.pool1, "pool1")?;
        let p2 = pool(p1, self.pool2, "pool2")?;
        Ok(LayerShapes {
            conv1: (s, s, self.conv1_filters),
            pool1: (p1, p1, self.conv1_filters),
            conv2: (p1, p1, self.conv2_filters),
            pool2: (p2, p2, self.conv2_filters),
            flat: p2 * p2 * self.conv2_filters,
            hidden: self.hidden,
            output: CLASSES,
        })
    }

    fn param_lengths(&self) -> Result<[usize; PARAM_COUNT]> {
        let sh = self.shapes()?;
        let k2 = self.kernel * self.kernel;
        let (c1, c2) = (self.conv1_filters, self.conv2_filters);
        Ok([
            c1 * self.in_channels * k2,
            c1,
            c1,
            c1,
            c2 * c1 * k2,
            c2,
            c2,
            c2,
            self.hidden * sh.flat,
            self.hidden,
            CLASSES * self.hidden,
            CLASSES,
        ])
    }
}

/// Output extents (height, width, channels) of every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShapes {
    pub conv1: (usize, usize, usize),
    pub pool1: (usize, usize, usize),
    pub conv2: (usize, usize, usize),
    pub pool2: (usize, usize, usize),
    pub flat: usize,
    pub hidden: usize,
    pub output: usize,
}

pub const PARAM_COUNT: usize = 12;
pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const BN1_GAMMA: usize = 2;
pub const BN1_BETA: usize = 3;
pub const CONV2_W: usize = 4;
pub const CONV2_B: usize = 5;
pub const BN2_GAMMA: usize = 6;
pub const BN2_BETA: usize = 7;
pub const FC1_W: usize = 8;
pub const FC1_B: usize = 9;
pub const FC2_W: usize = 10;
pub const FC2_B: usize = 11;

pub const PARAM_NAMES: [&str; PARAM_COUNT] = [
    "conv1.weight",
    "conv1.bias",
    "bn1.gamma",
    "bn1.beta",
    "conv2.weight",
    "conv2.bias",
    "bn2.gamma",
    "bn2.beta",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Trainable tensors in fixed layer order. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tensors: [Vec<F>; PARAM_COUNT],
}

impl<F: Real> Params<F> {
    pub fn zeros_like(&self) -> Self {
        Self { tensors: std::array::from_fn(|i| vec![F::zero(); self.tensors[i].len()]) }
    }

    /// Whether weight decay applies (conv and dense weights only).
    pub fn decays(index: usize) -> bool {
        matches!(index, CONV1_W | CONV2_W | FC1_W | FC2_W)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Batch-norm running statistics: mean1, var1, mean2, var2.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean1: Vec<F>,
    pub var1: Vec<F>,
    pub mean2: Vec<F>,
    pub var2: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<F> {
    pub view: ViewId,
    pub arch: ArchConfig,
    pub params: Params<F>,
    pub stats: RunningStats<F>,
}

/// NCHW batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<F> {
    dims: [usize; 4],
    data: Vec<F>,
}

impl<F: Real> Tensor4<F> {
    pub fn new(dims: [usize; 4], data: Vec<F>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                layer: "input",
                message: format!("{} values for dims {:?}", data.len(), dims),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape { layer: "input", message: "non-finite value".into() });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    batch: usize,
    input: Vec<F>,
    conv1_act: Vec<F>,
    pool1_arg: Vec<u32>,
    bn1: Option<BnCache<F>>,
    bn1_out: Vec<F>,
    conv2_act: Vec<F>,
    pool2_arg: Vec<u32>,
    bn2: Option<BnCache<F>>,
    flat: Vec<F>,
    hidden_act: Vec<F>,
    pub probs: Vec<F>,
}

impl<F: Real> CnnModel<F> {
    /// Kaiming fan-in initialization; zero biases; BN scale 1, shift 0.
    pub fn new(view: ViewId, arch: ArchConfig, seed: u64) -> Result<Self> {
        let lens = arch.param_lengths()?;
        let sh = arch.shapes()?;
        let k2 = arch.kernel * arch.kernel;
        let fan_in = [arch.in_channels * k2, arch.conv1_filters * k2, sh.flat, arch.hidden];
        let mut r = rng::seeded(seed);
        let mut gauss = |n: usize, fan: usize| -> Vec<F> {
            let sd = (2.0 / fan as f64).sqrt();
            (0..n).map(|_| cast(sd * r.sample::<f64, _>(StandardNormal))).collect()
        };
        let tensors = [
            gauss(lens[CONV1_W], fan_in[0]),
            vec![F::zero(); lens[CONV1_B]],
            vec![F::one(); lens[BN1_GAMMA]],
            vec![F::zero(); lens[BN1_BETA]],
            gauss(lens[CONV2_W], fan_in[1]),
            vec![F::zero(); lens[CONV2_B]],
            vec![F::one(); lens[BN2_GAMMA]],
            vec![F::zero(); lens[BN2_BETA]],
            gauss(lens[FC1_W], fan_in[2]),
            vec![F::zero(); lens[FC1_B]],
            gauss(lens[FC2_W], fan_in[3]),
            vec![F::zero(); lens[FC2_B]],
        ];
        Ok(Self { view, arch, params: Params { tensors }, stats: RunningStats::fresh(&arch) })
    }

    /// Model whose every parameter is zero (BN statistics stay neutral).
    pub fn zeroed(view: ViewId, arch: ArchConfig) -> Result<Self> {
        let lens = arch.param_lengths()?;
        Ok(Self {
            view,
            arch,
            params: Params { tensors: std::array::from_fn(|i| vec![F::zero(); lens[i]]) },
            stats: RunningStats::fresh(&arch),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.tensors.iter().map(Vec::len).sum()
    }

    pub fn shapes(&self) -> LayerShapes {
        self.arch.shapes().expect("validated at construction")
    }

    fn check_input(&self, batch: &Tensor4<F>, mode: Mode) -> Result<()> {
        let [n, c, h, w] = batch.dims;
        let a = &self.arch;
        if c != a.in_channels {
            return Err(Error::Shape {
                layer: "conv1",
                message: format!("expected {} input channels for view {}, got {c}", a.in_channels, self.view),
            });
        }
        if h != a.input_size || w != a.input_size {
            return Err(Error::Shape {
                layer: "conv1",
                message: format!("expected {0}x{0} input, got {h}x{w}", a.input_size),
            });
        }
        if n == 0 || (mode == Mode::Train && n < 2) {
            return Err(Error::Shape { layer: "bn1", message: format!("batch of {n} too small for {mode:?} mode") });
        }
        Ok(())
    }

    /// Forward pass. Train mode normalizes with batch statistics and updates
    /// the running statistics; eval mode is a pure function of the model.
    pub fn forward(&mut self, batch: &Tensor4<F>, mode: Mode) -> Result<ForwardCache<F>> {
        self.check_input(batch, mode)?;
        let mut stats = std::mem::replace(&mut self.stats, RunningStats::empty());
        let out = self.forward_with(&mut stats, batch, mode);
        self.stats = stats;
        Ok(out)
    }

    fn forward_with(&self, stats: &mut RunningStats<F>, batch: &Tensor4<F>, mode: Mode) -> ForwardCache<F> {
        let a = self.arch;
        let sh = self.shapes();
        let n = batch.batch();
        let p = &self.params.tensors;
        let eps = cast::<F>(BN_EPS);
        let momentum = cast::<F>(BN_MOMENTUM);

        let c1 = ConvShape {
            batch: n,
            in_channels: a.in_channels,
            out_channels: a.conv1_filters,
            height: a.input_size,
            width: a.input_size,
            kernel: a.kernel,
        };
        let mut conv1_act = layers::conv_forward(&batch.data, &p[CONV1_W], &p[CONV1_B], c1);
        layers::relu_inplace(&mut conv1_act);
        let (pool1, pool1_arg) =
            layers::maxpool_forward(&conv1_act, n * a.conv1_filters, a.input_size, a.input_size, a.pool1.window, a.pool1.stride);
        let plane1 = sh.pool1.0 * sh.pool1.1;
        let (bn1_out, bn1) = match mode {
            Mode::Train => {
                let (y, cache) = layers::batchnorm_train(
                    &pool1, n, a.conv1_filters, plane1, &p[BN1_GAMMA], &p[BN1_BETA],
                    &mut stats.mean1, &mut stats.var1, momentum, eps,
                );
                (y, Some(cache))
            }
            Mode::Eval => (
                layers::batchnorm_eval(&pool1, n, a.conv1_filters, plane1, &p[BN1_GAMMA], &p[BN1_BETA], &stats.mean1, &stats.var1, eps),
                None,
            ),
        };

        let c2 = ConvShape {
            batch: n,
            in_channels: a.conv1_filters,
            out_channels: a.conv2_filters,
            height: sh.pool1.0,
            width: sh.pool1.1,
            kernel: a.kernel,
        };
        let mut conv2_act = layers::conv_forward(&bn1_out, &p[CONV2_W], &p[CONV2_B], c2);
        layers::relu_inplace(&mut conv2_act);
        let (pool2, pool2_arg) =
            layers::maxpool_forward(&conv2_act, n * a.conv2_filters, sh.pool1.0, sh.pool1.1, a.pool2.window, a.pool2.stride);
        let plane2 = sh.pool2.0 * sh.pool2.1;
        let (flat, bn2) = match mode {
            Mode::Train => {
                let (y, cache) = layers::batchnorm_train(
                    &pool2, n, a.conv2_filters, plane2, &p[BN2_GAMMA], &p[BN2_BETA],
                    &mut stats.mean2, &mut stats.var2, momentum, eps,
                );
                (y, Some(cache))
            }
            Mode::Eval => (
                layers::batchnorm_eval(&pool2, n, a.conv2_filters, plane2, &p[BN2_GAMMA], &p[BN2_BETA], &stats.mean2, &stats.var2, eps),
                None,
            ),
        };

        let mut hidden_act = layers::dense_forward(&flat, &p[FC1_W], &p[FC1_B], n, sh.flat, a.hidden);
        layers::relu_inplace(&mut hidden_act);
        let logits = layers::dense_forward(&hidden_act, &p[FC2_W], &p[FC2_B], n, a.hidden, CLASSES);
        let probs = layers::softmax(&logits, CLASSES);

        ForwardCache {
            batch: n,
            input: batch.data.clone(),
            conv1_act,
            pool1_arg,
            bn1,
            bn1_out,
            conv2_act,
            pool2_arg,
            bn2,
            flat,
            hidden_act,
            probs,
        }
    }

    /// Eval-mode class probabilities without touching running statistics.
    pub fn predict_proba(&self, batch: &Tensor4<F>) -> Result<Vec<F>> {
        self.check_input(batch, Mode::Eval)?;
        let mut stats = self.stats.clone();
        Ok(self.forward_with(&mut stats, batch, Mode::Eval).probs)
    }

    /// Mean cross-entropy of a train-mode forward pass and the gradient of
    /// every parameter.
    pub fn loss_and_gradients(&mut self, batch: &Tensor4<F>, labels: &[usize]) -> Result<(F, Params<F>)> {
        if labels.len() != batch.batch() {
            return Err(Error::Shape { layer: "loss", message: format!("{} labels for batch {}", labels.len(), batch.batch()) });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::validation(format!("label {bad} not in {{0,1}}")));
        }
        let cache = self.forward(batch, Mode::Train)?;
        let loss = cross_entropy(&cache.probs, labels);
        let grads = self.backward(&cache, labels);
        Ok((loss, grads))
    }

    fn backward(&self, cache: &ForwardCache<F>, labels: &[usize]) -> Params<F> {
        let a = self.arch;
        let sh = self.shapes();
        let n = cache.batch;
        let p = &self.params.tensors;
        let mut g = self.params.zeros_like();
        let inv_n = F::one() / F::from_usize(n).unwrap();

        let mut dlogits = cache.probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            dlogits[i * CLASSES + l] = dlogits[i * CLASSES + l] - F::one();
        }
        dlogits.iter_mut().for_each(|v| *v = *v * inv_n);

        let [g_c1w, g_c1b, g_bn1g, g_bn1b, g_c2w, g_c2b, g_bn2g, g_bn2b, g_f1w, g_f1b, g_f2w, g_f2b] = &mut g.tensors;

        let mut dhidden =
            layers::dense_backward(&cache.hidden_act, &p[FC2_W], &dlogits, n, a.hidden, CLASSES, g_f2w, g_f2b);
        layers::relu_backward_inplace(&mut dhidden, &cache.hidden_act);
        let dflat = layers::dense_backward(&cache.flat, &p[FC1_W], &dhidden, n, sh.flat, a.hidden, g_f1w, g_f1b);

        let plane2 = sh.pool2.0 * sh.pool2.1;
        let bn2 = cache.bn2.as_ref().expect("train-mode cache");
        let dpool2 = layers::batchnorm_backward(&dflat, bn2, n, a.conv2_filters, plane2, &p[BN2_GAMMA], g_bn2g, g_bn2b);
        let mut dconv2 = layers::maxpool_backward(&dpool2, &cache.pool2_arg, n * a.conv2_filters, sh.pool1.0, sh.pool1.1);
        layers::relu_backward_inplace(&mut dconv2, &cache.conv2_act);
        let c2 = ConvShape {
            batch: n,
            in_channels: a.conv1_filters,
            out_channels: a.conv2_filters,
            height: sh.pool1.0,
            width: sh.pool1.1,
            kernel: a.kernel,
        };
        let dbn1_out = layers::conv_backward(&cache.bn1_out, &p[CONV2_W], &dconv2, c2, g_c2w, g_c2b, true)
            .expect("input gradient requested");

        let plane1 = sh.pool1.0 * sh.pool1.1;
        let bn1 = cache.bn1.as_ref().expect("train-mode cache");
        let dpool1 = layers::batchnorm_backward(&dbn1_out, bn1, n, a.conv1_filters, plane1, &p[BN1_GAMMA], g_bn1g, g_bn1b);
        let mut dconv1 =
            layers::maxpool_backward(&dpool1, &cache.pool1_arg, n * a.conv1_filters, a.input_size, a.input_size);
        layers::relu_backward_inplace(&mut dconv1, &cache.conv1_act);
        let c1 = ConvShape {
            batch: n,
            in_channels: a.in_channels,
            out_channels: a.conv1_filters,
            height: a.input_size,
            width: a.input_size,
            kernel: a.kernel,
        };
        layers::conv_backward(&cache.input, &p[CONV1_W], &dconv1, c1, g_c1w, g_c1b, false);
        g
    }
}

impl<F: Real> RunningStats<F> {
    fn empty() -> Self {
        Self { mean1: Vec::new(), var1: Vec::new(), mean2: Vec::new(), var2: Vec::new() }
    }

    fn fresh(arch: &ArchConfig) -> Self {
        Self {
            mean1: vec![F::zero(); arch.conv1_filters],
            var1: vec![F::one(); arch.conv1_filters],
            mean2: vec![F::zero(); arch.conv2_filters],
            var2: vec![F::one(); arch.conv2_filters],
        }
    }
}

/// Mean negative log-likelihood of `labels` under row-wise `probs`.
pub fn cross_entropy<F: Real>(probs: &[F], labels: &[usize]) -> F {
    let tiny = F::min_positive_value();
    let sum = labels
        .iter()
        .enumerate()
        .fold(F::zero(), |acc, (i, &l)| acc - probs[i * CLASSES + l].max(tiny).ln());
    sum / F::from_usize(labels.len()).unwrap()
}
