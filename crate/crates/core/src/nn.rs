//! Parameterized layers shared by the supernet and the compact network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BufferId, ConvSpec, Graph, ParamId, ParamStore, Role, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default negative slope of every LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Bias-free convolution; `two_d` selects `[B, C, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub spec: ConvSpec,
    pub two_d: bool,
}

fn he_normal(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        two_d: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(Error::Contract(format!("{name}: channel counts must be positive")));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::dim("channels", spec.groups, cin, format!("{name}: groups")));
        }
        let per_group = cin / spec.groups;
        let fan_in = per_group * kernel.iter().product::<usize>();
        let shape = if two_d {
            vec![cout, per_group, kernel[1], kernel[2]]
        } else {
            vec![cout, per_group, kernel[0], kernel[1], kernel[2]]
        };
        let weight = store.add(format!("{name}.weight"), Role::Weight, he_normal(rng, shape, fan_in));
        Ok(Self {
            weight,
            in_channels: cin,
            out_channels: cout,
            kernel,
            spec,
            two_d,
        })
    }

    /// 3D convolution with kernel `[kd, kh, kw]`.
    pub fn new3d(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, cin, cout, kernel, spec, false, rng)
    }

    /// 2D convolution with kernel `[kh, kw]`.
    pub fn new2d(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, cin, cout, [1, kernel[0], kernel[1]], spec, true, rng)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        if self.two_d {
            g.conv2d(x, w, self.spec)
        } else {
            g.conv3d(x, w, self.spec)
        }
    }
}

/// Batch normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Role::BnScale, Tensor::full(vec![channels], 1.0)),
            shift: store.add(format!("{name}.shift"), Role::BnShift, Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0)),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let scale = g.param(self.scale);
        let shift = g.param(self.shift);
        g.batch_norm(x, scale, shift, self.running_mean, self.running_var)
    }
}

impl Graph<'_> {
    /// Depthwise convolution (one filter per input channel) followed by a
    /// pointwise channel-mixing convolution.
    pub fn separable_conv3d(&mut self, x: Var, depthwise: Var, pointwise: Var, spec: ConvSpec) -> Result<Var> {
        let cin = self.shape(x).get(1).copied().unwrap_or(0);
        let dw = self.shape(depthwise);
        if dw.len() != 5 || dw[0] != cin || dw[1] != 1 {
            return Err(Error::dim("channels", cin, dw.first().copied().unwrap_or(0), "depthwise kernel needs one filter per input channel"));
        }
        let pw = self.shape(pointwise);
        if pw.len() != 5 || pw[1] != cin || pw[2..] != [1, 1, 1] {
            return Err(Error::dim("channels", cin, pw.get(1).copied().unwrap_or(0), "pointwise kernel must be [Cout, Cin, 1, 1, 1]"));
        }
        let mid = self.conv3d(x, depthwise, spec.with_groups(cin))?;
        self.conv3d(mid, pointwise, ConvSpec::default())
    }
}

/// Depthwise plus pointwise pair.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
}

impl SeparableConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depthwise = Conv::new3d(
            store,
            &format!("{name}.depthwise"),
            cin,
            cin,
            kernel,
            ConvSpec::same(kernel).with_groups(cin),
            rng,
        )?;
        let pointwise = Conv::new3d(store, &format!("{name}.pointwise"), cin, cout, [1, 1, 1], ConvSpec::default(), rng)?;
        Ok(Self { depthwise, pointwise })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let dw = g.param(self.depthwise.weight);
        let pw = g.param(self.pointwise.weight);
        g.separable_conv3d(x, dw, pw, self.depthwise.spec)
    }
}

/// Pointwise convolution followed by batch normalization, used to bring a
/// cell output to another channel count.
#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv::new3d(store, &format!("{name}.conv"), cin, cout, [1, 1, 1], ConvSpec::default(), rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        self.bn.forward(g, y)
    }
}

/// Shape of the two-convolution stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: [5, 3, 3],
            stride: [2, 1, 1],
            padding: [2, 1, 1],
        }
    }
}

impl StemConfig {
    /// Spectral extent after one stem convolution.
    pub fn reduce(&self, bands: usize) -> Option<usize> {
        let padded = bands + 2 * self.padding[0];
        (padded >= self.kernel[0]).then(|| (padded - self.kernel[0]) / self.stride[0] + 1)
    }

    /// Spectral extent after both convolutions, or `None` if the bands run out.
    pub fn output_bands(&self, bands: usize) -> Option<usize> {
        self.reduce(bands).and_then(|b| self.reduce(b))
    }

    /// Fewest input bands the stem accepts.
    pub const MIN_BANDS: usize = 9;
}

/// conv → BN → LReLU → conv → BN on a single-channel cube.
#[derive(Clone, Debug)]
pub struct Stem {
    pub config: StemConfig,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub slope: f64,
}

impl Stem {
    pub fn new(store: &mut ParamStore, config: StemConfig, bands: usize, slope: f64, rng: &mut impl Rng) -> Result<Self> {
        if bands < StemConfig::MIN_BANDS || config.output_bands(bands).is_none() {
            return Err(Error::Config(format!(
                "stem needs at least {} bands, got {bands}",
                StemConfig::MIN_BANDS
            )));
        }
        let spec = ConvSpec::new(config.stride, config.padding);
        let c = config.channels;
        Ok(Self {
            config,
            conv1: Conv::new3d(store, "stem.conv1", 1, c, config.kernel, spec, rng)?,
            bn1: BatchNorm::new(store, "stem.bn1", c),
            conv2: Conv::new3d(store, "stem.conv2", c, c, config.kernel, spec, rng)?,
            bn2: BatchNorm::new(store, "stem.bn2", c),
            slope,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.leaky_relu(y, self.slope)?;
        let y = self.conv2.forward(g, y)?;
        self.bn2.forward(g, y)
    }
}

/// Channel widths of the classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    /// Per-width compression channels before concatenation.
    pub compress_channels: usize,
    /// Channels of the 3x3 2D convolution.
    pub hidden_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            compress_channels: 32,
            hidden_channels: 32,
        }
    }
}

/// Compress each cell output, concatenate, average over bands, then two 2D
/// convolutions down to per-pixel class logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub compress: Vec<Projection>,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bias: ParamId,
    pub slope: f64,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        config: HeadConfig,
        inputs: &[usize],
        num_classes: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes == 0 || inputs.is_empty() {
            return Err(Error::Contract("head needs classes and at least one input".into()));
        }
        let compress = inputs
            .iter()
            .enumerate()
            .map(|(i, &c)| Projection::new(store, &format!("head.compress{i}"), c, config.compress_channels, rng))
            .collect::<Result<Vec<_>>>()?;
        let cat = config.compress_channels * inputs.len();
        let hidden = config.hidden_channels;
        Ok(Self {
            compress,
            conv1: Conv::new2d(store, "head.conv1", cat, hidden, [3, 3], ConvSpec::same([1, 3, 3]), rng)?,
            bn1: BatchNorm::new(store, "head.bn1", hidden),
            conv2: Conv::new2d(store, "head.conv2", hidden, num_classes, [1, 1], ConvSpec::default(), rng)?,
            bias: store.add("head.conv2.bias", Role::Bias, Tensor::zeros(vec![num_classes])),
            slope,
        })
    }

    /// `inputs` must line up with the channel list given at construction.
    pub fn forward(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.compress.len() {
            return Err(Error::dim("inputs", self.compress.len(), inputs.len(), "head inputs"));
        }
        let compressed = self
            .compress
            .iter()
            .zip(inputs)
            .map(|(p, &x)| p.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_channels(&compressed)?;
        let flat = g.spectral_avg(cat)?;
        let y = self.conv1.forward(g, flat)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.leaky_relu(y, self.slope)?;
        let y = self.conv2.forward(g, y)?;
        let b = g.param(self.bias);
        g.add_channel_bias(y, b)
    }
}
