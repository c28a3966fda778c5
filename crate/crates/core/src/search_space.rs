//! Candidate operations of the four search spaces.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Role, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, SeparableConv};
use crate::autodiff::ConvSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SearchSpace {
    #[serde(rename = "3d-asym-d")]
    AsymD,
    #[serde(rename = "3d-sym-ud")]
    SymUd,
    #[serde(rename = "3d-sym-d")]
    SymD,
    #[serde(rename = "3d-asym-ud")]
    AsymUd,
}

impl SearchSpace {
    pub const ALL: [SearchSpace; 4] = [SearchSpace::AsymD, SearchSpace::SymUd, SearchSpace::SymD, SearchSpace::AsymUd];

    pub fn id(self) -> &'static str {
        match self {
            SearchSpace::AsymD => "3d-asym-d",
            SearchSpace::SymUd => "3d-sym-ud",
            SearchSpace::SymD => "3d-sym-d",
            SearchSpace::AsymUd => "3d-asym-ud",
        }
    }

    /// The eight candidates in canonical order. Skip and discard are always
    /// the last two entries.
    pub fn ops(self) -> [OpKind; 8] {
        use ConvFamily::{Common, Separable};
        let conv = |name, spatial, spectral, family, decomposed| OpKind {
            space: self,
            name,
            spatial_kernel: spatial,
            spectral_kernel: spectral,
            family,
            decomposed,
        };
        let tail = [
            OpKind::special(self, "skip_connection", ConvFamily::Skip),
            OpKind::special(self, "discarding", ConvFamily::Discard),
        ];
        let head = match self {
            SearchSpace::AsymD => [
                conv("con_3-3", 3, 3, Common, true),
                conv("con_5-3", 5, 3, Common, true),
                conv("con_3-5", 3, 5, Common, true),
                conv("sep_3-3", 3, 3, Separable, true),
                conv("sep_5-3", 5, 3, Separable, true),
                conv("sep_3-5", 3, 5, Separable, true),
            ],
            SearchSpace::SymUd => [
                conv("con_3", 3, 3, Common, false),
                conv("con_5", 5, 5, Common, false),
                conv("con_7", 7, 7, Common, false),
                conv("sep_3", 3, 3, Separable, false),
                conv("sep_5", 5, 5, Separable, false),
                conv("sep_7", 7, 7, Separable, false),
            ],
            SearchSpace::SymD => [
                conv("dcon_3-3", 3, 3, Common, true),
                conv("dcon_5-5", 5, 5, Common, true),
                conv("dcon_7-7", 7, 7, Common, true),
                conv("dsep_3-3", 3, 3, Separable, true),
                conv("dsep_5-5", 5, 5, Separable, true),
                conv("dsep_7-7", 7, 7, Separable, true),
            ],
            SearchSpace::AsymUd => [
                conv("udcon_3-3", 3, 3, Common, false),
                conv("udcon_5-3", 5, 3, Common, false),
                conv("udcon_3-5", 3, 5, Common, false),
                conv("udsep_3-3", 3, 3, Separable, false),
                conv("udsep_5-3", 5, 3, Separable, false),
                conv("udsep_3-5", 3, 5, Separable, false),
            ],
        };
        [head[0], head[1], head[2], head[3], head[4], head[5], tail[0], tail[1]]
    }

    /// Index of the discarding op in [`SearchSpace::ops`].
    pub const DISCARD_INDEX: usize = 7;

    pub fn op_index(self, name: &str) -> Option<usize> {
        self.ops().iter().position(|o| o.name == name)
    }

    pub fn op(self, name: &str) -> Result<OpKind> {
        self.op_index(name)
            .map(|i| self.ops()[i])
            .ok_or_else(|| Error::Config(format!("unknown operation `{name}` in space {}", self.id())))
    }
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SearchSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SearchSpace::ALL
            .into_iter()
            .find(|sp| sp.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown search space `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvFamily {
    Common,
    Separable,
    Skip,
    Discard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OpKind {
    pub space: SearchSpace,
    pub name: &'static str,
    pub spatial_kernel: usize,
    pub spectral_kernel: usize,
    pub family: ConvFamily,
    pub decomposed: bool,
}

impl OpKind {
    fn special(space: SearchSpace, name: &'static str, family: ConvFamily) -> Self {
        Self {
            space,
            name,
            spatial_kernel: 1,
            spectral_kernel: 1,
            family,
            decomposed: false,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.family, ConvFamily::Common | ConvFamily::Separable)
    }

    /// Kernels `[kd, kh, kw]` of the convolutions in application order.
    pub fn kernels(&self) -> Vec<[usize; 3]> {
        let (d, k) = (self.spectral_kernel, self.spatial_kernel);
        match (self.is_conv(), self.decomposed) {
            (false, _) => Vec::new(),
            (true, true) => vec![[1, k, k], [d, 1, 1]],
            (true, false) => vec![[d, k, k]],
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

/// Exact number of convolution weights of an op; BN affine terms excluded.
pub fn count_params(kind: OpKind, cin: usize, cout: usize) -> usize {
    let mut total = 0;
    let mut c = cin;
    for kernel in kind.kernels() {
        let vol: usize = kernel.iter().product();
        total += match kind.family {
            ConvFamily::Common => c * cout * vol,
            _ => c * vol + c * cout,
        };
        c = cout;
    }
    total
}

/// `(spectral, spatial)` extent seen by one output voxel.
pub fn receptive_field(kind: OpKind) -> (usize, usize) {
    let mut rf = [1usize; 3];
    for k in kind.kernels() {
        for a in 0..3 {
            rf[a] += k[a] - 1;
        }
    }
    (rf[0], rf[1])
}

/// One stage of an op, for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    LeakyRelu,
    Conv([usize; 3]),
    Sep([usize; 3]),
    BatchNorm,
    Identity,
    Zero,
}

#[derive(Clone, Debug)]
enum Body {
    Common(Vec<Conv>),
    Separable(Vec<SeparableConv>),
    Skip,
    Discard,
}

/// A constructed candidate operation with its parameters in a store.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub in_channels: usize,
    pub out_channels: usize,
    body: Body,
    bn: Option<BatchNorm>,
    slope: f64,
}

pub fn build_op(
    store: &mut ParamStore,
    name: &str,
    kind: OpKind,
    cin: usize,
    cout: usize,
    slope: f64,
    rng: &mut impl Rng,
) -> Result<OpInstance> {
    if cin == 0 || cout == 0 {
        return Err(Error::Contract(format!("{name}: channel counts must be positive")));
    }
    let mut c = cin;
    let body = match kind.family {
        ConvFamily::Skip if cin != cout => {
            return Err(Error::Contract(format!(
                "{name}: skip connection needs equal widths, got {cin} -> {cout}"
            )))
        }
        ConvFamily::Skip => Body::Skip,
        ConvFamily::Discard => Body::Discard,
        ConvFamily::Common => {
            let mut convs = Vec::new();
            for (i, k) in kind.kernels().into_iter().enumerate() {
                convs.push(Conv::new3d(store, &format!("{name}.conv{i}"), c, cout, k, ConvSpec::same(k), rng)?);
                c = cout;
            }
            Body::Common(convs)
        }
        ConvFamily::Separable => {
            let mut seps = Vec::new();
            for (i, k) in kind.kernels().into_iter().enumerate() {
                seps.push(SeparableConv::new(store, &format!("{name}.sep{i}"), c, cout, k, rng)?);
                c = cout;
            }
            Body::Separable(seps)
        }
    };
    let bn = kind.is_conv().then(|| BatchNorm::new(store, &format!("{name}.bn"), cout));
    Ok(OpInstance {
        kind,
        in_channels: cin,
        out_channels: cout,
        body,
        bn,
        slope,
    })
}

impl OpInstance {
    pub fn layers(&self) -> Vec<LayerKind> {
        match &self.body {
            Body::Skip => vec![LayerKind::Identity],
            Body::Discard => vec![LayerKind::Zero],
            Body::Common(convs) => std::iter::once(LayerKind::LeakyRelu)
                .chain(convs.iter().map(|c| LayerKind::Conv(c.kernel)))
                .chain([LayerKind::BatchNorm])
                .collect(),
            Body::Separable(seps) => std::iter::once(LayerKind::LeakyRelu)
                .chain(seps.iter().map(|s| LayerKind::Sep(s.depthwise.kernel)))
                .chain([LayerKind::BatchNorm])
                .collect(),
        }
    }

    /// Weight scalars actually allocated for this op, counted in the store.
    pub fn weight_count(&self, store: &ParamStore) -> usize {
        let convs: Vec<&Conv> = match &self.body {
            Body::Common(c) => c.iter().collect(),
            Body::Separable(s) => s.iter().flat_map(|s| [&s.depthwise, &s.pointwise]).collect(),
            Body::Skip | Body::Discard => Vec::new(),
        };
        convs
            .iter()
            .map(|c| store.get(c.weight))
            .filter(|p| p.role == Role::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.in_channels {
            return Err(Error::dim(
                "channels",
                self.in_channels,
                shape.get(1).copied().unwrap_or(0),
                format!("input of {}", self.kind.name),
            ));
        }
        let mut y = match &self.body {
            Body::Skip => return Ok(x),
            Body::Discard => {
                let mut out = shape;
                out[1] = self.out_channels;
                return Ok(g.constant(Tensor::zeros(out)));
            }
            _ => g.leaky_relu(x, self.slope)?,
        };
        match &self.body {
            Body::Common(convs) => {
                for c in convs {
                    y = c.forward(g, y)?;
                }
            }
            Body::Separable(seps) => {
                for s in seps {
                    y = s.forward(g, y)?;
                }
            }
            Body::Skip | Body::Discard => unreachable!(),
        }
        match &self.bn {
            Some(bn) => bn.forward(g, y),
            None => Ok(y),
        }
    }
}
