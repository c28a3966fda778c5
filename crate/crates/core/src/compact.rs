//! The final network built from a genotype.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Role, Var};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::inference::Model;
use crate::nn::{Head, HeadConfig, Projection, Stem, StemConfig, LEAKY_SLOPE};
use crate::search_space::{build_op, OpInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactConfig {
    pub num_classes: usize,
    pub bands: usize,
    pub stem: StemConfig,
    pub head: HeadConfig,
    pub leaky_slope: f64,
}

impl CompactConfig {
    pub fn new(num_classes: usize, bands: usize) -> Self {
        Self {
            num_classes,
            bands,
            stem: StemConfig::default(),
            head: HeadConfig::default(),
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

/// A fixed cell: each node adds its two retained ops.
#[derive(Clone, Debug)]
pub struct CompactCell {
    pub width: usize,
    pub nodes: Vec<[(usize, OpInstance); 2]>,
}

impl CompactCell {
    pub fn forward(&self, g: &mut Graph<'_>, input1: Var, input2: Var) -> Result<Var> {
        let mut states = vec![input1, input2];
        for node in &self.nodes {
            let a = node[0].1.forward(g, states[node[0].0])?;
            let b = node[1].1.forward(g, states[node[1].0])?;
            states.push(g.add(a, b)?);
        }
        g.concat_channels(&states[2..])
    }
}

#[derive(Clone, Debug)]
pub struct CompactLayer {
    pub cell: CompactCell,
    /// Previous layer (the stem in the first layer) to this width.
    pub proj_prev: Projection,
    /// Second input; `None` in the first layer, which reuses the first.
    pub proj_skip: Option<Projection>,
}

#[derive(Clone, Debug)]
pub struct CompactNetwork {
    pub genotype: Genotype,
    pub config: CompactConfig,
    pub stem: Stem,
    pub layers: Vec<CompactLayer>,
    pub head: Head,
}

impl CompactNetwork {
    pub fn new(store: &mut ParamStore, genotype: Genotype, config: CompactConfig, rng: &mut impl Rng) -> Result<Self> {
        genotype.validate()?;
        if config.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let stem = Stem::new(store, config.stem, config.bands, config.leaky_slope, rng)?;
        let widths = genotype.node_widths();
        let n = genotype.nodes;
        let out_channels = |l: usize| n * widths[l];
        let mut layers = Vec::with_capacity(widths.len());
        for (l, layer) in genotype.layers.iter().enumerate() {
            let w = widths[l];
            let name = format!("layer{l}");
            let prev_c = if l == 0 { config.stem.channels } else { out_channels(l - 1) };
            let proj_prev = Projection::new(store, &format!("{name}.in"), prev_c, w, rng)?;
            let proj_skip = match l {
                0 => None,
                1 => Some(Projection::new(store, &format!("{name}.skip"), config.stem.channels, w, rng)?),
                _ => Some(Projection::new(store, &format!("{name}.skip"), out_channels(l - 2), w, rng)?),
            };
            let mut nodes = Vec::with_capacity(n);
            for (j, edges) in layer.nodes.iter().enumerate() {
                let mut pair = Vec::with_capacity(2);
                for e in edges {
                    let kind = genotype.space.op(&e.op)?;
                    let op_name = format!("{name}.node{j}.src{}.{}", e.source, e.op);
                    pair.push((e.source, build_op(store, &op_name, kind, w, w, config.leaky_slope, rng)?));
                }
                let b = pair.pop().expect("two edges");
                let a = pair.pop().expect("two edges");
                nodes.push([a, b]);
            }
            layers.push(CompactLayer {
                cell: CompactCell { width: w, nodes },
                proj_prev,
                proj_skip,
            });
        }
        let last = out_channels(widths.len() - 1);
        let head = Head::new(store, config.head, &[last], config.num_classes, config.leaky_slope, rng)?;
        Ok(Self {
            genotype,
            config,
            stem,
            layers,
            head,
        })
    }

    /// Convolution weights of all retained cell ops.
    pub fn cell_weight_count(&self, store: &ParamStore) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.cell.nodes)
            .flat_map(|n| n.iter())
            .map(|(_, op)| op.weight_count(store))
            .sum()
    }

    /// All scalars held by parameters with role [`Role::Weight`].
    pub fn weight_count(store: &ParamStore) -> usize {
        store.count(Role::Weight)
    }
}

impl Model for CompactNetwork {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn bands(&self) -> usize {
        self.config.bands
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != 1 || shape[2] != self.config.bands {
            return Err(Error::Shape(format!(
                "network input must be [B, 1, {}, H, W], got {shape:?}",
                self.config.bands
            )));
        }
        let stem = self.stem.forward(g, x)?;
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = if l == 0 { stem } else { outs[l - 1] };
            let input1 = layer.proj_prev.forward(g, prev)?;
            let input2 = match &layer.proj_skip {
                None => input1,
                Some(p) => {
                    let src = if l == 1 { stem } else { outs[l - 2] };
                    p.forward(g, src)?
                }
            };
            outs.push(layer.cell.forward(g, input1, input2)?);
        }
        self.head.forward(g, &[*outs.last().expect("at least one layer")])
    }
}

impl Model for crate::supernet::Supernet {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn bands(&self) -> usize {
        self.config.bands
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        crate::supernet::Supernet::forward(self, g, x)
    }
}
