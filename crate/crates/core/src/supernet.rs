//! The searchable network: stem, layers of width-varied supercells with
//! mixed operations, and the classifier head.

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Role, Var};
use crate::error::{Error, Result};
use crate::nn::{Head, HeadConfig, Projection, Stem, StemConfig, LEAKY_SLOPE};
use crate::search_space::{build_op, OpInstance, SearchSpace};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub layers: usize,
    pub nodes: usize,
    pub base_width: usize,
    pub width_factors: Vec<f64>,
    pub space: SearchSpace,
    pub stem: StemConfig,
    pub head: HeadConfig,
    pub num_classes: usize,
    pub bands: usize,
    pub leaky_slope: f64,
}

impl SupernetConfig {
    pub fn new(num_classes: usize, bands: usize) -> Self {
        Self {
            layers: 2,
            nodes: 3,
            base_width: 8,
            width_factors: vec![1.0, 1.5, 2.0],
            space: SearchSpace::AsymD,
            stem: StemConfig::default(),
            head: HeadConfig::default(),
            num_classes,
            bands,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.nodes == 0 {
            return Err(Error::Config("layers and nodes must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.width_factors.is_empty() || self.width_factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("width factors must be non-empty and strictly increasing".into()));
        }
        if let Some(g) = self.width_factors.iter().find(|&&g| (g * self.base_width as f64).floor() < 1.0) {
            return Err(Error::Config(format!("width factor {g} rounds to zero channels")));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in (0, 1)".into()));
        }
        if self.stem.channels == 0 || self.head.compress_channels == 0 || self.head.hidden_channels == 0 {
            return Err(Error::Config("stem and head widths must be positive".into()));
        }
        Ok(())
    }

    /// Node width of every width option: `floor(gamma * W)`.
    pub fn widths(&self) -> Vec<usize> {
        self.width_factors
            .iter()
            .map(|g| (g * self.base_width as f64).floor() as usize)
            .collect()
    }

    /// Width options offered at layer `l` (0-based). The first layer offers
    /// only the two narrowest.
    pub fn available_widths(&self, l: usize) -> Vec<usize> {
        let n = self.width_factors.len();
        if l == 0 {
            (0..n.min(2)).collect()
        } else {
            (0..n).collect()
        }
    }

    /// Incoming edges per cell: each node sees both cell inputs and every
    /// earlier node.
    pub fn edges_per_cell(&self) -> usize {
        edge_offset(self.nodes)
    }
}

/// Flat index of the first edge into node `j`.
pub fn edge_offset(j: usize) -> usize {
    2 * j + j * j.saturating_sub(1) / 2
}

/// Logits over legal source widths for one target width.
#[derive(Clone, Debug)]
pub struct BetaParam {
    pub id: ParamId,
    pub sources: Vec<usize>,
}

/// Handles to the architecture logits in the store.
#[derive(Clone, Debug)]
pub struct ArchParams {
    /// Per layer, `[edges, ops]` logits shared by every cell of the layer.
    pub alpha: Vec<ParamId>,
    /// Per layer and width index; `None` where the width is unavailable and
    /// everywhere in the first layer.
    pub beta: Vec<Vec<Option<BetaParam>>>,
}

/// Plain copy of the architecture logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchValues {
    /// Per layer, row-major `[edges, ops]`.
    pub alpha: Vec<Vec<f64>>,
    pub ops: usize,
    pub beta: Vec<Vec<Option<BetaValues>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaValues {
    pub sources: Vec<usize>,
    pub logits: Vec<f64>,
}

impl ArchValues {
    pub fn edge_logits(&self, layer: usize, edge: usize) -> &[f64] {
        &self.alpha[layer][edge * self.ops..(edge + 1) * self.ops]
    }
}

/// One searchable cell: every candidate op on every edge.
#[derive(Clone, Debug)]
pub struct SuperCell {
    pub width: usize,
    pub nodes: usize,
    /// `[edge][op]`, edges flattened node by node.
    pub ops: Vec<Vec<OpInstance>>,
    calls: Cell<usize>,
}

impl SuperCell {
    fn new(
        store: &mut ParamStore,
        name: &str,
        config: &SupernetConfig,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut ops = Vec::with_capacity(config.edges_per_cell());
        for j in 0..config.nodes {
            for s in 0..j + 2 {
                let edge = config
                    .space
                    .ops()
                    .into_iter()
                    .map(|kind| {
                        build_op(
                            store,
                            &format!("{name}.node{j}.src{s}.{}", kind.name),
                            kind,
                            width,
                            width,
                            config.leaky_slope,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                ops.push(edge);
            }
        }
        Ok(Self {
            width,
            nodes: config.nodes,
            ops,
            calls: Cell::new(0),
        })
    }

    /// Number of forward invocations since construction or the last reset.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset_calls(&self) {
        self.calls.set(0);
    }

    /// Each node sums the `weights`-mixed candidate ops over its incoming
    /// edges; the cell output concatenates all nodes. `weights` is the
    /// per-edge softmax of alpha, shape `[edges, ops]`.
    pub fn forward(&self, g: &mut Graph<'_>, input1: Var, input2: Var, weights: Var) -> Result<Var> {
        self.calls.set(self.calls.get() + 1);
        for (v, which) in [(input1, "input1"), (input2, "input2")] {
            let c = g.shape(v).get(1).copied().unwrap_or(0);
            if c != self.width {
                return Err(Error::dim("channels", self.width, c, format!("cell {which}")));
            }
        }
        let n_ops = self.ops.first().map_or(0, Vec::len);
        let mut states = vec![input1, input2];
        for j in 0..self.nodes {
            let mut terms = Vec::new();
            let mut idx = Vec::new();
            for (s, &src) in states.iter().enumerate().take(j + 2) {
                let e = edge_offset(j) + s;
                for (k, op) in self.ops[e].iter().enumerate() {
                    if k == SearchSpace::DISCARD_INDEX {
                        continue;
                    }
                    terms.push(op.forward(g, src)?);
                    idx.push(e * n_ops + k);
                }
            }
            let node = if terms.is_empty() {
                g.constant(Tensor::zeros(g.shape(input1).to_vec()))
            } else {
                g.weighted_sum(&terms, weights, &idx)?
            };
            states.push(node);
        }
        g.concat_channels(&states[2..])
    }
}

/// Which form of the width mixture to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    /// Mix projected inputs first and call each cell once.
    Shared,
    /// Call the cell once per legal source and mix the outputs.
    Unshared,
}

#[derive(Clone, Debug)]
pub struct SuperLayer {
    pub widths: Vec<usize>,
    pub cells: Vec<SuperCell>,
    /// Per available target, one projection per legal source (the stem in
    /// the first layer), aligned with the beta sources.
    pub proj_prev: Vec<Vec<Projection>>,
    /// Per available target, projection of the second input. Empty in the
    /// first layer, where both inputs come from the first projection.
    pub proj_skip: Vec<Projection>,
    /// Width index feeding each second-input projection, `None` for the stem.
    pub skip_source: Vec<Option<usize>>,
}

impl SuperLayer {
    fn slot(&self, width_index: usize) -> Option<usize> {
        self.widths.iter().position(|&w| w == width_index)
    }
}

/// Cell outputs per layer, indexed by width.
pub type Activations = Vec<Vec<Option<Var>>>;

#[derive(Clone, Debug)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub stem: Stem,
    pub layers: Vec<SuperLayer>,
    pub head: Head,
    pub arch: ArchParams,
}

fn nearest(avail: &[usize], target: usize) -> usize {
    *avail
        .iter()
        .min_by_key(|&&w| (w.abs_diff(target), w))
        .expect("non-empty width set")
}

/// Legal sources for `target` among `prev`: `|k - target| <= 1`.
pub fn legal_sources(prev: &[usize], target: usize) -> Vec<usize> {
    prev.iter().copied().filter(|&k| k.abs_diff(target) <= 1).collect()
}

impl Supernet {
    pub fn new(store: &mut ParamStore, config: SupernetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let n_ops = config.space.ops().len();
        let stem = Stem::new(store, config.stem, config.bands, config.leaky_slope, rng)?;
        let init = Normal::new(0.0, 1e-3).expect("finite std");
        let mut layers = Vec::with_capacity(config.layers);
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for l in 0..config.layers {
            let avail = config.available_widths(l);
            let values = Tensor::from_fn(vec![config.edges_per_cell(), n_ops], |_| init.sample(rng));
            alpha.push(store.add(format!("arch.alpha.layer{l}"), Role::ArchAlpha, values));
            let mut layer_beta = vec![None; widths.len()];
            let mut layer = SuperLayer {
                widths: avail.clone(),
                cells: Vec::new(),
                proj_prev: Vec::new(),
                proj_skip: Vec::new(),
                skip_source: Vec::new(),
            };
            for &i in &avail {
                let w = widths[i];
                let name = format!("layer{l}.w{i}");
                if l == 0 {
                    layer.proj_prev.push(vec![Projection::new(
                        store,
                        &format!("{name}.in.stem"),
                        config.stem.channels,
                        w,
                        rng,
                    )?]);
                } else {
                    let prev = config.available_widths(l - 1);
                    let sources = legal_sources(&prev, i);
                    let projs = sources
                        .iter()
                        .map(|&k| Projection::new(store, &format!("{name}.in.w{k}"), config.nodes * widths[k], w, rng))
                        .collect::<Result<Vec<_>>>()?;
                    layer.proj_prev.push(projs);
                    let logits = Tensor::from_fn(vec![sources.len()], |_| init.sample(rng));
                    let id = store.add(format!("arch.beta.layer{l}.w{i}"), Role::ArchBeta, logits);
                    layer_beta[i] = Some(BetaParam { id, sources });
                    let (src, cin) = if l == 1 {
                        (None, config.stem.channels)
                    } else {
                        let k = nearest(&config.available_widths(l - 2), i);
                        (Some(k), config.nodes * widths[k])
                    };
                    let tag = src.map_or("stem".to_string(), |k| format!("w{k}"));
                    layer.proj_skip.push(Projection::new(store, &format!("{name}.skip.{tag}"), cin, w, rng)?);
                    layer.skip_source.push(src);
                }
                layer.cells.push(SuperCell::new(store, &format!("{name}.cell"), &config, w, rng)?);
            }
            beta.push(layer_beta);
            layers.push(layer);
        }
        let last = config.available_widths(config.layers - 1);
        let head_inputs: Vec<usize> = last.iter().map(|&i| config.nodes * widths[i]).collect();
        let head = Head::new(store, config.head, &head_inputs, config.num_classes, config.leaky_slope, rng)?;
        Ok(Self {
            config,
            stem,
            layers,
            head,
            arch: ArchParams { alpha, beta },
        })
    }

    pub fn arch_values(&self, store: &ParamStore) -> ArchValues {
        ArchValues {
            alpha: self.arch.alpha.iter().map(|&id| store.get(id).value.data().to_vec()).collect(),
            ops: self.config.space.ops().len(),
            beta: self
                .arch
                .beta
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|b| {
                            b.as_ref().map(|b| BetaValues {
                                sources: b.sources.clone(),
                                logits: store.get(b.id).value.data().to_vec(),
                            })
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn set_arch_values(&self, store: &mut ParamStore, values: &ArchValues) -> Result<()> {
        if values.alpha.len() != self.arch.alpha.len() || values.beta.len() != self.arch.beta.len() {
            return Err(Error::Shape("architecture values do not match the supernet".into()));
        }
        for (&id, a) in self.arch.alpha.iter().zip(&values.alpha) {
            let p = store.get_mut(id);
            if p.value.len() != a.len() {
                return Err(Error::dim("alpha", p.value.len(), a.len(), "alpha logits"));
            }
            p.value.data_mut().copy_from_slice(a);
        }
        for (layer, vals) in self.arch.beta.iter().zip(&values.beta) {
            for (b, v) in layer.iter().zip(vals) {
                match (b, v) {
                    (Some(b), Some(v)) if b.sources == v.sources => {
                        store.get_mut(b.id).value.data_mut().copy_from_slice(&v.logits);
                    }
                    (None, None) => {}
                    _ => return Err(Error::Shape("beta sources do not match the supernet".into())),
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward_with(g, x, Sharing::Shared).map(|(logits, _)| logits)
    }

    /// Full pass returning logits and every layer's cell outputs.
    pub fn forward_with(&self, g: &mut Graph<'_>, x: Var, sharing: Sharing) -> Result<(Var, Activations)> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != 1 || shape[2] != self.config.bands {
            return Err(Error::Shape(format!(
                "supernet input must be [B, 1, {}, H, W], got {shape:?}",
                self.config.bands
            )));
        }
        let stem = self.stem.forward(g, x)?;
        let n_widths = self.config.width_factors.len();
        let mut acts: Activations = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let alpha = g.param(self.arch.alpha[l]);
            let weights = g.softmax(alpha, 1)?;
            let mut out = vec![None; n_widths];
            for (slot, &i) in layer.widths.iter().enumerate() {
                let cell = &layer.cells[slot];
                out[i] = Some(if l == 0 {
                    let p = layer.proj_prev[slot][0].forward(g, stem)?;
                    cell.forward(g, p, p, weights)?
                } else {
                    let skip_in = match layer.skip_source[slot] {
                        None => stem,
                        Some(k) => acts[l - 2][k].expect("available width"),
                    };
                    let input2 = layer.proj_skip[slot].forward(g, skip_in)?;
                    let beta = self.arch.beta[l][i].as_ref().expect("beta for available width");
                    let projected = beta
                        .sources
                        .iter()
                        .zip(&layer.proj_prev[slot])
                        .map(|(&k, p)| p.forward(g, acts[l - 1][k].expect("available source")))
                        .collect::<Result<Vec<_>>>()?;
                    let logits = g.param(beta.id);
                    let bw = g.softmax(logits, 0)?;
                    let idx: Vec<usize> = (0..projected.len()).collect();
                    match sharing {
                        Sharing::Shared => {
                            let mixed = g.weighted_sum(&projected, bw, &idx)?;
                            cell.forward(g, mixed, input2, weights)?
                        }
                        Sharing::Unshared => {
                            let outs = projected
                                .iter()
                                .map(|&p| cell.forward(g, p, input2, weights))
                                .collect::<Result<Vec<_>>>()?;
                            g.weighted_sum(&outs, bw, &idx)?
                        }
                    }
                });
            }
            acts.push(out);
        }
        let last = acts.last().expect("at least one layer");
        let inputs: Vec<Var> = self.layers.last().expect("layer").widths.iter().map(|&i| last[i].expect("width")).collect();
        let logits = self.head.forward(g, &inputs)?;
        Ok((logits, acts))
    }

    pub fn cell(&self, layer: usize, width_index: usize) -> Option<&SuperCell> {
        let l = self.layers.get(layer)?;
        l.slot(width_index).map(|s| &l.cells[s])
    }

    pub fn reset_calls(&self) {
        self.layers.iter().flat_map(|l| &l.cells).for_each(SuperCell::reset_calls);
    }

    /// Cell invocations per layer, summed over widths.
    pub fn calls_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cells.iter().map(SuperCell::calls).sum()).collect()
    }
}
