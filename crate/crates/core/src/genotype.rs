//! Discretization of architecture logits into a genotype.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::SearchSpace;
use crate::supernet::{edge_offset, ArchValues, SupernetConfig};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Header line of the text format.
pub const GENOTYPE_HEADER: &str = "hsinas-genotype v1";

/// A retained edge. Source 0 is the previous layer, 1 the layer before
/// that, and `2 + m` is node `m` of the same cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub op: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGenotype {
    pub width: usize,
    pub nodes: Vec<[Edge; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub space: SearchSpace,
    pub nodes: usize,
    pub base_width: usize,
    pub width_factors: Vec<f64>,
    pub layers: Vec<LayerGenotype>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Strength and best op of one edge, ignoring the discarding op. Ties go to
/// the earlier op.
pub fn edge_choice(logits: &[f64], discard: usize) -> (f64, usize) {
    let w = softmax(logits);
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (k, &p) in w.iter().enumerate() {
        if k != discard && p > best.0 {
            best = (p, k);
        }
    }
    best
}

/// Keep the two strongest incoming edges of every node of every layer.
/// Ties in strength go to the lower source index.
pub fn derive_cells(arch: &ArchValues, space: SearchSpace, nodes: usize) -> Vec<Vec<[Edge; 2]>> {
    let ops = space.ops();
    (0..arch.alpha.len())
        .map(|l| {
            (0..nodes)
                .map(|j| {
                    let mut ranked: Vec<(usize, f64, usize)> = (0..j + 2)
                        .map(|s| {
                            let (strength, op) = edge_choice(arch.edge_logits(l, edge_offset(j) + s), SearchSpace::DISCARD_INDEX);
                            (s, strength, op)
                        })
                        .collect();
                    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    let mut keep = [ranked[0], ranked[1]];
                    keep.sort_by_key(|e| e.0);
                    keep.map(|(s, _, op)| Edge {
                        source: s,
                        op: ops[op].name.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Width-state probabilities for Viterbi decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthTrellis {
    pub states: usize,
    /// Probability of each state at the first layer; 0 marks unavailable.
    pub initial: Vec<f64>,
    /// Per later layer, `[source][target]`; `None` marks an illegal move.
    pub transitions: Vec<Vec<Vec<Option<f64>>>>,
}

impl WidthTrellis {
    pub fn layers(&self) -> usize {
        1 + self.transitions.len()
    }

    /// Uniform start over the first layer's widths and per-target softmax of
    /// each later layer's beta.
    pub fn from_arch(arch: &ArchValues, config: &SupernetConfig) -> Self {
        let states = config.width_factors.len();
        let first = config.available_widths(0);
        let mut initial = vec![0.0; states];
        for &i in &first {
            initial[i] = 1.0 / first.len() as f64;
        }
        let transitions = arch.beta[1..]
            .iter()
            .map(|layer| {
                let mut t = vec![vec![None; states]; states];
                for (i, b) in layer.iter().enumerate() {
                    let Some(b) = b else { continue };
                    for (&k, p) in b.sources.iter().zip(softmax(&b.logits)) {
                        t[k][i] = Some(p);
                    }
                }
                t
            })
            .collect();
        Self {
            states,
            initial,
            transitions,
        }
    }

    fn log(p: f64) -> f64 {
        p.max(PROB_FLOOR).ln()
    }

    fn start(&self, i: usize) -> Option<f64> {
        (self.initial[i] > 0.0).then(|| Self::log(self.initial[i]))
    }

    fn step(&self, l: usize, k: usize, i: usize) -> Option<f64> {
        if k.abs_diff(i) > 1 {
            return None;
        }
        self.transitions[l][k][i].map(Self::log)
    }

    /// Log score of a path, `None` if it uses an illegal state or move.
    pub fn path_score(&self, path: &[usize]) -> Option<f64> {
        let mut s = self.start(*path.first()?)?;
        for (l, w) in path.windows(2).enumerate() {
            s += self.step(l, w[0], w[1])?;
        }
        Some(s)
    }
}

/// Most probable legal width path. Among equal scores the path with the
/// smallest final width wins, then the smallest width at the layer before,
/// and so on.
pub fn viterbi_widths(trellis: &WidthTrellis) -> Vec<usize> {
    let n = trellis.states;
    let mut score: Vec<Option<f64>> = (0..n).map(|i| trellis.start(i)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(trellis.transitions.len());
    for l in 0..trellis.transitions.len() {
        let mut next = vec![None; n];
        let mut ptr = vec![0; n];
        for i in 0..n {
            for k in 0..n {
                let (Some(s), Some(t)) = (score[k], trellis.step(l, k, i)) else { continue };
                let cand = s + t;
                if next[i].is_none_or(|best| cand > best) {
                    next[i] = Some(cand);
                    ptr[i] = k;
                }
            }
        }
        score = next;
        back.push(ptr);
    }
    let mut state = 0;
    let mut best = None;
    for (i, s) in score.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|b| s > b) {
                best = Some(s);
                state = i;
            }
        }
    }
    let mut path = vec![state];
    for ptr in back.iter().rev() {
        state = ptr[state];
        path.push(state);
    }
    path.reverse();
    path
}

impl Genotype {
    /// Derive the discrete architecture from searched logits. The compact
    /// network uses `base_width` in place of the search width.
    pub fn derive(arch: &ArchValues, config: &SupernetConfig, base_width: usize) -> Self {
        let cells = derive_cells(arch, config.space, config.nodes);
        let widths = viterbi_widths(&WidthTrellis::from_arch(arch, config));
        Self {
            space: config.space,
            nodes: config.nodes,
            base_width,
            width_factors: config.width_factors.clone(),
            layers: cells
                .into_iter()
                .zip(widths)
                .map(|(nodes, width)| LayerGenotype { width, nodes })
                .collect(),
        }
    }

    /// Channels of one node at each layer.
    pub fn node_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| (self.width_factors[l.width] * self.base_width as f64).floor() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config(format!("invalid genotype: {reason}")));
        if self.layers.is_empty() || self.nodes == 0 || self.base_width == 0 {
            return bad("needs at least one layer, node and channel".into());
        }
        if self.width_factors.is_empty() || self.width_factors.windows(2).any(|w| w[0] >= w[1]) {
            return bad("width factors must be strictly increasing".into());
        }
        let mut prev: Option<usize> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.width >= self.width_factors.len() {
                return bad(format!("layer {l} width index {} out of range", layer.width));
            }
            if (self.width_factors[layer.width] * self.base_width as f64).floor() < 1.0 {
                return bad(format!("layer {l} rounds to zero channels"));
            }
            if prev.is_some_and(|p| p.abs_diff(layer.width) > 1) {
                return bad(format!("layer {l} changes width by more than one step"));
            }
            prev = Some(layer.width);
            if layer.nodes.len() != self.nodes {
                return bad(format!("layer {l} has {} nodes, expected {}", layer.nodes.len(), self.nodes));
            }
            for (j, edges) in layer.nodes.iter().enumerate() {
                if edges[0].source == edges[1].source {
                    return bad(format!("layer {l} node {j} repeats source {}", edges[0].source));
                }
                for e in edges {
                    if e.source >= j + 2 {
                        return bad(format!("layer {l} node {j} reads from later source {}", e.source));
                    }
                    let idx = self.space.op_index(&e.op).ok_or_else(|| {
                        Error::Config(format!("invalid genotype: unknown op `{}` in {}", e.op, self.space))
                    })?;
                    if idx == SearchSpace::DISCARD_INDEX {
                        return bad(format!("layer {l} node {j} retains the discarding op"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let factors: Vec<String> = self.width_factors.iter().map(|g| format!("{g:?}")).collect();
        writeln!(s, "{GENOTYPE_HEADER}").unwrap();
        writeln!(s, "space {}", self.space).unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        writeln!(s, "nodes {}", self.nodes).unwrap();
        writeln!(s, "base_width {}", self.base_width).unwrap();
        writeln!(s, "width_factors {}", factors.join(" ")).unwrap();
        for (l, layer) in self.layers.iter().enumerate() {
            writeln!(s, "layer {l} width {}", layer.width).unwrap();
            for (j, [a, b]) in layer.nodes.iter().enumerate() {
                writeln!(s, "node {j} {}:{} {}:{}", a.source, a.op, b.source, b.op).unwrap();
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let err = |line: usize, field: &str, reason: String| Error::Parse {
            line,
            field: field.to_string(),
            reason,
        };
        let mut next = |field: &str| -> Result<(usize, Vec<&str>)> {
            let (n, l) = lines.next().ok_or_else(|| err(0, field, "unexpected end of text".into()))?;
            Ok((n, l.split_whitespace().collect()))
        };
        fn num<T: std::str::FromStr>(line: usize, field: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line,
                field: field.to_string(),
                reason: format!("`{v}` is not a valid number"),
            })
        }
        let keyed = |(n, parts): (usize, Vec<&str>), key: &str| -> Result<(usize, Vec<String>)> {
            if parts.first() != Some(&key) || parts.len() < 2 {
                return Err(err(n, key, format!("expected `{key} <value>`")));
            }
            Ok((n, parts[1..].iter().map(|s| s.to_string()).collect()))
        };

        let (n, header) = next("header")?;
        if header.join(" ") != GENOTYPE_HEADER {
            return Err(err(n, "header", format!("expected `{GENOTYPE_HEADER}`")));
        }
        let (n, v) = keyed(next("space")?, "space")?;
        let space: SearchSpace = v[0].parse().map_err(|e: Error| err(n, "space", e.to_string()))?;
        let (n, v) = keyed(next("layers")?, "layers")?;
        let n_layers: usize = num(n, "layers", &v[0])?;
        if n_layers == 0 {
            return Err(err(n, "layers", "a genotype needs at least one layer".into()));
        }
        let (n, v) = keyed(next("nodes")?, "nodes")?;
        let nodes: usize = num(n, "nodes", &v[0])?;
        if nodes == 0 {
            return Err(err(n, "nodes", "a cell needs at least one node".into()));
        }
        let (n, v) = keyed(next("base_width")?, "base_width")?;
        let base_width: usize = num(n, "base_width", &v[0])?;
        let (n, v) = keyed(next("width_factors")?, "width_factors")?;
        let width_factors = v.iter().map(|s| num(n, "width_factors", s)).collect::<Result<Vec<f64>>>()?;

        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (n, parts) = next("layer")?;
            if parts.len() != 4 || parts[0] != "layer" || parts[2] != "width" {
                return Err(err(n, "layer", "expected `layer <index> width <index>`".into()));
            }
            if num::<usize>(n, "layer", parts[1])? != l {
                return Err(err(n, "layer", format!("expected layer {l}")));
            }
            let width = num(n, "width", parts[3])?;
            let mut cell = Vec::with_capacity(nodes);
            for j in 0..nodes {
                let (n, parts) = next("node")?;
                if parts.len() != 4 || parts[0] != "node" {
                    return Err(err(n, "node", "expected `node <index> <src>:<op> <src>:<op>`".into()));
                }
                if num::<usize>(n, "node", parts[1])? != j {
                    return Err(err(n, "node", format!("expected node {j}")));
                }
                let edge = |s: &str| -> Result<Edge> {
                    let (src, op) = s.split_once(':').ok_or_else(|| err(n, "edge", format!("`{s}` is not <src>:<op>")))?;
                    if space.op_index(op).is_none() {
                        return Err(err(n, "op", format!("unknown op `{op}` in {space}")));
                    }
                    Ok(Edge {
                        source: num(n, "source", src)?,
                        op: op.to_string(),
                    })
                };
                cell.push([edge(parts[2])?, edge(parts[3])?]);
            }
            layers.push(LayerGenotype { width, nodes: cell });
        }
        if let Some((n, _)) = lines.next() {
            return Err(err(n, "layers", format!("trailing content after {n_layers} layers")));
        }
        let g = Self {
            space,
            nodes,
            base_width,
            width_factors,
            layers,
        };
        g.validate()?;
        Ok(g)
    }
}
