//! Whole-scene classification by sliding windows, with multi-scale and
//! overlapping-window averaging of per-pixel probabilities.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, ParamStore, Var};
use crate::data::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A fully convolutional network mapping `[B, 1, bands, H, W]` cubes to
/// `[B, K, H, W]` logits.
pub trait Model {
    fn num_classes(&self) -> usize;
    fn bands(&self) -> usize;
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var>;
}

/// Eval-mode class probabilities for a batch of patches.
pub fn predict(model: &dyn Model, store: &mut ParamStore, x: Tensor) -> Result<Tensor> {
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.constant(x);
    let logits = model.forward(&mut g, x)?;
    let probs = g.softmax(logits, 1)?;
    Ok(g.value(probs).clone())
}

/// Window anchors covering a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub anchors: Vec<(usize, usize)>,
    /// Window extents after clamping to the scene.
    pub window: (usize, usize),
    pub stride: usize,
}

fn axis_anchors(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut a = 0;
    loop {
        let pos = a.min(len - window);
        if out.last() != Some(&pos) {
            out.push(pos);
        }
        if a + window >= len {
            break;
        }
        a += stride;
    }
    out
}

/// Anchors at multiples of `stride`, with the last row and column pulled in
/// so every window lies inside the scene. A window larger than the scene is
/// shrunk to it.
pub fn plan_tiles(scene: (usize, usize), window: usize, stride: usize) -> Result<TilePlan> {
    let (h, w) = scene;
    if h == 0 || w == 0 || window == 0 || stride == 0 {
        return Err(Error::Contract("scene, window and stride must be positive".into()));
    }
    let (wh, ww) = (window.min(h), window.min(w));
    let rows = axis_anchors(h, wh, stride);
    let cols = axis_anchors(w, ww, stride);
    let anchors = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TilePlan {
        anchors,
        window: (wh, ww),
        stride,
    })
}

impl TilePlan {
    /// Number of windows covering each pixel, row-major.
    pub fn coverage(&self, scene: (usize, usize)) -> Vec<u32> {
        let mut counts = vec![0u32; scene.0 * scene.1];
        for &(r, c) in &self.anchors {
            for y in r..r + self.window.0 {
                for x in c..c + self.window.1 {
                    counts[y * scene.1 + x] += 1;
                }
            }
        }
        counts
    }
}

/// Summed tile probabilities and per-pixel coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[K, H, W]` sums.
    pub accum: Vec<f64>,
    pub counts: Vec<u32>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            accum: vec![0.0; classes * height * width],
            counts: vec![0; height * width],
        }
    }

    /// Add one tile of `[K, h, w]` probabilities at `anchor`.
    pub fn add_tile(&mut self, anchor: (usize, usize), size: (usize, usize), probs: &[f64]) {
        let (r0, c0) = anchor;
        let (h, w) = size;
        let plane = self.height * self.width;
        for y in 0..h {
            for x in 0..w {
                self.counts[(r0 + y) * self.width + c0 + x] += 1;
            }
        }
        for k in 0..self.classes {
            for y in 0..h {
                let dst = k * plane + (r0 + y) * self.width + c0;
                let src = (k * h + y) * w;
                for (d, s) in self.accum[dst..dst + w].iter_mut().zip(&probs[src..src + w]) {
                    *d += s;
                }
            }
        }
    }

    /// Per-pixel mean probabilities `[K, H, W]`.
    pub fn averaged(&self) -> Result<Vec<f64>> {
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!(
                "pixel ({}, {}) was never covered",
                i / self.width,
                i % self.width
            )));
        }
        let plane = self.height * self.width;
        Ok(self
            .accum
            .iter()
            .enumerate()
            .map(|(i, &v)| v / self.counts[i % plane] as f64)
            .collect())
    }
}

/// Per-pixel argmax of `[K, H, W]` scores as 1-based classes; ties go to the
/// smaller class.
pub fn class_map(scores: &[f64], classes: usize, height: usize, width: usize) -> LabelMap {
    let plane = height * width;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..classes {
                if scores[k * plane + p] > scores[best * plane + p] {
                    best = k;
                }
            }
            best as u16 + 1
        })
        .collect();
    LabelMap {
        height,
        width,
        labels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Plain,
    Ms,
    Ov,
    MsOv,
}

impl Strategy {
    pub fn multi_scale(self) -> bool {
        matches!(self, Strategy::Ms | Strategy::MsOv)
    }

    pub fn overlap(self) -> bool {
        matches!(self, Strategy::Ov | Strategy::MsOv)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Plain => "plain",
            Strategy::Ms => "ms",
            Strategy::Ov => "ov",
            Strategy::MsOv => "ms-ov",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Strategy::Plain),
            "ms" => Ok(Strategy::Ms),
            "ov" => Ok(Strategy::Ov),
            "ms-ov" | "ms+ov" => Ok(Strategy::MsOv),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (plain, ms, ov, ms-ov)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Window of the single-scale strategies.
    pub window: usize,
    /// Windows averaged by the multi-scale strategies.
    pub scales: Vec<usize>,
    /// Tiles per network call.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 32,
            scales: vec![16, 32, 48],
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    /// `[K, H, W]` averaged probabilities.
    pub probabilities: Vec<f64>,
    pub class_map: LabelMap,
    pub tiles: usize,
    pub network_calls: usize,
    pub seconds: f64,
}

impl InferenceResult {
    pub fn kilopixels_per_second(&self) -> f64 {
        let pixels = (self.class_map.height * self.class_map.width) as f64;
        pixels / self.seconds.max(1e-12) / 1e3
    }
}

/// Stack windows of `cube` into a `[B, 1, bands, h, w]` tensor.
pub fn gather_tiles(cube: &HsiCube, anchors: &[(usize, usize)], size: (usize, usize)) -> Tensor {
    let (h, w) = size;
    let mut data = Vec::with_capacity(anchors.len() * cube.bands * h * w);
    for &(r0, c0) in anchors {
        for b in 0..cube.bands {
            for r in r0..r0 + h {
                let start = (b * cube.height + r) * cube.width + c0;
                data.extend(cube.values[start..start + w].iter().map(|&v| v as f64));
            }
        }
    }
    Tensor::new(vec![anchors.len(), 1, cube.bands, h, w], data).expect("tile shape")
}

/// Probability map of one tiling of the scene.
pub fn run_plan(model: &dyn Model, store: &mut ParamStore, cube: &HsiCube, plan: &TilePlan, batch: usize) -> Result<(ProbabilityMap, usize)> {
    let k = model.num_classes();
    let mut map = ProbabilityMap::new(k, cube.height, cube.width);
    let (h, w) = plan.window;
    let mut calls = 0;
    for chunk in plan.anchors.chunks(batch.max(1)) {
        let probs = predict(model, store, gather_tiles(cube, chunk, plan.window))?;
        calls += 1;
        let per = k * h * w;
        for (i, &anchor) in chunk.iter().enumerate() {
            map.add_tile(anchor, plan.window, &probs.data()[i * per..(i + 1) * per]);
        }
    }
    Ok((map, calls))
}

/// Classify every pixel of `cube` with `strategy`.
pub fn infer(model: &dyn Model, store: &mut ParamStore, cube: &HsiCube, strategy: Strategy, config: &InferenceConfig) -> Result<InferenceResult> {
    if cube.bands != model.bands() {
        return Err(Error::Config(format!(
            "cube has {} bands, network expects {}",
            cube.bands,
            model.bands()
        )));
    }
    if config.window == 0 || config.scales.contains(&0) || config.scales.is_empty() {
        return Err(Error::Config("inference windows must be positive".into()));
    }
    let start = Instant::now();
    let windows = if strategy.multi_scale() { config.scales.clone() } else { vec![config.window] };
    let k = model.num_classes();
    let mut total = vec![0.0; k * cube.height * cube.width];
    let (mut tiles, mut calls) = (0, 0);
    for &win in &windows {
        let stride = if strategy.overlap() { (win / 2).max(1) } else { win };
        let plan = plan_tiles((cube.height, cube.width), win, stride)?;
        let (map, c) = run_plan(model, store, cube, &plan, config.batch_size)?;
        tiles += plan.anchors.len();
        calls += c;
        for (t, v) in total.iter_mut().zip(map.averaged()?) {
            *t += v;
        }
    }
    let n = windows.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    let class_map = class_map(&total, k, cube.height, cube.width);
    Ok(InferenceResult {
        probabilities: total,
        class_map,
        tiles,
        network_calls: calls,
        seconds: start.elapsed().as_secs_f64(),
    })
}
