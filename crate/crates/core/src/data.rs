//! Hyperspectral cubes, sparse label maps, their file formats, splitting,
//! patch extraction and a synthetic scene generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSI1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";

/// Per-band standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A `height x width x bands` volume stored band by band; each band plane is
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    /// Statistics applied by the last call to [`HsiCube::normalize`].
    pub norm: Option<NormStats>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("cube values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            norm: None,
        })
    }

    #[inline]
    pub fn at(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.at(b, row, col)).collect()
    }

    /// Band means and standard deviations over the labeled pixels of `mask`.
    pub fn stats(&self, mask: &LabelMap) -> Result<NormStats> {
        self.check_map(mask)?;
        let idx: Vec<usize> = mask.labeled().collect();
        if idx.is_empty() {
            return Err(Error::EmptySupervision);
        }
        let n = idx.len() as f64;
        let plane = self.height * self.width;
        let mut mean = Vec::with_capacity(self.bands);
        let mut std = Vec::with_capacity(self.bands);
        for b in 0..self.bands {
            let band = &self.values[b * plane..(b + 1) * plane];
            let m = idx.iter().map(|&i| band[i] as f64).sum::<f64>() / n;
            let v = idx.iter().map(|&i| (band[i] as f64 - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(v.sqrt());
        }
        Ok(NormStats { mean, std })
    }

    /// Standardize every pixel with `stats`. Constant bands are only centered.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        if stats.mean.len() != self.bands || stats.std.len() != self.bands {
            return Err(Error::dim("bands", self.bands, stats.mean.len(), "normalization statistics"));
        }
        let plane = self.height * self.width;
        for b in 0..self.bands {
            let s = if stats.std[b] > 1e-12 { stats.std[b] } else { 1.0 };
            for v in &mut self.values[b * plane..(b + 1) * plane] {
                *v = ((*v as f64 - stats.mean[b]) / s) as f32;
            }
        }
        self.norm = Some(stats.clone());
        Ok(())
    }

    pub fn check_map(&self, map: &LabelMap) -> Result<()> {
        if map.height != self.height || map.width != self.width {
            return Err(Error::Shape(format!(
                "label map {}x{} does not match cube {}x{}",
                map.height, map.width, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        buf.extend_from_slice(CUBE_MAGIC);
        for d in [self.height, self.width, self.bands] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let dims = header(bytes, CUBE_MAGIC, "HSI1", 3)?;
        let (h, w, b) = (dims[0], dims[1], dims[2]);
        let n = h.checked_mul(w).and_then(|v| v.checked_mul(b)).ok_or_else(|| Error::Format {
            what: "HSI1",
            offset: 4,
            reason: "dimensions overflow".into(),
        })?;
        let body = payload(bytes, 16, n, 4, "HSI1")?;
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                what: "HSI1",
                offset: 16 + 4 * i,
                reason: "non-finite value".into(),
            });
        }
        Ok(Self {
            height: h,
            width: w,
            bands: b,
            values,
            norm: None,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::checkpoint::write_atomic(path, bytes)
}

fn header(bytes: &[u8], magic: &[u8; 4], what: &'static str, fields: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format {
            what,
            offset: 0,
            reason: format!("missing `{what}` magic"),
        });
    }
    (0..fields)
        .map(|i| {
            let off = 4 + 4 * i;
            bytes
                .get(off..off + 4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .ok_or(Error::Format {
                    what,
                    offset: bytes.len(),
                    reason: "truncated header".into(),
                })
        })
        .collect()
}

fn payload<'a>(bytes: &'a [u8], start: usize, count: usize, size: usize, what: &'static str) -> Result<&'a [u8]> {
    let end = count.checked_mul(size).and_then(|v| v.checked_add(start)).ok_or(Error::Format {
        what,
        offset: start,
        reason: "payload size overflows".into(),
    })?;
    if bytes.len() < end {
        return Err(Error::Format {
            what,
            offset: bytes.len(),
            reason: format!("truncated payload: expected {end} bytes"),
        });
    }
    if bytes.len() > end {
        return Err(Error::Format {
            what,
            offset: end,
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok(&bytes[start..end])
}

/// Row-major per-pixel labels; 0 is unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Flat indices of labeled pixels.
    pub fn labeled(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Largest class id present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Labeled pixels per class id `1..=num_classes`, index 0 unused.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes() + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts[0] = 0;
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 2 * self.labels.len());
        buf.extend_from_slice(LABEL_MAGIC);
        for d in [self.height, self.width] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        write_file(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let dims = header(bytes, LABEL_MAGIC, "LBL1", 2)?;
        let (h, w) = (dims[0], dims[1]);
        let n = h.checked_mul(w).ok_or(Error::Format {
            what: "LBL1",
            offset: 4,
            reason: "dimensions overflow".into(),
        })?;
        let body = payload(bytes, 12, n, 2, "LBL1")?;
        Ok(Self {
            height: h,
            width: w,
            labels: body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

/// Draw `train_per_class` and `val_per_class` pixels of every class at
/// random; every other labeled pixel goes to the test map.
pub fn split_labels(map: &LabelMap, spec: SplitSpec) -> Result<(LabelMap, LabelMap, LabelMap)> {
    let counts = map.class_counts();
    let required = spec.train_per_class + spec.val_per_class;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for i in map.labeled() {
        by_class[map.labels[i] as usize].push(i);
    }
    for (c, pixels) in by_class.iter().enumerate().skip(1) {
        if !pixels.is_empty() && pixels.len() < required {
            return Err(Error::UnderPopulatedClass {
                class: c as u16,
                available: pixels.len(),
                required,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = LabelMap::empty(map.height, map.width);
    let mut val = LabelMap::empty(map.height, map.width);
    let mut test = LabelMap::empty(map.height, map.width);
    for (c, pixels) in by_class.iter_mut().enumerate().skip(1) {
        pixels.shuffle(&mut rng);
        for (n, &i) in pixels.iter().enumerate() {
            let dst = if n < spec.train_per_class {
                &mut train
            } else if n < required {
                &mut val
            } else {
                &mut test
            };
            dst.labels[i] = c as u16;
        }
    }
    Ok((train, val, test))
}

/// Aligned crops of a cube and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Band-major `[bands, height, width]`.
    pub x: Vec<f32>,
    /// Row-major `[height, width]`.
    pub y: Vec<u16>,
}

pub fn extract_sample(cube: &HsiCube, labels: &LabelMap, anchor: (usize, usize), h: usize, w: usize) -> Result<Sample> {
    cube.check_map(labels)?;
    let (r0, c0) = anchor;
    if h == 0 || w == 0 || r0 + h > cube.height || c0 + w > cube.width {
        return Err(Error::Contract(format!(
            "window {h}x{w} at ({r0}, {c0}) exceeds the {}x{} scene",
            cube.height, cube.width
        )));
    }
    let mut x = Vec::with_capacity(cube.bands * h * w);
    for b in 0..cube.bands {
        for r in r0..r0 + h {
            let start = (b * cube.height + r) * cube.width + c0;
            x.extend_from_slice(&cube.values[start..start + w]);
        }
    }
    let mut y = Vec::with_capacity(h * w);
    for r in r0..r0 + h {
        y.extend_from_slice(&labels.labels[r * labels.width + c0..r * labels.width + c0 + w]);
    }
    Ok(Sample {
        row: r0,
        col: c0,
        height: h,
        width: w,
        bands: cube.bands,
        x,
        y,
    })
}

impl Sample {
    pub fn labeled_count(&self) -> usize {
        self.y.iter().filter(|&&l| l != 0).count()
    }

    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
        let plane = self.height * self.width;
        let mut x = vec![0.0; self.x.len()];
        let mut y = vec![0; self.y.len()];
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = src(r, c);
                let s = sr * self.width + sc;
                y[r * w + c] = self.y[s];
                for b in 0..self.bands {
                    x[b * plane + r * w + c] = self.x[b * plane + s];
                }
            }
        }
        Sample {
            height: h,
            width: w,
            x,
            y,
            ..*self
        }
    }

    /// Mirror left to right.
    pub fn flip_horizontal(&self) -> Sample {
        let w = self.width;
        self.remap(self.height, w, |r, c| (r, w - 1 - c))
    }

    /// Mirror top to bottom.
    pub fn flip_vertical(&self) -> Sample {
        let h = self.height;
        self.remap(h, self.width, |r, c| (h - 1 - r, c))
    }

    /// Rotate counter-clockwise by `quarters * 90` degrees.
    pub fn rotate(&self, quarters: usize) -> Sample {
        let (h, w) = (self.height, self.width);
        match quarters % 4 {
            0 => self.clone(),
            1 => self.remap(w, h, |r, c| (c, w - 1 - r)),
            2 => self.remap(h, w, |r, c| (h - 1 - r, w - 1 - c)),
            _ => self.remap(w, h, |r, c| (h - 1 - c, r)),
        }
    }
}

/// Random crops containing at least one labeled pixel. Gives up after
/// `100 * count` rejected draws.
pub fn random_samples(cube: &HsiCube, labels: &LabelMap, count: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    cube.check_map(labels)?;
    let (h, w) = (size.min(cube.height), size.min(cube.width));
    if labels.labeled_count() == 0 {
        return Err(Error::EmptySupervision);
    }
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 100 * count.max(1) {
            return Err(Error::Config(format!(
                "could not find {count} labeled {h}x{w} windows after {} draws",
                tries - 1
            )));
        }
        let r = rng.random_range(0..=cube.height - h);
        let c = rng.random_range(0..=cube.width - w);
        let s = extract_sample(cube, labels, (r, c), h, w)?;
        if s.labeled_count() > 0 {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Smooth per-class spectra: one dominant Gaussian bump in the class's own
/// band stratum plus one weaker bump anywhere, over a constant floor.
pub fn class_signatures(bands: usize, classes: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let width = (bands as f64 / classes.max(1) as f64).max(1.0);
    (0..classes)
        .map(|c| {
            let main_center = (c as f64 + rng.random_range(0.3..0.7)) * width;
            let main_amp = rng.random_range(0.8..1.2);
            let side_center = rng.random_range(0.0..bands as f64);
            let side_amp = rng.random_range(0.1..0.3);
            let sigma = (0.35 * width).max(0.5);
            (0..bands)
                .map(|b| {
                    let x = b as f64 + 0.5;
                    let bump = |mu: f64, a: f64| a * (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp();
                    0.2 + bump(main_center, main_amp) + bump(side_center, side_amp)
                })
                .collect()
        })
        .collect()
}

/// Voronoi partition of the scene around jittered grid sites. Every class
/// owns at least one region.
pub fn class_regions(height: usize, width: usize, classes: usize, rng: &mut impl Rng) -> Vec<u16> {
    let grid = ((2 * classes) as f64).sqrt().ceil() as usize;
    let (ch, cw) = (height as f64 / grid as f64, width as f64 / grid as f64);
    let mut sites = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let y = (gy as f64 + rng.random_range(0.2..0.8)) * ch;
            let x = (gx as f64 + rng.random_range(0.2..0.8)) * cw;
            sites.push((y, x));
        }
    }
    let mut owner: Vec<u16> = (0..sites.len()).map(|i| (i % classes) as u16 + 1).collect();
    owner.shuffle(rng);
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = sites
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1 .0 - py).powi(2) + (a.1 .1 - px).powi(2);
                    let db = (b.1 .0 - py).powi(2) + (b.1 .1 - px).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .expect("at least one site");
            labels.push(owner[nearest]);
        }
    }
    labels
}

/// Fully labeled synthetic scene with additive Gaussian noise.
pub fn gen_synthetic(spec: SyntheticSpec) -> Result<(HsiCube, LabelMap)> {
    if spec.height == 0 || spec.width == 0 || spec.bands == 0 {
        return Err(Error::Config("synthetic scene needs positive extents".into()));
    }
    if spec.classes == 0 || spec.classes > u16::MAX as usize {
        return Err(Error::Config(format!("class count {} out of range", spec.classes)));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config("noise sigma must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = class_signatures(spec.bands, spec.classes, &mut rng);
    let labels = class_regions(spec.height, spec.width, spec.classes, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
    let plane = spec.height * spec.width;
    let mut values = vec![0.0f32; plane * spec.bands];
    for (b, band) in values.chunks_exact_mut(plane).enumerate() {
        for (p, v) in band.iter_mut().enumerate() {
            let base = signatures[labels[p] as usize - 1][b];
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = (base + n) as f32;
        }
    }
    Ok((
        HsiCube::new(spec.height, spec.width, spec.bands, values)?,
        LabelMap::new(spec.height, spec.width, labels)?,
    ))
}
