//! Confusion matrix, overall accuracy, average accuracy and Cohen's kappa.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Rows are reference classes, columns predicted classes; entry `[i][j]`
/// counts pixels of class `i + 1` predicted as class `j + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count one pixel; classes are 1-based, 0 reference means unlabeled.
    pub fn record(&mut self, reference: u16, predicted: u16) -> Result<()> {
        if reference == 0 {
            return Ok(());
        }
        let (r, p) = (reference as usize, predicted as usize);
        if r > self.classes || p == 0 || p > self.classes {
            return Err(Error::Contract(format!(
                "class pair ({r}, {p}) outside 1..={}",
                self.classes
            )));
        }
        self.counts[(r - 1) * self.classes + p - 1] += 1;
        Ok(())
    }

    /// Add every labeled pixel of `reference` with its prediction.
    pub fn accumulate(&mut self, reference: &LabelMap, predicted: &LabelMap) -> Result<()> {
        if reference.height != predicted.height || reference.width != predicted.width {
            return Err(Error::Shape(format!(
                "reference {}x{} vs prediction {}x{}",
                reference.height, reference.width, predicted.height, predicted.width
            )));
        }
        for (&r, &p) in reference.labels.iter().zip(&predicted.labels) {
            self.record(r, p)?;
        }
        Ok(())
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("no labeled pixels were scored")),
            t => Ok(t as f64),
        }
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn oa(&self) -> Result<f64> {
        let total = self.nonempty()?;
        let trace: u64 = (0..self.classes).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total)
    }

    /// Mean recall over classes that occur in the reference.
    pub fn aa(&self) -> Result<f64> {
        self.nonempty()?;
        let recalls: Vec<f64> = (0..self.classes)
            .filter_map(|i| {
                let n = self.row_sum(i);
                (n > 0).then(|| self.get(i, i) as f64 / n as f64)
            })
            .collect();
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Cohen's kappa. When chance agreement is 1 it is 1 for perfect
    /// agreement and 0 otherwise.
    pub fn kappa(&self) -> Result<f64> {
        let total = self.nonempty()?;
        let po = self.oa()?;
        let pe = (0..self.classes)
            .map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64)
            .sum::<f64>()
            / (total * total);
        if pe >= 1.0 {
            return Ok(if po >= 1.0 { 1.0 } else { 0.0 });
        }
        Ok((po - pe) / (1.0 - pe))
    }

    pub fn summary(&self) -> Result<Scores> {
        Ok(Scores {
            oa: self.oa()?,
            aa: self.aa()?,
            kappa: self.kappa()?,
        })
    }
}

impl Add for &ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, rhs: &ConfusionMatrix) -> ConfusionMatrix {
        assert_eq!(self.classes, rhs.classes, "confusion matrices of different sizes");
        ConfusionMatrix {
            classes: self.classes,
            counts: self.counts.iter().zip(&rhs.counts).map(|(a, b)| a + b).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl std::fmt::Display for Scores {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "OA {:.2} AA {:.2} K {:.2}",
            100.0 * self.oa,
            100.0 * self.aa,
            100.0 * self.kappa
        )
    }
}

/// Score `predicted` against the labeled pixels of `reference`.
pub fn evaluate(reference: &LabelMap, predicted: &LabelMap, classes: usize) -> Result<Scores> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(reference, predicted)?;
    cm.summary()
}
