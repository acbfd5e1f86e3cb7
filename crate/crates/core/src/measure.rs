//! Finite measures as weighted particle ensembles.
//!
//! A weight is stored as `weights[i] · exp(log_offset)`. The offset stays 0
//! unless the raw weights would leave the range `1e±250`, which can happen
//! with exponential importance weights.

use crate::error::{Error, Result};
use crate::export::csv_table;
use crate::model::TestFunction;
use crate::stats::pairwise_sum;

const LOG_RANGE: f64 = 575.646_273_248_511_4; // ln(1e250)

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    dim: usize,
    /// `N × dim`, row-major.
    points: Vec<f64>,
    weights: Vec<f64>,
    log_offset: f64,
    pub time: f64,
}

impl WeightedEnsemble {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>, time: f64) -> Result<Self> {
        if dim == 0 || points.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates for {} weights in dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        Ok(Self {
            dim,
            points,
            weights,
            log_offset: 0.0,
            time,
        })
    }

    /// Builds an ensemble from log-weights, switching to the offset
    /// representation only when linear weights would over- or underflow.
    pub fn from_log_weights(dim: usize, points: Vec<f64>, log_weights: &[f64], time: f64) -> Result<Self> {
        if log_weights.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::NonFinite("log-weights".into()));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let offset = if max.abs() > LOG_RANGE { max } else { 0.0 };
        let weights = log_weights.iter().map(|l| (l - offset).exp()).collect();
        let mut e = Self::new(dim, points, weights, time)?;
        e.log_offset = offset;
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Stored weights; multiply by `exp(log_offset())` for the true values.
    pub fn raw_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_offset(&self) -> f64 {
        self.log_offset
    }

    /// True weights. Infinite if the offset representation is in use and the
    /// values do not fit in a double.
    pub fn weights(&self) -> Vec<f64> {
        let s = self.log_offset.exp();
        if self.log_offset == 0.0 {
            self.weights.clone()
        } else {
            self.weights.iter().map(|w| w * s).collect()
        }
    }

    /// Multiplies every weight by `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::InvalidInput(format!("scale factor {c} must be finite and non-negative")));
        }
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= c);
        Ok(out)
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.weights) * self.log_offset.exp()
    }

    /// `μ(φ) = Σ wᵢ φ(xᵢ)`.
    pub fn integrate(&self, phi: &TestFunction) -> Result<f64> {
        self.integrate_with(|x| phi.value(x))
    }

    pub fn integrate_with<F: Fn(&[f64]) -> f64>(&self, phi: F) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let v = phi(self.point(i));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("test function at particle {i}")));
            }
            terms.push(self.weights[i] * v);
        }
        Ok(pairwise_sum(&terms) * self.log_offset.exp())
    }

    /// Rescales to total mass exactly 1. Already-normalised ensembles are
    /// returned unchanged, so normalising twice is a no-op.
    pub fn normalize(&self) -> Result<Self> {
        let raw = pairwise_sum(&self.weights);
        if !(raw > 0.0) || !raw.is_finite() {
            return Err(Error::DegenerateMeasure { mass: self.mass() });
        }
        if raw == 1.0 && self.log_offset == 0.0 {
            return Ok(self.clone());
        }
        let mut w: Vec<f64> = self.weights.iter().map(|v| v / raw).collect();
        // Push the rounding defect into the largest weight until the
        // pairwise sum is exactly one.
        let big = w
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > w[b] { i } else { b });
        for _ in 0..8 {
            let s = pairwise_sum(&w);
            if s == 1.0 {
                break;
            }
            w[big] = (w[big] + (1.0 - s)).max(0.0);
        }
        Ok(Self {
            dim: self.dim,
            points: self.points.clone(),
            weights: w,
            log_offset: 0.0,
            time: self.time,
        })
    }

    /// `(Σwᵢ)² / Σwᵢ²`.
    pub fn effective_sample_size(&self) -> Result<f64> {
        let s = pairwise_sum(&self.weights);
        if !(s > 0.0) {
            return Err(Error::DegenerateMeasure { mass: self.mass() });
        }
        let sq: Vec<f64> = self.weights.iter().map(|w| (w / s) * (w / s)).collect();
        Ok(1.0 / pairwise_sum(&sq))
    }

    /// CSV with columns `x_1..x_d, weight`.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        header.push("weight".into());
        let w = self.weights();
        let rows = (0..self.len()).map(|i| {
            let mut r = self.point(i).to_vec();
            r.push(w[i]);
            r
        });
        csv_table(&header, rows)
    }
}

/// A scalar process sampled on the time grid, such as total masses.
#[derive(Debug, Clone, PartialEq)]
pub struct MassPath {
    pub values: Vec<f64>,
}
