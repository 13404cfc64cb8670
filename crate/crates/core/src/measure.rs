use crate::error::{invalid, Result};

/// Nonnegative weights on a finite index set (usually the state grid).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
}

/// Tolerance on the total mass of a probability measure.
pub const PROBABILITY_TOL: f64 = 1e-12;

impl DiscreteMeasure {
    /// Any finite nonnegative weights.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("measure has no atoms"));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid(format!(
                "weight {i} is {} (must be finite and nonnegative)",
                weights[i]
            )));
        }
        Ok(Self { weights })
    }

    /// Weights that must already sum to one.
    pub fn probability(weights: Vec<f64>) -> Result<Self> {
        let m = Self::new(weights)?;
        let total = m.total();
        if (total - 1.0).abs() > PROBABILITY_TOL {
            return Err(invalid(format!("probability weights sum to {total}")));
        }
        Ok(m)
    }

    /// Rescales nonnegative weights to unit mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let m = Self::new(weights)?;
        let total = m.total();
        if total <= 0.0 {
            return Err(invalid("cannot normalize a measure with zero mass"));
        }
        Ok(Self {
            weights: m.weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("measure has no atoms"));
        }
        Ok(Self {
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn dirac(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(invalid(format!("atom {at} outside index set of size {n}")));
        }
        let mut w = vec![0.0; n];
        w[at] = 1.0;
        Self::new(w)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.total() - 1.0).abs() <= PROBABILITY_TOL
    }

    /// Indices carrying positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
    }

    /// `self` is absolutely continuous with respect to `other`.
    pub fn is_dominated_by(&self, other: &DiscreteMeasure) -> bool {
        self.len() == other.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| *a == 0.0 || *b > 0.0)
    }

    /// Image measure under `map: i -> map[i]` into `m` atoms.
    pub fn pushforward(&self, map: &[usize], m: usize) -> Result<DiscreteMeasure> {
        if map.len() != self.len() {
            return Err(invalid(format!(
                "map has {} entries, measure has {}",
                map.len(),
                self.len()
            )));
        }
        let mut out = vec![0.0; m];
        for (w, &j) in self.weights.iter().zip(map) {
            if j >= m {
                return Err(invalid(format!("map target {j} outside 0..{m}")));
            }
            out[j] += w;
        }
        DiscreteMeasure::new(out)
    }

    /// Sup-norm distance between weight vectors.
    pub fn sup_distance(&self, other: &DiscreteMeasure) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Total variation distance, `(1/2) sum |a - b|`.
    pub fn tv_distance(&self, other: &DiscreteMeasure) -> f64 {
        0.5 * self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Mixture `t * self + (1 - t) * other`.
    pub fn mix(&self, other: &DiscreteMeasure, t: f64) -> Result<DiscreteMeasure> {
        if self.len() != other.len() {
            return Err(invalid("mixing measures of different sizes"));
        }
        DiscreteMeasure::new(
            self.weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| t * a + (1.0 - t) * b)
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for DiscreteMeasure {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.weights[i]
    }
}
