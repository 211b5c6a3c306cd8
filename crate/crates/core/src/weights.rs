use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightProfile {
    Uniform,
    OneHot,
    PowerLaw { alpha: f64 },
    Explicit,
}

impl WeightProfile {
    pub fn label(&self) -> String {
        match self {
            WeightProfile::Uniform => "uniform".into(),
            WeightProfile::OneHot => "one-hot".into(),
            WeightProfile::PowerLaw { alpha } => format!("power-law({alpha})"),
            WeightProfile::Explicit => "explicit".into(),
        }
    }
}

/// Coefficients `t_i` of the weighted spin average `X = Σ t_i σ_i`, with unit
/// Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    profile: WeightProfile,
    max_abs: f64,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        let w = 1.0 / (n as f64).sqrt();
        Self::build(vec![w; n], WeightProfile::Uniform)
    }

    /// `t = e_1`.
    pub fn one_hot(n: usize) -> Self {
        let mut w = vec![0.0; n];
        w[0] = 1.0;
        Self::build(w, WeightProfile::OneHot)
    }

    /// `t_i ∝ i^{−α}`, `i = 1..N`, normalised.
    pub fn power_law(n: usize, alpha: f64) -> Self {
        let raw: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-alpha)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self::build(
            raw.into_iter().map(|x| x / norm).collect(),
            WeightProfile::PowerLaw { alpha },
        )
    }

    pub fn explicit(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("weight vector is empty".into()));
        }
        let norm_sq: f64 = weights.iter().map(|x| x * x).sum();
        if (norm_sq - 1.0).abs() > NORM_TOLERANCE || !norm_sq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "weights must have unit norm, but sum of squares is {}",
                trim_float(norm_sq)
            )));
        }
        Ok(Self::build(weights, WeightProfile::Explicit))
    }

    pub fn from_profile(profile: &WeightProfile, n: usize) -> Result<Self> {
        match profile {
            WeightProfile::Uniform => Ok(Self::uniform(n)),
            WeightProfile::OneHot => Ok(Self::one_hot(n)),
            WeightProfile::PowerLaw { alpha } => Ok(Self::power_law(n, *alpha)),
            WeightProfile::Explicit => Err(Error::InvalidParameter(
                "explicit weights must be given as a vector".into(),
            )),
        }
    }

    fn build(weights: Vec<f64>, profile: WeightProfile) -> Self {
        let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        Self {
            weights,
            profile,
            max_abs,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn profile(&self) -> &WeightProfile {
        &self.profile
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(|x| x * x).sum()
    }
}

/// Shortest decimal rendering, at most 12 fractional digits (`0.9000000000000001` → `0.9`).
pub(crate) fn trim_float(x: f64) -> String {
    let s = format!("{x:.12}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}
