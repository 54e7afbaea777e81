//! Data-driven loss weights.
//!
//! The structure-loss pair comes from a two-way softmax of the sources'
//! average gradients, the intensity-loss pair from a softmax of their
//! entropies. Weights are recomputed per pair (or per patch) and never touch
//! model parameters.

use crate::metrics::{average_gradient, entropy};
use crate::raster::ImagePlane;
use crate::Result;

/// The per-pair weight quadruple. Each pair lies on the 2-simplex:
/// `sigma_a + sigma_b == 1` and `gamma_a + gamma_b == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeights {
    /// Structure-loss weight of the visible source.
    pub sigma_a: f64,
    /// Structure-loss weight of the infrared source.
    pub sigma_b: f64,
    /// Intensity-loss weight of the visible source.
    pub gamma_a: f64,
    /// Intensity-loss weight of the infrared source.
    pub gamma_b: f64,
}

/// Two-way softmax with max subtraction.
pub fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

impl AdaptiveWeights {
    /// Uniform weights (used when both statistics are degenerate).
    pub fn uniform() -> Self {
        AdaptiveWeights {
            sigma_a: 0.5,
            sigma_b: 0.5,
            gamma_a: 0.5,
            gamma_b: 0.5,
        }
    }

    /// Builds the quadruple from raw statistics of the two sources.
    pub fn from_statistics(ag_v: f64, ag_r: f64, en_v: f64, en_r: f64) -> Self {
        let (sigma_a, sigma_b) = softmax2(ag_v, ag_r);
        let (gamma_a, gamma_b) = softmax2(en_v, en_r);
        AdaptiveWeights {
            sigma_a,
            sigma_b,
            gamma_a,
            gamma_b,
        }
    }

    /// Computes weights for one (visible, infrared) pair. Entropy is taken
    /// over 256 levels of each plane's declared range.
    pub fn from_pair(v: &ImagePlane, r: &ImagePlane) -> Result<Self> {
        let ag_v = average_gradient(v);
        let ag_r = average_gradient(r);
        let en_v = entropy(v, 256)?;
        let en_r = entropy(r, 256)?;
        Ok(Self::from_statistics(ag_v, ag_r, en_v, en_r))
    }

    /// True when both softmax inputs were indistinguishable, i.e. the pair
    /// carries no preference signal for that weight.
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:.12},{:.12},{:.12},{:.12}",
            self.sigma_a, self.sigma_b, self.gamma_a, self.gamma_b
        )
    }
}

pub const WEIGHTS_CSV_HEADER: &str = "step,sigma_a,sigma_b,gamma_a,gamma_b";
