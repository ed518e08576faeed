//! Structural causal models that generate benchmark data and the
//! ground-truth potential outcomes used to score estimators.

mod demand;
mod linear;
mod sprite;

pub use demand::{
    demand_g, demand_ground_truth, demand_sample, demand_sample_with, noise_grid, DemandConfig,
    DemandOverrides, GroundTruth, DEMAND_TRUTH_MC, VAR_W_LEVELS, VAR_Z_LEVELS,
};
pub use linear::{linear_sample, LinearConfig};
pub use sprite::{
    confounding_factor, render_glyph, sprite_ground_truth, sprite_sample, sprite_test_grid,
    GlyphParams, SpriteConfig, SpriteWorld, POS_LEVELS, ROTATION_LEVELS, SCALE_LEVELS,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Which benchmark a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Demand,
    Sprite,
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demand" => Ok(Experiment::Demand),
            "sprite" | "dsprite" => Ok(Experiment::Sprite),
            other => Err(Error::Config(format!(
                "unknown experiment '{other}' (expected demand or sprite)"
            ))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Demand => "demand",
            Experiment::Sprite => "sprite",
        })
    }
}

/// Generated sample: treatment `a`, outcome proxy `w`, treatment proxy `z`,
/// outcome `y`, and the latent confounder `u`.
///
/// `u` is kept for diagnostics only. Estimators receive an [`Observed`] view,
/// which does not expose it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    a: Tensor,
    w: Tensor,
    z: Tensor,
    y: Tensor,
    u: Tensor,
}

/// Estimator-facing columns of a [`Dataset`].
#[derive(Clone, Copy, Debug)]
pub struct Observed<'a> {
    pub a: &'a Tensor,
    pub w: &'a Tensor,
    pub z: &'a Tensor,
    pub y: &'a Tensor,
}

impl Observed<'_> {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }
}

impl Dataset {
    pub fn new(a: Tensor, w: Tensor, z: Tensor, y: Tensor, u: Tensor) -> Result<Self> {
        let n = y.rows();
        if y.cols() != 1 || u.cols() != 1 {
            return Err(dim_err!("y and u must be columns"));
        }
        for (name, t) in [("a", &a), ("w", &w), ("z", &z), ("u", &u)] {
            if t.rows() != n {
                return Err(dim_err!(
                    "column block {name} has {} rows, y has {n}",
                    t.rows()
                ));
            }
        }
        Ok(Dataset { a, w, z, y, u })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observed(&self) -> Observed<'_> {
        Observed {
            a: &self.a,
            w: &self.w,
            z: &self.z,
            y: &self.y,
        }
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    /// The unobserved confounder. Diagnostics only.
    pub fn latent_u(&self) -> &Tensor {
        &self.u
    }

    /// Copy with the latent column replaced, used to check that estimators
    /// never depend on it.
    pub fn with_latent(&self, u: Tensor) -> Result<Self> {
        Dataset::new(
            self.a.clone(),
            self.w.clone(),
            self.z.clone(),
            self.y.clone(),
            u,
        )
    }

    /// CSV header for this dataset's layout.
    pub fn csv_header(&self, experiment: Experiment) -> Vec<String> {
        match experiment {
            Experiment::Demand => ["u", "z1", "z2", "w", "a", "y"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Experiment::Sprite => {
                let mut h: Vec<String> = ["u", "z_scale", "z_rot", "z_posx"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                h.extend((0..self.w.cols()).map(|i| format!("w_px_{i}")));
                h.extend((0..self.a.cols()).map(|i| format!("a_px_{i}")));
                h.push("y".into());
                h
            }
        }
    }

    /// Row `i` in [`csv_header`](Self::csv_header) order. Both layouts share
    /// the column sequence `u, z…, w…, a…, y`.
    pub fn csv_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![self.u[(i, 0)]];
        row.extend_from_slice(self.z.row(i));
        row.extend_from_slice(self.w.row(i));
        row.extend_from_slice(self.a.row(i));
        row.push(self.y[(i, 0)]);
        row
    }
}
