//! Linear proximal SCM with a known bridge, used to check the linear baselines.
//!
//! `Z ~ N(0,1)`, `U ~ N(0,1)`, `W = U + s·e_W`, `A = Z + U + s·e_A`,
//! `Y = c + β·A + γ·U + s·e_Y`, with `s = noise`. The bridge
//! `h(a, w) = c + β·a + γ·w` solves the moment equation and `E[Y^a] = c + β·a`.

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{normal, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearConfig {
    pub n: usize,
    pub intercept: f64,
    pub effect_a: f64,
    pub effect_u: f64,
    pub noise: f64,
    pub seed: u64,
}

impl LinearConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        LinearConfig {
            n,
            intercept: 1.0,
            effect_a: 2.0,
            effect_u: 3.0,
            noise: 0.0,
            seed,
        }
    }
}

pub fn linear_sample(cfg: &LinearConfig) -> Result<Dataset> {
    if cfg.n == 0 || !(cfg.noise >= 0.0) {
        return Err(Error::Domain(
            "linear SCM needs n >= 1 and noise >= 0".into(),
        ));
    }
    let n = cfg.n;
    let mut rng = Rng::new(cfg.seed);
    let z = normal(&mut rng, 0.0, 1.0, n, 1)?;
    let u = normal(&mut rng, 0.0, 1.0, n, 1)?;
    let ew = normal(&mut rng, 0.0, cfg.noise, n, 1)?;
    let ea = normal(&mut rng, 0.0, cfg.noise, n, 1)?;
    let ey = normal(&mut rng, 0.0, cfg.noise, n, 1)?;
    let w = u.add(&ew)?;
    let a = z.add(&u)?.add(&ea)?;
    let mut y = Tensor::zeros(n, 1);
    for i in 0..n {
        y[(i, 0)] =
            cfg.intercept + cfg.effect_a * a[(i, 0)] + cfg.effect_u * u[(i, 0)] + ey[(i, 0)];
    }
    Dataset::new(a, w, z, y, u)
}
