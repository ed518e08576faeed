//! RBF kernels over `(A, Z)` features and the U- and V-statistic quadratic
//! forms that make up the moment-restriction risk.
//!
//! For residuals `r` and kernel matrix `K`:
//!
//! * V-statistic: `rᵀKr / n²`
//! * U-statistic: `rᵀK₀r / (n(n−1))`, where `K₀` is `K` with a zeroed diagonal.
//!
//! Both can be evaluated from a materialized `K` or block by block, where each
//! block of rows is recomputed from the features and then discarded.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearOperator, NodeId, Tape};
use crate::error::{dim_err, Error, Result};
use crate::scm::{Experiment, Observed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    U,
    V,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::U => "U",
            Variant::V => "V",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u" | "U" => Ok(Variant::U),
            "v" | "V" => Ok(Variant::V),
            _ => Err(Error::Config(format!("unknown statistic variant '{s}'"))),
        }
    }
}

impl Variant {
    /// Normalizer applied to the quadratic form for `n` observations.
    pub fn normalizer(self, n: usize) -> Result<f64> {
        let nf = n as f64;
        match self {
            Variant::U if n < 2 => Err(Error::Domain(format!("U-statistic needs n >= 2, got {n}"))),
            Variant::U => Ok(1.0 / (nf * (nf - 1.0))),
            Variant::V if n < 1 => Err(Error::Domain("V-statistic needs n >= 1".into())),
            Variant::V => Ok(1.0 / (nf * nf)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub sigma: f64,
    /// Multiplier applied to image pixels in sprite kernel features.
    pub alpha: f64,
    pub block_size: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            sigma: 1.0,
            alpha: 0.05,
            block_size: 256,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("kernel block size must be >= 1".into()));
        }
        Ok(())
    }

    fn gamma(&self) -> f64 {
        1.0 / (2.0 * self.sigma * self.sigma)
    }
}

/// Kernel inputs per row: `(z, a)` for Demand and `(z, α·vec(a))` for sprite.
pub fn kernel_features(data: &Observed<'_>, experiment: Experiment, alpha: f64) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Domain("kernel features of an empty dataset".into()));
    }
    match experiment {
        Experiment::Demand => Tensor::hstack(&[data.z, data.a]),
        Experiment::Sprite => Tensor::hstack(&[data.z, &data.a.scale(alpha)]),
    }
}

#[inline]
fn rbf_entry(fi: &[f64], fj: &[f64], gamma: f64) -> f64 {
    let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 * gamma).exp()
}

fn check_features(features: &Tensor) -> Result<()> {
    if !features.is_finite() {
        return Err(Error::Domain(
            "kernel features contain non-finite values".into(),
        ));
    }
    Ok(())
}

/// Dense symmetric kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    entries: Tensor,
}

impl KernelMatrix {
    /// Wraps an arbitrary square matrix; used for tests and external inputs.
    pub fn from_tensor(entries: Tensor) -> Result<Self> {
        if entries.rows() != entries.cols() {
            return Err(dim_err!(
                "kernel matrix must be square, got {:?}",
                entries.shape()
            ));
        }
        Ok(KernelMatrix { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    /// Copy with the diagonal set to zero (`K₀`).
    pub fn zero_diagonal(&self) -> Tensor {
        let mut k = self.entries.clone();
        for i in 0..k.rows() {
            k[(i, i)] = 0.0;
        }
        k
    }

    /// Operator for the chosen statistic's quadratic form (K or K₀).
    pub fn operator(&self, variant: Variant) -> SymmetricMatrix {
        SymmetricMatrix(match variant {
            Variant::V => self.entries.clone(),
            Variant::U => self.zero_diagonal(),
        })
    }

    /// Like [`KernelMatrix::operator`], reusing the entries.
    pub fn into_operator(self, variant: Variant) -> SymmetricMatrix {
        let mut k = self.entries;
        if variant == Variant::U {
            for i in 0..k.rows() {
                k[(i, i)] = 0.0;
            }
        }
        SymmetricMatrix(k)
    }
}

/// `K[i][j] = exp(−‖fᵢ − fⱼ‖² / (2σ²))`, built in parallel over row blocks.
pub fn rbf_matrix(features: &Tensor, config: &KernelConfig) -> Result<KernelMatrix> {
    config.validate()?;
    check_features(features)?;
    let n = features.rows();
    let gamma = config.gamma();
    let mut data = vec![0.0; n * n];
    if n > 0 {
        data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let fi = features.row(i);
            for (j, k) in row.iter_mut().enumerate() {
                *k = if i == j {
                    1.0
                } else {
                    rbf_entry(fi, features.row(j), gamma)
                };
            }
        });
    }
    Ok(KernelMatrix {
        entries: Tensor::from_vec(n, n, data)?,
    })
}

fn check_residuals(r: &Tensor, n: usize) -> Result<()> {
    if r.cols() != 1 || r.rows() != n {
        return Err(dim_err!(
            "residuals {:?} do not match an {n}x{n} kernel",
            r.shape()
        ));
    }
    Ok(())
}

/// `(1/(n(n−1))) Σ_{i≠j} rᵢ rⱼ K[i][j]`.
pub fn u_statistic(r: &Tensor, k: &KernelMatrix) -> Result<f64> {
    let n = k.n();
    check_residuals(r, n)?;
    let norm = Variant::U.normalizer(n)?;
    let rv = r.data();
    let mut total = 0.0;
    for i in 0..n {
        let row = k.entries.row(i);
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += row[j] * rv[j];
            }
        }
        total += rv[i] * s;
    }
    Ok(total * norm)
}

/// `(1/n²) Σ_{i,j} rᵢ rⱼ K[i][j]`.
pub fn v_statistic(r: &Tensor, k: &KernelMatrix) -> Result<f64> {
    let n = k.n();
    check_residuals(r, n)?;
    let norm = Variant::V.normalizer(n)?;
    let rv = r.data();
    let mut total = 0.0;
    for i in 0..n {
        let s: f64 = k.entries.row(i).iter().zip(rv).map(|(a, b)| a * b).sum();
        total += rv[i] * s;
    }
    Ok(total * norm)
}

/// A dense matrix known to be symmetric.
#[derive(Clone, Debug)]
pub struct SymmetricMatrix(pub Tensor);

impl LinearOperator for SymmetricMatrix {
    fn dim(&self) -> usize {
        self.0.rows()
    }

    fn apply(&self, r: &Tensor) -> Result<Tensor> {
        self.0.matmul(r)
    }
}

/// Kernel operator that recomputes `block_size` rows of `K` at a time and
/// never holds more than `block_size × n` entries.
#[derive(Clone, Debug)]
pub struct BlockKernel {
    features: Arc<Tensor>,
    gamma: f64,
    block_size: usize,
    variant: Variant,
}

impl BlockKernel {
    pub fn new(features: Arc<Tensor>, config: &KernelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        check_features(&features)?;
        Ok(BlockKernel {
            features,
            gamma: config.gamma(),
            block_size: config.block_size,
            variant,
        })
    }
}

impl LinearOperator for BlockKernel {
    fn dim(&self) -> usize {
        self.features.rows()
    }

    fn apply(&self, r: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        check_residuals(r, n)?;
        let rv = r.data();
        let f = &self.features;
        let mut out = vec![0.0; n];
        let mut block = vec![0.0; self.block_size.min(n.max(1)) * n];
        let mut start = 0;
        while start < n {
            let end = (start + self.block_size).min(n);
            for (bi, i) in (start..end).enumerate() {
                let fi = f.row(i);
                let row = &mut block[bi * n..(bi + 1) * n];
                for (j, k) in row.iter_mut().enumerate() {
                    *k = if i == j {
                        match self.variant {
                            Variant::U => 0.0,
                            Variant::V => 1.0,
                        }
                    } else {
                        rbf_entry(fi, f.row(j), self.gamma)
                    };
                }
                out[i] = row.iter().zip(rv).map(|(a, b)| a * b).sum();
            }
            start = end;
        }
        Ok(Tensor::column(out))
    }
}

/// Records the normalized statistic `rᵀ K r · c` on the tape, where `op`
/// already carries the variant's diagonal convention and `c` is the
/// variant normalizer for `n = op.dim()`.
pub fn statistic_node(
    tape: &mut Tape,
    r: NodeId,
    op: Arc<dyn LinearOperator>,
    variant: Variant,
) -> Result<NodeId> {
    let norm = variant.normalizer(op.dim())?;
    let q = tape.quad_form(r, op)?;
    tape.scale(q, norm)
}

/// Differentiable statistic evaluated block by block from `features`.
pub fn batched_quadratic_form(
    tape: &mut Tape,
    r: NodeId,
    features: Arc<Tensor>,
    config: &KernelConfig,
    variant: Variant,
) -> Result<NodeId> {
    let n = features.rows();
    if config.block_size > n {
        return Err(Error::Config(format!(
            "block size {} exceeds n = {n}",
            config.block_size
        )));
    }
    let op = Arc::new(BlockKernel::new(features, config, variant)?);
    statistic_node(tape, r, op, variant)
}

/// Same statistic from a materialized kernel matrix.
pub fn materialized_quadratic_form(
    tape: &mut Tape,
    r: NodeId,
    k: &KernelMatrix,
    variant: Variant,
) -> Result<NodeId> {
    statistic_node(tape, r, Arc::new(k.operator(variant)), variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{normal, uniform, Rng};
    use proptest::prelude::*;

    fn k2() -> KernelMatrix {
        KernelMatrix::from_tensor(Tensor::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap()).unwrap()
    }

    #[test]
    fn demand_features_concatenate_z_then_a() {
        let a = Tensor::column(vec![3.0]);
        let w = Tensor::column(vec![0.0]);
        let z = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = Tensor::column(vec![0.0]);
        let obs = Observed {
            a: &a,
            w: &w,
            z: &z,
            y: &y,
        };
        assert_eq!(
            kernel_features(&obs, Experiment::Demand, 0.05)
                .unwrap()
                .data(),
            &[1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn sprite_features_scale_pixels() {
        let a = Tensor::zeros(1, 4);
        let w = Tensor::zeros(1, 4);
        let z = Tensor::from_rows(&[[0.5, 0.0, 0.5]]).unwrap();
        let y = Tensor::column(vec![0.0]);
        let obs = Observed {
            a: &a,
            w: &w,
            z: &z,
            y: &y,
        };
        let f = kernel_features(&obs, Experiment::Sprite, 0.05).unwrap();
        assert_eq!(f.data(), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);

        // α = 0 removes the image from the kernel.
        let a2 = Tensor::ones(1, 4);
        let obs2 = Observed { a: &a2, ..obs };
        let f0 = kernel_features(&obs, Experiment::Sprite, 0.0).unwrap();
        let f2 = kernel_features(&obs2, Experiment::Sprite, 0.0).unwrap();
        assert_eq!(f0, f2);
    }

    #[test]
    fn rbf_examples() {
        let f = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let k = rbf_matrix(&f, &KernelConfig::default()).unwrap();
        assert_eq!(k.entries()[(0, 0)], 1.0);
        assert_eq!(k.entries()[(1, 1)], 1.0);
        assert!((k.entries()[(0, 1)] - 0.606_530_659_7).abs() < 1e-10);
        assert_eq!(k.entries()[(0, 1)], k.entries()[(1, 0)]);
    }

    #[test]
    fn rbf_rejects_non_finite() {
        let f = Tensor::from_rows(&[[0.0], [f64::NAN]]).unwrap();
        assert!(matches!(
            rbf_matrix(&f, &KernelConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn statistic_examples() {
        let r = Tensor::column(vec![1.0, 2.0]);
        assert_eq!(u_statistic(&r, &k2()).unwrap(), 1.0);
        assert_eq!(v_statistic(&r, &k2()).unwrap(), 1.75);
        assert_eq!(u_statistic(&Tensor::zeros(2, 1), &k2()).unwrap(), 0.0);
        assert_eq!(v_statistic(&Tensor::zeros(2, 1), &k2()).unwrap(), 0.0);

        let eye = KernelMatrix::from_tensor(Tensor::identity(5)).unwrap();
        assert_eq!(u_statistic(&Tensor::ones(5, 1), &eye).unwrap(), 0.0);

        let one = KernelMatrix::from_tensor(Tensor::ones(1, 1)).unwrap();
        assert_eq!(v_statistic(&Tensor::column(vec![3.0]), &one).unwrap(), 9.0);
        assert!(matches!(
            u_statistic(&Tensor::column(vec![3.0]), &one),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rbf_matrix_is_positive_semidefinite() {
        // Smallest eigenvalue via Jacobi rotations on a 20×20 RBF matrix.
        let f = uniform(&mut Rng::new(8), -2.0, 2.0, 20, 3).unwrap();
        let k = rbf_matrix(&f, &KernelConfig::default()).unwrap();
        let eig = jacobi_eigenvalues(k.entries().clone());
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-10, "min eigenvalue {min}");
        assert!(k.entries().data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    fn jacobi_eigenvalues(mut a: Tensor) -> Vec<f64> {
        let n = a.rows();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[(i, i)]).collect()
    }

    fn batched_vs_materialized(
        n: usize,
        block: usize,
        variant: Variant,
        seed: u64,
    ) -> (f64, f64, Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let f = Arc::new(uniform(&mut rng, -1.5, 1.5, n, 3).unwrap());
        let r0 = normal(&mut rng, 0.0, 1.0, n, 1).unwrap();
        let cfg = KernelConfig {
            block_size: block,
            ..KernelConfig::default()
        };
        let k = rbf_matrix(&f, &cfg).unwrap();

        let mut t1 = Tape::new();
        let r1 = t1.param(r0.clone());
        let s1 = batched_quadratic_form(&mut t1, r1, f.clone(), &cfg, variant).unwrap();
        let g1 = t1.backward(s1).unwrap().get(r1).unwrap().clone();

        let mut t2 = Tape::new();
        let r2 = t2.param(r0.clone());
        let s2 = materialized_quadratic_form(&mut t2, r2, &k, variant).unwrap();
        let g2 = t2.backward(s2).unwrap().get(r2).unwrap().clone();

        (
            t1.value(s1).item().unwrap(),
            t2.value(s2).item().unwrap(),
            g1,
            g2,
        )
    }

    #[test]
    fn batched_matches_materialized() {
        for variant in [Variant::U, Variant::V] {
            for block in [1, 7, 64, 120] {
                let (b, m, gb, gm) = batched_vs_materialized(120, block, variant, 31);
                assert!(
                    (b - m).abs() <= 1e-12 * m.abs(),
                    "{variant} block {block}: {b} vs {m}"
                );
                for (x, y) in gb.data().iter().zip(gm.data()) {
                    assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn statistic_nodes_match_plain_functions() {
        let mut rng = Rng::new(12);
        let f = uniform(&mut rng, -1.0, 1.0, 30, 2).unwrap();
        let r = normal(&mut rng, 0.0, 1.0, 30, 1).unwrap();
        let k = rbf_matrix(&f, &KernelConfig::default()).unwrap();
        for (variant, plain) in [
            (Variant::U, u_statistic(&r, &k).unwrap()),
            (Variant::V, v_statistic(&r, &k).unwrap()),
        ] {
            let mut tape = Tape::new();
            let rn = tape.param(r.clone());
            let s = materialized_quadratic_form(&mut tape, rn, &k, variant).unwrap();
            assert!((tape.value(s).item().unwrap() - plain).abs() <= 1e-13 * plain.abs());
        }
    }

    #[test]
    fn oversized_block_rejected() {
        let f = Arc::new(Tensor::zeros(4, 1));
        let mut tape = Tape::new();
        let r = tape.param(Tensor::zeros(4, 1));
        let cfg = KernelConfig {
            block_size: 5,
            ..KernelConfig::default()
        };
        assert!(batched_quadratic_form(&mut tape, r, f, &cfg, Variant::V).is_err());
    }

    proptest! {
        #[test]
        fn u_v_identity(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = Rng::new(seed);
            let f = normal(&mut rng, 0.0, 1.0, n, 2).unwrap();
            let r = normal(&mut rng, 0.0, 2.0, n, 1).unwrap();
            let k = rbf_matrix(&f, &KernelConfig::default()).unwrap();
            let nf = n as f64;
            let v = v_statistic(&r, &k).unwrap();
            let u = u_statistic(&r, &k).unwrap();
            let diag: f64 = (0..n).map(|i| r[(i, 0)].powi(2) * k.entries()[(i, i)]).sum();
            let lhs = nf * nf * v;
            prop_assert!((lhs - nf * (nf - 1.0) * u - diag).abs() <= 1e-12 * lhs.abs().max(diag));
            // The bounds (n−1)U ≤ nV ≤ (n−1)U + max diagonal term follow.
            prop_assert!((nf - 1.0) * u <= nf * v + 1e-12 * lhs.abs());
        }

        #[test]
        fn u_statistic_is_permutation_invariant(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = Rng::new(seed);
            let f = normal(&mut rng, 0.0, 1.0, n, 2).unwrap();
            let r = normal(&mut rng, 0.0, 1.0, n, 1).unwrap();
            let k = rbf_matrix(&f, &KernelConfig::default()).unwrap();
            let perm = rng.permutation(n);
            let kp = KernelMatrix::from_tensor(k.entries().select_square(&perm)).unwrap();
            let rp = r.select_rows(&perm);
            let a = u_statistic(&r, &k).unwrap();
            let b = u_statistic(&rp, &kp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }
}
