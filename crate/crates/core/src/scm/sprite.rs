//! Image benchmark with a procedural glyph standing in for the sprite archive.
//!
//! Treatment `A` is a noisy `d × d` render of an ellipse with parameters
//! `(scale, rotation, posX, posY)`; `Z = (scale, rotation, posX)`; the latent
//! `U = posY` sets the glyph's vertical position and also scales the outcome.
//! `W` is a render of a fixed upright glyph at height `posY`.

use std::f64::consts::TAU;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{uniform, Rng, Tensor};

pub const SCALE_LEVELS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const ROTATION_LEVELS: usize = 40;
pub const POS_LEVELS: usize = 32;

/// Semi-axes of the unit-scale glyph in image-width units (ratio 2:3).
const GLYPH_SEMI_MINOR: f64 = 0.10;
const GLYPH_SEMI_MAJOR: f64 = 0.15;
/// Sub-samples per pixel side for anti-aliasing.
const SUPERSAMPLE: usize = 4;
const OUTCOME_COMPONENTS: usize = 10;
const CALIBRATION_IMAGES: usize = 10_000;
const CALIBRATION_TAG: u64 = 0xCA1B_0000_5EED;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphParams {
    pub scale: f64,
    pub rotation: f64,
    pub pos_x: f64,
    pub pos_y: f64,
}

/// Renders the glyph into a `d × d` image with values in `[0, 1]`.
///
/// Pixel `(i, j)` covers `[j, j+1) × [i, i+1)` in pixel units; a glyph at
/// `(pos_x, pos_y)` is centred at `(pos_x·d, pos_y·d)`. Each pixel holds the
/// fraction of its 4×4 sub-sample points inside the rotated ellipse whose
/// major axis is vertical at rotation 0.
pub fn render_glyph(p: GlyphParams, d: usize) -> Result<Tensor> {
    if d < 8 {
        return Err(Error::Domain(format!("image side must be >= 8, got {d}")));
    }
    if !(0.5..=1.0).contains(&p.scale)
        || !(0.0..TAU).contains(&p.rotation)
        || !(0.0..=1.0).contains(&p.pos_x)
        || !(0.0..=1.0).contains(&p.pos_y)
    {
        return Err(Error::Domain(format!(
            "glyph parameters out of range: {p:?}"
        )));
    }
    let mut img = Tensor::zeros(d, d);
    let df = d as f64;
    let (cx, cy) = (p.pos_x * df, p.pos_y * df);
    let inv_a = 1.0 / (GLYPH_SEMI_MINOR * p.scale * df);
    let inv_b = 1.0 / (GLYPH_SEMI_MAJOR * p.scale * df);
    let (sin, cos) = p.rotation.sin_cos();
    let reach = GLYPH_SEMI_MAJOR * p.scale * df + 1.0;
    let lo = |c: f64| (c - reach).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + reach).ceil().max(0.0) as usize).min(d);
    let s = SUPERSAMPLE;
    let weight = 1.0 / (s * s) as f64;
    for i in lo(cy)..hi(cy) {
        for j in lo(cx)..hi(cx) {
            let mut inside = 0usize;
            for si in 0..s {
                let y = i as f64 + (si as f64 + 0.5) / s as f64 - cy;
                for sj in 0..s {
                    let x = j as f64 + (sj as f64 + 0.5) / s as f64 - cx;
                    let u = (x * cos + y * sin) * inv_a;
                    let v = (y * cos - x * sin) * inv_b;
                    if u * u + v * v <= 1.0 {
                        inside += 1;
                    }
                }
            }
            img[(i, j)] = inside as f64 * weight;
        }
    }
    Ok(img)
}

/// The 588 evaluation glyphs: posX × posY × scale × rotation with
/// posX, posY ∈ {0, 5/31, …, 30/31}, scale ∈ {0.5, 0.8, 1}, rotation ∈
/// {0, π/2, π, 3π/2}; posX varies slowest.
pub fn sprite_test_grid() -> Vec<GlyphParams> {
    let pos: Vec<f64> = (0..7).map(|k| 5.0 * k as f64 / 31.0).collect();
    let mut out = Vec::with_capacity(588);
    for &pos_x in &pos {
        for &pos_y in &pos {
            for scale in [0.5, 0.8, 1.0] {
                for k in 0..4 {
                    let rotation = k as f64 * TAU / 4.0;
                    out.push(GlyphParams {
                        scale,
                        rotation,
                        pos_x,
                        pos_y,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteConfig {
    pub n: usize,
    pub d: usize,
    pub b_seed: u64,
    pub seed: u64,
    pub pixel_noise_std: f64,
    pub outcome_noise_std: f64,
}

impl SpriteConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        SpriteConfig {
            n,
            d: 32,
            b_seed: 0x0005_eedb,
            seed,
            pixel_noise_std: 0.1,
            outcome_noise_std: 0.5,
        }
    }
}

/// Outcome weights `B` (d² × 10, entries U(0,1)) with the centering
/// constants that put the structural term at zero mean and unit scale.
#[derive(Clone, Debug)]
pub struct SpriteWorld {
    d: usize,
    b_seed: u64,
    b: Tensor,
    c0: f64,
    c1: f64,
}

impl SpriteWorld {
    /// Draws `B` from `Rng::new(b_seed)` and calibrates `C0`, `C1` as the
    /// mean and standard deviation of `‖vec(A)ᵀB‖²/10` over 10,000 noisy
    /// treatment images drawn from the benchmark distribution.
    pub fn new(d: usize, b_seed: u64) -> Result<Self> {
        let b = uniform(&mut Rng::new(b_seed), 0.0, 1.0, d * d, OUTCOME_COMPONENTS)?;
        let mut rng = Rng::new(b_seed ^ CALIBRATION_TAG);
        let mut images = Tensor::zeros(CALIBRATION_IMAGES, d * d);
        for i in 0..CALIBRATION_IMAGES {
            let draw = draw_row(&mut rng, d, 0.1, 0.0)?;
            images.row_mut(i).copy_from_slice(draw.a.data());
        }
        let energy = projected_energy(&images, &b)?;
        let n = energy.len() as f64;
        let c0 = energy.iter().sum::<f64>() / n;
        let c1 = (energy.iter().map(|e| (e - c0).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Ok(SpriteWorld {
            d,
            b_seed,
            b,
            c0,
            c1,
        })
    }

    /// World with explicit `B` and constants, for diagnostics.
    pub fn with_matrix(d: usize, b: Tensor, c0: f64, c1: f64) -> Result<Self> {
        if b.shape() != (d * d, OUTCOME_COMPONENTS) {
            return Err(Error::Dimension(format!(
                "B must be {}x{}, got {:?}",
                d * d,
                OUTCOME_COMPONENTS,
                b.shape()
            )));
        }
        if !(c1 > 0.0) {
            return Err(Error::Domain("C1 must be positive".into()));
        }
        Ok(SpriteWorld {
            d,
            b_seed: 0,
            b,
            c0,
            c1,
        })
    }

    pub fn side(&self) -> usize {
        self.d
    }

    pub fn b_seed(&self) -> u64 {
        self.b_seed
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn centering(&self) -> (f64, f64) {
        (self.c0, self.c1)
    }

    /// `(‖vec(a)ᵀB‖²/10 − C0) / C1` for each row of `images`.
    pub fn structural(&self, images: &Tensor) -> Result<Vec<f64>> {
        Ok(projected_energy(images, &self.b)?
            .into_iter()
            .map(|e| (e - self.c0) / self.c1)
            .collect())
    }
}

fn projected_energy(images: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let proj = images.matmul(b)?;
    Ok((0..proj.rows())
        .map(|i| proj.row(i).iter().map(|v| v * v).sum::<f64>() / OUTCOME_COMPONENTS as f64)
        .collect())
}

/// Exact potential outcome `E[Y^a]` for a noiseless image `a` (1 × d² or d × d).
pub fn sprite_ground_truth(world: &SpriteWorld, a: &Tensor) -> Result<f64> {
    if a.len() != world.d * world.d {
        return Err(Error::Dimension(format!(
            "image has {} pixels, world expects {}",
            a.len(),
            world.d * world.d
        )));
    }
    let row = a.clone().reshape(1, a.len())?;
    Ok(world.structural(&row)?[0])
}

/// `(31U − 15.5)² / 85.25`, whose mean over the 32 levels of `U` is 1.
pub fn confounding_factor(u: f64) -> f64 {
    (31.0 * u - 15.5).powi(2) / 85.25
}

struct RowDraw {
    params: GlyphParams,
    a: Tensor,
    w: Tensor,
}

// Per-row stream: scale, rotation, posX, posY indices, then d² normals of
// A noise, then d² normals of W noise.
fn draw_row(rng: &mut Rng, d: usize, pixel_std: f64, w_std: f64) -> Result<RowDraw> {
    let scale = SCALE_LEVELS[rng.below(SCALE_LEVELS.len())];
    let rotation = rng.below(ROTATION_LEVELS) as f64 * TAU / ROTATION_LEVELS as f64;
    let pos_x = rng.below(POS_LEVELS) as f64 / (POS_LEVELS - 1) as f64;
    let pos_y = rng.below(POS_LEVELS) as f64 / (POS_LEVELS - 1) as f64;
    let params = GlyphParams {
        scale,
        rotation,
        pos_x,
        pos_y,
    };
    let mut a = render_glyph(params, d)?.reshape(1, d * d)?;
    add_noise(rng, &mut a, pixel_std);
    let mut w = render_glyph(
        GlyphParams {
            scale: 0.8,
            rotation: 0.0,
            pos_x: 0.5,
            pos_y,
        },
        d,
    )?
    .reshape(1, d * d)?;
    add_noise(rng, &mut w, w_std);
    Ok(RowDraw { params, a, w })
}

fn add_noise(rng: &mut Rng, t: &mut Tensor, std: f64) {
    let mut noise = vec![0.0; t.len()];
    rng.fill_normal(&mut noise);
    for (v, e) in t.data_mut().iter_mut().zip(noise) {
        *v += std * e;
    }
}

/// Draws a sprite dataset. Rows are generated in order by [`draw_row`]'s
/// stream; the outcome noises follow as one block of n normals.
pub fn sprite_sample(world: &SpriteWorld, cfg: &SpriteConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::Domain("sprite sample size must be >= 1".into()));
    }
    if cfg.d != world.d {
        return Err(Error::Config(format!(
            "config side {} does not match world side {}",
            cfg.d, world.d
        )));
    }
    let (n, px) = (cfg.n, cfg.d * cfg.d);
    let mut rng = Rng::new(cfg.seed);
    let mut a = Tensor::zeros(n, px);
    let mut w = Tensor::zeros(n, px);
    let mut z = Tensor::zeros(n, 3);
    let mut u = Tensor::zeros(n, 1);
    for i in 0..n {
        let r = draw_row(&mut rng, cfg.d, cfg.pixel_noise_std, cfg.pixel_noise_std)?;
        a.row_mut(i).copy_from_slice(r.a.data());
        w.row_mut(i).copy_from_slice(r.w.data());
        z.row_mut(i)
            .copy_from_slice(&[r.params.scale, r.params.rotation, r.params.pos_x]);
        u[(i, 0)] = r.params.pos_y;
    }
    let structural = world.structural(&a)?;
    let mut y = Tensor::zeros(n, 1);
    for i in 0..n {
        y[(i, 0)] = structural[i] * confounding_factor(u[(i, 0)])
            + cfg.outcome_noise_std * rng.standard_normal();
    }
    Dataset::new(a, w, z, y, u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph(scale: f64, rotation: f64, pos_x: f64, pos_y: f64) -> GlyphParams {
        GlyphParams {
            scale,
            rotation,
            pos_x,
            pos_y,
        }
    }

    #[test]
    fn render_rejects_out_of_range() {
        assert!(render_glyph(glyph(0.4, 0.0, 0.5, 0.5), 32).is_err());
        assert!(render_glyph(glyph(1.0, TAU, 0.5, 0.5), 32).is_err());
        assert!(render_glyph(glyph(1.0, 0.0, 1.1, 0.5), 32).is_err());
        assert!(render_glyph(glyph(1.0, 0.0, 0.5, 0.5), 4).is_err());
    }

    #[test]
    fn pixels_in_unit_interval() {
        let img = render_glyph(glyph(0.9, 1.3, 0.4, 0.7), 32).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.sum() > 10.0);
    }

    #[test]
    fn translation_shifts_columns() {
        let d = 32;
        let k = 3;
        let base = render_glyph(glyph(0.7, 0.9, 0.4, 0.55), d).unwrap();
        let moved = render_glyph(glyph(0.7, 0.9, 0.4 + k as f64 / d as f64, 0.55), d).unwrap();
        for i in 0..d {
            for j in 0..d - k {
                assert!(
                    (base[(i, j)] - moved[(i, j + k)]).abs() < 1e-9,
                    "pixel ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn half_turn_symmetry() {
        let d = 32;
        let r = 0.7;
        let img = render_glyph(glyph(1.0, r, 0.5, 0.5), d).unwrap();
        let turned = render_glyph(glyph(1.0, r + std::f64::consts::PI, 0.5, 0.5), d).unwrap();
        for i in 0..d {
            for j in 0..d {
                assert!((img[(i, j)] - turned[(i, j)]).abs() < 1e-9);
                assert!((img[(i, j)] - img[(d - 1 - i, d - 1 - j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn area_grows_with_scale() {
        let small = render_glyph(glyph(0.5, 0.3, 0.5, 0.5), 32).unwrap().sum();
        let large = render_glyph(glyph(1.0, 0.3, 0.5, 0.5), 32).unwrap().sum();
        assert!(small <= large);
        // π·a·b in pixels: π · 3.2 · 4.8 at scale 1, d = 32.
        assert!(
            (large - std::f64::consts::PI * 3.2 * 4.8).abs() < 2.0,
            "{large}"
        );
    }

    #[test]
    fn test_grid_has_588_images() {
        let g = sprite_test_grid();
        assert_eq!(g.len(), 7 * 7 * 3 * 4);
        assert_eq!(g.len(), 588);
        assert!(g.iter().all(|p| render_glyph(*p, 32).is_ok()));
    }

    #[test]
    fn confounding_factor_has_unit_mean() {
        let mean: f64 = (0..32)
            .map(|k| confounding_factor(k as f64 / 31.0))
            .sum::<f64>()
            / 32.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w_depends_only_on_pos_y() {
        let world = SpriteWorld::new(16, 3).unwrap();
        let mut cfg = SpriteConfig::new(200, 5);
        cfg.d = 16;
        cfg.b_seed = 3;
        cfg.pixel_noise_std = 0.0;
        let d = sprite_sample(&world, &cfg).unwrap();
        let u = d.latent_u();
        for i in 0..200 {
            for j in 0..i {
                if u[(i, 0)] == u[(j, 0)] {
                    assert_eq!(d.w().row(i), d.w().row(j));
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_constant_structural_term() {
        let world = SpriteWorld::with_matrix(8, Tensor::zeros(64, 10), 2.0, 4.0).unwrap();
        let img = render_glyph(glyph(1.0, 0.0, 0.5, 0.5), 8).unwrap();
        assert_eq!(sprite_ground_truth(&world, &img).unwrap(), -0.5);
    }

    #[test]
    fn doubling_image_quadruples_energy() {
        let world = SpriteWorld::new(8, 1).unwrap();
        let img = render_glyph(glyph(0.8, 1.0, 0.3, 0.6), 8)
            .unwrap()
            .reshape(1, 64)
            .unwrap();
        let e1 = projected_energy(&img, world.b()).unwrap()[0];
        let e2 = projected_energy(&img.scale(2.0), world.b()).unwrap()[0];
        assert!((e2 - 4.0 * e1).abs() <= 1e-12 * e2);
        let (c0, c1) = world.centering();
        let zero = sprite_ground_truth(&world, &Tensor::zeros(1, 64)).unwrap();
        assert!((zero + c0 / c1).abs() < 1e-12);
    }

    #[test]
    fn calibration_centres_structural_term() {
        let world = SpriteWorld::new(32, 0x0005_eedb).unwrap();
        let cfg = SpriteConfig::new(2000, 99);
        let d = sprite_sample(&world, &cfg).unwrap();
        let s = world.structural(d.a()).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        assert!(mean.abs() < 0.15, "{mean}");
        assert!((sd - 1.0).abs() < 0.15, "{sd}");
    }

    #[test]
    fn sample_is_reproducible() {
        let world = SpriteWorld::new(16, 7).unwrap();
        let mut cfg = SpriteConfig::new(20, 1);
        cfg.d = 16;
        assert_eq!(
            sprite_sample(&world, &cfg).unwrap(),
            sprite_sample(&world, &cfg).unwrap()
        );
    }
}
