//! Expected information density of the learned likelihood with respect to
//! the planar transform, used as the localization target.
//!
//! For a world point `s`, each particle `theta_j` pulls `s` back into the
//! model frame, `s_bar = g(theta_j)^-1 s`. The Fisher information of one
//! binary reading there is `grad p(s_bar) grad p(s_bar)^T / Sigma`; chaining
//! through `J = d s_bar / d theta` gives the per-particle matrix
//! `J^T I(s_bar) J`. Their weighted sum `M(s)` is scalarized by its
//! determinant, which is taken from a square-root factor `M = R^T R` built
//! row by row so that it cannot come out negative through cancellation.

use log::warn;
use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::domain::{GridField, GridProjector, TargetDistribution};
use crate::environment::SE2Transform;
use crate::error::{Error, Result};
use crate::filter::{systematic_resample_indices, ParticleSet};
use crate::likelihood::LikelihoodField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EIDConfig {
    /// Measurement noise scalar `Sigma` in the Fisher information.
    pub sigma: f64,
    /// World grid nodes per axis for the density.
    pub grid_resolution: usize,
    pub det_floor: f64,
    /// Particles used for the Monte Carlo sum; larger sets are thinned by
    /// deterministic systematic resampling.
    pub max_particles: usize,
}

impl Default for EIDConfig {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            grid_resolution: 32,
            det_floor: 1e-12,
            max_particles: 256,
        }
    }
}

impl EIDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("EID sigma must be positive".into()));
        }
        if self.grid_resolution < 2 || self.max_particles == 0 {
            return Err(Error::InvalidConfig("EID grid needs >= 2 nodes and >= 1 particle".into()));
        }
        if !(self.det_floor > 0.0) {
            return Err(Error::InvalidConfig("det_floor must be positive".into()));
        }
        Ok(())
    }
}

/// `I(s) = grad p grad p^T / Sigma` at model-frame point `s` (clamped).
pub fn pointwise_fisher(field: &LikelihoodField, s: &[f64], sigma: f64) -> DMatrix<f64> {
    let (g, _) = field.spatial_gradient(s);
    let g = nalgebra::DVector::from_vec(g);
    &g * g.transpose() / sigma
}

/// Particles and weights entering the Monte Carlo sum.
pub fn thinned_particles(particles: &ParticleSet, max: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    if particles.len() <= max {
        return (particles.thetas().to_vec(), particles.weights().to_vec());
    }
    let idx = systematic_resample_indices(particles.weights(), 0.5);
    // every max-th draw of an N-point systematic sample is itself systematic
    let stride = particles.len() as f64 / max as f64;
    let mut thetas = Vec::with_capacity(max);
    let mut weights: Vec<f64> = Vec::with_capacity(max);
    let mut last = usize::MAX;
    for k in 0..max {
        let i = idx[((k as f64 + 0.5) * stride) as usize];
        if i == last {
            *weights.last_mut().expect("a previous entry exists") += 1.0 / max as f64;
        } else {
            thetas.push(particles.thetas()[i]);
            weights.push(1.0 / max as f64);
            last = i;
        }
    }
    (thetas, weights)
}

/// Calls `f(row)` with `sqrt(w_j / Sigma) J_j^T grad p` for every particle
/// whose pullback of `s` stays in the field's domain; `M(s)` is the sum of
/// the rows' outer products.
fn for_each_row(
    field: &LikelihoodField,
    thetas: &[[f64; 3]],
    weights: &[f64],
    s: &[f64],
    sigma: f64,
    mut f: impl FnMut(Vector3<f64>),
) {
    let lengths = field.grid().lengths();
    let mut pulled = s.to_vec();
    let mut g = vec![0.0; s.len()];
    for (th, w) in thetas.iter().zip(weights) {
        let tf = SE2Transform::from_array(*th);
        tf.inverse_apply_into(s, &mut pulled);
        if pulled.iter().zip(lengths).any(|(x, l)| *x < 0.0 || *x > *l) {
            continue;
        }
        field.gradient_into(&pulled, &mut g);
        let j = tf.inverse_jacobian(s);
        // only the planar part of the gradient depends on theta
        let v: Vector3<f64> = j.transpose() * nalgebra::Vector2::new(g[0], g[1]);
        f(v * (w / sigma).sqrt());
    }
}

/// `M(s) = sum_j w_j J_j^T I(g(theta_j)^-1 s) J_j`. Pullbacks that leave the
/// field's domain contribute nothing.
pub fn information_matrix(field: &LikelihoodField, thetas: &[[f64; 3]], weights: &[f64], s: &[f64], sigma: f64) -> Matrix3<f64> {
    let mut m = Matrix3::<f64>::zeros();
    for_each_row(field, thetas, weights, s, sigma, |v| m += v * v.transpose());
    m
}

/// Upper-triangular `R` with `R^T R = M(s)`, accumulated by Givens
/// rotations of each new row into the factor.
pub fn information_factor(field: &LikelihoodField, thetas: &[[f64; 3]], weights: &[f64], s: &[f64], sigma: f64) -> Matrix3<f64> {
    let mut r = Matrix3::<f64>::zeros();
    for_each_row(field, thetas, weights, s, sigma, |mut a| {
        for i in 0..3 {
            let h = r[(i, i)].hypot(a[i]);
            if h == 0.0 {
                continue;
            }
            let (c, sn) = (r[(i, i)] / h, a[i] / h);
            r[(i, i)] = h;
            a[i] = 0.0;
            for k in i + 1..3 {
                let (rk, ak) = (r[(i, k)], a[k]);
                r[(i, k)] = c * rk + sn * ak;
                a[k] = c * ak - sn * rk;
            }
        }
    });
    r
}

/// `det M(s)` as the squared diagonal product of its factor; never negative.
pub fn information_determinant(field: &LikelihoodField, thetas: &[[f64; 3]], weights: &[f64], s: &[f64], sigma: f64) -> f64 {
    let r = information_factor(field, thetas, weights, s, sigma);
    (r[(0, 0)] * r[(1, 1)] * r[(2, 2)]).powi(2)
}

/// Unnormalized density `max(det M(s), floor)` on `grid`. The flag reports
/// that every node hit the floor.
pub fn eid_density(
    field: &LikelihoodField,
    particles: &ParticleSet,
    grid: &crate::domain::Grid,
    config: &EIDConfig,
) -> (GridField, bool) {
    let (thetas, weights) = thinned_particles(particles, config.max_particles);
    let mut all_floored = true;
    let field_grid = GridField::from_fn(grid.clone(), |s| {
        let d = information_determinant(field, &thetas, &weights, s, config.sigma);
        if d > config.det_floor {
            all_floored = false;
            d
        } else {
            config.det_floor
        }
    });
    (field_grid, all_floored)
}

/// The localization target: EID normalized and projected onto the basis.
/// Falls back to a uniform target (with a warning) when the density is
/// floored everywhere.
pub fn expected_information_density(
    field: &LikelihoodField,
    particles: &ParticleSet,
    projector: &GridProjector,
    config: &EIDConfig,
) -> Result<(TargetDistribution, bool)> {
    config.validate()?;
    if projector.grid().dims() != field.grid().dims() {
        return Err(Error::DimensionMismatch {
            expected: field.grid().dims(),
            got: projector.grid().dims(),
        });
    }
    let (density, floored) = eid_density(field, particles, projector.grid(), config);
    Ok((project_density(&density, floored, projector)?, floored))
}

/// Projects an [`eid_density`] result, substituting the uniform target when
/// it was floored everywhere.
pub fn project_density(density: &GridField, floored: bool, projector: &GridProjector) -> Result<TargetDistribution> {
    if floored {
        warn!("information density vanishes everywhere; using a uniform target");
        return projector.project(vec![1.0; projector.grid().len()]);
    }
    projector.project(density.values().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Basis, Grid, SearchDomain};
    use crate::environment::SceneConfig;
    use crate::likelihood::truth_field;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn smooth_field() -> LikelihoodField {
        let grid = Grid::over(&SearchDomain::unit(2).unwrap(), 64).unwrap();
        LikelihoodField::from_probability_grid(
            GridField::from_fn(grid, |s| {
                0.05 + 0.9 * (-((s[0] - 0.4).powi(2) + (s[1] - 0.6).powi(2)) / 0.02).exp()
            }),
            1e-3,
        )
        .unwrap()
    }

    fn cofactor_det(m: &Matrix3<f64>) -> f64 {
        m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
    }

    #[test]
    fn constant_field_has_no_information() {
        let f = LikelihoodField::constant(&SearchDomain::unit(2).unwrap(), 16, 0.2, 1e-3).unwrap();
        assert!(pointwise_fisher(&f, &[0.3, 0.3], 0.01).iter().all(|x| *x == 0.0));
        let basis = Basis::new(SearchDomain::unit(2).unwrap());
        let proj = GridProjector::new(basis, Grid::over(&SearchDomain::unit(2).unwrap(), 16).unwrap()).unwrap();
        let p = ParticleSet::init_uniform([[0.0, 0.1], [0.0, 0.1], [-0.1, 0.1]], 20, 0).unwrap();
        let (target, fallback) = expected_information_density(&f, &p, &proj, &EIDConfig::default()).unwrap();
        assert!(fallback);
        assert_abs_diff_eq!(target.phi()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fisher_is_symmetric_psd_rank_one() {
        let f = smooth_field();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = [rng.gen::<f64>(), rng.gen::<f64>()];
            let i = pointwise_fisher(&f, &s, 0.01);
            assert_eq!(i[(0, 1)], i[(1, 0)]);
            let eig = i.clone().symmetric_eigen().eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            assert!(lo > -1e-10);
            assert!(lo.abs() < 1e-10 * hi.max(1.0));
        }
    }

    #[test]
    fn single_identity_particle_is_one_term() {
        let f = smooth_field();
        let s = [0.45, 0.55];
        let m = information_matrix(&f, &[[0.0, 0.0, 0.0]], &[1.0], &s, 0.01);
        let j = SE2Transform::identity().inverse_jacobian(&s);
        let i = pointwise_fisher(&f, &s, 0.01);
        let i2 = nalgebra::Matrix2::new(i[(0, 0)], i[(0, 1)], i[(1, 0)], i[(1, 1)]);
        let direct = j.transpose() * i2 * j;
        assert!((m - direct).amax() < 1e-9 * direct.amax());
        assert!(m.determinant().abs() <= 1e-9 * direct.amax().powi(3));
    }

    #[test]
    fn factor_reproduces_the_summed_matrix() {
        let f = smooth_field();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let thetas: Vec<[f64; 3]> = (0..40)
            .map(|_| [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-3.0..3.0)])
            .collect();
        let weights: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() / 40.0).collect();
        for _ in 0..50 {
            let s = [rng.gen::<f64>(), rng.gen::<f64>()];
            let m = information_matrix(&f, &thetas, &weights, &s, 0.01);
            let r = information_factor(&f, &thetas, &weights, &s, 0.01);
            assert!(r[(1, 0)] == 0.0 && r[(2, 0)] == 0.0 && r[(2, 1)] == 0.0);
            assert!((r.transpose() * r - m).amax() <= 1e-12 * m.amax().max(1e-300));
            let d = information_determinant(&f, &thetas, &weights, &s, 0.01);
            assert!(d >= 0.0);
            assert!((d - cofactor_det(&m)).abs() <= 1e-9 * m.amax().powi(3).max(1e-300));
        }
    }

    #[test]
    fn determinant_matches_cofactor_expansion_and_is_nonnegative() {
        let f = smooth_field();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let thetas: Vec<[f64; 3]> = (0..30)
            .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.3..0.3)])
            .collect();
        let weights = vec![1.0 / 30.0; 30];
        for _ in 0..50 {
            let s = [rng.gen::<f64>(), rng.gen::<f64>()];
            let m = information_matrix(&f, &thetas, &weights, &s, 0.01);
            let scale = m.amax().powi(3).max(1e-300);
            assert!((m.determinant() - cofactor_det(&m)).abs() <= 1e-12 * scale.max(1.0));
            assert!(cofactor_det(&m) >= -1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn translation_equivariance() {
        let f = smooth_field();
        let t = [0.1, -0.05];
        for s in [[0.5, 0.5], [0.45, 0.7], [0.6, 0.62]] {
            let a = information_matrix(&f, &[[t[0], t[1], 0.0]], &[1.0], &s, 0.01);
            let b = information_matrix(&f, &[[0.0, 0.0, 0.0]], &[1.0], &[s[0] - t[0], s[1] - t[1]], 0.01);
            assert!((a - b).amax() <= 1e-6 * b.amax().max(1.0));
        }
    }

    #[test]
    fn concentrating_particles_approach_single_particle() {
        let f = smooth_field();
        let center = [0.05, 0.02, 0.2];
        let single = information_matrix(&f, &[center], &[1.0], &[0.5, 0.6], 0.01);
        let mut prev = f64::INFINITY;
        for spread in [0.05, 0.01, 0.002, 0.0004] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let thetas: Vec<[f64; 3]> = (0..64)
                .map(|_| {
                    [
                        center[0] + spread * rng.gen_range(-1.0..1.0),
                        center[1] + spread * rng.gen_range(-1.0..1.0),
                        center[2] + spread * rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let m = information_matrix(&f, &thetas, &[1.0 / 64.0; 64], &[0.5, 0.6], 0.01);
            let err = (m - single).amax();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-2 * single.amax());
    }

    #[test]
    fn thinning_keeps_weight_and_bounds_count() {
        let p = ParticleSet::init_uniform([[0.0, 1.0], [0.0, 1.0], [-PI, PI]], 2000, 1).unwrap();
        let (th, w) = thinned_particles(&p, 256);
        assert!(th.len() <= 256);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let small = ParticleSet::init_uniform([[0.0, 1.0], [0.0, 1.0], [-PI, PI]], 10, 1).unwrap();
        assert_eq!(thinned_particles(&small, 256).0, small.thetas());
    }

    #[test]
    fn truth_field_eid_is_positive_near_edges() {
        let cfg = SceneConfig::default_three_objects();
        let scene = cfg.scene().unwrap();
        let f = truth_field(&scene, &SE2Transform::identity(), 0.05, 64, 4, 1e-3).unwrap();
        let p = ParticleSet::init_uniform([[-0.05, 0.05], [-0.05, 0.05], [-0.2, 0.2]], 500, 3).unwrap();
        let grid = Grid::over(scene.domain(), 32).unwrap();
        let (d, floored) = eid_density(&f, &p, &grid, &EIDConfig::default());
        assert!(!floored);
        assert!(d.values().iter().all(|v| *v >= 1e-12));
        // density is larger around the circle than in the empty corner
        assert!(d.interpolate(&[0.25, 0.6]) > d.interpolate(&[0.03, 0.03]));
    }
}
