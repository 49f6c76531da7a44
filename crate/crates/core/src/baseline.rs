//! Greedy expected-entropy-reduction (EER) baseline: pick the candidate
//! sensing location with the largest expected one-step entropy decrease and
//! drive there with an LQR point tracker.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::SearchDomain;
use crate::dynamics::{ControlAffineModel, DoubleIntegrator};
use crate::error::{Error, Result};
use crate::filter::ParticleSet;
use crate::likelihood::LikelihoodField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrConfig {
    pub q_position: f64,
    pub q_velocity: f64,
    pub r: f64,
    /// Discretization step of the tracker (s).
    pub dt: f64,
}

impl Default for LqrConfig {
    fn default() -> Self {
        Self {
            q_position: 10.0,
            q_velocity: 1.0,
            r: 0.1,
            dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EERConfig {
    /// Candidate locations drawn per replan.
    pub n_samples: usize,
    /// Seconds between target selections.
    pub replan_period: f64,
    pub lqr: LqrConfig,
}

impl Default for EERConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            replan_period: 1.0,
            lqr: LqrConfig::default(),
        }
    }
}

impl EERConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        if !(self.replan_period > 0.0) {
            return Err(Error::InvalidConfig("replan_period must be positive".into()));
        }
        let l = &self.lqr;
        if !(l.q_position > 0.0 && l.q_velocity >= 0.0 && l.r > 0.0 && l.dt > 0.0) {
            return Err(Error::InvalidConfig("LQR weights must be positive".into()));
        }
        Ok(())
    }
}

/// `-sum w log w`, with `0 log 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// Entropy of a Bernoulli variable with success probability `p`.
pub fn bernoulli_entropy(p: f64) -> f64 {
    entropy(&[p, 1.0 - p])
}

/// `n` points drawn uniformly over the domain.
pub fn draw_candidates<R: Rng + ?Sized>(domain: &SearchDomain, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| domain.lengths().iter().map(|l| rng.gen_range(0.0..*l)).collect())
        .collect()
}

/// Current belief the baseline reasons about.
pub enum Belief<'a> {
    /// Localization: particles over the transform plus the model-frame
    /// likelihood and the per-reading likelihood floor.
    Particles {
        set: &'a ParticleSet,
        field: &'a LikelihoodField,
        floor: f64,
    },
    /// Map building: the contact field itself, whose uncertainty at a point
    /// is the Bernoulli entropy of `p(y = 1 | s)`.
    Field(&'a LikelihoodField),
}

/// Expected entropy reduction of sensing once at `s`.
pub fn expected_entropy_reduction(belief: &Belief, s: &[f64]) -> f64 {
    match belief {
        Belief::Field(field) => bernoulli_entropy(field.query(s).0),
        Belief::Particles { set, field, floor } => {
            let prior = entropy(set.weights());
            let l1 = set.likelihoods(field, s, true, *floor);
            let p1: f64 = set.weights().iter().zip(&l1).map(|(w, l)| w * l).sum();
            let mut expected = 0.0;
            for (y, py) in [(true, p1), (false, 1.0 - p1)] {
                let mut post = (*set).clone();
                post.reweight(field, s, y, *floor);
                expected += py * entropy(post.weights());
            }
            prior - expected
        }
    }
}

/// Index and reduction of the best candidate; ties go to the first.
pub fn select_target(belief: &Belief, candidates: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let r = expected_entropy_reduction(belief, c);
        if best.map_or(true, |(_, b)| r > b) {
            best = Some((i, r));
        }
    }
    best
}

/// Solves the discrete algebraic Riccati equation
/// `P = Q + A^T P A - A^T P B (R + B^T P B)^-1 B^T P A`
/// with the structure-preserving doubling iteration.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    const MAX_ITER: usize = 100;
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidConfig("LQR input weight is singular".into()))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_ITER {
        let w = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or(Error::RiccatiNonConvergence(MAX_ITER))?;
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let change = (&h_next - &hk).amax();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.iter().all(|x| x.is_finite()) {
            break;
        }
        if change <= 1e-13 * hk.amax().max(1.0) {
            return Ok((&hk + hk.transpose()) * 0.5);
        }
    }
    Err(Error::RiccatiNonConvergence(MAX_ITER))
}

/// Zero-order-hold discretization of the double integrator.
pub fn discretize_double_integrator(axes: usize, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = 2 * axes;
    let mut a = DMatrix::identity(n, n);
    let mut b = DMatrix::zeros(n, axes);
    for i in 0..axes {
        a[(i, axes + i)] = dt;
        b[(i, i)] = 0.5 * dt * dt;
        b[(axes + i, i)] = dt;
    }
    (a, b)
}

/// Infinite-horizon LQR regulator toward a fixed point at rest.
#[derive(Debug, Clone)]
pub struct LqrTracker {
    gain: DMatrix<f64>,
    axes: usize,
}

impl LqrTracker {
    pub fn new(model: &DoubleIntegrator, config: &LqrConfig) -> Result<Self> {
        let axes = model.axes();
        let (a, b) = discretize_double_integrator(axes, config.dt);
        let mut q = DMatrix::zeros(2 * axes, 2 * axes);
        for i in 0..axes {
            q[(i, i)] = config.q_position;
            q[(axes + i, axes + i)] = config.q_velocity;
        }
        let r = DMatrix::identity(axes, axes) * config.r;
        let p = solve_dare(&a, &b, &q, &r)?;
        let btp = b.transpose() * &p;
        let gain = (&r + &btp * &b)
            .try_inverse()
            .ok_or(Error::RiccatiNonConvergence(0))?
            * btp
            * a;
        Ok(Self { gain, axes })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// Saturated `u = -K (x - [target; 0])`.
    pub fn control(&self, model: &DoubleIntegrator, x: &DVector<f64>, target: &[f64]) -> DVector<f64> {
        let mut err = x.clone();
        for i in 0..self.axes {
            err[i] -= target[i];
        }
        model.saturate(&(-(&self.gain * err)))
    }
}

/// Convenience wrapper: gain from a fresh Riccati solve, then one control.
pub fn lqr_track(model: &DoubleIntegrator, config: &LqrConfig, x: &DVector<f64>, target: &[f64]) -> Result<DVector<f64>> {
    Ok(LqrTracker::new(model, config)?.control(model, x, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Grid;
    use crate::domain::GridField;
    use crate::dynamics::{double_integrator, rk4_step};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_reference_values() {
        assert_abs_diff_eq!(entropy(&[0.25; 4]), 4f64.ln(), epsilon = 1e-15);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert_abs_diff_eq!(entropy(&[0.3, 0.7]), 0.6109, epsilon = 1e-4);
    }

    fn step_field() -> LikelihoodField {
        let grid = Grid::over(&SearchDomain::unit(2).unwrap(), 64).unwrap();
        LikelihoodField::from_probability_grid(GridField::from_fn(grid, |s| if s[0] < 0.5 { 0.99 } else { 0.01 }), 1e-3)
            .unwrap()
    }

    #[test]
    fn point_mass_belief_gains_nothing() {
        let f = step_field();
        let set = ParticleSet::from_particles(vec![[0.0, 0.0, 0.0]], vec![1.0], 0).unwrap();
        let belief = Belief::Particles {
            set: &set,
            field: &f,
            floor: 0.01,
        };
        let cands = vec![vec![0.2, 0.2], vec![0.7, 0.7], vec![0.5, 0.1]];
        let (i, r) = select_target(&belief, &cands).unwrap();
        assert_eq!(i, 0);
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn discriminating_candidate_wins() {
        // two hypotheses shifted by 0.3 in x; at s = (0.65, 0.5) one says
        // contact and the other does not, at (0.1, 0.5) both say contact
        let f = step_field();
        let set = ParticleSet::from_particles(vec![[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]], vec![0.5, 0.5], 0).unwrap();
        let floor = 0.01;
        let belief = Belief::Particles { set: &set, field: &f, floor };
        let weak = expected_entropy_reduction(&belief, &[0.1, 0.5]);
        let strong = expected_entropy_reduction(&belief, &[0.65, 0.5]);
        assert!(strong > weak);
        // analytic: likelihoods (0.01, 0.99) for y = 1, mirrored for y = 0
        let l = [0.01, 0.99];
        let p1 = 0.5 * l[0] + 0.5 * l[1];
        let post = [0.5 * l[0] / p1, 0.5 * l[1] / p1];
        let expect = 2f64.ln() - entropy(&post);
        assert_abs_diff_eq!(strong, expect, epsilon = 1e-12);
        assert_eq!(select_target(&belief, &[vec![0.1, 0.5], vec![0.65, 0.5]]).unwrap().0, 1);
    }

    #[test]
    fn field_mode_picks_the_most_uncertain_candidate() {
        let grid = Grid::over(&SearchDomain::unit(2).unwrap(), 64).unwrap();
        let f = LikelihoodField::from_probability_grid(GridField::from_fn(grid, |s| 0.05 + 0.9 * s[0]), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cands = draw_candidates(&SearchDomain::unit(2).unwrap(), 200, &mut rng);
        let (i, _) = select_target(&Belief::Field(&f), &cands).unwrap();
        let brute = cands
            .iter()
            .enumerate()
            .map(|(k, c)| (k, bernoulli_entropy(f.query(c).0)))
            .fold((0, f64::NEG_INFINITY), |acc, (k, h)| if h > acc.1 { (k, h) } else { acc });
        assert_eq!(i, brute.0);
        assert!((cands[i][0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn candidates_are_reproducible() {
        let d = SearchDomain::unit(2).unwrap();
        let a = draw_candidates(&d, 200, &mut ChaCha8Rng::seed_from_u64(3));
        let b = draw_candidates(&d, 200, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|x| (0.0..1.0).contains(x)));
    }

    fn riccati_iteration(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = q.clone();
        for _ in 0..200_000 {
            let btp = b.transpose() * &p;
            let k = (r + &btp * b).try_inverse().unwrap() * &btp * a;
            let next = q + a.transpose() * &p * a - a.transpose() * &p * b * k;
            let done = (&next - &p).amax() < 1e-14 * next.amax();
            p = next;
            if done {
                break;
            }
        }
        p
    }

    #[test]
    fn gain_matches_riccati_iteration() {
        let model = double_integrator(2).unwrap();
        let cfg = LqrConfig::default();
        let tracker = LqrTracker::new(&model, &cfg).unwrap();
        let (a, b) = discretize_double_integrator(2, cfg.dt);
        let mut q = DMatrix::zeros(4, 4);
        for i in 0..2 {
            q[(i, i)] = cfg.q_position;
            q[(2 + i, 2 + i)] = cfg.q_velocity;
        }
        let r = DMatrix::identity(2, 2) * cfg.r;
        let p = riccati_iteration(&a, &b, &q, &r);
        let btp = b.transpose() * &p;
        let k = (&r + &btp * &b).try_inverse().unwrap() * btp * &a;
        let diff = (tracker.gain() - &k).amax();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn at_target_at_rest_gives_zero() {
        let model = double_integrator(2).unwrap();
        let x = DVector::from_vec(vec![0.3, 0.4, 0.0, 0.0]);
        let u = lqr_track(&model, &LqrConfig::default(), &x, &[0.3, 0.4]).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn closed_loop_reaches_target() {
        let model = double_integrator(2).unwrap();
        let cfg = LqrConfig::default();
        let tracker = LqrTracker::new(&model, &cfg).unwrap();
        let mut x = DVector::from_vec(vec![0.1, 0.9, 0.0, 0.0]);
        let target = [0.8, 0.2];
        let mut t = 0.0;
        let mut reached = None;
        while t < 10.0 {
            let u = tracker.control(&model, &x, &target);
            x = rk4_step(&model, &x, t, cfg.dt, &|_| u.clone());
            t += cfg.dt;
            let d = ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt();
            if d < 0.01 && reached.is_none() {
                reached = Some(t);
            }
        }
        assert!(reached.is_some());
        assert!(((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt() < 0.01);
    }
}
