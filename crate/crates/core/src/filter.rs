//! Particle filter over the planar transform `theta = (t_x, t_y, alpha)`.
//!
//! Each contact reading reweights the particles by the learned likelihood
//! evaluated at the reading's location pulled back through the particle's
//! transform. Angles are kept wrapped to `(-pi, pi]`.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{format_f64, write_file};
use crate::environment::{wrap_angle, SE2Transform};
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Prior box `[lo, hi]` for `t_x`, `t_y` and `alpha`.
    pub prior_bounds: [[f64; 2]; 3],
    /// Resample when the effective sample size drops below this fraction
    /// of the particle count.
    pub ess_fraction: f64,
    /// Standard deviations of the post-resample jitter.
    pub jitter_std: [f64; 3],
    /// Factor applied to the jitter after each resample.
    pub jitter_anneal: f64,
    /// Metropolis moves per particle after each resample, targeting the
    /// posterior given every reading so far. Zero disables them.
    pub move_steps: usize,
    /// Random-walk proposal std as a multiple of the particle spread on
    /// each axis (never below the current jitter).
    pub move_scale: f64,
    /// Per-reading likelihoods are clamped to `[floor, 1 - floor]`.
    pub likelihood_floor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 2000,
            prior_bounds: [[0.0, 1.2], [0.0, 1.0], [-2.0 * PI, 2.0 * PI]],
            ess_fraction: 0.5,
            jitter_std: [0.005, 0.005, 0.01],
            jitter_anneal: 0.99,
            move_steps: 2,
            move_scale: 1.0,
            likelihood_floor: 0.01,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_particles == 0 {
            return bad("n_particles must be positive");
        }
        if self.prior_bounds.iter().any(|b| !(b[0] < b[1]) || !b[0].is_finite() || !b[1].is_finite()) {
            return bad("prior bounds must be finite, nonempty intervals");
        }
        if !(0.0..=1.0).contains(&self.ess_fraction) {
            return bad("ess_fraction must lie in [0, 1]");
        }
        if !(self.move_scale > 0.0 && self.move_scale.is_finite()) {
            return bad("move_scale must be positive");
        }
        if self.jitter_std.iter().any(|s| !(*s >= 0.0)) || !(self.jitter_anneal > 0.0 && self.jitter_anneal <= 1.0) {
            return bad("jitter must be nonnegative with anneal factor in (0, 1]");
        }
        if !(self.likelihood_floor > 0.0 && self.likelihood_floor < 0.5) {
            return bad("likelihood_floor must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// Weighted particles plus the random stream used for resampling.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    thetas: Vec<[f64; 3]>,
    weights: Vec<f64>,
    rng: ChaCha8Rng,
    jitter_scale: f64,
    resamples: usize,
    // readings seen by `update`, flattened points plus labels
    history: Vec<f64>,
    labels: Vec<bool>,
    moves: (usize, usize),
}

/// Weighted mean and covariance of a particle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: [f64; 3],
    pub covariance: [[f64; 3]; 3],
}

impl ParticleSet {
    /// `n` i.i.d. uniform draws over `bounds` with equal weights.
    pub fn init_uniform(bounds: [[f64; 2]; 3], n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("particle count"));
        }
        if bounds.iter().any(|b| !(b[0] < b[1])) {
            return Err(Error::InvalidConfig(format!("empty prior bounds {bounds:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas = (0..n)
            .map(|_| {
                let tx = rng.gen_range(bounds[0][0]..bounds[0][1]);
                let ty = rng.gen_range(bounds[1][0]..bounds[1][1]);
                let a = rng.gen_range(bounds[2][0]..bounds[2][1]);
                [tx, ty, wrap_angle(a)]
            })
            .collect();
        Ok(Self {
            thetas,
            weights: vec![1.0 / n as f64; n],
            rng,
            jitter_scale: 1.0,
            resamples: 0,
            history: Vec::new(),
            labels: Vec::new(),
            moves: (0, 0),
        })
    }

    /// Builds a set from explicit particles; weights are normalized.
    pub fn from_particles(thetas: Vec<[f64; 3]>, weights: Vec<f64>, seed: u64) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::Empty("particle set"));
        }
        if thetas.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: thetas.len(),
                got: weights.len(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidConfig("particle weights must be nonnegative with positive sum".into()));
        }
        Ok(Self {
            thetas: thetas.into_iter().map(|t| [t[0], t[1], wrap_angle(t[2])]).collect(),
            weights: weights.iter().map(|w| w / total).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            jitter_scale: 1.0,
            resamples: 0,
            history: Vec::new(),
            labels: Vec::new(),
            moves: (0, 0),
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn thetas(&self) -> &[[f64; 3]] {
        &self.thetas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn resamples(&self) -> usize {
        self.resamples
    }

    /// Accepted and proposed Metropolis moves so far.
    pub fn move_counts(&self) -> (usize, usize) {
        self.moves
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Per-particle likelihood of reading `y` at world point `x_v`.
    pub fn likelihoods(&self, field: &LikelihoodField, x_v: &[f64], y: bool, floor: f64) -> Vec<f64> {
        let mut pulled = x_v.to_vec();
        self.thetas
            .iter()
            .map(|th| {
                SE2Transform::from_array(*th).inverse_apply_into(x_v, &mut pulled);
                let (p, _) = field.query(&pulled);
                let l = if y { p } else { 1.0 - p };
                l.clamp(floor, 1.0 - floor)
            })
            .collect()
    }

    /// Bayes update of the weights only; no resampling.
    pub fn reweight(&mut self, field: &LikelihoodField, x_v: &[f64], y: bool, floor: f64) {
        let l = self.likelihoods(field, x_v, y, floor);
        self.apply_likelihoods(&l);
    }

    pub fn apply_likelihoods(&mut self, likelihoods: &[f64]) {
        for (w, l) in self.weights.iter_mut().zip(likelihoods) {
            *w *= l;
        }
        self.normalize();
    }

    fn normalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            warn!("particle weights underflowed; resetting to uniform");
            let n = self.weights.len() as f64;
            self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
            return;
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
    }

    /// Systematic resampling plus annealed jitter when the effective sample
    /// size falls below `ess_fraction * N`. Returns whether it resampled.
    pub fn maybe_resample(&mut self, config: &FilterConfig) -> bool {
        let n = self.len();
        if self.effective_sample_size() >= config.ess_fraction * n as f64 {
            return false;
        }
        let u0: f64 = self.rng.gen();
        let idx = systematic_resample_indices(&self.weights, u0);
        let mut next: Vec<[f64; 3]> = idx.iter().map(|i| self.thetas[*i]).collect();
        for (axis, std) in config.jitter_std.iter().enumerate() {
            let s = std * self.jitter_scale;
            if s > 0.0 {
                let normal = Normal::new(0.0, s).expect("jitter std is finite and positive");
                for th in next.iter_mut() {
                    th[axis] += normal.sample(&mut self.rng);
                }
            }
        }
        for th in next.iter_mut() {
            th[2] = wrap_angle(th[2]);
        }
        self.thetas = next;
        self.weights = vec![1.0 / n as f64; n];
        self.jitter_scale *= config.jitter_anneal;
        self.resamples += 1;
        true
    }

    /// Log-likelihood of every recorded reading under transform `th`.
    fn history_log_likelihood(&self, field: &LikelihoodField, th: &[f64; 3], floor: f64) -> f64 {
        let dim = field.grid().dims();
        let tf = SE2Transform::from_array(*th);
        let mut pulled = vec![0.0; dim];
        self.history
            .chunks_exact(dim)
            .zip(&self.labels)
            .map(|(x, y)| {
                tf.inverse_apply_into(x, &mut pulled);
                let p = field.probability_at(&pulled);
                let l = if *y { p } else { 1.0 - p };
                l.clamp(floor, 1.0 - floor).ln()
            })
            .sum()
    }

    /// Metropolis random-walk moves on an equally weighted set. The target
    /// is the uniform prior box times the likelihood of the full history.
    pub fn rejuvenate(&mut self, field: &LikelihoodField, config: &FilterConfig) {
        if config.move_steps == 0 || self.labels.is_empty() {
            return;
        }
        let cov = self.estimate().covariance;
        let step = [0, 1, 2].map(|i| {
            (config.move_scale * cov[i][i].max(0.0).sqrt()).max(config.jitter_std[i] * self.jitter_scale)
        });
        if step.iter().all(|s| !(*s > 0.0)) {
            return;
        }
        let bounds = config.prior_bounds;
        let floor = config.likelihood_floor;
        let mut thetas = std::mem::take(&mut self.thetas);
        for th in thetas.iter_mut() {
            let mut ll = self.history_log_likelihood(field, th, floor);
            for _ in 0..config.move_steps {
                let mut cand = *th;
                for (axis, s) in step.iter().enumerate() {
                    let z: f64 = self.rng.sample(rand_distr::StandardNormal);
                    cand[axis] += s * z;
                }
                cand[2] = wrap_angle(cand[2]);
                let u: f64 = self.rng.gen();
                self.moves.1 += 1;
                let inside = (0..2).all(|a| (bounds[a][0]..=bounds[a][1]).contains(&cand[a]));
                if !inside {
                    continue;
                }
                let cand_ll = self.history_log_likelihood(field, &cand, floor);
                if u.ln() < cand_ll - ll {
                    *th = cand;
                    ll = cand_ll;
                    self.moves.0 += 1;
                }
            }
        }
        self.thetas = thetas;
    }

    /// Full filter step for one reading.
    pub fn update(&mut self, field: &LikelihoodField, x_v: &[f64], y: bool, config: &FilterConfig) -> bool {
        self.reweight(field, x_v, y, config.likelihood_floor);
        self.history.extend_from_slice(&x_v[..field.grid().dims()]);
        self.labels.push(y);
        let resampled = self.maybe_resample(config);
        if resampled {
            self.rejuvenate(field, config);
        }
        resampled
    }

    /// Weighted mean (circular for `alpha`) and covariance with wrapped
    /// angular residuals.
    pub fn estimate(&self) -> Estimate {
        let mut mean = [0.0; 3];
        let (mut s, mut c) = (0.0, 0.0);
        for (th, w) in self.thetas.iter().zip(&self.weights) {
            mean[0] += w * th[0];
            mean[1] += w * th[1];
            s += w * th[2].sin();
            c += w * th[2].cos();
        }
        mean[2] = s.atan2(c);
        let mut cov = [[0.0; 3]; 3];
        for (th, w) in self.thetas.iter().zip(&self.weights) {
            let r = [th[0] - mean[0], th[1] - mean[1], wrap_angle(th[2] - mean[2])];
            for i in 0..3 {
                for j in i..3 {
                    cov[i][j] += w * r[i] * r[j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..i {
                cov[i][j] = cov[j][i];
            }
        }
        Estimate { mean, covariance: cov }
    }
}

/// Indices drawn by systematic resampling with offset `u0 in [0, 1)`.
pub fn systematic_resample_indices(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = (u0 + k as f64) / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Per-component error between an estimate and the truth, with the angle
/// difference wrapped.
pub fn pose_error(estimate: &[f64; 3], truth: &[f64; 3]) -> [f64; 3] {
    [
        (estimate[0] - truth[0]).abs(),
        (estimate[1] - truth[1]).abs(),
        wrap_angle(estimate[2] - truth[2]).abs(),
    ]
}

/// Appends particle snapshots as rows `t, t_x, t_y, alpha, w`.
#[derive(Debug, Clone, Default)]
pub struct ParticleSnapshots {
    rows: String,
    count: usize,
}

impl ParticleSnapshots {
    pub fn record(&mut self, t: f64, set: &ParticleSet) {
        for (th, w) in set.thetas().iter().zip(set.weights()) {
            self.rows.push_str(&format!(
                "{},{},{},{},{}\n",
                format_f64(t),
                format_f64(th[0]),
                format_f64(th[1]),
                format_f64(th[2]),
                format_f64(*w)
            ));
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,tx,ty,alpha,w\n");
        out.push_str(&self.rows);
        write_file(path, out.as_bytes())
    }

    /// Snapshots grouped by time.
    pub fn read_csv(path: &Path) -> Result<Vec<(f64, Vec<[f64; 3]>, Vec<f64>)>> {
        let rows = read_numeric_rows(path, "particle snapshots", 5)?;
        let mut out: Vec<(f64, Vec<[f64; 3]>, Vec<f64>)> = Vec::new();
        for r in rows {
            if out.last().map_or(true, |(t, _, _)| *t != r[0]) {
                out.push((r[0], Vec::new(), Vec::new()));
            }
            let last = out.last_mut().expect("pushed above");
            last.1.push([r[1], r[2], r[3]]);
            last.2.push(r[4]);
        }
        Ok(out)
    }
}

/// Estimate trace rows `t, mean (3), covariance upper triangle (6)`.
pub fn write_estimate_log(path: &Path, rows: &[(f64, Estimate)]) -> Result<()> {
    let mut out = String::from("t,tx,ty,alpha,c_xx,c_xy,c_xa,c_yy,c_ya,c_aa\n");
    for (t, e) in rows {
        let c = &e.covariance;
        let vals = [
            *t, e.mean[0], e.mean[1], e.mean[2], c[0][0], c[0][1], c[0][2], c[1][1], c[1][2], c[2][2],
        ];
        out.push_str(&vals.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_estimate_log(path: &Path) -> Result<Vec<(f64, Estimate)>> {
    let rows = read_numeric_rows(path, "estimate log", 10)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let cov = [[r[4], r[5], r[6]], [r[5], r[7], r[8]], [r[6], r[8], r[9]]];
            (
                r[0],
                Estimate {
                    mean: [r[1], r[2], r[3]],
                    covariance: cov,
                },
            )
        })
        .collect())
}

pub(crate) fn read_numeric_rows(path: &Path, what: &'static str, cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    lines.next().ok_or_else(|| Error::parse(what, path, "missing header"))?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let r: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(what, path, format!("row {}: {e}", i + 1)))?;
            if r.len() != cols {
                return Err(Error::parse(what, path, format!("row {} has {} fields", i + 1, r.len())));
            }
            Ok(r)
        })
        .collect()
}
