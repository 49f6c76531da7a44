//! Learned contact likelihood `p(y = 1 | s)`.
//!
//! A kernel logistic regression with a Gaussian kernel is fit to the
//! measurement log by Newton's method on the latent values at the training
//! points, then tabulated on a grid. Queries and spatial gradients are read
//! off that grid.

use std::path::Path;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{distribution_coefficients, format_f64, write_file, Basis, Grid, GridField, SearchDomain, TargetDistribution};
use crate::environment::{occupancy, Scene, SE2Transform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodConfig {
    /// Squared kernel bandwidth `sigma_k^2`.
    pub kernel_variance: f64,
    /// Ridge penalty on the mean log-loss.
    pub regularization: f64,
    /// Prior variance of a constant offset, folded into the kernel.
    pub bias_variance: f64,
    /// Probabilities are clamped to `[floor, 1 - floor]`.
    pub probability_floor: f64,
    /// Grid nodes per axis; `None` uses the domain default.
    pub grid_resolution: Option<usize>,
    /// Refit after this many new samples.
    pub refit_every: usize,
    /// Training points kept (uniform reservoir) when the log is longer.
    pub max_training_points: usize,
    pub subsample_seed: u64,
    pub newton_max_iter: usize,
    /// Newton stops once no latent value moves more than this.
    pub newton_tol: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            kernel_variance: 0.01,
            regularization: 1e-3,
            bias_variance: 1.0,
            probability_floor: 1e-3,
            grid_resolution: None,
            refit_every: 25,
            max_training_points: 2000,
            subsample_seed: 0,
            newton_max_iter: 50,
            newton_tol: 1e-8,
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.kernel_variance > 0.0) {
            return bad("kernel_variance must be positive");
        }
        if !(self.regularization > 0.0) {
            return bad("regularization must be positive");
        }
        if !(self.bias_variance >= 0.0) {
            return bad("bias_variance must be nonnegative");
        }
        if !(self.probability_floor > 0.0 && self.probability_floor < 0.5) {
            return bad("probability_floor must lie in (0, 0.5)");
        }
        if self.refit_every == 0 || self.max_training_points == 0 {
            return bad("refit_every and max_training_points must be positive");
        }
        if matches!(self.grid_resolution, Some(n) if n < 2) {
            return bad("grid_resolution must be at least 2");
        }
        Ok(())
    }

    fn resolution(&self, domain: &SearchDomain) -> usize {
        self.grid_resolution.unwrap_or_else(|| domain.default_grid_resolution())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: bool,
}

/// Append-only record of `(t, x_v, y)` readings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementLog {
    samples: Vec<Measurement>,
}

impl MeasurementLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, x: Vec<f64>, y: bool) {
        self.samples.push(Measurement { t, x, y });
    }

    pub fn samples(&self) -> &[Measurement] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|m| m.y).count()
    }

    /// Rows `t, x_1..x_v, y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let v = self.samples.first().map_or(0, |m| m.x.len());
        let mut out = String::from("t");
        for i in 1..=v {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",y\n");
        for m in &self.samples {
            out.push_str(&format_f64(m.t));
            for x in &m.x {
                out.push(',');
                out.push_str(&format_f64(*x));
            }
            out.push_str(if m.y { ",1\n" } else { ",0\n" });
        }
        write_file(path, out.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("measurement log", path, "missing header"))?;
        let cols = header.split(',').count();
        if cols < 3 {
            return Err(Error::parse("measurement log", path, "too few columns"));
        }
        let mut log = MeasurementLog::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::parse("measurement log", path, format!("row {} has {} fields", i + 1, fields.len())));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse("measurement log", path, format!("row {}: {e}", i + 1)))
            };
            let t = num(fields[0])?;
            let x = fields[1..cols - 1].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let y = match fields[cols - 1].trim() {
                "0" => false,
                "1" => true,
                other => return Err(Error::parse("measurement log", path, format!("label {other:?}"))),
            };
            log.push(t, x, y);
        }
        Ok(log)
    }
}

fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Fitted kernel logistic regression in dual form:
/// `f(s) = sum_i kappa(s, x_i) d_i`, with
/// `kappa = (exp(-|s - x|^2 / (2 sigma_k^2)) + c_0) / (n lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLogisticModel {
    points: Vec<Vec<f64>>,
    dual: Vec<f64>,
    kernel_variance: f64,
    bias_variance: f64,
    scale: f64,
    iterations: usize,
}

impl KernelLogisticModel {
    pub fn fit(points: Vec<Vec<f64>>, labels: &[bool], config: &LikelihoodConfig) -> Result<Self> {
        let n = points.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Empty("training set"));
        }
        let scale = 1.0 / (n as f64 * config.regularization);
        let inv2s = 0.5 / config.kernel_variance;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = (1.0 + config.bias_variance) * scale;
            for j in 0..i {
                let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                let v = ((-d2 * inv2s).exp() + config.bias_variance) * scale;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let t = DVector::from_iterator(n, labels.iter().map(|y| if *y { 1.0 } else { 0.0 }));
        let log_lik = |f: &DVector<f64>| -> f64 {
            f.iter()
                .zip(t.iter())
                .map(|(fi, ti)| {
                    // log sigmoid(+-f) computed stably
                    let z = if *ti > 0.5 { *fi } else { -fi };
                    -(1.0 + (-z.abs()).exp()).ln() + z.min(0.0)
                })
                .sum()
        };
        // Newton iteration on the posterior mode, in the numerically stable
        // form through B = I + W^1/2 K W^1/2.
        let mut f = DVector::zeros(n);
        let mut a = DVector::zeros(n);
        let mut psi = log_lik(&f);
        let mut iterations = 0;
        for it in 0..config.newton_max_iter {
            iterations = it + 1;
            let pi = f.map(sigmoid);
            let w = pi.map(|p| p * (1.0 - p));
            let sw = w.map(f64::sqrt);
            let mut b = k.clone();
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] *= sw[i] * sw[j];
                }
                b[(i, i)] += 1.0;
            }
            let chol = b
                .cholesky()
                .ok_or_else(|| Error::InvalidConfig("likelihood Newton system is not positive definite".into()))?;
            let rhs = w.component_mul(&f) + (&t - &pi);
            let kb = &k * &rhs;
            let inner = chol.solve(&sw.component_mul(&kb));
            let a_new = &rhs - sw.component_mul(&inner);
            // backtrack along a if the full step does not improve the objective
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..20 {
                let a_try = &a + (&a_new - &a) * step;
                let f_try = &k * &a_try;
                let psi_try = -0.5 * a_try.dot(&f_try) + log_lik(&f_try);
                if psi_try >= psi - 1e-12 * psi.abs() {
                    accepted = Some((a_try, f_try, psi_try));
                    break;
                }
                step *= 0.5;
            }
            let Some((a_next, f_next, psi_next)) = accepted else {
                break;
            };
            let moved = (&f_next - &f).amax();
            a = a_next;
            f = f_next;
            psi = psi_next;
            if moved < config.newton_tol {
                break;
            }
        }
        let dual: Vec<f64> = t.iter().zip(f.iter()).map(|(ti, fi)| ti - sigmoid(*fi)).collect();
        Ok(Self {
            points,
            dual,
            kernel_variance: config.kernel_variance,
            bias_variance: config.bias_variance,
            scale,
            iterations,
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn training_points(&self) -> usize {
        self.points.len()
    }

    pub fn latent(&self, s: &[f64]) -> f64 {
        let inv2s = 0.5 / self.kernel_variance;
        self.points
            .iter()
            .zip(&self.dual)
            .map(|(x, d)| {
                let d2: f64 = x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                ((-d2 * inv2s).exp() + self.bias_variance) * d
            })
            .sum::<f64>()
            * self.scale
    }

    pub fn probability(&self, s: &[f64]) -> f64 {
        sigmoid(self.latent(s))
    }

    /// Latent values at every node of `grid`. The Gaussian kernel factors
    /// across axes, so each training point contributes an outer product of
    /// per-axis profiles.
    pub fn latent_grid(&self, grid: &Grid) -> Vec<f64> {
        let dims = grid.dims();
        let inv2s = 0.5 / self.kernel_variance;
        let sizes = grid.sizes();
        let mut out = vec![0.0; grid.len()];
        let bias_total: f64 = self.dual.iter().sum::<f64>() * self.bias_variance;
        let mut profiles: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
        for (x, d) in self.points.iter().zip(&self.dual) {
            for a in 0..dims {
                let h = grid.spacing(a);
                for (i, p) in profiles[a].iter_mut().enumerate() {
                    let diff = i as f64 * h - x[a];
                    *p = (-diff * diff * inv2s).exp();
                }
            }
            // flat index has axis 0 fastest
            let mut idx = vec![0usize; dims];
            for o in out.iter_mut() {
                let mut v = *d;
                for a in 0..dims {
                    v *= profiles[a][idx[a]];
                }
                *o += v;
                for a in 0..dims {
                    idx[a] += 1;
                    if idx[a] < sizes[a] {
                        break;
                    }
                    idx[a] = 0;
                }
            }
        }
        out.iter_mut().for_each(|o| *o = (*o + bias_total) * self.scale);
        out
    }
}

/// Cached probability surface with its spatial gradient.
#[derive(Debug, Clone)]
pub struct LikelihoodField {
    probability: GridField,
    gradient: Vec<GridField>,
    floor: f64,
    training_points: usize,
    fit_id: u64,
}

impl LikelihoodField {
    /// Wraps a probability grid, clamping it and tabulating its gradient.
    pub fn from_probability_grid(mut probability: GridField, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 0.5) {
            return Err(Error::InvalidConfig("probability floor must lie in (0, 0.5)".into()));
        }
        let grid = probability.grid().clone();
        let values: Vec<f64> = probability.values().iter().map(|p| p.clamp(floor, 1.0 - floor)).collect();
        probability = GridField::new(grid.clone(), values)?;
        let gradient = (0..grid.dims()).map(|a| node_gradient(&probability, a)).collect();
        Ok(Self {
            probability,
            gradient,
            floor,
            training_points: 0,
            fit_id: 0,
        })
    }

    pub fn constant(domain: &SearchDomain, nodes_per_axis: usize, p: f64, floor: f64) -> Result<Self> {
        let grid = Grid::over(domain, nodes_per_axis)?;
        Self::from_probability_grid(GridField::from_fn(grid, |_| p), floor)
    }

    pub fn grid(&self) -> &Grid {
        self.probability.grid()
    }

    pub fn probability_grid(&self) -> &GridField {
        &self.probability
    }

    pub fn gradient_grids(&self) -> &[GridField] {
        &self.gradient
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn training_points(&self) -> usize {
        self.training_points
    }

    /// Number of fits behind this snapshot.
    pub fn fit_id(&self) -> u64 {
        self.fit_id
    }

    pub fn with_fit_id(mut self, id: u64) -> Self {
        self.fit_id = id;
        self
    }

    fn clamp(&self, s: &[f64]) -> (Vec<f64>, bool) {
        let lengths = self.grid().lengths();
        let mut out = s.to_vec();
        let mut clamped = false;
        for (x, l) in out.iter_mut().zip(lengths) {
            let c = x.clamp(0.0, *l);
            if c != *x {
                clamped = true;
                *x = c;
            }
        }
        (out, clamped)
    }

    /// Interpolated probability; the flag reports that `s` was clamped into
    /// the domain first.
    pub fn query(&self, s: &[f64]) -> (f64, bool) {
        let (c, flag) = self.clamp(s);
        (self.probability.interpolate(&c), flag)
    }

    /// Probability at a point already known to lie in the domain (points
    /// outside are clamped silently).
    pub fn probability_at(&self, s: &[f64]) -> f64 {
        self.probability.interpolate(s)
    }

    pub fn spatial_gradient(&self, s: &[f64]) -> (Vec<f64>, bool) {
        let (c, flag) = self.clamp(s);
        (self.gradient.iter().map(|g| g.interpolate(&c)).collect(), flag)
    }

    pub fn gradient_into(&self, s: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.gradient) {
            *o = g.interpolate(s);
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.probability.write_csv(path)
    }

    pub fn read_csv(path: &Path, floor: f64) -> Result<Self> {
        Self::from_probability_grid(GridField::read_csv(path)?, floor)
    }
}

/// Central differences with the grid spacing as step, one-sided at walls.
fn node_gradient(field: &GridField, axis: usize) -> GridField {
    let grid = field.grid().clone();
    let n = grid.sizes()[axis];
    let h = grid.spacing(axis);
    let values = field.values();
    let stride: usize = grid.sizes()[..axis].iter().product();
    let out = (0..grid.len())
        .map(|j| {
            let i = (j / stride) % n;
            if i == 0 {
                (values[j + stride] - values[j]) / h
            } else if i == n - 1 {
                (values[j] - values[j - stride]) / h
            } else {
                (values[j + stride] - values[j - stride]) / (2.0 * h)
            }
        })
        .collect();
    GridField::new(grid, out).expect("gradient grid shares the field's layout")
}

/// Deterministic uniform reservoir of at most `cap` indices out of `n`.
fn reservoir(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = (0..cap).collect();
    for i in cap..n {
        let j = rng.gen_range(0..=i);
        if j < cap {
            keep[j] = i;
        }
    }
    keep.sort_unstable();
    keep
}

/// Fits the likelihood field to the whole log over `domain`.
pub fn fit(log: &MeasurementLog, domain: &SearchDomain, config: &LikelihoodConfig) -> Result<LikelihoodField> {
    config.validate()?;
    if log.is_empty() {
        return Err(Error::Empty("measurement log"));
    }
    let n_grid = config.resolution(domain);
    let floor = config.probability_floor;
    let positives = log.positives();
    if positives == 0 || positives == log.len() {
        let p = if positives == 0 { floor } else { 1.0 - floor };
        let mut field = LikelihoodField::constant(domain, n_grid, p, floor)?;
        field.training_points = log.len();
        return Ok(field);
    }
    let keep = reservoir(log.len(), config.max_training_points, config.subsample_seed);
    let samples = log.samples();
    let points: Vec<Vec<f64>> = keep.iter().map(|i| samples[*i].x.clone()).collect();
    let labels: Vec<bool> = keep.iter().map(|i| samples[*i].y).collect();
    let model = KernelLogisticModel::fit(points, &labels, config)?;
    let grid = Grid::over(domain, n_grid)?;
    let probs: Vec<f64> = model.latent_grid(&grid).into_iter().map(sigmoid).collect();
    let mut field = LikelihoodField::from_probability_grid(GridField::new(grid, probs)?, floor)?;
    field.training_points = model.training_points();
    Ok(field)
}

/// Target density proportional to the contact probability.
pub fn stage1_target(field: &LikelihoodField, basis: &Arc<Basis>) -> Result<TargetDistribution> {
    distribution_coefficients(basis, field.probability_grid())
}

/// Ground-truth contact probability: the fraction of each node's cell that
/// is occupied (sampled `supersample^v` times), mixed with the flip noise.
pub fn truth_field(
    scene: &Scene,
    transform: &SE2Transform,
    flip_noise: f64,
    nodes_per_axis: usize,
    supersample: usize,
    floor: f64,
) -> Result<LikelihoodField> {
    let grid = Grid::over(scene.domain(), nodes_per_axis)?;
    let dims = grid.dims();
    let m = supersample.max(1);
    let total = m.pow(dims as u32);
    let spacing: Vec<f64> = (0..dims).map(|a| grid.spacing(a)).collect();
    let lengths = grid.lengths().to_vec();
    let field = GridField::from_fn(grid, |node| {
        let mut hits = 0usize;
        let mut p = vec![0.0; dims];
        for k in 0..total {
            let mut rem = k;
            for a in 0..dims {
                let i = rem % m;
                rem /= m;
                let off = ((i as f64 + 0.5) / m as f64 - 0.5) * spacing[a];
                p[a] = (node[a] + off).clamp(0.0, lengths[a]);
            }
            if occupancy(scene, transform, &p) {
                hits += 1;
            }
        }
        let occ = hits as f64 / total as f64;
        flip_noise + (1.0 - 2.0 * flip_noise) * occ
    });
    LikelihoodField::from_probability_grid(field, floor)
}

/// Area under the ROC curve (Mann-Whitney statistic, ties count one half).
/// `None` when one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let n_pos = labels.iter().filter(|y| **y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            if labels[*k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of the field's grid values against ground-truth occupancy at the
/// same nodes.
pub fn field_auc(field: &LikelihoodField, scene: &Scene, transform: &SE2Transform) -> Option<f64> {
    let grid = field.grid();
    let mut s = vec![0.0; grid.dims()];
    let labels: Vec<bool> = (0..grid.len())
        .map(|j| {
            grid.node_into(j, &mut s);
            occupancy(scene, transform, &s)
        })
        .collect();
    let result = auc(field.probability_grid().values(), &labels);
    if result.is_none() {
        warn!("ground truth has a single class on the evaluation grid; AUC undefined");
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::SceneConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit() -> SearchDomain {
        SearchDomain::unit(2).unwrap()
    }

    #[test]
    fn all_negative_log_gives_floor_field() {
        let mut log = MeasurementLog::new();
        for i in 0..10 {
            log.push(i as f64, vec![0.1 * i as f64, 0.5], false);
        }
        let f = fit(&log, &unit(), &LikelihoodConfig::default()).unwrap();
        assert!(f.probability_grid().values().iter().all(|p| *p == 1e-3));
        let mut pos = MeasurementLog::new();
        pos.push(0.0, vec![0.5, 0.5], true);
        let g = fit(&pos, &unit(), &LikelihoodConfig::default()).unwrap();
        assert!(g.probability_grid().values().iter().all(|p| *p == 1.0 - 1e-3));
    }

    #[test]
    fn single_positive_is_local() {
        let mut log = MeasurementLog::new();
        log.push(0.0, vec![0.5, 0.5], true);
        for (i, p) in [[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.9], [0.5, 0.1], [0.1, 0.5]].iter().enumerate() {
            log.push(1.0 + i as f64, p.to_vec(), false);
        }
        let f = fit(&log, &unit(), &LikelihoodConfig::default()).unwrap();
        let (at, _) = f.query(&[0.5, 0.5]);
        let (far, _) = f.query(&[0.1, 0.1]);
        assert!(at > 0.5 && 0.5 > far, "{at} {far}");
    }

    #[test]
    fn latent_grid_matches_pointwise_latent() {
        let mut log = MeasurementLog::new();
        for i in 0..30 {
            let x = (i as f64 * 0.37).fract();
            let y = (i as f64 * 0.61).fract();
            log.push(i as f64, vec![x, y], (x - 0.5).abs() < 0.2);
        }
        let pts: Vec<Vec<f64>> = log.samples().iter().map(|m| m.x.clone()).collect();
        let labels: Vec<bool> = log.samples().iter().map(|m| m.y).collect();
        let model = KernelLogisticModel::fit(pts, &labels, &LikelihoodConfig::default()).unwrap();
        let grid = Grid::over(&unit(), 9).unwrap();
        let tab = model.latent_grid(&grid);
        for (j, v) in tab.iter().enumerate() {
            assert_abs_diff_eq!(*v, model.latent(&grid.node(j)), epsilon = 1e-9);
        }
    }

    #[test]
    fn newton_reaches_a_stationary_point() {
        // at the optimum the gradient K (t - pi) - f vanishes, i.e. f = K d
        let mut log = MeasurementLog::new();
        for i in 0..40 {
            let x = (i as f64 * 0.37).fract();
            let y = (i as f64 * 0.71).fract();
            log.push(i as f64, vec![x, y], x + y > 1.0);
        }
        let pts: Vec<Vec<f64>> = log.samples().iter().map(|m| m.x.clone()).collect();
        let labels: Vec<bool> = log.samples().iter().map(|m| m.y).collect();
        let model = KernelLogisticModel::fit(pts.clone(), &labels, &LikelihoodConfig::default()).unwrap();
        for (p, d) in pts.iter().zip(&model.dual) {
            let f = model.latent(p);
            let t = if labels[pts.iter().position(|q| q == p).unwrap()] { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(t - sigmoid(f), *d, epsilon = 1e-6);
        }
    }

    #[test]
    fn noiseless_scene_samples_are_separated() {
        let cfg = SceneConfig::default_three_objects();
        let scene = cfg.scene().unwrap();
        let id = SE2Transform::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut log = MeasurementLog::new();
        for i in 0..500 {
            let p = vec![rng.gen::<f64>(), rng.gen::<f64>()];
            let y = occupancy(&scene, &id, &p);
            log.push(i as f64, p, y);
        }
        let f = fit(&log, scene.domain(), &LikelihoodConfig::default()).unwrap();
        let a = field_auc(&f, &scene, &id).unwrap();
        assert!(a >= 0.95, "auc {a}");
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let f = LikelihoodField::constant(&unit(), 16, 0.3, 1e-3).unwrap();
        for p in [[0.0, 0.0], [0.3, 0.7], [1.0, 0.5]] {
            assert!(f.spatial_gradient(&p).0.iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn node_queries_are_exact() {
        let grid = Grid::over(&unit(), 64).unwrap();
        let field = GridField::from_fn(grid.clone(), |s| 0.2 + 0.5 * s[0] * s[1] + 0.1 * (7.0 * s[0]).sin().abs());
        let f = LikelihoodField::from_probability_grid(field, 1e-3).unwrap();
        for j in 0..grid.len() {
            let (p, flag) = f.query(&grid.node(j));
            assert!(!flag);
            assert_eq!(p, f.probability_grid().values()[j]);
        }
    }

    #[test]
    fn out_of_domain_queries_clamp_and_flag() {
        let f = LikelihoodField::constant(&unit(), 8, 0.3, 1e-3).unwrap();
        let (p, flag) = f.query(&[1.2, -0.1]);
        assert!(flag);
        assert_abs_diff_eq!(p, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn bump_gradient_matches_finer_grid() {
        let mut log = MeasurementLog::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..300 {
            let p = vec![rng.gen::<f64>(), rng.gen::<f64>()];
            let y = (p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2) < 0.15f64.powi(2);
            log.push(i as f64, p, y);
        }
        let cfg = LikelihoodConfig::default();
        let coarse = fit(&log, &unit(), &cfg).unwrap();
        let fine = fit(
            &log,
            &unit(),
            &LikelihoodConfig {
                grid_resolution: Some(4 * 63 + 1),
                ..cfg.clone()
            },
        )
        .unwrap();
        let mut worst = 0.0f64;
        for p in [[0.62, 0.5], [0.5, 0.38], [0.41, 0.59], [0.6, 0.6]] {
            let (g, _) = coarse.spatial_gradient(&p);
            let (o, _) = fine.spatial_gradient(&p);
            let rel = ((g[0] - o[0]).powi(2) + (g[1] - o[1]).powi(2)).sqrt() / (o[0].hypot(o[1]));
            worst = worst.max(rel);
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn stage1_target_of_floor_field_is_uniform() {
        let basis = Basis::new(unit());
        let f = LikelihoodField::constant(&unit(), 64, 1e-3, 1e-3).unwrap();
        let target = stage1_target(&f, &basis).unwrap();
        assert_abs_diff_eq!(target.phi()[0], 1.0, epsilon = 1e-12);
        assert!(target.phi()[1..].iter().all(|p| p.abs() < 1e-12));
        assert_abs_diff_eq!(target.density().integral(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn stage1_target_peaks_at_the_bump() {
        let basis = Basis::new(unit());
        let grid = Grid::over(&unit(), 64).unwrap();
        let bump = GridField::from_fn(grid, |s| 0.01 + (-((s[0] - 0.3).powi(2) + (s[1] - 0.7).powi(2)) / 0.005).exp());
        let f = LikelihoodField::from_probability_grid(bump, 1e-3).unwrap();
        let target = stage1_target(&f, &basis).unwrap();
        let d = target.density();
        let best = (0..d.values().len()).max_by(|a, b| d.values()[*a].total_cmp(&d.values()[*b])).unwrap();
        let node = d.grid().node(best);
        assert!((node[0] - 0.3).abs() < 0.02 && (node[1] - 0.7).abs() < 0.02);
        assert_abs_diff_eq!(d.integral(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn truth_field_marks_objects() {
        let cfg = SceneConfig::default_three_objects();
        let scene = cfg.scene().unwrap();
        let f = truth_field(&scene, &SE2Transform::identity(), 0.05, 64, 4, 1e-3).unwrap();
        assert_abs_diff_eq!(f.query(&[0.25, 0.7]).0, 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(f.query(&[0.02, 0.02]).0, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(field_auc(&f, &scene, &SE2Transform::identity()).unwrap(), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn auc_reference_values() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auc(&[0.5, 0.5], &[true, true]), None);
        // one inversion out of four pairs
        assert_eq!(auc(&[0.1, 0.6, 0.5, 0.9], &[false, false, true, true]), Some(0.75));
    }

    #[test]
    fn reservoir_is_deterministic_and_bounded() {
        assert_eq!(reservoir(5, 10, 0), vec![0, 1, 2, 3, 4]);
        let a = reservoir(1000, 100, 4);
        assert_eq!(a, reservoir(1000, 100, 4));
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn measurement_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MeasurementLog::new();
        log.push(0.1, vec![0.3, 1.0 / 3.0], true);
        log.push(0.2, vec![0.35, 0.4], false);
        log.write_csv(&path).unwrap();
        assert_eq!(MeasurementLog::read_csv(&path).unwrap(), log);
    }

    #[test]
    fn field_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let grid = Grid::over(&unit(), 5).unwrap();
        let f = LikelihoodField::from_probability_grid(GridField::from_fn(grid, |s| 0.1 + 0.3 * s[0]), 1e-3).unwrap();
        f.write_csv(&path).unwrap();
        let back = LikelihoodField::read_csv(&path, 1e-3).unwrap();
        assert_eq!(back.probability_grid(), f.probability_grid());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn probabilities_respect_the_floor_and_refits_are_bitwise(seed in 0u64..1000, n in 2usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut log = MeasurementLog::new();
            for i in 0..n {
                let p = vec![rng.gen::<f64>(), rng.gen::<f64>()];
                let y = rng.gen::<f64>() < 0.3;
                log.push(i as f64, p, y);
            }
            let cfg = LikelihoodConfig { grid_resolution: Some(16), ..Default::default() };
            let a = fit(&log, &unit(), &cfg).unwrap();
            let b = fit(&log, &unit(), &cfg).unwrap();
            prop_assert_eq!(a.probability_grid(), b.probability_grid());
            prop_assert!(a.probability_grid().values().iter().all(|p| (1e-3..=1.0 - 1e-3).contains(p)));
        }
    }
}
