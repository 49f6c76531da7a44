//! Receding-horizon, single-action ergodic control.
//!
//! Each invocation predicts the state under the default control, computes
//! the adjoint of the ergodic metric along that prediction, picks the
//! insertion time where the mode insertion gradient is most negative, and
//! line-searches the duration of a saturated action there.

use std::path::Path;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{
    accumulate_left_riemann, metric_unchecked, Basis, CoefficientAccumulator, SpectralCoefficients,
    TargetDistribution,
};
use crate::domain::{format_f64, write_file};
use crate::dynamics::{integrate, integrate_schedule, ControlAffineModel, ControlSchedule, Trajectory};
use crate::error::{Error, Result};

const SINGULAR_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicControllerConfig {
    /// Prediction horizon `T` (s).
    pub horizon: f64,
    pub dt: f64,
    /// Metric weight `q`.
    pub q: f64,
    /// Control weight `R`; `None` means `r_scale * I`.
    pub r_matrix: Option<Vec<Vec<f64>>>,
    pub r_scale: f64,
    /// Aggressiveness `alpha_d`, strictly negative.
    pub alpha_d: f64,
    /// Default control `u_def`; `None` is zero.
    pub u_default: Option<Vec<f64>>,
    /// Trailing history window `dt_E` (s); `None` keeps the full history.
    pub history_window: Option<f64>,
    /// First trial duration as a fraction of the horizon.
    pub initial_lambda_fraction: f64,
    pub line_search_shrink: f64,
    pub line_search_max_iter: usize,
    pub lambda_min: f64,
}

impl Default for ErgodicControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            dt: 0.01,
            q: 1.0,
            r_matrix: None,
            r_scale: 0.01,
            alpha_d: -20.0,
            u_default: None,
            history_window: None,
            initial_lambda_fraction: 0.25,
            line_search_shrink: 0.5,
            line_search_max_iter: 6,
            lambda_min: 0.005,
        }
    }
}

impl ErgodicControllerConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return bad(format!("controller dt must lie in (0, T], got {}", self.dt));
        }
        if !(self.q >= 0.0) {
            return bad("metric weight q must be nonnegative".into());
        }
        if !(self.alpha_d < 0.0) {
            return bad(format!("alpha_d must be negative, got {}", self.alpha_d));
        }
        if let Some(w) = self.history_window {
            if !(w >= 0.0) {
                return bad("history window must be nonnegative".into());
            }
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return bad("line-search shrink factor must lie in (0, 1)".into());
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.horizon) {
            return bad("lambda_min must lie in (0, T]".into());
        }
        if let Some(u) = &self.u_default {
            if u.len() != m {
                return bad(format!("u_default has {} entries, model has {m} inputs", u.len()));
            }
        }
        let r = self.r(m)?;
        if (&r - r.transpose()).amax() > 1e-12 {
            return bad("R must be symmetric".into());
        }
        if r.clone().cholesky().is_none() {
            return bad("R must be positive definite".into());
        }
        Ok(())
    }

    pub fn r(&self, m: usize) -> Result<DMatrix<f64>> {
        match &self.r_matrix {
            None => Ok(DMatrix::identity(m, m) * self.r_scale),
            Some(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                    return Err(Error::InvalidConfig(format!("R must be {m}x{m}")));
                }
                Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
            }
        }
    }

    pub fn u_def(&self, m: usize) -> DVector<f64> {
        match &self.u_default {
            Some(u) => DVector::from_column_slice(u),
            None => DVector::zeros(m),
        }
    }
}

/// Action `u*` to apply on `[tau, tau + lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction {
    pub u_star: DVector<f64>,
    pub tau: f64,
    pub lambda: f64,
    /// Mode insertion gradient at `tau` (before saturation).
    pub insertion_gradient: f64,
    pub metric_before: f64,
    pub metric_after: f64,
    /// False when the line search fell back to the default control.
    pub accepted: bool,
}

impl ControlAction {
    /// Control in effect at time `t`, falling back to `u_def` outside the
    /// application window.
    pub fn control_at<'a>(&'a self, t: f64, u_def: &'a DVector<f64>) -> &'a DVector<f64> {
        if t >= self.tau && t < self.tau + self.lambda {
            &self.u_star
        } else {
            u_def
        }
    }
}

/// Open-loop rollout under the default control.
pub fn simulate_forward<M: ControlAffineModel + ?Sized>(
    model: &M,
    x_i: &DVector<f64>,
    t_i: f64,
    horizon: f64,
    dt: f64,
    u_def: &DVector<f64>,
) -> Result<Trajectory> {
    integrate(model, x_i, &|_| u_def.clone(), t_i, horizon, dt)
}

/// Accumulated statistics of the history strictly before `t_now`,
/// restricted to the trailing `window` seconds when given.
pub fn history_accumulator(
    basis: &Arc<Basis>,
    v_indices: &[usize],
    history: &Trajectory,
    t_now: f64,
    window: Option<f64>,
) -> CoefficientAccumulator {
    let mut acc = CoefficientAccumulator::new(basis.clone());
    if history.is_empty() {
        return acc;
    }
    let start = match window {
        Some(w) => history.first_at_or_after(t_now - w),
        None => 0,
    };
    let end = history.first_at_or_after(t_now);
    if start < end {
        accumulate_left_riemann(&mut acc, history, v_indices, start..end, t_now);
    }
    acc
}

/// `c_k` over the trailing history window concatenated with a prediction,
/// normalized by the combined duration. The duration is returned alongside
/// since it normalizes the adjoint forcing too.
pub fn blended_coefficients(
    basis: &Arc<Basis>,
    v_indices: &[usize],
    history: &Trajectory,
    predicted: &Trajectory,
    window: Option<f64>,
) -> Result<(SpectralCoefficients, f64)> {
    if predicted.is_empty() && history.is_empty() {
        return Err(Error::Empty("history and prediction"));
    }
    let t_now = predicted
        .times()
        .first()
        .copied()
        .unwrap_or_else(|| history.times().last().copied().unwrap_or(0.0) + f64::EPSILON);
    let mut acc = history_accumulator(basis, v_indices, history, t_now, window);
    add_prediction(&mut acc, predicted, v_indices);
    if acc.duration() <= 0.0 {
        // a lone sample with no duration behind it is a Dirac average
        let mut dirac = CoefficientAccumulator::new(basis.clone());
        let traj = if predicted.is_empty() { history } else { predicted };
        dirac.add(&traj.project(0, v_indices), 1.0);
        return Ok((dirac.finish()?, 0.0));
    }
    let duration = acc.duration();
    Ok((acc.finish()?, duration))
}

fn add_prediction(acc: &mut CoefficientAccumulator, predicted: &Trajectory, v_indices: &[usize]) {
    if predicted.len() > 1 {
        let end = *predicted.times().last().unwrap();
        accumulate_left_riemann(acc, predicted, v_indices, 0..predicted.len(), end);
    }
}

/// Costate along `predicted`, integrated backward with RK4 from
/// `rho(t_i + T) = 0`:
///
/// ```text
/// rho' = -(2q / T) sum_k Lambda_k (c_k - phi_k) dF_k/dx - (df/dx)^T rho
/// ```
///
/// `normalizer` is the duration the coefficients were averaged over.
/// Intermediate RK4 stages interpolate the state linearly between samples.
pub fn adjoint_backward<M: ControlAffineModel + ?Sized>(
    model: &M,
    predicted: &Trajectory,
    coeffs: &SpectralCoefficients,
    target: &TargetDistribution,
    q: f64,
    normalizer: f64,
) -> Result<Vec<DVector<f64>>> {
    let basis = coeffs.basis();
    if coeffs.values().len() != target.phi().len() || basis.domain() != target.basis().domain() {
        return Err(Error::IndexSetMismatch(coeffs.values().len(), target.phi().len()));
    }
    if !(normalizer > 0.0) {
        return Err(Error::ZeroDuration);
    }
    let n = model.state_dim();
    let npts = predicted.len();
    if npts == 0 {
        return Err(Error::Empty("predicted trajectory"));
    }
    let v_idx = model.v_indices().to_vec();
    let weights: Vec<f64> = basis
        .lambda()
        .iter()
        .zip(coeffs.values())
        .zip(target.phi())
        .map(|((l, c), p)| l * (c - p))
        .collect();
    let scale = 2.0 * q / normalizer;
    let nb = basis.len();
    let v = v_idx.len();
    let mut vals = vec![0.0; nb];
    let mut grads = vec![0.0; nb * v];
    let mut point = vec![0.0; v];

    let mut forcing = |x: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(n);
        if scale == 0.0 {
            return out;
        }
        for (p, i) in point.iter_mut().zip(&v_idx) {
            *p = x[*i];
        }
        basis.eval_with_grad_into(&point, &mut vals, &mut grads);
        for (d, i) in v_idx.iter().enumerate() {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += w * grads[k * v + d];
            }
            out[*i] = scale * acc;
        }
        out
    };

    let times = predicted.times();
    let states = predicted.states();
    let controls = predicted.controls();
    let mut rho = vec![DVector::zeros(n); npts];
    let mut end_force = forcing(&states[npts - 1]);
    let mut end_a = model.jacobians(&states[npts - 1], &controls[npts - 1]).0;
    for j in (0..npts - 1).rev() {
        let h = times[j + 1] - times[j];
        let x_mid = (&states[j] + &states[j + 1]) * 0.5;
        let mid_force = forcing(&x_mid);
        let mid_a = model.jacobians(&x_mid, &controls[j]).0;
        let start_force = forcing(&states[j]);
        let start_a = model.jacobians(&states[j], &controls[j]).0;
        let g = |force: &DVector<f64>, a: &DMatrix<f64>, r: &DVector<f64>| -> DVector<f64> {
            -force - a.tr_mul(r)
        };
        let r1 = &rho[j + 1];
        let k1 = g(&end_force, &end_a, r1);
        let k2 = g(&mid_force, &mid_a, &(r1 - &k1 * (0.5 * h)));
        let k3 = g(&mid_force, &mid_a, &(r1 - &k2 * (0.5 * h)));
        let k4 = g(&start_force, &start_a, &(r1 - &k3 * h));
        let next = r1 - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericBlowup { t: times[j] });
        }
        rho[j] = next;
        end_force = start_force;
        end_a = start_a;
    }
    Ok(rho)
}

/// `u* = (Omega + R^T)^-1 [Omega u_def + h^T rho alpha_d]`,
/// `Omega = h^T rho rho^T h`.
pub fn optimal_control(
    h_t_rho: &DVector<f64>,
    r: &DMatrix<f64>,
    u_def: &DVector<f64>,
    alpha_d: f64,
) -> DVector<f64> {
    let omega = h_t_rho * h_t_rho.transpose();
    let lhs = &omega + r.transpose();
    let rhs = &omega * u_def + h_t_rho * alpha_d;
    match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            warn!("control law matrix is singular; regularizing with {SINGULAR_REGULARIZATION}*I");
            let m = lhs.nrows();
            let reg = lhs + DMatrix::identity(m, m) * SINGULAR_REGULARIZATION;
            reg.lu().solve(&rhs).unwrap_or_else(|| u_def.clone())
        }
    }
}

/// Everything computed along the horizon for one controller invocation.
#[derive(Debug, Clone)]
pub struct HorizonPlan {
    pub predicted: Trajectory,
    pub coeffs: SpectralCoefficients,
    pub duration: f64,
    pub metric: f64,
    pub rho: Vec<DVector<f64>>,
    /// Unsaturated `u*(t_j)` at every prediction sample.
    pub u_star: Vec<DVector<f64>>,
    /// Mode insertion gradient `rho^T (f(x, u*) - f(x, u_def))` per sample.
    pub insertion_gradient: Vec<f64>,
}

fn metric_of<M: ControlAffineModel + ?Sized>(
    model: &M,
    history: &CoefficientAccumulator,
    traj: &Trajectory,
    target: &TargetDistribution,
    q: f64,
) -> Result<(SpectralCoefficients, f64, f64)> {
    let mut acc = history.clone();
    add_prediction(&mut acc, traj, model.v_indices());
    let duration = acc.duration();
    let coeffs = acc.finish()?;
    let e = metric_unchecked(target.basis().lambda(), coeffs.values(), target.phi(), q);
    Ok((coeffs, duration, e))
}

/// Ergodic metric of `history` followed by `traj`.
pub fn horizon_metric<M: ControlAffineModel + ?Sized>(
    model: &M,
    history: &CoefficientAccumulator,
    traj: &Trajectory,
    target: &TargetDistribution,
    q: f64,
) -> Result<f64> {
    metric_of(model, history, traj, target, q).map(|(_, _, e)| e)
}

/// Steps 2-4 of the controller: prediction, blended coefficients, adjoint
/// and the pointwise optimal action with its insertion gradient.
pub fn plan_horizon<M: ControlAffineModel + ?Sized>(
    model: &M,
    config: &ErgodicControllerConfig,
    x_i: &DVector<f64>,
    t_i: f64,
    history: &CoefficientAccumulator,
    target: &TargetDistribution,
) -> Result<HorizonPlan> {
    let m = model.control_dim();
    let u_def = config.u_def(m);
    let r = config.r(m)?;
    let predicted = simulate_forward(model, x_i, t_i, config.horizon, config.dt, &u_def)?;
    let (coeffs, duration, metric) = metric_of(model, history, &predicted, target, config.q)?;
    let rho = adjoint_backward(model, &predicted, &coeffs, target, config.q, duration)?;
    let mut u_star = Vec::with_capacity(predicted.len());
    let mut gradient = Vec::with_capacity(predicted.len());
    for (j, x) in predicted.states().iter().enumerate() {
        let h = model.input_map(x);
        let h_t_rho = h.tr_mul(&rho[j]);
        let u = optimal_control(&h_t_rho, &r, &u_def, config.alpha_d);
        let df = model.f(x, &u) - model.f(x, &u_def);
        gradient.push(rho[j].dot(&df));
        u_star.push(u);
    }
    Ok(HorizonPlan {
        predicted,
        coeffs,
        duration,
        metric,
        rho,
        u_star,
        insertion_gradient: gradient,
    })
}

/// Index of the smallest insertion gradient; ties go to the earliest.
pub fn argmin_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = j;
        }
    }
    best
}

/// One full controller invocation.
pub fn compute_action<M: ControlAffineModel + ?Sized>(
    model: &M,
    config: &ErgodicControllerConfig,
    x_i: &DVector<f64>,
    t_i: f64,
    history: &CoefficientAccumulator,
    target: &TargetDistribution,
) -> Result<ControlAction> {
    let plan = plan_horizon(model, config, x_i, t_i, history, target)?;
    let u_def = config.u_def(model.control_dim());
    let j = argmin_earliest(&plan.insertion_gradient);
    let tau = plan.predicted.times()[j];
    let u_sat = model.saturate(&plan.u_star[j]);
    let e0 = plan.metric;

    let mut lambda = config.initial_lambda_fraction * config.horizon;
    let mut iter = 0;
    while lambda >= config.lambda_min && iter < config.line_search_max_iter {
        let schedule = ControlSchedule::constant(u_def.clone()).with_window(tau, tau + lambda, u_sat.clone());
        let traj = integrate_schedule(model, x_i, &schedule, t_i, config.horizon, config.dt)?;
        let e = horizon_metric(model, history, &traj, target, config.q)?;
        if e < e0 {
            return Ok(ControlAction {
                u_star: u_sat,
                tau,
                lambda,
                insertion_gradient: plan.insertion_gradient[j],
                metric_before: e0,
                metric_after: e,
                accepted: true,
            });
        }
        lambda *= config.line_search_shrink;
        iter += 1;
    }
    Ok(ControlAction {
        u_star: u_def,
        tau,
        lambda: config.lambda_min,
        insertion_gradient: plan.insertion_gradient[j],
        metric_before: e0,
        metric_after: e0,
        accepted: false,
    })
}

/// One row of the per-replan controller log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogRow {
    pub t: f64,
    pub tau: f64,
    pub lambda: f64,
    pub u_star: Vec<f64>,
    pub metric: f64,
}

pub fn write_step_log(path: &Path, rows: &[StepLogRow]) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.u_star.len());
    let mut out = String::new();
    let mut header = vec!["t".to_string(), "tau".into(), "lambda".into()];
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("metric".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let mut fields = vec![format_f64(r.t), format_f64(r.tau), format_f64(r.lambda)];
        fields.extend(r.u_star.iter().map(|u| format_f64(*u)));
        fields.push(format_f64(r.metric));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Reads a log written by [`write_step_log`]; `m` is the control dimension.
pub fn read_step_log(path: &Path, m: usize) -> Result<Vec<StepLogRow>> {
    let rows = crate::filter::read_numeric_rows(path, "controller log", 4 + m)?;
    Ok(rows
        .into_iter()
        .map(|r| StepLogRow {
            t: r[0],
            tau: r[1],
            lambda: r[2],
            u_star: r[3..3 + m].to_vec(),
            metric: r[3 + m],
        })
        .collect())
}
