//! Control-affine robot models `xdot = g(x) + h(x) u` and fixed-step RK4
//! rollouts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::domain::{format_f64, write_file};
use crate::error::{Error, Result};

pub trait ControlAffineModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    /// State components that live in the search space (`x_v`).
    fn v_indices(&self) -> &[usize];

    /// Free response `g(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Input map `h(x)`, `n x m`.
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn control_lower(&self) -> &DVector<f64>;

    fn control_upper(&self) -> &DVector<f64>;

    /// `(df/dx, df/du)` at `(x, u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_map(x) * u
    }

    /// Component-wise clip into the control box.
    fn saturate(&self, u: &DVector<f64>) -> DVector<f64> {
        let lo = self.control_lower();
        let hi = self.control_upper();
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, ui)| ui.clamp(lo[i], hi[i])))
    }
}

/// Point mass with direct acceleration control in `v` axes. State layout is
/// positions followed by velocities.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    v: usize,
    v_indices: Vec<usize>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

pub const DEFAULT_ACCEL_LIMIT: f64 = 10.0;

impl DoubleIntegrator {
    pub fn new(v: usize, accel_limit: f64) -> Result<Self> {
        if !(2..=3).contains(&v) {
            return Err(Error::InvalidConfig(format!(
                "double integrator supports 2 or 3 axes, got {v}"
            )));
        }
        if !(accel_limit > 0.0) {
            return Err(Error::InvalidConfig("acceleration limit must be positive".into()));
        }
        Ok(Self {
            v,
            v_indices: (0..v).collect(),
            lower: DVector::from_element(v, -accel_limit),
            upper: DVector::from_element(v, accel_limit),
        })
    }

    pub fn axes(&self) -> usize {
        self.v
    }
}

/// Double integrator in `v` dimensions with the default saturation.
pub fn double_integrator(v: usize) -> Result<DoubleIntegrator> {
    DoubleIntegrator::new(v, DEFAULT_ACCEL_LIMIT)
}

impl ControlAffineModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2 * self.v
    }

    fn control_dim(&self) -> usize {
        self.v
    }

    fn v_indices(&self) -> &[usize] {
        &self.v_indices
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(2 * self.v);
        for i in 0..self.v {
            out[i] = x[self.v + i];
        }
        out
    }

    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(2 * self.v, self.v);
        for i in 0..self.v {
            h[(self.v + i, i)] = 1.0;
        }
        h
    }

    fn control_lower(&self) -> &DVector<f64> {
        &self.lower
    }

    fn control_upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn jacobians(&self, x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = DMatrix::zeros(2 * self.v, 2 * self.v);
        for i in 0..self.v {
            a[(i, self.v + i)] = 1.0;
        }
        (a, self.input_map(x))
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(2 * self.v);
        for i in 0..self.v {
            out[i] = x[self.v + i];
            out[self.v + i] = u[i];
        }
        out
    }
}

/// Timestamped states and the controls applied at each sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            controls: Vec::with_capacity(n),
        }
    }

    /// Appends a sample. Times must be strictly increasing.
    pub fn push(&mut self, t: f64, x: DVector<f64>, u: DVector<f64>) {
        debug_assert!(self.times.last().map_or(true, |last| t > *last));
        self.times.push(t);
        self.states.push(x);
        self.controls.push(u);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.controls
    }

    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn last_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    pub fn project_into(&self, j: usize, v_indices: &[usize], out: &mut [f64]) {
        for (o, i) in out.iter_mut().zip(v_indices) {
            *o = self.states[j][*i];
        }
    }

    pub fn project(&self, j: usize, v_indices: &[usize]) -> Vec<f64> {
        v_indices.iter().map(|i| self.states[j][*i]).collect()
    }

    /// Index of the first sample with `t >= t0`.
    pub fn first_at_or_after(&self, t0: f64) -> usize {
        self.times.partition_point(|t| *t < t0)
    }

    /// Verifies equal lengths and strictly increasing times.
    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.times.len() || self.controls.len() != self.times.len() {
            return Err(Error::InvalidConfig("trajectory columns differ in length".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("trajectory times must increase strictly".into()));
        }
        Ok(())
    }

    /// Rows `t, x_1..x_n, u_1..u_m`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut out = String::with_capacity(self.len() * 64);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for j in 0..self.len() {
            out.push_str(&format_f64(self.times[j]));
            for v in self.states[j].iter().chain(self.controls[j].iter()) {
                out.push(',');
                out.push_str(&format_f64(*v));
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("trajectory", path, "missing header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        let mut traj = Trajectory::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("trajectory", path, e.to_string()))?;
            if vals.len() != 1 + n + m {
                return Err(Error::parse("trajectory", path, "row width differs from header"));
            }
            traj.times.push(vals[0]);
            traj.states.push(DVector::from_column_slice(&vals[1..1 + n]));
            traj.controls.push(DVector::from_column_slice(&vals[1 + n..]));
        }
        traj.validate()
            .map_err(|e| Error::parse("trajectory", path, e.to_string()))?;
        Ok(traj)
    }
}

/// One classical RK4 step with the control sampled at the stage times.
pub(crate) fn rk4_step<M: ControlAffineModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    t: f64,
    h: f64,
    control: &dyn Fn(f64) -> DVector<f64>,
) -> DVector<f64> {
    let u0 = control(t);
    let um = control(t + 0.5 * h);
    let u1 = control(t + h);
    let k1 = model.f(x, &u0);
    let k2 = model.f(&(x + &k1 * (0.5 * h)), &um);
    let k3 = model.f(&(x + &k2 * (0.5 * h)), &um);
    let k4 = model.f(&(x + &k3 * h), &u1);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    if !(horizon >= dt * (1.0 - 1e-9)) {
        return Err(Error::InvalidConfig(format!(
            "horizon {horizon} shorter than step {dt}"
        )));
    }
    Ok((horizon / dt).round() as usize)
}

/// Fixed-step RK4 rollout over `[t0, t0 + horizon]`, sampled every `dt`.
pub fn integrate<M: ControlAffineModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    control: &dyn Fn(f64) -> DVector<f64>,
    t0: f64,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    let steps = step_count(horizon, dt)?;
    check_state_dim(model, x0)?;
    let mut traj = Trajectory::with_capacity(steps + 1);
    let mut x = x0.clone();
    for j in 0..steps {
        let t = t0 + j as f64 * dt;
        let next = rk4_step(model, &x, t, dt, control);
        traj.push(t, x, control(t));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup { t: t + dt });
        }
        x = next;
    }
    let t_end = t0 + steps as f64 * dt;
    traj.push(t_end, x, control(t_end));
    Ok(traj)
}

fn check_state_dim<M: ControlAffineModel + ?Sized>(model: &M, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.state_dim(),
            got: x0.len(),
        });
    }
    Ok(())
}

/// Piecewise-constant control: a default value overridden on half-open
/// windows `[start, end)`. Later windows take precedence.
#[derive(Debug, Clone)]
pub struct ControlSchedule {
    pub default: DVector<f64>,
    pub windows: Vec<(f64, f64, DVector<f64>)>,
}

impl ControlSchedule {
    pub fn constant(u: DVector<f64>) -> Self {
        Self {
            default: u,
            windows: Vec::new(),
        }
    }

    pub fn with_window(mut self, start: f64, end: f64, u: DVector<f64>) -> Self {
        if end > start {
            self.windows.push((start, end, u));
        }
        self
    }

    pub fn at(&self, t: f64) -> &DVector<f64> {
        self.windows
            .iter()
            .rev()
            .find(|(a, b, _)| t >= *a && t < *b)
            .map(|(_, _, u)| u)
            .unwrap_or(&self.default)
    }

    fn breakpoints_within(&self, a: f64, b: f64, out: &mut Vec<f64>) {
        out.clear();
        for (s, e, _) in &self.windows {
            for p in [*s, *e] {
                if p > a && p < b {
                    out.push(p);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
    }
}

/// RK4 rollout under a piecewise-constant schedule. Steps that straddle a
/// switching time are split there so the switch is resolved exactly;
/// samples stay on the `dt` lattice.
pub fn integrate_schedule<M: ControlAffineModel + ?Sized>(
    model: &M,
    x0: &DVector<f64>,
    schedule: &ControlSchedule,
    t0: f64,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    let steps = step_count(horizon, dt)?;
    check_state_dim(model, x0)?;
    let mut traj = Trajectory::with_capacity(steps + 1);
    let mut x = x0.clone();
    let mut cuts = Vec::new();
    for j in 0..steps {
        let t = t0 + j as f64 * dt;
        let t_next = t + dt;
        schedule.breakpoints_within(t, t_next, &mut cuts);
        let next = if cuts.is_empty() {
            let u = schedule.at(t).clone();
            rk4_step(model, &x, t, dt, &|_| u.clone())
        } else {
            let mut next = x.clone();
            let mut a = t;
            for b in cuts.iter().copied().chain(std::iter::once(t_next)) {
                let u = schedule.at(a).clone();
                next = rk4_step(model, &next, a, b - a, &|_| u.clone());
                a = b;
            }
            next
        };
        traj.push(t, x, schedule.at(t).clone());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup { t: t_next });
        }
        x = next;
    }
    let t_end = t0 + steps as f64 * dt;
    traj.push(t_end, x, schedule.at(t_end).clone());
    Ok(traj)
}
