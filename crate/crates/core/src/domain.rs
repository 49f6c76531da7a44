//! Search-space geometry and the cosine spectral machinery behind the
//! ergodic metric.
//!
//! The search space is the box `[0, L_1] x ... x [0, L_v]`. Spatial
//! statistics are compared through their projections onto the cosine basis
//!
//! ```text
//! F_k(s) = (1 / h_k) * prod_i cos(k_i * pi * s_i / L_i)
//! ```
//!
//! over the full index lattice `{0..K}^v`, with `h_k` chosen so that every
//! `F_k` has unit L2 norm on the domain.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// Rectangular exploration domain `[0, L_1] x ... x [0, L_v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDomain {
    lengths: Vec<f64>,
    k_max: usize,
}

impl SearchDomain {
    pub fn new(lengths: Vec<f64>, k_max: usize) -> Result<Self> {
        if !(2..=3).contains(&lengths.len()) {
            return Err(Error::InvalidConfig(format!(
                "search domain must have 2 or 3 axes, got {}",
                lengths.len()
            )));
        }
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "domain lengths must be positive, got {lengths:?}"
            )));
        }
        Ok(Self { lengths, k_max })
    }

    /// Unit box with the default coefficient count for its dimension.
    pub fn unit(dims: usize) -> Result<Self> {
        Self::new(vec![1.0; dims], default_k_max(dims))
    }

    pub fn dims(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Size of the index lattice, `(K + 1)^v`.
    pub fn num_coefficients(&self) -> usize {
        (self.k_max + 1).pow(self.dims() as u32)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lengths.iter().map(|l| 0.5 * l).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.len() == self.dims()
            && s.iter()
                .zip(&self.lengths)
                .all(|(x, l)| *x >= 0.0 && *x <= *l)
    }

    pub fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: s.len(),
            });
        }
        if !self.contains(s) {
            return Err(Error::DomainViolation {
                point: s.to_vec(),
                lengths: self.lengths.clone(),
            });
        }
        Ok(())
    }

    /// Clamps `s` into the domain; the flag reports whether anything moved.
    pub fn clamp(&self, s: &[f64]) -> (Vec<f64>, bool) {
        let mut moved = false;
        let out = s
            .iter()
            .zip(&self.lengths)
            .map(|(x, l)| {
                let c = x.clamp(0.0, *l);
                moved |= c != *x;
                c
            })
            .collect();
        (out, moved)
    }

    /// Default quadrature nodes per axis.
    pub fn default_grid_resolution(&self) -> usize {
        if self.dims() == 2 {
            64
        } else {
            32
        }
    }
}

pub fn default_k_max(dims: usize) -> usize {
    if dims <= 2 {
        10
    } else {
        6
    }
}

/// Multi-index `k` of one basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BasisIndex(pub Vec<usize>);

impl BasisIndex {
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|k| (k * k) as f64).sum()
    }
}

/// Precomputed index lattice, frequency weights `Lambda_k` and normalizers
/// `h_k` for one domain. Shared between coefficient vectors so that
/// index-set agreement can be checked by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    domain: SearchDomain,
    indices: Vec<BasisIndex>,
    lambda: Vec<f64>,
    h: Vec<f64>,
}

impl Basis {
    pub fn new(domain: SearchDomain) -> Arc<Self> {
        let v = domain.dims();
        let kk = domain.k_max + 1;
        let count = domain.num_coefficients();
        let mut indices = Vec::with_capacity(count);
        for flat in 0..count {
            // axis 0 varies slowest
            let mut rem = flat;
            let mut k = vec![0; v];
            for i in (0..v).rev() {
                k[i] = rem % kk;
                rem /= kk;
            }
            indices.push(BasisIndex(k));
        }
        let exponent = -((v as f64) + 1.0) / 2.0;
        let lambda = indices
            .iter()
            .map(|k| (1.0 + k.norm_sq()).powf(exponent))
            .collect();
        let h = indices
            .iter()
            .map(|k| {
                k.0.iter()
                    .zip(&domain.lengths)
                    .map(|(ki, l)| if *ki == 0 { *l } else { 0.5 * l })
                    .product::<f64>()
                    .sqrt()
            })
            .collect();
        Arc::new(Self {
            domain,
            indices,
            lambda,
            h,
        })
    }

    pub fn domain(&self) -> &SearchDomain {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[BasisIndex] {
        &self.indices
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn position(&self, k: &BasisIndex) -> Option<usize> {
        self.indices.iter().position(|x| x == k)
    }

    fn same_lattice(&self, other: &Basis) -> bool {
        std::ptr::eq(self, other) || (self.domain == other.domain)
    }

    fn axis_tables(&self, s: &[f64], cos: &mut [f64], sin: Option<&mut [f64]>) {
        let kk = self.domain.k_max + 1;
        let mut sin = sin;
        for (i, (x, l)) in s.iter().zip(&self.domain.lengths).enumerate() {
            let w = PI * x / l;
            for k in 0..kk {
                let arg = k as f64 * w;
                cos[i * kk + k] = arg.cos();
                if let Some(sn) = sin.as_deref_mut() {
                    sn[i * kk + k] = arg.sin();
                }
            }
        }
    }

    /// Evaluates every basis function at `s` without a domain check. The
    /// cosine family extends evenly past the boundary, which is what
    /// predicted trajectories that graze the walls need.
    pub fn eval_into(&self, s: &[f64], out: &mut [f64]) {
        let v = self.domain.dims();
        let kk = self.domain.k_max + 1;
        let mut cos = [0.0; 3 * 32];
        let cos = &mut cos[..v * kk.min(32)];
        debug_assert!(kk <= 32, "k_max above 31 is not supported");
        self.axis_tables(s, cos, None);
        for (j, k) in self.indices.iter().enumerate() {
            let mut p = 1.0 / self.h[j];
            for (i, ki) in k.0.iter().enumerate() {
                p *= cos[i * kk + ki];
            }
            out[j] = p;
        }
    }

    /// Values and spatial gradients of every basis function at `s`.
    /// `grads` is laid out `[coefficient][axis]`.
    pub fn eval_with_grad_into(&self, s: &[f64], vals: &mut [f64], grads: &mut [f64]) {
        let v = self.domain.dims();
        let kk = self.domain.k_max + 1;
        let mut cos = [0.0; 3 * 32];
        let mut sin = [0.0; 3 * 32];
        let cos = &mut cos[..v * kk];
        let sin = &mut sin[..v * kk];
        self.axis_tables(s, cos, Some(sin));
        for (j, k) in self.indices.iter().enumerate() {
            let inv_h = 1.0 / self.h[j];
            let mut p = inv_h;
            for (i, ki) in k.0.iter().enumerate() {
                p *= cos[i * kk + ki];
            }
            vals[j] = p;
            for d in 0..v {
                let kd = k.0[d];
                let mut g = -inv_h * (kd as f64) * PI / self.domain.lengths[d] * sin[d * kk + kd];
                for (i, ki) in k.0.iter().enumerate() {
                    if i != d {
                        g *= cos[i * kk + ki];
                    }
                }
                grads[j * v + d] = g;
            }
        }
    }

    pub fn eval(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(s, &mut out);
        out
    }
}

/// `F_k(s)` for a single index, with the domain precondition enforced.
pub fn basis_eval(domain: &SearchDomain, k: &BasisIndex, s: &[f64]) -> Result<f64> {
    domain.check(s)?;
    if k.0.len() != domain.dims() {
        return Err(Error::DimensionMismatch {
            expected: domain.dims(),
            got: k.0.len(),
        });
    }
    if k.0.iter().any(|ki| *ki > domain.k_max()) {
        return Err(Error::InvalidConfig(format!(
            "basis index {:?} exceeds K = {}",
            k.0,
            domain.k_max()
        )));
    }
    let mut value = 1.0;
    let mut h2 = 1.0;
    for ((ki, x), l) in k.0.iter().zip(s).zip(domain.lengths()) {
        value *= (*ki as f64 * PI * x / l).cos();
        h2 *= if *ki == 0 { *l } else { 0.5 * l };
    }
    Ok(value / h2.sqrt())
}

/// Fourier coefficients `c_k` of a trajectory's time-averaged statistics.
#[derive(Debug, Clone)]
pub struct SpectralCoefficients {
    basis: Arc<Basis>,
    values: Vec<f64>,
}

impl SpectralCoefficients {
    pub fn new(basis: Arc<Basis>, values: Vec<f64>) -> Result<Self> {
        if values.len() != basis.len() {
            return Err(Error::IndexSetMismatch(values.len(), basis.len()));
        }
        Ok(Self { basis, values })
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lambda(&self) -> &[f64] {
        self.basis.lambda()
    }

    pub fn h(&self) -> &[f64] {
        self.basis.h()
    }
}

/// Running sums `sum_j F_k(x_j) dt_j` plus the accumulated duration.
#[derive(Debug, Clone)]
pub struct CoefficientAccumulator {
    basis: Arc<Basis>,
    sums: Vec<f64>,
    duration: f64,
    scratch: Vec<f64>,
}

impl CoefficientAccumulator {
    pub fn new(basis: Arc<Basis>) -> Self {
        let n = basis.len();
        Self {
            basis,
            sums: vec![0.0; n],
            duration: 0.0,
            scratch: vec![0.0; n],
        }
    }

    pub fn add(&mut self, s: &[f64], weight: f64) {
        self.basis.eval_into(s, &mut self.scratch);
        for (acc, f) in self.sums.iter_mut().zip(&self.scratch) {
            *acc += weight * f;
        }
        self.duration += weight;
    }

    pub fn merge(&mut self, other: &CoefficientAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.duration += other.duration;
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn finish(&self) -> Result<SpectralCoefficients> {
        if self.duration <= 0.0 {
            return Err(Error::ZeroDuration);
        }
        let inv = 1.0 / self.duration;
        SpectralCoefficients::new(
            self.basis.clone(),
            self.sums.iter().map(|s| s * inv).collect(),
        )
    }
}

/// Adds the left-Riemann contribution of samples `range` of a trajectory.
/// Sample `j` is weighted by `t_{j+1} - t_j`; the last sample of the
/// trajectory closes the interval and carries no weight.
pub(crate) fn accumulate_left_riemann(
    acc: &mut CoefficientAccumulator,
    traj: &Trajectory,
    v_indices: &[usize],
    range: std::ops::Range<usize>,
    end_time: f64,
) {
    let times = traj.times();
    let mut point = vec![0.0; v_indices.len()];
    for j in range {
        let next = if j + 1 < times.len() {
            times[j + 1]
        } else {
            end_time
        };
        let w = next - times[j];
        if w <= 0.0 {
            continue;
        }
        traj.project_into(j, v_indices, &mut point);
        acc.add(&point, w);
    }
}

/// `c_k = (1/T) sum_j F_k(x_v(t_j)) dt_j` over the recorded samples.
///
/// A single-sample trajectory is a Dirac time-average at that sample.
pub fn trajectory_coefficients(
    basis: &Arc<Basis>,
    traj: &Trajectory,
    v_indices: &[usize],
) -> Result<SpectralCoefficients> {
    if traj.is_empty() {
        return Err(Error::ZeroDuration);
    }
    if v_indices.len() != basis.domain().dims() {
        return Err(Error::DimensionMismatch {
            expected: basis.domain().dims(),
            got: v_indices.len(),
        });
    }
    let mut acc = CoefficientAccumulator::new(basis.clone());
    if traj.len() == 1 {
        let mut point = vec![0.0; v_indices.len()];
        traj.project_into(0, v_indices, &mut point);
        acc.add(&point, 1.0);
    } else {
        let end = *traj.times().last().unwrap();
        accumulate_left_riemann(&mut acc, traj, v_indices, 0..traj.len(), end);
    }
    acc.finish()
}

/// Node lattice over the domain used for quadrature and cached fields.
/// Nodes include both walls; flattening runs axis 0 fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lengths: Vec<f64>,
    sizes: Vec<usize>,
}

impl Grid {
    pub fn new(lengths: Vec<f64>, sizes: Vec<usize>) -> Result<Self> {
        if lengths.len() != sizes.len() || lengths.is_empty() {
            return Err(Error::InvalidConfig(
                "grid lengths and sizes must have equal, nonzero length".into(),
            ));
        }
        if sizes.iter().any(|n| *n < 2) {
            return Err(Error::InvalidConfig("grids need at least 2 nodes per axis".into()));
        }
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidConfig("grid lengths must be positive".into()));
        }
        Ok(Self { lengths, sizes })
    }

    pub fn over(domain: &SearchDomain, nodes_per_axis: usize) -> Result<Self> {
        Self::new(domain.lengths().to_vec(), vec![nodes_per_axis; domain.dims()])
    }

    pub fn dims(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / (self.sizes[axis] - 1) as f64
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        self.sizes
            .iter()
            .map(|n| {
                let i = rem % n;
                rem /= n;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (i, n) in idx.iter().zip(&self.sizes) {
            flat += i * stride;
            stride *= n;
        }
        flat
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims()];
        self.node_into(flat, &mut out);
        out
    }

    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for (a, n) in self.sizes.iter().enumerate() {
            let i = rem % n;
            rem /= n;
            out[a] = i as f64 * self.spacing(a);
        }
    }

    /// Trapezoid-rule weight of a node.
    pub fn weight(&self, flat: usize) -> f64 {
        let mut rem = flat;
        let mut w = 1.0;
        for (a, n) in self.sizes.iter().enumerate() {
            let i = rem % n;
            rem /= n;
            let h = self.spacing(a);
            w *= if i == 0 || i == n - 1 { 0.5 * h } else { h };
        }
        w
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.weight(j)).collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .enumerate()
            .map(|(j, v)| self.weight(j) * v)
            .sum()
    }
}

/// Scalar field sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut s = vec![0.0; grid.dims()];
        let values = (0..grid.len())
            .map(|j| {
                grid.node_into(j, &mut s);
                f(&s)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integral(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Multilinear interpolation; `s` is clamped into the grid box.
    pub fn interpolate(&self, s: &[f64]) -> f64 {
        let v = self.grid.dims();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..v {
            let n = self.grid.sizes[a];
            let mut u = (s[a] / self.grid.spacing(a)).clamp(0.0, (n - 1) as f64);
            // node coordinates divide back to integers only up to rounding
            let r = u.round();
            if (u - r).abs() < 1e-9 {
                u = r;
            }
            let i = (u.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << v) {
            let mut w = 1.0;
            let mut flat = 0;
            let mut stride = 1;
            for a in 0..v {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                flat += (base[a] + bit) * stride;
                stride *= self.grid.sizes[a];
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }

    /// CSV layout: header row with the axis sizes followed by the axis
    /// lengths, then one row per line of axis-0 values (axis 0 fastest).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = self
            .grid
            .sizes
            .iter()
            .map(|n| n.to_string())
            .chain(self.grid.lengths.iter().map(|l| format_f64(*l)))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in self.values.chunks(self.grid.sizes[0]) {
            let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("grid", path, "missing header"))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() % 2 != 0 || fields.is_empty() {
            return Err(Error::parse("grid", path, "header must hold sizes then lengths"));
        }
        let v = fields.len() / 2;
        let sizes = fields[..v]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse("grid", path, e.to_string()))?;
        let lengths = fields[v..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse("grid", path, e.to_string()))?;
        let grid = Grid::new(lengths, sizes).map_err(|e| Error::parse("grid", path, e.to_string()))?;
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            for f in line.split(',') {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::parse("grid", path, e.to_string()))?,
                );
            }
        }
        if values.len() != grid.len() {
            return Err(Error::parse(
                "grid",
                path,
                format!("expected {} values, found {}", grid.len(), values.len()),
            ));
        }
        Ok(Self { grid, values })
    }
}

/// Normalized spatial density over the domain plus its coefficients `phi_k`.
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    basis: Arc<Basis>,
    density: GridField,
    phi: Vec<f64>,
}

impl TargetDistribution {
    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    pub fn density(&self) -> &GridField {
        &self.density
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Uniform target on `basis`'s domain.
    pub fn uniform(basis: &Arc<Basis>, nodes_per_axis: usize) -> Result<Self> {
        let grid = Grid::over(basis.domain(), nodes_per_axis)?;
        let field = GridField::from_fn(grid, |_| 1.0);
        distribution_coefficients(basis, &field)
    }

    /// Builds a target directly from coefficients, without a density grid
    /// behind it. Used by tests that need arbitrary `phi_k`.
    pub fn from_coefficients(basis: Arc<Basis>, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != basis.len() {
            return Err(Error::IndexSetMismatch(phi.len(), basis.len()));
        }
        let grid = Grid::over(basis.domain(), 2)?;
        let vol = basis.domain().volume();
        let density = GridField::new(grid.clone(), vec![1.0 / vol; grid.len()])?;
        Ok(Self {
            basis,
            density,
            phi,
        })
    }
}

/// Normalizes a nonnegative density grid to unit mass and projects it onto
/// the basis by trapezoid quadrature.
pub fn distribution_coefficients(basis: &Arc<Basis>, density: &GridField) -> Result<TargetDistribution> {
    let grid = density.grid();
    if grid.lengths() != basis.domain().lengths() {
        return Err(Error::InvalidConfig(
            "density grid does not cover the basis domain".into(),
        ));
    }
    if density.values().iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidConfig(
            "target density must be finite and nonnegative".into(),
        ));
    }
    let weights = grid.weights();
    let mass: f64 = weights.iter().zip(density.values()).map(|(w, d)| w * d).sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let normalized: Vec<f64> = density.values().iter().map(|d| d / mass).collect();
    let mut phi = vec![0.0; basis.len()];
    let mut f = vec![0.0; basis.len()];
    let mut s = vec![0.0; grid.dims()];
    for (j, (w, d)) in weights.iter().zip(&normalized).enumerate() {
        if *d == 0.0 {
            continue;
        }
        grid.node_into(j, &mut s);
        basis.eval_into(&s, &mut f);
        let wd = w * d;
        for (p, fk) in phi.iter_mut().zip(&f) {
            *p += wd * fk;
        }
    }
    Ok(TargetDistribution {
        basis: basis.clone(),
        density: GridField::new(grid.clone(), normalized)?,
        phi,
    })
}

/// Caches basis values at every grid node so repeated projections of
/// densities on the same grid reduce to a matrix-vector product.
#[derive(Debug, Clone)]
pub struct GridProjector {
    basis: Arc<Basis>,
    grid: Grid,
    weights: Vec<f64>,
    table: Vec<f64>,
}

impl GridProjector {
    pub fn new(basis: Arc<Basis>, grid: Grid) -> Result<Self> {
        if grid.lengths() != basis.domain().lengths() {
            return Err(Error::InvalidConfig(
                "projector grid does not cover the basis domain".into(),
            ));
        }
        let n = basis.len();
        let mut table = vec![0.0; grid.len() * n];
        let mut s = vec![0.0; grid.dims()];
        for j in 0..grid.len() {
            grid.node_into(j, &mut s);
            basis.eval_into(&s, &mut table[j * n..(j + 1) * n]);
        }
        let weights = grid.weights();
        Ok(Self {
            basis,
            grid,
            weights,
            table,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    /// Same contract as [`distribution_coefficients`].
    pub fn project(&self, values: Vec<f64>) -> Result<TargetDistribution> {
        if values.len() != self.grid.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidConfig(
                "target density must be finite and nonnegative".into(),
            ));
        }
        let mass: f64 = self.weights.iter().zip(&values).map(|(w, d)| w * d).sum();
        if mass <= 0.0 {
            return Err(Error::DegenerateTarget);
        }
        let n = self.basis.len();
        let mut phi = vec![0.0; n];
        let normalized: Vec<f64> = values.iter().map(|d| d / mass).collect();
        for (j, (w, d)) in self.weights.iter().zip(&normalized).enumerate() {
            let wd = w * d;
            if wd == 0.0 {
                continue;
            }
            for (p, f) in phi.iter_mut().zip(&self.table[j * n..(j + 1) * n]) {
                *p += wd * f;
            }
        }
        Ok(TargetDistribution {
            basis: self.basis.clone(),
            density: GridField::new(self.grid.clone(), normalized)?,
            phi,
        })
    }
}

/// `q * sum_k Lambda_k (c_k - phi_k)^2`.
pub fn ergodic_metric(coeffs: &SpectralCoefficients, target: &TargetDistribution, q: f64) -> Result<f64> {
    if !coeffs.basis.same_lattice(&target.basis) || coeffs.values.len() != target.phi.len() {
        return Err(Error::IndexSetMismatch(coeffs.values.len(), target.phi.len()));
    }
    Ok(metric_unchecked(coeffs.basis.lambda(), &coeffs.values, &target.phi, q))
}

pub(crate) fn metric_unchecked(lambda: &[f64], c: &[f64], phi: &[f64], q: f64) -> f64 {
    q * lambda
        .iter()
        .zip(c)
        .zip(phi)
        .map(|((l, c), p)| l * (c - p) * (c - p))
        .sum::<f64>()
}

/// Writes `k_1,...,k_v,value` rows.
pub fn write_coefficients_csv(path: &Path, basis: &Basis, values: &[f64]) -> Result<()> {
    let v = basis.domain().dims();
    let mut out = String::new();
    let header: Vec<String> = (0..v)
        .map(|i| format!("k{}", i + 1))
        .chain(std::iter::once("value".to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (k, c) in basis.indices().iter().zip(values) {
        for ki in &k.0 {
            out.push_str(&ki.to_string());
            out.push(',');
        }
        out.push_str(&format_f64(*c));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_coefficients_csv(path: &Path) -> Result<Vec<(BasisIndex, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (value, ks) = fields
            .split_last()
            .ok_or_else(|| Error::parse("coefficients", path, "empty row"))?;
        let k = ks
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse("coefficients", path, e.to_string()))?;
        let value = value
            .parse::<f64>()
            .map_err(|e| Error::parse("coefficients", path, e.to_string()))?;
        rows.push((BasisIndex(k), value));
    }
    Ok(rows)
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
