//! Ground-truth scenes, planar rigid transforms and the binary contact
//! sensor.
//!
//! Shapes live in the model frame `P`. A transform `g(theta)` with
//! `theta = (t_x, t_y, alpha)` maps them into the world frame `W`; the
//! sensor at world point `s` reports contact iff `g(theta)^-1 s` is inside a
//! shape. In three-dimensional domains the transform acts on the first two
//! axes only.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DVector, Matrix2x3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Grid, GridField, SearchDomain};
use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE2Transform {
    pub tx: f64,
    pub ty: f64,
    pub alpha: f64,
}

impl Default for SE2Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE2Transform {
    pub fn new(tx: f64, ty: f64, alpha: f64) -> Self {
        Self { tx, ty, alpha }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_array(theta: [f64; 3]) -> Self {
        Self::new(theta[0], theta[1], theta[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.tx, self.ty, self.alpha]
    }

    /// `g(theta) s = R(alpha) s + t`.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let (sn, cs) = self.alpha.sin_cos();
        let mut out = s.to_vec();
        out[0] = cs * s[0] - sn * s[1] + self.tx;
        out[1] = sn * s[0] + cs * s[1] + self.ty;
        out
    }

    /// `g(theta)^-1 s = R(-alpha) (s - t)`.
    pub fn inverse_apply(&self, s: &[f64]) -> Vec<f64> {
        let mut out = s.to_vec();
        self.inverse_apply_into(s, &mut out);
        out
    }

    pub fn inverse_apply_into(&self, s: &[f64], out: &mut [f64]) {
        let (sn, cs) = self.alpha.sin_cos();
        let dx = s[0] - self.tx;
        let dy = s[1] - self.ty;
        out[0] = cs * dx + sn * dy;
        out[1] = -sn * dx + cs * dy;
        out[2..s.len()].copy_from_slice(&s[2..]);
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &SE2Transform) -> SE2Transform {
        let t = self.apply(&[other.tx, other.ty]);
        SE2Transform::new(t[0], t[1], wrap_angle(self.alpha + other.alpha))
    }

    pub fn inverse(&self) -> SE2Transform {
        let t = SE2Transform::new(0.0, 0.0, -self.alpha).apply(&[-self.tx, -self.ty]);
        SE2Transform::new(t[0], t[1], wrap_angle(-self.alpha))
    }

    /// Derivative of `g(theta)^-1 s` (planar part) with respect to
    /// `(t_x, t_y, alpha)`.
    pub fn inverse_jacobian(&self, s: &[f64]) -> Matrix2x3<f64> {
        let (sn, cs) = self.alpha.sin_cos();
        let dx = s[0] - self.tx;
        let dy = s[1] - self.ty;
        Matrix2x3::new(
            -cs, -sn, -sn * dx + cs * dy, //
            sn, -cs, -cs * dx - sn * dy,
        )
    }
}

/// Free functions mirroring the transform methods.
pub fn se2_inverse_apply(theta: &SE2Transform, s: &[f64]) -> Vec<f64> {
    theta.inverse_apply(s)
}

pub fn se2_jacobian(theta: &SE2Transform, s: &[f64]) -> Matrix2x3<f64> {
    theta.inverse_jacobian(s)
}

/// A solid primitive in the model frame. Rotation turns the shape about its
/// center in the first two axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Circle {
        center: Vec<f64>,
        radius: f64,
    },
    Rectangle {
        center: Vec<f64>,
        half_extents: Vec<f64>,
        #[serde(default)]
        rotation: f64,
    },
    Ellipse {
        center: Vec<f64>,
        semi_axes: Vec<f64>,
        #[serde(default)]
        rotation: f64,
    },
}

impl Shape {
    pub fn center(&self) -> &[f64] {
        match self {
            Shape::Circle { center, .. } | Shape::Rectangle { center, .. } | Shape::Ellipse { center, .. } => center,
        }
    }

    fn rotation(&self) -> f64 {
        match self {
            Shape::Circle { .. } => 0.0,
            Shape::Rectangle { rotation, .. } | Shape::Ellipse { rotation, .. } => *rotation,
        }
    }

    pub fn validate(&self, dims: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.center().len() != dims {
            return bad(format!("shape center has {} components, domain has {dims}", self.center().len()));
        }
        let ok = match self {
            Shape::Circle { radius, .. } => *radius > 0.0,
            Shape::Rectangle { half_extents: p, .. } | Shape::Ellipse { semi_axes: p, .. } => {
                if p.len() != dims {
                    return bad(format!("shape has {} size parameters, domain has {dims}", p.len()));
                }
                p.iter().all(|x| *x > 0.0)
            }
        };
        if !ok || !self.rotation().is_finite() {
            return bad(format!("shape size parameters must be positive: {self:?}"));
        }
        Ok(())
    }

    fn local(&self, p: &[f64]) -> Vec<f64> {
        let c = self.center();
        let mut q: Vec<f64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
        let rot = self.rotation();
        if rot != 0.0 {
            let (sn, cs) = rot.sin_cos();
            let (x, y) = (q[0], q[1]);
            q[0] = cs * x + sn * y;
            q[1] = -sn * x + cs * y;
        }
        q
    }

    /// Signed distance: negative inside, positive outside. Exact for circles
    /// and rectangles; a first-order approximation for ellipses that is exact
    /// on the boundary and keeps the correct sign.
    pub fn signed_distance(&self, p: &[f64]) -> f64 {
        let q = self.local(p);
        match self {
            Shape::Circle { radius, .. } => norm(&q) - radius,
            Shape::Rectangle { half_extents, .. } => {
                let d: Vec<f64> = q.iter().zip(half_extents).map(|(a, h)| a.abs() - h).collect();
                let outside: Vec<f64> = d.iter().map(|x| x.max(0.0)).collect();
                let inside = d.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(0.0);
                norm(&outside) + inside
            }
            Shape::Ellipse { semi_axes, .. } => {
                let k0 = norm(&q.iter().zip(semi_axes).map(|(a, r)| a / r).collect::<Vec<_>>());
                let k1 = norm(&q.iter().zip(semi_axes).map(|(a, r)| a / (r * r)).collect::<Vec<_>>());
                if k1 == 0.0 {
                    -semi_axes.iter().copied().fold(f64::INFINITY, f64::min)
                } else {
                    k0 * (k0 - 1.0) / k1
                }
            }
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.signed_distance(p) <= 0.0
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.center();
        let half: Vec<f64> = match self {
            Shape::Circle { radius, .. } => vec![*radius; c.len()],
            Shape::Rectangle { half_extents: e, rotation, .. } | Shape::Ellipse { semi_axes: e, rotation, .. } => {
                let (sn, cs) = rotation.sin_cos();
                let mut h = e.clone();
                if matches!(self, Shape::Rectangle { .. }) {
                    h[0] = cs.abs() * e[0] + sn.abs() * e[1];
                    h[1] = sn.abs() * e[0] + cs.abs() * e[1];
                } else {
                    h[0] = ((cs * e[0]).powi(2) + (sn * e[1]).powi(2)).sqrt();
                    h[1] = ((sn * e[0]).powi(2) + (cs * e[1]).powi(2)).sqrt();
                }
                h
            }
        };
        (
            c.iter().zip(&half).map(|(a, h)| a - h).collect(),
            c.iter().zip(&half).map(|(a, h)| a + h).collect(),
        )
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Shapes in the model frame over a search domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    domain: SearchDomain,
    shapes: Vec<Shape>,
}

impl Scene {
    pub fn new(domain: SearchDomain, shapes: Vec<Shape>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::InvalidConfig("scene needs at least one shape".into()));
        }
        for s in &shapes {
            s.validate(domain.dims())?;
            let (lo, hi) = s.bounding_box();
            if lo.iter().any(|x| *x < 0.0) || hi.iter().zip(domain.lengths()).any(|(x, l)| x > l) {
                return Err(Error::InvalidConfig(format!("shape {s:?} leaves the domain")));
            }
        }
        Ok(Self { domain, shapes })
    }

    pub fn domain(&self) -> &SearchDomain {
        &self.domain
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Signed distance to the union of shapes, in the model frame.
    pub fn signed_distance(&self, p: &[f64]) -> f64 {
        self.shapes
            .iter()
            .map(|s| s.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the shape containing model-frame point `p`, if any.
    pub fn shape_at(&self, p: &[f64]) -> Option<usize> {
        self.shapes.iter().position(|s| s.contains(p))
    }

    /// Index of the shape occupying world point `s` under `transform`.
    pub fn shape_at_world(&self, transform: &SE2Transform, s: &[f64]) -> Option<usize> {
        self.shape_at(&transform.inverse_apply(s))
    }

    pub fn world_signed_distance(&self, transform: &SE2Transform, s: &[f64]) -> f64 {
        self.signed_distance(&transform.inverse_apply(s))
    }

    /// Ground-truth occupancy sampled at grid nodes, as 0/1 values.
    pub fn occupancy_grid(&self, transform: &SE2Transform, grid: &Grid) -> GridField {
        GridField::from_fn(grid.clone(), |s| if occupancy(self, transform, s) { 1.0 } else { 0.0 })
    }
}

/// True iff `g(theta)^-1 s` lies inside any shape.
pub fn occupancy(scene: &Scene, transform: &SE2Transform, s: &[f64]) -> bool {
    scene.shape_at_world(transform, s).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    /// The robot passes through shapes.
    #[default]
    Phantom,
    /// Shapes are rigid obstacles.
    Solid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactSensorConfig {
    /// Probability that a reading is inverted.
    pub flip_noise: f64,
    pub mode: SensorMode,
    /// Measurement period `t_s` (s).
    pub sample_period: f64,
}

impl Default for ContactSensorConfig {
    fn default() -> Self {
        Self {
            flip_noise: 0.05,
            mode: SensorMode::Phantom,
            sample_period: 0.1,
        }
    }
}

impl ContactSensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.flip_noise) {
            return Err(Error::InvalidConfig(format!(
                "flip_noise must lie in [0, 0.5), got {}",
                self.flip_noise
            )));
        }
        if !(self.sample_period > 0.0) {
            return Err(Error::InvalidConfig("sample_period must be positive".into()));
        }
        Ok(())
    }
}

/// One noisy binary reading at world point `x_v`. Always consumes exactly
/// one draw from `rng`.
pub fn sense<R: Rng + ?Sized>(
    scene: &Scene,
    transform: &SE2Transform,
    config: &ContactSensorConfig,
    x_v: &[f64],
    rng: &mut R,
) -> bool {
    let flip = rng.gen::<f64>() < config.flip_noise;
    occupancy(scene, transform, x_v) != flip
}

/// Position layout shared by the collision helpers: positions in
/// `x[0..axes]`, velocities in `x[axes..2 * axes]`.
fn split(x: &DVector<f64>, axes: usize) -> (Vec<f64>, Vec<f64>) {
    (x.rows(0, axes).iter().copied().collect(), x.rows(axes, axes).iter().copied().collect())
}

/// Collision response for solid scenes. If the straight segment from `x` to
/// `proposed` enters a shape, the position stops on the surface and the
/// velocity loses its inward normal component. Returns the corrected state
/// and whether a collision happened.
pub fn solid_step(
    scene: &Scene,
    transform: &SE2Transform,
    axes: usize,
    x: &DVector<f64>,
    proposed: &DVector<f64>,
) -> (DVector<f64>, bool) {
    const SUBDIVISIONS: usize = 16;
    let (p0, _) = split(x, axes);
    let (p1, mut vel) = split(proposed, axes);
    let sd = |p: &[f64]| scene.world_signed_distance(transform, p);
    let lerp = |a: f64| -> Vec<f64> { p0.iter().zip(&p1).map(|(u, v)| u + a * (v - u)).collect() };
    if sd(&p0) <= 0.0 {
        // already inside (e.g. spawned there); nothing sensible to project to
        return (proposed.clone(), false);
    }
    let mut lo = 0.0;
    let mut hit = None;
    for i in 1..=SUBDIVISIONS {
        let a = i as f64 / SUBDIVISIONS as f64;
        if sd(&lerp(a)) <= 0.0 {
            hit = Some(a);
            break;
        }
        lo = a;
    }
    let Some(mut hi) = hit else {
        return (proposed.clone(), false);
    };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if sd(&lerp(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let contact = lerp(lo);
    let n = surface_normal(&sd, &contact);
    let vn: f64 = vel.iter().zip(&n).map(|(v, n)| v * n).sum();
    if vn < 0.0 {
        for (v, ni) in vel.iter_mut().zip(&n) {
            *v -= vn * ni;
        }
    }
    let mut out = proposed.clone();
    for i in 0..axes {
        out[i] = contact[i];
        out[axes + i] = vel[i];
    }
    (out, true)
}

fn surface_normal(sd: &impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
    let h = 1e-7;
    let mut g = vec![0.0; p.len()];
    let mut q = p.to_vec();
    for i in 0..p.len() {
        q[i] = p[i] + h;
        let a = sd(&q);
        q[i] = p[i] - h;
        let b = sd(&q);
        q[i] = p[i];
        g[i] = (a - b) / (2.0 * h);
    }
    let n = norm(&g);
    if n > 0.0 {
        g.iter_mut().for_each(|x| *x /= n);
    }
    g
}

/// Keeps the robot inside the domain. A position past a wall is mirrored
/// back and the normal velocity reversed and scaled by `restitution`
/// (1 is an elastic bounce, 0 stops the normal motion). Returns true if a
/// wall was touched.
pub fn enforce_arena(domain: &SearchDomain, axes: usize, restitution: f64, x: &mut DVector<f64>) -> bool {
    let mut touched = false;
    for (i, l) in domain.lengths().iter().enumerate().take(axes) {
        if x[i] < 0.0 {
            x[i] = (-restitution * x[i]).min(*l);
            x[axes + i] = -restitution * x[axes + i].min(0.0);
            touched = true;
        } else if x[i] > *l {
            x[i] = (l - restitution * (x[i] - l)).max(0.0);
            x[axes + i] = -restitution * x[axes + i].max(0.0);
            touched = true;
        }
    }
    touched
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default = "unit_lengths")]
    pub lengths: Vec<f64>,
    pub shapes: Vec<Shape>,
    /// True transform `theta` from the model frame to the world.
    #[serde(default)]
    pub transform: SE2Transform,
    #[serde(default)]
    pub sensor: ContactSensorConfig,
}

fn unit_lengths() -> Vec<f64> {
    vec![1.0, 1.0]
}

impl SceneConfig {
    pub fn scene(&self) -> Result<Scene> {
        let domain = SearchDomain::new(self.lengths.clone(), crate::domain::default_k_max(self.lengths.len()))?;
        self.sensor.validate()?;
        Scene::new(domain, self.shapes.clone())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("scene config", path, e.to_string()))
    }

    /// Circle, square and oval on the unit square, identity transform.
    pub fn default_three_objects() -> Self {
        Self {
            lengths: unit_lengths(),
            shapes: vec![
                Shape::Circle {
                    center: vec![0.25, 0.7],
                    radius: 0.1,
                },
                Shape::Rectangle {
                    center: vec![0.7, 0.75],
                    half_extents: vec![0.09, 0.09],
                    rotation: 0.0,
                },
                Shape::Ellipse {
                    center: vec![0.55, 0.25],
                    semi_axes: vec![0.15, 0.07],
                    rotation: 0.3,
                },
            ],
            transform: SE2Transform::identity(),
            sensor: ContactSensorConfig::default(),
        }
    }

    /// The same three object kinds placed in the model frame so that the
    /// transform `(0.5, 0.6, -1.1)` carries them into the unit square.
    pub fn localization_analog() -> Self {
        Self {
            lengths: unit_lengths(),
            shapes: vec![
                Shape::Circle {
                    center: vec![0.2, 0.15],
                    radius: 0.07,
                },
                Shape::Rectangle {
                    center: vec![0.5, 0.1],
                    half_extents: vec![0.06, 0.06],
                    rotation: 0.0,
                },
                Shape::Ellipse {
                    center: vec![0.12, 0.32],
                    semi_axes: vec![0.09, 0.05],
                    rotation: 0.0,
                },
            ],
            transform: SE2Transform::new(0.5, 0.6, -1.1),
            sensor: ContactSensorConfig::default(),
        }
    }
}
