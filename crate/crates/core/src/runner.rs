//! End-to-end runs: exploration that learns the contact likelihood,
//! localization of the scene transform against the information density,
//! the greedy entropy baseline, and the files each run leaves behind.
//!
//! A run advances on a fixed `dt` lattice. Within a tick the order is
//! measure, then refit or filter update, then replan, then integrate.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{debug, info, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{bernoulli_entropy, draw_candidates, entropy, select_target, Belief as EerBelief, EERConfig, LqrTracker};
use crate::domain::{ergodic_metric, write_file, Basis, CoefficientAccumulator, Grid, GridField, GridProjector, TargetDistribution};
use crate::dynamics::{integrate_schedule, ControlAffineModel, ControlSchedule, DoubleIntegrator, Trajectory};
use crate::environment::{enforce_arena, sense, solid_step, Scene, SceneConfig, SensorMode, SE2Transform};
use crate::ergodic::{compute_action, history_accumulator, read_step_log, write_step_log, ErgodicControllerConfig, StepLogRow};
use crate::error::{Error, Result};
use crate::filter::{pose_error, read_estimate_log, write_estimate_log, Estimate, FilterConfig, ParticleSet, ParticleSnapshots};
use crate::information::{eid_density, project_density, EIDConfig};
use crate::likelihood::{self, field_auc, stage1_target, truth_field, LikelihoodConfig, LikelihoodField, MeasurementLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Explore,
    Localize,
    EerExplore,
    EerLocalize,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Explore => "explore",
            Stage::Localize => "localize",
            Stage::EerExplore => "eer-explore",
            Stage::EerLocalize => "eer-localize",
        }
    }

    pub fn is_localization(&self) -> bool {
        matches!(self, Stage::Localize | Stage::EerLocalize)
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, Stage::EerExplore | Stage::EerLocalize)
    }

    /// The same task under the other policy.
    pub fn counterpart(&self) -> Stage {
        match self {
            Stage::Explore => Stage::EerExplore,
            Stage::Localize => Stage::EerLocalize,
            Stage::EerExplore => Stage::Explore,
            Stage::EerLocalize => Stage::Localize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    /// Scene description file; takes precedence over `scene`.
    pub scene_file: Option<PathBuf>,
    /// Inline scene; `None` picks the stage's default scene.
    pub scene: Option<SceneConfig>,
    /// Model-frame likelihood grid for localization; `None` builds the
    /// ground-truth field from the scene.
    pub field_file: Option<PathBuf>,
    /// Run length (s); `None` is 120 for exploration, 130 for localization.
    pub t_final: Option<f64>,
    /// Sensor period `t_s`; `None` uses the scene's sensor setting.
    pub measurement_period: Option<f64>,
    pub control_period: f64,
    pub snapshot_interval: f64,
    /// Initial positions, optionally followed by velocities. `None` starts
    /// at rest slightly off the domain center.
    pub start: Option<Vec<f64>>,
    /// Per-axis acceleration bound of the simulated robot.
    pub accel_limit: f64,
    /// Keep the robot inside the domain with walls.
    pub arena_walls: bool,
    /// Fraction of normal speed kept at a wall bounce.
    pub wall_restitution: f64,
    pub truth_resolution: usize,
    pub truth_supersample: usize,
    pub controller: ErgodicControllerConfig,
    pub likelihood: LikelihoodConfig,
    pub filter: FilterConfig,
    pub eid: EIDConfig,
    pub eer: EERConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Explore,
            scene_file: None,
            scene: None,
            field_file: None,
            t_final: None,
            measurement_period: None,
            control_period: 0.1,
            snapshot_interval: 1.25,
            start: None,
            accel_limit: RUN_ACCEL_LIMIT,
            arena_walls: true,
            wall_restitution: 1.0,
            truth_resolution: 64,
            truth_supersample: 4,
            controller: ErgodicControllerConfig::default(),
            likelihood: LikelihoodConfig::default(),
            filter: FilterConfig::default(),
            eid: EIDConfig::default(),
            eer: EERConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

/// Offset of the default start from the domain center, as a fraction of
/// each side. The center itself is a stationary point of the controller
/// under a uniform target.
const START_OFFSET: [f64; 3] = [-0.03, 0.02, 0.01];

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("run config", path, e.to_string()))
    }

    pub fn for_stage(stage: Stage) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
            .unwrap_or(if self.stage.is_localization() { 130.0 } else { 120.0 })
    }

    /// The scene this run uses, with files resolved.
    pub fn resolved_scene(&self) -> Result<SceneConfig> {
        if let Some(path) = &self.scene_file {
            return SceneConfig::read(path);
        }
        Ok(match &self.scene {
            Some(s) => s.clone(),
            None if self.stage.is_localization() => SceneConfig::localization_analog(),
            None => SceneConfig::default_three_objects(),
        })
    }

    pub fn measurement_period(&self, scene: &SceneConfig) -> f64 {
        self.measurement_period.unwrap_or(scene.sensor.sample_period)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.t_final() > 0.0 && self.t_final().is_finite()) {
            return bad(format!("t_final must be positive, got {}", self.t_final()));
        }
        if matches!(self.measurement_period, Some(p) if !(p > 0.0)) {
            return bad("measurement_period must be positive".into());
        }
        if !(self.control_period > 0.0) || !(self.snapshot_interval > 0.0) {
            return bad("control_period and snapshot_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.wall_restitution) {
            return bad("wall_restitution must lie in [0, 1]".into());
        }
        if self.truth_resolution < 2 || self.truth_supersample == 0 {
            return bad("truth_resolution must be at least 2 and truth_supersample positive".into());
        }
        for (what, path) in [("scene_file", &self.scene_file), ("field_file", &self.field_file)] {
            if let Some(p) = path {
                if !p.exists() {
                    return bad(format!("{what} {} does not exist", p.display()));
                }
            }
        }
        self.likelihood.validate()?;
        self.filter.validate()?;
        self.eid.validate()?;
        self.eer.validate()?;
        Ok(())
    }
}

/// Fraction of the `cells^v` equal cells holding at least one position.
pub fn coverage_fraction<'a>(lengths: &[f64], positions: impl IntoIterator<Item = &'a [f64]>, cells: usize) -> f64 {
    let v = lengths.len();
    let mut seen = vec![false; cells.pow(v as u32)];
    for p in positions {
        let mut flat = 0;
        let mut stride = 1;
        for (a, l) in lengths.iter().enumerate() {
            let i = ((p[a] / l * cells as f64).floor().max(0.0) as usize).min(cells - 1);
            flat += i * stride;
            stride *= cells;
        }
        seen[flat] = true;
    }
    seen.iter().filter(|s| **s).count() as f64 / seen.len() as f64
}

/// Summary written to `metrics.json`. Fields that do not apply to a stage
/// are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub stage: String,
    pub policy: String,
    pub seed: u64,
    pub t_final: f64,
    pub steps: usize,
    pub measurements: usize,
    pub positives: usize,
    pub refits: usize,
    pub objects_contacted: usize,
    pub contacted_shapes: Vec<usize>,
    pub coverage_fraction: f64,
    pub auc: Option<f64>,
    pub final_ergodic_metric: Option<f64>,
    pub final_entropy: Option<f64>,
    pub controller_invocations: usize,
    pub accepted_actions: usize,
    pub snapshots: usize,
    pub theta_true: Option<[f64; 3]>,
    pub theta_estimate: Option<[f64; 3]>,
    pub theta_error: Option<[f64; 3]>,
    pub ess: Option<f64>,
    pub resamples: Option<usize>,
    pub eid_fallbacks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub stage: String,
    pub seed: u64,
    /// Resolved configuration; feeding it back reproduces the run.
    pub config: RunConfig,
    pub files: Vec<String>,
    pub metrics_sha256: String,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: RunMetrics,
    /// Hex SHA-256 of the metrics file bytes.
    pub checksum: String,
    pub output_dir: Option<PathBuf>,
    pub files: Vec<String>,
}

/// Slower than the bare model default; at 10 the robot crosses the desk
/// between consecutive readings too quickly to register small objects.
pub const RUN_ACCEL_LIMIT: f64 = 5.0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ERROR_FILE: &str = "error.json";

/// Machine-readable failure record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

pub fn write_error_record(dir: &Path, err: &Error) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&ErrorRecord::from(err))?;
    write_file(&dir.join(ERROR_FILE), json.as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn metrics_bytes(m: &RunMetrics) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Integer number of `dt` steps in `period`, which must be a multiple of
/// `dt` up to rounding.
fn steps_in(period: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (period / dt).round();
    if n < 1.0 || ((n * dt - period).abs() > 1e-9 * period.max(1.0)) {
        return Err(Error::InvalidConfig(format!(
            "{what} ({period}) must be a positive multiple of the step {dt}"
        )));
    }
    Ok(n as usize)
}

enum Policy {
    Ergodic {
        /// Application windows still in effect; newest wins.
        windows: Vec<(f64, f64, DVector<f64>)>,
        rows: Vec<StepLogRow>,
        invocations: usize,
        accepted: usize,
    },
    Eer {
        tracker: LqrTracker,
        goal: Vec<f64>,
        rng: ChaCha8Rng,
        replan_every: usize,
        /// `t, goal, expected reduction` per selection.
        selections: Vec<(f64, Vec<f64>, f64)>,
    },
}

enum BeliefState {
    Mapping {
        field: LikelihoodField,
        refits: usize,
    },
    Localizing {
        field: LikelihoodField,
        particles: ParticleSet,
        projector: GridProjector,
        estimates: Vec<(f64, Estimate)>,
        snapshots: ParticleSnapshots,
        fallbacks: usize,
    },
    /// Fixed target, no learning (coverage checks).
    Fixed,
}

struct Snapshot {
    t: f64,
    kind: &'static str,
    field: GridField,
}

struct Sim {
    config: RunConfig,
    scene_config: SceneConfig,
    scene: Scene,
    truth: SE2Transform,
    model: DoubleIntegrator,
    basis: Arc<Basis>,
    dt: f64,
    x: DVector<f64>,
    traj: Trajectory,
    history: CoefficientAccumulator,
    log: MeasurementLog,
    contacted: BTreeSet<usize>,
    collided_since_reading: Option<usize>,
    sensor_rng: ChaCha8Rng,
    target: TargetDistribution,
    policy: Policy,
    belief: BeliefState,
    snapshots: Vec<Snapshot>,
    steps_done: usize,
}

/// Independent ChaCha streams for each consumer of randomness.
const STREAM_SENSOR: u64 = 1;
const STREAM_FILTER: u64 = 2;
const STREAM_CANDIDATES: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Sim {
    fn new(config: &RunConfig, fixed_target: bool) -> Result<Self> {
        config.validate()?;
        let scene_config = config.resolved_scene()?;
        let scene = scene_config.scene()?;
        let domain = scene.domain().clone();
        let v = domain.dims();
        let model = DoubleIntegrator::new(v, config.accel_limit)?;
        config.controller.validate(model.control_dim())?;
        let basis = Basis::new(domain.clone());
        let dt = config.controller.dt;

        let mut x = DVector::zeros(2 * v);
        match &config.start {
            Some(s) if s.len() == v || s.len() == 2 * v => {
                for (i, val) in s.iter().enumerate() {
                    x[i] = *val;
                }
            }
            Some(s) => {
                return Err(Error::DimensionMismatch {
                    expected: v,
                    got: s.len(),
                })
            }
            None => {
                let c = domain.center();
                for i in 0..v {
                    x[i] = c[i] + START_OFFSET[i] * domain.lengths()[i];
                }
            }
        }
        domain.check(&x.as_slice()[..v])?;

        let floor = config.likelihood.probability_floor;
        let n_grid = config
            .likelihood
            .grid_resolution
            .unwrap_or_else(|| domain.default_grid_resolution());
        let uniform = TargetDistribution::uniform(&basis, n_grid)?;
        let belief = if fixed_target {
            BeliefState::Fixed
        } else if config.stage.is_localization() {
            if v != 2 {
                return Err(Error::InvalidConfig("localization is planar only".into()));
            }
            let field = match &config.field_file {
                Some(p) => LikelihoodField::read_csv(p, floor)?,
                None => truth_field(
                    &scene,
                    &SE2Transform::identity(),
                    scene_config.sensor.flip_noise,
                    config.truth_resolution,
                    config.truth_supersample,
                    floor,
                )?,
            };
            let seed = stream(config.seed, STREAM_FILTER).gen::<u64>();
            let particles = ParticleSet::init_uniform(config.filter.prior_bounds, config.filter.n_particles, seed)?;
            let projector = GridProjector::new(basis.clone(), Grid::over(&domain, config.eid.grid_resolution)?)?;
            BeliefState::Localizing {
                field,
                particles,
                projector,
                estimates: Vec::new(),
                snapshots: ParticleSnapshots::default(),
                fallbacks: 0,
            }
        } else {
            BeliefState::Mapping {
                field: LikelihoodField::constant(&domain, n_grid, 0.5, floor)?,
                refits: 0,
            }
        };

        let policy = if config.stage.is_baseline() && !fixed_target {
            Policy::Eer {
                tracker: LqrTracker::new(&model, &config.eer.lqr)?,
                goal: x.as_slice()[..v].to_vec(),
                rng: stream(config.seed, STREAM_CANDIDATES),
                replan_every: steps_in(config.eer.replan_period, dt, "EER replan period")?,
                selections: Vec::new(),
            }
        } else {
            Policy::Ergodic {
                windows: Vec::new(),
                rows: Vec::new(),
                invocations: 0,
                accepted: 0,
            }
        };

        let mut sim = Self {
            config: config.clone(),
            truth: scene_config.transform,
            scene_config,
            scene,
            model,
            history: CoefficientAccumulator::new(basis.clone()),
            basis,
            dt,
            x,
            traj: Trajectory::default(),
            log: MeasurementLog::new(),
            contacted: BTreeSet::new(),
            collided_since_reading: None,
            sensor_rng: stream(config.seed, STREAM_SENSOR),
            target: uniform,
            policy,
            belief,
            snapshots: Vec::new(),
            steps_done: 0,
        };
        sim.config.scene = Some(sim.scene_config.clone());
        sim.config.scene_file = None;
        if let BeliefState::Localizing { .. } = sim.belief {
            if !sim.config.stage.is_baseline() {
                sim.refresh_eid_target()?;
            }
        }
        Ok(sim)
    }

    fn position(&self) -> Vec<f64> {
        self.x.as_slice()[..self.model.axes()].to_vec()
    }

    fn policy_name(&self) -> &'static str {
        match self.policy {
            Policy::Ergodic { .. } => "ergodic",
            Policy::Eer { .. } => "eer",
        }
    }

    /// Information density of the current particles and its target.
    fn eid_target(&mut self) -> Result<(TargetDistribution, GridField, bool)> {
        let BeliefState::Localizing {
            field,
            particles,
            projector,
            ..
        } = &self.belief
        else {
            return Err(Error::InvalidConfig("information density needs a localization run".into()));
        };
        let (density, floored) = eid_density(field, particles, projector.grid(), &self.config.eid);
        let target = project_density(&density, floored, projector)?;
        Ok((target, density, floored))
    }

    fn refresh_eid_target(&mut self) -> Result<()> {
        let (target, _, floored) = self.eid_target()?;
        if floored {
            if let BeliefState::Localizing { fallbacks, .. } = &mut self.belief {
                *fallbacks += 1;
            }
        }
        self.target = target;
        Ok(())
    }

    fn measure(&mut self, t: f64) -> Result<()> {
        let pos = self.position();
        let solid = self.scene_config.sensor.mode == SensorMode::Solid;
        let y = match self.collided_since_reading.take() {
            // a collision since the last reading is a contact; the draw
            // keeps the stream aligned with the phantom case
            Some(k) if solid => {
                self.contacted.insert(k);
                self.sensor_rng.gen::<f64>() >= self.scene_config.sensor.flip_noise
            }
            _ => sense(&self.scene, &self.truth, &self.scene_config.sensor, &pos, &mut self.sensor_rng),
        };
        if let Some(k) = self.scene.shape_at_world(&self.truth, &pos) {
            self.contacted.insert(k);
        }
        self.log.push(t, pos.clone(), y);

        let baseline = self.config.stage.is_baseline();
        match &mut self.belief {
            BeliefState::Mapping { field, refits } => {
                if self.log.len() % self.config.likelihood.refit_every == 0 {
                    *field = likelihood::fit(&self.log, self.scene.domain(), &self.config.likelihood)?
                        .with_fit_id(*refits as u64 + 1);
                    *refits += 1;
                    debug!("refit {} at t = {t:.2} on {} samples", refits, self.log.len());
                    if !baseline {
                        self.target = stage1_target(field, &self.basis)?;
                    }
                }
            }
            BeliefState::Localizing {
                field,
                particles,
                estimates,
                ..
            } => {
                particles.update(field, &pos, y, &self.config.filter);
                estimates.push((t, particles.estimate()));
                if !baseline {
                    self.refresh_eid_target()?;
                }
            }
            BeliefState::Fixed => {}
        }
        Ok(())
    }

    fn snapshot(&mut self, t: f64) -> Result<()> {
        match &mut self.belief {
            BeliefState::Mapping { field, .. } => self.snapshots.push(Snapshot {
                t,
                kind: "likelihood",
                field: field.probability_grid().clone(),
            }),
            BeliefState::Localizing {
                particles, snapshots, ..
            } => {
                snapshots.record(t, particles);
                let (target, _, _) = self.eid_target()?;
                self.snapshots.push(Snapshot {
                    t,
                    kind: "eid",
                    field: target.density().clone(),
                });
            }
            BeliefState::Fixed => {}
        }
        Ok(())
    }

    fn replan_ergodic(&mut self, t: f64) -> Result<()> {
        let history = match self.config.controller.history_window {
            Some(w) => history_accumulator(&self.basis, self.model.v_indices(), &self.traj, t, Some(w)),
            None => self.history.clone(),
        };
        let action = compute_action(&self.model, &self.config.controller, &self.x, t, &history, &self.target)?;
        let Policy::Ergodic {
            windows,
            rows,
            invocations,
            accepted,
        } = &mut self.policy
        else {
            unreachable!("ergodic replan under another policy")
        };
        *invocations += 1;
        windows.retain(|(_, end, _)| *end > t);
        if action.accepted {
            *accepted += 1;
            windows.push((action.tau, action.tau + action.lambda, action.u_star.clone()));
        }
        rows.push(StepLogRow {
            t,
            tau: action.tau,
            lambda: action.lambda,
            u_star: action.u_star.iter().copied().collect(),
            metric: action.metric_before,
        });
        Ok(())
    }

    fn replan_eer(&mut self, t: f64) {
        let Policy::Eer { goal, rng, selections, .. } = &mut self.policy else {
            unreachable!("baseline replan under another policy")
        };
        let candidates = draw_candidates(self.scene.domain(), self.config.eer.n_samples, rng);
        let belief = match &self.belief {
            BeliefState::Mapping { field, .. } => EerBelief::Field(field),
            BeliefState::Localizing { field, particles, .. } => EerBelief::Particles {
                set: particles,
                field,
                floor: self.config.filter.likelihood_floor,
            },
            BeliefState::Fixed => return,
        };
        if let Some((i, reduction)) = select_target(&belief, &candidates) {
            *goal = candidates[i].clone();
            selections.push((t, goal.clone(), reduction));
        }
    }

    fn control_schedule(&self) -> ControlSchedule {
        match &self.policy {
            Policy::Ergodic { windows, .. } => ControlSchedule {
                default: self.config.controller.u_def(self.model.control_dim()),
                windows: windows.clone(),
            },
            Policy::Eer { tracker, goal, .. } => ControlSchedule::constant(tracker.control(&self.model, &self.x, goal)),
        }
    }

    fn advance(&mut self, t: f64) -> Result<()> {
        let schedule = self.control_schedule();
        let seg = integrate_schedule(&self.model, &self.x, &schedule, t, self.dt, self.dt)?;
        let pos = self.position();
        self.history.add(&pos, self.dt);
        self.traj.push(t, self.x.clone(), schedule.at(t).clone());
        let proposed = seg.last_state().expect("one step integrated").clone();
        let axes = self.model.axes();
        let mut next = proposed;
        if self.scene_config.sensor.mode == SensorMode::Solid {
            let (corrected, hit) = solid_step(&self.scene, &self.truth, axes, &self.x, &next);
            if hit {
                let p: Vec<f64> = corrected.as_slice()[..axes].to_vec();
                self.collided_since_reading = Some(self.nearest_shape(&p));
            }
            next = corrected;
        }
        if self.config.arena_walls {
            enforce_arena(self.scene.domain(), axes, self.config.wall_restitution, &mut next);
        }
        self.x = next;
        Ok(())
    }

    fn nearest_shape(&self, p: &[f64]) -> usize {
        let local = self.truth.inverse_apply(p);
        let mut best = (0, f64::INFINITY);
        for (k, s) in self.scene.shapes().iter().enumerate() {
            let d = s.signed_distance(&local);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    fn run(&mut self) -> Result<()> {
        let dt = self.dt;
        let cfg = &self.config;
        let steps = steps_in(cfg.t_final(), dt, "t_final")?;
        let measure_every = steps_in(cfg.measurement_period(&self.scene_config), dt, "measurement period")?;
        let control_every = steps_in(cfg.control_period, dt, "control period")?;
        let snapshot_every = ((cfg.snapshot_interval / dt).round() as usize).max(1);
        let eer_every = match &self.policy {
            Policy::Eer { replan_every, .. } => Some(*replan_every),
            Policy::Ergodic { .. } => None,
        };
        for i in 0..steps {
            let t = i as f64 * dt;
            if i % measure_every == 0 {
                self.measure(t)?;
            }
            if i % snapshot_every == 0 {
                self.snapshot(t)?;
            }
            match eer_every {
                Some(k) => {
                    if i % k == 0 {
                        self.replan_eer(t);
                    }
                }
                None => {
                    if i % control_every == 0 {
                        self.replan_ergodic(t)?;
                    }
                }
            }
            self.advance(t)?;
            self.steps_done = i + 1;
        }
        let t_end = steps as f64 * dt;
        self.traj.push(t_end, self.x.clone(), self.control_schedule().at(t_end).clone());
        if self.snapshots.last().map_or(true, |s| s.t < t_end) {
            self.snapshot(t_end)?;
        }
        Ok(())
    }

    fn metrics(&mut self) -> Result<RunMetrics> {
        let t_final = self.steps_done as f64 * self.dt;
        let v = self.model.axes();
        let positions: Vec<Vec<f64>> = self.traj.states().iter().map(|x| x.as_slice()[..v].to_vec()).collect();
        let coverage = coverage_fraction(self.scene.domain().lengths(), positions.iter().map(|p| p.as_slice()), 10);
        let final_target = match &self.belief {
            BeliefState::Mapping { field, .. } => stage1_target(field, &self.basis)?,
            BeliefState::Localizing { .. } => self.eid_target()?.0,
            BeliefState::Fixed => self.target.clone(),
        };
        let final_metric = if self.history.duration() > 0.0 {
            Some(ergodic_metric(&self.history.finish()?, &final_target, self.config.controller.q)?)
        } else {
            None
        };
        let (invocations, accepted) = match &self.policy {
            Policy::Ergodic {
                invocations, accepted, ..
            } => (*invocations, *accepted),
            Policy::Eer { selections, .. } => (selections.len(), selections.len()),
        };
        let mut m = RunMetrics {
            stage: match self.belief {
                BeliefState::Fixed => "coverage".into(),
                _ => self.config.stage.name().into(),
            },
            policy: self.policy_name().into(),
            seed: self.config.seed,
            t_final,
            steps: self.steps_done,
            measurements: self.log.len(),
            positives: self.log.positives(),
            refits: 0,
            objects_contacted: self.contacted.len(),
            contacted_shapes: self.contacted.iter().copied().collect(),
            coverage_fraction: coverage,
            auc: None,
            final_ergodic_metric: final_metric,
            final_entropy: None,
            controller_invocations: invocations,
            accepted_actions: accepted,
            snapshots: self.snapshots.len(),
            theta_true: None,
            theta_estimate: None,
            theta_error: None,
            ess: None,
            resamples: None,
            eid_fallbacks: None,
        };
        match &self.belief {
            BeliefState::Mapping { field, refits } => {
                m.refits = *refits;
                m.auc = field_auc(field, &self.scene, &self.truth);
                let vals = field.probability_grid().values();
                m.final_entropy = Some(vals.iter().map(|p| bernoulli_entropy(*p)).sum::<f64>() / vals.len() as f64);
            }
            BeliefState::Localizing {
                particles, fallbacks, ..
            } => {
                let est = particles.estimate().mean;
                let truth = self.truth.as_array();
                m.theta_true = Some(truth);
                m.theta_estimate = Some(est);
                m.theta_error = Some(pose_error(&est, &truth));
                m.final_entropy = Some(entropy(particles.weights()));
                m.ess = Some(particles.effective_sample_size());
                m.resamples = Some(particles.resamples());
                m.eid_fallbacks = Some(*fallbacks);
            }
            BeliefState::Fixed => {}
        }
        Ok(m)
    }

    /// Writes every log collected so far; returns the relative file names.
    fn write_logs(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir.join("snapshots")).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        let mut put = |name: &str, res: Result<()>| -> Result<()> {
            res?;
            files.push(name.to_string());
            Ok(())
        };
        put("trajectory.csv", self.traj.write_csv(&dir.join("trajectory.csv")))?;
        put("measurements.csv", self.log.write_csv(&dir.join("measurements.csv")))?;
        match &self.policy {
            Policy::Ergodic { rows, .. } => put("controller.csv", write_step_log(&dir.join("controller.csv"), rows))?,
            Policy::Eer { selections, .. } => {
                put("eer_targets.csv", write_selections(&dir.join("eer_targets.csv"), selections))?
            }
        }
        let mut index = String::from("t,kind,file\n");
        for s in &self.snapshots {
            let name = format!("snapshots/{}_{:07.2}.csv", s.kind, s.t);
            put(&name, s.field.write_csv(&dir.join(&name)))?;
            index.push_str(&format!("{},{},{}\n", crate::domain::format_f64(s.t), s.kind, name));
        }
        put("snapshots/index.csv", write_file(&dir.join("snapshots/index.csv"), index.as_bytes()))?;
        match &self.belief {
            BeliefState::Mapping { field, .. } => {
                put("likelihood_final.csv", field.write_csv(&dir.join("likelihood_final.csv")))?
            }
            BeliefState::Localizing {
                field,
                estimates,
                snapshots,
                ..
            } => {
                put("likelihood_model.csv", field.write_csv(&dir.join("likelihood_model.csv")))?;
                put("particles.csv", snapshots.write_csv(&dir.join("particles.csv")))?;
                put("estimates.csv", write_estimate_log(&dir.join("estimates.csv"), estimates))?;
            }
            BeliefState::Fixed => {}
        }
        Ok(files)
    }
}

fn write_selections(path: &Path, rows: &[(f64, Vec<f64>, f64)]) -> Result<()> {
    let v = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("t");
    for i in 1..=v {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",reduction\n");
    for (t, g, r) in rows {
        let mut fields = vec![crate::domain::format_f64(*t)];
        fields.extend(g.iter().map(|x| crate::domain::format_f64(*x)));
        fields.push(crate::domain::format_f64(*r));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn execute(config: &RunConfig, fixed_target: bool) -> Result<RunArtifacts> {
    let mut sim = Sim::new(config, fixed_target)?;
    info!(
        "{} run ({} policy), seed {}, t_f = {}",
        config.stage.name(),
        sim.policy_name(),
        config.seed,
        config.t_final()
    );
    let outcome = sim.run().and_then(|_| sim.metrics());
    let dir = config.output_dir.clone();
    let metrics = match outcome {
        Ok(m) => m,
        Err(e) => {
            if let Some(d) = &dir {
                if let Err(w) = sim.write_logs(d) {
                    warn!("could not write partial artifacts: {w}");
                }
                write_error_record(d, &e)?;
            }
            return Err(e);
        }
    };
    let bytes = metrics_bytes(&metrics)?;
    let checksum = sha256_hex(&bytes);
    let mut files = Vec::new();
    if let Some(d) = &dir {
        files = sim.write_logs(d)?;
        write_file(&d.join(METRICS_FILE), &bytes)?;
        files.push(METRICS_FILE.into());
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            stage: metrics.stage.clone(),
            seed: config.seed,
            config: sim.config.clone(),
            files: files.clone(),
            metrics_sha256: checksum.clone(),
        };
        write_file(&d.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    }
    info!(
        "done: {} measurements, {} objects contacted, coverage {:.2}",
        metrics.measurements, metrics.objects_contacted, metrics.coverage_fraction
    );
    Ok(RunArtifacts {
        metrics,
        checksum,
        output_dir: dir,
        files,
    })
}

/// Runs whichever stage the config names.
pub fn run(config: &RunConfig) -> Result<RunArtifacts> {
    execute(config, false)
}

/// Builds the contact likelihood from scratch (ergodic or greedy policy).
pub fn run_explore(config: &RunConfig) -> Result<RunArtifacts> {
    if config.stage.is_localization() {
        return Err(Error::InvalidConfig(format!("stage {} is not an exploration stage", config.stage.name())));
    }
    execute(config, false)
}

/// Localizes the scene transform with a fixed likelihood field.
pub fn run_localize(config: &RunConfig) -> Result<RunArtifacts> {
    if !config.stage.is_localization() {
        return Err(Error::InvalidConfig(format!("stage {} is not a localization stage", config.stage.name())));
    }
    execute(config, false)
}

/// Ergodic exploration of a fixed uniform target with no learning; used to
/// check coverage.
pub fn run_coverage(config: &RunConfig) -> Result<RunArtifacts> {
    let mut c = config.clone();
    c.stage = Stage::Explore;
    execute(&c, true)
}

/// Per-policy summary in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub stage: String,
    pub policy: String,
    pub objects_contacted: usize,
    pub coverage_fraction: f64,
    pub auc: Option<f64>,
    pub final_entropy: Option<f64>,
    pub theta_error: Option<[f64; 3]>,
    pub metrics_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub t_final: f64,
    pub methods: Vec<MethodSummary>,
}

impl ComparisonReport {
    pub fn get(&self, stage: Stage) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.stage == stage.name())
    }
}

/// Ergodic and greedy policies on the same scene and seed. `config.stage`
/// picks the task; both policies of that task run, plus the localization
/// pair when `with_localization` is set.
pub fn run_comparison(config: &RunConfig, with_localization: bool) -> Result<ComparisonReport> {
    let mut stages = vec![Stage::Explore, Stage::EerExplore];
    if with_localization {
        stages.extend([Stage::Localize, Stage::EerLocalize]);
    }
    let mut methods = Vec::new();
    for stage in stages {
        let mut c = config.clone();
        c.stage = stage;
        c.output_dir = config.output_dir.as_ref().map(|d| d.join(stage.name()));
        if stage.is_localization() && config.scene.is_none() && config.scene_file.is_none() {
            c.scene = None;
        }
        let a = execute(&c, false)?;
        methods.push(MethodSummary {
            stage: stage.name().into(),
            policy: a.metrics.policy.clone(),
            objects_contacted: a.metrics.objects_contacted,
            coverage_fraction: a.metrics.coverage_fraction,
            auc: a.metrics.auc,
            final_entropy: a.metrics.final_entropy,
            theta_error: a.metrics.theta_error,
            metrics_sha256: a.checksum,
        });
    }
    let report = ComparisonReport {
        seed: config.seed,
        t_final: config.t_final(),
        methods,
    };
    if let Some(d) = &config.output_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        write_file(&d.join("comparison.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

/// Result of re-reading a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub checksum_ok: bool,
    pub files_checked: usize,
    /// AUC recomputed from the exported final field.
    pub auc: Option<f64>,
    /// Pose error recomputed from the last estimate-log row.
    pub theta_error: Option<[f64; 3]>,
    pub metrics: RunMetrics,
}

/// Re-parses every artifact listed in the manifest with this crate's
/// readers, checks the metrics checksum and recomputes the headline
/// numbers.
pub fn eval(dir: &Path) -> Result<EvalReport> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse("manifest", &manifest_path, e.to_string()))?;
    let metrics_path = dir.join(METRICS_FILE);
    let bytes = std::fs::read(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let checksum_ok = sha256_hex(&bytes) == manifest.metrics_sha256;
    let metrics: RunMetrics =
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("metrics", &metrics_path, e.to_string()))?;
    let scene_config = manifest.config.resolved_scene()?;
    let scene = scene_config.scene()?;
    let floor = manifest.config.likelihood.probability_floor;
    let m = scene.domain().dims();

    let mut auc = None;
    let mut theta_error = None;
    for name in &manifest.files {
        let path = dir.join(name);
        match name.as_str() {
            "trajectory.csv" => {
                Trajectory::read_csv(&path)?.validate()?;
            }
            "measurements.csv" => {
                MeasurementLog::read_csv(&path)?;
            }
            "controller.csv" => {
                read_step_log(&path, m)?;
            }
            "eer_targets.csv" => {
                crate::filter::read_numeric_rows(&path, "baseline targets", m + 2)?;
            }
            "particles.csv" => {
                crate::filter::ParticleSnapshots::read_csv(&path)?;
            }
            "estimates.csv" => {
                let rows = read_estimate_log(&path)?;
                if let Some((_, est)) = rows.last() {
                    theta_error = Some(pose_error(&est.mean, &scene_config.transform.as_array()));
                }
            }
            "likelihood_final.csv" => {
                let field = LikelihoodField::read_csv(&path, floor)?;
                auc = field_auc(&field, &scene, &scene_config.transform);
            }
            "snapshots/index.csv" => {
                std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
            METRICS_FILE => {}
            _ if name.ends_with(".csv") => {
                GridField::read_csv(&path)?;
            }
            _ => return Err(Error::parse("manifest", &manifest_path, format!("unknown artifact {name}"))),
        }
    }
    Ok(EvalReport {
        stage: manifest.stage,
        checksum_ok,
        files_checked: manifest.files.len(),
        auc,
        theta_error,
        metrics,
    })
}
