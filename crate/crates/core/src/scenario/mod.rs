//! Procedural synthetic driving micro-world.
//!
//! A scenario is built in the ego frame at the current instant: the ego sits
//! at the origin heading along +x, which maps to grid cell `(H/2, W/2)` with
//! heading along the +row axis. Road geometry follows a curvature profile
//! per template, agents follow the lane centerline at fixed lateral offsets,
//! and semantic grids are rasterized at the current and every future step.
//!
//! Generation is a pure function of `(spec, template params, seed)`.

pub mod dataset;

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_DRIVABLE: u8 = 1;
pub const CLASS_LANE_MARKING: u8 = 2;
pub const CLASS_AGENT: u8 = 3;

/// Fine sampling step (meters of arc length) for the lane centerline.
const PATH_DS: f64 = 0.05;
/// Kept clear between the furthest ego waypoint and the grid border.
const BORDER_MARGIN_M: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("template `{template}` does not fit the grid extent ({detail})")]
    GeometryOutOfBounds { template: String, detail: String },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Template {
    Straight,
    LeftTurn,
    RightTurn,
    Curve,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Straight,
        Template::LeftTurn,
        Template::RightTurn,
        Template::Curve,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::LeftTurn => "left_turn",
            Template::RightTurn => "right_turn",
            Template::Curve => "curve",
        }
    }

    pub fn from_str(s: &str) -> Option<Template> {
        Template::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    pub fn from_tag(tag: u8) -> Option<Template> {
        Template::ALL.get(tag as usize).copied()
    }

    pub fn tag(&self) -> u8 {
        Template::ALL.iter().position(|t| t == self).unwrap() as u8
    }

    /// One-hot driving command: [left, straight, right].
    pub fn command(&self) -> [f64; 3] {
        match self {
            Template::LeftTurn => [1.0, 0.0, 0.0],
            Template::Straight | Template::Curve => [0.0, 1.0, 0.0],
            Template::RightTurn => [0.0, 0.0, 1.0],
        }
    }
}

/// Static description of the grid world and horizons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldSpec {
    /// Cells per side of the square grid.
    pub grid_size: usize,
    /// Meters per cell.
    pub cell_size: f64,
    /// Sample rate in Hz.
    pub rate_hz: f64,
    /// History steps T_h (including the current position).
    pub history_len: usize,
    /// Future steps T_f.
    pub future_len: usize,
    /// Semantic class count.
    pub num_classes: usize,
    /// Agent slots per scenario.
    pub max_agents: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            grid_size: 64,
            cell_size: 0.5,
            rate_hz: 2.0,
            history_len: 4,
            future_len: 8,
            num_classes: 4,
            max_agents: 4,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.grid_size == 0 {
            return Err(ScenarioError::InvalidSpec("grid_size must be > 0".into()));
        }
        if self.cell_size <= 0.0 {
            return Err(ScenarioError::InvalidSpec("cell_size must be > 0".into()));
        }
        if self.rate_hz <= 0.0 {
            return Err(ScenarioError::InvalidSpec("rate_hz must be > 0".into()));
        }
        if self.history_len < 2 {
            return Err(ScenarioError::InvalidSpec(
                "history_len must be >= 2 (displacements need a predecessor)".into(),
            ));
        }
        if self.future_len == 0 {
            return Err(ScenarioError::InvalidSpec("future_len must be >= 1".into()));
        }
        if self.num_classes < 4 {
            return Err(ScenarioError::InvalidSpec(
                "num_classes must cover background/drivable/marking/agent".into(),
            ));
        }
        Ok(())
    }

    /// Half side length in meters; the grid covers `[-extent, extent)`.
    pub fn extent(&self) -> f64 {
        self.grid_size as f64 * self.cell_size / 2.0
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    /// Cell of an ego-frame point, or None when outside the grid.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let h = self.grid_size as f64;
        let r = (h / 2.0 + p.x / self.cell_size).floor();
        let c = (h / 2.0 + p.y / self.cell_size).floor();
        if r < 0.0 || c < 0.0 || r >= h || c >= h {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Center of a cell in ego-frame meters.
    pub fn cell_center(&self, r: usize, c: usize) -> Vec2 {
        let h = self.grid_size as f64 / 2.0;
        Vec2 {
            x: (r as f64 + 0.5 - h) * self.cell_size,
            y: (c as f64 + 0.5 - h) * self.cell_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, o: Vec2) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

/// Oriented rectangle used for agent footprints and collision checks.
#[derive(Clone, Copy, Debug)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn contains(&self, p: Vec2) -> bool {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let (sin, cos) = self.heading.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }

    fn corners(&self) -> [Vec2; 4] {
        let (sin, cos) = self.heading.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let mut out = [Vec2::default(); 4];
        for (i, (du, dv)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
            .into_iter()
            .enumerate()
        {
            out[i] = Vec2 {
                x: self.center.x + du * cos - dv * sin,
                y: self.center.y + du * sin + dv * cos,
            };
        }
        out
    }

    /// Separating-axis overlap test between two oriented rectangles.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        for rect in [self, other] {
            let (sin, cos) = rect.heading.sin_cos();
            for axis in [Vec2::new(cos, sin), Vec2::new(-sin, cos)] {
                let proj = |pts: &[Vec2; 4]| {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for p in pts {
                        let d = p.x * axis.x + p.y * axis.y;
                        lo = lo.min(d);
                        hi = hi.max(d);
                    }
                    (lo, hi)
                };
                let (a0, a1) = proj(&ca);
                let (b0, b1) = proj(&cb);
                if a1 < b0 || b1 < a0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Curvature profile kappa(t) of the ego/lane geometry, t in seconds
/// relative to the current instant.
#[derive(Clone, Copy, Debug)]
pub enum KappaProfile {
    Constant(f64),
    /// `amp * sin(omega * t + phase)`.
    Sine { amp: f64, omega: f64, phase: f64 },
}

impl KappaProfile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            KappaProfile::Constant(k) => k,
            KappaProfile::Sine { amp, omega, phase } => amp * (omega * t + phase).sin(),
        }
    }
}

/// Resolved geometry and motion parameters of one scenario.
#[derive(Clone, Debug)]
pub struct TemplateParams {
    pub template: Template,
    pub speed: f64,
    pub kappa: KappaProfile,
    pub lane_width: f64,
    pub num_lanes: usize,
    pub agents: Vec<AgentTrack>,
}

/// Scripted lane-following agent: fixed lateral offset, constant speed.
#[derive(Clone, Copy, Debug)]
pub struct AgentTrack {
    /// Arc-length position along the lane centerline at t = 0.
    pub arc0: f64,
    /// Lateral offset from the ego-lane centerline (+ left).
    pub lane_offset: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentTrack {
    fn pose_at(&self, path: &CenterPath, t: f64) -> (Vec2, f64) {
        let s = self.arc0 + self.speed * t;
        let (p, heading) = path.offset_point(s, self.lane_offset);
        (p, heading)
    }
}

/// Densely sampled lane centerline with arc-length lookup.
#[derive(Clone, Debug)]
pub struct CenterPath {
    s_min: f64,
    ds: f64,
    /// (position, heading) samples.
    pts: Vec<(Vec2, f64)>,
}

impl CenterPath {
    pub fn empty() -> Self {
        Self {
            s_min: 0.0,
            ds: PATH_DS,
            pts: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn samples(&self) -> &[(Vec2, f64)] {
        &self.pts
    }

    /// Build by integrating a curvature profile with a fine unicycle
    /// stepper from `s_back` meters behind the origin to `s_fwd` ahead.
    /// Arc position s corresponds to time t = s / speed.
    fn from_kappa(kappa: &KappaProfile, speed: f64, s_back: f64, s_fwd: f64) -> Self {
        let n_back = (s_back / PATH_DS).ceil() as usize;
        let n_fwd = (s_fwd / PATH_DS).ceil() as usize;
        let dt = PATH_DS / speed;
        let mut back = Vec::with_capacity(n_back);
        let mut pos = Vec2::default();
        let mut heading = 0.0f64;
        for i in 0..n_back {
            let t = -(i as f64) * dt;
            let k = kappa.at(t - dt / 2.0);
            let mid = heading - k * speed * dt / 2.0;
            pos = Vec2::new(pos.x - PATH_DS * mid.cos(), pos.y - PATH_DS * mid.sin());
            heading -= k * speed * dt;
            back.push((pos, heading));
        }
        let mut pts: Vec<(Vec2, f64)> = back.into_iter().rev().collect();
        let mut pos = Vec2::default();
        let mut heading = 0.0f64;
        pts.push((pos, heading));
        for i in 0..n_fwd {
            let t = i as f64 * dt;
            let k = kappa.at(t + dt / 2.0);
            let mid = heading + k * speed * dt / 2.0;
            pos = Vec2::new(pos.x + PATH_DS * mid.cos(), pos.y + PATH_DS * mid.sin());
            heading += k * speed * dt;
            pts.push((pos, heading));
        }
        Self {
            s_min: -(n_back as f64) * PATH_DS,
            ds: PATH_DS,
            pts,
        }
    }

    /// Nearest-sample lookup by arc length (clamped to the sampled range).
    pub fn point_at(&self, s: f64) -> (Vec2, f64) {
        assert!(!self.pts.is_empty(), "empty centerline");
        let idx = ((s - self.s_min) / self.ds).round();
        let idx = idx.clamp(0.0, (self.pts.len() - 1) as f64) as usize;
        self.pts[idx]
    }

    /// Point at arc length `s`, shifted laterally by `offset` (+ left).
    pub fn offset_point(&self, s: f64, offset: f64) -> (Vec2, f64) {
        let (p, heading) = self.point_at(s);
        let (sin, cos) = heading.sin_cos();
        (Vec2::new(p.x - offset * sin, p.y + offset * cos), heading)
    }
}

/// Fully resolved world state; everything needed to rasterize any instant.
#[derive(Clone, Debug)]
pub struct World {
    pub path: CenterPath,
    pub lane_width: f64,
    pub num_lanes: usize,
    pub agents: Vec<AgentTrack>,
    /// Ego poses at step indices `-(T_h-1) ..= T_f`, flattened so that
    /// `ego_poses[history_len - 1]` is the current pose (origin).
    pub ego_poses: Vec<(Vec2, f64)>,
    pub ego_speed: f64,
    history_len: usize,
}

impl World {
    /// Pose of the ego at a step index (0 = current, positive = future).
    pub fn ego_pose(&self, step: i64) -> (Vec2, f64) {
        let idx = (self.history_len as i64 - 1 + step) as usize;
        self.ego_poses[idx]
    }
}

/// Rasterize the semantic grid at `step` steps after the current instant
/// (step 0 = now). Road geometry is static in the current ego frame; agents
/// advance along their tracks. The ego is never drawn. Anything outside the
/// grid is silently clipped.
pub fn render_bev(world: &World, spec: &WorldSpec, step: usize) -> Array2<u8> {
    let h = spec.grid_size;
    let mut grid = Array2::<u8>::zeros((h, h));
    let t = step as f64 * spec.dt();

    if !world.path.is_empty() {
        // Drivable band: union of discs of radius lane_width/2 stamped
        // along each lane centerline.
        for lane in 0..world.num_lanes {
            let offset = lane as f64 * world.lane_width;
            stamp_path(
                &mut grid,
                spec,
                world,
                offset,
                world.lane_width / 2.0,
                CLASS_DRIVABLE,
                None,
            );
        }
        // Dashed divider between lanes, solid edge lines.
        let half = world.lane_width / 2.0;
        for lane in 1..world.num_lanes {
            stamp_path(
                &mut grid,
                spec,
                world,
                (lane as f64 - 0.5) * world.lane_width,
                0.18,
                CLASS_LANE_MARKING,
                Some((2.0, 2.0)),
            );
        }
        let top = (world.num_lanes as f64 - 1.0) * world.lane_width + half;
        for edge in [-half, top] {
            stamp_path(&mut grid, spec, world, edge, 0.18, CLASS_LANE_MARKING, None);
        }
    }

    for agent in &world.agents {
        let (center, heading) = agent.pose_at(&world.path, t);
        let rect = OrientedRect {
            center,
            heading,
            length: agent.length,
            width: agent.width,
        };
        stamp_rect(&mut grid, spec, &rect, CLASS_AGENT);
    }
    grid
}

/// Debug rendering of the frame convention: the current grid plus a marker
/// at the ego cell and one meter ahead along the ego heading.
pub fn render_bev_with_ego_marker(world: &World, spec: &WorldSpec, step: usize) -> Array2<u8> {
    let mut grid = render_bev(world, spec, step);
    let (pos, heading) = world.ego_pose(step as i64);
    let ahead = Vec2::new(pos.x + heading.cos(), pos.y + heading.sin());
    for p in [pos, ahead] {
        if let Some((r, c)) = spec.cell_of(p) {
            grid[[r, c]] = CLASS_AGENT;
        }
    }
    grid
}

fn stamp_path(
    grid: &mut Array2<u8>,
    spec: &WorldSpec,
    world: &World,
    offset: f64,
    radius: f64,
    class: u8,
    dash: Option<(f64, f64)>,
) {
    let ds = world.path.ds;
    for (i, _) in world.path.pts.iter().enumerate() {
        let s = world.path.s_min + i as f64 * ds;
        if let Some((on, off)) = dash {
            let phase = s.rem_euclid(on + off);
            if phase >= on {
                continue;
            }
        }
        let (p, _) = world.path.offset_point(s, offset);
        stamp_disc(grid, spec, p, radius, class);
    }
}

fn stamp_disc(grid: &mut Array2<u8>, spec: &WorldSpec, center: Vec2, radius: f64, class: u8) {
    let h = spec.grid_size as i64;
    let half = spec.grid_size as f64 / 2.0;
    let r0 = ((half + (center.x - radius) / spec.cell_size).floor() as i64).max(0);
    let r1 = ((half + (center.x + radius) / spec.cell_size).ceil() as i64).min(h - 1);
    let c0 = ((half + (center.y - radius) / spec.cell_size).floor() as i64).max(0);
    let c1 = ((half + (center.y + radius) / spec.cell_size).ceil() as i64).min(h - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let cc = spec.cell_center(r as usize, c as usize);
            if cc.dist(center) <= radius {
                grid[[r as usize, c as usize]] = class;
            }
        }
    }
}

fn stamp_rect(grid: &mut Array2<u8>, spec: &WorldSpec, rect: &OrientedRect, class: u8) {
    let radius = (rect.length.powi(2) + rect.width.powi(2)).sqrt() / 2.0;
    let h = spec.grid_size as i64;
    let half = spec.grid_size as f64 / 2.0;
    let r0 = ((half + (rect.center.x - radius) / spec.cell_size).floor() as i64).max(0);
    let r1 = ((half + (rect.center.x + radius) / spec.cell_size).ceil() as i64).min(h - 1);
    let c0 = ((half + (rect.center.y - radius) / spec.cell_size).floor() as i64).max(0);
    let c1 = ((half + (rect.center.y + radius) / spec.cell_size).ceil() as i64).min(h - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if rect.contains(spec.cell_center(r as usize, c as usize)) {
                grid[[r as usize, c as usize]] = class;
            }
        }
    }
}

/// One labeled sample of the micro-world.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRecord {
    pub scenario_id: String,
    pub template: Template,
    /// Semantic grid at the current instant, `[H, W]`.
    pub bev_current: Array2<u8>,
    /// Semantic grids at every future step, `[T_f, H, W]`.
    pub bev_future: Array3<u8>,
    /// Ego history in ego-centric meters, `[T_h, 2]`; last row is (0,0).
    pub history: Array2<f64>,
    /// Ground-truth ego future, `[T_f, 2]`.
    pub gt_future: Array2<f64>,
    /// `[vx, vy, ax, ay, cmd_left, cmd_straight, cmd_right]`.
    pub ego_status: Array1<f64>,
    /// Agent states at the current instant, `[max_agents, 5]`:
    /// `(x, y, heading, speed, valid)`.
    pub agents: Array2<f64>,
    /// Agent states at each future step, `[T_f, max_agents, 5]`.
    pub agents_future: Array3<f64>,
}

impl ScenarioRecord {
    pub fn command(&self) -> [f64; 3] {
        [self.ego_status[4], self.ego_status[5], self.ego_status[6]]
    }
}

/// Ego waypoints by discrete unicycle stepping at the sample rate, so the
/// distance between consecutive waypoints is exactly `speed * dt`.
fn ego_waypoints(
    spec: &WorldSpec,
    speed: f64,
    kappa: &KappaProfile,
) -> (Vec<(Vec2, f64)>, Vec<(Vec2, f64)>) {
    let dt = spec.dt();
    // History: step backwards from the origin.
    let mut hist = vec![(Vec2::default(), 0.0f64)];
    let mut pos = Vec2::default();
    let mut heading = 0.0f64;
    for i in 0..spec.history_len - 1 {
        let t = -(i as f64) * dt;
        let k = kappa.at(t - dt / 2.0);
        let mid = heading - k * speed * dt / 2.0;
        pos = Vec2::new(
            pos.x - speed * dt * mid.cos(),
            pos.y - speed * dt * mid.sin(),
        );
        heading -= k * speed * dt;
        hist.push((pos, heading));
    }
    hist.reverse();
    // Future: step forwards.
    let mut fut = Vec::with_capacity(spec.future_len);
    let mut pos = Vec2::default();
    let mut heading = 0.0f64;
    for i in 0..spec.future_len {
        let t = i as f64 * dt;
        let k = kappa.at(t + dt / 2.0);
        let mid = heading + k * speed * dt / 2.0;
        pos = Vec2::new(
            pos.x + speed * dt * mid.cos(),
            pos.y + speed * dt * mid.sin(),
        );
        heading += k * speed * dt;
        fut.push((pos, heading));
    }
    (hist, fut)
}

/// Build the full world state from resolved parameters. Errors if the ego
/// future leaves the grid extent.
pub fn build_world(spec: &WorldSpec, params: &TemplateParams) -> Result<World, ScenarioError> {
    spec.validate()?;
    let (hist, fut) = ego_waypoints(spec, params.speed, &params.kappa);
    for (p, _) in &fut {
        if spec.cell_of(*p).is_none() {
            return Err(ScenarioError::GeometryOutOfBounds {
                template: params.template.as_str().into(),
                detail: format!("future waypoint ({:.2}, {:.2}) outside grid", p.x, p.y),
            });
        }
    }
    let horizon = spec.future_len as f64 * spec.dt() * params.speed;
    let hist_extent = spec.history_len as f64 * spec.dt() * params.speed;
    let agent_reach = params
        .agents
        .iter()
        .map(|a| a.arc0.abs() + a.speed * spec.future_len as f64 * spec.dt())
        .fold(0.0, f64::max);
    let s_fwd = (horizon + agent_reach).max(2.0 * spec.extent()) + 5.0;
    let s_back = (hist_extent + agent_reach).max(spec.extent()) + 5.0;
    let path = CenterPath::from_kappa(&params.kappa, params.speed, s_back, s_fwd);
    let mut ego_poses = hist;
    ego_poses.extend(fut);
    Ok(World {
        path,
        lane_width: params.lane_width,
        num_lanes: params.num_lanes,
        agents: params.agents.clone(),
        ego_poses,
        ego_speed: params.speed,
        history_len: spec.history_len,
    })
}

/// Assemble a record from a built world.
pub fn record_from_world(
    spec: &WorldSpec,
    world: &World,
    params: &TemplateParams,
    scenario_id: String,
) -> ScenarioRecord {
    let th = spec.history_len;
    let tf = spec.future_len;
    let mut history = Array2::<f64>::zeros((th, 2));
    for i in 0..th {
        let (p, _) = world.ego_poses[i];
        history[[i, 0]] = p.x;
        history[[i, 1]] = p.y;
    }
    let mut gt_future = Array2::<f64>::zeros((tf, 2));
    for i in 0..tf {
        let (p, _) = world.ego_poses[th + i];
        gt_future[[i, 0]] = p.x;
        gt_future[[i, 1]] = p.y;
    }

    let bev_current = render_bev(world, spec, 0);
    let h = spec.grid_size;
    let mut bev_future = Array3::<u8>::zeros((tf, h, h));
    for s in 1..=tf {
        bev_future
            .index_axis_mut(ndarray::Axis(0), s - 1)
            .assign(&render_bev(world, spec, s));
    }

    let mut agents = Array2::<f64>::zeros((spec.max_agents, 5));
    let mut agents_future = Array3::<f64>::zeros((tf, spec.max_agents, 5));
    for (slot, track) in world.agents.iter().enumerate().take(spec.max_agents) {
        let (p, heading) = track.pose_at(&world.path, 0.0);
        agents[[slot, 0]] = p.x;
        agents[[slot, 1]] = p.y;
        agents[[slot, 2]] = heading;
        agents[[slot, 3]] = track.speed;
        agents[[slot, 4]] = 1.0;
        for s in 1..=tf {
            let (p, heading) = track.pose_at(&world.path, s as f64 * spec.dt());
            agents_future[[s - 1, slot, 0]] = p.x;
            agents_future[[s - 1, slot, 1]] = p.y;
            agents_future[[s - 1, slot, 2]] = heading;
            agents_future[[s - 1, slot, 3]] = track.speed;
            agents_future[[s - 1, slot, 4]] = 1.0;
        }
    }

    let cmd = params.template.command();
    let kappa0 = params.kappa.at(0.0);
    let ego_status = Array1::from(vec![
        params.speed,
        0.0,
        0.0,
        params.speed * params.speed * kappa0,
        cmd[0],
        cmd[1],
        cmd[2],
    ]);

    ScenarioRecord {
        scenario_id,
        template: params.template,
        bev_current,
        bev_future,
        history,
        gt_future,
        ego_status,
        agents,
        agents_future,
    }
}

/// Speed range that keeps the ego future inside the grid with margin.
fn speed_range(spec: &WorldSpec) -> Result<(f64, f64), ScenarioError> {
    let horizon_s = spec.future_len as f64 * spec.dt();
    let vmax = ((spec.extent() - BORDER_MARGIN_M) / horizon_s).min(3.5);
    if vmax < 0.5 {
        return Err(ScenarioError::GeometryOutOfBounds {
            template: "any".into(),
            detail: format!(
                "grid extent {:.1} m cannot hold a {horizon_s:.1} s future",
                spec.extent()
            ),
        });
    }
    Ok((0.55 * vmax, vmax))
}

/// Sample resolved parameters for a template. Draw order is fixed so the
/// same seed yields mirrored geometry for left vs right turns.
pub fn sample_params(
    spec: &WorldSpec,
    template: Template,
    rng_stream: &mut ChaCha8Rng,
) -> Result<TemplateParams, ScenarioError> {
    let (vlo, vhi) = speed_range(spec)?;
    let speed = rng::uniform(rng_stream, vlo, vhi);
    let radius = rng::uniform(rng_stream, 8.0, 14.0);
    let curve_amp = rng::uniform(rng_stream, 0.03, 0.07);
    let curve_phase = rng::uniform(rng_stream, 0.0, std::f64::consts::TAU);
    let kappa = match template {
        Template::Straight => KappaProfile::Constant(0.0),
        Template::LeftTurn => KappaProfile::Constant(1.0 / radius),
        Template::RightTurn => KappaProfile::Constant(-1.0 / radius),
        Template::Curve => KappaProfile::Sine {
            amp: curve_amp,
            omega: std::f64::consts::TAU / 9.0,
            phase: curve_phase,
        },
    };
    let lane_width = 3.5;
    let num_agents = rng::uniform_usize(rng_stream, spec.max_agents + 1);
    let mut agents = Vec::new();
    for slot in 0..num_agents {
        // Slot roles keep ground-truth futures collision free: the lead
        // never closes on the ego, the trailer falls behind, adjacent-lane
        // traffic keeps a full lane of lateral separation and its own
        // front-to-back ordering.
        let track = match slot {
            0 => AgentTrack {
                arc0: rng::uniform(rng_stream, 8.5, 12.0),
                lane_offset: 0.0,
                speed: speed * rng::uniform(rng_stream, 1.0, 1.3),
                length: rng::uniform(rng_stream, 3.6, 4.6),
                width: rng::uniform(rng_stream, 1.6, 2.0),
            },
            1 => AgentTrack {
                arc0: rng::uniform(rng_stream, -12.0, -8.0),
                lane_offset: 0.0,
                speed: speed * rng::uniform(rng_stream, 0.6, 1.0),
                length: rng::uniform(rng_stream, 3.6, 4.6),
                width: rng::uniform(rng_stream, 1.6, 2.0),
            },
            2 => AgentTrack {
                arc0: rng::uniform(rng_stream, -6.0, 10.0),
                lane_offset: lane_width,
                speed: speed * rng::uniform(rng_stream, 1.0, 1.2),
                length: rng::uniform(rng_stream, 3.6, 4.6),
                width: rng::uniform(rng_stream, 1.6, 2.0),
            },
            _ => AgentTrack {
                arc0: rng::uniform(rng_stream, -20.0, -14.0),
                lane_offset: lane_width,
                speed: speed * rng::uniform(rng_stream, 0.7, 1.0),
                length: rng::uniform(rng_stream, 3.6, 4.6),
                width: rng::uniform(rng_stream, 1.6, 2.0),
            },
        };
        agents.push(track);
    }
    Ok(TemplateParams {
        template,
        speed,
        kappa,
        lane_width,
        num_lanes: 2,
        agents,
    })
}

/// Generate one scenario deterministically from `(spec, template, seed)`.
pub fn generate_scenario(
    spec: &WorldSpec,
    template: Template,
    seed: u64,
) -> Result<ScenarioRecord, ScenarioError> {
    let mut stream = rng::rng_from_seed(seed);
    let params = sample_params(spec, template, &mut stream)?;
    let world = build_world(spec, &params)?;
    let id = format!("{}-{seed:016x}", template.as_str());
    Ok(record_from_world(spec, &world, &params, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_params(speed: f64) -> TemplateParams {
        TemplateParams {
            template: Template::Straight,
            speed,
            kappa: KappaProfile::Constant(0.0),
            lane_width: 3.5,
            num_lanes: 2,
            agents: vec![],
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = WorldSpec::default();
        let a = generate_scenario(&spec, Template::Straight, 7).unwrap();
        let b = generate_scenario(&spec, Template::Straight, 7).unwrap();
        assert_eq!(a, b, "same (spec, template, seed) must be bit-identical");
    }

    #[test]
    fn straight_waypoints_spaced_by_speed_over_rate() {
        // 4 m/s at 2 Hz => 2.0 m spacing; widen the grid so the 16 m
        // endpoint stays inside.
        let spec = WorldSpec {
            grid_size: 128,
            ..WorldSpec::default()
        };
        let params = straight_params(4.0);
        let world = build_world(&spec, &params).unwrap();
        let rec = record_from_world(&spec, &world, &params, "t".into());
        let mut prev = Vec2::default();
        for i in 0..spec.future_len {
            let p = Vec2::new(rec.gt_future[[i, 0]], rec.gt_future[[i, 1]]);
            assert!((p.dist(prev) - 2.0).abs() < 1e-9, "step {i}: {}", p.dist(prev));
            assert!(p.y.abs() < 1e-12, "straight template stays on axis");
            prev = p;
        }
    }

    #[test]
    fn differentiating_future_recovers_speed_profile() {
        let spec = WorldSpec::default();
        for template in Template::ALL {
            for seed in [1u64, 9, 77] {
                let mut stream = rng::rng_from_seed(seed);
                let params = sample_params(&spec, template, &mut stream).unwrap();
                let rec = generate_scenario(&spec, template, seed).unwrap();
                let mut prev = Vec2::default();
                for i in 0..spec.future_len {
                    let p = Vec2::new(rec.gt_future[[i, 0]], rec.gt_future[[i, 1]]);
                    let v = p.dist(prev) * spec.rate_hz;
                    assert!(
                        (v - params.speed).abs() < 1e-6,
                        "{template:?} seed {seed} step {i}: {v} vs {}",
                        params.speed
                    );
                    prev = p;
                }
            }
        }
    }

    #[test]
    fn left_and_right_turns_mirror_lateral_sign() {
        let spec = WorldSpec::default();
        for seed in 0..8u64 {
            let l = generate_scenario(&spec, Template::LeftTurn, seed).unwrap();
            let r = generate_scenario(&spec, Template::RightTurn, seed).unwrap();
            let last = spec.future_len - 1;
            let ly = l.gt_future[[last, 1]];
            let ry = r.gt_future[[last, 1]];
            assert!(ly > 0.0, "left turn bends to +y, got {ly}");
            assert!(ry < 0.0, "right turn bends to -y, got {ry}");
        }
    }

    #[test]
    fn futures_contained_and_history_anchored() {
        let spec = WorldSpec::default();
        for template in Template::ALL {
            for seed in 0..16u64 {
                let rec = generate_scenario(&spec, template, seed).unwrap();
                let th = spec.history_len;
                assert_eq!(rec.history[[th - 1, 0]], 0.0);
                assert_eq!(rec.history[[th - 1, 1]], 0.0);
                for i in 0..spec.future_len {
                    let p = Vec2::new(rec.gt_future[[i, 0]], rec.gt_future[[i, 1]]);
                    assert!(spec.cell_of(p).is_some(), "{template:?}/{seed} wp {i} outside");
                }
                for v in rec.bev_current.iter() {
                    assert!((*v as usize) < spec.num_classes);
                }
            }
        }
    }

    #[test]
    fn empty_world_renders_background_only() {
        let spec = WorldSpec::default();
        let world = World {
            path: CenterPath::empty(),
            lane_width: 3.5,
            num_lanes: 2,
            agents: vec![],
            ego_poses: vec![(Vec2::default(), 0.0); spec.history_len + spec.future_len],
            ego_speed: 1.0,
            history_len: spec.history_len,
        };
        let grid = render_bev(&world, &spec, 0);
        assert!(grid.iter().all(|&c| c == CLASS_BACKGROUND));
    }

    #[test]
    fn axis_aligned_agent_covers_exact_cell_count() {
        // 2.0 x 1.0 m footprint at 0.5 m cells: 4 x 2 = 8 cells.
        let spec = WorldSpec::default();
        let world = World {
            path: CenterPath::from_kappa(&KappaProfile::Constant(0.0), 2.0, 10.0, 10.0),
            lane_width: 3.5,
            num_lanes: 2,
            agents: vec![AgentTrack {
                arc0: 0.0,
                lane_offset: 0.0,
                speed: 0.0,
                length: 2.0,
                width: 1.0,
            }],
            ego_poses: vec![(Vec2::default(), 0.0); spec.history_len + spec.future_len],
            ego_speed: 2.0,
            history_len: spec.history_len,
        };
        let grid = render_bev(&world, &spec, 0);
        let count = grid.iter().filter(|&&c| c == CLASS_AGENT).count();
        assert_eq!(count, 8);
    }

    #[test]
    fn ego_never_rendered_in_future_maps() {
        // A scenario without agents has no agent-class cells in any future
        // grid, in particular none where the ego will be.
        let spec = WorldSpec::default();
        let params = straight_params(3.0);
        let world = build_world(&spec, &params).unwrap();
        let rec = record_from_world(&spec, &world, &params, "t".into());
        assert!(rec.bev_future.iter().all(|&c| c != CLASS_AGENT));
    }

    #[test]
    fn frame_convention_marker() {
        let spec = WorldSpec::default();
        let params = straight_params(3.0);
        let world = build_world(&spec, &params).unwrap();
        let grid = render_bev_with_ego_marker(&world, &spec, 0);
        let h = spec.grid_size / 2;
        assert_eq!(grid[[h, h]], CLASS_AGENT, "ego cell marked");
        assert_eq!(grid[[h + 2, h]], CLASS_AGENT, "1 m ahead = +2 rows at 0.5 m cells");
    }

    #[test]
    fn rejects_template_that_cannot_fit() {
        let spec = WorldSpec {
            grid_size: 8,
            cell_size: 0.25,
            ..WorldSpec::default()
        };
        let err = generate_scenario(&spec, Template::Straight, 3).unwrap_err();
        assert!(matches!(err, ScenarioError::GeometryOutOfBounds { .. }));
    }

    #[test]
    fn drivable_band_width_matches_hand_count_on_straight() {
        // Single 3 m lane: cells whose center is within 1.5 m of the y = 0
        // centerline, i.e. 6 columns at 0.5 m cells.
        let spec = WorldSpec::default();
        let world = World {
            path: CenterPath::from_kappa(&KappaProfile::Constant(0.0), 2.0, 40.0, 40.0),
            lane_width: 3.0,
            num_lanes: 1,
            agents: vec![],
            ego_poses: vec![(Vec2::default(), 0.0); spec.history_len + spec.future_len],
            ego_speed: 2.0,
            history_len: spec.history_len,
        };
        let grid = render_bev(&world, &spec, 0);
        let mid_row = spec.grid_size / 2;
        let drivable_cols: Vec<usize> = (0..spec.grid_size)
            .filter(|&c| grid[[mid_row, c]] != CLASS_BACKGROUND)
            .collect();
        assert_eq!(drivable_cols.len(), 6, "3 m band is 6 half-meter columns");
    }

    #[test]
    fn gt_future_stays_clear_of_agent_footprints() {
        let spec = WorldSpec::default();
        for template in Template::ALL {
            for seed in 0..24u64 {
                let rec = generate_scenario(&spec, template, seed).unwrap();
                for i in 0..spec.future_len {
                    let ego = Vec2::new(rec.gt_future[[i, 0]], rec.gt_future[[i, 1]]);
                    let heading_prev = if i == 0 {
                        Vec2::default()
                    } else {
                        Vec2::new(rec.gt_future[[i - 1, 0]], rec.gt_future[[i - 1, 1]])
                    };
                    let heading = (ego.y - heading_prev.y).atan2(ego.x - heading_prev.x);
                    let ego_rect = OrientedRect {
                        center: ego,
                        heading,
                        length: 4.0,
                        width: 2.0,
                    };
                    for a in 0..spec.max_agents {
                        if rec.agents_future[[i, a, 4]] < 0.5 {
                            continue;
                        }
                        let rect = OrientedRect {
                            center: Vec2::new(
                                rec.agents_future[[i, a, 0]],
                                rec.agents_future[[i, a, 1]],
                            ),
                            heading: rec.agents_future[[i, a, 2]],
                            length: 4.6,
                            width: 2.0,
                        };
                        assert!(
                            !ego_rect.overlaps(&rect),
                            "{template:?}/{seed}: gt hits agent {a} at step {i}"
                        );
                    }
                }
            }
        }
    }
}
