//! Planning scene with an optional division wall, weighted-cost RRT*, and straight-line
//! Cartesian planning.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{in_collision, CollisionBody};
use crate::error::PlanError;
use crate::geometry::{RigidTransform, Vec3};
use crate::kinematics::{inverse_kinematics, IkConfig, JointConfig, KinematicChain};

/// Extent of the division wall; its x position comes from the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallSpec {
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub thickness: f64,
}

impl Default for WallSpec {
    fn default() -> Self {
        Self {
            y_range: (0.22, 1.0),
            z_range: (0.0, 1.2),
            thickness: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisionWall {
    pub x: f64,
    pub body: CollisionBody,
}

impl DivisionWall {
    pub fn new(x: f64, spec: &WallSpec) -> Self {
        let (y0, y1) = spec.y_range;
        let (z0, z1) = spec.z_range;
        Self {
            x,
            body: CollisionBody::aabb(
                Vec3::new(x, 0.5 * (y0 + y1), 0.5 * (z0 + z1)),
                Vec3::new(0.5 * spec.thickness, 0.5 * (y1 - y0), 0.5 * (z1 - z0)),
            ),
        }
    }

    /// Whether the straight move `a → b` passes through the wall's face region.
    pub fn crossed_by(&self, a: &Vec3, b: &Vec3, spec: &WallSpec) -> bool {
        let (da, db) = (a.x - self.x, b.x - self.x);
        if da * db > 0.0 || (da == 0.0 && db == 0.0) {
            return false;
        }
        let s = da / (da - db);
        let p = a + (b - a) * s;
        p.y >= spec.y_range.0 && p.y <= spec.y_range.1 && p.z >= spec.z_range.0 && p.z <= spec.z_range.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningScene {
    pub bodies: Vec<CollisionBody>,
    #[serde(default)]
    pub wall_spec: WallSpec,
    #[serde(default)]
    wall: Option<DivisionWall>,
    #[serde(default)]
    version: u64,
}

impl Default for PlanningScene {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl PlanningScene {
    pub fn new(bodies: Vec<CollisionBody>) -> Self {
        Self {
            bodies,
            wall_spec: WallSpec::default(),
            wall: None,
            version: 0,
        }
    }

    /// Places the wall at `x`, replacing any existing one.
    pub fn set_division_wall(&mut self, x: f64) {
        self.wall = Some(DivisionWall::new(x, &self.wall_spec));
        self.version += 1;
    }

    pub fn clear_division_wall(&mut self) {
        self.wall = None;
        self.version += 1;
    }

    pub fn wall(&self) -> Option<&DivisionWall> {
        self.wall.as_ref()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn body_count(&self) -> usize {
        self.bodies.len() + usize::from(self.wall.is_some())
    }

    pub fn all_bodies(&self) -> Vec<CollisionBody> {
        let mut out = self.bodies.clone();
        if let Some(w) = &self.wall {
            out.push(w.body);
        }
        out
    }

    /// Snapshot with extra obstacles (e.g. the other arm) appended.
    pub fn with_obstacles(&self, extra: &[CollisionBody]) -> PlanningScene {
        let mut s = self.clone();
        s.bodies.extend_from_slice(extra);
        s
    }

    pub fn config_valid(&self, chain: &KinematicChain, q: &JointConfig) -> bool {
        chain.within_limits(q) && !in_collision(&chain.link_bodies(q), &self.all_bodies())
    }

    /// Checks the straight joint-space edge at resolution `delta` (max per-joint change).
    pub fn edge_valid(&self, chain: &KinematicChain, a: &JointConfig, b: &JointConfig, delta: f64) -> bool {
        let bodies = self.all_bodies();
        let steps = ((b - a).amax() / delta).ceil().max(1.0) as usize;
        (0..=steps).all(|k| {
            let q = a + (b - a) * (k as f64 / steps as f64);
            chain.within_limits(&q) && !in_collision(&chain.link_bodies(&q), &bodies)
        })
    }
}

/// `‖s_a − s_b‖ + λ_FK ‖FK(s_a) − FK(s_b)‖`, translation part only.
pub fn motion_cost(chain: &KinematicChain, s_a: &JointConfig, s_b: &JointConfig, lambda_fk: f64) -> f64 {
    let joint = (s_a - s_b).norm();
    if lambda_fk == 0.0 {
        return joint;
    }
    let pa = chain.forward_kinematics(s_a).translation;
    let pb = chain.forward_kinematics(s_b).translation;
    joint + lambda_fk * (pa - pb).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub lambda_fk: f64,
    pub max_iterations: usize,
    /// Largest joint-space extension per iteration (rad).
    pub step: f64,
    pub goal_bias: f64,
    /// Rewire-radius scale; `None` uses the joint-space diameter.
    pub gamma: Option<f64>,
    /// Upper bound on the rewire radius, as a multiple of `step`.
    pub rewire_cap: f64,
    /// Collision-check resolution along edges (rad).
    pub delta_check: f64,
    /// Wall-clock budget (s); the iteration cap usually binds first.
    pub time_budget_s: f64,
    /// Keep improving for this many iterations after the first solution, then stop.
    pub refine_iterations: usize,
    pub shortcut: bool,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            lambda_fk: 1.0,
            max_iterations: 4000,
            step: 0.3,
            goal_bias: 0.05,
            gamma: None,
            rewire_cap: 2.0,
            delta_check: 0.02,
            time_budget_s: 5.0,
            refine_iterations: 400,
            shortcut: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerStats {
    pub iterations: usize,
    pub nodes: usize,
    pub first_solution_iteration: Option<usize>,
    /// `(iteration, cost)` whenever the best solution improved.
    pub best_cost_history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<JointConfig>,
    /// Sum of edge motion costs over consecutive waypoints.
    pub cost: f64,
    #[serde(default)]
    pub stats: PlannerStats,
}

impl Trajectory {
    pub fn single(q: JointConfig) -> Self {
        Self {
            waypoints: vec![q],
            cost: 0.0,
            stats: PlannerStats::default(),
        }
    }

    pub fn start(&self) -> &JointConfig {
        &self.waypoints[0]
    }

    pub fn end(&self) -> &JointConfig {
        self.waypoints.last().expect("trajectory has waypoints")
    }

    pub fn joint_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    /// `Σ ‖ΔFK‖` over consecutive waypoints.
    pub fn task_length(&self, chain: &KinematicChain) -> f64 {
        let pts: Vec<Vec3> = self
            .waypoints
            .iter()
            .map(|q| chain.forward_kinematics(q).translation)
            .collect();
        pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn recompute_cost(&mut self, chain: &KinematicChain, lambda_fk: f64) {
        self.cost = path_cost(chain, &self.waypoints, lambda_fk);
    }

    /// Execution time at constant joint speed, limited by the fastest-moving joint.
    pub fn duration(&self, joint_speed: f64) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (&w[1] - &w[0]).amax() / joint_speed)
            .sum()
    }

    /// Configuration `t` seconds into execution at `joint_speed`.
    pub fn state_at(&self, t: f64, joint_speed: f64) -> JointConfig {
        let mut remaining = t.max(0.0);
        for w in self.waypoints.windows(2) {
            let d = (&w[1] - &w[0]).amax() / joint_speed;
            if remaining <= d && d > 0.0 {
                return &w[0] + (&w[1] - &w[0]) * (remaining / d);
            }
            remaining -= d;
        }
        self.end().clone()
    }

    /// Re-samples every segment at `resolution` (max per-joint change).
    pub fn densified(&self, resolution: f64) -> Vec<JointConfig> {
        densify(&self.waypoints, resolution)
    }
}

fn densify(waypoints: &[JointConfig], resolution: f64) -> Vec<JointConfig> {
    let mut out = vec![waypoints[0].clone()];
    for w in waypoints.windows(2) {
        let n = ((&w[1] - &w[0]).amax() / resolution).ceil().max(1.0) as usize;
        for k in 1..n {
            out.push(&w[0] + (&w[1] - &w[0]) * (k as f64 / n as f64));
        }
        out.push(w[1].clone());
    }
    out
}

fn path_cost(chain: &KinematicChain, waypoints: &[JointConfig], lambda_fk: f64) -> f64 {
    waypoints
        .windows(2)
        .map(|w| motion_cost(chain, &w[0], &w[1], lambda_fk))
        .sum()
}

/// Splits `a → b` into pieces no longer than `step` (Euclidean), endpoints included.
fn subdivide(a: &JointConfig, b: &JointConfig, step: f64) -> Vec<JointConfig> {
    let n = ((b - a).norm() / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| if k == n { b.clone() } else { a + (b - a) * (k as f64 / n as f64) })
        .collect()
}

struct Node {
    q: JointConfig,
    ee: Vec3,
    parent: Option<usize>,
    cost: f64,
    children: Vec<usize>,
}

struct Tree<'a> {
    chain: &'a KinematicChain,
    lambda_fk: f64,
    nodes: Vec<Node>,
}

impl Tree<'_> {
    fn edge_cost(&self, a: &JointConfig, ea: &Vec3, b: &JointConfig, eb: &Vec3) -> f64 {
        (a - b).norm() + self.lambda_fk * (ea - eb).norm()
    }

    fn add(&mut self, q: JointConfig, parent: usize, cost: f64) -> usize {
        let ee = self.chain.forward_kinematics(&q).translation;
        let id = self.nodes.len();
        self.nodes.push(Node {
            q,
            ee,
            parent: Some(parent),
            cost,
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    fn nearest(&self, q: &JointConfig) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (&n.q - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn near(&self, q: &JointConfig, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        (0..self.nodes.len())
            .filter(|&i| (&self.nodes[i].q - q).norm_squared() <= r2)
            .collect()
    }

    fn reparent(&mut self, child: usize, new_parent: usize, new_cost: f64) {
        if let Some(old) = self.nodes[child].parent {
            self.nodes[old].children.retain(|&c| c != child);
        }
        self.nodes[child].parent = Some(new_parent);
        self.nodes[new_parent].children.push(child);
        let delta = new_cost - self.nodes[child].cost;
        let mut stack = vec![child];
        while let Some(i) = stack.pop() {
            self.nodes[i].cost += delta;
            stack.extend(self.nodes[i].children.iter().copied());
        }
    }

    fn path_to(&self, mut i: usize) -> Vec<JointConfig> {
        let mut out = vec![self.nodes[i].q.clone()];
        while let Some(p) = self.nodes[i].parent {
            out.push(self.nodes[p].q.clone());
            i = p;
        }
        out.reverse();
        out
    }
}

fn steer(from: &JointConfig, to: &JointConfig, step: f64) -> JointConfig {
    let d = to - from;
    let n = d.norm();
    if n <= step {
        to.clone()
    } else {
        from + d * (step / n)
    }
}

/// RRT* in joint space with [`motion_cost`] edges, followed by cost-reducing shortcutting.
pub fn plan_rrt_star(
    scene: &PlanningScene,
    chain: &KinematicChain,
    q_start: &JointConfig,
    q_goal: &JointConfig,
    cfg: &PlannerConfig,
) -> Result<Trajectory, PlanError> {
    chain.check_dof(q_start)?;
    chain.check_dof(q_goal)?;
    let clock = Instant::now();
    if !scene.config_valid(chain, q_start) {
        return Err(PlanError::StartInCollision);
    }
    if !scene.config_valid(chain, q_goal) {
        return Err(PlanError::GoalInCollision);
    }
    if cfg.time_budget_s <= 0.0 || cfg.max_iterations == 0 {
        return Err(PlanError::NoPathFound {
            iterations: 0,
            elapsed_s: clock.elapsed().as_secs_f64(),
        });
    }
    // Frozen snapshot of every obstacle, reused for all checks.
    let snapshot = PlanningScene::new(scene.all_bodies());
    let delta = cfg.delta_check;
    let valid_edge = |a: &JointConfig, b: &JointConfig| snapshot.edge_valid(chain, a, b, delta);

    let dim = chain.dof() as f64;
    let lower = chain.lower_limits();
    let upper = chain.upper_limits();
    let gamma = cfg.gamma.unwrap_or_else(|| (&upper - &lower).norm());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tree = Tree {
        chain,
        lambda_fk: cfg.lambda_fk,
        nodes: vec![Node {
            q: q_start.clone(),
            ee: chain.forward_kinematics(q_start).translation,
            parent: None,
            cost: 0.0,
            children: Vec::new(),
        }],
    };
    let goal_ee = chain.forward_kinematics(q_goal).translation;
    // Nodes with a valid edge into the goal.
    let mut goal_links: Vec<(usize, f64)> = Vec::new();
    let mut stats = PlannerStats::default();
    let mut best: Option<(usize, f64)> = None;

    let best_link = |tree: &Tree, links: &[(usize, f64)]| {
        links
            .iter()
            .map(|&(i, c)| (i, tree.nodes[i].cost + c))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    };

    for it in 1..=cfg.max_iterations {
        stats.iterations = it;
        if clock.elapsed().as_secs_f64() > cfg.time_budget_s {
            break;
        }
        if let Some(first) = stats.first_solution_iteration {
            if it > first + cfg.refine_iterations {
                break;
            }
        }
        let sample = if rng.random::<f64>() < cfg.goal_bias {
            q_goal.clone()
        } else {
            DVector::from_iterator(
                chain.dof(),
                (0..chain.dof()).map(|k| rng.random_range(lower[k]..=upper[k])),
            )
        };
        let nearest = tree.nearest(&sample);
        let q_new = steer(&tree.nodes[nearest].q, &sample, cfg.step);
        if !chain.within_limits(&q_new) {
            continue;
        }
        let ee_new = chain.forward_kinematics(&q_new).translation;
        let n = tree.nodes.len() as f64 + 1.0;
        let radius = (gamma * (n.ln() / n).powf(1.0 / dim)).min(cfg.rewire_cap * cfg.step);
        let mut near = tree.near(&q_new, radius);
        if !near.contains(&nearest) {
            near.push(nearest);
        }

        // Cheapest valid parent, checking edges lazily in cost order.
        let mut options: Vec<(usize, f64)> = near
            .iter()
            .map(|&i| {
                let nd = &tree.nodes[i];
                (i, nd.cost + tree.edge_cost(&nd.q, &nd.ee, &q_new, &ee_new))
            })
            .collect();
        options.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some(&(parent, cost)) = options.iter().find(|(i, _)| valid_edge(&tree.nodes[*i].q, &q_new)) else {
            continue;
        };
        let id = tree.add(q_new.clone(), parent, cost);

        for &i in &near {
            if i == parent || Some(i) == tree.nodes[id].parent {
                continue;
            }
            let nd = &tree.nodes[i];
            let via = cost + tree.edge_cost(&q_new, &ee_new, &nd.q, &nd.ee);
            if via + 1e-12 < nd.cost && valid_edge(&q_new, &tree.nodes[i].q) {
                // never rewire an ancestor of the new node
                let mut a = Some(id);
                let mut cyclic = false;
                while let Some(x) = a {
                    if x == i {
                        cyclic = true;
                        break;
                    }
                    a = tree.nodes[x].parent;
                }
                if !cyclic {
                    tree.reparent(i, id, via);
                }
            }
        }

        if (q_goal - &q_new).norm() <= cfg.step && valid_edge(&q_new, q_goal) {
            let c = tree.edge_cost(&q_new, &ee_new, q_goal, &goal_ee);
            goal_links.push((id, c));
            stats.first_solution_iteration.get_or_insert(it);
        }
        if let Some(b) = best_link(&tree, &goal_links) {
            if best.is_none_or(|(_, c)| b.1 < c) {
                best = Some(b);
                stats.best_cost_history.push((it, b.1));
            }
        }
    }
    stats.nodes = tree.nodes.len();

    let Some((node, _)) = best_link(&tree, &goal_links) else {
        return Err(PlanError::NoPathFound {
            iterations: stats.iterations,
            elapsed_s: clock.elapsed().as_secs_f64(),
        });
    };
    let mut path = tree.path_to(node);
    path.push(q_goal.clone());
    if cfg.shortcut {
        path = shortcut(chain, &path, cfg, &valid_edge);
    }
    let waypoints = densify_euclidean(&path, cfg.step);
    let cost = path_cost(chain, &waypoints, cfg.lambda_fk);
    Ok(Trajectory {
        waypoints,
        cost,
        stats,
    })
}

fn densify_euclidean(path: &[JointConfig], step: f64) -> Vec<JointConfig> {
    let mut out = vec![path[0].clone()];
    for w in path.windows(2) {
        out.extend(subdivide(&w[0], &w[1], step).into_iter().skip(1));
    }
    out
}

/// Greedy shortcutting: from each waypoint, jump to the farthest later waypoint whose direct
/// edge is valid and cheaper (after subdivision to `step`) than the path between them.
fn shortcut(
    chain: &KinematicChain,
    path: &[JointConfig],
    cfg: &PlannerConfig,
    valid_edge: &dyn Fn(&JointConfig, &JointConfig) -> bool,
) -> Vec<JointConfig> {
    let seg_cost = |a: &JointConfig, b: &JointConfig| path_cost(chain, &subdivide(a, b, cfg.step), cfg.lambda_fk);
    let mut costs: Vec<f64> = path.windows(2).map(|w| seg_cost(&w[0], &w[1])).collect();
    let mut pts = path.to_vec();
    let mut i = 0;
    while i + 2 < pts.len() {
        let mut jumped = false;
        for j in (i + 2..pts.len()).rev() {
            let current: f64 = costs[i..j].iter().sum();
            let direct = seg_cost(&pts[i], &pts[j]);
            if direct < current && valid_edge(&pts[i], &pts[j]) {
                pts.drain(i + 1..j);
                costs.splice(i..j, std::iter::once(direct));
                jumped = true;
                break;
            }
        }
        if !jumped {
            i += 1;
        }
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartesianConfig {
    /// Largest translation between waypoints (m).
    pub max_step: f64,
    /// Largest rotation between waypoints (rad).
    pub max_rot_step: f64,
    pub max_joint_jump: f64,
    pub lateral_tol: f64,
    pub delta_check: f64,
    pub ik: IkConfig,
}

impl Default for CartesianConfig {
    fn default() -> Self {
        Self {
            max_step: 0.005,
            max_rot_step: 0.05,
            max_joint_jump: 0.3,
            lateral_tol: 0.002,
            delta_check: 0.02,
            ik: IkConfig {
                restarts: 0,
                ..IkConfig::default()
            },
        }
    }
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let l = d.norm_squared();
    if l == 0.0 {
        return (p - a).norm();
    }
    let s = ((p - a).dot(&d) / l).clamp(0.0, 1.0);
    (p - (a + d * s)).norm()
}

/// Straight-line tool motion from `FK(q_start)` to `target`, solved waypoint by waypoint.
pub fn plan_cartesian(
    scene: &PlanningScene,
    chain: &KinematicChain,
    q_start: &JointConfig,
    target: &RigidTransform,
    cfg: &CartesianConfig,
) -> Result<Trajectory, PlanError> {
    chain.check_dof(q_start)?;
    if !target.is_finite() {
        return Err(PlanError::CartesianFraction(0.0));
    }
    if !scene.config_valid(chain, q_start) {
        return Err(PlanError::StartInCollision);
    }
    let start = chain.forward_kinematics(q_start);
    let (dt, dr) = start.distance_to(target);
    let n = (dt / cfg.max_step).max(dr / cfg.max_rot_step).ceil() as usize;
    if n == 0 {
        return Ok(Trajectory::single(q_start.clone()));
    }
    let snapshot = PlanningScene::new(scene.all_bodies());
    let mut waypoints = vec![q_start.clone()];
    let mut q = q_start.clone();
    for k in 1..=n {
        let fraction = (k - 1) as f64 / n as f64;
        let fail = || PlanError::CartesianFraction(fraction);
        let pose = start.interpolate(target, k as f64 / n as f64);
        let next = inverse_kinematics(chain, &pose, &q, &cfg.ik).map_err(|_| fail())?;
        if (&next - &q).amax() > cfg.max_joint_jump {
            return Err(fail());
        }
        let p = chain.forward_kinematics(&next).translation;
        if point_segment_distance(&p, &start.translation, &target.translation) > cfg.lateral_tol {
            return Err(fail());
        }
        if !snapshot.edge_valid(chain, &q, &next, cfg.delta_check) {
            return Err(fail());
        }
        waypoints.push(next.clone());
        q = next;
    }
    let cost = path_cost(chain, &waypoints, 0.0);
    Ok(Trajectory {
        waypoints,
        cost,
        stats: PlannerStats::default(),
    })
}
