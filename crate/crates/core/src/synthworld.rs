//! Deterministic tabletop world: scenes on a square grid of cells, a
//! top-down orthographic renderer producing RGB and relative depth, a
//! kinematic gripper, a scripted pick-and-place expert, and closed-loop
//! rollouts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::DepthMap;
use crate::error::{Error, Result};
use crate::experts::{ActionChunk, Observation};
use crate::io::{self, Plane};
use crate::par::{self, Exec};

pub const ACTION_DIM: usize = 4;
pub const PROPRIO_DIM: usize = 4;
pub const VOCAB_SIZE: usize = 32;
pub const INSTRUCTION_LEN: usize = 6;
pub const NUM_COLORS: usize = 4;

pub const TOK_PUT: usize = 1;
pub const TOK_ON: usize = 2;
pub const TOK_COLOR0: usize = 3;
pub const TOK_SHAPE0: usize = 7;
pub const TOK_ROW0: usize = 9;
pub const TOK_COL0: usize = 15;

const COLORS: [[f64; 3]; NUM_COLORS] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.10],
];
const TABLE_RGB: [f64; 3] = [0.55, 0.50, 0.45];
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub grid: usize,
    pub image_size: usize,
    pub horizon: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_height: f64,
    pub max_object_height: f64,
    /// Half side of a block, and radius of a disk, in cell units.
    pub footprint_half: f64,
    pub camera_height: f64,
    pub safe_height: f64,
    pub ceiling: f64,
    pub step_xy: f64,
    pub step_z: f64,
    pub grasp_tolerance: f64,
    pub max_steps: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 6,
            image_size: 32,
            horizon: 4,
            min_objects: 2,
            max_objects: 4,
            min_object_height: 0.3,
            max_object_height: 0.9,
            footprint_half: 0.42,
            camera_height: 2.0,
            safe_height: 1.2,
            ceiling: 1.5,
            step_xy: 0.5,
            step_z: 0.25,
            grasp_tolerance: 0.2,
            max_steps: 60,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.grid < 2 || self.grid > 6 {
            return bad("grid must be in 2..=6 (instruction vocabulary)");
        }
        if self.image_size == 0 || self.horizon == 0 || self.max_steps == 0 {
            return bad("image_size, horizon and max_steps must be positive");
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > 2 * NUM_COLORS
        {
            return bad("object counts must satisfy 1 <= min <= max <= 8");
        }
        if self.max_objects >= self.grid * self.grid {
            return bad("too many objects for the grid");
        }
        if !(self.min_object_height > 0.0 && self.min_object_height <= self.max_object_height) {
            return bad("object heights must be positive and ordered");
        }
        if !(self.max_object_height < self.safe_height
            && self.safe_height <= self.ceiling
            && self.ceiling < self.camera_height)
        {
            return bad("heights must satisfy object < safe <= ceiling < camera");
        }
        if !(self.footprint_half > 0.0 && self.footprint_half <= 0.5) {
            return bad("footprint_half must be in (0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Block,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: ObjectShape,
    pub color: usize,
    pub x: f64,
    pub y: f64,
    /// Height of the object's underside above the table.
    pub base: f64,
    pub height: f64,
}

impl Object {
    pub fn top(&self) -> f64 {
        self.base + self.height
    }

    fn covers(&self, wx: f64, wy: f64, half: f64) -> bool {
        match self.shape {
            ObjectShape::Block => {
                wx >= self.x - half
                    && wx < self.x + half
                    && wy >= self.y - half
                    && wy < self.y + half
            }
            ObjectShape::Disk => {
                let (dx, dy) = (wx - self.x, wy - self.y);
                dx * dx + dy * dy < half * half
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub open: bool,
    pub held: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub object: usize,
    /// Target cell as `(column, row)`.
    pub target: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub table_height: f64,
    pub objects: Vec<Object>,
    pub gripper: Gripper,
    pub goal: Goal,
}

fn cell_of(v: f64, grid: usize) -> usize {
    (v.floor().max(0.0) as usize).min(grid - 1)
}

impl Scene {
    pub fn cell(&self, object: usize, grid: usize) -> (usize, usize) {
        let o = &self.objects[object];
        (cell_of(o.x, grid), cell_of(o.y, grid))
    }

    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        let g = cfg.grid as f64;
        if self.goal.object >= self.objects.len() {
            return Err(Error::Generation(format!(
                "goal object {} does not exist",
                self.goal.object
            )));
        }
        if self.goal.target.0 >= cfg.grid || self.goal.target.1 >= cfg.grid {
            return Err(Error::Generation(format!(
                "target cell {:?} outside the grid",
                self.goal.target
            )));
        }
        for o in &self.objects {
            if !(o.x >= 0.0 && o.x < g && o.y >= 0.0 && o.y < g)
                || !(o.height > 0.0)
                || o.color >= NUM_COLORS
            {
                return Err(Error::Generation(format!("invalid object {o:?}")));
            }
            if o.height >= cfg.ceiling {
                return Err(Error::Generation(format!(
                    "object too tall to grasp: {o:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn instruction(&self) -> Vec<usize> {
        let o = &self.objects[self.goal.object];
        let shape = match o.shape {
            ObjectShape::Block => 0,
            ObjectShape::Disk => 1,
        };
        vec![
            TOK_PUT,
            TOK_COLOR0 + o.color,
            TOK_SHAPE0 + shape,
            TOK_ON,
            TOK_ROW0 + self.goal.target.1,
            TOK_COL0 + self.goal.target.0,
        ]
    }

    pub fn proprio(&self, cfg: &WorldConfig) -> Vec<f64> {
        let g = &self.gripper;
        vec![
            g.x / cfg.grid as f64,
            g.y / cfg.grid as f64,
            g.z / cfg.ceiling,
            if g.open { 1.0 } else { 0.0 },
        ]
    }

    /// Goal object resting in the target cell with the gripper open.
    pub fn is_success(&self, cfg: &WorldConfig) -> bool {
        let held = self.gripper.held == Some(self.goal.object);
        !held && self.gripper.open && self.cell(self.goal.object, cfg.grid) == self.goal.target
    }

    /// Highest top surface among resting objects in `cell`, excluding `skip`.
    fn support_top(&self, cell: (usize, usize), skip: usize, grid: usize) -> f64 {
        self.objects
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != skip && self.gripper.held != Some(i))
            .filter(|&(i, _)| self.cell(i, grid) == cell)
            .map(|(_, o)| o.top())
            .fold(0.0, f64::max)
    }
}

/// Samples a solvable scene.
pub fn random_scene(rng: &mut impl Rng, cfg: &WorldConfig) -> Scene {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut cells: Vec<(usize, usize)> = (0..cfg.grid)
        .flat_map(|r| (0..cfg.grid).map(move |c| (c, r)))
        .collect();
    cells.shuffle(rng);
    let mut kinds: Vec<(usize, ObjectShape)> = (0..NUM_COLORS)
        .flat_map(|c| [(c, ObjectShape::Block), (c, ObjectShape::Disk)])
        .collect();
    kinds.shuffle(rng);
    let steps = ((cfg.max_object_height - cfg.min_object_height) / 0.05).round() as usize;
    let objects = (0..n)
        .map(|i| Object {
            shape: kinds[i].1,
            color: kinds[i].0,
            x: cells[i].0 as f64 + 0.5,
            y: cells[i].1 as f64 + 0.5,
            base: 0.0,
            height: cfg.min_object_height + 0.05 * rng.gen_range(0..=steps) as f64,
        })
        .collect();
    let lo = 0.5;
    let hi = cfg.grid as f64 - 0.5;
    Scene {
        table_height: 0.0,
        objects,
        gripper: Gripper {
            x: rng.gen_range(lo..hi),
            y: rng.gen_range(lo..hi),
            z: cfg.safe_height,
            open: true,
            held: None,
        },
        goal: Goal {
            object: rng.gen_range(0..n),
            target: cells[n + rng.gen_range(0..cells.len() - n)],
        },
    }
}

/// Rendered RGB and depth for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `S × S × 3`, channel-last, on the 8-bit lattice.
    pub image: Vec<f64>,
    /// On the 16-bit lattice.
    pub depth: DepthMap,
}

/// World coordinate of the centre of pixel `p`.
pub fn pixel_center(p: usize, cfg: &WorldConfig) -> f64 {
    (p as f64 + 0.5) * cfg.grid as f64 / cfg.image_size as f64
}

/// Orthographic top-down render. Depth is the distance from the camera,
/// min-max normalized per frame; a frame with no depth variation maps to
/// all zeros.
pub fn render(scene: &Scene, cfg: &WorldConfig) -> Frame {
    let s = cfg.image_size;
    let mut tops = vec![0.0f64; s * s];
    let mut owner: Vec<Option<usize>> = vec![None; s * s];
    for py in 0..s {
        let wy = pixel_center(py, cfg);
        for px in 0..s {
            let wx = pixel_center(px, cfg);
            for (i, o) in scene.objects.iter().enumerate() {
                let top = o.top();
                if o.covers(wx, wy, cfg.footprint_half)
                    && (owner[py * s + px].is_none() || top > tops[py * s + px])
                {
                    tops[py * s + px] = top;
                    owner[py * s + px] = Some(i);
                }
            }
        }
    }
    let raw: Vec<f64> = tops
        .iter()
        .map(|t| cfg.camera_height - (scene.table_height + t))
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let values = if hi - lo > 0.0 {
        raw.iter()
            .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; s * s]
    };
    let depth = DepthMap::new(s, s, values)
        .expect("normalized")
        .quantized16();

    let mut image = vec![0.0; s * s * 3];
    for py in 0..s {
        for px in 0..s {
            let idx = py * s + px;
            let rgb = match owner[idx] {
                Some(i) => {
                    let o = &scene.objects[i];
                    let shade = 0.55 + 0.45 * (o.top() / cfg.ceiling).min(1.0);
                    COLORS[o.color].map(|c| c * shade)
                }
                None => {
                    let parity = (cell_of(pixel_center(px, cfg), cfg.grid)
                        + cell_of(pixel_center(py, cfg), cfg.grid))
                        % 2;
                    let tint = if parity == 0 { 0.04 } else { -0.04 };
                    TABLE_RGB.map(|c| c + tint)
                }
            };
            for c in 0..3 {
                image[idx * 3 + c] = (rgb[c] * 255.0).round() / 255.0;
            }
        }
    }
    Frame { image, depth }
}

/// Applies one `(dx, dy, dz, grip)` action. `grip > 0` closes the gripper.
pub fn step(scene: &Scene, action: &[f64], cfg: &WorldConfig) -> Scene {
    let mut next = scene.clone();
    let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let lo = 0.5;
    let hi = cfg.grid as f64 - 0.5;
    let g = &mut next.gripper;
    let floor = g.held.map_or(0.0, |i| scene.objects[i].height);
    g.x = (g.x + a[0] * cfg.step_xy).clamp(lo, hi);
    g.y = (g.y + a[1] * cfg.step_xy).clamp(lo, hi);
    g.z = (g.z + a[2] * cfg.step_z).clamp(floor, cfg.ceiling);
    let want_closed = a[3] > 0.0;
    if let Some(i) = g.held {
        let o = &mut next.objects[i];
        o.x = g.x;
        o.y = g.y;
        o.base = g.z - o.height;
    }
    if want_closed && next.gripper.open {
        next.gripper.open = false;
        let (cx, cy) = (
            cell_of(next.gripper.x, cfg.grid),
            cell_of(next.gripper.y, cfg.grid),
        );
        let z = next.gripper.z;
        let candidate = next
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| (cell_of(o.x, cfg.grid), cell_of(o.y, cfg.grid)) == (cx, cy))
            .filter(|(_, o)| z <= o.top() + cfg.grasp_tolerance)
            .max_by(|a, b| a.1.top().total_cmp(&b.1.top()))
            .map(|(i, _)| i);
        if let Some(i) = candidate {
            next.gripper.held = Some(i);
            let o = &mut next.objects[i];
            o.x = next.gripper.x;
            o.y = next.gripper.y;
            next.gripper.z = next.gripper.z.max(o.height);
            o.base = next.gripper.z - o.height;
        }
    } else if !want_closed && !next.gripper.open {
        next.gripper.open = true;
        if let Some(i) = next.gripper.held.take() {
            let cell = (
                cell_of(next.gripper.x, cfg.grid),
                cell_of(next.gripper.y, cfg.grid),
            );
            let support = next.support_top(cell, i, cfg.grid);
            let o = &mut next.objects[i];
            o.x = cell.0 as f64 + 0.5;
            o.y = cell.1 as f64 + 0.5;
            o.base = support;
        }
    }
    next
}

fn toward(from: f64, to: f64, step: f64) -> f64 {
    ((to - from) / step).clamp(-1.0, 1.0)
}

/// Next scripted action from any state, or `None` once the goal holds.
pub fn expert_action(scene: &Scene, cfg: &WorldConfig) -> Option<[f64; ACTION_DIM]> {
    if scene.is_success(cfg) {
        return None;
    }
    let g = &scene.gripper;
    let goal = scene.goal.object;
    let obj = &scene.objects[goal];
    let close = if g.open { -1.0 } else { 1.0 };
    let (tx, ty, tz, finish) = if g.held == Some(goal) {
        let cell = scene.goal.target;
        let place = obj.height + scene.support_top(cell, goal, cfg.grid);
        (cell.0 as f64 + 0.5, cell.1 as f64 + 0.5, place, -1.0)
    } else {
        if !g.open {
            return Some([0.0, 0.0, 0.0, -1.0]);
        }
        (obj.x, obj.y, obj.top(), 1.0)
    };
    let above = (g.x - tx).abs() < EPS && (g.y - ty).abs() < EPS;
    if !above {
        let z = toward(g.z, cfg.safe_height, cfg.step_z);
        return Some([
            toward(g.x, tx, cfg.step_xy),
            toward(g.y, ty, cfg.step_xy),
            z,
            close,
        ]);
    }
    if (g.z - tz).abs() > EPS {
        return Some([0.0, 0.0, toward(g.z, tz, cfg.step_z), close]);
    }
    Some([0.0, 0.0, 0.0, finish])
}

/// Full scripted action sequence from `scene` to success.
pub fn scripted_actions(scene: &Scene, cfg: &WorldConfig) -> Result<Vec<[f64; ACTION_DIM]>> {
    scene.validate(cfg)?;
    let limit = 4 * cfg.max_steps;
    let mut s = scene.clone();
    let mut out = Vec::new();
    while let Some(a) = expert_action(&s, cfg) {
        if out.len() >= limit {
            return Err(Error::Generation(format!(
                "expert did not reach the goal within {limit} steps"
            )));
        }
        s = step(&s, &a, cfg);
        out.push(a);
    }
    Ok(out)
}

/// Action used to pad the final chunk once the task is done.
pub const NOOP: [f64; ACTION_DIM] = [0.0, 0.0, 0.0, -1.0];

/// The scripted trajectory split into `horizon`-sized chunks; the last chunk
/// is padded with no-ops, and an already-solved scene yields one no-op chunk.
pub fn scripted_expert(scene: &Scene, cfg: &WorldConfig) -> Result<Vec<ActionChunk>> {
    let mut actions = scripted_actions(scene, cfg)?;
    let h = cfg.horizon;
    let padded = actions.len().div_ceil(h).max(1) * h;
    actions.resize(padded, NOOP);
    actions
        .chunks(h)
        .map(|c| ActionChunk::new(h, ACTION_DIM, c.iter().flatten().copied().collect()))
        .collect()
}

pub fn observe(scene: &Scene, cfg: &WorldConfig) -> (Observation, DepthMap) {
    let frame = render(scene, cfg);
    (
        Observation {
            image: frame.image,
            image_size: cfg.image_size,
            instruction: scene.instruction(),
            proprio: scene.proprio(cfg),
        },
        frame.depth,
    )
}

/// Anything that maps observations to action chunks. `scene` is privileged
/// state; only scripted policies may read it.
pub trait Policy {
    fn act(&mut self, obs: &Observation, scene: &Scene) -> Result<ActionChunk>;
}

/// Closed-loop replanning of the scripted expert.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub cfg: WorldConfig,
}

impl Policy for ExpertPolicy {
    fn act(&mut self, _obs: &Observation, scene: &Scene) -> Result<ActionChunk> {
        let mut s = scene.clone();
        let mut values = Vec::with_capacity(self.cfg.horizon * ACTION_DIM);
        for _ in 0..self.cfg.horizon {
            let a = expert_action(&s, &self.cfg).unwrap_or(NOOP);
            s = step(&s, &a, &self.cfg);
            values.extend_from_slice(&a);
        }
        ActionChunk::new(self.cfg.horizon, ACTION_DIM, values)
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub success: bool,
    pub steps: usize,
    /// Scene after every executed action, starting with the initial scene.
    pub trace: Vec<Scene>,
}

/// Runs `policy` chunk by chunk until success or `max_steps` actions.
pub fn rollout(
    policy: &mut dyn Policy,
    scene: &Scene,
    max_steps: usize,
    cfg: &WorldConfig,
) -> Result<RolloutResult> {
    if max_steps == 0 {
        return Err(Error::Param("max_steps must be at least 1".into()));
    }
    let mut s = scene.clone();
    let mut trace = vec![s.clone()];
    let mut steps = 0;
    while steps < max_steps {
        if s.is_success(cfg) {
            return Ok(RolloutResult {
                success: true,
                steps,
                trace,
            });
        }
        let (obs, _) = observe(&s, cfg);
        let chunk = policy.act(&obs, &s)?;
        for t in 0..chunk.horizon() {
            if steps >= max_steps || s.is_success(cfg) {
                break;
            }
            s = step(&s, chunk.action(t), cfg);
            trace.push(s.clone());
            steps += 1;
        }
    }
    Ok(RolloutResult {
        success: s.is_success(cfg),
        steps,
        trace,
    })
}

/// One control step of a demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub depth: DepthMap,
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub initial: Scene,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn instruction(&self) -> Vec<usize> {
        self.initial.instruction()
    }
}

/// Demonstration of the scripted expert on `scene`.
pub fn demonstrate(scene: &Scene, cfg: &WorldConfig) -> Result<Episode> {
    let chunks = scripted_expert(scene, cfg)?;
    let mut s = scene.clone();
    let mut steps = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let (obs, depth) = observe(&s, cfg);
        for t in 0..chunk.horizon() {
            s = step(&s, chunk.action(t), cfg);
        }
        steps.push(Step { obs, depth, chunk });
    }
    if !s.is_success(cfg) {
        return Err(Error::Generation(
            "demonstration did not end in success".into(),
        ));
    }
    Ok(Episode {
        initial: scene.clone(),
        steps,
    })
}

/// Independent generator for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: WorldConfig,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// Seeded split of episode indices into `(train, held_out)`; at least one
    /// episode lands on each side when there are two or more.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.episodes.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, u64::MAX));
        let mut k = (n as f64 * held_out_fraction).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = 0;
        }
        let mut held: Vec<usize> = idx[..k].to_vec();
        let mut train: Vec<usize> = idx[k..].to_vec();
        held.sort_unstable();
        train.sort_unstable();
        (train, held)
    }
}

/// Generates `n` demonstrations; episode `i` draws from stream `i` of `seed`.
pub fn gen_dataset(n: usize, seed: u64, cfg: &WorldConfig, exec: Exec) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Param("dataset needs at least one episode".into()));
    }
    cfg.validate()?;
    let episodes = par::try_map_indexed(exec, n, |i| {
        let scene = random_scene(&mut stream_rng(seed, i as u64), cfg);
        demonstrate(&scene, cfg)
    })?;
    Ok(Dataset {
        seed,
        config: cfg.clone(),
        episodes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeMeta {
    instruction: Vec<usize>,
    proprio: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    goal: Goal,
    initial_scene: Scene,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    episodes: usize,
    config_hash: String,
    config: WorldConfig,
}

fn image_planes(obs: &Observation) -> Vec<Plane> {
    (0..3)
        .map(|c| Plane {
            width: obs.image_size,
            height: obs.image_size,
            maxval: 255,
            samples: obs
                .image
                .iter()
                .skip(c)
                .step_by(3)
                .map(|v| (v * 255.0).round() as u16)
                .collect(),
        })
        .collect()
}

fn planes_to_image(planes: &[Plane]) -> Result<(usize, Vec<f64>)> {
    if planes.len() != 3
        || planes
            .iter()
            .any(|p| p.width != planes[0].width || p.height != planes[0].height)
    {
        return Err(Error::Format {
            kind: "frame",
            msg: "expected three equal RGB planes".into(),
        });
    }
    let n = planes[0].width * planes[0].height;
    let mut image = vec![0.0; n * 3];
    for (c, p) in planes.iter().enumerate() {
        for (i, &s) in p.samples.iter().enumerate() {
            image[i * 3 + c] = s as f64 / p.maxval as f64;
        }
    }
    Ok((planes[0].width, image))
}

pub fn world_config_hash(cfg: &WorldConfig) -> Result<u64> {
    crate::config::canonical_hash(cfg)
}

/// Writes one directory per episode plus `manifest.json`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, ep) in data.episodes.iter().enumerate() {
        let edir = dir.join(format!("episode_{i:05}"));
        std::fs::create_dir_all(&edir).map_err(|e| Error::io(&edir, e))?;
        for (t, st) in ep.steps.iter().enumerate() {
            io::write_bytes(
                &edir.join(format!("frame_{t:04}.pgm")),
                &io::encode_pgm(&image_planes(&st.obs)),
            )?;
            io::write_bytes(
                &edir.join(format!("depth_{t:04}.pgm")),
                &io::encode_pgm(&[st.depth.to_plane16()]),
            )?;
        }
        let meta = EpisodeMeta {
            instruction: ep.instruction(),
            proprio: ep.steps.iter().map(|s| s.obs.proprio.clone()).collect(),
            actions: ep.steps.iter().map(|s| s.chunk.values().to_vec()).collect(),
            goal: ep.initial.goal,
            initial_scene: ep.initial.clone(),
        };
        io::write_bytes(
            &edir.join("meta.json"),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )?;
    }
    let manifest = Manifest {
        seed: data.seed,
        episodes: data.episodes.len(),
        config_hash: format!("{:016x}", world_config_hash(&data.config)?),
        config: data.config.clone(),
    };
    io::write_bytes(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let manifest: Manifest = serde_json::from_slice(&read(&dir.join("manifest.json"))?)?;
    let cfg = manifest.config;
    cfg.validate()?;
    let mut episodes = Vec::with_capacity(manifest.episodes);
    for i in 0..manifest.episodes {
        let edir = dir.join(format!("episode_{i:05}"));
        let meta: EpisodeMeta = serde_json::from_slice(&read(&edir.join("meta.json"))?)?;
        let mut steps = Vec::with_capacity(meta.actions.len());
        for (t, (actions, proprio)) in meta.actions.iter().zip(&meta.proprio).enumerate() {
            let (size, image) =
                planes_to_image(&io::read_pgm(&edir.join(format!("frame_{t:04}.pgm")))?)?;
            let depth_planes = io::read_pgm(&edir.join(format!("depth_{t:04}.pgm")))?;
            let depth = DepthMap::from_plane(&depth_planes[0])?;
            steps.push(Step {
                obs: Observation {
                    image,
                    image_size: size,
                    instruction: meta.instruction.clone(),
                    proprio: proprio.clone(),
                },
                depth,
                chunk: ActionChunk::new(cfg.horizon, ACTION_DIM, actions.clone())?,
            });
        }
        episodes.push(Episode {
            initial: meta.initial_scene,
            steps,
        });
    }
    Ok(Dataset {
        seed: manifest.seed,
        config: cfg,
        episodes,
    })
}
