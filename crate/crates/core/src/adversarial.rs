//! Adversarial scene generation against the surrogate perception stack.
//!
//! Two stages: pick the collaborator set whose viewpoints help the ego least,
//! then perturb vehicle poses with a cross-entropy search that keeps only
//! plausible scenes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{average_precision, ScoredBox};
use crate::geometry::{box_iou_bev, normalize_angle, transform_to_frame, Pose2D};
use crate::map::{Lane, LaneGraph, LaneKind};
use crate::rng::{stream_rng, sub_seed, Stream};
use crate::perception::{perceive, simulate_lidar, EvalRange, FusionMode, LidarConfig};
use crate::world::{AgentId, Role, Scene, VehicleState};

/// Per-axis perturbation limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            dx: 3.0,
            dy: 3.0,
            dyaw: 0.3,
        }
    }
}

impl Bounds {
    fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dyaw]
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        p.iter().zip(self.as_array()).all(|(v, b)| v.is_finite() && v.abs() <= b + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsgConfig {
    pub eval_range: EvalRange,
    /// Scene evaluations available to the pose search.
    pub budget: usize,
    pub population: usize,
    pub elite: usize,
    pub smoothing: f64,
    pub bounds: Bounds,
    /// Collaborator set size.
    pub k: usize,
    /// Candidate sets drawn by the collaborator search.
    pub collaborator_samples: usize,
    /// Vehicles whose poses are perturbed (collaborators first, then the
    /// nearest other vehicles).
    pub perturbed: usize,
    pub comm_range: f64,
    pub lane_margin: f64,
    pub iou_threshold: f64,
    pub lidar: LidarConfig,
}

impl Default for AsgConfig {
    fn default() -> Self {
        Self {
            eval_range: EvalRange::symmetric(48.0, 48.0),
            budget: 200,
            population: 16,
            elite: 4,
            smoothing: 0.5,
            bounds: Bounds::default(),
            k: 2,
            collaborator_samples: 8,
            perturbed: 6,
            comm_range: 70.0,
            lane_margin: 0.5,
            iou_threshold: 0.5,
            lidar: LidarConfig::default().noise_free(),
        }
    }
}

impl AsgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::validation("budget", "must be at least 1"));
        }
        if self.population < 1 || self.elite < 1 || self.elite > self.population {
            return Err(Error::validation("elite", "need 1 <= elite <= population"));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::validation("smoothing", "must lie in [0, 1]"));
        }
        let b = self.bounds;
        if !(b.dx >= 0.0 && b.dy >= 0.0 && b.dyaw >= 0.0) {
            return Err(Error::validation("bounds", "must be non-negative"));
        }
        if self.k < 1 {
            return Err(Error::validation("k", "must be at least 1"));
        }
        self.lidar.validate()
    }
}

/// A base scene plus the choices the adversary controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneCandidate {
    #[serde(with = "scene_serde")]
    pub base: Scene,
    pub collaborators: Vec<AgentId>,
    /// (dx, dy, dyaw) per perturbed vehicle, in world coordinates.
    pub perturbations: BTreeMap<AgentId, [f64; 3]>,
}

impl SceneCandidate {
    pub fn new(base: Scene, collaborators: Vec<AgentId>) -> Self {
        Self {
            base,
            collaborators,
            perturbations: BTreeMap::new(),
        }
    }

    /// The base scene with every perturbation applied.
    pub fn realized(&self) -> Scene {
        let mut scene = self.base.clone();
        for v in &mut scene.vehicles {
            if let Some(p) = self.perturbations.get(&v.id) {
                v.pose = Pose2D::new(v.pose.x + p[0], v.pose.y + p[1], normalize_angle(v.pose.yaw + p[2]));
            }
        }
        scene
    }
}

/// Connected agents within communication range of the ego (ego excluded).
pub fn connected_in_range(scene: &Scene, comm_range: f64) -> Vec<AgentId> {
    let ego = scene.ego();
    scene
        .vehicles
        .iter()
        .filter(|v| v.id != ego.id && v.role.is_connected() && v.pose.distance_to(&ego.pose) <= comm_range)
        .map(|v| v.id)
        .collect()
}

/// Ego plus `k` nearest connected agents: the cooperative default before any
/// adversarial choice.
pub fn nearest_collaborators(scene: &Scene, cfg: &AsgConfig) -> Result<Vec<AgentId>> {
    let ego = scene.ego().pose;
    let mut pool = connected_in_range(scene, cfg.comm_range);
    if pool.len() < cfg.k {
        return Err(Error::domain(format!("{} connected agents in range, need {}", pool.len(), cfg.k)));
    }
    pool.sort_by(|a, b| {
        let da = scene.vehicle(*a).expect("in scene").pose.distance_to(&ego);
        let db = scene.vehicle(*b).expect("in scene").pose.distance_to(&ego);
        da.total_cmp(&db).then(a.cmp(b))
    });
    pool.truncate(cfg.k);
    pool.sort();
    Ok(pool)
}

/// AP of the noise-free surrogate pipeline on the realized scene.
pub fn surrogate_ap(candidate: &SceneCandidate, mode: FusionMode, cfg: &AsgConfig) -> Result<f64> {
    let scene = candidate.realized();
    let labelers = connected_in_range(&scene, cfg.comm_range);
    // Noise-free detector: the stream is never consulted for anything that
    // changes the output, but the API wants one.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = perceive(
        &scene,
        scene.ego_id,
        &candidate.collaborators,
        &labelers,
        mode,
        &cfg.lidar,
        &cfg.eval_range,
        &mut rng,
    )?;
    let gt: Vec<_> = out.targets.iter().map(|(_, b)| *b).collect();
    let dets: Vec<ScoredBox> = out
        .detections
        .iter()
        .map(|d| ScoredBox {
            score: d.confidence,
            bbox: d.bbox,
        })
        .collect();
    average_precision(&dets, &gt, cfg.iou_threshold)
        .ok_or_else(|| Error::domain("no evaluation targets in range"))
}

/// `1 - AP` of the noise-free surrogate pipeline.
pub fn surrogate_loss(candidate: &SceneCandidate, mode: FusionMode, cfg: &AsgConfig) -> Result<f64> {
    Ok(1.0 - surrogate_ap(candidate, mode, cfg)?)
}

/// Fraction of evaluation targets each connected agent sees on its own.
pub fn contribution_weights(scene: &Scene, cfg: &AsgConfig) -> Result<BTreeMap<AgentId, f64>> {
    let ego_pose = scene.ego().pose;
    let agents = connected_in_range(scene, cfg.comm_range);
    let mut visible = BTreeMap::new();
    let mut targets = BTreeSet::new();
    for &a in agents.iter().chain(std::iter::once(&scene.ego_id)) {
        let seen: BTreeSet<AgentId> = simulate_lidar(scene, a, &cfg.lidar)?
            .visible(1)
            .into_iter()
            .filter(|&id| id != scene.ego_id)
            .filter(|&id| {
                let b = transform_to_frame(&scene.vehicle(id).expect("hit target in scene").footprint(), &ego_pose);
                cfg.eval_range.contains(b.cx, b.cy)
            })
            .collect();
        targets.extend(seen.iter().copied());
        visible.insert(a, seen);
    }
    let total = targets.len().max(1) as f64;
    Ok(agents
        .into_iter()
        .map(|a| (a, visible[&a].len() as f64 / total))
        .collect())
}

/// Samples collaborator sets with probability inversely proportional to each
/// agent's contribution and returns the sampled set with the largest loss.
pub fn search_collaborators<R: Rng + ?Sized>(
    scene: &Scene,
    k: usize,
    mode: FusionMode,
    cfg: &AsgConfig,
    rng: &mut R,
) -> Result<(Vec<AgentId>, f64)> {
    let weights = contribution_weights(scene, cfg)?;
    if weights.len() < k || k == 0 {
        return Err(Error::domain(format!("{} connected agents in range, need {k}", weights.len())));
    }
    let mut tried: BTreeSet<Vec<AgentId>> = BTreeSet::new();
    let mut best: Option<(Vec<AgentId>, f64)> = None;
    let draws = if weights.len() == k { 1 } else { cfg.collaborator_samples.max(1) };
    for _ in 0..draws {
        let mut pool: Vec<(AgentId, f64)> = weights.iter().map(|(&a, &w)| (a, 1.0 / (w + 0.05))).collect();
        let mut set = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, (_, w)) in pool.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            set.push(pool.remove(pick).0);
        }
        set.sort();
        if !tried.insert(set.clone()) {
            continue;
        }
        let loss = surrogate_loss(&SceneCandidate::new(scene.clone(), set.clone()), mode, cfg)?;
        if best.as_ref().is_none_or(|(_, b)| loss > *b) {
            best = Some((set, loss));
        }
    }
    Ok(best.expect("at least one set evaluated"))
}

/// True when no footprints overlap and every perturbed vehicle stays in a
/// lane corridor and inside the evaluation range.
pub fn is_plausible(candidate: &SceneCandidate, cfg: &AsgConfig) -> bool {
    if candidate.perturbations.values().any(|p| !cfg.bounds.contains(p)) {
        return false;
    }
    let scene = candidate.realized();
    if !scene.collisions().is_empty() {
        return false;
    }
    let ego = scene.ego().pose;
    candidate.perturbations.keys().all(|id| {
        let Some(v) = scene.vehicle(*id) else {
            return false;
        };
        let (lx, ly) = ego.to_local(v.pose.x, v.pose.y);
        let in_range = *id == scene.ego_id || cfg.eval_range.contains(lx, ly);
        in_range && scene.map.in_corridor(v.pose.x, v.pose.y, cfg.lane_margin)
    })
}

/// One evaluated perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Concatenated (dx, dy, dyaw) triples in `SearchHistory::agents` order.
    pub perturbation: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchHistory {
    pub agents: Vec<AgentId>,
    pub observations: Vec<Observation>,
    /// Best loss after each observation.
    pub best_so_far: Vec<f64>,
    /// Samples rejected as implausible.
    pub rejected: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub candidate: SceneCandidate,
    pub loss: f64,
    pub initial_loss: Option<f64>,
    pub history: SearchHistory,
    /// False when no plausible sample beat the start.
    pub improved: bool,
    pub mode: FusionMode,
}

impl SearchResult {
    /// Loss recomputed from the returned candidate.
    pub fn realized_loss(&self, cfg: &AsgConfig) -> Result<f64> {
        surrogate_loss(&self.candidate, self.mode, cfg)
    }
}

/// Vehicles the pose search may move.
pub fn perturbable_agents(scene: &Scene, collaborators: &[AgentId], cfg: &AsgConfig) -> Vec<AgentId> {
    let ego = scene.ego().pose;
    let mut out: Vec<AgentId> = collaborators.iter().copied().filter(|&c| c != scene.ego_id).collect();
    let mut rest: Vec<&VehicleState> = scene
        .vehicles
        .iter()
        .filter(|v| v.id != scene.ego_id && !out.contains(&v.id))
        .filter(|v| {
            let (lx, ly) = ego.to_local(v.pose.x, v.pose.y);
            cfg.eval_range.contains(lx, ly)
        })
        .collect();
    rest.sort_by(|a, b| a.pose.distance_to(&ego).total_cmp(&b.pose.distance_to(&ego)).then(a.id.cmp(&b.id)));
    for v in rest {
        if out.len() >= cfg.perturbed.max(collaborators.len()) {
            break;
        }
        out.push(v.id);
    }
    out
}

fn with_vector(start: &SceneCandidate, agents: &[AgentId], x: &[f64]) -> SceneCandidate {
    let mut c = start.clone();
    c.perturbations = agents
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, [x[3 * i], x[3 * i + 1], x[3 * i + 2]]))
        .collect();
    c
}

/// Cross-entropy search over bounded pose perturbations.
///
/// The first sample is always the zero perturbation, so the result is never
/// worse than the starting scene.
pub fn search_perturbations<R: Rng + ?Sized>(
    start: &SceneCandidate,
    mode: FusionMode,
    cfg: &AsgConfig,
    rng: &mut R,
) -> Result<SearchResult> {
    cfg.validate()?;
    let agents = perturbable_agents(&start.base, &start.collaborators, cfg);
    let dim = 3 * agents.len();
    let limits: Vec<f64> = (0..dim).map(|i| cfg.bounds.as_array()[i % 3]).collect();
    let mut mean = vec![0.0; dim];
    let mut sigma: Vec<f64> = limits.iter().map(|b| 0.5 * b).collect();
    let floor: Vec<f64> = limits.iter().map(|b| 0.05 * b).collect();

    let mut history = SearchHistory {
        agents: agents.clone(),
        ..Default::default()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut initial_loss = None;
    let max_draws = cfg.budget.saturating_mul(50);
    let mut draws = 0usize;
    let mut first = true;

    while history.observations.len() < cfg.budget && draws < max_draws {
        let mut scored: Vec<(Vec<f64>, f64)> = Vec::with_capacity(cfg.population);
        let mut attempts = 0usize;
        while scored.len() < cfg.population
            && history.observations.len() < cfg.budget
            && attempts < cfg.population * 50
            && draws < max_draws
        {
            attempts += 1;
            draws += 1;
            let x: Vec<f64> = if first {
                first = false;
                vec![0.0; dim]
            } else {
                (0..dim)
                    .map(|i| {
                        let z: f64 = rng.sample(StandardNormal);
                        (mean[i] + sigma[i] * z).clamp(-limits[i], limits[i])
                    })
                    .collect()
            };
            let cand = with_vector(start, &agents, &x);
            if !is_plausible(&cand, cfg) {
                history.rejected += 1;
                continue;
            }
            let loss = surrogate_loss(&cand, mode, cfg)?;
            if x.iter().all(|&v| v == 0.0) && initial_loss.is_none() {
                initial_loss = Some(loss);
            }
            if best.as_ref().is_none_or(|(_, b)| loss > *b) {
                best = Some((x.clone(), loss));
            }
            history.observations.push(Observation {
                perturbation: x.clone(),
                loss,
            });
            history.best_so_far.push(best.as_ref().expect("set above").1);
            scored.push((x, loss));
        }
        if scored.is_empty() {
            if attempts >= cfg.population * 50 {
                break;
            }
            continue;
        }
        // Stable sort keeps earlier samples first among equal losses.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let elite = &scored[..cfg.elite.min(scored.len())];
        let n = elite.len() as f64;
        for i in 0..dim {
            let m = elite.iter().map(|(x, _)| x[i]).sum::<f64>() / n;
            let var = elite.iter().map(|(x, _)| (x[i] - m).powi(2)).sum::<f64>() / n;
            mean[i] = (1.0 - cfg.smoothing) * mean[i] + cfg.smoothing * m;
            sigma[i] = ((1.0 - cfg.smoothing) * sigma[i] + cfg.smoothing * var.sqrt()).max(floor[i]);
        }
    }

    match best {
        Some((x, loss)) => {
            let candidate = with_vector(start, &agents, &x);
            let improved = initial_loss.is_none_or(|l0| loss > l0);
            Ok(SearchResult {
                candidate,
                loss,
                initial_loss,
                history,
                improved,
                mode,
            })
        }
        None => Ok(SearchResult {
            candidate: start.clone(),
            loss: f64::NAN,
            initial_loss,
            history,
            improved: false,
            mode,
        }),
    }
}

/// Independent search stream for one (scene, fusion mode) pair.
pub fn search_rng(seed: u64, scene_index: usize, mode: FusionMode) -> ChaCha8Rng {
    let mode_index = FusionMode::ALL.iter().position(|&m| m == mode).expect("listed mode") as u32;
    let scene_seed = sub_seed(seed, AgentId(scene_index as u32), Stream::Search);
    stream_rng(scene_seed, AgentId(mode_index), Stream::Search)
}

/// Before/after figures for one scene and fusion mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsgOutcome {
    pub mode: FusionMode,
    pub normal_ap: f64,
    pub challenging_ap: f64,
    pub collaborators: Vec<AgentId>,
    pub perturbations: BTreeMap<AgentId, [f64; 3]>,
    pub best_so_far: Vec<f64>,
}

impl AsgOutcome {
    pub fn drop(&self) -> f64 {
        self.normal_ap - self.challenging_ap
    }
}

/// Full two-stage generation for one scene: collaborator search, then pose
/// search seeded from the chosen set.
pub fn generate_challenging<R: Rng + ?Sized>(
    scene: &Scene,
    mode: FusionMode,
    cfg: &AsgConfig,
    rng: &mut R,
) -> Result<(AsgOutcome, SceneCandidate)> {
    let normal = SceneCandidate::new(scene.clone(), nearest_collaborators(scene, cfg)?);
    let normal_ap = surrogate_ap(&normal, mode, cfg)?;
    let (collaborators, acs_loss) = search_collaborators(scene, cfg.k, mode, cfg, rng)?;
    let start = if acs_loss >= 1.0 - normal_ap {
        SceneCandidate::new(scene.clone(), collaborators)
    } else {
        normal
    };
    let result = search_perturbations(&start, mode, cfg, rng)?;
    let challenging_ap = if result.loss.is_finite() {
        1.0 - result.loss
    } else {
        surrogate_ap(&result.candidate, mode, cfg)?
    };
    let outcome = AsgOutcome {
        mode,
        normal_ap,
        challenging_ap,
        collaborators: result.candidate.collaborators.clone(),
        perturbations: result.candidate.perturbations.clone(),
        best_so_far: result.history.best_so_far,
    };
    Ok((outcome, result.candidate))
}

/// On-disk scene: ego id, inline lane map and vehicle states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub name: String,
    pub ego: AgentId,
    pub map: serde_json::Value,
    pub vehicles: Vec<VehicleState>,
}

impl SceneFile {
    pub fn from_scene(name: impl Into<String>, scene: &Scene) -> Self {
        Self {
            name: name.into(),
            ego: scene.ego_id,
            map: scene.map.to_json_value(),
            vehicles: scene.vehicles.clone(),
        }
    }

    pub fn into_scene(self) -> Result<Scene> {
        let map = LaneGraph::from_json(&self.map.to_string())?;
        Scene::new(0.0, self.vehicles, self.ego, Arc::new(map))
    }
}

pub fn load_scene(path: &Path) -> Result<(String, Scene)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let name = file.name.clone();
    Ok((name, file.into_scene()?))
}

mod scene_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(scene: &Scene, s: S) -> std::result::Result<S::Ok, S::Error> {
        SceneFile::from_scene("", scene).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Scene, D::Error> {
        let file = SceneFile::deserialize(d)?;
        file.into_scene().map_err(serde::de::Error::custom)
    }
}

pub const CORPUS_LANES: usize = 4;
pub const CORPUS_LANE_WIDTH: f64 = 3.5;

/// Straight multi-lane road used by the generated corpus.
pub fn corpus_map() -> LaneGraph {
    let lanes = (0..CORPUS_LANES)
        .map(|i| {
            let y = i as f64 * CORPUS_LANE_WIDTH;
            Lane::new(format!("lane{i}"), LaneKind::Mainline, CORPUS_LANE_WIDTH, vec![[-300.0, y], [300.0, y]])
                .expect("static lane")
        })
        .collect();
    LaneGraph::new(lanes, BTreeMap::new(), None).expect("static map")
}

/// Random traffic around a connected ego: `cavs` connected agents and
/// `background` unconnected vehicles, all clear of each other by 1 m.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, cavs: usize, background: usize, half_span: f64) -> Scene {
    let map = Arc::new(corpus_map());
    let mut vehicles: Vec<VehicleState> = Vec::new();
    let ego_lane = rng.random_range(0..CORPUS_LANES);
    vehicles.push(VehicleState::new(
        AgentId(0),
        Role::MergingCav,
        Pose2D::new(0.0, ego_lane as f64 * CORPUS_LANE_WIDTH, 0.0),
        20.0,
    ));
    let total = 1 + cavs + background;
    let mut lanes: Vec<usize> = (0..CORPUS_LANES).collect();
    while vehicles.len() < total {
        lanes.shuffle(rng);
        let lane = lanes[0];
        let x = rng.random_range(-half_span..half_span);
        let y = lane as f64 * CORPUS_LANE_WIDTH + rng.random_range(-0.3..0.3);
        let yaw = rng.random_range(-0.03..0.03);
        let id = AgentId(vehicles.len() as u32);
        let role = if vehicles.len() <= cavs { Role::PlatoonMember } else { Role::Background };
        let v = VehicleState::new(id, role, Pose2D::new(x, y, yaw), 20.0);
        let mut grown = v.footprint();
        grown.length += 2.0;
        grown.width += 2.0;
        let clear = vehicles
            .iter()
            .all(|o| box_iou_bev(&grown, &o.footprint()).unwrap_or(1.0) == 0.0);
        if clear {
            vehicles.push(v);
        }
    }
    Scene::new(0.0, vehicles, AgentId(0), map).expect("generated scene is valid")
}

/// Deterministic corpus of `n` scenes.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_scene(&mut rng, 4, 8, 45.0)).collect()
}
