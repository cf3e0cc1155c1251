//! Periodic Lorentz gas: billiard map on a table of disks repeated along a
//! lattice, with the integer displacement of the cell index as cocycle.
//!
//! Positions are kept relative to the origin of the current cell, so floating
//! point values stay small; the cell index itself is exact integer data.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub type Vec2 = [f64; 2];

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Geometry {
    /// Lattice spanned by the two basis vectors; cell index in `Z^2`.
    Plane { basis: [Vec2; 2] },
    /// `Z` along x with spacing `length`, torus of circumference `width` along y.
    Tube { length: f64, width: f64 },
    /// Strip `0 < y < width` between two flat mirrors, `Z` along x.
    HardWallTube { length: f64, width: f64 },
}

impl Geometry {
    /// Rank of the cell index.
    pub fn dims(&self) -> usize {
        match self {
            Geometry::Plane { .. } => 2,
            Geometry::Tube { .. } | Geometry::HardWallTube { .. } => 1,
        }
    }

    fn basis(&self) -> [Vec2; 2] {
        match *self {
            Geometry::Plane { basis } => basis,
            Geometry::Tube { length, width } | Geometry::HardWallTube { length, width } => {
                [[length, 0.0], [0.0, width]]
            }
        }
    }

    /// Whether copies are repeated along the second basis vector.
    fn second_copies(&self) -> bool {
        !matches!(self, Geometry::HardWallTube { .. })
    }

    /// Lower bound on `|j B|` per unit of `|j|_inf`.
    fn spacing(&self) -> f64 {
        let [a, b] = self.basis();
        match self {
            Geometry::HardWallTube { length, .. } => *length,
            _ => {
                // Smallest singular value of the 2x2 basis matrix.
                let (p, q, r) = (dot(a, a), dot(a, b), dot(b, b));
                let tr = p + r;
                let det = p * r - q * q;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                (tr / 2.0 - disc).max(0.0).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorentzConfig {
    pub geometry: Geometry,
    pub scatterers: Vec<Scatterer>,
    pub horizon_cells: u32,
    #[serde(default = "default_tangency")]
    pub tangency_eps: f64,
    #[serde(default = "default_reversal")]
    pub reversal_eps: f64,
}

fn default_tangency() -> f64 {
    1e-12
}

fn default_reversal() -> f64 {
    1e-6
}

pub const PRESETS: [&str; 4] = ["finite-horizon-square", "finite-horizon-tube", "hard-wall-tube", "open-corridor-square"];

impl LorentzConfig {
    fn with(geometry: Geometry, scatterers: Vec<Scatterer>, horizon_cells: u32) -> Self {
        LorentzConfig { geometry, scatterers, horizon_cells, tangency_eps: default_tangency(), reversal_eps: default_reversal() }
    }

    /// Named tables. The two finite-horizon ones share the unit square with
    /// disks of radius 0.4 at the corners and 0.2 at the center, which
    /// closes the horizontal and vertical corridors a single disk leaves.
    pub fn preset(name: &str) -> Result<Self> {
        let blocked = || {
            vec![
                Scatterer { center: [0.0, 0.0], radius: 0.4 },
                Scatterer { center: [0.5, 0.5], radius: 0.2 },
            ]
        };
        let cfg = match name {
            "finite-horizon-square" => Self::with(Geometry::Plane { basis: [[1.0, 0.0], [0.0, 1.0]] }, blocked(), 3),
            "finite-horizon-tube" => Self::with(Geometry::Tube { length: 1.0, width: 1.0 }, blocked(), 3),
            "hard-wall-tube" => Self::with(
                Geometry::HardWallTube { length: 1.0, width: 1.0 },
                vec![Scatterer { center: [0.5, 0.5], radius: 0.4 }],
                3,
            ),
            "open-corridor-square" => Self::with(
                Geometry::Plane { basis: [[1.0, 0.0], [0.0, 1.0]] },
                vec![Scatterer { center: [0.0, 0.0], radius: 0.3 }],
                3,
            ),
            other => return Err(Error::InvalidLorentz(vec![format!("unknown preset {other:?}; known: {PRESETS:?}")])),
        };
        Ok(cfg)
    }

    fn offset(&self, j: [i64; 2]) -> Vec2 {
        let [a, b] = self.geometry.basis();
        add(scale(a, j[0] as f64), scale(b, j[1] as f64))
    }

    /// Checks radii, pairwise disjointness over the `(2H+1)^2` neighborhood
    /// and fit inside the tube.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.scatterers.is_empty() {
            bad.push("no scatterers".to_string());
        }
        if self.horizon_cells == 0 {
            bad.push("horizon_cells must be positive".into());
        }
        if !(self.tangency_eps > 0.0) || !(self.reversal_eps > 0.0) {
            bad.push("tolerances must be positive".into());
        }
        let [a, b] = self.geometry.basis();
        if (a[0] * b[1] - a[1] * b[0]).abs() < 1e-12 || !a.iter().chain(&b).all(|x| x.is_finite()) {
            bad.push("lattice basis is degenerate".into());
        }
        for (k, s) in self.scatterers.iter().enumerate() {
            if !(s.radius > 0.0) || !s.radius.is_finite() || !s.center.iter().all(|x| x.is_finite()) {
                bad.push(format!("scatterers[{k}]: radius must be positive and finite"));
            }
            match self.geometry {
                Geometry::Tube { width, .. } if 2.0 * s.radius >= width => {
                    bad.push(format!("scatterers[{k}]: diameter does not fit the tube width {width}"))
                }
                Geometry::HardWallTube { width, .. }
                    if s.center[1] - s.radius <= 0.0 || s.center[1] + s.radius >= width =>
                {
                    bad.push(format!("scatterers[{k}]: disk touches a wall"))
                }
                _ => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::InvalidLorentz(bad));
        }
        let h = self.horizon_cells as i64;
        let ys = if self.geometry.second_copies() { -h..=h } else { 0..=0 };
        for (k, s) in self.scatterers.iter().enumerate() {
            for (l, t) in self.scatterers.iter().enumerate() {
                for jx in -h..=h {
                    for jy in ys.clone() {
                        if k == l && jx == 0 && jy == 0 {
                            continue;
                        }
                        let d = norm(sub(add(t.center, self.offset([jx, jy])), s.center));
                        if d <= s.radius + t.radius {
                            bad.push(format!("scatterers[{k}] and scatterers[{l}] at offset ({jx}, {jy}) overlap"));
                        }
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.sort();
            bad.dedup();
            Err(Error::InvalidLorentz(bad))
        }
    }

    fn displacement(&self, j: [i64; 2]) -> Vec<i64> {
        j[..self.geometry.dims()].to_vec()
    }
}

/// A point on a scatterer boundary with an outgoing unit velocity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineElement {
    pub scatterer: usize,
    pub cell: Vec<i64>,
    /// Boundary angle, `q = center + r (cos theta, sin theta)`.
    pub theta: f64,
    pub velocity: Vec2,
}

impl LineElement {
    pub fn normal(&self) -> Vec2 {
        [self.theta.cos(), self.theta.sin()]
    }

    /// Position relative to the current cell origin.
    pub fn position(&self, config: &LorentzConfig) -> Vec2 {
        let s = &config.scatterers[self.scatterer];
        add(s.center, scale(self.normal(), s.radius))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionEvent {
    pub from: LineElement,
    pub to: LineElement,
    pub flight_time: f64,
    pub displacement: Vec<i64>,
    /// Velocity just before the reflection at `to`.
    pub incoming: Vec2,
}

/// First boundary hit of a free flight.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub scatterer: usize,
    /// Integer lattice offset of the copy that was hit (the cocycle value).
    pub displacement: Vec<i64>,
    /// Hit point relative to the origin of the copy's cell.
    pub point: Vec2,
    pub flight_time: f64,
    /// Velocity on arrival (differs from the launch velocity after wall bounces).
    pub velocity: Vec2,
}

const MIN_FLIGHT: f64 = 1e-9;
const MAX_WALL_BOUNCES: usize = 10_000;

struct Candidate {
    t: f64,
    tangent: bool,
    scatterer: usize,
    j: [i64; 2],
}

/// Closest disk copy hit by `q + t v` (`t > 0`) within the horizon, searching
/// rings of copies outward until a hit is certified.
fn search(config: &LorentzConfig, q: Vec2, v: Vec2, exclude: Option<usize>) -> Result<Option<Candidate>> {
    let h = config.horizon_cells as i64;
    let sigma = config.geometry.spacing();
    let reach = config.scatterers.iter().map(|s| norm(sub(s.center, q)) + s.radius).fold(0.0, f64::max);
    let second = config.geometry.second_copies();
    let mut best: Option<Candidate> = None;
    for ring in 1..=h {
        let lo = if ring == 1 { 0 } else { ring };
        for jx in -ring..=ring {
            for jy in -ring..=ring {
                let r_inf = jx.abs().max(jy.abs());
                if (r_inf < lo) || (!second && jy != 0) {
                    continue;
                }
                if ring == 1 && r_inf > 1 {
                    continue;
                }
                let off = config.offset([jx, jy]);
                for (k, s) in config.scatterers.iter().enumerate() {
                    if exclude == Some(k) && jx == 0 && jy == 0 {
                        continue;
                    }
                    let w = sub(q, add(s.center, off));
                    let b = dot(w, v);
                    if b >= 0.0 {
                        continue;
                    }
                    let c = dot(w, w) - s.radius * s.radius;
                    let disc = b * b - c;
                    if disc < 0.0 {
                        continue;
                    }
                    let tangent = disc < config.tangency_eps;
                    let t = if tangent { -b } else { -b - disc.sqrt() };
                    if t <= MIN_FLIGHT {
                        continue;
                    }
                    if best.as_ref().is_none_or(|c| t < c.t) {
                        best = Some(Candidate { t, tangent, scatterer: k, j: [jx, jy] });
                    }
                }
            }
        }
        let bound = sigma * (ring + 1) as f64 - reach;
        if let Some(c) = &best {
            if c.t <= bound {
                return Ok(best);
            }
        }
    }
    Ok(None)
}

fn flight(config: &LorentzConfig, q0: Vec2, v0: Vec2, exclude: Option<usize>) -> Result<Hit> {
    let escape = || Error::HorizonEscape { cells: config.horizon_cells };
    let mut q = q0;
    let mut v = v0;
    let mut shift = 0i64;
    let mut elapsed = 0.0;
    let mut exclude = exclude;
    for _ in 0..MAX_WALL_BOUNCES {
        let found = search(config, q, v, exclude)?;
        let wall = match config.geometry {
            Geometry::HardWallTube { width, .. } if v[1] > 0.0 => Some((width - q[1]) / v[1]),
            Geometry::HardWallTube { .. } if v[1] < 0.0 => Some(-q[1] / v[1]),
            _ => None,
        };
        match (found, wall) {
            (Some(c), w) if w.is_none_or(|tw| c.t < tw) => {
                if c.tangent {
                    return Err(Error::Singular(format!(
                        "free flight is tangent to scatterer {} (discriminant below {:e})",
                        c.scatterer, config.tangency_eps
                    )));
                }
                let mut j = c.j;
                j[0] += shift;
                let p = add(q, scale(v, c.t));
                let point = sub(p, config.offset(c.j));
                return Ok(Hit {
                    scatterer: c.scatterer,
                    displacement: config.displacement(j),
                    point,
                    flight_time: elapsed + c.t,
                    velocity: v,
                });
            }
            (_, Some(tw)) => {
                let Geometry::HardWallTube { length, .. } = config.geometry else { unreachable!() };
                let bound = length * (config.horizon_cells as f64 + 1.0)
                    - config.scatterers.iter().map(|s| norm(sub(s.center, q)) + s.radius).fold(0.0, f64::max);
                if tw > bound.max(0.0) + length * config.horizon_cells as f64 {
                    return Err(escape());
                }
                if v[1].abs() < config.tangency_eps {
                    return Err(Error::Singular("grazing a wall".into()));
                }
                q = add(q, scale(v, tw));
                v = [v[0], -v[1]];
                elapsed += tw;
                let k = (q[0] / length).floor() as i64;
                q[0] -= k as f64 * length;
                shift += k;
                exclude = None;
            }
            _ => return Err(escape()),
        }
    }
    Err(escape())
}

/// First collision of the ray `q + t v` with a disk copy, `q` relative to the
/// origin of cell 0.
pub fn next_collision(q: Vec2, v: Vec2, config: &LorentzConfig) -> Result<Hit> {
    flight(config, q, v, None)
}

/// Specular reflection `v - 2 (v.n) n`.
pub fn reflect(v: Vec2, n: Vec2, tangency_eps: f64) -> Result<Vec2> {
    let vn = dot(v, n);
    if vn.abs() < tangency_eps {
        return Err(Error::Singular(format!("grazing incidence, |v.n| = {:e}", vn.abs())));
    }
    Ok(sub(v, scale(n, 2.0 * vn)))
}

/// One application of the billiard map with its displacement.
pub fn billiard_step(le: &LineElement, config: &LorentzConfig) -> Result<CollisionEvent> {
    let q = le.position(config);
    let hit = flight(config, q, le.velocity, Some(le.scatterer))?;
    let s = &config.scatterers[hit.scatterer];
    let d = sub(hit.point, s.center);
    let n = scale(d, 1.0 / norm(d));
    let v_out = reflect(hit.velocity, n, config.tangency_eps)?;
    let cell: Vec<i64> = le.cell.iter().zip(&hit.displacement).map(|(a, b)| a + b).collect();
    let theta = n[1].atan2(n[0]).rem_euclid(2.0 * PI);
    Ok(CollisionEvent {
        from: le.clone(),
        to: LineElement { scatterer: hit.scatterer, cell, theta, velocity: v_out },
        flight_time: hit.flight_time,
        displacement: hit.displacement,
        incoming: hit.velocity,
    })
}

/// Time reversal: same boundary point, velocity reversed from the arrival.
pub fn reverse(event: &CollisionEvent) -> LineElement {
    LineElement { velocity: scale(event.incoming, -1.0), ..event.to.clone() }
}

/// Draws a line element from `(v.n) dq dv`: scatterer proportional to
/// circumference, uniform boundary angle, cosine law for the direction.
pub fn sample_line_element(rng: &mut impl Rng, config: &LorentzConfig) -> LineElement {
    let total: f64 = config.scatterers.iter().map(|s| s.radius).sum();
    let mut pick = rng.random::<f64>() * total;
    let mut scatterer = config.scatterers.len() - 1;
    for (k, s) in config.scatterers.iter().enumerate() {
        if pick < s.radius {
            scatterer = k;
            break;
        }
        pick -= s.radius;
    }
    let theta = rng.random::<f64>() * 2.0 * PI;
    let u: f64 = rng.random();
    let alpha = (2.0 * u - 1.0).asin();
    let phi = theta + alpha;
    LineElement { scatterer, cell: vec![0; config.geometry.dims()], theta, velocity: [phi.cos(), phi.sin()] }
}

/// Sample for `(seed, index)`, reproducible and independent of call order.
pub fn sample_invariant_measure(seed: u64, index: u64, config: &LorentzConfig) -> LineElement {
    sample_line_element(&mut stream(seed, index), config)
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleParams {
    pub trajectories: usize,
    pub collisions: usize,
    pub seed: u64,
    /// Collision counts at which statistics are taken; default `M/10, ..., M`.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl EnsembleParams {
    pub fn checkpoint_list(&self) -> Vec<usize> {
        match &self.checkpoints {
            Some(c) => c.clone(),
            None => (1..=10).map(|k| (self.collisions * k / 10).max(1)).collect(),
        }
    }
}

/// Result of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub completed: bool,
    pub displacements: Vec<Vec<i64>>,
    /// Collision number of the first return to the origin cell.
    pub first_return: Option<usize>,
    pub visits: Vec<u64>,
    pub resamples: u32,
    pub escapes: u32,
    pub speed_deviation: f64,
}

const MAX_ATTEMPTS: u32 = 100;

pub fn run_trajectory(config: &LorentzConfig, params: &EnsembleParams, index: u64) -> Trajectory {
    let checkpoints = params.checkpoint_list();
    let mut rng = stream(params.seed, index);
    let dims = config.geometry.dims();
    let mut resamples = 0;
    let mut escapes = 0;
    for _ in 0..MAX_ATTEMPTS {
        let mut le = sample_line_element(&mut rng, config);
        let mut total = vec![0i64; dims];
        let mut displacements = Vec::with_capacity(checkpoints.len());
        let mut first_return = None;
        let mut visits = vec![0u64; config.scatterers.len()];
        let mut speed_deviation: f64 = 0.0;
        let mut next_cp = 0;
        let mut failed = false;
        for n in 1..=params.collisions {
            match billiard_step(&le, config) {
                Ok(ev) => {
                    for (t, d) in total.iter_mut().zip(&ev.displacement) {
                        *t += d;
                    }
                    visits[ev.to.scatterer] += 1;
                    speed_deviation = speed_deviation.max((norm(ev.to.velocity) - 1.0).abs());
                    if first_return.is_none() && total.iter().all(|&x| x == 0) {
                        first_return = Some(n);
                    }
                    le = ev.to;
                }
                Err(Error::HorizonEscape { .. }) => {
                    escapes += 1;
                    failed = true;
                    break;
                }
                Err(_) => {
                    resamples += 1;
                    failed = true;
                    break;
                }
            }
            while next_cp < checkpoints.len() && checkpoints[next_cp] == n {
                displacements.push(total.clone());
                next_cp += 1;
            }
        }
        if !failed {
            return Trajectory { completed: true, displacements, first_return, visits, resamples, escapes, speed_deviation };
        }
    }
    Trajectory {
        completed: false,
        displacements: Vec::new(),
        first_return: None,
        visits: vec![0; config.scatterers.len()],
        resamples,
        escapes,
        speed_deviation: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub trajectories: usize,
    pub collisions: usize,
    pub seed: u64,
    pub completed: usize,
    pub abandoned: usize,
    pub resamples: u64,
    pub escapes: u64,
    pub drift_mean: Vec<f64>,
    pub drift_se: Vec<f64>,
    pub checkpoints: Vec<usize>,
    pub covariance: Vec<Vec<Vec<f64>>>,
    /// Standard error of each off-diagonal covariance entry (plane only).
    pub covariance_offdiag_se: Vec<f64>,
    pub covariance_trace: Vec<f64>,
    pub trace_fit: LinearFit,
    pub return_fraction: Vec<f64>,
    pub return_se: Vec<f64>,
    pub cell_histogram: Vec<(Vec<i64>, u64)>,
    pub scatterer_visits: Vec<u64>,
    pub max_speed_deviation: f64,
    pub warnings: Vec<String>,
}

/// Least-squares line through `(x, y)` with its coefficient of determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r_squared = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    LinearFit { slope, intercept: my - slope * mx, r_squared }
}

/// Simulates the ensemble. Trajectories run in parallel; the reduction is
/// sequential in trajectory order, so results do not depend on the thread count.
pub fn run_ensemble(config: &LorentzConfig, params: &EnsembleParams) -> Result<(EnsembleStats, Vec<Trajectory>)> {
    config.validate()?;
    let cps = params.checkpoint_list();
    if params.trajectories == 0 || params.collisions == 0 {
        return Err(Error::InvalidLorentz(vec!["trajectories and collisions must be positive".into()]));
    }
    if cps.is_empty() || cps.windows(2).any(|w| w[0] >= w[1]) || cps.iter().any(|&c| c == 0 || c > params.collisions) {
        return Err(Error::InvalidLorentz(vec!["checkpoints must increase strictly within 1..=collisions".into()]));
    }
    let work = || -> Vec<Trajectory> {
        (0..params.trajectories as u64).into_par_iter().map(|i| run_trajectory(config, params, i)).collect()
    };
    let runs = match params.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidLorentz(vec![format!("thread pool: {e}")]))?
            .install(work),
        None => work(),
    };
    Ok((reduce(config, params, &runs), runs))
}

fn reduce(config: &LorentzConfig, params: &EnsembleParams, runs: &[Trajectory]) -> EnsembleStats {
    let dims = config.geometry.dims();
    let cps = params.checkpoint_list();
    let done: Vec<&Trajectory> = runs.iter().filter(|t| t.completed).collect();
    let n = done.len();
    let nf = n as f64;
    let m = params.collisions as f64;
    let mut warnings = Vec::new();
    let resamples: u64 = runs.iter().map(|t| t.resamples as u64).sum();
    let escapes: u64 = runs.iter().map(|t| t.escapes as u64).sum();
    let rate = (resamples + escapes) as f64 / (params.trajectories as f64 * m);
    if rate > 0.01 {
        warnings.push(format!("resample rate {rate:.4} per collision exceeds 1%: tangency- or corridor-dominated geometry"));
    }
    if n < runs.len() {
        warnings.push(format!("{} trajectories abandoned after {MAX_ATTEMPTS} attempts", runs.len() - n));
    }
    let last = cps.len() - 1;
    let mut drift_mean = vec![0.0; dims];
    let mut drift_se = vec![0.0; dims];
    if n > 0 {
        for k in 0..dims {
            // Integer sums are exact; only the final division rounds.
            let s: i128 = done.iter().map(|t| t.displacements[last][k] as i128).sum();
            let s2: i128 = done.iter().map(|t| (t.displacements[last][k] as i128).pow(2)).sum();
            let mean = s as f64 / nf;
            let var = if n > 1 { (s2 as f64 - nf * mean * mean) / (nf - 1.0) } else { 0.0 };
            drift_mean[k] = mean / m;
            drift_se[k] = (var.max(0.0) / nf).sqrt() / m;
        }
    }
    let mut covariance = Vec::new();
    let mut offdiag_se = Vec::new();
    let mut trace = Vec::new();
    let mut return_fraction = Vec::new();
    let mut return_se = Vec::new();
    for (ci, &cp) in cps.iter().enumerate() {
        let mean: Vec<f64> = (0..dims)
            .map(|k| done.iter().map(|t| t.displacements[ci][k] as i128).sum::<i128>() as f64 / nf.max(1.0))
            .collect();
        let mut cov = vec![vec![0.0; dims]; dims];
        for a in 0..dims {
            for b in 0..dims {
                let s: f64 = done
                    .iter()
                    .map(|t| (t.displacements[ci][a] as f64 - mean[a]) * (t.displacements[ci][b] as f64 - mean[b]))
                    .sum();
                cov[a][b] = if n > 1 { s / (nf - 1.0) } else { 0.0 };
            }
        }
        if dims == 2 && n > 1 {
            let prods: Vec<f64> = done
                .iter()
                .map(|t| (t.displacements[ci][0] as f64 - mean[0]) * (t.displacements[ci][1] as f64 - mean[1]))
                .collect();
            let mp = prods.iter().sum::<f64>() / nf;
            let vp = prods.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / (nf - 1.0);
            offdiag_se.push((vp / nf).sqrt());
        }
        trace.push((0..dims).map(|k| cov[k][k]).sum());
        covariance.push(cov);
        let returned = done.iter().filter(|t| t.first_return.is_some_and(|r| r <= cp)).count() as f64;
        let p = if n > 0 { returned / nf } else { 0.0 };
        return_fraction.push(p);
        return_se.push(if n > 0 { (p * (1.0 - p) / nf).sqrt() } else { 0.0 });
    }
    let xs: Vec<f64> = cps.iter().map(|&c| c as f64).collect();
    let trace_fit = linear_fit(&xs, &trace);
    let mut hist: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
    for t in &done {
        *hist.entry(t.displacements[last].clone()).or_insert(0) += 1;
    }
    let mut visits = vec![0u64; config.scatterers.len()];
    for t in &done {
        for (a, b) in visits.iter_mut().zip(&t.visits) {
            *a += b;
        }
    }
    EnsembleStats {
        trajectories: params.trajectories,
        collisions: params.collisions,
        seed: params.seed,
        completed: n,
        abandoned: runs.len() - n,
        resamples,
        escapes,
        drift_mean,
        drift_se,
        checkpoints: cps,
        covariance,
        covariance_offdiag_se: offdiag_se,
        covariance_trace: trace,
        trace_fit,
        return_fraction,
        return_se,
        cell_histogram: hist.into_iter().collect(),
        scatterer_visits: visits,
        max_speed_deviation: done.iter().map(|t| t.speed_deviation).fold(0.0, f64::max),
        warnings,
    }
}

/// Per-checkpoint displacements as CSV with columns
/// `trajectory_id,checkpoint,dx,dy,returned_by_checkpoint` (`dy` empty in tubes).
pub fn trajectories_csv(stats: &EnsembleStats, runs: &[Trajectory]) -> Result<String> {
    let io = |e: csv::Error| Error::Io(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trajectory_id", "checkpoint", "dx", "dy", "returned_by_checkpoint"]).map_err(io)?;
    for (id, t) in runs.iter().enumerate().filter(|(_, t)| t.completed) {
        for (ci, &cp) in stats.checkpoints.iter().enumerate() {
            let d = &t.displacements[ci];
            let dy = d.get(1).map(i64::to_string).unwrap_or_default();
            let ret = t.first_return.is_some_and(|r| r <= cp);
            w.write_record([id.to_string(), cp.to_string(), d[0].to_string(), dy, ret.to_string()]).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(spacing: f64, r: f64) -> LorentzConfig {
        LorentzConfig::with(
            Geometry::Plane { basis: [[spacing, 0.0], [0.0, spacing]] },
            vec![Scatterer { center: [0.0, 0.0], radius: r }],
            3,
        )
    }

    fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn head_on_hit() {
        let hit = next_collision([1.0, 0.0], [-1.0, 0.0], &square(4.0, 0.3)).unwrap();
        assert!(close(hit.point, [0.3, 0.0], 1e-12));
        assert!((hit.flight_time - 0.7).abs() < 1e-12);
        assert_eq!(hit.displacement, vec![0, 0]);
    }

    #[test]
    fn open_corridor_escapes() {
        let err = next_collision([0.5, 0.5], [0.0, 1.0], &square(1.0, 0.3)).unwrap_err();
        assert!(matches!(err, Error::HorizonEscape { .. }));
    }

    #[test]
    fn hit_in_next_column_has_unit_displacement() {
        let hit = next_collision([0.3, 0.0], [1.0, 0.0], &square(1.0, 0.3)).unwrap();
        assert!((hit.flight_time - 0.4).abs() < 1e-12);
        assert_eq!(hit.displacement, vec![1, 0]);
        // Relative to the hit copy's cell: (0.7, 0) - (1, 0).
        assert!(close(hit.point, [-0.3, 0.0], 1e-12));
    }

    #[test]
    fn reflection_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(reflect([-1.0, 0.0], [1.0, 0.0], 1e-12).unwrap(), [1.0, 0.0], 1e-15));
        assert!(close(reflect([-h, -h], [0.0, 1.0], 1e-12).unwrap(), [-h, h], 1e-15));
        assert!(close(reflect([0.0, -1.0], [h, h], 1e-12).unwrap(), [1.0, 0.0], 1e-15));
        assert!(matches!(reflect([1.0, 0.0], [0.0, 1.0], 1e-12), Err(Error::Singular(_))));
    }

    #[test]
    fn two_disk_bounce_alternates() {
        let cfg = square(1.0, 0.3);
        let mut le = LineElement { scatterer: 0, cell: vec![0, 0], theta: 0.0, velocity: [1.0, 0.0] };
        let mut psi = Vec::new();
        for _ in 0..4 {
            let ev = billiard_step(&le, &cfg).unwrap();
            psi.push(ev.displacement.clone());
            assert!((norm(ev.to.velocity) - 1.0).abs() < 1e-12);
            le = ev.to;
        }
        assert_eq!(psi, vec![vec![1, 0], vec![-1, 0], vec![1, 0], vec![-1, 0]]);
    }

    #[test]
    fn reversal_retraces_each_collision() {
        let cfg = LorentzConfig::preset("finite-horizon-square").unwrap();
        let mut le = sample_invariant_measure(7, 0, &cfg);
        for _ in 0..100 {
            let ev = billiard_step(&le, &cfg).unwrap();
            let back = billiard_step(&reverse(&ev), &cfg).unwrap();
            assert_eq!(back.to.cell, ev.from.cell);
            assert!(close(back.to.position(&cfg), ev.from.position(&cfg), cfg.reversal_eps));
            le = ev.to;
        }
    }

    #[test]
    fn samples_are_outgoing() {
        let cfg = LorentzConfig::preset("finite-horizon-square").unwrap();
        let mut rng = stream(3, 0);
        for _ in 0..1000 {
            let le = sample_line_element(&mut rng, &cfg);
            assert!(dot(le.velocity, le.normal()) >= 0.0);
        }
    }

    #[test]
    fn validation_rejects_overlaps_and_bad_tubes() {
        assert!(square(1.0, 0.6).validate().is_err());
        assert!(square(1.0, 0.3).validate().is_ok());
        let tube = LorentzConfig::with(Geometry::Tube { length: 1.0, width: 0.5 }, vec![Scatterer { center: [0.0, 0.0], radius: 0.3 }], 2);
        assert!(tube.validate().is_err());
        for name in PRESETS {
            LorentzConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn hard_wall_flight_reflects_off_mirrors() {
        let cfg = LorentzConfig::preset("hard-wall-tube").unwrap();
        // Straight up from the top of the disk: wall at y = 1 sends it back.
        let hit = next_collision([0.5, 0.9], [0.0, 1.0], &cfg).unwrap();
        assert_eq!(hit.scatterer, 0);
        assert_eq!(hit.displacement, vec![0]);
        assert!((hit.flight_time - 0.2).abs() < 1e-12);
        assert!(close(hit.velocity, [0.0, -1.0], 1e-15));
    }

    #[test]
    fn tube_displacements_are_one_dimensional() {
        let cfg = LorentzConfig::preset("finite-horizon-tube").unwrap();
        let params = EnsembleParams { trajectories: 20, collisions: 200, seed: 1, checkpoints: None, threads: Some(2) };
        let (stats, runs) = run_ensemble(&cfg, &params).unwrap();
        assert_eq!(stats.drift_mean.len(), 1);
        assert!(runs.iter().all(|t| t.displacements.iter().all(|d| d.len() == 1)));
    }

    #[test]
    fn ensemble_is_reproducible_across_thread_counts() {
        let cfg = LorentzConfig::preset("finite-horizon-square").unwrap();
        let p1 = EnsembleParams { trajectories: 40, collisions: 100, seed: 9, checkpoints: None, threads: Some(1) };
        let p4 = EnsembleParams { threads: Some(4), ..p1.clone() };
        let a = serde_json::to_string(&run_ensemble(&cfg, &p1).unwrap().0).unwrap();
        let b = serde_json::to_string(&run_ensemble(&cfg, &p4).unwrap().0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_has_documented_columns() {
        let cfg = LorentzConfig::preset("finite-horizon-square").unwrap();
        let p = EnsembleParams { trajectories: 2, collisions: 10, seed: 1, checkpoints: None, threads: None };
        let (stats, runs) = run_ensemble(&cfg, &p).unwrap();
        let csv = trajectories_csv(&stats, &runs).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("trajectory_id,checkpoint,dx,dy,returned_by_checkpoint"));
        assert_eq!(lines.count(), 20);
    }

    #[test]
    fn fit_of_exact_line_is_perfect() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
    }
}
