//! Benchmark environment generators.
//!
//! Three families: a cyclic grid world with one-hot state features, a
//! three-lane highway driving simulator, and a randomized synthetic CMDP with
//! contextual dynamics standing in for the clinical-records domain. All
//! generators are pure functions of their spec (and seed).

use nalgebra::DMatrix;
use rand::Rng;

use crate::cmdp::{Context, ContextualMdp, Geometry, Kernel, RewardMapping};
use crate::error::{CoirlError, Result};
use crate::rng::{rng_from_seed, sample_simplex};

/// Cyclic grid world: `n` columns by `m` rows.
#[derive(Debug, Clone, Copy)]
pub struct GridWorldSpec {
    pub n: usize,
    pub m: usize,
    pub gamma: f64,
}

/// Driving simulator. The layout constants (17 x-positions, 3 speeds, 3
/// lanes, 10 y-positions, 2 steering actions) are fixed.
#[derive(Debug, Clone, Copy)]
pub struct DrivingSpec {
    pub gamma: f64,
}

impl Default for DrivingSpec {
    fn default() -> Self {
        Self { gamma: 0.9 }
    }
}

/// Randomized synthetic CMDP with `d >= 2` distinct base kernels.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticCmdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: usize,
    pub k: usize,
    pub terminal_count: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Geometry in which the true mapping is sampled.
    pub geometry: Geometry,
}

/// Grid world with deterministic cyclic moves, one-hot features
/// (`d = k = n*m`) and the identity mapping as ground truth, so the context
/// vector is literally the per-state preference vector.
pub fn make_gridworld(spec: &GridWorldSpec) -> Result<(ContextualMdp, RewardMapping)> {
    let states = spec.n * spec.m;
    if states < 2 {
        return Err(CoirlError::InvalidArgument("grid needs at least 2 states".into()));
    }
    let n_actions = 4; // left, up, right, down
    let mut data = vec![0.0; states * n_actions * states];
    for y in 0..spec.m {
        for x in 0..spec.n {
            let s = y * spec.n + x;
            let targets = [
                y * spec.n + (x + spec.n - 1) % spec.n,       // left
                ((y + spec.m - 1) % spec.m) * spec.n + x,     // up
                y * spec.n + (x + 1) % spec.n,                // right
                ((y + 1) % spec.m) * spec.n + x,              // down
            ];
            for (a, &t) in targets.iter().enumerate() {
                data[(s * n_actions + a) * states + t] = 1.0;
            }
        }
    }
    let kernel = Kernel::new(states, n_actions, data)?;
    let features = DMatrix::identity(states, states);
    let xi = vec![1.0 / states as f64; states];
    // Contextual rewards, context-independent dynamics: every base kernel is
    // the same deterministic walk.
    let cmdp = ContextualMdp::new(vec![kernel; states], features, xi, spec.gamma)?;
    let w_star = RewardMapping::new(DMatrix::identity(states, states), Geometry::LinfBox)?;
    Ok((cmdp, w_star))
}

// Driving layout constants.
const DRIVE_XS: usize = 17;
const DRIVE_SPEEDS: usize = 3;
const DRIVE_LANES: usize = 3;
const DRIVE_YS: usize = 10;
const DRIVE_ACTIONS: usize = 2;
/// On-road x range: the middle 9 of the 17 positions.
const ROAD_MIN_X: usize = 4;
const ROAD_MAX_X: usize = 12;
/// Car B collides when in the agent's lane within this many cells of the
/// bottom of the screen.
const COLLISION_WINDOW: usize = 2;
const START_X: usize = 8;

fn drive_index(x: usize, speed: usize, lane: usize, y: usize) -> usize {
    1 + ((x * DRIVE_SPEEDS + speed) * DRIVE_LANES + lane) * DRIVE_YS + y
}

fn lane_of_x(x: usize) -> Option<usize> {
    if (ROAD_MIN_X..=ROAD_MAX_X).contains(&x) {
        Some((x - ROAD_MIN_X) / 3)
    } else {
        None
    }
}

/// True mappings for the driving simulator.
pub struct DrivingPresets {
    /// Mapping used with the cutting-plane learner (in the l-inf box).
    pub ellipsoid: RewardMapping,
    /// Mapping used in the online descent setting (on the simplex).
    pub online: RewardMapping,
}

/// Three-lane highway with two steering actions and 1531 states: one
/// speed-selection state plus (x, speed, car-B lane, car-B y). Features are
/// (speed, collision, off-road); collision is 0 on collision and 0.5
/// otherwise, off-road is 0.5 on the road and 0 otherwise. Car B drifts down
/// the screen one cell per step per unit of speed above the minimum and
/// respawns in a uniformly random lane at the top; that respawn is the only
/// stochasticity.
pub fn make_driving(spec: &DrivingSpec) -> Result<(ContextualMdp, DrivingPresets)> {
    let states = 1 + DRIVE_XS * DRIVE_SPEEDS * DRIVE_LANES * DRIVE_YS;
    let mut data = vec![0.0; states * DRIVE_ACTIONS * states];
    let mut set = |s: usize, a: usize, next: usize, p: f64| {
        data[(s * DRIVE_ACTIONS + a) * states + next] += p;
    };

    // Speed-selection state: steering left picks the lowest speed, steering
    // right the highest; car B appears in a random lane at the top.
    for a in 0..DRIVE_ACTIONS {
        let speed = if a == 0 { 0 } else { DRIVE_SPEEDS - 1 };
        for lane in 0..DRIVE_LANES {
            set(0, a, drive_index(START_X, speed, lane, DRIVE_YS - 1), 1.0 / DRIVE_LANES as f64);
        }
    }

    for x in 0..DRIVE_XS {
        for speed in 0..DRIVE_SPEEDS {
            for lane in 0..DRIVE_LANES {
                for y in 0..DRIVE_YS {
                    let s = drive_index(x, speed, lane, y);
                    for a in 0..DRIVE_ACTIONS {
                        let nx = if a == 0 { x.saturating_sub(1) } else { (x + 1).min(DRIVE_XS - 1) };
                        // Relative drift of car B: speed index cells per step.
                        if y >= speed {
                            set(s, a, drive_index(nx, speed, lane, y - speed), 1.0);
                        } else {
                            for nl in 0..DRIVE_LANES {
                                set(
                                    s,
                                    a,
                                    drive_index(nx, speed, nl, DRIVE_YS - 1),
                                    1.0 / DRIVE_LANES as f64,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    let kernel = Kernel::new(states, DRIVE_ACTIONS, data)?;
    let mut features = DMatrix::zeros(states, 3);
    // Neutral features at the speed-selection state; it is visited exactly
    // once under every policy so it cancels from all comparisons.
    features[(0, 0)] = 0.0;
    features[(0, 1)] = 0.5;
    features[(0, 2)] = 0.5;
    for x in 0..DRIVE_XS {
        for speed in 0..DRIVE_SPEEDS {
            for lane in 0..DRIVE_LANES {
                for y in 0..DRIVE_YS {
                    let s = drive_index(x, speed, lane, y);
                    features[(s, 0)] = (speed + 1) as f64 / DRIVE_SPEEDS as f64;
                    let collided =
                        lane_of_x(x) == Some(lane) && y < COLLISION_WINDOW;
                    features[(s, 1)] = if collided { 0.0 } else { 0.5 };
                    features[(s, 2)] = if lane_of_x(x).is_some() { 0.5 } else { 0.0 };
                }
            }
        }
    }
    let mut xi = vec![0.0; states];
    xi[0] = 1.0;
    let cmdp = ContextualMdp::new(vec![kernel; 3], features, xi, spec.gamma)?;

    let ellipsoid_raw =
        DMatrix::from_row_slice(3, 3, &[-1.0, 0.75, 0.75, 0.5, -1.0, 1.0, 0.75, 1.0, -0.75]);
    let max_abs = ellipsoid_raw.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let ellipsoid = RewardMapping::new(ellipsoid_raw / max_abs, Geometry::LinfBox)?;

    let online_raw = DMatrix::from_row_slice(
        3,
        3,
        &[0.043, 0.0, 0.043, 0.0, 0.434, 0.0, 0.043, 0.434, 0.0],
    );
    let sum: f64 = online_raw.iter().sum();
    let online = RewardMapping::new(online_raw / sum, Geometry::Simplex)?;

    Ok((cmdp, DrivingPresets { ellipsoid, online }))
}

/// Randomized CMDP with Dirichlet base kernels, uniform features, absorbing
/// terminal states with distinguished feature values and a true mapping
/// sampled in the requested geometry. Bit-reproducible from the seed.
pub fn make_random_cmdp(spec: &SyntheticCmdpSpec) -> Result<(ContextualMdp, RewardMapping)> {
    if spec.d < 2 {
        return Err(CoirlError::InvalidArgument("synthetic CMDP needs d >= 2".into()));
    }
    if spec.terminal_count >= spec.n_states {
        return Err(CoirlError::InvalidArgument("too many terminal states".into()));
    }
    let mut rng = rng_from_seed(spec.seed);
    let n = spec.n_states;
    let first_terminal = n - spec.terminal_count;
    let mut kernels = Vec::with_capacity(spec.d);
    for _ in 0..spec.d {
        let mut data = vec![0.0; n * spec.n_actions * n];
        for s in 0..n {
            for a in 0..spec.n_actions {
                let off = (s * spec.n_actions + a) * n;
                if s >= first_terminal {
                    data[off + s] = 1.0;
                } else {
                    data[off..off + n].copy_from_slice(&sample_simplex(&mut rng, n));
                }
            }
        }
        kernels.push(Kernel::new(n, spec.n_actions, data)?);
    }
    let mut features = DMatrix::from_fn(n, spec.k, |_, _| rng.gen_range(0.0..1.0));
    for (idx, s) in (first_terminal..n).enumerate() {
        let value = if idx % 2 == 0 { 1.0 } else { 0.0 };
        for j in 0..spec.k {
            features[(s, j)] = value;
        }
    }
    let mut xi = sample_simplex(&mut rng, n);
    // Episodes start outside the terminal states.
    for s in first_terminal..n {
        xi[s] = 0.0;
    }
    let total: f64 = xi.iter().sum();
    for p in &mut xi {
        *p /= total;
    }
    let cmdp = ContextualMdp::new(kernels, features, xi, spec.gamma)?;
    let w_star = sample_mapping(&mut rng, spec.d, spec.k, spec.geometry)?;
    Ok((cmdp, w_star))
}

/// Samples a mapping from the interior of a geometry.
pub fn sample_mapping<R: Rng>(
    rng: &mut R,
    d: usize,
    k: usize,
    geometry: Geometry,
) -> Result<RewardMapping> {
    let w = match geometry {
        Geometry::EuclideanBall => {
            let mut g = DMatrix::from_fn(d, k, |_, _| crate::rng::sample_standard_normal(rng));
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let radius: f64 = rng.gen_range(0.0f64..1.0).powf(1.0 / (d * k) as f64);
            g *= radius / norm;
            g
        }
        Geometry::Simplex => {
            let flat = sample_simplex(rng, d * k);
            DMatrix::from_fn(d, k, |i, j| flat[i * k + j])
        }
        Geometry::LinfBox => DMatrix::from_fn(d, k, |_, _| rng.gen_range(-1.0..1.0)),
    };
    RewardMapping::new(w, geometry)
}

/// Uniform context draw on the `d-1` simplex.
pub fn sample_context<R: Rng>(rng: &mut R, d: usize) -> Result<Context> {
    if d < 1 {
        return Err(CoirlError::InvalidArgument("context dimension must be >= 1".into()));
    }
    Context::new(sample_simplex(rng, d))
}

/// A vertex of the context simplex.
pub fn vertex_context(d: usize, j: usize) -> Result<Context> {
    if j >= d {
        return Err(CoirlError::InvalidArgument("vertex index out of range".into()));
    }
    let mut c = vec![0.0; d];
    c[j] = 1.0;
    Context::new(c)
}

/// Named presets understood by the CLI: `grid:NxM`, `driving`,
/// `driving:ellipsoid` or `synth:S,A,d,k,seed`.
pub fn preset(name: &str) -> Result<(ContextualMdp, RewardMapping)> {
    if let Some(dims) = name.strip_prefix("grid:") {
        let (n, m) = dims
            .split_once('x')
            .ok_or_else(|| CoirlError::Validation(format!("bad grid preset '{name}'")))?;
        let n = n.parse::<usize>().map_err(|e| CoirlError::Validation(e.to_string()))?;
        let m = m.parse::<usize>().map_err(|e| CoirlError::Validation(e.to_string()))?;
        return make_gridworld(&GridWorldSpec { n, m, gamma: 0.9 });
    }
    if name == "driving" || name == "driving:online" {
        let (cmdp, presets) = make_driving(&DrivingSpec::default())?;
        return Ok((cmdp, presets.online));
    }
    if name == "driving:ellipsoid" {
        let (cmdp, presets) = make_driving(&DrivingSpec::default())?;
        return Ok((cmdp, presets.ellipsoid));
    }
    if let Some(args) = name.strip_prefix("synth:") {
        let parts: Vec<usize> = args
            .split(',')
            .map(|p| p.parse::<usize>().map_err(|e| CoirlError::Validation(e.to_string())))
            .collect::<Result<_>>()?;
        if parts.len() != 5 {
            return Err(CoirlError::Validation(
                "synth preset needs S,A,d,k,seed".into(),
            ));
        }
        return make_random_cmdp(&SyntheticCmdpSpec {
            n_states: parts[0],
            n_actions: parts[1],
            d: parts[2],
            k: parts[3],
            terminal_count: 2.min(parts[0].saturating_sub(1)),
            seed: parts[4] as u64,
            gamma: 0.9,
            geometry: Geometry::LinfBox,
        });
    }
    Err(CoirlError::Validation(format!("unknown environment preset '{name}'")))
}
