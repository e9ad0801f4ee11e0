//! Simulated expert.
//!
//! For a context the expert plans the optimal policy under the true mapping
//! and provides either its exact feature expectations or a sampled
//! trajectory. Two truncation schemes are supported: geometric termination
//! (undiscounted feature sums, unbiased) and a fixed horizon (discounted
//! sums, bias at most `gamma^(H+1)/(1-gamma)` per entry). Everything is
//! deterministic given the scheme seed; per-context solutions are cached.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Context, ContextualMdp, Geometry, InstantiatedMdp, RewardMapping};
use crate::error::{CoirlError, Result};
use crate::planner::{
    self, DeterministicPolicy, FeatureExpectations, PlannerConfig,
};
use crate::rng::rng_from_seed;

/// Truncation scheme for sampled demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchemeKind {
    /// Terminate after each step with probability `1 - gamma`; accumulate
    /// undiscounted features. Unbiased.
    Geometric,
    /// Run exactly `H = ceil(log(1/eps_h) / (1-gamma))` steps; accumulate
    /// discounted features. Bias at most `gamma^(H+1)/(1-gamma)` per entry.
    FixedHorizon { eps_h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheme {
    pub kind: SchemeKind,
    pub seed: u64,
}

impl SamplingScheme {
    pub fn geometric(seed: u64) -> Self {
        Self { kind: SchemeKind::Geometric, seed }
    }

    pub fn fixed_horizon(eps_h: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps_h) || eps_h == 0.0 {
            return Err(CoirlError::InvalidArgument(format!(
                "eps_h must lie in (0, 1), got {eps_h}"
            )));
        }
        Ok(Self { kind: SchemeKind::FixedHorizon { eps_h }, seed })
    }

    /// Fixed-horizon scheme whose derived horizon is exactly `h` steps.
    pub fn fixed_horizon_steps(h: usize, gamma: f64, seed: u64) -> Result<Self> {
        Self::fixed_horizon((-(h as f64) * (1.0 - gamma)).exp(), seed)
    }

    /// Derived horizon for the fixed-horizon scheme.
    pub fn horizon(&self, gamma: f64) -> Option<usize> {
        match self.kind {
            SchemeKind::Geometric => None,
            SchemeKind::FixedHorizon { eps_h } => {
                Some(((1.0 / (1.0 - gamma)) * (1.0 / eps_h).ln()).ceil() as usize)
            }
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// A state/action record; `actions` is one shorter than `states`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

/// Either exact feature expectations or a sampled trajectory with its
/// feature-sum estimate.
#[derive(Debug, Clone)]
pub enum DemonstrationPayload {
    Exact(FeatureExpectations),
    Sampled {
        trajectory: Trajectory,
        mu_hat: FeatureExpectations,
        scheme: SchemeKind,
    },
}

/// One expert demonstration for one context.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub context: Context,
    pub payload: DemonstrationPayload,
}

impl Demonstration {
    /// Expert feature expectations: exact or estimated, depending on payload.
    pub fn mu(&self) -> &DVector<f64> {
        match &self.payload {
            DemonstrationPayload::Exact(fe) => &fe.mu,
            DemonstrationPayload::Sampled { mu_hat, .. } => &mu_hat.mu,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.payload, DemonstrationPayload::Exact(_))
    }
}

/// Cached per-context solution of the expert's planning problem.
#[derive(Debug)]
pub struct ExpertSolution {
    pub policy: DeterministicPolicy,
    /// V* per state under the true reward.
    pub values: DVector<f64>,
    /// Q* per state-action under the true reward.
    pub q_values: DMatrix<f64>,
    /// Per-state feature expectations of the expert policy.
    pub mu_matrix: DMatrix<f64>,
    /// Feature expectations from the initial distribution.
    pub mu: DVector<f64>,
    /// Instantiation under the true mapping.
    pub mdp: InstantiatedMdp,
}

impl ExpertSolution {
    /// Optimal value from the initial distribution.
    pub fn value(&self) -> f64 {
        self.mdp.xi().iter().zip(self.values.iter()).map(|(w, v)| w * v).sum()
    }
}

/// Simulated expert for a CMDP and a true mapping.
pub struct Expert {
    cmdp: ContextualMdp,
    w_star: RewardMapping,
    cfg: PlannerConfig,
    cache: Mutex<HashMap<u64, Arc<ExpertSolution>>>,
}

impl Expert {
    pub fn new(cmdp: ContextualMdp, w_star: RewardMapping, cfg: PlannerConfig) -> Self {
        Self { cmdp, w_star, cfg, cache: Mutex::new(HashMap::new()) }
    }

    pub fn cmdp(&self) -> &ContextualMdp {
        &self.cmdp
    }

    pub fn w_star(&self) -> &RewardMapping {
        &self.w_star
    }

    /// Plans (or fetches) the optimal solution for a context.
    pub fn solve(&self, c: &Context) -> Result<Arc<ExpertSolution>> {
        let key = c.bit_hash();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let mdp = self.cmdp.instantiate(c, &self.w_star)?;
        let (values, policy) = planner::value_iteration(&mdp, &self.cfg)?;
        let q_values = planner::q_values(&mdp, &values);
        let mu_matrix = planner::state_feature_expectations(&mdp, &policy)?;
        let mut mu = DVector::zeros(self.cmdp.k());
        for (s, &w) in mdp.xi().iter().enumerate() {
            if w != 0.0 {
                for j in 0..self.cmdp.k() {
                    mu[j] += w * mu_matrix[(s, j)];
                }
            }
        }
        let solution = Arc::new(ExpertSolution { policy, values, q_values, mu_matrix, mu, mdp });
        self.cache.lock().unwrap().insert(key, Arc::clone(&solution));
        Ok(solution)
    }

    /// Exact feature expectations of the optimal policy from `xi`.
    pub fn exact_demonstration(&self, c: &Context) -> Result<Demonstration> {
        let solution = self.solve(c)?;
        Ok(Demonstration {
            context: c.clone(),
            payload: DemonstrationPayload::Exact(FeatureExpectations { mu: solution.mu.clone() }),
        })
    }

    /// Samples one expert trajectory under the scheme and returns it together
    /// with the feature-sum estimate of the expert feature expectations.
    pub fn sample_trajectory(&self, c: &Context, scheme: &SamplingScheme) -> Result<Demonstration> {
        let solution = self.solve(c)?;
        let mut rng = rng_from_seed(scheme.seed);
        let gamma = self.cmdp.gamma();
        let k = self.cmdp.k();
        let mdp = &solution.mdp;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut mu_hat = DVector::zeros(k);
        let mut s = sample_categorical(&mut rng, mdp.xi());

        match scheme.kind {
            SchemeKind::Geometric => {
                loop {
                    states.push(s);
                    for j in 0..k {
                        mu_hat[j] += mdp.features()[(s, j)];
                    }
                    if rng.gen_range(0.0..1.0) >= gamma {
                        break;
                    }
                    let a = solution.policy.action(s);
                    actions.push(a);
                    s = sample_next(&mut rng, mdp, s, a);
                }
            }
            SchemeKind::FixedHorizon { .. } => {
                let h = scheme.horizon(gamma).unwrap();
                let mut discount = 1.0;
                for t in 0..=h {
                    states.push(s);
                    for j in 0..k {
                        mu_hat[j] += discount * mdp.features()[(s, j)];
                    }
                    if t < h {
                        let a = solution.policy.action(s);
                        actions.push(a);
                        s = sample_next(&mut rng, mdp, s, a);
                    }
                    discount *= gamma;
                }
            }
        }

        Ok(Demonstration {
            context: c.clone(),
            payload: DemonstrationPayload::Sampled {
                trajectory: Trajectory { states, actions },
                mu_hat: FeatureExpectations { mu: mu_hat },
                scheme: scheme.kind,
            },
        })
    }

    /// An `h`-step expert roll-out from a given state, returning the visited
    /// states and the discounted feature sum (h+1 states).
    pub fn rollout_from<R: Rng>(
        &self,
        c: &Context,
        start_state: usize,
        h: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, DVector<f64>)> {
        let solution = self.solve(c)?;
        let mdp = &solution.mdp;
        let k = self.cmdp.k();
        let mut s = start_state;
        let mut states = Vec::with_capacity(h + 1);
        let mut sum = DVector::zeros(k);
        let mut discount = 1.0;
        for t in 0..=h {
            states.push(s);
            for j in 0..k {
                sum[j] += discount * mdp.features()[(s, j)];
            }
            if t < h {
                s = sample_next(rng, mdp, s, solution.policy.action(s));
            }
            discount *= self.cmdp.gamma();
        }
        Ok((states, sum))
    }
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_next<R: Rng>(rng: &mut R, mdp: &InstantiatedMdp, s: usize, a: usize) -> usize {
    let row = mdp.kernel.sparse_row(s, a);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for &(next, p) in row {
        acc += p;
        if u < acc {
            return next;
        }
    }
    row.last().expect("empty transition row").0
}

/// A near-optimal expert mapping: uniform draw from the l-inf ball of radius
/// `(1-gamma) * eps / (8k)` around the true mapping, intersected with the
/// unit box.
pub fn perturb_expert<R: Rng>(
    w_star: &RewardMapping,
    eps: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<RewardMapping> {
    if eps <= 0.0 {
        return Err(CoirlError::InvalidArgument("eps must be positive".into()));
    }
    let radius = (1.0 - gamma) * eps / (8.0 * w_star.k() as f64);
    let w = DMatrix::from_fn(w_star.d(), w_star.k(), |i, j| {
        let center = w_star.matrix()[(i, j)];
        let lo = (center - radius).max(-1.0);
        let hi = (center + radius).min(1.0);
        if lo >= hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    });
    RewardMapping::new(w, Geometry::LinfBox)
}

/// Perturbation radius used by [`perturb_expert`].
pub fn perturbation_radius(eps: f64, gamma: f64, k: usize) -> f64 {
    (1.0 - gamma) * eps / (8.0 * k as f64)
}

// --- JSON lines serialization ----------------------------------------------

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    context: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scheme: Option<SchemeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    states: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu: Option<Vec<f64>>,
}

/// One JSON record per line: `{context, scheme, states, actions}` for
/// trajectory demonstrations, `{context, mu}` for exact ones.
pub fn demos_to_jsonl(demos: &[Demonstration]) -> Result<String> {
    let mut out = String::new();
    for demo in demos {
        let record = match &demo.payload {
            DemonstrationPayload::Exact(fe) => DemoRecord {
                context: demo.context.weights().to_vec(),
                scheme: None,
                states: None,
                actions: None,
                mu: Some(fe.mu.iter().copied().collect()),
            },
            DemonstrationPayload::Sampled { trajectory, scheme, .. } => DemoRecord {
                context: demo.context.weights().to_vec(),
                scheme: Some(*scheme),
                states: Some(trajectory.states.clone()),
                actions: Some(trajectory.actions.clone()),
                mu: None,
            },
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses demonstrations back; trajectory records have their feature-sum
/// estimate recomputed and their transitions validated against the CMDP.
pub fn demos_from_jsonl(text: &str, cmdp: &ContextualMdp) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: DemoRecord = serde_json::from_str(line)?;
        let context = Context::new(record.context)?;
        let payload = match (record.mu, record.states, record.scheme) {
            (Some(mu), None, None) => {
                DemonstrationPayload::Exact(FeatureExpectations {
                    mu: DVector::from_column_slice(&mu),
                })
            }
            (None, Some(states), Some(scheme)) => {
                let actions = record.actions.unwrap_or_default();
                if actions.len() + 1 != states.len() && actions.len() != states.len() {
                    return Err(CoirlError::Validation("trajectory length mismatch".into()));
                }
                let zero = DVector::zeros(cmdp.k());
                let mdp = cmdp.instantiate_with_reward_weights(&context, &zero)?;
                for (i, win) in states.windows(2).enumerate() {
                    if mdp.kernel.prob(win[0], actions[i], win[1]) <= 0.0 {
                        return Err(CoirlError::Validation(format!(
                            "unreachable transition {} -> {} under action {}",
                            win[0], win[1], actions[i]
                        )));
                    }
                }
                let gamma = cmdp.gamma();
                let mut mu_hat = DVector::zeros(cmdp.k());
                let mut discount = 1.0;
                for &s in &states {
                    for j in 0..cmdp.k() {
                        mu_hat[j] += discount * mdp.features()[(s, j)];
                    }
                    if matches!(scheme, SchemeKind::FixedHorizon { .. }) {
                        discount *= gamma;
                    }
                }
                DemonstrationPayload::Sampled {
                    trajectory: Trajectory { states, actions },
                    mu_hat: FeatureExpectations { mu: mu_hat },
                    scheme,
                }
            }
            _ => return Err(CoirlError::Validation("malformed demonstration record".into())),
        };
        out.push(Demonstration { context, payload });
    }
    Ok(out)
}
