//! Cutting-plane learners.
//!
//! The feasibility set for the flattened true mapping starts as the minimum
//! volume ellipsoid enclosing the unit box (center 0, shape `dk * I`). Each
//! violated round produces a half-space through the center that keeps the
//! true mapping; the closed-form minimum-volume enclosing ellipsoid of the
//! kept half replaces the state. Every cut shrinks the volume by at least
//! `exp(-1 / (2 (dk + 1)))`.
//!
//! Two protocols: [`run_ellipsoid`] queries an exact sub-optimality oracle
//! and receives exact expert feature expectations; [`run_batch_ellipsoid`]
//! detects sub-optimal individual actions, receives finite expert roll-outs
//! from possibly perturbed (near-optimal) experts, and cuts once per batch
//! of `n` accumulated examples, re-clamping the center to the unit box when
//! it escapes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::cmdp::{outer_flatten, unflatten_vector, Context, ContextualMdp, RewardMapping};
use crate::error::{CoirlError, Result};
use crate::expert::{perturb_expert, Expert};
use crate::planner::{self, PlannerConfig};
use crate::rng::{derive_seed, rng_from_seed};

/// Ellipsoid `{x : (x - center)^T Q^{-1} (x - center) <= 1}`.
#[derive(Debug, Clone)]
pub struct EllipsoidState {
    pub center: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl EllipsoidState {
    /// Minimum volume ellipsoid enclosing the unit box in `R^dim`:
    /// center 0 and `Q = dim * I`.
    pub fn enclosing_unit_box(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(CoirlError::InvalidArgument(
                "ellipsoid updates need dimension >= 2".into(),
            ));
        }
        Ok(Self {
            center: DVector::zeros(dim),
            q: DMatrix::identity(dim, dim) * dim as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Mahalanobis membership value `(x - center)^T Q^{-1} (x - center)`;
    /// at most 1 for members.
    pub fn membership(&self, x: &DVector<f64>) -> Result<f64> {
        let diff = x - &self.center;
        let rhs = DMatrix::from_column_slice(self.dim(), 1, diff.as_slice());
        let solved = self
            .q
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| CoirlError::Numerical("singular ellipsoid shape matrix".into()))?;
        Ok(diff.dot(&solved.column(0).into_owned()))
    }

    pub fn det_q(&self) -> f64 {
        self.q.clone().lu().determinant()
    }

    /// The center reshaped to a `d x k` mapping.
    pub fn center_matrix(&self, d: usize, k: usize) -> DMatrix<f64> {
        unflatten_vector(&self.center, d, k)
    }
}

/// Replaces the ellipsoid with the minimum volume ellipsoid enclosing
/// `{x in E : (x - center)^T a >= 0}`.
pub fn mvee_halfspace_update(e: &EllipsoidState, a: &DVector<f64>) -> Result<EllipsoidState> {
    let dim = e.dim();
    if dim < 2 {
        return Err(CoirlError::InvalidArgument(
            "ellipsoid update undefined for dimension < 2".into(),
        ));
    }
    if a.len() != dim {
        return Err(CoirlError::InvalidArgument("cut direction dimension mismatch".into()));
    }
    if a.iter().all(|&x| x == 0.0) {
        return Err(CoirlError::DegenerateCut("zero cut direction".into()));
    }
    let qa = &e.q * a;
    let curvature = a.dot(&qa);
    if !(curvature > 0.0) {
        return Err(CoirlError::DegenerateCut(format!(
            "non-positive curvature a^T Q a = {curvature}"
        )));
    }
    let a_tilde = a * (-1.0 / curvature.sqrt());
    let q_at = &e.q * &a_tilde;
    let df = dim as f64;
    let center = &e.center - &q_at * (1.0 / (df + 1.0));
    let mut q = (&e.q - &q_at * q_at.transpose() * (2.0 / (df + 1.0))) * (df * df / (df * df - 1.0));
    // Re-symmetrize; drift accumulates over long runs otherwise.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (q[(i, j)] + q[(j, i)]);
            q[(i, j)] = avg;
            q[(j, i)] = avg;
        }
    }
    let next = EllipsoidState { center, q };
    let det = next.det_q();
    if !(det > 0.0) || !det.is_finite() {
        return Err(CoirlError::Numerical(format!(
            "shape matrix lost positive definiteness (det {det})"
        )));
    }
    Ok(next)
}

/// Coordinate cuts along indicator directions until the center re-enters the
/// unit box. Returns the clamped state and the number of cuts applied. Box
/// points in every kept half are preserved.
pub fn clamp_center(e: &EllipsoidState) -> Result<(EllipsoidState, usize)> {
    let mut state = e.clone();
    let mut cuts = 0;
    let cap = 100_000;
    while let Some(j) = state
        .center
        .iter()
        .position(|&x| x.abs() > 1.0)
    {
        let mut direction = DVector::zeros(state.dim());
        // Keep the half containing the box: theta_j <= center_j when the
        // center exceeds +1, theta_j >= center_j when below -1.
        direction[j] = if state.center[j] > 1.0 { -1.0 } else { 1.0 };
        state = mvee_halfspace_update(&state, &direction)?;
        cuts += 1;
        if cuts > cap {
            return Err(CoirlError::Numerical("center clamping did not terminate".into()));
        }
    }
    Ok((state, cuts))
}

/// Theorem-style cap on the number of cuts for the exact-oracle learner:
/// `2 dk (dk + 1) log(4 k sqrt(dk) / ((1 - gamma) eps))`.
pub fn exact_cut_bound(d: usize, k: usize, gamma: f64, eps: f64) -> f64 {
    let dk = (d * k) as f64;
    2.0 * dk * (dk + 1.0) * (4.0 * k as f64 * dk.sqrt() / ((1.0 - gamma) * eps)).ln()
}

/// Cap on the number of ellipsoid updates for the batch learner:
/// `2 dk (dk + 1) log(16 k sqrt(dk) / ((1 - gamma) eps))`.
pub fn batch_update_bound(d: usize, k: usize, gamma: f64, eps: f64) -> f64 {
    let dk = (d * k) as f64;
    2.0 * dk * (dk + 1.0) * (16.0 * k as f64 * dk.sqrt() / ((1.0 - gamma) * eps)).ln()
}

/// Per-cut guaranteed volume shrink factor `exp(-1 / (2 (dim + 1)))`.
pub fn volume_shrink_bound(dim: usize) -> f64 {
    (-1.0 / (2.0 * (dim as f64 + 1.0))).exp()
}

/// One round of a cutting-plane run.
#[derive(Debug, Clone)]
pub struct EllipsoidRound {
    pub round: usize,
    pub cut_applied: bool,
    pub det_q: f64,
    /// `sqrt(det Q' / det Q)` for rounds with a cut.
    pub volume_ratio: Option<f64>,
    pub suboptimal_count: usize,
    pub holdout_rel_value: Option<f64>,
}

/// Result of a cutting-plane run.
#[derive(Debug)]
pub struct EllipsoidTrace {
    pub rounds: Vec<EllipsoidRound>,
    /// Center after each applied cut.
    pub centers: Vec<DVector<f64>>,
    pub state: EllipsoidState,
    /// Demonstrations revealed by the expert (= cuts for the exact oracle).
    pub demo_count: usize,
    pub suboptimal_rounds: usize,
    /// Worst observed membership value of the true mapping, when audited.
    pub worst_membership: f64,
    /// Worst observed per-cut volume ratio.
    pub worst_volume_ratio: f64,
}

impl EllipsoidTrace {
    /// CSV with header
    /// `round,cut_applied,det_Q,volume_ratio,suboptimal_count,holdout_rel_value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,cut_applied,det_Q,volume_ratio,suboptimal_count,holdout_rel_value\n");
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round,
                r.cut_applied,
                r.det_q,
                r.volume_ratio.map(|v| v.to_string()).unwrap_or_default(),
                r.suboptimal_count,
                r.holdout_rel_value.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

/// Options for [`run_ellipsoid`].
pub struct EllipsoidRunConfig<'a> {
    pub eps: f64,
    pub max_rounds: usize,
    /// Stop after this many consecutive rounds without a cut (0 = never).
    pub stop_after_clean: usize,
    pub planner_cfg: PlannerConfig,
    /// Audit that this flattened mapping stays a member after every cut.
    pub audit_member: Option<DVector<f64>>,
    /// Called with the center mapping after each cut; the returned value is
    /// recorded in the trace.
    pub eval_on_cut: Option<&'a dyn Fn(&DMatrix<f64>) -> Result<f64>>,
    /// Stop once `eval_on_cut` reaches this value.
    pub stop_when_eval_at_least: Option<f64>,
}

impl Default for EllipsoidRunConfig<'_> {
    fn default() -> Self {
        Self {
            eps: 0.1,
            max_rounds: 50_000,
            stop_after_clean: 1_500,
            planner_cfg: PlannerConfig::precise(),
            audit_member: None,
            eval_on_cut: None,
            stop_when_eval_at_least: None,
        }
    }
}

/// Exact-oracle cutting-plane learner. Each round: act greedily with the
/// center mapping; if the policy is more than `eps` below the optimal value
/// for the streamed context, the expert reveals its feature expectations and
/// the ellipsoid is cut with `c (outer) (mu* - mu_agent)`.
pub fn run_ellipsoid<S>(
    expert: &Expert,
    mut context_stream: S,
    cfg: &EllipsoidRunConfig<'_>,
) -> Result<EllipsoidTrace>
where
    S: FnMut(usize) -> Result<Option<Context>>,
{
    if cfg.eps <= 0.0 {
        return Err(CoirlError::InvalidArgument("eps must be positive".into()));
    }
    let cmdp = expert.cmdp();
    let (d, k) = (cmdp.d(), cmdp.k());
    let mut state = EllipsoidState::enclosing_unit_box(d * k)?;
    let mut trace = EllipsoidTrace {
        rounds: Vec::new(),
        centers: Vec::new(),
        state: state.clone(),
        demo_count: 0,
        suboptimal_rounds: 0,
        worst_membership: f64::NEG_INFINITY,
        worst_volume_ratio: f64::NEG_INFINITY,
    };
    let mut clean_streak = 0usize;

    for round in 1..=cfg.max_rounds {
        let Some(c) = context_stream(round)? else { break };
        let solution = expert.solve(&c)?;
        let w_center = state.center_matrix(d, k);
        let f_agent = DVector::from_fn(k, |j, _| {
            (0..d).map(|i| c.weights()[i] * w_center[(i, j)]).sum()
        });
        let agent_mdp = cmdp.instantiate_with_reward_weights(&c, &f_agent)?;
        let (_, agent_policy) = planner::value_iteration(&agent_mdp, &cfg.planner_cfg)?;
        let agent_mu =
            planner::feature_expectations(&agent_mdp, &agent_policy, agent_mdp.xi())?.mu;
        let f_true = expert.w_star().reward_weights(&c)?;
        let agent_value = f_true.dot(&agent_mu);
        let optimal_value = solution.value();

        let mut record = EllipsoidRound {
            round,
            cut_applied: false,
            det_q: state.det_q(),
            volume_ratio: None,
            suboptimal_count: trace.suboptimal_rounds,
            holdout_rel_value: None,
        };

        if optimal_value - agent_value > cfg.eps {
            trace.suboptimal_rounds += 1;
            trace.demo_count += 1;
            clean_streak = 0;
            let diff = &solution.mu - &agent_mu;
            let a = outer_flatten(&c.as_vector(), &diff);
            let det_before = state.det_q();
            state = mvee_halfspace_update(&state, &a)?;
            let ratio = (state.det_q() / det_before).sqrt();
            trace.worst_volume_ratio = trace.worst_volume_ratio.max(ratio);
            record.cut_applied = true;
            record.det_q = state.det_q();
            record.volume_ratio = Some(ratio);
            record.suboptimal_count = trace.suboptimal_rounds;
            trace.centers.push(state.center.clone());
            if let Some(member) = &cfg.audit_member {
                let m = state.membership(member)?;
                trace.worst_membership = trace.worst_membership.max(m);
                if m > 1.0 + 1e-7 {
                    return Err(CoirlError::Numerical(format!(
                        "true mapping excluded from the feasibility set (membership {m})"
                    )));
                }
            }
            if let Some(eval) = cfg.eval_on_cut {
                let rel = eval(&state.center_matrix(d, k))?;
                record.holdout_rel_value = Some(rel);
                if cfg.stop_when_eval_at_least.is_some_and(|th| rel >= th) {
                    trace.rounds.push(record);
                    break;
                }
            }
        } else {
            clean_streak += 1;
        }
        trace.rounds.push(record);
        if cfg.stop_after_clean > 0 && clean_streak >= cfg.stop_after_clean {
            break;
        }
    }
    trace.state = state;
    Ok(trace)
}

/// Batch configuration: target sub-optimality, failure probability, roll-out
/// length and batch size.
#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub eps: f64,
    pub delta: f64,
    /// Expert roll-out length.
    pub h: usize,
    /// Examples accumulated per cut.
    pub n: usize,
    /// Length of the agent's played episode, scanned for sub-optimal actions.
    pub agent_episode_len: usize,
    pub max_rounds: usize,
    /// Stop after this many consecutive rounds without a sub-optimal action
    /// (0 = never).
    pub stop_after_clean: usize,
    pub seed: u64,
}

impl BatchConfig {
    /// Horizon `H = ceil(log(8k / ((1-gamma) eps)) / (1-gamma))`.
    pub fn theory_h(k: usize, gamma: f64, eps: f64) -> usize {
        ((1.0 / (1.0 - gamma)) * (8.0 * k as f64 / ((1.0 - gamma) * eps)).ln()).ceil() as usize
    }

    /// Batch size
    /// `n = ceil(512 k^2 / ((1-gamma)^2 eps^2) * log(4 dk (dk+1) log(16 k sqrt(dk) / ((1-gamma) eps)) / delta))`.
    pub fn theory_n(d: usize, k: usize, gamma: f64, eps: f64, delta: f64) -> usize {
        let dk = (d * k) as f64;
        let inner = (16.0 * k as f64 * dk.sqrt() / ((1.0 - gamma) * eps)).ln();
        let log_arg = 4.0 * dk * (dk + 1.0) * inner / delta;
        ((512.0 * (k * k) as f64 / ((1.0 - gamma) * (1.0 - gamma) * eps * eps)) * log_arg.ln())
            .ceil() as usize
    }

    /// Full theory-mode configuration.
    pub fn theory(d: usize, k: usize, gamma: f64, eps: f64, delta: f64, seed: u64) -> Self {
        let h = Self::theory_h(k, gamma, eps);
        Self {
            eps,
            delta,
            h,
            n: Self::theory_n(d, k, gamma, eps, delta),
            agent_episode_len: h,
            max_rounds: usize::MAX,
            stop_after_clean: 0,
            seed,
        }
    }
}

/// Result of a batch run.
#[derive(Debug)]
pub struct BatchTrace {
    pub state: EllipsoidState,
    pub rounds: usize,
    pub suboptimal_rounds: usize,
    pub cuts: usize,
    pub clamp_cuts: usize,
    pub worst_membership: f64,
    pub worst_volume_ratio: f64,
}

/// Batched cutting-plane learner with near-optimal experts. Per round, a
/// freshly perturbed expert (within the theorem's l-inf radius of the true
/// mapping) evaluates each action of the agent's episode; the first action
/// with `Q*(s,a) + eps < V*(s)` yields one accumulated example pairing an
/// `h`-step expert roll-out from `s` against the agent's exact feature
/// expectations from `s`. Every `n` examples produce one cut, after which the
/// center is re-clamped into the unit box.
pub fn run_batch_ellipsoid<S>(
    cmdp: &ContextualMdp,
    w_star: &RewardMapping,
    mut context_stream: S,
    cfg: &BatchConfig,
    planner_cfg: &PlannerConfig,
) -> Result<BatchTrace>
where
    S: FnMut(usize) -> Result<Option<Context>>,
{
    if cfg.eps <= 0.0 || !(0.0..1.0).contains(&cfg.delta) {
        return Err(CoirlError::InvalidArgument("bad eps/delta".into()));
    }
    if cfg.n == 0 {
        return Err(CoirlError::InvalidArgument("batch size must be positive".into()));
    }
    let (d, k) = (cmdp.d(), cmdp.k());
    let dim = d * k;
    let w_star_flat = w_star.flatten();
    let mut state = EllipsoidState::enclosing_unit_box(dim)?;
    let mut z_agent = DVector::zeros(dim);
    let mut z_expert = DVector::zeros(dim);
    let mut batch_fill = 0usize;
    let mut trace = BatchTrace {
        state: state.clone(),
        rounds: 0,
        suboptimal_rounds: 0,
        cuts: 0,
        clamp_cuts: 0,
        worst_membership: f64::NEG_INFINITY,
        worst_volume_ratio: f64::NEG_INFINITY,
    };
    let mut clean_streak = 0usize;

    for round in 1..=cfg.max_rounds {
        let Some(c) = context_stream(round)? else { break };
        trace.rounds = round;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, round as u64));

        // Near-optimal expert for this round.
        let w_expert = perturb_expert(w_star, cfg.eps, cmdp.gamma(), &mut rng)?;
        let expert_mdp = cmdp.instantiate(&c, &w_expert)?;
        let (expert_v, expert_policy) = planner::value_iteration(&expert_mdp, planner_cfg)?;
        let expert_q = planner::q_values(&expert_mdp, &expert_v);

        // Agent plays with the center mapping.
        let w_center = state.center_matrix(d, k);
        let f_agent = DVector::from_fn(k, |j, _| {
            (0..d).map(|i| c.weights()[i] * w_center[(i, j)]).sum()
        });
        let agent_mdp = cmdp.instantiate_with_reward_weights(&c, &f_agent)?;
        let (_, agent_policy) = planner::value_iteration(&agent_mdp, planner_cfg)?;

        // Sample the agent's episode under the true dynamics.
        let mut s = sample_categorical(&mut rng, agent_mdp.xi());
        let mut violation: Option<usize> = None;
        for _ in 0..cfg.agent_episode_len {
            let a = agent_policy.action(s);
            if expert_q[(s, a)] + cfg.eps < expert_v[s] {
                violation = Some(s);
                break;
            }
            s = sample_next(&mut rng, &agent_mdp, s, a);
        }

        if let Some(err_state) = violation {
            trace.suboptimal_rounds += 1;
            clean_streak = 0;

            // Expert h-step roll-out from the erring state.
            let mut es = err_state;
            let mut x_expert = DVector::zeros(k);
            let mut discount = 1.0;
            for t in 0..=cfg.h {
                for j in 0..k {
                    x_expert[j] += discount * expert_mdp.features()[(es, j)];
                }
                if t < cfg.h {
                    es = sample_next(&mut rng, &expert_mdp, es, expert_policy.action(es));
                }
                discount *= cmdp.gamma();
            }

            // Agent's exact feature expectations from the erring state.
            let mu_matrix = planner::state_feature_expectations(&agent_mdp, &agent_policy)?;
            let x_agent = mu_matrix.row(err_state).transpose();

            let cv = c.as_vector();
            z_agent += outer_flatten(&cv, &x_agent);
            z_expert += outer_flatten(&cv, &x_expert);
            batch_fill += 1;

            if batch_fill == cfg.n {
                let a_cut = (&z_expert - &z_agent) / cfg.n as f64;
                let det_before = state.det_q();
                state = mvee_halfspace_update(&state, &a_cut)?;
                let ratio = (state.det_q() / det_before).sqrt();
                trace.worst_volume_ratio = trace.worst_volume_ratio.max(ratio);
                trace.cuts += 1;
                let (clamped, extra) = clamp_center(&state)?;
                state = clamped;
                trace.clamp_cuts += extra;
                batch_fill = 0;
                z_agent.fill(0.0);
                z_expert.fill(0.0);

                let membership = state.membership(&w_star_flat)?;
                trace.worst_membership = trace.worst_membership.max(membership);
                if membership > 1.0 + 1e-7 {
                    return Err(CoirlError::Numerical(format!(
                        "true mapping excluded after cut {} (membership {membership})",
                        trace.cuts
                    )));
                }
            }
        } else {
            clean_streak += 1;
            if cfg.stop_after_clean > 0 && clean_streak >= cfg.stop_after_clean {
                break;
            }
        }
    }
    trace.state = state;
    Ok(trace)
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

fn sample_next<R: Rng>(
    rng: &mut R,
    mdp: &crate::cmdp::InstantiatedMdp,
    s: usize,
    a: usize,
) -> usize {
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
