//! Holdout evaluation: normalized value, action-matching accuracy and loss.
//!
//! The normalized (relative) value anchors each context at the
//! uniform-random policy's value (floor) and the optimal value (ceiling), so
//! the metric is affine-invariant per context and comparable across
//! contexts. Accuracy weights action agreement by the expert's discounted
//! state occupancy; a uniform-over-states variant is reported alongside.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cmdp::{Context, ContextualMdp, InstantiatedMdp, RewardMapping};
use crate::error::{CoirlError, Result};
use crate::expert::{Demonstration, DemonstrationPayload, Expert};
use crate::planner::{self, DeterministicPolicy, PlannerConfig};

/// One metrics checkpoint. `loss` is NaN for learners that do not expose a
/// reward mapping (e.g. behavioral cloning).
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: usize,
    pub seed: u64,
    pub n_demos: usize,
    pub loss: f64,
    pub rel_value: f64,
    pub accuracy: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,seed,n_demos,loss,rel_value,accuracy,wall_ms";

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.seed, r.n_demos, r.loss, r.rel_value, r.accuracy, r.wall_ms
        ));
    }
    out
}

/// Per-context anchors precomputed once per holdout set: the true-reward
/// instantiation, the expert solution, and the floor value of the uniform
/// random policy.
struct ContextAnchor {
    context: Context,
    mdp_true: InstantiatedMdp,
    expert_policy: DeterministicPolicy,
    f_true: DVector<f64>,
    mu_star: DVector<f64>,
    v_star: f64,
    v_rand: f64,
    /// Expert discounted occupancy from xi, normalized to sum 1.
    occupancy: DVector<f64>,
}

/// A fixed evaluation set with all expert-side quantities precomputed.
pub struct Holdout {
    anchors: Vec<ContextAnchor>,
    planner_cfg: PlannerConfig,
}

impl Holdout {
    pub fn build(
        cmdp: &ContextualMdp,
        w_star: &RewardMapping,
        contexts: &[Context],
        planner_cfg: &PlannerConfig,
    ) -> Result<Self> {
        let expert = Expert::new(cmdp.clone(), w_star.clone(), *planner_cfg);
        let anchors = contexts
            .par_iter()
            .map(|c| {
                let solution = expert.solve(c)?;
                let mdp_true = solution.mdp.clone();
                let uniform = DMatrix::from_element(
                    cmdp.n_states(),
                    cmdp.n_actions(),
                    1.0 / cmdp.n_actions() as f64,
                );
                let v_rand_states = planner::stochastic_policy_state_values(&mdp_true, &uniform)?;
                let v_rand: f64 =
                    mdp_true.xi().iter().zip(v_rand_states.iter()).map(|(w, v)| w * v).sum();
                let mut occupancy =
                    planner::discounted_occupancy(&mdp_true, &solution.policy, mdp_true.xi())?;
                let total: f64 = occupancy.iter().sum();
                occupancy /= total;
                Ok(ContextAnchor {
                    context: c.clone(),
                    f_true: w_star.reward_weights(c)?,
                    mu_star: solution.mu.clone(),
                    v_star: solution.value(),
                    v_rand,
                    expert_policy: solution.policy.clone(),
                    occupancy,
                    mdp_true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { anchors, planner_cfg: *planner_cfg })
    }

    pub fn contexts(&self) -> Vec<Context> {
        self.anchors.iter().map(|a| a.context.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Exact demonstrations for the holdout contexts (for loss evaluation).
    pub fn exact_demos(&self) -> Vec<Demonstration> {
        self.anchors
            .iter()
            .map(|a| Demonstration {
                context: a.context.clone(),
                payload: DemonstrationPayload::Exact(crate::planner::FeatureExpectations {
                    mu: a.mu_star.clone(),
                }),
            })
            .collect()
    }
}

/// A per-context agent policy: deterministic, or stochastic action
/// probabilities (`n_states x n_actions`).
pub enum AgentPolicy {
    Det(DeterministicPolicy),
    Stochastic(DMatrix<f64>),
}

/// Evaluation output over a holdout set.
#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub rel_value: f64,
    /// Expert-occupancy-weighted action agreement.
    pub accuracy: f64,
    /// Uniform-over-states agreement, reported for comparison.
    pub accuracy_uniform: f64,
    /// Mean per-context loss term when a mapping was supplied; NaN otherwise.
    pub loss: f64,
    /// Contexts skipped because the normalization anchor was degenerate.
    pub skipped: usize,
}

/// Evaluates an arbitrary per-context policy source against the holdout.
/// When `mapping` is given, the loss of that mapping is evaluated as well
/// (with its own freshly planned policies).
pub fn evaluate_policy_source(
    holdout: &Holdout,
    source: &(dyn Fn(&Context) -> Result<AgentPolicy> + Sync),
    mapping: Option<&DMatrix<f64>>,
) -> Result<EvalResult> {
    if holdout.is_empty() {
        return Err(CoirlError::InvalidArgument("empty holdout".into()));
    }
    struct PerContext {
        rel: Option<f64>,
        acc: f64,
        acc_uniform: f64,
        loss: Option<f64>,
    }
    let parts: Vec<PerContext> = holdout
        .anchors
        .par_iter()
        .map(|anchor| {
            let policy = source(&anchor.context)?;
            let n = anchor.mdp_true.n_states();
            let v_agent = match &policy {
                AgentPolicy::Det(p) => planner::policy_value(&anchor.mdp_true, p, anchor.mdp_true.xi())?,
                AgentPolicy::Stochastic(probs) => {
                    let v = planner::stochastic_policy_state_values(&anchor.mdp_true, probs)?;
                    anchor.mdp_true.xi().iter().zip(v.iter()).map(|(w, x)| w * x).sum()
                }
            };
            let denom = anchor.v_star - anchor.v_rand;
            let rel = if denom.abs() < 1e-12 {
                None
            } else {
                Some(((v_agent - anchor.v_rand) / denom).clamp(0.0, 1.0))
            };
            let match_prob = |s: usize| -> f64 {
                let expert_a = anchor.expert_policy.action(s);
                match &policy {
                    AgentPolicy::Det(p) => f64::from(u8::from(p.action(s) == expert_a)),
                    AgentPolicy::Stochastic(probs) => probs[(s, expert_a)],
                }
            };
            let acc: f64 = (0..n).map(|s| anchor.occupancy[s] * match_prob(s)).sum();
            let acc_uniform: f64 = (0..n).map(&match_prob).sum::<f64>() / n as f64;
            let loss = match mapping {
                Some(w) => {
                    let f = DVector::from_fn(w.ncols(), |j, _| {
                        (0..w.nrows()).map(|i| anchor.context.weights()[i] * w[(i, j)]).sum()
                    });
                    let mdp_w = anchor
                        .mdp_true
                        .with_reward(DVector::from_fn(n, |s, _| {
                            (0..f.len()).map(|j| f[j] * anchor.mdp_true.features()[(s, j)]).sum()
                        }));
                    let (_, pol) = planner::value_iteration(&mdp_w, &holdout.planner_cfg)?;
                    let mu = planner::feature_expectations(&mdp_w, &pol, mdp_w.xi())?.mu;
                    Some(f.dot(&(mu - &anchor.mu_star)))
                }
                None => None,
            };
            Ok(PerContext { rel, acc, acc_uniform, loss })
        })
        .collect::<Result<_>>()?;

    let skipped = parts.iter().filter(|p| p.rel.is_none()).count();
    let counted = parts.len() - skipped;
    if counted == 0 {
        return Err(CoirlError::Numerical(
            "every holdout context had a degenerate value normalization".into(),
        ));
    }
    let rel_value =
        parts.iter().filter_map(|p| p.rel).sum::<f64>() / counted as f64;
    let accuracy = parts.iter().map(|p| p.acc).sum::<f64>() / parts.len() as f64;
    let accuracy_uniform =
        parts.iter().map(|p| p.acc_uniform).sum::<f64>() / parts.len() as f64;
    let loss = if mapping.is_some() {
        parts.iter().filter_map(|p| p.loss).sum::<f64>() / parts.len() as f64
    } else {
        f64::NAN
    };
    Ok(EvalResult { rel_value, accuracy, accuracy_uniform, loss, skipped })
}

/// Policy source that plans greedily with a fixed mapping.
pub fn mapping_policy_source<'a>(
    cmdp: &'a ContextualMdp,
    w: &'a DMatrix<f64>,
    cfg: &'a PlannerConfig,
) -> impl Fn(&Context) -> Result<AgentPolicy> + Sync + 'a {
    move |c: &Context| {
        let f = DVector::from_fn(cmdp.k(), |j, _| {
            (0..cmdp.d()).map(|i| c.weights()[i] * w[(i, j)]).sum()
        });
        let mdp = cmdp.instantiate_with_reward_weights(c, &f)?;
        let (_, policy) = planner::value_iteration(&mdp, cfg)?;
        Ok(AgentPolicy::Det(policy))
    }
}

/// Full evaluation of a mapping: plan per context, measure value, accuracy
/// and loss.
pub fn evaluate_mapping(
    holdout: &Holdout,
    cmdp: &ContextualMdp,
    w: &DMatrix<f64>,
    cfg: &PlannerConfig,
) -> Result<EvalResult> {
    evaluate_policy_source(holdout, &mapping_policy_source(cmdp, w, cfg), Some(w))
}
