//! Comparison algorithms.
//!
//! The first two lift the contextual problem onto one large MDP whose states
//! are (context, state) pairs with features `c (outer) phi(s)`, then run
//! classic apprenticeship learning there: the projection algorithm (reward
//! weights `w_t = mu_E - mu_bar`) and the multiplicative-weights game
//! (exponential weights for the reward player against best-response
//! policies). The third is contextual behavioral cloning with a linear
//! softmax head over the concatenated `(c, phi(s))` input.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cmdp::{outer_flatten, Context, ContextualMdp, InstantiatedMdp, Kernel};
use crate::error::{CoirlError, Result};
use crate::expert::{Demonstration, DemonstrationPayload};
use crate::planner::{self, DeterministicPolicy, PlannerConfig};
use crate::rng::rng_from_seed;

/// A distribution over deterministic policies, sampled once at time zero.
pub struct MixedPolicy {
    pub components: Vec<(DeterministicPolicy, f64)>,
}

impl MixedPolicy {
    /// Feature expectations of the mixture: the weighted combination of the
    /// component policies' feature expectations.
    pub fn feature_expectations(&self, mdp: &InstantiatedMdp, start: &[f64]) -> Result<DVector<f64>> {
        let mut mu = DVector::zeros(mdp.k());
        for (policy, weight) in &self.components {
            if *weight == 0.0 {
                continue;
            }
            let part = planner::feature_expectations(mdp, policy, start)?;
            mu += part.mu * *weight;
        }
        Ok(mu)
    }
}

/// The stacked MDP over `(context, state)` pairs.
pub struct LargeMdp {
    /// Dynamics, features (`dk` of them) and the product initial
    /// distribution; the reward vector is replaced per planning call.
    pub mdp: InstantiatedMdp,
    pub contexts: Vec<Context>,
    pub base_states: usize,
}

impl LargeMdp {
    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    /// Plans the optimal policy for reward `w . phi'(s')`.
    pub fn plan(&self, w: &DVector<f64>, cfg: &PlannerConfig) -> Result<DeterministicPolicy> {
        let reward = DVector::from_fn(self.n_states(), |s, _| {
            (0..w.len()).map(|j| w[j] * self.mdp.features()[(s, j)]).sum()
        });
        let rewarded = self.mdp.with_reward(reward);
        let (_, policy) = planner::value_iteration(&rewarded, cfg)?;
        Ok(policy)
    }

    /// Exact feature expectations of a policy from the stacked initial
    /// distribution.
    pub fn mu(&self, policy: &DeterministicPolicy) -> Result<DVector<f64>> {
        Ok(planner::feature_expectations(&self.mdp, policy, self.mdp.xi())?.mu)
    }
}

/// Stacks a finite context set into one disconnected MDP: per-context copies
/// of the instantiated kernel, features `c (outer) phi(s)`, initial
/// distribution uniform over contexts times `xi`.
pub fn build_large_mdp(cmdp: &ContextualMdp, contexts: &[Context]) -> Result<LargeMdp> {
    if contexts.is_empty() {
        return Err(CoirlError::InvalidArgument("need at least one context".into()));
    }
    let n = cmdp.n_states();
    let n_actions = cmdp.n_actions();
    let total = n * contexts.len();
    let mut data = vec![0.0; total * n_actions * total];
    let mut features = DMatrix::zeros(total, cmdp.d() * cmdp.k());
    let mut xi = vec![0.0; total];
    let ctx_weight = 1.0 / contexts.len() as f64;
    let zero = DVector::zeros(cmdp.k());

    for (ci, c) in contexts.iter().enumerate() {
        let inst = cmdp.instantiate_with_reward_weights(c, &zero)?;
        let offset = ci * n;
        for s in 0..n {
            let phi = cmdp.feature_row(s);
            let lifted = outer_flatten(&c.as_vector(), &phi);
            for j in 0..lifted.len() {
                features[(offset + s, j)] = lifted[j];
            }
            xi[offset + s] = ctx_weight * cmdp.xi()[s];
            for a in 0..n_actions {
                for &(next, p) in inst.kernel.sparse_row(s, a) {
                    data[((offset + s) * n_actions + a) * total + offset + next] = p;
                }
            }
        }
    }
    let kernel = Kernel::new(total, n_actions, data)?;
    let mdp = InstantiatedMdp::from_parts(
        kernel,
        DVector::zeros(total),
        features,
        xi,
        cmdp.gamma(),
    )?;
    Ok(LargeMdp { mdp, contexts: contexts.to_vec(), base_states: n })
}

/// Expert feature expectations on the large MDP for a flattened true
/// mapping: feature expectations of the optimal policy for reward
/// `w_star_flat . phi'`.
pub fn large_mdp_expert_mu(
    large: &LargeMdp,
    w_star_flat: &DVector<f64>,
    cfg: &PlannerConfig,
) -> Result<DVector<f64>> {
    let policy = large.plan(w_star_flat, cfg)?;
    large.mu(&policy)
}

/// Result of a projection-style apprenticeship run.
pub struct ProjectionRun {
    pub mixture: MixedPolicy,
    /// `||mu_bar_t - mu_E||_2` after every iteration.
    pub distances: Vec<f64>,
    /// Reward weight vector per iteration.
    pub w_trace: Vec<DVector<f64>>,
    pub mu_bar: DVector<f64>,
}

/// Projection apprenticeship learning on the large MDP: at step `t` the
/// reward weights are `w_t = mu_E - mu_bar_{t-1}`, the best-response policy
/// is planned, and `mu_bar` moves to the closest point of the segment toward
/// the new policy's feature expectations. Stops at `T` iterations or when
/// `||mu_bar - mu_E||_2 <= tol`.
pub fn al_projection(
    large: &LargeMdp,
    mu_e: &DVector<f64>,
    max_iters: usize,
    tol: f64,
    cfg: &PlannerConfig,
) -> Result<ProjectionRun> {
    let pi0 = large.plan(&DVector::zeros(mu_e.len()), cfg)?;
    let mut mu_bar = large.mu(&pi0)?;
    let mut mixture = MixedPolicy { components: vec![(pi0, 1.0)] };
    let mut distances = vec![(&mu_bar - mu_e).norm()];
    let mut w_trace = Vec::new();

    for _ in 0..max_iters {
        if (&mu_bar - mu_e).norm() <= tol {
            break;
        }
        let w = mu_e - &mu_bar;
        w_trace.push(w.clone());
        let policy = large.plan(&w, cfg)?;
        let mu_t = large.mu(&policy)?;
        let dir = &mu_t - &mu_bar;
        let denom = dir.dot(&dir);
        if denom == 0.0 {
            // Best response adds nothing; mu_E is as close as it gets.
            break;
        }
        let lambda = (dir.dot(&(mu_e - &mu_bar)) / denom).clamp(0.0, 1.0);
        if lambda == 0.0 {
            break;
        }
        mu_bar += dir * lambda;
        for comp in &mut mixture.components {
            comp.1 *= 1.0 - lambda;
        }
        mixture.components.push((policy, lambda));
        distances.push((&mu_bar - mu_e).norm());
    }
    Ok(ProjectionRun { mixture, distances, w_trace, mu_bar })
}

/// Result of a multiplicative-weights apprenticeship run.
pub struct MwalRun {
    pub mixture: MixedPolicy,
    /// `min_i (mu(mixture) - mu_E)_i`: the value of the mixture against the
    /// worst-case simplex reward.
    pub value_gap: f64,
    pub mu_mix: DVector<f64>,
}

/// Guaranteed average-regret rate of the reward player:
/// `2 sqrt(2 log(dim)) / ((1-gamma) sqrt(T))`.
pub fn mwal_rate(dim: usize, gamma: f64, t: usize) -> f64 {
    2.0 * (2.0 * (dim as f64).ln()).sqrt() / ((1.0 - gamma) * (t as f64).sqrt())
}

/// Multiplicative-weights apprenticeship on the large MDP: the reward player
/// runs exponential weights on the simplex over the lifted features against
/// the policy player's best response; returns the uniform mixture over the
/// best responses.
pub fn mwal(
    large: &LargeMdp,
    mu_e: &DVector<f64>,
    steps: usize,
    cfg: &PlannerConfig,
) -> Result<MwalRun> {
    if steps == 0 {
        return Err(CoirlError::InvalidArgument("mwal needs at least one step".into()));
    }
    let dim = mu_e.len();
    if dim < 2 {
        return Err(CoirlError::InvalidArgument("mwal needs feature dimension >= 2".into()));
    }
    let gamma = large.mdp.gamma;
    let mut w = DVector::from_element(dim, 1.0 / dim as f64);
    let mut mu_mix = DVector::zeros(dim);
    let mut components = Vec::with_capacity(steps);
    for t in 1..=steps {
        let policy = large.plan(&w, cfg)?;
        let mu_t = large.mu(&policy)?;
        mu_mix += &mu_t;
        components.push((policy, 1.0 / steps as f64));
        // Exponential weights against the loss w . (mu_t - mu_E), in log space.
        let alpha = (1.0 - gamma) * ((dim as f64).ln() / (2.0 * t as f64)).sqrt();
        let logits: Vec<f64> =
            (0..dim).map(|i| w[i].ln() - alpha * (mu_t[i] - mu_e[i])).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for i in 0..dim {
            w[i] = (logits[i] - lse).exp();
        }
    }
    mu_mix /= steps as f64;
    let value_gap = (0..dim).map(|i| mu_mix[i] - mu_e[i]).fold(f64::INFINITY, f64::min);
    Ok(MwalRun { mixture: MixedPolicy { components }, value_gap, mu_mix })
}

// --- behavioral cloning -----------------------------------------------------

/// Training set of `(context, state-features, action)` triples, with inputs
/// already concatenated as `[c; phi(s); 1]`.
pub struct BcDataset {
    pub inputs: Vec<DVector<f64>>,
    pub actions: Vec<usize>,
    pub n_actions: usize,
    pub input_dim: usize,
}

/// Builds the supervised dataset from trajectory demonstrations.
pub fn bc_dataset_from_demos(cmdp: &ContextualMdp, demos: &[Demonstration]) -> Result<BcDataset> {
    let input_dim = cmdp.d() + cmdp.k() + 1;
    let mut inputs = Vec::new();
    let mut actions = Vec::new();
    for demo in demos {
        let DemonstrationPayload::Sampled { trajectory, .. } = &demo.payload else {
            return Err(CoirlError::InvalidArgument(
                "behavioral cloning needs trajectory demonstrations".into(),
            ));
        };
        for (i, &a) in trajectory.actions.iter().enumerate() {
            let s = trajectory.states[i];
            inputs.push(bc_input(cmdp, &demo.context, s));
            actions.push(a);
        }
    }
    if inputs.is_empty() {
        return Err(CoirlError::InvalidArgument("empty behavioral cloning dataset".into()));
    }
    Ok(BcDataset { inputs, actions, n_actions: cmdp.n_actions(), input_dim })
}

fn bc_input(cmdp: &ContextualMdp, c: &Context, s: usize) -> DVector<f64> {
    let mut x = DVector::zeros(cmdp.d() + cmdp.k() + 1);
    for (i, &ci) in c.weights().iter().enumerate() {
        x[i] = ci;
    }
    for j in 0..cmdp.k() {
        x[cmdp.d() + j] = cmdp.features()[(s, j)];
    }
    x[cmdp.d() + cmdp.k()] = 1.0;
    x
}

/// Linear-softmax action model over the concatenated `(c, phi(s))` input.
#[derive(Debug, Clone)]
pub struct BcModel {
    /// `n_actions x input_dim`.
    pub weights: DMatrix<f64>,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BcTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for BcTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 32, lr0: 0.5, decay: 0.995, seed: 0 }
    }
}

fn softmax(scores: &DVector<f64>) -> DVector<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = scores.map(|s| (s - max).exp());
    let z: f64 = out.iter().sum();
    out /= z;
    out
}

/// Cross-entropy loss and gradient of the weights over a set of sample
/// indices (used by training and by the finite-difference check).
pub fn bc_loss_and_grad(
    weights: &DMatrix<f64>,
    data: &BcDataset,
    idx: &[usize],
) -> (f64, DMatrix<f64>) {
    let mut grad = DMatrix::zeros(weights.nrows(), weights.ncols());
    let mut loss = 0.0;
    for &i in idx {
        let x = &data.inputs[i];
        let probs = softmax(&(weights * x));
        loss -= probs[data.actions[i]].max(1e-300).ln();
        for a in 0..data.n_actions {
            let coeff = probs[a] - if a == data.actions[i] { 1.0 } else { 0.0 };
            for j in 0..data.input_dim {
                grad[(a, j)] += coeff * x[j];
            }
        }
    }
    let scale = 1.0 / idx.len() as f64;
    (loss * scale, grad * scale)
}

/// Mini-batch gradient descent on the cross-entropy; deterministic given the
/// seed.
pub fn bc_train(data: &BcDataset, cfg: &BcTrainConfig) -> Result<BcModel> {
    if data.inputs.is_empty() {
        return Err(CoirlError::InvalidArgument("empty behavioral cloning dataset".into()));
    }
    let mut weights = DMatrix::zeros(data.n_actions, data.input_dim);
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr0 * cfg.decay.powi(epoch as i32);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (_, grad) = bc_loss_and_grad(&weights, data, batch);
            weights -= grad * lr;
        }
    }
    Ok(BcModel { weights, d: 0, k: 0, seed: cfg.seed })
}

impl BcModel {
    /// Action distribution at `(c, s)`.
    pub fn predict(&self, cmdp: &ContextualMdp, c: &Context, s: usize) -> DVector<f64> {
        softmax(&(&self.weights * bc_input(cmdp, c, s)))
    }

    /// Greedy action with lowest-index tie-breaking.
    pub fn greedy(&self, cmdp: &ContextualMdp, c: &Context, s: usize) -> usize {
        let probs = self.predict(cmdp, c, s);
        let mut best = 0;
        for a in 1..probs.len() {
            if probs[a] > probs[best] {
                best = a;
            }
        }
        best
    }

    /// The greedy policy over all states for a context.
    pub fn greedy_policy(&self, cmdp: &ContextualMdp, c: &Context) -> Result<DeterministicPolicy> {
        DeterministicPolicy::new(
            (0..cmdp.n_states()).map(|s| self.greedy(cmdp, c, s)).collect(),
            cmdp.n_actions(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BcModelDoc {
            weights: self.weights.iter().copied().collect(),
            n_actions: self.weights.nrows(),
            input_dim: self.weights.ncols(),
            d: self.d,
            k: self.k,
            seed: self.seed,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BcModelDoc = serde_json::from_str(text)?;
        if doc.weights.len() != doc.n_actions * doc.input_dim {
            return Err(CoirlError::Validation("weight matrix length mismatch".into()));
        }
        // nalgebra iterates column-major; round-trip through the same order.
        let weights =
            DMatrix::from_iterator(doc.n_actions, doc.input_dim, doc.weights.iter().copied());
        Ok(Self { weights, d: doc.d, k: doc.k, seed: doc.seed })
    }
}

#[derive(Serialize, Deserialize)]
struct BcModelDoc {
    weights: Vec<f64>,
    n_actions: usize,
    input_dim: usize,
    d: usize,
    k: usize,
    seed: u64,
}
