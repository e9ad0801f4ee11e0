//! Zero-shot transfer to unseen contexts without re-planning.
//!
//! A [`PolicyLibrary`] stores optimal policies for a set of training
//! contexts together with their successor features. For context-independent
//! dynamics, generalized policy improvement reconstructs every stored
//! policy's Q-function at a new context from the successor features alone
//! and acts greedily on their maximum. For contextual dynamics the nearest
//! stored context's policy is reused, with a value-gap bound from the
//! simulation argument.

use nalgebra::{DMatrix, DVector};

use crate::cmdp::{Context, ContextualMdp, RewardMapping};
use crate::error::{CoirlError, Result};
use crate::planner::{self, DeterministicPolicy, PlannerConfig, SuccessorFeatures};

/// One stored training context.
pub struct LibraryEntry {
    pub context: Context,
    pub policy: DeterministicPolicy,
    pub psi: SuccessorFeatures,
    /// Optimal state values at the stored context (under the library mapping).
    pub values: DVector<f64>,
}

/// Optimal policies and successor features keyed by training context.
pub struct PolicyLibrary {
    entries: Vec<LibraryEntry>,
    mapping: RewardMapping,
}

impl PolicyLibrary {
    /// Plans each context under the mapping and stores policy, values and
    /// successor features.
    pub fn build(
        cmdp: &ContextualMdp,
        mapping: &RewardMapping,
        contexts: &[Context],
        cfg: &PlannerConfig,
    ) -> Result<Self> {
        let entries = contexts
            .iter()
            .map(|c| {
                let mdp = cmdp.instantiate(c, mapping)?;
                let (values, policy) = planner::value_iteration(&mdp, cfg)?;
                let psi = planner::successor_features(&mdp, &policy)?;
                Ok(LibraryEntry { context: c.clone(), policy, psi, values })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, mapping: mapping.clone() })
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn mapping(&self) -> &RewardMapping {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index and l-inf distance of the closest stored context (lowest index
    /// on ties).
    pub fn nearest(&self, c: &Context) -> Result<(usize, f64)> {
        if self.entries.is_empty() {
            return Err(CoirlError::InvalidState("empty policy library".into()));
        }
        let mut best = (0usize, f64::INFINITY);
        for (j, entry) in self.entries.iter().enumerate() {
            let dist = entry.context.linf_distance(c);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        Ok(best)
    }

    /// Consistency audit: each entry's successor features must reproduce the
    /// per-state feature expectations of its own policy.
    pub fn validate(&self, cmdp: &ContextualMdp, cfg: &PlannerConfig) -> Result<()> {
        let _ = cfg;
        for entry in &self.entries {
            let mdp = cmdp.instantiate(&entry.context, &self.mapping)?;
            let m = planner::state_feature_expectations(&mdp, &entry.policy)?;
            for s in 0..cmdp.n_states() {
                let own = entry.psi.get(s, entry.policy.action(s));
                for j in 0..cmdp.k() {
                    if (own[j] - m[(s, j)]).abs() > 1e-6 {
                        return Err(CoirlError::Numerical(format!(
                            "successor features inconsistent at state {s} feature {j}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Greedy farthest-point subsample of `target` entries; keeps the
    /// covering radius as small as the greedy rule allows. Entry 0 seeds the
    /// selection for determinism.
    pub fn reduce_farthest_point(&self, target: usize) -> Result<PolicyLibrary> {
        if target == 0 || self.entries.is_empty() {
            return Err(CoirlError::InvalidArgument("target size must be positive".into()));
        }
        let mut chosen = vec![0usize];
        while chosen.len() < target.min(self.entries.len()) {
            let mut far = (0usize, -1.0f64);
            for (i, entry) in self.entries.iter().enumerate() {
                if chosen.contains(&i) {
                    continue;
                }
                let dist = chosen
                    .iter()
                    .map(|&j| self.entries[j].context.linf_distance(&entry.context))
                    .fold(f64::INFINITY, f64::min);
                if dist > far.1 {
                    far = (i, dist);
                }
            }
            chosen.push(far.0);
        }
        chosen.sort_unstable();
        let entries = chosen
            .into_iter()
            .map(|i| {
                let e = &self.entries[i];
                LibraryEntry {
                    context: e.context.clone(),
                    policy: e.policy.clone(),
                    psi: e.psi.clone(),
                    values: e.values.clone(),
                }
            })
            .collect();
        Ok(PolicyLibrary { entries, mapping: self.mapping.clone() })
    }
}

/// Quantities entering the transfer bounds.
#[derive(Debug, Clone, Copy)]
pub struct TransferBoundInputs {
    /// `max_s ||W phi(s)||_1`.
    pub phi_max: f64,
    /// Max over library contexts and states of `|V*|`.
    pub v_max: f64,
    pub d: usize,
    pub gamma: f64,
    pub context_dependent: bool,
}

impl TransferBoundInputs {
    pub fn from_library(cmdp: &ContextualMdp, lib: &PolicyLibrary) -> Result<Self> {
        if lib.is_empty() {
            return Err(CoirlError::InvalidState("empty policy library".into()));
        }
        let w = lib.mapping().matrix();
        let mut phi_max = 0.0f64;
        for s in 0..cmdp.n_states() {
            let mut l1 = 0.0;
            for i in 0..cmdp.d() {
                let mut row = 0.0;
                for j in 0..cmdp.k() {
                    row += w[(i, j)] * cmdp.features()[(s, j)];
                }
                l1 += row.abs();
            }
            phi_max = phi_max.max(l1);
        }
        let v_max = lib
            .entries()
            .iter()
            .flat_map(|e| e.values.iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max);
        Ok(Self {
            phi_max,
            v_max,
            d: cmdp.d(),
            gamma: cmdp.gamma(),
            context_dependent: !cmdp.context_independent_dynamics(),
        })
    }
}

/// Value-gap bound for reusing a stored policy at context distance `dist`:
/// `2 (phi_max + gamma d v_max) / (gamma (1-gamma)) * dist` with contextual
/// dynamics, `2 phi_max / (1-gamma) * dist` without.
pub fn transfer_bound(inputs: &TransferBoundInputs, dist: f64) -> f64 {
    if inputs.context_dependent {
        2.0 * (inputs.phi_max + inputs.gamma * inputs.d as f64 * inputs.v_max)
            / (inputs.gamma * (1.0 - inputs.gamma))
            * dist
    } else {
        2.0 * inputs.phi_max / (1.0 - inputs.gamma) * dist
    }
}

/// Generalized policy improvement: greedy in
/// `max_j f_W(c) . psi_j(s, a)` over the stored policies' successor
/// features. Requires context-independent dynamics; lowest action index wins
/// ties.
pub fn gpi_policy(
    cmdp: &ContextualMdp,
    lib: &PolicyLibrary,
    c: &Context,
    mapping: &RewardMapping,
) -> Result<DeterministicPolicy> {
    if lib.is_empty() {
        return Err(CoirlError::InvalidState("empty policy library".into()));
    }
    if !cmdp.context_independent_dynamics() {
        return Err(CoirlError::UnsupportedDynamics(
            "generalized policy improvement needs context-independent dynamics; use nearest_transfer".into(),
        ));
    }
    let f = mapping.reward_weights(c)?;
    let actions = (0..cmdp.n_states())
        .map(|s| {
            let mut best_a = 0usize;
            let mut best = f64::NEG_INFINITY;
            for a in 0..cmdp.n_actions() {
                let q = lib
                    .entries()
                    .iter()
                    .map(|e| {
                        e.psi
                            .get(s, a)
                            .iter()
                            .zip(f.iter())
                            .map(|(p, w)| p * w)
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            best_a
        })
        .collect();
    DeterministicPolicy::new(actions, cmdp.n_actions())
}

/// Reuses the stored policy of the nearest context (lowest index on ties)
/// and returns it with the evaluated value-gap bound.
pub fn nearest_transfer(
    cmdp: &ContextualMdp,
    lib: &PolicyLibrary,
    c: &Context,
) -> Result<(DeterministicPolicy, f64)> {
    let (j, dist) = lib.nearest(c)?;
    let inputs = TransferBoundInputs::from_library(cmdp, lib)?;
    Ok((lib.entries()[j].policy.clone(), transfer_bound(&inputs, dist)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::Geometry;
    use crate::env::{
        make_gridworld, make_random_cmdp, sample_context, GridWorldSpec, SyntheticCmdpSpec,
    };
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;

    fn grid_library(
        n_ctx: usize,
    ) -> (ContextualMdp, RewardMapping, PolicyLibrary, Vec<Context>) {
        let (cmdp, w_star) = make_gridworld(&GridWorldSpec { n: 2, m: 2, gamma: 0.9 }).unwrap();
        let mut rng = rng_from_seed(3);
        let contexts: Vec<Context> =
            (0..n_ctx).map(|_| sample_context(&mut rng, 4).unwrap()).collect();
        let lib =
            PolicyLibrary::build(&cmdp, &w_star, &contexts, &PlannerConfig::precise()).unwrap();
        (cmdp, w_star, lib, contexts)
    }

    #[test]
    fn library_validates_and_reduces() {
        let (cmdp, _, lib, _) = grid_library(6);
        lib.validate(&cmdp, &PlannerConfig::precise()).unwrap();
        let reduced = lib.reduce_farthest_point(3).unwrap();
        assert_eq!(reduced.len(), 3);
    }

    #[test]
    fn gpi_with_query_in_library_recovers_optimal_value() {
        let (cmdp, w_star, lib, contexts) = grid_library(4);
        let c = &contexts[1];
        let policy = gpi_policy(&cmdp, &lib, c, &w_star).unwrap();
        let mdp = cmdp.instantiate(c, &w_star).unwrap();
        let v_gpi = planner::policy_value(&mdp, &policy, mdp.xi()).unwrap();
        let (v_star, _) = planner::value_iteration(&mdp, &PlannerConfig::precise()).unwrap();
        let v_opt: f64 = mdp.xi().iter().zip(v_star.iter()).map(|(w, v)| w * v).sum();
        assert!(v_opt - v_gpi <= 1e-6, "gap {}", v_opt - v_gpi);
    }

    #[test]
    fn gpi_dominates_singleton_source_policy() {
        let (cmdp, w_star, lib, _) = grid_library(1);
        let mut rng = rng_from_seed(7);
        for _ in 0..10 {
            let c = sample_context(&mut rng, 4).unwrap();
            let policy = gpi_policy(&cmdp, &lib, &c, &w_star).unwrap();
            let mdp = cmdp.instantiate(&c, &w_star).unwrap();
            let v_gpi = planner::policy_value(&mdp, &policy, mdp.xi()).unwrap();
            let v_src =
                planner::policy_value(&mdp, &lib.entries()[0].policy, mdp.xi()).unwrap();
            assert!(v_gpi >= v_src - 1e-6);
        }
    }

    #[test]
    fn gpi_bound_holds_on_grid_queries() {
        let (cmdp, w_star, lib, _) = grid_library(5);
        let inputs = TransferBoundInputs::from_library(&cmdp, &lib).unwrap();
        assert!(!inputs.context_dependent);
        let mut rng = rng_from_seed(11);
        for _ in 0..25 {
            let c = sample_context(&mut rng, 4).unwrap();
            let policy = gpi_policy(&cmdp, &lib, &c, &w_star).unwrap();
            let mdp = cmdp.instantiate(&c, &w_star).unwrap();
            let v_gpi = planner::policy_value(&mdp, &policy, mdp.xi()).unwrap();
            let (v_star, _) = planner::value_iteration(&mdp, &PlannerConfig::precise()).unwrap();
            let v_opt: f64 = mdp.xi().iter().zip(v_star.iter()).map(|(w, v)| w * v).sum();
            let (_, dist) = lib.nearest(&c).unwrap();
            let bound = transfer_bound(&inputs, dist);
            assert!(v_opt - v_gpi <= bound + 1e-6, "gap {} bound {bound}", v_opt - v_gpi);
        }
    }

    #[test]
    fn gpi_rejects_contextual_dynamics() {
        let (cmdp, w_star) = make_random_cmdp(&SyntheticCmdpSpec {
            n_states: 5,
            n_actions: 2,
            d: 2,
            k: 2,
            terminal_count: 1,
            seed: 13,
            gamma: 0.8,
            geometry: Geometry::LinfBox,
        })
        .unwrap();
        let contexts = vec![sample_context(&mut rng_from_seed(14), 2).unwrap()];
        let lib =
            PolicyLibrary::build(&cmdp, &w_star, &contexts, &PlannerConfig::precise()).unwrap();
        assert!(matches!(
            gpi_policy(&cmdp, &lib, &contexts[0], &w_star),
            Err(CoirlError::UnsupportedDynamics(_))
        ));
    }

    #[test]
    fn nearest_transfer_bound_holds_on_contextual_dynamics() {
        let (cmdp, w_star) = make_random_cmdp(&SyntheticCmdpSpec {
            n_states: 6,
            n_actions: 2,
            d: 3,
            k: 2,
            terminal_count: 1,
            seed: 17,
            gamma: 0.8,
            geometry: Geometry::LinfBox,
        })
        .unwrap();
        let mut rng = rng_from_seed(18);
        let contexts: Vec<Context> =
            (0..6).map(|_| sample_context(&mut rng, 3).unwrap()).collect();
        let lib =
            PolicyLibrary::build(&cmdp, &w_star, &contexts, &PlannerConfig::precise()).unwrap();
        for _ in 0..25 {
            let c = sample_context(&mut rng, 3).unwrap();
            let (policy, bound) = nearest_transfer(&cmdp, &lib, &c).unwrap();
            let mdp = cmdp.instantiate(&c, &w_star).unwrap();
            let v_pi = planner::policy_value(&mdp, &policy, mdp.xi()).unwrap();
            let (v_star, _) = planner::value_iteration(&mdp, &PlannerConfig::precise()).unwrap();
            let v_opt: f64 = mdp.xi().iter().zip(v_star.iter()).map(|(w, v)| w * v).sum();
            assert!(v_opt - v_pi <= bound + 1e-6, "gap {} bound {bound}", v_opt - v_pi);
        }
    }

    #[test]
    fn nearest_transfer_exact_hit_has_zero_bound() {
        let (cmdp, _, lib, contexts) = grid_library(3);
        let (policy, bound) = nearest_transfer(&cmdp, &lib, &contexts[2]).unwrap();
        assert_eq!(bound, 0.0);
        assert_eq!(policy, lib.entries()[2].policy);
    }

    #[test]
    fn transfer_bound_arithmetic() {
        let contextual = TransferBoundInputs {
            phi_max: 1.0,
            v_max: 10.0,
            d: 3,
            gamma: 0.9,
            context_dependent: true,
        };
        assert_abs_diff_eq!(transfer_bound(&contextual, 0.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            transfer_bound(&contextual, 0.1),
            2.0 * (1.0 + 27.0) / 0.09 * 0.1,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(transfer_bound(&contextual, 0.1), 62.222222, epsilon = 1e-5);

        let independent = TransferBoundInputs {
            phi_max: 1.0,
            v_max: 10.0,
            d: 3,
            gamma: 0.9,
            context_dependent: false,
        };
        assert_abs_diff_eq!(transfer_bound(&independent, 0.1), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn simplex_mapping_bound_specializes() {
        // For a simplex mapping with phi in [0,1]: phi_max <= 1 and
        // v_max <= 1/(1-gamma), giving 2 (1 - gamma + gamma d) / (gamma (1-gamma)^2).
        let gamma = 0.8;
        let d = 4;
        let inputs = TransferBoundInputs {
            phi_max: 1.0,
            v_max: 1.0 / (1.0 - gamma),
            d,
            gamma,
            context_dependent: true,
        };
        let dist = 0.25;
        let closed_form =
            2.0 * (1.0 - gamma + gamma * d as f64) / (gamma * (1.0 - gamma) * (1.0 - gamma)) * dist;
        assert_abs_diff_eq!(transfer_bound(&inputs, dist), closed_form, epsilon = 1e-12);
    }

    #[test]
    fn covering_radius_shrink_never_raises_bound() {
        let (cmdp, _, lib, _) = grid_library(8);
        let inputs = TransferBoundInputs::from_library(&cmdp, &lib).unwrap();
        let mut rng = rng_from_seed(21);
        let reduced = lib.reduce_farthest_point(3).unwrap();
        for _ in 0..20 {
            let c = sample_context(&mut rng, 4).unwrap();
            let (_, full_dist) = lib.nearest(&c).unwrap();
            let (_, red_dist) = reduced.nearest(&c).unwrap();
            // The full library is a superset: its min distance is no larger.
            assert!(full_dist <= red_dist + 1e-15);
            assert!(transfer_bound(&inputs, full_dist) <= transfer_bound(&inputs, red_dist) + 1e-12);
        }
    }

    #[test]
    fn empty_library_is_invalid_state() {
        let (cmdp, w_star) = make_gridworld(&GridWorldSpec { n: 2, m: 2, gamma: 0.9 }).unwrap();
        let lib = PolicyLibrary::build(&cmdp, &w_star, &[], &PlannerConfig::precise()).unwrap();
        assert!(matches!(
            nearest_transfer(&cmdp, &lib, &sample_context(&mut rng_from_seed(1), 4).unwrap()),
            Err(CoirlError::InvalidState(_))
        ));
    }
}
