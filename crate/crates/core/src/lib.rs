//! Contextual inverse reinforcement learning for tabular contextual MDPs.
//!
//! A contextual MDP is a family of MDPs indexed by a context vector on the
//! probability simplex; the context selects both the transition kernel (a
//! convex combination of base kernels) and the reward (a bilinear form
//! `c^T W phi(s)` in the context and the state features). Given expert
//! demonstrations, the learners in this crate recover the context-to-reward
//! mapping `W` and transfer it zero-shot to unseen contexts.
//!
//! The crate is organised as:
//!
//! * [`cmdp`] — the data model: contextual MDPs, contexts, reward mappings,
//!   per-context instantiation and the flatten/outer-product operator.
//! * [`planner`] — exact tabular planning: value iteration, Q-values, policy
//!   evaluation, feature expectations and successor features.
//! * [`expert`] — a simulated expert: exact feature expectations, sampled
//!   trajectories under two truncation schemes, near-optimal perturbations.
//! * [`loss`] — the convex imitation loss, its subgradient oracle and an
//!   evolution-strategies finite-difference estimator.
//! * [`descent`] — mirror-descent learners (projected subgradient on the
//!   l2 ball, exponential weights on the simplex) and the ES training loop.
//! * [`ellipsoid`] — cutting-plane learners with the closed-form minimum
//!   volume enclosing ellipsoid update.
//! * [`transfer`] — zero-shot transfer: generalized policy improvement over a
//!   policy library and nearest-context reuse with value-gap bounds.
//! * [`env`] — generators for the benchmark environments (grid world,
//!   driving simulator, synthetic clinical-style CMDPs).
//! * [`baselines`] — comparison algorithms: projection apprenticeship
//!   learning and multiplicative weights on a stacked MDP, and a
//!   linear-softmax behavioral cloning baseline.
//! * [`harness`] — experiment configuration, metrics, CSV emission and SVG
//!   plots.

pub mod baselines;
pub mod cmdp;
pub mod descent;
pub mod ellipsoid;
pub mod env;
mod error;
pub mod expert;
pub mod harness;
pub mod loss;
pub mod planner;
pub mod rng;
pub mod transfer;

pub use cmdp::{outer_flatten, Context, ContextualMdp, Geometry, InstantiatedMdp, RewardMapping};
pub use error::{CoirlError, Result};
pub use expert::{Demonstration, DemonstrationPayload, Expert, SamplingScheme, Trajectory};
pub use planner::{DeterministicPolicy, FeatureExpectations, PlannerConfig, SuccessorFeatures};
