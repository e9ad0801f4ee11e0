//! The imitation loss, its subgradient oracle and the evolution-strategies
//! finite-difference estimator.
//!
//! For a mapping `W` and a demonstration at context `c` with expert feature
//! expectations `mu*`, the per-context loss term is
//! `f_W(c) . (mu_{pihat} - mu*)` where `pihat` is the planner's optimal
//! policy for reward `f_W(c) . phi(s)`. With exact demonstrations every term
//! is nonnegative and the loss vanishes exactly at the true mapping. The
//! subgradient is `c (outer) (mu_{pihat} - mu*)` reshaped to `d x k`.
//!
//! Every evaluation re-plans `pihat` from scratch; nothing is cached across
//! mapping updates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cmdp::{outer_flatten, unflatten_vector, Context, ContextualMdp};
use crate::error::{CoirlError, Result};
use crate::expert::Demonstration;
use crate::planner::{self, PlannerConfig};
use crate::rng::{derive_seed, rng_from_seed, sample_standard_normal};

/// Loss value with its per-context decomposition.
#[derive(Debug, Clone)]
pub struct LossReport {
    /// Mean of the per-context terms.
    pub value: f64,
    pub per_context: Vec<(Context, f64)>,
}

/// Perturbation parameters for the ES gradient estimator.
#[derive(Debug, Clone, Copy)]
pub struct EsConfig {
    /// Number of sampled perturbation directions.
    pub m: usize,
    /// Gaussian scale of the raw perturbations; survives only in the
    /// `1/(m rho)` prefactor because directions are normalized.
    pub rho: f64,
    /// Step radius along each normalized direction.
    pub nu: f64,
    /// Subtract the unperturbed loss from each evaluation (variance
    /// reduction; same expected direction for linear losses).
    pub centered: bool,
    pub rng_seed: u64,
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(CoirlError::InvalidArgument("es: m must be >= 1".into()));
        }
        if self.rho <= 0.0 || self.nu <= 0.0 {
            return Err(CoirlError::InvalidArgument("es: rho and nu must be positive".into()));
        }
        Ok(())
    }
}

/// Per-demonstration pieces shared by the loss and the subgradient: the
/// reward weights `f_W(c)`, and `mu_{pihat} - mu_demo`.
fn demo_term(
    cmdp: &ContextualMdp,
    w: &DMatrix<f64>,
    demo: &Demonstration,
    cfg: &PlannerConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if w.nrows() != cmdp.d() || w.ncols() != cmdp.k() {
        return Err(CoirlError::InvalidArgument(format!(
            "mapping is {}x{}, expected {}x{}",
            w.nrows(),
            w.ncols(),
            cmdp.d(),
            cmdp.k()
        )));
    }
    let c = demo.context.as_vector();
    let f = DVector::from_fn(cmdp.k(), |j, _| {
        (0..cmdp.d()).map(|i| c[i] * w[(i, j)]).sum()
    });
    let mdp = cmdp.instantiate_with_reward_weights(&demo.context, &f)?;
    let (_, policy) = planner::value_iteration(&mdp, cfg)?;
    let fe = planner::feature_expectations(&mdp, &policy, mdp.xi())?;
    Ok((f, fe.mu - demo.mu()))
}

/// Mean over demonstrations of `f_W(c) . (mu_{pihat_c(W)} - mu_demo)`.
pub fn coirl_loss(
    cmdp: &ContextualMdp,
    w: &DMatrix<f64>,
    demos: &[Demonstration],
    cfg: &PlannerConfig,
) -> Result<LossReport> {
    if demos.is_empty() {
        return Err(CoirlError::InvalidArgument("loss needs at least one demonstration".into()));
    }
    let terms: Vec<(Context, f64)> = demos
        .par_iter()
        .map(|demo| {
            let (f, diff) = demo_term(cmdp, w, demo, cfg)?;
            Ok((demo.context.clone(), f.dot(&diff)))
        })
        .collect::<Result<_>>()?;
    let value = terms.iter().map(|(_, t)| t).sum::<f64>() / terms.len() as f64;
    Ok(LossReport { value, per_context: terms })
}

/// Subgradient `mean_i c_i (outer) (mu_{pihat} - mu_i)`, reshaped `d x k`.
/// A single demonstration gives the stochastic oracle; a batch is averaged.
pub fn subgradient(
    cmdp: &ContextualMdp,
    w: &DMatrix<f64>,
    demos: &[Demonstration],
    cfg: &PlannerConfig,
) -> Result<DMatrix<f64>> {
    if demos.is_empty() {
        return Err(CoirlError::InvalidArgument("subgradient needs a demonstration".into()));
    }
    let parts: Vec<DVector<f64>> = demos
        .par_iter()
        .map(|demo| {
            let (_, diff) = demo_term(cmdp, w, demo, cfg)?;
            Ok(outer_flatten(&demo.context.as_vector(), &diff))
        })
        .collect::<Result<_>>()?;
    let mut flat = DVector::zeros(cmdp.d() * cmdp.k());
    for part in &parts {
        flat += part;
    }
    flat /= parts.len() as f64;
    Ok(unflatten_vector(&flat, cmdp.d(), cmdp.k()))
}

/// ES estimator for an arbitrary scalar objective of the mapping. Sampled
/// directions are fixed by the seed; evaluations run in parallel and reduce
/// in index order.
pub fn es_gradient_of<F>(loss_fn: F, w: &DMatrix<f64>, cfg: &EsConfig) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let (d, k) = (w.nrows(), w.ncols());
    let dim = d * k;
    let base = if cfg.centered { Some(loss_fn(w)?) } else { None };
    let parts: Vec<DVector<f64>> = (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng_from_seed(derive_seed(cfg.rng_seed, j as u64));
            let mut u = DVector::from_fn(dim, |_, _| cfg.rho * sample_standard_normal(&mut rng));
            let norm = u.norm();
            if norm == 0.0 {
                return Err(CoirlError::Numerical("zero ES perturbation".into()));
            }
            u *= cfg.nu / norm;
            let perturbed = w + unflatten_vector(&u, d, k);
            let mut value = loss_fn(&perturbed)?;
            if let Some(b) = base {
                value -= b;
            }
            Ok(u * value)
        })
        .collect::<Result<_>>()?;
    let mut flat = DVector::zeros(dim);
    for part in &parts {
        flat += part;
    }
    flat /= cfg.m as f64 * cfg.rho;
    Ok(unflatten_vector(&flat, d, k))
}

/// ES estimator of the imitation loss over a demonstration set.
pub fn es_gradient(
    cmdp: &ContextualMdp,
    w: &DMatrix<f64>,
    demos: &[Demonstration],
    es_cfg: &EsConfig,
    planner_cfg: &PlannerConfig,
) -> Result<DMatrix<f64>> {
    es_gradient_of(
        |point| Ok(coirl_loss(cmdp, point, demos, planner_cfg)?.value),
        w,
        es_cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{Context, Geometry, Kernel, RewardMapping};
    use crate::env::{make_gridworld, sample_context, sample_mapping, GridWorldSpec};
    use crate::expert::Expert;
    use crate::planner::DeterministicPolicy;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid_setup(n: usize, m: usize) -> (ContextualMdp, RewardMapping, Expert) {
        let (cmdp, w_star) = make_gridworld(&GridWorldSpec { n, m, gamma: 0.9 }).unwrap();
        let expert = Expert::new(cmdp.clone(), w_star.clone(), PlannerConfig::precise());
        (cmdp, w_star, expert)
    }

    #[test]
    fn loss_at_w_star_is_zero_and_nonnegative_elsewhere() {
        let (cmdp, w_star, expert) = grid_setup(2, 2);
        let mut rng = rng_from_seed(1);
        let demos: Vec<_> = (0..6)
            .map(|_| expert.exact_demonstration(&sample_context(&mut rng, 4).unwrap()).unwrap())
            .collect();
        let cfg = PlannerConfig::precise();
        let at_star = coirl_loss(&cmdp, w_star.matrix(), &demos, &cfg).unwrap();
        assert!(at_star.value.abs() <= 1e-8);
        for _ in 0..10 {
            let w = sample_mapping(&mut rng, 4, 4, Geometry::EuclideanBall).unwrap();
            let report = coirl_loss(&cmdp, w.matrix(), &demos, &cfg).unwrap();
            assert!(report.value >= -1e-10);
            for (_, term) in &report.per_context {
                assert!(*term >= -1e-10);
            }
            assert_abs_diff_eq!(
                report.value,
                report.per_context.iter().map(|(_, t)| t).sum::<f64>()
                    / report.per_context.len() as f64,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn loss_term_matches_policy_enumeration() {
        // 2-state 2-action CMDP; the per-context term must equal the max over
        // all four deterministic policies of f_W(c).(mu_pi - mu*).
        let mut rng = rng_from_seed(2);
        let kernels: Vec<Kernel> = (0..2)
            .map(|_| {
                let mut data = vec![0.0; 2 * 2 * 2];
                for row in data.chunks_mut(2) {
                    row.copy_from_slice(&crate::rng::sample_simplex(&mut rng, 2));
                }
                Kernel::new(2, 2, data).unwrap()
            })
            .collect();
        let features = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let cmdp = ContextualMdp::new(kernels, features, vec![0.5, 0.5], 0.8).unwrap();
        let w_star =
            RewardMapping::new(DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.25, 0.75]), Geometry::LinfBox)
                .unwrap();
        let expert = Expert::new(cmdp.clone(), w_star, PlannerConfig::precise());
        let c = Context::new(vec![0.4, 0.6]).unwrap();
        let demo = expert.exact_demonstration(&c).unwrap();

        let w = DMatrix::from_row_slice(2, 2, &[-0.8, 0.3, 0.6, -0.1]);
        let cfg = PlannerConfig::precise();
        let report = coirl_loss(&cmdp, &w, std::slice::from_ref(&demo), &cfg).unwrap();

        let f = DVector::from_fn(2, |j, _| (0..2).map(|i| c.weights()[i] * w[(i, j)]).sum());
        let mdp = cmdp.instantiate_with_reward_weights(&c, &f).unwrap();
        let mut best = f64::NEG_INFINITY;
        for a0 in 0..2 {
            for a1 in 0..2 {
                let pol = DeterministicPolicy::new(vec![a0, a1], 2).unwrap();
                let mu = planner::feature_expectations(&mdp, &pol, mdp.xi()).unwrap().mu;
                best = best.max(f.dot(&(mu - demo.mu())));
            }
        }
        assert_abs_diff_eq!(report.value, best, epsilon = 1e-8);
    }

    #[test]
    fn subgradient_vanishes_at_w_star() {
        let (cmdp, w_star, expert) = grid_setup(2, 2);
        let c = sample_context(&mut rng_from_seed(3), 4).unwrap();
        let demo = expert.exact_demonstration(&c).unwrap();
        let g = subgradient(&cmdp, w_star.matrix(), std::slice::from_ref(&demo), &PlannerConfig::precise())
            .unwrap();
        assert_eq!(g.iter().fold(0.0f64, |m, x| m.max(x.abs())), 0.0);
    }

    #[test]
    fn subgradient_inequality_holds() {
        let (cmdp, _, expert) = grid_setup(2, 2);
        let mut rng = rng_from_seed(4);
        let demos: Vec<_> = (0..4)
            .map(|_| expert.exact_demonstration(&sample_context(&mut rng, 4).unwrap()).unwrap())
            .collect();
        let cfg = PlannerConfig::precise();
        for _ in 0..10 {
            let w1 = sample_mapping(&mut rng, 4, 4, Geometry::EuclideanBall).unwrap();
            let w2 = sample_mapping(&mut rng, 4, 4, Geometry::EuclideanBall).unwrap();
            let l1 = coirl_loss(&cmdp, w1.matrix(), &demos, &cfg).unwrap().value;
            let l2 = coirl_loss(&cmdp, w2.matrix(), &demos, &cfg).unwrap().value;
            let g = subgradient(&cmdp, w1.matrix(), &demos, &cfg).unwrap();
            let inner: f64 = g
                .iter()
                .zip((w2.matrix() - w1.matrix()).iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!(l2 >= l1 + inner - 1e-8, "l2={l2} l1={l1} inner={inner}");
        }
    }

    #[test]
    fn subgradient_norm_bounds() {
        let (cmdp, _, expert) = grid_setup(2, 2);
        let gamma = 0.9;
        let dk = 16.0;
        let mut rng = rng_from_seed(5);
        let cfg = PlannerConfig::precise();
        for _ in 0..50 {
            let demo = expert
                .exact_demonstration(&sample_context(&mut rng, 4).unwrap())
                .unwrap();
            let w = sample_mapping(&mut rng, 4, 4, Geometry::LinfBox).unwrap();
            let g = subgradient(&cmdp, w.matrix(), std::slice::from_ref(&demo), &cfg).unwrap();
            let linf = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let l2 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(linf <= 2.0 / (1.0 - gamma) + 1e-9);
            assert!(l2 <= 2.0 * dk.sqrt() / (1.0 - gamma) + 1e-9);
        }
    }

    #[test]
    fn convexity_interpolation() {
        let (cmdp, _, expert) = grid_setup(2, 2);
        let mut rng = rng_from_seed(6);
        let demos: Vec<_> = (0..4)
            .map(|_| expert.exact_demonstration(&sample_context(&mut rng, 4).unwrap()).unwrap())
            .collect();
        let cfg = PlannerConfig::precise();
        for _ in 0..10 {
            let w1 = sample_mapping(&mut rng, 4, 4, Geometry::EuclideanBall).unwrap();
            let w2 = sample_mapping(&mut rng, 4, 4, Geometry::EuclideanBall).unwrap();
            let lambda: f64 = rng.gen_range(0.0..1.0);
            let mid = w1.matrix() * lambda + w2.matrix() * (1.0 - lambda);
            let l_mid = coirl_loss(&cmdp, &mid, &demos, &cfg).unwrap().value;
            let l1 = coirl_loss(&cmdp, w1.matrix(), &demos, &cfg).unwrap().value;
            let l2 = coirl_loss(&cmdp, w2.matrix(), &demos, &cfg).unwrap().value;
            assert!(l_mid <= lambda * l1 + (1.0 - lambda) * l2 + 1e-8);
        }
    }

    #[test]
    fn es_gradient_is_zero_for_constant_loss_when_centered() {
        let w = DMatrix::zeros(2, 3);
        let cfg = EsConfig { m: 16, rho: 1.0, nu: 0.1, centered: true, rng_seed: 7 };
        let g = es_gradient_of(|_| Ok(3.25), &w, &cfg).unwrap();
        assert_eq!(g.iter().fold(0.0f64, |m, x| m.max(x.abs())), 0.0);
    }

    #[test]
    fn es_gradient_aligns_with_linear_surrogate() {
        let mut rng = rng_from_seed(8);
        let target = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let w = DMatrix::zeros(2, 3);
        let cfg = EsConfig { m: 2000, rho: 1.0, nu: 1e-2, centered: true, rng_seed: 9 };
        let g = es_gradient_of(
            |point| Ok(point.iter().zip(target.iter()).map(|(a, b)| a * b).sum()),
            &w,
            &cfg,
        )
        .unwrap();
        let dot: f64 = g.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
        let cos = dot
            / (g.iter().map(|x| x * x).sum::<f64>().sqrt()
                * target.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(cos >= 0.9, "cosine was {cos}");
    }

    #[test]
    fn es_gradient_single_sample_is_rank_one() {
        let w = DMatrix::zeros(1, 4);
        let cfg = EsConfig { m: 1, rho: 0.5, nu: 0.2, centered: false, rng_seed: 10 };
        let g = es_gradient_of(|_| Ok(2.0), &w, &cfg).unwrap();
        // g = loss * (nu / rho) * u_hat, so |g| = loss * nu / rho.
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 2.0 * 0.2 / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn es_config_validation() {
        assert!(EsConfig { m: 0, rho: 1.0, nu: 1.0, centered: false, rng_seed: 0 }
            .validate()
            .is_err());
        assert!(EsConfig { m: 1, rho: 0.0, nu: 1.0, centered: false, rng_seed: 0 }
            .validate()
            .is_err());
    }
}
