//! Mirror-descent learners and the evolution-strategies training loop.
//!
//! Two geometries are instantiated. On the l2 ball, mirror descent reduces to
//! projected subgradient descent with the always-normalize rule
//! `W <- (W - alpha g) / ||W - alpha g||_2`. On the simplex it reduces to
//! exponential weights, computed in log space for stability. The step-size
//! schedules and constants come in closed form from the geometry:
//!
//! * ball:    sigma = 1, D <= 1,        L = 2 sqrt(dk) / (1 - gamma),
//!   alpha_t = (1 - gamma) sqrt(1 / (2 dk t))
//! * simplex: sigma = 1, D^2 <= log dk, L = 2 / (1 - gamma),
//!   alpha_t = (1 - gamma) sqrt(log(dk) / (2 t))

use nalgebra::DMatrix;

use crate::cmdp::{ContextualMdp, Geometry};
use crate::error::{CoirlError, Result};
use crate::expert::Demonstration;
use crate::loss::{self, EsConfig};
use crate::planner::PlannerConfig;

/// Strong-convexity parameter, Bregman diameter and Lipschitz constant of a
/// descent geometry; these determine the theory step-size schedule.
#[derive(Debug, Clone, Copy)]
pub struct GeometryConstants {
    pub sigma: f64,
    pub diameter: f64,
    pub lipschitz: f64,
}

impl GeometryConstants {
    /// `alpha_t = (D / L) sqrt(2 sigma / t)`, `t` counted from 1.
    pub fn alpha(&self, t: usize) -> f64 {
        (self.diameter / self.lipschitz) * (2.0 * self.sigma / t as f64).sqrt()
    }
}

/// Closed-form constants for the two instantiated geometries.
pub fn theory_constants(d: usize, k: usize, gamma: f64, geometry: Geometry) -> Result<GeometryConstants> {
    if d < 1 || k < 1 {
        return Err(CoirlError::InvalidArgument("d and k must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(CoirlError::InvalidArgument("gamma must lie in [0, 1)".into()));
    }
    let dk = (d * k) as f64;
    match geometry {
        Geometry::EuclideanBall => Ok(GeometryConstants {
            sigma: 1.0,
            diameter: 1.0,
            lipschitz: 2.0 * dk.sqrt() / (1.0 - gamma),
        }),
        Geometry::Simplex => {
            if d * k < 2 {
                return Err(CoirlError::InvalidArgument(
                    "simplex geometry needs dk >= 2".into(),
                ));
            }
            Ok(GeometryConstants {
                sigma: 1.0,
                diameter: dk.ln().sqrt(),
                lipschitz: 2.0 / (1.0 - gamma),
            })
        }
        Geometry::LinfBox => Err(CoirlError::InvalidArgument(
            "no mirror-descent instantiation on the box; use the ellipsoid learner".into(),
        )),
    }
}

/// One mirror-descent update.
pub fn mda_step(
    w: &DMatrix<f64>,
    g: &DMatrix<f64>,
    alpha: f64,
    geometry: Geometry,
) -> Result<DMatrix<f64>> {
    if w.shape() != g.shape() {
        return Err(CoirlError::InvalidArgument("subgradient shape mismatch".into()));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(CoirlError::InvalidArgument("non-finite subgradient".into()));
    }
    match geometry {
        Geometry::EuclideanBall => {
            let tilde = w - g * alpha;
            let norm = tilde.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(CoirlError::DegenerateStep("zero-norm iterate on the ball".into()));
            }
            Ok(tilde / norm)
        }
        Geometry::Simplex => {
            // log-space exponential weights: stable under large alpha*g.
            let logits: Vec<f64> = w
                .iter()
                .zip(g.iter())
                .map(|(wi, gi)| wi.ln() - alpha * gi)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(CoirlError::DegenerateStep("all simplex mass vanished".into()));
            }
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let mut out = w.clone();
            for (o, l) in out.iter_mut().zip(logits.iter()) {
                *o = (l - lse).exp();
            }
            Ok(out)
        }
        Geometry::LinfBox => Err(CoirlError::InvalidArgument(
            "no mirror-descent instantiation on the box".into(),
        )),
    }
}

/// Euclidean projection onto the simplex (used by the ES loop, whose steps
/// are additive).
pub fn project_simplex(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut v: Vec<f64> = w.iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &x) in v.iter().enumerate() {
        acc += x;
        let candidate = (acc - 1.0) / (i + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        }
    }
    w.map(|x| (x - theta).max(0.0))
}

/// Projects a point back into a geometry after an additive step.
pub fn project(w: &DMatrix<f64>, geometry: Geometry) -> Result<DMatrix<f64>> {
    match geometry {
        Geometry::EuclideanBall => {
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(CoirlError::DegenerateStep("zero-norm iterate on the ball".into()));
            }
            Ok(w / norm)
        }
        Geometry::Simplex => Ok(project_simplex(w)),
        Geometry::LinfBox => Ok(w.map(|x| x.clamp(-1.0, 1.0))),
    }
}

/// Step-size schedule for a training run.
#[derive(Debug, Clone, Copy)]
pub enum StepSchedule {
    /// `alpha_t = (D / L) sqrt(2 sigma / t)` from [`theory_constants`].
    Theory,
    /// `alpha_t = alpha0 * decay^(t-1)`.
    ExpDecay { alpha0: f64, decay: f64 },
    /// Constant `alpha_t = alpha0 / ((dk + 4) sqrt(T + 1) L)` scaled by D.
    EsTheory,
}

/// One per-step record of a training run.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub step: usize,
    pub alpha: f64,
    pub grad_norm: f64,
    pub loss: Option<f64>,
    pub rel_value: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Metrics computed by an external checkpoint evaluator.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalPoint {
    pub loss: Option<f64>,
    pub rel_value: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Saved trajectory of a training run. `w_avg` is the running mean of the
/// iterates (the mirror-descent output); `w_best` is the best evaluated
/// iterate (the ES output).
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub w_avg: DMatrix<f64>,
    pub w_last: DMatrix<f64>,
    pub w_best: Option<DMatrix<f64>>,
}

impl TrainTrace {
    /// The learner's primary output: best iterate when tracked, otherwise
    /// the iterate average.
    pub fn final_mapping(&self) -> &DMatrix<f64> {
        self.w_best.as_ref().unwrap_or(&self.w_avg)
    }

    /// CSV with header `step,alpha,grad_norm,loss,rel_value,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,alpha,grad_norm,loss,rel_value,accuracy\n");
        for r in &self.records {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                r.alpha,
                r.grad_norm,
                fmt(r.loss),
                fmt(r.rel_value),
                fmt(r.accuracy)
            ));
        }
        out
    }
}

/// Options for [`run_mda`].
pub struct MdaOptions {
    pub geometry: Geometry,
    pub steps: usize,
    pub schedule: StepSchedule,
    /// Evaluate the running average every this many steps (0 = never).
    pub eval_every: usize,
    pub planner_cfg: PlannerConfig,
    /// Practical flag: normalize each subgradient to unit sup norm.
    pub normalize_grad: bool,
    /// Practical flag: keep a step only if it lowers the step's own
    /// demonstration loss.
    pub accept_only_if_decrease: bool,
    pub init: Option<DMatrix<f64>>,
}

impl MdaOptions {
    pub fn new(geometry: Geometry, steps: usize) -> Self {
        Self {
            geometry,
            steps,
            schedule: StepSchedule::Theory,
            eval_every: 0,
            planner_cfg: PlannerConfig::precise(),
            normalize_grad: false,
            accept_only_if_decrease: false,
            init: None,
        }
    }
}

fn default_init(geometry: Geometry, d: usize, k: usize) -> DMatrix<f64> {
    match geometry {
        // The ball initializes at the origin; the first update renormalizes.
        Geometry::EuclideanBall => DMatrix::zeros(d, k),
        _ => DMatrix::from_element(d, k, 1.0 / (d * k) as f64),
    }
}

fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mirror-descent training loop. At step `t` the stream supplies one or more
/// demonstrations; their averaged subgradient is applied with the schedule's
/// `alpha_t`. Returns the trace with the iterate average as primary output.
pub fn run_mda<S>(
    cmdp: &ContextualMdp,
    opts: &MdaOptions,
    mut stream: S,
    evaluator: Option<&dyn Fn(&DMatrix<f64>, usize) -> Result<EvalPoint>>,
) -> Result<TrainTrace>
where
    S: FnMut(usize) -> Result<Vec<Demonstration>>,
{
    if opts.steps < 1 {
        return Err(CoirlError::InvalidArgument("need at least one step".into()));
    }
    let (d, k) = (cmdp.d(), cmdp.k());
    let constants = match opts.schedule {
        StepSchedule::Theory => Some(theory_constants(d, k, cmdp.gamma(), opts.geometry)?),
        _ => None,
    };
    let mut w = opts.init.clone().unwrap_or_else(|| default_init(opts.geometry, d, k));
    let mut sum = w.clone();
    let mut records = Vec::with_capacity(opts.steps);

    for t in 1..=opts.steps {
        let demos = stream(t)?;
        if demos.is_empty() {
            return Err(CoirlError::InvalidArgument(format!("stream returned no demos at step {t}")));
        }
        let mut g = loss::subgradient(cmdp, &w, &demos, &opts.planner_cfg)?;
        let grad_norm = frobenius(&g);
        if opts.normalize_grad {
            let linf = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if linf > 0.0 {
                g /= linf;
            }
        }
        let alpha = match opts.schedule {
            StepSchedule::Theory => constants.as_ref().unwrap().alpha(t),
            StepSchedule::ExpDecay { alpha0, decay } => alpha0 * decay.powi(t as i32 - 1),
            StepSchedule::EsTheory => {
                return Err(CoirlError::InvalidArgument("ES schedule is not valid for MDA".into()))
            }
        };
        let candidate = mda_step(&w, &g, alpha, opts.geometry)?;
        let accept = if opts.accept_only_if_decrease {
            let before = loss::coirl_loss(cmdp, &w, &demos, &opts.planner_cfg)?.value;
            let after = loss::coirl_loss(cmdp, &candidate, &demos, &opts.planner_cfg)?.value;
            after < before
        } else {
            true
        };
        if accept {
            w = candidate;
        }
        sum += &w;

        let mut record = TraceRecord {
            step: t,
            alpha,
            grad_norm,
            loss: None,
            rel_value: None,
            accuracy: None,
        };
        if opts.eval_every > 0 && (t % opts.eval_every == 0 || t == opts.steps) {
            if let Some(eval) = evaluator {
                // Evaluate the running average of W_1..W_t: the quantity the
                // convergence guarantee speaks about.
                let avg = (&sum - &w) / t as f64;
                let point = eval(&avg, t)?;
                record.loss = point.loss;
                record.rel_value = point.rel_value;
                record.accuracy = point.accuracy;
            }
        }
        records.push(record);
    }
    // Average of W_1..W_T (the initial iterate counts as W_1).
    let w_avg = (&sum - &w) / opts.steps as f64;
    Ok(TrainTrace { records, w_avg, w_last: w, w_best: None })
}

/// Options for [`run_es`].
pub struct EsRunOptions {
    pub geometry: Geometry,
    pub steps: usize,
    pub es: EsConfig,
    pub schedule: StepSchedule,
    pub eval_every: usize,
    pub planner_cfg: PlannerConfig,
    /// Practical flag: l2-normalize the estimated gradient before stepping.
    pub normalize_grad: bool,
    /// Practical flag: keep a step only if the training loss decreased.
    pub accept_only_if_decrease: bool,
    pub init: Option<DMatrix<f64>>,
}

impl EsRunOptions {
    pub fn new(geometry: Geometry, steps: usize, es: EsConfig) -> Self {
        Self {
            geometry,
            steps,
            es,
            schedule: StepSchedule::ExpDecay { alpha0: 0.1, decay: 0.95 },
            eval_every: 0,
            planner_cfg: PlannerConfig::precise(),
            normalize_grad: false,
            accept_only_if_decrease: false,
            init: None,
        }
    }
}

/// Evolution-strategies training loop over a fixed demonstration set.
/// Returns the best iterate by evaluated training loss as primary output.
pub fn run_es(
    cmdp: &ContextualMdp,
    demo_set: &[Demonstration],
    opts: &EsRunOptions,
    evaluator: Option<&dyn Fn(&DMatrix<f64>, usize) -> Result<EvalPoint>>,
) -> Result<TrainTrace>
where
{
    if demo_set.is_empty() {
        return Err(CoirlError::InvalidArgument("ES needs a demonstration set".into()));
    }
    let (d, k) = (cmdp.d(), cmdp.k());
    let mut w = opts
        .init
        .clone()
        .unwrap_or_else(|| project(&default_init(opts.geometry, d, k), opts.geometry).unwrap_or_else(|_| default_init(opts.geometry, d, k)));
    let train_loss = |point: &DMatrix<f64>| -> Result<f64> {
        Ok(loss::coirl_loss(cmdp, point, demo_set, &opts.planner_cfg)?.value)
    };
    let mut current_loss = train_loss(&w)?;
    let mut best_loss = current_loss;
    let mut best_w = w.clone();
    let mut sum = w.clone();
    let mut records = Vec::with_capacity(opts.steps);

    for t in 1..=opts.steps {
        let mut es_cfg = opts.es;
        es_cfg.rng_seed = crate::rng::derive_seed(opts.es.rng_seed, t as u64);
        let mut g = loss::es_gradient(cmdp, &w, demo_set, &es_cfg, &opts.planner_cfg)?;
        let grad_norm = frobenius(&g);
        if opts.normalize_grad && grad_norm > 0.0 {
            g /= grad_norm;
        }
        let alpha = match opts.schedule {
            StepSchedule::ExpDecay { alpha0, decay } => alpha0 * decay.powi(t as i32 - 1),
            StepSchedule::EsTheory => {
                let c = theory_constants(d, k, cmdp.gamma(), opts.geometry)?;
                c.diameter / (((d * k + 4) as f64) * ((opts.steps + 1) as f64).sqrt() * c.lipschitz)
            }
            StepSchedule::Theory => {
                let c = theory_constants(d, k, cmdp.gamma(), opts.geometry)?;
                c.alpha(t)
            }
        };
        let candidate = project(&(&w - &g * alpha), opts.geometry)?;
        let candidate_loss = train_loss(&candidate)?;
        if !opts.accept_only_if_decrease || candidate_loss < current_loss {
            w = candidate;
            current_loss = candidate_loss;
        }
        if current_loss < best_loss {
            best_loss = current_loss;
            best_w = w.clone();
        }
        sum += &w;

        let mut record = TraceRecord {
            step: t,
            alpha,
            grad_norm,
            loss: Some(current_loss),
            rel_value: None,
            accuracy: None,
        };
        if opts.eval_every > 0 && (t % opts.eval_every == 0 || t == opts.steps) {
            if let Some(eval) = evaluator {
                let point = eval(&best_w, t)?;
                record.rel_value = point.rel_value;
                record.accuracy = point.accuracy;
                if point.loss.is_some() {
                    record.loss = point.loss;
                }
            }
        }
        records.push(record);
    }
    let w_avg = (&sum - &w) / opts.steps as f64;
    Ok(TrainTrace { records, w_avg, w_last: w, w_best: Some(best_w) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{Context, ContextualMdp, Kernel, RewardMapping};
    use crate::expert::Expert;
    use crate::rng::{rng_from_seed, sample_simplex};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn theory_constants_match_closed_forms() {
        let ball = theory_constants(3, 3, 0.9, Geometry::EuclideanBall).unwrap();
        assert_abs_diff_eq!(ball.lipschitz, 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ball.alpha(1), 0.1 * (1.0f64 / 18.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(ball.alpha(1), 0.023570, epsilon = 1e-6);

        let simplex = theory_constants(3, 3, 0.9, Geometry::Simplex).unwrap();
        assert_abs_diff_eq!(simplex.lipschitz, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(simplex.alpha(1), 0.1 * (9.0f64.ln() / 2.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(simplex.alpha(1), 0.104815, epsilon = 1e-6);
    }

    #[test]
    fn lipschitz_diverges_as_gamma_approaches_one() {
        let near = theory_constants(2, 2, 0.999, Geometry::EuclideanBall).unwrap();
        let far = theory_constants(2, 2, 0.9, Geometry::EuclideanBall).unwrap();
        assert!(near.lipschitz > 50.0 * far.lipschitz / 100.0 * 10.0);
        assert!(theory_constants(1, 1, 0.9, Geometry::Simplex).is_err());
    }

    #[test]
    fn mda_step_zero_gradient_is_identity() {
        let w_ball = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let zero = DMatrix::zeros(1, 2);
        let next = mda_step(&w_ball, &zero, 0.5, Geometry::EuclideanBall).unwrap();
        assert_abs_diff_eq!(next[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(next[(0, 1)], 0.8, epsilon = 1e-15);

        let w_simplex = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let next = mda_step(&w_simplex, &DMatrix::zeros(2, 2), 0.5, Geometry::Simplex).unwrap();
        for (a, b) in next.iter().zip(w_simplex.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mda_step_simplex_hand_computed() {
        let w = DMatrix::from_element(1, 4, 0.25);
        let g = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let next = mda_step(&w, &g, 1.0, Geometry::Simplex).unwrap();
        let e = (-1.0f64).exp();
        let z = e + 3.0;
        assert_abs_diff_eq!(next[(0, 0)], e / z, epsilon = 1e-12);
        for j in 1..4 {
            assert_abs_diff_eq!(next[(0, j)], 1.0 / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn mda_step_degenerate_ball_errors() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let g = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        assert!(matches!(
            mda_step(&w, &g, 0.5, Geometry::EuclideanBall),
            Err(CoirlError::DegenerateStep(_))
        ));
    }

    #[test]
    fn ew_update_is_shift_invariant() {
        let mut rng = rng_from_seed(5);
        for _ in 0..20 {
            let w = DMatrix::from_row_slice(1, 6, &sample_simplex(&mut rng, 6));
            let g = DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-2.0..2.0));
            let shifted = g.map(|x| x + 7.3);
            let a = mda_step(&w, &g, 0.4, Geometry::Simplex).unwrap();
            let b = mda_step(&w, &shifted, 0.4, Geometry::Simplex).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn iterates_stay_in_geometry() {
        let mut rng = rng_from_seed(6);
        let mut w_ball = DMatrix::from_row_slice(1, 4, &[0.5, 0.5, 0.5, 0.5]);
        let mut w_simplex = DMatrix::from_element(1, 4, 0.25);
        for t in 1..100 {
            let g = DMatrix::from_fn(1, 4, |_, _| rng.gen_range(-3.0..3.0));
            w_ball = mda_step(&w_ball, &g, 1.0 / t as f64, Geometry::EuclideanBall).unwrap();
            w_simplex = mda_step(&w_simplex, &g, 1.0 / t as f64, Geometry::Simplex).unwrap();
            assert!(Geometry::EuclideanBall.contains(&w_ball, 1e-9));
            assert!(Geometry::Simplex.contains(&w_simplex, 1e-9));
        }
    }

    #[test]
    fn project_simplex_matches_known_cases() {
        let p = project_simplex(&DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]));
        assert_abs_diff_eq!(p[(0, 0)], 0.2, epsilon = 1e-12);
        let p = project_simplex(&DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 1)], 0.0, epsilon = 1e-12);
        let p = project_simplex(&DMatrix::from_row_slice(1, 2, &[0.8, 0.4]));
        assert_abs_diff_eq!(p[(0, 0)], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 1)], 0.3, epsilon = 1e-12);
    }

    /// A 2-state 2-action CMDP whose true mapping lies on the simplex and
    /// whose optimal policies are unique for the test contexts.
    fn simplex_truth_setup() -> (ContextualMdp, RewardMapping) {
        let k0 = Kernel::new(2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let k1 = Kernel::new(2, 2, vec![0.5, 0.5, 0.25, 0.75, 0.75, 0.25, 0.5, 0.5]).unwrap();
        let features = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let cmdp = ContextualMdp::new(vec![k0, k1], features, vec![0.5, 0.5], 0.8).unwrap();
        let w_star = RewardMapping::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            Geometry::Simplex,
        )
        .unwrap();
        (cmdp, w_star)
    }

    #[test]
    fn run_mda_from_truth_with_exact_demos_stays_put() {
        let (cmdp, w_star) = simplex_truth_setup();
        let expert = Expert::new(cmdp.clone(), w_star.clone(), PlannerConfig::precise());
        let contexts = [
            Context::new(vec![0.2, 0.8]).unwrap(),
            Context::new(vec![0.7, 0.3]).unwrap(),
        ];
        let demos: Vec<_> = contexts
            .iter()
            .map(|c| expert.exact_demonstration(c).unwrap())
            .collect();
        let mut opts = MdaOptions::new(Geometry::Simplex, 20);
        opts.init = Some(w_star.matrix().clone());
        let trace = run_mda(&cmdp, &opts, |t| Ok(vec![demos[t % 2].clone()]), None).unwrap();
        for r in &trace.records {
            assert_eq!(r.grad_norm, 0.0);
        }
        for (a, b) in trace.w_avg.iter().zip(w_star.matrix().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn run_mda_reduces_loss_on_small_grid() {
        let (cmdp, w_star) = crate::env::make_gridworld(&crate::env::GridWorldSpec {
            n: 2,
            m: 2,
            gamma: 0.9,
        })
        .unwrap();
        let expert = Expert::new(cmdp.clone(), w_star, PlannerConfig::precise());
        let mut rng = rng_from_seed(9);
        let holdout: Vec<_> = (0..8)
            .map(|_| {
                expert
                    .exact_demonstration(&crate::env::sample_context(&mut rng, 4).unwrap())
                    .unwrap()
            })
            .collect();
        let mut stream_rng = rng_from_seed(10);
        for geometry in [Geometry::EuclideanBall, Geometry::Simplex] {
            let opts = MdaOptions::new(geometry, 150);
            let trace = run_mda(
                &cmdp,
                &opts,
                |_| {
                    let c = crate::env::sample_context(&mut stream_rng, 4).unwrap();
                    Ok(vec![expert.exact_demonstration(&c).unwrap()])
                },
                None,
            )
            .unwrap();
            let l0 = loss::coirl_loss(
                &cmdp,
                &default_init(geometry, 4, 4),
                &holdout,
                &PlannerConfig::precise(),
            )
            .unwrap()
            .value;
            let l = loss::coirl_loss(&cmdp, &trace.w_avg, &holdout, &PlannerConfig::precise())
                .unwrap()
                .value;
            assert!(
                l < l0 * 0.5 || l < 0.05,
                "{geometry:?}: loss {l} vs initial {l0}"
            );
        }
    }

    #[test]
    fn run_es_zero_loss_start_returns_start() {
        let (cmdp, w_star) = simplex_truth_setup();
        let expert = Expert::new(cmdp.clone(), w_star.clone(), PlannerConfig::precise());
        let demos: Vec<_> = [
            Context::new(vec![0.2, 0.8]).unwrap(),
            Context::new(vec![0.7, 0.3]).unwrap(),
        ]
        .iter()
        .map(|c| expert.exact_demonstration(c).unwrap())
        .collect();
        let es = EsConfig { m: 8, rho: 1e-3, nu: 1e-3, centered: true, rng_seed: 3 };
        let mut opts = EsRunOptions::new(Geometry::Simplex, 10, es);
        opts.init = Some(w_star.matrix().clone());
        opts.accept_only_if_decrease = true;
        let trace = run_es(&cmdp, &demos, &opts, None).unwrap();
        let best = trace.w_best.as_ref().unwrap();
        let l = loss::coirl_loss(&cmdp, best, &demos, &PlannerConfig::precise()).unwrap().value;
        assert!(l.abs() <= 1e-10, "loss of best iterate {l}");
    }
}
