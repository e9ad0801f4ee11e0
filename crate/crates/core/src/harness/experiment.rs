//! Experiment configuration and the seeded experiment runner.
//!
//! A JSON [`ExperimentConfig`] names an environment preset, a learner, a
//! demonstration scheme and seeds. [`run_experiment`] executes every seed
//! (in parallel, with per-seed derived randomness so parallel and serial
//! runs agree), writes one metrics CSV per seed, an aggregate CSV with mean
//! and standard deviation per checkpoint, and a manifest recording the
//! resolved configuration. The `COIRL_SEED` environment variable overrides
//! the configured seeds. All CSV output is UTF-8 with LF line endings;
//! wall-clock columns are the only nondeterministic bytes.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Context, ContextualMdp, Geometry, RewardMapping};
use crate::descent::{self, EvalPoint, MdaOptions, StepSchedule};
use crate::ellipsoid::{self, BatchConfig, EllipsoidRunConfig};
use crate::env;
use crate::error::{CoirlError, Result};
use crate::expert::{Demonstration, Expert, SamplingScheme};
use crate::harness::metrics::{
    evaluate_mapping, evaluate_policy_source, rows_to_csv, AgentPolicy, Holdout, MetricsRow,
};
use crate::loss::EsConfig;
use crate::planner::{self, PlannerConfig};
use crate::rng::{derive_seed, rng_from_seed};

/// Learners addressable from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Psgd,
    Ew,
    Es,
    Ellipsoid,
    BatchEllipsoid,
    AlLarge,
    Mwal,
    Bc,
}

/// Demonstration scheme used for training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DemoSchemeSpec {
    #[default]
    Exact,
    Geometric,
    FixedHorizon {
        #[serde(default = "default_horizon")]
        steps: usize,
    },
}

fn default_horizon() -> usize {
    40
}

/// Learner hyper-parameters with paper-matched defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LearnerParams {
    #[serde(default = "d_es_m")]
    pub es_m: usize,
    #[serde(default = "d_es_rho")]
    pub es_rho: f64,
    #[serde(default = "d_es_nu")]
    pub es_nu: f64,
    #[serde(default = "d_true")]
    pub es_centered: bool,
    #[serde(default = "d_alpha0")]
    pub alpha0: f64,
    #[serde(default = "d_decay")]
    pub decay: f64,
    /// Use the exponential-decay schedule for PSGD/EW instead of the theory
    /// schedule.
    #[serde(default)]
    pub use_decay_schedule: bool,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Batch-ellipsoid batch size; 0 selects the theory value.
    #[serde(default)]
    pub batch_n: usize,
    /// Batch-ellipsoid roll-out length; 0 selects the theory value.
    #[serde(default)]
    pub batch_h: usize,
    #[serde(default = "d_bc_epochs")]
    pub bc_epochs: usize,
    #[serde(default = "d_bc_lr")]
    pub bc_lr0: f64,
    #[serde(default = "d_bc_decay")]
    pub bc_decay: f64,
    #[serde(default = "d_bc_batch")]
    pub bc_batch: usize,
}

fn d_es_m() -> usize {
    500
}
fn d_es_rho() -> f64 {
    1e-3
}
fn d_es_nu() -> f64 {
    1e-3
}
fn d_true() -> bool {
    true
}
fn d_alpha0() -> f64 {
    0.1
}
fn d_decay() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    0.1
}
fn d_delta() -> f64 {
    0.1
}
fn d_bc_epochs() -> usize {
    200
}
fn d_bc_lr() -> f64 {
    0.5
}
fn d_bc_decay() -> f64 {
    0.995
}
fn d_bc_batch() -> usize {
    32
}

impl Default for LearnerParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// A full experiment description; see the module docs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Environment preset (`grid:3x4`, `driving`, `driving:ellipsoid`,
    /// `synth:S,A,d,k,seed`).
    pub env: String,
    pub learner: LearnerKind,
    #[serde(default)]
    pub demo_scheme: DemoSchemeSpec,
    /// Training steps (descent), rounds cap (ellipsoid) or epochs (BC).
    pub steps: usize,
    #[serde(default = "d_one")]
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "d_holdout")]
    pub holdout: usize,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    /// Offline training budget in contexts; 0 draws a fresh context per step.
    #[serde(default)]
    pub train_contexts: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub params: LearnerParams,
    /// Also evaluate on the training contexts (extra CSV).
    #[serde(default)]
    pub eval_train: bool,
    /// Value-iteration tolerance; defaults to 1e-4 (1e-3 for `synth:` envs).
    #[serde(default)]
    pub planner_tol: Option<f64>,
}

fn d_one() -> usize {
    1
}
fn d_holdout() -> usize {
    30
}
fn d_eval_every() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoirlError::Validation("config needs at least one seed".into()));
        }
        if self.steps == 0 {
            return Err(CoirlError::Validation("steps must be positive".into()));
        }
        if self.holdout == 0 {
            return Err(CoirlError::Validation("holdout must be positive".into()));
        }
        env::preset(&self.env).map(|_| ())
    }

    fn planner_cfg(&self) -> PlannerConfig {
        let tol = self.planner_tol.unwrap_or(if self.env.starts_with("synth:") {
            1e-3
        } else {
            1e-4
        });
        PlannerConfig { tol, max_iters: 400_000 }
    }

    fn scheme_for(&self, gamma: f64, seed: u64) -> Result<Option<SamplingScheme>> {
        match self.demo_scheme {
            DemoSchemeSpec::Exact => Ok(None),
            DemoSchemeSpec::Geometric => Ok(Some(SamplingScheme::geometric(seed))),
            DemoSchemeSpec::FixedHorizon { steps } => {
                Ok(Some(SamplingScheme::fixed_horizon_steps(steps, gamma, seed)?))
            }
        }
    }
}

/// Aggregate statistics across seeds at one checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct AggregateRow {
    pub step: usize,
    pub n_demos_mean: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub rel_value_mean: f64,
    pub rel_value_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

pub const AGGREGATE_HEADER: &str =
    "step,n_demos_mean,loss_mean,loss_std,rel_value_mean,rel_value_std,accuracy_mean,accuracy_std";

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.n_demos_mean,
            r.loss_mean,
            r.loss_std,
            r.rel_value_mean,
            r.rel_value_std,
            r.accuracy_mean,
            r.accuracy_std
        ));
    }
    out
}

/// In-memory result of a run: per-seed checkpoint rows plus the aggregate.
pub struct ExperimentOutput {
    pub per_seed: Vec<Vec<MetricsRow>>,
    pub per_seed_train: Vec<Vec<MetricsRow>>,
    pub aggregate: Vec<AggregateRow>,
    pub out_dir: PathBuf,
}

/// Builds aggregate rows by grouping per-seed rows on the step column.
pub fn aggregate_rows(per_seed: &[Vec<MetricsRow>]) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<usize, Vec<&MetricsRow>> = BTreeMap::new();
    for rows in per_seed {
        for row in rows {
            groups.entry(row.step).or_default().push(row);
        }
    }
    let stat = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    groups
        .into_iter()
        .map(|(step, rows)| {
            let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            let rels: Vec<f64> = rows.iter().map(|r| r.rel_value).collect();
            let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let (loss_mean, loss_std) = stat(&losses);
            let (rel_value_mean, rel_value_std) = stat(&rels);
            let (accuracy_mean, accuracy_std) = stat(&accs);
            AggregateRow {
                step,
                n_demos_mean: rows.iter().map(|r| r.n_demos as f64).sum::<f64>()
                    / rows.len() as f64,
                loss_mean,
                loss_std,
                rel_value_mean,
                rel_value_std,
                accuracy_mean,
                accuracy_std,
            }
        })
        .collect()
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config_hash: String,
    config: &'a ExperimentConfig,
    resolved_planner_tol: f64,
    seeds: &'a [u64],
    metric_definitions: MetricNotes,
}

#[derive(Serialize)]
struct MetricNotes {
    rel_value: &'static str,
    accuracy: &'static str,
    loss: &'static str,
}

/// Runs every seed, writes `seed_<s>.csv`, `aggregate.csv` and
/// `manifest.json` under the config's output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let seeds: Vec<u64> = match std::env::var("COIRL_SEED") {
        Ok(text) => {
            let seed = text
                .trim()
                .parse::<u64>()
                .map_err(|e| CoirlError::Validation(format!("bad COIRL_SEED: {e}")))?;
            vec![seed]
        }
        Err(_) => config.seeds.clone(),
    };

    let results: Vec<(Vec<MetricsRow>, Vec<MetricsRow>)> = seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Result<_>>()?;
    let per_seed: Vec<Vec<MetricsRow>> = results.iter().map(|(r, _)| r.clone()).collect();
    let per_seed_train: Vec<Vec<MetricsRow>> = results.iter().map(|(_, r)| r.clone()).collect();
    let aggregate = aggregate_rows(&per_seed);

    std::fs::create_dir_all(&config.out_dir)?;
    for (rows, &seed) in per_seed.iter().zip(&seeds) {
        std::fs::write(config.out_dir.join(format!("seed_{seed}.csv")), rows_to_csv(rows))?;
    }
    if config.eval_train {
        for (rows, &seed) in per_seed_train.iter().zip(&seeds) {
            std::fs::write(
                config.out_dir.join(format!("train_seed_{seed}.csv")),
                rows_to_csv(rows),
            )?;
        }
    }
    std::fs::write(config.out_dir.join("aggregate.csv"), aggregate_to_csv(&aggregate))?;

    let config_json = serde_json::to_string(config)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: format!("{:016x}", fnv1a(&config_json)),
        config,
        resolved_planner_tol: config.planner_cfg().tol,
        seeds: &seeds,
        metric_definitions: MetricNotes {
            rel_value: "per-context (V_agent - V_uniform_random) / (V_optimal - V_uniform_random), clipped to [0,1], averaged; anchor choice is a convention and must be revisited for any exact figure comparison",
            accuracy: "expert-discounted-occupancy-weighted action agreement, averaged over contexts",
            loss: "mean over holdout contexts of f_W(c) . (mu_pihat - mu_expert); NaN for learners without a mapping",
        },
    };
    std::fs::write(
        config.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    Ok(ExperimentOutput { per_seed, per_seed_train, aggregate, out_dir: config.out_dir.clone() })
}

const HOLDOUT_TAG: u64 = 0x686f_6c64;
const TRAIN_TAG: u64 = 0x7472_6169;
const STREAM_TAG: u64 = 0x7374_7265;

struct SeedEnv {
    cmdp: ContextualMdp,
    w_star: RewardMapping,
    expert: Expert,
    holdout: Holdout,
    train: Vec<Context>,
    planner_cfg: PlannerConfig,
}

fn seed_env(config: &ExperimentConfig, seed: u64) -> Result<SeedEnv> {
    let (cmdp, w_star) = env::preset(&config.env)?;
    let planner_cfg = config.planner_cfg();
    let expert = Expert::new(cmdp.clone(), w_star.clone(), planner_cfg);
    let mut holdout_rng = rng_from_seed(derive_seed(seed, HOLDOUT_TAG));
    let holdout_contexts: Vec<Context> = (0..config.holdout)
        .map(|_| env::sample_context(&mut holdout_rng, cmdp.d()))
        .collect::<Result<_>>()?;
    let holdout = Holdout::build(&cmdp, &w_star, &holdout_contexts, &planner_cfg)?;
    let mut train_rng = rng_from_seed(derive_seed(seed, TRAIN_TAG));
    let train: Vec<Context> = (0..config.train_contexts)
        .map(|_| env::sample_context(&mut train_rng, cmdp.d()))
        .collect::<Result<_>>()?;
    Ok(SeedEnv { cmdp, w_star, expert, holdout, train, planner_cfg })
}

fn demo_for(
    config: &ExperimentConfig,
    se: &SeedEnv,
    c: &Context,
    demo_seed: u64,
) -> Result<Demonstration> {
    match config.scheme_for(se.cmdp.gamma(), demo_seed)? {
        None => se.expert.exact_demonstration(c),
        Some(scheme) => se.expert.sample_trajectory(c, &scheme),
    }
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<(Vec<MetricsRow>, Vec<MetricsRow>)> {
    let started = std::time::Instant::now();
    let se = seed_env(config, seed)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut train_rows: Vec<MetricsRow> = Vec::new();

    // Offline mode pre-generates one demonstration per training context.
    let train_demos: Vec<Demonstration> = se
        .train
        .iter()
        .enumerate()
        .map(|(i, c)| demo_for(config, &se, c, derive_seed(seed, 1_000_000 + i as u64)))
        .collect::<Result<_>>()?;

    let train_holdout = if config.eval_train && !se.train.is_empty() {
        Some(Holdout::build(&se.cmdp, &se.w_star, &se.train, &se.planner_cfg)?)
    } else {
        None
    };

    let eval_and_push = |w: &DMatrix<f64>,
                             step: usize,
                             n_demos: usize,
                             rows: &mut Vec<MetricsRow>,
                             train_rows: &mut Vec<MetricsRow>|
     -> Result<EvalPoint> {
        let result = evaluate_mapping(&se.holdout, &se.cmdp, w, &se.planner_cfg)?;
        rows.push(MetricsRow {
            step,
            seed,
            n_demos,
            loss: result.loss,
            rel_value: result.rel_value,
            accuracy: result.accuracy,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(th) = &train_holdout {
            let tr = evaluate_mapping(th, &se.cmdp, w, &se.planner_cfg)?;
            train_rows.push(MetricsRow {
                step,
                seed,
                n_demos,
                loss: tr.loss,
                rel_value: tr.rel_value,
                accuracy: tr.accuracy,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(EvalPoint {
            loss: Some(result.loss),
            rel_value: Some(result.rel_value),
            accuracy: Some(result.accuracy),
        })
    };

    match config.learner {
        LearnerKind::Psgd | LearnerKind::Ew => {
            let geometry = if config.learner == LearnerKind::Psgd {
                Geometry::EuclideanBall
            } else {
                Geometry::Simplex
            };
            let mut opts = MdaOptions::new(geometry, config.steps);
            opts.planner_cfg = se.planner_cfg;
            opts.eval_every = config.eval_every;
            if config.params.use_decay_schedule {
                opts.schedule =
                    StepSchedule::ExpDecay { alpha0: config.params.alpha0, decay: config.params.decay };
            }
            let rows_cell = std::cell::RefCell::new((Vec::new(), Vec::new()));
            let mut stream_rng = rng_from_seed(derive_seed(seed, STREAM_TAG));
            let se_ref = &se;
            let evaluator = |w: &DMatrix<f64>, t: usize| {
                let n_demos = if se_ref.train.is_empty() {
                    t * config.batch_size.max(1)
                } else {
                    se_ref.train.len()
                };
                let mut cell = rows_cell.borrow_mut();
                let (rows, train_rows) = &mut *cell;
                eval_and_push(w, t, n_demos, rows, train_rows)
            };
            descent::run_mda(
                &se.cmdp,
                &opts,
                |t| {
                    if se_ref.train.is_empty() {
                        let c = env::sample_context(&mut stream_rng, se_ref.cmdp.d())?;
                        Ok(vec![demo_for(config, se_ref, &c, derive_seed(seed, t as u64))?])
                    } else {
                        let mut batch = Vec::with_capacity(config.batch_size);
                        for _ in 0..config.batch_size {
                            let idx = stream_rng.gen_range(0..train_demos.len());
                            batch.push(train_demos[idx].clone());
                        }
                        Ok(batch)
                    }
                },
                Some(&evaluator),
            )?;
            let mut cell = rows_cell.borrow_mut();
            rows = std::mem::take(&mut cell.0);
            train_rows = std::mem::take(&mut cell.1);
        }
        LearnerKind::Es => {
            // Online ES: one demonstration per step, loss of that single
            // demonstration drives the finite-difference estimate.
            let geometry = Geometry::EuclideanBall;
            let (d, k) = (se.cmdp.d(), se.cmdp.k());
            let mut w = descent::project(
                &DMatrix::from_element(d, k, 1.0 / ((d * k) as f64).sqrt()),
                geometry,
            )?;
            let mut stream_rng = rng_from_seed(derive_seed(seed, STREAM_TAG));
            for t in 1..=config.steps {
                let demo = if se.train.is_empty() {
                    let c = env::sample_context(&mut stream_rng, d)?;
                    demo_for(config, &se, &c, derive_seed(seed, t as u64))?
                } else {
                    let idx = stream_rng.gen_range(0..train_demos.len());
                    train_demos[idx].clone()
                };
                let demos = [demo];
                let es_cfg = EsConfig {
                    m: config.params.es_m,
                    rho: config.params.es_rho,
                    nu: config.params.es_nu,
                    centered: config.params.es_centered,
                    rng_seed: derive_seed(seed, 2_000_000 + t as u64),
                };
                let mut g = crate::loss::es_gradient(&se.cmdp, &w, &demos, &es_cfg, &se.planner_cfg)?;
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    g /= norm;
                }
                let alpha = config.params.alpha0 * config.params.decay.powi(t as i32 - 1);
                let candidate = descent::project(&(&w - g * alpha), geometry)?;
                let before =
                    crate::loss::coirl_loss(&se.cmdp, &w, &demos, &se.planner_cfg)?.value;
                let after =
                    crate::loss::coirl_loss(&se.cmdp, &candidate, &demos, &se.planner_cfg)?.value;
                if after < before {
                    w = candidate;
                }
                if config.eval_every > 0 && (t % config.eval_every == 0 || t == config.steps) {
                    eval_and_push(&w, t, t, &mut rows, &mut train_rows)?;
                }
            }
        }
        LearnerKind::Ellipsoid => {
            let mut stream_rng = rng_from_seed(derive_seed(seed, STREAM_TAG));
            let d = se.cmdp.d();
            let se_ref = &se;
            let rows_cell = std::cell::RefCell::new(Vec::new());
            let started_ref = &started;
            let on_cut = |w: &DMatrix<f64>| {
                let result =
                    evaluate_mapping(&se_ref.holdout, &se_ref.cmdp, w, &se_ref.planner_cfg)?;
                let mut cell = rows_cell.borrow_mut();
                let n: usize = cell.len() + 1;
                cell.push(MetricsRow {
                    step: n,
                    seed,
                    n_demos: n,
                    loss: result.loss,
                    rel_value: result.rel_value,
                    accuracy: result.accuracy,
                    wall_ms: started_ref.elapsed().as_secs_f64() * 1e3,
                });
                Ok(result.rel_value)
            };
            let cfg = EllipsoidRunConfig {
                eps: config.params.eps,
                max_rounds: config.steps,
                stop_after_clean: 0,
                planner_cfg: se.planner_cfg,
                audit_member: Some(se.w_star.flatten()),
                eval_on_cut: Some(&on_cut),
                stop_when_eval_at_least: None,
            };
            let _ = ellipsoid::run_ellipsoid(
                &se.expert,
                |_| Ok(Some(env::sample_context(&mut stream_rng, d)?)),
                &cfg,
            )?;
            drop(cfg);
            rows = std::mem::take(&mut *rows_cell.borrow_mut());
        }
        LearnerKind::BatchEllipsoid => {
            let (d, k, gamma) = (se.cmdp.d(), se.cmdp.k(), se.cmdp.gamma());
            let h = if config.params.batch_h > 0 {
                config.params.batch_h
            } else {
                BatchConfig::theory_h(k, gamma, config.params.eps)
            };
            let n = if config.params.batch_n > 0 {
                config.params.batch_n
            } else {
                BatchConfig::theory_n(d, k, gamma, config.params.eps, config.params.delta)
            };
            let cfg = BatchConfig {
                eps: config.params.eps,
                delta: config.params.delta,
                h,
                n,
                agent_episode_len: h,
                max_rounds: config.steps,
                stop_after_clean: 0,
                seed: derive_seed(seed, 3),
            };
            let mut stream_rng = rng_from_seed(derive_seed(seed, STREAM_TAG));
            let trace = ellipsoid::run_batch_ellipsoid(
                &se.cmdp,
                &se.w_star,
                |_| Ok(Some(env::sample_context(&mut stream_rng, d)?)),
                &cfg,
                &se.planner_cfg,
            )?;
            let w = trace.state.center_matrix(d, k);
            eval_and_push(&w, trace.rounds, trace.suboptimal_rounds, &mut rows, &mut train_rows)?;
        }
        LearnerKind::AlLarge | LearnerKind::Mwal => {
            let contexts: &[Context] = if se.train.is_empty() {
                return Err(CoirlError::Validation(
                    "large-MDP learners need train_contexts > 0".into(),
                ));
            } else {
                &se.train
            };
            let large = crate::baselines::build_large_mdp(&se.cmdp, contexts)?;
            let w_flat = se.w_star.flatten();
            let mu_e = crate::baselines::large_mdp_expert_mu(&large, &w_flat, &se.planner_cfg)?;
            let (mu_mix, loss) = match config.learner {
                LearnerKind::AlLarge => {
                    let run = crate::baselines::al_projection(
                        &large,
                        &mu_e,
                        config.steps,
                        1e-6,
                        &se.planner_cfg,
                    )?;
                    let d_last = *run.distances.last().unwrap();
                    (run.mixture.feature_expectations(&large.mdp, large.mdp.xi())?, d_last)
                }
                _ => {
                    let run = crate::baselines::mwal(&large, &mu_e, config.steps, &se.planner_cfg)?;
                    (run.mu_mix.clone(), -run.value_gap)
                }
            };
            // Value of the mixture under the true reward on the stacked MDP,
            // normalized by the stacked optimal and uniform-random values.
            let v_mix = w_flat.dot(&mu_mix);
            let v_star = w_flat.dot(&mu_e);
            let uniform = DMatrix::from_element(
                large.n_states(),
                large.mdp.n_actions(),
                1.0 / large.mdp.n_actions() as f64,
            );
            let reward = DVector::from_fn(large.n_states(), |s, _| {
                (0..w_flat.len()).map(|j| w_flat[j] * large.mdp.features()[(s, j)]).sum()
            });
            let rewarded = large.mdp.with_reward(reward);
            let v_rand_states = planner::stochastic_policy_state_values(&rewarded, &uniform)?;
            let v_rand: f64 =
                rewarded.xi().iter().zip(v_rand_states.iter()).map(|(w, v)| w * v).sum();
            let rel = if (v_star - v_rand).abs() < 1e-12 {
                0.0
            } else {
                ((v_mix - v_rand) / (v_star - v_rand)).clamp(0.0, 1.0)
            };
            rows.push(MetricsRow {
                step: config.steps,
                seed,
                n_demos: contexts.len(),
                loss,
                rel_value: rel,
                accuracy: f64::NAN,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        LearnerKind::Bc => {
            if train_demos.is_empty() {
                return Err(CoirlError::Validation("bc needs train_contexts > 0".into()));
            }
            let data = crate::baselines::bc_dataset_from_demos(&se.cmdp, &train_demos)?;
            let model = crate::baselines::bc_train(
                &data,
                &crate::baselines::BcTrainConfig {
                    epochs: config.params.bc_epochs,
                    batch_size: config.params.bc_batch,
                    lr0: config.params.bc_lr0,
                    decay: config.params.bc_decay,
                    seed: derive_seed(seed, 4),
                },
            )?;
            let source = |c: &Context| Ok(AgentPolicy::Det(model.greedy_policy(&se.cmdp, c)?));
            let result = evaluate_policy_source(&se.holdout, &source, None)?;
            rows.push(MetricsRow {
                step: config.params.bc_epochs,
                seed,
                n_demos: se.train.len(),
                loss: f64::NAN,
                rel_value: result.rel_value,
                accuracy: result.accuracy,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            if let Some(th) = &train_holdout {
                let tr = evaluate_policy_source(th, &source, None)?;
                train_rows.push(MetricsRow {
                    step: config.params.bc_epochs,
                    seed,
                    n_demos: se.train.len(),
                    loss: f64::NAN,
                    rel_value: tr.rel_value,
                    accuracy: tr.accuracy,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
            }
        }
    }
    Ok((rows, train_rows))
}

/// Per-iteration planning wall time of projection apprenticeship on the
/// stacked MDP versus a contextual subgradient step, for a sweep of context
/// counts. Returns `(context_count, al_median_ms, coirl_median_ms)` rows.
pub fn bench_al_vs_coirl(
    cmdp: &ContextualMdp,
    w_star: &RewardMapping,
    context_counts: &[usize],
    iterations: usize,
    seed: u64,
    planner_cfg: &PlannerConfig,
) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::new();
    let expert = Expert::new(cmdp.clone(), w_star.clone(), *planner_cfg);
    for &count in context_counts {
        let mut rng = rng_from_seed(derive_seed(seed, count as u64));
        let contexts: Vec<Context> = (0..count)
            .map(|_| env::sample_context(&mut rng, cmdp.d()))
            .collect::<Result<_>>()?;
        let large = crate::baselines::build_large_mdp(cmdp, &contexts)?;
        let mu_e = crate::baselines::large_mdp_expert_mu(&large, &w_star.flatten(), planner_cfg)?;

        // One projection iteration: plan a best response on the stacked MDP
        // and evaluate its feature expectations.
        let mut al_times = Vec::with_capacity(iterations);
        let mut mu_bar = large.mu(&large.plan(&DVector::zeros(mu_e.len()), planner_cfg)?)?;
        for _ in 0..iterations {
            let t0 = std::time::Instant::now();
            let w = &mu_e - &mu_bar;
            let policy = large.plan(&w, planner_cfg)?;
            let mu_t = large.mu(&policy)?;
            al_times.push(t0.elapsed().as_secs_f64() * 1e3);
            let dir = &mu_t - &mu_bar;
            let denom = dir.dot(&dir);
            if denom > 0.0 {
                let lambda = (dir.dot(&(&mu_e - &mu_bar)) / denom).clamp(0.0, 1.0);
                mu_bar += dir * lambda;
            }
        }

        // One contextual subgradient step: plan on the base MDP only.
        let mut w = DMatrix::zeros(cmdp.d(), cmdp.k());
        let constants =
            descent::theory_constants(cmdp.d(), cmdp.k(), cmdp.gamma(), Geometry::EuclideanBall)?;
        let mut coirl_times = Vec::with_capacity(iterations);
        for t in 1..=iterations {
            let c = &contexts[t % contexts.len()];
            let demo = expert.exact_demonstration(c)?;
            let t0 = std::time::Instant::now();
            let g = crate::loss::subgradient(cmdp, &w, std::slice::from_ref(&demo), planner_cfg)?;
            coirl_times.push(t0.elapsed().as_secs_f64() * 1e3);
            w = descent::mda_step(&w, &g, constants.alpha(t), Geometry::EuclideanBall)
                .unwrap_or(w);
        }

        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        out.push((count, median(al_times), median(coirl_times)));
    }
    Ok(out)
}

use rand::Rng;
