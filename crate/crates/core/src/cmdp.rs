//! The contextual MDP data model.
//!
//! A [`ContextualMdp`] holds `d` base transition kernels, per-state features
//! and a discount factor. A [`Context`] on the `d-1` simplex selects a
//! concrete [`InstantiatedMdp`] whose kernel is the convex combination of the
//! base kernels and whose reward is `(c^T W) . phi(s)` for a
//! [`RewardMapping`] `W`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoirlError, Result};

/// Tolerance for simplex / row-stochasticity checks. Inputs inside the
/// tolerance are renormalized on construction; anything further off is
/// rejected.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Dense transition kernel with a per-row sparse index for the planner's hot
/// loops. Storage is row-major `[state][action][next_state]` behind an `Arc`
/// so per-context instantiations of context-independent dynamics are O(1).
#[derive(Debug, Clone)]
pub struct Kernel {
    n_states: usize,
    n_actions: usize,
    data: Arc<Vec<f64>>,
    /// For each (s, a): the nonzero (next_state, probability) pairs.
    sparse: Arc<Vec<Vec<(usize, f64)>>>,
}

impl Kernel {
    /// Builds a kernel from row-major data, validating and renormalizing
    /// each row.
    pub fn new(n_states: usize, n_actions: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != n_states * n_actions * n_states {
            return Err(CoirlError::InvalidArgument(format!(
                "kernel data length {} does not match {}x{}x{}",
                data.len(),
                n_states,
                n_actions,
                n_states
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let off = (s * n_actions + a) * n_states;
                let row = &mut data[off..off + n_states];
                let mut sum = 0.0;
                for &p in row.iter() {
                    if !(p >= 0.0) {
                        return Err(CoirlError::InvalidArgument(format!(
                            "kernel row ({s},{a}) has negative entry {p}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(CoirlError::InvalidArgument(format!(
                        "kernel row ({s},{a}) sums to {sum}, not 1"
                    )));
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
        }
        let sparse = Self::index(n_states, n_actions, &data);
        Ok(Self {
            n_states,
            n_actions,
            data: Arc::new(data),
            sparse: Arc::new(sparse),
        })
    }

    fn index(n_states: usize, n_actions: usize, data: &[f64]) -> Vec<Vec<(usize, f64)>> {
        let mut sparse = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let off = (s * n_actions + a) * n_states;
                let row: Vec<(usize, f64)> = data[off..off + n_states]
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(j, &p)| (j, p))
                    .collect();
                sparse.push(row);
            }
        }
        sparse
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Probability of moving to `next` from `(s, a)`.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.data[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Dense row for `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.data[off..off + self.n_states]
    }

    /// Nonzero entries of the `(s, a)` row.
    pub fn sparse_row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.sparse[s * self.n_actions + a]
    }

    /// Max absolute entry-wise difference against another kernel.
    pub fn max_abs_diff(&self, other: &Kernel) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Constraint-set geometry for a reward mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// `||W||_2 <= 1` on the flattened matrix.
    EuclideanBall,
    /// Entries nonnegative and summing to one.
    Simplex,
    /// `||W||_inf <= 1`.
    LinfBox,
}

impl Geometry {
    /// Signed violation of the geometry constraint (<= 0 means member).
    pub fn violation(&self, w: &DMatrix<f64>) -> f64 {
        match self {
            Geometry::EuclideanBall => w.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0,
            Geometry::Simplex => {
                let neg = w.iter().fold(0.0f64, |m, &x| m.max(-x));
                let sum: f64 = w.iter().sum();
                neg.max((sum - 1.0).abs())
            }
            Geometry::LinfBox => w.iter().fold(0.0f64, |m, &x| m.max(x.abs())) - 1.0,
        }
    }

    pub fn contains(&self, w: &DMatrix<f64>, tol: f64) -> bool {
        self.violation(w) <= tol
    }
}

/// The `d x k` mapping from contexts to reward weights, constrained to a
/// declared geometry.
#[derive(Debug, Clone)]
pub struct RewardMapping {
    w: DMatrix<f64>,
    geometry: Geometry,
}

impl RewardMapping {
    /// Validates membership within `1e-9`; inputs inside the tolerance are
    /// snapped back onto the set.
    pub fn new(w: DMatrix<f64>, geometry: Geometry) -> Result<Self> {
        if geometry.violation(&w) > STOCHASTIC_TOL {
            return Err(CoirlError::InvalidArgument(format!(
                "W violates {:?} geometry by {:.3e}",
                geometry,
                geometry.violation(&w)
            )));
        }
        let mut w = w;
        match geometry {
            Geometry::EuclideanBall => {
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1.0 {
                    w /= norm;
                }
            }
            Geometry::Simplex => {
                for x in w.iter_mut() {
                    *x = x.max(0.0);
                }
                let sum: f64 = w.iter().sum();
                w /= sum;
            }
            Geometry::LinfBox => {
                for x in w.iter_mut() {
                    *x = x.clamp(-1.0, 1.0);
                }
            }
        }
        Ok(Self { w, geometry })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    /// Row-major flattening of `W` into `R^{dk}`.
    pub fn flatten(&self) -> DVector<f64> {
        flatten_matrix(&self.w)
    }

    /// Reward weight vector `f_W(c) = c^T W` for a context.
    pub fn reward_weights(&self, c: &Context) -> Result<DVector<f64>> {
        if c.dim() != self.d() {
            return Err(CoirlError::InvalidArgument(format!(
                "context dimension {} does not match mapping d={}",
                c.dim(),
                self.d()
            )));
        }
        let mut out = DVector::zeros(self.k());
        for j in 0..self.k() {
            let mut acc = 0.0;
            for i in 0..self.d() {
                acc += c.weights()[i] * self.w[(i, j)];
            }
            out[j] = acc;
        }
        Ok(out)
    }
}

/// Row-major flattening `R^{d x k} -> R^{dk}`.
pub fn flatten_matrix(w: &DMatrix<f64>) -> DVector<f64> {
    let (d, k) = (w.nrows(), w.ncols());
    let mut v = DVector::zeros(d * k);
    for i in 0..d {
        for j in 0..k {
            v[i * k + j] = w[(i, j)];
        }
    }
    v
}

/// Inverse of [`flatten_matrix`].
pub fn unflatten_vector(v: &DVector<f64>, d: usize, k: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), d * k, "flattened length mismatch");
    DMatrix::from_fn(d, k, |i, j| v[i * k + j])
}

/// Flattened outer product: `result[i*k + j] = u[i] * v[j]`.
pub fn outer_flatten(u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let (d, k) = (u.len(), v.len());
    let mut out = DVector::zeros(d * k);
    for i in 0..d {
        let ui = u[i];
        for j in 0..k {
            out[i * k + j] = ui * v[j];
        }
    }
    out
}

/// A point on the standard `d-1` simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    c: Vec<f64>,
}

impl Context {
    /// Validates nonnegativity and unit sum within `1e-9`, renormalizing.
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() {
            return Err(CoirlError::InvalidContext("empty context".into()));
        }
        let mut sum = 0.0;
        for &x in &c {
            if x < -STOCHASTIC_TOL || !x.is_finite() {
                return Err(CoirlError::InvalidContext(format!(
                    "context entry {x} is negative or non-finite"
                )));
            }
            sum += x;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(CoirlError::InvalidContext(format!(
                "context sums to {sum}, not 1"
            )));
        }
        let c = c.into_iter().map(|x| x.max(0.0) / sum).collect();
        Ok(Self { c })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.c
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.c)
    }

    /// `||c - other||_inf`.
    pub fn linf_distance(&self, other: &Context) -> f64 {
        self.c
            .iter()
            .zip(&other.c)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stable hash of the raw float bits, used as a cache key.
    pub fn bit_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &x in &self.c {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// A contextual MDP: `d` base kernels, state features, initial distribution
/// and discount. Immutable after construction; validation happens once.
#[derive(Debug, Clone)]
pub struct ContextualMdp {
    n_states: usize,
    n_actions: usize,
    d: usize,
    k: usize,
    base_kernels: Vec<Kernel>,
    features: Arc<DMatrix<f64>>,
    xi: Arc<Vec<f64>>,
    gamma: f64,
    context_independent: bool,
}

impl ContextualMdp {
    pub fn new(
        base_kernels: Vec<Kernel>,
        features: DMatrix<f64>,
        xi: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if base_kernels.is_empty() {
            return Err(CoirlError::InvalidArgument("need at least one base kernel".into()));
        }
        let n_states = base_kernels[0].n_states();
        let n_actions = base_kernels[0].n_actions();
        if n_states == 0 || n_actions == 0 {
            return Err(CoirlError::InvalidArgument("empty state or action space".into()));
        }
        for kern in &base_kernels {
            if kern.n_states() != n_states || kern.n_actions() != n_actions {
                return Err(CoirlError::InvalidArgument(
                    "base kernels disagree on state/action counts".into(),
                ));
            }
        }
        if features.nrows() != n_states {
            return Err(CoirlError::InvalidArgument(format!(
                "features have {} rows for {} states",
                features.nrows(),
                n_states
            )));
        }
        // The model keeps features in [0, 1]; [-1, 1] is accepted for the
        // environments that flag terminal states with negative values.
        for &x in features.iter() {
            if !(-1.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(CoirlError::InvalidArgument(format!(
                    "feature value {x} outside [-1, 1]"
                )));
            }
        }
        if xi.len() != n_states {
            return Err(CoirlError::InvalidArgument("xi length mismatch".into()));
        }
        let xi_sum: f64 = xi.iter().sum();
        if (xi_sum - 1.0).abs() > STOCHASTIC_TOL || xi.iter().any(|&p| p < 0.0) {
            return Err(CoirlError::InvalidArgument(format!(
                "xi is not a distribution (sum {xi_sum})"
            )));
        }
        let xi: Vec<f64> = xi.into_iter().map(|p| p / xi_sum).collect();
        if !(0.0..1.0).contains(&gamma) {
            return Err(CoirlError::InvalidArgument(format!(
                "gamma {gamma} outside [0, 1)"
            )));
        }
        let d = base_kernels.len();
        let context_independent = d == 1
            || base_kernels[1..]
                .iter()
                .all(|kern| kern.max_abs_diff(&base_kernels[0]) <= 1e-15);
        Ok(Self {
            n_states,
            n_actions,
            d,
            k: features.ncols(),
            base_kernels,
            features: Arc::new(features),
            xi: Arc::new(xi),
            gamma,
            context_independent,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_row(&self, s: usize) -> DVector<f64> {
        self.features.row(s).transpose()
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn base_kernels(&self) -> &[Kernel] {
        &self.base_kernels
    }

    /// True when all base kernels coincide, so the dynamics do not depend on
    /// the context.
    pub fn context_independent_dynamics(&self) -> bool {
        self.context_independent
    }

    /// Mixes the base kernels with the context weights.
    fn mixed_kernel(&self, c: &Context) -> Result<Kernel> {
        if self.context_independent {
            return Ok(self.base_kernels[0].clone());
        }
        let len = self.n_states * self.n_actions * self.n_states;
        let mut data = vec![0.0; len];
        for (i, kern) in self.base_kernels.iter().enumerate() {
            let w = c.weights()[i];
            if w == 0.0 {
                continue;
            }
            for (dst, &src) in data.iter_mut().zip(kern.raw().iter()) {
                *dst += w * src;
            }
        }
        Kernel::new(self.n_states, self.n_actions, data)
    }

    /// Builds the concrete MDP for context `c` under reward mapping `w`.
    pub fn instantiate(&self, c: &Context, w: &RewardMapping) -> Result<InstantiatedMdp> {
        if c.dim() != self.d {
            return Err(CoirlError::InvalidArgument(format!(
                "context dimension {} does not match d={}",
                c.dim(),
                self.d
            )));
        }
        if w.d() != self.d || w.k() != self.k {
            return Err(CoirlError::InvalidArgument(format!(
                "mapping is {}x{}, expected {}x{}",
                w.d(),
                w.k(),
                self.d,
                self.k
            )));
        }
        let weights = w.reward_weights(c)?;
        self.instantiate_with_reward_weights(c, &weights)
    }

    /// Same as [`instantiate`](Self::instantiate) but with an explicit reward
    /// weight vector (used when the weights are not drawn from a constrained
    /// mapping, e.g. evolution-strategies perturbations).
    pub fn instantiate_with_reward_weights(
        &self,
        c: &Context,
        weights: &DVector<f64>,
    ) -> Result<InstantiatedMdp> {
        if weights.len() != self.k {
            return Err(CoirlError::InvalidArgument(format!(
                "reward weight length {} does not match k={}",
                weights.len(),
                self.k
            )));
        }
        let kernel = self.mixed_kernel(c)?;
        let reward = DVector::from_fn(self.n_states, |s, _| {
            let mut acc = 0.0;
            for j in 0..self.k {
                acc += weights[j] * self.features[(s, j)];
            }
            acc
        });
        Ok(InstantiatedMdp {
            kernel,
            reward,
            features: Arc::clone(&self.features),
            xi: Arc::clone(&self.xi),
            gamma: self.gamma,
        })
    }
}

/// A concrete MDP produced by fixing a context and a reward mapping.
#[derive(Debug, Clone)]
pub struct InstantiatedMdp {
    pub kernel: Kernel,
    pub reward: DVector<f64>,
    features: Arc<DMatrix<f64>>,
    xi: Arc<Vec<f64>>,
    pub gamma: f64,
}

impl InstantiatedMdp {
    /// Builds a standalone MDP (used for the stacked large-MDP baseline).
    pub fn from_parts(
        kernel: Kernel,
        reward: DVector<f64>,
        features: DMatrix<f64>,
        xi: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if reward.len() != kernel.n_states() || features.nrows() != kernel.n_states() {
            return Err(CoirlError::InvalidArgument("reward/feature length mismatch".into()));
        }
        let sum: f64 = xi.iter().sum();
        if xi.len() != kernel.n_states() || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(CoirlError::InvalidArgument("xi is not a distribution".into()));
        }
        Ok(Self {
            kernel,
            reward,
            features: Arc::new(features),
            xi: Arc::new(xi),
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.kernel.n_actions()
    }

    pub fn k(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    /// Replaces the reward vector, keeping dynamics and features.
    pub fn with_reward(&self, reward: DVector<f64>) -> Self {
        Self {
            kernel: self.kernel.clone(),
            reward,
            features: Arc::clone(&self.features),
            xi: Arc::clone(&self.xi),
            gamma: self.gamma,
        }
    }
}

// --- serialization ---------------------------------------------------------

/// On-disk form of a contextual MDP, optionally bundling the true mapping.
#[derive(Serialize, Deserialize)]
struct CmdpDocument {
    n_states: usize,
    n_actions: usize,
    d: usize,
    k: usize,
    gamma: f64,
    /// Row-major `n_states x k`.
    features: Vec<f64>,
    /// `d` kernels, each row-major `n_states x n_actions x n_states`.
    base_kernels: Vec<Vec<f64>>,
    xi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<Geometry>,
}

/// Serializes a CMDP (and optionally its true mapping) to a single JSON
/// document. Floats round-trip exactly.
pub fn cmdp_to_json(cmdp: &ContextualMdp, w_star: Option<&RewardMapping>) -> Result<String> {
    let features: Vec<f64> = (0..cmdp.n_states)
        .flat_map(|s| (0..cmdp.k).map(move |j| cmdp.features[(s, j)]))
        .collect();
    let doc = CmdpDocument {
        n_states: cmdp.n_states,
        n_actions: cmdp.n_actions,
        d: cmdp.d,
        k: cmdp.k,
        gamma: cmdp.gamma,
        features,
        base_kernels: cmdp.base_kernels.iter().map(|k| k.raw().to_vec()).collect(),
        xi: cmdp.xi.to_vec(),
        w_star: w_star.map(|w| w.flatten().iter().copied().collect()),
        geometry: w_star.map(|w| w.geometry()),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses the JSON document produced by [`cmdp_to_json`].
pub fn cmdp_from_json(text: &str) -> Result<(ContextualMdp, Option<RewardMapping>)> {
    let doc: CmdpDocument = serde_json::from_str(text)?;
    if doc.base_kernels.len() != doc.d {
        return Err(CoirlError::Validation(format!(
            "document declares d={} but carries {} kernels",
            doc.d,
            doc.base_kernels.len()
        )));
    }
    if doc.features.len() != doc.n_states * doc.k {
        return Err(CoirlError::Validation("feature array length mismatch".into()));
    }
    let kernels = doc
        .base_kernels
        .into_iter()
        .map(|data| Kernel::new(doc.n_states, doc.n_actions, data))
        .collect::<Result<Vec<_>>>()?;
    let features = DMatrix::from_fn(doc.n_states, doc.k, |s, j| doc.features[s * doc.k + j]);
    let cmdp = ContextualMdp::new(kernels, features, doc.xi, doc.gamma)?;
    let w_star = match (doc.w_star, doc.geometry) {
        (Some(flat), Some(geom)) => {
            if flat.len() != doc.d * doc.k {
                return Err(CoirlError::Validation("w_star length mismatch".into()));
            }
            let v = DVector::from_column_slice(&flat);
            Some(RewardMapping::new(unflatten_vector(&v, doc.d, doc.k), geom)?)
        }
        (Some(_), None) => {
            return Err(CoirlError::Validation("w_star present without geometry".into()))
        }
        _ => None,
    };
    Ok((cmdp, w_star))
}
