//! Option discovery from demonstrations by maximum likelihood.
//!
//! The generative model behind a demonstration: at each step the previously
//! active option may terminate (the null token `⊥` always does); on
//! termination a task-specific high-level policy `π_H` picks a new option or
//! `⊥`; the active controller then emits the action. `⊥` emits through a
//! task-specific primitive policy `π_⊥`. Both task-specific policies are
//! softmax layers over one-hot ground states, while the `K` options are shared
//! across tasks and see only abstract features.
//!
//! Latent options are inferred with a scaled forward-backward pass, and the
//! parameters follow the gradient of the log-likelihood (expected complete-data
//! log-likelihood under the current posteriors) with Adam.
//!
//! Environment transition probabilities are left out of every likelihood: they
//! do not depend on the parameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::opsr::{pca_reduce, OpsrVariant};
use crate::options::{sample_categorical, softmax, FeatureKind, FeatureMap, FeatureTable, OptionDef, TaskView};

/// A demonstration: `states` has one more entry than `actions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len() {
            return Err(Error::Dimension(format!(
                "trajectory of task {} has {} states, {} actions, {} rewards",
                self.task_id,
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        Ok(())
    }
}

/// Task-specific softmax layers over one-hot ground states (no bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPolicies {
    pub task_id: String,
    /// `K + 1` rows of per-state weights; the last row is `⊥`.
    pub w_high: Vec<Vec<f64>>,
    /// `n_actions` rows of per-state weights for `π_⊥`.
    pub w_null: Vec<Vec<f64>>,
}

/// The `K` discovered options plus the null token and per-task policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedOptionSet {
    pub n_actions: usize,
    pub features: FeatureMap,
    pub options: Vec<OptionDef>,
    pub tasks: Vec<TaskPolicies>,
}

impl ExtendedOptionSet {
    pub fn k(&self) -> usize {
        self.options.len()
    }

    /// Index of the null token among `0..=K`.
    pub fn null_token(&self) -> usize {
        self.options.len()
    }
}

/// Offsets of every parameter block inside one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub k: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    pub task_states: Vec<usize>,
    option_base: usize,
    task_bases: Vec<usize>,
    len: usize,
}

impl ParamLayout {
    pub fn new(k: usize, n_actions: usize, feature_dim: usize, task_states: Vec<usize>) -> Self {
        let per_option = n_actions * feature_dim + n_actions + 2 * feature_dim + 2;
        let option_base = 0;
        let mut at = k * per_option;
        let mut task_bases = Vec::with_capacity(task_states.len());
        for &n in &task_states {
            task_bases.push(at);
            at += (k + 1) * n + n_actions * n;
        }
        ParamLayout { k, n_actions, feature_dim, task_states, option_base, task_bases, len: at }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn per_option(&self) -> usize {
        self.n_actions * self.feature_dim + self.n_actions + 2 * self.feature_dim + 2
    }

    /// `W_pi[a][i]`.
    fn w_pi(&self, o: usize, a: usize, i: usize) -> usize {
        self.option_base + o * self.per_option() + a * self.feature_dim + i
    }

    fn b_pi(&self, o: usize, a: usize) -> usize {
        self.option_base + o * self.per_option() + self.n_actions * self.feature_dim + a
    }

    /// `W_beta[row][i]`, row 0 = continue, 1 = terminate.
    fn w_beta(&self, o: usize, row: usize, i: usize) -> usize {
        self.option_base + o * self.per_option() + self.n_actions * (self.feature_dim + 1) + row * self.feature_dim + i
    }

    fn b_beta(&self, o: usize, row: usize) -> usize {
        self.option_base + o * self.per_option() + self.n_actions * (self.feature_dim + 1) + 2 * self.feature_dim + row
    }

    fn w_high(&self, j: usize, w: usize, s: usize) -> usize {
        self.task_bases[j] + w * self.task_states[j] + s
    }

    fn w_null(&self, j: usize, a: usize, s: usize) -> usize {
        self.task_bases[j] + (self.k + 1 + a) * self.task_states[j] + s
    }
}

/// Flat parameters together with the per-task feature tables they act on.
#[derive(Debug, Clone)]
pub struct DiscoveryModel {
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub features: FeatureMap,
    pub tables: Vec<FeatureTable>,
    pub task_ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl DiscoveryModel {
    /// Model with all parameters zero.
    pub fn zeros(k: usize, n_actions: usize, features: FeatureMap, tables: Vec<FeatureTable>, task_ids: Vec<String>) -> Result<Self> {
        if tables.len() != task_ids.len() {
            return Err(Error::Dimension("one feature table per task is required".into()));
        }
        let dim = tables.first().map_or(0, FeatureTable::dim);
        if tables.iter().any(|t| t.dim() != dim) {
            return Err(Error::Dimension("feature tables disagree on dimension".into()));
        }
        let layout = ParamLayout::new(k, n_actions, dim, tables.iter().map(FeatureTable::n_states).collect());
        let index = task_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect::<BTreeMap<_, _>>();
        if index.len() != task_ids.len() {
            return Err(Error::Config("task ids must be unique".into()));
        }
        Ok(DiscoveryModel { params: vec![0.0; layout.len()], layout, features, tables, task_ids, index })
    }

    /// Model with parameters drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(mut self, scale: f64, rng: &mut R) -> Self {
        self.params.iter_mut().for_each(|p| *p = rng.random_range(-scale..=scale));
        self
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn null_token(&self) -> usize {
        self.layout.k
    }

    pub fn task_index(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::Config(format!("no task with id `{id}`")))
    }

    /// `π_H(· | s)` over `K + 1` tokens.
    pub fn high_dist(&self, j: usize, s: usize) -> Vec<f64> {
        let l = &self.layout;
        let logits: Vec<f64> = (0..=l.k).map(|w| self.params[l.w_high(j, w, s)]).collect();
        softmax(&logits)
    }

    /// Action distribution of token `w` in state `s` of task `j`.
    pub fn action_dist(&self, j: usize, w: usize, s: usize) -> Vec<f64> {
        let l = &self.layout;
        let logits: Vec<f64> = if w == l.k {
            (0..l.n_actions).map(|a| self.params[l.w_null(j, a, s)]).collect()
        } else {
            let x = self.tables[j].row(s);
            (0..l.n_actions)
                .map(|a| self.params[l.b_pi(w, a)] + x.iter().enumerate().map(|(i, xi)| self.params[l.w_pi(w, a, i)] * xi).sum::<f64>())
                .collect()
        };
        softmax(&logits)
    }

    /// Termination probability of token `w`; always 1 for `⊥`.
    pub fn termination(&self, j: usize, w: usize, s: usize) -> f64 {
        let l = &self.layout;
        if w == l.k {
            return 1.0;
        }
        let x = self.tables[j].row(s);
        let z = |row: usize| {
            self.params[l.b_beta(w, row)] + x.iter().enumerate().map(|(i, xi)| self.params[l.w_beta(w, row, i)] * xi).sum::<f64>()
        };
        softmax(&[z(0), z(1)])[1]
    }

    pub fn to_set(&self) -> ExtendedOptionSet {
        let l = &self.layout;
        let p = &self.params;
        let f = l.feature_dim;
        let options = (0..l.k)
            .map(|o| OptionDef {
                features: self.features.clone(),
                w_pi: (0..l.n_actions).map(|a| (0..f).map(|i| p[l.w_pi(o, a, i)]).collect()).collect(),
                b_pi: (0..l.n_actions).map(|a| p[l.b_pi(o, a)]).collect(),
                w_beta: [(0..f).map(|i| p[l.w_beta(o, 0, i)]).collect(), (0..f).map(|i| p[l.w_beta(o, 1, i)]).collect()],
                b_beta: [p[l.b_beta(o, 0)], p[l.b_beta(o, 1)]],
            })
            .collect();
        let tasks = (0..self.tables.len())
            .map(|j| {
                let n = l.task_states[j];
                TaskPolicies {
                    task_id: self.task_ids[j].clone(),
                    w_high: (0..=l.k).map(|w| (0..n).map(|s| p[l.w_high(j, w, s)]).collect()).collect(),
                    w_null: (0..l.n_actions).map(|a| (0..n).map(|s| p[l.w_null(j, a, s)]).collect()).collect(),
                }
            })
            .collect();
        ExtendedOptionSet { n_actions: l.n_actions, features: self.features.clone(), options, tasks }
    }

    /// Rebuilds a model from a serialised set and freshly computed feature tables.
    pub fn from_set(set: &ExtendedOptionSet, tables: Vec<FeatureTable>) -> Result<Self> {
        let ids = set.tasks.iter().map(|t| t.task_id.clone()).collect();
        let mut m = DiscoveryModel::zeros(set.k(), set.n_actions, set.features.clone(), tables, ids)?;
        let l = m.layout.clone();
        for (o, opt) in set.options.iter().enumerate() {
            opt.validate()?;
            if opt.feature_dim() != l.feature_dim || opt.n_actions() != l.n_actions {
                return Err(Error::Dimension(format!("option {o} does not match the feature tables")));
            }
            for a in 0..l.n_actions {
                for i in 0..l.feature_dim {
                    m.params[l.w_pi(o, a, i)] = opt.w_pi[a][i];
                }
                m.params[l.b_pi(o, a)] = opt.b_pi[a];
            }
            for row in 0..2 {
                for i in 0..l.feature_dim {
                    m.params[l.w_beta(o, row, i)] = opt.w_beta[row][i];
                }
                m.params[l.b_beta(o, row)] = opt.b_beta[row];
            }
        }
        for (j, t) in set.tasks.iter().enumerate() {
            let n = l.task_states[j];
            let shape_ok = t.w_high.len() == l.k + 1
                && t.w_high.iter().all(|r| r.len() == n)
                && t.w_null.len() == l.n_actions
                && t.w_null.iter().all(|r| r.len() == n);
            if !shape_ok {
                return Err(Error::Dimension(format!("policies of task {} have the wrong shape", t.task_id)));
            }
            for w in 0..=l.k {
                for s in 0..n {
                    m.params[l.w_high(j, w, s)] = t.w_high[w][s];
                }
            }
            for a in 0..l.n_actions {
                for s in 0..n {
                    m.params[l.w_null(j, a, s)] = t.w_null[a][s];
                }
            }
        }
        Ok(m)
    }
}

/// `Pr(ω_t = next | ω_{t-1} = prev, s_t = s)`.
pub fn option_transition_prob(model: &DiscoveryModel, task: usize, prev: usize, next: usize, s: usize) -> f64 {
    let h = model.high_dist(task, s)[next];
    if prev == model.null_token() {
        return h;
    }
    let beta = model.termination(task, prev, s);
    (1.0 - beta) * f64::from(u8::from(prev == next)) + beta * h
}

/// Posterior quantities of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `u[t][ω] = Pr(ω_t = ω | τ)`.
    pub u: Vec<Vec<f64>>,
    /// `v[t][prev * (K + 1) + next] = Pr(ω_t = prev, ω_{t+1} = next | τ)`, for `t < T - 1`.
    pub v: Vec<Vec<f64>>,
    pub log_z: f64,
}

/// Per-step quantities shared by the forward-backward pass and the gradient.
struct StepCache {
    high: Vec<f64>,
    emit: Vec<f64>,
    beta: Vec<f64>,
    action_dists: Vec<Vec<f64>>,
}

fn step_caches(model: &DiscoveryModel, task: usize, tau: &Trajectory) -> Vec<StepCache> {
    let k1 = model.k() + 1;
    (0..tau.len())
        .map(|t| {
            let s = tau.states[t];
            let action_dists: Vec<Vec<f64>> = (0..k1).map(|w| model.action_dist(task, w, s)).collect();
            StepCache {
                high: model.high_dist(task, s),
                emit: action_dists.iter().map(|d| d[tau.actions[t]]).collect(),
                beta: (0..k1).map(|w| model.termination(task, w, s)).collect(),
                action_dists,
            }
        })
        .collect()
}

fn transition(c: &StepCache, prev: usize, next: usize) -> f64 {
    let b = c.beta[prev];
    (1.0 - b) * f64::from(u8::from(prev == next)) + b * c.high[next]
}

fn check_trace(model: &DiscoveryModel, tau: &Trajectory) -> Result<usize> {
    tau.validate()?;
    let j = model.task_index(&tau.task_id)?;
    let n = model.layout.task_states[j];
    if let Some(&s) = tau.states.iter().find(|&&s| s >= n) {
        return Err(Error::Index(format!("state {s} out of range for task {}", tau.task_id)));
    }
    if let Some(&a) = tau.actions.iter().find(|&&a| a >= model.layout.n_actions) {
        return Err(Error::Index(format!("action {a} out of range")));
    }
    Ok(j)
}

/// Scaled forward-backward over latent tokens.
///
/// Each forward message is normalised to sum to one and the normalisers
/// accumulate `log_z`; backward messages reuse the same normalisers.
pub fn forward_backward(model: &DiscoveryModel, tau: &Trajectory) -> Result<Posteriors> {
    let j = check_trace(model, tau)?;
    let t_len = tau.len();
    if t_len == 0 {
        return Ok(Posteriors { u: Vec::new(), v: Vec::new(), log_z: 0.0 });
    }
    let k1 = model.k() + 1;
    let cache = step_caches(model, j, tau);
    let mut alpha = vec![vec![0.0; k1]; t_len];
    let mut scale = vec![0.0; t_len];
    for t in 0..t_len {
        let c = &cache[t];
        for w in 0..k1 {
            let prior = if t == 0 { c.high[w] } else { (0..k1).map(|p| alpha[t - 1][p] * transition(c, p, w)).sum() };
            alpha[t][w] = prior * c.emit[w];
        }
        let z: f64 = alpha[t].iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::DegenerateLikelihood { trace: 0, step: t });
        }
        alpha[t].iter_mut().for_each(|x| *x /= z);
        scale[t] = z;
    }
    let mut beta = vec![vec![1.0; k1]; t_len];
    for t in (0..t_len - 1).rev() {
        let c = &cache[t + 1];
        for p in 0..k1 {
            beta[t][p] = (0..k1).map(|w| transition(c, p, w) * c.emit[w] * beta[t + 1][w]).sum::<f64>() / scale[t + 1];
        }
    }
    let u = (0..t_len).map(|t| (0..k1).map(|w| alpha[t][w] * beta[t][w]).collect()).collect();
    let v = (0..t_len.saturating_sub(1))
        .map(|t| {
            let c = &cache[t + 1];
            let mut row = vec![0.0; k1 * k1];
            for p in 0..k1 {
                for w in 0..k1 {
                    row[p * k1 + w] = alpha[t][p] * transition(c, p, w) * c.emit[w] * beta[t + 1][w] / scale[t + 1];
                }
            }
            row
        })
        .collect();
    Ok(Posteriors { u, v, log_z: scale.iter().map(|z| z.ln()).sum() })
}

/// Sum of `log_z` over traces.
pub fn log_likelihood(model: &DiscoveryModel, traces: &[Trajectory]) -> Result<f64> {
    let mut total = 0.0;
    for (i, tau) in traces.iter().enumerate() {
        total += forward_backward(model, tau)
            .map_err(|e| match e {
                Error::DegenerateLikelihood { step, .. } => Error::DegenerateLikelihood { trace: i, step },
                other => other,
            })?
            .log_z;
    }
    Ok(total)
}

/// Gradient of `log_z` for one trace with respect to the flat parameters.
pub fn gradient(model: &DiscoveryModel, tau: &Trajectory, post: &Posteriors) -> Result<Vec<f64>> {
    let j = check_trace(model, tau)?;
    let l = &model.layout;
    let k = l.k;
    let k1 = k + 1;
    let na = l.n_actions;
    if post.u.len() != tau.len() || post.v.len() != tau.len().saturating_sub(1) {
        return Err(Error::Dimension("posteriors do not belong to this trace".into()));
    }
    let mut g = vec![0.0; l.len()];
    let cache = step_caches(model, j, tau);

    // Adds `coef * d log softmax_w / d logits` for the high-level layer.
    let add_high = |g: &mut [f64], s: usize, dlogits: &[f64]| {
        for w in 0..k1 {
            g[l.w_high(j, w, s)] += dlogits[w];
        }
    };
    for t in 0..tau.len() {
        let s = tau.states[t];
        let a = tau.actions[t];
        let c = &cache[t];
        let x = model.tables[j].row(s);
        // Emissions.
        for w in 0..k1 {
            let uw = post.u[t][w];
            if uw == 0.0 {
                continue;
            }
            let p = &c.action_dists[w];
            for b in 0..na {
                let d = uw * (f64::from(u8::from(b == a)) - p[b]);
                if w == k {
                    g[l.w_null(j, b, s)] += d;
                } else {
                    g[l.b_pi(w, b)] += d;
                    for (i, xi) in x.iter().enumerate() {
                        g[l.w_pi(w, b, i)] += d * xi;
                    }
                }
            }
        }
        // Option choice at the first step, from ⊥.
        if t == 0 {
            let d: Vec<f64> = (0..k1).map(|w| post.u[0][w] - c.high[w]).collect();
            add_high(&mut g, s, &d);
            continue;
        }
        // Option transitions into step t.
        let v = &post.v[t - 1];
        let mut dhigh = vec![0.0; k1];
        for p in 0..k1 {
            if p == k {
                let mass: f64 = (0..k1).map(|w| v[p * k1 + w]).sum();
                for w in 0..k1 {
                    dhigh[w] += v[p * k1 + w] - mass * c.high[w];
                }
                continue;
            }
            let beta = c.beta[p];
            let mut dbeta = 0.0;
            let mut r = vec![0.0; k1];
            for w in 0..k1 {
                let prob = transition(c, p, w);
                let vw = v[p * k1 + w];
                if prob <= 0.0 || vw == 0.0 {
                    continue;
                }
                dbeta += vw * (c.high[w] - f64::from(u8::from(p == w))) / prob;
                r[w] = vw * beta * c.high[w] / prob;
            }
            let rs: f64 = r.iter().sum();
            for w in 0..k1 {
                dhigh[w] += r[w] - rs * c.high[w];
            }
            // d beta / d (continue, terminate) logits = beta (1 - beta) (-1, +1).
            let dz = dbeta * beta * (1.0 - beta);
            g[l.b_beta(p, 0)] -= dz;
            g[l.b_beta(p, 1)] += dz;
            for (i, xi) in x.iter().enumerate() {
                g[l.w_beta(p, 0, i)] -= dz * xi;
                g[l.w_beta(p, 1, i)] += dz * xi;
            }
        }
        add_high(&mut g, s, &dhigh);
    }
    Ok(g)
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step in the direction of `grads` (ascent).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam shapes differ: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] += cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Settings of [`discover_options`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub k: usize,
    pub feature: FeatureKind,
    /// Keep the fewest principal components reaching this variance share.
    pub pca_variance: Option<f64>,
    pub lr: f64,
    pub likelihood_target: f64,
    pub conv_tol: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            k: 3,
            feature: FeatureKind::Opsr { variant: OpsrVariant::TerminalUpTo, k: 2 },
            pca_variance: None,
            lr: 0.3,
            likelihood_target: 0.99,
            conv_tol: 1e-4,
            patience: 50,
            max_epochs: 500,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LikelihoodTarget,
    Plateau,
    MaxEpochs,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub log_likelihood: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    /// Best parameters seen (by total log-likelihood).
    pub set: ExtendedOptionSet,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    /// True when the likelihood target was reached.
    pub converged: bool,
    pub best_log_likelihood: f64,
}

impl DiscoveryResult {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,log_likelihood,grad_norm\n");
        for r in &self.log {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.log_likelihood, r.grad_norm));
        }
        out
    }
}

/// A training task: its id and what feature maps may read.
#[derive(Clone, Copy)]
pub struct DiscoveryTask<'a> {
    pub id: &'a str,
    pub view: TaskView<'a>,
}

/// Feature map for the given tasks, with PCA fitted over all their states if requested.
pub fn fit_feature_map(kind: FeatureKind, pca_variance: Option<f64>, views: &[TaskView<'_>]) -> Result<FeatureMap> {
    let mut map = FeatureMap::new(kind);
    if let Some(frac) = pca_variance {
        let mut rows = Vec::new();
        for v in views {
            rows.extend(kind.raw_rows(*v)?);
        }
        map.pca = Some(pca_reduce(&rows, frac)?.0);
    }
    Ok(map)
}

/// Maximum-likelihood options for the given demonstrations.
///
/// Each epoch visits the traces in a seeded random order and takes one Adam
/// step per trace. Training stops once the per-step geometric mean of the
/// trace likelihoods reaches `likelihood_target`, once the best total
/// log-likelihood has not improved by `conv_tol` for `patience` epochs, or
/// after `max_epochs`.
pub fn discover_options(traces: &[Trajectory], tasks: &[DiscoveryTask<'_>], config: &DiscoveryConfig) -> Result<DiscoveryResult> {
    let Some(first) = tasks.first() else {
        return Err(Error::Config("discovery needs at least one task".into()));
    };
    let n_actions = first.view.mdp.n_actions();
    if tasks.iter().any(|t| t.view.mdp.n_actions() != n_actions) {
        return Err(Error::Dimension("tasks disagree on the number of actions".into()));
    }
    let views: Vec<TaskView<'_>> = tasks.iter().map(|t| t.view).collect();
    let map = fit_feature_map(config.feature, config.pca_variance, &views)?;
    let tables = views.iter().map(|v| map.table(*v)).collect::<Result<Vec<_>>>()?;
    let ids = tasks.iter().map(|t| t.id.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DiscoveryModel::zeros(config.k, n_actions, map, tables, ids)?.random(config.init_scale, &mut rng);
    for tau in traces {
        check_trace(&model, tau)?;
    }
    let total_steps: usize = traces.iter().map(Trajectory::len).sum();
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut state = AdamState::new(model.params.len());
    let mut best = (log_likelihood(&model, traces)?, model.params.clone());
    let mut last_gain_epoch = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..traces.len()).collect();
    let reached = |ll: f64| total_steps == 0 || (ll / total_steps as f64).exp() >= config.likelihood_target;
    let mut stop = if reached(best.0) { Some(StopReason::LikelihoodTarget) } else { None };
    let mut epoch = 0;
    while stop.is_none() {
        if epoch >= config.max_epochs {
            stop = Some(StopReason::MaxEpochs);
            break;
        }
        epoch += 1;
        order.shuffle(&mut rng);
        let mut summed = vec![0.0; model.params.len()];
        for &i in &order {
            let post = forward_backward(&model, &traces[i]).map_err(|e| match e {
                Error::DegenerateLikelihood { step, .. } => Error::DegenerateLikelihood { trace: i, step },
                other => other,
            })?;
            let g = gradient(&model, &traces[i], &post)?;
            summed.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
            adam_step(&mut model.params, &g, &mut state, adam)?;
        }
        let ll = log_likelihood(&model, traces)?;
        log.push(EpochLog { epoch, log_likelihood: ll, grad_norm: summed.iter().map(|x| x * x).sum::<f64>().sqrt() });
        if ll > best.0 + config.conv_tol {
            last_gain_epoch = epoch;
        }
        if ll > best.0 {
            best = (ll, model.params.clone());
        }
        if reached(ll) {
            stop = Some(StopReason::LikelihoodTarget);
        } else if epoch - last_gain_epoch >= config.patience {
            stop = Some(StopReason::Plateau);
        }
    }
    let stop = stop.expect("loop exits with a reason");
    model.params = best.1;
    Ok(DiscoveryResult { set: model.to_set(), log, converged: stop == StopReason::LikelihoodTarget, stop, best_log_likelihood: best.0 })
}

/// Samples a demonstration from the generative model, stopping early at a
/// terminal state. Returns the trajectory and the active token at every step.
pub fn generative_rollout<R: Rng + ?Sized>(
    model: &DiscoveryModel,
    task: usize,
    mdp: &TabularMdp,
    start: usize,
    steps: usize,
    rng: &mut R,
) -> Result<(Trajectory, Vec<usize>)> {
    mdp.check_state(start)?;
    if task >= model.task_ids.len() || model.layout.task_states[task] != mdp.n_states() {
        return Err(Error::Dimension(format!("task {task} does not match the MDP")));
    }
    let null = model.null_token();
    let mut tau = Trajectory { task_id: model.task_ids[task].clone(), states: vec![start], actions: Vec::new(), rewards: Vec::new() };
    let mut latent = Vec::new();
    let mut active = null;
    let mut s = start;
    for _ in 0..steps {
        if mdp.is_terminal(s) {
            break;
        }
        let terminate = active == null || rng.random::<f64>() < model.termination(task, active, s);
        if terminate {
            active = sample_categorical(&model.high_dist(task, s), rng);
        }
        let a = sample_categorical(&model.action_dist(task, active, s), rng);
        let (next, r) = mdp.sample_step(s, a, rng);
        latent.push(active);
        tau.actions.push(a);
        tau.rewards.push(r);
        tau.states.push(next);
        s = next;
    }
    Ok((tau, latent))
}

/// Exhaustive posteriors by enumerating every latent token sequence.
///
/// Exposed for verification; the cost is `(K + 1)^T`.
pub fn enumerate_posteriors(model: &DiscoveryModel, tau: &Trajectory, cap: u128) -> Result<Posteriors> {
    let j = check_trace(model, tau)?;
    let k1 = model.k() + 1;
    let t_len = tau.len();
    let count = (k1 as u128).saturating_pow(t_len as u32);
    if count > cap {
        return Err(Error::CapExceeded { what: "latent sequences", size: count, cap });
    }
    let cache = step_caches(model, j, tau);
    let mut u = vec![vec![0.0; k1]; t_len];
    let mut v = vec![vec![0.0; k1 * k1]; t_len.saturating_sub(1)];
    let mut z = 0.0;
    let mut seq = vec![0usize; t_len];
    for idx in 0..count {
        let mut r = idx;
        for t in (0..t_len).rev() {
            seq[t] = (r % k1 as u128) as usize;
            r /= k1 as u128;
        }
        let mut p = 1.0;
        for t in 0..t_len {
            let c = &cache[t];
            p *= if t == 0 { c.high[seq[0]] } else { transition(c, seq[t - 1], seq[t]) };
            p *= c.emit[seq[t]];
        }
        z += p;
        for t in 0..t_len {
            u[t][seq[t]] += p;
            if t + 1 < t_len {
                v[t][seq[t] * k1 + seq[t + 1]] += p;
            }
        }
    }
    if t_len > 0 && !(z > 0.0) {
        return Err(Error::DegenerateLikelihood { trace: 0, step: 0 });
    }
    let norm = |x: &mut f64| *x /= z;
    u.iter_mut().flatten().for_each(norm);
    v.iter_mut().flatten().for_each(norm);
    Ok(Posteriors { u, v, log_z: if t_len == 0 { 0.0 } else { z.ln() } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpBuilder;

    /// Ring of `n` states; action `a` moves `a` steps clockwise.
    fn ring(n: usize, na: usize) -> TabularMdp {
        let mut b = MdpBuilder::new(n, na, 0.9);
        for s in 0..n {
            for a in 0..na {
                b.transition(s, a, (s + a) % n, 1.0, 0.0);
            }
        }
        b.build().unwrap()
    }

    fn model(k: usize, n: usize, na: usize, dim: usize, seed: u64) -> DiscoveryModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let table = FeatureTable::from_rows(&rows).unwrap();
        let fm = FeatureMap::new(FeatureKind::Opsr { variant: OpsrVariant::TerminalUpTo, k: 1 });
        DiscoveryModel::zeros(k, na, fm, vec![table], vec!["t".into()]).unwrap().random(1.0, &mut rng)
    }

    fn random_trace(n: usize, na: usize, len: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = vec![rng.random_range(0..n)];
        let mut actions = Vec::new();
        for _ in 0..len {
            let a = rng.random_range(0..na);
            actions.push(a);
            states.push((states.last().unwrap() + a) % n);
        }
        Trajectory { task_id: "t".into(), states, actions, rewards: vec![0.0; len] }
    }

    #[test]
    fn forward_backward_matches_enumeration() {
        for seed in 0..20 {
            let m = model(2, 4, 3, 2, seed);
            let tau = random_trace(4, 3, 1 + (seed as usize % 6), seed + 100);
            let fb = forward_backward(&m, &tau).unwrap();
            let ex = enumerate_posteriors(&m, &tau, 4096).unwrap();
            assert!((fb.log_z - ex.log_z).abs() < 1e-10);
            for (a, b) in fb.u.iter().flatten().zip(ex.u.iter().flatten()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in fb.v.iter().flatten().zip(ex.v.iter().flatten()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(3, 4, 3, 2, 5);
        let tau = random_trace(4, 3, 8, 9);
        let post = forward_backward(&m, &tau).unwrap();
        let g = gradient(&m, &tau, &post).unwrap();
        let h = 1e-6;
        for i in 0..m.params.len() {
            let mut p = m.clone();
            p.params[i] += h;
            let up = forward_backward(&p, &tau).unwrap().log_z;
            p.params[i] -= 2.0 * h;
            let down = forward_backward(&p, &tau).unwrap().log_z;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-8, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn one_step_closed_form() {
        let m = model(2, 4, 3, 2, 3);
        let tau = random_trace(4, 3, 1, 4);
        let s = tau.states[0];
        let expect: f64 = (0..3).map(|w| m.high_dist(0, s)[w] * m.action_dist(0, w, s)[tau.actions[0]]).sum();
        assert!((log_likelihood(&m, &[tau]).unwrap() - expect.ln()).abs() < 1e-12);
        assert_eq!(log_likelihood(&m, &[]).unwrap(), 0.0);
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let m = model(3, 4, 3, 2, 8);
        for prev in 0..4 {
            let total: f64 = (0..4).map(|w| option_transition_prob(&m, 0, prev, w, 2)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_arithmetic() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut st, AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0]);
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut st, AdamConfig::default()).unwrap();
        // m̂ = 2, v̂ = 4: step = 0.3 * 2 / (2 + 1e-8).
        assert!((p[0] - 0.3 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut st, AdamConfig::default()).is_err());
    }

    #[test]
    fn set_round_trip() {
        let m = model(2, 4, 3, 2, 1);
        let set = m.to_set();
        let back = DiscoveryModel::from_set(&set, m.tables.clone()).unwrap();
        assert_eq!(back.params, m.params);
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(serde_json::from_str::<ExtendedOptionSet>(&json).unwrap(), set);
    }

    #[test]
    fn null_only_rollout() {
        let mdp = ring(4, 3);
        let m = model(0, 4, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tau, latent) = generative_rollout(&m, 0, &mdp, 0, 10, &mut rng).unwrap();
        assert_eq!(tau.len(), 10);
        assert!(latent.iter().all(|&w| w == 0));
    }
}
