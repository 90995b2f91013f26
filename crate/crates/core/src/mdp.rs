//! Finite tabular MDPs.
//!
//! Transitions are stored sparsely, one row per `(state, action)` pair. Rewards
//! are attached to transitions and received on arrival; a terminal state is
//! absorbing and has value zero. Every routine here is a pure function of its
//! inputs.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities within this distance of one are treated as certain.
pub const PROB_EPS: f64 = 1e-12;

const SWEEP_CAP: usize = 1_000_000;
const DIRECT_SOLVE_MAX_STATES: usize = 600;

/// One outgoing edge of a `(state, action)` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// A finite MDP with per-transition rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MdpRecord", try_from = "MdpRecord")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Vec<Transition>>,
    discount: f64,
    terminal: Vec<bool>,
    initial_state: Option<usize>,
}

/// Incremental constructor for [`TabularMdp`].
///
/// Repeated edges to the same successor are merged: probabilities add and the
/// reward becomes the probability-weighted mean.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Vec<Transition>>,
    discount: f64,
    terminal: Vec<bool>,
    initial_state: Option<usize>,
}

impl MdpBuilder {
    pub fn new(n_states: usize, n_actions: usize, discount: f64) -> Self {
        MdpBuilder {
            n_states,
            n_actions,
            rows: vec![Vec::new(); n_states * n_actions],
            discount,
            terminal: vec![false; n_states],
            initial_state: None,
        }
    }

    /// Adds probability mass `prob` for `s --a--> next` with reward `reward`.
    pub fn transition(&mut self, s: usize, a: usize, next: usize, prob: f64, reward: f64) -> &mut Self {
        assert!(s < self.n_states && next < self.n_states, "state index out of range");
        assert!(a < self.n_actions, "action index out of range");
        let row = &mut self.rows[s * self.n_actions + a];
        if let Some(t) = row.iter_mut().find(|t| t.next == next) {
            let total = t.prob + prob;
            if total > 0.0 {
                t.reward = (t.reward * t.prob + reward * prob) / total;
            }
            t.prob = total;
        } else {
            row.push(Transition { next, prob, reward });
        }
        self
    }

    /// Marks `s` terminal and replaces its rows with zero-reward self-loops.
    pub fn terminal(&mut self, s: usize) -> &mut Self {
        self.terminal[s] = true;
        for a in 0..self.n_actions {
            self.rows[s * self.n_actions + a] = vec![Transition { next: s, prob: 1.0, reward: 0.0 }];
        }
        self
    }

    pub fn initial(&mut self, s: usize) -> &mut Self {
        self.initial_state = Some(s);
        self
    }

    /// Finishes construction. Structural checks only; use
    /// [`TabularMdp::validate`] for the probabilistic invariants.
    pub fn build(&self) -> Result<TabularMdp> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidMdp("an MDP needs at least one state and one action".into()));
        }
        if let Some(s0) = self.initial_state {
            if s0 >= self.n_states {
                return Err(Error::Index(format!("initial state {s0} of {}", self.n_states)));
            }
        }
        let mut rows = self.rows.clone();
        for row in &mut rows {
            row.sort_by_key(|t| t.next);
        }
        Ok(TabularMdp {
            n_states: self.n_states,
            n_actions: self.n_actions,
            rows,
            discount: self.discount,
            terminal: self.terminal.clone(),
            initial_state: self.initial_state,
        })
    }
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_state(&self) -> Option<usize> {
        self.initial_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    /// Sparse successor list of `(s, a)`, sorted by successor index.
    pub fn row(&self, s: usize, a: usize) -> &[Transition] {
        &self.rows[s * self.n_actions + a]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a).iter().find(|t| t.next == next).map_or(0.0, |t| t.prob)
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a).iter().find(|t| t.next == next).map_or(0.0, |t| t.reward)
    }

    /// Expected immediate reward of taking `a` in `s`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.row(s, a).iter().map(|t| t.prob * t.reward).sum()
    }

    /// Copy of this MDP with a different discount.
    pub fn with_discount(&self, discount: f64) -> TabularMdp {
        TabularMdp { discount, ..self.clone() }
    }

    /// Copy of this MDP with a different start state.
    pub fn with_initial_state(&self, s: Option<usize>) -> TabularMdp {
        TabularMdp { initial_state: s, ..self.clone() }
    }

    /// True when every row puts all its mass on one successor.
    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|row| {
            let live: Vec<_> = row.iter().filter(|t| t.prob > PROB_EPS).collect();
            live.len() == 1 && (live[0].prob - 1.0).abs() <= PROB_EPS
        })
    }

    /// The most likely successor of `(s, a)`; for deterministic MDPs, the successor.
    pub fn successor(&self, s: usize, a: usize) -> usize {
        self.row(s, a).iter().max_by(|x, y| x.prob.total_cmp(&y.prob).then(y.next.cmp(&x.next))).map_or(s, |t| t.next)
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(Error::Index(format!("state {s} (MDP has {} states)", self.n_states)))
        }
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a < self.n_actions {
            Ok(())
        } else {
            Err(Error::Index(format!("action {a} (MDP has {} actions)", self.n_actions)))
        }
    }

    /// Samples a successor and its reward.
    pub fn sample_step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
        let row = self.row(s, a);
        if row.len() == 1 {
            return (row[0].next, row[0].reward);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for t in row {
            acc += t.prob;
            if u < acc {
                return (t.next, t.reward);
            }
        }
        let last = row.last().expect("empty transition row");
        (last.next, last.reward)
    }

    /// Lists every violated invariant. An empty report means the MDP is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        if !(0.0..=1.0).contains(&self.discount) || self.discount.is_nan() {
            issues.push(Violation::DiscountOutOfRange { discount: self.discount });
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                let mut sum = 0.0;
                for t in row {
                    if t.next >= self.n_states {
                        issues.push(Violation::SuccessorOutOfRange { state: s, action: a, next: t.next });
                    }
                    if t.prob < 0.0 || !t.prob.is_finite() {
                        issues.push(Violation::NegativeProbability { state: s, action: a, next: t.next, prob: t.prob });
                    }
                    if !t.reward.is_finite() {
                        issues.push(Violation::NonFiniteReward { state: s, action: a, next: t.next });
                    }
                    sum += t.prob;
                }
                if (sum - 1.0).abs() > PROB_EPS {
                    issues.push(Violation::RowSum { state: s, action: a, sum, deficit: 1.0 - sum });
                }
                if self.terminal[s] {
                    let p_self = self.prob(s, a, s);
                    let r_self = self.reward(s, a, s);
                    if (p_self - 1.0).abs() > PROB_EPS || r_self != 0.0 {
                        issues.push(Violation::TerminalNotAbsorbing { state: s, action: a });
                    }
                }
            }
        }
        if self.discount == 1.0 {
            let improper = self.improper_states();
            if !improper.is_empty() {
                issues.push(Violation::ImproperUndiscounted { states: improper });
            }
        }
        ValidationReport { issues }
    }

    /// States from which some policy avoids every terminal state with
    /// positive probability.
    pub fn improper_states(&self) -> Vec<usize> {
        let n = self.n_states;
        // Largest set of non-terminal states closed under some action.
        let mut trap: Vec<bool> = (0..n).map(|s| !self.terminal[s]).collect();
        loop {
            let mut changed = false;
            for s in 0..n {
                if !trap[s] {
                    continue;
                }
                let keeps = (0..self.n_actions).any(|a| self.row(s, a).iter().all(|t| t.prob <= 0.0 || (t.next < n && trap[t.next])));
                if !keeps {
                    trap[s] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // Everything that can reach the trap under some action is improper.
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in 0..n {
            for a in 0..self.n_actions {
                for t in self.row(s, a) {
                    if t.prob > 0.0 && t.next < n {
                        preds[t.next].push(s);
                    }
                }
            }
        }
        let mut bad = trap.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| trap[s]).collect();
        while let Some(s) = queue.pop_front() {
            for &p in &preds[s] {
                if !bad[p] && !self.terminal[p] {
                    bad[p] = true;
                    queue.push_back(p);
                }
            }
        }
        (0..n).filter(|&s| bad[s]).collect()
    }
}

/// A single broken invariant found by [`TabularMdp::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    DiscountOutOfRange { discount: f64 },
    SuccessorOutOfRange { state: usize, action: usize, next: usize },
    NegativeProbability { state: usize, action: usize, next: usize, prob: f64 },
    NonFiniteReward { state: usize, action: usize, next: usize },
    RowSum { state: usize, action: usize, sum: f64, deficit: f64 },
    TerminalNotAbsorbing { state: usize, action: usize },
    ImproperUndiscounted { states: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DiscountOutOfRange { discount } => write!(f, "discount {discount} outside [0, 1]"),
            Violation::SuccessorOutOfRange { state, action, next } => {
                write!(f, "({state}, {action}) points to missing state {next}")
            }
            Violation::NegativeProbability { state, action, next, prob } => {
                write!(f, "({state}, {action}) -> {next} has probability {prob}")
            }
            Violation::NonFiniteReward { state, action, next } => {
                write!(f, "({state}, {action}) -> {next} has a non-finite reward")
            }
            Violation::RowSum { state, action, sum, deficit } => {
                write!(f, "row ({state}, {action}) sums to {sum} (deficit {deficit:e})")
            }
            Violation::TerminalNotAbsorbing { state, action } => {
                write!(f, "terminal state {state} is not a zero-reward self-loop under action {action}")
            }
            Violation::ImproperUndiscounted { states } => {
                write!(f, "discount is 1 but {} state(s) can avoid termination forever (first: {})", states.len(), states[0])
            }
        }
    }
}

/// Outcome of [`TabularMdp::validate`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "valid");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Free function form of [`TabularMdp::validate`].
pub fn validate_mdp(mdp: &TabularMdp) -> ValidationReport {
    mdp.validate()
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    state: usize,
    action: usize,
    next: usize,
    prob: f64,
    reward: f64,
}

#[derive(Serialize, Deserialize)]
struct MdpRecord {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    #[serde(default)]
    terminal: Vec<usize>,
    #[serde(default)]
    initial_state: Option<usize>,
    transitions: Vec<TransitionRecord>,
}

impl From<TabularMdp> for MdpRecord {
    fn from(m: TabularMdp) -> Self {
        let mut transitions = Vec::new();
        for s in 0..m.n_states {
            for a in 0..m.n_actions {
                for t in m.row(s, a) {
                    transitions.push(TransitionRecord { state: s, action: a, next: t.next, prob: t.prob, reward: t.reward });
                }
            }
        }
        MdpRecord {
            n_states: m.n_states,
            n_actions: m.n_actions,
            discount: m.discount,
            terminal: (0..m.n_states).filter(|&s| m.terminal[s]).collect(),
            initial_state: m.initial_state,
            transitions,
        }
    }
}

impl TryFrom<MdpRecord> for TabularMdp {
    type Error = Error;

    fn try_from(r: MdpRecord) -> Result<Self> {
        let mut b = MdpBuilder::new(r.n_states, r.n_actions, r.discount);
        for t in &r.transitions {
            if t.state >= r.n_states || t.next >= r.n_states || t.action >= r.n_actions {
                return Err(Error::Index(format!(
                    "transition ({}, {}, {}) outside {}x{}",
                    t.state, t.action, t.next, r.n_states, r.n_actions
                )));
            }
            b.transition(t.state, t.action, t.next, t.prob, t.reward);
        }
        for &s in &r.terminal {
            if s >= r.n_states {
                return Err(Error::Index(format!("terminal state {s}")));
            }
            b.terminal[s] = true;
        }
        b.initial_state = r.initial_state;
        b.build()
    }
}

/// A stochastic policy over a tabular MDP, stored row-major `(state, action)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// A deterministic policy playing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < n_actions, "action {a} out of range");
            probs[s * n_actions + a] = 1.0;
        }
        TabularPolicy { n_states: actions.len(), n_actions, probs }
    }

    /// Builds a policy from explicit rows; every row must be a distribution.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for (s, row) in rows.into_iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::Dimension(format!("policy row {s} has {} entries, expected {n_actions}", row.len())));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > PROB_EPS {
                return Err(Error::Dimension(format!("policy row {s} is not a distribution (sum {sum})")));
            }
            probs.extend(row);
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// The action with the largest probability in `s` (lowest index on ties).
    pub fn argmax(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    /// `Some(actions)` when every row is one-hot.
    pub fn as_deterministic(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|s| {
                let a = self.argmax(s);
                ((self.prob(s, a) - 1.0).abs() <= PROB_EPS).then_some(a)
            })
            .collect()
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// State values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(values: Vec<f64>) -> Self {
        ValueFunction { values }
    }

    pub fn zeros(n: usize) -> Self {
        ValueFunction { values: vec![0.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sup-norm distance to another value function of the same length.
    pub fn max_abs_diff(&self, other: &ValueFunction) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for ValueFunction {
    type Output = f64;

    fn index(&self, s: usize) -> &f64 {
        &self.values[s]
    }
}

/// The Markov chain induced by a policy: merged successor rows and expected rewards.
struct InducedChain {
    rows: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
}

fn induced_chain(mdp: &TabularMdp, policy: &TabularPolicy) -> InducedChain {
    let n = mdp.n_states();
    let mut rows = Vec::with_capacity(n);
    let mut reward = vec![0.0; n];
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    for s in 0..n {
        scratch.clear();
        if !mdp.is_terminal(s) {
            for a in 0..mdp.n_actions() {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for t in mdp.row(s, a) {
                    reward[s] += pa * t.prob * t.reward;
                    scratch.push((t.next, pa * t.prob));
                }
            }
        }
        scratch.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(scratch.len());
        for &(j, p) in &scratch {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += p,
                _ => merged.push((j, p)),
            }
        }
        rows.push(merged);
    }
    InducedChain { rows, reward }
}

fn bellman_residual(chain: &InducedChain, gamma: f64, v: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (s, row) in chain.rows.iter().enumerate() {
        let backup = chain.reward[s] + gamma * row.iter().map(|&(j, p)| p * v[j]).sum::<f64>();
        worst = worst.max((backup - v[s]).abs());
    }
    worst
}

fn evaluate_chain_iterative(chain: &InducedChain, gamma: f64, tol: f64, init: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = chain.rows.len();
    let mut v = init.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    // Stop once the sweep change bounds the remaining error well below tol.
    let stop = if gamma < 1.0 { (tol * (1.0 - gamma) / gamma.max(1e-300)).min(tol) * 0.5 } else { tol * 1e-3 };
    let cap = if gamma < 1.0 { SWEEP_CAP } else { SWEEP_CAP / 10 };
    let mut delta = f64::INFINITY;
    for sweep in 0..cap {
        delta = 0.0;
        for s in 0..n {
            let mut self_p = 0.0;
            let mut acc = chain.reward[s];
            for &(j, p) in &chain.rows[s] {
                if j == s {
                    self_p += p;
                } else {
                    acc += gamma * p * v[j];
                }
            }
            let denom = 1.0 - gamma * self_p;
            let new = if denom <= 1e-15 {
                if chain.reward[s].abs() > 0.0 {
                    return Err(Error::Divergence { iterations: sweep, residual: f64::INFINITY });
                }
                0.0
            } else {
                acc / denom
            };
            delta = delta.max((new - v[s]).abs());
            v[s] = new;
        }
        if !delta.is_finite() {
            break;
        }
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if delta <= stop.max(8.0 * f64::EPSILON * vmax) && bellman_residual(chain, gamma, &v) <= tol {
            return Ok(v);
        }
    }
    Err(Error::Divergence { iterations: cap, residual: delta })
}

fn evaluate_chain_direct(chain: &InducedChain, gamma: f64) -> Option<Vec<f64>> {
    let n = chain.rows.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    for (s, row) in chain.rows.iter().enumerate() {
        for &(j, p) in row {
            a[(s, j)] -= gamma * p;
        }
    }
    let b = DVector::from_vec(chain.reward.clone());
    let x = a.lu().solve(&b)?;
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

/// Value of `policy`, accurate to a Bellman residual of at most `tol`.
///
/// Uses Gauss-Seidel sweeps with self-loops eliminated analytically.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &TabularPolicy, tol: f64) -> Result<ValueFunction> {
    policy.check_shape(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let chain = induced_chain(mdp, policy);
    evaluate_chain_iterative(&chain, mdp.discount(), tol, None).map(ValueFunction::new)
}

/// The `k`-step truncated discounted return of `policy`.
pub fn k_horizon_value(mdp: &TabularMdp, policy: &TabularPolicy, k: usize) -> Result<ValueFunction> {
    policy.check_shape(mdp)?;
    let chain = induced_chain(mdp, policy);
    let gamma = mdp.discount();
    let mut v = vec![0.0; mdp.n_states()];
    for _ in 0..k {
        let next: Vec<f64> = chain
            .rows
            .iter()
            .enumerate()
            .map(|(s, row)| chain.reward[s] + gamma * row.iter().map(|&(j, p)| p * v[j]).sum::<f64>())
            .collect();
        v = next;
    }
    Ok(ValueFunction::new(v))
}

/// Action values `Q(s, a)` for a fixed state-value estimate.
pub fn q_values(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    let gamma = mdp.discount();
    let mut q = vec![0.0; mdp.n_states() * mdp.n_actions()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            q[s * mdp.n_actions() + a] =
                if mdp.is_terminal(s) { 0.0 } else { mdp.row(s, a).iter().map(|t| t.prob * (t.reward + gamma * v[t.next])).sum() };
        }
    }
    q
}

fn greedy_actions(mdp: &TabularMdp, v: &[f64], current: Option<&[usize]>) -> Vec<usize> {
    let q = q_values(mdp, v);
    let na = mdp.n_actions();
    (0..mdp.n_states())
        .map(|s| {
            let row = &q[s * na..(s + 1) * na];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-10 * (1.0 + best.abs());
            if let Some(cur) = current {
                // Keep the incumbent unless something is clearly better.
                if row[cur[s]] >= best - slack {
                    return cur[s];
                }
            }
            (0..na).find(|&a| row[a] >= best - slack).unwrap_or(0)
        })
        .collect()
}

/// Optimal deterministic policy and its values by policy iteration.
///
/// Ties are broken towards the lowest action index.
pub fn solve_optimal(mdp: &TabularMdp, tol: f64) -> Result<(TabularPolicy, ValueFunction)> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let eval_tol = (tol * 1e-2).max(1e-13);
    let mut actions = greedy_actions(mdp, &vec![0.0; n], None);
    let mut v: Option<Vec<f64>> = None;
    for _ in 0..10_000 {
        let policy = TabularPolicy::deterministic(&actions, na);
        let chain = induced_chain(mdp, &policy);
        let direct = if n <= DIRECT_SOLVE_MAX_STATES && gamma < 1.0 { evaluate_chain_direct(&chain, gamma) } else { None };
        let values = match direct {
            Some(x) => x,
            None => evaluate_chain_iterative(&chain, gamma, eval_tol, v.as_deref())?,
        };
        let improved = greedy_actions(mdp, &values, Some(&actions));
        v = Some(values);
        if improved == actions {
            break;
        }
        actions = improved;
    }
    let values = v.expect("at least one evaluation");
    // Canonical tie-breaking on the converged values.
    let final_actions = greedy_actions(mdp, &values, None);
    let policy = TabularPolicy::deterministic(&final_actions, na);
    let chain = induced_chain(mdp, &policy);
    let values = match (n <= DIRECT_SOLVE_MAX_STATES && gamma < 1.0).then(|| evaluate_chain_direct(&chain, gamma)).flatten() {
        Some(x) => x,
        None => evaluate_chain_iterative(&chain, gamma, eval_tol, Some(&values))?,
    };
    Ok((policy, ValueFunction::new(values)))
}

/// Expected discounted reward of playing the fixed sequence `aseq` from `s`.
pub fn open_loop_value(mdp: &TabularMdp, s: usize, aseq: &[usize]) -> Result<f64> {
    mdp.check_state(s)?;
    for &a in aseq {
        mdp.check_action(a)?;
    }
    let mut dist = vec![(s, 1.0)];
    let mut total = 0.0;
    let mut disc = 1.0;
    for &a in aseq {
        let mut next: Vec<(usize, f64)> = Vec::new();
        for &(x, px) in &dist {
            for t in mdp.row(x, a) {
                if mdp.is_terminal(x) {
                    next.push((x, px * t.prob));
                    continue;
                }
                total += disc * px * t.prob * t.reward;
                next.push((t.next, px * t.prob));
            }
        }
        dist = merge_dist(next);
        disc *= mdp.discount();
    }
    Ok(total)
}

/// Merges duplicate states in a sparse distribution, sorted by state.
pub(crate) fn merge_dist(mut v: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    v.sort_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(v.len());
    for (s, p) in v {
        match out.last_mut() {
            Some(last) if last.0 == s => last.1 += p,
            _ => out.push((s, p)),
        }
    }
    out
}

/// Limits for brute-force plannability checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannabilityCaps {
    pub max_states: usize,
    pub max_horizon: usize,
}

impl Default for PlannabilityCaps {
    fn default() -> Self {
        PlannabilityCaps { max_states: 8, max_horizon: 6 }
    }
}

/// Finite-horizon plannability with the default caps.
pub fn is_plannable_up_to(mdp: &TabularMdp, horizon: usize, tol: f64) -> Result<bool> {
    is_plannable_up_to_with(mdp, horizon, tol, PlannabilityCaps::default())
}

/// True iff for every deterministic policy, state and `n <= horizon`, some
/// length-`n` action sequence has the policy's `n`-step value at that state.
///
/// Deterministic MDPs return `true` without enumeration.
pub fn is_plannable_up_to_with(mdp: &TabularMdp, horizon: usize, tol: f64, caps: PlannabilityCaps) -> Result<bool> {
    if mdp.is_deterministic() {
        return Ok(true);
    }
    if mdp.n_states() > caps.max_states {
        return Err(Error::CapExceeded { what: "state count", size: mdp.n_states() as u128, cap: caps.max_states as u128 });
    }
    if horizon > caps.max_horizon {
        return Err(Error::CapExceeded { what: "plannability horizon", size: horizon as u128, cap: caps.max_horizon as u128 });
    }
    let n = mdp.n_states();
    let na = mdp.n_actions();
    // open[n-1][s] = sorted open-loop values of all length-n sequences from s.
    let mut open: Vec<Vec<Vec<f64>>> = Vec::with_capacity(horizon);
    for len in 1..=horizon {
        let mut per_state = Vec::with_capacity(n);
        for s in 0..n {
            let mut vals = Vec::new();
            for seq in SequenceIter::new(na, len) {
                vals.push(open_loop_value(mdp, s, &seq)?);
            }
            vals.sort_by(f64::total_cmp);
            per_state.push(vals);
        }
        open.push(per_state);
    }
    let total = (na as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if total > 1 << 24 {
        return Err(Error::CapExceeded { what: "deterministic policy count", size: total, cap: 1 << 24 });
    }
    for actions in SequenceIter::new(na, n) {
        let policy = TabularPolicy::deterministic(&actions, na);
        for len in 1..=horizon {
            let v = k_horizon_value(mdp, &policy, len)?;
            for s in 0..n {
                let vals = &open[len - 1][s];
                let target = v[s];
                let idx = vals.partition_point(|&x| x < target - tol);
                if idx >= vals.len() || (vals[idx] - target).abs() > tol {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Lexicographic enumeration of all length-`len` sequences over `0..base`.
#[derive(Debug, Clone)]
pub struct SequenceIter {
    base: usize,
    current: Vec<usize>,
    done: bool,
}

impl SequenceIter {
    pub fn new(base: usize, len: usize) -> Self {
        SequenceIter { base, current: vec![0; len], done: base == 0 && len > 0 }
    }
}

impl Iterator for SequenceIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let mut i = self.current.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.current[i] += 1;
            if self.current[i] < self.base {
                break;
            }
            self.current[i] = 0;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> TabularMdp {
        // 0 -> 1 -> 2 -> terminal 3 with +1 on the last edge.
        let mut b = MdpBuilder::new(4, 1, 0.9);
        b.transition(0, 0, 1, 1.0, 0.0).transition(1, 0, 2, 1.0, 0.0).transition(2, 0, 3, 1.0, 1.0).terminal(3);
        b.build().unwrap()
    }

    #[test]
    fn single_state_identity_is_valid() {
        let mut b = MdpBuilder::new(1, 1, 0.9);
        b.transition(0, 0, 0, 1.0, 0.0);
        assert!(b.build().unwrap().validate().is_valid());
    }

    #[test]
    fn short_row_is_reported_with_deficit() {
        let mut b = MdpBuilder::new(2, 1, 0.9);
        b.transition(0, 0, 1, 0.9, 0.0).transition(1, 0, 1, 1.0, 0.0);
        let report = b.build().unwrap().validate();
        assert_eq!(report.issues.len(), 1);
        match &report.issues[0] {
            Violation::RowSum { state, action, deficit, .. } => {
                assert_eq!((*state, *action), (0, 0));
                assert!((deficit - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn undiscounted_with_unreachable_terminal_is_flagged() {
        let mut b = MdpBuilder::new(3, 1, 1.0);
        b.transition(0, 0, 1, 1.0, 0.0).transition(1, 0, 0, 1.0, 0.0).terminal(2);
        let report = b.build().unwrap().validate();
        assert!(matches!(&report.issues[..], [Violation::ImproperUndiscounted { states }] if states == &vec![0, 1]));
    }

    #[test]
    fn undiscounted_escapable_loop_is_flagged_only_if_policy_can_stay() {
        // Action 0 loops, action 1 exits: some policy loops forever.
        let mut b = MdpBuilder::new(2, 2, 1.0);
        b.transition(0, 0, 0, 1.0, 0.0).transition(0, 1, 1, 1.0, 1.0).terminal(1);
        assert!(!b.build().unwrap().validate().is_valid());
        let mut b = MdpBuilder::new(2, 2, 1.0);
        b.transition(0, 0, 0, 0.5, 0.0).transition(0, 0, 1, 0.5, 0.0).transition(0, 1, 1, 1.0, 1.0).terminal(1);
        assert!(b.build().unwrap().validate().is_valid());
    }

    #[test]
    fn geometric_series() {
        let mut b = MdpBuilder::new(1, 1, 0.5);
        b.transition(0, 0, 0, 1.0, 1.0);
        let mdp = b.build().unwrap();
        let v = policy_evaluation(&mdp, &TabularPolicy::uniform(1, 1), 1e-12).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn chain_values_by_hand() {
        let mdp = chain3();
        let v = policy_evaluation(&mdp, &TabularPolicy::uniform(4, 1), 1e-12).unwrap();
        let expected = [0.81, 0.9, 1.0, 0.0];
        for s in 0..4 {
            assert!((v[s] - expected[s]).abs() < 1e-10, "state {s}: {}", v[s]);
        }
    }

    #[test]
    fn undiscounted_improper_policy_diverges() {
        let mut b = MdpBuilder::new(2, 1, 1.0);
        b.transition(0, 0, 1, 1.0, 1.0).transition(1, 0, 0, 1.0, 1.0);
        let mdp = b.build().unwrap();
        let err = policy_evaluation(&mdp, &TabularPolicy::uniform(2, 1), 1e-9).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn k_horizon_base_cases() {
        let mdp = chain3();
        let pi = TabularPolicy::uniform(4, 1);
        assert!(k_horizon_value(&mdp, &pi, 0).unwrap().values().iter().all(|&x| x == 0.0));
        let v1 = k_horizon_value(&mdp, &pi, 1).unwrap();
        assert_eq!(v1.values(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_action_solve_matches_evaluation() {
        let mdp = chain3();
        let (pi, v) = solve_optimal(&mdp, 1e-10).unwrap();
        let ev = policy_evaluation(&mdp, &pi, 1e-12).unwrap();
        assert!(v.max_abs_diff(&ev) < 1e-9);
    }

    #[test]
    fn ties_go_to_lowest_action() {
        let mut b = MdpBuilder::new(2, 3, 0.9);
        for a in 0..3 {
            b.transition(0, a, 1, 1.0, 1.0);
        }
        b.terminal(1);
        let (pi, _) = solve_optimal(&b.build().unwrap(), 1e-10).unwrap();
        assert_eq!(pi.as_deterministic().unwrap()[0], 0);
    }

    #[test]
    fn open_loop_on_chain_matches_optimum() {
        let mdp = chain3();
        assert!((open_loop_value(&mdp, 0, &[0, 0, 0]).unwrap() - 0.81).abs() < 1e-12);
        assert!(open_loop_value(&mdp, 0, &[1]).is_err());
    }

    #[test]
    fn plannability_caps_and_shortcuts() {
        assert!(is_plannable_up_to(&chain3(), 3, 1e-9).unwrap());
        let mut b = MdpBuilder::new(9, 1, 0.9);
        for s in 0..9 {
            b.transition(s, 0, s, 0.5, 0.0).transition(s, 0, (s + 1) % 9, 0.5, 0.0);
        }
        let big = b.build().unwrap();
        assert!(matches!(is_plannable_up_to(&big, 2, 1e-9), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn sequence_iter_is_lexicographic() {
        let seqs: Vec<_> = SequenceIter::new(2, 2).collect();
        assert_eq!(seqs, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(SequenceIter::new(3, 0).count(), 1);
    }

    #[test]
    fn json_round_trip() {
        let mdp = chain3().with_initial_state(Some(0));
        let text = serde_json::to_string(&mdp).unwrap();
        let back: TabularMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(mdp, back);
    }
}
