//! Small hand-built MDPs and random generators used by the theory checks.
//!
//! Action `0` is called `a` and action `1` is called `b` in the named MDPs.
//! Every named MDP has one outcome component equal to the reward, so its
//! outcome model uses the weight vector `[1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstraction::StateAbstraction;
use crate::error::{Error, Result};
use crate::mdp::{MdpBuilder, TabularMdp};
use crate::outcomes::OutcomeModel;

pub const ACTION_A: usize = 0;
pub const ACTION_B: usize = 1;

/// An MDP paired with its outcome model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub name: String,
    pub mdp: TabularMdp,
    pub outcomes: OutcomeModel,
    pub state_names: Vec<String>,
}

impl Example {
    pub fn state(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }
}

/// Builds an example whose single outcome component is the reward.
fn reward_example(
    name: &str,
    states: &[&str],
    discount: f64,
    edges: &[(usize, usize, usize, f64, f64)],
    terminals: &[usize],
) -> Result<Example> {
    let n = states.len();
    let mut b = MdpBuilder::new(n, 2, discount);
    let mut om = OutcomeModel::new(n, 2, vec![1.0]).with_labels(&["reward"]);
    for &(s, a, next, p, r) in edges {
        b.transition(s, a, next, p, r);
        om.set_sigma(s, a, next, vec![r]);
    }
    for &t in terminals {
        b.terminal(t);
    }
    b.initial(0);
    Ok(Example { name: name.to_string(), mdp: b.build()?, outcomes: om, state_names: states.iter().map(|s| s.to_string()).collect() })
}

/// Source task of the transfer counterexample.
///
/// `α0 -b-> end (+1)`, `α0 -a-> α2 (0)`, and both actions from `α2` reach
/// `end` with `+1`. Undiscounted.
pub fn counterexample_alpha() -> Result<Example> {
    reward_example(
        "counterexample-alpha",
        &["alpha0", "alpha2", "end"],
        1.0,
        &[(0, ACTION_B, 2, 1.0, 1.0), (0, ACTION_A, 1, 1.0, 0.0), (1, ACTION_A, 2, 1.0, 1.0), (1, ACTION_B, 2, 1.0, 1.0)],
        &[2],
    )
}

/// Target task of the transfer counterexample.
///
/// `β0 -b-> end (+1)`; `β0 -a->` one of `β2a`, `β2b` with probability one
/// half each. From `β2a` action `a` pays `+2` and `b` pays `0`; `β2b` is the
/// mirror image. The agent observes which branch it is in, so the optimal
/// value at `β0` is 2 while every action sequence from `β0` matches `α0`.
pub fn counterexample_beta() -> Result<Example> {
    reward_example(
        "counterexample-beta",
        &["beta0", "beta2a", "beta2b", "end"],
        1.0,
        &[
            (0, ACTION_B, 3, 1.0, 1.0),
            (0, ACTION_A, 1, 0.5, 0.0),
            (0, ACTION_A, 2, 0.5, 0.0),
            (1, ACTION_A, 3, 1.0, 2.0),
            (1, ACTION_B, 3, 1.0, 0.0),
            (2, ACTION_A, 3, 1.0, 0.0),
            (2, ACTION_B, 3, 1.0, 2.0),
        ],
        &[3],
    )
}

/// The history-dependence example: `1 -a-> 2a`, `1 -b-> 2b`, then `2a`
/// always moves to `3` (reward 1) and `2b` always to `4` (reward 0).
pub fn history_example() -> Result<Example> {
    reward_example(
        "history",
        &["1", "2a", "2b", "3", "4"],
        0.9,
        &[
            (0, ACTION_A, 1, 1.0, 0.0),
            (0, ACTION_B, 2, 1.0, 0.0),
            (1, ACTION_A, 3, 1.0, 1.0),
            (1, ACTION_B, 3, 1.0, 1.0),
            (2, ACTION_A, 4, 1.0, 0.0),
            (2, ACTION_B, 4, 1.0, 0.0),
        ],
        &[3, 4],
    )
}

/// The abstraction merging `2a` with `2b` in [`history_example`].
pub fn history_merge() -> StateAbstraction {
    StateAbstraction::from_blocks(&[0, 1, 1, 2, 3], "h")
}

/// Bounds for [`random_deterministic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomMdpParams {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_dim: usize,
}

impl Default for RandomMdpParams {
    fn default() -> Self {
        RandomMdpParams { max_states: 8, max_actions: 3, max_dim: 2 }
    }
}

/// A seeded random deterministic MDP with an outcome model.
///
/// Outcomes are small integers so that distinct states often share expected
/// outcome sequences; reward weights are nonzero integers. Between zero and a
/// third of the states are terminal. The discount is 0.9.
pub fn random_deterministic(seed: u64, params: RandomMdpParams) -> Result<Example> {
    if params.max_states < 2 || params.max_actions == 0 || params.max_dim == 0 {
        return Err(Error::Config("random MDPs need at least 2 states, 1 action and 1 outcome component".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=params.max_states);
    let na = rng.random_range(1..=params.max_actions);
    let d = rng.random_range(1..=params.max_dim);
    let n_terminal = rng.random_range(0..=n / 3);
    let weights: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(1..=2) as f64).collect();
    let mut b = MdpBuilder::new(n, na, 0.9);
    let mut om = OutcomeModel::new(n, na, weights.clone());
    for s in 0..n - n_terminal {
        for a in 0..na {
            let next = rng.random_range(0..n);
            let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(-1..=1) as f64).collect();
            let r = sigma.iter().zip(&weights).map(|(x, w)| x * w).sum();
            b.transition(s, a, next, 1.0, r);
            om.set_sigma(s, a, next, sigma);
        }
    }
    for t in n - n_terminal..n {
        b.terminal(t);
    }
    b.initial(0);
    Ok(Example { name: format!("random-{seed}"), mdp: b.build()?, outcomes: om, state_names: (0..n).map(|s| s.to_string()).collect() })
}

/// Every deterministic transition structure on `n_states` states and
/// `n_actions` actions, as successor tables indexed `s * n_actions + a`.
///
/// Rewards are zero; the structures are meant for properties that depend only
/// on state and action counts or on reachability.
pub fn all_successor_tables(n_states: usize, n_actions: usize) -> impl Iterator<Item = Vec<usize>> {
    let cells = n_states * n_actions;
    let total = (n_states as u64).checked_pow(cells as u32).unwrap_or(u64::MAX);
    (0..total).map(move |mut code| {
        let mut table = vec![0; cells];
        for slot in table.iter_mut() {
            *slot = (code % n_states as u64) as usize;
            code /= n_states as u64;
        }
        table
    })
}

/// Builds the zero-reward deterministic MDP with the given successor table.
pub fn mdp_from_successors(n_states: usize, n_actions: usize, table: &[usize], discount: f64) -> Result<TabularMdp> {
    if table.len() != n_states * n_actions {
        return Err(Error::Dimension(format!("successor table of length {} for {n_states}x{n_actions}", table.len())));
    }
    let mut b = MdpBuilder::new(n_states, n_actions, discount);
    for s in 0..n_states {
        for a in 0..n_actions {
            b.transition(s, a, table[s * n_actions + a], 1.0, 0.0);
        }
    }
    b.build()
}

/// All set partitions of `0..n` as canonical block vectors (restricted growth
/// strings), in lexicographic order.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let limit = if prefix.is_empty() { 0 } else { max + 1 };
        for b in 0..=limit {
            prefix.push(b);
            extend(prefix, max.max(b), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
    } else {
        extend(&mut Vec::with_capacity(n), 0, n, &mut out);
    }
    out
}
