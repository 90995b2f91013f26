//! Brute-force checks of the abstraction and transfer results.
//!
//! Each check returns a [`CheckReport`] with the number of cases examined and,
//! on failure, a human-readable witness. The checks are used both by the test
//! suite and by the `verify-theory` command.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstraction::{
    abstract_outcome_model, build_abstract_mdp, check_transfer_optimality, check_value_compatibility, derive_policy,
    enumerate_derived_deterministic, has_greater_transfer_value, optimal_abstract_policies, refines, StateAbstraction, TransferOptimality,
    TransferValueOrder, WeightingFn,
};
use crate::error::Result;
use crate::harness::derive_seed;
use crate::mdp::{is_plannable_up_to, policy_evaluation, solve_optimal, TabularMdp, TabularPolicy};
use crate::outcomes::{check_reward_decomposition, minimal_outcome_equivalent_abstraction};
use crate::zoo::{self, RandomMdpParams};

/// Result of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub witness: Option<String>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        CheckReport { name: name.to_string(), passed: true, cases: 0, witness: None }
    }

    fn fail(&mut self, witness: String) {
        if self.passed {
            self.passed = false;
            self.witness = Some(witness);
        }
    }

    /// One line: `PASS name (cases)` or `FAIL name (cases): witness`.
    pub fn line(&self) -> String {
        let mut s = format!("{} {} ({} cases)", if self.passed { "PASS" } else { "FAIL" }, self.name, self.cases);
        if let Some(w) = &self.witness {
            let _ = write!(s, ": {w}");
        }
        s
    }
}

/// Settings for [`run_all`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub seed: u64,
    pub random_mdps: usize,
    pub params: RandomMdpParams,
    /// Largest state count for the exhaustive control checks.
    pub max_states: usize,
    pub exhaustive_actions: usize,
    /// Random stochastic derived policies per MDP in the value-equivalence check.
    pub random_policies: usize,
    pub tol: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            seed: 0,
            random_mdps: 200,
            params: RandomMdpParams::default(),
            max_states: 4,
            exhaustive_actions: 2,
            random_policies: 200,
            tol: 1e-9,
        }
    }
}

/// Per-state action choices encoded as a base-`n_actions` integer.
fn encode(actions: &[usize], n_actions: usize) -> u64 {
    actions.iter().rev().fold(0u64, |acc, &a| acc * n_actions as u64 + a as u64)
}

fn derived_codes(phi: &StateAbstraction, mdp: &TabularMdp) -> Result<Vec<u64>> {
    let mut it = enumerate_derived_deterministic(phi, mdp)?;
    let mut out = Vec::new();
    while let Some(actions) = it.next_actions() {
        out.push(encode(&actions, mdp.n_actions()));
    }
    out.sort_unstable();
    Ok(out)
}

/// `a ⊆ b` for sorted, deduplicated slices.
fn is_subset(a: &[u64], b: &[u64]) -> bool {
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j == b.len() || b[j] != x {
            return false;
        }
    }
    true
}

fn digit(code: u64, s: usize, n_actions: usize) -> u64 {
    (code / (n_actions as u64).pow(s as u32)) % n_actions as u64
}

/// Two states share a class exactly when every derived policy acts the same
/// on both. Exhaustive over every deterministic transition structure and every
/// abstraction with up to `max_states` states.
pub fn control_granularity(max_states: usize, n_actions: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("merged states share actions in every derived policy");
    for n in 1..=max_states {
        let partitions: Vec<StateAbstraction> = zoo::set_partitions(n).iter().map(|b| StateAbstraction::from_blocks(b, "c")).collect();
        for table in zoo::all_successor_tables(n, n_actions) {
            let mdp = zoo::mdp_from_successors(n, n_actions, &table, 0.9)?;
            for phi in &partitions {
                let codes = derived_codes(phi, &mdp)?;
                report.cases += 1;
                for s in 0..n {
                    for t in s + 1..n {
                        let differs = codes.iter().any(|&c| digit(c, s, n_actions) != digit(c, t, n_actions));
                        if phi.same_class(s, t) == differs {
                            report.fail(format!("n={n} successors={table:?} blocks={:?} states ({s},{t})", phi.canonical_blocks()));
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// φ is at least as fine as φ′ exactly when every policy derived from φ′ is
/// also derived from φ. Exhaustive over all pairs of abstractions.
pub fn coarseness_containment(max_states: usize, n_actions: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("finer abstraction iff larger derived policy set");
    for n in 1..=max_states {
        let partitions: Vec<StateAbstraction> = zoo::set_partitions(n).iter().map(|b| StateAbstraction::from_blocks(b, "c")).collect();
        for table in zoo::all_successor_tables(n, n_actions) {
            let mdp = zoo::mdp_from_successors(n, n_actions, &table, 0.9)?;
            let sets = partitions.iter().map(|p| derived_codes(p, &mdp)).collect::<Result<Vec<_>>>()?;
            for (i, phi) in partitions.iter().enumerate() {
                for (j, phi2) in partitions.iter().enumerate() {
                    report.cases += 1;
                    if refines(phi, phi2) != is_subset(&sets[j], &sets[i]) {
                        report.fail(format!(
                            "n={n} successors={table:?} fine={:?} coarse={:?}",
                            phi.canonical_blocks(),
                            phi2.canonical_blocks()
                        ));
                    }
                }
            }
        }
    }
    Ok(report)
}

/// A strictly greater transfer value for φ over φ′ requires a pair of states
/// that φ separates and φ′ merges, and a φ-derived policy that φ′ cannot
/// produce. Searched over all abstraction pairs of seeded random MDPs.
pub fn transfer_value_tradeoff(n_mdps: usize, seed: u64, max_states: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("strictly greater transfer value needs extra control");
    let params = RandomMdpParams { max_states, max_actions: 2, max_dim: 2 };
    for i in 0..n_mdps {
        let ex = zoo::random_deterministic(derive_seed(seed, "theory-tradeoff", i as u64), params)?;
        let mdp = &ex.mdp;
        let n = mdp.n_states();
        let partitions: Vec<StateAbstraction> = zoo::set_partitions(n).iter().map(|b| StateAbstraction::from_blocks(b, "c")).collect();
        let sets = partitions.iter().map(|p| derived_codes(p, mdp)).collect::<Result<Vec<_>>>()?;
        for (a, phi) in partitions.iter().enumerate() {
            for (b, phi2) in partitions.iter().enumerate() {
                if a == b {
                    continue;
                }
                report.cases += 1;
                if has_greater_transfer_value(phi, phi2, mdp, 1e-9)? == TransferValueOrder::StrictlyGreater
                    && (refines(phi2, phi) || is_subset(&sets[a], &sets[b]))
                {
                    report.fail(format!("{} phi={:?} phi'={:?}", ex.name, phi.canonical_blocks(), phi2.canonical_blocks()));
                }
            }
        }
    }
    Ok(report)
}

fn random_policy<R: Rng + ?Sized>(n: usize, na: usize, rng: &mut R) -> Result<TabularPolicy> {
    let rows = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        })
        .collect();
    TabularPolicy::from_rows(rows)
}

/// Transfer guarantees of minimal outcome-equivalent abstractions on random
/// deterministic (hence plannable) MDPs.
///
/// Returns five reports: value compatibility of optimal abstract policies,
/// transfer optimality, equal values of equivalent states under random
/// derived policies, plannability of the abstract MDP, and reward decomposition of
/// the abstract outcome model. Every check runs under three weightings.
pub fn transfer_suite(config: &TheoryConfig) -> Result<Vec<CheckReport>> {
    let mut compat = CheckReport::new("optimal abstract policies are value-compatible");
    let mut optimal = CheckReport::new("outcome-equivalent abstraction is transfer optimal");
    let mut equal_values = CheckReport::new("equivalent states share values under every derived policy");
    let mut plannable = CheckReport::new("abstract MDP is plannable");
    let mut decomposition = CheckReport::new("abstract outcome model reproduces abstract rewards");
    for i in 0..config.random_mdps {
        let ex = zoo::random_deterministic(derive_seed(config.seed, "theory-mdp", i as u64), config.params)?;
        let (mdp, om) = (&ex.mdp, &ex.outcomes);
        let n = mdp.n_states();
        let phi = minimal_outcome_equivalent_abstraction(mdp, om, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "theory-policy", i as u64));

        for _ in 0..config.random_policies {
            let pi = derive_policy(&random_policy(phi.n_classes(), mdp.n_actions(), &mut rng)?, &phi)?;
            let v = policy_evaluation(mdp, &pi, 1e-12)?;
            equal_values.cases += 1;
            for s in 0..n {
                let rep = phi.members(phi.class_of(s))[0];
                if (v[s] - v[rep]).abs() > config.tol {
                    equal_values.fail(format!("{} states {rep},{s}: {} vs {}", ex.name, v[rep], v[s]));
                }
            }
        }

        let weightings = [WeightingFn::uniform(&phi), WeightingFn::first_member(&phi), WeightingFn::random(&phi, &mut rng)];
        for w in &weightings {
            let abs = build_abstract_mdp(mdp, &phi, w)?;
            for actions in optimal_abstract_policies(&abs.mdp, config.tol)? {
                compat.cases += 1;
                let pi = TabularPolicy::deterministic(&actions, mdp.n_actions());
                if !check_value_compatibility(&pi, &abs, mdp, &phi, config.tol)? {
                    compat.fail(format!("{} weighting {} abstract policy {actions:?}", ex.name, w.id()));
                }
            }
            optimal.cases += 1;
            let res: TransferOptimality = check_transfer_optimality(&abs, (mdp, &phi), config.tol)?;
            if !res.optimal {
                optimal.fail(format!("{} weighting {}: {:?}", ex.name, w.id(), res.witness));
            }
            plannable.cases += 1;
            if !is_plannable_up_to(&abs.mdp, 3, config.tol)? {
                plannable.fail(format!("{} weighting {}", ex.name, w.id()));
            }
            decomposition.cases += 1;
            let abs_om = abstract_outcome_model(mdp, om, &phi, w)?;
            if !check_reward_decomposition(&abs.mdp, &abs_om, config.tol)? {
                decomposition.fail(format!("{} weighting {}", ex.name, w.id()));
            }
        }
    }
    Ok(vec![compat, optimal, equal_values, plannable, decomposition])
}

/// The quantities of the outcome-equivalent transfer counterexample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    /// Optimal value of the class shared by the two start states, in the source abstraction.
    pub abstract_value: f64,
    /// Optimal value of the target start state.
    pub ground_value: f64,
    pub start_states_share_class: bool,
    pub transfer: TransferOptimality,
    pub target_plannable: bool,
}

/// Builds the source abstraction from fingerprints of horizon 3, checks it
/// against the target task, and reports the relevant values.
pub fn counterexample() -> Result<Counterexample> {
    let alpha = zoo::counterexample_alpha()?;
    let beta = zoo::counterexample_beta()?;
    let horizon = 3;
    let phi_a = minimal_outcome_equivalent_abstraction(&alpha.mdp, &alpha.outcomes, horizon)?;
    let phi_b = minimal_outcome_equivalent_abstraction(&beta.mdp, &beta.outcomes, horizon)?;
    let abs = build_abstract_mdp(&alpha.mdp, &phi_a, &WeightingFn::uniform(&phi_a))?;
    let (_, v_abs) = solve_optimal(&abs.mdp, 1e-12)?;
    let (_, v_beta) = solve_optimal(&beta.mdp, 1e-12)?;
    let class = phi_a.class_of(0);
    Ok(Counterexample {
        abstract_value: v_abs[class],
        ground_value: v_beta[0],
        start_states_share_class: phi_a.label_of(0) == phi_b.label_of(0),
        transfer: check_transfer_optimality(&abs, (&beta.mdp, &phi_b), 1e-9)?,
        target_plannable: is_plannable_up_to(&beta.mdp, 2, 1e-9)?,
    })
}

/// Merging `2a` with `2b` in the history example gives a class whose
/// one-step prediction depends on the weighting, while the ground successor
/// depends on the action taken before. Returns the probability of moving to
/// the class of `3` under weightings that put all mass on `2a` and on `2b`.
pub fn history_dependence() -> Result<(f64, f64)> {
    let ex = zoo::history_example()?;
    let phi = zoo::history_merge();
    let merged = phi.class_of(1);
    let target = phi.class_of(3);
    let mut probs = Vec::new();
    for heavy in [1usize, 2] {
        let weights = (0..5).map(|s| if s == heavy || !phi.same_class(s, 1) { 1.0 } else { 0.0 }).collect();
        let abs = build_abstract_mdp(&ex.mdp, &phi, &WeightingFn::new(weights, &phi)?)?;
        probs.push(abs.mdp.prob(merged, zoo::ACTION_A, target));
    }
    Ok((probs[0], probs[1]))
}

/// Runs every theory check.
pub fn run_all(config: &TheoryConfig) -> Result<Vec<CheckReport>> {
    let mut out = transfer_suite(config)?;
    out.push(control_granularity(config.max_states, config.exhaustive_actions)?);
    out.push(coarseness_containment(config.max_states, config.exhaustive_actions)?);
    out.push(transfer_value_tradeoff(config.random_mdps.min(50), config.seed, config.max_states.min(4))?);

    let mut cx = CheckReport::new("outcome equivalence alone does not guarantee transfer");
    cx.cases = 1;
    let c = counterexample()?;
    if !(c.start_states_share_class
        && (c.abstract_value - 1.0).abs() < 1e-9
        && (c.ground_value - 2.0).abs() < 1e-9
        && !c.transfer.optimal
        && c.transfer.witness.as_ref().map(|w| w.state()) == Some(0)
        && !c.target_plannable)
    {
        cx.fail(format!("{c:?}"));
    }
    out.push(cx);
    Ok(out)
}
