//! Brute-force comparisons between abstractions: derived-policy enumeration,
//! transfer value, value compatibility and transfer optimality.

use serde::{Deserialize, Serialize};

use super::{AbstractMdp, StateAbstraction};
use crate::error::{Error, Result};
use crate::mdp::{policy_evaluation, q_values, solve_optimal, MdpBuilder, SequenceIter, TabularMdp, TabularPolicy};

/// Largest number of deterministic policies any enumeration here will visit.
pub const DERIVED_POLICY_CAP: u128 = 4096;

const EVAL_TOL: f64 = 1e-12;

/// Iterator over the deterministic derived policies of an abstraction.
#[derive(Debug, Clone)]
pub struct DerivedPolicies<'a> {
    phi: &'a StateAbstraction,
    n_actions: usize,
    choices: SequenceIter,
}

impl DerivedPolicies<'_> {
    /// The next per-state action vector, without building a policy table.
    pub fn next_actions(&mut self) -> Option<Vec<usize>> {
        let per_class = self.choices.next()?;
        Some((0..self.phi.n_states()).map(|s| per_class[self.phi.class_of(s)]).collect())
    }
}

impl Iterator for DerivedPolicies<'_> {
    type Item = TabularPolicy;

    fn next(&mut self) -> Option<TabularPolicy> {
        let actions = self.next_actions()?;
        Some(TabularPolicy::deterministic(&actions, self.n_actions))
    }
}

fn check_cap(what: &'static str, base: usize, exp: usize) -> Result<()> {
    let size = (base as u128).checked_pow(exp as u32).unwrap_or(u128::MAX);
    if size > DERIVED_POLICY_CAP {
        return Err(Error::CapExceeded { what, size, cap: DERIVED_POLICY_CAP });
    }
    Ok(())
}

/// All deterministic policies that act identically within each class of `phi`.
///
/// Policies are produced in lexicographic order of their per-class actions.
pub fn enumerate_derived_deterministic<'a>(phi: &'a StateAbstraction, mdp: &TabularMdp) -> Result<DerivedPolicies<'a>> {
    if phi.n_states() != mdp.n_states() {
        return Err(Error::DomainMismatch { left: mdp.n_states(), right: phi.n_states() });
    }
    check_cap("deterministic derived policies", mdp.n_actions(), phi.n_classes())?;
    Ok(DerivedPolicies { phi, n_actions: mdp.n_actions(), choices: SequenceIter::new(mdp.n_actions(), phi.n_classes()) })
}

fn derived_values(phi: &StateAbstraction, mdp: &TabularMdp) -> Result<Vec<Vec<f64>>> {
    enumerate_derived_deterministic(phi, mdp)?.map(|pi| policy_evaluation(mdp, &pi, EVAL_TOL).map(|v| v.into_vec())).collect()
}

/// Outcome of [`has_greater_transfer_value`], read as "φ has … transfer value than φ′".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferValueOrder {
    /// Some derived policy of φ strictly dominates every derived policy of φ′.
    StrictlyGreater,
    /// Some derived policy of φ weakly dominates every derived policy of φ′.
    Greater,
    /// φ is not greater, but φ′ is greater than φ.
    NotGreater,
    /// Neither abstraction is greater than the other.
    Incomparable,
}

fn dominates(v: &[f64], w: &[f64], tol: f64) -> bool {
    v.iter().zip(w).all(|(a, b)| *a >= *b - tol)
}

fn strictly_dominates(v: &[f64], w: &[f64], tol: f64) -> bool {
    dominates(v, w, tol) && v.iter().zip(w).any(|(a, b)| *a > *b + tol)
}

fn envelope(values: &[Vec<f64>]) -> Vec<f64> {
    let n = values.first().map_or(0, Vec::len);
    (0..n).map(|s| values.iter().map(|v| v[s]).fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Compares the best derived policies of two abstractions of the same MDP.
pub fn has_greater_transfer_value(
    phi: &StateAbstraction,
    phi_prime: &StateAbstraction,
    mdp: &TabularMdp,
    tol: f64,
) -> Result<TransferValueOrder> {
    let vs = derived_values(phi, mdp)?;
    let vs_prime = derived_values(phi_prime, mdp)?;
    let strictly = vs.iter().any(|v| vs_prime.iter().all(|w| strictly_dominates(v, w, tol)));
    if strictly {
        return Ok(TransferValueOrder::StrictlyGreater);
    }
    let top_prime = envelope(&vs_prime);
    if vs.iter().any(|v| dominates(v, &top_prime, tol)) {
        return Ok(TransferValueOrder::Greater);
    }
    let top = envelope(&vs);
    if vs_prime.iter().any(|w| dominates(w, &top, tol)) {
        Ok(TransferValueOrder::NotGreater)
    } else {
        Ok(TransferValueOrder::Incomparable)
    }
}

/// Ground MDP in which cover states play the abstract policy and every other
/// state keeps its full action set.
fn restricted_mdp(
    abstract_policy: &TabularPolicy,
    abstract_phi: &StateAbstraction,
    ground: &TabularMdp,
    phi_beta: &StateAbstraction,
    negate: bool,
) -> Result<(TabularMdp, Vec<Option<usize>>)> {
    let sign = if negate { -1.0 } else { 1.0 };
    let na = ground.n_actions();
    let mut b = MdpBuilder::new(ground.n_states(), na, ground.discount());
    let mut class_on_cover = vec![None; ground.n_states()];
    for s in 0..ground.n_states() {
        let class = abstract_phi.class_index(phi_beta.label_of(s));
        class_on_cover[s] = class;
        if ground.is_terminal(s) {
            b.terminal(s);
            continue;
        }
        match class {
            Some(c) => {
                for slot in 0..na {
                    for a in 0..na {
                        let pa = abstract_policy.prob(c, a);
                        if pa == 0.0 {
                            continue;
                        }
                        for t in ground.row(s, a) {
                            b.transition(s, slot, t.next, pa * t.prob, sign * t.reward);
                        }
                    }
                }
            }
            None => {
                for a in 0..na {
                    for t in ground.row(s, a) {
                        b.transition(s, a, t.next, t.prob, sign * t.reward);
                    }
                }
            }
        }
    }
    Ok((b.build()?, class_on_cover))
}

/// Value bounds per ground state, then the abstract class of each cover state.
type ValueBounds = (Vec<f64>, Vec<f64>, Vec<Option<usize>>);

/// Largest and smallest value any partially derived policy attains in each
/// ground state, plus the abstract class of each cover state.
fn partial_value_bounds(
    abstract_policy: &TabularPolicy,
    abstract_phi: &StateAbstraction,
    ground: &TabularMdp,
    phi_beta: &StateAbstraction,
) -> Result<ValueBounds> {
    if abstract_policy.n_states() != abstract_phi.n_classes() {
        return Err(Error::Dimension(format!(
            "abstract policy covers {} classes, abstract MDP has {}",
            abstract_policy.n_states(),
            abstract_phi.n_classes()
        )));
    }
    if phi_beta.n_states() != ground.n_states() {
        return Err(Error::DomainMismatch { left: ground.n_states(), right: phi_beta.n_states() });
    }
    let (hi_mdp, classes) = restricted_mdp(abstract_policy, abstract_phi, ground, phi_beta, false)?;
    let (lo_mdp, _) = restricted_mdp(abstract_policy, abstract_phi, ground, phi_beta, true)?;
    let (_, hi) = solve_optimal(&hi_mdp, EVAL_TOL)?;
    let (_, lo_neg) = solve_optimal(&lo_mdp, EVAL_TOL)?;
    Ok((hi.into_vec(), lo_neg.values().iter().map(|x| -x).collect(), classes))
}

/// True iff every partially derived policy of `abstract_policy` has, on the
/// transfer cover, the abstract policy's value at the corresponding class.
///
/// `abstract_mdp.phi` supplies the class labels; `phi_beta` labels the ground
/// task. Off-cover behaviour ranges over all policies, handled by computing
/// the best and worst attainable values rather than enumerating defaults.
pub fn check_value_compatibility(
    abstract_policy: &TabularPolicy,
    abstract_mdp: &AbstractMdp,
    ground_mdp: &TabularMdp,
    phi_beta: &StateAbstraction,
    tol: f64,
) -> Result<bool> {
    Ok(first_incompatibility(abstract_policy, abstract_mdp, ground_mdp, phi_beta, tol)?.is_none())
}

fn first_incompatibility(
    abstract_policy: &TabularPolicy,
    abstract_mdp: &AbstractMdp,
    ground_mdp: &TabularMdp,
    phi_beta: &StateAbstraction,
    tol: f64,
) -> Result<Option<(usize, f64, f64, f64)>> {
    let v_abs = policy_evaluation(&abstract_mdp.mdp, abstract_policy, EVAL_TOL)?;
    let (hi, lo, classes) = partial_value_bounds(abstract_policy, &abstract_mdp.phi, ground_mdp, phi_beta)?;
    for s in 0..ground_mdp.n_states() {
        if let Some(c) = classes[s] {
            let target = v_abs[c];
            if (hi[s] - target).abs() > tol || (lo[s] - target).abs() > tol {
                return Ok(Some((s, lo[s], hi[s], target)));
            }
        }
    }
    Ok(None)
}

/// Every deterministic optimal policy of an abstract MDP, as per-class actions.
///
/// Terminal classes only use action 0 since all actions coincide there.
pub fn optimal_abstract_policies(mdp: &TabularMdp, tol: f64) -> Result<Vec<Vec<usize>>> {
    let (_, v) = solve_optimal(mdp, EVAL_TOL)?;
    let q = q_values(mdp, v.values());
    let na = mdp.n_actions();
    let choices: Vec<Vec<usize>> = (0..mdp.n_states())
        .map(|c| {
            if mdp.is_terminal(c) {
                return vec![0];
            }
            let row = &q[c * na..(c + 1) * na];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..na).filter(|&a| row[a] >= best - tol).collect()
        })
        .collect();
    let count = choices.iter().try_fold(1u128, |acc, c| acc.checked_mul(c.len() as u128)).unwrap_or(u128::MAX);
    if count > DERIVED_POLICY_CAP {
        return Err(Error::CapExceeded { what: "optimal abstract policies", size: count, cap: DERIVED_POLICY_CAP });
    }
    let mut out = vec![Vec::with_capacity(choices.len())];
    for options in &choices {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |&a| {
                    let mut p = prefix.clone();
                    p.push(a);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Why a transfer-optimality check failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimalityFailure {
    /// Some partially derived policy's value differs from the abstract value.
    ValueIncompatible { abstract_policy: Vec<usize>, state: usize, abstract_value: f64, derived_min: f64, derived_max: f64 },
    /// No partially derived policy reaches the ground optimum on the cover.
    SuboptimalOnCover { abstract_policy: Vec<usize>, state: usize, best_derived: f64, ground_optimal: f64 },
}

impl OptimalityFailure {
    pub fn state(&self) -> usize {
        match self {
            OptimalityFailure::ValueIncompatible { state, .. } | OptimalityFailure::SuboptimalOnCover { state, .. } => *state,
        }
    }
}

/// Result of [`check_transfer_optimality`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOptimality {
    pub optimal: bool,
    pub witness: Option<OptimalityFailure>,
}

/// Checks that every optimal abstract policy is derived value-compatible with
/// the ground task and can be partially derived into a policy that is optimal
/// on the transfer cover.
pub fn check_transfer_optimality(
    abstract_mdp: &AbstractMdp,
    ground: (&TabularMdp, &StateAbstraction),
    tol: f64,
) -> Result<TransferOptimality> {
    let (mdp_beta, phi_beta) = ground;
    let (_, v_star) = solve_optimal(mdp_beta, EVAL_TOL)?;
    let na = abstract_mdp.mdp.n_actions();
    for actions in optimal_abstract_policies(&abstract_mdp.mdp, tol)? {
        let pi = TabularPolicy::deterministic(&actions, na);
        if let Some((state, lo, hi, target)) = first_incompatibility(&pi, abstract_mdp, mdp_beta, phi_beta, tol)? {
            return Ok(TransferOptimality {
                optimal: false,
                witness: Some(OptimalityFailure::ValueIncompatible {
                    abstract_policy: actions,
                    state,
                    abstract_value: target,
                    derived_min: lo,
                    derived_max: hi,
                }),
            });
        }
        let (hi, _, classes) = partial_value_bounds(&pi, &abstract_mdp.phi, mdp_beta, phi_beta)?;
        for s in 0..mdp_beta.n_states() {
            if classes[s].is_some() && hi[s] < v_star[s] - tol {
                return Ok(TransferOptimality {
                    optimal: false,
                    witness: Some(OptimalityFailure::SuboptimalOnCover {
                        abstract_policy: actions,
                        state: s,
                        best_derived: hi[s],
                        ground_optimal: v_star[s],
                    }),
                });
            }
        }
    }
    Ok(TransferOptimality { optimal: true, witness: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{build_abstract_mdp, WeightingFn};

    fn fork() -> TabularMdp {
        // State 0 and 1: action 0 gives reward 1 from 0 but 0 from 1; action 1 the reverse.
        let mut b = MdpBuilder::new(3, 2, 0.9);
        b.transition(0, 0, 2, 1.0, 1.0).transition(0, 1, 2, 1.0, 0.0);
        b.transition(1, 0, 2, 1.0, 0.0).transition(1, 1, 2, 1.0, 1.0);
        b.terminal(2);
        b.build().unwrap()
    }

    #[test]
    fn derived_counts() {
        let mdp = fork();
        let one = StateAbstraction::trivial(3);
        let mut b = MdpBuilder::new(3, 3, 0.9);
        for s in 0..3 {
            for a in 0..3 {
                b.transition(s, a, s, 1.0, 0.0);
            }
        }
        let three = b.build().unwrap();
        assert_eq!(enumerate_derived_deterministic(&one, &three).unwrap().count(), 3);
        let id2 = StateAbstraction::identity(2);
        let mut b = MdpBuilder::new(2, 2, 0.9);
        for s in 0..2 {
            for a in 0..2 {
                b.transition(s, a, s, 1.0, 0.0);
            }
        }
        assert_eq!(enumerate_derived_deterministic(&id2, &b.build().unwrap()).unwrap().count(), 4);
        let merged = StateAbstraction::from_blocks(&[0, 0, 1], "c");
        for pi in enumerate_derived_deterministic(&merged, &mdp).unwrap() {
            assert_eq!(pi.row(0), pi.row(1));
        }
    }

    #[test]
    fn identity_beats_boundary_merge() {
        let mdp = fork();
        let id = StateAbstraction::identity(3);
        let merged = StateAbstraction::from_blocks(&[0, 0, 1], "c");
        assert_eq!(has_greater_transfer_value(&id, &merged, &mdp, 1e-9).unwrap(), TransferValueOrder::StrictlyGreater);
        assert_eq!(has_greater_transfer_value(&merged, &id, &mdp, 1e-9).unwrap(), TransferValueOrder::NotGreater);
        assert_eq!(has_greater_transfer_value(&id, &id, &mdp, 1e-9).unwrap(), TransferValueOrder::Greater);
    }

    #[test]
    fn identity_abstraction_is_compatible_and_transfer_optimal() {
        let mdp = fork();
        let id = StateAbstraction::identity(3);
        let abs = build_abstract_mdp(&mdp, &id, &WeightingFn::uniform(&id)).unwrap();
        for actions in optimal_abstract_policies(&abs.mdp, 1e-9).unwrap() {
            let pi = TabularPolicy::deterministic(&actions, 2);
            assert!(check_value_compatibility(&pi, &abs, &mdp, &id, 1e-9).unwrap());
        }
        let res = check_transfer_optimality(&abs, (&mdp, &id), 1e-9).unwrap();
        assert!(res.optimal, "{res:?}");
    }

    #[test]
    fn cap_exceeded_is_reported() {
        let mut b = MdpBuilder::new(13, 2, 0.9);
        for s in 0..13 {
            b.transition(s, 0, s, 1.0, 0.0).transition(s, 1, s, 1.0, 0.0);
        }
        let mdp = b.build().unwrap();
        let id = StateAbstraction::identity(13);
        assert!(matches!(enumerate_derived_deterministic(&id, &mdp), Err(Error::CapExceeded { .. })));
    }
}
