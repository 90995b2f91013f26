//! State abstractions and abstract MDPs.
//!
//! A [`StateAbstraction`] maps each ground state to a [`ClassLabel`]. Labels
//! are plain strings so that abstractions of different tasks can be compared
//! class by class; abstractions built from outcome fingerprints use the
//! fingerprint hex digest as label.
//!
//! The abstract MDP aggregates ground dynamics with a per-class
//! [`WeightingFn`]:
//!
//! | quantity | definition |
//! |---|---|
//! | `p_φ(c' \| c, a)` | `Σ_{s∈c} w(s) Σ_{s'∈c'} p(s' \| s, a)` |
//! | `r_φ(c, a, c')` | `Σ_{s∈c} w(s) Σ_{s'∈c'} p(s' \| s, a) r(s, a, s') / p_φ(c' \| c, a)` |
//!
//! so the expected abstract reward of `(c, a)` is the weighted mean of the
//! expected ground rewards.

mod transfer;

pub use transfer::{
    check_transfer_optimality, check_value_compatibility, enumerate_derived_deterministic, has_greater_transfer_value,
    optimal_abstract_policies, DerivedPolicies, OptimalityFailure, TransferOptimality, TransferValueOrder, DERIVED_POLICY_CAP,
};

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{MdpBuilder, TabularMdp, TabularPolicy};
use crate::outcomes::OutcomeModel;

/// Name of an abstract class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub String);

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassLabel {
    fn from(s: &str) -> Self {
        ClassLabel(s.to_string())
    }
}

/// A partition of ground states into labelled classes.
///
/// Classes are indexed in order of first appearance over the states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "AbstractionRecord", try_from = "AbstractionRecord")]
pub struct StateAbstraction {
    class_of: Vec<usize>,
    labels: Vec<ClassLabel>,
    members: Vec<Vec<usize>>,
    index: HashMap<ClassLabel, usize>,
}

#[derive(Serialize, Deserialize)]
struct AbstractionRecord {
    class_of: BTreeMap<usize, ClassLabel>,
}

impl From<StateAbstraction> for AbstractionRecord {
    fn from(phi: StateAbstraction) -> Self {
        AbstractionRecord { class_of: (0..phi.n_states()).map(|s| (s, phi.label_of(s).clone())).collect() }
    }
}

impl TryFrom<AbstractionRecord> for StateAbstraction {
    type Error = Error;

    fn try_from(r: AbstractionRecord) -> Result<Self> {
        let n = r.class_of.len();
        if r.class_of.keys().copied().ne(0..n) {
            return Err(Error::Index("abstraction map must cover states 0..n exactly once".into()));
        }
        Ok(StateAbstraction::from_labels(r.class_of.into_values().collect()))
    }
}

impl StateAbstraction {
    /// Builds an abstraction from one label per state.
    pub fn from_labels(labels_per_state: Vec<ClassLabel>) -> Self {
        let mut index: HashMap<ClassLabel, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut class_of = Vec::with_capacity(labels_per_state.len());
        for (s, label) in labels_per_state.into_iter().enumerate() {
            let c = *index.entry(label.clone()).or_insert_with(|| {
                labels.push(label);
                members.push(Vec::new());
                labels.len() - 1
            });
            members[c].push(s);
            class_of.push(c);
        }
        StateAbstraction { class_of, labels, members, index }
    }

    /// Builds an abstraction from block ids; labels are `prefix` followed by the id.
    pub fn from_blocks(blocks: &[usize], prefix: &str) -> Self {
        Self::from_labels(blocks.iter().map(|b| ClassLabel(format!("{prefix}{b}"))).collect())
    }

    /// Every state in its own class.
    pub fn identity(n_states: usize) -> Self {
        Self::from_blocks(&(0..n_states).collect::<Vec<_>>(), "s")
    }

    /// All states in one class.
    pub fn trivial(n_states: usize) -> Self {
        Self::from_blocks(&vec![0; n_states], "all")
    }

    pub fn n_states(&self) -> usize {
        self.class_of.len()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_of(&self, s: usize) -> usize {
        self.class_of[s]
    }

    pub fn class_indices(&self) -> &[usize] {
        &self.class_of
    }

    pub fn label_of(&self, s: usize) -> &ClassLabel {
        &self.labels[self.class_of[s]]
    }

    pub fn label(&self, c: usize) -> &ClassLabel {
        &self.labels[c]
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn class_index(&self, label: &ClassLabel) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn same_class(&self, s: usize, t: usize) -> bool {
        self.class_of[s] == self.class_of[t]
    }

    /// Canonical block ids (first appearance order); equal iff the partitions are equal.
    pub fn canonical_blocks(&self) -> Vec<usize> {
        self.class_of.clone()
    }

    /// Stable short identifier of this abstraction's label map.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for s in 0..self.n_states() {
            h.update(self.label_of(s).0.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Result of [`compare_coarseness`], read as "φ1 is … than φ2".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coarseness {
    StrictlyFiner,
    StrictlyCoarser,
    Isomorphic,
    Incomparable,
}

impl Coarseness {
    /// φ1 is finer than or isomorphic to φ2.
    pub fn is_finer(self) -> bool {
        matches!(self, Coarseness::StrictlyFiner | Coarseness::Isomorphic)
    }

    /// φ1 is coarser than or isomorphic to φ2.
    pub fn is_coarser(self) -> bool {
        matches!(self, Coarseness::StrictlyCoarser | Coarseness::Isomorphic)
    }
}

/// True when every pair merged by `fine` is also merged by `coarse`.
pub fn refines(fine: &StateAbstraction, coarse: &StateAbstraction) -> bool {
    let mut image: Vec<Option<usize>> = vec![None; fine.n_classes()];
    for s in 0..fine.n_states() {
        let c = fine.class_of(s);
        match image[c] {
            None => image[c] = Some(coarse.class_of(s)),
            Some(k) if k != coarse.class_of(s) => return false,
            _ => {}
        }
    }
    true
}

/// Compares two abstractions of the same state set by coarseness.
pub fn compare_coarseness(phi1: &StateAbstraction, phi2: &StateAbstraction) -> Result<Coarseness> {
    if phi1.n_states() != phi2.n_states() {
        return Err(Error::DomainMismatch { left: phi1.n_states(), right: phi2.n_states() });
    }
    Ok(match (refines(phi1, phi2), refines(phi2, phi1)) {
        (true, true) => Coarseness::Isomorphic,
        (true, false) => Coarseness::StrictlyFiner,
        (false, true) => Coarseness::StrictlyCoarser,
        (false, false) => Coarseness::Incomparable,
    })
}

/// Per-state weights summing to one within each abstract class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingFn {
    weights: Vec<f64>,
}

impl WeightingFn {
    /// Checks the weights against `phi`.
    pub fn new(weights: Vec<f64>, phi: &StateAbstraction) -> Result<Self> {
        if weights.len() != phi.n_states() {
            return Err(Error::InvalidWeighting(format!("{} weights for {} states", weights.len(), phi.n_states())));
        }
        let w = WeightingFn { weights };
        w.validate(phi)?;
        Ok(w)
    }

    /// Equal weight on every member of a class.
    pub fn uniform(phi: &StateAbstraction) -> Self {
        let mut weights = vec![0.0; phi.n_states()];
        for c in 0..phi.n_classes() {
            let m = phi.members(c);
            for &s in m {
                weights[s] = 1.0 / m.len() as f64;
            }
        }
        WeightingFn { weights }
    }

    /// All weight on the lowest-indexed member of each class.
    pub fn first_member(phi: &StateAbstraction) -> Self {
        let mut weights = vec![0.0; phi.n_states()];
        for c in 0..phi.n_classes() {
            weights[phi.members(c)[0]] = 1.0;
        }
        WeightingFn { weights }
    }

    /// Random positive weights, normalised per class.
    pub fn random<R: Rng + ?Sized>(phi: &StateAbstraction, rng: &mut R) -> Self {
        let mut weights: Vec<f64> = (0..phi.n_states()).map(|_| rng.random_range(0.05..1.0)).collect();
        for c in 0..phi.n_classes() {
            let total: f64 = phi.members(c).iter().map(|&s| weights[s]).sum();
            for &s in phi.members(c) {
                weights[s] /= total;
            }
        }
        WeightingFn { weights }
    }

    pub fn weight(&self, s: usize) -> f64 {
        self.weights[s]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn validate(&self, phi: &StateAbstraction) -> Result<()> {
        if self.weights.len() != phi.n_states() {
            return Err(Error::InvalidWeighting(format!("{} weights for {} states", self.weights.len(), phi.n_states())));
        }
        if let Some(s) = self.weights.iter().position(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidWeighting(format!("weight of state {s} is {}", self.weights[s])));
        }
        for c in 0..phi.n_classes() {
            let total: f64 = phi.members(c).iter().map(|&s| self.weights[s]).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidWeighting(format!("class {} sums to {total}", phi.label(c))));
            }
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            h.update(w.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Where an abstract MDP came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub ground_mdp: String,
    pub abstraction: String,
    pub weighting: String,
}

/// An MDP over abstract classes, with the labels of its states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractMdp {
    pub mdp: TabularMdp,
    pub phi: StateAbstraction,
    pub provenance: Provenance,
}

impl AbstractMdp {
    /// The abstract state set as an abstraction over itself, carrying the class labels.
    pub fn class_abstraction(&self) -> StateAbstraction {
        StateAbstraction::from_labels(self.phi.labels().to_vec())
    }
}

fn mdp_id(mdp: &TabularMdp) -> String {
    let text = serde_json::to_vec(mdp).expect("MDP serialises");
    hex::encode(&Sha256::digest(&text)[..8])
}

/// Aggregated transition mass and reward/outcome sums for one abstract row.
fn aggregate_row(mdp: &TabularMdp, phi: &StateAbstraction, w: &WeightingFn, c: usize, a: usize) -> BTreeMap<usize, (f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for &s in phi.members(c) {
        let ws = w.weight(s);
        if ws == 0.0 {
            continue;
        }
        for t in mdp.row(s, a) {
            let e = acc.entry(phi.class_of(t.next)).or_insert((0.0, 0.0));
            e.0 += ws * t.prob;
            e.1 += ws * t.prob * t.reward;
        }
    }
    acc
}

/// Builds the abstract MDP induced by `phi` and `w`.
///
/// A class is terminal when all its members are terminal.
pub fn build_abstract_mdp(mdp: &TabularMdp, phi: &StateAbstraction, w: &WeightingFn) -> Result<AbstractMdp> {
    if phi.n_states() != mdp.n_states() {
        return Err(Error::DomainMismatch { left: mdp.n_states(), right: phi.n_states() });
    }
    w.validate(phi)?;
    let nc = phi.n_classes();
    let mut b = MdpBuilder::new(nc, mdp.n_actions(), mdp.discount());
    for c in 0..nc {
        if phi.members(c).iter().all(|&s| mdp.is_terminal(s)) {
            b.terminal(c);
            continue;
        }
        for a in 0..mdp.n_actions() {
            for (next, (p, pr)) in aggregate_row(mdp, phi, w, c, a) {
                if p > 0.0 {
                    b.transition(c, a, next, p, pr / p);
                }
            }
        }
    }
    if let Some(s0) = mdp.initial_state() {
        b.initial(phi.class_of(s0));
    }
    Ok(AbstractMdp {
        mdp: b.build()?,
        phi: phi.clone(),
        provenance: Provenance { ground_mdp: mdp_id(mdp), abstraction: phi.id(), weighting: w.id() },
    })
}

/// Aggregates the outcome model with the same weighting; reward weights are copied.
pub fn abstract_outcome_model(mdp: &TabularMdp, om: &OutcomeModel, phi: &StateAbstraction, w: &WeightingFn) -> Result<OutcomeModel> {
    if phi.n_states() != mdp.n_states() || om.n_states() != mdp.n_states() {
        return Err(Error::DomainMismatch { left: mdp.n_states(), right: phi.n_states() });
    }
    w.validate(phi)?;
    let d = om.dim();
    let nc = phi.n_classes();
    let mut out = OutcomeModel::new(nc, mdp.n_actions(), om.reward_weights().to_vec()).with_story_mask(om.story_mask().to_vec());
    let labels: Vec<&str> = om.labels().iter().map(String::as_str).collect();
    out = out.with_labels(&labels);
    for c in 0..nc {
        if phi.members(c).iter().all(|&s| mdp.is_terminal(s)) {
            continue;
        }
        for a in 0..mdp.n_actions() {
            let mut mass: BTreeMap<usize, f64> = BTreeMap::new();
            let mut sig: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &s in phi.members(c) {
                let ws = w.weight(s);
                if ws == 0.0 {
                    continue;
                }
                for t in mdp.row(s, a) {
                    let k = phi.class_of(t.next);
                    *mass.entry(k).or_insert(0.0) += ws * t.prob;
                    let e = sig.entry(k).or_insert_with(|| vec![0.0; d]);
                    if let Some(x) = om.sigma(s, a, t.next) {
                        for i in 0..d {
                            e[i] += ws * t.prob * x[i];
                        }
                    }
                }
            }
            for (k, p) in mass {
                if p > 0.0 {
                    let v: Vec<f64> = sig[&k].iter().map(|x| x / p).collect();
                    out.set_sigma(c, a, k, v);
                }
            }
        }
    }
    Ok(out)
}

/// Ground policy that plays `abstract_policy` row `φ(s)` in every state `s`.
pub fn derive_policy(abstract_policy: &TabularPolicy, phi: &StateAbstraction) -> Result<TabularPolicy> {
    if abstract_policy.n_states() < phi.n_classes() {
        return Err(Error::MissingClass(phi.label(abstract_policy.n_states()).to_string()));
    }
    let rows = (0..phi.n_states()).map(|s| abstract_policy.row(phi.class_of(s)).to_vec()).collect();
    TabularPolicy::from_rows(rows)
}

/// Ground states of the β task whose class label also occurs in `phi_alpha`.
pub fn transfer_cover(phi_alpha: &StateAbstraction, phi_beta: &StateAbstraction) -> Vec<usize> {
    (0..phi_beta.n_states()).filter(|&s| phi_alpha.class_index(phi_beta.label_of(s)).is_some()).collect()
}

/// Derived rule on the transfer cover, `default` elsewhere. Also returns the cover.
///
/// `abstract_policy` rows are indexed by the classes of `phi_alpha`.
pub fn partially_derive(
    abstract_policy: &TabularPolicy,
    phi_alpha: &StateAbstraction,
    phi_beta: &StateAbstraction,
    default: &TabularPolicy,
) -> Result<(TabularPolicy, Vec<usize>)> {
    if default.n_states() != phi_beta.n_states() {
        return Err(Error::Dimension(format!("default policy has {} states, task has {}", default.n_states(), phi_beta.n_states())));
    }
    if abstract_policy.n_states() < phi_alpha.n_classes() {
        return Err(Error::MissingClass(phi_alpha.label(abstract_policy.n_states()).to_string()));
    }
    let mut cover = Vec::new();
    let rows = (0..phi_beta.n_states())
        .map(|s| match phi_alpha.class_index(phi_beta.label_of(s)) {
            Some(c) => {
                cover.push(s);
                abstract_policy.row(c).to_vec()
            }
            None => default.row(s).to_vec(),
        })
        .collect();
    Ok((TabularPolicy::from_rows(rows)?, cover))
}
