//! Outcome models and expected outcome sequences.
//!
//! An [`OutcomeModel`] attaches a task-agnostic vector `σ(s, a, s') ∈ R^d` to
//! every transition, with the task reward recovered as `r = σ · w_r`. Two
//! states are outcome equivalent when every fixed action sequence produces the
//! same expected outcome at every step.
//!
//! Fingerprints summarise all expected outcome sequences up to a horizon.
//! Only the final-step outcome of every sequence is hashed; the earlier steps
//! are the final steps of its prefixes, which are hashed in their own right.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::{ClassLabel, StateAbstraction};
use crate::error::{Error, Result};
use crate::mdp::{merge_dist, TabularMdp};

/// Default quantisation step applied before hashing outcome values.
pub const DEFAULT_RESOLUTION: f64 = 1e-9;

/// Default cap on the number of action sequences a single fingerprint may cover.
pub const DEFAULT_SEQUENCE_CAP: u128 = 1 << 26;

/// Outcome vectors keyed by `(state, action, next)`.
type SigmaTable = BTreeMap<(usize, usize, usize), Vec<f64>>;

/// Per-transition outcome vectors plus reward weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    reward_weights: Vec<f64>,
    labels: Vec<String>,
    story_mask: Vec<bool>,
    /// Non-zero outcomes only, keyed by `(state, action, next)`.
    #[serde(with = "entries_serde")]
    entries: SigmaTable,
}

mod entries_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        state: usize,
        action: usize,
        next: usize,
        sigma: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &SigmaTable, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m.iter().map(|(&(state, action, next), sigma)| Entry { state, action, next, sigma: sigma.clone() }).collect();
        v.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<SigmaTable, D::Error> {
        let v = Vec::<Entry>::deserialize(de)?;
        Ok(v.into_iter().map(|e| ((e.state, e.action, e.next), e.sigma)).collect())
    }
}

impl OutcomeModel {
    /// An all-zero model of dimension `reward_weights.len()`.
    pub fn new(n_states: usize, n_actions: usize, reward_weights: Vec<f64>) -> Self {
        let dim = reward_weights.len();
        OutcomeModel {
            n_states,
            n_actions,
            dim,
            reward_weights,
            labels: (0..dim).map(|i| format!("o{i}")).collect(),
            story_mask: vec![true; dim],
            entries: BTreeMap::new(),
        }
    }

    /// Names the outcome components (used by stories and reports).
    pub fn with_labels(mut self, labels: &[&str]) -> Self {
        assert_eq!(labels.len(), self.dim, "one label per outcome component");
        self.labels = labels.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Selects which components may appear in stories.
    pub fn with_story_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.dim, "one mask entry per outcome component");
        self.story_mask = mask;
        self
    }

    /// Sets `σ(s, a, next)`. All-zero vectors are not stored.
    pub fn set_sigma(&mut self, s: usize, a: usize, next: usize, sigma: Vec<f64>) {
        assert_eq!(sigma.len(), self.dim, "outcome vector has wrong dimension");
        if sigma.iter().all(|&x| x == 0.0) {
            self.entries.remove(&(s, a, next));
        } else {
            self.entries.insert((s, a, next), sigma);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward_weights(&self) -> &[f64] {
        &self.reward_weights
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn story_mask(&self) -> &[bool] {
        &self.story_mask
    }

    /// `σ(s, a, next)`, or `None` when it is the zero vector.
    pub fn sigma(&self, s: usize, a: usize, next: usize) -> Option<&[f64]> {
        self.entries.get(&(s, a, next)).map(Vec::as_slice)
    }

    /// `σ(s, a, next)` as an owned vector, zeros included.
    pub fn sigma_vec(&self, s: usize, a: usize, next: usize) -> Vec<f64> {
        self.sigma(s, a, next).map_or_else(|| vec![0.0; self.dim], <[f64]>::to_vec)
    }

    /// Iterates over all stored non-zero outcomes.
    pub fn nonzero_entries(&self) -> impl Iterator<Item = ((usize, usize, usize), &[f64])> {
        self.entries.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Copy with different reward weights (same outcomes, different task).
    pub fn with_reward_weights(&self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.dim {
            return Err(Error::Dimension(format!("reward weights of length {} for d = {}", w.len(), self.dim)));
        }
        Ok(OutcomeModel { reward_weights: w, ..self.clone() })
    }

    fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Dimension(format!(
                "outcome model is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    /// Dense table of `E[σ(s, a, S')]`, laid out `(s, a, component)`.
    pub fn expected_table(&self, mdp: &TabularMdp) -> Result<Vec<f64>> {
        self.check_compatible(mdp)?;
        let d = self.dim;
        let mut table = vec![0.0; mdp.n_states() * mdp.n_actions() * d];
        for (&(s, a, next), sigma) in &self.entries {
            let p = mdp.prob(s, a, next);
            let base = (s * mdp.n_actions() + a) * d;
            for (c, &x) in sigma.iter().enumerate() {
                table[base + c] += p * x;
            }
        }
        Ok(table)
    }
}

/// True iff `r = σ · w_r` holds within `tol` on every transition with positive probability.
pub fn check_reward_decomposition(mdp: &TabularMdp, om: &OutcomeModel, tol: f64) -> Result<bool> {
    om.check_compatible(mdp)?;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            for t in mdp.row(s, a) {
                if t.prob <= 0.0 {
                    continue;
                }
                let predicted: f64 = om.sigma(s, a, t.next).map_or(0.0, |sig| sig.iter().zip(&om.reward_weights).map(|(x, w)| x * w).sum());
                if (predicted - t.reward).abs() > tol {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Per-step expected outcomes of a fixed action sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcomeSequence {
    pub entries: Vec<Vec<f64>>,
}

impl ExpectedOutcomeSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_sequence(mdp: &TabularMdp, s: usize, aseq: &[usize]) -> Result<()> {
    mdp.check_state(s)?;
    if aseq.is_empty() {
        return Err(Error::Config("action sequence must be non-empty".into()));
    }
    aseq.iter().try_for_each(|&a| mdp.check_action(a))
}

/// Expected outcome at each step of `aseq` executed from `s`.
pub fn expected_outcome_sequence(mdp: &TabularMdp, om: &OutcomeModel, s: usize, aseq: &[usize]) -> Result<ExpectedOutcomeSequence> {
    om.check_compatible(mdp)?;
    check_sequence(mdp, s, aseq)?;
    let table = om.expected_table(mdp)?;
    let d = om.dim();
    let na = mdp.n_actions();
    let mut dist = vec![(s, 1.0)];
    let mut entries = Vec::with_capacity(aseq.len());
    for &a in aseq {
        let mut out = vec![0.0; d];
        let mut next = Vec::new();
        for &(x, p) in &dist {
            let base = (x * na + a) * d;
            for c in 0..d {
                out[c] += p * table[base + c];
            }
            for t in mdp.row(x, a) {
                next.push((t.next, p * t.prob));
            }
        }
        entries.push(out);
        dist = merge_dist(next);
    }
    Ok(ExpectedOutcomeSequence { entries })
}

/// Maximum number of sample paths enumerated by [`outcome_sequence_distribution`].
pub const DISTRIBUTION_PATH_CAP: usize = 1 << 20;

/// A realised outcome sequence and its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSequenceProb {
    pub outcomes: Vec<Vec<f64>>,
    pub prob: f64,
}

/// Distribution over realised outcome sequences of `aseq` from `s`.
///
/// Sequences are identified after quantising every outcome at
/// [`DEFAULT_RESOLUTION`]; the result is sorted by that quantised key.
pub fn outcome_sequence_distribution(mdp: &TabularMdp, om: &OutcomeModel, s: usize, aseq: &[usize]) -> Result<Vec<OutcomeSequenceProb>> {
    om.check_compatible(mdp)?;
    check_sequence(mdp, s, aseq)?;
    let d = om.dim();
    // Paths are merged whenever they agree on (quantised history, current state).
    type Key = (Vec<i64>, usize);
    let mut frontier: BTreeMap<Key, (Vec<Vec<f64>>, f64)> = BTreeMap::new();
    frontier.insert((Vec::new(), s), (Vec::new(), 1.0));
    for &a in aseq {
        let mut next: BTreeMap<Key, (Vec<Vec<f64>>, f64)> = BTreeMap::new();
        for ((qkey, x), (hist, p)) in frontier {
            for t in mdp.row(x, a) {
                if t.prob <= 0.0 {
                    continue;
                }
                let sigma = om.sigma_vec(x, a, t.next);
                let mut k = qkey.clone();
                k.extend(sigma.iter().map(|&v| quantize(v, DEFAULT_RESOLUTION)));
                let entry = next.entry((k, t.next)).or_insert_with(|| {
                    let mut h = hist.clone();
                    h.push(sigma.clone());
                    (h, 0.0)
                });
                entry.1 += p * t.prob;
            }
        }
        if next.len() > DISTRIBUTION_PATH_CAP {
            return Err(Error::CapExceeded {
                what: "outcome-sequence paths",
                size: next.len() as u128,
                cap: DISTRIBUTION_PATH_CAP as u128,
            });
        }
        frontier = next;
    }
    let mut merged: BTreeMap<Vec<i64>, OutcomeSequenceProb> = BTreeMap::new();
    for ((qkey, _), (hist, p)) in frontier {
        merged.entry(qkey).or_insert_with(|| OutcomeSequenceProb { outcomes: hist, prob: 0.0 }).prob += p;
    }
    debug_assert!(merged.values().all(|e| e.outcomes.iter().all(|o| o.len() == d)));
    Ok(merged.into_values().collect())
}

pub(crate) fn quantize(x: f64, resolution: f64) -> i64 {
    let q = (x / resolution).round();
    // Avoid distinguishing -0 from 0.
    if q == 0.0 {
        0
    } else {
        q as i64
    }
}

/// How terminal states are treated by fingerprints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TerminalMarking {
    /// A terminal state has no future at all and forms its own class.
    #[default]
    Distinct,
    /// A terminal state is indistinguishable from any state whose future outcomes are all zero.
    AsZeroFuture,
}

/// Parameters of fingerprint construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerprintConfig {
    pub horizon: usize,
    pub resolution: f64,
    pub terminal: TerminalMarking,
    pub sequence_cap: u128,
}

impl FingerprintConfig {
    pub fn new(horizon: usize) -> Self {
        FingerprintConfig {
            horizon,
            resolution: DEFAULT_RESOLUTION,
            terminal: TerminalMarking::default(),
            sequence_cap: DEFAULT_SEQUENCE_CAP,
        }
    }

    pub fn with_terminal(mut self, terminal: TerminalMarking) -> Self {
        self.terminal = terminal;
        self
    }
}

/// Digest of all quantised expected outcome sequences up to a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutcomeFingerprint {
    pub horizon: usize,
    digest: [u8; 32],
}

impl OutcomeFingerprint {
    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// Class label used by abstractions built from fingerprints.
    pub fn label(&self) -> ClassLabel {
        ClassLabel(self.to_hex())
    }
}

impl fmt::Display for OutcomeFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Number of action sequences of length `1..=horizon` over `n_actions`.
pub fn sequences_up_to(n_actions: usize, horizon: usize) -> u128 {
    let a = n_actions as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..horizon {
        pow = pow.saturating_mul(a);
        total = total.saturating_add(pow);
    }
    total
}

/// Precomputed tables for repeated walks over expected outcome sequences of one task.
///
/// The walker visits every action sequence of length `1..=horizon` in
/// lexicographic depth-first order, reporting the expected outcome of its final
/// step. Subtrees whose state distribution is supported on states that can
/// never produce a non-zero outcome are skipped, since all their outcomes are zero.
pub struct SequenceWalker<'m> {
    mdp: &'m TabularMdp,
    table: Vec<f64>,
    silent: Vec<bool>,
    dim: usize,
}

impl<'m> SequenceWalker<'m> {
    pub fn new(mdp: &'m TabularMdp, om: &OutcomeModel) -> Result<Self> {
        let table = om.expected_table(mdp)?;
        let n = mdp.n_states();
        let na = mdp.n_actions();
        let d = om.dim();
        let mut emits = vec![false; n];
        for &(s, _, _) in om.entries.keys() {
            emits[s] = true;
        }
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in 0..n {
            for a in 0..na {
                for t in mdp.row(s, a) {
                    if t.prob > 0.0 {
                        preds[t.next].push(s);
                    }
                }
            }
        }
        let mut audible = emits.clone();
        let mut stack: Vec<usize> = (0..n).filter(|&s| emits[s]).collect();
        while let Some(x) = stack.pop() {
            for &p in &preds[x] {
                if !audible[p] {
                    audible[p] = true;
                    stack.push(p);
                }
            }
        }
        Ok(SequenceWalker { mdp, table, silent: audible.iter().map(|&b| !b).collect(), dim: d })
    }

    pub fn mdp(&self) -> &TabularMdp {
        self.mdp
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when no outcome can ever be produced from `s`.
    pub fn is_silent(&self, s: usize) -> bool {
        self.silent[s]
    }

    /// Calls `visit(len, rank, outcome)` for every non-skipped sequence, where
    /// `rank` is the lexicographic index of the sequence among those of length `len`.
    pub fn walk<F: FnMut(usize, u64, &[f64])>(&self, s: usize, horizon: usize, mut visit: F) {
        if horizon == 0 || self.silent[s] {
            return;
        }
        let mut bufs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); horizon];
        let mut scratch = vec![0.0; self.dim];
        let start = [(s, 1.0)];
        self.recurse(&start, 0, 0, horizon, &mut bufs, &mut scratch, &mut visit);
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse<F: FnMut(usize, u64, &[f64])>(
        &self,
        dist: &[(usize, f64)],
        depth: usize,
        rank: u64,
        horizon: usize,
        bufs: &mut [Vec<(usize, f64)>],
        scratch: &mut [f64],
        visit: &mut F,
    ) {
        let na = self.mdp.n_actions();
        let d = self.dim;
        let (mine, rest) = bufs.split_first_mut().expect("one buffer per depth");
        for a in 0..na {
            let r = rank * na as u64 + a as u64;
            scratch.iter_mut().for_each(|x| *x = 0.0);
            for &(x, p) in dist {
                let base = (x * na + a) * d;
                for c in 0..d {
                    scratch[c] += p * self.table[base + c];
                }
            }
            visit(depth + 1, r, scratch);
            if depth + 1 >= horizon {
                continue;
            }
            mine.clear();
            for &(x, p) in dist {
                for t in self.mdp.row(x, a) {
                    if t.prob > 0.0 && !self.silent[t.next] {
                        mine.push((t.next, p * t.prob));
                    }
                }
            }
            if mine.is_empty() {
                continue;
            }
            if mine.len() > 1 {
                let merged = merge_dist(std::mem::take(mine));
                *mine = merged;
            }
            self.recurse(mine, depth + 1, r, horizon, rest, scratch, visit);
        }
    }
}

/// Computes fingerprints for the states of one task.
pub struct Fingerprinter<'m> {
    walker: SequenceWalker<'m>,
    config: FingerprintConfig,
}

impl<'m> Fingerprinter<'m> {
    pub fn new(mdp: &'m TabularMdp, om: &OutcomeModel, config: FingerprintConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::Config("fingerprint horizon must be at least 1".into()));
        }
        let count = sequences_up_to(mdp.n_actions(), config.horizon);
        if count > config.sequence_cap {
            return Err(Error::CapExceeded { what: "action sequences per fingerprint", size: count, cap: config.sequence_cap });
        }
        Ok(Fingerprinter { walker: SequenceWalker::new(mdp, om)?, config })
    }

    pub fn config(&self) -> &FingerprintConfig {
        &self.config
    }

    pub fn fingerprint(&self, s: usize) -> Result<OutcomeFingerprint> {
        let mdp = self.walker.mdp();
        mdp.check_state(s)?;
        let cfg = &self.config;
        let mut hasher = Sha256::new();
        let mut buf: Vec<u8> = Vec::with_capacity(1 << 12);
        buf.extend_from_slice(b"opsr-fingerprint-v1");
        buf.extend_from_slice(&(cfg.horizon as u64).to_le_bytes());
        buf.extend_from_slice(&(mdp.n_actions() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.walker.dim() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg.resolution.to_bits().to_le_bytes());
        let terminal_class = cfg.terminal == TerminalMarking::Distinct && mdp.is_terminal(s);
        buf.push(u8::from(terminal_class));
        if !terminal_class {
            let resolution = cfg.resolution;
            self.walker.walk(s, cfg.horizon, |len, rank, out| {
                for (c, &x) in out.iter().enumerate() {
                    let q = quantize(x, resolution);
                    if q != 0 {
                        buf.extend_from_slice(&(len as u16).to_le_bytes());
                        buf.extend_from_slice(&rank.to_le_bytes());
                        buf.extend_from_slice(&(c as u32).to_le_bytes());
                        buf.extend_from_slice(&q.to_le_bytes());
                    }
                }
                if buf.len() >= 1 << 16 {
                    hasher.update(&buf);
                    buf.clear();
                }
            });
        }
        hasher.update(&buf);
        let digest: [u8; 32] = hasher.finalize().into();
        Ok(OutcomeFingerprint { horizon: cfg.horizon, digest })
    }

    /// Fingerprints of every state, computed in parallel, in state order.
    pub fn all(&self) -> Result<Vec<OutcomeFingerprint>> {
        (0..self.walker.mdp().n_states()).into_par_iter().map(|s| self.fingerprint(s)).collect()
    }
}

/// Fingerprint of `s` with default resolution and terminal handling.
pub fn fingerprint(mdp: &TabularMdp, om: &OutcomeModel, s: usize, horizon: usize) -> Result<OutcomeFingerprint> {
    Fingerprinter::new(mdp, om, FingerprintConfig::new(horizon))?.fingerprint(s)
}

/// True iff every sequence of length `<= horizon` gives expected outcome
/// sequences that agree entrywise within `tol`.
pub fn outcome_equivalent(
    task_a: (&TabularMdp, &OutcomeModel),
    s_a: usize,
    task_b: (&TabularMdp, &OutcomeModel),
    s_b: usize,
    horizon: usize,
    tol: f64,
) -> Result<bool> {
    let (ma, oa) = task_a;
    let (mb, ob) = task_b;
    if ma.n_actions() != mb.n_actions() {
        return Err(Error::Dimension(format!("action counts differ: {} vs {}", ma.n_actions(), mb.n_actions())));
    }
    if oa.dim() != ob.dim() {
        return Err(Error::Dimension(format!("outcome dimensions differ: {} vs {}", oa.dim(), ob.dim())));
    }
    ma.check_state(s_a)?;
    mb.check_state(s_b)?;
    let wa = SequenceWalker::new(ma, oa)?;
    let wb = SequenceWalker::new(mb, ob)?;
    // Both walks visit (len, rank) in the same order; skipped subtrees are zero.
    let mut left: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    wa.walk(s_a, horizon, |len, rank, out| {
        if out.iter().any(|&x| x.abs() > tol) {
            left.insert((len, rank), out.to_vec());
        }
    });
    let mut ok = true;
    let mut seen = 0usize;
    wb.walk(s_b, horizon, |len, rank, out| {
        if !ok {
            return;
        }
        match left.get(&(len, rank)) {
            Some(v) => {
                seen += 1;
                if v.iter().zip(out).any(|(x, y)| (x - y).abs() > tol) {
                    ok = false;
                }
            }
            None => {
                if out.iter().any(|&x| x.abs() > tol) {
                    ok = false;
                }
            }
        }
    });
    Ok(ok && seen == left.len())
}

/// Groups states by fingerprint; class labels are the fingerprint hex strings.
pub fn minimal_outcome_equivalent_abstraction(mdp: &TabularMdp, om: &OutcomeModel, horizon: usize) -> Result<StateAbstraction> {
    abstraction_with(mdp, om, FingerprintConfig::new(horizon))
}

/// [`minimal_outcome_equivalent_abstraction`] with explicit fingerprint settings.
pub fn abstraction_with(mdp: &TabularMdp, om: &OutcomeModel, config: FingerprintConfig) -> Result<StateAbstraction> {
    let fps = Fingerprinter::new(mdp, om, config)?.all()?;
    Ok(StateAbstraction::from_labels(fps.iter().map(OutcomeFingerprint::label).collect()))
}
