//! Options over abstract feature spaces and their semi-MDP execution.
//!
//! An option sees the world only through a [`FeatureMap`]: OPSR vectors
//! (optionally PCA-projected) or, in Lightworld, the agent-space sensors. Its
//! control policy and termination policy are single linear layers followed by
//! a softmax. Termination uses two logits, `[continue, terminate]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domains::{agent_space_features, CompiledTask};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::opsr::{OpsrBuilder, OpsrVariant, Pca};
use crate::outcomes::OutcomeModel;

/// Default hard cap on the primitive steps one option call may take.
pub const DEFAULT_MAX_OPTION_STEPS: usize = 100;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// Index drawn from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// The pieces of a task that feature maps may read.
#[derive(Clone, Copy)]
pub struct TaskView<'a> {
    pub mdp: &'a TabularMdp,
    pub outcomes: &'a OutcomeModel,
    pub task: Option<&'a CompiledTask>,
}

impl<'a> TaskView<'a> {
    pub fn plain(mdp: &'a TabularMdp, outcomes: &'a OutcomeModel) -> Self {
        TaskView { mdp, outcomes, task: None }
    }
}

impl CompiledTask {
    pub fn view(&self) -> TaskView<'_> {
        TaskView { mdp: &self.mdp, outcomes: &self.outcomes, task: Some(self) }
    }
}

/// Raw state descriptor before any projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Opsr { variant: OpsrVariant, k: usize },
    AgentSpace,
}

/// A feature kind plus an optional fitted PCA projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub pca: Option<Pca>,
}

/// Dense per-state feature rows of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("feature rows have different lengths".into()));
        }
        Ok(FeatureTable { dim, data: rows.concat() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim.max(1)).map(<[f64]>::to_vec).collect()
    }
}

impl FeatureKind {
    /// Unprojected features of every state.
    pub fn raw_rows(&self, view: TaskView<'_>) -> Result<Vec<Vec<f64>>> {
        match *self {
            FeatureKind::Opsr { variant, k } => {
                Ok(OpsrBuilder::new(view.mdp, view.outcomes, k, variant)?.all()?.into_iter().map(|v| v.values).collect())
            }
            FeatureKind::AgentSpace => {
                let task =
                    view.task.ok_or_else(|| Error::WrongDomain { expected: "lightworld".into(), found: "task without grid".into() })?;
                (0..task.mdp.n_states()).map(|s| agent_space_features(task, s).map(|f| f.to_vec())).collect()
            }
        }
    }
}

impl FeatureMap {
    pub fn new(kind: FeatureKind) -> Self {
        FeatureMap { kind, pca: None }
    }

    pub fn table(&self, view: TaskView<'_>) -> Result<FeatureTable> {
        let raw = self.kind.raw_rows(view)?;
        match &self.pca {
            None => FeatureTable::from_rows(&raw),
            Some(p) => {
                let rows = raw.iter().map(|r| p.project(r)).collect::<Result<Vec<_>>>()?;
                if rows.is_empty() {
                    return FeatureTable::from_rows(&rows);
                }
                Ok(FeatureTable { dim: p.n_components(), data: rows.concat() })
            }
        }
    }
}

/// One option: feature map, control layer `(W_pi, b_pi)` and termination
/// layer `(W_beta, b_beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionDef {
    pub features: FeatureMap,
    /// `n_actions` rows of feature weights.
    pub w_pi: Vec<Vec<f64>>,
    pub b_pi: Vec<f64>,
    /// Two rows: continue, terminate.
    pub w_beta: [Vec<f64>; 2],
    pub b_beta: [f64; 2],
}

fn linear(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

impl OptionDef {
    /// All-zero option: uniform actions, termination probability one half.
    pub fn zeros(features: FeatureMap, n_actions: usize, dim: usize) -> Self {
        OptionDef {
            features,
            w_pi: vec![vec![0.0; dim]; n_actions],
            b_pi: vec![0.0; n_actions],
            w_beta: [vec![0.0; dim], vec![0.0; dim]],
            b_beta: [0.0; 2],
        }
    }

    pub fn n_actions(&self) -> usize {
        self.b_pi.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_beta[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_dim();
        if self.w_pi.len() != self.b_pi.len() || self.w_pi.iter().any(|r| r.len() != f) || self.w_beta[1].len() != f {
            return Err(Error::Dimension("option weight shapes are inconsistent".into()));
        }
        Ok(())
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim() {
            return Err(Error::Dimension(format!("option expects {} features, got {}", self.feature_dim(), features.len())));
        }
        Ok(())
    }

    pub fn action_logits(&self, features: &[f64]) -> Vec<f64> {
        linear(&self.w_pi, &self.b_pi, features)
    }

    pub fn termination_logits(&self, features: &[f64]) -> [f64; 2] {
        let l = linear(&self.w_beta, &self.b_beta, features);
        [l[0], l[1]]
    }
}

/// `softmax(W_pi x + b_pi)`.
pub fn option_action_dist(opt: &OptionDef, features: &[f64]) -> Result<Vec<f64>> {
    opt.check(features)?;
    Ok(softmax(&opt.action_logits(features)))
}

/// Probability of the terminate logit under a two-way softmax.
pub fn option_termination_prob(opt: &OptionDef, features: &[f64]) -> Result<f64> {
    opt.check(features)?;
    let [c, t] = opt.termination_logits(features);
    // Logistic of the logit difference, written to stay exact at the extremes.
    let d = t - c;
    Ok(if d >= 0.0 { 1.0 / (1.0 + (-d).exp()) } else { d.exp() / (1.0 + d.exp()) })
}

/// Where an option runs. `gamma` discounts the reward accumulated inside the
/// call.
#[derive(Clone, Copy)]
pub struct OptionEnv<'a> {
    pub mdp: &'a TabularMdp,
    pub features: &'a FeatureTable,
    pub gamma: f64,
}

impl<'a> OptionEnv<'a> {
    pub fn new(mdp: &'a TabularMdp, features: &'a FeatureTable) -> Self {
        OptionEnv { mdp, features, gamma: mdp.discount() }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionRun {
    pub end: usize,
    pub steps: usize,
    /// `sum_i gamma^i r_i` over the primitive steps taken.
    pub discounted_reward: f64,
    /// `(state, action, reward)` for every primitive step.
    pub trace: Vec<(usize, usize, f64)>,
}

impl OptionRun {
    pub fn undiscounted_reward(&self) -> f64 {
        self.trace.iter().map(|t| t.2).sum()
    }
}

/// Runs `opt` from `s` until it terminates, the episode ends, or `max_steps`
/// primitive actions have been taken. The first action is always taken;
/// termination is drawn in each state reached afterwards.
pub fn execute_option<R: Rng + ?Sized>(env: OptionEnv<'_>, opt: &OptionDef, s: usize, rng: &mut R, max_steps: usize) -> Result<OptionRun> {
    env.mdp.check_state(s)?;
    if env.features.n_states() != env.mdp.n_states() {
        return Err(Error::Dimension("feature table does not match the MDP".into()));
    }
    let mut run = OptionRun { end: s, steps: 0, discounted_reward: 0.0, trace: Vec::new() };
    if env.mdp.is_terminal(s) || max_steps == 0 {
        return Ok(run);
    }
    let mut state = s;
    let mut disc = 1.0;
    loop {
        let probs = option_action_dist(opt, env.features.row(state))?;
        let a = sample_categorical(&probs, rng);
        let (next, r) = env.mdp.sample_step(state, a, rng);
        run.trace.push((state, a, r));
        run.discounted_reward += disc * r;
        disc *= env.gamma;
        run.steps += 1;
        state = next;
        if env.mdp.is_terminal(state) || run.steps >= max_steps {
            break;
        }
        let beta = option_termination_prob(opt, env.features.row(state))?;
        if rng.random::<f64>() < beta {
            break;
        }
    }
    run.end = state;
    Ok(run)
}

/// A high-level action: a primitive or an option index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighLevelAction {
    Primitive(usize),
    Option(usize),
}

/// Primitive actions followed by options.
#[derive(Debug, Clone, PartialEq)]
pub struct SmdpActionSet {
    pub n_primitive: usize,
    pub options: Vec<OptionDef>,
}

impl SmdpActionSet {
    pub fn len(&self) -> usize {
        self.n_primitive + self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decode(&self, a: usize) -> Result<HighLevelAction> {
        if a < self.n_primitive {
            Ok(HighLevelAction::Primitive(a))
        } else if a < self.len() {
            Ok(HighLevelAction::Option(a - self.n_primitive))
        } else {
            Err(Error::Index(format!("high-level action {a} out of range 0..{}", self.len())))
        }
    }
}

pub fn smdp_action_set(primitive_count: usize, options: Vec<OptionDef>) -> SmdpActionSet {
    SmdpActionSet { n_primitive: primitive_count, options }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap() -> FeatureMap {
        FeatureMap::new(FeatureKind::Opsr { variant: OpsrVariant::TerminalUpTo, k: 1 })
    }

    /// Line 0 -> 1 -> ... -> 6 (terminal) under action 1, reward 1 per step.
    fn line() -> (TabularMdp, FeatureTable) {
        let mut b = MdpBuilder::new(7, 2, 0.9);
        for s in 0..6 {
            b.transition(s, 0, s, 1.0, 0.0).transition(s, 1, s + 1, 1.0, 1.0);
        }
        b.terminal(6);
        let rows: Vec<Vec<f64>> = (0..7).map(|s| vec![s as f64]).collect();
        (b.build().unwrap(), FeatureTable::from_rows(&rows).unwrap())
    }

    #[test]
    fn softmax_layers() {
        let mut o = OptionDef::zeros(fmap(), 4, 3);
        assert_eq!(option_action_dist(&o, &[1.0, 2.0, 3.0]).unwrap(), vec![0.25; 4]);
        assert_eq!(option_termination_prob(&o, &[0.0; 3]).unwrap(), 0.5);
        o.b_pi = vec![10.0, 0.0, 0.0, 0.0];
        let exact = 10f64.exp() / (10f64.exp() + 3.0);
        let p0 = option_action_dist(&o, &[0.0; 3]).unwrap()[0];
        assert!((p0 - exact).abs() < 1e-15 && p0 > 0.9998);
        let shifted = {
            let mut p = o.clone();
            p.b_pi.iter_mut().for_each(|b| *b += 7.5);
            p
        };
        let a = option_action_dist(&o, &[0.3, 0.1, 0.2]).unwrap();
        let b = option_action_dist(&shifted, &[0.3, 0.1, 0.2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        o.b_beta = [0.0, 20.0];
        assert!(option_termination_prob(&o, &[0.0; 3]).unwrap() >= 1.0 - 1e-8);
        assert!(option_action_dist(&o, &[0.0; 2]).is_err());
    }

    #[test]
    fn execution_rules() {
        let (mdp, feats) = line();
        let env = OptionEnv::new(&mdp, &feats);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut go = OptionDef::zeros(fmap(), 2, 1);
        go.b_pi = vec![-50.0, 50.0];
        // Never terminates: runs to the step cap.
        go.b_beta = [50.0, -50.0];
        let run = execute_option(env, &go, 0, &mut rng, 5).unwrap();
        assert_eq!(run.steps, 5);
        let expect: f64 = (0..5).map(|i| 0.9f64.powi(i)).sum();
        assert!((run.discounted_reward - expect).abs() < 1e-12);
        // Terminal reached first.
        let run = execute_option(env, &go, 4, &mut rng, 50).unwrap();
        assert_eq!((run.steps, run.end), (2, 6));
        // Always terminates: exactly one step.
        go.b_beta = [-50.0, 50.0];
        assert_eq!(execute_option(env, &go, 0, &mut rng, 50).unwrap().steps, 1);
        assert_eq!(execute_option(env, &go, 6, &mut rng, 50).unwrap().steps, 0);
    }

    #[test]
    fn action_set_layout() {
        let opts = vec![OptionDef::zeros(fmap(), 4, 2); 3];
        let set = smdp_action_set(4, opts);
        assert_eq!(set.len(), 7);
        assert_eq!(set.decode(3).unwrap(), HighLevelAction::Primitive(3));
        assert_eq!(set.decode(6).unwrap(), HighLevelAction::Option(2));
        assert!(set.decode(7).is_err());
        assert_eq!(smdp_action_set(4, Vec::new()).len(), 4);
    }

    #[test]
    fn option_json_round_trip() {
        let mut o = OptionDef::zeros(fmap(), 2, 2);
        o.w_pi[0][1] = 0.1 + 0.2;
        o.b_beta[1] = -1.0 / 3.0;
        let back: OptionDef = serde_json::from_str(&serde_json::to_string(&o).unwrap()).unwrap();
        assert_eq!(back, o);
    }
}
