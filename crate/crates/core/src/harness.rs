//! Learning experiments: SARSA(λ) agents with and without options, the
//! discovery-then-evaluation protocol, and the analysis that goes with it.
//!
//! Seeds for every sub-experiment are derived from one master seed with
//! [`derive_seed`], which hashes a stream name and an index through
//! splitmix64. Option-less and option-enabled agents trained on the same
//! (task, repetition) share their seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::discovery::{discover_options, DiscoveryConfig, DiscoveryResult, DiscoveryTask, ExtendedOptionSet, Trajectory};
use crate::domains::{compile, craftworld_generate, lightworld_generate, CompiledTask, DomainKind};
use crate::error::{Error, Result};
use crate::mdp::{solve_optimal, TabularMdp};
use crate::options::{execute_option, FeatureTable, OptionDef, OptionEnv, DEFAULT_MAX_OPTION_STEPS};
use crate::outcomes::OutcomeModel;

/// One step of the splitmix64 generator.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of the named stream under `master`.
///
/// The stream name is folded in byte by byte with splitmix64, then the index.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut x = splitmix64(master);
    for b in stream.bytes() {
        x = splitmix64(x ^ u64::from(b));
    }
    splitmix64(x ^ index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    #[default]
    Replacing,
    Accumulating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub episodes: usize,
    pub max_episode_steps: usize,
    pub max_option_steps: usize,
    pub traces: TraceKind,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            epsilon: 0.05,
            lambda: 0.99,
            gamma: 0.999,
            alpha: 0.2,
            episodes: 100,
            max_episode_steps: 500,
            max_option_steps: DEFAULT_MAX_OPTION_STEPS,
            traces: TraceKind::Replacing,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.epsilon) && unit(self.lambda) && unit(self.gamma)) || !(self.alpha > 0.0) {
            return Err(Error::Config("epsilon, lambda, gamma must lie in [0, 1] and alpha must be positive".into()));
        }
        if self.max_episode_steps == 0 || self.max_option_steps == 0 {
            return Err(Error::Config("step limits must be positive".into()));
        }
        Ok(())
    }
}

/// Per-episode undiscounted return and primitive step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub returns: Vec<f64>,
    pub steps: Vec<usize>,
}

/// Which controller chose a primitive action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Primitive,
    Option(usize),
}

/// A primitive step annotated with its controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
    pub controller: Controller,
}

/// Environment of a learner: an MDP, a start state and optional options.
#[derive(Clone, Copy)]
pub struct LearnerEnv<'a> {
    pub mdp: &'a TabularMdp,
    pub start: usize,
    pub options: &'a [OptionDef],
    pub features: Option<&'a FeatureTable>,
}

impl<'a> LearnerEnv<'a> {
    pub fn flat(mdp: &'a TabularMdp, start: usize) -> Self {
        LearnerEnv { mdp, start, options: &[], features: None }
    }

    pub fn with_options(mdp: &'a TabularMdp, start: usize, options: &'a [OptionDef], features: &'a FeatureTable) -> Self {
        LearnerEnv { mdp, start, options, features: Some(features) }
    }

    pub fn n_high_level(&self) -> usize {
        self.mdp.n_actions() + self.options.len()
    }
}

/// Result of one high-level action.
struct Macro {
    next: usize,
    k: usize,
    discounted: f64,
    steps: Vec<AnnotatedStep>,
}

fn act<R: Rng + ?Sized>(
    env: LearnerEnv<'_>,
    gamma: f64,
    s: usize,
    a: usize,
    budget: usize,
    option_cap: usize,
    rng: &mut R,
) -> Result<Macro> {
    let na = env.mdp.n_actions();
    if a < na {
        let (next, r) = env.mdp.sample_step(s, a, rng);
        return Ok(Macro {
            next,
            k: 1,
            discounted: r,
            steps: vec![AnnotatedStep { state: s, action: a, reward: r, next, controller: Controller::Primitive }],
        });
    }
    let o = a - na;
    let features = env.features.ok_or_else(|| Error::Config("options need a feature table".into()))?;
    let oenv = OptionEnv::new(env.mdp, features).with_gamma(gamma);
    let run = execute_option(oenv, &env.options[o], s, rng, budget.min(option_cap))?;
    let mut steps = Vec::with_capacity(run.trace.len());
    for (i, &(st, at, r)) in run.trace.iter().enumerate() {
        let next = run.trace.get(i + 1).map_or(run.end, |t| t.0);
        steps.push(AnnotatedStep { state: st, action: at, reward: r, next, controller: Controller::Option(o) });
    }
    Ok(Macro { next: run.end, k: run.steps, discounted: run.discounted_reward, steps })
}

fn greedy_with_ties<R: Rng + ?Sized>(q: &[f64], rng: &mut R) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..q.len()).filter(|&i| q[i] == best).collect();
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    }
}

fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], eps: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < eps {
        rng.random_range(0..q.len())
    } else {
        greedy_with_ties(q, rng)
    }
}

/// Outcome of [`sarsa_lambda_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub curve: LearningCurve,
    /// Row-major `(state, high-level action)` values.
    pub q: Vec<f64>,
    /// Greedy rollout after training.
    pub greedy_trace: Vec<AnnotatedStep>,
}

/// Traces below this magnitude are dropped.
const TRACE_FLOOR: f64 = 1e-6;

/// Tabular SARSA(λ) over primitives and options with ε-greedy exploration.
///
/// An option action that runs for `k` primitive steps is backed up with
/// `R + γ^k Q(s', a')`, where `R` is its internally discounted reward, and
/// eligibility traces then decay by `(γλ)^k`. Episodes end at a terminal
/// state or after `max_episode_steps` primitive steps; options are cut off
/// at whichever of the remaining budget and `max_option_steps` is smaller.
pub fn sarsa_lambda_train<R: Rng + ?Sized>(env: LearnerEnv<'_>, cfg: &LearnerConfig, rng: &mut R) -> Result<TrainResult> {
    sarsa_lambda_from(env, cfg, vec![0.0; env.mdp.n_states() * env.n_high_level()], rng)
}

/// [`sarsa_lambda_train`] starting from the given action values.
pub fn sarsa_lambda_from<R: Rng + ?Sized>(env: LearnerEnv<'_>, cfg: &LearnerConfig, mut q: Vec<f64>, rng: &mut R) -> Result<TrainResult> {
    cfg.validate()?;
    env.mdp.check_state(env.start)?;
    let m = env.n_high_level();
    if q.len() != env.mdp.n_states() * m {
        return Err(Error::Dimension("initial action values have the wrong size".into()));
    }
    if let Some(f) = env.features {
        if f.n_states() != env.mdp.n_states() {
            return Err(Error::Dimension("feature table does not match the MDP".into()));
        }
    }
    let mut curve = LearningCurve::default();
    let mut e = vec![0.0; q.len()];
    let mut active: Vec<usize> = Vec::new();
    for _ in 0..cfg.episodes {
        for &i in &active {
            e[i] = 0.0;
        }
        active.clear();
        let mut s = env.start;
        let mut used = 0usize;
        let mut ret = 0.0;
        let mut a = epsilon_greedy(&q[s * m..(s + 1) * m], cfg.epsilon, rng);
        while !env.mdp.is_terminal(s) && used < cfg.max_episode_steps {
            let mac = act(env, cfg.gamma, s, a, cfg.max_episode_steps - used, cfg.max_option_steps, rng)?;
            used += mac.k;
            ret += mac.steps.iter().map(|st| st.reward).sum::<f64>();
            let sa = s * m + a;
            let (target, next_a) = if env.mdp.is_terminal(mac.next) {
                (mac.discounted, None)
            } else {
                let a2 = epsilon_greedy(&q[mac.next * m..(mac.next + 1) * m], cfg.epsilon, rng);
                (mac.discounted + cfg.gamma.powi(mac.k as i32) * q[mac.next * m + a2], Some(a2))
            };
            let delta = target - q[sa];
            match cfg.traces {
                TraceKind::Replacing => {
                    for b in 0..m {
                        e[s * m + b] = 0.0;
                    }
                    e[sa] = 1.0;
                }
                TraceKind::Accumulating => e[sa] += 1.0,
            }
            if !active.contains(&sa) {
                active.push(sa);
            }
            let decay = (cfg.gamma * cfg.lambda).powi(mac.k as i32);
            active.retain(|&i| {
                q[i] += cfg.alpha * delta * e[i];
                e[i] *= decay;
                if e[i].abs() < TRACE_FLOOR {
                    e[i] = 0.0;
                    false
                } else {
                    true
                }
            });
            s = mac.next;
            match next_a {
                Some(a2) => a = a2,
                None => break,
            }
        }
        curve.returns.push(ret);
        curve.steps.push(used);
    }
    let greedy_trace = greedy_rollout(env, cfg, &q, rng)?;
    Ok(TrainResult { curve, q, greedy_trace })
}

/// Follows the greedy high-level policy from the start state.
pub fn greedy_rollout<R: Rng + ?Sized>(env: LearnerEnv<'_>, cfg: &LearnerConfig, q: &[f64], rng: &mut R) -> Result<Vec<AnnotatedStep>> {
    let m = env.n_high_level();
    let mut s = env.start;
    let mut out = Vec::new();
    while !env.mdp.is_terminal(s) && out.len() < cfg.max_episode_steps {
        let a = greedy_with_ties(&q[s * m..(s + 1) * m], rng);
        let mac = act(env, cfg.gamma, s, a, cfg.max_episode_steps - out.len(), cfg.max_option_steps, rng)?;
        out.extend(mac.steps);
        s = mac.next;
    }
    Ok(out)
}

/// Area under the reward curve: the sum of per-episode returns.
pub fn aurc(curve: &LearningCurve) -> Result<f64> {
    if curve.returns.is_empty() {
        return Err(Error::Config("AURC of an empty curve".into()));
    }
    Ok(curve.returns.iter().sum())
}

/// Trapezoid-rule area, for comparison with [`aurc`].
pub fn aurc_trapezoid(curve: &LearningCurve) -> Result<f64> {
    let r = &curve.returns;
    if r.is_empty() {
        return Err(Error::Config("AURC of an empty curve".into()));
    }
    Ok(r.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() + if r.len() == 1 { r[0] } else { 0.0 })
}

/// Labels of the positive outcome components along a trace, in order.
///
/// Components excluded by the outcome model's story mask are skipped.
pub fn extract_story(trace: &Trajectory, om: &OutcomeModel) -> Result<Vec<String>> {
    trace.validate()?;
    let mask = om.story_mask();
    let mut story = Vec::new();
    for t in 0..trace.len() {
        let (s, a, n) = (trace.states[t], trace.actions[t], trace.states[t + 1]);
        if s >= om.n_states() || n >= om.n_states() || a >= om.n_actions() {
            return Err(Error::Index(format!("step {t} of the trace is outside the outcome model")));
        }
        if let Some(sigma) = om.sigma(s, a, n) {
            for (c, &x) in sigma.iter().enumerate() {
                if x > 0.0 && mask[c] {
                    story.push(om.labels()[c].clone());
                }
            }
        }
    }
    Ok(story)
}

/// Trajectory view of an annotated rollout.
pub fn to_trajectory(task_id: &str, start: usize, steps: &[AnnotatedStep]) -> Trajectory {
    let mut states = vec![steps.first().map_or(start, |s| s.state)];
    states.extend(steps.iter().map(|s| s.next));
    Trajectory {
        task_id: task_id.to_string(),
        states,
        actions: steps.iter().map(|s| s.action).collect(),
        rewards: steps.iter().map(|s| s.reward).collect(),
    }
}

/// Controller histogram per timestep over a set of traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRecord {
    /// Column names: `option_0 .. option_{K-1}`, then `primitive`.
    pub controllers: Vec<String>,
    /// `counts[t][c]`.
    pub counts: Vec<Vec<usize>>,
    pub alive: Vec<usize>,
}

/// Counts which controller was active at each timestep across traces.
pub fn occupancy_graph(traces: &[Vec<Controller>], n_options: usize) -> Result<OccupancyRecord> {
    let mut controllers: Vec<String> = (0..n_options).map(|o| format!("option_{o}")).collect();
    controllers.push("primitive".into());
    let horizon = traces.iter().map(Vec::len).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; n_options + 1]; horizon];
    let mut alive = vec![0usize; horizon];
    for tr in traces {
        for (t, c) in tr.iter().enumerate() {
            let col = match *c {
                Controller::Primitive => n_options,
                Controller::Option(o) if o < n_options => o,
                Controller::Option(o) => return Err(Error::Index(format!("option {o} out of range 0..{n_options}"))),
            };
            counts[t][col] += 1;
            alive[t] += 1;
        }
    }
    Ok(OccupancyRecord { controllers, counts, alive })
}

/// Task family and sizes used by [`run_protocol`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum TaskFamily {
    Craftworld { width: usize, height: usize },
    Lightworld { min_rooms: usize, max_rooms: usize },
}

impl TaskFamily {
    pub fn kind(&self) -> DomainKind {
        match self {
            TaskFamily::Craftworld { .. } => DomainKind::Craftworld,
            TaskFamily::Lightworld { .. } => DomainKind::Lightworld,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<CompiledTask> {
        let spec = match *self {
            TaskFamily::Craftworld { width, height } => craftworld_generate(seed, width, height)?,
            TaskFamily::Lightworld { min_rooms, max_rooms } => {
                if min_rooms > max_rooms {
                    return Err(Error::Config("min_rooms exceeds max_rooms".into()));
                }
                let rooms = min_rooms + (splitmix64(seed) % (max_rooms - min_rooms + 1) as u64) as usize;
                lightworld_generate(seed, rooms)?
            }
        };
        compile(&spec)
    }
}

/// Settings of the discovery-then-evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub family: TaskFamily,
    pub n_train: usize,
    pub n_test: usize,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default)]
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
}

impl ProtocolConfig {
    /// The desk-scale Craftworld experiment.
    pub fn craftworld_desk(seed: u64) -> Self {
        ProtocolConfig {
            family: TaskFamily::Craftworld { width: 4, height: 4 },
            n_train: 10,
            n_test: 5,
            repetitions: 20,
            seed,
            discovery: DiscoveryConfig { pca_variance: Some(0.99), ..DiscoveryConfig::default() },
            learner: LearnerConfig::default(),
        }
    }
}

/// Learning curve of one agent on one task and repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub task_id: String,
    pub seed: u64,
    pub agent: String,
    pub curve: LearningCurve,
    pub aurc: f64,
    pub story: Vec<String>,
    pub controllers: Vec<Controller>,
}

pub const AGENT_FLAT: &str = "primitive";
pub const AGENT_OPTIONS: &str = "options";

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ProtocolConfig,
    pub train_tasks: Vec<String>,
    pub test_tasks: Vec<String>,
    pub discovery: Option<DiscoverySummary>,
    pub curves: Vec<CurveRecord>,
    pub occupancy: OccupancyRecord,
    /// Set when the run stopped early; holds the error message.
    pub partial: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySummary {
    pub converged: bool,
    pub stop: crate::discovery::StopReason,
    pub best_log_likelihood: f64,
    pub epochs: usize,
}

impl From<&DiscoveryResult> for DiscoverySummary {
    fn from(r: &DiscoveryResult) -> Self {
        DiscoverySummary { converged: r.converged, stop: r.stop, best_log_likelihood: r.best_log_likelihood, epochs: r.log.len() }
    }
}

fn task_id(stream: &str, i: usize, seed: u64) -> String {
    format!("{stream}-{i:03}-{seed:016x}")
}

/// Named tasks and the demonstrations recorded on them.
pub type TrainingData = (Vec<(String, CompiledTask)>, Vec<Trajectory>);

/// Generates the training tasks and their optimal demonstrations.
pub fn training_data(config: &ProtocolConfig) -> Result<TrainingData> {
    let mut tasks = Vec::new();
    let mut traces = Vec::new();
    for i in 0..config.n_train {
        let seed = derive_seed(config.seed, "train", i as u64);
        let task = config.family.generate(seed)?;
        let id = task_id("train", i, seed);
        traces.push(optimal_trace(&id, &task.mdp, task.start(), config.learner.max_episode_steps)?);
        tasks.push((id, task));
    }
    Ok((tasks, traces))
}

/// Greedy rollout of the optimal policy, cut at `max_steps`.
pub fn optimal_trace(task_id: &str, mdp: &TabularMdp, start: usize, max_steps: usize) -> Result<Trajectory> {
    let (pi, _) = solve_optimal(mdp, 1e-10)?;
    let mut tau = Trajectory { task_id: task_id.to_string(), states: vec![start], actions: Vec::new(), rewards: Vec::new() };
    let mut s = start;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while !mdp.is_terminal(s) && tau.actions.len() < max_steps {
        let a = pi.argmax(s);
        let (next, r) = mdp.sample_step(s, a, &mut rng);
        tau.actions.push(a);
        tau.rewards.push(r);
        tau.states.push(next);
        s = next;
    }
    Ok(tau)
}

/// Runs option discovery on the protocol's training tasks.
pub fn run_discovery(config: &ProtocolConfig) -> Result<(DiscoveryResult, Vec<String>)> {
    let (tasks, traces) = training_data(config)?;
    let dtasks: Vec<DiscoveryTask<'_>> = tasks.iter().map(|(id, t)| DiscoveryTask { id, view: t.view() }).collect();
    let result = discover_options(&traces, &dtasks, &config.discovery)?;
    Ok((result, tasks.into_iter().map(|(id, _)| id).collect()))
}

/// Trains option-less and option-enabled agents on freshly generated test
/// tasks, one pair per (task, repetition) with a shared seed.
pub fn evaluate(config: &ProtocolConfig, options: &ExtendedOptionSet) -> Result<ExperimentReport> {
    let mut tests = Vec::new();
    for i in 0..config.n_test {
        let seed = derive_seed(config.seed, "test", i as u64);
        tests.push((task_id("test", i, seed), config.family.generate(seed)?));
    }
    let tables = tests.iter().map(|(_, t)| options.features.table(t.view())).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..tests.len()).flat_map(|i| (0..config.repetitions).map(move |r| (i, r))).collect();
    let results: Vec<Result<[CurveRecord; 2]>> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let (id, task) = &tests[i];
            let seed = derive_seed(config.seed, &format!("run/{id}"), r as u64);
            let cfg = LearnerConfig { seed, ..config.learner };
            let mut out = Vec::with_capacity(2);
            for (agent, env) in [
                (AGENT_FLAT, LearnerEnv::flat(&task.mdp, task.start())),
                (AGENT_OPTIONS, LearnerEnv::with_options(&task.mdp, task.start(), &options.options, &tables[i])),
            ] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let res = sarsa_lambda_train(env, &cfg, &mut rng)?;
                let traj = to_trajectory(id, task.start(), &res.greedy_trace);
                out.push(CurveRecord {
                    task_id: id.clone(),
                    seed,
                    agent: agent.to_string(),
                    aurc: aurc(&res.curve)?,
                    curve: res.curve,
                    story: extract_story(&traj, &task.outcomes)?,
                    controllers: res.greedy_trace.iter().map(|s| s.controller).collect(),
                });
            }
            let flat = out.remove(0);
            Ok([flat, out.remove(0)])
        })
        .collect();
    let mut curves = Vec::new();
    let mut partial = None;
    for r in results {
        match r {
            Ok(pair) => curves.extend(pair),
            Err(e) => {
                partial = Some(e.to_string());
                break;
            }
        }
    }
    let option_traces: Vec<Vec<Controller>> = curves.iter().filter(|c| c.agent == AGENT_OPTIONS).map(|c| c.controllers.clone()).collect();
    Ok(ExperimentReport {
        config: config.clone(),
        train_tasks: options.tasks.iter().map(|t| t.task_id.clone()).collect(),
        test_tasks: tests.into_iter().map(|(id, _)| id).collect(),
        discovery: None,
        occupancy: occupancy_graph(&option_traces, options.k())?,
        curves,
        partial,
    })
}

/// Discovery on training tasks followed by evaluation on test tasks.
pub fn run_protocol(config: &ProtocolConfig) -> Result<(ExperimentReport, ExtendedOptionSet)> {
    let (result, _) = run_discovery(config)?;
    let mut report = evaluate(config, &result.set)?;
    report.discovery = Some(DiscoverySummary::from(&result));
    Ok((report, result.set))
}

/// One-sided paired t-test of `mean(a - b) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Config("paired test needs two equal samples of size at least 2".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p) = if se == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        (f64::INFINITY.copysign(mean), p)
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Config(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest { n: a.len(), mean_diff: mean, t, p_value: p })
}

impl ExperimentReport {
    /// `(flat, options)` AURC pairs matched by task and seed, in report order.
    pub fn paired_aurc(&self) -> (Vec<f64>, Vec<f64>) {
        let mut flat: BTreeMap<(String, u64), f64> = BTreeMap::new();
        for c in self.curves.iter().filter(|c| c.agent == AGENT_FLAT) {
            flat.insert((c.task_id.clone(), c.seed), c.aurc);
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for c in self.curves.iter().filter(|c| c.agent == AGENT_OPTIONS) {
            if let Some(&f) = flat.get(&(c.task_id.clone(), c.seed)) {
                a.push(f);
                b.push(c.aurc);
            }
        }
        (a, b)
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("task_id,seed,agent,episode,return,steps\n");
        for c in &self.curves {
            for (e, (r, n)) in c.curve.returns.iter().zip(&c.curve.steps).enumerate() {
                let _ = writeln!(s, "{},{},{},{},{},{}", c.task_id, c.seed, c.agent, e, r, n);
            }
        }
        s
    }

    /// AURC per run plus the AURC divided by the magnitude of the mean
    /// option-less AURC on the same task.
    pub fn aurc_csv(&self) -> String {
        let mut base: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for c in self.curves.iter().filter(|c| c.agent == AGENT_FLAT) {
            let e = base.entry(&c.task_id).or_default();
            e.0 += c.aurc;
            e.1 += 1;
        }
        let mut s = String::from("task_id,seed,agent,aurc,aurc_normalized\n");
        for c in &self.curves {
            let norm = match base.get(c.task_id.as_str()) {
                Some(&(sum, n)) if sum != 0.0 => c.aurc / (sum / n as f64).abs(),
                _ => f64::NAN,
            };
            let _ = writeln!(s, "{},{},{},{},{}", c.task_id, c.seed, c.agent, c.aurc, norm);
        }
        s
    }

    pub fn occupancy_csv(&self) -> String {
        let mut s = String::from("timestep,controller,count,alive\n");
        for (t, row) in self.occupancy.counts.iter().enumerate() {
            for (c, n) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", t, self.occupancy.controllers[c], n, self.occupancy.alive[t]);
            }
        }
        s
    }

    /// Mean return per episode for each agent, with min/max bands.
    pub fn curves_svg(&self) -> String {
        let agents = [AGENT_FLAT, AGENT_OPTIONS];
        let colours = ["#1f77b4", "#d62728"];
        let mut series = Vec::new();
        for agent in agents {
            let curves: Vec<&LearningCurve> = self.curves.iter().filter(|c| c.agent == agent).map(|c| &c.curve).collect();
            let len = curves.iter().map(|c| c.returns.len()).min().unwrap_or(0);
            let stats: Vec<(f64, f64, f64)> = (0..len)
                .map(|e| {
                    let xs: Vec<f64> = curves.iter().map(|c| c.returns[e]).collect();
                    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (mean, lo, hi)
                })
                .collect();
            series.push(stats);
        }
        let (w, h, pad) = (640.0, 400.0, 40.0);
        let n = series.iter().map(Vec::len).max().unwrap_or(0);
        let lo = series.iter().flatten().map(|s| s.1).fold(f64::INFINITY, f64::min);
        let hi = series.iter().flatten().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.clamp(-1.0, 0.0), lo.max(0.0) + 1.0) };
        let x = |e: usize| pad + (w - 2.0 * pad) * if n > 1 { e as f64 / (n - 1) as f64 } else { 0.0 };
        let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
            b = h - pad,
            r = w - pad
        );
        let _ = writeln!(
            svg,
            r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="12">return per episode ({lo:.1} to {hi:.1})</text>"#
        );
        for ((stats, colour), agent) in series.iter().zip(colours).zip(agents) {
            if stats.is_empty() {
                continue;
            }
            let mut band = String::new();
            for (e, s) in stats.iter().enumerate() {
                let _ = write!(band, "{:.2},{:.2} ", x(e), y(s.2));
            }
            for (e, s) in stats.iter().enumerate().rev() {
                let _ = write!(band, "{:.2},{:.2} ", x(e), y(s.1));
            }
            let _ = writeln!(svg, r#"<polygon points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#, band.trim_end());
            let line: Vec<String> = stats.iter().enumerate().map(|(e, s)| format!("{:.2},{:.2}", x(e), y(s.0))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"><title>{agent}</title></polyline>"#,
                line.join(" ")
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Output formats of [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes the requested formats into `dir` and returns the paths written.
///
/// CSV gives `curves.csv`, `aurc.csv` and `occupancy.csv`; JSON gives
/// `report.json`; SVG gives `curves.svg`.
pub fn emit_report(report: &ExperimentReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    let mut formats = formats.to_vec();
    formats.sort();
    formats.dedup();
    for f in formats {
        let files: Vec<(&str, String)> = match f {
            ReportFormat::Csv => {
                vec![("curves.csv", report.curves_csv()), ("aurc.csv", report.aurc_csv()), ("occupancy.csv", report.occupancy_csv())]
            }
            ReportFormat::Json => vec![("report.json", serde_json::to_string_pretty(report)? + "\n")],
            ReportFormat::Svg => vec![("curves.svg", report.curves_svg())],
        };
        for (name, content) in files {
            let p = dir.join(name);
            write_file(&p, &content)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpBuilder;
    use crate::opsr::OpsrVariant;
    use crate::options::{FeatureKind, FeatureMap};

    /// 0 -> 1 -> 2 (terminal) under action 1; action 0 stays. Step cost -1.
    fn chain() -> TabularMdp {
        let mut b = MdpBuilder::new(3, 2, 0.95);
        for s in 0..2 {
            b.transition(s, 0, s, 1.0, -1.0).transition(s, 1, s + 1, 1.0, -1.0);
        }
        b.terminal(2);
        b.build().unwrap()
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(7, "x", 3), derive_seed(7, "x", 3));
    }

    #[test]
    fn sarsa_learns_chain() {
        let m = chain();
        let cfg = LearnerConfig { episodes: 500, ..LearnerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = sarsa_lambda_train(LearnerEnv::flat(&m, 0), &cfg, &mut rng).unwrap();
        let (pi, _) = solve_optimal(&m, 1e-12).unwrap();
        for s in 0..2 {
            let row = &res.q[s * 2..s * 2 + 2];
            assert_eq!(if row[1] > row[0] { 1 } else { 0 }, pi.argmax(s));
        }
        assert_eq!(res.greedy_trace.len(), 2);
    }

    #[test]
    fn converged_values_give_flat_curve() {
        let m = chain();
        let cfg = LearnerConfig { epsilon: 0.0, episodes: 5, gamma: 0.95, ..LearnerConfig::default() };
        // Optimal action values with the learner's discount.
        let q = vec![-1.0 + 0.95 * -1.95, -1.95, -1.95, -1.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = sarsa_lambda_from(LearnerEnv::flat(&m, 0), &cfg, q, &mut rng).unwrap();
        assert!(res.curve.returns.iter().all(|&r| r == -2.0));
    }

    #[test]
    fn option_actions_consume_steps() {
        let m = chain();
        let table = FeatureTable::from_rows(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let mut go = OptionDef::zeros(FeatureMap::new(FeatureKind::Opsr { variant: OpsrVariant::TerminalUpTo, k: 1 }), 2, 1);
        go.b_pi = vec![-60.0, 60.0];
        go.b_beta = [60.0, -60.0];
        let opts = vec![go];
        let env = LearnerEnv::with_options(&m, 0, &opts, &table);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mac = act(env, 0.9, 0, 2, 100, 100, &mut rng).unwrap();
        assert_eq!((mac.k, mac.next), (2, 2));
        assert_eq!(mac.discounted, crate::mdp::open_loop_value(&m.with_discount(0.9), 0, &[1, 1]).unwrap());
        assert!(mac.steps.iter().all(|s| s.controller == Controller::Option(0)));
    }

    #[test]
    fn aurc_conventions() {
        let c = LearningCurve { returns: vec![2.0; 4], steps: vec![1; 4] };
        assert_eq!(aurc(&c).unwrap(), 8.0);
        assert_eq!(aurc_trapezoid(&c).unwrap(), 6.0);
        let one = LearningCurve { returns: vec![-3.0], steps: vec![3] };
        assert_eq!(aurc(&one).unwrap(), -3.0);
        assert!(aurc(&LearningCurve::default()).is_err());
    }

    #[test]
    fn occupancy_counts() {
        let traces = vec![vec![Controller::Option(0); 3], vec![Controller::Primitive, Controller::Option(1)]];
        let occ = occupancy_graph(&traces, 2).unwrap();
        assert_eq!(occ.alive, vec![2, 2, 1]);
        assert_eq!(occ.counts[0], vec![1, 0, 1]);
        for (row, a) in occ.counts.iter().zip(&occ.alive) {
            assert_eq!(row.iter().sum::<usize>(), *a);
        }
    }

    #[test]
    fn paired_test_direction() {
        let a = [3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 2.5, 2.0, 4.0];
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.mean_diff > 0.0 && t.p_value < 0.05);
        assert!(paired_t_test(&b, &a).unwrap().p_value > 0.95);
    }
}
