//! Property tests for the invariants of the core modules.

#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opsr_core::abstraction::{abstract_outcome_model, build_abstract_mdp, refines, WeightingFn};
use opsr_core::discovery::{enumerate_posteriors, forward_backward, gradient, log_likelihood, DiscoveryModel, Trajectory};
use opsr_core::mdp::{k_horizon_value, open_loop_value, policy_evaluation, q_values, solve_optimal, MdpBuilder, TabularMdp, TabularPolicy};
use opsr_core::opsr::OpsrVariant;
use opsr_core::opsr::{opsr_full, opsr_partition, opsr_terminal_up_to, pca_reduce};
use opsr_core::options::{
    execute_option, option_action_dist, option_termination_prob, FeatureKind, FeatureMap, FeatureTable, OptionDef, OptionEnv,
};
use opsr_core::outcomes::{expected_outcome_sequence, minimal_outcome_equivalent_abstraction, outcome_equivalent, DEFAULT_RESOLUTION};

/// One non-terminal `(s, a)` cell: two successors with integer weights, and
/// an outcome vector for each branch.
#[derive(Debug, Clone)]
struct Cell {
    next: [usize; 2],
    weight: [u8; 2],
    sigma: [Vec<i8>; 2],
}

#[derive(Debug, Clone)]
struct Instance {
    mdp: TabularMdp,
    om: opsr_core::outcomes::OutcomeModel,
}

fn build(n: usize, na: usize, weights: Vec<f64>, cells: Vec<Cell>, last_terminal: bool) -> Instance {
    let mut b = MdpBuilder::new(n, na, 0.9);
    let mut om = opsr_core::outcomes::OutcomeModel::new(n, na, weights.clone());
    let live = if last_terminal { n - 1 } else { n };
    for s in 0..live {
        for a in 0..na {
            let c = &cells[s * na + a];
            let total = f64::from(c.weight[0]) + f64::from(c.weight[1]);
            let branches: Vec<(usize, f64, Vec<f64>)> = if c.next[0] == c.next[1] {
                vec![(c.next[0], 1.0, c.sigma[0].iter().map(|&x| f64::from(x)).collect())]
            } else {
                (0..2).map(|i| (c.next[i], f64::from(c.weight[i]) / total, c.sigma[i].iter().map(|&x| f64::from(x)).collect())).collect()
            };
            for (next, p, sigma) in branches {
                let r = sigma.iter().zip(&weights).map(|(x, w)| x * w).sum();
                b.transition(s, a, next, p, r);
                om.set_sigma(s, a, next, sigma);
            }
        }
    }
    if last_terminal {
        b.terminal(n - 1);
    }
    b.initial(0);
    Instance { mdp: b.build().unwrap(), om }
}

/// Small stochastic MDPs (at most two successors per action) whose rewards
/// decompose exactly over the generated outcomes.
fn instances(max_states: usize) -> impl Strategy<Value = Instance> {
    (2..=max_states, 1usize..=3, 1usize..=2, any::<bool>()).prop_flat_map(|(n, na, d, last_terminal)| {
        let cell = ([0..n, 0..n], [1u8..=3, 1u8..=3], [prop::collection::vec(-1i8..=1, d), prop::collection::vec(-1i8..=1, d)])
            .prop_map(|(next, weight, sigma)| Cell { next, weight, sigma });
        (prop::collection::vec(prop_oneof![Just(-1.0), Just(1.0), Just(2.0)], d), prop::collection::vec(cell, n * na))
            .prop_map(move |(w, cells)| build(n, na, w, cells, last_terminal))
    })
}

fn random_policy(n: usize, na: usize, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let rows = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect()
        })
        .collect();
    TabularPolicy::from_rows(rows).unwrap()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Finite-horizon value of the nonstationary policy that plays `aseq[i]` at step `i`.
fn nonstationary_value(mdp: &TabularMdp, s: usize, aseq: &[usize]) -> f64 {
    let mut v = vec![0.0; mdp.n_states()];
    for &a in aseq.iter().rev() {
        v = (0..mdp.n_states())
            .map(|x| {
                if mdp.is_terminal(x) {
                    0.0
                } else {
                    mdp.row(x, a).iter().map(|t| t.prob * (t.reward + mdp.discount() * v[t.next])).sum()
                }
            })
            .collect();
    }
    v[s]
}

fn action_sequence(na: usize, len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..na, 1..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_evaluation_is_a_fixed_point(inst in instances(6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let pi = random_policy(n, na, &mut rng);
        let v = policy_evaluation(&inst.mdp, &pi, 1e-12).unwrap();
        let q = q_values(&inst.mdp, v.values());
        for s in (0..n).filter(|&s| !inst.mdp.is_terminal(s)) {
            let backup: f64 = (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum();
            prop_assert!((backup - v.values()[s]).abs() < 1e-8, "state {s}: {backup} vs {}", v.values()[s]);
        }
    }

    #[test]
    fn optimal_values_dominate_random_policies(inst in instances(6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let (_, vstar) = solve_optimal(&inst.mdp, 1e-12).unwrap();
        for _ in 0..1000 {
            let v = policy_evaluation(&inst.mdp, &random_policy(n, na, &mut rng), 1e-12).unwrap();
            for s in 0..n {
                prop_assert!(vstar.values()[s] >= v.values()[s] - 1e-8);
            }
        }
    }

    #[test]
    fn finite_horizon_values_approach_monotonically(inst in instances(6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(inst.mdp.n_states(), inst.mdp.n_actions(), &mut rng);
        let v = policy_evaluation(&inst.mdp, &pi, 1e-13).unwrap();
        let mut prev = f64::INFINITY;
        let scale = v.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..120 {
            let d = sup(k_horizon_value(&inst.mdp, &pi, k).unwrap().values(), v.values());
            prop_assert!(d <= prev + 1e-10, "k={k}: {d} > {prev}");
            prev = d;
        }
        prop_assert!(prev <= 0.9f64.powi(119) * scale + 1e-9, "{prev} after 119 steps");
    }

    #[test]
    fn open_loop_value_matches_nonstationary_policy(
        (inst, aseq) in instances(6).prop_flat_map(|i| { let na = i.mdp.n_actions(); (Just(i), action_sequence(na, 7)) }),
    ) {
        for s in 0..inst.mdp.n_states() {
            let v = open_loop_value(&inst.mdp, s, &aseq).unwrap();
            prop_assert!((v - nonstationary_value(&inst.mdp, s, &aseq)).abs() < 1e-10);
        }
    }

    #[test]
    fn expected_outcomes_are_prefix_consistent(
        (inst, aseq) in instances(6).prop_flat_map(|i| { let na = i.mdp.n_actions(); (Just(i), action_sequence(na, 6)) }),
    ) {
        for s in 0..inst.mdp.n_states() {
            let full = expected_outcome_sequence(&inst.mdp, &inst.om, s, &aseq).unwrap();
            prop_assert_eq!(full.len(), aseq.len());
            for j in 0..aseq.len() {
                let prefix = expected_outcome_sequence(&inst.mdp, &inst.om, s, &aseq[..=j]).unwrap();
                prop_assert!(sup(&full.entries[j], prefix.entries.last().unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn outcome_equivalence_is_an_equivalence_and_shrinks_with_horizon(inst in instances(5), h in 1usize..=4) {
        let task = (&inst.mdp, &inst.om);
        let n = inst.mdp.n_states();
        let eq = |a: usize, b: usize, h: usize| outcome_equivalent(task, a, task, b, h, 1e-9).unwrap();
        for a in 0..n {
            prop_assert!(eq(a, a, h));
            for b in 0..n {
                prop_assert_eq!(eq(a, b, h), eq(b, a, h));
                if eq(a, b, h) {
                    for m in 0..h {
                        prop_assert!(eq(a, b, m), "equivalent at {h} but not at {m}");
                    }
                    for c in 0..n {
                        if eq(b, c, h) {
                            prop_assert!(eq(a, c, h));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn minimal_abstraction_is_a_partition_into_equivalence_classes(inst in instances(6), h in 1usize..=4) {
        let phi = minimal_outcome_equivalent_abstraction(&inst.mdp, &inst.om, h).unwrap();
        let n = inst.mdp.n_states();
        let mut seen = vec![0usize; n];
        for c in 0..phi.n_classes() {
            prop_assert!(!phi.members(c).is_empty());
            for &s in phi.members(c) {
                seen[s] += 1;
                prop_assert_eq!(phi.class_of(s), c);
            }
        }
        prop_assert!(seen.iter().all(|&x| x == 1));
        let task = (&inst.mdp, &inst.om);
        for s in 0..n {
            for t in 0..n {
                let eq = outcome_equivalent(task, s, task, t, h, 1e-9).unwrap();
                if phi.same_class(s, t) {
                    prop_assert!(eq, "{s} and {t} share a class but differ");
                } else if !inst.mdp.is_terminal(s) && !inst.mdp.is_terminal(t) {
                    prop_assert!(!eq, "{s} and {t} are equivalent but split");
                }
            }
        }
    }

    #[test]
    fn abstract_states_match_their_ground_members(inst in instances(6), h in 1usize..=4, seed in any::<u64>()) {
        let phi = minimal_outcome_equivalent_abstraction(&inst.mdp, &inst.om, h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightingFn::random(&phi, &mut rng);
        let amdp = build_abstract_mdp(&inst.mdp, &phi, &w).unwrap();
        let aom = abstract_outcome_model(&inst.mdp, &inst.om, &phi, &w).unwrap();
        prop_assert_eq!(aom.reward_weights(), inst.om.reward_weights());
        for s in 0..inst.mdp.n_states() {
            let c = phi.class_of(s);
            prop_assert!(
                outcome_equivalent((&inst.mdp, &inst.om), s, (&amdp.mdp, &aom), c, h, 1e-9).unwrap(),
                "ground state {s} differs from its class {c}"
            );
        }
    }

    #[test]
    fn opsr_partitions_refine_with_horizon_and_agree_across_variants(inst in instances(5)) {
        let n = inst.mdp.n_states();
        let partition = |k: usize, full: bool| {
            let vs: Vec<_> = (0..n)
                .map(|s| if full { opsr_full(&inst.mdp, &inst.om, s, k) } else { opsr_terminal_up_to(&inst.mdp, &inst.om, s, k) }.unwrap())
                .collect();
            opsr_partition(&vs, DEFAULT_RESOLUTION)
        };
        let mut coarser = partition(1, false);
        for k in 1..=4 {
            let terminal = partition(k, false);
            prop_assert_eq!(terminal.canonical_blocks(), partition(k, true).canonical_blocks(), "variants disagree at k={}", k);
            prop_assert!(refines(&terminal, &coarser), "k={} merges classes", k);
            coarser = terminal;
        }
    }

    #[test]
    fn pca_keeps_equal_rows_equal(
        base in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..8),
        copies in prop::collection::vec(0usize..8, 1..6),
        fraction in 0.5f64..=1.0,
    ) {
        let mut data = base.clone();
        for &c in &copies {
            data.push(base[c % base.len()].clone());
        }
        let (_, reduced) = pca_reduce(&data, fraction).unwrap();
        for i in 0..data.len() {
            for j in 0..data.len() {
                if data[i] == data[j] {
                    prop_assert_eq!(&reduced[i], &reduced[j]);
                }
            }
        }
    }

    #[test]
    fn option_execution_is_bounded_deterministic_and_feature_driven(
        inst in instances(6),
        seed in any::<u64>(),
        max_steps in 0usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = inst.mdp.n_states();
        let na = inst.mdp.n_actions();
        // Two distinct feature rows shared round-robin, so states collide on purpose.
        let palette: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|s| palette[s % 2].clone()).collect();
        let table = FeatureTable::from_rows(&rows).unwrap();
        let mut opt = OptionDef::zeros(FeatureMap::new(FeatureKind::AgentSpace), na, 3);
        opt.w_pi.iter_mut().flatten().chain(opt.w_beta.iter_mut().flatten()).for_each(|x| *x = rng.random_range(-2.0..2.0));
        opt.b_pi.iter_mut().chain(opt.b_beta.iter_mut()).for_each(|x| *x = rng.random_range(-1.0..1.0));
        let env = OptionEnv::new(&inst.mdp, &table);
        for s in 0..n {
            let run = execute_option(env, &opt, s, &mut ChaCha8Rng::seed_from_u64(seed ^ s as u64), max_steps).unwrap();
            let again = execute_option(env, &opt, s, &mut ChaCha8Rng::seed_from_u64(seed ^ s as u64), max_steps).unwrap();
            prop_assert_eq!(&run, &again);
            prop_assert!(run.steps <= max_steps);
            prop_assert!(run.trace.iter().all(|&(x, _, _)| !inst.mdp.is_terminal(x)));
            for t in 0..n {
                if table.row(s) == table.row(t) {
                    prop_assert_eq!(option_action_dist(&opt, table.row(s)).unwrap(), option_action_dist(&opt, table.row(t)).unwrap());
                    prop_assert_eq!(option_termination_prob(&opt, table.row(s)).unwrap(), option_termination_prob(&opt, table.row(t)).unwrap());
                }
            }
        }
    }
}

/// A one-task discovery model on a ring of `n` states where action `a` moves
/// `a` steps, with a random trace on it.
fn discovery_case(k: usize, n: usize, na: usize, len: usize, seed: u64) -> (DiscoveryModel, Trajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let table = FeatureTable::from_rows(&rows).unwrap();
    let fm = FeatureMap::new(FeatureKind::Opsr { variant: OpsrVariant::TerminalUpTo, k: 1 });
    let model = DiscoveryModel::zeros(k, na, fm, vec![table], vec!["ring".into()]).unwrap().random(1.5, &mut rng);
    let mut states = vec![rng.random_range(0..n)];
    let mut actions = Vec::new();
    for _ in 0..len {
        let a = rng.random_range(0..na);
        actions.push(a);
        states.push((states.last().unwrap() + a) % n);
    }
    (model, Trajectory { task_id: "ring".into(), states, actions, rewards: vec![0.0; len] })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn posteriors_are_normalised_and_marginally_consistent(
        k in 1usize..=3, n in 2usize..=6, na in 1usize..=3, len in 1usize..=40, seed in any::<u64>(),
    ) {
        let (model, tau) = discovery_case(k, n, na, len, seed);
        let post = forward_backward(&model, &tau).unwrap();
        let k1 = k + 1;
        prop_assert!(post.log_z.is_finite() && post.log_z <= 1e-12);
        for u in &post.u {
            prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(u.iter().all(|&x| x >= -1e-12));
        }
        for (t, v) in post.v.iter().enumerate() {
            for w in 0..k1 {
                let out: f64 = (0..k1).map(|x| v[w * k1 + x]).sum();
                let inn: f64 = (0..k1).map(|x| v[x * k1 + w]).sum();
                prop_assert!((out - post.u[t][w]).abs() < 1e-9);
                prop_assert!((inn - post.u[t + 1][w]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_backward_agrees_with_path_enumeration(
        k in 1usize..=3, n in 2usize..=5, na in 1usize..=3, len in 1usize..=5, seed in any::<u64>(),
    ) {
        prop_assume!(((k + 1) as u128).pow(len as u32) <= 4096);
        let (model, tau) = discovery_case(k, n, na, len, seed);
        let fb = forward_backward(&model, &tau).unwrap();
        let ex = enumerate_posteriors(&model, &tau, 4096).unwrap();
        prop_assert!((fb.log_z - ex.log_z).abs() < 1e-10);
        prop_assert!(sup(&fb.u.concat(), &ex.u.concat()) < 1e-10);
        prop_assert!(sup(&fb.v.concat(), &ex.v.concat()) < 1e-10);
    }

    #[test]
    fn likelihood_ignores_option_labels(
        k in 2usize..=4, n in 2usize..=6, na in 1usize..=3, len in 1usize..=30, seed in any::<u64>(), shift in 1usize..4,
    ) {
        let (model, tau) = discovery_case(k, n, na, len, seed);
        let mut set = model.to_set();
        // Rotate option labels; the null token stays last in the high-level policy.
        set.options.rotate_left(shift % k);
        for t in &mut set.tasks {
            t.w_high[..k].rotate_left(shift % k);
        }
        let relabelled = DiscoveryModel::from_set(&set, model.tables.clone()).unwrap();
        let a = log_likelihood(&model, std::slice::from_ref(&tau)).unwrap();
        let b = log_likelihood(&relabelled, std::slice::from_ref(&tau)).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_central_differences(
        k in 0usize..=2, n in 2usize..=4, na in 1usize..=3, len in 1usize..=8, seed in any::<u64>(),
    ) {
        let (model, tau) = discovery_case(k, n, na, len, seed);
        let post = forward_backward(&model, &tau).unwrap();
        let g = gradient(&model, &tau, &post).unwrap();
        let h = 1e-6;
        let ll = |m: &DiscoveryModel| log_likelihood(m, std::slice::from_ref(&tau)).unwrap();
        for i in 0..model.params.len() {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let fd = (ll(&plus) - ll(&minus)) / (2.0 * h);
            prop_assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()).max(1e-3), "param {i}: {} vs {fd}", g[i]);
        }
    }
}
