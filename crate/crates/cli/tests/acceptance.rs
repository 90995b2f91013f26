//! End-to-end acceptance checks. Runs without the libtest harness so that the
//! one-line verdict of every criterion is always printed.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opsr_core::discovery::{enumerate_posteriors, forward_backward, gradient, DiscoveryModel, Trajectory};
use opsr_core::domains::lightworld::{layout, sensor_readings, N_SENSORS};
use opsr_core::domains::{agent_space_features, compile, enumerate_mini_domain, lightworld_generate, load_task, parse_task};
use opsr_core::harness::{paired_t_test, run_protocol, ProtocolConfig};
use opsr_core::mdp::{SequenceIter, TabularMdp};
use opsr_core::opsr::{opsr_length, union_fingerprint_labels, union_opsr_classes, OpsrVariant};
use opsr_core::options::{FeatureKind, FeatureMap, FeatureTable};
use opsr_core::outcomes::{
    check_reward_decomposition, expected_outcome_sequence, minimal_outcome_equivalent_abstraction, outcome_equivalent, FingerprintConfig,
    OutcomeModel,
};
use opsr_core::verify::{counterexample, run_all, TheoryConfig};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mini_union() -> Vec<(TabularMdp, OutcomeModel)> {
    enumerate_mini_domain().expect("mini domain").into_iter().map(|t| (t.mdp, t.outcomes)).collect()
}

/// Block index of every label in first-seen order.
fn blocks(labels: &[opsr_core::abstraction::ClassLabel]) -> Vec<usize> {
    let mut seen = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let n = seen.len();
            *seen.entry(l.clone()).or_insert(n)
        })
        .collect()
}

fn mini_counts() -> Verdict {
    let owned = mini_union();
    let tasks: Vec<_> = owned.iter().map(|(m, o)| (m, o)).collect();
    let n_states: usize = tasks.iter().map(|t| t.0.n_states()).sum();
    let h6 = union_fingerprint_labels(&tasks, FingerprintConfig::new(6)).map_err(|e| e.to_string())?;
    let classes6 = blocks(&h6).into_iter().max().map_or(0, |m| m + 1);
    let classes3 = union_opsr_classes(&tasks, 3, OpsrVariant::TerminalUpTo).map_err(|e| e.to_string())?;
    let len = opsr_length(OpsrVariant::TerminalUpTo, 4, 1, 6);
    let seqs = SequenceIter::new(4, 6).count();
    let h3_fp = union_fingerprint_labels(&tasks, FingerprintConfig::new(3)).map_err(|e| e.to_string())?;
    let fp3 = blocks(&h3_fp).into_iter().max().map_or(0, |m| m + 1);
    check(
        tasks.len() == 660 && n_states == 2544 && classes6 == 370 && classes3 == 217 && len == 5460 && seqs == 4096,
        format!(
            "tasks {} states {n_states} horizon-6 classes {classes6} horizon-3 classes {classes3} (fingerprints with distinct terminals: {fp3}) opsr length {len} sequences {seqs}",
            tasks.len()
        ),
    )
}

fn horizon_stability() -> Verdict {
    let owned = mini_union();
    let tasks: Vec<_> = owned.iter().map(|(m, o)| (m, o)).collect();
    let base = blocks(&union_fingerprint_labels(&tasks, FingerprintConfig::new(6)).map_err(|e| e.to_string())?);
    let mut same = Vec::new();
    for h in 7..=9 {
        let b = blocks(&union_fingerprint_labels(&tasks, FingerprintConfig::new(h)).map_err(|e| e.to_string())?);
        same.push((h, b == base));
    }
    check(same.iter().all(|x| x.1), format!("horizon 6 partition equals horizons 7..9: {same:?}"))
}

fn theory_checks() -> Verdict {
    let reports = run_all(&TheoryConfig::default()).map_err(|e| e.to_string())?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    let cases: usize = reports.iter().map(|r| r.cases).sum();
    check(failed.is_empty(), if failed.is_empty() { format!("{} checks, {cases} cases", reports.len()) } else { failed.join("; ") })
}

fn counterexample_check() -> Verdict {
    let c = counterexample().map_err(|e| e.to_string())?;
    let witness = c.transfer.witness.as_ref().map(|w| w.state());
    check(
        c.start_states_share_class
            && (c.abstract_value - 1.0).abs() < 1e-12
            && (c.ground_value - 2.0).abs() < 1e-12
            && !c.transfer.optimal
            && witness == Some(0)
            && !c.target_plannable,
        format!(
            "abstract value {} ground optimum {} transfer optimal {} witness state {:?} (beta0) target plannable {}",
            c.abstract_value, c.ground_value, c.transfer.optimal, witness, c.target_plannable
        ),
    )
}

fn random_model(k: usize, n: usize, na: usize, dim: usize, rng: &mut ChaCha8Rng) -> DiscoveryModel {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let table = FeatureTable::from_rows(&rows).expect("table");
    let fm = FeatureMap::new(FeatureKind::Opsr { variant: OpsrVariant::TerminalUpTo, k: 1 });
    let scale = rng.random_range(0.5..2.0);
    DiscoveryModel::zeros(k, na, fm, vec![table], vec!["t".into()]).expect("model").random(scale, rng)
}

fn random_trace(n: usize, na: usize, len: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let states: Vec<usize> = (0..=len).map(|_| rng.random_range(0..n)).collect();
    let actions: Vec<usize> = (0..len).map(|_| rng.random_range(0..na)).collect();
    Trajectory { task_id: "t".into(), states, actions, rewards: vec![0.0; len] }
}

fn inference() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_fb: f64 = 0.0;
    for _ in 0..500 {
        let k = rng.random_range(0..=3);
        let max_len = (1..=12).take_while(|&t| (k as u64 + 1).pow(t as u32) <= 4096).last().unwrap_or(1);
        let len = rng.random_range(1..=max_len);
        let (n, na) = (rng.random_range(2..=5), rng.random_range(2..=4));
        let m = random_model(k, n, na, 3, &mut rng);
        let tau = random_trace(n, na, len, &mut rng);
        let fb = forward_backward(&m, &tau).map_err(|e| e.to_string())?;
        let ex = enumerate_posteriors(&m, &tau, 4096).map_err(|e| e.to_string())?;
        worst_fb = worst_fb.max((fb.log_z - ex.log_z).abs());
        for (a, b) in fb.u.iter().flatten().zip(ex.u.iter().flatten()).chain(fb.v.iter().flatten().zip(ex.v.iter().flatten())) {
            worst_fb = worst_fb.max((a - b).abs());
        }
    }
    let mut worst_rel: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..100 {
        let m = random_model(3, 4, 3, 2, &mut rng);
        let len = rng.random_range(2..=10);
        let tau = random_trace(4, 3, len, &mut rng);
        let post = forward_backward(&m, &tau).map_err(|e| e.to_string())?;
        let g = gradient(&m, &tau, &post).map_err(|e| e.to_string())?;
        for i in 0..m.params.len() {
            let mut p = m.clone();
            p.params[i] += h;
            let up = forward_backward(&p, &tau).map_err(|e| e.to_string())?.log_z;
            p.params[i] -= 2.0 * h;
            let down = forward_backward(&p, &tau).map_err(|e| e.to_string())?.log_z;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-6 {
                worst_rel = worst_rel.max((fd - g[i]).abs() / scale);
            }
        }
    }
    check(
        worst_fb <= 1e-10 && worst_rel <= 1e-4,
        format!("500 instances max deviation {worst_fb:.2e}; 100 points max gradient relative error {worst_rel:.2e}"),
    )
}

fn learning_benefit() -> Verdict {
    let cfg = ProtocolConfig::craftworld_desk(0);
    let (report, _) = run_protocol(&cfg).map_err(|e| e.to_string())?;
    let (flat, options) = report.paired_aurc();
    let test = paired_t_test(&options, &flat).map_err(|e| e.to_string())?;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    check(
        report.partial.is_none() && mean(&options) > mean(&flat) && test.p_value < 0.05,
        format!(
            "mean AURC options {:.1} primitive {:.1}, paired one-sided p {:.4} over {} pairs",
            mean(&options),
            mean(&flat),
            test.p_value,
            test.n
        ),
    )
}

fn lightworld_sensors() -> Verdict {
    let mut in_range = true;
    let mut colocated = true;
    let mut values = 0usize;
    for seed in 0..10u64 {
        let task = compile(&lightworld_generate(seed, 2).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for s in 0..task.mdp.n_states() {
            let f = agent_space_features(&task, s).map_err(|e| e.to_string())?;
            values += f.len();
            in_range &= f.len() == N_SENSORS && f.iter().all(|v| (0.0..=1.0).contains(v));
            let st = task.states[s];
            let lay = layout(&task.spec).map_err(|e| e.to_string())?;
            let on_key = lay.keys.iter().enumerate().any(|(r, k)| *k == Some((st.x, st.y)) && st.bits & (1 << r) == 0);
            if !st.terminal && on_key {
                colocated &= f[0..4].iter().all(|&v| v == 1.0);
            }
        }
    }
    // A straight corridor with a key 20 and then 19 cells away.
    let corridor = "domain=lightworld\n##########################\n#A...................k...D\n#L.......................#\n##########################\n";
    let spec = parse_task(corridor).map_err(|e| e.to_string())?;
    let lay = layout(&spec).map_err(|e| e.to_string())?;
    let at20 = sensor_readings(&spec, &lay, 1, 1, 0)[3];
    let at19 = sensor_readings(&spec, &lay, 2, 1, 0)[3];
    let on_top = sensor_readings(&spec, &lay, 21, 1, 0);
    let far_ok = at20 == 0.0 && (at19 - 0.05).abs() < 1e-12 && on_top[0..4] == [1.0; 4];
    let (mut rooms, mut keys) = (0usize, 0usize);
    for seed in 0..1000u64 {
        let lay = layout(&lightworld_generate(10_000 + seed, 3).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        rooms += lay.n_rooms();
        keys += lay.keys.iter().filter(|k| k.is_some()).count();
    }
    let p = 1.0 / 3.0;
    let sigma = (rooms as f64 * p * (1.0 - p)).sqrt();
    let dev = (keys as f64 - rooms as f64 * p).abs();
    check(
        in_range && colocated && far_ok && rooms == 3000 && dev <= 3.0 * sigma,
        format!(
            "{values} readings in [0,1]: {in_range}; key co-location reads 1: {colocated}; 20 cells {at20} 19 cells {at19}; keys {keys}/{rooms} rooms (|dev| {dev:.1} vs 3 sigma {:.1})",
            3.0 * sigma
        ),
    )
}

fn decomposition_and_prefix() -> Verdict {
    let dir = workspace_root().join("tasks");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "task"))
        .collect();
    paths.sort();
    let mut tasks = Vec::new();
    for p in &paths {
        let t = compile(&load_task(p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if !check_reward_decomposition(&t.mdp, &t.outcomes, 1e-9).map_err(|e| e.to_string())? {
            return Err(format!("reward decomposition fails on {}", p.display()));
        }
        tasks.push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut classes = BTreeMap::new();
    let (mut prefix_ok, mut mono_ok, mut nontrivial) = (true, true, 0usize);
    for _ in 0..1000 {
        let ti = rng.random_range(0..tasks.len());
        let t = &tasks[ti];
        let (m, o) = (&t.mdp, &t.outcomes);
        let s = rng.random_range(0..m.n_states());
        let n = rng.random_range(1..=4);
        let seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..m.n_actions())).collect();
        let full = expected_outcome_sequence(m, o, s, &seq).map_err(|e| e.to_string())?;
        for j in 0..n {
            let part = expected_outcome_sequence(m, o, s, &seq[..=j]).map_err(|e| e.to_string())?;
            prefix_ok &= part.entries.last() == Some(&full.entries[j]);
        }
        let phi = match classes.entry((ti, n)) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(minimal_outcome_equivalent_abstraction(m, o, n).map_err(|e| e.to_string())?)
            }
        };
        let members = phi.members(phi.class_of(s));
        let other = members[rng.random_range(0..members.len())];
        nontrivial += usize::from(other != s);
        if outcome_equivalent((m, o), s, (m, o), other, n, 1e-9).map_err(|e| e.to_string())? {
            for h in 1..n {
                mono_ok &= outcome_equivalent((m, o), s, (m, o), other, h, 1e-9).map_err(|e| e.to_string())?;
            }
        } else {
            mono_ok = false;
        }
    }
    check(
        prefix_ok && mono_ok,
        format!(
            "{} shipped tasks decompose; 1000 samples prefix-consistent {prefix_ok}, length-monotone {mono_ok} ({nontrivial} with distinct partner states)",
            tasks.len()
        ),
    )
}

fn opsr(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_opsr")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("opsr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn read_dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn determinism() -> Verdict {
    let root = workspace_root();
    let config = root.join("configs/craftworld_desk.toml");
    let tmp = std::env::temp_dir().join(format!("opsr-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let (traces, options, a, b) = (tmp.join("traces"), tmp.join("options.json"), tmp.join("a"), tmp.join("b"));
    opsr(&["traces", "--config", &s(&config), "--out", &s(&traces)])?;
    opsr(&["discover", "--config", &s(&root.join("configs/discovery.toml")), "--traces", &s(&traces), "--out", &s(&options)])?;
    opsr(&["evaluate", "--config", &s(&config), "--options", &s(&options), "--out", &s(&a)])?;
    opsr(&["evaluate", "--config", &s(&config), "--options", &s(&options), "--out", &s(&b)])?;
    let (ra, rb) = (read_dir_bytes(&a)?, read_dir_bytes(&b)?);
    let _ = std::fs::remove_dir_all(&tmp);
    let bytes: usize = ra.values().map(Vec::len).sum();
    check(!ra.is_empty() && ra == rb, format!("{} report files, {bytes} bytes, identical: {}", ra.len(), ra == rb))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("mini-domain exact counts", mini_counts),
        ("horizon stability", horizon_stability),
        ("abstraction theory checks", theory_checks),
        ("transfer counterexample", counterexample_check),
        ("inference correctness", inference),
        ("learning benefit", learning_benefit),
        ("lightworld sensor contract", lightworld_sensors),
        ("decomposition and prefix invariants", decomposition_and_prefix),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let verdict = run();
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
