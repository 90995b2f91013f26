use proptest::prelude::*;

use opsr_core::domains::craftworld::craftworld_generate;
use opsr_core::domains::lightworld::lightworld_generate;
use opsr_core::domains::{compile, enumerate_mini_domain, parse_task, CompiledTask, DomainKind, GridTaskSpec, MOVES};
use opsr_core::mdp::validate_mdp;
use opsr_core::outcomes::check_reward_decomposition;

fn check_compiled(task: &CompiledTask) -> Result<(), TestCaseError> {
    let report = validate_mdp(&task.mdp);
    prop_assert!(report.is_valid(), "{report:?}");
    prop_assert!(check_reward_decomposition(&task.mdp, &task.outcomes, 1e-9).unwrap());
    prop_assert_eq!(task.states.len(), task.mdp.n_states());
    Ok(())
}

/// Moves into walls or off the grid keep position and inventory. They pay
/// nothing in the mini domain and the ordinary action cost elsewhere.
fn check_blocked_moves(task: &CompiledTask) -> Result<(), TestCaseError> {
    let spec = &task.spec;
    let cost = if spec.kind == DomainKind::Mini { 0.0 } else { -1.0 };
    for (s, g) in task.states.iter().enumerate() {
        if g.terminal {
            continue;
        }
        for dir in 0..MOVES.len() {
            let blocked = match spec.step(g.x, g.y, dir) {
                None => true,
                Some((x, y)) => spec.glyph(x, y) == '#',
            };
            if !blocked {
                continue;
            }
            let row = task.mdp.row(s, dir);
            prop_assert_eq!(row.len(), 1);
            let t = &row[0];
            let h = &task.states[t.next];
            prop_assert_eq!(t.reward, cost);
            prop_assert_eq!((h.x, h.y, h.bits, h.terminal), (g.x, g.y, g.bits, false));
            if usize::from(g.facing) == dir {
                prop_assert_eq!(t.next, s, "blocked move while facing the wall must be a self-loop");
            }
        }
    }
    Ok(())
}

fn roundtrip(spec: &GridTaskSpec) -> Result<(), TestCaseError> {
    prop_assert_eq!(&parse_task(&spec.render()).unwrap(), spec);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn craftworld_tasks_are_well_formed(seed in any::<u64>(), width in 3usize..=5, height in 3usize..=5) {
        let spec = craftworld_generate(seed, width, height).unwrap();
        roundtrip(&spec)?;
        let task = compile(&spec).unwrap();
        check_compiled(&task)?;
        check_blocked_moves(&task)?;
        prop_assert_eq!(&craftworld_generate(seed, width, height).unwrap(), &spec);
    }

    #[test]
    fn lightworld_tasks_are_well_formed(seed in any::<u64>(), rooms in 2usize..=3) {
        let spec = lightworld_generate(seed, rooms).unwrap();
        roundtrip(&spec)?;
        let task = compile(&spec).unwrap();
        check_compiled(&task)?;
        check_blocked_moves(&task)?;
    }
}

#[test]
fn mini_tasks_are_well_formed() {
    for task in enumerate_mini_domain().unwrap() {
        check_compiled(&task).unwrap();
        check_blocked_moves(&task).unwrap();
        roundtrip(&task.spec).unwrap();
    }
}
