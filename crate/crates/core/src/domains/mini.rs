//! The mini gridworld family: tiny grids with a single goal.
//!
//! States are the cells reachable from the start. Entering the goal ends the
//! episode and produces the only outcome, so `d = 1`.

use std::collections::BTreeMap;

use super::{CompiledTask, DomainKind, GridState, GridTaskSpec, StateSpace, MOVE_NAMES};
use crate::error::{Error, Result};
use crate::mdp::MdpBuilder;
use crate::outcomes::OutcomeModel;

/// Discount used when a mini task does not set `meta discount`.
pub const DEFAULT_DISCOUNT: f64 = 0.95;

/// Goal outcome weight used when a mini task does not set `meta goal_reward`.
pub const DEFAULT_GOAL_REWARD: f64 = 1.0;

pub(super) fn compile(spec: &GridTaskSpec) -> Result<CompiledTask> {
    let goals = spec.find('G');
    if goals.len() != 1 {
        return Err(Error::Config(format!("mini task needs exactly one goal, found {}", goals.len())));
    }
    let goal = goals[0];
    let discount = spec.meta_f64("discount", DEFAULT_DISCOUNT)?;
    let w_goal = spec.meta_f64("goal_reward", DEFAULT_GOAL_REWARD)?;
    let blocked = |x: usize, y: usize| spec.glyph(x, y) == '#';
    let next_cell = |(x, y): (usize, usize), a: usize| match spec.step(x, y, a) {
        Some((nx, ny)) if !blocked(nx, ny) => (nx, ny),
        _ => (x, y),
    };
    let space =
        StateSpace::explore(spec.start, |&cell| if cell == goal { Vec::new() } else { (0..4).map(|a| next_cell(cell, a)).collect() });
    let n = space.keys.len();
    let mut b = MdpBuilder::new(n, 4, discount);
    let mut om = OutcomeModel::new(n, 4, vec![w_goal]).with_labels(&["goal"]);
    for (i, &cell) in space.keys.iter().enumerate() {
        if cell == goal {
            b.terminal(i);
            continue;
        }
        for a in 0..4 {
            let nc = next_cell(cell, a);
            let j = space.id(&nc);
            let hit = nc == goal;
            b.transition(i, a, j, 1.0, if hit { w_goal } else { 0.0 });
            if hit {
                om.set_sigma(i, a, j, vec![1.0]);
            }
        }
    }
    b.initial(0);
    let states = space.keys.iter().map(|&(x, y)| GridState { x, y, facing: 0, bits: 0, terminal: (x, y) == goal }).collect();
    Ok(CompiledTask {
        spec: spec.clone(),
        mdp: b.build()?,
        outcomes: om,
        states,
        action_names: MOVE_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Every mini task on 3x2 and 2x3 grids with zero to two obstacles. Each
/// ordered pair of distinct free cells gives one (start, goal) task.
///
/// Tasks whose goal cannot be reached are kept.
pub fn enumerate_mini_domain() -> Result<Vec<CompiledTask>> {
    let mut out = Vec::new();
    for (w, h) in [(3usize, 2usize), (2, 3)] {
        let n = w * h;
        let mut obstacle_sets: Vec<Vec<usize>> = vec![Vec::new()];
        obstacle_sets.extend((0..n).map(|i| vec![i]));
        for i in 0..n {
            for j in i + 1..n {
                obstacle_sets.push(vec![i, j]);
            }
        }
        for obstacles in &obstacle_sets {
            let free: Vec<usize> = (0..n).filter(|c| !obstacles.contains(c)).collect();
            for &start in &free {
                for &goal in &free {
                    if start == goal {
                        continue;
                    }
                    let mut cells = vec!['.'; n];
                    for &o in obstacles {
                        cells[o] = '#';
                    }
                    cells[goal] = 'G';
                    let spec = GridTaskSpec {
                        kind: DomainKind::Mini,
                        width: w,
                        height: h,
                        cells,
                        start: (start % w, start / w),
                        meta: BTreeMap::new(),
                    };
                    out.push(compile(&spec)?);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::parse_task;
    use crate::mdp::solve_optimal;

    #[test]
    fn shortest_plan_on_open_grid() {
        // Opposite corners of a 3x2 grid are three moves apart.
        let t = compile(&parse_task("domain=mini\nA..\n..G\n").unwrap()).unwrap();
        let (_, v) = solve_optimal(&t.mdp, 1e-12).unwrap();
        assert!((v[0] - 0.95f64.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn blocked_goal_has_zero_value() {
        let t = compile(&parse_task("domain=mini\nA#G\n.#.\n").unwrap()).unwrap();
        assert!(t.states.iter().all(|s| !s.terminal));
        let (_, v) = solve_optimal(&t.mdp, 1e-12).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn walls_are_self_loops() {
        let t = compile(&parse_task("domain=mini\nA.G\n").unwrap()).unwrap();
        assert_eq!(t.mdp.row(0, 0)[0].next, 0);
        assert_eq!(t.mdp.row(0, 0)[0].reward, 0.0);
    }
}
