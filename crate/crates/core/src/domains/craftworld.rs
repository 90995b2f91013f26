//! Craftworld: gather wood and stone, refine them into a handle and a head,
//! then assemble a hammer.
//!
//! Resources are collected by walking over them. Workstations block movement
//! and are operated with `use` (action 4) while facing them; the agent faces
//! the direction of its last attempted move and starts facing up. Every
//! action costs 1 and crafting the hammer ends the episode with +1000.
//!
//! Outcomes are `(Δwood, Δstone, Δhandle, Δhead, Δhammer, step)`; the last
//! component is 1 on every transition and carries the step cost.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{compile as compile_any, CompiledTask, DomainKind, GridState, GridTaskSpec, StateSpace, MOVE_NAMES};
use crate::error::{Error, Result};
use crate::mdp::MdpBuilder;
use crate::outcomes::OutcomeModel;

pub const USE: usize = 4;
pub const N_ACTIONS: usize = 5;
pub const OUTCOME_LABELS: [&str; 6] = ["wood", "stone", "handle", "head", "hammer", "step"];
pub const STEP_REWARD: f64 = -1.0;
pub const FINAL_REWARD: f64 = 1000.0;
pub const DEFAULT_DISCOUNT: f64 = 0.99;

const MAX_PLACEMENT_TRIES: usize = 1000;

/// Inventory and map progress, packed into [`GridState::bits`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Progress {
    wood_on_map: bool,
    stone_on_map: bool,
    wood: u8,
    stone: u8,
    handle: u8,
    head: u8,
}

impl Progress {
    fn bits(self) -> u32 {
        u32::from(self.wood_on_map)
            | u32::from(self.stone_on_map) << 1
            | u32::from(self.wood) << 2
            | u32::from(self.stone) << 4
            | u32::from(self.handle) << 6
            | u32::from(self.head) << 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Key {
    Playing { x: usize, y: usize, facing: u8, p: Progress },
    Done,
}

fn is_station(c: char) -> bool {
    matches!(c, 'W' | 'F' | 'N' | '#')
}

/// Result of one action: next key and outcome vector.
fn step(spec: &GridTaskSpec, key: Key, a: usize) -> (Key, [f64; 6]) {
    let Key::Playing { x, y, facing, p } = key else {
        return (Key::Done, [0.0; 6]);
    };
    let mut sigma = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    if a < 4 {
        let mut np = p;
        let (nx, ny) = match spec.step(x, y, a) {
            Some((nx, ny)) if !is_station(spec.glyph(nx, ny)) => (nx, ny),
            _ => (x, y),
        };
        match spec.glyph(nx, ny) {
            'w' if np.wood_on_map => {
                np.wood_on_map = false;
                np.wood += 1;
                sigma[0] = 1.0;
            }
            's' if np.stone_on_map => {
                np.stone_on_map = false;
                np.stone += 1;
                sigma[1] = 1.0;
            }
            _ => {}
        }
        return (Key::Playing { x: nx, y: ny, facing: a as u8, p: np }, sigma);
    }
    let Some((fx, fy)) = spec.step(x, y, facing as usize) else {
        return (key, sigma);
    };
    let mut np = p;
    match spec.glyph(fx, fy) {
        'W' if p.wood > 0 => {
            np.wood -= 1;
            np.handle += 1;
            sigma[0] = -1.0;
            sigma[2] = 1.0;
        }
        'F' if p.stone > 0 => {
            np.stone -= 1;
            np.head += 1;
            sigma[1] = -1.0;
            sigma[3] = 1.0;
        }
        'N' if p.handle > 0 && p.head > 0 => {
            sigma[2] = -1.0;
            sigma[3] = -1.0;
            sigma[4] = 1.0;
            return (Key::Done, sigma);
        }
        _ => {}
    }
    (Key::Playing { x, y, facing, p: np }, sigma)
}

pub(super) fn compile(spec: &GridTaskSpec) -> Result<CompiledTask> {
    for g in ['w', 's', 'W', 'F', 'N'] {
        let n = spec.find(g).len();
        if n != 1 {
            return Err(Error::Config(format!("craftworld task needs exactly one `{g}`, found {n}")));
        }
    }
    let discount = spec.meta_f64("discount", DEFAULT_DISCOUNT)?;
    let start = Key::Playing {
        x: spec.start.0,
        y: spec.start.1,
        facing: 0,
        p: Progress { wood_on_map: true, stone_on_map: true, wood: 0, stone: 0, handle: 0, head: 0 },
    };
    let space = StateSpace::explore(start, |&k| match k {
        Key::Done => Vec::new(),
        _ => (0..N_ACTIONS).map(|a| step(spec, k, a).0).collect(),
    });
    let n = space.keys.len();
    let weights = vec![0.0, 0.0, 0.0, 0.0, FINAL_REWARD - STEP_REWARD, STEP_REWARD];
    let mut b = MdpBuilder::new(n, N_ACTIONS, discount);
    let mut om = OutcomeModel::new(n, N_ACTIONS, weights.clone())
        .with_labels(&OUTCOME_LABELS)
        .with_story_mask(vec![true, true, true, true, true, false]);
    let mut states = Vec::with_capacity(n);
    for (i, &k) in space.keys.iter().enumerate() {
        match k {
            Key::Done => {
                b.terminal(i);
                states.push(GridState { x: 0, y: 0, facing: 0, bits: 0, terminal: true });
            }
            Key::Playing { x, y, facing, p } => {
                states.push(GridState { x, y, facing, bits: p.bits(), terminal: false });
                for a in 0..N_ACTIONS {
                    let (nk, sigma) = step(spec, k, a);
                    let j = space.id(&nk);
                    let r: f64 = sigma.iter().zip(&weights).map(|(s, w)| s * w).sum();
                    b.transition(i, a, j, 1.0, r);
                    om.set_sigma(i, a, j, sigma.to_vec());
                }
            }
        }
    }
    b.initial(0);
    let mut action_names: Vec<String> = MOVE_NAMES.iter().map(|s| s.to_string()).collect();
    action_names.push("use".into());
    Ok(CompiledTask { spec: spec.clone(), mdp: b.build()?, outcomes: om, states, action_names })
}

/// Random Craftworld task with one of each resource and workstation.
///
/// Placements are retried until the hammer can be crafted from the start.
pub fn craftworld_generate(seed: u64, width: usize, height: usize) -> Result<GridTaskSpec> {
    if width * height < 6 {
        return Err(Error::Generation(format!("a {width}x{height} grid cannot hold six items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<usize> = (0..width * height).collect();
    for _ in 0..MAX_PLACEMENT_TRIES {
        cells.shuffle(&mut rng);
        let mut grid = vec!['.'; width * height];
        for (glyph, &c) in ['w', 's', 'W', 'F', 'N'].iter().zip(&cells[1..6]) {
            grid[c] = *glyph;
        }
        let spec = GridTaskSpec {
            kind: DomainKind::Craftworld,
            width,
            height,
            cells: grid,
            start: (cells[0] % width, cells[0] / width),
            meta: BTreeMap::new(),
        };
        let task = compile_any(&spec)?;
        if task.states.iter().any(|s| s.terminal) {
            return Ok(spec);
        }
    }
    Err(Error::Generation(format!("no solvable placement after {MAX_PLACEMENT_TRIES} tries (seed {seed})")))
}
