//! Lightworld: a chain of rooms joined by locked doors.
//!
//! Rooms are laid out left to right and separated by wall columns. Each room
//! has a lock that opens the door in its right wall; a room may also contain a
//! key, in which case the key must be held to open the lock. Keys are picked
//! up (action 4) and locks opened (action 5) while standing on them. Walking
//! through the last door leaves the building and ends the episode.
//!
//! Outcomes are `(Δroom, Δkey, Δdoor, Δgoal, step)`. Every action costs 1 and
//! leaving the building pays +1000.
//!
//! The agent-space sensors read, for keys, locks and doors in each of the four
//! move directions, `max(0, 1 - d / 20)` where `d` is the distance to the
//! nearest such object along a straight line. Walls block the line; a door is
//! visible but also blocks it. Standing on an object reads 1 in all four
//! directions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CompiledTask, DomainKind, GridState, GridTaskSpec, StateSpace, MOVE_NAMES};
use crate::error::{Error, Result};
use crate::mdp::MdpBuilder;
use crate::outcomes::OutcomeModel;

pub const PICKUP: usize = 4;
pub const UNLOCK: usize = 5;
pub const N_ACTIONS: usize = 6;
pub const OUTCOME_LABELS: [&str; 5] = ["room", "key", "door", "goal", "step"];
pub const STEP_REWARD: f64 = -1.0;
pub const EXIT_REWARD: f64 = 1000.0;
pub const DEFAULT_DISCOUNT: f64 = 0.99;
pub const MIN_ROOM: usize = 5;
pub const MAX_ROOM: usize = 15;
pub const KEY_PROBABILITY: f64 = 1.0 / 3.0;
pub const SENSOR_RANGE: f64 = 20.0;
pub const N_SENSORS: usize = 12;

/// Room structure recovered from a lightworld grid.
#[derive(Debug, Clone)]
pub struct Layout {
    /// Room index of each cell (door cells belong to the room on their left).
    pub room_of: Vec<Option<usize>>,
    pub doors: Vec<(usize, usize)>,
    pub locks: Vec<(usize, usize)>,
    pub keys: Vec<Option<(usize, usize)>>,
}

impl Layout {
    pub fn n_rooms(&self) -> usize {
        self.doors.len()
    }

    fn door_index(&self, cell: (usize, usize)) -> Option<usize> {
        self.doors.iter().position(|&d| d == cell)
    }
}

/// Recovers rooms, doors, locks and keys from a lightworld spec.
pub fn layout(spec: &GridTaskSpec) -> Result<Layout> {
    if spec.kind != DomainKind::Lightworld {
        return Err(Error::WrongDomain { expected: "lightworld".into(), found: spec.kind.to_string() });
    }
    let (w, h) = (spec.width, spec.height);
    let open = |x: usize, y: usize| !matches!(spec.glyph(x, y), '#' | 'D');
    let mut comp: Vec<Option<usize>> = vec![None; w * h];
    let mut comps: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !open(x, y) || comp[y * w + x].is_some() {
                continue;
            }
            let id = comps.len();
            let mut cells = vec![(x, y)];
            comp[y * w + x] = Some(id);
            let mut i = 0;
            while i < cells.len() {
                let (cx, cy) = cells[i];
                for d in 0..4 {
                    if let Some((nx, ny)) = spec.step(cx, cy, d) {
                        if open(nx, ny) && comp[ny * w + nx].is_none() {
                            comp[ny * w + nx] = Some(id);
                            cells.push((nx, ny));
                        }
                    }
                }
                i += 1;
            }
            let min_x = cells.iter().map(|c| c.0).min().unwrap_or(0);
            comps.push((min_x, cells));
        }
    }
    // Rooms are numbered left to right.
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by_key(|&i| comps[i].0);
    let mut rank = vec![0; comps.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut room_of: Vec<Option<usize>> = comp.iter().map(|c| c.map(|i| rank[i])).collect();
    let n_rooms = comps.len();
    let mut doors: Vec<Option<(usize, usize)>> = vec![None; n_rooms];
    for (x, y) in spec.find('D') {
        let left = if x > 0 { room_of[y * w + x - 1] } else { None };
        let Some(r) = left else {
            return Err(Error::Config(format!("door at ({x}, {y}) has no room on its left")));
        };
        if doors[r].replace((x, y)).is_some() {
            return Err(Error::Config(format!("room {r} has more than one door")));
        }
        room_of[y * w + x] = Some(r);
    }
    let doors: Vec<(usize, usize)> = doors
        .into_iter()
        .enumerate()
        .map(|(r, d)| d.ok_or_else(|| Error::Config(format!("room {r} has no door"))))
        .collect::<Result<_>>()?;
    let mut locks: Vec<Option<(usize, usize)>> = vec![None; n_rooms];
    for (x, y) in spec.find('L') {
        let r = room_of[y * w + x].expect("lock lies inside a room");
        if locks[r].replace((x, y)).is_some() {
            return Err(Error::Config(format!("room {r} has more than one lock")));
        }
    }
    let locks = locks
        .into_iter()
        .enumerate()
        .map(|(r, l)| l.ok_or_else(|| Error::Config(format!("room {r} has no lock"))))
        .collect::<Result<_>>()?;
    let mut keys = vec![None; n_rooms];
    for (x, y) in spec.find('k') {
        let r = room_of[y * w + x].expect("key lies inside a room");
        if keys[r].replace((x, y)).is_some() {
            return Err(Error::Config(format!("room {r} has more than one key")));
        }
    }
    Ok(Layout { room_of, doors, locks, keys })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Key {
    At { x: usize, y: usize, held: u32, open: u32 },
    Out,
}

fn step(spec: &GridTaskSpec, lay: &Layout, key: Key, a: usize) -> (Key, [f64; 5]) {
    let Key::At { x, y, held, open } = key else {
        return (Key::Out, [0.0; 5]);
    };
    let mut sigma = [0.0, 0.0, 0.0, 0.0, 1.0];
    let w = spec.width;
    let room = lay.room_of[y * w + x].expect("agent stands in a room");
    match a {
        0..=3 => {
            let Some((nx, ny)) = spec.step(x, y, a) else {
                return (key, sigma);
            };
            let g = spec.glyph(nx, ny);
            if g == '#' {
                return (key, sigma);
            }
            if g == 'D' {
                let d = lay.door_index((nx, ny)).expect("door is registered");
                if open & (1 << d) == 0 {
                    return (key, sigma);
                }
                if d + 1 == lay.n_rooms() {
                    sigma[3] = 1.0;
                    return (Key::Out, sigma);
                }
            }
            let nroom = lay.room_of[ny * w + nx].expect("open cell lies in a room");
            sigma[0] = nroom as f64 - room as f64;
            (Key::At { x: nx, y: ny, held, open }, sigma)
        }
        PICKUP => match lay.keys[room] {
            Some(k) if k == (x, y) && held & (1 << room) == 0 => {
                sigma[1] = 1.0;
                (Key::At { x, y, held: held | 1 << room, open }, sigma)
            }
            _ => (key, sigma),
        },
        UNLOCK => {
            let needs_key = lay.keys[room].is_some();
            if lay.locks[room] == (x, y) && open & (1 << room) == 0 && (!needs_key || held & (1 << room) != 0) {
                sigma[2] = 1.0;
                (Key::At { x, y, held, open: open | 1 << room }, sigma)
            } else {
                (key, sigma)
            }
        }
        _ => (key, sigma),
    }
}

pub(super) fn compile(spec: &GridTaskSpec) -> Result<CompiledTask> {
    let lay = layout(spec)?;
    let discount = spec.meta_f64("discount", DEFAULT_DISCOUNT)?;
    let start = Key::At { x: spec.start.0, y: spec.start.1, held: 0, open: 0 };
    let space = StateSpace::explore(start, |&k| match k {
        Key::Out => Vec::new(),
        _ => (0..N_ACTIONS).map(|a| step(spec, &lay, k, a).0).collect(),
    });
    let n = space.keys.len();
    let weights = vec![0.0, 0.0, 0.0, EXIT_REWARD - STEP_REWARD, STEP_REWARD];
    let mut b = MdpBuilder::new(n, N_ACTIONS, discount);
    let mut om =
        OutcomeModel::new(n, N_ACTIONS, weights.clone()).with_labels(&OUTCOME_LABELS).with_story_mask(vec![true, true, true, true, false]);
    let mut states = Vec::with_capacity(n);
    for (i, &k) in space.keys.iter().enumerate() {
        match k {
            Key::Out => {
                b.terminal(i);
                states.push(GridState { x: 0, y: 0, facing: 0, bits: 0, terminal: true });
            }
            Key::At { x, y, held, open } => {
                states.push(GridState { x, y, facing: 0, bits: held | open << 8, terminal: false });
                for a in 0..N_ACTIONS {
                    let (nk, sigma) = step(spec, &lay, k, a);
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
    action_names.push("pickup".into());
    action_names.push("unlock".into());
    Ok(CompiledTask { spec: spec.clone(), mdp: b.build()?, outcomes: om, states, action_names })
}

/// Sensor readings at `(x, y)`, ordered `[key; lock; door]` × `[up, down, left, right]`.
///
/// Keys in `held_rooms` (bit per room) have been picked up and are invisible.
pub fn sensor_readings(spec: &GridTaskSpec, lay: &Layout, x: usize, y: usize, held_rooms: u32) -> [f64; N_SENSORS] {
    let is_target = |kind: usize, cx: usize, cy: usize| -> bool {
        match kind {
            0 => lay.keys.iter().enumerate().any(|(r, k)| *k == Some((cx, cy)) && held_rooms & (1 << r) == 0),
            1 => lay.locks.contains(&(cx, cy)),
            _ => lay.doors.contains(&(cx, cy)),
        }
    };
    let mut out = [0.0; N_SENSORS];
    for kind in 0..3 {
        if is_target(kind, x, y) {
            for d in 0..4 {
                out[kind * 4 + d] = 1.0;
            }
            continue;
        }
        for d in 0..4 {
            let (mut cx, mut cy) = (x, y);
            let mut dist = 0usize;
            while let Some((nx, ny)) = spec.step(cx, cy, d) {
                dist += 1;
                if is_target(kind, nx, ny) {
                    out[kind * 4 + d] = (1.0 - dist as f64 / SENSOR_RANGE).max(0.0);
                    break;
                }
                if matches!(spec.glyph(nx, ny), '#' | 'D') || dist as f64 >= SENSOR_RANGE {
                    break;
                }
                (cx, cy) = (nx, ny);
            }
        }
    }
    out
}

/// The twelve agent-centred sensor values of ground state `s`.
///
/// The terminal state reads all zeros.
pub fn agent_space_features(task: &CompiledTask, s: usize) -> Result<[f64; N_SENSORS]> {
    if task.spec.kind != DomainKind::Lightworld {
        return Err(Error::WrongDomain { expected: "lightworld".into(), found: task.spec.kind.to_string() });
    }
    task.mdp.check_state(s)?;
    let st = task.states[s];
    if st.terminal {
        return Ok([0.0; N_SENSORS]);
    }
    let lay = layout(&task.spec)?;
    Ok(sensor_readings(&task.spec, &lay, st.x, st.y, st.bits & 0xff))
}

/// Random lightworld task with `n_rooms` rooms in a row.
///
/// Each room's interior is 5 to 15 cells wide and high; rooms are top-aligned.
/// Every room gets a lock and, with probability 1/3, a key.
pub fn lightworld_generate(seed: u64, n_rooms: usize) -> Result<GridTaskSpec> {
    if !(2..=5).contains(&n_rooms) {
        return Err(Error::Generation(format!("lightworld needs 2 to 5 rooms, got {n_rooms}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<(usize, usize)> =
        (0..n_rooms).map(|_| (rng.random_range(MIN_ROOM..=MAX_ROOM), rng.random_range(MIN_ROOM..=MAX_ROOM))).collect();
    let width = 1 + dims.iter().map(|d| d.0 + 1).sum::<usize>();
    let height = 2 + dims.iter().map(|d| d.1).max().unwrap_or(MIN_ROOM);
    let mut cells = vec!['#'; width * height];
    let mut x0 = 1;
    let mut start = (1, 1);
    for (r, &(rw, rh)) in dims.iter().enumerate() {
        for y in 1..=rh {
            for x in x0..x0 + rw {
                cells[y * width + x] = '.';
            }
        }
        let shared = if r + 1 < n_rooms { rh.min(dims[r + 1].1) } else { rh };
        let door_y = rng.random_range(1..=shared);
        cells[door_y * width + x0 + rw] = 'D';
        let bounds = (x0, rw, rh, width);
        if r == 0 {
            start = free_cell(&mut rng, &cells, bounds, None);
        }
        let lock = free_cell(&mut rng, &cells, bounds, Some(start));
        cells[lock.1 * width + lock.0] = 'L';
        if rng.random_bool(KEY_PROBABILITY) {
            let key = free_cell(&mut rng, &cells, bounds, Some(start));
            cells[key.1 * width + key.0] = 'k';
        }
        x0 += rw + 1;
    }
    let mut meta = BTreeMap::new();
    meta.insert("rooms".to_string(), n_rooms.to_string());
    Ok(GridTaskSpec { kind: DomainKind::Lightworld, width, height, cells, start, meta })
}

fn free_cell(
    rng: &mut ChaCha8Rng,
    cells: &[char],
    (x0, rw, rh, width): (usize, usize, usize, usize),
    avoid: Option<(usize, usize)>,
) -> (usize, usize) {
    loop {
        let c = (rng.random_range(x0..x0 + rw), rng.random_range(1..=rh));
        if cells[c.1 * width + c.0] == '.' && Some(c) != avoid {
            return c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{compile as compile_any, parse_task};
    use crate::mdp::solve_optimal;
    use crate::outcomes::check_reward_decomposition;

    const SMALL: &str = "domain=lightworld\n\
                         #######\n\
                         #A.#..#\n\
                         #.kD..D\n\
                         #.L#.L#\n\
                         #######\n";

    #[test]
    fn small_task_is_solvable_with_key() {
        let task = compile_any(&parse_task(SMALL).unwrap()).unwrap();
        assert!(task.mdp.validate().is_valid());
        assert!(check_reward_decomposition(&task.mdp, &task.outcomes, 1e-9).unwrap());
        let (_, v) = solve_optimal(&task.mdp, 1e-10).unwrap();
        assert!(v[task.start()] > 800.0, "start value {}", v[task.start()]);
    }

    #[test]
    fn sensors_read_distance_and_colocation() {
        let spec = parse_task(SMALL).unwrap();
        let lay = layout(&spec).unwrap();
        let r = sensor_readings(&spec, &lay, 2, 1, 0);
        // Key one step down, lock two steps down, door not in line of sight.
        assert!((r[1] - 0.95).abs() < 1e-12);
        assert!((r[4 + 1] - 0.9).abs() < 1e-12);
        assert!(r[8..].iter().all(|&v| v == 0.0));
        let on_key = sensor_readings(&spec, &lay, 2, 2, 0);
        assert_eq!(&on_key[0..4], &[1.0; 4]);
        // Door immediately to the right.
        assert!((on_key[8 + 3] - 0.95).abs() < 1e-12);
        let held = sensor_readings(&spec, &lay, 2, 1, 1);
        assert_eq!(held[1], 0.0);
    }

    #[test]
    fn generated_rooms_respect_bounds() {
        for seed in 0..20 {
            let spec = lightworld_generate(seed, 2 + (seed as usize % 4)).unwrap();
            let lay = layout(&spec).unwrap();
            assert_eq!(lay.n_rooms(), 2 + (seed as usize % 4));
            assert_eq!(spec, lightworld_generate(seed, 2 + (seed as usize % 4)).unwrap());
        }
    }
}
