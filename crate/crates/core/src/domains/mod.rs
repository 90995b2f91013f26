//! Grid task specifications, their text format, and compilation to MDPs.
//!
//! A task file has a `domain=<kind>` header, optional `meta key=value` lines,
//! then one glyph per cell with rows separated by newlines:
//!
//! | glyph | meaning | domains |
//! |---|---|---|
//! | `.` | floor | all |
//! | `#` | wall | all |
//! | `A` | agent start (on floor) | all |
//! | `G` | goal | mini |
//! | `w` | wood | craftworld |
//! | `s` | stone | craftworld |
//! | `W` | workbench (wood to handle) | craftworld |
//! | `F` | forge (stone to head) | craftworld |
//! | `N` | anvil (handle and head to hammer) | craftworld |
//! | `k` | key | lightworld |
//! | `L` | lock | lightworld |
//! | `D` | door | lightworld |
//!
//! Moves are `up`, `down`, `left`, `right` (actions 0 to 3). Coordinates are
//! `(x, y)` with `y` growing downwards.

pub mod craftworld;
pub mod lightworld;
pub mod mini;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::mdp::TabularMdp;
use crate::outcomes::OutcomeModel;

pub use craftworld::craftworld_generate;
pub use lightworld::{agent_space_features, lightworld_generate};
pub use mini::enumerate_mini_domain;

/// Which family a task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Mini,
    Craftworld,
    Lightworld,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Mini => "mini",
            DomainKind::Craftworld => "craftworld",
            DomainKind::Lightworld => "lightworld",
        }
    }

    fn glyph_allowed(self, c: char) -> bool {
        matches!(c, '.' | '#' | 'A')
            || match self {
                DomainKind::Mini => c == 'G',
                DomainKind::Craftworld => matches!(c, 'w' | 's' | 'W' | 'F' | 'N'),
                DomainKind::Lightworld => matches!(c, 'k' | 'L' | 'D'),
            }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(DomainKind::Mini),
            "craftworld" => Ok(DomainKind::Craftworld),
            "lightworld" => Ok(DomainKind::Lightworld),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// Cardinal moves in action order.
pub const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Human-readable names of the four move actions.
pub const MOVE_NAMES: [&str; 4] = ["up", "down", "left", "right"];

/// A rectangular glyph grid with one agent start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTaskSpec {
    pub kind: DomainKind,
    pub width: usize,
    pub height: usize,
    /// Row-major glyphs; the start cell holds the glyph underneath the agent.
    pub cells: Vec<char>,
    pub start: (usize, usize),
    pub meta: BTreeMap<String, String>,
}

impl GridTaskSpec {
    pub fn glyph(&self, x: usize, y: usize) -> char {
        self.cells[y * self.width + x]
    }

    /// The cell reached by moving from `(x, y)` in direction `dir`, if inside the grid.
    pub fn step(&self, x: usize, y: usize, dir: usize) -> Option<(usize, usize)> {
        let (dx, dy) = MOVES[dir];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        (nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height).then_some((nx as usize, ny as usize))
    }

    /// Positions of every cell showing `glyph`.
    pub fn find(&self, glyph: char) -> Vec<(usize, usize)> {
        (0..self.height).flat_map(|y| (0..self.width).map(move |x| (x, y))).filter(|&(x, y)| self.glyph(x, y) == glyph).collect()
    }

    pub fn meta_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.meta.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("meta `{key}` is not a number: {v}"))),
        }
    }

    /// Text form accepted by [`parse_task`].
    pub fn render(&self) -> String {
        let mut out = format!("domain={}\n", self.kind);
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k}={v}\n"));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if (x, y) == self.start { 'A' } else { self.glyph(x, y) });
            }
            out.push('\n');
        }
        out
    }
}

fn parse_err(line: usize, column: usize, kind: ParseErrorKind) -> Error {
    Error::Parse { line, column, kind }
}

/// Parses the task text format. Errors carry 1-based line and column numbers.
pub fn parse_task(text: &str) -> Result<GridTaskSpec> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (header_line, header) = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some(pair) => break pair,
            None => return Err(parse_err(1, 1, ParseErrorKind::MissingHeader)),
        }
    };
    let kind_text = header.trim().strip_prefix("domain=").ok_or_else(|| parse_err(header_line, 1, ParseErrorKind::MissingHeader))?;
    let kind = match kind_text.trim() {
        "mini" => DomainKind::Mini,
        "craftworld" => DomainKind::Craftworld,
        "lightworld" => DomainKind::Lightworld,
        other => return Err(parse_err(header_line, 8, ParseErrorKind::UnknownDomain(other.to_string()))),
    };
    let mut meta = BTreeMap::new();
    let mut rows: Vec<(usize, Vec<char>)> = Vec::new();
    for (no, line) in lines {
        if rows.is_empty() {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| parse_err(no, 1, ParseErrorKind::BadMeta(line.to_string())))?;
                if k.trim().is_empty() {
                    return Err(parse_err(no, 6, ParseErrorKind::BadMeta(line.to_string())));
                }
                meta.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
        }
        if line.is_empty() {
            continue;
        }
        rows.push((no, line.chars().collect()));
    }
    let Some((_, first)) = rows.first() else {
        return Err(parse_err(header_line + 1, 1, ParseErrorKind::EmptyGrid));
    };
    let width = first.len();
    let mut cells = Vec::with_capacity(width * rows.len());
    let mut start = None;
    for (y, (no, row)) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(parse_err(*no, row.len().min(width) + 1, ParseErrorKind::RaggedRow { expected: width, found: row.len() }));
        }
        for (x, &c) in row.iter().enumerate() {
            if !kind.glyph_allowed(c) {
                return Err(parse_err(*no, x + 1, ParseErrorKind::UnknownGlyph(c)));
            }
            if c == 'A' {
                if start.is_some() {
                    return Err(parse_err(*no, x + 1, ParseErrorKind::MultipleAgents));
                }
                start = Some((x, y));
                cells.push('.');
            } else {
                cells.push(c);
            }
        }
    }
    let start = start.ok_or_else(|| parse_err(rows.last().map_or(1, |r| r.0), 1, ParseErrorKind::NoAgent))?;
    Ok(GridTaskSpec { kind, width, height: rows.len(), cells, start, meta })
}

/// Decoded ground state of a compiled grid task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridState {
    pub x: usize,
    pub y: usize,
    /// Last attempted move direction (craftworld only, otherwise 0).
    pub facing: u8,
    /// Domain-specific inventory and progress bits.
    pub bits: u32,
    pub terminal: bool,
}

/// A compiled task: MDP, outcome model and the meaning of every state index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledTask {
    pub spec: GridTaskSpec,
    pub mdp: TabularMdp,
    pub outcomes: OutcomeModel,
    pub states: Vec<GridState>,
    pub action_names: Vec<String>,
}

impl CompiledTask {
    /// Index of the start state.
    pub fn start(&self) -> usize {
        self.mdp.initial_state().unwrap_or(0)
    }
}

/// Compiles a spec into its MDP and outcome model.
pub fn compile(spec: &GridTaskSpec) -> Result<CompiledTask> {
    match spec.kind {
        DomainKind::Mini => mini::compile(spec),
        DomainKind::Craftworld => craftworld::compile(spec),
        DomainKind::Lightworld => lightworld::compile(spec),
    }
}

/// [`compile`] reduced to the `(MDP, outcome model)` pair.
pub fn compile_task(spec: &GridTaskSpec) -> Result<(TabularMdp, OutcomeModel)> {
    compile(spec).map(|t| (t.mdp, t.outcomes))
}

/// Reads and parses a task file.
pub fn load_task(path: impl AsRef<std::path::Path>) -> Result<GridTaskSpec> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_task(&text)
}

/// Breadth-first state-space builder shared by the domain compilers.
///
/// States are numbered in discovery order, so the start state is 0.
pub(crate) struct StateSpace<K: Ord + Clone> {
    pub index: BTreeMap<K, usize>,
    pub keys: Vec<K>,
}

impl<K: Ord + Clone> StateSpace<K> {
    pub fn explore(start: K, mut successors: impl FnMut(&K) -> Vec<K>) -> Self {
        let mut space = StateSpace { index: BTreeMap::new(), keys: Vec::new() };
        space.intern(start);
        let mut head = 0;
        while head < space.keys.len() {
            let k = space.keys[head].clone();
            for next in successors(&k) {
                space.intern(next);
            }
            head += 1;
        }
        space
    }

    fn intern(&mut self, k: K) -> usize {
        if let Some(&i) = self.index.get(&k) {
            return i;
        }
        self.keys.push(k.clone());
        self.index.insert(k, self.keys.len() - 1);
        self.keys.len() - 1
    }

    pub fn id(&self, k: &K) -> usize {
        self.index[k]
    }
}
