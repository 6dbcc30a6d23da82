//! Grid topology, the 12-lane intersection layout and the 4-phase table.
//!
//! Entrance lanes are ordered by approach (N, E, S, W) and then by turn
//! (left, through, right), so lane `3 * approach + turn`. An approach names
//! the side vehicles come *from*: approach N carries southbound traffic.

use serde::{Deserialize, Serialize};

pub const LANES: usize = 12;
pub const OBS_DIM: usize = 2 * LANES;
/// Upstream feeder lanes per entrance lane.
pub const FEEDERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Dir {
        Dir::ALL[(self.index() + 2) % 4]
    }

    /// 90 degrees clockwise.
    pub fn clockwise(self) -> Dir {
        Dir::ALL[(self.index() + 1) % 4]
    }

    pub fn counter_clockwise(self) -> Dir {
        Dir::ALL[(self.index() + 3) % 4]
    }

    /// (row, col) step when travelling in this heading; row 0 is the north edge.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Dir::N => (-1, 0),
            Dir::E => (0, 1),
            Dir::S => (1, 0),
            Dir::W => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Through,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Through, Turn::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn lane_index(approach: Dir, turn: Turn) -> usize {
    approach.index() * 3 + turn.index()
}

pub fn lane_parts(lane: usize) -> (Dir, Turn) {
    (Dir::ALL[lane / 3], Turn::ALL[lane % 3])
}

/// Heading after executing `turn` from `approach`.
pub fn exit_heading(approach: Dir, turn: Turn) -> Dir {
    let heading = approach.opposite();
    match turn {
        Turn::Through => heading,
        // a southbound driver turning left heads east
        Turn::Left => heading.counter_clockwise(),
        Turn::Right => heading.clockwise(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
    D,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::A, Phase::B, Phase::C, Phase::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    /// The two non-conflicting left/through movements served by this phase.
    /// Phase A serves movement-2 (N through) and movement-8 (S through).
    pub fn movements(self) -> [usize; 2] {
        PHASE_TABLE[self.index()]
    }

    pub fn next(self) -> Phase {
        Phase::ALL[(self.index() + 1) % 4]
    }
}

const PHASE_TABLE: [[usize; 2]; 4] = [
    [1, 7],  // A: N through, S through
    [4, 10], // B: E through, W through
    [0, 6],  // C: N left, S left
    [3, 9],  // D: E left, W left
];

pub fn is_right_turn(lane: usize) -> bool {
    lane % 3 == Turn::Right.index()
}

/// Green flags for all 12 lanes under `phase`; right turns are always green.
pub fn green_lanes(phase: Phase) -> [bool; LANES] {
    let mut g = [false; LANES];
    for (l, gl) in g.iter_mut().enumerate() {
        *gl = is_right_turn(l);
    }
    for m in phase.movements() {
        g[m] = true;
    }
    g
}

/// Rectangular grid of intersections, id = row * cols + col.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

/// Where a vehicle leaving an intersection in some heading ends up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downstream {
    Intersection { id: usize, approach: Dir },
    Exit,
}

/// The upstream lanes that discharge into one approach of an intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Feeders {
    pub intersection: usize,
    /// Ordered left-turn feeder, through feeder, right-turn feeder.
    pub lanes: [usize; FEEDERS],
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, id: usize) -> (usize, usize) {
        (id / self.cols, id % self.cols)
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn neighbor(&self, id: usize, heading: Dir) -> Option<usize> {
        let (r, c) = self.coords(id);
        let (dr, dc) = heading.delta();
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.rows as isize || nc >= self.cols as isize {
            None
        } else {
            Some(self.id(nr as usize, nc as usize))
        }
    }

    /// Intersections sharing a road with `id`, in N, E, S, W order.
    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        Dir::ALL.iter().filter_map(|&d| self.neighbor(id, d)).collect()
    }

    pub fn downstream(&self, id: usize, heading: Dir) -> Downstream {
        match self.neighbor(id, heading) {
            Some(n) => Downstream::Intersection {
                id: n,
                approach: heading.opposite(),
            },
            None => Downstream::Exit,
        }
    }

    /// Approaches of `id` fed by a boundary source rather than a neighbor.
    pub fn boundary_approaches(&self, id: usize) -> Vec<Dir> {
        Dir::ALL
            .iter()
            .copied()
            .filter(|&a| self.neighbor(id, a).is_none())
            .collect()
    }

    /// Upstream lanes whose movements discharge into `approach` of `id`;
    /// `None` on boundary approaches.
    pub fn feeders(&self, id: usize, approach: Dir) -> Option<Feeders> {
        let up = self.neighbor(id, approach)?;
        let heading = approach.opposite();
        let mut lanes = [0; FEEDERS];
        for (slot, turn) in Turn::ALL.iter().enumerate() {
            let from = Dir::ALL
                .iter()
                .copied()
                .find(|&a| exit_heading(a, *turn) == heading)
                .expect("every heading is reachable by each turn");
            lanes[slot] = lane_index(from, *turn);
        }
        Some(Feeders { intersection: up, lanes })
    }

    /// Feeders for entrance lane `lane` (all three lanes of an approach share them).
    pub fn lane_feeders(&self, id: usize, lane: usize) -> Option<Feeders> {
        self.feeders(id, lane_parts(lane).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_partition_left_and_through_movements() {
        let mut seen = [0; LANES];
        for p in Phase::ALL {
            for m in p.movements() {
                assert!(!is_right_turn(m));
                seen[m] += 1;
            }
        }
        for l in 0..LANES {
            assert_eq!(seen[l], usize::from(!is_right_turn(l)));
        }
        // movement-2 and movement-8 in 1-based numbering
        assert_eq!(Phase::A.movements(), [1, 7]);
    }

    #[test]
    fn green_lanes_are_phase_pair_plus_rights() {
        for p in Phase::ALL {
            let g = green_lanes(p);
            assert_eq!(g.iter().filter(|&&x| x).count(), 6);
        }
    }

    #[test]
    fn turning_geometry() {
        // from north = southbound
        assert_eq!(exit_heading(Dir::N, Turn::Through), Dir::S);
        assert_eq!(exit_heading(Dir::N, Turn::Left), Dir::E);
        assert_eq!(exit_heading(Dir::N, Turn::Right), Dir::W);
        assert_eq!(exit_heading(Dir::W, Turn::Left), Dir::N);
    }

    #[test]
    fn feeders_discharge_into_the_approach() {
        let g = Grid::new(3, 3);
        for id in 0..g.len() {
            for a in Dir::ALL {
                match g.feeders(id, a) {
                    None => assert!(g.neighbor(id, a).is_none()),
                    Some(f) => {
                        for &l in &f.lanes {
                            let (ua, ut) = lane_parts(l);
                            let h = exit_heading(ua, ut);
                            assert_eq!(
                                g.downstream(f.intersection, h),
                                Downstream::Intersection { id, approach: a }
                            );
                        }
                    }
                }
            }
        }
    }
}
