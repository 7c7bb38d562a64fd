//! Perfect-maze generation (randomized depth-first search over the cell
//! lattice), BFS path oracle, and the two success metrics.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::CoreError;
use crate::rng::rng_from;

/// Per-cell ground-truth / prediction classes on the expanded grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeCell {
    Path,
    Open,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeInstance {
    /// Lattice size M; the expanded grid is (2M+1) x (2M+1).
    pub m: usize,
    /// Row-major open/wall flags on the expanded grid (true = open).
    pub open: Vec<bool>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    /// Unique open-cell path from start to goal, inclusive.
    pub path: Vec<(usize, usize)>,
}

impl MazeInstance {
    pub fn extent(&self) -> usize {
        2 * self.m + 1
    }

    pub fn is_open(&self, r: usize, c: usize) -> bool {
        self.open[r * self.extent() + c]
    }

    /// Ground-truth class per expanded-grid cell.
    pub fn classes(&self) -> Vec<MazeCell> {
        let e = self.extent();
        let mut out = vec![MazeCell::Wall; e * e];
        for (i, &open) in self.open.iter().enumerate() {
            if open {
                out[i] = MazeCell::Open;
            }
        }
        for &(r, c) in &self.path {
            out[r * e + c] = MazeCell::Path;
        }
        out
    }

    /// '#' wall, '.' open, 'S'/'G' endpoints, '*' path.
    pub fn ascii(&self) -> String {
        let e = self.extent();
        let classes = self.classes();
        let mut s = String::with_capacity((e + 1) * e);
        for r in 0..e {
            for c in 0..e {
                let ch = if (r, c) == self.start {
                    'S'
                } else if (r, c) == self.goal {
                    'G'
                } else {
                    match classes[r * e + c] {
                        MazeCell::Path => '*',
                        MazeCell::Open => '.',
                        MazeCell::Wall => '#',
                    }
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

/// Recursive-backtracker maze on an M x M lattice with start/goal drawn
/// uniformly among open cells, resampled until the unique path has at
/// least five cells. Deterministic per seed.
pub fn maze_generate(m: usize, seed: u64) -> Result<MazeInstance, CoreError> {
    if m < 2 {
        return Err(CoreError::invalid(format!("maze needs M >= 2, got {m}")));
    }
    let mut rng = rng_from(seed);
    let e = 2 * m + 1;
    let mut open = vec![false; e * e];
    let idx = |r: usize, c: usize| r * e + c;

    // iterative DFS over lattice cells; lattice (i,j) sits at grid (2i+1, 2j+1)
    let mut visited = vec![false; m * m];
    let start_cell = (rng.random_range(0..m), rng.random_range(0..m));
    let mut stack = vec![start_cell];
    visited[start_cell.0 * m + start_cell.1] = true;
    open[idx(2 * start_cell.0 + 1, 2 * start_cell.1 + 1)] = true;
    while let Some(&(ci, cj)) = stack.last() {
        let mut dirs = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)];
        dirs.shuffle(&mut rng);
        let mut advanced = false;
        for (di, dj) in dirs {
            let (ni, nj) = (ci as i64 + di, cj as i64 + dj);
            if ni < 0 || nj < 0 || ni >= m as i64 || nj >= m as i64 {
                continue;
            }
            let (ni, nj) = (ni as usize, nj as usize);
            if visited[ni * m + nj] {
                continue;
            }
            visited[ni * m + nj] = true;
            open[idx(2 * ni + 1, 2 * nj + 1)] = true;
            // carve the wall between the two lattice cells
            let wr = (2 * ci + 1) as i64 + di;
            let wc = (2 * cj + 1) as i64 + dj;
            open[idx(wr as usize, wc as usize)] = true;
            stack.push((ni, nj));
            advanced = true;
            break;
        }
        if !advanced {
            stack.pop();
        }
    }

    let open_cells: Vec<(usize, usize)> = (0..e)
        .flat_map(|r| (0..e).map(move |c| (r, c)))
        .filter(|&(r, c)| open[idx(r, c)])
        .collect();
    for _attempt in 0..10_000 {
        let s = open_cells[rng.random_range(0..open_cells.len())];
        let g = open_cells[rng.random_range(0..open_cells.len())];
        if s == g {
            continue;
        }
        let path = bfs_path(&open, e, s, g).ok_or_else(|| {
            CoreError::Numeric("generated maze is disconnected".to_string())
        })?;
        if path.len() >= 5 {
            return Ok(MazeInstance {
                m,
                open,
                start: s,
                goal: g,
                path,
            });
        }
    }
    Err(CoreError::Numeric(format!(
        "maze M={m} seed={seed}: no endpoint pair with path length >= 5"
    )))
}

/// Shortest open-cell path by breadth-first search (the oracle used both by
/// generation and by validator tests).
pub fn bfs_path(
    open: &[bool],
    extent: usize,
    from: (usize, usize),
    to: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    let idx = |r: usize, c: usize| r * extent + c;
    if !open[idx(from.0, from.1)] || !open[idx(to.0, to.1)] {
        return None;
    }
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; extent * extent];
    let mut seen = vec![false; extent * extent];
    let mut queue = std::collections::VecDeque::new();
    seen[idx(from.0, from.1)] = true;
    queue.push_back(from);
    while let Some((r, c)) = queue.pop_front() {
        if (r, c) == to {
            let mut path = vec![(r, c)];
            let mut cur = (r, c);
            while let Some(p) = prev[idx(cur.0, cur.1)] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= extent as i64 || nc >= extent as i64 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if !open[idx(nr, nc)] || seen[idx(nr, nc)] {
                continue;
            }
            seen[idx(nr, nc)] = true;
            prev[idx(nr, nc)] = Some((r, c));
            queue.push_back((nr, nc));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeFailure {
    WallOverlap,
    MissingEndpoint,
    Disconnected,
    EmptyPath,
}

/// Verdict under both metrics: strict equality to the ground-truth grid and
/// the connectivity rule (path cells form one 4-connected component that
/// contains both endpoints and never sits on a wall).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeVerdict {
    pub exact_match: bool,
    pub valid_path: bool,
    pub failure: Option<MazeFailure>,
}

pub fn maze_validate(inst: &MazeInstance, predicted: &[MazeCell]) -> Result<MazeVerdict, CoreError> {
    let e = inst.extent();
    if predicted.len() != e * e {
        return Err(CoreError::invalid(format!(
            "prediction has {} cells, maze grid has {}",
            predicted.len(),
            e * e
        )));
    }
    let truth = inst.classes();
    let exact_match = predicted == truth.as_slice();

    let path_cells: Vec<usize> = predicted
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == MazeCell::Path)
        .map(|(i, _)| i)
        .collect();

    let failure = validate_connectivity(inst, predicted, &path_cells);
    Ok(MazeVerdict {
        exact_match,
        valid_path: failure.is_none(),
        failure,
    })
}

fn validate_connectivity(
    inst: &MazeInstance,
    predicted: &[MazeCell],
    path_cells: &[usize],
) -> Option<MazeFailure> {
    let e = inst.extent();
    if path_cells.is_empty() {
        return Some(MazeFailure::EmptyPath);
    }
    for &i in path_cells {
        if !inst.open[i] {
            return Some(MazeFailure::WallOverlap);
        }
    }
    let s = inst.start.0 * e + inst.start.1;
    let g = inst.goal.0 * e + inst.goal.1;
    if predicted[s] != MazeCell::Path || predicted[g] != MazeCell::Path {
        return Some(MazeFailure::MissingEndpoint);
    }
    // single 4-connected component over predicted path cells
    let on_path = |i: usize| predicted[i] == MazeCell::Path;
    let mut seen = vec![false; e * e];
    let mut queue = std::collections::VecDeque::new();
    seen[s] = true;
    queue.push_back(s);
    let mut reached = 1usize;
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / e, i % e);
        for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= e as i64 || nc >= e as i64 {
                continue;
            }
            let ni = nr as usize * e + nc as usize;
            if on_path(ni) && !seen[ni] {
                seen[ni] = true;
                reached += 1;
                queue.push_back(ni);
            }
        }
    }
    if reached != path_cells.len() {
        return Some(MazeFailure::Disconnected);
    }
    None
}

/// Perfect-maze invariant: the open-cell graph is connected with exactly
/// |cells| - 1 edges (a spanning tree).
pub fn is_perfect(inst: &MazeInstance) -> bool {
    let e = inst.extent();
    let cells: Vec<usize> = (0..e * e).filter(|&i| inst.open[i]).collect();
    if cells.is_empty() {
        return false;
    }
    let mut edges = 0usize;
    for &i in &cells {
        let (r, c) = (i / e, i % e);
        if c + 1 < e && inst.open[i + 1] {
            edges += 1;
        }
        if r + 1 < e && inst.open[i + e] {
            edges += 1;
        }
    }
    if edges != cells.len() - 1 {
        return false;
    }
    bfs_path(&inst.open, e, (cells[0] / e, cells[0] % e), {
        let last = *cells.last().unwrap();
        (last / e, last % e)
    })
    .is_some()
        && cells.iter().all(|&i| {
            bfs_path(&inst.open, e, (cells[0] / e, cells[0] % e), (i / e, i % e)).is_some()
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_maze_is_connected_and_acyclic() {
        let inst = maze_generate(2, 1).unwrap();
        assert_eq!(inst.extent(), 5);
        assert!(is_perfect(&inst));
        // all 4 lattice cells open
        for i in 0..2 {
            for j in 0..2 {
                assert!(inst.is_open(2 * i + 1, 2 * j + 1));
            }
        }
    }

    #[test]
    fn rejects_tiny_m() {
        assert!(maze_generate(1, 0).is_err());
    }

    #[test]
    fn same_seed_same_maze() {
        let a = maze_generate(4, 99).unwrap();
        let b = maze_generate(4, 99).unwrap();
        assert_eq!(a, b);
        let c = maze_generate(4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seeded_batch_is_solvable_and_unique_path() {
        for seed in 0..200 {
            let inst = maze_generate(4, seed).unwrap();
            assert!(is_perfect(&inst), "seed {seed}");
            assert!(inst.path.len() >= 5);
            let p = bfs_path(&inst.open, inst.extent(), inst.start, inst.goal).unwrap();
            assert_eq!(p, inst.path);
        }
    }

    #[test]
    fn validator_accepts_ground_truth() {
        let inst = maze_generate(4, 3).unwrap();
        let v = maze_validate(&inst, &inst.classes()).unwrap();
        assert!(v.exact_match);
        assert!(v.valid_path);
    }

    #[test]
    fn validator_rejects_broken_path() {
        let inst = maze_generate(4, 3).unwrap();
        let mut classes = inst.classes();
        // delete an interior path cell
        let mid = inst.path[inst.path.len() / 2];
        classes[mid.0 * inst.extent() + mid.1] = MazeCell::Open;
        let v = maze_validate(&inst, &classes).unwrap();
        assert!(!v.exact_match);
        assert!(!v.valid_path);
        assert!(matches!(
            v.failure,
            Some(MazeFailure::Disconnected) | Some(MazeFailure::MissingEndpoint)
        ));
    }

    #[test]
    fn validator_rejects_wall_overlap() {
        let inst = maze_generate(4, 3).unwrap();
        let mut classes = inst.classes();
        let e = inst.extent();
        // nearest wall neighbour of a path cell becomes path
        let wall_idx = (0..e * e).find(|&i| !inst.open[i]).unwrap();
        classes[wall_idx] = MazeCell::Path;
        let v = maze_validate(&inst, &classes).unwrap();
        assert!(!v.valid_path);
        assert_eq!(v.failure, Some(MazeFailure::WallOverlap));
    }

    #[test]
    fn ascii_render_shape() {
        let inst = maze_generate(2, 1).unwrap();
        let art = inst.ascii();
        assert_eq!(art.lines().count(), 5);
        assert!(art.contains('S') && art.contains('G'));
    }
}
