//! Sudoku generation via randomized backtracking, plus the exact-match
//! validator and a solution-counting oracle.

use rand::seq::SliceRandom;

use crate::error::CoreError;
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SudokuInstance {
    /// Box size b; the grid is n x n with n = b^2.
    pub box_size: usize,
    /// Complete solution, digits 1..=n, row-major.
    pub solution: Vec<u8>,
    /// True where the digit is given as part of the condition.
    pub givens_mask: Vec<bool>,
}

impl SudokuInstance {
    pub fn n(&self) -> usize {
        self.box_size * self.box_size
    }

    pub fn givens_count(&self) -> usize {
        self.givens_mask.iter().filter(|&&g| g).count()
    }
}

/// All-different constraint over rows, columns, and boxes; zeros are holes.
pub fn is_valid_grid(grid: &[u8], b: usize) -> bool {
    let n = b * b;
    let ok_group = |cells: &[u8]| {
        let mut seen = vec![false; n + 1];
        for &d in cells {
            if d == 0 {
                continue;
            }
            if d as usize > n || seen[d as usize] {
                return false;
            }
            seen[d as usize] = true;
        }
        true
    };
    for r in 0..n {
        let row: Vec<u8> = (0..n).map(|c| grid[r * n + c]).collect();
        if !ok_group(&row) {
            return false;
        }
    }
    for c in 0..n {
        let col: Vec<u8> = (0..n).map(|r| grid[r * n + c]).collect();
        if !ok_group(&col) {
            return false;
        }
    }
    for br in 0..b {
        for bc in 0..b {
            let mut cells = Vec::with_capacity(n);
            for r in 0..b {
                for c in 0..b {
                    cells.push(grid[(br * b + r) * n + (bc * b + c)]);
                }
            }
            if !ok_group(&cells) {
                return false;
            }
        }
    }
    true
}

fn candidates(grid: &[u8], b: usize, cell: usize) -> Vec<u8> {
    let n = b * b;
    let (r, c) = (cell / n, cell % n);
    let mut used = vec![false; n + 1];
    for i in 0..n {
        used[grid[r * n + i] as usize] = true;
        used[grid[i * n + c] as usize] = true;
    }
    let (br, bc) = (r / b * b, c / b * b);
    for i in 0..b {
        for j in 0..b {
            used[grid[(br + i) * n + (bc + j)] as usize] = true;
        }
    }
    (1..=n as u8).filter(|&d| !used[d as usize]).collect()
}

/// Counts completions of `grid` up to `limit` by backtracking.
pub fn solve_count(grid: &[u8], b: usize, limit: usize) -> usize {
    let mut work = grid.to_vec();
    let mut count = 0usize;
    fn rec(grid: &mut [u8], b: usize, limit: usize, count: &mut usize) {
        if *count >= limit {
            return;
        }
        let Some(cell) = grid.iter().position(|&d| d == 0) else {
            *count += 1;
            return;
        };
        for d in candidates(grid, b, cell) {
            grid[cell] = d;
            rec(grid, b, limit, count);
            grid[cell] = 0;
            if *count >= limit {
                return;
            }
        }
    }
    rec(&mut work, b, limit, &mut count);
    count
}

/// Backtracking generator: fill a complete grid with randomized digit order,
/// then knock out random cells down to `givens`. Deterministic per seed.
pub fn sudoku_generate(b: usize, givens: usize, seed: u64) -> Result<SudokuInstance, CoreError> {
    if !(b == 2 || b == 3) {
        return Err(CoreError::invalid(format!("box size must be 2 or 3, got {b}")));
    }
    let n = b * b;
    if givens > n * n {
        return Err(CoreError::invalid(format!(
            "givens {givens} exceeds {} cells",
            n * n
        )));
    }
    let mut rng = rng_from(seed);
    let mut grid = vec![0u8; n * n];

    fn fill(grid: &mut [u8], b: usize, cell: usize, rng: &mut rand_chacha::ChaCha8Rng) -> bool {
        let n = b * b;
        if cell == n * n {
            return true;
        }
        let mut cands = candidates(grid, b, cell);
        cands.shuffle(rng);
        for d in cands {
            grid[cell] = d;
            if fill(grid, b, cell + 1, rng) {
                return true;
            }
            grid[cell] = 0;
        }
        false
    }
    if !fill(&mut grid, b, 0, &mut rng) {
        return Err(CoreError::Numeric("backtracking fill failed".to_string()));
    }

    let mut order: Vec<usize> = (0..n * n).collect();
    order.shuffle(&mut rng);
    let mut mask = vec![true; n * n];
    for &cell in order.iter().take(n * n - givens) {
        mask[cell] = false;
    }
    Ok(SudokuInstance {
        box_size: b,
        solution: grid,
        givens_mask: mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SudokuVerdict {
    /// Every cell equals the recorded ground truth.
    pub success: bool,
    /// Fraction of non-given cells predicted correctly (1.0 when none).
    pub elementwise_accuracy: f64,
}

pub fn sudoku_validate(inst: &SudokuInstance, predicted: &[u8]) -> Result<SudokuVerdict, CoreError> {
    let n = inst.n();
    if predicted.len() != n * n {
        return Err(CoreError::invalid(format!(
            "prediction has {} cells, grid has {}",
            predicted.len(),
            n * n
        )));
    }
    let success = predicted == inst.solution.as_slice();
    let (mut correct, mut holes) = (0usize, 0usize);
    for i in 0..n * n {
        if !inst.givens_mask[i] {
            holes += 1;
            if predicted[i] == inst.solution[i] {
                correct += 1;
            }
        }
    }
    let elementwise_accuracy = if holes == 0 {
        1.0
    } else {
        correct as f64 / holes as f64
    };
    Ok(SudokuVerdict {
        success,
        elementwise_accuracy,
    })
}
