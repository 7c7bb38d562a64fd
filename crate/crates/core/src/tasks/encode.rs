//! One-hot {-1,+1} tensor encodings for both tasks and the argmax decoders.
//!
//! Maze condition: channels wall/start/goal. Maze solution: channels
//! path / open-not-path / wall. Sudoku condition: n one-hot digit channels
//! of the givens plus a given mask. Sudoku solution: n one-hot channels.

use diffsearch_autodiff::Tensor;

use crate::error::CoreError;
use crate::tasks::maze::{MazeCell, MazeInstance};
use crate::tasks::sudoku::SudokuInstance;

#[derive(Debug, Clone)]
pub struct EncodedPair {
    /// Condition tensor `[C_cond, H, W]`.
    pub cond: Tensor,
    /// Solution tensor `[C_x, H, W]`, exactly one +1 per cell.
    pub x: Tensor,
}

pub const MAZE_COND_CHANNELS: usize = 3;
pub const MAZE_X_CHANNELS: usize = 3;

pub fn sudoku_cond_channels(b: usize) -> usize {
    b * b + 1
}

pub fn sudoku_x_channels(b: usize) -> usize {
    b * b
}

fn onehot(channels: usize, extent: usize, hot: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![-1.0; channels * extent * extent];
    for ch in 0..channels {
        for cell in 0..extent * extent {
            if hot(ch, cell) {
                data[ch * extent * extent + cell] = 1.0;
            }
        }
    }
    Tensor::new(vec![channels, extent, extent], data).expect("shape consistent")
}

pub fn encode_maze(inst: &MazeInstance) -> EncodedPair {
    let e = inst.extent();
    let classes = inst.classes();
    let start = inst.start.0 * e + inst.start.1;
    let goal = inst.goal.0 * e + inst.goal.1;
    let cond = onehot(MAZE_COND_CHANNELS, e, |ch, cell| match ch {
        0 => !inst.open[cell],
        1 => cell == start,
        _ => cell == goal,
    });
    let x = onehot(MAZE_X_CHANNELS, e, |ch, cell| {
        matches!(
            (ch, classes[cell]),
            (0, MazeCell::Path) | (1, MazeCell::Open) | (2, MazeCell::Wall)
        )
    });
    EncodedPair { cond, x }
}

/// Per-cell argmax over the class channels; ties go to the lowest channel.
pub fn decode_maze_classes(x: &Tensor) -> Result<Vec<MazeCell>, CoreError> {
    let s = x.shape();
    if s.len() != 3 || s[0] != MAZE_X_CHANNELS {
        return Err(CoreError::invalid(format!(
            "maze solution tensor must be [3,H,W], got {s:?}"
        )));
    }
    Ok(x.argmax_axis(0)
        .into_iter()
        .map(|ch| match ch {
            0 => MazeCell::Path,
            1 => MazeCell::Open,
            _ => MazeCell::Wall,
        })
        .collect())
}

pub fn encode_sudoku(inst: &SudokuInstance) -> EncodedPair {
    let n = inst.n();
    let cond = onehot(n + 1, n, |ch, cell| {
        if ch < n {
            inst.givens_mask[cell] && inst.solution[cell] as usize == ch + 1
        } else {
            inst.givens_mask[cell]
        }
    });
    let x = onehot(n, n, |ch, cell| inst.solution[cell] as usize == ch + 1);
    EncodedPair { cond, x }
}

/// Per-cell argmax over digit channels, 1-based digits.
pub fn decode_sudoku_digits(x: &Tensor, b: usize) -> Result<Vec<u8>, CoreError> {
    let n = b * b;
    let s = x.shape();
    if s.len() != 3 || s[0] != n || s[1] != n || s[2] != n {
        return Err(CoreError::invalid(format!(
            "sudoku solution tensor must be [{n},{n},{n}], got {s:?}"
        )));
    }
    Ok(x.argmax_axis(0).into_iter().map(|ch| (ch + 1) as u8).collect())
}

/// Stacks same-shape `[C,H,W]` tensors into `[B,C,H,W]`.
pub fn stack(tensors: &[&Tensor]) -> Result<Tensor, CoreError> {
    if tensors.is_empty() {
        return Err(CoreError::invalid("stack of zero tensors"));
    }
    let shape = tensors[0].shape();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].len());
    for t in tensors {
        if t.shape() != shape {
            return Err(CoreError::invalid(format!(
                "stack: shapes {:?} vs {shape:?}",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![tensors.len()];
    out_shape.extend_from_slice(shape);
    Ok(Tensor::new(out_shape, data)?)
}

/// Extracts batch element `i` of a `[B,C,H,W]` tensor as `[C,H,W]`.
pub fn unstack(batch: &Tensor, i: usize) -> Result<Tensor, CoreError> {
    let s = batch.shape();
    if s.len() < 2 || i >= s[0] {
        return Err(CoreError::invalid(format!(
            "unstack index {i} out of range for shape {s:?}"
        )));
    }
    let inner: usize = s[1..].iter().product();
    let data = batch.data()[i * inner..(i + 1) * inner].to_vec();
    Ok(Tensor::new(s[1..].to_vec(), data)?)
}
