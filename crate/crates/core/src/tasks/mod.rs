//! Task generation, encoding, and ground-truth validation for mazes and
//! Sudoku, plus the dataset container.

pub mod dataset;
pub mod encode;
pub mod maze;
pub mod sudoku;

pub use dataset::{Dataset, TaskKind};
pub use encode::EncodedPair;
pub use maze::{maze_generate, maze_validate, MazeCell, MazeInstance, MazeVerdict};
pub use sudoku::{sudoku_generate, sudoku_validate, SudokuInstance, SudokuVerdict};
