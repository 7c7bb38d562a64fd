//! Versioned binary dataset container (magic `VFDS`): a task tag followed by
//! length-prefixed per-instance records, little-endian throughout.

use std::path::Path;

use crate::checkpoint::Reader;
use crate::error::CoreError;
use crate::tasks::maze::MazeInstance;
use crate::tasks::sudoku::SudokuInstance;

pub const MAGIC: &[u8; 4] = b"VFDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Maze,
    Sudoku,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Maze(Vec<MazeInstance>),
    Sudoku(Vec<SudokuInstance>),
}

impl Dataset {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            Dataset::Maze(_) => TaskKind::Maze,
            Dataset::Sudoku(_) => TaskKind::Sudoku,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Maze(v) => v.len(),
            Dataset::Sudoku(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        match self {
            Dataset::Maze(items) => {
                out.push(0);
                out.extend_from_slice(&(items.len() as u32).to_le_bytes());
                for inst in items {
                    let rec = encode_maze_record(inst);
                    out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
                    out.extend_from_slice(&rec);
                }
            }
            Dataset::Sudoku(items) => {
                out.push(1);
                out.extend_from_slice(&(items.len() as u32).to_le_bytes());
                for inst in items {
                    let rec = encode_sudoku_record(inst);
                    out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
                    out.extend_from_slice(&rec);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoreError> {
        let mut r = Reader::new(bytes, "dataset");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let kind = r.u8()?;
        let count = r.u32()? as usize;
        if count > bytes.len() {
            return Err(r.err(format!("count {count} larger than the file itself")));
        }
        match kind {
            0 => {
                let mut items = Vec::with_capacity(count);
                for _ in 0..count {
                    let len = r.u32()? as usize;
                    let rec = r.take(len)?;
                    items.push(decode_maze_record(rec, &r)?);
                }
                finish(&r)?;
                Ok(Dataset::Maze(items))
            }
            1 => {
                let mut items = Vec::with_capacity(count);
                for _ in 0..count {
                    let len = r.u32()? as usize;
                    let rec = r.take(len)?;
                    items.push(decode_sudoku_record(rec, &r)?);
                }
                finish(&r)?;
                Ok(Dataset::Sudoku(items))
            }
            other => Err(r.err(format!("unknown task kind {other}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn finish(r: &Reader) -> Result<(), CoreError> {
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Ok(())
}

fn encode_maze_record(inst: &MazeInstance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(inst.m as u32).to_le_bytes());
    out.extend(inst.open.iter().map(|&b| b as u8));
    for v in [inst.start.0, inst.start.1, inst.goal.0, inst.goal.1] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(inst.path.len() as u32).to_le_bytes());
    for &(rr, cc) in &inst.path {
        out.extend_from_slice(&(rr as u32).to_le_bytes());
        out.extend_from_slice(&(cc as u32).to_le_bytes());
    }
    out
}

fn decode_maze_record(rec: &[u8], outer: &Reader) -> Result<MazeInstance, CoreError> {
    let mut r = Reader::new(rec, "dataset");
    let m = r.u32()? as usize;
    if !(2..=4096).contains(&m) {
        return Err(outer.err(format!("maze record with M={m} outside 2..=4096")));
    }
    let e = 2 * m + 1;
    let open_bytes = r.take(e * e)?;
    let open: Vec<bool> = open_bytes.iter().map(|&b| b != 0).collect();
    let mut coord = || -> Result<usize, CoreError> {
        let v = r.u32()? as usize;
        if v >= e {
            return Err(CoreError::Format {
                what: "dataset",
                offset: 0,
                msg: format!("coordinate {v} outside grid extent {e}"),
            });
        }
        Ok(v)
    };
    let start = (coord()?, coord()?);
    let goal = (coord()?, coord()?);
    let path_len = r.u32()? as usize;
    if path_len > e * e {
        return Err(outer.err(format!("path length {path_len} exceeds grid {e}x{e}")));
    }
    let mut path = Vec::with_capacity(path_len);
    for _ in 0..path_len {
        let rr = r.u32()? as usize;
        let cc = r.u32()? as usize;
        if rr >= e || cc >= e {
            return Err(outer.err(format!("path cell ({rr},{cc}) outside grid")));
        }
        path.push((rr, cc));
    }
    finish(&r)?;
    Ok(MazeInstance {
        m,
        open,
        start,
        goal,
        path,
    })
}

fn encode_sudoku_record(inst: &SudokuInstance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(inst.box_size as u32).to_le_bytes());
    out.extend_from_slice(&inst.solution);
    out.extend(inst.givens_mask.iter().map(|&b| b as u8));
    out
}

fn decode_sudoku_record(rec: &[u8], outer: &Reader) -> Result<SudokuInstance, CoreError> {
    let mut r = Reader::new(rec, "dataset");
    let b = r.u32()? as usize;
    if !(2..=3).contains(&b) {
        return Err(outer.err(format!("sudoku record with box size {b}")));
    }
    let n = b * b;
    let solution = r.take(n * n)?.to_vec();
    if solution.iter().any(|&d| d == 0 || d as usize > n) {
        return Err(outer.err("sudoku digits outside 1..=n".to_string()));
    }
    let mask_bytes = r.take(n * n)?;
    let givens_mask = mask_bytes.iter().map(|&v| v != 0).collect();
    finish(&r)?;
    Ok(SudokuInstance {
        box_size: b,
        solution,
        givens_mask,
    })
}
