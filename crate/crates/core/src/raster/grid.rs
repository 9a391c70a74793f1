use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::scalar::Real;
use crate::spice::PdnNetlist;

/// Row-major 2D map; row index is y, column index is x.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid { height, width, data: vec![T::zero(); height * width] }
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Grid { height, width, data: vec![v; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        Grid { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// CSV matrix, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 12);
        for r in 0..self.height {
            for c in 0..self.width {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:?}", self.get(r, c).as_f64());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, String> {
        let mut data = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split(',') {
                let v: f64 =
                    tok.trim().parse().map_err(|_| format!("row {}: bad number `{tok}`", i + 1))?;
                data.push(T::lit(v));
            }
            let w = data.len() - before;
            match width {
                None => width = Some(w),
                Some(expected) if expected != w => {
                    return Err(format!("row {}: {w} columns, expected {expected}", i + 1))
                }
                _ => {}
            }
            height += 1;
        }
        let width = width.ok_or("empty CSV matrix")?;
        Ok(Grid { height, width, data })
    }
}

/// Cell lattice over the die, in nanometers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub cell_pitch: i64,
    pub width_cells: usize,
    pub height_cells: usize,
    pub origin: (i64, i64),
}

impl GridSpec {
    pub const DEFAULT_PITCH: i64 = 1000;

    /// Smallest lattice anchored at the origin (or below it for negative
    /// coordinates) that contains every non-ground node.
    pub fn covering(nl: &PdnNetlist, pitch: i64) -> Self {
        assert!(pitch > 0, "cell pitch must be positive");
        let b = nl.bbox();
        let ox = b.min_x.min(0).div_euclid(pitch) * pitch;
        let oy = b.min_y.min(0).div_euclid(pitch) * pitch;
        GridSpec {
            cell_pitch: pitch,
            width_cells: ((b.max_x - ox).div_euclid(pitch) + 1) as usize,
            height_cells: ((b.max_y - oy).div_euclid(pitch) + 1) as usize,
            origin: (ox, oy),
        }
    }

    /// `(row, col)` of the cell containing a point, if inside the lattice.
    pub fn cell_of(&self, x: i64, y: i64) -> Option<(usize, usize)> {
        let c = (x - self.origin.0).div_euclid(self.cell_pitch);
        let r = (y - self.origin.1).div_euclid(self.cell_pitch);
        if c < 0 || r < 0 || c as usize >= self.width_cells || r as usize >= self.height_cells {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Cell center in nanometers.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.cell_pitch as f64;
        (
            self.origin.0 as f64 + (col as f64 + 0.5) * p,
            self.origin.1 as f64 + (row as f64 + 0.5) * p,
        )
    }

    pub fn zeros(&self) -> Grid<f64> {
        Grid::zeros(self.height_cells, self.width_cells)
    }

    pub fn covers(&self, nl: &PdnNetlist) -> bool {
        let b = nl.bbox();
        self.cell_of(b.min_x, b.min_y).is_some() && self.cell_of(b.max_x, b.max_y).is_some()
    }
}
