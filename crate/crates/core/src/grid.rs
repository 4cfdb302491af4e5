//! Periodic cell grids and cell-averaged state storage.
//!
//! Cells are indexed `0..n` in 1D and row-major `(j_y, i_x)` in 2D. The
//! interface "i + 1/2" in a direction is owned by the cell on its low side,
//! so face arrays have one entry per cell and direction.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Wraps a signed index into `[0, n)`.
#[inline]
pub fn periodic_index(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodicGrid1D<T> {
    pub n: usize,
    pub x_min: T,
    pub x_max: T,
}

impl<T: Real> PeriodicGrid1D<T> {
    pub fn new(n: usize, x_min: T, x_max: T) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 cells, got {n}")));
        }
        if !(x_max > x_min) {
            return Err(Error::InvalidGrid("x_max must exceed x_min".into()));
        }
        Ok(Self { n, x_min, x_max })
    }

    pub fn dx(&self) -> T {
        (self.x_max - self.x_min) / T::from_count(self.n)
    }

    pub fn center(&self, i: usize) -> T {
        self.x_min + (T::from_count(i) + T::lit(0.5)) * self.dx()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodicGrid2D<T> {
    pub nx: usize,
    pub ny: usize,
    pub x_min: T,
    pub x_max: T,
    pub y_min: T,
    pub y_max: T,
}

impl<T: Real> PeriodicGrid2D<T> {
    pub fn new(nx: usize, ny: usize, x: (T, T), y: (T, T)) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3x3 cells, got {nx}x{ny}")));
        }
        if !(x.1 > x.0) || !(y.1 > y.0) {
            return Err(Error::InvalidGrid("domain extents must be increasing".into()));
        }
        Ok(Self { nx, ny, x_min: x.0, x_max: x.1, y_min: y.0, y_max: y.1 })
    }

    pub fn dx(&self) -> T {
        (self.x_max - self.x_min) / T::from_count(self.nx)
    }

    pub fn dy(&self) -> T {
        (self.y_max - self.y_min) / T::from_count(self.ny)
    }
}

/// A 1D or 2D periodic grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Grid<T> {
    OneD(PeriodicGrid1D<T>),
    TwoD(PeriodicGrid2D<T>),
}

impl<T: Real> From<PeriodicGrid1D<T>> for Grid<T> {
    fn from(g: PeriodicGrid1D<T>) -> Self {
        Grid::OneD(g)
    }
}

impl<T: Real> From<PeriodicGrid2D<T>> for Grid<T> {
    fn from(g: PeriodicGrid2D<T>) -> Self {
        Grid::TwoD(g)
    }
}

impl<T: Real> Grid<T> {
    pub fn dims(&self) -> usize {
        match self {
            Grid::OneD(_) => 1,
            Grid::TwoD(_) => 2,
        }
    }

    pub fn n_cells(&self) -> usize {
        match self {
            Grid::OneD(g) => g.n,
            Grid::TwoD(g) => g.nx * g.ny,
        }
    }

    /// Extent of a cell along direction `dir` (0 = x, 1 = y).
    pub fn spacing(&self, dir: usize) -> T {
        match (self, dir) {
            (Grid::OneD(g), 0) => g.dx(),
            (Grid::TwoD(g), 0) => g.dx(),
            (Grid::TwoD(g), 1) => g.dy(),
            _ => panic!("direction {dir} out of range"),
        }
    }

    pub fn cell_volume(&self) -> T {
        match self {
            Grid::OneD(g) => g.dx(),
            Grid::TwoD(g) => g.dx() * g.dy(),
        }
    }

    /// Neighbour of `cell` one step along `dir`, forward or backward.
    #[inline]
    pub fn neighbor(&self, cell: usize, dir: usize, forward: bool) -> usize {
        let step: isize = if forward { 1 } else { -1 };
        match (self, dir) {
            (Grid::OneD(g), 0) => periodic_index(cell as isize + step, g.n),
            (Grid::TwoD(g), 0) => {
                let (j, i) = (cell / g.nx, cell % g.nx);
                j * g.nx + periodic_index(i as isize + step, g.nx)
            }
            (Grid::TwoD(g), 1) => {
                let (j, i) = (cell / g.nx, cell % g.nx);
                periodic_index(j as isize + step, g.ny) * g.nx + i
            }
            _ => panic!("direction {dir} out of range"),
        }
    }

    /// Cell-center coordinates (`[x]` or `[x, y]`).
    pub fn center(&self, cell: usize) -> Vec<T> {
        match self {
            Grid::OneD(g) => vec![g.center(cell)],
            Grid::TwoD(g) => {
                let (j, i) = (cell / g.nx, cell % g.nx);
                vec![
                    g.x_min + (T::from_count(i) + T::lit(0.5)) * g.dx(),
                    g.y_min + (T::from_count(j) + T::lit(0.5)) * g.dy(),
                ]
            }
        }
    }
}

/// Cell-averaged solution: `m` components per cell, cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StateField<T> {
    grid: Grid<T>,
    m: usize,
    values: Vec<T>,
}

impl<T: Real> StateField<T> {
    pub fn zeros(grid: Grid<T>, m: usize) -> Self {
        Self { grid, m, values: vec![T::zero(); grid.n_cells() * m] }
    }

    pub fn from_values(grid: Grid<T>, m: usize, values: Vec<T>) -> Result<Self> {
        let expected = grid.n_cells() * m;
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: values.len() });
        }
        Ok(Self { grid, m, values })
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(grid: Grid<T>, m: usize, f: impl Fn(&[T]) -> Vec<T>) -> Self {
        let mut values = Vec::with_capacity(grid.n_cells() * m);
        for cell in 0..grid.n_cells() {
            let v = f(&grid.center(cell));
            assert_eq!(v.len(), m, "sampled state has wrong component count");
            values.extend(v);
        }
        Self { grid, m, values }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn cell(&self, c: usize) -> &[T] {
        &self.values[c * self.m..(c + 1) * self.m]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// `sum_cells vol * u_cell`, per component.
    pub fn total_mass(&self) -> Vec<T> {
        total_mass(&self.grid, self.m, &self.values)
    }

    /// Grid-weighted L2 norm over all components.
    pub fn norm(&self) -> T {
        weighted_norm(&self.grid, &self.values)
    }

    /// Discrete L2 error of one component against a pointwise reference
    /// sampled at cell centers.
    pub fn discrete_l2_error(&self, reference: impl Fn(&[T]) -> Vec<T>, component: usize) -> Result<T> {
        if component >= self.m {
            return Err(Error::DimensionMismatch { expected: self.m, got: component });
        }
        let vol = self.grid.cell_volume();
        let mut acc = T::zero();
        for c in 0..self.grid.n_cells() {
            let r = reference(&self.grid.center(c));
            let d = self.values[c * self.m + component] - r[component];
            acc += vol * d * d;
        }
        Ok(acc.sqrt())
    }

    /// Writes a CSV snapshot with header `x[,y],u1..um`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header: Vec<String> = match self.grid {
            Grid::OneD(_) => vec!["x".into()],
            Grid::TwoD(_) => vec!["x".into(), "y".into()],
        };
        header.extend((1..=self.m).map(|k| format!("u{k}")));
        writeln!(w, "{}", header.join(","))?;
        for c in 0..self.grid.n_cells() {
            let row: Vec<String> = self
                .grid
                .center(c)
                .iter()
                .chain(self.cell(c))
                .map(|v| format!("{:.16e}", v))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Total mass of a raw cell-major array.
pub fn total_mass<T: Real>(grid: &Grid<T>, m: usize, values: &[T]) -> Vec<T> {
    let mut mass = vec![T::zero(); m];
    for cell in values.chunks_exact(m) {
        for (acc, &v) in mass.iter_mut().zip(cell) {
            *acc += v;
        }
    }
    let vol = grid.cell_volume();
    mass.iter_mut().for_each(|x| *x *= vol);
    mass
}

/// `sqrt(sum vol * v^2)`.
pub fn weighted_norm<T: Real>(grid: &Grid<T>, values: &[T]) -> T {
    (grid.cell_volume() * crate::scalar::dot(values, values)).sqrt()
}
