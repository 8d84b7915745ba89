use crate::error::{Error, Result};

/// Uniform mesh of an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh1D {
    n_cells: usize,
    a: f64,
    b: f64,
}

impl Mesh1D {
    pub fn new(n_cells: usize, a: f64, b: f64) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::InvalidMesh("at least one cell is required".into()));
        }
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidMesh(format!("bad interval [{a}, {b}]")));
        }
        Ok(Self { n_cells, a, b })
    }

    /// Mesh of the unit interval.
    pub fn unit(n_cells: usize) -> Result<Self> {
        Self::new(n_cells, 0.0, 1.0)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn left(&self) -> f64 {
        self.a
    }

    pub fn right(&self) -> f64 {
        self.b
    }

    pub fn h(&self) -> f64 {
        (self.b - self.a) / self.n_cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.b
        } else {
            self.a + i as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    pub fn boundary_nodes(&self) -> [usize; 2] {
        [0, self.n_cells]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        node == 0 || node == self.n_cells
    }
}
