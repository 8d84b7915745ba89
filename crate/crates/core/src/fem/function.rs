use std::fmt::Write;

use nalgebra::DVector;

use super::Mesh1D;
use crate::error::{Error, Result};
use crate::symbolics::{Family, Space};

/// Number of degrees of freedom of `space` on `mesh`.
pub fn space_dim(space: Space, mesh: &Mesh1D) -> usize {
    match space.family {
        Family::Lagrange => mesh.n_nodes(),
        Family::Real => 1,
    }
}

/// Coefficient vector of a discrete function.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionValue {
    pub space: Space,
    pub values: DVector<f64>,
}

impl FunctionValue {
    pub fn new(space: Space, values: DVector<f64>, mesh: &Mesh1D) -> Result<Self> {
        let expected = space_dim(space, mesh);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self { space, values })
    }

    pub fn zeros(space: Space, mesh: &Mesh1D) -> Self {
        Self {
            space,
            values: DVector::zeros(space_dim(space, mesh)),
        }
    }

    pub fn real(value: f64) -> Self {
        Self {
            space: Space::REAL,
            values: DVector::from_element(1, value),
        }
    }

    /// Nodal interpolant of `f` in P1.
    pub fn interpolate(mesh: &Mesh1D, f: impl Fn(f64) -> f64) -> Self {
        Self {
            space: Space::P1,
            values: DVector::from_iterator(mesh.n_nodes(), mesh.nodes().into_iter().map(f)),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `x,value` rows with 17 significant digits. Real-space values have a
    /// single row with an empty coordinate.
    pub fn to_csv(&self, mesh: &Mesh1D) -> String {
        let mut out = String::from("x,value\n");
        match self.space.family {
            Family::Lagrange => {
                for (x, v) in mesh.nodes().iter().zip(self.values.iter()) {
                    let _ = writeln!(out, "{x:.16e},{v:.16e}");
                }
            }
            Family::Real => {
                let _ = writeln!(out, ",{:.16e}", self.values[0]);
            }
        }
        out
    }
}
