use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::Mesh1D;
use crate::error::{Error, Result};

type ValueFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Dirichlet condition on a set of boundary nodes, with value `g(x, t)`.
#[derive(Clone)]
pub struct DirichletBC {
    nodes: Vec<usize>,
    value: ValueFn,
}

impl fmt::Debug for DirichletBC {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DirichletBC").field("nodes", &self.nodes).finish_non_exhaustive()
    }
}

impl DirichletBC {
    pub fn new(
        mesh: &Mesh1D,
        nodes: impl IntoIterator<Item = usize>,
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let mut nodes: Vec<usize> = nodes.into_iter().collect();
        nodes.sort_unstable();
        nodes.dedup();
        if let Some(&bad) = nodes.iter().find(|&&n| !mesh.is_boundary(n)) {
            return Err(Error::InvalidBoundary(format!("node {bad} is not on the boundary")));
        }
        Ok(Self {
            nodes,
            value: Arc::new(value),
        })
    }

    /// Both endpoints held at `value(x, t)`.
    pub fn on_boundary(
        mesh: &Mesh1D,
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(mesh, mesh.boundary_nodes(), value).expect("endpoints are boundary nodes")
    }

    pub fn homogeneous(mesh: &Mesh1D) -> Self {
        Self::on_boundary(mesh, |_, _| 0.0)
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// `(node, value)` pairs at time `t`.
    pub fn values(&self, mesh: &Mesh1D, t: f64) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .map(|&n| (n, (self.value)(mesh.node(n), t)))
            .collect()
    }
}

/// Replaces boundary rows by identity rows and sets the matching right-hand
/// side entries to the boundary value, or to zero when `homogeneous`.
pub fn apply_bc(
    a: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    bc: &DirichletBC,
    mesh: &Mesh1D,
    t: f64,
    homogeneous: bool,
) {
    for &n in bc.nodes() {
        a.row_mut(n).fill(0.0);
        a[(n, n)] = 1.0;
    }
    apply_bc_rhs(b, bc, mesh, t, homogeneous);
}

/// The right-hand-side half of [`apply_bc`].
pub fn apply_bc_rhs(b: &mut DVector<f64>, bc: &DirichletBC, mesh: &Mesh1D, t: f64, homogeneous: bool) {
    for (n, g) in bc.values(mesh, t) {
        b[n] = if homogeneous { 0.0 } else { g };
    }
}
