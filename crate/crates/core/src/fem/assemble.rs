use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{space_dim, FunctionValue, Mesh1D};
use crate::error::{Error, Result};
use crate::symbolics::{CoeffId, Family, FormExpr, Space};

/// Values bound to the coefficients of a form.
pub type Bindings = BTreeMap<CoeffId, FunctionValue>;

/// Gauss-Legendre rule used on every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    #[default]
    Gauss3,
    Gauss5,
}

impl Quadrature {
    pub fn points(self) -> usize {
        match self {
            Quadrature::Gauss3 => 3,
            Quadrature::Gauss5 => 5,
        }
    }

    /// Highest polynomial degree integrated exactly.
    pub fn exact_degree(self) -> usize {
        2 * self.points() - 1
    }

    /// Points and weights on the reference cell [0, 1].
    fn rule(self) -> Vec<(f64, f64)> {
        let symmetric: Vec<(f64, f64)> = match self {
            Quadrature::Gauss3 => vec![(0.0, 8.0 / 9.0), ((3.0f64 / 5.0).sqrt(), 5.0 / 9.0)],
            Quadrature::Gauss5 => {
                let r = 2.0 * (10.0f64 / 7.0).sqrt();
                let s70 = 13.0 * 70.0f64.sqrt();
                vec![
                    (0.0, 128.0 / 225.0),
                    ((5.0 - r).sqrt() / 3.0, (322.0 + s70) / 900.0),
                    ((5.0 + r).sqrt() / 3.0, (322.0 - s70) / 900.0),
                ]
            }
        };
        let mut out = Vec::new();
        for &(p, w) in symmetric.iter().rev() {
            out.push((0.5 * (1.0 - p), 0.5 * w));
        }
        for &(p, w) in symmetric.iter().skip(1) {
            out.push((0.5 * (1.0 + p), 0.5 * w));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AssemblyOptions {
    pub quadrature: Quadrature,
    /// Reject integrands whose polynomial degree exceeds the rule's
    /// exactness instead of integrating them approximately.
    pub strict_degree: bool,
}

/// Result of assembling a form of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub enum Assembled {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl Assembled {
    pub fn into_scalar(self) -> Result<f64> {
        match self {
            Assembled::Scalar(s) => Ok(s),
            other => Err(Error::RankMismatch {
                expected: 0,
                found: other.rank(),
            }),
        }
    }

    pub fn into_vector(self) -> Result<DVector<f64>> {
        match self {
            Assembled::Vector(v) => Ok(v),
            other => Err(Error::RankMismatch {
                expected: 1,
                found: other.rank(),
            }),
        }
    }

    pub fn into_matrix(self) -> Result<DMatrix<f64>> {
        match self {
            Assembled::Matrix(m) => Ok(m),
            other => Err(Error::RankMismatch {
                expected: 2,
                found: other.rank(),
            }),
        }
    }

    fn rank(&self) -> usize {
        match self {
            Assembled::Scalar(_) => 0,
            Assembled::Vector(_) => 1,
            Assembled::Matrix(_) => 2,
        }
    }
}

pub fn assemble(form: &FormExpr, mesh: &Mesh1D, bindings: &Bindings) -> Result<Assembled> {
    assemble_with(form, mesh, bindings, AssemblyOptions::default())
}

pub fn assemble_matrix(form: &FormExpr, mesh: &Mesh1D, bindings: &Bindings) -> Result<DMatrix<f64>> {
    assemble(form, mesh, bindings)?.into_matrix()
}

pub fn assemble_vector(form: &FormExpr, mesh: &Mesh1D, bindings: &Bindings) -> Result<DVector<f64>> {
    assemble(form, mesh, bindings)?.into_vector()
}

pub fn assemble_scalar(form: &FormExpr, mesh: &Mesh1D, bindings: &Bindings) -> Result<f64> {
    assemble(form, mesh, bindings)?.into_scalar()
}

pub fn assemble_with(
    form: &FormExpr,
    mesh: &Mesh1D,
    bindings: &Bindings,
    options: AssemblyOptions,
) -> Result<Assembled> {
    let sig = form.signature()?;
    let rows = sig.test.map(|s| space_dim(s, mesh)).unwrap_or(1);
    let cols = sig.trial.map(|s| space_dim(s, mesh)).unwrap_or(1);
    let mut out = DMatrix::zeros(rows, cols);

    let rule = options.quadrature.rule();
    for integrand in form.integrands()? {
        let lowered = lower(integrand)?;
        if options.strict_degree {
            let exact = options.quadrature.exact_degree();
            match degree(&lowered) {
                Some(d) if d <= exact => {}
                d => {
                    return Err(Error::QuadratureInsufficient {
                        points: options.quadrature.points(),
                        degree: d.unwrap_or(usize::MAX),
                    })
                }
            }
        }
        let mut slots = Vec::new();
        let node = compile(&lowered, bindings, mesh, &mut slots)?;
        integrate_cells(&node, &slots, sig.test, sig.trial, mesh, &rule, &mut out);
    }

    Ok(match (sig.test, sig.trial) {
        (None, None) => Assembled::Scalar(out[(0, 0)]),
        (Some(_), None) => Assembled::Vector(out.column(0).into_owned()),
        (Some(_), Some(_)) => Assembled::Matrix(out),
        (None, Some(_)) => {
            return Err(Error::MalformedForm("trial function without a test function".into()))
        }
    })
}

/// Pushes `d/dx` down to the leaves using the product and chain rules, so
/// that it only ever wraps a P1 symbol.
fn lower(e: &FormExpr) -> Result<FormExpr> {
    Ok(match e {
        FormExpr::Sum(t) => FormExpr::sum(t.iter().map(lower).collect::<Result<Vec<_>>>()?),
        FormExpr::Product(f) => FormExpr::product(f.iter().map(lower).collect::<Result<Vec<_>>>()?),
        FormExpr::Power(b, n) => lower(b)?.powi(*n),
        FormExpr::Dx(inner) => differentiate(&lower(inner)?)?,
        FormExpr::Integral(_) => return Err(Error::MalformedForm("nested integral".into())),
        leaf => leaf.clone(),
    })
}

fn differentiate(e: &FormExpr) -> Result<FormExpr> {
    let is_p1 = |s: &crate::symbolics::Space| s.family == Family::Lagrange;
    Ok(match e {
        FormExpr::Constant(_) => FormExpr::Constant(0.0),
        FormExpr::Coordinate => FormExpr::Constant(1.0),
        FormExpr::Test(s) | FormExpr::Trial(s) if is_p1(s) => FormExpr::Dx(Box::new(e.clone())),
        FormExpr::Coefficient(r) if is_p1(&r.space) => FormExpr::Dx(Box::new(e.clone())),
        FormExpr::Test(_) | FormExpr::Trial(_) | FormExpr::Coefficient(_) => FormExpr::Constant(0.0),
        // Second derivatives of piecewise-linear functions vanish cellwise.
        FormExpr::Dx(_) => FormExpr::Constant(0.0),
        FormExpr::Sum(t) => FormExpr::sum(t.iter().map(differentiate).collect::<Result<Vec<_>>>()?),
        FormExpr::Product(factors) => {
            let mut terms = Vec::new();
            for i in 0..factors.len() {
                let d = differentiate(&factors[i])?;
                if d.is_zero() {
                    continue;
                }
                terms.push(FormExpr::product(
                    factors
                        .iter()
                        .enumerate()
                        .map(|(j, f)| if i == j { d.clone() } else { f.clone() }),
                ));
            }
            FormExpr::sum(terms)
        }
        FormExpr::Power(b, n) => {
            let db = differentiate(b)?;
            FormExpr::product([FormExpr::Constant(f64::from(*n)), (**b).clone().powi(n - 1), db])
        }
        FormExpr::Integral(_) => return Err(Error::MalformedForm("nested integral".into())),
    })
}

/// Polynomial degree in x of a lowered integrand, `None` when it is not a
/// polynomial.
fn degree(e: &FormExpr) -> Option<usize> {
    match e {
        FormExpr::Constant(_) => Some(0),
        FormExpr::Coordinate => Some(1),
        FormExpr::Test(s) | FormExpr::Trial(s) => Some(usize::from(s.family == Family::Lagrange)),
        FormExpr::Coefficient(r) => Some(usize::from(r.space.family == Family::Lagrange)),
        FormExpr::Dx(_) => Some(0),
        FormExpr::Sum(t) => t.iter().map(degree).try_fold(0, |acc, d| Some(acc.max(d?))),
        FormExpr::Product(f) => f.iter().map(degree).try_fold(0, |acc, d| Some(acc + d?)),
        FormExpr::Power(b, n) => {
            let d = degree(b)?;
            if *n >= 0 {
                Some(d * (*n as usize))
            } else if d == 0 {
                Some(0)
            } else {
                None
            }
        }
        FormExpr::Integral(_) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arg {
    Test,
    Trial,
}

/// Integrand compiled for pointwise evaluation; coefficients are resolved
/// to slots holding their bound values.
#[derive(Debug)]
enum Node {
    Const(f64),
    X,
    Basis { arg: Arg, dx: bool },
    Coef { slot: usize, dx: bool },
    Sum(Vec<Node>),
    Prod(Vec<Node>),
    Pow(Box<Node>, i32),
}

struct Slot<'a> {
    space: Space,
    values: &'a DVector<f64>,
}

fn compile<'a>(
    e: &FormExpr,
    bindings: &'a Bindings,
    mesh: &Mesh1D,
    slots: &mut Vec<Slot<'a>>,
) -> Result<Node> {
    Ok(match e {
        FormExpr::Constant(c) => Node::Const(*c),
        FormExpr::Coordinate => Node::X,
        FormExpr::Test(_) => Node::Basis {
            arg: Arg::Test,
            dx: false,
        },
        FormExpr::Trial(_) => Node::Basis {
            arg: Arg::Trial,
            dx: false,
        },
        FormExpr::Coefficient(r) => Node::Coef {
            slot: bind(r, bindings, mesh, slots)?,
            dx: false,
        },
        FormExpr::Dx(inner) => match compile(inner, bindings, mesh, slots)? {
            Node::Basis { arg, .. } => Node::Basis { arg, dx: true },
            Node::Coef { slot, .. } => Node::Coef { slot, dx: true },
            _ => return Err(Error::MalformedForm("derivative of a non-leaf after lowering".into())),
        },
        FormExpr::Sum(t) => Node::Sum(
            t.iter()
                .map(|c| compile(c, bindings, mesh, slots))
                .collect::<Result<_>>()?,
        ),
        FormExpr::Product(f) => Node::Prod(
            f.iter()
                .map(|c| compile(c, bindings, mesh, slots))
                .collect::<Result<_>>()?,
        ),
        FormExpr::Power(b, n) => Node::Pow(Box::new(compile(b, bindings, mesh, slots)?), *n),
        FormExpr::Integral(_) => return Err(Error::MalformedForm("nested integral".into())),
    })
}

fn bind<'a>(
    r: &crate::symbolics::CoefficientRef,
    bindings: &'a Bindings,
    mesh: &Mesh1D,
    slots: &mut Vec<Slot<'a>>,
) -> Result<usize> {
    let value = bindings
        .get(&r.id)
        .ok_or_else(|| Error::UnboundCoefficient(r.id.to_string()))?;
    if value.space != r.space {
        return Err(Error::SpaceMismatch {
            expected: r.space.to_string(),
            found: value.space.to_string(),
        });
    }
    let expected = space_dim(r.space, mesh);
    if value.values.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: value.values.len(),
        });
    }
    slots.push(Slot {
        space: r.space,
        values: &value.values,
    });
    Ok(slots.len() - 1)
}

/// Local basis data at one quadrature point: global dof, value, derivative.
type LocalBasis = Vec<(usize, f64, f64)>;

fn local_basis(space: Option<Space>, cell: usize, xi: f64, h: f64) -> LocalBasis {
    match space.map(|s| s.family) {
        None => vec![(0, 1.0, 0.0)],
        Some(Family::Real) => vec![(0, 1.0, 0.0)],
        Some(Family::Lagrange) => vec![(cell, 1.0 - xi, -1.0 / h), (cell + 1, xi, 1.0 / h)],
    }
}

struct Point {
    x: f64,
    test: (f64, f64),
    trial: (f64, f64),
}

fn eval(n: &Node, p: &Point, coef: &[(f64, f64)]) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::X => p.x,
        Node::Basis { arg, dx } => {
            let (v, d) = match arg {
                Arg::Test => p.test,
                Arg::Trial => p.trial,
            };
            if *dx {
                d
            } else {
                v
            }
        }
        Node::Coef { slot, dx } => {
            let (v, d) = coef[*slot];
            if *dx {
                d
            } else {
                v
            }
        }
        Node::Sum(t) => t.iter().map(|c| eval(c, p, coef)).sum(),
        Node::Prod(f) => f.iter().map(|c| eval(c, p, coef)).product(),
        Node::Pow(b, e) => eval(b, p, coef).powi(*e),
    }
}

fn integrate_cells(
    node: &Node,
    slots: &[Slot<'_>],
    test: Option<Space>,
    trial: Option<Space>,
    mesh: &Mesh1D,
    rule: &[(f64, f64)],
    out: &mut DMatrix<f64>,
) {
    let h = mesh.h();
    let mut coef = vec![(0.0, 0.0); slots.len()];
    for cell in 0..mesh.n_cells() {
        let x0 = mesh.node(cell);
        for &(xi, w) in rule {
            let x = x0 + xi * h;
            for (slot, c) in slots.iter().zip(coef.iter_mut()) {
                *c = match slot.space.family {
                    Family::Real => (slot.values[0], 0.0),
                    Family::Lagrange => {
                        let (a, b) = (slot.values[cell], slot.values[cell + 1]);
                        (a * (1.0 - xi) + b * xi, (b - a) / h)
                    }
                };
            }
            let tb = local_basis(test, cell, xi, h);
            let rb = local_basis(trial, cell, xi, h);
            for &(i, tv, td) in &tb {
                for &(j, rv, rd) in &rb {
                    let p = Point {
                        x,
                        test: (tv, td),
                        trial: (rv, rd),
                    };
                    out[(i, j)] += w * h * eval(node, &p, &coef);
                }
            }
        }
    }
}
