//! Variational forms as immutable expression trees.
//!
//! A form is an `Integral` node, or a `Sum` of forms. Inside an integral the
//! integrand is built from constants, the spatial coordinate, at most one
//! test and one trial symbol, coefficient references, n-ary sums and
//! products, integer powers and the 1D derivative `d/dx`.
//!
//! The rank of a form is the number of distinct argument symbols it carries:
//! `(test, trial)` is bilinear, `test` alone is linear, neither is a scalar.

mod ops;
mod render;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id::VariableId;

pub use ops::{action, extract_dependencies, gateaux_derivative, replace, transpose_form};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// Continuous piecewise polynomials on the mesh.
    Lagrange,
    /// Global constants (one degree of freedom).
    Real,
}

/// Function-space descriptor: element family and polynomial degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Space {
    pub family: Family,
    pub degree: u32,
}

impl Space {
    pub const P1: Space = Space {
        family: Family::Lagrange,
        degree: 1,
    };
    pub const REAL: Space = Space {
        family: Family::Real,
        degree: 0,
    };
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Lagrange => write!(f, "P{}", self.degree),
            Family::Real => write!(f, "R{}", self.degree),
        }
    }
}

/// What a coefficient refers to: a value recorded on the tape, or a named
/// parameter supplied from outside the tape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoeffId {
    Var(VariableId),
    Param(String),
}

impl fmt::Display for CoeffId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoeffId::Var(id) => write!(f, "{id}"),
            CoeffId::Param(name) => write!(f, "{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoefficientRef {
    pub id: CoeffId,
    pub space: Space,
}

impl CoefficientRef {
    pub fn var(id: VariableId, space: Space) -> Self {
        Self {
            id: CoeffId::Var(id),
            space,
        }
    }

    pub fn param(name: impl Into<String>, space: Space) -> Self {
        Self {
            id: CoeffId::Param(name.into()),
            space,
        }
    }

    pub fn expr(&self) -> FormExpr {
        FormExpr::Coefficient(self.clone())
    }
}

/// Node of a variational form.
#[derive(Debug, Clone, PartialEq)]
pub enum FormExpr {
    Constant(f64),
    /// The spatial coordinate `x`.
    Coordinate,
    Test(Space),
    Trial(Space),
    Coefficient(CoefficientRef),
    Sum(Vec<FormExpr>),
    Product(Vec<FormExpr>),
    Power(Box<FormExpr>, i32),
    Dx(Box<FormExpr>),
    Integral(Box<FormExpr>),
}

/// Which argument symbols an integrand carries, with their spaces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Signature {
    pub test: Option<Space>,
    pub trial: Option<Space>,
}

impl Signature {
    pub fn rank(self) -> usize {
        usize::from(self.test.is_some()) + usize::from(self.trial.is_some())
    }

    fn merge(self, other: Signature) -> Result<Signature> {
        if self.test.is_some() && other.test.is_some() {
            return Err(Error::MalformedForm("test function appears twice in a product".into()));
        }
        if self.trial.is_some() && other.trial.is_some() {
            return Err(Error::MalformedForm("trial function appears twice in a product".into()));
        }
        Ok(Signature {
            test: self.test.or(other.test),
            trial: self.trial.or(other.trial),
        })
    }
}

impl FormExpr {
    pub fn constant(value: f64) -> Self {
        FormExpr::Constant(value)
    }

    pub fn x() -> Self {
        FormExpr::Coordinate
    }

    pub fn test(space: Space) -> Self {
        FormExpr::Test(space)
    }

    pub fn trial(space: Space) -> Self {
        FormExpr::Trial(space)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, FormExpr::Constant(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, FormExpr::Constant(c) if *c == 1.0)
    }

    /// Flattening n-ary sum; zero terms are dropped.
    pub fn sum(terms: impl IntoIterator<Item = FormExpr>) -> FormExpr {
        let mut flat = Vec::new();
        for t in terms {
            match t {
                FormExpr::Sum(inner) => flat.extend(inner),
                t if t.is_zero() => {}
                t => flat.push(t),
            }
        }
        match flat.len() {
            0 => FormExpr::Constant(0.0),
            1 => flat.pop().unwrap(),
            _ => FormExpr::Sum(flat),
        }
    }

    /// Flattening n-ary product; a zero factor collapses the product, unit
    /// factors are dropped.
    pub fn product(factors: impl IntoIterator<Item = FormExpr>) -> FormExpr {
        let mut flat = Vec::new();
        for f in factors {
            match f {
                FormExpr::Product(inner) => flat.extend(inner),
                f if f.is_zero() => return FormExpr::Constant(0.0),
                f if f.is_one() => {}
                f => flat.push(f),
            }
        }
        match flat.len() {
            0 => FormExpr::Constant(1.0),
            1 => flat.pop().unwrap(),
            _ => FormExpr::Product(flat),
        }
    }

    pub fn powi(self, exponent: i32) -> FormExpr {
        match exponent {
            0 => FormExpr::Constant(1.0),
            1 => self,
            _ if self.is_zero() && exponent > 0 => FormExpr::Constant(0.0),
            _ => FormExpr::Power(Box::new(self), exponent),
        }
    }

    /// Spatial derivative `d/dx`.
    pub fn dx(self) -> FormExpr {
        match self {
            FormExpr::Constant(_) => FormExpr::Constant(0.0),
            e => FormExpr::Dx(Box::new(e)),
        }
    }

    /// Wraps the integrand in the domain-integral marker.
    pub fn integrate(self) -> FormExpr {
        FormExpr::Integral(Box::new(self))
    }

    /// Integrands of every integral in the form, in order.
    pub(crate) fn integrands(&self) -> Result<Vec<&FormExpr>> {
        let mut out = Vec::new();
        self.collect_integrands(&mut out)?;
        Ok(out)
    }

    fn collect_integrands<'a>(&'a self, out: &mut Vec<&'a FormExpr>) -> Result<()> {
        match self {
            FormExpr::Integral(e) => {
                out.push(e);
                Ok(())
            }
            FormExpr::Sum(terms) => terms.iter().try_for_each(|t| t.collect_integrands(out)),
            _ => Err(Error::MalformedForm(format!(
                "term `{self}` is not under an integral"
            ))),
        }
    }

    pub(crate) fn signature(&self) -> Result<Signature> {
        let sigs = self
            .integrands()?
            .into_iter()
            .map(integrand_signature)
            .collect::<Result<Vec<_>>>()?;
        let first = sigs[0];
        if sigs.iter().any(|s| *s != first) {
            return Err(Error::MalformedForm("integrals of mixed rank".into()));
        }
        Ok(first)
    }

    /// Arity of the form: 0 (scalar), 1 (linear) or 2 (bilinear).
    pub fn rank(&self) -> Result<usize> {
        Ok(self.signature()?.rank())
    }

    /// Every coefficient referenced anywhere in the tree.
    pub fn coefficients(&self) -> BTreeSet<CoefficientRef> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let FormExpr::Coefficient(r) = e {
                out.insert(r.clone());
            }
        });
        out
    }

    pub(crate) fn visit(&self, f: &mut impl FnMut(&FormExpr)) {
        f(self);
        match self {
            FormExpr::Sum(c) | FormExpr::Product(c) => c.iter().for_each(|e| e.visit(f)),
            FormExpr::Power(e, _) | FormExpr::Dx(e) | FormExpr::Integral(e) => e.visit(f),
            _ => {}
        }
    }

    /// Rebuilds the tree bottom-up, letting `f` replace leaves. Interior
    /// nodes keep their shape; nothing is simplified.
    pub(crate) fn map_leaves(
        &self,
        f: &mut impl FnMut(&FormExpr) -> Result<Option<FormExpr>>,
    ) -> Result<FormExpr> {
        Ok(match self {
            FormExpr::Sum(c) => FormExpr::Sum(
                c.iter().map(|e| e.map_leaves(f)).collect::<Result<_>>()?,
            ),
            FormExpr::Product(c) => FormExpr::Product(
                c.iter().map(|e| e.map_leaves(f)).collect::<Result<_>>()?,
            ),
            FormExpr::Power(e, n) => FormExpr::Power(Box::new(e.map_leaves(f)?), *n),
            FormExpr::Dx(e) => FormExpr::Dx(Box::new(e.map_leaves(f)?)),
            FormExpr::Integral(e) => FormExpr::Integral(Box::new(e.map_leaves(f)?)),
            leaf => f(leaf)?.unwrap_or_else(|| leaf.clone()),
        })
    }

    /// Deterministic s-expression rendering.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

pub(crate) fn integrand_signature(e: &FormExpr) -> Result<Signature> {
    match e {
        FormExpr::Constant(_) | FormExpr::Coordinate | FormExpr::Coefficient(_) => {
            Ok(Signature::default())
        }
        FormExpr::Test(s) => Ok(Signature {
            test: Some(*s),
            trial: None,
        }),
        FormExpr::Trial(s) => Ok(Signature {
            test: None,
            trial: Some(*s),
        }),
        FormExpr::Sum(terms) => {
            let mut sig = None;
            for t in terms {
                let s = integrand_signature(t)?;
                match sig {
                    None => sig = Some(s),
                    Some(prev) if prev != s => {
                        return Err(Error::MalformedForm(
                            "sum mixes terms of different rank".into(),
                        ))
                    }
                    Some(_) => {}
                }
            }
            Ok(sig.unwrap_or_default())
        }
        FormExpr::Product(factors) => factors
            .iter()
            .try_fold(Signature::default(), |acc, f| acc.merge(integrand_signature(f)?)),
        FormExpr::Power(base, n) => {
            let s = integrand_signature(base)?;
            if s.rank() > 0 && *n != 1 {
                return Err(Error::MalformedForm(
                    "argument symbol raised to a power".into(),
                ));
            }
            Ok(s)
        }
        FormExpr::Dx(inner) => integrand_signature(inner),
        FormExpr::Integral(_) => Err(Error::MalformedForm("nested integral".into())),
    }
}

impl From<f64> for FormExpr {
    fn from(value: f64) -> Self {
        FormExpr::Constant(value)
    }
}

impl From<CoefficientRef> for FormExpr {
    fn from(r: CoefficientRef) -> Self {
        FormExpr::Coefficient(r)
    }
}

impl Add for FormExpr {
    type Output = FormExpr;
    fn add(self, rhs: FormExpr) -> FormExpr {
        FormExpr::sum([self, rhs])
    }
}

impl Sub for FormExpr {
    type Output = FormExpr;
    fn sub(self, rhs: FormExpr) -> FormExpr {
        FormExpr::sum([self, -rhs])
    }
}

impl Mul for FormExpr {
    type Output = FormExpr;
    fn mul(self, rhs: FormExpr) -> FormExpr {
        FormExpr::product([self, rhs])
    }
}

impl Mul<FormExpr> for f64 {
    type Output = FormExpr;
    fn mul(self, rhs: FormExpr) -> FormExpr {
        FormExpr::product([FormExpr::Constant(self), rhs])
    }
}

impl Neg for FormExpr {
    type Output = FormExpr;
    fn neg(self) -> FormExpr {
        match self {
            // Negating a sum of integrals must keep every term integrated.
            FormExpr::Sum(terms) => FormExpr::sum(terms.into_iter().map(|t| -t)),
            FormExpr::Integral(e) => FormExpr::Integral(Box::new(-*e)),
            e => FormExpr::product([FormExpr::Constant(-1.0), e]),
        }
    }
}
