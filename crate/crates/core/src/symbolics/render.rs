use std::fmt;

use super::{CoeffId, FormExpr};

fn list(f: &mut fmt::Formatter<'_>, head: &str, items: &[FormExpr]) -> fmt::Result {
    write!(f, "({head}")?;
    for item in items {
        write!(f, " {item}")?;
    }
    write!(f, ")")
}

impl fmt::Display for FormExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `{:?}` is the shortest round-trip representation.
            FormExpr::Constant(c) => write!(f, "{c:?}"),
            FormExpr::Coordinate => write!(f, "x"),
            FormExpr::Test(s) => write!(f, "(test {s})"),
            FormExpr::Trial(s) => write!(f, "(trial {s})"),
            FormExpr::Coefficient(r) => match &r.id {
                CoeffId::Var(id) => write!(f, "(coeff {id} {})", r.space),
                CoeffId::Param(name) => write!(f, "(param {name} {})", r.space),
            },
            FormExpr::Sum(terms) => list(f, "+", terms),
            FormExpr::Product(factors) => list(f, "*", factors),
            FormExpr::Power(base, n) => write!(f, "(^ {base} {n})"),
            FormExpr::Dx(inner) => write!(f, "(dx {inner})"),
            FormExpr::Integral(inner) => write!(f, "(integral {inner})"),
        }
    }
}
