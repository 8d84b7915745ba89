use std::collections::{BTreeMap, BTreeSet};

use super::{CoeffId, CoefficientRef, FormExpr, Signature, Space};
use crate::error::{Error, Result};
use crate::id::VariableId;

fn space_check(expected: Space, found: Space) -> Result<()> {
    if expected != found {
        return Err(Error::SpaceMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn require_rank(form: &FormExpr, expected: usize) -> Result<Signature> {
    let sig = form.signature()?;
    if sig.rank() != expected {
        return Err(Error::RankMismatch {
            expected,
            found: sig.rank(),
        });
    }
    Ok(sig)
}

/// A zero integrand that still carries the argument symbols of `sig`, so
/// that a vanishing derivative assembles to a zero tensor of the right shape.
fn zero_of(sig: Signature) -> FormExpr {
    let mut factors = vec![FormExpr::Constant(0.0)];
    factors.extend(sig.test.map(FormExpr::Test));
    factors.extend(sig.trial.map(FormExpr::Trial));
    if factors.len() == 1 {
        FormExpr::Constant(0.0)
    } else {
        FormExpr::Product(factors)
    }
}

/// Directional (Gateaux) derivative of `form` with respect to the
/// coefficient `wrt`, in the direction `direction`.
///
/// The direction may be a test or trial symbol (raising the rank by one), a
/// coefficient of the same space, or, for `Real` coefficients only, a
/// constant.
pub fn gateaux_derivative(
    form: &FormExpr,
    wrt: &CoefficientRef,
    direction: &FormExpr,
) -> Result<FormExpr> {
    let sig = form.signature()?;
    let target = match direction {
        FormExpr::Trial(s) => {
            space_check(wrt.space, *s)?;
            if sig.trial.is_some() {
                return Err(Error::RankMismatch {
                    expected: 1,
                    found: sig.rank(),
                });
            }
            Signature {
                trial: Some(*s),
                ..sig
            }
        }
        FormExpr::Test(s) => {
            space_check(wrt.space, *s)?;
            if sig.test.is_some() {
                return Err(Error::RankMismatch {
                    expected: 0,
                    found: sig.rank(),
                });
            }
            Signature {
                test: Some(*s),
                ..sig
            }
        }
        FormExpr::Coefficient(r) => {
            space_check(wrt.space, r.space)?;
            sig
        }
        FormExpr::Constant(_) => {
            space_check(wrt.space, Space::REAL)?;
            sig
        }
        other => {
            return Err(Error::MalformedForm(format!(
                "unsupported derivative direction `{other}`"
            )))
        }
    };

    let mut pieces = Vec::new();
    for integrand in form.integrands()? {
        let d = derivative(integrand, &wrt.id, direction);
        if !d.is_zero() {
            pieces.push(d.integrate());
        }
    }
    if pieces.is_empty() {
        pieces.push(zero_of(target).integrate());
    }
    Ok(FormExpr::sum(pieces))
}

fn derivative(e: &FormExpr, wrt: &CoeffId, direction: &FormExpr) -> FormExpr {
    match e {
        FormExpr::Constant(_) | FormExpr::Coordinate | FormExpr::Test(_) | FormExpr::Trial(_) => {
            FormExpr::Constant(0.0)
        }
        FormExpr::Coefficient(r) if r.id == *wrt => direction.clone(),
        FormExpr::Coefficient(_) => FormExpr::Constant(0.0),
        FormExpr::Sum(terms) => FormExpr::sum(terms.iter().map(|t| derivative(t, wrt, direction))),
        FormExpr::Product(factors) => {
            let mut terms = Vec::new();
            for (i, f) in factors.iter().enumerate() {
                let df = derivative(f, wrt, direction);
                if df.is_zero() {
                    continue;
                }
                terms.push(FormExpr::product(factors.iter().enumerate().map(
                    |(j, g)| if i == j { df.clone() } else { g.clone() },
                )));
            }
            FormExpr::sum(terms)
        }
        FormExpr::Power(base, n) => {
            let db = derivative(base, wrt, direction);
            if db.is_zero() {
                return FormExpr::Constant(0.0);
            }
            FormExpr::product([
                FormExpr::Constant(f64::from(*n)),
                (**base).clone().powi(n - 1),
                db,
            ])
        }
        FormExpr::Dx(inner) => derivative(inner, wrt, direction).dx(),
        FormExpr::Integral(inner) => derivative(inner, wrt, direction).integrate(),
    }
}

/// Swaps test and trial symbols of a bilinear form.
pub fn transpose_form(form: &FormExpr) -> Result<FormExpr> {
    require_rank(form, 2)?;
    swap_arguments(form)
}

fn swap_arguments(form: &FormExpr) -> Result<FormExpr> {
    form.map_leaves(&mut |leaf| {
        Ok(match leaf {
            FormExpr::Test(s) => Some(FormExpr::Trial(*s)),
            FormExpr::Trial(s) => Some(FormExpr::Test(*s)),
            _ => None,
        })
    })
}

/// Replaces the trial symbol of a bilinear form by `value`.
pub fn action(form: &FormExpr, value: &CoefficientRef) -> Result<FormExpr> {
    let sig = require_rank(form, 2)?;
    space_check(sig.trial.expect("rank-2 form has a trial symbol"), value.space)?;
    form.map_leaves(&mut |leaf| {
        Ok(match leaf {
            FormExpr::Trial(_) => Some(FormExpr::Coefficient(value.clone())),
            _ => None,
        })
    })
}

/// Rebinds tape-variable coefficients according to `substitutions`.
/// Keys absent from the form are ignored.
pub fn replace(
    form: &FormExpr,
    substitutions: &BTreeMap<VariableId, CoefficientRef>,
) -> Result<FormExpr> {
    if substitutions.is_empty() {
        return Ok(form.clone());
    }
    form.map_leaves(&mut |leaf| match leaf {
        FormExpr::Coefficient(CoefficientRef {
            id: CoeffId::Var(id),
            space,
        }) => match substitutions.get(id) {
            Some(new) => {
                space_check(*space, new.space)?;
                Ok(Some(FormExpr::Coefficient(new.clone())))
            }
            None => Ok(None),
        },
        _ => Ok(None),
    })
}

/// Tape variables the form depends on; named parameters are excluded.
pub fn extract_dependencies(form: &FormExpr) -> BTreeSet<VariableId> {
    let mut out = BTreeSet::new();
    form.visit(&mut |e| {
        if let FormExpr::Coefficient(CoefficientRef {
            id: CoeffId::Var(id),
            ..
        }) = e
        {
            out.insert(id.clone());
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u_ref() -> CoefficientRef {
        CoefficientRef::var(VariableId::new("u", 0, 0), Space::P1)
    }

    fn v() -> FormExpr {
        FormExpr::test(Space::P1)
    }

    fn w() -> FormExpr {
        FormExpr::trial(Space::P1)
    }

    #[test]
    fn derivative_of_linear_term_is_the_term_in_the_direction() {
        let f = (u_ref().expr() * v()).integrate();
        let d = gateaux_derivative(&f, &u_ref(), &w()).unwrap();
        assert_eq!(d, (w() * v()).integrate());
    }

    #[test]
    fn power_rule() {
        let f = (u_ref().expr().powi(2) * v()).integrate();
        let d = gateaux_derivative(&f, &u_ref(), &w()).unwrap();
        assert_eq!(d.render(), "(integral (* 2.0 (coeff u:0:0 P1) (trial P1) (test P1)))");
    }

    #[test]
    fn derivative_without_dependence_keeps_rank() {
        let f = (w().dx() * v().dx()).integrate();
        let other = CoefficientRef::param("k", Space::P1);
        let rhs = (other.expr() * v()).integrate();
        let d = gateaux_derivative(&rhs, &u_ref(), &w()).unwrap();
        assert_eq!(d.rank().unwrap(), 2);
        assert!(gateaux_derivative(&f, &u_ref(), &w()).is_err());
    }

    #[test]
    fn derivative_space_mismatch() {
        let f = (u_ref().expr() * v()).integrate();
        let bad = CoefficientRef::param("a", Space::REAL);
        assert!(matches!(
            gateaux_derivative(&f, &u_ref(), &bad.expr()),
            Err(Error::SpaceMismatch { .. })
        ));
        assert!(matches!(
            gateaux_derivative(&f, &u_ref(), &FormExpr::constant(1.0)),
            Err(Error::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn transpose_is_an_involution() {
        let f = (w().dx() * v() + u_ref().expr() * w() * v().dx()).integrate();
        let t = transpose_form(&f).unwrap();
        assert_ne!(t, f);
        assert_eq!(transpose_form(&t).unwrap(), f);
        let linear = (u_ref().expr() * v()).integrate();
        assert!(matches!(
            transpose_form(&linear),
            Err(Error::RankMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn action_replaces_trial() {
        let mass = (w() * v()).integrate();
        let a = action(&mass, &u_ref()).unwrap();
        assert_eq!(a, (u_ref().expr() * v()).integrate());
        assert!(action(&a, &u_ref()).is_err());
        let real = CoefficientRef::param("a", Space::REAL);
        assert!(matches!(action(&mass, &real), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn replace_with_empty_map_is_identity_and_idempotent() {
        let f = (u_ref().expr() * u_ref().expr().dx() * v()).integrate();
        assert_eq!(replace(&f, &BTreeMap::new()).unwrap(), f);
        let mut map = BTreeMap::new();
        map.insert(
            VariableId::new("u", 0, 0),
            CoefficientRef::var(VariableId::new("u", 3, 0), Space::P1),
        );
        let once = replace(&f, &map).unwrap();
        assert_eq!(replace(&once, &map).unwrap(), once);
        assert_eq!(
            extract_dependencies(&once).into_iter().collect::<Vec<_>>(),
            vec![VariableId::new("u", 3, 0)]
        );
        map.insert(
            VariableId::new("u", 3, 0),
            CoefficientRef::param("a", Space::REAL),
        );
        assert!(replace(&once, &map).is_err());
    }

    #[test]
    fn dependencies_exclude_parameters() {
        let k = CoefficientRef::param("k", Space::P1);
        let f = (u_ref().expr() * v()).integrate();
        assert_eq!(extract_dependencies(&f).len(), 1);
        let stiff = (k.expr() * w().dx() * v().dx()).integrate();
        assert!(extract_dependencies(&stiff).is_empty());
    }
}
