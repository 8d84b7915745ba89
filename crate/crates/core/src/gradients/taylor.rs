use std::fmt::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaylorMode {
    /// `|J(m + hd) - J(m)|` and `|J(m + hd) - J(m) - h g·d|`: orders 1 and 2.
    OneSided,
    /// `|J(m + hd) - J(m - hd)|` and `|J(m + hd) - J(m - hd) - 2h g·d|`:
    /// orders 1 and 3.
    Central,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorReport {
    pub mode: TaylorMode,
    pub h: Vec<f64>,
    pub remainder0: Vec<f64>,
    pub remainder1: Vec<f64>,
    /// `log2(R_k / R_{k+1})`; `None` where a remainder is exactly zero.
    pub order0: Vec<Option<f64>>,
    pub order1: Vec<Option<f64>>,
}

fn orders(r: &[f64]) -> Vec<Option<f64>> {
    r.windows(2)
        .map(|w| (w[0] > 0.0 && w[1] > 0.0).then(|| (w[0] / w[1]).log2()))
        .collect()
}

impl TaylorReport {
    /// Observed orders from the two finest step sizes.
    pub fn finest_orders(&self) -> (Option<f64>, Option<f64>) {
        (
            self.order0.last().copied().flatten(),
            self.order1.last().copied().flatten(),
        )
    }

    /// Corrected order expected for the mode.
    pub fn expected_order(&self) -> f64 {
        match self.mode {
            TaylorMode::OneSided => 2.0,
            TaylorMode::Central => 3.0,
        }
    }

    /// `h,remainder0,order0,remainder1,order1`, one row per step size;
    /// orders are empty on the first row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,remainder0,order0,remainder1,order1\n");
        let fmt = |o: Option<f64>| o.map(|v| format!("{v:.16e}")).unwrap_or_default();
        for k in 0..self.h.len() {
            let (o0, o1) = if k == 0 {
                (None, None)
            } else {
                (self.order0[k - 1], self.order1[k - 1])
            };
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{},{:.16e},{}",
                self.h[k],
                self.remainder0[k],
                fmt(o0),
                self.remainder1[k],
                fmt(o1)
            );
        }
        out
    }
}

/// Uniform `[0, 1)` entries from a seeded ChaCha8 stream.
pub fn random_direction(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_iterator(n, (0..n).map(|_| rng.gen::<f64>()))
}

/// Taylor remainder test of `gradient` for `j_hat` at `m0` along
/// `direction`, with step sizes `h0, h0/2, ...` (`levels` of them).
pub fn taylor_test(
    mut j_hat: impl FnMut(&DVector<f64>) -> Result<f64>,
    m0: &DVector<f64>,
    gradient: &DVector<f64>,
    direction: &DVector<f64>,
    h0: f64,
    levels: usize,
    mode: TaylorMode,
) -> Result<TaylorReport> {
    if levels < 3 {
        return Err(Error::InvalidArgument(format!(
            "a Taylor test needs at least 3 levels, got {levels}"
        )));
    }
    if m0.len() != gradient.len() || m0.len() != direction.len() {
        return Err(Error::DimensionMismatch {
            expected: m0.len(),
            found: direction.len().min(gradient.len()),
        });
    }
    if !(h0 > 0.0 && h0.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad initial step {h0}")));
    }
    let mut eval = |m: &DVector<f64>| -> Result<f64> {
        let v = j_hat(m)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite)
        }
    };
    let slope = gradient.dot(direction);
    let j0 = match mode {
        TaylorMode::OneSided => eval(m0)?,
        TaylorMode::Central => 0.0,
    };
    let mut report = TaylorReport {
        mode,
        h: Vec::with_capacity(levels),
        remainder0: Vec::with_capacity(levels),
        remainder1: Vec::with_capacity(levels),
        order0: Vec::new(),
        order1: Vec::new(),
    };
    let mut h = h0;
    for _ in 0..levels {
        let plus = eval(&(m0 + h * direction))?;
        let (diff, linear) = match mode {
            TaylorMode::OneSided => (plus - j0, h * slope),
            TaylorMode::Central => (plus - eval(&(m0 - h * direction))?, 2.0 * h * slope),
        };
        report.h.push(h);
        report.remainder0.push(diff.abs());
        report.remainder1.push((diff - linear).abs());
        h *= 0.5;
    }
    report.order0 = orders(&report.remainder0);
    report.order1 = orders(&report.remainder1);
    Ok(report)
}
