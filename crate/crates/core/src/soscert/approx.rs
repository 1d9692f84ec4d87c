//! Polynomial approximations of evaluator-backed relations with validated
//! error bounds, and the band pieces built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Polynomial2;
use crate::relation::{Evaluator, Interval, ScalarRelation, SemialgebraicPiece};

/// Dense-grid safety factor applied to the observed maximum error.
const EPS_FACTOR: f64 = 1.12;
/// Inflation applied once when the first bound fails validation.
const EPS_RETRY_FACTOR: f64 = 1.5;
/// Upper limit on validation grid size.
const MAX_GRID: usize = 50_000_000;
const DENSE_GRID: usize = 20_001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproxMethod {
    Taylor,
    Chebyshev,
    Constant,
}

impl std::str::FromStr for ApproxMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taylor" => Ok(Self::Taylor),
            "chebyshev" => Ok(Self::Chebyshev),
            "constant" => Ok(Self::Constant),
            other => Err(Error::Invalid(format!("unknown approximation method '{other}'"))),
        }
    }
}

/// `|phi(x) - p(x)| <= eps` on `interval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyApprox {
    pub interval: Interval,
    pub p: Polynomial2,
    pub eps: f64,
    pub method: ApproxMethod,
}

fn lipschitz(rel: &ScalarRelation) -> Result<f64> {
    rel.lipschitz
        .filter(|l| l.is_finite() && *l >= 0.0)
        .ok_or_else(|| Error::Precondition(format!("relation '{}' declares no Lipschitz bound", rel.name)))
}

fn evaluator(rel: &ScalarRelation) -> Result<Evaluator> {
    rel.evaluator
        .ok_or_else(|| Error::Precondition(format!("relation '{}' has no evaluator", rel.name)))
}

/// Bound on `|p'|` over the interval, from coefficients after centering.
fn derivative_bound(p: &Polynomial2, iv: Interval) -> f64 {
    p.d_dx()
        .affine_substitute(iv.mid(), 0.5 * iv.width(), 0.0, 1.0)
        .abs_bound_on_interval(-1.0, 1.0)
}

fn grid_max_error(phi: &Evaluator, p: &Polynomial2, iv: Interval, n: usize) -> f64 {
    use rayon::prelude::*;
    let h = iv.width() / (n - 1) as f64;
    (0..n)
        .into_par_iter()
        .with_min_len(4096)
        .map(|k| {
            let x = if k + 1 == n { iv.hi } else { iv.lo + h * k as f64 };
            (phi.eval(x) - p.eval(x, 0.0)).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// Checks `max_grid |phi - p| + (L_f + L_p) h / 2 <= eps` with the grid
/// fine enough that the padding term is at most `eps / 10`.
pub fn validate_error_bound(rel: &ScalarRelation, p: &Polynomial2, interval: Interval, eps: f64) -> Result<bool> {
    let phi = evaluator(rel)?;
    let lf = lipschitz(rel)?;
    if p.depends_on_y() {
        return Err(Error::Invalid("approximant must depend on x only".into()));
    }
    if !(eps > 0.0) || interval.is_empty() {
        return Ok(false);
    }
    let l = lf + derivative_bound(p, interval);
    let w = interval.width();
    let n = if w == 0.0 || l == 0.0 {
        2
    } else {
        let h_max = 2.0 * (eps / 10.0) / l;
        let n = (w / h_max).ceil() + 1.0;
        if n > MAX_GRID as f64 {
            return Ok(false);
        }
        (n as usize).max(2)
    };
    let h = w / (n - 1) as f64;
    Ok(grid_max_error(&phi, p, interval, n) + l * h / 2.0 <= eps)
}

/// Taylor coefficients `f^(k)(c) / k!` of tanh at `c`, `k = 0..=degree`.
fn tanh_taylor(c: f64, degree: u32) -> Vec<f64> {
    // d^k/dx^k tanh = P_k(t) with t = tanh x, P_{k+1} = P_k'(t) (1 - t^2).
    let t = c.tanh();
    let mut pk = vec![0.0, 1.0];
    let mut out = Vec::with_capacity(degree as usize + 1);
    let mut fact = 1.0;
    for k in 0..=degree {
        if k > 0 {
            fact *= k as f64;
        }
        let val = pk.iter().rev().fold(0.0, |acc, a| acc * t + a);
        out.push(val / fact);
        let d: Vec<f64> = pk.iter().enumerate().skip(1).map(|(i, a)| i as f64 * a).collect();
        let mut next = vec![0.0; d.len() + 2];
        for (i, a) in d.iter().enumerate() {
            next[i] += a;
            next[i + 2] -= a;
        }
        pk = next;
    }
    out
}

fn shifted_power_series(coeffs: &[f64], c: f64) -> Polynomial2 {
    let shift = Polynomial2::from_x_coeffs(&[-c, 1.0]);
    let mut p = Polynomial2::zero();
    for (k, a) in coeffs.iter().enumerate() {
        if *a != 0.0 {
            p = &p + &shift.pow(k as u32).scale(*a);
        }
    }
    p
}

/// Interpolant at the `degree + 1` Chebyshev points of the interval.
fn chebyshev_interpolant(phi: &Evaluator, iv: Interval, degree: u32) -> Polynomial2 {
    let n = degree as usize + 1;
    let nodes: Vec<f64> = (0..n)
        .map(|k| (std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos())
        .collect();
    let values: Vec<f64> = nodes.iter().map(|u| phi.eval(iv.mid() + 0.5 * iv.width() * u)).collect();
    let coeffs: Vec<f64> = (0..n)
        .map(|j| {
            let s: f64 = (0..n)
                .map(|k| values[k] * (j as f64 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos())
                .sum();
            let c = 2.0 * s / n as f64;
            if j == 0 {
                0.5 * c
            } else {
                c
            }
        })
        .collect();
    let u = Polynomial2::from_x_coeffs(&[-iv.mid() * 2.0 / iv.width(), 2.0 / iv.width()]);
    let mut t_prev = Polynomial2::constant(1.0);
    let mut t_cur = u.clone();
    let mut p = t_prev.scale(coeffs[0]);
    for (j, cj) in coeffs.iter().enumerate().skip(1) {
        if j > 1 {
            let next = &(&u * &t_cur).scale(2.0) - &t_prev;
            t_prev = std::mem::replace(&mut t_cur, next);
        }
        p = &p + &t_cur.scale(*cj);
    }
    p
}

/// Builds `p` by `method` and attaches an error bound that passes
/// [`validate_error_bound`].
pub fn approx_with_bound(rel: &ScalarRelation, interval: Interval, degree: u32, method: ApproxMethod) -> Result<PolyApprox> {
    let phi = evaluator(rel)?;
    if interval.is_empty() || !interval.lo.is_finite() || !interval.hi.is_finite() {
        return Err(Error::Precondition(format!("bad approximation interval {interval:?}")));
    }
    let p = match method {
        ApproxMethod::Taylor => match phi {
            Evaluator::Tanh => shifted_power_series(&tanh_taylor(interval.mid(), degree), interval.mid()),
            _ => {
                return Err(Error::Precondition(format!(
                    "taylor expansion is not available for '{}'",
                    rel.name
                )))
            }
        },
        ApproxMethod::Chebyshev => chebyshev_interpolant(&phi, interval, degree),
        ApproxMethod::Constant => {
            let n = DENSE_GRID;
            let (lo, hi) = (0..n)
                .map(|k| phi.eval(interval.lo + interval.width() * k as f64 / (n - 1) as f64))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            Polynomial2::constant(0.5 * (lo + hi))
        }
    };
    let observed = grid_max_error(&phi, &p, interval, DENSE_GRID);
    // keeps the validation grid at a manageable size for near-exact fits
    let floor = 1e-6 * interval.width() * (lipschitz(rel)? + derivative_bound(&p, interval));
    let mut eps = EPS_FACTOR * observed.max(floor);
    for attempt in 0..2 {
        if validate_error_bound(rel, &p, interval, eps)? {
            return Ok(PolyApprox {
                interval,
                p,
                eps,
                method,
            });
        }
        if attempt == 0 {
            eps *= EPS_RETRY_FACTOR;
        }
    }
    Err(Error::Validation(format!(
        "could not validate an error bound for {method:?} on [{}, {}] (last eps {eps})",
        interval.lo, interval.hi
    )))
}

/// One band piece `{x in [a, b], |y - p(x)| <= eps}` per approximation.
pub fn build_relaxed_pieces(approxes: &[PolyApprox]) -> Result<Vec<SemialgebraicPiece>> {
    let y = Polynomial2::y();
    approxes
        .iter()
        .map(|a| {
            if !(a.eps >= 0.0) {
                return Err(Error::Precondition(format!("negative error bound {}", a.eps)));
            }
            let e = Polynomial2::constant(a.eps);
            let lower = &(&y - &a.p) + &e;
            let upper = &(&a.p + &e) - &y;
            let piece = SemialgebraicPiece {
                label: format!("band[{}, {}]", a.interval.lo, a.interval.hi),
                constraints: vec![a.interval.quadratic_indicator(), lower, upper],
                interval: Some(a.interval),
                graph: Some(a.p.clone()),
            };
            piece.validate()?;
            Ok(piece)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh() -> ScalarRelation {
        ScalarRelation::tanh(20.0)
    }

    #[test]
    fn taylor_at_origin_matches_series() {
        let a = approx_with_bound(&tanh(), Interval::new(-1.0, 1.0), 7, ApproxMethod::Taylor).unwrap();
        let want = [0.0, 1.0, 0.0, -1.0 / 3.0, 0.0, 2.0 / 15.0, 0.0, -17.0 / 315.0];
        for (k, w) in want.iter().enumerate() {
            assert!((a.p.coeff((k as u32, 0)) - w).abs() < 1e-14, "x^{k}");
        }
        // the series error peaks at the endpoints
        let err = (1f64.tanh() - a.p.eval(1.0, 0.0)).abs();
        assert!(a.eps >= err && a.eps < 1.2 * err, "eps {} vs {err}", a.eps);
    }

    #[test]
    fn taylor_off_center_agrees_with_function() {
        let iv = Interval::new(0.5, 1.5);
        let a = approx_with_bound(&tanh(), iv, 7, ApproxMethod::Taylor).unwrap();
        assert!((a.p.eval(1.0, 0.0) - 1f64.tanh()).abs() < 1e-14);
        assert!(a.eps < 1e-4);
    }

    #[test]
    fn constant_on_saturated_tail() {
        let a = approx_with_bound(&tanh(), Interval::new(5.0, 20.0), 0, ApproxMethod::Constant).unwrap();
        let half_range = 0.5 * (20f64.tanh() - 5f64.tanh());
        assert!(a.eps >= half_range);
        assert!(a.eps < 1.2 * half_range);
        assert_eq!(a.p.degree(), 0);
    }

    #[test]
    fn chebyshev_cubic() {
        let iv = Interval::new(-5.0, -1.0);
        let a = approx_with_bound(&tanh(), iv, 3, ApproxMethod::Chebyshev).unwrap();
        assert!(a.p.degree() <= 3);
        let grid_max = (0..=100_000)
            .map(|k| {
                let x = -5.0 + 4.0 * k as f64 / 100_000.0;
                (x.tanh() - a.p.eval(x, 0.0)).abs()
            })
            .fold(0.0, f64::max);
        assert!(a.eps >= grid_max);
        assert!(a.eps < 0.05);
    }

    #[test]
    fn chebyshev_reproduces_polynomials() {
        // sat is linear on [-0.5, 0.5], so the interpolant is exact.
        let sat = ScalarRelation::sat(1.0, 5.0);
        let a = approx_with_bound(&sat, Interval::new(-0.5, 0.5), 4, ApproxMethod::Chebyshev).unwrap();
        assert!((a.p.coeff((1, 0)) - 1.0).abs() < 1e-12);
        assert!(a.p.coeff((0, 0)).abs() < 1e-12);
    }

    #[test]
    fn taylor_requires_smooth_evaluator() {
        let sat = ScalarRelation::sat(1.0, 5.0);
        assert!(approx_with_bound(&sat, Interval::new(-0.5, 0.5), 3, ApproxMethod::Taylor).is_err());
    }

    #[test]
    fn validation_examples() {
        let t = tanh();
        assert!(validate_error_bound(&t, &Polynomial2::x(), Interval::new(-0.1, 0.1), 1e-3).unwrap());
        assert!(!validate_error_bound(&t, &Polynomial2::zero(), Interval::new(0.0, 1.0), 0.1).unwrap());
        // eps equal to the attained maximum leaves no room for padding
        let exact = 0.1 - 0.1f64.tanh();
        assert!(!validate_error_bound(&t, &Polynomial2::x(), Interval::new(-0.1, 0.1), exact).unwrap());
        assert!(!validate_error_bound(&t, &Polynomial2::x(), Interval::new(-0.1, 0.1), 0.0).unwrap());
    }

    #[test]
    fn tanh_partition_gives_five_bands() {
        let t = tanh();
        let spec = [
            (-20.0, -5.0, 0, ApproxMethod::Constant),
            (-5.0, -1.0, 3, ApproxMethod::Chebyshev),
            (-1.0, 1.0, 7, ApproxMethod::Taylor),
            (1.0, 5.0, 3, ApproxMethod::Chebyshev),
            (5.0, 20.0, 0, ApproxMethod::Constant),
        ];
        let approxes: Vec<_> = spec
            .iter()
            .map(|&(a, b, d, m)| approx_with_bound(&t, Interval::new(a, b), d, m).unwrap())
            .collect();
        let pieces = build_relaxed_pieces(&approxes).unwrap();
        assert_eq!(pieces.len(), 5);
        // every exact graph point lies in the band covering it
        for k in 0..=40_000 {
            let x = -20.0 + 40.0 * k as f64 / 40_000.0;
            for p in pieces.iter().filter(|p| p.interval.unwrap().contains(x)) {
                assert!(p.min_constraint(x, x.tanh()) >= -1e-12, "x = {x} in {}", p.label);
            }
        }
    }

    #[test]
    fn zero_band_is_graph_segment() {
        let a = PolyApprox {
            interval: Interval::new(0.0, 1.0),
            p: Polynomial2::x(),
            eps: 0.0,
            method: ApproxMethod::Taylor,
        };
        let band = build_relaxed_pieces(&[a]).unwrap().remove(0);
        let exact = SemialgebraicPiece::graph_segment("g", Interval::new(0.0, 1.0), Polynomial2::x(), vec![]).unwrap();
        assert_eq!(band.constraints, exact.constraints);
    }

    #[test]
    fn wider_band_contains_narrower() {
        let mk = |eps| PolyApprox {
            interval: Interval::new(0.0, 1.0),
            p: Polynomial2::x(),
            eps,
            method: ApproxMethod::Taylor,
        };
        let pieces = build_relaxed_pieces(&[mk(0.1), mk(0.2)]).unwrap();
        for k in 0..=50 {
            for l in -30..=30 {
                let (x, y) = (k as f64 / 50.0, k as f64 / 50.0 + l as f64 / 200.0);
                if pieces[0].min_constraint(x, y) >= 0.0 {
                    assert!(pieces[1].min_constraint(x, y) >= 0.0);
                }
            }
        }
    }
}
