//! Powell's derivative-free direction-set search, maximizing inside a box.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowellParams {
    /// Maximum number of full cycles through the direction set.
    pub max_iters: usize,
    /// Relative improvement below which a cycle ends the search.
    pub ftol: f64,
    /// Absolute tolerance on the line parameter.
    pub line_tol: f64,
    /// Objective evaluations allowed per line search.
    pub line_evals: usize,
}

impl Default for PowellParams {
    fn default() -> Self {
        PowellParams {
            max_iters: 20,
            ftol: 1e-6,
            line_tol: 1e-4,
            line_evals: 40,
        }
    }
}

/// One accepted state of the search.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub cycle: usize,
    pub evaluations: usize,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowellTrace {
    pub entries: Vec<TraceEntry>,
    /// Direction set after the last cycle, one row per direction.
    pub directions: Vec<Vec<f64>>,
}

impl PowellTrace {
    /// Columns `iteration,theta1..thetaN,omega`.
    pub fn to_csv(&self) -> String {
        let dims = self.entries.first().map_or(0, |e| e.x.len());
        let mut out = String::from("iteration");
        for i in 1..=dims {
            out.push_str(&format!(",theta{i}"));
        }
        out.push_str(",omega\n");
        for (k, e) in self.entries.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in &e.x {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", e.value));
        }
        out
    }

    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].value >= w[0].value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub cycles: usize,
    pub evaluations: usize,
    pub trace: PowellTrace,
}

/// Maximizes `objective` over the box `[lower, upper]` starting at `x0`.
/// Coordinates with `free[i] == false` stay at their starting value.
pub fn powell_search<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    free: &[bool],
    params: &PowellParams,
) -> Result<PowellResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    if lower.len() != n || upper.len() != n || free.len() != n {
        return Err(Error::config("powell bounds and mask must match the start point"));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
        return Err(Error::config("powell lower bound exceeds upper bound"));
    }
    let evals = Cell::new(0usize);
    // minimize f = −objective
    let mut eval = |x: &[f64]| -> Result<f64> {
        evals.set(evals.get() + 1);
        let v = objective(x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective at {x:?}")));
        }
        Ok(-v)
    };

    let mut x: Vec<f64> = x0.iter().zip(lower.iter().zip(upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect();
    let mut fx = eval(&x)?;
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .filter(|&i| free[i])
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = 1.0;
            d
        })
        .collect();
    let mut trace = PowellTrace::default();
    trace.entries.push(TraceEntry {
        cycle: 0,
        evaluations: 1,
        x: x.clone(),
        value: -fx,
    });

    let mut cycles = 0;
    while cycles < params.max_iters && !dirs.is_empty() {
        cycles += 1;
        let start = x.clone();
        let f_start = fx;
        let mut biggest = 0usize;
        let mut biggest_drop = 0.0f64;
        for (k, d) in dirs.iter().enumerate() {
            let before = fx;
            line_minimize(&mut eval, &mut x, &mut fx, d, lower, upper, params)?;
            if before - fx > biggest_drop {
                biggest_drop = before - fx;
                biggest = k;
            }
        }

        let shift: Vec<f64> = x.iter().zip(&start).map(|(a, b)| a - b).collect();
        if shift.iter().any(|&v| v != 0.0) {
            let extrap: Vec<f64> = (0..n).map(|i| (2.0 * x[i] - start[i]).clamp(lower[i], upper[i])).collect();
            let fe = eval(&extrap)?;
            if fe < f_start {
                let t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - biggest_drop).powi(2)
                    - biggest_drop * (f_start - fe).powi(2);
                if t < 0.0 {
                    line_minimize(&mut eval, &mut x, &mut fx, &shift, lower, upper, params)?;
                    dirs.remove(biggest);
                    dirs.push(shift);
                }
            }
        }

        trace.entries.push(TraceEntry {
            cycle: cycles,
            evaluations: evals.get(),
            x: x.clone(),
            value: -fx,
        });
        if 2.0 * (f_start - fx).abs() <= params.ftol * (f_start.abs() + fx.abs()) + 1e-25 {
            break;
        }
    }
    trace.directions = dirs;
    Ok(PowellResult {
        x,
        value: -fx,
        cycles,
        evaluations: evals.get(),
        trace,
    })
}

/// Brent minimization of `f(x + t·d)` over the `t` range keeping the point in
/// the box. `x` and `fx` move only on strict improvement.
fn line_minimize<F>(
    eval: &mut F,
    x: &mut [f64],
    fx: &mut f64,
    d: &[f64],
    lower: &[f64],
    upper: &[f64],
    params: &PowellParams,
) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..x.len() {
        if d[i] > 0.0 {
            lo = lo.max((lower[i] - x[i]) / d[i]);
            hi = hi.min((upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            lo = lo.max((upper[i] - x[i]) / d[i]);
            hi = hi.min((lower[i] - x[i]) / d[i]);
        }
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Ok(());
    }
    let origin = x.to_vec();
    let point = |t: f64| -> Vec<f64> {
        origin
            .iter()
            .zip(d)
            .zip(lower.iter().zip(upper))
            .map(|((o, di), (l, u))| (o + t * di).clamp(*l, *u))
            .collect()
    };
    let (t, ft) = brent_bounded(|t| eval(&point(t)), lo, hi, params.line_tol, params.line_evals)?;
    if ft < *fx {
        x.copy_from_slice(&point(t));
        *fx = ft;
    }
    Ok(())
}

/// Bounded Brent minimization (golden section with parabolic steps).
pub fn brent_bounded<F>(mut f: F, a: f64, b: f64, xtol: f64, max_evals: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let sqrt_eps = f64::EPSILON.sqrt();
    let (mut a, mut b) = (a, b);
    let mut v = a + GOLDEN * (b - a);
    let mut w = v;
    let mut x = v;
    let (mut d, mut e) = (0.0f64, 0.0f64);
    let mut fx = f(x)?;
    let (mut fv, mut fw) = (fx, fx);
    let mut evals = 1;
    while evals < max_evals {
        let xm = 0.5 * (a + b);
        let tol1 = sqrt_eps * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let r = e;
            e = d;
            if p.abs() < (0.5 * q * r).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u)?;
        evals += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok((x, fx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_parabola_minimum() {
        let (t, ft) = brent_bounded(|t| Ok((t - 0.3) * (t - 0.3) + 2.0), -1.0, 4.0, 1e-8, 100).unwrap();
        assert!((t - 0.3).abs() < 1e-6);
        assert!((ft - 2.0).abs() < 1e-10);
        let (t, _) = brent_bounded(|t| Ok(t), 1.0, 2.0, 1e-8, 100).unwrap();
        assert!((t - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separable_quadratic_converges() {
        let f = |x: &[f64]| Ok(-x.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>());
        let r = powell_search(f, &[0.0; 7], &[-10.0; 7], &[10.0; 7], &[true; 7], &PowellParams::default()).unwrap();
        assert!(r.cycles <= 20);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-3), "{:?}", r.x);
        assert!(r.trace.is_monotone());
    }

    #[test]
    fn constant_objective_stops_after_one_cycle() {
        let x0 = [0.5, 2.0, 1.0];
        let r = powell_search(|_| Ok(3.0), &x0, &[0.0; 3], &[5.0; 3], &[true; 3], &PowellParams::default()).unwrap();
        assert_eq!(r.cycles, 1);
        assert_eq!(r.x, x0.to_vec());
        assert_eq!(r.value, 3.0);
    }

    #[test]
    fn bounds_and_mask_are_respected() {
        let f = |x: &[f64]| Ok(-(x[0] - 5.0).powi(2) - (x[1] + 3.0).powi(2));
        let r = powell_search(f, &[0.0, 0.0], &[0.0, 0.0], &[2.0, 2.0], &[true, false], &PowellParams::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-3);
        assert_eq!(r.x[1], 0.0);
    }

    #[test]
    fn non_finite_objective_reports_point() {
        let err = powell_search(|_| Ok(f64::NAN), &[1.0], &[0.0], &[2.0], &[true], &PowellParams::default()).unwrap_err();
        assert!(err.to_string().contains("[1.0]"), "{err}");
    }

    /// Cyclic coordinate descent with golden-section line searches, run to
    /// convergence, as a second opinion on the optimum.
    fn coordinate_descent(f: impl Fn(&[f64]) -> f64, x0: &[f64], lo: f64, hi: f64) -> f64 {
        let mut x = x0.to_vec();
        for _ in 0..5000 {
            let before = f(&x);
            for i in 0..x.len() {
                let (mut a, mut b) = (lo, hi);
                let g = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..100 {
                    let c = b - g * (b - a);
                    let d = a + g * (b - a);
                    let mut xc = x.clone();
                    xc[i] = c;
                    let mut xd = x.clone();
                    xd[i] = d;
                    if f(&xc) < f(&xd) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                x[i] = 0.5 * (a + b);
            }
            if (before - f(&x)).abs() < 1e-15 {
                break;
            }
        }
        f(&x)
    }

    #[test]
    fn coupled_objective_matches_coordinate_descent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let c: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = move |x: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..7 {
                s += (x[i] - c[i]).powi(2);
            }
            for i in 0..6 {
                s += 2.0 * (x[i + 1] - x[i] * x[i] / 4.0).powi(2);
            }
            s
        };
        let reference = coordinate_descent(&g, &[0.0; 7], -5.0, 5.0);
        let params = PowellParams {
            max_iters: 200,
            ftol: 1e-12,
            line_tol: 1e-8,
            line_evals: 100,
        };
        let r = powell_search(|x| Ok(-g(x)), &[0.0; 7], &[-5.0; 7], &[5.0; 7], &[true; 7], &params).unwrap();
        assert!((-r.value - reference).abs() < 1e-3, "{} vs {reference}", -r.value);
    }

    #[test]
    fn trace_csv_layout() {
        let f = |x: &[f64]| Ok(-(x[0] - 1.0).powi(2));
        let r = powell_search(f, &[0.0], &[-2.0], &[2.0], &[true], &PowellParams::default()).unwrap();
        let csv = r.trace.to_csv();
        assert!(csv.starts_with("iteration,theta1,omega\n0,0,-1\n"), "{csv}");
        assert_eq!(csv.lines().count(), r.trace.entries.len() + 1);
    }
}
