//! Adaptive Dormand–Prince 5(4) integration with PI step control, plus the
//! log-density augmentation used for continuous normalizing flows.
//!
//! Batches of trajectories are integrated as one flat state vector sharing
//! step sizes; the error norm is the maximum over all components, so every
//! trajectory meets the per-component tolerance.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_ATOL: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-5;
/// Central-difference step for [`DivergenceMode::ExactFiniteDifference`].
pub const FD_EPS: f64 = 1e-4;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const PI_ALPHA: f64 = 0.7 / 5.0;
const PI_BETA: f64 = 0.4 / 5.0;

// Butcher tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th minus embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            atol: DEFAULT_ATOL,
            rtol: DEFAULT_RTOL,
            max_steps: 200_000,
        }
    }
}

impl OdeOptions {
    pub fn with_tolerances(atol: f64, rtol: f64) -> Self {
        OdeOptions {
            atol,
            rtol,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.atol > 0.0 && self.rtol >= 0.0 && self.atol.is_finite() && self.rtol.is_finite())
        {
            return Err(invalid(format!(
                "tolerances must be positive and finite (atol {}, rtol {})",
                self.atol, self.rtol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub t_end: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Scaled error estimate of every accepted step.
    pub error_trace: Vec<f64>,
}

fn check_finite(k: &[f64], t: f64) -> Result<()> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("vector field output at t = {t}")));
    }
    Ok(())
}

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], opts: &OdeOptions) -> f64 {
    err.iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| e.abs() / (opts.atol + opts.rtol * a.abs().max(b.abs())))
        .fold(0.0, f64::max)
}

fn max_scaled(v: &[f64], y: &[f64], opts: &OdeOptions) -> f64 {
    v.iter()
        .zip(y)
        .map(|(v, y)| v.abs() / (opts.atol + opts.rtol * y.abs()))
        .fold(0.0, f64::max)
}

/// Integrates `dy/dt = f(t, y)` from `t_start` to `t_end` (either direction).
///
/// `f(t, y, dy)` writes the derivative into `dy`.
pub fn integrate<F>(
    mut f: F,
    t_start: f64,
    t_end: f64,
    y0: &[f64],
    opts: &OdeOptions,
) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    opts.validate()?;
    if !(t_start.is_finite() && t_end.is_finite()) || t_start == t_end {
        return Err(invalid(format!(
            "integration needs distinct finite endpoints, got {t_start} -> {t_end}"
        )));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let n = y0.len();
    let dir = (t_end - t_start).signum();
    let span = (t_end - t_start).abs();
    let mut sol = OdeSolution {
        t_end: t_start,
        y: y0.to_vec(),
        accepted: 0,
        rejected: 0,
        evaluations: 0,
        error_trace: Vec::new(),
    };
    if n == 0 {
        sol.t_end = t_end;
        return Ok(sol);
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];

    let mut t = t_start;
    let mut y = y0.to_vec();
    f(t, &y, &mut k1)?;
    sol.evaluations += 1;
    check_finite(&k1, t)?;

    // Initial step: Hairer, Norsett & Wanner, Solving ODEs I, II.4.
    let mut h = {
        let d0 = max_scaled(&y, &y, opts);
        let d1 = max_scaled(&k1, &y, opts);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let h0 = h0.min(span);
        for i in 0..n {
            ytmp[i] = y[i] + dir * h0 * k1[i];
        }
        f(t + dir * h0, &ytmp, &mut k2)?;
        sol.evaluations += 1;
        check_finite(&k2, t + dir * h0)?;
        for i in 0..n {
            err[i] = k2[i] - k1[i];
        }
        let d2 = max_scaled(&err, &y, opts) / h0;
        let dmax = d1.max(d2);
        let h1 = if dmax <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dmax).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span)
    };

    let mut err_prev: f64 = 1.0;
    let mut just_rejected = false;
    let mut steps = 0usize;
    loop {
        if steps >= opts.max_steps {
            return Err(Error::TooManySteps {
                t,
                max_steps: opts.max_steps,
            });
        }
        steps += 1;
        let remaining = (t_end - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepUnderflow {
                t,
                h,
                steps: sol.accepted + sol.rejected,
            });
        }
        let hs = dir * h;

        for i in 0..n {
            ytmp[i] = y[i] + hs * A21 * k1[i];
        }
        f(t + C2 * hs, &ytmp, &mut k2)?;
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hs, &ytmp, &mut k3)?;
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hs, &ytmp, &mut k4)?;
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hs, &ytmp, &mut k5)?;
        for i in 0..n {
            ytmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t_end } else { t + hs };
        f(t + hs, &ytmp, &mut k6)?;
        for i in 0..n {
            ynew[i] = y[i]
                + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t_new, &ynew, &mut k7)?;
        sol.evaluations += 6;
        for k in [&k2, &k3, &k4, &k5, &k6, &k7] {
            check_finite(k, t)?;
        }
        for i in 0..n {
            err[i] = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = error_norm(&err, &y, &ynew, opts);

        if e <= 1.0 {
            sol.accepted += 1;
            sol.error_trace.push(e);
            t = t_new;
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            if last {
                break;
            }
            let mut fac = if e == 0.0 {
                MAX_FACTOR
            } else {
                SAFETY * e.powf(-PI_ALPHA) * err_prev.powf(PI_BETA)
            };
            fac = fac.clamp(MIN_FACTOR, MAX_FACTOR);
            if just_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            err_prev = e.max(1e-4);
            just_rejected = false;
        } else {
            sol.rejected += 1;
            let fac = if e.is_finite() {
                (SAFETY * e.powf(-0.2)).max(MIN_FACTOR)
            } else {
                MIN_FACTOR
            };
            h *= fac;
            just_rejected = true;
        }
    }
    sol.t_end = t;
    sol.y = y;
    Ok(sol)
}

/// A batched time-dependent vector field on `R^d`.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    /// Velocities for a batch of states, one row per state.
    fn velocity(&self, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Velocities together with their exact divergences.
    fn velocity_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        finite_difference_divergence(self, t, x, FD_EPS)
    }
}

/// Central-difference divergence, `sum_k (v_k(x + eps e_k) - v_k(x - eps e_k)) / 2 eps`.
pub fn finite_difference_divergence<D: Dynamics + ?Sized>(
    dynamics: &D,
    t: f64,
    x: ArrayView2<f64>,
    eps: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let v = dynamics.velocity(t, x)?;
    let mut div = Array1::zeros(x.nrows());
    let mut shifted = x.to_owned();
    for k in 0..x.ncols() {
        shifted.column_mut(k).mapv_inplace(|a| a + eps);
        let plus = dynamics.velocity(t, shifted.view())?;
        shifted.column_mut(k).assign(&x.column(k));
        shifted.column_mut(k).mapv_inplace(|a| a - eps);
        let minus = dynamics.velocity(t, shifted.view())?;
        shifted.column_mut(k).assign(&x.column(k));
        div += &((&plus.column(k) - &minus.column(k)) / (2.0 * eps));
    }
    Ok((v, div))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Jacobian diagonal from the model's own derivatives.
    ExactAutodiff,
    /// Central differences with step [`FD_EPS`].
    ExactFiniteDifference,
}

fn rows<'a>(flat: &'a [f64], n: usize, d: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((n, d), flat).expect("state layout")
}

fn rows_mut<'a>(flat: &'a mut [f64], n: usize, d: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((n, d), flat).expect("state layout")
}

fn check_batch<D: Dynamics + ?Sized>(dynamics: &D, x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != dynamics.dim() {
        return Err(Error::ShapeMismatch(format!(
            "dynamics act on dimension {}, batch has {} columns",
            dynamics.dim(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Transports a batch of points along the flow from `t_start` to `t_end`.
pub fn integrate_batch<D: Dynamics + ?Sized>(
    dynamics: &D,
    t_start: f64,
    t_end: f64,
    x0: ArrayView2<f64>,
    opts: &OdeOptions,
) -> Result<(Array2<f64>, OdeSolution)> {
    check_batch(dynamics, x0)?;
    let (n, d) = x0.dim();
    let y0: Vec<f64> = x0.iter().copied().collect();
    let sol = integrate(
        |t, y, dy| {
            let v = dynamics.velocity(t, rows(y, n, d))?;
            rows_mut(dy, n, d).assign(&v);
            Ok(())
        },
        t_start,
        t_end,
        &y0,
        opts,
    )?;
    let x = Array2::from_shape_vec((n, d), sol.y.clone()).expect("state layout");
    Ok((x, sol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogdetSolution {
    pub x: Array2<f64>,
    /// `-int_{t_start}^{t_end} div v dt` per trajectory, so that
    /// `log p_{t_end}(x_end) = log p_{t_start}(x_start) + delta_logp`.
    pub delta_logp: Array1<f64>,
    pub stats: OdeSolution,
}

/// Integrates the flow jointly with the negative divergence.
pub fn integrate_with_logdet<D: Dynamics + ?Sized>(
    dynamics: &D,
    t_start: f64,
    t_end: f64,
    x0: ArrayView2<f64>,
    mode: DivergenceMode,
    opts: &OdeOptions,
) -> Result<LogdetSolution> {
    check_batch(dynamics, x0)?;
    let (n, d) = x0.dim();
    let mut y0: Vec<f64> = x0.iter().copied().collect();
    y0.extend(std::iter::repeat(0.0).take(n));
    let stats = integrate(
        |t, y, dy| {
            let x = rows(&y[..n * d], n, d);
            let (v, div) = match mode {
                DivergenceMode::ExactAutodiff => dynamics.velocity_and_divergence(t, x)?,
                DivergenceMode::ExactFiniteDifference => {
                    finite_difference_divergence(dynamics, t, x, FD_EPS)?
                }
            };
            let (dx, dl) = dy.split_at_mut(n * d);
            rows_mut(dx, n, d).assign(&v);
            for (o, g) in dl.iter_mut().zip(div.iter()) {
                *o = -g;
            }
            Ok(())
        },
        t_start,
        t_end,
        &y0,
        opts,
    )?;
    let x = Array2::from_shape_vec((n, d), stats.y[..n * d].to_vec()).expect("state layout");
    let delta_logp = Array1::from(stats.y[n * d..].to_vec());
    Ok(LogdetSolution {
        x,
        delta_logp,
        stats,
    })
}
