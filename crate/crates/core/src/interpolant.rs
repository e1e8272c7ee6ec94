//! Interpolant schedules `x_t = alpha(t) x0 + sigma(t) x1` between data `x0`
//! (at t = 0) and Gaussian noise `x1` (at t = 1).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{invalid, Result};

/// Lower clamp on the endpoint loss weight.
pub const ENDPOINT_WEIGHT_MIN: f64 = 0.005;
/// Upper clamp on the endpoint loss weight.
pub const ENDPOINT_WEIGHT_MAX: f64 = 100.0;
/// Smallest time at which the endpoint vector field is evaluated.
pub const ENDPOINT_T_MIN: f64 = 1e-3;
/// Training times are drawn from `[T_EPS, 1 - T_EPS]`.
pub const T_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "trig", alias = "trigonometric")]
    Trigonometric,
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Trigonometric => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Trigonometric => (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn alpha_dot(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::Trigonometric => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn sigma_dot(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Trigonometric => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }

    /// `(alpha_dot * sigma - sigma_dot * alpha) / sigma`, unclamped.
    ///
    /// This is the factor multiplying the endpoint error in the velocity
    /// error; it reduces to `(alpha_dot sigma - alpha) / sigma` when
    /// `sigma_dot = 1` (linear schedule). Diverges as t -> 0.
    pub fn endpoint_coefficient_raw(self, t: f64) -> f64 {
        self.endpoint_gain(t) / self.sigma(t)
    }

    /// `alpha_dot * sigma - sigma_dot * alpha`.
    pub fn endpoint_gain(self, t: f64) -> f64 {
        self.alpha_dot(t) * self.sigma(t) - self.sigma_dot(t) * self.alpha(t)
    }

    /// Clamped endpoint loss weight `min(max(0.005, |c_t|), 100)`.
    pub fn endpoint_coefficient(self, t: f64) -> f64 {
        let raw = self.endpoint_coefficient_raw(t).abs();
        if raw.is_nan() {
            // sigma(0) = 0 gives -inf/0 style NaNs; the clamp saturates there.
            return ENDPOINT_WEIGHT_MAX;
        }
        raw.clamp(ENDPOINT_WEIGHT_MIN, ENDPOINT_WEIGHT_MAX)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolant time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `alpha(t) x0 + sigma(t) x1` for a single pair.
pub fn interpolate(
    schedule: Schedule,
    t: f64,
    x0: ArrayView1<f64>,
    x1: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    check_time(t)?;
    if x0.len() != x1.len() {
        return Err(crate::Error::ShapeMismatch(format!(
            "x0 has {} entries, x1 has {}",
            x0.len(),
            x1.len()
        )));
    }
    Ok(&x0 * schedule.alpha(t) + &x1 * schedule.sigma(t))
}

/// Row-wise interpolation with a per-row time.
pub fn interpolate_batch(
    schedule: Schedule,
    t: ArrayView1<f64>,
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if x0.dim() != x1.dim() || t.len() != x0.nrows() {
        return Err(crate::Error::ShapeMismatch(
            "interpolate_batch needs matching batch shapes".into(),
        ));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid(format!("interpolant time {bad} outside [0, 1]")));
    }
    let mut out = Array2::zeros(x0.dim());
    Zip::from(out.rows_mut())
        .and(x0.rows())
        .and(x1.rows())
        .and(&t)
        .for_each(|mut o, a, b, &t| {
            let (al, si) = (schedule.alpha(t), schedule.sigma(t));
            Zip::from(&mut o)
                .and(&a)
                .and(&b)
                .for_each(|o, &a, &b| *o = al * a + si * b);
        });
    Ok(out)
}

/// Vector field implied by an endpoint prediction:
/// `(sigma_dot x + (alpha_dot sigma - sigma_dot alpha) x0_hat) / sigma`.
pub fn endpoint_vector_field(
    schedule: Schedule,
    t: f64,
    x: ArrayView1<f64>,
    x0_hat: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if !(ENDPOINT_T_MIN..=1.0).contains(&t) {
        return Err(invalid(format!(
            "endpoint vector field needs t in [{ENDPOINT_T_MIN}, 1], got {t}"
        )));
    }
    let s = schedule.sigma(t);
    let gain = schedule.endpoint_gain(t);
    Ok((&x * schedule.sigma_dot(t) + &x0_hat * gain) / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn boundary_conditions() {
        for s in [Schedule::Linear, Schedule::Trigonometric] {
            assert!((s.alpha(0.0) - 1.0).abs() < 1e-15);
            assert!(s.sigma(0.0).abs() < 1e-15);
            assert!(s.alpha(1.0).abs() < 1e-15);
            assert!((s.sigma(1.0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn monotone_on_unit_interval() {
        for s in [Schedule::Linear, Schedule::Trigonometric] {
            let ts: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
            for w in ts.windows(2) {
                assert!(s.alpha(w[1]) < s.alpha(w[0]));
                assert!(s.sigma(w[1]) > s.sigma(w[0]));
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-4;
        for s in [Schedule::Linear, Schedule::Trigonometric] {
            for i in 1..100 {
                let t = i as f64 / 100.0;
                let da = (s.alpha(t + h) - s.alpha(t - h)) / (2.0 * h);
                let ds = (s.sigma(t + h) - s.sigma(t - h)) / (2.0 * h);
                assert!((da - s.alpha_dot(t)).abs() < 1e-6);
                assert!((ds - s.sigma_dot(t)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn interpolation_examples() {
        let x0 = array![2.0, 0.0];
        let x1 = array![0.0, 2.0];
        let at0 = interpolate(Schedule::Linear, 0.0, x0.view(), x1.view()).unwrap();
        assert_eq!(at0, x0);
        let mid = interpolate(Schedule::Linear, 0.5, x0.view(), x1.view()).unwrap();
        assert_eq!(mid, array![1.0, 1.0]);
        let trig = interpolate(
            Schedule::Trigonometric,
            0.5,
            array![1.0, 0.0].view(),
            array![0.0, 1.0].view(),
        )
        .unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((trig[0] - r).abs() < 1e-15 && (trig[1] - r).abs() < 1e-15);
        assert!(interpolate(Schedule::Linear, 1.5, x0.view(), x1.view()).is_err());
        assert!(interpolate(Schedule::Linear, -0.1, x0.view(), x1.view()).is_err());
    }

    #[test]
    fn endpoint_coefficient_examples() {
        // |(-1 * 0.5 - 0.5) / 0.5| = 2 and |(-1 * 1 - 0) / 1| = 1.
        assert!((Schedule::Linear.endpoint_coefficient(0.5) - 2.0).abs() < 1e-15);
        assert!((Schedule::Linear.endpoint_coefficient(1.0) - 1.0).abs() < 1e-15);
        for s in [Schedule::Linear, Schedule::Trigonometric] {
            assert_eq!(s.endpoint_coefficient(1e-9), ENDPOINT_WEIGHT_MAX);
            assert_eq!(s.endpoint_coefficient(0.0), ENDPOINT_WEIGHT_MAX);
        }
    }

    #[test]
    fn endpoint_field_at_t_one_is_linear_velocity() {
        let x1 = array![0.3, -1.2];
        let x0 = array![2.0, 0.5];
        let v = endpoint_vector_field(Schedule::Linear, 1.0, x1.view(), x0.view()).unwrap();
        let expected = &x1 - &x0;
        assert!((&v - &expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn endpoint_field_matches_conditional_expectation_for_gaussians() {
        // x0 ~ N(m, s0^2), x1 ~ N(0, 1) independent, in 1D. Then
        // E[x0 | x_t = x] and E[x1 | x_t = x] are linear in x, and the true
        // interpolant velocity is alpha_dot E[x0|x] + sigma_dot E[x1|x].
        let (m, s0) = (1.5, 0.7);
        for sched in [Schedule::Linear, Schedule::Trigonometric] {
            for &t in &[0.05, 0.3, 0.6, 0.95] {
                let (a, s) = (sched.alpha(t), sched.sigma(t));
                let var = a * a * s0 * s0 + s * s;
                for &x in &[-2.0, 0.1, 3.0] {
                    let e0 = m + a * s0 * s0 / var * (x - a * m);
                    let e1 = s / var * (x - a * m);
                    let truth = sched.alpha_dot(t) * e0 + sched.sigma_dot(t) * e1;
                    let v = endpoint_vector_field(sched, t, array![x].view(), array![e0].view())
                        .unwrap();
                    assert!((v[0] - truth).abs() < 1e-12, "t={t} x={x}");
                }
            }
        }
    }

    #[test]
    fn endpoint_field_guard_and_bound() {
        let x = array![1.0, -2.0];
        let xh = array![0.5, 0.5];
        assert!(endpoint_vector_field(Schedule::Linear, 5e-4, x.view(), xh.view()).is_err());
        let v = endpoint_vector_field(Schedule::Linear, 1e-3, x.view(), xh.view()).unwrap();
        let bound = (x.mapv(f64::abs).sum() + xh.mapv(f64::abs).sum()) / 1e-3;
        assert!(v.iter().all(|c| c.is_finite()));
        assert!(v.mapv(f64::abs).sum() <= bound);
    }

    proptest! {
        #[test]
        fn reconstruction_is_exact(
            t in 0.0f64..=1.0,
            a in prop::array::uniform2(-5.0f64..5.0),
            b in prop::array::uniform2(-5.0f64..5.0),
        ) {
            for s in [Schedule::Linear, Schedule::Trigonometric] {
                let x0 = Array1::from(a.to_vec());
                let x1 = Array1::from(b.to_vec());
                let xt = interpolate(s, t, x0.view(), x1.view()).unwrap();
                let batch = interpolate_batch(
                    s,
                    array![t].view(),
                    x0.view().insert_axis(ndarray::Axis(0)),
                    x1.view().insert_axis(ndarray::Axis(0)),
                ).unwrap();
                for k in 0..2 {
                    prop_assert_eq!(xt[k], s.alpha(t) * x0[k] + s.sigma(t) * x1[k]);
                    prop_assert_eq!(batch[[0, k]], xt[k]);
                }
            }
        }

        #[test]
        fn endpoint_objective_equivalence(
            t in 0.01f64..0.99,
            x0 in prop::array::uniform2(-3.0f64..3.0),
            x1 in prop::array::uniform2(-3.0f64..3.0),
            xh in prop::array::uniform2(-3.0f64..3.0),
            trig in any::<bool>(),
        ) {
            let s = if trig { Schedule::Trigonometric } else { Schedule::Linear };
            let x0 = Array1::from(x0.to_vec());
            let x1 = Array1::from(x1.to_vec());
            let xh = Array1::from(xh.to_vec());
            let xt = interpolate(s, t, x0.view(), x1.view()).unwrap();
            let v = endpoint_vector_field(s, t, xt.view(), xh.view()).unwrap();
            let target = &x0 * s.alpha_dot(t) + &x1 * s.sigma_dot(t);
            let lhs = (&v - &target).mapv(|d| d * d).sum();
            let w = s.endpoint_coefficient_raw(t);
            let rhs = w * w * (&xh - &x0).mapv(|d| d * d).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-8 * rhs.max(1e-12) + 1e-12, "{} vs {}", lhs, rhs);
        }
    }
}
