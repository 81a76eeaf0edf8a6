//! Classical feedback cooling: the stroboscopic map and the continuous
//! filtered-feedback ODE
//!
//! ```text
//! ẋ = p/m,   ṗ = −mω²(x − b·Dx),   Ḋx = γ(x − Dx)
//! ```

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::moments::{eigenvalues, EigenError};

/// Tolerance on `|b − 1|` for the untrapped line.
pub const EPS_GAIN: f64 = 1e-12;
/// Tolerance on the spectral radius around 1.
pub const EPS_RADIUS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassicalError {
    #[error("`{field}` must be positive and finite, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("ω·Δt = {0} is a multiple of π; the stroboscope is degenerate")]
    DegenerateStrobe(f64),
    #[error("requires b = 1, got b = {0}")]
    RequiresUnitGain(f64),
    #[error(transparent)]
    Eigen(#[from] EigenError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalParams {
    pub m: f64,
    pub omega: f64,
    pub b: f64,
    /// Filter rate of the continuous model.
    pub gamma: f64,
    /// Interval between kicks of the discrete model.
    pub dt_strobe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassicalState {
    pub x: f64,
    pub p: f64,
    pub d_x: f64,
}

impl ClassicalState {
    pub fn new(x: f64, p: f64, d_x: f64) -> Self {
        ClassicalState { x, p, d_x }
    }

    fn to_vec(self) -> Vector3<f64> {
        Vector3::new(self.x, self.p, self.d_x)
    }

    fn from_vec(v: Vector3<f64>) -> Self {
        ClassicalState::new(v[0], v[1], v[2])
    }
}

impl ClassicalParams {
    pub fn validate(&self) -> Result<(), ClassicalError> {
        for (field, value) in [
            ("m", self.m),
            ("omega", self.omega),
            ("b", self.b),
            ("gamma", self.gamma),
            ("dt_strobe", self.dt_strobe),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ClassicalError::NonPositive { field, value });
            }
        }
        Ok(())
    }

    /// `p²/2m + (mω²/2)(x − b·Dx)²`.
    pub fn energy(&self, s: &ClassicalState) -> f64 {
        let u = s.x - self.b * s.d_x;
        s.p * s.p / (2.0 * self.m) + 0.5 * self.m * self.omega * self.omega * u * u
    }

    fn phase(&self) -> Result<(f64, f64), ClassicalError> {
        self.validate()?;
        let theta = self.omega * self.dt_strobe;
        let (s, c) = theta.sin_cos();
        if s.abs() <= 1e-12 * theta.max(1.0) {
            return Err(ClassicalError::DegenerateStrobe(theta));
        }
        Ok((s, c))
    }
}

/// One step of the stroboscopic map on `(x, p)`.
pub fn discrete_step_matrix(params: &ClassicalParams) -> Result<Matrix2<f64>, ClassicalError> {
    let (s, c) = params.phase()?;
    let (m, w, b) = (params.m, params.omega, params.b);
    Ok(Matrix2::new(
        b + (1.0 - b) * c,
        s / (m * w),
        -m * w * (1.0 - b) * s,
        c,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscreteRegime {
    CooledTrapped,
    CooledUntrapped,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteClassification {
    pub regime: DiscreteRegime,
    pub spectral_radius: f64,
    /// Spectral radius within `EPS_RADIUS` of 1 away from the b = 1 line.
    pub marginal: bool,
}

/// Largest eigenvalue modulus of a real 2×2 matrix.
pub fn spectral_radius_2x2(a: &Matrix2<f64>) -> f64 {
    let tr = a.trace();
    let det = a.determinant();
    let disc = tr * tr / 4.0 - det;
    if disc < 0.0 {
        det.sqrt()
    } else {
        let r = disc.sqrt();
        (tr / 2.0 + r).abs().max((tr / 2.0 - r).abs())
    }
}

pub fn classify_discrete(params: &ClassicalParams) -> Result<DiscreteClassification, ClassicalError> {
    let a = discrete_step_matrix(params)?;
    let rho = spectral_radius_2x2(&a);
    let (regime, marginal) = if (params.b - 1.0).abs() <= EPS_GAIN {
        (DiscreteRegime::CooledUntrapped, false)
    } else if rho < 1.0 - EPS_RADIUS {
        (DiscreteRegime::CooledTrapped, false)
    } else if rho > 1.0 + EPS_RADIUS {
        (DiscreteRegime::Unstable, false)
    } else {
        (DiscreteRegime::Unstable, true)
    };
    Ok(DiscreteClassification {
        regime,
        spectral_radius: rho,
        marginal,
    })
}

/// Rest point of the b = 1 map started from `(x0, p0)`.
pub fn discrete_asymptote_b1(
    x0: f64,
    p0: f64,
    params: &ClassicalParams,
) -> Result<(f64, f64), ClassicalError> {
    let (s, c) = params.phase()?;
    if params.b != 1.0 {
        return Err(ClassicalError::RequiresUnitGain(params.b));
    }
    Ok((x0 + s / (1.0 - c) * p0 / (params.m * params.omega), 0.0))
}

/// Iterates the stroboscopic map `steps` times, returning every point
/// including the start.
pub fn discrete_orbit(
    x0: f64,
    p0: f64,
    params: &ClassicalParams,
    steps: usize,
) -> Result<Vec<(f64, f64)>, ClassicalError> {
    let a = discrete_step_matrix(params)?;
    let mut v = Vector2::new(x0, p0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push((v[0], v[1]));
    for _ in 0..steps {
        v = a * v;
        out.push((v[0], v[1]));
    }
    Ok(out)
}

/// Generator of the continuous model acting on `(x, p, Dx)`.
pub fn continuous_matrix(params: &ClassicalParams) -> Matrix3<f64> {
    let (m, w, b, g) = (params.m, params.omega, params.b, params.gamma);
    Matrix3::new(
        0.0,
        1.0 / m,
        0.0,
        -m * w * w,
        0.0,
        m * w * w * b,
        g,
        0.0,
        -g,
    )
}

/// State at time `t` of the continuous model with b = 1.
///
/// For γ < 2ω this is the underdamped closed form with
/// `Ω = √(ω² − γ²/4)`; otherwise the matrix exponential is used.
pub fn continuous_solution_b1(
    t: f64,
    start: ClassicalState,
    params: &ClassicalParams,
) -> Result<ClassicalState, ClassicalError> {
    params.validate()?;
    if params.b != 1.0 {
        return Err(ClassicalError::RequiresUnitGain(params.b));
    }
    let (m, w, g) = (params.m, params.omega, params.gamma);
    if g >= 2.0 * w {
        let e = (continuous_matrix(params) * t).exp();
        return Ok(ClassicalState::from_vec(e * start.to_vec()));
    }
    let (x0, p0, d0) = (start.x, start.p, start.d_x);
    let om = (w * w - g * g / 4.0).sqrt();
    let env = (-g * t / 2.0).exp();
    let (s, c) = (om * t).sin_cos();
    let u = x0 - d0;
    let mw2 = m * w * w;
    let p = p0 * env * c + (g / 2.0 * p0 - mw2 * u) / om * env * s;
    let x = x0
        + (g * p0 / mw2 - u) * (1.0 - env * c)
        + (p0 / (om * mw2) * (om * om - g * g / 4.0) + g / (2.0 * om) * u) * env * s;
    let d = d0 + g * p0 / mw2 * (1.0 - env * c) + (-g * p0 / (2.0 * mw2) + u) * g / om * env * s;
    Ok(ClassicalState::new(x, p, d))
}

/// Long-time limit of the b = 1 continuous model: at rest at
/// `Dx0 + γp0/(mω²)`.
pub fn continuous_asymptote_b1(start: ClassicalState, params: &ClassicalParams) -> ClassicalState {
    let rest = start.d_x + params.gamma * start.p / (params.m * params.omega * params.omega);
    ClassicalState::new(rest, 0.0, rest)
}

/// Slowest decay rate of the continuous model, excluding the zero mode.
///
/// Exactly γ/2 on the underdamped b = 1 branch; otherwise read off the
/// eigenvalues of [`continuous_matrix`].
pub fn continuous_relaxation_rate(params: &ClassicalParams) -> Result<f64, ClassicalError> {
    params.validate()?;
    if params.b == 1.0 && params.gamma < 2.0 * params.omega {
        return Ok(params.gamma / 2.0);
    }
    let m = continuous_matrix(params);
    let dm = DMatrix::from_iterator(3, 3, m.iter().copied());
    let eps = 1e-9 * m.amax();
    let spec = eigenvalues(&dm)?;
    Ok(spec
        .eigenvalues
        .iter()
        .filter(|z| z.re.abs() > eps)
        .map(|z| -z.re)
        .fold(f64::INFINITY, f64::min))
}

/// Fixed-step RK4 solution of the continuous model, sampled every step.
pub fn continuous_orbit(
    start: ClassicalState,
    params: &ClassicalParams,
    t_final: f64,
    dt: f64,
) -> Result<Vec<(f64, ClassicalState)>, ClassicalError> {
    params.validate()?;
    if !(dt > 0.0 && t_final >= 0.0) {
        return Err(ClassicalError::NonPositive { field: "dt", value: dt });
    }
    let m = continuous_matrix(params);
    let n = (t_final / dt).round() as usize;
    let mut v = start.to_vec();
    let mut out = Vec::with_capacity(n + 1);
    out.push((0.0, start));
    for k in 1..=n {
        let k1 = m * v;
        let k2 = m * (v + k1 * (dt / 2.0));
        let k3 = m * (v + k2 * (dt / 2.0));
        let k4 = m * (v + k3 * dt);
        v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        out.push((k as f64 * dt, ClassicalState::from_vec(v)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn params(b: f64, theta: f64) -> ClassicalParams {
        ClassicalParams {
            m: 1.0,
            omega: 1.0,
            b,
            gamma: 1.0,
            dt_strobe: theta,
        }
    }

    fn cont(m: f64, omega: f64, b: f64, gamma: f64) -> ClassicalParams {
        ClassicalParams {
            m,
            omega,
            b,
            gamma,
            dt_strobe: 1.0,
        }
    }

    fn close2(a: &Matrix2<f64>, b: [f64; 4]) -> bool {
        let b = Matrix2::new(b[0], b[1], b[2], b[3]);
        (a - b).amax() < 1e-15
    }

    #[test]
    fn step_matrix_examples() {
        let th = 0.8f64;
        let a = discrete_step_matrix(&params(1.0, th)).unwrap();
        assert!(close2(&a, [1.0, th.sin(), 0.0, th.cos()]));
        let a = discrete_step_matrix(&params(0.0 + 1e-300, FRAC_PI_2)).unwrap();
        assert!(close2(&a, [0.0, 1.0, -1.0, 0.0]));
        let a = discrete_step_matrix(&params(0.5, FRAC_PI_2)).unwrap();
        assert!(close2(&a, [0.5, 1.0, -0.5, 0.0]));
        assert!(matches!(
            discrete_step_matrix(&params(0.5, PI)),
            Err(ClassicalError::DegenerateStrobe(_))
        ));
    }

    #[test]
    fn classification_examples() {
        for th in [0.3, 1.0, 2.0, 4.0] {
            let r = |b| classify_discrete(&params(b, th)).unwrap().regime;
            assert_eq!(r(0.5), DiscreteRegime::CooledTrapped);
            assert_eq!(r(1.0), DiscreteRegime::CooledUntrapped);
            assert_eq!(r(1.5), DiscreteRegime::Unstable);
        }
    }

    #[test]
    fn discrete_asymptote_examples() {
        let p = params(1.0, FRAC_PI_2);
        let (x, pp) = discrete_asymptote_b1(0.0, 1.0, &p).unwrap();
        assert!((x - 1.0).abs() < 1e-15 && pp == 0.0);
        let (x, _) = discrete_asymptote_b1(3.0, 0.0, &params(1.0, 0.37)).unwrap();
        assert_eq!(x, 3.0);
        assert!(matches!(
            discrete_asymptote_b1(0.0, 1.0, &params(0.9, 1.0)),
            Err(ClassicalError::RequiresUnitGain(_))
        ));
    }

    #[test]
    fn discrete_asymptote_matches_iteration() {
        for th in [0.4, 1.0, 2.5, 5.0] {
            let p = ClassicalParams {
                m: 2.0,
                omega: 1.5,
                ..params(1.0, th / 1.5)
            };
            let orbit = discrete_orbit(0.0, p.m * p.omega, &p, 10_000).unwrap();
            let (x, pp) = *orbit.last().unwrap();
            let (xa, pa) = discrete_asymptote_b1(0.0, p.m * p.omega, &p).unwrap();
            assert!((x - xa).abs() < 1e-8 && (pp - pa).abs() < 1e-8);
        }
    }

    /// `‖Aⁿ‖^{1/n}` for n = 2⁴⁰ by repeated squaring with rescaling.
    fn brute_radius(a: &Matrix2<f64>) -> f64 {
        let mut m = *a;
        let mut log = 0.0;
        let mut n = 1.0;
        for _ in 0..40 {
            let s = m.amax();
            m /= s;
            log += s.ln() / n;
            m = m * m;
            n *= 2.0;
        }
        (log + m.amax().ln() / n).exp()
    }

    #[test]
    fn classification_matches_brute_force_grid() {
        for i in 1..=20 {
            let b = i as f64 / 10.0;
            for j in 0..20 {
                let th = PI * (j as f64 + 0.5) / 10.0;
                let p = params(b, th);
                let a = discrete_step_matrix(&p).unwrap();
                let rho = brute_radius(&a);
                let want = if i == 10 {
                    DiscreteRegime::CooledUntrapped
                } else if rho < 1.0 - 1e-6 {
                    DiscreteRegime::CooledTrapped
                } else {
                    assert!(rho > 1.0 + 1e-6, "b={b} θ={th} ρ={rho}");
                    DiscreteRegime::Unstable
                };
                let got = classify_discrete(&p).unwrap();
                assert_eq!(got.regime, want, "b={b} θ={th}");
                assert!((got.spectral_radius - rho).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn trapped_orbits_reach_origin(x0 in -5.0f64..5.0, p0 in -5.0f64..5.0, b in 0.1f64..0.9, th in 0.2f64..3.0) {
            let orbit = discrete_orbit(x0, p0, &params(b, th), 20_000).unwrap();
            let (x, p) = *orbit.last().unwrap();
            prop_assert!(x.abs() < 1e-6 && p.abs() < 1e-6);
        }

        #[test]
        fn unstable_orbits_grow(x0 in -5.0f64..5.0, p0 in -5.0f64..5.0, b in 1.2f64..2.0, th in 0.2f64..3.0) {
            prop_assume!(x0.hypot(p0) > 0.1);
            let orbit = discrete_orbit(x0, p0, &params(b, th), 200).unwrap();
            let norms: Vec<f64> = orbit.iter().map(|(x, p)| x.hypot(*p)).collect();
            prop_assert!(norms[200] > 1e3 * norms[10]);
        }

        #[test]
        fn continuous_decays_for_b_below_one(b in 0.1f64..0.9, g in 0.3f64..3.0, x0 in -2.0f64..2.0, p0 in -2.0f64..2.0) {
            let p = cont(1.0, 1.0, b, g);
            let rate = continuous_relaxation_rate(&p).unwrap();
            prop_assert!(rate > 0.0);
            let t = 40.0 / rate;
            let e = (continuous_matrix(&p) * t).exp() * Vector3::new(x0, p0, 0.0);
            prop_assert!(e.amax() < 1e-12 * (1.0 + x0.abs() + p0.abs()));
        }
    }

    #[test]
    fn continuous_matrix_examples() {
        let m = continuous_matrix(&cont(1.0, 1.0, 1.0, 1.0));
        assert_eq!(m, Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 1.0, 0.0, -1.0));
        for (mm, w, b, g) in [(2.0, 0.5, 0.3, 1.7), (0.1, 3.0, 1.5, 0.2)] {
            assert_eq!(continuous_matrix(&cont(mm, w, b, g)).trace(), -g);
        }
        let m = continuous_matrix(&cont(1.0, 1.0, 0.5, 1.0));
        let s = eigenvalues(&DMatrix::from_iterator(3, 3, m.iter().copied())).unwrap();
        assert!(s.eigenvalues.iter().all(|z| z.re < 0.0));
    }

    #[test]
    fn closed_form_at_zero_and_infinity() {
        let p = cont(1.3, 1.1, 1.0, 0.7);
        let s0 = ClassicalState::new(0.4, -0.9, 0.25);
        assert_eq!(continuous_solution_b1(0.0, s0, &p).unwrap(), s0);
        let late = continuous_solution_b1(200.0, s0, &p).unwrap();
        let rest = continuous_asymptote_b1(s0, &p);
        assert!((late.x - rest.x).abs() < 1e-12);
        assert!((late.d_x - rest.d_x).abs() < 1e-12);
        assert!(late.p.abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_rk4() {
        for (w, g) in [(1.0, 0.1), (1.1, 0.7), (2.0, 3.9), (1.0, 5.0)] {
            let p = cont(1.3, w, 1.0, g);
            let s0 = ClassicalState::new(0.4, -0.9, 0.25);
            let dt = 1e-3;
            let t_final = (50.0 / g / dt).round() * dt;
            let orbit = continuous_orbit(s0, &p, t_final, dt).unwrap();
            for (t, s) in orbit.iter().step_by(997) {
                let c = continuous_solution_b1(*t, s0, &p).unwrap();
                let err = (c.x - s.x).abs().max((c.p - s.p).abs()).max((c.d_x - s.d_x).abs());
                assert!(err < 1e-8, "ω={w} γ={g} t={t}: {err}");
            }
            let (_, last) = orbit.last().unwrap();
            let rest = continuous_asymptote_b1(s0, &p);
            if g < 2.0 * w {
                // 50/γ is 25 envelope times
                assert!((last.x - rest.x).abs() < 1e-8, "ω={w} γ={g}");
            }
        }
    }

    #[test]
    fn relaxation_examples() {
        assert_eq!(continuous_relaxation_rate(&cont(1.0, 1.0, 1.0, 0.1)).unwrap(), 0.05);
        let r = continuous_relaxation_rate(&cont(1.0, 1.0, 1.0, 100.0)).unwrap();
        assert!((r - 0.01).abs() < 0.05 * 0.01);
        // the closed branch agrees with the spectrum
        for (w, g) in [(1.0, 0.1), (1.0, 1.9), (2.0, 0.5)] {
            let p = cont(1.0, w, 1.0, g);
            let m = continuous_matrix(&p);
            let s = eigenvalues(&DMatrix::from_iterator(3, 3, m.iter().copied())).unwrap();
            let slow = s
                .eigenvalues
                .iter()
                .filter(|z| z.re.abs() > 1e-9)
                .map(|z| -z.re)
                .fold(f64::INFINITY, f64::min);
            assert!((continuous_relaxation_rate(&p).unwrap() - slow).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_envelope_decreases() {
        let p = cont(1.0, 1.0, 0.5, 1.0);
        let period = 2.0 * PI;
        let dt = 1e-3;
        let orbit = continuous_orbit(ClassicalState::new(1.0, 0.0, 0.0), &p, 20.0 * period, dt).unwrap();
        let per = (period / dt) as usize;
        let peaks: Vec<f64> = orbit
            .chunks(per)
            .map(|c| c.iter().map(|(_, s)| p.energy(s)).fold(0.0, f64::max))
            .collect();
        for w in peaks[2..].windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}
