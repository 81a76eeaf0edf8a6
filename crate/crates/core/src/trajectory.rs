//! Conditional Gaussian trajectories under continuous measurement and
//! feedback, and reproducible parallel ensembles of them.
//!
//! Means and detector readings take Euler–Maruyama steps (Itô, coefficients
//! at the start of the step). The variances `(Vx, Vp, C)` follow a
//! deterministic Riccati flow and are advanced with one RK4 step per `dt`,
//! which keeps a pure state pure to well below 1e-6 over 10⁶ steps.
//!
//! Wiener increments come from ChaCha8 keyed by the master seed, with the
//! trajectory index as the stream id. Step `k` consumes exactly four 32-bit
//! words at word position `4k`: two 53-bit uniforms fed to the Box–Muller
//! transform, whose cosine branch drives the x channel and sine branch the
//! p channel. Any increment can therefore be regenerated in isolation with
//! [`WienerStream::at`]. The stream layout is frozen for this version.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{energy_expectation, Channel, ConfigError, DetectorState, GaussianState, ProtocolConfig};

/// Step guard: `dt ≤ STEP_GUARD / max(ω, γx, γp, λx, λp)`.
pub const STEP_GUARD: f64 = 0.01;

/// Fraction of the run, counted from the end, averaged for the asymptote.
pub const WINDOW_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("step dt = {dt} exceeds the guard {max_dt:e}; use dt ≤ {max_dt:e}")]
    StepGuard { dt: f64, max_dt: f64 },
    #[error("t_final / dt = {ratio} is not an integer")]
    NonIntegerSteps { ratio: f64 },
    #[error("record_stride must be at least 1")]
    Stride,
    #[error("t_final must be positive, got {0}")]
    Duration(f64),
    #[error("thermal bath coupling is not simulated at trajectory level; set Gamma = 0")]
    BathNotSimulated,
    #[error("channel {0} is inactive but its detector starts away from 0")]
    InactiveDetector(Channel),
    #[error("state collapsed at step {step}: Vx = {var_x}, Vp = {var_p}; reduce dt")]
    StateCollapse { step: usize, var_x: f64, var_p: f64 },
    #[error("need at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("trajectory {index} (master seed {seed}) failed: {source}")]
    Trajectory {
        index: usize,
        seed: u64,
        source: Box<TrajectoryError>,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Everything needed to reproduce one trajectory or an ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryConfig {
    pub cfg: ProtocolConfig,
    pub init_state: GaussianState,
    pub init_det: DetectorState,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    pub record_stride: usize,
}

impl TrajectoryConfig {
    pub fn new(cfg: ProtocolConfig, t_final: f64, dt: f64, seed: u64) -> Self {
        TrajectoryConfig {
            cfg,
            init_state: GaussianState::GROUND,
            init_det: DetectorState::default(),
            t_final,
            dt,
            seed,
            record_stride: 1,
        }
    }

    pub fn max_dt(&self) -> f64 {
        STEP_GUARD / self.cfg.max_rate()
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.cfg.validate()?;
        self.init_state.validate()?;
        if self.cfg.bath_coupling != 0.0 {
            return Err(TrajectoryError::BathNotSimulated);
        }
        if !self.cfg.channel_x_active && self.init_det.d_x != 0.0 {
            return Err(TrajectoryError::InactiveDetector(Channel::X));
        }
        if !self.cfg.channel_p_active && self.init_det.d_p != 0.0 {
            return Err(TrajectoryError::InactiveDetector(Channel::P));
        }
        let max_dt = self.max_dt();
        if !(self.dt > 0.0 && self.dt <= max_dt * (1.0 + 1e-12)) {
            return Err(TrajectoryError::StepGuard { dt: self.dt, max_dt });
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(TrajectoryError::Duration(self.t_final));
        }
        if self.record_stride == 0 {
            return Err(TrajectoryError::Stride);
        }
        self.n_steps().map(|_| ())
    }

    pub fn n_steps(&self) -> Result<usize, TrajectoryError> {
        let ratio = self.t_final / self.dt;
        let n = ratio.round();
        if !(ratio.is_finite() && n >= 1.0 && (ratio - n).abs() <= 1e-9 * n) {
            return Err(TrajectoryError::NonIntegerSteps { ratio });
        }
        Ok(n as usize)
    }

    /// First step index inside the asymptotic window.
    pub fn window_start(&self) -> Result<usize, TrajectoryError> {
        let n = self.n_steps()?;
        Ok(n - ((n as f64 * WINDOW_FRACTION).round() as usize).max(1) + 1)
    }

    /// Step indices that are recorded: every `record_stride`-th and the last.
    pub fn recorded_steps(&self) -> Result<Vec<usize>, TrajectoryError> {
        let n = self.n_steps()?;
        let mut out: Vec<usize> = (0..=n).step_by(self.record_stride.max(1)).collect();
        if *out.last().expect("non-empty") != n {
            out.push(n);
        }
        Ok(out)
    }
}

/// Gaussian Wiener increments for one trajectory.
#[derive(Debug, Clone)]
pub struct WienerStream {
    rng: ChaCha8Rng,
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 ∈ (0, 1], u2 ∈ [0, 1)
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

impl WienerStream {
    pub fn new(master_seed: u64, trajectory: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(trajectory);
        WienerStream { rng }
    }

    /// Next pair of standard normals `(ξx, ξp)`.
    #[inline]
    pub fn normals(&mut self) -> (f64, f64) {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        box_muller(a, b)
    }

    /// Standard normals of step `step`, regenerated from scratch.
    pub fn at(master_seed: u64, trajectory: u64, step: u64) -> (f64, f64) {
        let mut s = WienerStream::new(master_seed, trajectory);
        s.rng.set_word_pos(4 * step as u128);
        s.normals()
    }
}

#[inline]
fn variance_rates(cfg: &ProtocolConfig, vx: f64, vp: f64, c: f64) -> (f64, f64, f64) {
    let (w, lx, lp) = (cfg.omega, cfg.lambda_x, cfg.lambda_p);
    (
        w * c + lp - 4.0 * lx * vx * vx - lp * c * c,
        -w * c + lx - 4.0 * lp * vp * vp - lx * c * c,
        2.0 * w * vp - 2.0 * w * vx - 4.0 * (lx * vx + lp * vp) * c,
    )
}

/// RK4 step of the deterministic `(Vx, Vp, C)` flow.
#[inline]
fn variance_step(cfg: &ProtocolConfig, vx: f64, vp: f64, c: f64, dt: f64) -> (f64, f64, f64) {
    let h = dt / 2.0;
    let k1 = variance_rates(cfg, vx, vp, c);
    let k2 = variance_rates(cfg, vx + h * k1.0, vp + h * k1.1, c + h * k1.2);
    let k3 = variance_rates(cfg, vx + h * k2.0, vp + h * k2.1, c + h * k2.2);
    let k4 = variance_rates(cfg, vx + dt * k3.0, vp + dt * k3.1, c + dt * k3.2);
    let s = dt / 6.0;
    (
        vx + s * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        vp + s * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        c + s * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
    )
}

/// Noise amplitudes that do not change along a trajectory.
#[derive(Debug, Clone, Copy)]
struct Amplitudes {
    sx: f64,
    sp: f64,
    det_x: f64,
    det_p: f64,
}

impl Amplitudes {
    fn new(cfg: &ProtocolConfig) -> Self {
        let amp = |active: bool, l: f64, g: f64| if active { g / (4.0 * l).sqrt() } else { 0.0 };
        Amplitudes {
            sx: cfg.lambda_x.sqrt(),
            sp: cfg.lambda_p.sqrt(),
            det_x: amp(cfg.channel_x_active, cfg.lambda_x, cfg.gamma_x),
            det_p: amp(cfg.channel_p_active, cfg.lambda_p, cfg.gamma_p),
        }
    }
}

#[inline]
fn step_with(
    state: &GaussianState,
    det: &DetectorState,
    cfg: &ProtocolConfig,
    amp: &Amplitudes,
    dt: f64,
    dwx: f64,
    dwp: f64,
) -> (GaussianState, DetectorState) {
    let (mx, mp, vx, vp, c) = (state.mean_x, state.mean_p, state.var_x, state.var_p, state.cov);
    let u = mx - cfg.cx * det.d_x - cfg.cp * det.d_p;
    let v = mp - cfg.bx * det.d_x - cfg.bp * det.d_p;
    let w = cfg.omega;
    let new_mx = mx + w * v * dt + 2.0 * amp.sx * vx * dwx + amp.sp * c * dwp;
    let new_mp = mp - w * u * dt + amp.sx * c * dwx + 2.0 * amp.sp * vp * dwp;
    let d_x = if cfg.channel_x_active {
        det.d_x + cfg.gamma_x * (mx - det.d_x) * dt + amp.det_x * dwx
    } else {
        det.d_x
    };
    let d_p = if cfg.channel_p_active {
        det.d_p + cfg.gamma_p * (mp - det.d_p) * dt + amp.det_p * dwp
    } else {
        det.d_p
    };
    let (nvx, nvp, nc) = variance_step(cfg, vx, vp, c, dt);
    (
        GaussianState {
            mean_x: new_mx,
            mean_p: new_mp,
            var_x: nvx,
            var_p: nvp,
            cov: nc,
        },
        DetectorState { d_x, d_p },
    )
}

/// One step of the closed Gaussian stochastic system with given Wiener
/// increments. Increments of inactive channels are ignored.
pub fn sde_step(
    state: &GaussianState,
    det: &DetectorState,
    cfg: &ProtocolConfig,
    dt: f64,
    dwx: f64,
    dwp: f64,
) -> Result<(GaussianState, DetectorState), TrajectoryError> {
    let max_dt = STEP_GUARD / cfg.max_rate();
    if !(dt > 0.0 && dt <= max_dt * (1.0 + 1e-12)) {
        return Err(TrajectoryError::StepGuard { dt, max_dt });
    }
    let out = step_with(state, det, cfg, &Amplitudes::new(cfg), dt, dwx, dwp);
    check_state(&out.0, 1)?;
    Ok(out)
}

#[inline]
fn check_state(s: &GaussianState, step: usize) -> Result<(), TrajectoryError> {
    if s.var_x > 0.0 && s.var_p > 0.0 && s.mean_x.is_finite() && s.mean_p.is_finite() {
        Ok(())
    } else {
        Err(TrajectoryError::StateCollapse {
            step,
            var_x: s.var_x,
            var_p: s.var_p,
        })
    }
}

/// Runs trajectory `index`, calling `visit(step, state, det)` at step 0 and
/// after every step.
fn run_path<F>(tc: &TrajectoryConfig, index: usize, mut visit: F) -> Result<(), TrajectoryError>
where
    F: FnMut(usize, &GaussianState, &DetectorState),
{
    let n = tc.n_steps()?;
    let cfg = &tc.cfg;
    let amp = Amplitudes::new(cfg);
    let sq = tc.dt.sqrt();
    let mut noise = WienerStream::new(tc.seed, index as u64);
    let mut state = tc.init_state;
    let mut det = tc.init_det;
    visit(0, &state, &det);
    for k in 1..=n {
        let (xi_x, xi_p) = noise.normals();
        let (s, d) = step_with(&state, &det, cfg, &amp, tc.dt, sq * xi_x, sq * xi_p);
        state = s;
        det = d;
        check_state(&state, k)?;
        visit(k, &state, &det);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub state: GaussianState,
    pub det: DetectorState,
    /// Units of ħω/2.
    pub energy: f64,
    /// `Vx·Vp − C²/4`; 1/4 for a pure state.
    pub purity: f64,
}

/// Runs trajectory 0 of `tc`.
pub fn simulate_trajectory(tc: &TrajectoryConfig) -> Result<Vec<TrajectorySample>, TrajectoryError> {
    simulate_indexed(tc, 0)
}

/// Runs trajectory `index` of `tc`, recording every `record_stride`-th step
/// and the final one.
pub fn simulate_indexed(tc: &TrajectoryConfig, index: usize) -> Result<Vec<TrajectorySample>, TrajectoryError> {
    tc.validate()?;
    let n = tc.n_steps()?;
    let stride = tc.record_stride;
    let mut out = Vec::with_capacity(n / stride + 2);
    run_path(tc, index, |k, s, d| {
        if k % stride == 0 || k == n {
            out.push(TrajectorySample {
                t: k as f64 * tc.dt,
                state: *s,
                det: *d,
                energy: energy_expectation(s, d, &tc.cfg),
                purity: s.purity(),
            });
        }
    })?;
    Ok(out)
}

/// Ensemble mean energy over time with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean_energy: Vec<f64>,
    /// Bessel-corrected standard deviation over √n_traj.
    pub sem_energy: Vec<f64>,
    pub n_traj: usize,
    pub master_seed: u64,
    pub dt: f64,
    /// Mean over trajectories of each trajectory's time-averaged energy in
    /// the final 20% of the run (every step counted).
    pub asymptotic_energy: f64,
    /// Standard error of `asymptotic_energy` across trajectories.
    pub asymptotic_sem: f64,
    pub window_start_time: f64,
}

struct PathSummary {
    energies: Vec<f64>,
    window_mean: f64,
}

fn summarize(tc: &TrajectoryConfig, index: usize) -> Result<PathSummary, TrajectoryError> {
    let n = tc.n_steps()?;
    let stride = tc.record_stride;
    let start = tc.window_start()?;
    let mut energies = Vec::with_capacity(n / stride + 2);
    let mut acc = 0.0;
    run_path(tc, index, |k, s, d| {
        let on_grid = k % stride == 0 || k == n;
        if on_grid || k >= start {
            let e = energy_expectation(s, d, &tc.cfg);
            if on_grid {
                energies.push(e);
            }
            if k >= start {
                acc += e;
            }
        }
    })
    .map_err(|e| TrajectoryError::Trajectory {
        index,
        seed: tc.seed,
        source: Box::new(e),
    })?;
    Ok(PathSummary {
        energies,
        window_mean: acc / (n + 1 - start) as f64,
    })
}

fn mean_sem(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (nf - 1.0) / nf).sqrt())
}

/// Runs `n_traj` independent trajectories on the global rayon pool.
pub fn run_ensemble(tc: &TrajectoryConfig, n_traj: usize) -> Result<EnsembleStats, TrajectoryError> {
    run_ensemble_with(tc, n_traj, None)
}

/// Runs `n_traj` trajectories on a pool of `threads` workers (`None` for
/// the global pool). The result does not depend on the thread count: each
/// trajectory owns its noise stream and the reduction runs in index order.
pub fn run_ensemble_with(
    tc: &TrajectoryConfig,
    n_traj: usize,
    threads: Option<usize>,
) -> Result<EnsembleStats, TrajectoryError> {
    tc.validate()?;
    if n_traj < 2 {
        return Err(TrajectoryError::TooFewTrajectories(n_traj));
    }
    let work = || -> Vec<Result<PathSummary, TrajectoryError>> {
        (0..n_traj).into_par_iter().map(|i| summarize(tc, i)).collect()
    };
    let results = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| TrajectoryError::ThreadPool(e.to_string()))?
            .install(work),
        None => work(),
    };
    let mut paths = Vec::with_capacity(n_traj);
    for r in results {
        paths.push(r?);
    }
    let steps = tc.recorded_steps()?;
    let mut mean_energy = Vec::with_capacity(steps.len());
    let mut sem_energy = Vec::with_capacity(steps.len());
    for j in 0..steps.len() {
        let (m, s) = mean_sem(paths.iter().map(|p| p.energies[j]), n_traj);
        mean_energy.push(m);
        sem_energy.push(s);
    }
    let (asymptotic_energy, asymptotic_sem) = mean_sem(paths.iter().map(|p| p.window_mean), n_traj);
    Ok(EnsembleStats {
        times: steps.iter().map(|&k| k as f64 * tc.dt).collect(),
        mean_energy,
        sem_energy,
        n_traj,
        master_seed: tc.seed,
        dt: tc.dt,
        asymptotic_energy,
        asymptotic_sem,
        window_start_time: tc.window_start()? as f64 * tc.dt,
    })
}

/// Third moments of a Gaussian state rebuilt from its first two cumulants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosureMoments {
    /// `⟨x̂³⟩`
    pub x3: f64,
    /// `⟨p̂³⟩`
    pub p3: f64,
    /// `⟨x̂p̂² + p̂²x̂⟩`
    pub xp2: f64,
    /// `⟨x̂²p̂ + p̂x̂²⟩`
    pub x2p: f64,
}

pub fn gaussian_closure_check(state: &GaussianState) -> ClosureMoments {
    let (mx, mp, vx, vp, c) = (state.mean_x, state.mean_p, state.var_x, state.var_p, state.cov);
    let x2 = vx + mx * mx;
    let p2 = vp + mp * mp;
    ClosureMoments {
        x3: mx.powi(3) + 3.0 * mx * vx,
        p3: mp.powi(3) + 3.0 * mp * vp,
        xp2: 2.0 * mx * p2 + 2.0 * mp * c,
        x2p: 2.0 * x2 * mp + 2.0 * mx * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProtocolKind;
    use proptest::prelude::*;

    fn xp(lambda: f64, gamma: f64, b: f64) -> ProtocolConfig {
        ProtocolConfig::preset(ProtocolKind::XP, 1.0, lambda, gamma, b).unwrap()
    }

    #[test]
    fn stationary_variances() {
        let cfg = xp(0.1, 0.2, 1.0);
        let half = GaussianState::new(0.0, 0.0, 0.5, 0.5, 0.0).unwrap();
        let (s, _) = sde_step(&half, &DetectorState::default(), &cfg, 1e-3, 0.0, 0.0).unwrap();
        assert_eq!((s.var_x, s.var_p, s.cov), (0.5, 0.5, 0.0));
    }

    #[test]
    fn noise_cancels_on_relative_coordinate() {
        // ⟨x⟩ gets 2√λ·Vx dWx, Dx gets γ/√(4λ) dWx
        let (l, g) = (0.1, 0.2);
        let cfg = xp(l, g, 1.0);
        let half = GaussianState::new(0.3, -0.2, 0.5, 0.5, 0.0).unwrap();
        let det = DetectorState { d_x: 0.1, d_p: 0.05 };
        let (a, da) = sde_step(&half, &det, &cfg, 1e-3, 0.0, 0.0).unwrap();
        let (b, db) = sde_step(&half, &det, &cfg, 1e-3, 0.37, -0.21).unwrap();
        assert!(((a.mean_x - da.d_x) - (b.mean_x - db.d_x)).abs() < 1e-15);
        assert!(((a.mean_p - da.d_p) - (b.mean_p - db.d_p)).abs() < 1e-15);
        assert!((l.sqrt() - g / (4.0 * l).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ground_state_fixed_without_noise() {
        let cfg = xp(0.1, 0.2, 0.7);
        let (s, d) = sde_step(&GaussianState::GROUND, &DetectorState::default(), &cfg, 1e-3, 0.0, 0.0).unwrap();
        assert_eq!(s, GaussianState::GROUND);
        assert_eq!(d, DetectorState::default());
    }

    #[test]
    fn inactive_channel_stays_zero() {
        let cfg = ProtocolConfig::preset(ProtocolKind::C, 1.0, 0.1, 1.0, 0.2).unwrap();
        let mut tc = TrajectoryConfig::new(cfg, 2.0, 1e-3, 9);
        tc.record_stride = 10;
        let out = simulate_trajectory(&tc).unwrap();
        assert!(out.iter().all(|s| s.det.d_p == 0.0));
        assert!(out.iter().any(|s| s.det.d_x != 0.0));
    }

    #[test]
    fn guards() {
        let cfg = xp(0.1, 0.2, 1.0);
        let mut tc = TrajectoryConfig::new(cfg, 1.0, 0.02, 1);
        assert!(matches!(tc.validate(), Err(TrajectoryError::StepGuard { .. })));
        tc.dt = 0.003;
        assert!(matches!(tc.validate(), Err(TrajectoryError::NonIntegerSteps { .. })));
        tc.dt = 1e-3;
        tc.record_stride = 0;
        assert!(matches!(tc.validate(), Err(TrajectoryError::Stride)));
        tc.record_stride = 1;
        tc.cfg = cfg.with_bath(0.1, 0.0).unwrap();
        assert!(matches!(tc.validate(), Err(TrajectoryError::BathNotSimulated)));
        assert!(matches!(
            sde_step(&GaussianState::GROUND, &DetectorState::default(), &cfg, 0.5, 0.0, 0.0),
            Err(TrajectoryError::StepGuard { .. })
        ));
        assert!(matches!(run_ensemble(&TrajectoryConfig::new(cfg, 1.0, 1e-3, 1), 1), Err(TrajectoryError::TooFewTrajectories(1))));
    }

    #[test]
    fn collapse_is_reported() {
        // a step far beyond the guard drives Vx negative
        let cfg = xp(0.1, 0.2, 1.0);
        let wide = GaussianState::new(0.0, 0.0, 40.0, 40.0, 0.0).unwrap();
        let (s, _) = step_with(&wide, &DetectorState::default(), &cfg, &Amplitudes::new(&cfg), 1.0, 0.0, 0.0);
        assert!(matches!(check_state(&s, 1), Err(TrajectoryError::StateCollapse { .. })));
    }

    #[test]
    fn wiener_random_access() {
        let mut s = WienerStream::new(42, 7);
        let seq: Vec<(f64, f64)> = (0..50).map(|_| s.normals()).collect();
        for k in [0usize, 1, 17, 49] {
            assert_eq!(WienerStream::at(42, 7, k as u64), seq[k]);
        }
        assert_ne!(WienerStream::at(42, 8, 0), seq[0]);
    }

    #[test]
    fn wiener_moments() {
        let mut s = WienerStream::new(3, 0);
        let n = 200_000;
        let (mut m, mut v, mut cxy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (a, b) = s.normals();
            m += a + b;
            v += a * a + b * b;
            cxy += a * b;
        }
        let nf = 2.0 * n as f64;
        assert!((m / nf).abs() < 0.01);
        assert!((v / nf - 1.0).abs() < 0.01);
        assert!((cxy / n as f64).abs() < 0.01);
    }

    #[test]
    fn closure_examples() {
        let s = |mx, mp, vx, vp, c| GaussianState::new(mx, mp, vx, vp, c).unwrap();
        assert_eq!(gaussian_closure_check(&s(0.0, 0.3, 0.7, 0.5, 0.1)).x3, 0.0);
        assert_eq!(gaussian_closure_check(&s(1.0, 0.0, 0.5, 0.5, 0.0)).x3, 2.5);
        assert_eq!(gaussian_closure_check(&s(2.0, 0.0, 0.5, 0.5, 0.0)).x2p, 0.0);
    }

    /// Third moments of the Wigner distribution by 3-point Gauss–Hermite
    /// quadrature (exact through degree 5). Symmetrized operator products
    /// equal Wigner averages: `x²p + px² = 2·W[x²p]`.
    #[test]
    fn closure_matches_quadrature() {
        let nodes = [(-3f64.sqrt(), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
        for (mx, mp, vx, vp, c) in [(0.4, -1.2, 0.8, 0.6, 0.3), (-2.0, 0.5, 0.5, 0.5, 0.0), (1.1, 0.9, 2.0, 0.4, -1.1)] {
            let st = GaussianState::new(mx, mp, vx, vp, c).unwrap();
            // Cholesky of [[Vx, C/2], [C/2, Vp]]
            let l11 = vx.sqrt();
            let l21 = c / 2.0 / l11;
            let l22 = (vp - l21 * l21).sqrt();
            let mut m = [0.0; 4];
            for (z1, w1) in nodes {
                for (z2, w2) in nodes {
                    let x = mx + l11 * z1;
                    let p = mp + l21 * z1 + l22 * z2;
                    let w = w1 * w2;
                    m[0] += w * x * x * x;
                    m[1] += w * p * p * p;
                    m[2] += w * 2.0 * x * p * p;
                    m[3] += w * 2.0 * x * x * p;
                }
            }
            let got = gaussian_closure_check(&st);
            for (a, b) in [got.x3, got.p3, got.xp2, got.x2p].iter().zip(m) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn variances_relax_to_symmetric_values() {
        let cfg = xp(0.2, 0.3, 0.5);
        for start in [(3.0, 0.4, 0.5), (0.3, 2.0, -0.4), (1.0, 1.0, 1.5)] {
            let mut tc = TrajectoryConfig::new(cfg, 10.0 / 0.2, 1e-3, 5);
            tc.init_state = GaussianState::new(0.0, 0.0, start.0, start.1, start.2).unwrap();
            tc.record_stride = 50_000;
            let last = simulate_trajectory(&tc).unwrap().pop().unwrap().state;
            assert!((last.var_x - 0.5).abs() < 1e-3);
            assert!((last.var_p - 0.5).abs() < 1e-3);
            assert!(last.cov.abs() < 1e-3);
        }
    }

    #[test]
    fn purity_derivative_identity() {
        // dP/dt = −4(λxVx + λpVp)(P − 1/4) for the variance flow
        let cfgs = [
            xp(0.2, 0.3, 0.5),
            ProtocolConfig::preset(ProtocolKind::X, 1.3, 0.15, 0.3, 1.0).unwrap(),
        ];
        for cfg in cfgs {
            for (vx, vp, c) in [(2.0, 0.7, 0.3), (0.5, 0.5, 0.0), (0.9, 3.0, -1.0)] {
                let (dvx, dvp, dc) = variance_rates(&cfg, vx, vp, c);
                let dp = dvx * vp + vx * dvp - c * dc / 2.0;
                let p = vx * vp - c * c / 4.0;
                let want = -4.0 * (cfg.lambda_x * vx + cfg.lambda_p * vp) * (p - 0.25);
                assert!((dp - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn purity_is_monotone(vx in 0.3f64..3.0, vp in 0.3f64..3.0, c in -1.0f64..1.0, b in 0.2f64..1.0) {
            let cfg = xp(0.2, 0.3, b);
            let state = GaussianState { mean_x: 0.0, mean_p: 0.0, var_x: vx, var_p: vp, cov: c };
            prop_assume!(state.validate().is_ok());
            let mut tc = TrajectoryConfig::new(cfg, 20.0, 1e-3, 11);
            tc.init_state = state;
            tc.record_stride = 100;
            let out = simulate_trajectory(&tc).unwrap();
            let d0 = out[0].purity - 0.25;
            for w in out.windows(2) {
                let (a, b) = (w[0].purity - 0.25, w[1].purity - 0.25);
                prop_assert!(b.abs() <= a.abs() + 1e-12);
                prop_assert!(b * d0 >= -1e-12);
            }
        }
    }

    #[test]
    fn ensemble_is_thread_independent() {
        let cfg = xp(0.1, 0.2, 0.8);
        let mut tc = TrajectoryConfig::new(cfg, 2.0, 1e-3, 77);
        tc.record_stride = 100;
        let a = run_ensemble_with(&tc, 24, Some(1)).unwrap();
        let b = run_ensemble_with(&tc, 24, Some(4)).unwrap();
        let c = run_ensemble_with(&tc, 24, Some(16)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.times.len(), 21);
    }

    #[test]
    fn sem_uses_bessel_correction() {
        let (m, s) = mean_sem([1.0, 2.0, 3.0, 4.0].into_iter(), 4);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
