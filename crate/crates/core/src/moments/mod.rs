//! Exact ensemble-level dynamics of the second moments.
//!
//! For the quadratic protocols the averaged dynamics of the oscillator and
//! detector second moments close exactly, giving a linear system
//! `ν̇ = M·ν + s`. Each coordinate `νᵢ` is a linear functional of the 4×4
//! symmetrized second-moment matrix `S = ⟨z zᵀ⟩` over `z = (x, p, Dx, Dp)`,
//! `νᵢ = tr(Wᵢ S)`; the `Wᵢ` are kept alongside the system as
//! [`MomentSystem::projections`].

pub mod eigen;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use num_complex::Complex64;
use thiserror::Error;

pub use eigen::{eigenvalues, EigenError, Spectrum};

use crate::model::{ConfigError, DetectorState, GaussianState, ProtocolConfig, ProtocolKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("configuration does not match system {kind}: {reason}")]
    Mismatch { kind: SystemKind, reason: String },
    #[error("moment matrix is singular; near-null direction {null_direction:?}")]
    SingularSystem { null_direction: Vec<f64> },
    #[error("system is unstable: eigenvalue {eigenvalue} has positive real part")]
    Unstable { eigenvalue: Complex64 },
    #[error("no decaying mode: every eigenvalue is marginal")]
    NoDecayingMode,
    #[error("step dt = {dt} exceeds the guard {max_dt:e}; use dt ≤ {max_dt:e}")]
    StepGuard { dt: f64, max_dt: f64 },
    #[error("t_final / dt = {ratio} is not an integer")]
    NonIntegerSteps { ratio: f64 },
    #[error("expected a vector of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Eigen(#[from] EigenError),
}

/// Which moment system to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    X,
    XP,
    C,
    /// Protocol X at b = 1 with a thermal bath, coordinates (V, K, G, H).
    XThermalB1,
    /// Protocol XP at b = 1 with a thermal bath, coordinates (V, K, G, H).
    XPThermalB1,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::X => "X",
            SystemKind::XP => "XP",
            SystemKind::C => "C",
            SystemKind::XThermalB1 => "X_thermal_b1",
            SystemKind::XPThermalB1 => "XP_thermal_b1",
        }
    }

    pub fn protocol(self) -> ProtocolKind {
        match self {
            SystemKind::X | SystemKind::XThermalB1 => ProtocolKind::X,
            SystemKind::XP | SystemKind::XPThermalB1 => ProtocolKind::XP,
            SystemKind::C => ProtocolKind::C,
        }
    }
}

impl From<ProtocolKind> for SystemKind {
    fn from(k: ProtocolKind) -> Self {
        match k {
            ProtocolKind::X => SystemKind::X,
            ProtocolKind::XP => SystemKind::XP,
            ProtocolKind::C => SystemKind::C,
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(SystemKind::X),
            "xp" => Ok(SystemKind::XP),
            "c" => Ok(SystemKind::C),
            "x_thermal_b1" => Ok(SystemKind::XThermalB1),
            "xp_thermal_b1" => Ok(SystemKind::XPThermalB1),
            other => Err(format!("unknown moment system `{other}`")),
        }
    }
}

/// `value = coeffs · ν + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl AffineMap {
    pub fn linear(coeffs: Vec<f64>) -> Self {
        AffineMap { coeffs, offset: 0.0 }
    }

    pub fn eval(&self, nu: &DVector<f64>) -> f64 {
        self.coeffs.iter().zip(nu.iter()).map(|(c, v)| c * v).sum::<f64>() + self.offset
    }

    fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, _)| i)
    }
}

/// Linear moment dynamics `ν̇ = M·ν + s` with observable maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystem {
    pub kind: SystemKind,
    pub cfg: ProtocolConfig,
    pub matrix: DMatrix<f64>,
    pub source: DVector<f64>,
    pub labels: Vec<&'static str>,
    /// `νᵢ = tr(Wᵢ S)` for the raw second-moment matrix `S` over (x, p, Dx, Dp).
    pub projections: Vec<Matrix4<f64>>,
    /// Mean energy in units of ħω/2.
    pub energy: AffineMap,
    /// `⟨x²⟩`; `None` when the coordinates do not determine it.
    pub var_x: Option<AffineMap>,
    /// Positions of these coordinates in the full system they were cut from.
    pub indices: Vec<usize>,
}

/// Energy and position second moment read off a moment vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observables {
    pub energy: f64,
    pub var_x: Option<f64>,
}

/// Decay rate of the slowest non-marginal mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub rate: f64,
    pub marginal: Vec<Complex64>,
    pub spectrum: Spectrum,
}

/// Sampled solution of the moment ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

fn e(i: usize) -> Vector4<f64> {
    let mut v = Vector4::zeros();
    v[i] = 1.0;
    v
}

/// `(a bᵀ + b aᵀ)/2`, so that `tr(W S) = aᵀ S b`.
fn sym(a: &Vector4<f64>, b: &Vector4<f64>) -> Matrix4<f64> {
    (a * b.transpose() + b * a.transpose()) * 0.5
}

/// Drift `A` and diffusion `N` of the raw second moments:
/// `Ṡ = A S + S Aᵀ + N`.
///
/// The bath damps the displaced coordinates `x − cx·Dx − cp·Dp` and
/// `p − bx·Dx − bp·Dp` at rate Γ/2 each.
pub fn covariance_generator(cfg: &ProtocolConfig) -> (Matrix4<f64>, Matrix4<f64>) {
    let w = cfg.omega;
    let g = cfg.bath_coupling;
    let mut a = Matrix4::zeros();
    // ẋ = ω(p − bx Dx − bp Dp) − (Γ/2)(x − cx Dx − cp Dp)
    a[(0, 0)] = -g / 2.0;
    a[(0, 1)] = w;
    a[(0, 2)] = -w * cfg.bx + g / 2.0 * cfg.cx;
    a[(0, 3)] = -w * cfg.bp + g / 2.0 * cfg.cp;
    // ṗ = −ω(x − cx Dx − cp Dp) − (Γ/2)(p − bx Dx − bp Dp)
    a[(1, 0)] = -w;
    a[(1, 1)] = -g / 2.0;
    a[(1, 2)] = w * cfg.cx + g / 2.0 * cfg.bx;
    a[(1, 3)] = w * cfg.cp + g / 2.0 * cfg.bp;
    let bath = g * (cfg.nbar + 0.5);
    let mut n = Matrix4::zeros();
    n[(0, 0)] = cfg.lambda_p + bath;
    n[(1, 1)] = cfg.lambda_x + bath;
    if cfg.channel_x_active {
        a[(2, 0)] = cfg.gamma_x;
        a[(2, 2)] = -cfg.gamma_x;
        n[(2, 2)] = cfg.gamma_x * cfg.gamma_x / (4.0 * cfg.lambda_x);
    }
    if cfg.channel_p_active {
        a[(3, 1)] = cfg.gamma_p;
        a[(3, 3)] = -cfg.gamma_p;
        n[(3, 3)] = cfg.gamma_p * cfg.gamma_p / (4.0 * cfg.lambda_p);
    }
    (a, n)
}

/// Raw second-moment matrix of a product of a Gaussian state and a sharp
/// detector reading.
pub fn second_moments(state: &GaussianState, det: &DetectorState) -> Matrix4<f64> {
    let m = Vector4::new(state.mean_x, state.mean_p, det.d_x, det.d_p);
    let mut s = m * m.transpose();
    s[(0, 0)] += state.var_x;
    s[(1, 1)] += state.var_p;
    s[(0, 1)] += state.cov / 2.0;
    s[(1, 0)] += state.cov / 2.0;
    s
}

fn mismatch(kind: SystemKind, reason: impl Into<String>) -> MomentError {
    MomentError::Mismatch {
        kind,
        reason: reason.into(),
    }
}

fn require_preset(cfg: &ProtocolConfig, kind: SystemKind) -> Result<(), MomentError> {
    let want = kind.protocol();
    match cfg.kind() {
        Some(k) if k == want => {}
        other => {
            let got = other.map_or("a non-preset configuration".to_string(), |k| format!("protocol {k}"));
            return Err(mismatch(kind, format!("requires protocol {want}, got {got}")));
        }
    }
    if want == ProtocolKind::XP && (cfg.lambda_x != cfg.lambda_p || cfg.gamma_x != cfg.gamma_p) {
        return Err(mismatch(kind, "both channels must share lambda and gamma"));
    }
    let thermal = matches!(kind, SystemKind::XThermalB1 | SystemKind::XPThermalB1);
    if thermal && cfg.gain() != 1.0 {
        return Err(mismatch(kind, format!("requires b = 1, got b = {}", cfg.gain())));
    }
    if matches!(kind, SystemKind::X | SystemKind::XP) && cfg.bath_coupling != 0.0 {
        return Err(mismatch(
            kind,
            "the bath is only modelled at b = 1; use the thermal system",
        ));
    }
    Ok(())
}

/// Builds the moment system of `kind` for `cfg`.
pub fn build_system(cfg: &ProtocolConfig, kind: SystemKind) -> Result<MomentSystem, MomentError> {
    cfg.validate()?;
    require_preset(cfg, kind)?;
    let sys = match kind {
        SystemKind::X => build_x(cfg),
        SystemKind::XP => build_xp(cfg),
        SystemKind::C => build_c(cfg),
        SystemKind::XThermalB1 => build_x_thermal(cfg),
        SystemKind::XPThermalB1 => build_xp_thermal(cfg),
    };
    Ok(sys)
}

fn build_x(cfg: &ProtocolConfig) -> MomentSystem {
    let (w, g, l, b) = (cfg.omega, cfg.gamma_x, cfg.lambda_x, cfg.cx);
    let ob = 1.0 - b;
    #[rustfmt::skip]
    let matrix = DMatrix::from_row_slice(6, 6, &[
        -2.0 * g * b, 0.0,      w / 2.0, g * b * ob,  0.0,              0.0,
        0.0,          0.0,     -w / 2.0, 0.0,         0.0,              0.0,
        -4.0 * w,     4.0 * w, -g * b,   0.0,         2.0 * g * b * ob, 0.0,
        2.0 * g,      0.0,      0.0,    -g,           w,                g * b * ob,
        0.0,          0.0,      g / 2.0, -w,         -g * ob,           0.0,
        0.0,          0.0,      0.0,     2.0 * g,     0.0,             -2.0 * g * ob,
    ]);
    let source = DVector::from_vec(vec![
        b * b * g * g / (8.0 * l),
        l / 2.0,
        0.0,
        -b * g * g / (4.0 * l),
        0.0,
        g * g / (4.0 * l),
    ]);
    let u = e(0) - e(2) * b;
    let (p, d) = (e(1), e(2));
    MomentSystem {
        kind: SystemKind::X,
        cfg: *cfg,
        matrix,
        source,
        labels: vec![
            "<(x-bDx)^2>/2",
            "<p^2>/2",
            "<{p,x-bDx}>",
            "<(x-bDx)Dx>",
            "<p Dx>",
            "<Dx^2>",
        ],
        projections: vec![
            u * u.transpose() * 0.5,
            p * p.transpose() * 0.5,
            sym(&p, &u) * 2.0,
            sym(&u, &d),
            sym(&p, &d),
            d * d.transpose(),
        ],
        energy: AffineMap::linear(vec![2.0, 2.0, 0.0, 0.0, 0.0, 0.0]),
        var_x: Some(AffineMap::linear(vec![2.0, 0.0, 0.0, 2.0 * b, 0.0, b * b])),
        indices: (0..6).collect(),
    }
}

fn build_xp(cfg: &ProtocolConfig) -> MomentSystem {
    let (w, g, l, b) = (cfg.omega, cfg.gamma_x, cfg.lambda_x, cfg.cx);
    let ob = 1.0 - b;
    #[rustfmt::skip]
    let matrix = DMatrix::from_row_slice(4, 4, &[
        -2.0 * g * b, g * b * ob,  0.0, 0.0,
        2.0 * g,     -g,           w,   g * b * ob,
        0.0,         -w,          -g,   0.0,
        0.0,          2.0 * g,     0.0, -2.0 * g * ob,
    ]);
    let source = DVector::from_vec(vec![
        l + b * b * g * g / (4.0 * l),
        -b * g * g / (2.0 * l),
        0.0,
        g * g / (2.0 * l),
    ]);
    let u = e(0) - e(2) * b;
    let v = e(1) - e(3) * b;
    let (dx, dp) = (e(2), e(3));
    MomentSystem {
        kind: SystemKind::XP,
        cfg: *cfg,
        matrix,
        source,
        labels: vec![
            "<(x-bDx)^2+(p-bDp)^2>/2",
            "<(x-bDx)Dx+(p-bDp)Dp>",
            "<(p-bDp)Dx-(x-bDx)Dp>",
            "<Dx^2+Dp^2>",
        ],
        projections: vec![
            (u * u.transpose() + v * v.transpose()) * 0.5,
            sym(&u, &dx) + sym(&v, &dp),
            sym(&v, &dx) - sym(&u, &dp),
            dx * dx.transpose() + dp * dp.transpose(),
        ],
        energy: AffineMap::linear(vec![2.0, 0.0, 0.0, 0.0]),
        var_x: Some(AffineMap::linear(vec![1.0, b, 0.0, b * b / 2.0])),
        indices: (0..4).collect(),
    }
}

fn build_c(cfg: &ProtocolConfig) -> MomentSystem {
    let (w, g, l, mu) = (cfg.omega, cfg.gamma_x, cfg.lambda_x, cfg.bx);
    let bath = cfg.bath_coupling;
    let th = bath * w * (cfg.nbar + 0.5) / 2.0;
    #[rustfmt::skip]
    let matrix = DMatrix::from_row_slice(6, 6, &[
        -bath,         0.0,      w,        -mu * w * w,              0.0,                    0.0,
        0.0,          -bath,    -w,         0.0,                     bath * w * mu / 2.0,    0.0,
        -2.0 * w,      2.0 * w, -bath,      bath * w * mu / 2.0,    -mu * w * w,             0.0,
        2.0 * g / w,   0.0,      0.0,      -g - bath / 2.0,          w,                     -mu * w,
        0.0,           0.0,      g / w,    -w,                      -g - bath / 2.0,         bath * mu / 2.0,
        0.0,           0.0,      0.0,       2.0 * g,                 0.0,                   -2.0 * g,
    ]);
    let source = DVector::from_vec(vec![th, w * l / 2.0 + th, 0.0, 0.0, 0.0, g * g / (4.0 * l)]);
    let (x, p, d) = (e(0), e(1), e(2));
    MomentSystem {
        kind: SystemKind::C,
        cfg: *cfg,
        matrix,
        source,
        labels: vec![
            "w<x^2>/2",
            "w<p^2>/2",
            "w<xp+px>/2",
            "<Dx x>",
            "<Dx p>",
            "<Dx^2>",
        ],
        projections: vec![
            x * x.transpose() * (w / 2.0),
            p * p.transpose() * (w / 2.0),
            sym(&x, &p) * w,
            sym(&d, &x),
            sym(&d, &p),
            d * d.transpose(),
        ],
        energy: AffineMap::linear(vec![2.0 / w, 2.0 / w, 0.0, 0.0, -2.0 * mu, mu * mu]),
        var_x: Some(AffineMap::linear(vec![2.0 / w, 0.0, 0.0, 0.0, 0.0, 0.0])),
        indices: (0..6).collect(),
    }
}

fn build_x_thermal(cfg: &ProtocolConfig) -> MomentSystem {
    let (w, g, l) = (cfg.omega, cfg.gamma_x, cfg.lambda_x);
    let bath = cfg.bath_coupling;
    let th = bath * w * (cfg.nbar + 0.5);
    #[rustfmt::skip]
    let matrix = DMatrix::from_row_slice(4, 4, &[
        -2.0 * g - bath, 0.0,   w * w / 2.0,  0.0,
        0.0,            -bath, -w * w / 2.0,  0.0,
        -4.0,            4.0,  -g - bath,     0.0,
        -2.0 * g,        0.0,   0.0,         -bath,
    ]);
    let source = DVector::from_vec(vec![
        w * g * g / (8.0 * l) + th / 2.0,
        w * l / 2.0 + th / 2.0,
        0.0,
        w * l / 2.0 + w * g * g / (8.0 * l) + th,
    ]);
    let u = e(0) - e(2);
    let p = e(1);
    let vv = u * u.transpose() * (w / 2.0);
    let kk = p * p.transpose() * (w / 2.0);
    MomentSystem {
        kind: SystemKind::XThermalB1,
        cfg: *cfg,
        matrix,
        source,
        labels: vec!["V = w<(x-Dx)^2>/2", "K = w<p^2>/2", "G = <{x-Dx,p}>", "H = V+K"],
        projections: vec![vv, kk, sym(&u, &p) * 2.0, vv + kk],
        energy: AffineMap::linear(vec![0.0, 0.0, 0.0, 2.0 / w]),
        var_x: None,
        indices: (0..4).collect(),
    }
}

fn build_xp_thermal(cfg: &ProtocolConfig) -> MomentSystem {
    let (w, g, l) = (cfg.omega, cfg.gamma_x, cfg.lambda_x);
    let bath = cfg.bath_coupling;
    let th = bath * w * (cfg.nbar + 0.5);
    let k = 2.0 * g + bath;
    let drive = w * l / 2.0 + w * g * g / (8.0 * l);
    #[rustfmt::skip]
    let matrix = DMatrix::from_row_slice(4, 4, &[
        -k,   0.0,  w * w / 2.0,  0.0,
        0.0, -k,   -w * w / 2.0,  0.0,
        -4.0, 4.0, -k,            0.0,
        0.0,  0.0,  0.0,         -k,
    ]);
    let source = DVector::from_vec(vec![drive + th / 2.0, drive + th / 2.0, 0.0, 2.0 * drive + th]);
    let u = e(0) - e(2);
    let v = e(1) - e(3);
    let vv = u * u.transpose() * (w / 2.0);
    let kk = v * v.transpose() * (w / 2.0);
    MomentSystem {
        kind: SystemKind::XPThermalB1,
        cfg: *cfg,
        matrix,
        source,
        labels: vec![
            "V = w<(x-Dx)^2>/2",
            "K = w<(p-Dp)^2>/2",
            "G = <{x-Dx,p-Dp}>",
            "H = V+K",
        ],
        projections: vec![vv, kk, sym(&u, &v) * 2.0, vv + kk],
        energy: AffineMap::linear(vec![0.0, 0.0, 0.0, 2.0 / w]),
        var_x: None,
        indices: (0..4).collect(),
    }
}

impl MomentSystem {
    pub fn dim(&self) -> usize {
        self.source.len()
    }

    /// `ν = (tr(Wᵢ S))ᵢ`.
    pub fn project(&self, s: &Matrix4<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.projections.iter().map(|w| w.component_mul(s).sum()),
        )
    }

    /// Moment vector of a Gaussian state with a sharp detector reading.
    pub fn initial_moments(&self, state: &GaussianState, det: &DetectorState) -> DVector<f64> {
        self.project(&second_moments(state, det))
    }

    /// `M·ν + s`.
    pub fn rhs(&self, nu: &DVector<f64>) -> DVector<f64> {
        &self.matrix * nu + &self.source
    }

    pub fn observables(&self, nu: &DVector<f64>) -> Result<Observables, MomentError> {
        self.check_dim(nu)?;
        Ok(Observables {
            energy: self.energy.eval(nu),
            var_x: self.var_x.as_ref().map(|m| m.eval(nu)),
        })
    }

    fn check_dim(&self, nu: &DVector<f64>) -> Result<(), MomentError> {
        if nu.len() != self.dim() {
            return Err(MomentError::Dimension {
                expected: self.dim(),
                got: nu.len(),
            });
        }
        Ok(())
    }

    /// Smallest set of coordinates that contains the energy's support and is
    /// closed under the dynamics (no coupling from outside the set).
    pub fn energy_closure(&self) -> Vec<usize> {
        let n = self.dim();
        let mut inside = vec![false; n];
        let mut stack: Vec<usize> = self.energy.support().collect();
        while let Some(i) = stack.pop() {
            if inside[i] {
                continue;
            }
            inside[i] = true;
            stack.extend((0..n).filter(|&j| self.matrix[(i, j)] != 0.0 && !inside[j]));
        }
        (0..n).filter(|&i| inside[i]).collect()
    }

    /// The system restricted to [`energy_closure`](Self::energy_closure).
    ///
    /// At b = 1 this is the closed (ν1, ν2, ν3) block for X and the single
    /// ν1 equation for XP, both free of the marginal detector-diffusion mode.
    pub fn energy_subsystem(&self) -> MomentSystem {
        let idx = self.energy_closure();
        let restrict = |m: &AffineMap| -> Option<AffineMap> {
            let outside = m
                .coeffs
                .iter()
                .enumerate()
                .any(|(i, c)| *c != 0.0 && !idx.contains(&i));
            (!outside).then(|| AffineMap {
                coeffs: idx.iter().map(|&i| m.coeffs[i]).collect(),
                offset: m.offset,
            })
        };
        MomentSystem {
            kind: self.kind,
            cfg: self.cfg,
            matrix: self.matrix.select_rows(&idx).select_columns(&idx),
            source: self.source.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            projections: idx.iter().map(|&i| self.projections[i]).collect(),
            energy: restrict(&self.energy).expect("closure contains the energy support"),
            var_x: self.var_x.as_ref().and_then(restrict),
            indices: idx.iter().map(|&i| self.indices[i]).collect(),
        }
    }

    pub fn spectrum(&self) -> Result<Spectrum, MomentError> {
        Ok(eigenvalues(&self.matrix)?)
    }

    /// Solves `M·ν∞ = −s`.
    pub fn fixed_point(&self) -> Result<DVector<f64>, MomentError> {
        fixed_point(self)
    }

    pub fn relaxation_rate(&self) -> Result<Relaxation, MomentError> {
        relaxation_rate(self)
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Stationary moments: `M·ν∞ = −s` by LU with partial pivoting plus one step
/// of iterative refinement.
pub fn fixed_point(sys: &MomentSystem) -> Result<DVector<f64>, MomentError> {
    let scale = max_abs(&sys.matrix).max(f64::MIN_POSITIVE);
    let lu = sys.matrix.clone().lu();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if min_pivot <= 1e-12 * scale {
        return Err(MomentError::SingularSystem {
            null_direction: null_direction(&sys.matrix),
        });
    }
    let rhs = -&sys.source;
    let mut nu = lu.solve(&rhs).ok_or_else(|| MomentError::SingularSystem {
        null_direction: null_direction(&sys.matrix),
    })?;
    let r = &rhs - &sys.matrix * &nu;
    if let Some(dx) = lu.solve(&r) {
        nu += dx;
    }
    Ok(nu)
}

fn null_direction(m: &DMatrix<f64>) -> Vec<f64> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    v_t.row(k).iter().copied().collect()
}

/// Slowest decay rate of the energy-determining block.
///
/// Modes with `|Re λ| ≤ 1e-9·max|Mᵢⱼ|` are treated as marginal and returned
/// separately.
pub fn relaxation_rate(sys: &MomentSystem) -> Result<Relaxation, MomentError> {
    let block = sys.energy_subsystem();
    let eps = 1e-9 * max_abs(&block.matrix);
    let spectrum = eigenvalues(&block.matrix)?;
    let mut marginal = vec![];
    let mut rate = f64::INFINITY;
    for &z in &spectrum.eigenvalues {
        if z.re > eps {
            return Err(MomentError::Unstable { eigenvalue: z });
        }
        if z.re.abs() <= eps {
            marginal.push(z);
        } else {
            rate = rate.min(-z.re);
        }
    }
    if !rate.is_finite() {
        return Err(MomentError::NoDecayingMode);
    }
    Ok(Relaxation {
        rate,
        marginal,
        spectrum,
    })
}

/// Largest step accepted by [`integrate`]: `0.1/‖M‖∞`, a bound on
/// `0.1/max|λ|`.
pub fn max_step(sys: &MomentSystem) -> f64 {
    let norm = sys
        .matrix
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if norm == 0.0 {
        f64::INFINITY
    } else {
        0.1 / norm
    }
}

pub(crate) fn step_count(t_final: f64, dt: f64) -> Result<usize, MomentError> {
    let ratio = t_final / dt;
    let n = ratio.round();
    if !(ratio.is_finite() && n >= 0.0 && (ratio - n).abs() <= 1e-9 * n.max(1.0)) {
        return Err(MomentError::NonIntegerSteps { ratio });
    }
    Ok(n as usize)
}

/// RK4 solution sampled at every step.
pub fn integrate(
    sys: &MomentSystem,
    nu0: &DVector<f64>,
    t_final: f64,
    dt: f64,
) -> Result<MomentSeries, MomentError> {
    integrate_strided(sys, nu0, t_final, dt, 1)
}

/// RK4 solution sampled every `stride` steps (and at `t_final`).
pub fn integrate_strided(
    sys: &MomentSystem,
    nu0: &DVector<f64>,
    t_final: f64,
    dt: f64,
    stride: usize,
) -> Result<MomentSeries, MomentError> {
    sys.check_dim(nu0)?;
    let max_dt = max_step(sys);
    if !(dt > 0.0 && dt <= max_dt) {
        return Err(MomentError::StepGuard { dt, max_dt });
    }
    let n = step_count(t_final, dt)?;
    let stride = stride.max(1);
    let mut times = vec![0.0];
    let mut values = vec![nu0.clone()];
    let mut nu = nu0.clone();
    for k in 1..=n {
        let k1 = sys.rhs(&nu);
        let k2 = sys.rhs(&(&nu + &k1 * (dt / 2.0)));
        let k3 = sys.rhs(&(&nu + &k2 * (dt / 2.0)));
        let k4 = sys.rhs(&(&nu + &k3 * dt));
        nu += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if k % stride == 0 || k == n {
            times.push(k as f64 * dt);
            values.push(nu.clone());
        }
    }
    Ok(MomentSeries { times, values })
}

/// Observables of `kind` for `cfg` at moment vector `nu`.
pub fn observables(
    kind: SystemKind,
    cfg: &ProtocolConfig,
    nu: &DVector<f64>,
) -> Result<Observables, MomentError> {
    build_system(cfg, kind)?.observables(nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProtocolKind as P;
    use proptest::prelude::*;

    fn cfg(kind: P, w: f64, l: f64, g: f64, gain: f64) -> ProtocolConfig {
        ProtocolConfig::preset(kind, w, l, g, gain).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn x_b1_block_is_closed() {
        let sys = build_system(&cfg(P::X, 1.0, 0.1, 0.2, 1.0), SystemKind::X).unwrap();
        for i in 0..3 {
            for j in 3..6 {
                assert_eq!(sys.matrix[(i, j)], 0.0);
            }
        }
        assert_eq!(sys.energy_closure(), vec![0, 1, 2]);
    }

    #[test]
    fn c_source_without_bath() {
        let sys = build_system(&cfg(P::C, 1.0, 0.01, 10.0, 0.02), SystemKind::C).unwrap();
        let want = [0.0, 0.005, 0.0, 0.0, 0.0, 100.0 / 0.04];
        for (a, b) in sys.source.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn xp_source_carries_backaction() {
        let (l, g, b) = (0.1, 0.4, 0.5);
        let sys = build_system(&cfg(P::XP, 1.0, l, g, b), SystemKind::XP).unwrap();
        let want = [l + b * b * g * g / (4.0 * l), -b * g * g / (2.0 * l), 0.0, g * g / (2.0 * l)];
        for (a, b) in sys.source.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let x = cfg(P::X, 1.0, 0.1, 0.2, 0.5);
        assert!(matches!(build_system(&x, SystemKind::XP), Err(MomentError::Mismatch { .. })));
        assert!(matches!(
            build_system(&x, SystemKind::XThermalB1),
            Err(MomentError::Mismatch { .. })
        ));
        let hot = cfg(P::X, 1.0, 0.1, 0.2, 1.0).with_bath(0.1, 1.0).unwrap();
        assert!(build_system(&hot, SystemKind::X).is_err());
        assert!(build_system(&hot, SystemKind::XThermalB1).is_ok());
    }

    #[test]
    fn fixed_point_examples() {
        let sys = build_system(&cfg(P::X, 1.0, 0.1, 1.0, 0.5), SystemKind::X).unwrap();
        let nu = sys.fixed_point().unwrap();
        // ν̇2 = −(ω/2)ν3 + λ/2 pins ν3∞ = λ/ω
        assert!((nu[2] - 0.1).abs() < 1e-12);
        assert!((nu[3] - 0.1).abs() < 1e-12);
        assert!((nu[4] + 0.1).abs() < 1e-12);

        let sys = build_system(&cfg(P::XP, 1.0, 0.1, 0.4, 0.5), SystemKind::XP).unwrap();
        let nu = sys.fixed_point().unwrap();
        assert!((nu[2] + 0.2).abs() < 1e-12);

        let sys = build_system(&cfg(P::C, 1.0, 0.01, 10.0, 0.02), SystemKind::C).unwrap();
        let nu = sys.fixed_point().unwrap();
        assert!((nu[2] - 0.005).abs() < 1e-12);
        assert!((nu[3] - 0.25).abs() < 1e-12);
        let obs = sys.observables(&nu).unwrap();
        assert!((obs.energy - 1.0555).abs() < 1e-12);
        assert!((obs.var_x.unwrap() - 0.5025).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_residual() {
        for sys in [
            build_system(&cfg(P::X, 1.0, 0.05, 0.3, 0.4), SystemKind::X).unwrap(),
            build_system(&cfg(P::XP, 2.0, 0.05, 0.3, 0.7), SystemKind::XP).unwrap(),
            build_system(&cfg(P::C, 1.0, 0.02, 5.0, 0.04), SystemKind::C).unwrap(),
        ] {
            let nu = sys.fixed_point().unwrap();
            let r = (&sys.matrix * &nu + &sys.source).amax();
            assert!(r < 1e-10 * sys.source.amax());
        }
    }

    #[test]
    fn b1_is_singular_but_energy_block_is_not() {
        let sys = build_system(&cfg(P::X, 1.0, 0.1, 0.2, 1.0), SystemKind::X).unwrap();
        match sys.fixed_point() {
            Err(MomentError::SingularSystem { null_direction }) => {
                // the marginal direction is the detector spread ν6
                let (k, _) = null_direction
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap();
                assert_eq!(k, 5);
            }
            other => panic!("expected SingularSystem, got {other:?}"),
        }
        let block = sys.energy_subsystem();
        assert_eq!(block.dim(), 3);
        let e = block.observables(&block.fixed_point().unwrap()).unwrap();
        assert!(rel(e.energy, 1.01) < 1e-12);
        assert!(e.var_x.is_none());

        let sys = build_system(&cfg(P::XP, 1.0, 0.1, 0.2, 1.0), SystemKind::XP).unwrap();
        assert!(matches!(sys.fixed_point(), Err(MomentError::SingularSystem { .. })));
        let block = sys.energy_subsystem();
        assert_eq!(block.dim(), 1);
        let e = block.observables(&block.fixed_point().unwrap()).unwrap();
        assert_eq!(e.energy, 1.0);
    }

    #[test]
    fn relaxation_examples() {
        let g = 0.3;
        let r = build_system(&cfg(P::XP, 1.0, 0.1, g, 1.0), SystemKind::XP)
            .unwrap()
            .relaxation_rate()
            .unwrap();
        assert!((r.rate - 2.0 * g).abs() < 1e-9);

        let r = build_system(&cfg(P::X, 1.0, 0.1, g, 1.0), SystemKind::X)
            .unwrap()
            .relaxation_rate()
            .unwrap();
        assert!((r.rate - g).abs() < 1e-9);

        let r = build_system(&cfg(P::X, 10.0, 0.01, 0.1, 0.3), SystemKind::X)
            .unwrap()
            .relaxation_rate()
            .unwrap();
        assert!(rel(r.rate, 0.03) < 0.1);
    }

    #[test]
    fn xp_spectrum_at_b1() {
        let (w, g) = (1.3, 0.4);
        let sys = build_system(&cfg(P::XP, w, 0.1, g, 1.0), SystemKind::XP).unwrap();
        let s = sys.spectrum().unwrap();
        let want = [
            Complex64::new(-2.0 * g, 0.0),
            Complex64::new(-g, -w),
            Complex64::new(-g, w),
            Complex64::new(0.0, 0.0),
        ];
        for (z, e) in s.eigenvalues.iter().zip(want) {
            assert!((z - e).norm() < 1e-9, "{z} vs {e}");
        }
    }

    #[test]
    fn unstable_gain_is_reported() {
        let sys = build_system(&cfg(P::XP, 1.0, 0.1, 0.3, 1.5), SystemKind::XP).unwrap();
        assert!(matches!(sys.relaxation_rate(), Err(MomentError::Unstable { .. })));
    }

    #[test]
    fn integrate_zero_stays_zero() {
        let mut sys = build_system(&cfg(P::X, 1.0, 0.1, 0.2, 0.5), SystemKind::X).unwrap();
        sys.source.fill(0.0);
        let out = integrate(&sys, &DVector::zeros(6), 1.0, 0.01).unwrap();
        assert!(out.values.iter().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn integrate_reaches_fixed_point() {
        let sys = build_system(&cfg(P::XP, 1.0, 0.1, 0.4, 0.5), SystemKind::XP).unwrap();
        let chi = sys.relaxation_rate().unwrap().rate;
        let nu_inf = sys.fixed_point().unwrap();
        let dt = 0.01;
        let t = (30.0 / chi / dt).ceil() * dt;
        let out = integrate_strided(&sys, &DVector::zeros(4), t, dt, 1000).unwrap();
        let last = out.values.last().unwrap();
        assert!((last - &nu_inf).norm() < 1e-6 * nu_inf.norm());
        assert!((out.times.last().unwrap() - t).abs() < 1e-9);
    }

    #[test]
    fn integrate_matches_exponential() {
        let sys = build_system(&cfg(P::C, 1.0, 0.05, 2.0, 0.1), SystemKind::C).unwrap();
        let nu0 = sys.initial_moments(&GaussianState::GROUND, &DetectorState::default());
        let nu_inf = sys.fixed_point().unwrap();
        let t = 3.0;
        let exact = (&sys.matrix * t).exp() * (&nu0 - &nu_inf) + &nu_inf;
        let out = integrate(&sys, &nu0, t, 1e-3).unwrap();
        assert!((out.values.last().unwrap() - exact).amax() < 1e-8);
    }

    #[test]
    fn xp_b1_energy_decays_exponentially() {
        let g = 0.2;
        let sys = build_system(&cfg(P::XP, 1.0, 0.1, g, 1.0), SystemKind::XP).unwrap();
        let start = GaussianState::new(0.0, 0.0, 2.0, 2.0, 0.0).unwrap();
        let nu0 = sys.initial_moments(&start, &DetectorState::default());
        let out = integrate_strided(&sys, &nu0, 20.0, 1e-3, 100).unwrap();
        // ln(E − 1) should be linear with slope −2γ
        let pts: Vec<(f64, f64)> = out
            .times
            .iter()
            .zip(&out.values)
            .map(|(t, v)| (*t, (sys.observables(v).unwrap().energy - 1.0).ln()))
            .collect();
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / n, sy / n);
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let resid = pts
            .iter()
            .map(|p| (p.1 - (my + slope * (p.0 - mx))).abs())
            .fold(0.0, f64::max);
        assert!((slope + 2.0 * g).abs() < 1e-6);
        assert!(resid < 1e-6);
    }

    #[test]
    fn step_guard() {
        let sys = build_system(&cfg(P::C, 1.0, 0.01, 100.0, 0.02), SystemKind::C).unwrap();
        assert!(matches!(
            integrate(&sys, &DVector::zeros(6), 1.0, 0.01),
            Err(MomentError::StepGuard { .. })
        ));
        let sys = build_system(&cfg(P::X, 1.0, 0.1, 0.2, 0.5), SystemKind::X).unwrap();
        assert!(matches!(
            integrate(&sys, &DVector::zeros(6), 1.0, 0.003),
            Err(MomentError::NonIntegerSteps { .. })
        ));
    }

    #[test]
    fn observables_dimension_check() {
        let sys = build_system(&cfg(P::X, 1.0, 0.1, 0.2, 0.5), SystemKind::X).unwrap();
        assert!(matches!(
            sys.observables(&DVector::zeros(4)),
            Err(MomentError::Dimension { expected: 6, got: 4 })
        ));
    }

    fn random_cfg(kind: SystemKind, r: &[f64]) -> ProtocolConfig {
        let w = 0.5 + 2.0 * r[0];
        let l = 0.02 + r[1];
        let g = 0.1 + 3.0 * r[2];
        let gain = match kind {
            SystemKind::XThermalB1 | SystemKind::XPThermalB1 => 1.0,
            _ => 0.05 + 1.4 * r[3],
        };
        let c = ProtocolConfig::preset(kind.protocol(), w, l, g, gain).unwrap();
        match kind {
            SystemKind::X | SystemKind::XP => c,
            _ => c.with_bath(2.0 * r[4], 3.0 * r[5]).unwrap(),
        }
    }

    fn random_moments(r: &[f64]) -> Matrix4<f64> {
        let a = Matrix4::from_fn(|i, j| r[i * 4 + j] - 0.5);
        a * a.transpose() + Matrix4::identity() * 0.1
    }

    fn uuv(cfg: &ProtocolConfig) -> (Vector4<f64>, Vector4<f64>) {
        let u = Vector4::new(1.0, 0.0, -cfg.cx, -cfg.cp);
        let v = Vector4::new(0.0, 1.0, -cfg.bx, -cfg.bp);
        (u, v)
    }

    proptest! {
        /// The hand-entered matrices agree with the moment generator
        /// `Ṡ = A S + S Aᵀ + N` on arbitrary second-moment matrices.
        #[test]
        fn handwritten_matches_generator(
            kind in prop_oneof![
                Just(SystemKind::X), Just(SystemKind::XP), Just(SystemKind::C),
                Just(SystemKind::XThermalB1), Just(SystemKind::XPThermalB1)
            ],
            p in proptest::collection::vec(0.0f64..1.0, 6),
            s in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let cfg = random_cfg(kind, &p);
            let sys = build_system(&cfg, kind).unwrap();
            let (a, n) = covariance_generator(&cfg);
            let sm = random_moments(&s);
            let sdot = a * sm + sm * a.transpose() + n;
            let want = sys.project(&sdot);
            let got = sys.rhs(&sys.project(&sm));
            for i in 0..sys.dim() {
                prop_assert!((want[i] - got[i]).abs() < 1e-10 * (1.0 + want[i].abs()),
                    "{kind} row {i}: generator {} vs handwritten {}", want[i], got[i]);
            }
            // energy map against ⟨u²⟩ + ⟨v²⟩
            let (u, v) = uuv(&cfg);
            let e = (u.transpose() * sm * u + v.transpose() * sm * v)[0];
            let nu = sys.project(&sm);
            prop_assert!((sys.energy.eval(&nu) - e).abs() < 1e-10 * (1.0 + e.abs()));
            // ⟨x²⟩, using the rotation-averaged second moments for XP
            if let Some(m) = &sys.var_x {
                let x2 = if kind == SystemKind::XP {
                    (sm[(0, 0)] + sm[(1, 1)]) / 2.0
                } else {
                    sm[(0, 0)]
                };
                prop_assert!((m.eval(&nu) - x2).abs() < 1e-10 * (1.0 + x2.abs()));
            }
        }
    }
}
