//! Shared domain types: the unified quadratic-feedback configuration, the
//! Gaussian conditional state, detector outcomes and the energy functional.
//!
//! Everything is dimensionless with ħ = 1. Energies are reported in units of
//! ħω/2, so the oscillator ground state reads `1.0`.
//!
//! The feedback Hamiltonian covering every protocol is
//!
//! ```text
//! H(D) = (ω/2) [ (p − bx·Dx − bp·Dp)² + (x − cx·Dx − cp·Dp)² ]
//! ```
//!
//! and the three presets are
//!
//! | protocol | measured | gains                         |
//! |----------|----------|-------------------------------|
//! | X        | x        | cx = b                        |
//! | XP       | x, p     | cx = b, bp = b                |
//! | C        | x        | bx = μ                        |

use std::fmt;

use thiserror::Error;

/// Absolute slack allowed on the Heisenberg bound `Vx·Vp − C²/4 ≥ 1/4`.
pub const HEISENBERG_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("`{field}` must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("`{field}` must be non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("`{field}` must be finite, got {value}")]
    NotFinite { field: &'static str, value: f64 },
    #[error("channel {channel} is inactive but `{field}` = {value} is non-zero")]
    InactiveChannelGain {
        channel: Channel,
        field: &'static str,
        value: f64,
    },
    #[error("channel {channel}: active flag does not match lambda = {lambda}")]
    ChannelFlag { channel: Channel, lambda: f64 },
    #[error("invalid Gaussian state: {0}")]
    State(String),
}

/// Measurement channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    X,
    P,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::X => f.write_str("x"),
            Channel::P => f.write_str("p"),
        }
    }
}

/// The three feedback protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    /// Trap displacement from a position measurement.
    X,
    /// Trap displacement in both quadratures from position and momentum measurements.
    XP,
    /// Momentum kick from a position measurement (cross feedback).
    C,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 3] = [ProtocolKind::X, ProtocolKind::XP, ProtocolKind::C];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::X => "X",
            ProtocolKind::XP => "XP",
            ProtocolKind::C => "C",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "X" => Ok(ProtocolKind::X),
            "XP" => Ok(ProtocolKind::XP),
            "C" => Ok(ProtocolKind::C),
            other => Err(format!("unknown protocol `{other}` (expected X, XP or C)")),
        }
    }
}

/// Unified quadratic-feedback parameter set.
///
/// Construct through [`ProtocolConfig::preset`] or fill the fields and call
/// [`ProtocolConfig::validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub omega: f64,
    pub lambda_x: f64,
    pub lambda_p: f64,
    pub gamma_x: f64,
    pub gamma_p: f64,
    pub bx: f64,
    pub bp: f64,
    pub cx: f64,
    pub cp: f64,
    /// Bath coupling rate Γ.
    pub bath_coupling: f64,
    /// Bath mean occupation n̄.
    pub nbar: f64,
    pub channel_x_active: bool,
    pub channel_p_active: bool,
}

impl ProtocolConfig {
    /// Builds one of the three protocol presets.
    ///
    /// `gain` is `b` for X and XP, `μ` for C. For XP both channels share
    /// `lambda` and `gamma`.
    pub fn preset(
        kind: ProtocolKind,
        omega: f64,
        lambda: f64,
        gamma: f64,
        gain: f64,
    ) -> Result<Self, ConfigError> {
        positive("omega", omega)?;
        positive("lambda", lambda)?;
        positive("gamma", gamma)?;
        positive("gain", gain)?;
        let mut cfg = ProtocolConfig {
            omega,
            lambda_x: lambda,
            lambda_p: 0.0,
            gamma_x: gamma,
            gamma_p: 0.0,
            bx: 0.0,
            bp: 0.0,
            cx: 0.0,
            cp: 0.0,
            bath_coupling: 0.0,
            nbar: 0.0,
            channel_x_active: true,
            channel_p_active: false,
        };
        match kind {
            ProtocolKind::X => cfg.cx = gain,
            ProtocolKind::XP => {
                cfg.cx = gain;
                cfg.bp = gain;
                cfg.lambda_p = lambda;
                cfg.gamma_p = gamma;
                cfg.channel_p_active = true;
            }
            ProtocolKind::C => cfg.bx = gain,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Couples the oscillator to a thermal bath with rate `coupling` and
    /// occupation `nbar`.
    pub fn with_bath(mut self, coupling: f64, nbar: f64) -> Result<Self, ConfigError> {
        non_negative("Gamma", coupling)?;
        non_negative("nbar", nbar)?;
        self.bath_coupling = coupling;
        self.nbar = nbar;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("omega", self.omega)?;
        for (field, v) in [
            ("lambda_x", self.lambda_x),
            ("lambda_p", self.lambda_p),
            ("gamma_x", self.gamma_x),
            ("gamma_p", self.gamma_p),
            ("Gamma", self.bath_coupling),
            ("nbar", self.nbar),
        ] {
            non_negative(field, v)?;
        }
        for (field, v) in [("bx", self.bx), ("bp", self.bp), ("cx", self.cx), ("cp", self.cp)] {
            finite(field, v)?;
        }
        for (channel, active, lambda, gamma, gains) in [
            (
                Channel::X,
                self.channel_x_active,
                self.lambda_x,
                self.gamma_x,
                [("bx", self.bx), ("cx", self.cx)],
            ),
            (
                Channel::P,
                self.channel_p_active,
                self.lambda_p,
                self.gamma_p,
                [("bp", self.bp), ("cp", self.cp)],
            ),
        ] {
            if active != (lambda > 0.0) {
                return Err(ConfigError::ChannelFlag { channel, lambda });
            }
            if active {
                let field = if channel == Channel::X { "gamma_x" } else { "gamma_p" };
                positive(field, gamma)?;
            } else {
                for (field, value) in gains {
                    if value != 0.0 {
                        return Err(ConfigError::InactiveChannelGain {
                            channel,
                            field,
                            value,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Recognizes which preset (if any) this configuration is.
    pub fn kind(&self) -> Option<ProtocolKind> {
        let x_only = self.channel_x_active && !self.channel_p_active;
        if x_only && self.bx == 0.0 && self.cx > 0.0 {
            return Some(ProtocolKind::X);
        }
        if x_only && self.cx == 0.0 && self.bx > 0.0 {
            return Some(ProtocolKind::C);
        }
        if self.channel_x_active
            && self.channel_p_active
            && self.bx == 0.0
            && self.cp == 0.0
            && self.cx == self.bp
            && self.cx > 0.0
        {
            return Some(ProtocolKind::XP);
        }
        None
    }

    /// Gain of the preset: `b` for X/XP, `μ` for C.
    pub fn gain(&self) -> f64 {
        match self.kind() {
            Some(ProtocolKind::C) => self.bx,
            _ => self.cx,
        }
    }

    /// Shared measurement strength; for XP this is the x channel's value.
    pub fn lambda(&self) -> f64 {
        self.lambda_x
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_x
    }

    /// Position the trap centre is moved to: `cx·Dx + cp·Dp`.
    #[inline]
    pub fn trap_x(&self, det: &DetectorState) -> f64 {
        self.cx * det.d_x + self.cp * det.d_p
    }

    /// Momentum shift: `bx·Dx + bp·Dp`.
    #[inline]
    pub fn trap_p(&self, det: &DetectorState) -> f64 {
        self.bx * det.d_x + self.bp * det.d_p
    }

    /// Largest rate in the problem; sets the stochastic step guard.
    pub fn max_rate(&self) -> f64 {
        [
            self.omega,
            self.gamma_x,
            self.gamma_p,
            self.lambda_x,
            self.lambda_p,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// First and second cumulants of a Gaussian conditional wavefunction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianState {
    pub mean_x: f64,
    pub mean_p: f64,
    pub var_x: f64,
    pub var_p: f64,
    /// `⟨xp + px⟩ − 2⟨x⟩⟨p⟩`.
    pub cov: f64,
}

impl GaussianState {
    /// Oscillator ground state centred at the origin.
    pub const GROUND: GaussianState = GaussianState {
        mean_x: 0.0,
        mean_p: 0.0,
        var_x: 0.5,
        var_p: 0.5,
        cov: 0.0,
    };

    pub fn new(mean_x: f64, mean_p: f64, var_x: f64, var_p: f64, cov: f64) -> Result<Self, ConfigError> {
        let s = GaussianState {
            mean_x,
            mean_p,
            var_x,
            var_p,
            cov,
        };
        s.validate()?;
        Ok(s)
    }

    /// `Vx·Vp − C²/4`; equals 1/4 for a pure state.
    #[inline]
    pub fn purity(&self) -> f64 {
        self.var_x * self.var_p - 0.25 * self.cov * self.cov
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = [self.mean_x, self.mean_p, self.var_x, self.var_p, self.cov];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::State("non-finite component".into()));
        }
        if self.var_x <= 0.0 || self.var_p <= 0.0 {
            return Err(ConfigError::State(format!(
                "variances must be positive (Vx = {}, Vp = {})",
                self.var_x, self.var_p
            )));
        }
        if self.purity() < 0.25 - HEISENBERG_TOL {
            return Err(ConfigError::State(format!(
                "Heisenberg bound violated: Vx·Vp − C²/4 = {}",
                self.purity()
            )));
        }
        Ok(())
    }
}

impl Default for GaussianState {
    fn default() -> Self {
        Self::GROUND
    }
}

/// Filtered detector outcomes. An inactive channel stays at exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectorState {
    pub d_x: f64,
    pub d_p: f64,
}

/// Expected feedback energy `2⟨H⟩/ω` of a Gaussian state (units of ħω/2).
pub fn energy_expectation(state: &GaussianState, det: &DetectorState, cfg: &ProtocolConfig) -> f64 {
    let dx = state.mean_x - cfg.trap_x(det);
    let dp = state.mean_p - cfg.trap_p(det);
    state.var_x + dx * dx + state.var_p + dp * dp
}

fn positive(field: &'static str, value: f64) -> Result<(), ConfigError> {
    finite(field, value)?;
    if value > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::NonPositive { field, value })
    }
}

fn non_negative(field: &'static str, value: f64) -> Result<(), ConfigError> {
    finite(field, value)?;
    if value >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Negative { field, value })
    }
}

fn finite(field: &'static str, value: f64) -> Result<(), ConfigError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::NotFinite { field, value })
    }
}
