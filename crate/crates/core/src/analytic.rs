//! Closed-form asymptotics: energies, position variances, optimal gains,
//! relaxation rates and thermal-bath averages.
//!
//! Energies are in units of ħω/2. `gain` is `b` for X and XP and `μ` for C.

use num_complex::Complex64;
use thiserror::Error;

use crate::model::{ProtocolConfig, ProtocolKind};

/// Factor taken to mean "much larger than" when choosing a regime formula.
pub const SEPARATION: f64 = 10.0;

/// Largest μ for which the small-gain Protocol C rate `μω` is applied.
pub const SMALL_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error("`{field}` must be positive and finite, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("gain {gain} is outside (0, 1] for protocol {kind}")]
    GainDomain { kind: ProtocolKind, gain: f64 },
    #[error("optimal gain {gain} is not below 1; the formula is outside its validity range")]
    OutOfValidity { gain: f64 },
    #[error("configuration is not one of the X, XP, C presets")]
    NotPreset,
}

/// Asymptotic position variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarX {
    Finite(f64),
    /// The particle is cooled but not trapped.
    Divergent,
}

impl VarX {
    pub fn finite(self) -> Option<f64> {
        match self {
            VarX::Finite(v) => Some(v),
            VarX::Divergent => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Energy,
    Variance,
}

/// A relaxation rate from a regime formula, or the reason none applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Known { rate: f64, regime: &'static str },
    Unknown { reason: &'static str },
}

impl Rate {
    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Known { rate, .. } => Some(rate),
            Rate::Unknown { .. } => None,
        }
    }
}

fn check(field: &'static str, value: f64) -> Result<(), AnalyticError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(AnalyticError::NonPositive { field, value })
    }
}

fn check_all(omega: f64, gamma: f64, lambda: f64, gain: f64) -> Result<(), AnalyticError> {
    check("omega", omega)?;
    check("gamma", gamma)?;
    check("lambda", lambda)?;
    check("gain", gain)
}

/// Long-time mean energy without a bath.
pub fn asymptotic_energy(
    kind: ProtocolKind,
    omega: f64,
    gamma: f64,
    lambda: f64,
    gain: f64,
) -> Result<f64, AnalyticError> {
    check_all(omega, gamma, lambda, gain)?;
    let (w, g, l) = (omega, gamma, lambda);
    match kind {
        ProtocolKind::X | ProtocolKind::XP if gain > 1.0 => {
            Err(AnalyticError::GainDomain { kind, gain })
        }
        ProtocolKind::X => {
            let b = gain;
            Ok(l / (b * g) + b * g / (4.0 * l) + (2.0 - b) * g * l / (2.0 * b * w * w))
        }
        ProtocolKind::XP => {
            let b = gain;
            Ok(l / (b * g) + b * g / (4.0 * l) + (1.0 - b) * g * l / (b * w * w))
        }
        ProtocolKind::C => {
            let mu = gain;
            Ok(mu * w / (4.0 * l)
                + l / (mu * w)
                + l / (2.0 * g)
                + l * w / (g * g * mu)
                + g * mu * mu / (8.0 * l))
        }
    }
}

/// Long-time position variance.
///
/// X and XP share the same expression, which has a pole at b = 1.
pub fn asymptotic_var_x(
    kind: ProtocolKind,
    omega: f64,
    gamma: f64,
    lambda: f64,
    gain: f64,
) -> Result<VarX, AnalyticError> {
    check_all(omega, gamma, lambda, gain)?;
    let (w, g, l) = (omega, gamma, lambda);
    match kind {
        ProtocolKind::X | ProtocolKind::XP => {
            let b = gain;
            if b >= 1.0 {
                return Ok(VarX::Divergent);
            }
            let ob = 1.0 - b;
            Ok(VarX::Finite(
                0.5 * (l / (b * g) + b * g / (4.0 * ob * l) + g * l / (b * ob * w * w)),
            ))
        }
        ProtocolKind::C => {
            let mu = gain;
            Ok(VarX::Finite(
                0.5 * (mu * w / (4.0 * l) + l / (mu * w) + l * w / (g * g * mu)),
            ))
        }
    }
}

/// Gain minimizing the asymptotic energy or position variance.
///
/// * X and XP, energy: `b_e = 2λ·√(1/ω² + 1/γ²)`.
/// * X and XP, variance: `b_v = (1 + (γ/2λ)·√((4λ² + ω²)/(γ² + ω²)))⁻¹`.
/// * C, energy: `μ* = 2λ/ω` (valid for γ ≫ ω ≫ λ).
/// * C, variance: `2λ·√(1/ω² + 1/γ²)`.
pub fn optimal_gain(
    kind: ProtocolKind,
    objective: Objective,
    omega: f64,
    gamma: f64,
    lambda: f64,
) -> Result<f64, AnalyticError> {
    check("omega", omega)?;
    check("gamma", gamma)?;
    check("lambda", lambda)?;
    let (w, g, l) = (omega, gamma, lambda);
    let gain = match (kind, objective) {
        (ProtocolKind::X | ProtocolKind::XP, Objective::Energy) => {
            2.0 * l * (1.0 / (w * w) + 1.0 / (g * g)).sqrt()
        }
        (ProtocolKind::X | ProtocolKind::XP, Objective::Variance) => {
            1.0 / (1.0 + g / (2.0 * l) * ((4.0 * l * l + w * w) / (g * g + w * w)).sqrt())
        }
        (ProtocolKind::C, Objective::Energy) => return Ok(2.0 * l / w),
        (ProtocolKind::C, Objective::Variance) => {
            return Ok(2.0 * l * (1.0 / (w * w) + 1.0 / (g * g)).sqrt())
        }
    };
    if gain >= 1.0 {
        return Err(AnalyticError::OutOfValidity { gain });
    }
    Ok(gain)
}

/// Relaxation rate from the regime formulas, or `Unknown`.
pub fn relaxation_rate_formula(
    kind: ProtocolKind,
    omega: f64,
    gamma: f64,
    lambda: f64,
    gain: f64,
) -> Rate {
    if check_all(omega, gamma, lambda, gain).is_err() {
        return Rate::Unknown {
            reason: "parameters must be positive",
        };
    }
    let (w, g) = (omega, gamma);
    match kind {
        ProtocolKind::X => {
            let b = gain;
            if b == 1.0 && g < 2.0 * w {
                Rate::Known {
                    rate: g,
                    regime: "b = 1, gamma < 2 omega",
                }
            } else if w >= SEPARATION * g {
                // slowest of the modes -γb and -2γ(1 - b); the latter only
                // takes over above b = 2/3
                Rate::Known {
                    rate: g * b.min(2.0 * (1.0 - b)),
                    regime: "omega >> gamma",
                }
            } else {
                Rate::Unknown {
                    reason: "no closed form outside b = 1 or omega >> gamma",
                }
            }
        }
        ProtocolKind::XP => {
            let b = gain;
            if b == 1.0 {
                // the energy obeys a single decoupled equation
                return Rate::Known {
                    rate: 2.0 * g,
                    regime: "b = 1",
                };
            }
            if b > 1.0 {
                return Rate::Unknown {
                    reason: "unstable for b > 1",
                };
            }
            let rate = xp_mode_rates(w, g, b).into_iter().fold(f64::INFINITY, f64::min);
            Rate::Known {
                rate,
                regime: "exact four-mode spectrum",
            }
        }
        ProtocolKind::C => {
            let mu = gain;
            if mu < SMALL_GAIN && g >= SEPARATION * w {
                Rate::Known {
                    rate: mu * w,
                    regime: "mu small, gamma >> omega",
                }
            } else {
                Rate::Unknown {
                    reason: "requires small mu and gamma >> omega",
                }
            }
        }
    }
}

/// Decay rates `γ ∓ Re(Δ±/√2)` of the four Protocol XP modes, where
/// `Δ± = √(γ² − ω² ± Ω)` and `Ω = √(ω⁴ + 2(1 − 8b + 8b²)ω²γ² + γ⁴)`.
pub fn xp_mode_rates(omega: f64, gamma: f64, b: f64) -> [f64; 4] {
    let (w, g) = (omega, gamma);
    let big = Complex64::new(
        w.powi(4) + 2.0 * (1.0 - 8.0 * b + 8.0 * b * b) * w * w * g * g + g.powi(4),
        0.0,
    )
    .sqrt();
    let base = Complex64::new(g * g - w * w, 0.0);
    let dp = (base + big).sqrt() / std::f64::consts::SQRT_2;
    let dm = (base - big).sqrt() / std::f64::consts::SQRT_2;
    [g - dp.re, g + dp.re, g - dm.re, g + dm.re]
}

/// Thermal energy `2(n̄ + ½)` the bath alone relaxes to.
pub fn thermal_energy(nbar: f64) -> f64 {
    2.0 * (nbar + 0.5)
}

/// Bose occupation `1/(e^{βħω} − 1)`.
pub fn nbar_from_beta(beta_hbar_omega: f64) -> f64 {
    1.0 / beta_hbar_omega.exp_m1()
}

/// Which expression [`thermal_weighted_energy`] evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThermalPath {
    /// `(Γᵢ·E∞ + Γ·U)/(Γᵢ + Γ)` inside its regime of validity.
    Weighted,
    /// The exact bath-coupled fixed point.
    Exact,
    /// Weighted average used outside its regime because no exact
    /// expression is available (X with b ≠ 1).
    WeightedOutsideRegime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalEnergy {
    pub energy: f64,
    pub path: ThermalPath,
}

/// Effective cooling rate Γᵢ entering the weighted average.
pub fn cooling_rate(kind: ProtocolKind, omega: f64, gamma: f64, gain: f64) -> f64 {
    match kind {
        ProtocolKind::X => gamma,
        ProtocolKind::XP => 2.0 * gamma,
        ProtocolKind::C => gain * omega,
    }
}

/// Long-time energy of Protocol X at b = 1 coupled to a bath.
pub fn x_bath_energy_b1(omega: f64, gamma: f64, lambda: f64, bath: f64, nbar: f64) -> f64 {
    let (w, g, l, gb) = (omega, gamma, lambda, bath);
    let e = asymptotic_energy(ProtocolKind::X, w, g, l, 1.0).unwrap_or(f64::NAN);
    let u = thermal_energy(nbar);
    let w2 = w * w;
    let num = e * (4.0 * w2 * g + g * gb * (g + gb))
        + u * (4.0 * w2 * gb + gb * (g + gb).powi(2))
        + 2.0 * l * g * gb * (1.0 - g * (g + gb) / (4.0 * w2));
    let den = 4.0 * w2 * (g + gb) + (g + gb) * (2.0 * g + gb) * gb;
    num / den
}

/// Long-time energy of Protocol XP at b = 1 coupled to a bath.
pub fn xp_bath_energy_b1(omega: f64, gamma: f64, lambda: f64, bath: f64, nbar: f64) -> f64 {
    let e = asymptotic_energy(ProtocolKind::XP, omega, gamma, lambda, 1.0).unwrap_or(f64::NAN);
    (2.0 * gamma * e + bath * thermal_energy(nbar)) / (2.0 * gamma + bath)
}

/// Long-time energy of Protocol C coupled to a bath.
pub fn c_bath_energy(omega: f64, gamma: f64, lambda: f64, mu: f64, bath: f64, nbar: f64) -> f64 {
    let (w, g, l, gb) = (omega, gamma, lambda, bath);
    // thermal energy in units of ħ
    let u = w * (nbar + 0.5);
    let w2 = w * w;
    let s = (2.0 * g + gb).powi(2);
    let num = 2.0 * mu.powi(3) * w2 * g.powi(3)
        + mu * mu * w * g * g * (4.0 * w2 + gb * (2.0 * g + gb))
        + 8.0 * mu * w2 * g * l * l
        + 4.0 * w * l * l * (4.0 * w2 + s)
        + 8.0 * gb * (4.0 * w2 + 4.0 * mu * w * g + g * g * (4.0 + mu * mu) + 4.0 * g * gb + gb * gb) * l * u;
    let den = 32.0 * mu * w * g * l * (g + gb) + 8.0 * l * gb * (4.0 * w2 + s);
    2.0 / w * num / den
}

/// Long-time energy with a thermal bath, using the weighted average inside
/// its regime and the exact expression elsewhere.
pub fn thermal_weighted_energy(cfg: &ProtocolConfig) -> Result<ThermalEnergy, AnalyticError> {
    let kind = cfg.kind().ok_or(AnalyticError::NotPreset)?;
    let (w, g, l, gain) = (cfg.omega, cfg.gamma(), cfg.lambda(), cfg.gain());
    let (gb, nbar) = (cfg.bath_coupling, cfg.nbar);
    let e_inf = asymptotic_energy(kind, w, g, l, gain)?;
    let rate = cooling_rate(kind, w, g, gain);
    let weighted = (rate * e_inf + gb * thermal_energy(nbar)) / (rate + gb);
    let s = SEPARATION;
    let out = match kind {
        ProtocolKind::X => {
            if w >= s * g.max(l).max(gb) {
                ThermalEnergy {
                    energy: weighted,
                    path: ThermalPath::Weighted,
                }
            } else if gain == 1.0 {
                ThermalEnergy {
                    energy: x_bath_energy_b1(w, g, l, gb, nbar),
                    path: ThermalPath::Exact,
                }
            } else {
                ThermalEnergy {
                    energy: weighted,
                    path: ThermalPath::WeightedOutsideRegime,
                }
            }
        }
        ProtocolKind::XP => {
            if gain == 1.0 {
                ThermalEnergy {
                    energy: xp_bath_energy_b1(w, g, l, gb, nbar),
                    path: ThermalPath::Exact,
                }
            } else {
                ThermalEnergy {
                    energy: weighted,
                    path: ThermalPath::Weighted,
                }
            }
        }
        ProtocolKind::C => {
            let small = (gain * g).max(l * g / w).max(gb * g / w);
            if g >= s * w && w >= s * small {
                ThermalEnergy {
                    energy: weighted,
                    path: ThermalPath::Weighted,
                }
            } else {
                ThermalEnergy {
                    energy: c_bath_energy(w, g, l, gain, gb, nbar),
                    path: ThermalPath::Exact,
                }
            }
        }
    };
    Ok(out)
}

/// First-order expansion of the six Protocol X moment eigenvalues about
/// b = 1, with `ε = 1 − b`. Branches of the square roots are principal.
pub fn x_spectrum_near_unit_gain(omega: f64, gamma: f64, b: f64) -> [Complex64; 6] {
    let (w, g, e) = (omega, gamma, 1.0 - b);
    let d = Complex64::new(g * g - 4.0 * w * w, 0.0);
    let s = d.sqrt();
    let h = Complex64::new(g * g / 4.0 - w * w, 0.0).sqrt();
    let k = 2.0 * g * w * w * e;
    [
        Complex64::new(-2.0 * g * e, 0.0),
        -g + s - 2.0 * k / (d - g * s),
        -g - s - 2.0 * k / (d + g * s),
        Complex64::new(-b * g, 0.0),
        -g / 2.0 + h + k / (d + g * s),
        -g / 2.0 - h + k / (d - g * s),
    ]
}

/// First-order expansion of the six Protocol X moment eigenvalues about b = 0.
pub fn x_spectrum_small_gain(omega: f64, gamma: f64, b: f64) -> [Complex64; 6] {
    let (w, g) = (omega, gamma);
    let i = Complex64::i();
    let gw = g * g + w * w;
    let k = g * w * b;
    [
        Complex64::new(-2.0 * g + 2.0 * w * k / gw, 0.0),
        2.0 * i * w - i * k / (g + i * w),
        -2.0 * i * w + i * k / (g - i * w),
        Complex64::new(-w * k / gw, 0.0),
        -g + i * w - i * k / (2.0 * (g - i * w)),
        -g - i * w + i * k / (2.0 * (g + i * w)),
    ]
}

/// First-order expansion of the six Protocol C moment eigenvalues about μ = 0.
pub fn c_spectrum_small_mu(omega: f64, gamma: f64, mu: f64) -> [Complex64; 6] {
    let (w, g) = (omega, gamma);
    let i = Complex64::i();
    let gw = g * g + w * w;
    let k = g * w * mu;
    [
        Complex64::new(-g * k / gw, 0.0),
        -g - i * w + k / (2.0 * (g + i * w)),
        -g + i * w + k / (2.0 * (g - i * w)),
        Complex64::new(-2.0 * g + 2.0 * g * k / gw, 0.0),
        -2.0 * i * w - k / (g - i * w),
        2.0 * i * w - k / (g + i * w),
    ]
}

/// Largest distance between `predicted` and `actual` eigenvalues under a
/// greedy nearest pairing.
pub fn spectrum_distance(predicted: &[Complex64], actual: &[Complex64]) -> f64 {
    let mut used = vec![false; actual.len()];
    let mut worst = 0.0f64;
    for p in predicted {
        let nearest = actual
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, a)| (j, (a - p).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        match nearest {
            Some((j, d)) => {
                used[j] = true;
                worst = worst.max(d);
            }
            None => return f64::INFINITY,
        }
    }
    worst
}

/// Summary row of the closed-form results for one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticReport {
    pub kind: ProtocolKind,
    pub omega: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub gain: f64,
    pub energy: f64,
    pub var_x: VarX,
    pub relaxation_rate: Rate,
    pub trapped: bool,
    pub regime_notes: Vec<String>,
}

pub fn report(
    kind: ProtocolKind,
    omega: f64,
    gamma: f64,
    lambda: f64,
    gain: f64,
) -> Result<AsymptoticReport, AnalyticError> {
    let energy = asymptotic_energy(kind, omega, gamma, lambda, gain)?;
    let var_x = asymptotic_var_x(kind, omega, gamma, lambda, gain)?;
    let rate = relaxation_rate_formula(kind, omega, gamma, lambda, gain);
    let mut notes = vec![];
    match rate {
        Rate::Known { regime, .. } => notes.push(format!("rate: {regime}")),
        Rate::Unknown { reason } => notes.push(format!("rate unknown: {reason}")),
    }
    if var_x == VarX::Divergent {
        notes.push("b = 1: cooled but not trapped".to_string());
    }
    if kind == ProtocolKind::C && !(gamma >= SEPARATION * omega) {
        notes.push("C stability not guaranteed outside gamma >> omega".to_string());
    }
    Ok(AsymptoticReport {
        kind,
        omega,
        gamma,
        lambda,
        gain,
        energy,
        trapped: matches!(var_x, VarX::Finite(_)),
        var_x,
        relaxation_rate: rate,
        regime_notes: notes,
    })
}
