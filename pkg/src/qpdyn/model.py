"""Closed-form physics of quasiparticle-limited transmon coherence.

Everything here is a pure function of its arguments: no randomness, no
fitting, no shared state.  Units are SI throughout -- rates in 1/s
(angular where noted), frequencies in Hz, powers in W, temperatures in K.
Normalized quasiparticle densities ``x_qp`` are dimensionless.

Conventions
-----------
* The per-density loss coefficient is ``C = sqrt(8 * f_q * f_gap)``,
  algebraically identical to ``sqrt(2 * omega_q * Delta / (pi^2 * hbar))``
  with ``omega_q = 2*pi*f_q`` and ``Delta = h * f_gap``.
* ``gamma0`` is the total qubit decay rate without injected
  quasiparticles.  It contains both the background-density contribution
  ``C * x0`` and every non-quasiparticle channel ``gamma_ext``.  Recovery
  analyses use the ``gamma_ext = 0`` convention (``x0 = gamma0 / C``),
  which makes ``x0`` an upper bound on the background density.
* The quasiparticle frequency pull uses the provisional reactive /
  dissipative ratio ``sqrt(pi)/2`` (see ``SHIFT_PREFACTOR``); it can be
  overridden per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.constants import h as H_PLANCK
from scipy.constants import k as K_BOLTZMANN

from .errors import InfeasibleDecompositionError, NonThermalStateError

__all__ = [
    "SHIFT_PREFACTOR",
    "DEFAULT_PAD_LENGTH",
    "DEFAULT_DIFFUSION_CONST",
    "BeamPosition",
    "DeviceParams",
    "QpDynamics",
    "OpticalDrive",
    "CoherenceSet",
    "qp_coupling",
    "decay_rate",
    "xqp_trajectory",
    "xqp_excess",
    "gamma_recovery",
    "cw_gamma",
    "freq_shift",
    "dephasing_decompose",
    "compose_t2",
    "thermal_xqp",
    "excited_population",
    "effective_temperature",
    "gap_suppression",
    "diffusion_time",
    "trapping_negligible",
]

# Provisional reactive/dissipative ratio of the frequency pull.  The exact
# theoretical prefactor depends on the junction admittance convention;
# override via the ``prefactor`` argument of ``freq_shift`` if needed.
SHIFT_PREFACTOR = math.sqrt(math.pi) / 2.0

# Default geometry for the diffusion-time estimate: 300 um pad and a
# normal-metal diffusion constant of 1.8e-3 m^2/s.
DEFAULT_PAD_LENGTH = 300e-6
DEFAULT_DIFFUSION_CONST = 1.8e-3

_DECOMPOSE_SLACK = 1e-9


class BeamPosition(str, Enum):
    """Laser spot placement relative to the qubit pad."""

    A = "A"  # centered on the pad
    B = "B"  # on the lower pad edge
    C = "C"  # on the bare substrate below the pad


@dataclass(frozen=True)
class DeviceParams:
    """Static device parameters of the qubit.

    f_q        qubit transition frequency, Hz
    f_gap      gap frequency ``f_gap = Delta / h``, Hz
    gamma0     baseline qubit decay rate without injected density, 1/s
    gamma_ext  non-quasiparticle part of ``gamma0``, 1/s
    """

    f_q: float
    f_gap: float
    gamma0: float
    gamma_ext: float = 0.0

    def __post_init__(self):
        if self.f_q <= 0:
            raise ValueError(f"f_q must be positive, got {self.f_q}")
        if self.f_gap <= 0:
            raise ValueError(f"f_gap must be positive, got {self.f_gap}")
        if self.f_q >= 2.0 * self.f_gap:
            raise ValueError(
                "qubit above the pair-breaking threshold: "
                f"f_q = {self.f_q} >= 2*f_gap = {2.0 * self.f_gap}"
            )
        if not (self.gamma0 >= self.gamma_ext >= 0.0):
            raise ValueError(
                f"need gamma0 >= gamma_ext >= 0, got {self.gamma0}, {self.gamma_ext}"
            )

    @property
    def omega_q(self) -> float:
        """Angular qubit frequency, rad/s."""
        return 2.0 * math.pi * self.f_q

    @property
    def delta(self) -> float:
        """Superconducting gap energy, J."""
        return H_PLANCK * self.f_gap


@dataclass(frozen=True)
class QpDynamics:
    """Parameters of the quasiparticle density rate equation
    ``dx/dt = -r x^2 - s x + g``.

    s     trapping rate, 1/s
    r     recombination coefficient (of the x^2 term), 1/s
    g     generation rate, 1/s; derived from the steady state when omitted
    x0    steady-state density (stationary point of the rate equation)
    x_in  injected density at t = 0, on top of ``x0``
    """

    s: float
    r: float
    g: float | None = None
    x0: float = 0.0
    x_in: float = 0.0

    def __post_init__(self):
        for name in ("s", "r", "x0", "x_in"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        g_ss = self.s * self.x0 + self.r * self.x0**2
        if self.g is None:
            object.__setattr__(self, "g", g_ss)
        elif abs(self.g - g_ss) > 1e-9 * max(g_ss, 1e-300):
            raise ValueError(
                f"g = {self.g} inconsistent with steady state s*x0 + r*x0^2 = {g_ss}"
            )


@dataclass(frozen=True)
class OpticalDrive:
    """One laser-beam condition.

    position      beam placement label
    power         optical power, W
    pulse_len     pulse duration, s (ignored for CW)
    mu            density per power conversion constant, 1/W
    lambda_shift  frequency-pull coefficient, rad/s/W; ``None`` means
                  "derive from ``freq_shift`` when needed"
    """

    position: BeamPosition
    power: float = 0.0
    pulse_len: float = 0.0
    mu: float = 0.0
    lambda_shift: float | None = None

    def __post_init__(self):
        if self.power < 0:
            raise ValueError(f"power must be >= 0, got {self.power}")
        if self.pulse_len < 0:
            raise ValueError(f"pulse_len must be >= 0, got {self.pulse_len}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")

    @property
    def energy(self) -> float:
        """Pulse energy ``power * pulse_len``, J."""
        return self.power * self.pulse_len


@dataclass(frozen=True)
class CoherenceSet:
    """Consistent (T1, T2*, T_phi) triple; ``t_phi`` may be ``inf``."""

    t1: float
    t2_star: float
    t_phi: float

    def __post_init__(self):
        if self.t1 <= 0 or self.t2_star <= 0 or self.t_phi <= 0:
            raise ValueError("coherence times must be positive")
        if self.t2_star > 2.0 * self.t1 * (1.0 + _DECOMPOSE_SLACK):
            raise ValueError(
                f"t2_star = {self.t2_star} exceeds 2*t1 = {2.0 * self.t1}"
            )
        lhs = 1.0 / self.t2_star
        rhs = (0.0 if math.isinf(self.t_phi) else 1.0 / self.t_phi) + 0.5 / self.t1
        if abs(lhs - rhs) > 1e-9 * lhs:
            raise ValueError("rates violate 1/T2* = 1/T_phi + 1/(2 T1)")


def _as_density(x_qp):
    x = np.asarray(x_qp, dtype=float)
    if np.any(x < 0):
        raise ValueError("quasiparticle density must be >= 0")
    return x


def _scalar_like(result, template):
    if np.isscalar(template) or np.ndim(template) == 0:
        return float(np.asarray(result).item())
    return result


def qp_coupling(dev: DeviceParams) -> float:
    """Loss per unit normalized density, ``C = sqrt(8 f_q f_gap)`` in 1/s."""
    return math.sqrt(8.0 * dev.f_q * dev.f_gap)


def decay_rate(dev: DeviceParams, x_qp) -> float | np.ndarray:
    """Qubit decay rate ``C * x_qp + gamma0`` for an injected density x_qp.

    ``x_qp`` is the density in excess of the background already contained
    in ``gamma0``; ``x_qp = 0`` returns the baseline rate.
    """
    x = _as_density(x_qp)
    return _scalar_like(qp_coupling(dev) * x + dev.gamma0, x_qp)


def _check_time_grid(t) -> np.ndarray:
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("time grid must be non-negative")
    if np.any(np.diff(t_arr) < 0):
        raise ValueError("time grid must be sorted ascending")
    return t_arr


def xqp_excess(dyn: QpDynamics, t) -> float | np.ndarray:
    """Injected density above the steady state, ``x_qp(t) - x0``.

    Closed-form solution of ``dx/dt = -r x^2 - s x + g`` started at
    ``x0 + x_in``, written with a decaying exponential so that large
    ``(s + 2 r x0) * t`` underflows smoothly to the asymptote instead of
    overflowing::

        excess(t) = x_in * a * E / (a + r * x_in * (1 - E)),
        a = s + 2 r x0,  E = exp(-a t)

    For ``r = 0`` this is exactly ``x_in * exp(-s t)``; for ``a = 0``
    (pure recombination) it reduces to ``x_in / (1 + r x_in t)``; with all
    rates zero the series is constant at ``x_in``.
    """
    t_arr = _check_time_grid(t)
    a = dyn.s + 2.0 * dyn.r * dyn.x0
    if dyn.r == 0.0:
        out = dyn.x_in * np.exp(-dyn.s * t_arr)
    elif a == 0.0:
        out = dyn.x_in / (1.0 + dyn.r * dyn.x_in * t_arr)
    else:
        decay = np.exp(-a * t_arr)
        out = dyn.x_in * a * decay / (a + dyn.r * dyn.x_in * (1.0 - decay))
    return _scalar_like(out, t)


def xqp_trajectory(dyn: QpDynamics, t) -> float | np.ndarray:
    """Normalized density ``x_qp(t) = x0 + excess(t)`` on a sorted grid."""
    return _scalar_like(dyn.x0 + np.atleast_1d(xqp_excess(dyn, t)), t)


def gamma_recovery(dev: DeviceParams, dyn: QpDynamics, t) -> float | np.ndarray:
    """Qubit decay rate during quasiparticle recovery.

    ``Gamma(t) = C * (x_qp(t) - x0) + gamma0``; at ``t = 0`` this is
    ``C * x_in + gamma0`` and it approaches ``gamma0`` as the injected
    density dies away.  For ``r = 0`` it is exactly
    ``C * x_in * exp(-s t) + gamma0``.
    """
    out = qp_coupling(dev) * np.atleast_1d(xqp_excess(dyn, t)) + dev.gamma0
    return _scalar_like(out, t)


def recovery_dynamics(dev: DeviceParams, s: float, r: float, x_in: float) -> QpDynamics:
    """Dynamics with the background pinned to ``x0 = gamma0 / C``.

    This is the convention used by every recovery fit: all of ``gamma0``
    is attributed to quasiparticles, so ``x0`` is an upper bound on the
    true background density.
    """
    return QpDynamics(s=s, r=r, x0=dev.gamma0 / qp_coupling(dev), x_in=x_in)


def cw_gamma(dev: DeviceParams, drive: OpticalDrive) -> float:
    """Steady-state decay rate under CW drive, ``C * mu * P + gamma0``."""
    return qp_coupling(dev) * drive.mu * drive.power + dev.gamma0


def freq_shift(dev: DeviceParams, x_qp, slope_scale: float = 1.0,
               prefactor: float = SHIFT_PREFACTOR) -> float | np.ndarray:
    """Quasiparticle-induced angular frequency shift, rad/s (negative).

    ``delta_omega = -slope_scale * prefactor * C * x_qp``.  The default
    ``prefactor = sqrt(pi)/2`` is the provisional theory value;
    ``slope_scale`` rescales it (0.83 reproduces a shift 17% below
    theory).
    """
    if slope_scale <= 0:
        raise ValueError(f"slope_scale must be positive, got {slope_scale}")
    x = _as_density(x_qp)
    return _scalar_like(-slope_scale * prefactor * qp_coupling(dev) * x, x_qp)


def dephasing_decompose(t1: float, t2_star: float) -> CoherenceSet:
    """Split decoherence into decay and pure dephasing.

    Inverts ``1/T2* = 1/T_phi + 1/(2 T1)``; a T1-limited input
    (``t2_star = 2 t1`` within 1e-9 relative slack) yields
    ``t_phi = inf``.  Larger ``t2_star`` raises
    :class:`InfeasibleDecompositionError`.
    """
    if t1 <= 0 or t2_star <= 0:
        raise ValueError("t1 and t2_star must be positive")
    if t2_star > 2.0 * t1 * (1.0 + _DECOMPOSE_SLACK):
        raise InfeasibleDecompositionError(
            f"t2_star = {t2_star} exceeds 2*t1 = {2.0 * t1}: "
            "no non-negative dephasing rate exists"
        )
    rate_phi = 1.0 / t2_star - 0.5 / t1
    t_phi = math.inf if rate_phi <= 0.0 else 1.0 / rate_phi
    t2_eff = t2_star if rate_phi > 0.0 else 2.0 * t1
    return CoherenceSet(t1=t1, t2_star=t2_eff, t_phi=t_phi)


def compose_t2(t1: float, t_phi: float) -> float:
    """Ramsey time from decay and pure dephasing (inverse of decompose)."""
    if t1 <= 0 or t_phi <= 0:
        raise ValueError("t1 and t_phi must be positive")
    rate_phi = 0.0 if math.isinf(t_phi) else 1.0 / t_phi
    return 1.0 / (rate_phi + 0.5 / t1)


def thermal_xqp(dev: DeviceParams, temp: float) -> float:
    """Thermal-equilibrium density ``sqrt(2 pi kT / Delta) exp(-Delta/kT)``."""
    if temp < 0:
        raise ValueError(f"temperature must be >= 0, got {temp}")
    if temp == 0.0:
        return 0.0
    ratio = K_BOLTZMANN * temp / dev.delta
    return math.sqrt(2.0 * math.pi * ratio) * math.exp(-1.0 / ratio)


def excited_population(dev: DeviceParams, temp: float) -> float:
    """Two-level Boltzmann excited-state population at temperature ``temp``."""
    if temp < 0:
        raise ValueError(f"temperature must be >= 0, got {temp}")
    if temp == 0.0:
        return 0.0
    w = math.exp(-H_PLANCK * dev.f_q / (K_BOLTZMANN * temp))
    return w / (1.0 + w)


def effective_temperature(dev: DeviceParams, p_e: float) -> float:
    """Temperature of a two-level Boltzmann state with population ``p_e``.

    Exact inverse of :func:`excited_population` for ``0 < p_e < 1/2``.
    """
    if p_e <= 0.0:
        raise ValueError(f"population must be positive, got {p_e}")
    if p_e >= 0.5:
        raise NonThermalStateError(
            f"population {p_e} >= 0.5 is not a finite-temperature state"
        )
    return H_PLANCK * dev.f_q / (K_BOLTZMANN * math.log((1.0 - p_e) / p_e))


def gap_suppression(dev: DeviceParams, x_qp: float) -> float:
    """Gap frequency reduced by the quasiparticle density, ``f_gap (1 - x)``.

    Diagnostic only: the suppressed gap is *not* fed back into the
    coupling constant anywhere in this package (a 1e-2 density moves C by
    0.5%% of itself, justifying the neglect).
    """
    if not 0.0 <= x_qp < 1.0:
        raise ValueError(f"x_qp must be in [0, 1), got {x_qp}")
    return dev.f_gap * (1.0 - x_qp)


def diffusion_time(pad_len: float = DEFAULT_PAD_LENGTH,
                   diff_const: float = DEFAULT_DIFFUSION_CONST) -> float:
    """Diffusion time across a pad, ``pad_len**2 / diff_const`` in s."""
    if pad_len <= 0 or diff_const <= 0:
        raise ValueError("pad_len and diff_const must be positive")
    return pad_len**2 / diff_const


def trapping_negligible(s: float, pad_len: float = DEFAULT_PAD_LENGTH,
                        diff_const: float = DEFAULT_DIFFUSION_CONST) -> bool:
    """True when diffusion across the pad is faster than trapping (1/s)."""
    if s <= 0:
        raise ValueError(f"trapping rate must be positive, got {s}")
    return diffusion_time(pad_len, diff_const) < 1.0 / s


def with_gamma0(dev: DeviceParams, gamma0: float) -> DeviceParams:
    """Copy of ``dev`` with a different baseline rate."""
    return replace(dev, gamma0=gamma0, gamma_ext=min(dev.gamma_ext, gamma0))
