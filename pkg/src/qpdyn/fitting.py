"""Weighted nonlinear least squares and the model fits used downstream.

The engine is a self-contained damped (Levenberg-Marquardt) solver on
numpy only: normal equations with multiplicative diagonal damping, step
acceptance only on non-increasing chi^2, box bounds by projection, and a
MINPACK-style scale-free gradient test for convergence.  It is stateless
between calls and safe to run concurrently on distinct data.

Error conventions
-----------------
``FitResult.covariance`` is always ``(J^T W J)^-1 * chi2/dof``.  For
sigma-weighted data ``stderr`` is conservative: ``sqrt(diag((J^T W J)^-1))``
inflated by ``sqrt(chi2/dof)`` only when ``chi2/dof > 1``.  For unweighted
data the usual ``chi2/dof`` scaling applies in both directions, so a
perfect fit reports (near) zero uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDesignError,
    InitializationError,
    RankDeficiencyError,
)
from .model import DeviceParams, qp_coupling

__all__ = [
    "FitConfig",
    "FitResult",
    "nlls_fit",
    "fit_exponential",
    "fit_ramsey",
    "fit_recovery",
    "fit_trapping_recovery",
    "fit_linear_weighted",
    "exp_decay_model",
    "ramsey_model",
    "recovery_model",
    "trapping_model",
]

_CHI2_ZERO = 1e-25


@dataclass(frozen=True)
class FitConfig:
    """Solver knobs; the defaults suit every fit in this package."""

    max_iter: int = 200
    gtol: float = 1e-10          # scale-free gradient cosine
    steptol: float = 1e-12       # relative step size
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    damping_max: float = 1e12
    bounds: tuple | None = None  # (lo array, hi array); overridable per call

    def __post_init__(self):
        if min(self.gtol, self.steptol, self.damping_init) <= 0:
            raise ValueError("tolerances and damping must be positive")


@dataclass
class FitResult:
    """Outcome of one weighted least-squares fit."""

    params: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray
    chi2: float
    dof: int
    converged: bool
    n_iter: int
    chi2_history: list = field(default_factory=list)
    names: tuple = ()
    message: str = ""

    def __getitem__(self, name):
        return float(self.params[self.names.index(name)])

    def error_of(self, name):
        return float(self.stderr[self.names.index(name)])


def _numeric_jacobian(fn, x, p):
    base = np.asarray(fn(x, p), dtype=float)
    out = np.empty((base.size, p.size))
    for j in range(p.size):
        h = 6e-6 * max(abs(p[j]), 1e-8)
        pp = p.copy()
        pm = p.copy()
        pp[j] += h
        pm[j] -= h
        out[:, j] = (np.asarray(fn(x, pp)) - np.asarray(fn(x, pm))) / (2 * h)
    return out


def _blocked_gradient(g, p, lo, hi):
    """Zero gradient components that only push into an active bound."""
    g = g.copy()
    g[(p <= lo) & (g < 0)] = 0.0
    g[(p >= hi) & (g > 0)] = 0.0
    return g


def _gradient_cosine(g, jw, chi2):
    """max_j |g_j| / (||J_j|| sqrt(chi2)); 0 for a zero-residual fit."""
    if chi2 <= _CHI2_ZERO:
        return 0.0
    colnorm = np.sqrt(np.sum(jw * jw, axis=0))
    safe = colnorm > 0
    if not np.any(safe):
        return 0.0
    return float(np.max(np.abs(g[safe]) / (colnorm[safe] * math.sqrt(chi2))))


def nlls_fit(fn, x, y, p0, sigma=None, jac=None, cfg=None, bounds=None,
             names=()) -> FitResult:
    """Fit ``y ~ fn(x, p)`` with weights ``1/sigma^2``.

    ``fn(x, p) -> ndarray`` must be vectorized over ``x``; ``jac(x, p)``
    returns the (n, m) derivative matrix and defaults to central
    differences.  ``bounds`` is an (lo, hi) pair of length-m sequences.
    Raises :class:`RankDeficiencyError` when the normal matrix at the
    solution is singular.
    """
    cfg = cfg or FitConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = np.asarray(p0, dtype=float).copy()
    m = p.size
    if y.size < m + 1:
        raise ValueError(f"need at least {m + 1} points for {m} parameters")
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        w_sqrt = 1.0 / sigma
    else:
        w_sqrt = np.ones_like(y)

    if bounds is None:
        bounds = cfg.bounds
    if bounds is None:
        lo = np.full(m, -np.inf)
        hi = np.full(m, np.inf)
    else:
        lo = np.asarray(bounds[0], dtype=float)
        hi = np.asarray(bounds[1], dtype=float)
    p = np.clip(p, lo, hi)

    jac_fn = jac if jac is not None else (lambda xx, pp: _numeric_jacobian(fn, xx, pp))

    def residual(pp):
        r = (y - np.asarray(fn(x, pp), dtype=float)) * w_sqrt
        return r, float(r @ r)

    r, chi2 = residual(p)
    history = [chi2]
    lam = cfg.damping_init
    n_iter = 0
    converged = False
    message = "max_iter reached"

    for _ in range(cfg.max_iter):
        jw = np.asarray(jac_fn(x, p), dtype=float) * w_sqrt[:, None]
        g = jw.T @ r
        a = jw.T @ jw
        if _gradient_cosine(_blocked_gradient(g, p, lo, hi), jw, chi2) <= cfg.gtol:
            converged = True
            message = "gradient below tolerance"
            break

        d = np.diag(a).copy()
        d[d <= 0] = max(d.max(), 1.0) * 1e-14

        accepted = False
        while lam <= cfg.damping_max:
            try:
                step = np.linalg.solve(a + lam * np.diag(d), g)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            p_try = np.clip(p + step, lo, hi)
            if np.array_equal(p_try, p):
                lam *= cfg.damping_up
                continue
            r_try, chi2_try = residual(p_try)
            if np.isfinite(chi2_try) and chi2_try <= chi2:
                accepted = True
                break
            lam *= cfg.damping_up
        if not accepted:
            message = "damping limit reached"
            break

        dp = p_try - p
        p, r, chi2 = p_try, r_try, chi2_try
        history.append(chi2)
        n_iter += 1
        lam = max(lam / cfg.damping_down, 1e-14)
        if np.linalg.norm(dp) <= cfg.steptol * (np.linalg.norm(p) + cfg.steptol):
            jw = np.asarray(jac_fn(x, p), dtype=float) * w_sqrt[:, None]
            g = jw.T @ r
            converged = (
                _gradient_cosine(_blocked_gradient(g, p, lo, hi), jw, chi2) <= cfg.gtol
            )
            message = "step below tolerance"
            break

    jw = np.asarray(jac_fn(x, p), dtype=float) * w_sqrt[:, None]
    a = jw.T @ jw
    try:
        cov0 = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            f"singular normal matrix for parameters {names or tuple(range(m))}"
        ) from exc
    cov0 = 0.5 * (cov0 + cov0.T)
    dof = y.size - m
    scale = chi2 / dof if dof > 0 else 1.0
    diag0 = np.sqrt(np.maximum(np.diag(cov0), 0.0))
    if sigma is not None:
        stderr = diag0 * max(1.0, math.sqrt(scale))
    else:
        stderr = diag0 * math.sqrt(scale)
    return FitResult(
        params=p,
        stderr=stderr,
        covariance=cov0 * scale,
        chi2=chi2,
        dof=dof,
        converged=converged,
        n_iter=n_iter,
        chi2_history=history,
        names=tuple(names),
        message=message,
    )


# ----------------------------------------------------------------- models

def exp_decay_model(t, p):
    """amp * exp(-rate t) + offset with p = (amp, rate, offset)."""
    amp, rate, off = p
    return amp * np.exp(-rate * t) + off


def exp_decay_jac(t, p):
    amp, rate, _ = p
    e = np.exp(-rate * t)
    return np.column_stack([e, -amp * t * e, np.ones_like(t)])


def ramsey_model(t, p):
    """0.5 (1 + exp(-t/t2) cos(2 pi f t + phi)) + offset."""
    t2, f, phi, off = p
    return 0.5 * (1.0 + np.exp(-t / t2) * np.cos(2 * np.pi * f * t + phi)) + off


def ramsey_jac(t, p):
    t2, f, phi, _ = p
    env = np.exp(-t / t2)
    arg = 2 * np.pi * f * t + phi
    c, s = np.cos(arg), np.sin(arg)
    return np.column_stack([
        0.5 * env * c * t / t2**2,
        -np.pi * t * env * s,
        -0.5 * env * s,
        np.ones_like(t),
    ])


def recovery_model(coupling, s, r):
    """Decay-rate recovery vs pulse delay, p = (x_in, gamma0).

    ``gamma(tau) = C x_in a E / (a + r x_in (1 - E)) + gamma0`` with
    ``a = s + 2 r gamma0 / C`` and ``E = exp(-a tau)``; the background
    density is pinned to ``gamma0 / C``.
    """

    def fn(tau, p):
        x_in, g0 = p
        a = s + 2.0 * r * g0 / coupling
        if a <= 0.0:
            return np.full_like(tau, coupling * x_in + g0)
        e = np.exp(-a * tau)
        return coupling * x_in * a * e / (a + r * x_in * (1.0 - e)) + g0

    def jac(tau, p):
        x_in, g0 = p
        a = s + 2.0 * r * g0 / coupling
        if a <= 0.0:
            return np.column_stack([
                np.full_like(tau, coupling), np.ones_like(tau)
            ])
        e = np.exp(-a * tau)
        den = a + r * x_in * (1.0 - e)
        d_xin = coupling * a * a * e / den**2
        a_p = 2.0 * r / coupling
        d_g0 = (
            coupling * x_in * a_p * e
            * ((1.0 - a * tau) * den - a * (1.0 + r * x_in * tau * e))
            / den**2
            + 1.0
        )
        return np.column_stack([d_xin, d_g0])

    return fn, jac


def trapping_model(coupling):
    """Trapping-only recovery with the rate free, p = (x_in, gamma0, s)."""

    def fn(tau, p):
        x_in, g0, s = p
        return coupling * x_in * np.exp(-s * tau) + g0

    def jac(tau, p):
        x_in, _, s = p
        e = np.exp(-s * tau)
        return np.column_stack([coupling * e, np.ones_like(tau), -coupling * x_in * tau * e])

    return fn, jac


# ------------------------------------------------------------- named fits

def _trace_arrays(trace):
    if isinstance(trace, tuple):
        t, y, sigma = trace
    else:
        t, y, sigma = trace.times, trace.values, trace.sigma
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        if np.all(sigma == 0):
            sigma = None
    # sort by time so the data-driven start values (and hence the result)
    # do not depend on the storage order
    order = np.argsort(t, kind="stable")
    if np.any(order != np.arange(t.size)):
        t = t[order]
        y = y[order]
        if sigma is not None:
            sigma = sigma[order]
    return t, y, sigma


def fit_exponential(trace, cfg=None, float_offset=True):
    """Fit ``amp * exp(-gamma t) + offset`` to a decay trace.

    Returns ``(gamma, gamma_err, FitResult)``.  ``float_offset=False``
    pins the offset to zero (two free parameters).
    """
    t, y, sigma = _trace_arrays(trace)
    n_tail = max(1, y.size // 10)
    off0 = float(np.mean(y[-n_tail:])) if float_offset else 0.0
    amp0 = float(y[0] - off0)
    if abs(amp0) < 1e-3:
        amp0 = math.copysign(max(float(np.ptp(y)), 1e-3), amp0 if amp0 != 0 else 1.0)
    span = t[-1] - t[0] if t[-1] > t[0] else 1.0
    below = np.nonzero(y - off0 < amp0 / math.e)[0]
    rate0 = 1.0 / (t[below[0]] - t[0]) if below.size and t[below[0]] > t[0] else 3.0 / span

    if float_offset:
        res = nlls_fit(
            exp_decay_model, t, y, [amp0, rate0, off0], sigma=sigma,
            jac=exp_decay_jac, cfg=cfg,
            bounds=([-2.0, 0.0, -1.0], [2.0, np.inf, 2.0]),
            names=("amp", "gamma", "offset"),
        )
        gamma = res["gamma"]
        gamma_err = res.error_of("gamma")
    else:
        def fn(tt, p):
            return exp_decay_model(tt, (p[0], p[1], 0.0))

        def jc(tt, p):
            return exp_decay_jac(tt, (p[0], p[1], 0.0))[:, :2]

        res = nlls_fit(
            fn, t, y, [amp0, rate0], sigma=sigma, jac=jc, cfg=cfg,
            bounds=([-2.0, 0.0], [2.0, np.inf]), names=("amp", "gamma"),
        )
        gamma = res["gamma"]
        gamma_err = res.error_of("gamma")
    return gamma, gamma_err, res


def _spectral_peak(t, y):
    """Coarse frequency scan; returns (f0, phi0) of the dominant line."""
    span = float(t[-1] - t[0])
    dt = float(np.median(np.diff(t)))
    if span <= 0 or dt <= 0:
        raise InitializationError("degenerate time grid")
    f_lo = 0.5 / span
    f_hi = 0.45 / dt
    if f_hi <= f_lo:
        raise InitializationError("time grid too short to resolve a frequency")
    freqs = np.linspace(f_lo, f_hi, min(2048, max(256, int(8 * span / dt))))
    z = (y - y.mean()) @ np.exp(-2j * np.pi * np.outer(t, freqs))
    power = np.abs(z) ** 2
    k = int(np.argmax(power))
    if k == 0 or k == freqs.size - 1:
        raise InitializationError("no interior spectral peak: frequency ~ 0 or aliased")
    if power[k] < 9.0 * np.median(power):
        raise InitializationError("no spectral peak above the noise floor")
    # parabolic refinement on log power
    lp = np.log(power[k - 1:k + 2] + 1e-300)
    denom = lp[0] - 2 * lp[1] + lp[2]
    shift = 0.5 * (lp[0] - lp[2]) / denom if denom != 0 else 0.0
    f0 = freqs[k] + np.clip(shift, -1, 1) * (freqs[1] - freqs[0])
    return float(f0), float(np.angle(z[k]))


def fit_ramsey(trace, cfg=None):
    """Fit a decaying cosine to a Ramsey fringe.

    Returns ``(t2_star, detune_hz, FitResult)``.  The frequency start
    value comes from a discrete spectral scan; a missing peak raises
    :class:`InitializationError`.
    """
    t, y, sigma = _trace_arrays(trace)
    f0, phi0 = _spectral_peak(t, y)
    span = float(t[-1] - t[0])
    p0 = [span / 2.0, f0, phi0, float(y.mean() - 0.5)]
    res = nlls_fit(
        ramsey_model, t, y, p0, sigma=sigma, jac=ramsey_jac, cfg=cfg,
        bounds=([1e-12, 0.0, -2 * np.pi, -1.0], [np.inf, np.inf, 2 * np.pi, 1.0]),
        names=("t2_star", "freq", "phase", "offset"),
    )
    return res["t2_star"], res["freq"], res


def fit_recovery(dev: DeviceParams, tau, gamma, sigma, s: float, r: float,
                 cfg=None):
    """Fit the recovery model with fixed rates; p = (x_in, gamma0).

    Returns ``(x_in, gamma0, FitResult)``.  ``sigma`` holds the per-point
    rate uncertainties used as weights (None for an unweighted fit).
    """
    if s < 0 or r < 0:
        raise ValueError("s and r must be >= 0")
    tau, gamma, sigma = _trace_arrays((tau, gamma, sigma))
    coupling = qp_coupling(dev)
    g0_init = max(float(np.min(gamma)), 1.0)
    arg = min(s * float(tau[0]), 50.0)
    x0_init = max((float(gamma[0]) - g0_init) * math.exp(arg) / coupling, 1e-12)
    fn, jac = recovery_model(coupling, s, r)
    res = nlls_fit(
        fn, tau, gamma, [x0_init, g0_init], sigma=sigma, jac=jac, cfg=cfg,
        bounds=([0.0, 0.0], [np.inf, np.inf]), names=("x_in", "gamma0"),
    )
    return res["x_in"], res["gamma0"], res


def fit_trapping_recovery(dev: DeviceParams, tau, gamma, sigma, cfg=None):
    """Trapping-only recovery fit with the rate free; p = (x_in, gamma0, s).

    Returns ``(x_in, gamma0, s, FitResult)``.
    """
    tau, gamma, sigma = _trace_arrays((tau, gamma, sigma))
    coupling = qp_coupling(dev)
    n_tail = max(1, gamma.size // 5)
    g0_init = max(float(np.mean(gamma[-n_tail:])), 1.0)
    span = float(tau[-1] - tau[0]) or 1.0
    excess = gamma - g0_init
    floor = max(3.0 * float(np.median(sigma)) if sigma is not None else 0.0,
                1e-4 * g0_init)
    live = excess > floor
    if np.count_nonzero(live) >= 2:
        slope, logc = np.polyfit(tau[live], np.log(excess[live]), 1)
        s_init = float(np.clip(-slope, 1e2, 1e7))
        x0_init = max(math.exp(logc) / coupling, 1e-12)
    else:
        s_init = 2.0 / span
        x0_init = max((float(gamma[0]) - g0_init) / coupling, 1e-12)
    fn, jac = trapping_model(coupling)
    res = nlls_fit(
        fn, tau, gamma, [x0_init, g0_init, s_init], sigma=sigma, jac=jac, cfg=cfg,
        bounds=([0.0, 0.0, 0.0], [np.inf, np.inf, np.inf]),
        names=("x_in", "gamma0", "s"),
    )
    return res["x_in"], res["gamma0"], res["s"], res


def fit_linear_weighted(x, y, sigma=None):
    """Closed-form weighted straight-line fit; p = (slope, intercept).

    Independent of the iterative engine on purpose: it doubles as the
    oracle for the linear-model checks.  Raises
    :class:`DegenerateDesignError` when all abscissas coincide.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        w = 1.0 / sigma**2
    else:
        w = np.ones_like(y)
    sw = w.sum()
    sx = (w * x).sum()
    sy = (w * y).sum()
    sxx = (w * x * x).sum()
    sxy = (w * x * y).sum()
    delta = sw * sxx - sx * sx
    if delta <= 1e-14 * sw * sxx or not np.isfinite(delta):
        raise DegenerateDesignError("all x values coincide; slope undefined")
    slope = (sw * sxy - sx * sy) / delta
    intercept = (sxx * sy - sx * sxy) / delta
    resid = (y - slope * x - intercept) * np.sqrt(w)
    chi2 = float(resid @ resid)
    dof = x.size - 2
    cov0 = np.array([[sw, -sx], [-sx, sxx]]) / delta
    scale = chi2 / dof if dof > 0 else 1.0
    diag0 = np.sqrt(np.diag(cov0))
    if sigma is not None:
        stderr = diag0 * max(1.0, math.sqrt(scale))
    else:
        stderr = diag0 * math.sqrt(scale)
    res = FitResult(
        params=np.array([slope, intercept]),
        stderr=stderr,
        covariance=cov0 * scale,
        chi2=chi2,
        dof=dof,
        converged=True,
        n_iter=0,
        chi2_history=[chi2],
        names=("slope", "intercept"),
        message="closed form",
    )
    return slope, intercept, res
