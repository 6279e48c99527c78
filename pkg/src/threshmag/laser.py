"""Single-mode semiconductor laser rate equations.

Carrier density N and mode photon density S obey

    dN/dt = eta_i I / (q V) - N / tau_N - (G / Gamma) S
    dS/dt = G S - S / tau_P + Gamma beta N / tau_N

with modal gain rate ``G = Gamma v_g g(N) (1 - eps S)`` in s^-1 and photon
lifetime ``tau_P = 1 / (v_g alpha_t)``. S is referred to the mode volume
V / Gamma, so the emitted power is ``eta_o h nu (V / Gamma) S / tau_P`` and
the analytic and numeric routes coincide for beta = eps = 0.
"""

from __future__ import annotations

import math
import sys
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .cavity import CavityGeometry, effective_reflectivity
from .constants import C_LIGHT, DEFAULT_GROUP_INDEX, Q_E, photon_energy

GAIN_MODELS = ("linear", "logarithmic")

# Typical III-nitride ranges; values outside only warn.
TABLE_RANGES = {
    "N_tr": (3e24, 2e25),
    "tau_N": (1e-9, 5e-9),
    "a": (1e-22, 1e-17),
    "Gamma": (0.01, 0.1),
    "beta": (1e-5, 1e-2),
}


class ParameterRangeWarning(UserWarning):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (last residual {residual:.3e})")


@dataclass(frozen=True)
class DiodeParams:
    N_tr: float = 1e25  # m^-3
    a: float = 5e-20  # m^2
    Gamma: float = 0.02
    epsilon: float = 0.0  # m^3
    beta: float = 0.0
    tau_N: float = 4e-9  # s
    V: float = 1.25e-16  # m^3
    eta_i: float = 1.0
    wavelength: float = 532e-9  # m
    gain_model: str = "linear"
    group_index: float = DEFAULT_GROUP_INDEX

    def __post_init__(self):
        for name in ("N_tr", "a", "tau_N", "V", "wavelength", "group_index"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if not (0.0 < self.Gamma <= 1.0):
            raise ValueError(f"Gamma must lie in (0, 1], got {self.Gamma}")
        if not (0.0 < self.eta_i <= 1.0):
            raise ValueError(f"eta_i must lie in (0, 1], got {self.eta_i}")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError("epsilon must be finite and >= 0")
        if self.gain_model not in GAIN_MODELS:
            raise ValueError(f"gain_model must be one of {GAIN_MODELS}")

    @property
    def v_g(self) -> float:
        return C_LIGHT / self.group_index

    def with_(self, **changes) -> "DiodeParams":
        return replace(self, **changes)

    def range_warnings(self) -> list[str]:
        out = []
        for name, (lo, hi) in TABLE_RANGES.items():
            v = getattr(self, name)
            if name == "beta" and v == 0:
                continue
            if not (lo <= v <= hi):
                out.append(f"{name}={v:g} outside typical range [{lo:g}, {hi:g}]")
        return out

    def warn_ranges(self) -> None:
        for msg in self.range_warnings():
            warnings.warn(msg, ParameterRangeWarning, stacklevel=2)


@dataclass(frozen=True)
class SteadyState:
    N: float
    S: float
    P_out: float


def material_gain(diode: DiodeParams, N: float) -> float:
    """Per-length material gain g(N) in m^-1 (negative below transparency)."""
    if diode.gain_model == "linear":
        return diode.a * (N - diode.N_tr)
    if N <= 0:
        raise ValueError("logarithmic gain needs N > 0")
    # g0 = a N_tr matches the linear slope at transparency
    return diode.a * diode.N_tr * math.log(N / diode.N_tr)


def gain(diode: DiodeParams, N: float, S: float = 0.0) -> float:
    """Modal gain rate G = Gamma v_g g(N) (1 - eps S), in s^-1."""
    if N < 0:
        raise ValueError("N must be >= 0")
    return diode.Gamma * diode.v_g * material_gain(diode, N) * (1.0 - diode.epsilon * S)


def threshold_carrier_density(diode: DiodeParams, alpha_t: float) -> float:
    if alpha_t < 0:
        raise ValueError("alpha_t must be >= 0")
    if diode.gain_model == "linear":
        return diode.N_tr + alpha_t / (diode.Gamma * diode.a)
    return diode.N_tr * math.exp(alpha_t / (diode.Gamma * diode.a * diode.N_tr))


def threshold_current(diode: DiodeParams, alpha_t: float) -> float:
    """I_th = q V N_th / (eta_i tau_N)."""
    return Q_E * diode.V * threshold_carrier_density(diode, alpha_t) / (diode.eta_i * diode.tau_N)


def slope_efficiency(diode: DiodeParams, eta_o: float) -> float:
    """dP/dI above threshold, W/A."""
    return eta_o * diode.eta_i * photon_energy(diode.wavelength) / Q_E


def output_power_analytic(diode: DiodeParams, alpha_t: float, I: float, eta_o: float) -> float:
    """P = eta_o eta_i (hc / q lambda)(I - I_th), zero below threshold."""
    return max(0.0, slope_efficiency(diode, eta_o) * (I - threshold_current(diode, alpha_t)))


def output_coupling_efficiency(
    geom: CavityGeometry, alpha_e: float, alpha_c: float | None = None, R_e: float | None = None
) -> float:
    """Fraction of the cavity loss that leaves through R1."""
    if alpha_c is None:
        alpha_c = geom.alpha_c
    if R_e is None:
        R_e = effective_reflectivity(geom)
    out = math.log(1.0 / math.sqrt(geom.R1))
    denom = math.log(1.0 / math.sqrt(geom.R1 * R_e)) + (alpha_e + alpha_c) * geom.length
    if denom <= 0:
        raise ValueError("zero total cavity loss: output coupling efficiency undefined")
    return out / denom


def photon_lifetime(diode: DiodeParams, alpha_t: float) -> float:
    if alpha_t <= 0:
        raise ValueError("photon lifetime needs alpha_t > 0")
    return 1.0 / (diode.v_g * alpha_t)


def _carrier_density(diode: DiodeParams, J: float, S: float) -> float:
    """N solving dN/dt = 0 for given photon density S and injection J."""
    u = 1.0 - diode.epsilon * S
    b = diode.v_g * u * S
    inv_tau = 1.0 / diode.tau_N
    if diode.gain_model == "linear":
        return (J + b * diode.a * diode.N_tr) / (inv_tau + b * diode.a)
    if J == 0.0:
        return 0.0
    n_free = J * diode.tau_N
    if b == 0.0:
        return n_free
    c = b * diode.a * diode.N_tr

    def h(N):
        return J - N * inv_tau - c * math.log(N / diode.N_tr)

    lo, hi = sorted((n_free, diode.N_tr))
    if lo == hi:
        return lo
    return brentq(h, lo, hi, xtol=1e-300, rtol=_RTOL, maxiter=400)


MAX_ITER = 500
_RTOL = 4 * sys.float_info.epsilon


def solve_steady_state(diode: DiodeParams, alpha_t: float, I: float, eta_o: float = 1.0) -> SteadyState:
    """Steady state of the rate equations at drive current ``I``.

    The carrier equation is solved for N(S) and substituted into the photon
    equation, leaving a scalar root in S. The bracket starts at the analytic
    above-threshold photon density (or the spontaneous-only estimate) and is
    doubled until the residual changes sign; Brent's method then refines it.
    A damped fixed-point iteration is the fallback if the bracket fails.
    """
    if not (math.isfinite(I) and I >= 0):
        raise ValueError("I must be finite and >= 0")
    tau_p = photon_lifetime(diode, alpha_t)
    J = diode.eta_i * I / (Q_E * diode.V)
    G_ = diode.Gamma
    spont = G_ * diode.beta / diode.tau_N
    s_cap = math.inf if diode.epsilon == 0 else (1.0 - 1e-12) / diode.epsilon

    def power(S):
        return eta_o * photon_energy(diode.wavelength) * (diode.V / G_) * S / tau_p

    if I == 0.0:
        return SteadyState(0.0, 0.0, 0.0)

    def net_gain(S):
        N = _carrier_density(diode, J, S)
        return gain(diode, N, S) - 1.0 / tau_p, N

    i_th = threshold_current(diode, alpha_t)
    s_lin = max(G_ * tau_p * diode.eta_i * (I - i_th) / (Q_E * diode.V), 0.0)

    if diode.beta == 0.0:
        g0, N0 = net_gain(0.0)
        if g0 <= 0.0:
            return SteadyState(N0, 0.0, 0.0)

        def f(S):
            return net_gain(S)[0]
    else:
        def f(S):
            N = _carrier_density(diode, J, S)
            # divided by S + scale so the function stays O(rate) at S -> 0
            return (gain(diode, N, S) * S - S / tau_p + spont * N) / (S + 1.0)

    hi = min(max(s_lin, spont * J * diode.tau_N * tau_p, 1.0) * 2.0, s_cap)
    lo = 0.0
    n_expand = 0
    while f(hi) > 0:
        if hi >= s_cap:
            break
        lo = hi
        hi = min(hi * 2.0, s_cap)
        n_expand += 1
        if n_expand > 2000:
            break
    try:
        if diode.beta == 0.0:
            # f(0) > 0 here; S = 0 is a trivial root of the undivided residual
            S = brentq(f, max(lo, 0.0), hi, xtol=1e-300, rtol=_RTOL, maxiter=MAX_ITER)
        else:
            S = brentq(f, lo, hi, xtol=1e-300, rtol=_RTOL, maxiter=MAX_ITER)
    except (ValueError, RuntimeError):
        S = _fixed_point(diode, J, tau_p, spont, s_lin)
    N = _carrier_density(diode, J, S)
    res = _residual(diode, J, tau_p, spont, N, S)
    if res > 1e-10:
        raise ConvergenceError("steady state did not converge", res)
    return SteadyState(N, S, power(S))


def _residual(diode, J, tau_p, spont, N, S) -> float:
    G = gain(diode, N, S)
    # G ~ (N - N_tr) cancels when N sits just above transparency; scale by the
    # gross gain N dG/dN so the residual measures solver error, not rounding
    dgdn = diode.a if diode.gain_model == "linear" else diode.a * diode.N_tr / N
    gross = diode.Gamma * diode.v_g * dgdn * N * abs(1.0 - diode.epsilon * S) * S
    dn_terms = (J, N / diode.tau_N, G / diode.Gamma * S, gross / diode.Gamma)
    ds_terms = (G * S, S / tau_p, spont * N, gross)
    dn = J - dn_terms[1] - dn_terms[2]
    ds = ds_terms[0] - ds_terms[1] + ds_terms[2]
    rn = abs(dn) / max(max(abs(t) for t in dn_terms), 1e-300)
    rs = abs(ds) / max(max(abs(t) for t in ds_terms), 1e-300)
    return max(rn, rs)


def _fixed_point(diode, J, tau_p, spont, s_start, damping=0.5) -> float:
    S = max(s_start, 1.0)
    res = math.inf
    for _ in range(MAX_ITER * 10):
        N = _carrier_density(diode, J, S)
        loss = 1.0 / tau_p - gain(diode, N, S)
        if loss <= 0:
            S *= 2.0
            continue
        target = spont * N / loss if spont > 0 else 0.0
        S_new = (1.0 - damping) * S + damping * target
        res = _residual(diode, J, tau_p, spont, _carrier_density(diode, J, S_new), S_new)
        S = S_new
        if res <= 1e-12:
            return S
    raise ConvergenceError("fixed-point fallback exhausted its iteration budget", res)


def kink_ratio(currents, powers, window: int = 5) -> float:
    """Largest step in dP/dI relative to the mean step of its neighbours.

    A threshold kink is one isolated step, so the ratio blows up (inf for the
    hard beta = 0 knee); a smooth curve sampled finely enough stays near 1.
    The grid has to resolve the knee for the number to mean anything.
    """
    i = np.asarray(currents, dtype=float)
    p = np.asarray(powers, dtype=float)
    if i.size < 2 * window + 3:
        raise ValueError(f"need at least {2 * window + 3} points")
    steps = np.abs(np.diff(np.diff(p) / np.diff(i)))
    worst = 0.0
    for k in range(steps.size):
        nb = np.concatenate([steps[max(0, k - window) : k], steps[k + 1 : k + 1 + window]])
        local = float(nb.mean())
        if local > 0:
            worst = max(worst, steps[k] / local)
        elif steps[k] > 0:
            return math.inf
    return worst
